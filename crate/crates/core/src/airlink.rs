//! Uplink front end: additive noise, one-bit quantization and the split into
//! full-resolution and one-bit streams.

use ndarray::{Array1, Array2, Array3, ArrayView3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{self, Graph, Var};

pub use crate::graph::{hard_sign, softsign, softsign_grad};

/// Quantizer used during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Surrogate {
    /// Hard sign forward, softsign derivative backward.
    #[default]
    SignForward,
    /// Softsign in both directions.
    SoftsignBoth,
}

/// Applies the quantization layer to a graph node.
pub fn quantize(g: &mut Graph, z: Var, surrogate: Surrogate, kappa: f64) -> Var {
    match surrogate {
        Surrogate::SignForward => g.sign_ste(z, kappa),
        Surrogate::SoftsignBoth => g.softsign(z, kappa),
    }
}

/// Steepness used at a given epoch. `step = 0` keeps it fixed.
pub fn kappa_at(epoch: usize, kappa: f64, step: f64, max: f64) -> f64 {
    if step == 0.0 {
        kappa
    } else {
        (kappa + step * epoch as f64).min(max)
    }
}

/// Antenna split between full-resolution (`A`) and one-bit (`B`) RF chains.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionMasks {
    m: usize,
    /// Sorted, 0-based.
    pub set_a: Vec<usize>,
    /// Sorted, 0-based.
    pub set_b: Vec<usize>,
}

impl SelectionMasks {
    pub fn from_set_a(m: usize, set_a: &[usize]) -> Result<Self> {
        let mut flags = vec![false; m];
        for &i in set_a {
            if i >= m {
                return Err(Error::Domain(format!("antenna index {i} out of range 0..{m}")));
            }
            if flags[i] {
                return Err(Error::Domain(format!("antenna index {i} listed twice")));
            }
            flags[i] = true;
        }
        Ok(Self::from_flags(&flags))
    }

    pub fn from_flags(flags: &[bool]) -> Self {
        let set_a = (0..flags.len()).filter(|&i| flags[i]).collect();
        let set_b = (0..flags.len()).filter(|&i| !flags[i]).collect();
        Self {
            m: flags.len(),
            set_a,
            set_b,
        }
    }

    pub fn all_one_bit(m: usize) -> Self {
        Self::from_flags(&vec![false; m])
    }

    pub fn all_full(m: usize) -> Self {
        Self::from_flags(&vec![true; m])
    }

    /// `m_a` full-resolution chains spread evenly over the array, starting at
    /// antenna 0.
    pub fn equispaced(m: usize, m_a: usize) -> Result<Self> {
        if m_a > m {
            return Err(Error::Domain(format!("M_A = {m_a} exceeds M = {m}")));
        }
        let set: Vec<usize> = (0..m_a).map(|i| i * m / m_a.max(1)).collect();
        Self::from_set_a(m, &set)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn m_a(&self) -> usize {
        self.set_a.len()
    }

    /// Indicator vector `a`.
    pub fn a(&self) -> Array1<f64> {
        let mut a = Array1::zeros(self.m);
        for &i in &self.set_a {
            a[i] = 1.0;
        }
        a
    }

    /// Indicator vector `b = 1 − a`.
    pub fn b(&self) -> Array1<f64> {
        self.a().mapv(|v| 1.0 - v)
    }

    /// Row `r` of a real-stacked signal (`2M` rows) is full resolution.
    pub fn row_is_full(&self, r: usize) -> bool {
        self.set_a.binary_search(&(r % self.m)).is_ok()
    }
}

/// Received pilot block in real-stacked form, batched over samples.
#[derive(Clone, Debug)]
pub struct Observation {
    /// `[n, 2M, Np]` unquantized.
    pub ztilde: Array3<f64>,
    /// `[n, 2M, Np]`, entries ±1.
    pub zsign: Array3<f64>,
    /// Masked full-resolution stream.
    pub ya: Array3<f64>,
    /// Masked one-bit stream.
    pub yb: Array3<f64>,
    pub sigma2: f64,
}

impl Observation {
    pub fn new(ztilde: Array3<f64>, masks: &SelectionMasks, sigma2: f64) -> Self {
        let zsign = hard_sign_array(&ztilde);
        let (ya, yb) = apply_masks(ztilde.view(), zsign.view(), masks);
        Self {
            ztilde,
            zsign,
            ya,
            yb,
            sigma2,
        }
    }
}

/// i.i.d. real Gaussian noise with variance `σ²/2` per entry.
pub fn noise<R: Rng>(shape: (usize, usize, usize), sigma2: f64, rng: &mut R) -> Array3<f64> {
    let n = Normal::new(0.0, (sigma2 / 2.0).sqrt()).expect("nonnegative variance");
    Array3::from_shape_simple_fn(shape, || n.sample(rng))
}

/// `H̃ P̃ + W̃` for every sample. `htilde: [n, 2M, 2K]`, `ptilde: [2K, Np]`.
pub fn transmit<R: Rng>(
    htilde: ArrayView3<f64>,
    ptilde: &Array2<f64>,
    sigma2: f64,
    rng: &mut R,
) -> Result<Array3<f64>> {
    if !(sigma2 > 0.0) {
        return Err(Error::Domain(format!("noise variance {sigma2} must be positive")));
    }
    let mut z = noiseless(htilde, ptilde)?;
    z += &noise(z.dim(), sigma2, rng);
    Ok(z)
}

/// `H̃ P̃` for every sample.
pub fn noiseless(htilde: ArrayView3<f64>, ptilde: &Array2<f64>) -> Result<Array3<f64>> {
    let (n, rows, cols) = htilde.dim();
    if cols != ptilde.nrows() {
        return Err(Error::Shape(format!(
            "channel has {cols} columns but pilot has {} rows",
            ptilde.nrows()
        )));
    }
    let np = ptilde.ncols();
    let flat = htilde
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n * rows, cols))
        .expect("contiguous");
    let z = flat.dot(ptilde);
    Ok(z.into_shape_with_order((n, rows, np)).expect("reshape"))
}

pub fn hard_sign_array(z: &Array3<f64>) -> Array3<f64> {
    z.mapv(graph::hard_sign)
}

/// `Ya = [a; a] ⊙ Z̃`, `Yb = [b; b] ⊙ sign(Z̃)`.
pub fn apply_masks(
    ztilde: ArrayView3<f64>,
    zsign: ArrayView3<f64>,
    masks: &SelectionMasks,
) -> (Array3<f64>, Array3<f64>) {
    let mut ya = ztilde.to_owned();
    let mut yb = zsign.to_owned();
    let rows = ya.dim().1;
    assert_eq!(rows, 2 * masks.m(), "signal rows must be 2M");
    for r in 0..rows {
        let full = masks.row_is_full(r);
        if full {
            yb.index_axis_mut(ndarray::Axis(1), r).fill(0.0);
        } else {
            ya.index_axis_mut(ndarray::Axis(1), r).fill(0.0);
        }
    }
    (ya, yb)
}
