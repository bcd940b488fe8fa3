//! Trainable pilot matrix with the total-power constraint built into the
//! forward pass, and the Zadoff-Chu baseline pilots.

use ndarray::{Array2, Array3, ArrayView3};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::airlink;
use crate::channel::stack_rows;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};

/// Raw (unnormalized) pilot weights `P̃_raw ∈ R^{2K × Np}`.
#[derive(Clone, Debug, PartialEq)]
pub struct PilotWeights {
    pub raw: Array2<f64>,
    pub rho: f64,
}

impl PilotWeights {
    /// i.i.d. `N(0, 1/(2K))` initialization.
    pub fn init<R: Rng>(k: usize, np: usize, rho: f64, rng: &mut R) -> Self {
        let n = Normal::new(0.0, (1.0 / (2 * k) as f64).sqrt()).expect("positive std");
        Self {
            raw: Array2::from_shape_simple_fn((2 * k, np), || n.sample(rng)),
            rho,
        }
    }

    pub fn np(&self) -> usize {
        self.raw.ncols()
    }
}

/// `sqrt(Np·ρ) · P̃_raw / ‖P̃_raw‖_F`.
pub fn normalized_pilot(w: &PilotWeights) -> Result<Array2<f64>> {
    normalize_power(&w.raw, w.rho)
}

pub fn normalize_power(raw: &Array2<f64>, rho: f64) -> Result<Array2<f64>> {
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::DegeneratePilot);
    }
    let target = (raw.ncols() as f64 * rho).sqrt();
    Ok(raw * (target / norm))
}

/// Graph version of [`normalize_power`]; differentiable in `raw`.
pub fn normalized_pilot_var(g: &mut Graph, raw: Var, np: usize, rho: f64) -> Var {
    let sq = g.pow_const(raw, 2.0);
    let energy = g.sum(sq);
    let inv_norm = g.pow_const(energy, -0.5);
    let factor = g.scale(inv_norm, (np as f64 * rho).sqrt());
    g.scale_by(raw, factor)
}

/// `H̃ · normalized_pilot(w)` for every channel in the batch.
pub fn pdnet_forward(htilde: ArrayView3<f64>, w: &PilotWeights) -> Result<Array3<f64>> {
    let p = normalized_pilot(w)?;
    airlink::noiseless(htilde, &p)
}

/// Root-1 Zadoff-Chu sequence of length `np`.
pub fn zadoff_chu(np: usize) -> Vec<Complex64> {
    let n_len = np as f64;
    (0..np)
        .map(|n| {
            let n = n as f64;
            let arg = if np % 2 == 0 { n * n } else { n * (n + 1.0) };
            Complex64::from_polar(1.0, -std::f64::consts::PI * arg / n_len)
        })
        .collect()
}

/// `K` circular shifts of the ZC sequence spaced by `⌊Np/K⌋`, scaled so that
/// `‖P̃‖_F² = Np·ρ`. Returns the complex `[K, Np]` matrix and its real stack
/// `[2K, Np]`.
pub fn zc_pilots(np: usize, k: usize, rho: f64) -> Result<(Array2<Complex64>, Array2<f64>)> {
    if k == 0 || np < k {
        return Err(Error::InfeasibleShift { np, k });
    }
    let z = zadoff_chu(np);
    let shift = np / k;
    let amp = (rho / k as f64).sqrt();
    let p = Array2::from_shape_fn((k, np), |(row, n)| z[(n + row * shift) % np] * amp);
    let ptilde = stack_rows(p.view());
    Ok((p, ptilde))
}
