//! Multipath ULA channel synthesis and the real-stacked representation.
//!
//! Each user sees `L` paths with gain `α` and direction of arrival `θ`; the
//! channel is `h_k = Σ_l α_{k,l} a(θ_{k,l})` with the half-wavelength steering
//! vector `a(θ)_m = exp(−jπ m sin θ)`. A scenario draws the initial DOAs and
//! gains once; every sample then perturbs them independently.

use ndarray::{s, Array2, Array3, ArrayView2};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest |DOA| a perturbed path may reach; the open interval (−90°, 90°)
/// is approximated by clipping just inside it.
pub const DOA_LIMIT_DEG: f64 = 90.0 - 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    /// Antennas at the base station.
    pub m: usize,
    /// Single-antenna users.
    pub k: usize,
    /// Paths per user.
    pub l: usize,
    pub doa_range_deg: (f64, f64),
    pub doa_jitter_deg: f64,
    pub gain_var: f64,
    pub gain_jitter_var: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl ChannelSpec {
    /// The dataset recipe used for the full-size experiments.
    pub fn full_scale(seed: u64) -> Self {
        Self {
            m: 64,
            k: 8,
            l: 3,
            doa_range_deg: (-80.0, 80.0),
            doa_jitter_deg: 4.0,
            gain_var: 1.0,
            gain_jitter_var: 0.04,
            n_train: 100_000,
            n_test: 5_000,
            seed,
        }
    }

    /// Desk-scale variant (M=16, K=2, L=2, 2000/200 samples).
    pub fn desk_scale(seed: u64) -> Self {
        Self {
            m: 16,
            k: 2,
            l: 2,
            n_train: 2000,
            n_test: 200,
            ..Self::full_scale(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.k == 0 || self.l == 0 {
            return Err(Error::Config("M, K and L must be at least 1".into()));
        }
        let (lo, hi) = self.doa_range_deg;
        if !(lo > -90.0 && hi < 90.0 && lo <= hi) {
            return Err(Error::Config(format!(
                "DOA range [{lo}, {hi}] must lie inside (-90, 90)"
            )));
        }
        if !(self.doa_jitter_deg >= 0.0) {
            return Err(Error::Config("DOA jitter must be nonnegative".into()));
        }
        if !(self.gain_var > 0.0 && self.gain_jitter_var > 0.0) {
            return Err(Error::Config("gain variances must be positive".into()));
        }
        Ok(())
    }

    pub fn samples(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Test => self.n_test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn stream_tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }
}

/// Complex channels with their real-stacked forms.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelBatch {
    /// `[n, M, K]`
    pub h: Array3<Complex64>,
    /// `[n, 2M, 2K]`
    pub htilde: Array3<f64>,
    /// `[n, 2M, K]`, the first K columns of `htilde`.
    pub htarget: Array3<f64>,
    /// Factor applied to every raw sample so the batch-average `‖h_k‖²` is M.
    pub scale: f64,
}

impl ChannelBatch {
    pub fn len(&self) -> usize {
        self.h.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn m(&self) -> usize {
        self.h.shape()[1]
    }

    pub fn k(&self) -> usize {
        self.h.shape()[2]
    }

    /// Builds a batch from complex channels without renormalizing.
    pub fn from_complex(h: Array3<Complex64>) -> Self {
        let (n, m, k) = h.dim();
        let mut htilde = Array3::zeros((n, 2 * m, 2 * k));
        let mut htarget = Array3::zeros((n, 2 * m, k));
        for i in 0..n {
            let (ht, tg) = real_stack(h.slice(s![i, .., ..]));
            htilde.slice_mut(s![i, .., ..]).assign(&ht);
            htarget.slice_mut(s![i, .., ..]).assign(&tg);
        }
        Self {
            h,
            htilde,
            htarget,
            scale: 1.0,
        }
    }

    /// Rows `idx` of the batch, in that order.
    pub fn select(&self, idx: &[usize]) -> ChannelBatch {
        ChannelBatch {
            h: self.h.select(ndarray::Axis(0), idx),
            htilde: self.htilde.select(ndarray::Axis(0), idx),
            htarget: self.htarget.select(ndarray::Axis(0), idx),
            scale: self.scale,
        }
    }
}

/// `a(θ)_m = exp(−jπ m sin θ)`, `m = 0..M`.
pub fn steering_vector(theta_deg: f64, m: usize) -> Result<Vec<Complex64>> {
    if !(theta_deg > -90.0 && theta_deg < 90.0) {
        return Err(Error::Domain(format!(
            "steering angle {theta_deg} deg outside (-90, 90)"
        )));
    }
    if m == 0 {
        return Err(Error::Domain("antenna count must be positive".into()));
    }
    Ok(steering_unchecked(theta_deg, m))
}

fn steering_unchecked(theta_deg: f64, m: usize) -> Vec<Complex64> {
    let phase = -std::f64::consts::PI * theta_deg.to_radians().sin();
    (0..m)
        .map(|i| Complex64::from_polar(1.0, phase * i as f64))
        .collect()
}

/// Real-stacked channel `[Re H, −Im H; Im H, Re H]` and its first K columns.
pub fn real_stack(h: ArrayView2<Complex64>) -> (Array2<f64>, Array2<f64>) {
    let (m, k) = h.dim();
    let mut ht = Array2::zeros((2 * m, 2 * k));
    for i in 0..m {
        for j in 0..k {
            let z = h[[i, j]];
            ht[[i, j]] = z.re;
            ht[[i, j + k]] = -z.im;
            ht[[i + m, j]] = z.im;
            ht[[i + m, j + k]] = z.re;
        }
    }
    let target = ht.slice(s![.., ..k]).to_owned();
    (ht, target)
}

/// Real stacking `[Re X; Im X]` of a complex matrix.
pub fn stack_rows(x: ArrayView2<Complex64>) -> Array2<f64> {
    let (r, c) = x.dim();
    let mut out = Array2::zeros((2 * r, c));
    for i in 0..r {
        for j in 0..c {
            out[[i, j]] = x[[i, j]].re;
            out[[i + r, j]] = x[[i, j]].im;
        }
    }
    out
}

/// Scenario parameters drawn once per seed and shared by every sample.
#[derive(Clone, Debug)]
pub struct Scenario {
    /// `[K][L]` initial DOAs in degrees.
    pub doa_deg: Vec<Vec<f64>>,
    /// `[K][L]` initial complex gains.
    pub gain: Vec<Vec<Complex64>>,
}

fn complex_normal<R: Rng>(rng: &mut R, var: f64) -> Complex64 {
    let n = Normal::new(0.0, (var / 2.0).sqrt()).expect("positive variance");
    Complex64::new(n.sample(rng), n.sample(rng))
}

impl Scenario {
    pub fn draw(spec: &ChannelSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(0);
        let (lo, hi) = spec.doa_range_deg;
        let doa = Uniform::new_inclusive(lo, hi);
        let doa_deg = (0..spec.k)
            .map(|_| (0..spec.l).map(|_| doa.sample(&mut rng)).collect())
            .collect();
        let gain = (0..spec.k)
            .map(|_| {
                (0..spec.l)
                    .map(|_| complex_normal(&mut rng, spec.gain_var))
                    .collect()
            })
            .collect();
        Self { doa_deg, gain }
    }

    /// One perturbed channel `[M, K]`; `rng` must be dedicated to the sample.
    fn sample<R: Rng>(&self, spec: &ChannelSpec, rng: &mut R) -> Array2<Complex64> {
        let jitter = Uniform::new_inclusive(-spec.doa_jitter_deg, spec.doa_jitter_deg);
        let mut h = Array2::zeros((spec.m, spec.k));
        for k in 0..spec.k {
            for l in 0..spec.l {
                let theta = (self.doa_deg[k][l] + jitter.sample(rng))
                    .clamp(-DOA_LIMIT_DEG, DOA_LIMIT_DEG);
                let alpha = self.gain[k][l] + complex_normal(rng, spec.gain_jitter_var);
                for (m, a) in steering_unchecked(theta, spec.m).into_iter().enumerate() {
                    h[[m, k]] += alpha * a;
                }
            }
        }
        h
    }
}

/// Per-sample generator: the stream index encodes split and sample number, so
/// results do not depend on how samples are distributed over workers.
fn sample_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split.stream_tag() << 48) | index as u64);
    rng
}

pub fn synthesize_batch(spec: &ChannelSpec, split: Split) -> Result<ChannelBatch> {
    spec.validate()?;
    let scenario = Scenario::draw(spec);
    let n = spec.samples(split);
    let samples: Vec<Array2<Complex64>> = (0..n)
        .into_par_iter()
        .map(|i| scenario.sample(spec, &mut sample_rng(spec.seed, split, i)))
        .collect();
    let mut h = Array3::zeros((n, spec.m, spec.k));
    for (i, s) in samples.iter().enumerate() {
        h.slice_mut(s![i, .., ..]).assign(s);
    }
    let scale = if n == 0 {
        1.0
    } else {
        let mean_power = h.iter().map(|z| z.norm_sqr()).sum::<f64>() / (n * spec.k) as f64;
        (spec.m as f64 / mean_power).sqrt()
    };
    h.mapv_inplace(|z| z * scale);
    let mut batch = ChannelBatch::from_complex(h);
    batch.scale = scale;
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Complex64, b: Complex64, tol: f64) -> bool {
        (a - b).norm() < tol
    }

    #[test]
    fn steering_broadside_is_all_ones() {
        let a = steering_vector(0.0, 4).unwrap();
        assert!(a.iter().all(|&z| close(z, Complex64::new(1.0, 0.0), 1e-15)));
    }

    #[test]
    fn steering_thirty_degrees() {
        let a = steering_vector(30.0, 2).unwrap();
        assert!(close(a[0], Complex64::new(1.0, 0.0), 1e-15));
        assert!(close(a[1], Complex64::new(0.0, -1.0), 1e-12));
    }

    #[test]
    fn steering_endfire_limit() {
        let a = steering_vector(90.0 - 1e-7, 2).unwrap();
        assert!(close(a[1], Complex64::new(-1.0, 0.0), 1e-9));
        assert!(matches!(steering_vector(90.0, 2), Err(Error::Domain(_))));
        assert!(matches!(steering_vector(-95.0, 2), Err(Error::Domain(_))));
    }

    #[test]
    fn steering_norm_is_m() {
        for theta in [-89.0, -45.0, -3.3, 0.0, 17.0, 80.0] {
            let a = steering_vector(theta, 13).unwrap();
            let p: f64 = a.iter().map(|z| z.norm_sqr()).sum();
            assert!((p - 13.0).abs() < 1e-12);
        }
    }

    #[test]
    fn real_stack_of_j() {
        let h = Array2::from_elem((1, 1), Complex64::new(0.0, 1.0));
        let (ht, tg) = real_stack(h.view());
        assert_eq!(ht, ndarray::arr2(&[[0.0, -1.0], [1.0, 0.0]]));
        assert_eq!(tg, ndarray::arr2(&[[0.0], [1.0]]));
    }

    #[test]
    fn real_stack_of_real_matrix_is_block_diagonal() {
        let h = ndarray::arr2(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).mapv(|v| Complex64::new(v, 0.0));
        let (ht, _) = real_stack(h.view());
        assert_eq!(ht.slice(s![..3, ..2]), h.mapv(|z| z.re));
        assert_eq!(ht.slice(s![3.., 2..]), h.mapv(|z| z.re));
        assert!(ht.slice(s![..3, 2..]).iter().all(|&v| v == 0.0));
        assert!(ht.slice(s![3.., ..2]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_path_broadside_channel_is_all_ones() {
        let spec = ChannelSpec {
            m: 5,
            k: 1,
            l: 1,
            ..ChannelSpec::desk_scale(0)
        };
        let scenario = Scenario {
            doa_deg: vec![vec![0.0]],
            gain: vec![vec![Complex64::new(1.0, 0.0)]],
        };
        let zero_jitter = ChannelSpec {
            doa_jitter_deg: 0.0,
            gain_jitter_var: 1e-300,
            ..spec
        };
        let h = scenario.sample(&zero_jitter, &mut sample_rng(0, Split::Train, 0));
        assert!(h.iter().all(|&z| close(z, Complex64::new(1.0, 0.0), 1e-12)));
    }

    #[test]
    fn batch_is_deterministic_and_normalized() {
        let spec = ChannelSpec {
            n_train: 64,
            n_test: 8,
            ..ChannelSpec::desk_scale(11)
        };
        let a = synthesize_batch(&spec, Split::Train).unwrap();
        let b = synthesize_batch(&spec, Split::Train).unwrap();
        assert_eq!(a, b);
        let mean: f64 = a.h.iter().map(|z| z.norm_sqr()).sum::<f64>() / (64 * spec.k) as f64;
        assert!((mean - spec.m as f64).abs() < 1e-9);
        let t = synthesize_batch(&spec, Split::Test).unwrap();
        assert_ne!(a.h.slice(s![0, .., ..]), t.h.slice(s![0, .., ..]));
    }

    #[test]
    fn batch_is_independent_of_worker_count() {
        let spec = ChannelSpec {
            n_train: 40,
            ..ChannelSpec::desk_scale(3)
        };
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let a = pool.install(|| synthesize_batch(&spec, Split::Train).unwrap());
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = single.install(|| synthesize_batch(&spec, Split::Train).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn htilde_times_x_matches_complex_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cn = |rng: &mut ChaCha8Rng| complex_normal(rng, 1.0);
        let h = Array2::from_shape_fn((2, 2), |_| cn(&mut rng));
        let x = Array2::from_shape_fn((2, 1), |_| cn(&mut rng));
        let (ht, _) = real_stack(h.view());
        let lhs = ht.dot(&stack_rows(x.view()));
        let rhs = stack_rows(h.dot(&x).view());
        for (a, b) in lhs.iter().zip(rhs.iter()) {
            assert!((a - b).abs() < 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let base = ChannelSpec::desk_scale(0);
        let bad = [
            ChannelSpec { m: 0, ..base.clone() },
            ChannelSpec { doa_range_deg: (-95.0, 10.0), ..base.clone() },
            ChannelSpec { gain_var: 0.0, ..base.clone() },
        ];
        for spec in bad {
            assert!(synthesize_batch(&spec, Split::Train).is_err());
        }
    }
}
