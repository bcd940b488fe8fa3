//! Payload detection under mixed quantization: the relaxed (convex) near-ML
//! detector and the exhaustive ML reference.

use ndarray::{Array2, ArrayView1, ArrayView2};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use statrs::function::erf::erfc;

use crate::airlink::SelectionMasks;
use crate::error::{Error, Result};
use crate::graph::hard_sign;
use crate::modulation::Constellation;

pub const MAX_ITERS: usize = 500;
pub const STEP_TOL: f64 = 1e-8;
/// Below this argument `log Φ` continues along its tangent line.
pub const LOG_PHI_FLOOR: f64 = -30.0;

/// `log Φ(t)`, continued linearly below [`LOG_PHI_FLOOR`] so that it stays
/// finite and concave.
pub fn log_phi(t: f64) -> f64 {
    if t < LOG_PHI_FLOOR {
        log_phi_raw(LOG_PHI_FLOOR) + mills(LOG_PHI_FLOOR) * (t - LOG_PHI_FLOOR)
    } else {
        log_phi_raw(t)
    }
}

/// Derivative of [`log_phi`].
pub fn log_phi_grad(t: f64) -> f64 {
    mills(t.max(LOG_PHI_FLOOR))
}

fn log_phi_raw(t: f64) -> f64 {
    (0.5 * erfc(-t / std::f64::consts::SQRT_2)).ln()
}

/// `φ(t) / Φ(t)`.
fn mills(t: f64) -> f64 {
    let pdf = (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    pdf / (0.5 * erfc(-t / std::f64::consts::SQRT_2))
}

/// One received vector with its likelihood model.
#[derive(Clone, Debug)]
pub struct Problem<'a> {
    /// Real-stacked channel `[2M, 2K]`.
    pub h: ArrayView2<'a, f64>,
    /// `[2M]`: unquantized entries on full-resolution rows, ±1 elsewhere.
    pub y: ArrayView1<'a, f64>,
    pub masks: &'a SelectionMasks,
    pub sigma2: f64,
    pub rho: f64,
}

impl Problem<'_> {
    fn check(&self) -> Result<()> {
        let (rows, cols) = self.h.dim();
        if rows != 2 * self.masks.m() || cols % 2 != 0 || self.y.len() != rows {
            return Err(Error::Shape(format!(
                "channel {:?}, observation {}, M = {}",
                self.h.shape(),
                self.y.len(),
                self.masks.m()
            )));
        }
        if !(self.sigma2 > 0.0 && self.rho > 0.0) {
            return Err(Error::Domain("sigma2 and rho must be positive".into()));
        }
        Ok(())
    }

    /// `Σ_B log Φ(√(2/σ²)·yᵢ·hᵢᵀx) − Σ_A (hⱼᵀx − yⱼ)²/σ²`.
    pub fn objective(&self, x: &[f64]) -> f64 {
        let c = (2.0 / self.sigma2).sqrt();
        let x = ArrayView1::from(x);
        (0..self.h.nrows())
            .map(|r| {
                let t = self.h.row(r).dot(&x);
                if self.masks.row_is_full(r) {
                    -(t - self.y[r]).powi(2) / self.sigma2
                } else {
                    log_phi(c * self.y[r] * t)
                }
            })
            .sum()
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let c = (2.0 / self.sigma2).sqrt();
        let xv = ArrayView1::from(x);
        let mut g = vec![0.0; x.len()];
        for r in 0..self.h.nrows() {
            let row = self.h.row(r);
            let t = row.dot(&xv);
            let w = if self.masks.row_is_full(r) {
                -2.0 * (t - self.y[r]) / self.sigma2
            } else {
                c * self.y[r] * log_phi_grad(c * self.y[r] * t)
            };
            for (gi, &hi) in g.iter_mut().zip(row.iter()) {
                *gi += w * hi;
            }
        }
        g
    }

    /// Upper bound on the Hessian norm from Frobenius norms of the two row
    /// groups.
    fn lipschitz(&self) -> f64 {
        let (mut fa, mut fb) = (0.0, 0.0);
        for r in 0..self.h.nrows() {
            let n2: f64 = self.h.row(r).iter().map(|v| v * v).sum();
            if self.masks.row_is_full(r) {
                fa += n2;
            } else {
                fb += n2;
            }
        }
        (2.0 * fa + 2.0 * fb) / self.sigma2
    }
}

/// Projection onto `‖x‖² ≤ ρ`.
pub fn project_ball(x: &mut [f64], rho: f64) {
    let n2: f64 = x.iter().map(|v| v * v).sum();
    if n2 > rho {
        let s = (rho / n2).sqrt();
        x.iter_mut().for_each(|v| *v *= s);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Relaxed {
    /// Real-stacked maximizer `[Re x; Im x]`.
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// False when the iteration budget ran out before the step tolerance
    /// was met; `x` is then the best iterate.
    pub converged: bool,
    /// Objective after every accepted iteration, starting at `x = 0`.
    pub trace: Vec<f64>,
}

/// Projected gradient ascent with backtracking on the relaxed problem.
pub fn solve_relaxed(p: &Problem) -> Result<Relaxed> {
    p.check()?;
    let n = p.h.ncols();
    let mut x = vec![0.0; n];
    let mut f = p.objective(&x);
    let mut step = 1.0 / p.lipschitz().max(1e-300);
    let mut trace = vec![f];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITERS {
        iterations += 1;
        let g = p.gradient(&x);
        let mut moved = None;
        for _ in 0..60 {
            let mut cand: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a + step * b).collect();
            project_ball(&mut cand, p.rho);
            let fc = p.objective(&cand);
            if fc >= f {
                moved = Some((cand, fc));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, fc)) = moved else {
            converged = true;
            break;
        };
        let delta = x
            .iter()
            .zip(&cand)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        x = cand;
        f = fc;
        trace.push(f);
        if delta < STEP_TOL {
            converged = true;
            break;
        }
        step *= 2.0;
    }
    if !converged {
        log::debug!("relaxed detector stopped after {MAX_ITERS} iterations");
    }
    Ok(Relaxed {
        x,
        objective: f,
        iterations,
        converged,
        trace,
    })
}

/// Detected symbol labels per user.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub labels: Vec<usize>,
    pub x_hat: Vec<Complex64>,
    pub converged: bool,
}

fn to_complex(x: &[f64]) -> Vec<Complex64> {
    let k = x.len() / 2;
    (0..k).map(|i| Complex64::new(x[i], x[k + i])).collect()
}

pub fn to_real(x: &[Complex64]) -> Vec<f64> {
    x.iter().map(|z| z.re).chain(x.iter().map(|z| z.im)).collect()
}

/// Relaxed detector followed by a per-user nearest-point decision on the
/// constellation scaled to per-user energy `ρ/K`.
pub fn detect_nml(p: &Problem, constellation: Constellation) -> Result<Detection> {
    let sol = solve_relaxed(p)?;
    let x_hat = to_complex(&sol.x);
    let k = x_hat.len();
    let scale = (k as f64 / p.rho).sqrt();
    let labels = x_hat.iter().map(|z| constellation.nearest(z * scale)).collect();
    Ok(Detection {
        labels,
        x_hat,
        converged: sol.converged,
    })
}

/// Transmit vector for per-user labels, rescaled to `‖x‖² = ρ`.
pub fn payload_vector(labels: &[usize], constellation: Constellation, rho: f64) -> Vec<Complex64> {
    let s: Vec<Complex64> = labels.iter().map(|&l| constellation.point(l)).collect();
    let n2: f64 = s.iter().map(|z| z.norm_sqr()).sum();
    let c = (rho / n2).sqrt();
    s.iter().map(|z| z * c).collect()
}

/// Exhaustive search over every label tuple (transmit vectors normalized as
/// in [`payload_vector`]).
pub fn detect_exhaustive(p: &Problem, constellation: Constellation) -> Result<Detection> {
    p.check()?;
    let k = p.h.ncols() / 2;
    let q = constellation.size();
    let total = q
        .checked_pow(k as u32)
        .filter(|&t| t <= 1 << 20)
        .ok_or_else(|| Error::Domain(format!("{q}^{k} candidates is too many")))?;
    let mut best = (f64::NEG_INFINITY, vec![0; k]);
    let mut labels = vec![0usize; k];
    for idx in 0..total {
        let mut r = idx;
        for l in labels.iter_mut() {
            *l = r % q;
            r /= q;
        }
        let x = to_real(&payload_vector(&labels, constellation, p.rho));
        let f = p.objective(&x);
        if f > best.0 {
            best = (f, labels.clone());
        }
    }
    let x_hat = payload_vector(&best.1, constellation, p.rho);
    Ok(Detection {
        labels: best.1,
        x_hat,
        converged: true,
    })
}

/// `[Re H, −Im H; Im H, Re H]` from the estimate's column form
/// `[Re h_k; Im h_k]` (`[2M, K]`).
pub fn htilde_from_columns(cols: ArrayView2<f64>) -> Array2<f64> {
    let (rows, k) = cols.dim();
    let m = rows / 2;
    let mut out = Array2::zeros((rows, 2 * k));
    for r in 0..m {
        for c in 0..k {
            let re = cols[[r, c]];
            let im = cols[[m + r, c]];
            out[[r, c]] = re;
            out[[r, k + c]] = -im;
            out[[m + r, c]] = im;
            out[[m + r, k + c]] = re;
        }
    }
    out
}

/// Received payload vector: full-resolution rows keep `H̃x + w`, one-bit rows
/// keep its sign.
pub fn receive<R: Rng>(
    h: ArrayView2<f64>,
    x: &[Complex64],
    masks: &SelectionMasks,
    sigma2: f64,
    rng: &mut R,
) -> Vec<f64> {
    let xr = to_real(x);
    let n = Normal::new(0.0, (sigma2 / 2.0).sqrt()).expect("nonnegative variance");
    let z = h.dot(&ArrayView1::from(&xr));
    z.iter()
        .enumerate()
        .map(|(r, &v)| {
            let v = v + n.sample(rng);
            if masks.row_is_full(r) {
                v
            } else {
                hard_sign(v)
            }
        })
        .collect()
}
