//! Mixed-ADC allocation network.
//!
//! A small fully connected network turns a trainable seed vector into logits
//! `v`; `u = softmax(v)`. The forward mask `a` marks the `M_A` largest entries
//! of `u`. On the backward path `a` is replaced by the scaled probabilities
//! `ũ = M_A·u`, which satisfy `‖ũ‖₁ = M_A` by construction. Penalizing
//! `‖ũ‖₂² − M_A` and `‖ũ‖₃³ − M_A` drives `ũ` towards an `M_A`-hot vector, at
//! which point the surrogate and the forward mask coincide.

use ndarray::{Array1, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::airlink::SelectionMasks;
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::nn::{normal_tensor, Fwd, Linear, LEAKY_SLOPE};

pub const SEED_LEN: usize = 16;
pub const HIDDEN: [usize; 3] = [16, 32, 64];

#[derive(Clone, Debug)]
pub struct Selnet {
    pub m: usize,
    pub m_a: usize,
    pub seed: ParamId,
    pub layers: [Linear; 3],
    pub head: Linear,
}

/// Values produced by one SELNet forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionState {
    pub v: Vec<f64>,
    pub u: Vec<f64>,
    pub u_tilde: Vec<f64>,
    pub masks: SelectionMasks,
    pub m_a: usize,
}

impl SelectionState {
    pub fn from_logits(v: &[f64], m_a: usize) -> Result<Self> {
        let m = v.len();
        check_m_a(m, m_a)?;
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
        let s: f64 = e.iter().sum();
        let u: Vec<f64> = e.iter().map(|x| x / s).collect();
        let u_tilde = u.iter().map(|x| m_a as f64 * x).collect();
        let masks = SelectionMasks::from_set_a(m, &top_k(&u, m_a))?;
        Ok(Self {
            v: v.to_vec(),
            u,
            u_tilde,
            masks,
            m_a,
        })
    }

    /// `max_m min(ũ_m, |ũ_m − 1|)`, the distance of the surrogate to binary.
    pub fn binary_gap(&self) -> f64 {
        self.u_tilde
            .iter()
            .map(|&x| x.abs().min((x - 1.0).abs()))
            .fold(0.0, f64::max)
    }
}

/// Graph handles for a SELNet forward pass.
pub struct SelectionVars {
    pub v: Var,
    pub u: Var,
    pub u_tilde: Var,
    /// Forward value `a`, backward gradient routed to `ũ`.
    pub a: Var,
    /// `1 − a`.
    pub b: Var,
    pub state: SelectionState,
}

fn check_m_a(m: usize, m_a: usize) -> Result<()> {
    if m_a == 0 || m_a > m {
        return Err(Error::Domain(format!(
            "M_A = {m_a} must lie in 1..={m}"
        )));
    }
    Ok(())
}

/// Indices of the `k` largest entries; ties go to the lower index. Sorted.
pub fn top_k(u: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..u.len()).collect();
    idx.sort_by(|&i, &j| u[j].total_cmp(&u[i]).then(i.cmp(&j)));
    let mut chosen: Vec<usize> = idx.into_iter().take(k).collect();
    chosen.sort_unstable();
    chosen
}

impl Selnet {
    /// Registers parameters under `selnet.*`.
    pub fn new<R: Rng>(store: &mut ParamStore, m: usize, m_a: usize, rng: &mut R) -> Result<Self> {
        check_m_a(m, m_a)?;
        let seed = store.add("selnet.seed", normal_tensor(&[1, SEED_LEN], 1.0, rng), true);
        let dims = [SEED_LEN, HIDDEN[0], HIDDEN[1], HIDDEN[2]];
        let layers = [0, 1, 2].map(|i| {
            Linear::new(store, &format!("selnet.fc{}", i + 1), dims[i], dims[i + 1], rng)
        });
        let head = Linear::new(store, "selnet.head", HIDDEN[2], m, rng);
        Ok(Self {
            m,
            m_a,
            seed,
            layers,
            head,
        })
    }

    pub fn bind(store: &ParamStore, m: usize, m_a: usize) -> Result<Self> {
        let mut scratch = ParamStore::new();
        let fresh = Self::new(&mut scratch, m, m_a, &mut ChaCha8Rng::seed_from_u64(0))?;
        let find = |id: ParamId| -> Result<ParamId> {
            let e = scratch.entry(id);
            store
                .id(&e.name)
                .filter(|&f| store.get(f).shape() == e.value.shape())
                .ok_or_else(|| Error::CorruptBundle(format!("missing SELNet parameter {}", e.name)))
        };
        let lin = |l: &Linear| -> Result<Linear> {
            Ok(Linear {
                w: find(l.w)?,
                b: find(l.b)?,
            })
        };
        Ok(Self {
            m,
            m_a,
            seed: find(fresh.seed)?,
            layers: [
                lin(&fresh.layers[0])?,
                lin(&fresh.layers[1])?,
                lin(&fresh.layers[2])?,
            ],
            head: lin(&fresh.head)?,
        })
    }

    /// Logits `v` as a graph node of shape `[M]`.
    pub fn logits(&self, g: &mut Graph, f: &Fwd) -> Var {
        let mut x = f.p(g, self.seed);
        for l in &self.layers {
            let y = l.forward(g, f, x);
            x = g.leaky_relu(y, LEAKY_SLOPE);
        }
        let v = self.head.forward(g, f, x);
        g.reshape(v, &[self.m])
    }

    pub fn forward(&self, g: &mut Graph, f: &Fwd) -> Result<SelectionVars> {
        let v = self.logits(g, f);
        selection_from_logits(g, v, self.m_a)
    }

    /// Current allocation without building a differentiable graph.
    pub fn state(&self, params: &ParamStore) -> Result<SelectionState> {
        let mut g = Graph::new();
        let f = Fwd::infer(params);
        let v = self.logits(&mut g, &f);
        let v: Vec<f64> = g.value(v).iter().copied().collect();
        SelectionState::from_logits(&v, self.m_a)
    }
}

/// Softmax, top-`M_A` mask and straight-through surrogate for logits `v: [M]`.
pub fn selection_from_logits(g: &mut Graph, v: Var, m_a: usize) -> Result<SelectionVars> {
    let logits: Vec<f64> = g.value(v).iter().copied().collect();
    let state = SelectionState::from_logits(&logits, m_a)?;
    let u = g.softmax(v);
    let u_tilde = g.scale(u, m_a as f64);
    let a_fwd = Tensor::from_shape_vec(IxDyn(&[state.u.len()]), state.masks.a().to_vec())
        .expect("mask length");
    let a = g.straight_through(a_fwd, u_tilde);
    let neg = g.scale(a, -1.0);
    let b = g.add_const(neg, 1.0);
    Ok(SelectionVars {
        v,
        u,
        u_tilde,
        a,
        b,
        state,
    })
}

/// `(‖ũ‖₂² − M_A, ‖ũ‖₃³ − M_A)`.
pub fn khot_residuals(u_tilde: &[f64], m_a: usize) -> (f64, f64) {
    let k = m_a as f64;
    let r2 = u_tilde.iter().map(|x| x * x).sum::<f64>() - k;
    let r3 = u_tilde.iter().map(|x| x.abs().powi(3)).sum::<f64>() - k;
    (r2, r3)
}

/// `γ₁·r₂² + γ₂·r₃²`.
pub fn selnet_loss(state: &SelectionState, gamma1: f64, gamma2: f64) -> f64 {
    let (r2, r3) = khot_residuals(&state.u_tilde, state.m_a);
    gamma1 * r2 * r2 + gamma2 * r3 * r3
}

/// Graph version of [`selnet_loss`].
pub fn selnet_loss_var(g: &mut Graph, u_tilde: Var, m_a: usize, gamma1: f64, gamma2: f64) -> Var {
    let k = m_a as f64;
    let sq = g.pow_const(u_tilde, 2.0);
    let s2 = g.sum(sq);
    let r2 = g.add_const(s2, -k);
    let cube = g.pow_const(u_tilde, 3.0);
    let s3 = g.sum(cube);
    let r3 = g.add_const(s3, -k);
    let p2 = g.pow_const(r2, 2.0);
    let p3 = g.pow_const(r3, 2.0);
    let t2 = g.scale(p2, gamma1);
    let t3 = g.scale(p3, gamma2);
    g.add(t2, t3)
}

/// Which norm identity failed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Certificate {
    /// All three norm identities hold; `max_gap` is the largest distance of
    /// any entry to `{0, 1}`.
    KHot { max_gap: f64 },
    /// `‖x‖_order^order` differs from `K` by `residual`.
    Violated { order: f64, residual: f64 },
}

impl Certificate {
    pub fn is_certified(&self) -> bool {
        matches!(self, Certificate::KHot { .. })
    }
}

pub fn power_sum(x: &[f64], order: f64) -> f64 {
    x.iter().map(|v| v.powf(order)).sum()
}

/// Checks `‖x‖_r^r = ‖x‖_p^p = ‖x‖_q^q = K` within `tol`.
pub fn khot_certificate(x: &[f64], k: usize, r: f64, p: f64, q: f64, tol: f64) -> Result<Certificate> {
    if !(0.0 < r && r < p && p < q && q.is_finite()) {
        return Err(Error::Domain(format!(
            "norm orders must satisfy 0 < r < p < q (got {r}, {p}, {q})"
        )));
    }
    if let Some(bad) = x.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Domain(format!("entry {bad} is negative")));
    }
    for order in [r, p, q] {
        let residual = power_sum(x, order) - k as f64;
        if residual.abs() > tol {
            return Ok(Certificate::Violated { order, residual });
        }
    }
    let max_gap = x
        .iter()
        .map(|&v| v.min((v - 1.0).abs()))
        .fold(0.0, f64::max);
    Ok(Certificate::KHot { max_gap })
}

/// Outcome of [`falsification_search`].
#[derive(Clone, Debug, PartialEq)]
pub struct FalsificationReport {
    pub restarts: usize,
    /// Restarts that ended with all residuals below the threshold.
    pub converged: usize,
    /// Converged points whose entries are not within `gap_tol` of `{0, 1}`.
    pub counterexamples: Vec<Vec<f64>>,
    /// Largest binary gap among converged points.
    pub worst_gap: f64,
}

/// Tries to find a nonnegative, non-K-hot vector satisfying the three norm
/// identities. Each restart starts from a random point with the right ℓ1 mass
/// and runs projected Levenberg-Marquardt on the three residuals.
pub fn falsification_search(
    m: usize,
    k: usize,
    orders: (f64, f64, f64),
    restarts: usize,
    residual_tol: f64,
    gap_tol: f64,
    seed: u64,
) -> FalsificationReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, p, q) = orders;
    let os = [r, p, q];
    let target = k as f64;
    let residuals = |x: &[f64]| -> [f64; 3] { os.map(|o| power_sum(x, o) - target) };
    let objective = |x: &[f64]| -> f64 { residuals(x).iter().map(|v| v * v).sum() };
    let mut report = FalsificationReport {
        restarts,
        converged: 0,
        counterexamples: Vec::new(),
        worst_gap: 0.0,
    };
    for _ in 0..restarts {
        let mut x: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s: f64 = x.iter().sum();
        x.iter_mut().for_each(|v| *v *= target / s);
        let mut f = objective(&x);
        let mut lambda = 1e-3;
        for _ in 0..2_000 {
            if f.sqrt() < residual_tol * 1e-3 {
                break;
            }
            let res = residuals(&x);
            let jac: Vec<[f64; 3]> = x
                .iter()
                .map(|&v| os.map(|o| if v > 0.0 { o * v.powf(o - 1.0) } else { 0.0 }))
                .collect();
            let mut jjt = [[0.0; 3]; 3];
            for row in &jac {
                for i in 0..3 {
                    for j in 0..3 {
                        jjt[i][j] += row[i] * row[j];
                    }
                }
            }
            let mut accepted = false;
            for _ in 0..40 {
                let mut a = jjt;
                (0..3).for_each(|i| a[i][i] += lambda);
                let Some(y) = solve3(a, res) else {
                    lambda *= 10.0;
                    continue;
                };
                let cand: Vec<f64> = x
                    .iter()
                    .zip(&jac)
                    .map(|(&v, row)| (v - (row[0] * y[0] + row[1] * y[1] + row[2] * y[2])).max(0.0))
                    .collect();
                let fc = objective(&cand);
                if fc < f {
                    x = cand;
                    f = fc;
                    lambda = (lambda * 0.3).max(1e-15);
                    accepted = true;
                    break;
                }
                lambda *= 10.0;
            }
            if !accepted {
                break;
            }
        }
        let max_res = residuals(&x).iter().map(|v| v.abs()).fold(0.0, f64::max);
        if max_res < residual_tol {
            report.converged += 1;
            let gap = x.iter().map(|&v| v.min((v - 1.0).abs())).fold(0.0, f64::max);
            report.worst_gap = report.worst_gap.max(gap);
            if gap > gap_tol {
                report.counterexamples.push(x);
            }
        }
    }
    report
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for c in 0..3 {
        let piv = (c..3).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[piv][c].abs() < 1e-300 {
            return None;
        }
        a.swap(c, piv);
        b.swap(c, piv);
        for r in c + 1..3 {
            let f = a[r][c] / a[c][c];
            for j in c..3 {
                a[r][j] -= f * a[c][j];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = [0.0; 3];
    for c in (0..3).rev() {
        let s: f64 = (c + 1..3).map(|j| a[c][j] * x[j]).sum();
        x[c] = (b[c] - s) / a[c][c];
    }
    Some(x)
}

/// Mask vector `a` as `f64` values.
pub fn mask_vector(masks: &SelectionMasks) -> Array1<f64> {
    masks.a()
}
