//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value, and [`Graph::backward`] walks the tape in reverse. Trainable state
//! lives in a [`ParamStore`]; a graph only borrows copies of parameter values,
//! so the same store can drive many forward passes.
//!
//! Two operations deliberately break the chain rule: [`Graph::sign_ste`]
//! (hard sign forward, softsign derivative backward) and
//! [`Graph::straight_through`] (arbitrary forward value, identity gradient to
//! a surrogate). These carry the surrogate-gradient contracts of the
//! quantization layer and the top-K selection.

use std::collections::HashMap;

use ndarray::{Array2, ArrayD, Axis, IxDyn, Zip};

pub type Tensor = ArrayD<f64>;

pub const BN_EPS: f64 = 1e-5;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to an entry in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Buffers (batch-norm running statistics) are stored but never optimized.
    pub trainable: bool,
}

/// Named, ordered collection of parameters and buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new entry. Panics on duplicate names: parameter layout is
    /// fixed by the model builders, so a duplicate is a programming error.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, e)| e.trainable)
            .map(|(id, _)| id)
            .collect()
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Total number of trainable scalars whose name starts with `prefix`.
    pub fn trainable_count_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }
}

enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    ScaleBy(Var, Var),
    MatMulLast(Var, Var),
    AddBiasLast(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        /// Patch matrix of the forward pass, reused for the weight gradient.
        cols: Array2<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    LeakyRelu(Var, f64),
    Concat(Vec<Var>),
    Reshape(Var),
    SignSte(Var, f64),
    Softsign(Var, f64),
    Softmax(Var),
    StraightThrough(Var),
    MaskRows(Var, Var),
    PowConst(Var, f64),
    Sum(Var),
    Nmse(Var, Tensor),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(Var, ParamId)>,
}

impl Gradients {
    /// Gradient with respect to a tape node, if any flowed to it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients per parameter, summed over every use on the tape.
    pub fn params(&self) -> HashMap<ParamId, Tensor> {
        let mut out: HashMap<ParamId, Tensor> = HashMap::new();
        for &(v, id) in &self.params {
            if let Some(g) = &self.grads[v.0] {
                match out.get_mut(&id) {
                    Some(acc) => *acc += g,
                    None => {
                        out.insert(id, g.clone());
                    }
                }
            }
        }
        out
    }
}

/// Forward tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(Var, ParamId)>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `2·sigmoid(κx) − 1`.
pub fn softsign(x: f64, kappa: f64) -> f64 {
    2.0 * sigmoid(kappa * x) - 1.0
}

/// Derivative of [`softsign`] with respect to `x`.
pub fn softsign_grad(x: f64, kappa: f64) -> f64 {
    let s = sigmoid(kappa * x);
    2.0 * kappa * s * (1.0 - s)
}

/// Sign with the tie rule `sign(0) = +1`.
pub fn hard_sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1);
        t.iter().next().copied().unwrap_or(f64::NAN)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; gradients accumulate here but go nowhere else.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(store.get(id).clone(), Op::Param);
        self.params.push((v, id));
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) + c;
        self.push(out, Op::AddConst(a))
    }

    /// Tensor times a 0-d (or single-element) variable.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let out = self.value(a) * sv;
        self.push(out, Op::ScaleBy(a, s))
    }

    /// Contracts the last axis of `x` with the first axis of the matrix `w`.
    pub fn matmul_last(&mut self, x: Var, w: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(wv.ndim(), 2, "matmul_last expects a matrix operand");
        let a = *xv.shape().last().expect("non-scalar input");
        assert_eq!(a, wv.shape()[0], "matmul_last inner dimension mismatch");
        let b = wv.shape()[1];
        let rows = xv.len() / a;
        let x2 = as_matrix(xv, rows, a);
        let w2 = as_matrix(wv, a, b);
        let out2 = x2.dot(&w2);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = b;
        let out = out2.into_shape_with_order(IxDyn(&shape)).unwrap();
        self.push(out, Op::MatMulLast(x, w))
    }

    pub fn add_bias_last(&mut self, x: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(bias);
        let b = *xv.shape().last().unwrap();
        assert_eq!(bv.len(), b, "bias length mismatch");
        let bs: Vec<f64> = bv.iter().copied().collect();
        let mut out = xv.clone();
        for (i, o) in out.iter_mut().enumerate() {
            *o += bs[i % b];
        }
        self.push(out, Op::AddBiasLast(x, bias))
    }

    /// 2-D convolution, stride 1, "same" padding, odd kernel sizes.
    /// `x: [N, Cin, H, W]`, `w: [Cout, Cin, kh, kw]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let geo = ConvGeom::new(xv.shape(), wv.shape());
        let cols = im2col(xv, &geo);
        let wmat = as_matrix(wv, geo.cout, geo.patch());
        let out2 = wmat.dot(&cols);
        let bias: Option<Vec<f64>> = b.map(|b| self.value(b).iter().copied().collect());
        let mut out = Tensor::zeros(IxDyn(&[geo.n, geo.cout, geo.h, geo.w]));
        {
            let o = out.as_slice_mut().unwrap();
            let src = out2.as_slice().unwrap();
            let hw = geo.h * geo.w;
            let nhw = geo.n * hw;
            for ni in 0..geo.n {
                for co in 0..geo.cout {
                    let bb = bias.as_ref().map_or(0.0, |bs| bs[co]);
                    let dst = &mut o[(ni * geo.cout + co) * hw..][..hw];
                    let row = &src[co * nhw + ni * hw..][..hw];
                    for (d, &v) in dst.iter_mut().zip(row) {
                        *d = v + bb;
                    }
                }
            }
        }
        self.push(out, Op::Conv2d { x, w, b, cols })
    }

    /// Per-channel normalization of `x: [N, C, H, W]`.
    ///
    /// With `running = Some(..)` the stored running mean and variance are used
    /// (inference); otherwise batch statistics are computed (training).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&Tensor, &Tensor)>,
    ) -> (Var, Option<(Vec<f64>, Vec<f64>)>) {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        assert_eq!(shape.len(), 4, "batch_norm expects [N, C, H, W]");
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let xs = xv.as_slice().expect("contiguous");
        let count = (n * hw) as f64;
        let (mean, var, batch_stats) = match running {
            Some((m, v)) => (
                m.iter().copied().collect::<Vec<_>>(),
                v.iter().copied().collect::<Vec<_>>(),
                false,
            ),
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    // Summing offsets from the channel's first entry makes
                    // a constant channel's mean exact, so its deviations are
                    // zero rather than rounding residue that stacked
                    // normalizations would amplify.
                    let x0 = xs[ci * hw];
                    let mut s = 0.0;
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        s += xs[base..base + hw].iter().map(|v| v - x0).sum::<f64>();
                    }
                    let m = x0 + s / count;
                    let mut q = 0.0;
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        q += xs[base..base + hw]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                    mean[ci] = m;
                    var[ci] = q / count;
                }
                (mean, var, true)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g: Vec<f64> = self.value(gamma).iter().copied().collect();
        let bt: Vec<f64> = self.value(beta).iter().copied().collect();
        let mut xhat = Tensor::zeros(IxDyn(&shape));
        let mut out = Tensor::zeros(IxDyn(&shape));
        {
            let xh = xhat.as_slice_mut().unwrap();
            let o = out.as_slice_mut().unwrap();
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    for p in base..base + hw {
                        let h = (xs[p] - mean[ci]) * inv_std[ci];
                        xh[p] = h;
                        o[p] = g[ci] * h + bt[ci];
                    }
                }
            }
        }
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        );
        (v, batch_stats.then_some((mean, var)))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).mapv(|v| if v > 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu(x, slope))
    }

    /// Concatenation along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat shapes");
        self.push(out, Op::Concat(parts.to_vec()))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self
            .value(x)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size");
        self.push(out, Op::Reshape(x))
    }

    /// Hard sign forward; softsign derivative with steepness `kappa` backward.
    pub fn sign_ste(&mut self, x: Var, kappa: f64) -> Var {
        let out = self.value(x).mapv(hard_sign);
        self.push(out, Op::SignSte(x, kappa))
    }

    pub fn softsign(&mut self, x: Var, kappa: f64) -> Var {
        let out = self.value(x).mapv(|v| softsign(v, kappa));
        self.push(out, Op::Softsign(x, kappa))
    }

    /// Softmax over the last axis of a 1-D or `[1, M]` tensor.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let max = xv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut out = xv.mapv(|v| (v - max).exp());
        let s = out.sum();
        out /= s;
        self.push(out, Op::Softmax(x))
    }

    /// Emits `forward` as the value while routing gradients to `surrogate`
    /// unchanged.
    pub fn straight_through(&mut self, forward: Tensor, surrogate: Var) -> Var {
        assert_eq!(forward.shape(), self.value(surrogate).shape());
        self.push(forward, Op::StraightThrough(surrogate))
    }

    /// `x: [N, 2M, Np]` multiplied row-wise by the stacked mask `[m; m]`,
    /// where `m: [M]`.
    pub fn mask_rows(&mut self, x: Var, m: Var) -> Var {
        let xv = self.value(x);
        let mv: Vec<f64> = self.value(m).iter().copied().collect();
        let shape = xv.shape();
        assert_eq!(shape.len(), 3);
        let (rows, cols) = (shape[1], shape[2]);
        assert_eq!(rows, 2 * mv.len(), "mask length must be half the row count");
        let half = mv.len();
        let mut out = xv.as_standard_layout().into_owned();
        for (i, o) in out.as_slice_mut().unwrap().iter_mut().enumerate() {
            let r = (i / cols) % rows;
            *o *= mv[r % half];
        }
        self.push(out, Op::MaskRows(x, m))
    }

    pub fn pow_const(&mut self, x: Var, p: f64) -> Var {
        let out = self.value(x).mapv(|v| v.powf(p));
        self.push(out, Op::PowConst(x, p))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::from_elem(IxDyn(&[]), s), Op::Sum(x))
    }

    /// Mean over samples and users of `‖t_k − h_k‖² / ‖t_k‖²` for
    /// `h, t: [N, R, K]`. Target columns must be nonzero.
    pub fn nmse(&mut self, h: Var, target: Tensor) -> Var {
        let hv = self.value(h);
        assert_eq!(hv.shape(), target.shape(), "nmse shape mismatch");
        let value = nmse_value(hv, &target);
        self.push(Tensor::from_elem(IxDyn(&[]), value), Op::Nmse(h, target))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.value(loss).raw_dim()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g * self.value(*b));
                accumulate(grads, *b, g * self.value(*a));
            }
            Op::Scale(a, c) => accumulate(grads, *a, g * *c),
            Op::AddConst(a) => accumulate(grads, *a, g.clone()),
            Op::ScaleBy(a, s) => {
                let sv = self.scalar(*s);
                let ds = (g * self.value(*a)).sum();
                accumulate(grads, *a, g * sv);
                let sshape = self.value(*s).raw_dim();
                accumulate(grads, *s, Tensor::from_elem(sshape, ds));
            }
            Op::MatMulLast(x, w) => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (a, b) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.len() / a;
                let g2 = as_matrix(g, rows, b);
                let x2 = as_matrix(xv, rows, a);
                let w2 = as_matrix(wv, a, b);
                let dx = g2.dot(&w2.t());
                let dw = x2.t().dot(&g2);
                accumulate(grads, *x, dx.into_shape_with_order(xv.raw_dim()).unwrap());
                accumulate(grads, *w, dw.into_dyn());
            }
            Op::AddBiasLast(x, bias) => {
                let b = self.value(*bias).len();
                let mut db = vec![0.0; b];
                for (k, v) in g.iter().enumerate() {
                    db[k % b] += v;
                }
                accumulate(grads, *x, g.clone());
                let db = Tensor::from_shape_vec(self.value(*bias).raw_dim(), db).unwrap();
                accumulate(grads, *bias, db);
            }
            Op::Conv2d { x, w, b, cols } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let geo = ConvGeom::new(xv.shape(), wv.shape());
                let hw = geo.h * geo.w;
                let gs = g.as_standard_layout();
                let gsl = gs.as_slice().unwrap();
                let nhw = geo.n * hw;
                let mut g2v = vec![0.0; geo.cout * nhw];
                for ni in 0..geo.n {
                    for co in 0..geo.cout {
                        g2v[co * nhw + ni * hw..][..hw]
                            .copy_from_slice(&gsl[(ni * geo.cout + co) * hw..][..hw]);
                    }
                }
                let g2 = Array2::from_shape_vec((geo.cout, nhw), g2v).unwrap();
                let wmat = as_matrix(wv, geo.cout, geo.patch());
                let dw = g2.dot(&cols.t());
                accumulate(
                    grads,
                    *w,
                    dw.into_shape_with_order(wv.raw_dim()).unwrap(),
                );
                if let Some(b) = b {
                    let db = g2.sum_axis(Axis(1)).into_dyn();
                    accumulate(grads, *b, db);
                }
                let dcols = wmat.t().dot(&g2);
                accumulate(grads, *x, col2im(&dcols, &geo));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = xhat.shape();
                let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let count = (n * hw) as f64;
                let gv: Vec<f64> = self.value(*gamma).iter().copied().collect();
                let gs = g.as_standard_layout();
                let gsl = gs.as_slice().unwrap();
                let xh = xhat.as_slice().unwrap();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for p in base..base + hw {
                            dgamma[ci] += gsl[p] * xh[p];
                            dbeta[ci] += gsl[p];
                        }
                    }
                }
                let mut dx = Tensor::zeros(IxDyn(shape));
                {
                    let d = dx.as_slice_mut().unwrap();
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            let k = gv[ci] * inv_std[ci];
                            for p in base..base + hw {
                                d[p] = if *batch_stats {
                                    k * (gsl[p] - dbeta[ci] / count - xh[p] * dgamma[ci] / count)
                                } else {
                                    k * gsl[p]
                                };
                            }
                        }
                    }
                }
                accumulate(grads, *x, dx);
                let gshape = self.value(*gamma).raw_dim();
                accumulate(
                    grads,
                    *gamma,
                    Tensor::from_shape_vec(gshape.clone(), dgamma).unwrap(),
                );
                accumulate(grads, *beta, Tensor::from_shape_vec(gshape, dbeta).unwrap());
            }
            Op::LeakyRelu(x, slope) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*x))
                    .for_each(|d, &xv| {
                        if xv <= 0.0 {
                            *d *= slope;
                        }
                    });
                accumulate(grads, *x, d);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).shape()[1];
                    let slice = g
                        .slice_axis(Axis(1), ndarray::Slice::from(offset..offset + c))
                        .to_owned();
                    accumulate(grads, p, slice);
                    offset += c;
                }
            }
            Op::Reshape(x) => {
                let d = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(self.value(*x).raw_dim())
                    .unwrap();
                accumulate(grads, *x, d);
            }
            Op::SignSte(x, kappa) | Op::Softsign(x, kappa) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*x))
                    .for_each(|d, &xv| *d *= softsign_grad(xv, *kappa));
                accumulate(grads, *x, d);
            }
            Op::Softmax(x) => {
                let u = &node.value;
                let dot = (g * u).sum();
                let d = u * &(g - dot);
                accumulate(grads, *x, d);
            }
            Op::StraightThrough(s) => accumulate(grads, *s, g.clone()),
            Op::MaskRows(x, m) => {
                let xv = self.value(*x).as_standard_layout();
                let mv: Vec<f64> = self.value(*m).iter().copied().collect();
                let half = mv.len();
                let shape = xv.shape();
                let (rows, cols) = (shape[1], shape[2]);
                let gs = g.as_standard_layout();
                let gsl = gs.as_slice().unwrap();
                let xsl = xv.as_slice().unwrap();
                let mut dx = vec![0.0; gsl.len()];
                let mut dm = vec![0.0; half];
                for i in 0..gsl.len() {
                    let r = ((i / cols) % rows) % half;
                    dx[i] = gsl[i] * mv[r];
                    dm[r] += gsl[i] * xsl[i];
                }
                accumulate(
                    grads,
                    *x,
                    Tensor::from_shape_vec(IxDyn(shape), dx).unwrap(),
                );
                accumulate(
                    grads,
                    *m,
                    Tensor::from_shape_vec(self.value(*m).raw_dim(), dm).unwrap(),
                );
            }
            Op::PowConst(x, p) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*x))
                    .for_each(|d, &xv| *d *= p * xv.powf(p - 1.0));
                accumulate(grads, *x, d);
            }
            Op::Sum(x) => {
                let gs = g.iter().next().copied().unwrap_or(0.0);
                accumulate(grads, *x, Tensor::from_elem(self.value(*x).raw_dim(), gs));
            }
            Op::Nmse(h, target) => {
                let gs = g.iter().next().copied().unwrap_or(0.0);
                let hv = self.value(*h);
                accumulate(grads, *h, nmse_grad(hv, target) * gs);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

fn as_matrix(t: &Tensor, rows: usize, cols: usize) -> Array2<f64> {
    t.as_standard_layout()
        .into_owned()
        .into_shape_with_order((rows, cols))
        .expect("matrix view")
}

/// NMSE of `h` against `t`, both `[N, R, K]`, averaged over samples and
/// columns.
pub fn nmse_value(h: &Tensor, t: &Tensor) -> f64 {
    let s = h.shape();
    let (n, r, k) = (s[0], s[1], s[2]);
    let mut total = 0.0;
    for ni in 0..n {
        for ki in 0..k {
            let mut num = 0.0;
            let mut den = 0.0;
            for ri in 0..r {
                let tv = t[[ni, ri, ki]];
                let d = tv - h[[ni, ri, ki]];
                num += d * d;
                den += tv * tv;
            }
            total += num / den;
        }
    }
    total / (n * k) as f64
}

fn nmse_grad(h: &Tensor, t: &Tensor) -> Tensor {
    let s = h.shape();
    let (n, r, k) = (s[0], s[1], s[2]);
    let scale = 1.0 / (n * k) as f64;
    let mut d = Tensor::zeros(h.raw_dim());
    for ni in 0..n {
        for ki in 0..k {
            let den: f64 = (0..r).map(|ri| t[[ni, ri, ki]].powi(2)).sum();
            for ri in 0..r {
                d[[ni, ri, ki]] = 2.0 * (h[[ni, ri, ki]] - t[[ni, ri, ki]]) / den * scale;
            }
        }
    }
    d
}

struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize]) -> Self {
        assert_eq!(xs.len(), 4, "conv2d input must be [N, C, H, W]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [Cout, Cin, kh, kw]");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        assert!(ws[2] % 2 == 1 && ws[3] % 2 == 1, "odd kernels only");
        Self {
            n: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
        }
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

/// Valid output range `[lo, hi)` along one axis of length `n` for a kernel
/// offset `d` (input index = output index + d).
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

/// Patch matrix `[Cin·kh·kw, N·H·W]` for a "same" convolution.
fn im2col(x: &Tensor, g: &ConvGeom) -> Array2<f64> {
    let xs = x.as_standard_layout();
    let src = xs.as_slice().unwrap();
    let hw = g.h * g.w;
    let nhw = g.n * hw;
    let mut cols = vec![0.0; g.patch() * nhw];
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            let dy = ky as isize - (g.kh / 2) as isize;
            let (y0, y1) = valid_range(g.h, dy);
            for kx in 0..g.kw {
                let dx = kx as isize - (g.kw / 2) as isize;
                let (x0, x1) = valid_range(g.w, dx);
                if y0 == y1 || x0 == x1 {
                    continue;
                }
                let r = (ci * g.kh + ky) * g.kw + kx;
                let sy0 = (y0 as isize + dy) as usize;
                let sx = (x0 as isize + dx) as usize;
                for ni in 0..g.n {
                    let plane = &src[(ni * g.cin + ci) * hw..][..hw];
                    let dst = &mut cols[r * nhw + ni * hw..][..hw];
                    if dx == 0 {
                        let n = (y1 - y0) * g.w;
                        dst[y0 * g.w..y1 * g.w].copy_from_slice(&plane[sy0 * g.w..sy0 * g.w + n]);
                    } else {
                        let rows = dst[y0 * g.w..y1 * g.w].chunks_exact_mut(g.w);
                        for (d, s) in rows.zip(plane[sy0 * g.w..].chunks_exact(g.w)) {
                            for (a, &v) in d[x0..x1].iter_mut().zip(&s[sx..]) {
                                *a = v;
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((g.patch(), nhw), cols).unwrap()
}

/// Adjoint of [`im2col`].
fn col2im(dcols: &Array2<f64>, g: &ConvGeom) -> Tensor {
    let dsl = dcols.as_slice().expect("standard layout");
    let hw = g.h * g.w;
    let nhw = g.n * hw;
    let mut dx_all = vec![0.0; g.n * g.cin * hw];
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            let dy = ky as isize - (g.kh / 2) as isize;
            let (y0, y1) = valid_range(g.h, dy);
            for kx in 0..g.kw {
                let dx = kx as isize - (g.kw / 2) as isize;
                let (x0, x1) = valid_range(g.w, dx);
                if y0 == y1 || x0 == x1 {
                    continue;
                }
                let r = (ci * g.kh + ky) * g.kw + kx;
                let sy0 = (y0 as isize + dy) as usize;
                let sx = (x0 as isize + dx) as usize;
                for ni in 0..g.n {
                    let plane = &mut dx_all[(ni * g.cin + ci) * hw..][..hw];
                    let src = &dsl[r * nhw + ni * hw..][..hw];
                    let rows = plane[sy0 * g.w..].chunks_exact_mut(g.w);
                    for (d, s) in rows.zip(src[y0 * g.w..y1 * g.w].chunks_exact(g.w)) {
                        for (a, &v) in d[sx..].iter_mut().zip(&s[x0..x1]) {
                            *a += v;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_shape_vec(IxDyn(&[g.n, g.cin, g.h, g.w]), dx_all).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of d(Σ c ⊙ f(x))/dx for a graph builder `f`.
    fn check_input_grad(shape: &[usize], build: impl Fn(&mut Graph, Var) -> Var, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = rand_tensor(&mut rng, shape);
        let probe = {
            let mut g = Graph::new();
            let x = g.input(x0.clone());
            let y = build(&mut g, x);
            rand_tensor(&mut rng, g.value(y).shape())
        };
        let objective = |x: &Tensor| {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let y = build(&mut g, xv);
            (g.value(y) * &probe).sum()
        };
        let mut g = Graph::new();
        let xv = g.input(x0.clone());
        let y = build(&mut g, xv);
        let c = g.input(probe.clone());
        let prod = g.mul(y, c);
        let loss = g.sum(prod);
        let grads = g.backward(loss);
        let analytic = grads.wrt(xv).unwrap().clone();
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            xm.as_slice_mut().unwrap()[i] -= h;
            let fd = (objective(&xp) - objective(&xm)) / (2.0 * h);
            let an = analytic.as_slice().unwrap()[i];
            let denom = fd.abs().max(an.abs()).max(1e-6);
            assert!(
                (fd - an).abs() / denom < tol,
                "entry {i}: analytic {an} vs fd {fd}"
            );
        }
    }

    #[test]
    fn conv2d_input_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        check_input_grad(
            &[2, 2, 5, 3],
            |g, x| {
                let wv = g.input(w.clone());
                let bv = g.input(b.clone());
                g.conv2d(x, wv, Some(bv))
            },
            1e-6,
        );
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[1, 2, 4, 3]);
        let w = rand_tensor(&mut rng, &[2, 2, 3, 3]);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let wv = g.input(w.clone());
        let y = g.conv2d(xv, wv, None);
        let out = g.value(y);
        for co in 0..2 {
            for yi in 0..4i64 {
                for xi in 0..3i64 {
                    let mut s = 0.0;
                    for ci in 0..2 {
                        for ky in 0..3i64 {
                            for kx in 0..3i64 {
                                let (yy, xx) = (yi + ky - 1, xi + kx - 1);
                                if (0..4).contains(&yy) && (0..3).contains(&xx) {
                                    s += w[[co, ci, ky as usize, kx as usize]]
                                        * x[[0, ci, yy as usize, xx as usize]];
                                }
                            }
                        }
                    }
                    assert!((s - out[[0, co, yi as usize, xi as usize]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn batch_norm_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gamma = rand_tensor(&mut rng, &[2]);
        let beta = rand_tensor(&mut rng, &[2]);
        check_input_grad(
            &[3, 2, 4, 2],
            |g, x| {
                let gv = g.input(gamma.clone());
                let bv = g.input(beta.clone());
                g.batch_norm(x, gv, bv, None).0
            },
            1e-5,
        );
    }

    #[test]
    fn matmul_bias_mask_softmax_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = rand_tensor(&mut rng, &[4, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        check_input_grad(
            &[2, 5, 4],
            |g, x| {
                let wv = g.input(w.clone());
                let bv = g.input(b.clone());
                let y = g.matmul_last(x, wv);
                g.add_bias_last(y, bv)
            },
            1e-7,
        );
        let m = rand_tensor(&mut rng, &[3]);
        check_input_grad(
            &[2, 6, 2],
            |g, x| {
                let mv = g.input(m.clone());
                g.mask_rows(x, mv)
            },
            1e-7,
        );
        check_input_grad(&[5], |g, x| g.softmax(x), 1e-6);
        check_input_grad(&[2, 3], |g, x| g.pow_const(x, 2.0), 1e-6);
    }

    #[test]
    fn nmse_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = rand_tensor(&mut rng, &[2, 4, 2]);
        check_input_grad(&[2, 4, 2], |g, x| g.nmse(x, t.clone()), 1e-6);
    }

    #[test]
    fn sign_ste_forward_and_tie_rule() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_shape_vec(IxDyn(&[3]), vec![0.5, -0.3, 0.0]).unwrap());
        let y = g.sign_ste(x, 70.0);
        assert_eq!(g.value(y).as_slice().unwrap(), &[1.0, -1.0, 1.0]);
    }
}

