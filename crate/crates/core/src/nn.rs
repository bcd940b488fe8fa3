//! Layer building blocks on top of [`crate::graph`].

use ndarray::IxDyn;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{Graph, ParamId, ParamStore, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const BN_MOMENTUM: f64 = 0.1;

/// Forward-pass context: parameter source, train/inference switch, and the
/// batch-norm running-statistic updates produced while training.
pub struct Fwd<'a> {
    pub params: &'a ParamStore,
    pub train: bool,
    pub bn_updates: Vec<(ParamId, Tensor)>,
}

impl<'a> Fwd<'a> {
    pub fn train(params: &'a ParamStore) -> Self {
        Self {
            params,
            train: true,
            bn_updates: Vec::new(),
        }
    }

    pub fn infer(params: &'a ParamStore) -> Self {
        Self {
            params,
            train: false,
            bn_updates: Vec::new(),
        }
    }

    pub fn p(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param(self.params, id)
    }
}

/// Writes accumulated running statistics back into the store.
pub fn apply_bn_updates(store: &mut ParamStore, updates: Vec<(ParamId, Tensor)>) {
    for (id, v) in updates {
        *store.get_mut(id) = v;
    }
}

pub fn normal_tensor<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let n = Normal::new(0.0, std).expect("finite std");
    Tensor::from_shape_simple_fn(IxDyn(shape), || n.sample(rng))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Xavier-normal weights, zero bias.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        let std = (2.0 / (din + dout) as f64).sqrt();
        Self {
            w: store.add(format!("{name}.w"), normal_tensor(&[din, dout], std, rng), true),
            b: store.add(format!("{name}.b"), Tensor::zeros(IxDyn(&[dout])), true),
        }
    }

    pub fn forward(&self, g: &mut Graph, f: &Fwd, x: Var) -> Var {
        let w = f.p(g, self.w);
        let b = f.p(g, self.b);
        let y = g.matmul_last(x, w);
        g.add_bias_last(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(IxDyn(&[c])), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(IxDyn(&[c])), true),
            mean: store.add(format!("{name}.running_mean"), Tensor::zeros(IxDyn(&[c])), false),
            var: store.add(format!("{name}.running_var"), Tensor::ones(IxDyn(&[c])), false),
        }
    }

    pub fn forward(&self, g: &mut Graph, f: &mut Fwd, x: Var) -> Var {
        let gamma = f.p(g, self.gamma);
        let beta = f.p(g, self.beta);
        if f.train {
            let (y, stats) = g.batch_norm(x, gamma, beta, None);
            if let Some((mean, var)) = stats {
                let blend = |old: &Tensor, new: Vec<f64>| {
                    let new = Tensor::from_shape_vec(old.raw_dim(), new).expect("channel count");
                    old * (1.0 - BN_MOMENTUM) + new * BN_MOMENTUM
                };
                let m = blend(f.params.get(self.mean), mean);
                let v = blend(f.params.get(self.var), var);
                f.bn_updates.push((self.mean, m));
                f.bn_updates.push((self.var, v));
            }
            y
        } else {
            let params = f.params;
            g.batch_norm(x, gamma, beta, Some((params.get(self.mean), params.get(self.var))))
                .0
        }
    }
}

/// 2-D convolution with "same" padding.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        let std = gain / fan_in.sqrt();
        Self {
            w: store.add(
                format!("{name}.w"),
                normal_tensor(&[cout, cin, kernel, kernel], std, rng),
                true,
            ),
            b: store.add(format!("{name}.b"), Tensor::zeros(IxDyn(&[cout])), true),
        }
    }

    pub fn forward(&self, g: &mut Graph, f: &Fwd, x: Var) -> Var {
        let w = f.p(g, self.w);
        let b = f.p(g, self.b);
        g.conv2d(x, w, Some(b))
    }
}

/// Normalization → convolution → leaky rectifier.
#[derive(Clone, Debug)]
pub struct ConvStage {
    pub bn: BatchNorm,
    pub conv: Conv,
}

impl ConvStage {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            bn: BatchNorm::new(store, &format!("{name}.bn"), cin),
            conv: Conv::new(store, &format!("{name}.conv"), cin, cout, kernel, 2f64.sqrt(), rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, f: &mut Fwd, x: Var) -> Var {
        let y = self.bn.forward(g, f, x);
        let y = self.conv.forward(g, f, y);
        g.leaky_relu(y, LEAKY_SLOPE)
    }
}
