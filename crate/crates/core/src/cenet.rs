//! Channel estimator: two dense subnets of Runge-Kutta model-driven blocks
//! (one per quantization stream) and a fusion head.
//!
//! Each RK3 block unfolds one third-order Runge-Kutta step with learned
//! stage functions `φ₁..φ₃` and learned coefficients `β₁..β₅`:
//!
//! ```text
//! G₁ = φ₁(X)
//! G₂ = φ₂(X + β₁G₁)
//! G₃ = φ₃(X + β₂G₁ + β₃G₂)
//! Z  = X + β₄(G₁ + β₅G₂ + G₃)
//! ```
//!
//! The coefficients start at the classical values `(½, −1, 2, 1/6, 4)`, for
//! which the block is exactly one RK3 step of `ẋ = f(x)` with `φ = μ·f`.

use ndarray::{Array3, IxDyn};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::nn::{Conv, ConvStage, Fwd, Linear};

/// Classical RK3 coefficients in block order `β₁..β₅`.
pub const CLASSICAL_BETA: [f64; 5] = [0.5, -1.0, 2.0, 1.0 / 6.0, 4.0];

pub const KERNEL: usize = 3;

/// Output channels of the three dense blocks of one stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubnetChannels {
    pub c1: usize,
    pub c2: usize,
    pub c3: usize,
}

impl SubnetChannels {
    /// Doubling pattern implied by dense concatenation of channel-preserving
    /// blocks.
    pub fn from_c1(c1: usize) -> Self {
        Self {
            c1,
            c2: 2 * c1,
            c3: 4 * c1,
        }
    }

    pub fn total(&self) -> usize {
        self.c1 + self.c2 + self.c3
    }

    pub fn validate(&self) -> Result<()> {
        if self.c1 == 0 || self.c2 != 2 * self.c1 || self.c3 != 2 * self.c2 {
            return Err(Error::Shape(format!(
                "dense channels must follow C2 = 2·C1, C3 = 2·C2 (got {}, {}, {})",
                self.c1, self.c2, self.c3
            )));
        }
        Ok(())
    }
}

/// Inner structure of every dense block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    #[default]
    Rk3,
    /// Three stacked stages, no residual path and no coefficients.
    PlainCnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenetConfig {
    pub m: usize,
    pub k: usize,
    pub np: usize,
    pub stream_a: SubnetChannels,
    pub stream_b: SubnetChannels,
    pub block: BlockKind,
}

impl CenetConfig {
    pub fn validate(&self) -> Result<()> {
        self.stream_a.validate()?;
        self.stream_b.validate()?;
        if self.m == 0 || self.k == 0 || self.np == 0 {
            return Err(Error::Config("CENet dimensions must be positive".into()));
        }
        Ok(())
    }

    fn fusion_widths(&self) -> (usize, usize, usize) {
        let cin = self.stream_a.total() + self.stream_b.total();
        let c1 = (cin / 2).max(1);
        let c2 = (c1 / 2).max(1);
        (cin, c1, c2)
    }
}

/// Parameters of one RK3 block.
#[derive(Clone, Debug)]
pub struct Rk3Block {
    pub beta: [ParamId; 5],
    pub stages: [ConvStage; 3],
}

/// Three stacked stages used by the plain-CNN ablation.
#[derive(Clone, Debug)]
pub struct PlainBlock {
    pub stages: [ConvStage; 3],
}

#[derive(Clone, Debug)]
pub enum DenseBlock {
    Rk3(Rk3Block),
    Plain(PlainBlock),
}

fn three_stages<R: Rng>(store: &mut ParamStore, name: &str, c: usize, rng: &mut R) -> [ConvStage; 3] {
    [1, 2, 3].map(|j| ConvStage::new(store, &format!("{name}.stage{j}"), c, c, KERNEL, rng))
}

impl DenseBlock {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, c: usize, kind: BlockKind, rng: &mut R) -> Self {
        match kind {
            BlockKind::Rk3 => {
                let beta = [0, 1, 2, 3, 4].map(|i| {
                    store.add(
                        format!("{name}.beta{}", i + 1),
                        Tensor::from_elem(IxDyn(&[]), CLASSICAL_BETA[i]),
                        true,
                    )
                });
                DenseBlock::Rk3(Rk3Block {
                    beta,
                    stages: three_stages(store, name, c, rng),
                })
            }
            BlockKind::PlainCnn => DenseBlock::Plain(PlainBlock {
                stages: three_stages(store, name, c, rng),
            }),
        }
    }

    pub fn stages(&self) -> &[ConvStage; 3] {
        match self {
            DenseBlock::Rk3(b) => &b.stages,
            DenseBlock::Plain(b) => &b.stages,
        }
    }

    pub fn forward(&self, g: &mut Graph, f: &mut Fwd, x: Var) -> Var {
        match self {
            DenseBlock::Rk3(b) => {
                let beta = b.beta.map(|id| f.p(g, id));
                rk3_combine(g, x, beta, |g, j, input| b.stages[j].forward(g, f, input))
            }
            DenseBlock::Plain(b) => {
                let mut y = x;
                for st in &b.stages {
                    y = st.forward(g, f, y);
                }
                y
            }
        }
    }
}

/// RK3 block wiring around arbitrary stage functions `phi(g, stage, input)`.
pub fn rk3_combine<F>(g: &mut Graph, x: Var, beta: [Var; 5], mut phi: F) -> Var
where
    F: FnMut(&mut Graph, usize, Var) -> Var,
{
    let [b1, b2, b3, b4, b5] = beta;
    let g1 = phi(g, 0, x);
    let t = g.scale_by(g1, b1);
    let in2 = g.add(x, t);
    let g2 = phi(g, 1, in2);
    let t1 = g.scale_by(g1, b2);
    let t2 = g.scale_by(g2, b3);
    let in3 = g.add(x, t1);
    let in3 = g.add(in3, t2);
    let g3 = phi(g, 2, in3);
    let t5 = g.scale_by(g2, b5);
    let sum = g.add(g1, t5);
    let sum = g.add(sum, g3);
    let inc = g.scale_by(sum, b4);
    g.add(x, inc)
}

/// Maps `Y: [n, 2M, Np]` to `[n, C1, 2M, K]`.
#[derive(Clone, Debug)]
pub struct ResizeBlock {
    pub width: Linear,
    pub stage: ConvStage,
}

impl ResizeBlock {
    pub fn forward(&self, g: &mut Graph, f: &mut Fwd, y: Var) -> Var {
        let shape = g.value(y).shape().to_vec();
        let (n, rows) = (shape[0], shape[1]);
        let z = self.width.forward(g, f, y);
        let k = *g.value(z).shape().last().unwrap();
        let z = g.reshape(z, &[n, 1, rows, k]);
        self.stage.forward(g, f, z)
    }
}

/// Resize block followed by three densely connected blocks.
#[derive(Clone, Debug)]
pub struct DenseSubnet {
    pub channels: SubnetChannels,
    pub resize: ResizeBlock,
    pub blocks: [DenseBlock; 3],
}

impl DenseSubnet {
    fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cfg: &CenetConfig,
        channels: SubnetChannels,
        rng: &mut R,
    ) -> Self {
        let resize = ResizeBlock {
            width: Linear::new(store, &format!("{name}.resize.width"), cfg.np, cfg.k, rng),
            stage: ConvStage::new(store, &format!("{name}.resize.stage"), 1, channels.c1, KERNEL, rng),
        };
        let widths = [channels.c1, channels.c2, channels.c3];
        let blocks = [0, 1, 2].map(|i| {
            DenseBlock::new(store, &format!("{name}.block{}", i + 1), widths[i], cfg.block, rng)
        });
        Self {
            channels,
            resize,
            blocks,
        }
    }

    /// `[n, 2M, Np] → [n, C1+C2+C3, 2M, K]`.
    pub fn forward(&self, g: &mut Graph, f: &mut Fwd, y: Var) -> Var {
        let x1 = self.resize.forward(g, f, y);
        let z1 = self.blocks[0].forward(g, f, x1);
        let x2 = g.concat(&[x1, z1]);
        let z2 = self.blocks[1].forward(g, f, x2);
        let x3 = g.concat(&[x1, z1, z2]);
        let z3 = self.blocks[2].forward(g, f, x3);
        g.concat(&[z1, z2, z3])
    }
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub stages: [ConvStage; 2],
    pub out: Conv,
}

impl Fusion {
    /// `[n, C_A, 2M, K] ⊕ [n, C_B, 2M, K] → [n, 2M, K]`.
    pub fn forward(&self, g: &mut Graph, f: &mut Fwd, ha: Var, hb: Var) -> Var {
        let x = g.concat(&[ha, hb]);
        let x = self.stages[0].forward(g, f, x);
        let x = self.stages[1].forward(g, f, x);
        let y = self.out.forward(g, f, x);
        let s = g.value(y).shape().to_vec();
        g.reshape(y, &[s[0], s[2], s[3]])
    }
}

/// The full estimator.
#[derive(Clone, Debug)]
pub struct Cenet {
    pub cfg: CenetConfig,
    pub stream_a: DenseSubnet,
    pub stream_b: DenseSubnet,
    pub fusion: Fusion,
}

impl Cenet {
    /// Registers all parameters under `cenet.*` in `store`.
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: CenetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let stream_a = DenseSubnet::new(store, "cenet.a", &cfg, cfg.stream_a, rng);
        let stream_b = DenseSubnet::new(store, "cenet.b", &cfg, cfg.stream_b, rng);
        let (cin, c1, c2) = cfg.fusion_widths();
        let fusion = Fusion {
            stages: [
                ConvStage::new(store, "cenet.fusion.stage1", cin, c1, KERNEL, rng),
                ConvStage::new(store, "cenet.fusion.stage2", c1, c2, KERNEL, rng),
            ],
            out: Conv::new(store, "cenet.fusion.out", c2, 1, KERNEL, 1.0, rng),
        };
        Ok(Self {
            cfg,
            stream_a,
            stream_b,
            fusion,
        })
    }

    /// Rebinds an estimator to parameters already present in `store` (for
    /// instance after loading a bundle). Parameter names are structural, so
    /// building into a scratch store recovers every id.
    pub fn bind(store: &ParamStore, cfg: CenetConfig) -> Result<Self> {
        let mut scratch = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let fresh = Self::new(&mut scratch, cfg, &mut rng)?;
        let mut missing = Vec::new();
        let remap = |id: ParamId, missing: &mut Vec<String>| -> ParamId {
            let e = scratch.entry(id);
            match store.id(&e.name) {
                Some(found) if store.get(found).shape() == e.value.shape() => found,
                _ => {
                    missing.push(e.name.clone());
                    id
                }
            }
        };
        let bound = fresh.map_ids(&mut |id| remap(id, &mut missing));
        if !missing.is_empty() {
            return Err(Error::CorruptBundle(format!(
                "missing or mis-shaped CENet parameters: {}",
                missing.join(", ")
            )));
        }
        Ok(bound)
    }

    fn map_ids(&self, f: &mut dyn FnMut(ParamId) -> ParamId) -> Self {
        let stage = |s: &ConvStage, f: &mut dyn FnMut(ParamId) -> ParamId| ConvStage {
            bn: crate::nn::BatchNorm {
                gamma: f(s.bn.gamma),
                beta: f(s.bn.beta),
                mean: f(s.bn.mean),
                var: f(s.bn.var),
            },
            conv: Conv {
                w: f(s.conv.w),
                b: f(s.conv.b),
            },
        };
        let subnet = |n: &DenseSubnet, f: &mut dyn FnMut(ParamId) -> ParamId| {
            let blocks = [0, 1, 2].map(|i| match &n.blocks[i] {
                DenseBlock::Rk3(b) => DenseBlock::Rk3(Rk3Block {
                    beta: b.beta.map(&mut *f),
                    stages: [0, 1, 2].map(|j| stage(&b.stages[j], f)),
                }),
                DenseBlock::Plain(b) => DenseBlock::Plain(PlainBlock {
                    stages: [0, 1, 2].map(|j| stage(&b.stages[j], f)),
                }),
            });
            DenseSubnet {
                channels: n.channels,
                resize: ResizeBlock {
                    width: Linear {
                        w: f(n.resize.width.w),
                        b: f(n.resize.width.b),
                    },
                    stage: stage(&n.resize.stage, f),
                },
                blocks,
            }
        };
        Self {
            cfg: self.cfg.clone(),
            stream_a: subnet(&self.stream_a, f),
            stream_b: subnet(&self.stream_b, f),
            fusion: Fusion {
                stages: [stage(&self.fusion.stages[0], f), stage(&self.fusion.stages[1], f)],
                out: Conv {
                    w: f(self.fusion.out.w),
                    b: f(self.fusion.out.b),
                },
            },
        }
    }

    /// `Ya, Yb: [n, 2M, Np] → Ĥ: [n, 2M, K]`.
    ///
    /// A stream whose input is `None` (its antenna set is empty, so its
    /// input is identically zero) is not evaluated; the fusion sees zeros in
    /// its place.
    pub fn forward(&self, g: &mut Graph, f: &mut Fwd, ya: Option<Var>, yb: Option<Var>) -> Var {
        let shape = g.value(ya.or(yb).expect("at least one live stream")).shape().to_vec();
        let (n, rows) = (shape[0], shape[1]);
        let mut run = |g: &mut Graph, net: &DenseSubnet, y: Option<Var>| match y {
            Some(y) => net.forward(g, f, y),
            None => g.input(Tensor::zeros(IxDyn(&[n, net.channels.total(), rows, self.cfg.k]))),
        };
        let ha = run(g, &self.stream_a, ya);
        let hb = run(g, &self.stream_b, yb);
        self.fusion.forward(g, f, ha, hb)
    }

    /// Inference on plain arrays (running batch-norm statistics).
    pub fn infer(
        &self,
        params: &ParamStore,
        ya: Option<&Array3<f64>>,
        yb: Option<&Array3<f64>>,
    ) -> Array3<f64> {
        let mut g = Graph::new();
        let mut f = Fwd::infer(params);
        let a = ya.map(|y| g.input(y.clone().into_dyn()));
        let b = yb.map(|y| g.input(y.clone().into_dyn()));
        let h = self.forward(&mut g, &mut f, a, b);
        g.value(h)
            .clone()
            .into_dimensionality()
            .expect("estimator output is 3-D")
    }
}

pub fn cenet_loss(hhat: &Array3<f64>, htarget: &Array3<f64>) -> Result<f64> {
    check_targets(htarget)?;
    if hhat.shape() != htarget.shape() {
        return Err(Error::Shape(format!(
            "estimate {:?} vs target {:?}",
            hhat.shape(),
            htarget.shape()
        )));
    }
    Ok(crate::graph::nmse_value(
        &hhat.clone().into_dyn(),
        &htarget.clone().into_dyn(),
    ))
}

/// Rejects targets with an all-zero column.
pub fn check_targets(htarget: &Array3<f64>) -> Result<()> {
    let (n, r, k) = htarget.dim();
    for s in 0..n {
        for u in 0..k {
            if (0..r).all(|i| htarget[[s, i, u]] == 0.0) {
                return Err(Error::DegenerateSample { sample: s, user: u });
            }
        }
    }
    Ok(())
}

/// Graph node for [`cenet_loss`]; targets must already be validated.
pub fn cenet_loss_var(g: &mut Graph, hhat: Var, htarget: &Array3<f64>) -> Var {
    g.nmse(hhat, htarget.clone().into_dyn())
}
