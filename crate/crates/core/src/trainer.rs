//! End-to-end training: pilot → noise → quantization → allocation masks →
//! estimator, with the composite loss and Adam updates.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::airlink::{self, Observation, SelectionMasks};
use crate::bundle::{
    params_to_records, records_to_params, ArtifactBundle, BestSnapshot, EpochRecord, NamedArray,
    OptimizerState, BUNDLE_VERSION,
};
use crate::cenet::{cenet_loss, cenet_loss_var, check_targets, Cenet};
use crate::channel::ChannelBatch;
use crate::config::{ExperimentConfig, Mode};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::nn::{apply_bn_updates, Fwd};
use crate::pdnet::{normalize_power, normalized_pilot_var, zc_pilots, PilotWeights};
use crate::selnet::{khot_residuals, selnet_loss, selnet_loss_var, SelectionState, Selnet};

pub const PILOT_PARAM: &str = "pdnet.pilot";
const INFER_CHUNK: usize = 100;

/// RNG for a given purpose and epoch; streams never overlap.
fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

const STREAM_INIT: u64 = 0;
const STREAM_EPOCH: u64 = 1 << 32;

/// All trainable pieces bound to one parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ExperimentConfig,
    pub store: ParamStore,
    pub pilot: ParamId,
    pub selnet: Selnet,
    pub cenet: Cenet,
}

/// Graph handles for one training forward pass.
pub struct BatchForward {
    pub hhat: Var,
    pub loss: Var,
    pub l_cenet: Var,
    pub l_sel: Option<Var>,
    pub state: Option<SelectionState>,
}

impl Model {
    pub fn init(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(cfg.seed, STREAM_INIT);
        let mut store = ParamStore::new();
        let (raw, trainable) = if cfg.mode.learns_pilot() {
            (PilotWeights::init(cfg.k, cfg.np, cfg.rho, &mut rng).raw, true)
        } else {
            (zc_pilots(cfg.np, cfg.k, cfg.rho)?.1, false)
        };
        let pilot = store.add(PILOT_PARAM, raw.into_dyn(), trainable);
        let selnet = Selnet::new(&mut store, cfg.m, selnet_m_a(cfg), &mut rng)?;
        let cenet = Cenet::new(&mut store, cfg.cenet_config(), &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            pilot,
            selnet,
            cenet,
        })
    }

    pub fn bind(cfg: &ExperimentConfig, store: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let pilot = store
            .id(PILOT_PARAM)
            .filter(|&id| store.get(id).shape() == [2 * cfg.k, cfg.np])
            .ok_or_else(|| Error::CorruptBundle("missing pilot parameter".into()))?;
        let selnet = Selnet::bind(&store, cfg.m, selnet_m_a(cfg))?;
        let cenet = Cenet::bind(&store, cfg.cenet_config())?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            pilot,
            selnet,
            cenet,
        })
    }

    /// Power-normalized pilot `P̃`.
    pub fn deployed_pilot(&self) -> Result<ndarray::Array2<f64>> {
        let raw = self
            .store
            .get(self.pilot)
            .clone()
            .into_dimensionality()
            .expect("pilot is 2-D");
        normalize_power(&raw, self.cfg.rho)
    }

    pub fn selection_state(&self) -> Result<Option<SelectionState>> {
        if self.cfg.mode.uses_selnet() {
            Ok(Some(self.selnet.state(&self.store)?))
        } else {
            Ok(None)
        }
    }

    pub fn masks(&self) -> Result<SelectionMasks> {
        match self.cfg.static_masks()? {
            Some(m) => Ok(m),
            None => Ok(self.selnet.state(&self.store)?.masks),
        }
    }

    /// Builds the training graph for one batch. `noise` has the shape of
    /// `H̃P̃`.
    pub fn forward_batch(
        &self,
        g: &mut Graph,
        f: &mut Fwd,
        batch: &ChannelBatch,
        noise: &Array3<f64>,
        epoch: usize,
    ) -> Result<BatchForward> {
        let cfg = &self.cfg;
        let raw = f.p(g, self.pilot);
        let p = normalized_pilot_var(g, raw, cfg.np, cfg.rho);
        let h = g.input(batch.htilde.clone().into_dyn());
        let clean = g.matmul_last(h, p);
        let w = g.input(noise.clone().into_dyn());
        let z = g.add(clean, w);
        let q = airlink::quantize(g, z, cfg.surrogate, cfg.kappa_at(epoch));
        let (a, b, live, sel) = match cfg.static_masks()? {
            Some(masks) => {
                let a = g.input(masks.a().into_dyn());
                let b = g.input(masks.b().into_dyn());
                (a, b, stream_liveness(&masks), None)
            }
            None => {
                let sel = self.selnet.forward(g, f)?;
                let live = stream_liveness(&sel.state.masks);
                (sel.a, sel.b, live, Some(sel))
            }
        };
        let ya = live[0].then(|| g.mask_rows(z, a));
        let yb = live[1].then(|| g.mask_rows(q, b));
        let hhat = self.cenet.forward(g, f, ya, yb);
        let l_cenet = cenet_loss_var(g, hhat, &batch.htarget);
        let (loss, l_sel, state) = match sel {
            Some(sel) => {
                let l_sel = selnet_loss_var(g, sel.u_tilde, cfg.m_a, cfg.gamma1, cfg.gamma2);
                let weighted = g.scale(l_sel, cfg.gamma3(epoch));
                (g.add(l_cenet, weighted), Some(l_sel), Some(sel.state))
            }
            None => (l_cenet, None, None),
        };
        Ok(BatchForward {
            hhat,
            loss,
            l_cenet,
            l_sel,
            state,
        })
    }

    /// Deployment view (normalized pilot, fixed masks, inference mode).
    pub fn deployment(&self) -> Result<Deployment> {
        Ok(Deployment {
            cfg: self.cfg.clone(),
            pilot: self.deployed_pilot()?,
            masks: self.masks()?,
            store: self.store.clone(),
            cenet: self.cenet.clone(),
        })
    }
}

/// Whether the full-resolution and one-bit streams receive any antenna.
fn stream_liveness(masks: &SelectionMasks) -> [bool; 2] {
    [!masks.set_a.is_empty(), !masks.set_b.is_empty()]
}

fn selnet_m_a(cfg: &ExperimentConfig) -> usize {
    if cfg.mode.uses_selnet() {
        cfg.m_a
    } else {
        cfg.m_a.clamp(1, cfg.m)
    }
}

/// Per-sample noise for a batch; `sigma2[i]` is sample `i`'s variance.
pub fn batch_noise<R: Rng>(shape: (usize, usize, usize), sigma2: &[f64], rng: &mut R) -> Array3<f64> {
    let mut out = Array3::zeros(shape);
    for (i, &s2) in sigma2.iter().enumerate() {
        let n = Normal::new(0.0, (s2 / 2.0).sqrt()).expect("nonnegative variance");
        out.slice_mut(s![i, .., ..])
            .mapv_inplace(|_| n.sample(rng));
    }
    out
}

/// `L_CENet + γ₃(epoch)·L_SELNet`; the allocation term is absent without a
/// learned allocation.
pub fn composite_loss(
    hhat: &Array3<f64>,
    htarget: &Array3<f64>,
    state: Option<&SelectionState>,
    cfg: &ExperimentConfig,
    epoch: usize,
) -> Result<f64> {
    let l = cenet_loss(hhat, htarget)?;
    Ok(match state {
        Some(s) if cfg.mode.uses_selnet() => {
            l + cfg.gamma3(epoch) * selnet_loss(s, cfg.gamma1, cfg.gamma2)
        }
        _ => l,
    })
}

/// Adam with bias correction; moments are indexed by parameter id.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }

    /// One update of every trainable parameter that received a gradient.
    pub fn update(&mut self, store: &mut ParamStore, grads: &HashMap<ParamId, Tensor>, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut ids: Vec<&ParamId> = grads.keys().collect();
        ids.sort_by_key(|id| id.0);
        for &id in ids {
            if !store.entry(id).trainable {
                continue;
            }
            let gr = &grads[&id];
            let m = self.m[id.0].get_or_insert_with(|| Tensor::zeros(gr.raw_dim()));
            let v = self.v[id.0].get_or_insert_with(|| Tensor::zeros(gr.raw_dim()));
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            ndarray::Zip::from(&mut *m)
                .and(&mut *v)
                .and(gr)
                .and(store.get_mut(id))
                .for_each(|m, v, &g, p| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }

    pub fn to_state(&self, store: &ParamStore) -> OptimizerState {
        let collect = |mv: &[Option<Tensor>]| {
            mv.iter()
                .enumerate()
                .filter_map(|(i, t)| {
                    t.as_ref()
                        .map(|t| NamedArray::new(store.entry(ParamId(i)).name.clone(), t))
                })
                .collect()
        };
        OptimizerState {
            step: self.step,
            m: collect(&self.m),
            v: collect(&self.v),
        }
    }

    pub fn from_state(state: &OptimizerState, store: &ParamStore) -> Result<Self> {
        let mut adam = Self::new(store.len());
        adam.step = state.step;
        let fill = |src: &[NamedArray], dst: &mut Vec<Option<Tensor>>| -> Result<()> {
            for a in src {
                let id = store.id(&a.name).ok_or_else(|| {
                    Error::CorruptBundle(format!("optimizer state for unknown parameter {}", a.name))
                })?;
                let t = a.tensor()?;
                if t.shape() != store.get(id).shape() {
                    return Err(Error::CorruptBundle(format!("optimizer state shape for {}", a.name)));
                }
                dst[id.0] = Some(t);
            }
            Ok(())
        };
        fill(&state.m, &mut adam.m)?;
        fill(&state.v, &mut adam.v)?;
        Ok(adam)
    }
}

/// Hooks around [`train`].
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Append-only JSON-lines log, one record per epoch.
    pub log: Option<&'a Path>,
    /// Checkpoint rewritten after every epoch.
    pub checkpoint: Option<&'a Path>,
    /// Continue from a checkpoint produced with the same config.
    pub resume: Option<ArtifactBundle>,
    /// Return after this many completed epochs (the returned bundle is a
    /// resumable checkpoint).
    pub stop_after: Option<usize>,
}

/// Runs the training loop and returns the deployment bundle.
pub fn train(cfg: &ExperimentConfig, data: &Dataset, opts: TrainOptions) -> Result<ArtifactBundle> {
    cfg.validate()?;
    if data.spec != cfg.channel_spec() {
        return Err(Error::Config(
            "dataset was generated from a different channel spec".into(),
        ));
    }
    check_targets(&data.train.htarget)?;

    let (mut model, mut adam, mut curves, mut best, start) = match opts.resume {
        Some(ck) => {
            if ck.config != *cfg {
                return Err(Error::Config("checkpoint config differs from the run config".into()));
            }
            let store = records_to_params(&ck.params)?;
            let model = Model::bind(cfg, store)?;
            let adam = match &ck.optimizer {
                Some(st) => Adam::from_state(st, &model.store)?,
                None => {
                    return Err(Error::CorruptBundle(
                        "bundle has no optimizer state to resume from".into(),
                    ))
                }
            };
            (model, adam, ck.curves, ck.best, ck.epochs_done)
        }
        None => {
            let model = Model::init(cfg)?;
            let n = model.store.len();
            (model, Adam::new(n), Vec::new(), None, 0)
        }
    };

    let (train_idx, val) = split_validation(cfg, &data.train);
    let mut log = match opts.log {
        Some(p) => Some(
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?,
        ),
        None => None,
    };

    let mut epoch = start;
    while epoch < cfg.epochs {
        if opts.stop_after.is_some_and(|s| epoch >= s) {
            break;
        }
        if let (Some(patience), Some(b)) = (cfg.early_stop_patience, &best) {
            if epoch >= b.epoch + 1 + patience {
                break;
            }
        }
        let t0 = Instant::now();
        let rec = run_epoch(&mut model, &mut adam, &data.train, &train_idx, epoch)?;
        let val_nmse = match &val {
            Some(v) => Some(validation_nmse(&model, v, epoch)?),
            None => None,
        };
        let rec = EpochRecord {
            val_nmse,
            wall_s: t0.elapsed().as_secs_f64(),
            ..rec
        };
        log::info!(
            "epoch {} loss {:.5} nmse {:.5} sel {:.5} lr {:.2e}",
            rec.epoch,
            rec.loss,
            rec.l_cenet,
            rec.l_sel,
            rec.lr
        );
        if let Some(vn) = val_nmse {
            if best.as_ref().map_or(true, |b| vn < b.val_nmse) {
                best = Some(BestSnapshot {
                    epoch,
                    val_nmse: vn,
                    params: params_to_records(&model.store),
                });
            }
        }
        if let Some(f) = log.as_mut() {
            let line = serde_json::to_string(&rec)?;
            writeln!(f, "{line}").map_err(|e| Error::io(opts.log.unwrap(), e))?;
        }
        curves.push(rec);
        epoch += 1;
        if let Some(path) = opts.checkpoint {
            snapshot(&model, &adam, &curves, &best, epoch, true)?.save(path)?;
        }
    }

    let finished = epoch >= cfg.epochs || opts.stop_after.map_or(true, |s| epoch < s);
    if finished {
        if let Some(b) = &best {
            let store = records_to_params(&b.params)?;
            model = Model::bind(cfg, store)?;
        }
    }
    snapshot(&model, &adam, &curves, &best, epoch, true)
}

fn split_validation(cfg: &ExperimentConfig, train: &ChannelBatch) -> (Vec<usize>, Option<ChannelBatch>) {
    let n = train.len();
    match cfg.early_stop_patience {
        Some(_) => {
            let n_val = (n / 10).max(1);
            let idx: Vec<usize> = (0..n - n_val).collect();
            let val: Vec<usize> = (n - n_val..n).collect();
            (idx, Some(train.select(&val)))
        }
        None => ((0..n).collect(), None),
    }
}

fn validation_nmse(model: &Model, val: &ChannelBatch, epoch: usize) -> Result<f64> {
    let dep = model.deployment()?;
    let mut rng = rng_for(model.cfg.seed, STREAM_EPOCH + 2 * epoch as u64 + 1);
    dep.nmse(val, model.cfg.sigma2_at(model.cfg.train_snr_db), &mut rng)
}

fn run_epoch(
    model: &mut Model,
    adam: &mut Adam,
    train: &ChannelBatch,
    idx: &[usize],
    epoch: usize,
) -> Result<EpochRecord> {
    let cfg = model.cfg.clone();
    let mut rng = rng_for(cfg.seed, STREAM_EPOCH + 2 * epoch as u64);
    let mut order = idx.to_vec();
    order.shuffle(&mut rng);
    let lr = cfg.lr(epoch);
    let (mut sum_loss, mut sum_ce, mut sum_sel, mut batches) = (0.0, 0.0, 0.0, 0usize);
    for chunk in order.chunks(cfg.batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        let batch = train.select(chunk);
        let sigma2: Vec<f64> = (0..chunk.len())
            .map(|_| {
                let snr = match cfg.train_snr_db_max {
                    Some(hi) if hi > cfg.train_snr_db => rng.gen_range(cfg.train_snr_db..hi),
                    _ => cfg.train_snr_db,
                };
                cfg.sigma2_at(snr)
            })
            .collect();
        let noise = batch_noise((chunk.len(), 2 * cfg.m, cfg.np), &sigma2, &mut rng);
        let mut g = Graph::new();
        let mut f = Fwd::train(&model.store);
        let fw = model.forward_batch(&mut g, &mut f, &batch, &noise, epoch)?;
        let loss = g.scalar(fw.loss);
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        sum_loss += loss;
        sum_ce += g.scalar(fw.l_cenet);
        sum_sel += fw.l_sel.map_or(0.0, |v| g.scalar(v));
        batches += 1;
        let updates = std::mem::take(&mut f.bn_updates);
        let grads = g.backward(fw.loss).params();
        drop(f);
        apply_bn_updates(&mut model.store, updates);
        adam.update(&mut model.store, &grads, lr);
        if model
            .store
            .iter()
            .any(|(_, e)| e.trainable && e.value.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Diverged { epoch });
        }
    }
    let nb = batches.max(1) as f64;
    let state = model.selection_state()?;
    let (r2, r3, gap) = match &state {
        Some(s) => {
            let (r2, r3) = khot_residuals(&s.u_tilde, s.m_a);
            (r2, r3, s.binary_gap())
        }
        None => (0.0, 0.0, 0.0),
    };
    Ok(EpochRecord {
        epoch,
        loss: sum_loss / nb,
        l_cenet: sum_ce / nb,
        l_sel: sum_sel / nb,
        gamma3: if cfg.mode.uses_selnet() { cfg.gamma3(epoch) } else { 0.0 },
        lr,
        kappa: cfg.kappa_at(epoch),
        r2,
        r3,
        binary_gap: gap,
        set_a: model.masks()?.set_a.clone(),
        val_nmse: None,
        wall_s: 0.0,
    })
}

fn snapshot(
    model: &Model,
    adam: &Adam,
    curves: &[EpochRecord],
    best: &Option<BestSnapshot>,
    epochs_done: usize,
    with_optimizer: bool,
) -> Result<ArtifactBundle> {
    let masks = model.masks()?;
    Ok(ArtifactBundle {
        version: BUNDLE_VERSION,
        config: model.cfg.clone(),
        pilot: NamedArray::new("pilot", &model.deployed_pilot()?.into_dyn()),
        set_a: masks.set_a.clone(),
        set_b: masks.set_b.clone(),
        params: params_to_records(&model.store),
        curves: curves.to_vec(),
        epochs_done,
        optimizer: with_optimizer.then(|| adam.to_state(&model.store)),
        best: best.clone(),
    })
}

/// Writes a bundle to disk.
pub fn export_deployment(bundle: &ArtifactBundle, path: &Path) -> Result<()> {
    bundle.save(path)
}

/// Loads a bundle and rebuilds the deployed estimator.
pub fn load_deployment(path: &Path) -> Result<Deployment> {
    Deployment::from_bundle(&ArtifactBundle::load(path)?)
}

/// A trained system ready for inference.
#[derive(Clone, Debug)]
pub struct Deployment {
    pub cfg: ExperimentConfig,
    /// Normalized pilot `P̃ ∈ R^{2K×Np}`.
    pub pilot: ndarray::Array2<f64>,
    pub masks: SelectionMasks,
    pub store: ParamStore,
    pub cenet: Cenet,
}

impl Deployment {
    pub fn from_bundle(b: &ArtifactBundle) -> Result<Self> {
        let store = records_to_params(&b.params)?;
        let model = Model::bind(&b.config, store)?;
        let pilot = b.pilot.matrix()?;
        if pilot.dim() != (2 * b.config.k, b.config.np) {
            return Err(Error::CorruptBundle("pilot shape".into()));
        }
        let masks = SelectionMasks::from_set_a(b.config.m, &b.set_a)?;
        if masks.set_b != b.set_b {
            return Err(Error::CorruptBundle("index sets A and B do not partition the array".into()));
        }
        Ok(Self {
            cfg: b.config.clone(),
            pilot,
            masks,
            store: model.store,
            cenet: model.cenet,
        })
    }

    pub fn method_label(&self) -> String {
        method_label(self.cfg.mode, self.masks.m_a())
    }

    /// Received pilot block for a batch of channels at noise variance `sigma2`.
    pub fn observe<R: Rng>(&self, htilde: &Array3<f64>, sigma2: f64, rng: &mut R) -> Result<Observation> {
        let z = airlink::transmit(htilde.view(), &self.pilot, sigma2, rng)?;
        Ok(Observation::new(z, &self.masks, sigma2))
    }

    /// Channel estimates from masked observations, in chunks.
    pub fn estimate(&self, ya: &Array3<f64>, yb: &Array3<f64>) -> Result<Array3<f64>> {
        let (n, rows, np) = ya.dim();
        if yb.dim() != (n, rows, np) || rows != 2 * self.cfg.m || np != self.cfg.np {
            return Err(Error::Shape(format!(
                "observations {:?}/{:?}, expected [n, {}, {}]",
                ya.shape(),
                yb.shape(),
                2 * self.cfg.m,
                self.cfg.np
            )));
        }
        let live = stream_liveness(&self.masks);
        let mut out = Array3::zeros((n, rows, self.cfg.k));
        for start in (0..n).step_by(INFER_CHUNK) {
            let end = (start + INFER_CHUNK).min(n);
            let a = ya.slice(s![start..end, .., ..]).to_owned();
            let b = yb.slice(s![start..end, .., ..]).to_owned();
            let h = self.cenet.infer(
                &self.store,
                live[0].then_some(&a),
                live[1].then_some(&b),
            );
            out.slice_mut(s![start..end, .., ..]).assign(&h);
        }
        Ok(out)
    }

    /// Monte-Carlo NMSE over `batch` at noise variance `sigma2`.
    pub fn nmse<R: Rng>(&self, batch: &ChannelBatch, sigma2: f64, rng: &mut R) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyTestSet);
        }
        let obs = self.observe(&batch.htilde, sigma2, rng)?;
        let hhat = self.estimate(&obs.ya, &obs.yb)?;
        cenet_loss(&hhat, &batch.htarget)
    }
}

/// Comparison-table label for a trained configuration.
pub fn method_label(mode: Mode, m_a: usize) -> String {
    match mode {
        Mode::ZcPilots => "CENet, 1-bit".into(),
        Mode::OneBit => "PDNet+CENet, 1-bit".into(),
        Mode::FixedAlloc => format!("PDNet+CENet, fixed M_A={m_a}"),
        Mode::CnnAblation => format!("CNN, M_A={m_a}"),
        Mode::Full => format!("proposed, M_A={m_a}"),
    }
}

/// Estimates for `batch` from one seeded noise draw.
pub fn probe_estimate(dep: &Deployment, batch: &ChannelBatch, sigma2: f64, seed: u64) -> Result<Array3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obs = dep.observe(&batch.htilde, sigma2, &mut rng)?;
    dep.estimate(&obs.ya, &obs.yb)
}

