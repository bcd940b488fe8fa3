//! Acceptance suite. Prints one PASS/FAIL line per criterion and a summary.
//! A failing criterion makes the process exit nonzero only when
//! `MIXADC_ACCEPT_STRICT=1`, so `cargo test` still runs the other targets.
//!
//! Pass criterion numbers as arguments to run a subset:
//! `cargo test --test acceptance -- 1 4 9`. Trained models for the trend
//! criteria (5 to 8) are cached under `target/acceptance-cache`, keyed by a
//! hash of the run config; set `MIXADC_ACCEPT_CACHE` to move the cache.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use mixadc::airlink::{quantize, softsign, Observation, SelectionMasks, Surrogate};
use mixadc::bundle::ArtifactBundle;
use mixadc::cenet::{cenet_loss_var, rk3_combine, Cenet, CLASSICAL_BETA};
use mixadc::config::{ExperimentConfig, Mode};
use mixadc::dataset::Dataset;
use mixadc::eval::{ber_eval, nmse_eval, to_db, BerSetup, Csi, DetectorKind};
use mixadc::graph::{Graph, ParamStore, Tensor};
use mixadc::manifest::sha256_hex;
use mixadc::modulation::Constellation;
use mixadc::nn::{apply_bn_updates, normal_tensor, Fwd};
use mixadc::pdnet::zc_pilots;
use mixadc::selnet::{
    falsification_search, khot_certificate, selection_from_logits, Certificate, SelectionState,
};
use mixadc::trainer::{batch_noise, train, Adam, Deployment, Model, TrainOptions};
use ndarray::{Array2, Array3, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .try_init();
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let criteria: [(u32, &str, fn(&mut Runs) -> Outcome); 9] = [
        (1, "rk3 oracle", c1_rk3_oracle),
        (2, "surrogate gradients", c2_gradients),
        (3, "k-hot certificate", c3_certificate),
        (4, "structural invariants", c4_invariants),
        (5, "trend at 10 dB", c5_trends),
        (6, "error floor", c6_error_floor),
        (7, "monotone in M_A", c7_monotone),
        (8, "selnet convergence", c8_selnet),
        (9, "detector", c9_detector),
    ];
    let mut runs = Runs::new();
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !run(n) {
            continue;
        }
        let t = Instant::now();
        let o = f(&mut runs);
        let tag = if o.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!o.pass);
        println!(
            "{tag} {n} {name}: {} [{:.1} s]",
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {failed} criteria failed");
    let strict = std::env::var("MIXADC_ACCEPT_STRICT").is_ok_and(|v| v == "1");
    if failed > 0 && strict {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- 1

fn rk3_reference(a: &Array2<f64>, x: &[f64], mu: f64) -> Vec<f64> {
    let f = |v: &[f64]| -> Vec<f64> { a.dot(&ndarray::arr1(v)).to_vec() };
    let add = |v: &[f64], w: &[f64], s: f64| -> Vec<f64> {
        v.iter().zip(w).map(|(p, q)| p + s * q).collect()
    };
    let k1 = f(x);
    let k2 = f(&add(x, &k1, mu / 2.0));
    let k3 = f(&add(&add(x, &k1, -mu), &k2, 2.0 * mu));
    (0..x.len())
        .map(|i| x[i] + mu / 6.0 * (k1[i] + 4.0 * k2[i] + k3[i]))
        .collect()
}

fn rk3_graph(a: &Array2<f64>, x: &[f64], mu: f64) -> Vec<f64> {
    let d = x.len();
    let mut g = Graph::new();
    let xv = g.input(Tensor::from_shape_vec(IxDyn(&[1, d]), x.to_vec()).unwrap());
    let w = g.input((a.t().to_owned() * mu).into_dyn());
    let beta = CLASSICAL_BETA.map(|b| g.input(Tensor::from_elem(IxDyn(&[]), b)));
    let z = rk3_combine(&mut g, xv, beta, |g, _, v| g.matmul_last(v, w));
    g.value(z).iter().copied().collect()
}

fn c1_rk3_oracle(_: &mut Runs) -> Outcome {
    // dx/dt = A x with A = [[a, -b], [b, a]] has exp(tA) = e^{at} R(bt).
    let (ar, br) = (-0.5, 2.0);
    let a = ndarray::arr2(&[[ar, -br], [br, ar]]);
    let exact = |x: &[f64], t: f64| -> Vec<f64> {
        let s = (ar * t).exp();
        let (c, sn) = ((br * t).cos(), (br * t).sin());
        vec![s * (c * x[0] - sn * x[1]), s * (sn * x[0] + c * x[1])]
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut max_diff: f64 = 0.0;
    for _ in 0..20 {
        let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mu = rng.gen_range(0.01..0.5);
        let d = rk3_reference(&a, &x, mu)
            .iter()
            .zip(rk3_graph(&a, &x, mu))
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        max_diff = max_diff.max(d);
    }
    // A larger random system for the graph/reference agreement as well.
    let a4 = Array2::from_shape_fn((6, 6), |_| rng.gen_range(-1.0..1.0));
    let x4: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for mu in [0.3, 0.1] {
        let d = rk3_reference(&a4, &x4, mu)
            .iter()
            .zip(rk3_graph(&a4, &x4, mu))
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        max_diff = max_diff.max(d);
    }

    let x0 = [1.0, 0.5];
    let err = |mu: f64| -> f64 {
        let y = rk3_graph(&a, &x0, mu);
        let e = exact(&x0, mu);
        ((y[0] - e[0]).powi(2) + (y[1] - e[1]).powi(2)).sqrt()
    };
    let mus = [0.1, 0.05, 0.025];
    let errs: Vec<f64> = mus.iter().map(|&m| err(m)).collect();
    let orders: Vec<f64> = errs.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let pass = max_diff < 1e-10 && orders.iter().all(|&o| o >= 3.5);
    outcome(
        pass,
        format!(
            "max |block - RK3| = {max_diff:.1e} (< 1e-10); local errors {:.2e}/{:.2e}/{:.2e}, observed orders {:.2}, {:.2} (>= 3.5)",
            errs[0], errs[1], errs[2], orders[0], orders[1]
        ),
    )
}

// ---------------------------------------------------------------- 2

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn c2_gradients(_: &mut Runs) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let kappa = 70.0;

    // Quantization layer: backward equals the derivative of softsign.
    let n = 64;
    let z0: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.08..0.08)).collect();
    let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut g = Graph::new();
    let z = g.input(Tensor::from_shape_vec(IxDyn(&[n]), z0.clone()).unwrap());
    let q = quantize(&mut g, z, Surrogate::SignForward, kappa);
    let cv = g.input(Tensor::from_shape_vec(IxDyn(&[n]), c.clone()).unwrap());
    let p = g.mul(q, cv);
    let loss = g.sum(p);
    let an = g.backward(loss).wrt(z).unwrap().clone();
    let surrogate = |v: &[f64]| -> f64 { v.iter().zip(&c).map(|(x, w)| w * softsign(*x, kappa)).sum() };
    let h = 1e-7;
    let mut q_err: f64 = 0.0;
    for i in 0..n {
        let mut a = z0.clone();
        let mut b = z0.clone();
        a[i] += h;
        b[i] -= h;
        let fd = (surrogate(&a) - surrogate(&b)) / (2.0 * h);
        q_err = q_err.max(rel(fd, an[i]));
    }

    // Top-K layer: backward equals the gradient of the scaled softmax.
    let mut k_err: f64 = 0.0;
    for (m, m_a) in [(8, 3), (16, 4), (6, 1)] {
        let v0: Vec<f64> = (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let c: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let v = g.input(Tensor::from_shape_vec(IxDyn(&[m]), v0.clone()).unwrap());
        let sel = selection_from_logits(&mut g, v, m_a).unwrap();
        let cv = g.input(Tensor::from_shape_vec(IxDyn(&[m]), c.clone()).unwrap());
        let p = g.mul(sel.a, cv);
        let loss = g.sum(p);
        let an = g.backward(loss).wrt(v).unwrap().clone();
        let f = |v: &[f64]| -> f64 {
            let s = SelectionState::from_logits(v, m_a).unwrap();
            s.u_tilde.iter().zip(&c).map(|(a, b)| a * b).sum()
        };
        for i in 0..m {
            let mut a = v0.clone();
            let mut b = v0.clone();
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let fd = (f(&a) - f(&b)) / 2e-6;
            k_err = k_err.max(rel(fd, an[i]));
        }
    }

    let (cenet_err, n_params, worst) = cenet_gradient_check(&mut rng);
    let pass = q_err < 1e-4 && k_err < 1e-4 && cenet_err < 1e-3;
    outcome(
        pass,
        format!(
            "quantizer {q_err:.1e}, top-K {k_err:.1e} (< 1e-4); CENet {cenet_err:.1e} over {n_params} parameters, worst tensor {worst} (< 1e-3)"
        ),
    )
}

/// Per-tensor `‖analytic − fd‖ / ‖fd‖` for every trainable CENet parameter on
/// the M=4, K=2, Np=4 instance; returns the worst ratio.
fn cenet_gradient_check(rng: &mut ChaCha8Rng) -> (f64, usize, String) {
    let mut cfg = ExperimentConfig::desk_scale();
    cfg.m = 4;
    cfg.k = 2;
    cfg.np = 4;
    cfg.c1_a = 2;
    cfg.c1_b = 2;
    let mut store = ParamStore::new();
    let cenet = Cenet::new(&mut store, cfg.cenet_config(), rng).unwrap();
    let n = 6;
    let masks = SelectionMasks::from_set_a(cfg.m, &[1, 2]).unwrap();
    let z: Array3<f64> = normal_tensor(&[n, 2 * cfg.m, cfg.np], 1.0, rng)
        .into_dimensionality()
        .unwrap();
    let obs = Observation::new(z, &masks, 0.1);
    let target: Array3<f64> = normal_tensor(&[n, 2 * cfg.m, cfg.k], 1.0, rng)
        .into_dimensionality()
        .unwrap();

    let loss_at = |store: &ParamStore, grads: bool| -> (f64, Option<Vec<(String, Tensor)>>) {
        let mut g = Graph::new();
        let mut f = Fwd::train(store);
        let ya = g.input(obs.ya.clone().into_dyn());
        let yb = g.input(obs.yb.clone().into_dyn());
        let hhat = cenet.forward(&mut g, &mut f, Some(ya), Some(yb));
        let loss = cenet_loss_var(&mut g, hhat, &target);
        let value = g.scalar(loss);
        let out = grads.then(|| {
            let gr = g.backward(loss).params();
            store
                .iter()
                .filter(|(_, e)| e.trainable)
                .map(|(id, e)| {
                    let t = gr
                        .get(&id)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(e.value.raw_dim()));
                    (e.name.clone(), t)
                })
                .collect()
        });
        (value, out)
    };
    let (_, analytic) = loss_at(&store, true);
    let analytic = analytic.unwrap();
    let h = 1e-6;
    let mut worst = (0.0, String::new());
    let mut count = 0;
    let ids: Vec<_> = store.trainable_ids();
    for (id, (name, an)) in ids.iter().zip(&analytic) {
        let len = store.get(*id).len();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..len {
            let orig = store.get(*id).as_slice().unwrap()[i];
            store.get_mut(*id).as_slice_mut().unwrap()[i] = orig + h;
            let (lp, _) = loss_at(&store, false);
            store.get_mut(*id).as_slice_mut().unwrap()[i] = orig - h;
            let (lm, _) = loss_at(&store, false);
            store.get_mut(*id).as_slice_mut().unwrap()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let a = an.as_slice().unwrap()[i];
            num += (a - fd).powi(2);
            den += fd * fd;
        }
        count += len;
        let r = num.sqrt() / den.sqrt().max(1e-12);
        if r > worst.0 {
            worst = (r, name.clone());
        }
    }
    (worst.0, count, worst.1)
}

// ---------------------------------------------------------------- 3

fn c3_certificate(_: &mut Runs) -> Outcome {
    let mut all_certify = true;
    let mut n_khot = 0;
    for m in 1..=8usize {
        for bits in 1u32..(1 << m) {
            let x: Vec<f64> = (0..m).map(|i| f64::from((bits >> i) & 1)).collect();
            let k = bits.count_ones() as usize;
            n_khot += 1;
            let c = khot_certificate(&x, k, 1.0, 2.0, 3.0, 1e-12).unwrap();
            all_certify &= c == Certificate::KHot { max_gap: 0.0 };
        }
    }
    let mut counterexamples = 0;
    let mut converged = 0;
    let mut worst_gap: f64 = 0.0;
    let mut searches = 0;
    for (m, k) in [(8, 1), (8, 2), (8, 3), (8, 4), (8, 5), (8, 7), (6, 2), (4, 2)] {
        let r = falsification_search(m, k, (1.0, 2.0, 3.0), 1000, 1e-8, 1e-3, 100 + m as u64 * 10 + k as u64);
        counterexamples += r.counterexamples.len();
        converged += r.converged;
        worst_gap = worst_gap.max(r.worst_gap);
        searches += 1;
    }
    outcome(
        all_certify && counterexamples == 0,
        format!(
            "{n_khot} exact K-hot vectors certify: {all_certify}; {searches} searches x 1000 restarts at M <= 8: \
             {counterexamples} counterexamples, {converged} restarts reached residuals < 1e-8 (max entry gap {worst_gap:.1e})"
        ),
    )
}

// ---------------------------------------------------------------- 4

fn c4_invariants(runs: &mut Runs) -> Outcome {
    // Pilot power and masks after every optimizer step of a short run.
    let mut cfg = ExperimentConfig::desk_scale();
    cfg.m = 8;
    cfg.np = 8;
    cfg.n_train = 200;
    cfg.n_test = 20;
    cfg.batch_size = 50;
    cfg.c1_a = 2;
    cfg.c1_b = 2;
    cfg.m_a = 3;
    cfg.rho = 2.5;
    let ds = Dataset::generate(&cfg.channel_spec()).unwrap();
    let mut model = Model::init(&cfg).unwrap();
    let mut adam = Adam::new(model.store.len());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let target = cfg.np as f64 * cfg.rho;
    let mut power_err: f64 = 0.0;
    let mut overlap: f64 = 0.0;
    let mut sum_a_ok = true;
    let steps = 40;
    for step in 0..steps {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..cfg.n_train)).collect();
        let batch = ds.train.select(&idx);
        let noise = batch_noise(
            (idx.len(), 2 * cfg.m, cfg.np),
            &vec![cfg.sigma2_at(10.0); idx.len()],
            &mut rng,
        );
        let mut g = Graph::new();
        let mut f = Fwd::train(&model.store);
        let fw = model.forward_batch(&mut g, &mut f, &batch, &noise, step / 5).unwrap();
        let updates = std::mem::take(&mut f.bn_updates);
        let grads = g.backward(fw.loss).params();
        drop(f);
        apply_bn_updates(&mut model.store, updates);
        adam.update(&mut model.store, &grads, 5e-3);

        let p = model.deployed_pilot().unwrap();
        let tr = p.dot(&p.t()).diag().sum();
        power_err = power_err.max((tr - target).abs() / target);
        let masks = model.masks().unwrap();
        sum_a_ok &= masks.a().sum() == cfg.m_a as f64 && masks.m_a() == cfg.m_a;
        let dep = model.deployment().unwrap();
        let obs = dep.observe(&batch.htilde, cfg.sigma2_at(10.0), &mut rng).unwrap();
        overlap = overlap.max(
            obs.ya
                .iter()
                .zip(obs.yb.iter())
                .map(|(a, b)| (a * b).abs())
                .fold(0.0, f64::max),
        );
    }
    // Trained runs already on disk must satisfy the same pilot power.
    let mut cached = 0;
    for b in runs.cached_bundles() {
        let p = b.pilot.matrix().unwrap();
        let t = b.config.np as f64 * b.config.rho;
        power_err = power_err.max((p.dot(&p.t()).diag().sum() - t).abs() / t);
        sum_a_ok &= b.set_a.len() == b.config.deployed_m_a();
        cached += 1;
    }

    let (pc, _) = zc_pilots(64, 8, 1.0).unwrap();
    let gram = pc.dot(&pc.t().mapv(|z| z.conj()));
    let mut off: f64 = 0.0;
    for i in 0..8 {
        for j in 0..8 {
            if i != j {
                off = off.max(gram[[i, j]].norm());
            }
        }
    }
    let pass = power_err < 1e-10 && overlap == 0.0 && sum_a_ok && off < 1e-10;
    outcome(
        pass,
        format!(
            "pilot power rel. err {power_err:.1e} over {steps} steps and {cached} cached runs (< 1e-10); \
             max |Ya*Yb| = {overlap}; sum(a) = M_A: {sum_a_ok}; ZC Gram off-diagonal {off:.1e} (< 1e-10)"
        ),
    )
}

// ---------------------------------------------------------------- runs

/// Trained bundles for the trend criteria, cached on disk by config hash.
struct Runs {
    dir: PathBuf,
    data: BTreeMap<String, Dataset>,
}

impl Runs {
    fn new() -> Self {
        let dir = std::env::var_os("MIXADC_ACCEPT_CACHE")
            .map(PathBuf::from)
            .unwrap_or_else(|| {
                PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance-cache")
            });
        Self {
            dir,
            data: BTreeMap::new(),
        }
    }

    fn dataset(&mut self, cfg: &ExperimentConfig) -> &Dataset {
        let key = serde_json::to_string(&cfg.channel_spec()).unwrap();
        self.data
            .entry(key)
            .or_insert_with(|| Dataset::generate(&cfg.channel_spec()).unwrap())
    }

    fn bundle(&mut self, cfg: &ExperimentConfig) -> ArtifactBundle {
        let text = cfg.to_toml_string();
        let key = &sha256_hex(format!("{}\n{text}", env!("CARGO_PKG_VERSION")).as_bytes())[..16];
        let path = self.dir.join(format!(
            "{}-ma{}-snr{}-seed{}-{key}.bundle",
            cfg.mode.as_str(),
            cfg.deployed_m_a(),
            cfg.train_snr_db,
            cfg.seed
        ));
        if let Ok(b) = ArtifactBundle::load(&path) {
            if b.config == *cfg && b.epochs_done == cfg.epochs {
                return b;
            }
        }
        std::fs::create_dir_all(&self.dir).unwrap();
        eprintln!("training {} (cached as {})", path.display(), key);
        let ds = self.dataset(cfg).clone();
        let t = Instant::now();
        let b = train(cfg, &ds, TrainOptions::default()).unwrap();
        eprintln!("  done in {:.0} s", t.elapsed().as_secs_f64());
        b.save(&path).unwrap();
        b
    }

    fn cached_bundles(&self) -> Vec<ArtifactBundle> {
        let Ok(rd) = std::fs::read_dir(&self.dir) else {
            return Vec::new();
        };
        let mut paths: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).collect();
        paths.sort();
        paths
            .iter()
            .filter(|p| p.extension().is_some_and(|e| e == "bundle"))
            .filter_map(|p| ArtifactBundle::load(p).ok())
            .collect()
    }

    /// Test NMSE in dB of a model trained at `snr_db` and evaluated there.
    fn nmse_db(&mut self, cfg: &ExperimentConfig) -> f64 {
        let b = self.bundle(cfg);
        let dep = Deployment::from_bundle(&b).unwrap();
        let ds = self.dataset(cfg);
        to_db(nmse_eval(&dep, &ds.test, cfg.train_snr_db, 1000).unwrap().value)
    }
}

fn scaled(mode: Mode, m_a: usize, snr_db: f64, seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::desk_scale();
    c.mode = mode;
    c.m_a = if matches!(mode, Mode::OneBit | Mode::ZcPilots) {
        0
    } else {
        m_a
    };
    c.train_snr_db = snr_db;
    c.seed = seed;
    c
}

// ---------------------------------------------------------------- 5

fn c5_trends(runs: &mut Runs) -> Outcome {
    let zc = runs.nmse_db(&scaled(Mode::ZcPilots, 0, 10.0, 1));
    let one = runs.nmse_db(&scaled(Mode::OneBit, 0, 10.0, 1));
    let mixed = runs.nmse_db(&scaled(Mode::Full, 4, 10.0, 1));
    let cnn = runs.nmse_db(&scaled(Mode::CnnAblation, 4, 10.0, 1));
    let (a, b, c) = (zc - one, one - mixed, cnn - mixed);
    outcome(
        a >= 2.0 && b >= 2.0 && c >= 1.0,
        format!(
            "NMSE ZC 1-bit {zc:.2} dB, PDNet 1-bit {one:.2} dB, proposed M_A=4 {mixed:.2} dB, CNN M_A=4 {cnn:.2} dB; \
             gaps (a) {a:.2} (>= 2), (b) {b:.2} (>= 2), (c) {c:.2} (>= 1)"
        ),
    )
}

// ---------------------------------------------------------------- 6

fn c6_error_floor(runs: &mut Runs) -> Outcome {
    let one20 = runs.nmse_db(&scaled(Mode::OneBit, 0, 20.0, 1));
    let one30 = runs.nmse_db(&scaled(Mode::OneBit, 0, 30.0, 1));
    let full20 = runs.nmse_db(&scaled(Mode::FixedAlloc, 16, 20.0, 1));
    let full30 = runs.nmse_db(&scaled(Mode::FixedAlloc, 16, 30.0, 1));
    let (d1, df) = (one20 - one30, full20 - full30);
    outcome(
        d1 < 1.0 && df >= 3.0,
        format!(
            "1-bit {one20:.2} -> {one30:.2} dB (gain {d1:.2} < 1); M_A=M {full20:.2} -> {full30:.2} dB (gain {df:.2} >= 3)"
        ),
    )
}

// ---------------------------------------------------------------- 7

fn c7_monotone(runs: &mut Runs) -> Outcome {
    let mut avg = Vec::new();
    for m_a in [8usize, 4, 0] {
        let mode = if m_a == 0 { Mode::OneBit } else { Mode::Full };
        let lin: f64 = (1..=3)
            .map(|seed| 10f64.powf(runs.nmse_db(&scaled(mode, m_a, 20.0, seed)) / 10.0))
            .sum::<f64>()
            / 3.0;
        avg.push(to_db(lin));
    }
    outcome(
        avg[0] <= avg[1] && avg[1] <= avg[2],
        format!(
            "mean NMSE over 3 seeds at 20 dB: M_A=8 {:.2} dB, M_A=4 {:.2} dB, M_A=0 {:.2} dB",
            avg[0], avg[1], avg[2]
        ),
    )
}

// ---------------------------------------------------------------- 8

fn c8_selnet(runs: &mut Runs) -> Outcome {
    let cfg = scaled(Mode::Full, 4, 10.0, 1);
    let b = runs.bundle(&cfg);
    let model = Model::bind(&cfg, mixadc::bundle::records_to_params(&b.params).unwrap()).unwrap();
    let s = model.selection_state().unwrap().unwrap();
    let (r2, r3) = mixadc::selnet::khot_residuals(&s.u_tilde, s.m_a);
    let tol = 0.05 * cfg.m_a as f64;
    let tail = &b.curves[b.curves.len().saturating_sub(5)..];
    let stable = tail.len() == 5 && tail.iter().all(|r| r.set_a == s.masks.set_a);
    let gap = s.binary_gap();
    let pass = r2.abs() < tol && r3.abs() < tol && stable;
    let sets: Vec<String> = tail.iter().map(|r| format!("{:?}", r.set_a)).collect();
    outcome(
        pass,
        format!(
            "r2 = {r2:.3}, r3 = {r3:.3} (|.| < {tol}); last 5 masks {} (stable: {stable}); binary gap {gap:.3}",
            sets.join(" ")
        ),
    )
}

// ---------------------------------------------------------------- 9

fn c9_detector(runs: &mut Runs) -> Outcome {
    let cfg = ExperimentConfig::desk_scale();
    let test = runs.dataset(&cfg).test.clone();
    let snrs = [0.0, 10.0, 20.0];
    let uses = 25;
    let mut lines = Vec::new();
    let mut within = true;
    let mut full_ber = Vec::new();
    for (label, masks) in [
        ("1-bit", SelectionMasks::all_one_bit(cfg.m)),
        ("M_A=4", SelectionMasks::equispaced(cfg.m, 4).unwrap()),
        ("full", SelectionMasks::all_full(cfg.m)),
    ] {
        let setup = |detector| BerSetup {
            method: label.to_string(),
            masks: masks.clone(),
            constellation: Constellation::Qpsk,
            detector,
            rho: 1.0,
            uses_per_channel: uses,
            seed: 9,
        };
        let nml = ber_eval(&setup(DetectorKind::Relaxed), Csi::Perfect, &test, &snrs).unwrap();
        let ml = ber_eval(&setup(DetectorKind::Exhaustive), Csi::Perfect, &test, &snrs).unwrap();
        let mut parts = Vec::new();
        for (r, e) in nml.iter().zip(&ml) {
            // Both zero counts as within the factor.
            within &= r.value <= 2.0 * e.value;
            parts.push(format!("{:.0} dB {:.2e}/{:.2e}", r.snr_db, r.value, e.value));
        }
        if label == "full" {
            full_ber = nml.iter().map(|r| r.value).collect();
        }
        lines.push(format!("{label}: {}", parts.join(", ")));
    }
    let monotone = full_ber
        .windows(2)
        .all(|w| w[1] < w[0] || (w[0] == 0.0 && w[1] == 0.0));
    outcome(
        within && monotone,
        format!(
            "relaxed/exhaustive BER over {} symbols per point: {}; relaxed <= 2x exhaustive: {within}; full-resolution decreasing: {monotone}",
            test.len() * uses * cfg.k,
            lines.join("; ")
        ),
    )
}
