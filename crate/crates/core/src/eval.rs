//! Metrics, SNR sweeps, the benchmark matrix and plots.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::airlink::SelectionMasks;
use crate::bundle::ArtifactBundle;
use crate::channel::ChannelBatch;
use crate::config::sigma2_from_snr;
use crate::detector::{
    detect_exhaustive, detect_nml, htilde_from_columns, payload_vector, receive, Problem,
};
use crate::error::{Error, Result};
use crate::modulation::Constellation;
use crate::trainer::Deployment;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Nmse,
    Ber,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Nmse => "nmse",
            Metric::Ber => "ber",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub method: String,
    pub snr_db: f64,
    pub metric: Metric,
    pub value: f64,
    pub n_samples: usize,
    pub seed: u64,
}

pub fn to_db(v: f64) -> f64 {
    10.0 * v.log10()
}

/// Seed for one `(seed, snr)` evaluation point, independent of sweep order.
fn point_rng(seed: u64, snr_db: f64, salt: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ salt.rotate_left(17));
    r.set_stream(snr_db.to_bits());
    r
}

/// Monte-Carlo NMSE of a deployed estimator over `test` at `snr_db`.
pub fn nmse_eval(dep: &Deployment, test: &ChannelBatch, snr_db: f64, seed: u64) -> Result<CurveRecord> {
    if test.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let sigma2 = sigma2_from_snr(dep.cfg.rho, snr_db);
    let mut rng = point_rng(seed, snr_db, 1);
    let value = dep.nmse(test, sigma2, &mut rng)?;
    Ok(CurveRecord {
        method: dep.method_label(),
        snr_db,
        metric: Metric::Nmse,
        value,
        n_samples: test.len(),
        seed,
    })
}

/// Which channel knowledge the detector uses.
#[derive(Clone, Copy, Debug)]
pub enum Csi<'a> {
    Perfect,
    /// Estimated from the deployment's pilots at the payload SNR.
    Estimated(&'a Deployment),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DetectorKind {
    Relaxed,
    Exhaustive,
}

/// Settings for [`ber_eval`].
#[derive(Clone, Debug)]
pub struct BerSetup {
    pub method: String,
    pub masks: SelectionMasks,
    pub constellation: Constellation,
    pub detector: DetectorKind,
    /// Payload power budget.
    pub rho: f64,
    /// Channel uses per channel sample.
    pub uses_per_channel: usize,
    pub seed: u64,
}

/// Uncoded BER at each SNR; channels are cycled so that
/// `channels.len() · uses_per_channel` vectors are sent per point.
pub fn ber_eval(
    setup: &BerSetup,
    csi: Csi,
    channels: &ChannelBatch,
    snr_list: &[f64],
) -> Result<Vec<CurveRecord>> {
    if channels.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    if channels.m() != setup.masks.m() {
        return Err(Error::Shape(format!(
            "channels have M = {}, masks M = {}",
            channels.m(),
            setup.masks.m()
        )));
    }
    snr_list
        .par_iter()
        .map(|&snr| ber_point(setup, csi, channels, snr))
        .collect()
}

fn ber_point(setup: &BerSetup, csi: Csi, channels: &ChannelBatch, snr_db: f64) -> Result<CurveRecord> {
    let sigma2 = sigma2_from_snr(setup.rho, snr_db);
    let mut rng = point_rng(setup.seed, snr_db, 2);
    let k = channels.k();
    let q = setup.constellation.size();
    let bps = setup.constellation.bits_per_symbol();
    let receiver_h: Array3<f64> = match csi {
        Csi::Perfect => channels.htilde.clone(),
        Csi::Estimated(dep) => {
            let pilot_sigma2 = sigma2_from_snr(dep.cfg.rho, snr_db);
            let obs = dep.observe(&channels.htilde, pilot_sigma2, &mut rng)?;
            let est = dep.estimate(&obs.ya, &obs.yb)?;
            let mut out = Array3::zeros(channels.htilde.dim());
            for i in 0..channels.len() {
                out.slice_mut(s![i, .., ..])
                    .assign(&htilde_from_columns(est.slice(s![i, .., ..])));
            }
            out
        }
    };
    let (mut errors, mut bits, mut capped) = (0usize, 0usize, 0usize);
    for i in 0..channels.len() {
        let h_true: Array2<f64> = channels.htilde.slice(s![i, .., ..]).to_owned();
        let h_rx = receiver_h.slice(s![i, .., ..]);
        for _ in 0..setup.uses_per_channel {
            let labels: Vec<usize> = (0..k).map(|_| rng.gen_range(0..q)).collect();
            let x = payload_vector(&labels, setup.constellation, setup.rho);
            let y = ndarray::Array1::from(receive(h_true.view(), &x, &setup.masks, sigma2, &mut rng));
            let p = Problem {
                h: h_rx.view(),
                y: y.view(),
                masks: &setup.masks,
                sigma2,
                rho: setup.rho,
            };
            let det = match setup.detector {
                DetectorKind::Relaxed => detect_nml(&p, setup.constellation)?,
                DetectorKind::Exhaustive => detect_exhaustive(&p, setup.constellation)?,
            };
            capped += usize::from(!det.converged);
            for (&t, &d) in labels.iter().zip(&det.labels) {
                errors += (t ^ d).count_ones() as usize;
            }
            bits += k * bps;
        }
    }
    if capped > 0 {
        log::warn!(
            "{}: {capped} of {} detections at {snr_db} dB hit the iteration cap",
            setup.method,
            channels.len() * setup.uses_per_channel
        );
    }
    Ok(CurveRecord {
        method: setup.method.clone(),
        snr_db,
        metric: Metric::Ber,
        value: errors as f64 / bits as f64,
        n_samples: channels.len() * setup.uses_per_channel,
        seed: setup.seed,
    })
}

/// One requested row of the comparison table.
#[derive(Clone, Debug, PartialEq)]
pub enum BenchmarkRow {
    Bundle(PathBuf),
    /// A row identified by its table name only (for instance `GAMP`).
    Named(String),
}

const OUT_OF_SCOPE: [&str; 2] = ["GAMP", "GL-GAMP"];

/// NMSE records for every row and SNR, sorted by (method, snr).
pub fn run_benchmark_matrix(
    rows: &[BenchmarkRow],
    test: &ChannelBatch,
    snr_list: &[f64],
    seed: u64,
) -> Result<Vec<CurveRecord>> {
    let mut deps = Vec::new();
    for row in rows {
        match row {
            BenchmarkRow::Named(name) => {
                let upper = name.to_ascii_uppercase();
                if OUT_OF_SCOPE.contains(&upper.as_str()) {
                    return Err(Error::OutOfScope(name.clone()));
                }
                return Err(Error::MissingBundle(name.clone()));
            }
            BenchmarkRow::Bundle(path) => {
                deps.push(Deployment::from_bundle(&ArtifactBundle::load(path)?)?);
            }
        }
    }
    let mut jobs = Vec::new();
    for d in &deps {
        for &snr in snr_list {
            jobs.push((d, snr));
        }
    }
    let mut out: Vec<CurveRecord> = jobs
        .par_iter()
        .map(|(d, snr)| nmse_eval(d, test, *snr, seed))
        .collect::<Result<_>>()?;
    sort_records(&mut out);
    Ok(out)
}

pub fn sort_records(records: &mut [CurveRecord]) {
    records.sort_by(|a, b| {
        (a.metric, &a.method)
            .cmp(&(b.metric, &b.method))
            .then(a.snr_db.total_cmp(&b.snr_db))
    });
}

pub fn write_csv(records: &[CurveRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "snr_db", "metric", "value", "n_samples", "seed"])?;
    for r in records {
        w.write_record([
            r.method.clone(),
            r.snr_db.to_string(),
            r.metric.as_str().to_string(),
            r.value.to_string(),
            r.n_samples.to_string(),
            r.seed.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<CurveRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let field = |i: usize| row.get(i).unwrap_or_default().to_string();
        let num = |i: usize| -> Result<f64> {
            field(i)
                .parse()
                .map_err(|_| Error::Serde(format!("{}: bad number {:?}", path.display(), field(i))))
        };
        let metric = match field(2).as_str() {
            "nmse" => Metric::Nmse,
            "ber" => Metric::Ber,
            other => return Err(Error::Serde(format!("unknown metric {other:?}"))),
        };
        out.push(CurveRecord {
            method: field(0),
            snr_db: num(1)?,
            metric,
            value: num(3)?,
            n_samples: num(4)? as usize,
            seed: num(5)? as u64,
        });
    }
    Ok(out)
}

/// Log-scale curve plot of one metric, one line per method.
pub fn plot_curves(records: &[CurveRecord], metric: Metric, path: &Path) -> Result<()> {
    use plotters::prelude::*;

    let mut series: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.metric == metric) {
        series.entry(&r.method).or_default().push((r.snr_db, r.value));
    }
    for pts in series.values_mut() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    let pts: Vec<(f64, f64)> = series.values().flatten().copied().collect();
    if pts.is_empty() {
        return Err(Error::Domain(format!("no {} records to plot", metric.as_str())));
    }
    let (x0, x1) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let positive: Vec<f64> = pts.iter().map(|p| p.1).filter(|v| *v > 0.0).collect();
    let y0 = positive.iter().copied().fold(f64::INFINITY, f64::min).min(1.0) / 2.0;
    let y1 = positive.iter().copied().fold(0.0, f64::max).max(y0 * 4.0) * 2.0;
    let (x0, x1) = if x1 > x0 { (x0, x1) } else { (x0 - 1.0, x1 + 1.0) };

    let draw = || -> std::result::Result<(), Box<dyn std::error::Error>> {
        let root = SVGBackend::new(path, (800, 560)).into_drawing_area();
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .margin(16)
            .x_label_area_size(40)
            .y_label_area_size(70)
            .build_cartesian_2d(x0..x1, (y0..y1).log_scale())?;
        chart
            .configure_mesh()
            .x_desc("SNR (dB)")
            .y_desc(metric.as_str().to_uppercase())
            .draw()?;
        for (i, (name, pts)) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            let visible: Vec<(f64, f64)> = pts.iter().copied().filter(|p| p.1 > 0.0).collect();
            chart
                .draw_series(LineSeries::new(visible, color.stroke_width(2)))?
                .label(*name)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()?;
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| Error::Domain(format!("plot {}: {e}", path.display())))
}
