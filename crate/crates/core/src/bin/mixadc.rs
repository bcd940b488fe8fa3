use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::SystemTime;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mixadc::airlink::SelectionMasks;
use mixadc::bundle::ArtifactBundle;
use mixadc::config::{ExperimentConfig, Mode};
use mixadc::dataset::Dataset;
use mixadc::eval::{
    ber_eval, plot_curves, read_csv, run_benchmark_matrix, sort_records, write_csv, BenchmarkRow,
    BerSetup, Csi, CurveRecord, DetectorKind, Metric,
};
use mixadc::manifest::RunManifest;
use mixadc::modulation::Constellation;
use mixadc::trainer::{train, Deployment, TrainOptions};
use mixadc::{Error, Result};

#[derive(Parser)]
#[command(name = "mixadc", version, about = "Mixed-ADC channel estimation workbench")]
struct Cli {
    /// Output root; each subcommand writes into its own directory below it.
    #[arg(long, global = true, env = "MIXADC_OUT", default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config; omitted keys take desk-scale defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed (data seed for gen-data).
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config mode.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize the train/test channel sets.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one configuration and write its bundle.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory from gen-data; regenerated from the config if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint bundle to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// NMSE of trained bundles over an SNR sweep.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Trained bundle; repeat for several table rows.
        #[arg(long)]
        bundle: Vec<PathBuf>,
        /// Table row requested by name only (e.g. GAMP).
        #[arg(long)]
        row: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "-10,0,10,20,30")]
        snr_list: Vec<f64>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Uncoded BER of the relaxed ML detector.
    Detect {
        #[command(flatten)]
        common: Common,
        /// Bundle whose pilots, masks and estimator supply the CSI; perfect CSI
        /// with the config's allocation otherwise.
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "-10,0,10,20,30")]
        snr_list: Vec<f64>,
        #[arg(long, default_value = "qpsk", value_parser = Constellation::parse)]
        constellation: Constellation,
        #[arg(long, value_enum, default_value_t = DetectorArg::Relaxed)]
        detector: DetectorArg,
        /// Payload power; defaults to the pilot power of the config.
        #[arg(long)]
        payload_rho: Option<f64>,
        /// Payload vectors per test channel.
        #[arg(long, default_value_t = 25)]
        uses: usize,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Merge result CSVs and redraw the plots.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        csv: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DetectorArg {
    Relaxed,
    Exhaustive,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    Mode::parse(s).map_err(|e| e.to_string())
}

fn resolve(common: &Common, data_seed: bool) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::desk_scale(),
    };
    if let Some(mode) = common.mode {
        cfg.mode = mode;
        // An all-one-bit override implies an empty full-resolution set.
        if matches!(mode, Mode::OneBit | Mode::ZcPilots) {
            cfg.m_a = 0;
        }
        if mode != Mode::FixedAlloc {
            cfg.fixed_a = None;
        }
    }
    if let Some(seed) = common.seed {
        if data_seed {
            cfg.data_seed = seed;
        } else {
            cfg.seed = seed;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Run directory with the resolved config written into it.
struct Run {
    dir: PathBuf,
    config_path: PathBuf,
    started: SystemTime,
}

impl Run {
    fn start(root: &Path, name: &str, cfg: &ExperimentConfig) -> Result<Self> {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let config_path = dir.join("config.toml");
        std::fs::write(&config_path, cfg.to_toml_string()).map_err(|e| io_err(&config_path, e))?;
        Ok(Self {
            dir,
            config_path,
            started: SystemTime::now(),
        })
    }

    fn finish(&self, command: &str, common: &Common, artifacts: Vec<PathBuf>) -> Result<()> {
        let m = RunManifest::new(
            command,
            &self.config_path,
            common.config.as_deref(),
            artifacts,
            self.started,
        )?;
        let path = m.save(&self.dir)?;
        println!("{}", path.display());
        Ok(())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn dataset(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<Dataset> {
    match dir {
        Some(d) => {
            let ds = Dataset::load(d)?;
            if ds.spec != cfg.channel_spec() {
                return Err(Error::Config(format!(
                    "{} was generated from a different channel spec",
                    d.display()
                )));
            }
            Ok(ds)
        }
        None => Dataset::generate(&cfg.channel_spec()),
    }
}

fn run_name(cfg: &ExperimentConfig) -> String {
    format!("{}-ma{}-seed{}", cfg.mode.as_str(), cfg.deployed_m_a(), cfg.seed)
}

fn emit_curves(records: &[CurveRecord], dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let csv = dir.join(format!("{stem}.csv"));
    write_csv(records, &csv)?;
    let mut files = vec![csv];
    for metric in [Metric::Nmse, Metric::Ber] {
        if records.iter().any(|r| r.metric == metric) {
            let name = if stem == metric.as_str() {
                format!("{stem}.svg")
            } else {
                format!("{stem}-{}.svg", metric.as_str())
            };
            let svg = dir.join(name);
            plot_curves(records, metric, &svg)?;
            files.push(svg);
        }
    }
    Ok(files)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { common } => {
            let cfg = resolve(&common, true)?;
            let name = format!("data-m{}-k{}-seed{}", cfg.m, cfg.k, cfg.data_seed);
            let run = Run::start(&cli.out, &name, &cfg)?;
            let ds = Dataset::generate(&cfg.channel_spec())?;
            let files = ds.save(&run.dir)?;
            run.finish("gen-data", &common, files)
        }
        Cmd::Train {
            common,
            data,
            resume,
        } => {
            let cfg = resolve(&common, false)?;
            let ds = dataset(&cfg, data.as_deref())?;
            let run = Run::start(&cli.out, &run_name(&cfg), &cfg)?;
            let log = run.dir.join("train.jsonl");
            let checkpoint = run.dir.join("checkpoint.bundle");
            let resume = resume.map(|p| ArtifactBundle::load(&p)).transpose()?;
            if resume.is_none() && log.exists() {
                std::fs::remove_file(&log).map_err(|e| io_err(&log, e))?;
            }
            let bundle = train(
                &cfg,
                &ds,
                TrainOptions {
                    log: Some(&log),
                    checkpoint: Some(&checkpoint),
                    resume,
                    stop_after: None,
                },
            )?;
            let out = run.dir.join("model.bundle");
            bundle.save(&out)?;
            if let Some(last) = bundle.curves.last() {
                log::info!("final training NMSE {:.5}, A = {:?}", last.l_cenet, bundle.set_a);
            }
            run.finish("train", &common, vec![out, log, checkpoint])
        }
        Cmd::Eval {
            common,
            bundle,
            row,
            snr_list,
            data,
        } => {
            let cfg = resolve(&common, false)?;
            let rows: Vec<BenchmarkRow> = bundle
                .into_iter()
                .map(BenchmarkRow::Bundle)
                .chain(row.into_iter().map(BenchmarkRow::Named))
                .collect();
            if rows.is_empty() {
                return Err(Error::MissingBundle("no --bundle or --row given".into()));
            }
            let ds = dataset(&cfg, data.as_deref())?;
            let records = run_benchmark_matrix(&rows, &ds.test, &snr_list, cfg.seed)?;
            let run = Run::start(&cli.out, "eval", &cfg)?;
            let files = emit_curves(&records, &run.dir, "nmse")?;
            run.finish("eval", &common, files)
        }
        Cmd::Detect {
            common,
            bundle,
            snr_list,
            constellation,
            detector,
            payload_rho,
            uses,
            data,
        } => {
            let cfg = resolve(&common, false)?;
            let dep = bundle
                .map(|p| ArtifactBundle::load(&p).and_then(|b| Deployment::from_bundle(&b)))
                .transpose()?;
            let cfg = dep.as_ref().map_or(cfg, |d| d.cfg.clone());
            let ds = dataset(&cfg, data.as_deref())?;
            let (masks, method, csi) = match &dep {
                Some(d) => (d.masks.clone(), d.method_label(), Csi::Estimated(d)),
                None => {
                    let masks = cfg
                        .static_masks()?
                        .map_or_else(|| SelectionMasks::equispaced(cfg.m, cfg.m_a), Ok)?;
                    (masks.clone(), format!("perfect CSI, M_A={}", masks.m_a()), Csi::Perfect)
                }
            };
            let setup = BerSetup {
                method,
                masks,
                constellation,
                detector: match detector {
                    DetectorArg::Relaxed => DetectorKind::Relaxed,
                    DetectorArg::Exhaustive => DetectorKind::Exhaustive,
                },
                rho: payload_rho.unwrap_or(cfg.rho),
                uses_per_channel: uses,
                seed: cfg.seed,
            };
            let records = ber_eval(&setup, csi, &ds.test, &snr_list)?;
            let run = Run::start(&cli.out, "detect", &cfg)?;
            let files = emit_curves(&records, &run.dir, "ber")?;
            run.finish("detect", &common, files)
        }
        Cmd::Report { common, csv } => {
            let cfg = resolve(&common, false)?;
            let mut records = Vec::new();
            for p in &csv {
                records.extend(read_csv(p)?);
            }
            sort_records(&mut records);
            let run = Run::start(&cli.out, "report", &cfg)?;
            let files = emit_curves(&records, &run.dir, "report")?;
            for r in &records {
                println!(
                    "{:<32} {:>6.1} dB  {:<4} {:.4e}",
                    r.method,
                    r.snr_db,
                    r.metric.as_str(),
                    r.value
                );
            }
            run.finish("report", &common, files)
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Domain(_) | Error::Shape(_) => 2,
        Error::MissingBundle(_) | Error::OutOfScope(_) => 3,
        Error::CorruptBundle(_) | Error::VersionMismatch { .. } => 4,
        Error::Io { .. } | Error::Serde(_) => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
