//! Flat experiment configuration. Every field has a desk-scale default; any
//! unknown key in a config file is rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::airlink::{SelectionMasks, Surrogate};
use crate::cenet::{BlockKind, CenetConfig, SubnetChannels};
use crate::channel::ChannelSpec;
use crate::error::{Error, Result};

/// Training variants, one per learned row of the comparison table.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Learned pilots, learned allocation.
    #[default]
    Full,
    /// Learned pilots, every antenna one-bit.
    OneBit,
    /// Learned pilots, allocation given by `fixed_a` or equispaced `m_a`.
    FixedAlloc,
    /// Frozen Zadoff-Chu pilots, every antenna one-bit.
    ZcPilots,
    /// As `Full` with plain convolutional blocks instead of RK3 blocks.
    CnnAblation,
}

impl Mode {
    pub fn uses_selnet(self) -> bool {
        matches!(self, Mode::Full | Mode::CnnAblation)
    }

    pub fn learns_pilot(self) -> bool {
        self != Mode::ZcPilots
    }

    pub fn block_kind(self) -> BlockKind {
        match self {
            Mode::CnnAblation => BlockKind::PlainCnn,
            _ => BlockKind::Rk3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::OneBit => "one_bit",
            Mode::FixedAlloc => "fixed_alloc",
            Mode::ZcPilots => "zc_pilots",
            Mode::CnnAblation => "cnn_ablation",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => Mode::Full,
            "one_bit" => Mode::OneBit,
            "fixed_alloc" => Mode::FixedAlloc,
            "zc_pilots" => Mode::ZcPilots,
            "cnn_ablation" => Mode::CnnAblation,
            other => return Err(Error::Config(format!("unknown mode {other:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    // channel
    pub m: usize,
    pub k: usize,
    pub l: usize,
    pub doa_min_deg: f64,
    pub doa_max_deg: f64,
    pub doa_jitter_deg: f64,
    pub gain_var: f64,
    pub gain_jitter_var: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub data_seed: u64,
    // link
    pub np: usize,
    pub rho: f64,
    pub train_snr_db: f64,
    /// When set, each training sample draws its SNR uniformly in
    /// `[train_snr_db, train_snr_db_max]`.
    pub train_snr_db_max: Option<f64>,
    // allocation
    pub mode: Mode,
    pub m_a: usize,
    pub fixed_a: Option<Vec<usize>>,
    // schedule
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_init: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3_init: f64,
    pub gamma3_step: f64,
    pub gamma3_max: f64,
    pub kappa: f64,
    pub kappa_step: f64,
    pub kappa_max: f64,
    pub surrogate: Surrogate,
    pub early_stop_patience: Option<usize>,
    pub seed: u64,
    // network
    pub c1_a: usize,
    pub c1_b: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk_scale()
    }
}

impl ExperimentConfig {
    /// M=16, K=2, L=2, Np=16, 2000/200 samples, 40 epochs, C1 = 16/8.
    pub fn desk_scale() -> Self {
        Self {
            m: 16,
            k: 2,
            l: 2,
            doa_min_deg: -80.0,
            doa_max_deg: 80.0,
            doa_jitter_deg: 4.0,
            gain_var: 1.0,
            gain_jitter_var: 0.04,
            n_train: 2000,
            n_test: 200,
            data_seed: 7,
            np: 16,
            rho: 1.0,
            train_snr_db: 10.0,
            train_snr_db_max: None,
            mode: Mode::Full,
            m_a: 4,
            fixed_a: None,
            batch_size: 100,
            epochs: 40,
            lr_init: 2e-3,
            lr_decay: 0.7,
            decay_every: 20,
            gamma1: 1.0,
            gamma2: 1.0,
            gamma3_init: 0.01,
            gamma3_step: 0.02,
            gamma3_max: 0.5,
            kappa: 70.0,
            kappa_step: 0.0,
            kappa_max: 70.0,
            surrogate: Surrogate::SignForward,
            early_stop_patience: None,
            seed: 1,
            c1_a: 16,
            c1_b: 8,
        }
    }

    /// M=64, K=8, L=3, Np=64, 100000/5000 samples, 200 epochs, C1 = 60/20.
    pub fn full_scale() -> Self {
        let ch = ChannelSpec::full_scale(7);
        Self {
            m: ch.m,
            k: ch.k,
            l: ch.l,
            n_train: ch.n_train,
            n_test: ch.n_test,
            np: 64,
            m_a: 16,
            epochs: 200,
            c1_a: 60,
            c1_b: 20,
            ..Self::desk_scale()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn channel_spec(&self) -> ChannelSpec {
        ChannelSpec {
            m: self.m,
            k: self.k,
            l: self.l,
            doa_range_deg: (self.doa_min_deg, self.doa_max_deg),
            doa_jitter_deg: self.doa_jitter_deg,
            gain_var: self.gain_var,
            gain_jitter_var: self.gain_jitter_var,
            n_train: self.n_train,
            n_test: self.n_test,
            seed: self.data_seed,
        }
    }

    pub fn cenet_config(&self) -> CenetConfig {
        CenetConfig {
            m: self.m,
            k: self.k,
            np: self.np,
            stream_a: SubnetChannels::from_c1(self.c1_a),
            stream_b: SubnetChannels::from_c1(self.c1_b),
            block: self.mode.block_kind(),
        }
    }

    pub fn sigma2_at(&self, snr_db: f64) -> f64 {
        sigma2_from_snr(self.rho, snr_db)
    }

    pub fn gamma3(&self, epoch: usize) -> f64 {
        (self.gamma3_init + self.gamma3_step * epoch as f64).min(self.gamma3_max)
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        let decays = if self.decay_every == 0 {
            0
        } else {
            epoch / self.decay_every
        };
        self.lr_init * self.lr_decay.powi(decays as i32)
    }

    pub fn kappa_at(&self, epoch: usize) -> f64 {
        crate::airlink::kappa_at(epoch, self.kappa, self.kappa_step, self.kappa_max)
    }

    /// Allocation for modes that do not learn it.
    pub fn static_masks(&self) -> Result<Option<SelectionMasks>> {
        Ok(match self.mode {
            Mode::OneBit | Mode::ZcPilots => Some(SelectionMasks::all_one_bit(self.m)),
            Mode::FixedAlloc => Some(match &self.fixed_a {
                Some(a) => SelectionMasks::from_set_a(self.m, a)?,
                None => SelectionMasks::equispaced(self.m, self.m_a)?,
            }),
            Mode::Full | Mode::CnnAblation => None,
        })
    }

    /// Size of the full-resolution set that the trained system will deploy.
    pub fn deployed_m_a(&self) -> usize {
        match self.mode {
            Mode::OneBit | Mode::ZcPilots => 0,
            Mode::FixedAlloc => self.fixed_a.as_ref().map_or(self.m_a, Vec::len),
            Mode::Full | Mode::CnnAblation => self.m_a,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.channel_spec().validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.np == 0 {
            return bad("np must be positive".into());
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return bad(format!("rho = {} must be positive", self.rho));
        }
        if !self.train_snr_db.is_finite() {
            return bad("train_snr_db must be finite".into());
        }
        if let Some(hi) = self.train_snr_db_max {
            if !(hi >= self.train_snr_db && hi.is_finite()) {
                return bad(format!(
                    "train_snr_db_max = {hi} must be finite and at least train_snr_db"
                ));
            }
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if self.batch_size > self.n_train {
            return bad(format!(
                "batch_size {} exceeds n_train {}",
                self.batch_size, self.n_train
            ));
        }
        for (name, v) in [
            ("lr_init", self.lr_init),
            ("lr_decay", self.lr_decay),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("gamma3_init", self.gamma3_init),
            ("gamma3_step", self.gamma3_step),
            ("gamma3_max", self.gamma3_max),
            ("kappa_step", self.kappa_step),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be nonnegative"));
            }
        }
        if !(self.kappa > 0.0 && self.kappa_max >= self.kappa) {
            return bad(format!(
                "kappa = {} must be positive and at most kappa_max = {}",
                self.kappa, self.kappa_max
            ));
        }
        if self.c1_a == 0 || self.c1_b == 0 {
            return bad("c1_a and c1_b must be positive".into());
        }
        match self.mode {
            Mode::Full | Mode::CnnAblation => {
                if self.m_a == 0 || self.m_a > self.m {
                    return bad(format!(
                        "mode {} needs 1 <= m_a <= m (got {})",
                        self.mode.as_str(),
                        self.m_a
                    ));
                }
            }
            Mode::FixedAlloc => {
                if self.fixed_a.is_none() && self.m_a > self.m {
                    return bad(format!("m_a = {} exceeds m = {}", self.m_a, self.m));
                }
            }
            Mode::OneBit | Mode::ZcPilots => {
                if self.m_a != 0 {
                    return bad(format!(
                        "mode {} is all one-bit; set m_a = 0 (got {})",
                        self.mode.as_str(),
                        self.m_a
                    ));
                }
                if self.mode == Mode::ZcPilots && self.np < self.k {
                    return Err(Error::InfeasibleShift {
                        np: self.np,
                        k: self.k,
                    });
                }
            }
        }
        if self.fixed_a.is_some() && self.mode != Mode::FixedAlloc {
            return bad("fixed_a is only meaningful in mode fixed_alloc".into());
        }
        self.static_masks()?;
        Ok(())
    }
}

/// `σ² = ρ / 10^(snr/10)`.
pub fn sigma2_from_snr(rho: f64, snr_db: f64) -> f64 {
    rho / 10f64.powf(snr_db / 10.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::desk_scale().validate().unwrap();
        ExperimentConfig::full_scale().validate().unwrap();
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = ExperimentConfig::from_toml_str("m = 8\nbatchsize = 10\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn partial_file_overrides_defaults() {
        let cfg = ExperimentConfig::from_toml_str("mode = \"one_bit\"\nm_a = 0\nepochs = 3\n").unwrap();
        assert_eq!(cfg.mode, Mode::OneBit);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.m, 16);
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn gamma3_schedule() {
        let cfg = ExperimentConfig::desk_scale();
        assert!((cfg.gamma3(0) - 0.01).abs() < 1e-15);
        assert!((cfg.gamma3(1) - 0.03).abs() < 1e-15);
        assert!((cfg.gamma3(24) - 0.49).abs() < 1e-12);
        assert_eq!(cfg.gamma3(25), 0.5);
        assert_eq!(cfg.gamma3(200), 0.5);
    }

    #[test]
    fn lr_schedule() {
        let cfg = ExperimentConfig::desk_scale();
        assert_eq!(cfg.lr(0), 2e-3);
        assert_eq!(cfg.lr(19), 2e-3);
        assert!((cfg.lr(20) - 1.4e-3).abs() < 1e-15);
        assert!((cfg.lr(45) - 2e-3 * 0.49).abs() < 1e-15);
    }

    #[test]
    fn mode_field_checks() {
        let mut cfg = ExperimentConfig::desk_scale();
        cfg.mode = Mode::OneBit;
        assert!(cfg.validate().is_err());
        cfg.m_a = 0;
        cfg.validate().unwrap();
        cfg.mode = Mode::Full;
        assert!(cfg.validate().is_err());
        cfg.mode = Mode::FixedAlloc;
        cfg.fixed_a = Some(vec![0, 16]);
        assert!(cfg.validate().is_err());
        cfg.fixed_a = Some(vec![0, 5]);
        cfg.validate().unwrap();
        assert_eq!(cfg.deployed_m_a(), 2);
        cfg.mode = Mode::ZcPilots;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sigma2_from_snr_values() {
        assert_eq!(sigma2_from_snr(1.0, 0.0), 1.0);
        assert!((sigma2_from_snr(1.0, 10.0) - 0.1).abs() < 1e-15);
        assert!((sigma2_from_snr(2.0, 20.0) - 0.02).abs() < 1e-15);
    }
}
