//! Gray-mapped QPSK and 16QAM with unit average symbol energy.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constellation {
    Qpsk,
    Qam16,
}

/// Per-axis Gray levels for 16QAM, indexed by the 2-bit label `b0b1`.
const QAM16_LEVELS: [f64; 4] = [-3.0, -1.0, 3.0, 1.0];

impl Constellation {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "qpsk" => Ok(Self::Qpsk),
            "16qam" | "qam16" => Ok(Self::Qam16),
            other => Err(Error::Config(format!("unknown constellation {other:?}"))),
        }
    }

    pub fn bits_per_symbol(self) -> usize {
        match self {
            Self::Qpsk => 2,
            Self::Qam16 => 4,
        }
    }

    pub fn size(self) -> usize {
        1 << self.bits_per_symbol()
    }

    /// Symbol for an integer label; bits are read most-significant first,
    /// the first half on the in-phase axis.
    pub fn point(self, label: usize) -> Complex64 {
        match self {
            Self::Qpsk => {
                let s = std::f64::consts::FRAC_1_SQRT_2;
                let re = if label & 0b10 == 0 { s } else { -s };
                let im = if label & 0b01 == 0 { s } else { -s };
                Complex64::new(re, im)
            }
            Self::Qam16 => {
                let norm = 10f64.sqrt();
                let re = QAM16_LEVELS[(label >> 2) & 0b11];
                let im = QAM16_LEVELS[label & 0b11];
                Complex64::new(re / norm, im / norm)
            }
        }
    }

    pub fn points(self) -> Vec<Complex64> {
        (0..self.size()).map(|l| self.point(l)).collect()
    }

    pub fn modulate(self, bits: &[bool]) -> Result<Complex64> {
        if bits.len() != self.bits_per_symbol() {
            return Err(Error::Shape(format!(
                "{} bits for a {}-bit symbol",
                bits.len(),
                self.bits_per_symbol()
            )));
        }
        let label = bits.iter().fold(0, |acc, &b| (acc << 1) | b as usize);
        Ok(self.point(label))
    }

    /// Label of the nearest constellation point.
    pub fn nearest(self, z: Complex64) -> usize {
        (0..self.size())
            .min_by(|&a, &b| {
                (z - self.point(a))
                    .norm_sqr()
                    .total_cmp(&(z - self.point(b)).norm_sqr())
            })
            .expect("nonempty constellation")
    }

    pub fn label_bits(self, label: usize) -> Vec<bool> {
        let n = self.bits_per_symbol();
        (0..n).rev().map(|i| (label >> i) & 1 == 1).collect()
    }

    pub fn demodulate(self, z: Complex64) -> Vec<bool> {
        self.label_bits(self.nearest(z))
    }

    pub fn constant_modulus(self) -> bool {
        self == Self::Qpsk
    }
}
