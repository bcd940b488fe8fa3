//! Train/test channel containers on disk: one `.npz` per split plus a JSON
//! sidecar with the generating spec.

use std::fs::File;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use ndarray_npy::{NpzReader, NpzWriter};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{synthesize_batch, ChannelBatch, ChannelSpec, Split};
use crate::error::{Error, Result};

pub const TRAIN_FILE: &str = "train.npz";
pub const TEST_FILE: &str = "test.npz";
pub const META_FILE: &str = "dataset.json";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: ChannelSpec,
    pub train: ChannelBatch,
    pub test: ChannelBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    spec: ChannelSpec,
    train_scale: f64,
    test_scale: f64,
}

impl Dataset {
    pub fn generate(spec: &ChannelSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec: spec.clone(),
            train: synthesize_batch(spec, Split::Train)?,
            test: synthesize_batch(spec, Split::Test)?,
        })
    }

    /// Writes the three files into `dir` (created if needed) and returns
    /// their paths.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let train = dir.join(TRAIN_FILE);
        let test = dir.join(TEST_FILE);
        let meta = dir.join(META_FILE);
        write_split(&train, &self.train)?;
        write_split(&test, &self.test)?;
        let m = Meta {
            spec: self.spec.clone(),
            train_scale: self.train.scale,
            test_scale: self.test.scale,
        };
        let text = serde_json::to_string_pretty(&m)?;
        std::fs::write(&meta, text).map_err(|e| Error::io(&meta, e))?;
        Ok(vec![train, test, meta])
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: Meta = serde_json::from_str(&text)?;
        meta.spec.validate()?;
        let train = read_split(&dir.join(TRAIN_FILE), meta.train_scale)?;
        let test = read_split(&dir.join(TEST_FILE), meta.test_scale)?;
        let check = |b: &ChannelBatch, n: usize, what: &str| -> Result<()> {
            if b.len() != n || b.m() != meta.spec.m || b.k() != meta.spec.k {
                return Err(Error::Shape(format!(
                    "{what} split has shape {:?}, spec says [{n}, {}, {}]",
                    b.h.shape(),
                    meta.spec.m,
                    meta.spec.k
                )));
            }
            Ok(())
        };
        check(&train, meta.spec.n_train, "train")?;
        check(&test, meta.spec.n_test, "test")?;
        Ok(Self {
            spec: meta.spec,
            train,
            test,
        })
    }
}

fn npz_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Serde(format!("{}: {e}", path.display()))
}

fn write_split(path: &Path, b: &ChannelBatch) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut npz = NpzWriter::new(f);
    npz.add_array("H", &b.h).map_err(|e| npz_err(path, e))?;
    npz.add_array("Htilde", &b.htilde).map_err(|e| npz_err(path, e))?;
    npz.add_array("Htarget", &b.htarget).map_err(|e| npz_err(path, e))?;
    npz.finish().map_err(|e| npz_err(path, e))?;
    Ok(())
}

fn read_split(path: &Path, scale: f64) -> Result<ChannelBatch> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut npz = NpzReader::new(f).map_err(|e| npz_err(path, e))?;
    let h: Array3<Complex64> = npz.by_name("H").map_err(|e| npz_err(path, e))?;
    let htilde: Array3<f64> = npz.by_name("Htilde").map_err(|e| npz_err(path, e))?;
    let htarget: Array3<f64> = npz.by_name("Htarget").map_err(|e| npz_err(path, e))?;
    let rebuilt = ChannelBatch::from_complex(h);
    if rebuilt.htilde != htilde || rebuilt.htarget != htarget {
        return Err(Error::Shape(format!(
            "{}: stacked arrays disagree with H",
            path.display()
        )));
    }
    Ok(ChannelBatch { scale, ..rebuilt })
}
