//! Dataset directories: per-sample PPM/PGM files plus `meta.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pnm::{load_pgm, load_ppm, save_pgm, save_ppm};
use super::{DataConfig, Dataset, NormStats, Sample};
use crate::error::{Error, Result};

pub const META_FILE: &str = "meta.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n_samples: usize,
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    pub n_categories: usize,
    pub seed: u64,
    pub sigma: f64,
    pub class_to_category: Vec<u8>,
    /// Clean-image statistics; absent for an empty dataset.
    pub normalization: Option<NormStats>,
    pub class_histogram: Vec<u64>,
    #[serde(default)]
    pub crop: Option<[usize; 2]>,
    #[serde(default = "half")]
    pub flip_prob: f64,
}

fn half() -> f64 {
    0.5
}

impl DatasetMeta {
    pub fn of(ds: &Dataset) -> Result<Self> {
        let c = &ds.config;
        Ok(Self {
            n_samples: ds.len(),
            height: c.height,
            width: c.width,
            n_classes: c.n_classes,
            n_categories: c.n_categories,
            seed: c.seed,
            sigma: c.sigma,
            class_to_category: ds.class_to_category.clone(),
            normalization: if ds.is_empty() { None } else { Some(ds.norm_stats()?) },
            class_histogram: ds.class_histogram(),
            crop: c.crop,
            flip_prob: c.flip_prob,
        })
    }

    pub fn config(&self) -> DataConfig {
        DataConfig {
            n_samples: self.n_samples,
            height: self.height,
            width: self.width,
            n_classes: self.n_classes,
            n_categories: self.n_categories,
            seed: self.seed,
            sigma: self.sigma,
            crop: self.crop,
            flip_prob: self.flip_prob,
        }
    }
}

fn stem(i: usize) -> String {
    format!("{i:04}")
}

pub fn save_dataset(dir: impl AsRef<Path>, ds: &Dataset) -> Result<DatasetMeta> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for (i, s) in ds.samples.iter().enumerate() {
        let p = stem(i);
        save_ppm(dir.join(format!("{p}_clean.ppm")), &s.clean)?;
        save_ppm(dir.join(format!("{p}_noisy.ppm")), &s.noisy)?;
        save_pgm(dir.join(format!("{p}_fine.pgm")), &s.fine)?;
        save_pgm(dir.join(format!("{p}_coarse.pgm")), &s.coarse)?;
        save_pgm(dir.join(format!("{p}_cat.pgm")), &s.category)?;
        save_pgm(dir.join(format!("{p}_coarsecat.pgm")), &s.coarse_category)?;
    }
    let meta = DatasetMeta::of(ds)?;
    let mut json = serde_json::to_string_pretty(&meta)?;
    json.push('\n');
    std::fs::write(dir.join(META_FILE), json)?;
    Ok(meta)
}

pub fn load_meta(dir: impl AsRef<Path>) -> Result<DatasetMeta> {
    let path = dir.as_ref().join(META_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let meta = load_meta(dir)?;
    if meta.class_to_category.len() != meta.n_classes {
        return Err(Error::format("meta.json: class_to_category length differs from n_classes"));
    }
    let mut samples = Vec::with_capacity(meta.n_samples);
    for i in 0..meta.n_samples {
        let p = stem(i);
        let s = Sample {
            clean: load_ppm(dir.join(format!("{p}_clean.ppm")))?,
            noisy: load_ppm(dir.join(format!("{p}_noisy.ppm")))?,
            fine: load_pgm(dir.join(format!("{p}_fine.pgm")))?,
            coarse: load_pgm(dir.join(format!("{p}_coarse.pgm")))?,
            category: load_pgm(dir.join(format!("{p}_cat.pgm")))?,
            coarse_category: load_pgm(dir.join(format!("{p}_coarsecat.pgm")))?,
        };
        let dims = [meta.height, meta.width];
        let ok = s.clean.shape()[1..] == dims
            && s.noisy.shape()[1..] == dims
            && [&s.fine, &s.coarse, &s.category, &s.coarse_category]
                .iter()
                .all(|m| [m.height, m.width] == dims);
        if !ok {
            return Err(Error::format(format!("sample {p} does not match {}x{}", meta.height, meta.width)));
        }
        samples.push(s);
    }
    Ok(Dataset {
        config: meta.config(),
        class_to_category: meta.class_to_category,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;

    #[test]
    fn directory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_synthetic(&DataConfig::new(3, 16, 4, 2, 21, 30.0)).unwrap();
        let meta = save_dataset(dir.path(), &ds).unwrap();
        assert_eq!(meta.sigma, 30.0);
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn empty_writes_meta_only() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_synthetic(&DataConfig::new(0, 16, 4, 2, 21, 0.0)).unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names, vec![std::ffi::OsString::from(META_FILE)]);
        assert!(load_meta(dir.path()).unwrap().normalization.is_none());
    }
}
