//! `UMC1` checkpoints: magic, u32-LE header length, JSON header, then the
//! little-endian f32 payload of every tensor named in the header.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::model::{build, layer_plan, ModelGraph, UmcConfig};
use crate::optim::{AdamConfig, AdamState, Moments};
use crate::tensor::Tensor;
use crate::train::TaskBindings;

pub const MAGIC: &[u8; 4] = b"UMC1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub step: u64,
    pub config: AdamConfig,
    /// Each moment tensor is listed as `<param>.m` and `<param>.v`.
    pub moments: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub config: UmcConfig,
    #[serde(default)]
    pub normalization: Option<NormStats>,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub optimizer: Option<OptimizerEntry>,
    #[serde(default)]
    pub bindings: Option<TaskBindings>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: UmcConfig,
    pub normalization: Option<NormStats>,
    /// Parameters in graph order.
    pub params: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<AdamState<f32>>,
    /// Input and pathway targets used in training.
    pub bindings: Option<TaskBindings>,
}

struct PayloadWriter {
    bytes: Vec<u8>,
}

impl PayloadWriter {
    fn push(&mut self, name: String, t: &Tensor<f32>) -> TensorEntry {
        let offset = self.bytes.len();
        for v in t.data() {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
        }
    }
}

fn read_tensor(payload: &[u8], e: &TensorEntry) -> Result<Tensor<f32>> {
    let n: usize = e.shape.iter().product();
    let end = e
        .offset
        .checked_add(n * 4)
        .filter(|&end| end <= payload.len())
        .ok_or_else(|| {
            Error::format(format!(
                "tensor '{}' ({} bytes at {}) runs past the {}-byte payload",
                e.name,
                n * 4,
                e.offset,
                payload.len()
            ))
        })?;
    let data = payload[e.offset..end]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(e.shape.clone(), data)
}

impl Checkpoint {
    pub fn from_model(model: &ModelGraph<f32>, optimizer: Option<&AdamState<f32>>, normalization: Option<NormStats>) -> Self {
        Self {
            config: model.config.clone(),
            normalization,
            params: model.graph.params().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            optimizer: optimizer.cloned(),
            bindings: None,
        }
    }

    pub fn with_bindings(mut self, bindings: TaskBindings) -> Self {
        self.bindings = Some(bindings);
        self
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = PayloadWriter { bytes: Vec::new() };
        let tensors = self.params.iter().map(|(n, t)| w.push(n.clone(), t)).collect();
        let optimizer = self.optimizer.as_ref().map(|st| {
            let mut moments = Vec::with_capacity(2 * st.moments.len());
            for (name, mo) in &st.moments {
                moments.push(w.push(format!("{name}.m"), &mo.m));
                moments.push(w.push(format!("{name}.v"), &mo.v));
            }
            OptimizerEntry {
                step: st.step,
                config: st.config,
                moments,
            }
        });
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            normalization: self.normalization,
            tensors,
            optimizer,
            bindings: self.bindings.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let len = u32::try_from(json.len()).map_err(|_| Error::format("header too large"))?;
        let mut out = Vec::with_capacity(8 + json.len() + w.bytes.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&w.bytes);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::format(format!("checkpoint truncated: {} bytes", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::format(format!("bad magic {:?}, expected \"UMC1\"", &bytes[..4])));
        }
        let len = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
        if bytes.len() < 8 + len {
            return Err(Error::format("checkpoint truncated inside the header"));
        }
        let header: Header = serde_json::from_slice(&bytes[8..8 + len])?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::format(format!("unsupported format version {}", header.format_version)));
        }
        header.config.validate()?;
        let payload = &bytes[8 + len..];

        let mut expected = 0usize;
        let entries = header
            .tensors
            .iter()
            .chain(header.optimizer.iter().flat_map(|o| o.moments.iter()));
        for e in entries {
            if e.offset != expected {
                return Err(Error::format(format!("tensor '{}' at offset {}, expected {expected}", e.name, e.offset)));
            }
            expected += 4 * e.shape.iter().product::<usize>();
        }
        if expected != payload.len() {
            return Err(Error::format(format!(
                "manifest describes {expected} payload bytes but the file holds {}",
                payload.len()
            )));
        }

        // The manifest must describe exactly the parameters of its config.
        let plan = layer_plan(&header.config)?;
        let want: Vec<(String, Vec<usize>)> = plan
            .iter()
            .flat_map(|l| {
                [
                    (format!("{}.weight", l.name), l.shape.weight_shape().to_vec()),
                    (format!("{}.bias", l.name), vec![l.shape.out_channels]),
                ]
            })
            .collect();
        let mut have: Vec<(String, Vec<usize>)> = header.tensors.iter().map(|e| (e.name.clone(), e.shape.clone())).collect();
        let mut want_sorted = want;
        have.sort();
        want_sorted.sort();
        if have != want_sorted {
            return Err(Error::format("tensor manifest does not match the parameters of the stored config"));
        }

        let params = header
            .tensors
            .iter()
            .map(|e| Ok((e.name.clone(), read_tensor(payload, e)?)))
            .collect::<Result<Vec<_>>>()?;

        let optimizer = match &header.optimizer {
            None => None,
            Some(o) => {
                if o.moments.len() % 2 != 0 {
                    return Err(Error::format("optimizer moments must come in m/v pairs"));
                }
                let mut moments = BTreeMap::new();
                for pair in o.moments.chunks_exact(2) {
                    let name = pair[0]
                        .name
                        .strip_suffix(".m")
                        .filter(|n| pair[1].name.strip_suffix(".v") == Some(*n))
                        .ok_or_else(|| Error::format(format!("unpaired optimizer moment '{}'", pair[0].name)))?;
                    moments.insert(
                        name.to_string(),
                        Moments {
                            m: read_tensor(payload, &pair[0])?,
                            v: read_tensor(payload, &pair[1])?,
                        },
                    );
                }
                Some(AdamState {
                    config: o.config,
                    step: o.step,
                    moments,
                })
            }
        };

        Ok(Self {
            config: header.config,
            normalization: header.normalization,
            params,
            optimizer,
            bindings: header.bindings,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Copy the stored parameters into `model`, whose config must match.
    pub fn restore_into(&self, model: &mut ModelGraph<f32>) -> Result<()> {
        if model.config != self.config {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint holds {} but the model is {}",
                self.config.to_json(),
                model.config.to_json()
            )));
        }
        for (name, t) in &self.params {
            model.graph.set_param(name, t.clone())?;
        }
        Ok(())
    }

    /// Build the stored architecture and load its parameters.
    pub fn to_model(&self) -> Result<ModelGraph<f32>> {
        let mut model = build::<f32>(&self.config, 0)?;
        self.restore_into(&mut model)?;
        Ok(model)
    }
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &ModelGraph<f32>,
    optimizer: Option<&AdamState<f32>>,
    normalization: Option<NormStats>,
) -> Result<()> {
    Checkpoint::from_model(model, optimizer, normalization).save(path)
}

/// Load a checkpoint, failing with [`Error::ConfigMismatch`] if `expected`
/// is given and differs from the stored config.
pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&UmcConfig>) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if let Some(cfg) = expected {
        if *cfg != ck.config {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint holds {} but {} was expected",
                ck.config.to_json(),
                cfg.to_json()
            )));
        }
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Bindings;
    use crate::model::{Connectivity, PathwaySpec, Task, TINY_FILTERS};
    use crate::rng::Rng;

    fn tiny() -> UmcConfig {
        UmcConfig::umc(
            3,
            &TINY_FILTERS,
            Connectivity::Dense,
            vec![
                PathwaySpec::new("denoise", 3, Task::Regression),
                PathwaySpec::new("seg", 5, Task::Classification),
            ],
        )
    }

    fn outputs(model: &mut ModelGraph<f32>) -> Vec<Tensor<f32>> {
        let mut rng = Rng::new(3);
        let x = Tensor::new(vec![1, 3, 16, 16], (0..768).map(|_| rng.normal() as f32).collect()).unwrap();
        let b: Bindings<f32> = [("image".to_string(), x)].into();
        let ids = model.output_ids();
        model.graph.run(&b, &ids).unwrap();
        ids.iter().map(|&i| model.graph.value(i).unwrap().clone()).collect()
    }

    #[test]
    fn roundtrip_bit_identical() {
        let mut model = build::<f32>(&tiny(), 5).unwrap();
        let mut st = AdamState::new(AdamConfig::default());
        let grads = model.graph.params().map(|(n, t)| (n.to_string(), t.map(|v| v * 0.5))).collect();
        st.step_graph(&mut model.graph, &grads).unwrap();
        let norm = NormStats {
            mean: [1.0, 2.0, 3.0],
            std: [4.0, 5.0, 6.0],
        };
        let ck = Checkpoint::from_model(&model, Some(&st), Some(norm));
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let mut restored = back.to_model().unwrap();
        let a = outputs(&mut model);
        let b = outputs(&mut restored);
        for (x, y) in a.iter().zip(&b) {
            assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn manifest_counts_layers() {
        let model = build::<f32>(&tiny(), 1).unwrap();
        let ck = Checkpoint::from_model(&model, None, None);
        assert_eq!(ck.params.len(), 2 * layer_plan(&tiny()).unwrap().len());
    }

    #[test]
    fn corrupt_files_rejected() {
        let model = build::<f32>(&tiny(), 1).unwrap();
        let bytes = Checkpoint::from_model(&model, None, None).to_bytes().unwrap();
        let truncated = &bytes[..bytes.len() - 4];
        assert!(matches!(Checkpoint::from_bytes(truncated), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..6]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0; 4]);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Format(_))));
    }

    #[test]
    fn config_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = build::<f32>(&tiny(), 1).unwrap();
        save_checkpoint(&path, &model, None, None).unwrap();
        let mut other = tiny();
        other.connectivity = Connectivity::Causal;
        assert!(matches!(load_checkpoint(&path, Some(&other)), Err(Error::ConfigMismatch(_))));
        let ck = load_checkpoint(&path, Some(&tiny())).unwrap();
        let mut m2 = build::<f32>(&other, 1).unwrap();
        assert!(matches!(ck.restore_into(&mut m2), Err(Error::ConfigMismatch(_))));
    }
}
