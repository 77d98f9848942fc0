//! Checkpoint directories: `manifest.json` describing every tensor plus one
//! raw `tensors.bin` of little-endian f64 values. Round trips are bit-exact.

use std::fs;
use std::path::Path;

use rand::rngs::mock::StepRng;
use serde::{Deserialize, Serialize};

use crate::backbone::{init_params, BackboneConfig, BackboneParams};
use crate::error::{Error, Result};
use crate::optim::{AdamHyper, AdamState};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSOR_FILE: &str = "tensors.bin";
const FORMAT: &str = "gaitchd-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: BackboneParams,
    pub optimizer: AdamState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 4],
    /// Byte offset into the tensor file.
    pub offset: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub step: u64,
    #[serde(flatten)]
    pub hyper: AdamHyper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub backbone: BackboneConfig,
    pub optimizer: OptimizerMeta,
    pub tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new(params: BackboneParams) -> Self {
        let sizes: Vec<usize> = params.named_tensors().iter().map(|(_, s, _)| s.len()).collect();
        Self {
            params,
            optimizer: AdamState::new(sizes),
        }
    }

    fn entries(&self) -> Vec<(String, [usize; 4], &[f64])> {
        let named = self.params.named_tensors();
        let mut out: Vec<(String, [usize; 4], &[f64])> =
            named.iter().map(|(n, s, d)| (n.clone(), s.dims(), *d)).collect();
        for (prefix, bufs) in [("adam.m", &self.optimizer.m), ("adam.v", &self.optimizer.v)] {
            for ((name, shape, _), buf) in named.iter().zip(bufs.iter()) {
                out.push((format!("{prefix}/{name}"), shape.dims(), &buf[..]));
            }
        }
        out
    }

    /// Manifest and raw bytes, exactly as written to disk.
    pub fn encode(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        let mut tensors = Vec::new();
        let mut bytes = Vec::new();
        for (name, shape, data) in self.entries() {
            tensors.push(TensorEntry {
                name,
                shape,
                offset: bytes.len(),
                count: data.len(),
            });
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            backbone: self.params.config.clone(),
            optimizer: OptimizerMeta {
                step: self.optimizer.step,
                hyper: self.optimizer.hyper.clone(),
            },
            tensors,
        };
        let mut json = serde_json::to_vec_pretty(&manifest)?;
        json.push(b'\n');
        Ok((json, bytes))
    }

    pub fn decode(manifest: &[u8], bytes: &[u8]) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(manifest)?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint format {} v{}",
                manifest.format, manifest.version
            )));
        }
        // Parameter shapes come from the config; values are overwritten below.
        let template = init_params(&manifest.backbone, &mut StepRng::new(0, 0))?;
        let mut ckpt = Checkpoint::new(template);
        ckpt.optimizer.step = manifest.optimizer.step;
        ckpt.optimizer.hyper = manifest.optimizer.hyper.clone();

        let expected: Vec<(String, [usize; 4])> =
            ckpt.entries().into_iter().map(|(n, s, _)| (n, s)).collect();
        if expected.len() != manifest.tensors.len() {
            return Err(Error::Data(format!(
                "checkpoint lists {} tensors, configuration implies {}",
                manifest.tensors.len(),
                expected.len()
            )));
        }
        let mut values = Vec::with_capacity(expected.len());
        for ((name, shape), entry) in expected.iter().zip(&manifest.tensors) {
            if &entry.name != name || &entry.shape != shape || entry.count != shape.iter().product::<usize>() {
                return Err(Error::Data(format!(
                    "tensor entry {} {:?} does not match expected {name} {shape:?}",
                    entry.name, entry.shape
                )));
            }
            let end = entry.offset + 8 * entry.count;
            let raw = bytes.get(entry.offset..end).ok_or_else(|| {
                Error::Data(format!("tensor {} runs past the end of {TENSOR_FILE}", entry.name))
            })?;
            values.push(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect::<Vec<f64>>(),
            );
        }
        let count = ckpt.optimizer.m.len();
        let mut values = values.into_iter();
        for t in ckpt.params.tensors_mut() {
            t.copy_from_slice(&values.next().expect("counted above"));
        }
        for i in 0..count {
            ckpt.optimizer.m[i] = values.next().expect("counted above");
        }
        for i in 0..count {
            ckpt.optimizer.v[i] = values.next().expect("counted above");
        }
        Ok(ckpt)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (manifest, bytes) = self.encode()?;
        let mp = dir.join(MANIFEST_FILE);
        fs::write(&mp, manifest).map_err(|e| Error::io(mp, e))?;
        let tp = dir.join(TENSOR_FILE);
        fs::write(&tp, bytes).map_err(|e| Error::io(tp, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mp = dir.join(MANIFEST_FILE);
        let manifest = fs::read(&mp).map_err(|e| Error::io(mp, e))?;
        let tp = dir.join(TENSOR_FILE);
        let bytes = fs::read(&tp).map_err(|e| Error::io(tp, e))?;
        Self::decode(&manifest, &bytes)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cfg = BackboneConfig {
            widths: vec![2, 3],
            mgp_branch: true,
            ..BackboneConfig::default()
        };
        let mut ckpt = Checkpoint::new(init_params(&cfg, &mut rng).unwrap());
        ckpt.optimizer.step = 17;
        for buf in ckpt.optimizer.m.iter_mut().chain(ckpt.optimizer.v.iter_mut()) {
            buf.iter_mut().for_each(|v| *v = rng.gen::<f64>() * 1e-3);
        }
        ckpt.params.stages[0].bias[1] = -0.0;
        ckpt.params.stages[1].bias[0] = f64::MIN_POSITIVE;

        let dir = tempfile::tempdir().unwrap();
        ckpt.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        let (m1, b1) = ckpt.encode().unwrap();
        let (m2, b2) = back.encode().unwrap();
        assert_eq!(m1, m2);
        assert_eq!(b1, b2);
        assert!(back.params.stages[0].bias[1].is_sign_negative());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let ckpt = Checkpoint::new(
            init_params(&BackboneConfig::with_widths(&[2]), &mut ChaCha8Rng::seed_from_u64(1)).unwrap(),
        );
        let (m, b) = ckpt.encode().unwrap();
        assert!(Checkpoint::decode(&m, &b[..b.len() - 8]).is_err());
    }
}
