//! Checkpoint container: a JSON manifest followed by raw little-endian
//! `f64` tensor blobs.
//!
//! Layout: 8-byte magic `GZATCKPT`, manifest length as `u64` LE, the UTF-8
//! manifest, then every blob back to back. Blob offsets in the manifest are
//! counted in values, not bytes, from the start of the blob section.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::FlatConfig;
use crate::embeddings::Vocabulary;
use crate::error::{Error, Result};
use crate::numeric::{AdamState, ParamStore, Tensor};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"GZATCKPT";

/// Upstream task a network or a jointly trained saliency model belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Paragen,
    Sentcomp,
}

impl Task {
    pub fn other(self) -> Task {
        match self {
            Task::Paragen => Task::Sentcomp,
            Task::Sentcomp => Task::Paragen,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Paragen => "paragen",
            Task::Sentcomp => "sentcomp",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paragen" => Ok(Task::Paragen),
            "sentcomp" => Ok(Task::Sentcomp),
            other => Err(Error::Config(format!("unknown task '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    RandomInit,
    Pretrained,
    Finetuned,
    /// Saliency model adapted by (or task network trained with) an upstream loss.
    Joint,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::RandomInit => "random-init",
            Stage::Pretrained => "pretrained",
            Stage::Finetuned => "finetuned",
            Stage::Joint => "joint",
        })
    }
}

/// Probe sentence saliency recorded once per training epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeHistory {
    pub tokens: Vec<String>,
    pub saliency: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: Stage,
    pub task: Option<Task>,
    pub ablation: Option<String>,
    pub epochs: usize,
    pub seed: u64,
    pub config_hash: String,
    pub epoch_losses: Vec<f64>,
    #[serde(default)]
    pub probe: Option<ProbeHistory>,
}

impl Provenance {
    pub fn new(stage: Stage, config: &FlatConfig, seed: u64) -> Self {
        Provenance {
            stage,
            task: None,
            ablation: None,
            epochs: 0,
            seed,
            config_hash: config.hash(),
            epoch_losses: Vec::new(),
            probe: None,
        }
    }
}

/// Everything needed to rebuild and keep training a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub params: ParamStore,
    pub optimizer: AdamState,
    pub vocabulary: Vocabulary,
    pub config: FlatConfig,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct BlobRef {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    #[serde(default)]
    requires_grad: bool,
}

#[derive(Serialize, Deserialize)]
struct OptimizerManifest {
    step_count: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    first_moment: Vec<BlobRef>,
    second_moment: Vec<BlobRef>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    tensors: Vec<BlobRef>,
    optimizer: OptimizerManifest,
    vocabulary: Vocabulary,
    config: BTreeMap<String, String>,
    provenance: Provenance,
    blob_values: usize,
}

impl Checkpoint {
    pub fn new(params: ParamStore, vocabulary: Vocabulary, config: FlatConfig, provenance: Provenance) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            params,
            optimizer: AdamState::default(),
            vocabulary,
            config,
            provenance,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blob: Vec<f64> = Vec::new();
        let mut push = |name: &str, shape: Vec<usize>, values: &[f64], requires_grad: bool| {
            let r = BlobRef {
                name: name.to_string(),
                shape,
                offset: blob.len(),
                requires_grad,
            };
            blob.extend_from_slice(values);
            r
        };
        let tensors = self
            .params
            .iter()
            .map(|(n, t)| push(n, t.shape().to_vec(), t.values(), t.requires_grad()))
            .collect();
        let first_moment = self
            .optimizer
            .first_moment
            .iter()
            .map(|(n, v)| push(n, vec![v.len()], v, false))
            .collect();
        let second_moment = self
            .optimizer
            .second_moment
            .iter()
            .map(|(n, v)| push(n, vec![v.len()], v, false))
            .collect();
        let manifest = Manifest {
            format_version: self.format_version,
            tensors,
            optimizer: OptimizerManifest {
                step_count: self.optimizer.step_count,
                beta1: self.optimizer.beta1,
                beta2: self.optimizer.beta2,
                epsilon: self.optimizer.epsilon,
                first_moment,
                second_moment,
            },
            vocabulary: self.vocabulary.clone(),
            config: self.config.entries().clone(),
            provenance: self.provenance.clone(),
            blob_values: blob.len(),
        };
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 8 * blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in blob {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let bad = |msg: &str| Error::format(origin, 0, msg.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(json).map_err(|e| bad(&format!("invalid manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {}", manifest.format_version)));
        }
        let raw = &bytes[16 + len..];
        if raw.len() != manifest.blob_values * 8 {
            return Err(bad("blob section size does not match manifest"));
        }
        let blob: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let slice = |r: &BlobRef| -> Result<Vec<f64>> {
            let n: usize = r.shape.iter().product();
            blob.get(r.offset..r.offset + n)
                .map(<[f64]>::to_vec)
                .ok_or_else(|| bad(&format!("blob for '{}' out of range", r.name)))
        };
        let mut params = ParamStore::new();
        for r in &manifest.tensors {
            let t = Tensor::new(r.shape.clone(), slice(r)?)?.with_requires_grad(r.requires_grad);
            params.insert(r.name.clone(), t);
        }
        let moments = |refs: &[BlobRef]| -> Result<BTreeMap<String, Vec<f64>>> {
            refs.iter().map(|r| Ok((r.name.clone(), slice(r)?))).collect()
        };
        let opt = &manifest.optimizer;
        let optimizer = AdamState {
            step_count: opt.step_count,
            first_moment: moments(&opt.first_moment)?,
            second_moment: moments(&opt.second_moment)?,
            beta1: opt.beta1,
            beta2: opt.beta2,
            epsilon: opt.epsilon,
        };
        Ok(Checkpoint {
            format_version: manifest.format_version,
            params,
            optimizer,
            vocabulary: manifest.vocabulary,
            config: FlatConfig::from(manifest.config),
            provenance: manifest.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert(
            "a.w",
            Tensor::matrix(2, 2, vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300])
                .unwrap()
                .with_requires_grad(true),
        );
        params.insert("emb", Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let mut cfg = FlatConfig::new();
        cfg.set("tsm.hidden_size", "8");
        let mut prov = Provenance::new(Stage::Pretrained, &cfg, 42);
        prov.epoch_losses = vec![0.1 + 0.2, 1.0 / 3.0];
        prov.probe = Some(ProbeHistory {
            tokens: vec!["a".into()],
            saliency: vec![vec![1.0]],
        });
        let mut ckpt = Checkpoint::new(params, Vocabulary::from_tokens(["x", "y"]), cfg, prov);
        ckpt.optimizer.step_count = 3;
        ckpt.optimizer
            .first_moment
            .insert("a.w".into(), vec![0.5, 0.25, 0.125, 1e-9]);
        ckpt.optimizer.second_moment.insert("a.w".into(), vec![1.0; 4]);
        ckpt
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, "mem").unwrap();
        assert!(back.params.bit_identical(&c.params));
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"hello world, not a checkpoint", "mem").is_err());
        let mut bytes = sample().to_bytes();
        bytes.pop();
        assert!(Checkpoint::from_bytes(&bytes, "mem").is_err());
    }

    #[test]
    fn task_parsing() {
        assert_eq!("paragen".parse::<Task>().unwrap(), Task::Paragen);
        assert_eq!(Task::Paragen.other(), Task::Sentcomp);
        assert!("x".parse::<Task>().is_err());
    }
}
