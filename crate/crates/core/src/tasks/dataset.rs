use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::{generate, Sample, SyntheticTaskSpec, NUM_CLASSES, PRNG_NAME};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor_file, write_tensor_file, TensorPayload};

pub const DATASET_FORMAT: &str = "agg_dataset_v1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleFiles {
    pub image: String,
    pub label: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub spec: SyntheticTaskSpec,
    pub seed: u64,
    pub prng: String,
    pub num_classes: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub files: Vec<SampleFiles>,
    /// Hash of the run config that generated the data, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

/// Generated samples; the first `spec.train_samples` form the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticTaskSpec,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn generate(spec: &SyntheticTaskSpec) -> Result<Self> {
        Ok(Self {
            spec: spec.clone(),
            samples: generate(spec)?,
        })
    }

    pub fn train(&self) -> &[Sample] {
        &self.samples[..self.spec.train_samples]
    }

    pub fn val(&self) -> &[Sample] {
        &self.samples[self.spec.train_samples..]
    }

    pub fn manifest_path(dir: &Path) -> PathBuf {
        dir.join("manifest.json")
    }

    /// Writes every sample plus `manifest.json`, tagged with `config_hash`.
    pub fn save(&self, dir: &Path, config_hash: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::with_capacity(self.samples.len());
        for (i, s) in self.samples.iter().enumerate() {
            let f = SampleFiles {
                image: format!("image_{i:04}.agt"),
                label: format!("label_{i:04}.agt"),
            };
            write_tensor_file(&dir.join(&f.image), &TensorPayload::Float(s.image.clone()))?;
            write_tensor_file(&dir.join(&f.label), &TensorPayload::Labels(s.label.clone()))?;
            files.push(f);
        }
        let manifest = DatasetManifest {
            format: DATASET_FORMAT.into(),
            spec: self.spec.clone(),
            seed: self.spec.seed,
            prng: PRNG_NAME.into(),
            num_classes: NUM_CLASSES,
            train_samples: self.spec.train_samples,
            val_samples: self.spec.val_samples,
            files,
            config_hash: Some(config_hash.to_string()),
        };
        let path = Self::manifest_path(dir);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = Self::manifest_path(dir);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.clone(),
            source,
        })?;
        let corrupt = |reason: String| Error::Corrupt {
            path: path.clone(),
            reason,
        };
        if m.format != DATASET_FORMAT {
            return Err(corrupt(format!("format `{}`", m.format)));
        }
        if m.files.len() != m.spec.num_samples() || m.train_samples != m.spec.train_samples {
            return Err(corrupt("sample counts disagree with the spec".into()));
        }
        let spatial = m.spec.spatial_shape();
        let mut samples = Vec::with_capacity(m.files.len());
        for f in &m.files {
            let ip = dir.join(&f.image);
            let lp = dir.join(&f.label);
            let image = read_tensor_file(&ip)?.into_float(&ip)?;
            let label = read_tensor_file(&lp)?.into_labels(&lp)?;
            if image.shape()[1..] != spatial[..] || image.shape()[0] != 1 || label.shape() != &spatial[..] {
                return Err(Error::Corrupt {
                    path: ip,
                    reason: format!("shapes {:?} / {:?} do not match the spec", image.shape(), label.shape()),
                });
            }
            if let Some(&bad) = label.data().iter().find(|&&c| c as usize >= m.num_classes) {
                return Err(Error::LabelOutOfRange {
                    label: bad,
                    num_classes: m.num_classes,
                });
            }
            samples.push(Sample { image, label });
        }
        Ok(Self { spec: m.spec, samples })
    }
}
