//! Experiment files.
//!
//! One TOML file describes a run:
//!
//! ```toml
//! seed = 7             # every random stream derives from this
//! epochs = 50
//! out = "runs/toy"     # relative paths resolve against the config file
//! holdout = 60         # last samples kept for evaluation only
//! arch = "arch.toml"   # or an inline [arch] table; defaults when absent
//!
//! [network]
//! input = [1, 8, 8]    # channels, height, width
//! classes = 3
//! learning_rate = 0.05
//! batch_size = 10
//! [[network.layers]]
//! kind = "conv"        # conv | relu | maxpool | batchnorm | flatten | fc
//! in_channels = 1
//! out_channels = 4
//! k = 3
//! pad = 1              # stride defaults to 1, pad to 0
//!
//! [dataset]
//! kind = "synthetic"   # blob task; see BlobParams for the knobs
//! samples = 240
//! # kind = "idx", images = "...", labels = "..."
//!
//! [prune]              # omit to train without pruning
//! p = 0.9
//! fifo_depth = 4
//! estimator = "unbiased"   # or "biased"
//!
//! [simulate]
//! samples = 4          # traced samples of the first batch
//! warmup_epochs = 5    # training before the traced step
//! ```
//!
//! The arch file holds the fields of [`ArchConfig`] with a `[costs]` table.

use std::fs;
use std::path::{Path, PathBuf};

use gradsparse::nn::data::{gaussian_blobs, BlobParams};
use gradsparse::nn::{Dataset, NetworkSpec};
use gradsparse::prune::PruneConfig;
use gradsparse::rng::named_seed;
use gradsparse::sim::ArchConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config, CliError, Result};
use crate::idx;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    Synthetic(BlobParams),
    Idx { images: PathBuf, labels: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArchSource {
    Path(PathBuf),
    Inline(ArchConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub samples: usize,
    pub warmup_epochs: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            samples: 4,
            warmup_epochs: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Trailing samples of the dataset kept out of training for evaluation.
    #[serde(default)]
    pub holdout: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<ArchSource>,
    pub network: NetworkSpec,
    pub dataset: DatasetSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prune: Option<PruneConfig>,
    #[serde(default)]
    pub simulate: SimulateConfig,
}

fn default_epochs() -> usize {
    10
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_toml<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn load_arch(path: &Path) -> Result<ArchConfig> {
    let arch: ArchConfig = parse_toml(path, &read_text(path)?)?;
    arch.validate()?;
    Ok(arch)
}

/// Command-line values that replace fields of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub prune_p: Option<f64>,
    pub fifo_depth: Option<usize>,
}

impl ExperimentConfig {
    /// Reads `path`, inlines the arch file and makes every path absolute
    /// or relative to the working directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = parse_toml(path, &read_text(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.out = resolve(base, &cfg.out);
        if let DatasetSource::Idx { images, labels } = &mut cfg.dataset {
            *images = resolve(base, images);
            *labels = resolve(base, labels);
        }
        if let Some(ArchSource::Path(p)) = &cfg.arch {
            cfg.arch = Some(ArchSource::Inline(load_arch(&resolve(base, p))?));
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        match (&mut self.prune, o.prune_p) {
            (Some(p), Some(v)) => p.p = v,
            (None, Some(v)) => self.prune = Some(PruneConfig::new(v, o.fifo_depth.unwrap_or(4))?),
            _ => {}
        }
        if let Some(d) = o.fifo_depth {
            match &mut self.prune {
                Some(p) => p.fifo_depth = d,
                None => return config("--fifo-depth needs pruning: add [prune] or pass --prune-p"),
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.network.shapes()?;
        if let Some(p) = &self.prune {
            p.validate()?;
        }
        self.arch()?.validate()?;
        if self.simulate.samples == 0 {
            return config("simulate.samples must be at least 1");
        }
        if let DatasetSource::Synthetic(b) = &self.dataset {
            if b.classes != self.network.classes {
                return config(format!(
                    "dataset has {} classes, network {}",
                    b.classes, self.network.classes
                ));
            }
            let [c, h, w] = self.network.input;
            if (c, h, w) != (1, b.height, b.width) {
                return config(format!(
                    "blob images are 1x{}x{}, network expects {c}x{h}x{w}",
                    b.height, b.width
                ));
            }
        }
        Ok(())
    }

    pub fn arch(&self) -> Result<ArchConfig> {
        match &self.arch {
            None => Ok(ArchConfig::default()),
            Some(ArchSource::Inline(a)) => Ok(*a),
            Some(ArchSource::Path(p)) => load_arch(p),
        }
    }

    /// Training set and, with `holdout > 0`, the held-out tail.
    pub fn split(&self) -> Result<(Dataset, Option<Dataset>)> {
        let mut data = self.dataset()?;
        if self.holdout == 0 {
            return Ok((data, None));
        }
        if self.holdout >= data.len() {
            return config(format!(
                "holdout {} leaves no training samples of {}",
                self.holdout,
                data.len()
            ));
        }
        let at = data.len() - self.holdout;
        let test = Dataset::new(
            data.images.split_off(at),
            data.labels.split_off(at),
            data.classes,
        )?;
        Ok((data, Some(test)))
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let data = match &self.dataset {
            DatasetSource::Synthetic(b) => gaussian_blobs(b, named_seed(self.seed, "data"))?,
            DatasetSource::Idx { images, labels } => {
                idx::load_idx(images, labels, self.network.classes)?
            }
        };
        if data.is_empty() {
            return config("dataset is empty");
        }
        let [c, h, w] = self.network.input;
        if data.images[0].shape() != (c, h, w) {
            return config(format!(
                "dataset images are {:?}, network expects {c}x{h}x{w}",
                data.images[0].shape()
            ));
        }
        Ok(data)
    }

    /// Canonical text of the effective configuration.
    pub fn canonical(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
    }

    /// SHA-256 of the canonical text, without the output directory: where
    /// a run is written does not change what it computes.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.out = PathBuf::new();
        Ok(hex::encode(Sha256::digest(c.canonical()?.as_bytes())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
[network]
input = [1, 8, 8]
classes = 3
learning_rate = 0.05
batch_size = 4
[[network.layers]]
kind = "conv"
in_channels = 1
out_channels = 2
k = 3
pad = 1
[[network.layers]]
kind = "relu"
[[network.layers]]
kind = "flatten"
[[network.layers]]
kind = "fc"
inputs = 128
outputs = 3
[dataset]
kind = "synthetic"
samples = 12
"#;

    #[test]
    fn minimal_file_takes_defaults() {
        let cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        assert_eq!(cfg.epochs, 10);
        assert_eq!(cfg.prune, None);
        assert_eq!(cfg.arch().unwrap(), ArchConfig::default());
        assert_eq!(cfg.simulate, SimulateConfig::default());
        cfg.validate().unwrap();
        assert_eq!(cfg.dataset().unwrap().len(), 12);
        let (train, test) = cfg.split().unwrap();
        assert_eq!((train.len(), test.is_none()), (12, true));
    }

    #[test]
    fn canonical_text_round_trips() {
        let mut cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.prune = Some(PruneConfig::new(0.9, 4).unwrap());
        cfg.arch = Some(ArchSource::Inline(ArchConfig::default()));
        let back: ExperimentConfig = toml::from_str(&cfg.canonical().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
        let moved = ExperimentConfig {
            out: "elsewhere".into(),
            ..cfg.clone()
        };
        assert_eq!(moved.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn overrides() {
        let mut cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        let h0 = cfg.hash().unwrap();
        assert!(matches!(
            cfg.apply(&Overrides {
                fifo_depth: Some(2),
                ..Default::default()
            }),
            Err(CliError::Config(_))
        ));
        cfg.apply(&Overrides {
            seed: Some(9),
            prune_p: Some(0.8),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.prune.unwrap().fifo_depth, 4);
        assert_ne!(cfg.hash().unwrap(), h0);
        let bad = cfg.apply(&Overrides {
            prune_p: Some(1.0),
            ..Default::default()
        });
        assert!(bad.is_ok());
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn holdout_takes_the_tail() {
        let text = MINIMAL.replace("seed = 3", "seed = 3\nholdout = 5");
        let cfg: ExperimentConfig = toml::from_str(&text).unwrap();
        let all = cfg.dataset().unwrap();
        let (train, test) = cfg.split().unwrap();
        let test = test.unwrap();
        assert_eq!((train.len(), test.len()), (7, 5));
        assert_eq!(test.images[..], all.images[7..]);
        let text = MINIMAL.replace("seed = 3", "seed = 3\nholdout = 12");
        let cfg: ExperimentConfig = toml::from_str(&text).unwrap();
        assert!(matches!(cfg.split(), Err(CliError::Config(_))));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = format!("{MINIMAL}\n[simulate]\nsample = 3\n");
        assert!(toml::from_str::<ExperimentConfig>(&text).is_err());
        let text = MINIMAL.replace("seed = 3", "seed = 3\nepoch = 3");
        assert!(toml::from_str::<ExperimentConfig>(&text).is_err());
    }

    #[test]
    fn class_mismatch_is_a_config_error() {
        let text = MINIMAL.replace("samples = 12", "samples = 12\nclasses = 4");
        let cfg: ExperimentConfig = toml::from_str(&text).unwrap();
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
    }
}
