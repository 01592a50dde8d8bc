//! Run configuration: one TOML document layered over a named preset.
//!
//! ```toml
//! preset = "tiny"
//! seed = 7
//!
//! [train]
//! epochs = 5
//!
//! [model.pgnn]
//! align_strength = 0.5
//! ```
//!
//! Keys absent from the file keep the preset value; unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::biometric::EvalConfig;
use crate::dataset::{Dataset, SampleKind, Splits};
use crate::encoder::{generate_synthetic, load_embeddings, load_image_dir, Preset, SyntheticDatasetSpec};
use crate::error::{Error, Result};
use crate::graph::EpisodeSpec;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Image directory (`<class>/<impression>.png`) or embedding CSV file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Generated dataset, used when `path` is absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticDatasetSpec>,
    pub train_fraction: f64,
    pub val_fraction: f64,
    /// Seed of the class-disjoint split.
    pub split_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    /// Drives initialization, episode sampling and evaluation draws.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => RunConfig {
                preset: p,
                seed: 42,
                data: DataConfig {
                    path: None,
                    synthetic: Some(SyntheticDatasetSpec::images(20, 30, 128, 0.3, 1)),
                    train_fraction: 0.7,
                    val_fraction: 0.15,
                    split_seed: 42,
                },
                model: ModelConfig::preset(p),
                train: TrainConfig::default(),
                eval: EvalConfig::default(),
            },
            Preset::Tiny => RunConfig {
                preset: p,
                seed: 42,
                data: DataConfig {
                    path: None,
                    synthetic: Some(SyntheticDatasetSpec::images(20, 30, 32, 0.6, 1)),
                    train_fraction: 0.5,
                    val_fraction: 0.2,
                    split_seed: 42,
                },
                model: ModelConfig::preset(p),
                train: TrainConfig {
                    episodes_per_epoch: 20,
                    epochs: 20,
                    episode: EpisodeSpec::new(5, 2, 3),
                    val_episodes: 20,
                    ..TrainConfig::default()
                },
                eval: EvalConfig {
                    graphs_per_class: 2,
                    images_per_graph: 3,
                    ..EvalConfig::default()
                },
            },
        }
    }

    /// Parses `text`, layering it over `preset` (or the file's own `preset`
    /// key, or the paper preset), and validates the result.
    pub fn from_toml(text: &str, preset: Option<Preset>) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let named = match user.get("preset") {
            Some(v) => Some(
                v.clone()
                    .try_into::<Preset>()
                    .map_err(|e| Error::Config(format!("preset: {e}")))?,
            ),
            None => None,
        };
        let base = RunConfig::preset(preset.or(named).unwrap_or(Preset::Paper));
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        let mut user = user;
        if let Some(p) = preset {
            user.insert(
                "preset".into(),
                toml::Value::try_from(p).map_err(|e| Error::Config(e.to_string()))?,
            );
        }
        merge(&mut merged, user);
        let cfg: RunConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, preset: Option<Preset>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        RunConfig::from_toml(&text, preset)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        let d = &self.data;
        match (&d.path, &d.synthetic) {
            (None, None) => return Err(Error::Config("data needs a path or a synthetic spec".into())),
            (None, Some(s)) => s.validate()?,
            (Some(_), _) => {}
        }
        let frac_ok = |f: f64| (0.0..=1.0).contains(&f);
        if !frac_ok(d.train_fraction) || !frac_ok(d.val_fraction) || d.train_fraction + d.val_fraction >= 1.0 {
            return Err(Error::Config(format!(
                "split fractions train {} + val {} must leave room for test classes",
                d.train_fraction, d.val_fraction
            )));
        }
        Ok(())
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Evaluation settings with the run seed applied.
    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            seed: self.seed,
            ..self.eval
        }
    }

    /// The model configuration for `ds`: embedding datasets bypass the CNN.
    pub fn model_for(&self, ds: &Dataset) -> Result<ModelConfig> {
        let mut m = self.model.clone();
        if let SampleKind::Embeddings { .. } = ds.kind() {
            m.encoder = None;
        }
        m.validate()?;
        m.check_dataset(ds)?;
        Ok(m)
    }

    /// Loads or generates the dataset. A path holding a file is read as an
    /// embedding table, a directory as images.
    pub fn load_dataset(&self) -> Result<Dataset> {
        match (&self.data.path, &self.data.synthetic) {
            (Some(p), _) if p.is_file() => load_embeddings(p)?.to_dataset(),
            (Some(p), _) if p.is_dir() => load_image_dir(p),
            (Some(p), _) => Err(Error::Dataset(format!("dataset path {} does not exist", p.display()))),
            (None, Some(s)) => generate_synthetic(s),
            (None, None) => Err(Error::Config("data needs a path or a synthetic spec".into())),
        }
    }

    pub fn split(&self, ds: &Dataset) -> Result<Splits> {
        ds.split(self.data.train_fraction, self.data.val_fraction, self.data.split_seed)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
