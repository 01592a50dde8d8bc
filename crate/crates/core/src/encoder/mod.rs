//! Initial impression embeddings: a four-block convolutional backbone or a
//! precomputed embedding table, plus dataset sources (synthetic generator,
//! image directories).

mod images;
mod synthetic;
mod table;

pub use images::{load_image_dir, write_image_dir};
pub use synthetic::{generate_synthetic, SyntheticDatasetSpec, SyntheticKind};
pub use table::{load_embeddings, write_embeddings, EmbeddingTable};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Image;
use crate::error::{Error, Result};
use crate::numerics::{BatchStats, ParamId, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Tiny,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_hw: usize,
    pub channels: Vec<usize>,
    pub embed_dim: usize,
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
}

fn default_bn_eps() -> f64 {
    1e-5
}

fn default_bn_momentum() -> f64 {
    0.1
}

impl EncoderConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self::with_dims(128, vec![64, 128, 256, 512]),
            Preset::Tiny => Self::with_dims(32, vec![8, 16, 32, 64]),
        }
    }

    fn with_dims(input_hw: usize, channels: Vec<usize>) -> Self {
        EncoderConfig {
            input_hw,
            embed_dim: *channels.last().unwrap(),
            channels,
            norm_mean: [0.485, 0.456, 0.406],
            norm_std: [0.229, 0.224, 0.225],
            bn_eps: default_bn_eps(),
            bn_momentum: default_bn_momentum(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != 4 {
            return Err(Error::Config(format!(
                "encoder needs exactly 4 blocks, got {}",
                self.channels.len()
            )));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("encoder channel counts must be positive".into()));
        }
        if self.embed_dim != self.channels[3] {
            return Err(Error::Config(format!(
                "embed_dim {} must equal the last channel count {}",
                self.embed_dim, self.channels[3]
            )));
        }
        if self.input_hw == 0 || !self.input_hw.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "input_hw {} must be a positive multiple of 16",
                self.input_hw
            )));
        }
        if self.norm_std.iter().any(|s| *s <= 0.0) {
            return Err(Error::Config("norm_std must be positive".into()));
        }
        Ok(())
    }

    /// Learnable scalars: bias-free 3x3 convolutions plus BN scale and shift.
    pub fn num_params(&self) -> usize {
        let mut c_in = 3;
        let mut n = 0;
        for &c in &self.channels {
            n += c * c_in * 9 + 2 * c;
            c_in = c;
        }
        n
    }
}

/// Where the initial node embeddings come from.
#[derive(Clone, Debug, PartialEq)]
pub enum EmbeddingSource {
    Trainable(EncoderConfig),
    Precomputed(EmbeddingTable),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics; no state changes.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    conv: ParamId,
    gamma: ParamId,
    beta: ParamId,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

/// Conv(3x3, pad 1, no bias) -> BN -> MaxPool(2) -> ReLU, four times, then a
/// global average pool.
#[derive(Clone, Debug, PartialEq)]
pub struct CnnEncoder {
    cfg: EncoderConfig,
    blocks: Vec<Block>,
}

impl CnnEncoder {
    pub fn new<R: Rng + ?Sized>(cfg: EncoderConfig, params: &mut ParamSet, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut c_in = 3;
        let mut blocks = Vec::new();
        for (b, &c) in cfg.channels.iter().enumerate() {
            let conv = params.add(
                format!("encoder.block{b}.conv"),
                Tensor::uniform_init(&[c, c_in, 3, 3], c_in * 9, rng),
            );
            let gamma = params.add(format!("encoder.block{b}.bn_gamma"), Tensor::vector(vec![1.0; c]));
            let beta = params.add(format!("encoder.block{b}.bn_beta"), Tensor::vector(vec![0.0; c]));
            blocks.push(Block {
                conv,
                gamma,
                beta,
                running_mean: vec![0.0; c],
                running_var: vec![1.0; c],
            });
            c_in = c;
        }
        Ok(CnnEncoder { cfg, blocks })
    }

    /// Rebinds an encoder to parameters restored from a checkpoint.
    pub fn from_params(cfg: EncoderConfig, params: &ParamSet) -> Result<Self> {
        cfg.validate()?;
        let find = |name: String| {
            params
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        let blocks = (0..4)
            .map(|b| {
                let c = cfg.channels[b];
                Ok(Block {
                    conv: find(format!("encoder.block{b}.conv"))?,
                    gamma: find(format!("encoder.block{b}.bn_gamma"))?,
                    beta: find(format!("encoder.block{b}.bn_beta"))?,
                    running_mean: vec![0.0; c],
                    running_var: vec![1.0; c],
                })
            })
            .collect::<Result<_>>()?;
        Ok(CnnEncoder { cfg, blocks })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Running statistics of every block as (mean, var) pairs.
    pub fn running_stats(&self) -> Vec<(&[f64], &[f64])> {
        self.blocks
            .iter()
            .map(|b| (b.running_mean.as_slice(), b.running_var.as_slice()))
            .collect()
    }

    pub fn set_running_stats(&mut self, block: usize, mean: Vec<f64>, var: Vec<f64>) -> Result<()> {
        let b = self
            .blocks
            .get_mut(block)
            .ok_or_else(|| Error::Checkpoint(format!("no encoder block {block}")))?;
        if mean.len() != b.running_mean.len() || var.len() != b.running_var.len() {
            return Err(Error::shape("running_stats", &[b.running_mean.len()], &[mean.len()]));
        }
        b.running_mean = mean;
        b.running_var = var;
        Ok(())
    }

    /// Normalizes images into a `[B x 3 x H x W]` tensor.
    pub fn images_to_tensor(&self, images: &[&Image]) -> Result<Tensor> {
        let hw = self.cfg.input_hw;
        if images.is_empty() {
            return Err(Error::Empty("encode_batch"));
        }
        let mut data = Vec::with_capacity(images.len() * 3 * hw * hw);
        for img in images {
            if img.channels != 3 {
                return Err(Error::Dataset(format!("expected 3 channels, got {}", img.channels)));
            }
            if img.height != hw || img.width != hw {
                return Err(Error::Dataset(format!(
                    "expected {hw}x{hw} image, got {}x{}",
                    img.height, img.width
                )));
            }
            for c in 0..3 {
                let (m, s) = (self.cfg.norm_mean[c], self.cfg.norm_std[c]);
                for i in 0..hw {
                    for j in 0..hw {
                        data.push((img.at(i, j, c) - m) / s);
                    }
                }
            }
        }
        Tensor::new(vec![images.len(), 3, hw, hw], data)
    }

    /// Encodes a batch into `[B x embed_dim]`. Returns the per-block batch
    /// statistics in training mode.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        images: &[&Image],
        mode: BnMode,
    ) -> Result<(Var, Vec<BatchStats>)> {
        let input = self.images_to_tensor(images)?;
        let mut x = tape.constant(input);
        let mut stats = Vec::new();
        for block in &self.blocks {
            let w = tape.param(params, block.conv);
            let gamma = tape.param(params, block.gamma);
            let beta = tape.param(params, block.beta);
            let conv = tape.conv2d(x, w)?;
            let bn = match mode {
                BnMode::Train => {
                    let (y, s) = tape.batch_norm_train(conv, gamma, beta, self.cfg.bn_eps)?;
                    stats.push(s);
                    y
                }
                BnMode::Eval => tape.batch_norm_eval(
                    conv,
                    gamma,
                    beta,
                    &block.running_mean,
                    &block.running_var,
                    self.cfg.bn_eps,
                )?,
            };
            let pooled = tape.max_pool2(bn)?;
            x = tape.relu(pooled);
        }
        Ok((tape.global_avg_pool(x)?, stats))
    }

    /// Exponential moving update of the running statistics.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        let m = self.cfg.bn_momentum;
        for (block, s) in self.blocks.iter_mut().zip(stats) {
            for (r, b) in block.running_mean.iter_mut().zip(&s.mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, b) in block.running_var.iter_mut().zip(&s.var) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
    }

    /// Forward pass that also folds training-mode statistics into the
    /// running estimates.
    pub fn encode_batch(&mut self, tape: &mut Tape, params: &ParamSet, images: &[&Image], mode: BnMode) -> Result<Var> {
        let (out, stats) = self.forward(tape, params, images, mode)?;
        self.update_running_stats(&stats);
        Ok(out)
    }
}
