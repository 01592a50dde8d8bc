use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassData, ClassId, Dataset, Image, Impression, Sample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum SyntheticKind {
    /// Square RGB images of the given side.
    Images { hw: usize },
    /// Raw embedding vectors of the given width.
    Embeddings { dim: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetSpec {
    pub num_classes: usize,
    pub impressions_per_class: usize,
    pub kind: SyntheticKind,
    pub noise_sigma: f64,
    /// Largest translation in pixels (images only).
    pub max_shift: usize,
    pub seed: u64,
}

impl SyntheticDatasetSpec {
    pub fn images(num_classes: usize, impressions_per_class: usize, hw: usize, noise_sigma: f64, seed: u64) -> Self {
        SyntheticDatasetSpec {
            num_classes,
            impressions_per_class,
            kind: SyntheticKind::Images { hw },
            noise_sigma,
            max_shift: 2,
            seed,
        }
    }

    pub fn embeddings(
        num_classes: usize,
        impressions_per_class: usize,
        dim: usize,
        noise_sigma: f64,
        seed: u64,
    ) -> Self {
        SyntheticDatasetSpec {
            num_classes,
            impressions_per_class,
            kind: SyntheticKind::Embeddings { dim },
            noise_sigma,
            max_shift: 0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.impressions_per_class == 0 {
            return Err(Error::Config("synthetic dataset needs classes and impressions".into()));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!("noise_sigma {} must be >= 0", self.noise_sigma)));
        }
        match self.kind {
            SyntheticKind::Images { hw } if hw == 0 || self.max_shift >= hw => Err(Error::Config(format!(
                "bad image size {hw} for shift {}",
                self.max_shift
            ))),
            SyntheticKind::Embeddings { dim: 0 } => Err(Error::Config("embedding dim must be positive".into())),
            _ => Ok(()),
        }
    }
}

/// Smooth random RGB pattern: a few Gaussian blobs per channel squashed into (0, 1).
fn template<R: Rng + ?Sized>(hw: usize, rng: &mut R) -> Vec<f64> {
    let mut field = vec![0.0; hw * hw * 3];
    for c in 0..3 {
        for _ in 0..5 {
            let (ci, cj) = (rng.random_range(0.0..hw as f64), rng.random_range(0.0..hw as f64));
            let width = rng.random_range(hw as f64 / 10.0..hw as f64 / 4.0);
            let amp = rng.random_range(-2.0..2.0);
            for i in 0..hw {
                for j in 0..hw {
                    let r2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
                    field[(i * hw + j) * 3 + c] += amp * (-r2 / (2.0 * width * width)).exp();
                }
            }
        }
    }
    field.iter().map(|v| 0.5 + 0.5 * v.tanh()).collect()
}

/// Deterministic identity dataset: each class gets a random template and every
/// impression is that template, circularly shifted by up to `max_shift`
/// pixels, plus i.i.d. Gaussian noise.
pub fn generate_synthetic(spec: &SyntheticDatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut classes = Vec::with_capacity(spec.num_classes);
    for c in 0..spec.num_classes {
        let mut impressions = Vec::with_capacity(spec.impressions_per_class);
        match spec.kind {
            SyntheticKind::Images { hw } => {
                let base = template(hw, &mut rng);
                let s = spec.max_shift as i64;
                for i in 0..spec.impressions_per_class {
                    let (di, dj) = (rng.random_range(-s..=s), rng.random_range(-s..=s));
                    let mut data = vec![0.0; hw * hw * 3];
                    for r in 0..hw {
                        for q in 0..hw {
                            let sr = (r as i64 - di).rem_euclid(hw as i64) as usize;
                            let sq = (q as i64 - dj).rem_euclid(hw as i64) as usize;
                            for ch in 0..3 {
                                data[(r * hw + q) * 3 + ch] = base[(sr * hw + sq) * 3 + ch];
                            }
                        }
                    }
                    if spec.noise_sigma > 0.0 {
                        data.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
                    }
                    impressions.push(Impression {
                        id: format!("i{i:04}"),
                        sample: Sample::Image(Image::new(hw, hw, 3, data)?),
                    });
                }
            }
            SyntheticKind::Embeddings { dim } => {
                let base: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                for i in 0..spec.impressions_per_class {
                    let v = base
                        .iter()
                        .map(|b| {
                            if spec.noise_sigma > 0.0 {
                                b + noise.sample(&mut rng)
                            } else {
                                *b
                            }
                        })
                        .collect();
                    impressions.push(Impression {
                        id: format!("i{i:04}"),
                        sample: Sample::Embedding(v),
                    });
                }
            }
        }
        classes.push(ClassData {
            id: ClassId(format!("c{c:04}")),
            impressions,
        });
    }
    Dataset::new(classes)
}
