//! In-memory identity datasets: classes of impressions, each impression an
//! RGB image or a precomputed embedding.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassId(pub String);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ClassId {
    fn from(s: &str) -> Self {
        ClassId(s.to_string())
    }
}

/// `height x width x channels` image, row-major HWC, values nominally in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape("image", &[height, width, channels], &[data.len()]));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn at(&self, i: usize, j: usize, c: usize) -> f64 {
        self.data[(i * self.width + j) * self.channels + c]
    }

    /// Mirror along the vertical axis.
    pub fn flipped(&self) -> Image {
        let mut data = Vec::with_capacity(self.data.len());
        for i in 0..self.height {
            for j in (0..self.width).rev() {
                for c in 0..self.channels {
                    data.push(self.at(i, j, c));
                }
            }
        }
        Image { data, ..*self }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Sample {
    Image(Image),
    Embedding(Vec<f64>),
}

impl Sample {
    pub fn values(&self) -> &[f64] {
        match self {
            Sample::Image(img) => &img.data,
            Sample::Embedding(v) => v,
        }
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        match self {
            Sample::Image(img) => &mut img.data,
            Sample::Embedding(v) => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Impression {
    pub id: String,
    pub sample: Sample,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassData {
    pub id: ClassId,
    /// Sorted by impression id.
    pub impressions: Vec<Impression>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleKind {
    Images { height: usize, width: usize },
    Embeddings { dim: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    classes: Vec<ClassData>,
    kind: SampleKind,
}

impl Dataset {
    /// Validates and canonicalizes: classes sorted by id, impressions sorted by
    /// id, ids unique, every class non-empty, all samples of one kind and size.
    pub fn new(mut classes: Vec<ClassData>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Dataset("no classes".into()));
        }
        classes.sort_by(|a, b| a.id.cmp(&b.id));
        let mut kind = None;
        for w in classes.windows(2) {
            if w[0].id == w[1].id {
                return Err(Error::Dataset(format!("duplicate class id {}", w[0].id)));
            }
        }
        for class in &mut classes {
            if class.impressions.is_empty() {
                return Err(Error::Dataset(format!("class {} has no impressions", class.id)));
            }
            class.impressions.sort_by(|a, b| a.id.cmp(&b.id));
            let mut seen = BTreeSet::new();
            for imp in &class.impressions {
                if !seen.insert(&imp.id) {
                    return Err(Error::Dataset(format!(
                        "duplicate impression {} in class {}",
                        imp.id, class.id
                    )));
                }
                let k = match &imp.sample {
                    Sample::Image(img) => SampleKind::Images {
                        height: img.height,
                        width: img.width,
                    },
                    Sample::Embedding(v) => SampleKind::Embeddings { dim: v.len() },
                };
                match kind {
                    None => kind = Some(k),
                    Some(prev) if prev != k => {
                        return Err(Error::Dataset(format!(
                            "impression {}/{} is {k:?}, expected {prev:?}",
                            class.id, imp.id
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(Dataset {
            classes,
            kind: kind.unwrap(),
        })
    }

    pub fn classes(&self) -> &[ClassData] {
        &self.classes
    }

    pub fn class(&self, idx: usize) -> &ClassData {
        &self.classes[idx]
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn kind(&self) -> SampleKind {
        self.kind
    }

    pub fn num_impressions(&self) -> usize {
        self.classes.iter().map(|c| c.impressions.len()).sum()
    }

    /// The sub-dataset made of the given class indices.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        Dataset::new(idx.iter().map(|&i| self.classes[i].clone()).collect())
    }

    /// Class-disjoint split. Fractions are for (train, val); test takes the rest.
    pub fn split(&self, train: f64, val: f64, seed: u64) -> Result<Splits> {
        if !(0.0..=1.0).contains(&train) || !(0.0..=1.0).contains(&val) || train + val > 1.0 + 1e-12 {
            return Err(Error::Config(format!("bad split fractions {train}/{val}")));
        }
        let n = self.classes.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = ((n as f64 * train).round() as usize).min(n);
        let n_val = ((n as f64 * val).round() as usize).min(n - n_train);
        let pick = |r: &[usize]| -> Result<Option<Dataset>> {
            if r.is_empty() {
                Ok(None)
            } else {
                let mut r = r.to_vec();
                r.sort_unstable();
                self.subset(&r).map(Some)
            }
        };
        Ok(Splits {
            train: pick(&order[..n_train])?.ok_or_else(|| Error::Dataset("training split is empty".into()))?,
            val: pick(&order[n_train..n_train + n_val])?,
            test: pick(&order[n_train + n_val..])?,
        })
    }

    /// Concatenates class-disjoint datasets of the same kind.
    pub fn merge(parts: &[&Dataset]) -> Result<Dataset> {
        Dataset::new(parts.iter().flat_map(|d| d.classes.iter().cloned()).collect())
    }
}

/// Class-disjoint train / validation / test partition.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Option<Dataset>,
}

impl Splits {
    /// Every class not used for training.
    pub fn held_out(&self) -> Result<Option<Dataset>> {
        let parts: Vec<&Dataset> = self.val.iter().chain(self.test.iter()).collect();
        if parts.is_empty() {
            Ok(None)
        } else {
            Dataset::merge(&parts).map(Some)
        }
    }
}
