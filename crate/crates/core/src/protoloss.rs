//! Class prototypes, distance-softmax classification, the running class
//! registry behind the all-class loss, and the hybrid loss.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::ClassId;
use crate::error::{Error, Result};
use crate::numerics::{softmax, sq_euclid, Tape, Tensor, Var};

/// Mean of a class's graph prototypes.
pub fn class_prototype(graph_protos: &[&[f64]]) -> Result<Vec<f64>> {
    let first = graph_protos.first().ok_or(Error::Empty("class_prototype"))?;
    let mut out = vec![0.0; first.len()];
    for p in graph_protos {
        if p.len() != out.len() {
            return Err(Error::shape("class_prototype", &[out.len()], &[p.len()]));
        }
        out.iter_mut().zip(*p).for_each(|(o, v)| *o += v);
    }
    let n = graph_protos.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// Class probabilities `softmax(-d(q, p_c))` with squared Euclidean `d`.
pub fn classify(query: &[f64], class_protos: &[&[f64]]) -> Result<Vec<f64>> {
    if class_protos.len() < 2 {
        return Err(Error::Config(format!(
            "classify needs >= 2 classes, got {}",
            class_protos.len()
        )));
    }
    let neg: Vec<f64> = class_protos
        .iter()
        .map(|p| {
            if p.len() != query.len() {
                Err(Error::shape("classify", &[query.len()], &[p.len()]))
            } else {
                Ok(-sq_euclid(query, p))
            }
        })
        .collect::<Result<_>>()?;
    Ok(softmax(&neg))
}

/// Mean NLL of `queries [Q x d]` against `candidates [C x d]` under
/// `softmax(-||q - p||^2)`.
pub fn prototype_nll(tape: &mut Tape, queries: Var, candidates: Var, targets: &[usize]) -> Result<Var> {
    let d = tape.sq_dist_rows(queries, candidates)?;
    let logits = tape.scale(d, -1.0);
    tape.cross_entropy(logits, targets)
}

/// Episodic loss: every query is scored against the episode's class prototypes only.
pub fn episodic_loss(tape: &mut Tape, queries: Var, class_protos: Var, targets: &[usize]) -> Result<Var> {
    let c = tape.value(class_protos).rows();
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::Dataset(format!(
            "query target {t} is not among the {c} episode classes"
        )));
    }
    prototype_nll(tape, queries, class_protos, targets)
}

/// Running per-class prototype vectors updated with exponential momentum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeRegistry {
    momentum: f64,
    dim: Option<usize>,
    entries: BTreeMap<ClassId, (Vec<f64>, u64)>,
}

impl PrototypeRegistry {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("registry momentum {momentum} must be in [0, 1)")));
        }
        Ok(PrototypeRegistry {
            momentum,
            dim: None,
            entries: BTreeMap::new(),
        })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, class: &ClassId) -> Option<&[f64]> {
        self.entries.get(class).map(|(v, _)| v.as_slice())
    }

    pub fn count(&self, class: &ClassId) -> Option<u64> {
        self.entries.get(class).map(|(_, c)| *c)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ClassId, &[f64], u64)> {
        self.entries.iter().map(|(k, (v, c))| (k, v.as_slice(), *c))
    }

    /// Inserts a new class or blends `momentum * old + (1 - momentum) * new`.
    pub fn update(&mut self, class: &ClassId, v: &[f64]) -> Result<()> {
        if let Some(d) = self.dim {
            if d != v.len() {
                return Err(Error::shape("registry_update", &[d], &[v.len()]));
            }
        }
        self.dim = Some(v.len());
        let mu = self.momentum;
        match self.entries.get_mut(class) {
            Some((old, count)) => {
                old.iter_mut().zip(v).for_each(|(o, n)| *o = mu * *o + (1.0 - mu) * n);
                *count += 1;
            }
            None => {
                self.entries.insert(class.clone(), (v.to_vec(), 1));
            }
        }
        Ok(())
    }

    /// Restores an entry verbatim (checkpoint loading).
    pub fn restore(&mut self, class: ClassId, v: Vec<f64>, count: u64) -> Result<()> {
        if count == 0 {
            return Err(Error::Checkpoint(format!("registry entry {class} has zero updates")));
        }
        if let Some(d) = self.dim {
            if d != v.len() {
                return Err(Error::shape("registry restore", &[d], &[v.len()]));
            }
        }
        self.dim = Some(v.len());
        self.entries.insert(class, (v, count));
        Ok(())
    }
}

/// All-class loss: the episode's classes keep their gradient-carrying
/// prototypes (rows `0..C` of the candidate set, in episode order) and every
/// other registry class joins as a constant.
pub fn overall_loss(
    tape: &mut Tape,
    queries: Var,
    episode_protos: Var,
    episode_classes: &[ClassId],
    targets: &[usize],
    registry: &PrototypeRegistry,
) -> Result<Var> {
    let c = episode_classes.len();
    if tape.value(episode_protos).rows() != c {
        return Err(Error::shape("overall_loss", &[c], &[tape.value(episode_protos).rows()]));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::Dataset(format!(
            "query target {t} is not among the candidate classes"
        )));
    }
    let d = tape.value(episode_protos).cols();
    let mut extra = Vec::new();
    let mut rows = 0;
    for (id, v, _) in registry.iter() {
        if !episode_classes.contains(id) {
            if v.len() != d {
                return Err(Error::shape("overall_loss", &[d], &[v.len()]));
            }
            extra.extend_from_slice(v);
            rows += 1;
        }
    }
    let candidates = if rows == 0 {
        episode_protos
    } else {
        let others = tape.constant(Tensor::matrix(rows, d, extra)?);
        tape.stack_rows(&[episode_protos, others])?
    };
    prototype_nll(tape, queries, candidates, targets)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// `(1 - lambda) * episodic + lambda * overall`; the endpoints skip the
    /// unused term so they match the pure losses bit for bit.
    #[default]
    Hybrid,
    EpisodicOnly,
    OverallOnly,
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::Config(format!("loss weight lambda {lambda} must be in [0, 1]")))
    }
}

/// `(1 - lambda) * episodic + lambda * overall` on plain numbers.
pub fn hybrid_value(episodic: f64, overall: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok((1.0 - lambda) * episodic + lambda * overall)
}

/// The hybrid loss on the tape. `lambda == 0` and `lambda == 1` return the
/// corresponding pure term unchanged.
pub fn hybrid_loss(tape: &mut Tape, episodic: Option<Var>, overall: Option<Var>, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    let missing = || Error::Config("hybrid loss term missing".into());
    if lambda == 0.0 {
        return episodic.ok_or_else(missing);
    }
    if lambda == 1.0 {
        return overall.ok_or_else(missing);
    }
    let e = tape.scale(episodic.ok_or_else(missing)?, 1.0 - lambda);
    let o = tape.scale(overall.ok_or_else(missing)?, lambda);
    tape.add(e, o)
}
