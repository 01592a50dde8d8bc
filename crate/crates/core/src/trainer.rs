//! Episodic training loop, validation-based model selection, and the
//! episodic / overall accuracy metrics.

use std::borrow::Cow;

use log::info;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::biometric::{identification, EvalConfig};
use crate::checkpoint::Checkpoint;
use crate::dataset::{Dataset, Sample};
use crate::encoder::BnMode;
use crate::error::{Error, Result};
use crate::graph::{episode_seed, sample_episode, EpisodeSpec};
use crate::model::{Model, ModelConfig};
use crate::numerics::{AdamState, Tape};
use crate::par::{self, Exec};
use crate::protoloss::{check_lambda, episodic_loss, hybrid_loss, overall_loss, LossMode, PrototypeRegistry};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Mirror each training image with probability 1/2.
    pub flip: bool,
    /// Additive Gaussian noise on training samples (0 disables).
    pub noise_sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub episodes_per_epoch: usize,
    pub epochs: usize,
    pub episode: EpisodeSpec,
    pub lr: f64,
    /// Weight of the all-class loss in the hybrid objective.
    pub lambda: f64,
    pub loss_mode: LossMode,
    /// Set from the run seed rather than read from configuration files.
    #[serde(skip)]
    pub seed: u64,
    pub registry_momentum: f64,
    /// Episodes per validation pass.
    pub val_episodes: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes_per_epoch: 200,
            epochs: 1000,
            episode: EpisodeSpec::default(),
            lr: 0.001,
            lambda: 0.4,
            loss_mode: LossMode::Hybrid,
            seed: 42,
            registry_momentum: 0.9,
            val_episodes: 100,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes_per_epoch == 0 || self.epochs == 0 || self.val_episodes == 0 {
            return Err(Error::Config(
                "episodes_per_epoch, epochs and val_episodes must be positive".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be >= 0", self.lr)));
        }
        if !(self.augment.noise_sigma >= 0.0 && self.augment.noise_sigma.is_finite()) {
            return Err(Error::Config("augment.noise_sigma must be >= 0".into()));
        }
        check_lambda(self.lambda)?;
        PrototypeRegistry::new(self.registry_momentum)?;
        self.episode.validate()
    }

    /// Loss weight actually applied: the pure modes pin it to an endpoint.
    pub fn effective_lambda(&self) -> f64 {
        match self.loss_mode {
            LossMode::Hybrid => self.lambda,
            LossMode::EpisodicOnly => 0.0,
            LossMode::OverallOnly => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's episodes.
    pub loss: f64,
    /// Validation episodic accuracy in percent.
    pub episodic_acc: f64,
    /// Validation overall accuracy in percent.
    pub overall_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainReport {
    /// `epoch,loss,episodic_acc,overall_acc` with a header row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,episodic_acc,overall_acc\n");
        for r in &self.epochs {
            s.push_str(&format!(
                "{},{:?},{:?},{:?}\n",
                r.epoch, r.loss, r.episodic_acc, r.overall_acc
            ));
        }
        s
    }

    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Model of the best validation epoch.
    pub best: Checkpoint,
    /// Model after the final epoch.
    pub last: Checkpoint,
    pub report: TrainReport,
}

fn augmented<'a>(s: &'a Sample, aug: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<Cow<'a, Sample>> {
    let flip = aug.flip && matches!(s, Sample::Image(_)) && rng.random_bool(0.5);
    if !flip && aug.noise_sigma == 0.0 {
        return Ok(Cow::Borrowed(s));
    }
    let mut out = match s {
        Sample::Image(img) if flip => Sample::Image(img.flipped()),
        other => other.clone(),
    };
    if aug.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, aug.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        out.values_mut().iter_mut().for_each(|v| *v += noise.sample(rng));
    }
    Ok(Cow::Owned(out))
}

/// One optimization step on a sampled episode; returns the loss.
fn train_episode(
    model: &mut Model,
    adam: &mut AdamState,
    registry: &mut PrototypeRegistry,
    ds: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<f64> {
    let plan = sample_episode(ds, &cfg.episode, seed)?;
    let mut aug_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5_a5a5);
    let mut samples: Vec<((usize, usize), Cow<Sample>)> = Vec::new();
    for draw in &plan.classes {
        let mut ids: Vec<usize> = draw.support.iter().chain(&draw.query).flatten().copied().collect();
        ids.sort_unstable();
        ids.dedup();
        for i in ids {
            let s = augmented(&ds.class(draw.class).impressions[i].sample, &cfg.augment, &mut aug_rng)?;
            samples.push(((draw.class, i), s));
        }
    }
    samples.sort_by_key(|a| a.0);
    let lookup = |c: usize, i: usize| -> Cow<Sample> {
        let k = samples.binary_search_by(|(key, _)| key.cmp(&(c, i))).ok();
        match k {
            Some(k) => Cow::Borrowed(samples[k].1.as_ref()),
            None => Cow::Borrowed(&ds.class(c).impressions[i].sample),
        }
    };
    let lambda = cfg.effective_lambda();
    let mut tape = Tape::new();
    let fwd = model.forward_episode(&mut tape, ds, &plan, BnMode::Train, &lookup)?;
    let ep = if lambda < 1.0 {
        Some(episodic_loss(&mut tape, fwd.queries, fwd.class_protos, &fwd.targets)?)
    } else {
        None
    };
    let ov = if lambda > 0.0 {
        Some(overall_loss(
            &mut tape,
            fwd.queries,
            fwd.class_protos,
            &fwd.class_ids,
            &fwd.targets,
            registry,
        )?)
    } else {
        None
    };
    let loss = hybrid_loss(&mut tape, ep, ov, lambda)?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        let origin = tape
            .first_non_finite()
            .map_or("unknown (record kept in debug builds only)".to_string(), |(i, op)| {
                format!("op #{i} ({op})")
            });
        return Err(Error::NonFinite(format!(
            "training loss {value}; first non-finite value at {origin}"
        )));
    }
    model.params.zero_grad();
    tape.backward(loss, &mut model.params)?;
    adam.step(&mut model.params)?;
    if let Some(enc) = model.encoder_mut() {
        enc.update_running_stats(&fwd.stats);
    }
    let protos = tape.value(fwd.class_protos);
    for (k, id) in fwd.class_ids.iter().enumerate() {
        registry.update(id, protos.row_slice(k))?;
    }
    Ok(value)
}

/// Mean per-episode query accuracy (percent) on `emb`, an embedded dataset
/// (see [`Model::embed_dataset`]).
pub fn evaluate_episodic(
    model: &Model,
    emb: &Dataset,
    spec: &EpisodeSpec,
    episodes: usize,
    seed: u64,
    exec: Exec,
) -> Result<f64> {
    if episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let accs = par::try_map(exec, episodes, |e| -> Result<f64> {
        let plan = sample_episode(emb, spec, episode_seed(seed, e as u64))?;
        let mut tape = Tape::inference();
        let get = |c: usize, i: usize| Cow::Borrowed(&emb.class(c).impressions[i].sample);
        let fwd = model.forward_episode(&mut tape, emb, &plan, BnMode::Eval, &get)?;
        let (q, c) = (tape.value(fwd.queries), tape.value(fwd.class_protos));
        let mut correct = 0;
        for (r, &t) in fwd.targets.iter().enumerate() {
            let qr = q.row_slice(r);
            let best = (0..c.rows())
                .map(|k| (crate::numerics::sq_euclid(qr, c.row_slice(k)), k))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .unwrap()
                .1;
            correct += (best == t) as usize;
        }
        Ok(correct as f64 / fwd.targets.len() as f64)
    })?;
    Ok(100.0 * accs.iter().sum::<f64>() / episodes as f64)
}

/// Rank-1 identification accuracy (percent) over every class of `emb`.
pub fn evaluate_overall(model: &Model, emb: &Dataset, cfg: &EvalConfig, exec: Exec) -> Result<f64> {
    Ok(100.0 * identification(model, emb, cfg, exec)?.rank_k(1))
}

/// Episode shape used for validation: the training shape with ways capped
/// by the number of available classes.
pub fn eval_spec(spec: &EpisodeSpec, classes: usize) -> Result<EpisodeSpec> {
    if classes < 2 {
        return Err(Error::InsufficientClasses {
            needed: 2,
            available: classes,
        });
    }
    Ok(EpisodeSpec {
        ways: spec.ways.min(classes),
        ..*spec
    })
}

/// Trains on `train`, validates on `val` (or `train` when absent) after
/// every epoch and keeps the best epoch by (episodic, overall) accuracy;
/// later epochs win ties.
pub fn train(
    model_cfg: &ModelConfig,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    model_cfg.check_dataset(train)?;
    if train.num_classes() < cfg.episode.ways {
        return Err(Error::InsufficientClasses {
            needed: cfg.episode.ways,
            available: train.num_classes(),
        });
    }
    let val = val.unwrap_or(train);
    model_cfg.check_dataset(val)?;
    let vspec = eval_spec(&cfg.episode, val.num_classes())?;
    let eval_cfg = EvalConfig {
        graphs_per_class: cfg.episode.graphs_per_class,
        images_per_graph: cfg.episode.images_per_graph,
        seed: cfg.seed,
        ..EvalConfig::default()
    };

    let mut model = Model::new(model_cfg.clone(), cfg.seed)?;
    let mut adam = AdamState::new(&model.params, cfg.lr);
    let mut registry = PrototypeRegistry::new(cfg.registry_momentum)?;
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, f64, usize, Checkpoint)> = None;
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for e in 0..cfg.episodes_per_epoch {
            let index = ((epoch - 1) * cfg.episodes_per_epoch + e) as u64;
            total += train_episode(
                &mut model,
                &mut adam,
                &mut registry,
                train,
                cfg,
                episode_seed(cfg.seed, index),
            )?;
        }
        let emb = model.embed_dataset(val, exec)?;
        let episodic_acc = evaluate_episodic(&model, &emb, &vspec, cfg.val_episodes, cfg.seed ^ 0x7a1, exec)?;
        let overall_acc = evaluate_overall(&model, &emb, &eval_cfg, exec)?;
        let loss = total / cfg.episodes_per_epoch as f64;
        info!("epoch {epoch}: loss {loss:.4} episodic {episodic_acc:.2}% overall {overall_acc:.2}%");
        records.push(EpochRecord {
            epoch,
            loss,
            episodic_acc,
            overall_acc,
        });
        let better = best
            .as_ref()
            .is_none_or(|(e, o, _, _)| (episodic_acc, overall_acc) >= (*e, *o));
        if better {
            best = Some((
                episodic_acc,
                overall_acc,
                epoch,
                Checkpoint::new(model.clone(), registry.clone()),
            ));
        }
    }
    let (_, _, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        last: Checkpoint::new(model, registry),
        report: TrainReport {
            epochs: records,
            best_epoch,
        },
    })
}
