//! End-to-end runs: train on the training classes, then score the test
//! classes with the episodic, identification and verification protocols.
//! Ablation variants and the loss-weight sweep are built on top.

use serde::{Deserialize, Serialize};

use crate::biometric::{identification, roc_eer_auc, verification_scores, RocCurve};
use crate::config::RunConfig;
use crate::dataset::{Dataset, Splits};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::par::Exec;
use crate::protoloss::LossMode;
use crate::trainer::{eval_spec, evaluate_episodic, train, TrainOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// One impression per graph, one graph per class, no message passing.
    SingleImpression,
    NoCrossGraph,
    /// Query prototypes take part in alignment too.
    QueryAlignment,
    /// Prototypes replaced by the mean of node features.
    NoPrototypeNode,
}

impl Variant {
    pub const ABLATIONS: [Variant; 4] = [
        Variant::SingleImpression,
        Variant::NoCrossGraph,
        Variant::QueryAlignment,
        Variant::NoPrototypeNode,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::SingleImpression => "single_impression",
            Variant::NoCrossGraph => "no_cross_graph",
            Variant::QueryAlignment => "query_alignment",
            Variant::NoPrototypeNode => "no_prototype_node",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        [Variant::Full]
            .into_iter()
            .chain(Variant::ABLATIONS)
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }

    /// `cfg` with this variant's switches applied.
    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        let pgnn = &mut c.model.pgnn;
        match self {
            Variant::Full => {}
            Variant::SingleImpression => {
                pgnn.message_passing = false;
                c.train.episode.graphs_per_class = 1;
                c.train.episode.images_per_graph = 1;
                c.eval.graphs_per_class = 1;
                c.eval.images_per_graph = 1;
            }
            Variant::NoCrossGraph => pgnn.no_cross_graph_alignment = true,
            Variant::QueryAlignment => pgnn.query_alignment_enabled = true,
            Variant::NoPrototypeNode => pgnn.no_prototype_node = true,
        }
        c
    }
}

/// Test-class metrics of a trained model. Accuracies are percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub episodic_acc: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub eer: f64,
    pub auc: f64,
    /// Identification accuracy (fraction) at ranks 1..=gallery size.
    pub cmc: Vec<f64>,
    #[serde(skip)]
    pub roc: RocCurve,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub outcome: TrainOutcome,
    pub metrics: Metrics,
}

/// Scores `model` on `ds` (raw samples) with every protocol.
pub fn evaluate(model: &Model, ds: &Dataset, cfg: &RunConfig, exec: Exec) -> Result<Metrics> {
    let emb = model.embed_dataset(ds, exec)?;
    let eval = cfg.eval_config();
    let spec = eval_spec(&cfg.train.episode, emb.num_classes())?;
    let episodic_acc = evaluate_episodic(model, &emb, &spec, eval.episodes, eval.seed, exec)?;
    let ident = identification(model, &emb, &eval, exec)?;
    let roc = roc_eer_auc(&verification_scores(model, &emb, &eval, exec)?)?;
    Ok(Metrics {
        episodic_acc,
        rank1: 100.0 * ident.rank_k(1),
        rank5: 100.0 * ident.rank_k(5),
        eer: roc.eer,
        auc: roc.auc,
        cmc: ident.cmc,
        roc,
    })
}

fn test_split(splits: &Splits) -> Result<&Dataset> {
    splits
        .test
        .as_ref()
        .ok_or_else(|| Error::Dataset("the split left no test classes".into()))
}

/// Trains on the training classes (selecting on validation classes) and
/// evaluates the selected model on the test classes.
pub fn run(cfg: &RunConfig, splits: &Splits, exec: Exec) -> Result<RunResult> {
    cfg.validate()?;
    let test = test_split(splits)?;
    let model_cfg = cfg.model_for(&splits.train)?;
    let outcome = train(
        &model_cfg,
        &splits.train,
        splits.val.as_ref(),
        &cfg.train_config(),
        exec,
    )?;
    let metrics = evaluate(&outcome.best.model, test, cfg, exec)?;
    Ok(RunResult { outcome, metrics })
}

/// The baseline followed by each requested variant, all under the same seed.
pub fn ablate(cfg: &RunConfig, splits: &Splits, variants: &[Variant], exec: Exec) -> Result<Vec<(Variant, Metrics)>> {
    let mut out = Vec::with_capacity(variants.len() + 1);
    for v in std::iter::once(Variant::Full).chain(variants.iter().copied()) {
        let r = run(&v.apply(cfg), splits, exec)?;
        out.push((v, r.metrics));
    }
    Ok(out)
}

/// `Rank-1/Rank-5/EER` table, one row per run.
pub fn ablation_table(rows: &[(Variant, Metrics)]) -> String {
    let mut s = String::from("variant,rank1,rank5,eer\n");
    for (v, m) in rows {
        s.push_str(&format!("{},{:?},{:?},{:?}\n", v.name(), m.rank1, m.rank5, m.eer));
    }
    s
}

pub const DEFAULT_LAMBDAS: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

/// Trains once per loss weight (shared seed) and reports test-class overall
/// accuracy. Returns `(lambda, overall_acc, run)` rows in input order.
pub fn sweep_lambda(cfg: &RunConfig, splits: &Splits, lambdas: &[f64], exec: Exec) -> Result<Vec<(f64, RunResult)>> {
    if lambdas.is_empty() {
        return Err(Error::Config("empty lambda list".into()));
    }
    for (i, a) in lambdas.iter().enumerate() {
        crate::protoloss::check_lambda(*a)?;
        if lambdas[..i].iter().any(|b| b.to_bits() == a.to_bits()) {
            return Err(Error::Config(format!("duplicate lambda {a}")));
        }
    }
    lambdas
        .iter()
        .map(|&l| {
            let mut c = cfg.clone();
            c.train.lambda = l;
            c.train.loss_mode = LossMode::Hybrid;
            Ok((l, run(&c, splits, exec)?))
        })
        .collect()
}

pub fn sweep_csv(rows: &[(f64, RunResult)]) -> String {
    let mut s = String::from("lambda,overall_acc\n");
    for (l, r) in rows {
        s.push_str(&format!("{l:?},{:?}\n", r.metrics.rank1));
    }
    s
}
