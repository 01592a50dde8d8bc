//! Acceptance checks for the whole engine. Prints one PASS/FAIL line per
//! criterion and exits non-zero if any criterion fails.
//!
//! `ACCEPTANCE_ONLY=1,4` restricts the run to the listed criteria.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::borrow::Cow;
use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use proton::biometric::{cmc_curve, roc_eer_auc, ScoreSet};
use proton::config::RunConfig;
use proton::dataset::{ClassId, Splits};
use proton::encoder::{generate_synthetic, BnMode, Preset, SyntheticDatasetSpec};
use proton::experiment::{run, RunResult, Variant};
use proton::graph::{build_graph, sample_episode, EpisodeSpec, Role};
use proton::model::{Model, ModelConfig};
use proton::numerics::{ParamSet, Tape, Tensor};
use proton::par::Exec;
use proton::pgnn::{GraphBatch, Pgnn, PgnnConfig};
use proton::protoloss::{episodic_loss, hybrid_loss, overall_loss, LossMode, PrototypeRegistry};

use support::oracles;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

/// Training runs shared between criteria, keyed by a description.
struct Bench {
    cfg: RunConfig,
    splits: Splits,
    runs: HashMap<String, RunResult>,
}

impl Bench {
    fn new() -> Self {
        let cfg = RunConfig::preset(Preset::Tiny);
        let ds = cfg.load_dataset().expect("synthetic benchmark");
        let splits = cfg.split(&ds).expect("split");
        Bench {
            cfg,
            splits,
            runs: HashMap::new(),
        }
    }

    fn get(&mut self, variant: Variant, seed: u64, lambda: f64, mode: LossMode) -> &RunResult {
        let key = format!("{}/{seed}/{lambda}/{mode:?}", variant.name());
        if !self.runs.contains_key(&key) {
            let mut cfg = variant.apply(&self.cfg);
            cfg.seed = seed;
            cfg.train.lambda = lambda;
            cfg.train.loss_mode = mode;
            let t = Instant::now();
            let r = run(&cfg, &self.splits, Exec::Parallel).expect("training run");
            eprintln!("  [{key}] {:.1}s", t.elapsed().as_secs_f64());
            self.runs.insert(key.clone(), r);
        }
        &self.runs[&key]
    }

    fn full(&mut self, seed: u64) -> &RunResult {
        self.get(Variant::Full, seed, self.cfg.train.lambda, LossMode::Hybrid)
    }
}

// ---- 1: gradient integrity

fn episode_loss(
    model: &Model,
    ds: &proton::dataset::Dataset,
    plan: &proton::graph::EpisodePlan,
    reg: &PrototypeRegistry,
) -> (Tape, proton::numerics::Var) {
    let mut tape = Tape::new();
    let get = |c: usize, i: usize| Cow::Borrowed(&ds.class(c).impressions[i].sample);
    let fwd = model.forward_episode(&mut tape, ds, plan, BnMode::Train, &get).unwrap();
    let ep = episodic_loss(&mut tape, fwd.queries, fwd.class_protos, &fwd.targets).unwrap();
    let ov = overall_loss(
        &mut tape,
        fwd.queries,
        fwd.class_protos,
        &fwd.class_ids,
        &fwd.targets,
        reg,
    )
    .unwrap();
    let loss = hybrid_loss(&mut tape, Some(ep), Some(ov), 0.4).unwrap();
    (tape, loss)
}

fn gradient_integrity() -> Verdict {
    let start = Instant::now();
    let ds = generate_synthetic(&SyntheticDatasetSpec::images(6, 8, 32, 0.3, 11)).unwrap();
    let mut model = Model::new(ModelConfig::preset(Preset::Tiny), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    // Move the zero-initialized correction weights to a generic point.
    let ids: Vec<_> = model.params.ids().collect();
    for &id in &ids {
        if model.params.name(id).starts_with("pgnn.") {
            let n = model.params.get(id).len();
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-0.3..0.3)).collect();
            model.params.set_data(id, &v).unwrap();
        }
    }
    let plan = sample_episode(&ds, &EpisodeSpec::new(3, 2, 3), 5).unwrap();
    let mut reg = PrototypeRegistry::new(0.9).unwrap();
    for k in 0..3 {
        let v: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        reg.update(&ClassId(format!("other{k}")), &v).unwrap();
    }

    model.params.zero_grad();
    let (tape, loss) = episode_loss(&model, &ds, &plan, &reg);
    tape.backward(loss, &mut model.params).unwrap();
    let grads: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| model.params.get(id).grad().unwrap_or(&[]).to_vec())
        .collect();

    let eval_at = |model: &mut Model, id, dir: &[f64], step: f64| -> f64 {
        let base = model.params.get(id).data().to_vec();
        let moved: Vec<f64> = base.iter().zip(dir).map(|(b, d)| b + step * d).collect();
        model.params.set_data(id, &moved).unwrap();
        let (tape, loss) = episode_loss(model, &ds, &plan, &reg);
        let v = tape.scalar(loss);
        model.params.set_data(id, &base).unwrap();
        v
    };
    let fd = |model: &mut Model, id, dir: &[f64], h: f64| {
        (eval_at(model, id, dir, h) - eval_at(model, id, dir, -h)) / (2.0 * h)
    };

    let (mut checks, mut skipped, mut worst) = (0usize, 0usize, 0.0f64);
    let mut worst_name = String::new();
    let mut zero_groups = Vec::new();
    let mut unused = 0usize;
    for (k, &id) in ids.iter().enumerate() {
        let n = model.params.get(id).len();
        // A group the tape never reached has no gradient buffer.
        let g = if grads[k].is_empty() {
            vec![0.0; n]
        } else {
            grads[k].clone()
        };
        if g.iter().all(|&x| x == 0.0) {
            // Groups the loss never reads (the last layer's node update) must
            // also be flat under finite differences.
            let dir: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
            checks += 1;
            unused += 1;
            if fd(&mut model, id, &dir, 1e-5).abs() > 1e-8 {
                zero_groups.push(model.params.name(id).to_string());
            }
            continue;
        }
        let mut dirs: Vec<Vec<f64>> = vec![(0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect()];
        for _ in 0..2 {
            let mut e = vec![0.0; n];
            e[rng.random_range(0..n)] = 1.0;
            dirs.push(e);
        }
        for dir in dirs {
            checks += 1;
            let analytic: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
            let h = 1e-5;
            let f1 = fd(&mut model, id, &dir, h);
            let f2 = fd(&mut model, id, &dir, h / 2.0);
            // A ReLU or max-pool switch inside the stencil shows up as
            // disagreement between the two step sizes.
            if (f1 - f2).abs() > 1e-4 * f1.abs().max(f2.abs()).max(1e-6) {
                skipped += 1;
                continue;
            }
            let rel = (analytic - f2).abs() / analytic.abs().max(f2.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
                worst_name = model.params.name(id).to_string();
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let skip_ok = skipped * 20 <= checks;
    let pass = worst < 1e-4 && skip_ok && zero_groups.is_empty() && secs < 120.0;
    verdict(
        pass,
        format!(
            "{} groups, {checks} checks, {skipped} skipped at kinks, worst rel error {worst:.2e} ({worst_name}), {unused} groups unused by the loss, inconsistent zero gradients {zero_groups:?}, {secs:.1}s",
            ids.len()
        ),
    )
}

// ---- 2: layer-forward oracle

fn layer_oracle() -> Verdict {
    let cfg = PgnnConfig {
        layer_dims: vec![1, 1],
        projection: false,
        ..PgnnConfig::preset(Preset::Tiny)
    };
    let mut params = ParamSet::new();
    let pgnn = Pgnn::new(cfg, &mut params, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for id in params.ids().collect::<Vec<_>>() {
        let n = params.get(id).len();
        params.set_data(id, &vec![1.0; n]).unwrap();
    }
    let l = &pgnn.layers()[0];
    params.set_data(l.w_beta, &[0.0]).unwrap();
    params.set_data(l.w_gamma, &[0.0]).unwrap();
    let mut tape = Tape::inference();
    let e = tape.constant(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
    let g = build_graph(&mut tape, e, ClassId("a".into()), Role::Support).unwrap();
    let batch = GraphBatch::from_graphs(&mut tape, &[g]).unwrap();
    let out = pgnn.forward(&mut tape, &params, &batch).unwrap();
    let node = tape.value(out.nodes).data()[0];
    let proto = tape.value(out.protos).data()[0];
    // Scalar arithmetic: beta = gamma = logistic(0) = 1/2, p = 1.5, the single
    // neighbor gets attention 1.
    let relu = |x: f64| x.max(0.0);
    let (h1, h2, p) = (1.0, 2.0, 1.5);
    let node_oracle = relu(h1 + h2 + 0.5 * (p - h1));
    let proto_oracle = relu(p + 0.5 * ((h1 - p) + (h2 - p)));
    let pass = (node - 3.25).abs() < 1e-10
        && (proto - 1.5).abs() < 1e-10
        && (node - node_oracle).abs() < 1e-10
        && (proto - proto_oracle).abs() < 1e-10;
    verdict(pass, format!("node {node}, prototype {proto}"))
}

// ---- 3: metric oracles

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    let instances = 60;
    for _ in 0..instances {
        let draw = |rng: &mut ChaCha8Rng| {
            let n = rng.random_range(1..=200);
            (0..n)
                .map(|_| rng.random_range(0..30) as f64 * 0.5)
                .collect::<Vec<f64>>()
        };
        let (g, i) = (draw(&mut rng), draw(&mut rng));
        let roc = roc_eer_auc(&ScoreSet {
            genuine: g.clone(),
            imposter: i.clone(),
        })
        .unwrap();
        if roc.auc != oracles::auc(&g, &i)
            || roc.eer != oracles::eer(&g, &i)
            || roc.points != oracles::roc_points(&g, &i)
        {
            mismatches += 1;
        }
        let gallery = rng.random_range(1..=20);
        let ranks: Vec<usize> = (0..rng.random_range(1..80))
            .map(|_| rng.random_range(1..=gallery))
            .collect();
        if cmc_curve(&ranks, gallery).unwrap() != oracles::cmc(&ranks, gallery) {
            mismatches += 1;
        }
    }
    verdict(
        mismatches == 0,
        format!("{instances} ROC and {instances} CMC instances, {mismatches} mismatches"),
    )
}

// ---- 4: synthetic learning

fn synthetic_learning(bench: &mut Bench) -> Verdict {
    let t = Instant::now();
    let epochs = bench.cfg.train.epochs;
    let m = bench.full(42).metrics.clone();
    let secs = t.elapsed().as_secs_f64();
    let pass = m.episodic_acc >= 90.0 && m.eer <= 0.10 && epochs <= 20 && secs < 900.0;
    verdict(
        pass,
        format!(
            "test-class episodic {:.2}%, EER {:.4} (rank-1 {:.2}%), {epochs} epochs, {secs:.0}s",
            m.episodic_acc, m.eer, m.rank1
        ),
    )
}

// ---- 5: ablation ordering

const SEEDS: [u64; 5] = [42, 43, 44, 45, 46];

fn ablation_ordering(bench: &mut Bench) -> Verdict {
    let lambda = bench.cfg.train.lambda;
    let mut means = Vec::new();
    for v in std::iter::once(Variant::Full).chain(Variant::ABLATIONS) {
        let sum: f64 = SEEDS
            .iter()
            .map(|&s| bench.get(v, s, lambda, LossMode::Hybrid).metrics.rank1)
            .sum();
        means.push((v, sum / SEEDS.len() as f64));
    }
    let full = means[0].1;
    let of = |v: Variant| means.iter().find(|(w, _)| *w == v).unwrap().1;
    let beats_all = means[1..].iter().all(|(_, m)| full > *m);
    let mut sorted: Vec<_> = means[1..].to_vec();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1));
    let weakest: Vec<Variant> = sorted[..2].iter().map(|(v, _)| *v).collect();
    let two_weakest = weakest.contains(&Variant::SingleImpression) && weakest.contains(&Variant::NoPrototypeNode);
    let margins = full - of(Variant::SingleImpression) >= 5.0 && full - of(Variant::NoPrototypeNode) >= 5.0;
    let table: Vec<String> = means.iter().map(|(v, m)| format!("{} {m:.2}", v.name())).collect();
    verdict(
        beats_all && two_weakest && margins,
        format!(
            "mean rank-1 over {} seeds: {}; full beats all {beats_all}, single/no-prototype weakest {two_weakest}, margins >= 5pp {margins}",
            SEEDS.len(),
            table.join(", ")
        ),
    )
}

// ---- 6: loss-weight endpoints and interior

fn lambda_sweep(bench: &mut Bench) -> Verdict {
    let bytes = |r: &RunResult| {
        (
            r.outcome.best.to_bytes().unwrap(),
            r.outcome.last.to_bytes().unwrap(),
            r.outcome.report.to_csv(),
        )
    };
    let h0 = bytes(bench.get(Variant::Full, 42, 0.0, LossMode::Hybrid));
    let p0 = bytes(bench.get(Variant::Full, 42, 0.0, LossMode::EpisodicOnly));
    let h1 = bytes(bench.get(Variant::Full, 42, 1.0, LossMode::Hybrid));
    let p1 = bytes(bench.get(Variant::Full, 42, 1.0, LossMode::OverallOnly));
    let acc = |b: &mut Bench, l: f64| b.get(Variant::Full, 42, l, LossMode::Hybrid).metrics.rank1;
    let (a0, a4, a1) = (acc(bench, 0.0), acc(bench, 0.4), acc(bench, 1.0));
    let exact = h0 == p0 && h1 == p1;
    let interior = a4 >= a0.max(a1) - 2.0;
    verdict(
        exact && interior,
        format!("endpoints bit-exact {exact}; overall accuracy lambda 0: {a0:.2}%, 0.4: {a4:.2}%, 1: {a1:.2}%"),
    )
}

// ---- 7: invariant suite

fn invariant_suite() -> Verdict {
    use support::{graph, loss, metric};
    let props: Vec<(&str, fn(u32) -> Result<(), String>)> = vec![
        ("adjacency_matches_definition", graph::adjacency_matches_definition),
        (
            "cyclic_relabeling",
            graph::cyclic_relabeling_permutes_nodes_and_keeps_prototype,
        ),
        ("graph_order_in_batch", graph::graph_order_in_batch_is_irrelevant),
        ("query_isolation", graph::query_graphs_are_isolated),
        ("episodes_well_formed", graph::episodes_are_well_formed),
        (
            "attention_distribution",
            loss::attention_is_a_distribution_and_follows_neighbor_order,
        ),
        ("gates_in_unit_interval", loss::logistic_gates_stay_in_unit_interval),
        ("classify_translation", loss::classify_is_translation_invariant),
        ("episodic_loss", loss::episodic_loss_is_nonnegative_and_matches_classify),
        ("hybrid_loss", loss::hybrid_loss_is_the_convex_combination),
        ("registry_updates", loss::registry_updates_stay_between_old_and_new),
        ("overall_loss", loss::overall_loss_bounds_episodic_loss),
        ("roc_brute_force", metric::roc_matches_brute_force),
        (
            "roc_transform_invariance",
            metric::roc_invariant_under_increasing_transform,
        ),
        ("roc_shape", metric::roc_curve_shape),
        ("cmc_brute_force", metric::cmc_matches_brute_force),
        ("identify_ranks", metric::identify_ranks_match_counting_oracle),
        (
            "enrollment_partition",
            metric::enrollment_partition_is_disjoint_and_complete,
        ),
    ];
    let failed: Vec<String> = props
        .iter()
        .filter_map(|(name, f)| f(100).err().map(|e| format!("{name}: {e}")))
        .collect();
    verdict(
        failed.is_empty(),
        format!("{} properties x 100 cases, failures: {failed:?}", props.len()),
    )
}

// ---- 8: two-process determinism

fn proton(out: &Path, args: &[&str]) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_proton"))
        .args([
            "--preset",
            "tiny",
            "--synthetic",
            "12x12",
            "--epochs",
            "2",
            "--seed",
            "5",
            "--out-dir",
        ])
        .arg(out)
        .args(args)
        .stdout(std::process::Stdio::null())
        .status()
        .map_err(|e| e.to_string())?;
    if status.success() {
        Ok(())
    } else {
        Err(format!("proton {args:?} exited with {status}"))
    }
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let ck = out.join("model_best.ckpt");
        let ck = ck.to_str().unwrap();
        for args in [
            vec!["train"],
            vec!["eval", "--checkpoint", ck, "--mode", "identify"],
            vec!["eval", "--checkpoint", ck, "--mode", "verify"],
            vec!["eval", "--checkpoint", ck, "--mode", "episodic"],
        ] {
            if let Err(e) = proton(&out, &args) {
                return verdict(false, e);
            }
        }
        outputs.push(out);
    }
    let files = [
        "model_best.ckpt",
        "model_last.ckpt",
        "train_report.csv",
        "train_report.json",
        "cmc.csv",
        "identify.json",
        "roc.csv",
        "verify.json",
        "episodic.json",
    ];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| {
            std::fs::read(outputs[0].join(f)).ok() != std::fs::read(outputs[1].join(f)).ok()
                || !outputs[0].join(f).exists()
        })
        .collect();
    verdict(
        differing.is_empty(),
        format!(
            "{} artifacts compared across two process pairs, differing or missing: {differing:?}",
            files.len()
        ),
    )
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut bench: Option<Bench> = None;

    let mut results: Vec<(usize, &str, Verdict, Duration)> = Vec::new();
    let names = [
        "gradient integrity",
        "layer-forward oracle",
        "metric oracles",
        "synthetic learning",
        "ablation ordering",
        "loss-weight sweep",
        "invariant suite",
        "two-process determinism",
    ];
    for n in 1..=8 {
        if !wanted(n) {
            continue;
        }
        let t = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(|| match n {
            1 => gradient_integrity(),
            2 => layer_oracle(),
            3 => metric_oracles(),
            4 => synthetic_learning(bench.get_or_insert_with(Bench::new)),
            5 => ablation_ordering(bench.get_or_insert_with(Bench::new)),
            6 => lambda_sweep(bench.get_or_insert_with(Bench::new)),
            7 => invariant_suite(),
            _ => determinism(),
        }));
        let v = r.unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        println!(
            "criterion {n} ({}): {} | {}",
            names[n - 1],
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        results.push((n, names[n - 1], v, t.elapsed()));
    }
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!(
        "acceptance: {} of {} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
