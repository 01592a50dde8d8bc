mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use proton::checkpoint::{write_atomic, Checkpoint};
use proton::config::RunConfig;
use proton::dataset::Dataset;
use proton::encoder::{generate_synthetic, write_embeddings, write_image_dir, EmbeddingTable, Preset, SyntheticKind};
use proton::experiment::{self, Variant, DEFAULT_LAMBDAS};
use proton::par::Exec;
use proton::trainer::{eval_spec, evaluate_episodic};
use proton::Error;

use manifest::Manifest;

/// Few-shot recognition with multi-impression class graphs.
///
/// Exit codes: 0 success, 1 other failure, 2 invalid configuration,
/// 3 dataset error, 4 non-finite training loss.
#[derive(Parser, Debug)]
#[command(name = "proton", version)]
struct Cli {
    /// TOML run configuration layered over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Use a generated dataset of C classes with I impressions each.
    #[arg(long, global = true, value_name = "CxI")]
    synthetic: Option<String>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Run data-parallel loops on the calling thread only.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Paper,
    Tiny,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EvalMode {
    Episodic,
    Identify,
    Verify,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DataFormat {
    Images,
    Embeddings,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train and write the best and last checkpoints plus the epoch report.
    Train,
    /// Score a checkpoint on the test classes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: EvalMode,
    },
    /// Train the baseline and each variant under one seed and tabulate them.
    Ablate {
        /// single_impression, no_cross_graph, query_alignment or no_prototype_node;
        /// repeatable, all four when omitted.
        #[arg(long = "variant")]
        variants: Vec<String>,
    },
    /// Overall accuracy as a function of the hybrid loss weight.
    SweepLambda {
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
    },
    /// Write the configured synthetic dataset to disk.
    GenSynthetic {
        #[arg(long, value_enum, default_value = "images")]
        format: DataFormat,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::WidthMismatch { .. } => 2,
        Error::Dataset(_) | Error::Format { .. } | Error::InsufficientClasses { .. } | Error::Image(_) => 3,
        Error::NonFinite(_) => 4,
        _ => 1,
    }
}

fn parse_synthetic(s: &str) -> proton::Result<(usize, usize)> {
    let bad = || Error::Config(format!("--synthetic expects CxI (e.g. 20x30), got {s:?}"));
    let (c, i) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((
        c.trim().parse().map_err(|_| bad())?,
        i.trim().parse().map_err(|_| bad())?,
    ))
}

fn resolve_config(cli: &Cli) -> proton::Result<RunConfig> {
    let preset = cli.preset.map(|p| match p {
        PresetArg::Paper => Preset::Paper,
        PresetArg::Tiny => Preset::Tiny,
    });
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path, preset)?,
        None => RunConfig::preset(preset.unwrap_or(Preset::Paper)),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(e) = cli.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = &cli.synthetic {
        let (c, i) = parse_synthetic(s)?;
        let base = RunConfig::preset(cfg.preset)
            .data
            .synthetic
            .expect("presets carry a synthetic spec");
        let mut spec = cfg.data.synthetic.take().unwrap_or(base);
        spec.num_classes = c;
        spec.impressions_per_class = i;
        cfg.data.path = None;
        cfg.data.synthetic = Some(spec);
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    out: &'a Path,
    exec: Exec,
}

impl Ctx<'_> {
    fn write(&self, m: &mut Manifest, name: &str, bytes: &[u8]) -> proton::Result<()> {
        write_atomic(&self.out.join(name), bytes)?;
        m.outputs.push(name.to_string());
        Ok(())
    }

    fn dataset(&self, m: &mut Manifest) -> proton::Result<(Dataset, proton::dataset::Splits)> {
        m.phase("load_data", || {
            let ds = self.cfg.load_dataset()?;
            let splits = self.cfg.split(&ds)?;
            Ok((ds, splits))
        })
    }
}

fn train(ctx: &Ctx, m: &mut Manifest) -> proton::Result<()> {
    let (_, splits) = ctx.dataset(m)?;
    let model_cfg = ctx.cfg.model_for(&splits.train)?;
    let out = m.phase("train", || {
        proton::trainer::train(
            &model_cfg,
            &splits.train,
            splits.val.as_ref(),
            &ctx.cfg.train_config(),
            ctx.exec,
        )
    })?;
    ctx.write(m, "model_best.ckpt", &out.best.to_bytes()?)?;
    ctx.write(m, "model_last.ckpt", &out.last.to_bytes()?)?;
    ctx.write(m, "train_report.csv", out.report.to_csv().as_bytes())?;
    ctx.write(
        m,
        "train_report.json",
        serde_json::to_string_pretty(&out.report)?.as_bytes(),
    )?;
    let b = out.report.best();
    println!(
        "trained {} epochs; best epoch {} (episodic {:.2}%, overall {:.2}%)",
        out.report.epochs.len(),
        b.epoch,
        b.episodic_acc,
        b.overall_acc
    );
    Ok(())
}

fn eval(ctx: &Ctx, m: &mut Manifest, checkpoint: &Path, mode: EvalMode) -> proton::Result<()> {
    let (_, splits) = ctx.dataset(m)?;
    let test = splits
        .test
        .as_ref()
        .ok_or_else(|| Error::Dataset("the split left no test classes".into()))?;
    let expected = ctx.cfg.model_for(test)?;
    let ck = Checkpoint::load_matching(checkpoint, &expected)?;
    let model = &ck.model;
    let eval_cfg = ctx.cfg.eval_config();
    let emb = m.phase("embed", || model.embed_dataset(test, ctx.exec))?;
    match mode {
        EvalMode::Episodic => {
            let spec = eval_spec(&ctx.cfg.train.episode, emb.num_classes())?;
            let acc = m.phase("episodic", || {
                evaluate_episodic(model, &emb, &spec, eval_cfg.episodes, eval_cfg.seed, ctx.exec)
            })?;
            let summary = json!({ "episodic_acc": acc, "episodes": eval_cfg.episodes, "ways": spec.ways });
            ctx.write(m, "episodic.json", serde_json::to_string_pretty(&summary)?.as_bytes())?;
            println!("episodic accuracy {acc:.2}%");
        }
        EvalMode::Identify => {
            let ident = m.phase("identify", || {
                proton::biometric::identification(model, &emb, &eval_cfg, ctx.exec)
            })?;
            let mut csv = String::from("rank,accuracy\n");
            for (k, a) in ident.cmc.iter().enumerate() {
                csv.push_str(&format!("{},{a:?}\n", k + 1));
            }
            ctx.write(m, "cmc.csv", csv.as_bytes())?;
            let summary = json!({ "rank1": ident.rank_k(1), "rank5": ident.rank_k(5) });
            ctx.write(m, "identify.json", serde_json::to_string_pretty(&summary)?.as_bytes())?;
            println!(
                "rank-1 {:.2}%  rank-5 {:.2}%",
                100.0 * ident.rank_k(1),
                100.0 * ident.rank_k(5)
            );
        }
        EvalMode::Verify => {
            let roc = m.phase("verify", || {
                let scores = proton::biometric::verification_scores(model, &emb, &eval_cfg, ctx.exec)?;
                proton::biometric::roc_eer_auc(&scores)
            })?;
            let mut csv = String::from("far,tpr\n");
            for (far, tpr) in &roc.points {
                csv.push_str(&format!("{far:?},{tpr:?}\n"));
            }
            ctx.write(m, "roc.csv", csv.as_bytes())?;
            let summary = json!({ "eer": roc.eer, "auc": roc.auc });
            ctx.write(m, "verify.json", serde_json::to_string_pretty(&summary)?.as_bytes())?;
            println!("EER {:.4}  AUC {:.4}", roc.eer, roc.auc);
        }
    }
    Ok(())
}

fn ablate(ctx: &Ctx, m: &mut Manifest, names: &[String]) -> proton::Result<()> {
    let variants = if names.is_empty() {
        Variant::ABLATIONS.to_vec()
    } else {
        names
            .iter()
            .map(|n| Variant::parse(n))
            .collect::<proton::Result<Vec<_>>>()?
    };
    if variants.contains(&Variant::Full) {
        return Err(Error::Config(
            "the baseline is always included; list only variants".into(),
        ));
    }
    let (_, splits) = ctx.dataset(m)?;
    let rows = m.phase("ablate", || experiment::ablate(ctx.cfg, &splits, &variants, ctx.exec))?;
    let table = experiment::ablation_table(&rows);
    ctx.write(m, "ablation.csv", table.as_bytes())?;
    let detail: Vec<_> = rows
        .iter()
        .map(|(v, r)| json!({ "variant": v.name(), "metrics": r }))
        .collect();
    ctx.write(m, "ablation.json", serde_json::to_string_pretty(&detail)?.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn sweep(ctx: &Ctx, m: &mut Manifest, lambdas: Option<&[f64]>) -> proton::Result<()> {
    let lambdas = lambdas.unwrap_or(&DEFAULT_LAMBDAS);
    let (_, splits) = ctx.dataset(m)?;
    let rows = m.phase("sweep", || {
        experiment::sweep_lambda(ctx.cfg, &splits, lambdas, ctx.exec)
    })?;
    let csv = experiment::sweep_csv(&rows);
    ctx.write(m, "lambda_sweep.csv", csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn gen_synthetic(ctx: &Ctx, m: &mut Manifest, format: DataFormat) -> proton::Result<()> {
    let mut spec = ctx
        .cfg
        .data
        .synthetic
        .clone()
        .ok_or_else(|| Error::Config("no synthetic spec configured".into()))?;
    spec.kind = match (format, spec.kind) {
        (DataFormat::Images, SyntheticKind::Images { hw }) => SyntheticKind::Images { hw },
        (DataFormat::Images, SyntheticKind::Embeddings { .. }) => SyntheticKind::Images {
            hw: ctx.cfg.model.encoder.as_ref().map_or(32, |e| e.input_hw),
        },
        (DataFormat::Embeddings, SyntheticKind::Embeddings { dim }) => SyntheticKind::Embeddings { dim },
        (DataFormat::Embeddings, SyntheticKind::Images { .. }) => SyntheticKind::Embeddings {
            dim: ctx.cfg.model.pgnn.input_dim(),
        },
    };
    let ds = m.phase("generate", || generate_synthetic(&spec))?;
    match format {
        DataFormat::Images => {
            let dir = ctx.out.join("dataset");
            if dir.exists() {
                return Err(Error::Config(format!("{} already exists", dir.display())));
            }
            let tmp = ctx.out.join("dataset.partial");
            if tmp.exists() {
                std::fs::remove_dir_all(&tmp)?;
            }
            write_image_dir(&ds, &tmp)?;
            std::fs::rename(&tmp, &dir)?;
            m.outputs.push("dataset/".into());
        }
        DataFormat::Embeddings => {
            let path = ctx.out.join("embeddings.csv");
            write_embeddings(&EmbeddingTable::from_dataset(&ds)?, &path)?;
            m.outputs.push("embeddings.csv".into());
        }
    }
    println!(
        "wrote {} classes x {} impressions",
        spec.num_classes, spec.impressions_per_class
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let cfg = match resolve_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    if let Err(e) = std::fs::create_dir_all(&cli.out_dir) {
        eprintln!("error: cannot create {}: {e}", cli.out_dir.display());
        return ExitCode::from(1);
    }
    let ctx = Ctx {
        cfg: &cfg,
        out: &cli.out_dir,
        exec: if cli.sequential {
            Exec::Sequential
        } else {
            Exec::Parallel
        },
    };
    let command = format!("{:?}", cli.cmd);
    let mut m = Manifest::new(&command, &cfg);
    let result = match &cli.cmd {
        Cmd::Train => train(&ctx, &mut m),
        Cmd::Eval { checkpoint, mode } => eval(&ctx, &mut m, checkpoint, *mode),
        Cmd::Ablate { variants } => ablate(&ctx, &mut m, variants),
        Cmd::SweepLambda { lambdas } => sweep(&ctx, &mut m, lambdas.as_deref()),
        Cmd::GenSynthetic { format } => gen_synthetic(&ctx, &mut m, *format),
    };
    let code = match &result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(e)
        }
    };
    if let Err(e) = m.finish(&cli.out_dir, result.as_ref().err()) {
        eprintln!("error: writing run manifest: {e}");
        return ExitCode::from(if code == 0 { 1 } else { code });
    }
    ExitCode::from(code)
}
