use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use eqrecal::data::Dataset;
use eqrecal::experiment::{
    ablate_transforms, defend_set, detection_block, predictions, prepare, run_experiment,
    section_chart, sweep_constraints, sweep_epsv, train_or_load, ExperimentConfig, Prepared,
    RunOptions,
};
use eqrecal::report::{EvalReport, Ledger};

#[derive(Parser)]
#[command(
    name = "eqrecal",
    version,
    about = "Equivariance-restoring adversarial defense: train, attack, defend, detect and evaluate"
)]
struct Cli {
    /// Experiment config (JSON). The built-in toy segmentation setup when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; rewrites every stage seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for reports, checkpoints and the ledger.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the model, or load the cached checkpoint for this config.
    Train,
    /// Build and save the attacked copies of the eval set.
    Attack,
    /// Defend one input set with one of the configured defenses.
    Defend {
        /// Defense objective: equivariance, invariance, random or none.
        #[arg(long, default_value = "equivariance")]
        defense: String,
        /// `clean` or the label of a configured attack (e.g. `pgd`).
        #[arg(long, default_value = "clean")]
        set: String,
    },
    /// Detection AUROC block and threshold calibration.
    Detect,
    /// Full attack × defense evaluation.
    Eval,
    /// Clean/robust trade-off across the defense bound ε_v.
    SweepEpsv {
        /// ε_v values in 1/255 units; the config's list when absent.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Robust metric against the fraction of dense constraints kept.
    SweepConstraints {
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
    },
    /// Single-transform defenses under equivariance and invariance.
    AblateTransforms,
    /// Print a saved report as a table and rewrite its CSV.
    Report {
        /// Directory holding report.json; `--out` when absent.
        #[arg(long)]
        from: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display()))?
        }
        None => ExperimentConfig::toy_segmentation(cli.seed.unwrap_or(0)),
    };
    if let (Some(seed), Some(_)) = (cli.seed, &cli.config) {
        cfg.reseed(seed);
    }
    Ok(cfg)
}

fn finish(report: &EvalReport, out: &Path) -> Result<()> {
    report.write(out)?;
    print_report(report);
    for a in &report.alarms {
        eprintln!("ALARM: {a}");
    }
    println!("wrote {}", out.join("report.csv").display());
    Ok(())
}

fn print_report(report: &EvalReport) {
    println!(
        "config {}  checkpoint {}",
        &report.config_hash[..12.min(report.config_hash.len())],
        &report.checkpoint_hash[..12.min(report.checkpoint_hash.len())]
    );
    let w = |f: fn(&eqrecal::report::ReportRow) -> &str| {
        report
            .rows
            .iter()
            .map(|r| f(r).chars().count())
            .max()
            .unwrap_or(0)
    };
    let (ws, wa, wd, wm) = (
        w(|r| &r.section),
        w(|r| &r.attack),
        w(|r| &r.defense),
        w(|r| &r.metric),
    );
    for r in &report.rows {
        let param = r.param.map(|p| format!("{p:.4}")).unwrap_or_default();
        println!(
            "{:ws$}  {:wa$}  {:wd$}  {:>8}  {:wm$}  {:>10.4}",
            r.section, r.attack, r.defense, param, r.metric, r.value
        );
    }
    for t in &report.timing {
        println!(
            "time  {:32} {:>10.5} s/image ({} images)",
            t.stage, t.per_image_s, t.images
        );
    }
}

fn find_set<'a>(p: &'a Prepared, name: &str) -> Result<&'a [eqrecal::Tensor]> {
    if name == "clean" {
        return Ok(&p.eval.images);
    }
    match p.attacked.iter().find(|a| a.label == name) {
        Some(a) => Ok(&a.images),
        None => bail!(
            "unknown set `{name}`; expected clean or one of: {}",
            p.attacked
                .iter()
                .map(|a| a.label.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    }
}

#[derive(serde::Serialize)]
struct DefendEntry<'a> {
    stage: &'static str,
    set: &'a str,
    defense: &'a str,
    image: usize,
    steps: usize,
    final_objective: Option<f64>,
    seconds: f64,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    eqrecal::parallel::set_threads(cli.threads);
    let cfg = load_config(&cli)?;
    let out = cli.out.clone();
    std::fs::create_dir_all(&out)?;
    if !matches!(cli.command, Command::Report { .. }) {
        cfg.save(&out.join("config.json"))?;
    }
    let opts = RunOptions::in_dir(&out);
    match &cli.command {
        Command::Train => {
            let ck = train_or_load(&cfg, &opts)?;
            println!(
                "checkpoint {} (train accuracy {:?})",
                ck.content_hash()?,
                ck.metadata.final_train_accuracy
            );
        }
        Command::Attack => {
            let p = prepare(&cfg, &opts)?;
            let mut report = p.report();
            let metric = cfg.metric_name();
            report.push(
                "main",
                "clean",
                "none",
                None,
                metric,
                p.eval.metric(&predictions(p.model(), &p.eval.images)?)?,
            );
            for a in &p.attacked {
                let v = p.eval.metric(&predictions(p.model(), &a.images)?)?;
                report.push("main", &a.label, "none", None, metric, v);
            }
            finish(&report, &out)?;
        }
        Command::Defend { defense, set } => {
            let p = prepare(&cfg, &opts)?;
            let Some(d) = cfg.defenses.iter().find(|d| d.objective.name() == defense) else {
                bail!("no `{defense}` defense in the config");
            };
            let images = find_set(&p, set)?;
            let defended = defend_set(p.model(), images, d)?;
            let mut ledger = Ledger::open(&out.join("ledger.jsonl"))?;
            for (i, (_, tr, s)) in defended.iter().enumerate() {
                ledger.record(&DefendEntry {
                    stage: "defense",
                    set,
                    defense,
                    image: i,
                    steps: tr.gradient_evals,
                    final_objective: tr.objective.last().copied(),
                    seconds: *s,
                })?;
            }
            let xs: Vec<_> = defended.into_iter().map(|r| r.0).collect();
            let data: Dataset = p.eval.with_images(xs.clone())?;
            let path = out.join("defended").join(format!("{set}-{defense}.eqck"));
            std::fs::create_dir_all(path.parent().unwrap())?;
            data.save(&path, &serde_json::json!({ "set": set, "defense": d }))?;
            let mut report = p.report();
            let metric = cfg.metric_name();
            report.push(
                "main",
                set,
                &d.label(),
                None,
                metric,
                p.eval.metric(&predictions(p.model(), &xs)?)?,
            );
            finish(&report, &out)?;
            println!("defended images in {}", path.display());
        }
        Command::Detect => {
            let p = prepare(&cfg, &opts)?;
            let Some(det) = &cfg.detector else {
                bail!("the config has no detector section");
            };
            let mut report = p.report();
            let scores = detection_block(&p, det, &mut report)?;
            if let Some(c) = &scores.calibration {
                c.save(&out.join("calibration.json"))?;
            }
            finish(&report, &out)?;
        }
        Command::Eval => {
            let report = run_experiment(&cfg, &opts)?;
            print_report(&report);
            for a in &report.alarms {
                eprintln!("ALARM: {a}");
            }
        }
        Command::SweepEpsv { values } => {
            let eps: Vec<f64> = match values {
                Some(v) => v.iter().map(|x| x / 255.0).collect(),
                None => cfg.sweeps.epsilon_v.clone(),
            };
            if eps.is_empty() {
                bail!("no ε_v values to sweep");
            }
            let p = prepare(&cfg, &opts)?;
            let report = sweep_epsv(&p, &eps)?;
            let metric = cfg.metric_name();
            std::fs::write(
                out.join("tradeoff.svg"),
                section_chart(&report, "tradeoff", metric, "epsilon_v"),
            )?;
            finish(&report, &out)?;
        }
        Command::SweepConstraints { fractions } => {
            let fr = fractions
                .clone()
                .unwrap_or_else(|| cfg.sweeps.constraint_fractions.clone());
            if fr.is_empty() {
                bail!("no constraint fractions to sweep");
            }
            let p = prepare(&cfg, &opts)?;
            let report = sweep_constraints(&p, &fr)?;
            let metric = cfg.metric_name();
            std::fs::write(
                out.join("constraints.svg"),
                section_chart(&report, "constraints", metric, "fraction"),
            )?;
            finish(&report, &out)?;
        }
        Command::AblateTransforms => {
            let p = prepare(&cfg, &opts)?;
            let report = ablate_transforms(&p, &cfg.sweeps.ablation)?;
            finish(&report, &out)?;
        }
        Command::Report { from } => {
            let dir = from.clone().unwrap_or(out);
            let report = EvalReport::load_json(&dir.join("report.json"))
                .with_context(|| format!("reading {}", dir.join("report.json").display()))?;
            std::fs::write(dir.join("report.csv"), report.to_csv())?;
            print_report(&report);
            for a in &report.alarms {
                println!("ALARM: {a}");
            }
        }
    }
    Ok(())
}
