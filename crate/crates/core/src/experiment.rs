//! Experiment orchestration: data, training, attacked sets, the
//! attack × defense table, equivariance scores, detection and the sweeps.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attack::{attack, bpda_attack, AttackConfig, AttackMethod};
use crate::data::{synth_dataset, Dataset, DatasetSpec};
use crate::defense::{
    defend_traced, sweep_epsilon_v, DefenseConfig, DefenseObjective, DefenseTrace,
    GradNormalization,
};
use crate::detector::{auroc, detection_score, Calibration, Corruption};
use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::{
    build_model, predict, train, LrSchedule, Model, ModelCheckpoint, ModelDescriptor, Optimizer,
    Task, TrainConfig,
};
use crate::objectives::{normalized_equivariance, ConstraintSample};
use crate::parallel::try_map_indexed;
use crate::report::{config_hash, svg_line_chart, EvalReport, Ledger};
use crate::seed::derive;
use crate::tensor::Tensor;
use crate::transform::{default_transform_set, TransformSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Transforms for the output-equivariance score; the default set from
    /// `seed` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub specs: Option<Vec<TransformSpec>>,
    #[serde(default = "default_quantile")]
    pub quantile: f64,
    #[serde(default, rename = "B")]
    pub b: f64,
    #[serde(default = "Corruption::suite")]
    pub corruptions: Vec<Corruption>,
    /// Held-out clean images used to fit the threshold.
    pub calibration_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_quantile() -> f64 {
    crate::detector::DEFAULT_QUANTILE
}

impl DetectorConfig {
    pub fn transforms(&self) -> Vec<TransformSpec> {
        self.specs
            .clone()
            .unwrap_or_else(|| default_transform_set(self.seed))
    }
}

/// Named single-group transform set for the ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGroup {
    pub name: String,
    pub specs: Vec<TransformSpec>,
}

impl AblationGroup {
    /// Flip, resize, small rotation and large rotation.
    pub fn standard() -> Vec<AblationGroup> {
        let g = |name: &str, spec| AblationGroup {
            name: name.into(),
            specs: vec![spec],
        };
        vec![
            g("flip", TransformSpec::Hflip),
            g("resize", TransformSpec::Resize { scale: 0.75 }),
            g("rotate_small", TransformSpec::Rotate { degrees: 10.0 }),
            g("rotate_large", TransformSpec::Rotate { degrees: 90.0 }),
        ]
    }
}

/// Parameters of the sweep subcommands. All sweeps vary the first
/// equivariance defense of the config against its first attack.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    #[serde(default)]
    pub epsilon_v: Vec<f64>,
    #[serde(default)]
    pub constraint_fractions: Vec<f64>,
    #[serde(default)]
    pub ablation: Vec<AblationGroup>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: Task,
    /// Master seed; `reseed` rewrites every stage seed from it.
    pub seed: u64,
    pub train_data: DatasetSpec,
    pub eval_data: DatasetSpec,
    pub model: ModelDescriptor,
    pub model_seed: u64,
    pub train: TrainConfig,
    pub attacks: Vec<AttackConfig>,
    /// λ_e values tried for each adaptive attack; the report keeps every
    /// value and the worst case per defense.
    #[serde(default = "default_lambdas")]
    pub adaptive_lambdas: Vec<f64>,
    /// Evaluate BPDA on the first `n` images only (it runs the defense
    /// inside every attack step).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bpda_max_images: Option<usize>,
    pub defenses: Vec<DefenseConfig>,
    /// Transforms for the equivariance measurement. When absent: the set the
    /// first equivariance defense optimizes, else the default set from `seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equivariance_specs: Option<Vec<TransformSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector: Option<DetectorConfig>,
    #[serde(default)]
    pub sweeps: SweepConfig,
}

fn default_lambdas() -> Vec<f64> {
    vec![0.0, 1.0, 10.0, 100.0, 1000.0]
}

/// Attack budget used by the toy presets, in `[0, 1]` intensity units.
pub const TOY_EPSILON: f64 = 12.0 / 255.0;

impl ExperimentConfig {
    /// The desk-scale segmentation setup: 32×32 shape scenes, a 5×5 toy
    /// segmenter, PGD at `TOY_EPSILON` and the four defenses.
    pub fn toy_segmentation(seed: u64) -> Self {
        let mut cfg = Self {
            task: Task::Segmentation,
            seed,
            train_data: DatasetSpec::segmentation(400, 32, 0),
            eval_data: DatasetSpec::segmentation(200, 32, 0),
            model: ModelDescriptor::toy_seg_with_kernel(12, crate::data::SEG_CLASSES, 5),
            model_seed: 0,
            train: TrainConfig {
                epochs: 30,
                lr: 0.003,
                optimizer: Optimizer::Adam,
                grad_clip: Some(1.0),
                schedule: LrSchedule::Cosine,
                ..TrainConfig::default()
            },
            attacks: vec![
                AttackConfig::pgd(TOY_EPSILON, 20, 0),
                AttackConfig::new(AttackMethod::Bpda, TOY_EPSILON, 20, TOY_EPSILON / 4.0, 0),
            ],
            adaptive_lambdas: default_lambdas(),
            bpda_max_images: Some(8),
            defenses: vec![
                DefenseConfig::none(),
                DefenseConfig::for_attack_budget(DefenseObjective::RandomNoise, TOY_EPSILON, 0),
                toy_defense(DefenseObjective::Invariance, TOY_EPSILON),
                toy_defense(DefenseObjective::Equivariance, TOY_EPSILON),
            ],
            equivariance_specs: None,
            detector: Some(DetectorConfig {
                specs: None,
                quantile: default_quantile(),
                b: 0.0,
                corruptions: Corruption::suite(),
                calibration_size: 100,
                seed: 0,
            }),
            sweeps: SweepConfig {
                epsilon_v: [0.0, 1.0, 2.0, 4.0, 6.0, 8.0, 10.0]
                    .iter()
                    .map(|v| v / 255.0)
                    .collect(),
                constraint_fractions: vec![0.01, 0.05, 0.1, 0.25, 0.5, 1.0],
                ablation: AblationGroup::standard(),
            },
        };
        cfg.reseed(seed);
        cfg
    }

    /// Derive every stage seed from `master`.
    pub fn reseed(&mut self, master: u64) {
        self.seed = master;
        self.train_data.seed = derive(master, "data.train", 0);
        self.eval_data.seed = derive(master, "data.eval", 0);
        self.model_seed = derive(master, "model.init", 0);
        self.train.seed = derive(master, "train", 0);
        for (i, a) in self.attacks.iter_mut().enumerate() {
            a.seed = derive(master, "attack", i as u64);
        }
        for (i, d) in self.defenses.iter_mut().enumerate() {
            d.seed = derive(master, "defense", i as u64);
        }
        if let Some(det) = self.detector.as_mut() {
            det.seed = derive(master, "detector", 0);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.task()? != self.task
            || self.train_data.task != self.task
            || self.eval_data.task != self.task
        {
            return Err(Error::config(
                "task disagrees between data, model and config",
            ));
        }
        if self.model.num_classes != self.eval_data.num_classes() {
            return Err(Error::config(format!(
                "model has {} classes, data has {}",
                self.model.num_classes,
                self.eval_data.num_classes()
            )));
        }
        if self.train_data.size == 0 || self.eval_data.size == 0 {
            return Err(Error::Empty("experiment dataset"));
        }
        if self.defenses.is_empty() {
            return Err(Error::Empty("defense list"));
        }
        self.model.validate()?;
        self.attacks.iter().try_for_each(AttackConfig::validate)?;
        self.defenses.iter().try_for_each(DefenseConfig::validate)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// `miou` for segmentation, `accuracy` for classification.
    pub fn metric_name(&self) -> &'static str {
        match self.task {
            Task::Segmentation => "miou",
            Task::Classification => "accuracy",
        }
    }

    /// Transforms of the equivariance score columns.
    pub fn equivariance_transforms(&self) -> Vec<TransformSpec> {
        if let Some(s) = &self.equivariance_specs {
            return s.clone();
        }
        match self.sweep_defense() {
            Ok(d) => d.transforms(),
            Err(_) => default_transform_set(derive(self.seed, "equivariance", 0)),
        }
    }

    /// First equivariance defense; the base of every sweep.
    pub fn sweep_defense(&self) -> Result<&DefenseConfig> {
        self.defenses
            .iter()
            .find(|d| d.objective == DefenseObjective::Equivariance)
            .ok_or_else(|| Error::config("sweeps need an equivariance defense"))
    }
}

/// Defense used by the toy presets: `ε_v = 1.5ε`, `T = 20`, per-pixel RMS
/// gradient normalization and `η = ε_v / 2`.
pub fn toy_defense(objective: DefenseObjective, epsilon: f64) -> DefenseConfig {
    let mut d = DefenseConfig::for_attack_budget(objective, epsilon, 0);
    d.normalization = GradNormalization::Rms;
    d.step_size = 0.5 * d.epsilon_v;
    d
}

/// Where cached checkpoints, attacked sets and the ledger go.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
}

impl RunOptions {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: Some(dir.into()),
        }
    }

    pub fn ledger(&self) -> Result<Ledger> {
        match &self.out_dir {
            Some(d) => Ledger::open(&d.join("ledger.jsonl")),
            None => Ok(Ledger::disabled()),
        }
    }
}

fn stage<T>(name: &str, hash: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    log::info!("stage {name}");
    f().map_err(|e| Error::Stage {
        stage: name.into(),
        config_hash: hash.into(),
        source: Box::new(e),
    })
}

fn short(hash: &str) -> &str {
    &hash[..12.min(hash.len())]
}

/// One attacked copy of the eval set.
#[derive(Clone, Debug)]
pub struct AttackedSet {
    pub label: String,
    pub config: AttackConfig,
    pub images: Vec<Tensor>,
}

/// Data, trained model and attacked sets shared by all report sections.
pub struct Prepared {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub eval: Dataset,
    pub checkpoint: ModelCheckpoint,
    pub checkpoint_hash: String,
    pub attacked: Vec<AttackedSet>,
}

impl Prepared {
    pub fn model(&self) -> &Model {
        &self.checkpoint.model
    }

    pub fn report(&self) -> EvalReport {
        EvalReport::new(self.config_hash.clone(), self.checkpoint_hash.clone())
    }

    /// First non-adaptive attacked set; the one the sweeps use.
    pub fn primary_attack(&self) -> Result<&AttackedSet> {
        self.attacked
            .iter()
            .find(|a| a.config.method != AttackMethod::Adaptive)
            .or(self.attacked.first())
            .ok_or(Error::Empty("attack list"))
    }
}

#[derive(Serialize)]
struct TrainKey<'a> {
    data: &'a DatasetSpec,
    model: &'a ModelDescriptor,
    seed: u64,
    train: &'a TrainConfig,
}

/// Train (or load the cached checkpoint for) the configured model.
pub fn train_or_load(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ModelCheckpoint> {
    let key = config_hash(&TrainKey {
        data: &cfg.train_data,
        model: &cfg.model,
        seed: cfg.model_seed,
        train: &cfg.train,
    })?;
    let path = opts
        .out_dir
        .as_ref()
        .map(|d| d.join(format!("model-{}.eqck", short(&key))));
    if let Some(p) = path.as_ref().filter(|p| p.exists()) {
        log::info!("loading checkpoint {}", p.display());
        return ModelCheckpoint::load(p);
    }
    let data = synth_dataset(&cfg.train_data)?;
    let ck = train(build_model(&cfg.model, cfg.model_seed)?, &data, &cfg.train)?;
    if let Some(p) = path {
        std::fs::create_dir_all(p.parent().unwrap_or(Path::new(".")))?;
        ck.save(&p)?;
    }
    Ok(ck)
}

/// Attack every image of `data`; image `i` uses the seed derived from
/// `(cfg.seed, i)`.
pub fn attack_set(net: &Model, data: &Dataset, cfg: &AttackConfig) -> Result<Vec<Tensor>> {
    try_map_indexed(data.len(), |i| {
        let mut c = cfg.clone();
        c.seed = derive(cfg.seed, "attack.image", i as u64);
        attack(net, &data.images[i], &data.labels[i], &c)
    })
}

fn expand_attacks(cfg: &ExperimentConfig) -> Vec<AttackConfig> {
    let mut out = Vec::new();
    for a in &cfg.attacks {
        match a.method {
            AttackMethod::Bpda => {}
            AttackMethod::Adaptive => {
                for &l in &cfg.adaptive_lambdas {
                    let mut c = a.clone();
                    c.lambda_e = l;
                    out.push(c);
                }
            }
            _ => out.push(a.clone()),
        }
    }
    out
}

/// Synthesize data, train or load the model and build the attacked sets.
pub fn prepare(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Prepared> {
    let hash = config_hash(cfg)?;
    stage("validate", &hash, || cfg.validate())?;
    let eval = stage("data", &hash, || synth_dataset(&cfg.eval_data))?;
    let checkpoint = stage("train", &hash, || train_or_load(cfg, opts))?;
    let checkpoint_hash = stage("train", &hash, || checkpoint.content_hash())?;
    let attacked = stage("attack", &hash, || {
        expand_attacks(cfg)
            .into_iter()
            .map(|a| {
                let label = a.label();
                let key = config_hash(&(&a, &checkpoint_hash, &cfg.eval_data))?;
                let path = opts.out_dir.as_ref().map(|d| {
                    d.join("attacks")
                        .join(format!("{}-{}.eqck", a.method.name(), short(&key)))
                });
                let images = match path.as_ref().filter(|p| p.exists()) {
                    Some(p) => Dataset::load(p)?.0.images,
                    None => {
                        let images = attack_set(&checkpoint.model, &eval, &a)?;
                        if let Some(p) = &path {
                            std::fs::create_dir_all(p.parent().unwrap())?;
                            let manifest = serde_json::json!({
                                "clean": cfg.eval_data,
                                "method": a.method.name(),
                                "epsilon": a.epsilon,
                                "seed": a.seed,
                                "attack": a,
                            });
                            eval.with_images(images.clone())?.save(p, &manifest)?;
                        }
                        images
                    }
                };
                Ok(AttackedSet {
                    label,
                    config: a,
                    images,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(Prepared {
        config: cfg.clone(),
        config_hash: hash,
        eval,
        checkpoint,
        checkpoint_hash,
        attacked,
    })
}

/// Defended copy of `images` with per-image traces and wall-clock seconds.
pub fn defend_set(
    net: &Model,
    images: &[Tensor],
    cfg: &DefenseConfig,
) -> Result<Vec<(Tensor, DefenseTrace, f64)>> {
    try_map_indexed(images.len(), |i| {
        let t = Instant::now();
        let (x, tr) = defend_traced(net, &images[i], &cfg.for_image(i))?;
        Ok((x, tr, t.elapsed().as_secs_f64()))
    })
}

pub fn predictions(net: &Model, images: &[Tensor]) -> Result<Vec<Vec<usize>>> {
    try_map_indexed(images.len(), |i| predict(net, &images[i]))
}

pub fn equivariance_scores(
    net: &Model,
    images: &[Tensor],
    specs: &[TransformSpec],
) -> Result<Vec<f64>> {
    try_map_indexed(images.len(), |i| {
        normalized_equivariance(net, &images[i], specs)
    })
}

/// Metric of `images` against the eval labels (first `images.len()` items).
fn metric_on(data: &Dataset, images: &[Tensor], preds: &[Vec<usize>]) -> Result<f64> {
    data.subset(0..images.len()).metric(preds)
}

#[derive(Serialize)]
struct DefenseEntry<'a> {
    stage: &'static str,
    set: &'a str,
    defense: &'a str,
    image: usize,
    steps: usize,
    final_objective: Option<f64>,
    seconds: f64,
}

#[derive(Serialize)]
struct RoutingEntry<'a> {
    stage: &'static str,
    set: &'a str,
    image: usize,
    score: f64,
    defended: bool,
    detection_s: Option<f64>,
}

/// Everything computed per (input set, defense) cell of the main table.
struct Cell {
    preds: Vec<Vec<usize>>,
    defense_s: Vec<f64>,
}

/// Full pipeline: the attack × defense table with equivariance scores,
/// adaptive worst cases, BPDA, detection, routing and timing.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<EvalReport> {
    let p = prepare(cfg, opts)?;
    let mut ledger = opts.ledger()?;
    let report = main_table(&p, &mut ledger)?;
    if let Some(dir) = &opts.out_dir {
        report.write(dir)?;
    }
    Ok(report)
}

fn main_table(p: &Prepared, ledger: &mut Ledger) -> Result<EvalReport> {
    let cfg = &p.config;
    let hash = &p.config_hash;
    let net = p.model();
    let metric = cfg.metric_name();
    let equi_specs = cfg.equivariance_transforms();
    let mut report = p.report();

    let t = Instant::now();
    let clean_preds = stage("eval", hash, || predictions(net, &p.eval.images))?;
    let inference_s = t.elapsed().as_secs_f64() / p.eval.len() as f64;
    let mut sets: Vec<(&str, &[Tensor])> = vec![("clean", &p.eval.images)];
    sets.extend(
        p.attacked
            .iter()
            .map(|a| (a.label.as_str(), a.images.as_slice())),
    );

    // cells[set][defense]
    let mut cells: Vec<Vec<Cell>> = Vec::new();
    for (set_label, images) in &sets {
        let mut row = Vec::new();
        let undefended_equi = stage("equivariance", hash, || {
            equivariance_scores(net, images, &equi_specs)
        })?;
        report.push(
            "equivariance",
            set_label,
            "none",
            None,
            "normalized_equivariance",
            metrics::mean(&undefended_equi),
        );
        for d in &cfg.defenses {
            let label = d.label();
            let cell = stage("defense", hash, || {
                if d.is_identity() {
                    let preds = if *set_label == "clean" {
                        clean_preds.clone()
                    } else {
                        predictions(net, images)?
                    };
                    return Ok(Cell {
                        preds,
                        defense_s: vec![0.0; images.len()],
                    });
                }
                let defended = defend_set(net, images, d)?;
                for (i, (_, tr, s)) in defended.iter().enumerate() {
                    ledger.record(&DefenseEntry {
                        stage: "defense",
                        set: set_label,
                        defense: &label,
                        image: i,
                        steps: tr.gradient_evals,
                        final_objective: tr.objective.last().copied(),
                        seconds: *s,
                    })?;
                }
                let xs: Vec<Tensor> = defended.iter().map(|r| r.0.clone()).collect();
                let restored = equivariance_scores(net, &xs, &equi_specs)?;
                report.push(
                    "equivariance",
                    set_label,
                    &label,
                    None,
                    "normalized_equivariance",
                    metrics::mean(&restored),
                );
                Ok(Cell {
                    preds: predictions(net, &xs)?,
                    defense_s: defended.iter().map(|r| r.2).collect(),
                })
            })?;
            report.push(
                "main",
                set_label,
                &label,
                None,
                metric,
                p.eval.metric(&cell.preds)?,
            );
            row.push(cell);
        }
        cells.push(row);
    }

    adaptive_rows(p, &mut report, &cells)?;
    stage("bpda", hash, || bpda_rows(p, &mut report, &cells))?;
    let detection_s = match &cfg.detector {
        Some(det) => stage("detect", hash, || {
            detector_rows(p, det, &sets, &cells, &clean_preds, &mut report, ledger)
        })?,
        None => None,
    };

    report.timing.push(crate::report::TimingRow {
        stage: "inference".into(),
        per_image_s: inference_s,
        images: p.eval.len(),
    });
    if let Some(s) = detection_s {
        report.timing.push(crate::report::TimingRow {
            stage: "detection".into(),
            per_image_s: s,
            images: p.eval.len(),
        });
    }
    for (k, d) in cfg.defenses.iter().enumerate() {
        if d.is_identity() {
            continue;
        }
        let all: Vec<f64> = cells
            .iter()
            .flat_map(|row| row[k].defense_s.iter().copied())
            .collect();
        report.timing.push(crate::report::TimingRow {
            stage: format!("defense:{}", d.label()),
            per_image_s: metrics::mean(&all),
            images: all.len(),
        });
    }
    check_timing_order(&mut report);
    Ok(report)
}

fn check_timing_order(report: &mut EvalReport) {
    let get = |name: &str| {
        report
            .timing
            .iter()
            .find(|t| t.stage == name)
            .map(|t| t.per_image_s)
    };
    let (Some(inf), Some(det)) = (get("inference"), get("detection")) else {
        return;
    };
    let slowest_defense = report
        .timing
        .iter()
        .filter(|t| t.stage.starts_with("defense:"))
        .map(|t| t.per_image_s)
        .fold(f64::NAN, f64::max);
    if !(det > inf) {
        report.alarm(format!(
            "timing: detection ({det:.4}s) not slower than inference ({inf:.4}s)"
        ));
    }
    if slowest_defense.is_finite() && !(slowest_defense > det) {
        report.alarm(format!(
            "timing: defense ({slowest_defense:.4}s) not slower than detection ({det:.4}s)"
        ));
    }
}

fn adaptive_rows(p: &Prepared, report: &mut EvalReport, cells: &[Vec<Cell>]) -> Result<()> {
    let adaptive: Vec<usize> = p
        .attacked
        .iter()
        .enumerate()
        .filter(|(_, a)| a.config.method == AttackMethod::Adaptive)
        .map(|(i, _)| i + 1)
        .collect();
    if adaptive.is_empty() {
        return Ok(());
    }
    for (k, d) in p.config.defenses.iter().enumerate() {
        let mut worst: Option<(f64, f64)> = None;
        for &s in &adaptive {
            let v = p.eval.metric(&cells[s][k].preds)?;
            let lambda = p.attacked[s - 1].config.lambda_e;
            report.push(
                "adaptive",
                "adaptive",
                &d.label(),
                Some(lambda),
                p.config.metric_name(),
                v,
            );
            if worst.is_none_or(|(w, _)| v < w) {
                worst = Some((v, lambda));
            }
        }
        if let Some((v, lambda)) = worst {
            report.push(
                "adaptive",
                "adaptive(worst)",
                &d.label(),
                None,
                p.config.metric_name(),
                v,
            );
            report.push(
                "adaptive",
                "adaptive(worst)",
                &d.label(),
                None,
                "lambda_e",
                lambda,
            );
        }
    }
    Ok(())
}

fn bpda_rows(p: &Prepared, report: &mut EvalReport, cells: &[Vec<Cell>]) -> Result<()> {
    let net = p.model();
    let metric = p.config.metric_name();
    for b in p
        .config
        .attacks
        .iter()
        .filter(|a| a.method == AttackMethod::Bpda)
    {
        let n = p
            .config
            .bpda_max_images
            .unwrap_or(p.eval.len())
            .min(p.eval.len());
        let data = p.eval.subset(0..n);
        // PGD with the same budget is the comparison baseline. BPDA borrows
        // its seed so both start from the same random points.
        let pgd = p
            .attacked
            .iter()
            .position(|a| a.config.method == AttackMethod::Pgd && a.config.epsilon == b.epsilon);
        let seed = pgd.map_or(b.seed, |s| p.attacked[s].config.seed);
        for (k, d) in p.config.defenses.iter().enumerate() {
            let results = try_map_indexed(n, |i| {
                let mut c = b.clone();
                c.seed = derive(seed, "attack.image", i as u64);
                let dcfg = d.for_image(i);
                let (xa, trace) = bpda_attack(net, &dcfg, &data.images[i], &data.labels[i], &c)?;
                let pred = predict(net, &defend_traced(net, &xa, &dcfg)?.0)?;
                Ok::<_, Error>((pred, trace))
            })?;
            let preds: Vec<Vec<usize>> = results.iter().map(|r| r.0.clone()).collect();
            let steps: usize = results
                .iter()
                .map(|r| r.1.attack_backward_steps + r.1.defense_backward_steps)
                .sum();
            let v = data.metric(&preds)?;
            let label = d.label();
            report.push("bpda", "bpda", &label, None, metric, v);
            report.push(
                "bpda",
                "bpda",
                &label,
                None,
                "backward_steps_per_image",
                steps as f64 / n.max(1) as f64,
            );
            if let Some(s) = pgd {
                let pgd_v = metric_on(&p.eval, &p.eval.images[..n], &cells[s + 1][k].preds[..n])?;
                report.push("bpda", &p.attacked[s].label, &label, None, metric, pgd_v);
                if v > pgd_v {
                    report.alarm(format!(
                        "bpda weaker than pgd against {label}: {v:.2} > {pgd_v:.2} on {n} images"
                    ));
                }
            }
        }
    }
    Ok(())
}

/// Detection scores of the eval set and of every attacked set, plus the
/// threshold fitted on a held-out clean set.
pub struct DetectionScores {
    pub clean: Vec<f64>,
    /// Per-image scoring time on the clean set.
    pub clean_seconds: Vec<f64>,
    pub attacked: Vec<Vec<f64>>,
    pub calibration: Option<Calibration>,
}

/// AUROC of each corruption and each attacked set against the clean eval
/// set, and the calibrated threshold.
pub fn detection_block(
    p: &Prepared,
    det: &DetectorConfig,
    report: &mut EvalReport,
) -> Result<DetectionScores> {
    let net = p.model();
    let specs = det.transforms();
    let score_all = |images: &[Tensor]| {
        try_map_indexed(images.len(), |i| {
            let t = Instant::now();
            let s = detection_score(net, &images[i], &specs)?;
            Ok::<_, Error>((s, t.elapsed().as_secs_f64()))
        })
    };
    let clean = score_all(&p.eval.images)?;
    let clean_scores: Vec<f64> = clean.iter().map(|r| r.0).collect();
    for c in &det.corruptions {
        let corrupted = try_map_indexed(p.eval.len(), |i| {
            c.apply(&p.eval.images[i], derive(det.seed, c.name(), i as u64))
        })?;
        let scores: Vec<f64> = score_all(&corrupted)?.into_iter().map(|r| r.0).collect();
        report.push(
            "detection",
            c.name(),
            "none",
            None,
            "auroc",
            auroc(&scores, &clean_scores)?,
        );
    }
    let mut attacked = Vec::new();
    for a in &p.attacked {
        let scores: Vec<f64> = score_all(&a.images)?.into_iter().map(|r| r.0).collect();
        report.push(
            "detection",
            &a.label,
            "none",
            None,
            "auroc",
            auroc(&scores, &clean_scores)?,
        );
        attacked.push(scores);
    }
    let calibration = if det.calibration_size > 0 {
        let mut calib_spec = p.config.eval_data.clone();
        calib_spec.seed = derive(det.seed, "calibration", 0);
        calib_spec.size = det.calibration_size;
        let calib = synth_dataset(&calib_spec)?;
        let scores: Vec<f64> = score_all(&calib.images)?.into_iter().map(|r| r.0).collect();
        let c = Calibration::fit(&scores, det.quantile, det.b)?;
        report.push(
            "detection",
            "calibration",
            "none",
            None,
            "threshold",
            c.threshold,
        );
        Some(c)
    } else {
        None
    };
    Ok(DetectionScores {
        clean: clean_scores,
        clean_seconds: clean.iter().map(|r| r.1).collect(),
        attacked,
        calibration,
    })
}

/// Detection block and detect-then-defend routing. Returns the mean
/// detection time per image.
fn detector_rows(
    p: &Prepared,
    det: &DetectorConfig,
    sets: &[(&str, &[Tensor])],
    cells: &[Vec<Cell>],
    clean_preds: &[Vec<usize>],
    report: &mut EvalReport,
    ledger: &mut Ledger,
) -> Result<Option<f64>> {
    let net = p.model();
    let scores = detection_block(p, det, report)?;
    let detection_s = metrics::mean(&scores.clean_seconds);
    let Some(calibration) = scores.calibration else {
        return Ok(Some(detection_s));
    };
    // Routing reuses the per-image defended predictions: the defense of
    // image i is seeded by i alone, so it matches a fresh call.
    let Some(k) = p
        .config
        .defenses
        .iter()
        .position(|d| d.objective == DefenseObjective::Equivariance && !d.is_identity())
    else {
        return Ok(Some(detection_s));
    };
    let dlabel = p.config.defenses[k].label();
    let all_scores: Vec<&[f64]> = std::iter::once(scores.clean.as_slice())
        .chain(scores.attacked.iter().map(|v| v.as_slice()))
        .collect();
    for (s, (label, _)) in sets.iter().enumerate() {
        let set_scores = all_scores[s];
        let vanilla = if s == 0 {
            clean_preds.to_vec()
        } else {
            predictions(net, sets[s].1)?
        };
        let mut routed = Vec::with_capacity(set_scores.len());
        let mut defended = 0usize;
        for (i, &score) in set_scores.iter().enumerate() {
            let d = score > calibration.threshold;
            defended += d as usize;
            routed.push(if d {
                cells[s][k].preds[i].clone()
            } else {
                vanilla[i].clone()
            });
            ledger.record(&RoutingEntry {
                stage: "routing",
                set: label,
                image: i,
                score,
                defended: d,
                detection_s: if s == 0 {
                    Some(scores.clean_seconds[i])
                } else {
                    None
                },
            })?;
        }
        report.push(
            "routed",
            label,
            &dlabel,
            None,
            p.config.metric_name(),
            p.eval.metric(&routed)?,
        );
        report.push(
            "routed",
            label,
            &dlabel,
            None,
            "defended_fraction",
            defended as f64 / set_scores.len() as f64,
        );
    }
    Ok(Some(detection_s))
}

/// Clean and robust metric of the sweep defense across `ε_v`.
pub fn sweep_epsv(p: &Prepared, epsilons: &[f64]) -> Result<EvalReport> {
    let hash = &p.config_hash;
    let base = p.config.sweep_defense()?;
    let attacked = p.primary_attack()?;
    let points = stage("sweep-epsv", hash, || {
        sweep_epsilon_v(p.model(), &p.eval, &attacked.images, epsilons, base)
    })?;
    let mut report = p.report();
    let metric = p.config.metric_name();
    for pt in points {
        report.push(
            "tradeoff",
            "clean",
            base.objective.name(),
            Some(pt.epsilon_v),
            metric,
            pt.clean_metric,
        );
        report.push(
            "tradeoff",
            &attacked.label,
            base.objective.name(),
            Some(pt.epsilon_v),
            metric,
            pt.robust_metric,
        );
    }
    Ok(report)
}

/// Robust metric of the sweep defense with a subsampled dense constraint map.
pub fn sweep_constraints(p: &Prepared, fractions: &[f64]) -> Result<EvalReport> {
    let hash = &p.config_hash;
    let base = p.config.sweep_defense()?;
    let attacked = p.primary_attack()?;
    let net = p.model();
    let k = base.transforms().len();
    let (_, _, h, w) = p.eval.images[0].dims4("sweep_constraints")?;
    let mut report = p.report();
    for (idx, &f) in fractions.iter().enumerate() {
        let mut d = base.clone();
        d.sample = ConstraintSample::fraction(f, derive(base.seed, "constraints", idx as u64));
        let v = stage("sweep-constraints", hash, || {
            d.validate()?;
            let xs: Vec<Tensor> = defend_set(net, &attacked.images, &d)?
                .into_iter()
                .map(|r| r.0)
                .collect();
            p.eval.metric(&predictions(net, &xs)?)
        })?;
        let label = base.objective.name();
        report.push(
            "constraints",
            &attacked.label,
            label,
            Some(f),
            p.config.metric_name(),
            v,
        );
        // Features are full resolution, so an upper bound on the count is
        // one constraint per kept pixel per transform.
        report.push(
            "constraints",
            &attacked.label,
            label,
            Some(f),
            "num_constraints",
            (k * d.sample.kept(h * w)) as f64,
        );
    }
    Ok(report)
}

/// Single-transform defenses under the equivariance and invariance
/// objectives.
pub fn ablate_transforms(p: &Prepared, groups: &[AblationGroup]) -> Result<EvalReport> {
    if groups.is_empty() || groups.iter().any(|g| g.specs.is_empty()) {
        return Err(Error::Empty("ablation transform list"));
    }
    let hash = &p.config_hash;
    let base = p.config.sweep_defense()?;
    let attacked = p.primary_attack()?;
    let net = p.model();
    let mut report = p.report();
    for g in groups {
        for obj in [DefenseObjective::Equivariance, DefenseObjective::Invariance] {
            let mut d = base.clone();
            d.objective = obj;
            d.specs = Some(g.specs.clone());
            let v = stage("ablate-transforms", hash, || {
                d.validate()?;
                let xs: Vec<Tensor> = defend_set(net, &attacked.images, &d)?
                    .into_iter()
                    .map(|r| r.0)
                    .collect();
                p.eval.metric(&predictions(net, &xs)?)
            })?;
            report.push(
                "ablation",
                &attacked.label,
                &format!("{}[{}]", obj.name(), g.name),
                None,
                p.config.metric_name(),
                v,
            );
        }
    }
    Ok(report)
}

/// `(param, value)` series of one section/attack/metric, in row order.
pub fn series(report: &EvalReport, section: &str, attack: &str, metric: &str) -> Vec<(f64, f64)> {
    report
        .rows
        .iter()
        .filter(|r| r.section == section && r.attack == attack && r.metric == metric)
        .filter_map(|r| r.param.map(|p| (p, r.value)))
        .collect()
}

/// SVG line chart of every attack series in `section` for `metric`.
pub fn section_chart(report: &EvalReport, section: &str, metric: &str, x_label: &str) -> String {
    let mut attacks: Vec<&str> = Vec::new();
    for r in report
        .rows
        .iter()
        .filter(|r| r.section == section && r.metric == metric)
    {
        if !attacks.contains(&r.attack.as_str()) {
            attacks.push(&r.attack);
        }
    }
    let lines: Vec<(String, Vec<(f64, f64)>)> = attacks
        .iter()
        .map(|a| (a.to_string(), series(report, section, a, metric)))
        .collect();
    svg_line_chart(section, x_label, metric, &lines)
}
