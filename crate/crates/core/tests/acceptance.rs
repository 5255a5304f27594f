//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! `ACCEPTANCE_ONLY=3,4` runs a subset. Trained models and attacked sets are
//! cached under the cargo target tmp dir, so only the first run trains.

#[path = "support/gradient_cases.rs"]
mod gradient_cases;

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Instant;

use eqrecal::attack::{attack, bpda_attack, AttackConfig, AttackMethod};
use eqrecal::defense::{defend_traced, DefenseConfig, DefenseObjective, DefenseTrace};
use eqrecal::detector::{auroc, detection_score, simulate_error_estimate, Corruption};
use eqrecal::experiment::{
    ablate_transforms, equivariance_scores, predictions, prepare, run_experiment,
    sweep_constraints, sweep_epsv, DetectorConfig, ExperimentConfig, Prepared, RunOptions,
    TOY_EPSILON,
};
use eqrecal::metrics::{mean, sign_test, spearman};
use eqrecal::parallel::try_map_indexed;
use eqrecal::report::EvalReport;
use eqrecal::seed::derive;
use eqrecal::{Error, Result, Tensor};

const SEEDS: [u64; 3] = [0, 1, 2];
/// Images per seed for the robustness table (3 reuses the first seed with more).
const N_ROBUST: usize = 48;
const N_EQUIVARIANCE: usize = 100;
const N_SWEEP: usize = 16;
const N_ABLATION: usize = 32;
/// Pixel values live in [0, 1]; one ulp at the top of that range.
const ULP: f64 = f64::EPSILON;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

fn cache_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn seed_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::toy_segmentation(seed);
    cfg.eval_data.size = if seed == SEEDS[0] {
        N_EQUIVARIANCE
    } else {
        N_ROBUST
    };
    cfg
}

/// First `n` images of a prepared run, with matching attacked sets.
fn head(p: &Prepared, n: usize) -> Prepared {
    let mut config = p.config.clone();
    config.eval_data.size = n;
    Prepared {
        config,
        config_hash: p.config_hash.clone(),
        eval: p.eval.subset(0..n),
        checkpoint: p.checkpoint.clone(),
        checkpoint_hash: p.checkpoint_hash.clone(),
        attacked: p
            .attacked
            .iter()
            .map(|a| {
                let mut a = a.clone();
                a.images.truncate(n);
                a
            })
            .collect(),
    }
}

type Defended = Vec<(Tensor, DefenseTrace)>;

struct Ctx {
    runs: HashMap<u64, Prepared>,
    defended: HashMap<(u64, String, &'static str), Defended>,
}

impl Ctx {
    fn run(&mut self, seed: u64) -> Result<&Prepared> {
        if !self.runs.contains_key(&seed) {
            let t = Instant::now();
            let cfg = seed_config(seed);
            let p = prepare(
                &cfg,
                &RunOptions::in_dir(cache_dir().join(format!("seed{seed}"))),
            )?;
            println!(
                "  (seed {seed}: model and attacks ready in {:.0} s)",
                t.elapsed().as_secs_f64()
            );
            self.runs.insert(seed, p);
        }
        Ok(&self.runs[&seed])
    }

    fn defense(&mut self, seed: u64, objective: DefenseObjective) -> Result<DefenseConfig> {
        let p = self.run(seed)?;
        p.config
            .defenses
            .iter()
            .find(|d| d.objective == objective)
            .cloned()
            .ok_or_else(|| Error::Config("missing defense".into()))
    }

    /// Defended copies of the first `n` images of `set` ("clean" or "pgd").
    /// Image `i` uses the same per-image defense seed as the harness, so
    /// prefixes computed earlier are reused.
    fn defended(
        &mut self,
        seed: u64,
        d: &DefenseConfig,
        set: &'static str,
        n: usize,
    ) -> Result<&[(Tensor, DefenseTrace)]> {
        let key = (seed, d.label(), set);
        let have = self.defended.get(&key).map_or(0, Vec::len);
        if have < n {
            let p = self.run(seed)?;
            let images = set_images(p, set)?;
            let net = p.model();
            let fresh = try_map_indexed(n - have, |k| {
                let i = have + k;
                defend_traced(net, &images[i], &d.for_image(i))
            })?;
            self.defended.entry(key.clone()).or_default().extend(fresh);
        }
        Ok(&self.defended[&key][..n])
    }

    fn defended_metric(
        &mut self,
        seed: u64,
        objective: DefenseObjective,
        set: &'static str,
        n: usize,
    ) -> Result<f64> {
        let d = self.defense(seed, objective)?;
        let xs: Vec<Tensor> = self
            .defended(seed, &d, set, n)?
            .iter()
            .map(|r| r.0.clone())
            .collect();
        let p = self.run(seed)?;
        p.eval.subset(0..n).metric(&predictions(p.model(), &xs)?)
    }
}

fn set_images<'a>(p: &'a Prepared, set: &str) -> Result<&'a [Tensor]> {
    if set == "clean" {
        return Ok(&p.eval.images);
    }
    p.attacked
        .iter()
        .find(|a| a.label == set)
        .map(|a| a.images.as_slice())
        .ok_or_else(|| Error::Config(format!("no attacked set {set}")))
}

fn undefended_metric(p: &Prepared, set: &str, n: usize) -> Result<f64> {
    let images = &set_images(p, set)?[..n];
    p.eval.subset(0..n).metric(&predictions(p.model(), images)?)
}

fn gradient_oracle(_: &mut Ctx) -> Result<Outcome> {
    let mut worst_op = (0.0f64, "");
    for c in gradient_cases::op_cases() {
        let e = gradient_cases::check_op(&c, 12);
        if e > worst_op.0 {
            worst_op = (e, c.name);
        }
    }
    let net = gradient_cases::objective_model();
    let mut worst_obj = (0.0f64, "");
    for (name, f) in gradient_cases::objective_cases() {
        let e = gradient_cases::check_objective(&net, &f, 12);
        if e > worst_obj.0 {
            worst_obj = (e, name);
        }
    }
    outcome(
        worst_op.0 < 1e-4 && worst_obj.0 < 1e-3,
        format!(
            "worst op rel err {:.1e} ({}), worst objective rel err {:.1e} ({})",
            worst_op.0, worst_op.1, worst_obj.0, worst_obj.1
        ),
    )
}

fn ball_invariants(ctx: &mut Ctx) -> Result<Outcome> {
    let n = 16;
    let mut attacked_images = 0usize;
    let mut attack_violations = 0usize;
    let mut worst_attack = f64::NEG_INFINITY;
    for &seed in &SEEDS {
        let p = ctx.run(seed)?;
        for a in &p.attacked {
            for (xa, x) in a.images.iter().zip(&p.eval.images) {
                let excess = xa.max_abs_diff(x) - a.config.epsilon;
                worst_attack = worst_attack.max(excess);
                attack_violations += usize::from(excess > ULP);
                attacked_images += 1;
            }
        }
    }
    // Every other attack method on a handful of images.
    let p = ctx.run(SEEDS[0])?;
    let net = p.model();
    for method in [
        AttackMethod::Fgsm,
        AttackMethod::Ifgsm,
        AttackMethod::Mim,
        AttackMethod::Adaptive,
    ] {
        let mut c = AttackConfig::new(method, TOY_EPSILON, 10, TOY_EPSILON / 4.0, 5);
        c.lambda_e = 10.0;
        let out = try_map_indexed(4, |i| {
            attack(net, &p.eval.images[i], &p.eval.labels[i], &c)
        })?;
        for (xa, x) in out.iter().zip(&p.eval.images) {
            let excess = xa.max_abs_diff(x) - TOY_EPSILON;
            worst_attack = worst_attack.max(excess);
            attack_violations += usize::from(excess > ULP);
            attacked_images += 1;
        }
    }
    let mut steps = 0usize;
    let mut defense_violations = 0usize;
    let mut worst_defense = f64::NEG_INFINITY;
    for objective in [DefenseObjective::Equivariance, DefenseObjective::Invariance] {
        let d = ctx.defense(SEEDS[0], objective)?;
        for set in ["clean", "pgd"] {
            let inputs: Vec<Tensor> = set_images(ctx.run(SEEDS[0])?, set)?[..n].to_vec();
            for ((out, trace), x_in) in ctx.defended(SEEDS[0], &d, set, n)?.iter().zip(&inputs) {
                let mut devs = trace.max_deviation.clone();
                devs.push(out.max_abs_diff(x_in));
                for dev in devs {
                    let excess = dev - d.epsilon_v;
                    worst_defense = worst_defense.max(excess);
                    defense_violations += usize::from(excess > ULP);
                    steps += 1;
                }
            }
        }
    }
    outcome(
        attack_violations == 0 && defense_violations == 0,
        format!(
            "attack: {attack_violations}/{attacked_images} images over ε+ulp (max excess {worst_attack:.1e}); \
             defense: {defense_violations}/{steps} steps over ε_v+ulp (max excess {worst_defense:.1e})"
        ),
    )
}

fn equivariance_ordering(ctx: &mut Ctx) -> Result<Outcome> {
    let n = N_EQUIVARIANCE;
    let seed = SEEDS[0];
    let d = ctx.defense(seed, DefenseObjective::Equivariance)?;
    let restored: Vec<Tensor> = ctx
        .defended(seed, &d, "pgd", n)?
        .iter()
        .map(|r| r.0.clone())
        .collect();
    let p = ctx.run(seed)?;
    let specs = p.config.equivariance_transforms();
    let clean = equivariance_scores(p.model(), &p.eval.images[..n], &specs)?;
    let attacked = equivariance_scores(p.model(), &set_images(p, "pgd")?[..n], &specs)?;
    let restored = equivariance_scores(p.model(), &restored, &specs)?;
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>();
    let (ca, ra) = (diff(&clean, &attacked), diff(&restored, &attacked));
    let (gap_c, gap_r) = (mean(&ca), mean(&ra));
    let (p_c, p_r) = (sign_test(&ca), sign_test(&ra));
    outcome(
        gap_c >= 0.05 && gap_r >= 0.05 && p_c < 0.01 && p_r < 0.01,
        format!(
            "{n} images: clean {:.4}, attacked {:.4}, restored {:.4}; gaps {gap_c:.4} (p={p_c:.1e}), {gap_r:.4} (p={p_r:.1e})",
            mean(&clean),
            mean(&attacked),
            mean(&restored)
        ),
    )
}

fn robustness_recovery(ctx: &mut Ctx) -> Result<Outcome> {
    let n = N_ROBUST;
    let mut rows = Vec::new();
    for &seed in &SEEDS {
        let p = ctx.run(seed)?;
        let clean = undefended_metric(p, "clean", n)?;
        let pgd = undefended_metric(p, "pgd", n)?;
        let random = ctx.defended_metric(seed, DefenseObjective::RandomNoise, "pgd", n)?;
        let inv = ctx.defended_metric(seed, DefenseObjective::Invariance, "pgd", n)?;
        let equi = ctx.defended_metric(seed, DefenseObjective::Equivariance, "pgd", n)?;
        println!(
            "  seed {seed}: clean {clean:.2}  pgd {pgd:.2}  random {random:.2}  invariance {inv:.2}  equivariance {equi:.2}"
        );
        rows.push([clean, pgd, random, inv, equi]);
    }
    let avg = |k: usize| mean(&rows.iter().map(|r| r[k]).collect::<Vec<_>>());
    let (clean, pgd, random, inv, equi) = (avg(0), avg(1), avg(2), avg(3), avg(4));
    let margin = equi - random.max(inv);
    outcome(
        pgd < 0.3 * clean && margin >= 3.0,
        format!(
            "3-seed mean over {n} images: clean {clean:.2}, pgd {pgd:.2} ({:.0}% of clean), random {random:.2}, \
             invariance {inv:.2}, equivariance {equi:.2} (margin {margin:.2})",
            100.0 * pgd / clean
        ),
    )
}

fn constraint_monotonicity(ctx: &mut Ctx) -> Result<Outcome> {
    let fractions = [0.01, 0.05, 0.1, 0.25, 0.5, 1.0];
    let mut counts = Vec::new();
    let mut per_fraction = vec![0.0; fractions.len()];
    let mut per_seed = Vec::new();
    for &seed in &SEEDS {
        let p = head(ctx.run(seed)?, N_SWEEP);
        let r = sweep_constraints(&p, &fractions)?;
        let v = series_values(&r, "constraints", "miou");
        counts = series_values(&r, "constraints", "num_constraints");
        println!("  seed {seed}: {}", fmt_series(&fractions, &v));
        per_seed.push(spearman(&counts, &v)?);
        for (m, x) in per_fraction.iter_mut().zip(&v) {
            *m += x / SEEDS.len() as f64;
        }
    }
    // Rank the seed-averaged curve; pooling raw points would rank model
    // offsets between seeds instead of the constraint count.
    let rho = spearman(&counts, &per_fraction)?;
    outcome(
        rho > 0.7,
        format!(
            "Spearman ρ = {rho:.3} on the {}-seed mean curve {} (per seed {})",
            SEEDS.len(),
            fmt_series(&fractions, &per_fraction),
            per_seed.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn series_values(r: &EvalReport, section: &str, metric: &str) -> Vec<f64> {
    r.rows
        .iter()
        .filter(|row| row.section == section && row.metric == metric && row.attack != "clean")
        .map(|row| row.value)
        .collect()
}

fn fmt_series(xs: &[f64], ys: &[f64]) -> String {
    xs.iter()
        .zip(ys)
        .map(|(x, y)| format!("{x}:{y:.2}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn tradeoff(ctx: &mut Ctx) -> Result<Outcome> {
    let steps = [0.0, 1.0, 2.0, 4.0, 6.0, 8.0, 10.0];
    let eps: Vec<f64> = steps.iter().map(|v| v / 255.0).collect();
    let mut clean = vec![0.0; eps.len()];
    let mut robust = vec![0.0; eps.len()];
    let mut zero_row_exact = true;
    for &seed in &SEEDS {
        let p = head(ctx.run(seed)?, N_SWEEP);
        let r = sweep_epsv(&p, &eps)?;
        let get = |attack: &str| -> Vec<f64> {
            r.rows
                .iter()
                .filter(|row| row.section == "tradeoff" && row.attack == attack)
                .map(|row| row.value)
                .collect()
        };
        let (c, rb) = (get("clean"), get("pgd"));
        // ε_v = 0 must reproduce the undefended predictions exactly.
        let net = p.model();
        let d0 = {
            let mut d = p.config.sweep_defense()?.clone();
            d.epsilon_v = 0.0;
            d.step_size = 0.0;
            d
        };
        for set in ["clean", "pgd"] {
            let images = set_images(&p, set)?;
            let vanilla = predictions(net, images)?;
            let zero = try_map_indexed(images.len(), |i| {
                let (x, _) = defend_traced(net, &images[i], &d0.for_image(i))?;
                Ok::<_, Error>(x == images[i])
            })?;
            let metric0 = if set == "clean" { c[0] } else { rb[0] };
            zero_row_exact &= zero.iter().all(|&b| b)
                && metric0.to_bits() == p.eval.metric(&vanilla)?.to_bits();
        }
        println!(
            "  seed {seed}: clean {}\n          robust {}",
            fmt_series(&steps, &c),
            fmt_series(&steps, &rb)
        );
        for k in 0..eps.len() {
            clean[k] += c[k] / SEEDS.len() as f64;
            robust[k] += rb[k] / SEEDS.len() as f64;
        }
    }
    let worst_drop = robust.windows(2).map(|w| w[0] - w[1]).fold(f64::MIN, f64::max);
    let worst_rise = clean.windows(2).map(|w| w[1] - w[0]).fold(f64::MIN, f64::max);
    outcome(
        worst_drop <= 1.0 && worst_rise <= 1.0 && zero_row_exact,
        format!(
            "3-seed mean: robust {} | clean {} | largest robust drop {worst_drop:.2}, largest clean rise {worst_rise:.2}; \
             ε_v=0 bit-equal to vanilla: {zero_row_exact}",
            fmt_series(&steps, &robust),
            fmt_series(&steps, &clean)
        ),
    )
}

fn ablation(ctx: &mut Ctx) -> Result<Outcome> {
    let mut sums: HashMap<String, f64> = HashMap::new();
    for &seed in &SEEDS {
        let p = head(ctx.run(seed)?, N_ABLATION);
        let r = ablate_transforms(&p, &p.config.sweeps.ablation)?;
        let mut line = Vec::new();
        for row in r.rows.iter().filter(|row| row.section == "ablation") {
            *sums.entry(row.defense.clone()).or_default() += row.value / SEEDS.len() as f64;
            line.push(format!("{} {:.2}", row.defense, row.value));
        }
        println!("  seed {seed}: {}", line.join(", "));
    }
    let v = |k: &str| sums.get(k).copied().unwrap_or(f64::NAN);
    let flip = v("equivariance[flip]") > v("invariance[flip]");
    let resize = v("equivariance[resize]") > v("invariance[resize]");
    let rot = v("equivariance[rotate_large]") < v("equivariance[rotate_small]");
    outcome(
        flip && resize && rot,
        format!(
            "3-seed mean: flip equi {:.2} vs inv {:.2}; resize equi {:.2} vs inv {:.2}; \
             equi rot90 {:.2} vs rot10 {:.2}",
            v("equivariance[flip]"),
            v("invariance[flip]"),
            v("equivariance[resize]"),
            v("invariance[resize]"),
            v("equivariance[rotate_large]"),
            v("equivariance[rotate_small]")
        ),
    )
}

/// `E|N(0,1)|` by stratified sampling: one uniform per equal-probability
/// stratum, mapped through the normal inverse CDF.
fn mean_abs_normal(draws: usize, seed: u64) -> f64 {
    use rand::Rng;
    use statrs::distribution::{ContinuousCDF, Normal};
    let normal = Normal::standard();
    let mut rng = eqrecal::seed::rng(seed);
    let mut sum = 0.0;
    for k in 0..draws {
        let u = (k as f64 + rng.random::<f64>()) / draws as f64;
        sum += normal.inverse_cdf(u).abs();
    }
    sum / draws as f64
}

fn theorem_oracle(_: &mut Ctx) -> Result<Outcome> {
    let (trials, n, sigma_max, b) = (200u64, 10_000usize, 0.3, 0.1);
    let (lo, hi) = (0.0, 1.0);
    let bound = (hi - lo) / (n as f64).sqrt() * (1.0f64 / 0.05).ln().sqrt();
    let mut within = 0;
    let mut worst = 0.0f64;
    for t in 0..trials {
        let (err, est) = simulate_error_estimate(n, sigma_max, b, t)?;
        let d = (err - est).abs();
        worst = worst.max(d);
        within += usize::from(d < bound);
    }
    let frac = within as f64 / trials as f64;
    let target = (2.0 / std::f64::consts::PI).sqrt();
    let mc = mean_abs_normal(10_000_000, 7);
    let mc_err = (mc - target).abs();
    outcome(
        frac >= 0.95 && mc_err < 1e-4,
        format!(
            "{within}/{trials} trials within {bound:.4} (worst {worst:.4}); \
             E|N(0,1)| ≈ {mc:.6} vs √(2/π) = {target:.6} (|Δ| = {mc_err:.1e})"
        ),
    )
}

fn detection(ctx: &mut Ctx) -> Result<Outcome> {
    let n = 64;
    let p = ctx.run(SEEDS[0])?;
    let net = p.model();
    let det: &DetectorConfig = p.config.detector.as_ref().expect("detector");
    let specs = det.transforms();
    let gaussian = Corruption::Gaussian { std: 0.08 };
    let images = &p.eval.images[..n.min(p.eval.len())];
    let clean = try_map_indexed(images.len(), |i| detection_score(net, &images[i], &specs))?;
    let noisy = try_map_indexed(images.len(), |i| {
        let x = gaussian.apply(&images[i], derive(det.seed, "gaussian", i as u64))?;
        detection_score(net, &x, &specs)
    })?;
    let a = auroc(&noisy, &clean)?;
    let mut symmetric = a + auroc(&clean, &noisy)? == 1.0;
    // Tie-heavy integer scores as well.
    for k in 0..50u64 {
        let mut rng = eqrecal::seed::rng(k);
        use rand::Rng;
        let xs: Vec<f64> = (0..37).map(|_| rng.random_range(0..5) as f64).collect();
        let ys: Vec<f64> = (0..23).map(|_| rng.random_range(0..5) as f64).collect();
        symmetric &= auroc(&xs, &ys)? + auroc(&ys, &xs)? == 1.0;
    }
    outcome(
        a > 0.8 && symmetric,
        format!(
            "AUROC gaussian vs clean {a:.3} on {} images; symmetry exact: {symmetric}",
            images.len()
        ),
    )
}

fn bpda(ctx: &mut Ctx) -> Result<Outcome> {
    let steps = 10;
    let pgd = AttackConfig::pgd(TOY_EPSILON, steps, 3);
    let mut zero = ctx.defense(SEEDS[0], DefenseObjective::Equivariance)?;
    zero.epsilon_v = 0.0;
    let p = ctx.run(SEEDS[0])?;
    let net = p.model();
    let identical = try_map_indexed(4, |i| {
        let mut c = pgd.clone();
        c.seed = derive(pgd.seed, "image", i as u64);
        let a = attack(net, &p.eval.images[i], &p.eval.labels[i], &c)?;
        let (b, _) = bpda_attack(net, &zero, &p.eval.images[i], &p.eval.labels[i], &c)?;
        Ok::<_, Error>(a == b)
    })?
    .into_iter()
    .all(|b| b);

    // Full pipeline on a few images: BPDA and PGD with the same steps against
    // the active defense, reported side by side.
    let mut cfg = ExperimentConfig::toy_segmentation(SEEDS[0]);
    cfg.eval_data.size = 4;
    cfg.attacks = vec![
        AttackConfig::pgd(TOY_EPSILON, steps, 0),
        AttackConfig::new(AttackMethod::Bpda, TOY_EPSILON, steps, TOY_EPSILON / 4.0, 0),
    ];
    cfg.defenses.retain(|d| {
        matches!(
            d.objective,
            DefenseObjective::None | DefenseObjective::Equivariance
        )
    });
    cfg.detector = None;
    cfg.bpda_max_images = Some(4);
    cfg.reseed(SEEDS[0]);
    // Same directory as the seed's other runs, so the cached model is reused.
    let report = run_experiment(&cfg, &RunOptions::in_dir(cache_dir().join("seed0")))?;
    let equi = cfg.sweep_defense()?.label();
    let get = |attack: &str, defense: &str| report.value("bpda", attack, defense, "miou");
    let (b_none, p_none) = (get("bpda", "none"), get("pgd", "none"));
    let (b_equi, p_equi) = (get("bpda", &equi), get("pgd", &equi));
    let flagged_ok = match (b_equi, p_equi) {
        (Some(b), Some(pg)) => (b > pg) == report.alarms.iter().any(|a| a.contains("bpda weaker")),
        _ => false,
    };
    let reported = b_none.is_some() && p_none.is_some() && b_equi.is_some() && p_equi.is_some();
    outcome(
        identical && reported && b_none == p_none && flagged_ok,
        format!(
            "ε_v=0 bit-identical to PGD: {identical}; undefended bpda {:.2} = pgd {:.2}; \
             defended bpda {:.2} vs pgd {:.2}; alarm raised iff weaker: {flagged_ok}",
            b_none.unwrap_or(f64::NAN),
            p_none.unwrap_or(f64::NAN),
            b_equi.unwrap_or(f64::NAN),
            p_equi.unwrap_or(f64::NAN)
        ),
    )
}

fn determinism(_: &mut Ctx) -> Result<Outcome> {
    let mut cfg = ExperimentConfig::toy_segmentation(5);
    cfg.train_data.size = 24;
    cfg.train.epochs = 2;
    cfg.eval_data.size = 3;
    cfg.attacks = vec![
        AttackConfig::pgd(TOY_EPSILON, 3, 0),
        AttackConfig::new(AttackMethod::Adaptive, TOY_EPSILON, 2, TOY_EPSILON / 4.0, 0),
        AttackConfig::new(AttackMethod::Bpda, TOY_EPSILON, 2, TOY_EPSILON / 4.0, 0),
    ];
    cfg.adaptive_lambdas = vec![0.0, 10.0];
    cfg.bpda_max_images = Some(1);
    for d in &mut cfg.defenses {
        d.steps = 3;
    }
    if let Some(det) = cfg.detector.as_mut() {
        det.calibration_size = 4;
    }
    cfg.reseed(5);
    let dir = tempfile::tempdir()?;
    let mut csv = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        run_experiment(&cfg, &RunOptions::in_dir(&out))?;
        csv.push(std::fs::read(out.join("report.csv"))?);
    }
    let rows = String::from_utf8_lossy(&csv[0]).lines().count() - 1;
    outcome(
        csv[0] == csv[1] && rows > 0,
        format!(
            "two independent runs: {rows} rows, report.csv byte-identical: {}",
            csv[0] == csv[1]
        ),
    )
}

type Criterion = fn(&mut Ctx) -> Result<Outcome>;

fn main() {
    let criteria: [(u32, &str, Criterion); 11] = [
        (1, "gradient oracle", gradient_oracle),
        (2, "ball invariants", ball_invariants),
        (3, "equivariance ordering", equivariance_ordering),
        (4, "robustness recovery", robustness_recovery),
        (5, "constraint monotonicity", constraint_monotonicity),
        (6, "trade-off monotonicity", tradeoff),
        (7, "transform ablation", ablation),
        (8, "error-estimate theorem", theorem_oracle),
        (9, "detection AUROC", detection),
        (10, "BPDA correctness", bpda),
        (11, "determinism", determinism),
    ];
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut ctx = Ctx {
        runs: HashMap::new(),
        defended: HashMap::new(),
    };
    let mut failed = 0;
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let (pass, detail) = match f(&mut ctx) {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!(
            "{} {id:>2} {name}: {detail} [{:.1} s]",
            if pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
