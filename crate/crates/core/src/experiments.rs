//! Collision model, overhead measurement and fault-injection campaigns.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus;
use crate::instrument::{CheckPolicy, Mode};
use crate::ir::{BlockKind, Op, Program};
use crate::pac::{compute_pac, mix64, PacConfig, PacKey, PacWidthError};
use crate::postprocess::{build, Build, BuildConfig, PostprocessError};
use crate::sim::{
    execute, resolve_faults, run_build, Effect, ExecConfig, Fault, Image, Scenario, SimError,
    Trigger, Verdict,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("unknown corpus program `{0}`")]
    UnknownProgram(String),
    #[error("invalid campaign: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    PacWidth(#[from] PacWidthError),
    #[error(transparent)]
    Build(#[from] PostprocessError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// `1 − (1 − 2^−b)^N`, evaluated as `−expm1(N·log1p(−2^−b))`.
pub fn collision_probability(pac_bits: u32, n_updates: u64) -> f64 {
    assert!(pac_bits >= 1, "pac_bits must be at least 1");
    if n_updates == 0 {
        return 0.0;
    }
    let q = (-(0.5f64).powi(pac_bits as i32)).ln_1p();
    -(n_updates as f64 * q).exp_m1()
}

fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(trial.wrapping_add(0x9E37_79B9_7F4A_7C15))))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarlo {
    pub pac_bits: u32,
    pub updates: u64,
    pub trials: u64,
    pub hits: u64,
    pub empirical: f64,
    pub analytic: f64,
    /// Binomial standard deviation of the empirical rate under the analytic value.
    pub sigma: f64,
}

impl MonteCarlo {
    pub fn z_score(&self) -> f64 {
        if self.sigma == 0.0 {
            if self.empirical == self.analytic { 0.0 } else { f64::INFINITY }
        } else {
            (self.empirical - self.analytic) / self.sigma
        }
    }

    pub fn within_sigmas(&self, k: f64) -> bool {
        self.z_score().abs() <= k
    }
}

pub const MIN_MONTE_CARLO_TRIALS: u64 = 100;

/// Empirical collision rate.
///
/// Each trial draws a fresh key and walks two states from the same start:
/// the expected one through `n_updates` keyed updates at random addresses,
/// the corrupted one through updates at different random addresses. A hit
/// is a trial where the two coincide in the PAC bits after some update.
pub fn monte_carlo_collision(pac_bits: u32, n_updates: u64, trials: u64, seed: u64) -> Result<MonteCarlo, ExperimentError> {
    let cfg = PacConfig::with_pac_bits(pac_bits)?;
    if trials < MIN_MONTE_CARLO_TRIALS {
        return Err(ExperimentError::InvalidConfig(format!("at least {MIN_MONTE_CARLO_TRIALS} trials are needed")));
    }
    let hits: u64 = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t);
            let key = PacKey::new(rng.gen(), rng.gen());
            let mut diff = 0u64;
            for _ in 0..n_updates {
                let a = cfg.pac_field(compute_pac(0, rng.gen(), key, cfg));
                let b = cfg.pac_field(compute_pac(0, rng.gen(), key, cfg));
                diff ^= a ^ b;
                if diff == 0 {
                    return 1;
                }
            }
            0
        })
        .sum();
    let analytic = collision_probability(pac_bits, n_updates);
    Ok(MonteCarlo {
        pac_bits,
        updates: n_updates,
        trials,
        hits,
        empirical: hits as f64 / trials as f64,
        analytic,
        sigma: (analytic * (1.0 - analytic) / trials as f64).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionRow {
    pub updates: u64,
    pub analytic: f64,
    pub empirical: Option<f64>,
    pub sigma: Option<f64>,
}

/// Rows of the collision curve; with `empirical = Some((trials, seed))` each
/// row also carries a Monte-Carlo estimate.
pub fn collision_table(
    pac_bits: u32,
    updates: &[u64],
    empirical: Option<(u64, u64)>,
) -> Result<Vec<CollisionRow>, ExperimentError> {
    updates
        .iter()
        .map(|&n| {
            let analytic = collision_probability(pac_bits, n);
            let (empirical, sigma) = match empirical {
                Some((trials, seed)) => {
                    let m = monte_carlo_collision(pac_bits, n, trials, seed)?;
                    (Some(m.empirical), Some(m.sigma))
                }
                None => (None, None),
            };
            Ok(CollisionRow { updates: n, analytic, empirical, sigma })
        })
        .collect()
}

/// Static and dynamic cost of one build relative to the uninstrumented program.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overhead {
    pub mode: Mode,
    pub policy: CheckPolicy,
    pub static_original: u64,
    pub static_instrumented: u64,
    pub static_predicted: u64,
    pub dynamic_original: u64,
    pub dynamic_instrumented: u64,
    pub checks: usize,
}

impl Overhead {
    pub fn static_overhead(&self) -> f64 {
        self.static_instrumented as f64 / self.static_original as f64 - 1.0
    }

    pub fn dynamic_overhead(&self) -> f64 {
        self.dynamic_instrumented as f64 / self.dynamic_original as f64 - 1.0
    }
}

fn benign_cost(b: &Build, inputs: &[&[u64]]) -> Result<u64, ExperimentError> {
    let img = Image::from_build(b);
    let mut total = 0;
    for input in inputs {
        let r = execute(&img, input, &[], &ExecConfig::default());
        if r.verdict != Verdict::Completed {
            return Err(ExperimentError::InvalidConfig(format!("benign run ended with {}", r.verdict)));
        }
        total += r.machine_instructions;
    }
    Ok(total)
}

/// Machine-instruction counts in AArch64 equivalents; dynamic counts are
/// summed over `inputs`.
pub fn measure_overhead(
    p: &Program,
    inputs: &[&[u64]],
    mode: Mode,
    policy: CheckPolicy,
    key: PacKey,
    seed: u64,
) -> Result<Overhead, ExperimentError> {
    let plain = build(p, BuildConfig::new(Mode::None, policy, key))?;
    let b = build(p, BuildConfig::new(mode, policy, key).with_seed(seed))?;
    Ok(Overhead {
        mode,
        policy,
        static_original: b.manifest.original_machine_instructions,
        static_instrumented: b.manifest.instrumented_machine_instructions,
        static_predicted: b.manifest.predicted_machine_instructions(),
        dynamic_original: benign_cost(&plain, inputs)?,
        dynamic_instrumented: benign_cost(&b, inputs)?,
        checks: b.manifest.total(|f| f.checks),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultModel {
    /// A control transfer at a random step lands on a random block entry.
    Redirect,
    /// As `Redirect`, and the check that catches it is skipped.
    SkipCheck,
    /// The forged redirect of the `fig3` scenario.
    CombinedForge,
}

fn default_mode() -> Mode {
    Mode::Fipac
}

fn default_true() -> bool {
    true
}

fn default_pac_bits() -> u32 {
    16
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    /// Corpus program name.
    pub program: String,
    pub policy: CheckPolicy,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default = "default_pac_bits")]
    pub pac_bits: u32,
    /// 32 hex digits; used as is unless `randomize_key` is set.
    pub key: String,
    #[serde(with = "crate::hexfmt")]
    pub seed: u64,
    pub trials: u64,
    pub fault_model: FaultModel,
    /// Draw a fresh key and signature seed for every trial.
    #[serde(default = "default_true")]
    pub randomize_key: bool,
    /// Data memory contents; defaults to the program's first bundled input.
    #[serde(default)]
    pub input: Option<Vec<u64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean: f64,
    pub p50: u64,
    pub p90: u64,
    pub p99: u64,
    pub max: u64,
}

impl LatencyStats {
    pub fn from_samples(samples: &[u64]) -> Option<LatencyStats> {
        if samples.is_empty() {
            return None;
        }
        let mut v = samples.to_vec();
        v.sort_unstable();
        let rank = |p: f64| v[((p / 100.0 * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
        Some(LatencyStats {
            mean: v.iter().sum::<u64>() as f64 / v.len() as f64,
            p50: rank(50.0),
            p90: rank(90.0),
            p99: rank(99.0),
            max: *v.last().expect("non-empty"),
        })
    }
}

/// 95% Wilson score interval.
pub fn wilson_interval(successes: u64, trials: u64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054_f64;
    let n = trials as f64;
    let p = successes as f64 / n;
    let denom = 1.0 + z * z / n;
    let centre = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub config: CampaignConfig,
    pub trials: u64,
    pub detected: u64,
    pub crashed: u64,
    /// Runs that completed without a trap: undetected hijacks.
    pub missed: u64,
    pub fuel_exhausted: u64,
    /// Redirect draws rejected because the target is entered with exactly
    /// the state a legitimate continuation would have (for every key).
    pub equivalent_redraws: u64,
    pub detection_rate: f64,
    pub crash_rate: f64,
    /// (detected + crashed) / trials.
    pub caught_rate: f64,
    pub miss_rate: f64,
    pub caught_ci95: (f64, f64),
    /// Probability that one corrupted state passes one check.
    pub single_check_miss_probability: f64,
    pub latency: Option<LatencyStats>,
    pub static_overhead: f64,
    pub dynamic_overhead: f64,
}

impl CampaignReport {
    pub const CSV_HEADER: &'static str = "program,mode,policy,fault_model,pac_bits,trials,detected,crashed,missed,fuel_exhausted,equivalent_redraws,detection_rate,caught_rate,miss_rate,ci_low,ci_high,latency_mean,latency_p50,latency_p90,latency_p99,static_overhead,dynamic_overhead";

    pub fn csv_row(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let fm = serde_json::to_value(c.fault_model).expect("enum serializes");
        write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},",
            c.program,
            c.mode,
            c.policy,
            fm.as_str().unwrap_or_default(),
            c.pac_bits,
            self.trials,
            self.detected,
            self.crashed,
            self.missed,
            self.fuel_exhausted,
            self.equivalent_redraws,
            self.detection_rate,
            self.caught_rate,
            self.miss_rate,
            self.caught_ci95.0,
            self.caught_ci95.1,
        )
        .expect("string write");
        match self.latency {
            Some(l) => write!(s, "{:.3},{},{},{},", l.mean, l.p50, l.p90, l.p99),
            None => write!(s, ",,,,"),
        }
        .expect("string write");
        write!(s, "{:.6},{:.6}", self.static_overhead, self.dynamic_overhead).expect("string write");
        s
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Detected(u64),
    Crashed,
    Missed,
    Fuel,
}

fn classify(v: &crate::sim::ExecutionResult) -> Outcome {
    match v.verdict {
        Verdict::CfiTrap { .. } => Outcome::Detected(v.detection_latency.unwrap_or(0)),
        Verdict::Crash { .. } => Outcome::Crashed,
        Verdict::Completed => Outcome::Missed,
        Verdict::FuelExhausted => Outcome::Fuel,
    }
}

/// Where a redirect may be injected and which targets are equivalent to a
/// legitimate continuation.
struct RedirectPlan {
    /// `(step, is_call)` of every control transfer in the benign run.
    sites: Vec<(u64, bool)>,
    targets: Vec<u64>,
    /// Per reference build: state before every benign step, and the expected
    /// entry state of every target.
    references: Vec<(Vec<u64>, BTreeMap<u64, u64>)>,
    fuel: u64,
}

const REFERENCE_BUILDS: u64 = 4;

impl RedirectPlan {
    fn new(b: &Build, input: &[u64], seed: u64) -> Result<Self, ExperimentError> {
        let ops: BTreeMap<u64, &Op> = b.program.instructions().map(|i| (i.address, &i.op)).collect();
        let benign = run_build(b, input, &[], &ExecConfig::traced());
        if benign.verdict != Verdict::Completed {
            return Err(ExperimentError::InvalidConfig(format!("benign run ended with {}", benign.verdict)));
        }
        let sites = benign
            .trace
            .iter()
            .filter_map(|t| match ops[&t.pc] {
                Op::Branch { .. } | Op::CondBranch { .. } | Op::Return => Some((t.step, false)),
                Op::Call { .. } | Op::CallIndirect { .. } => Some((t.step, true)),
                _ => None,
            })
            .collect();
        let targets: Vec<u64> = b
            .program
            .functions
            .iter()
            .flat_map(|f| f.blocks.iter().filter(|bl| bl.kind == BlockKind::Body))
            .map(|bl| bl.entry_address())
            .collect();
        let mut references = Vec::new();
        for r in 0..REFERENCE_BUILDS {
            let mut rng = trial_rng(seed ^ 0x005E_ED0F_4E4E_0000, r);
            let rb = b.rekey(PacKey::new(rng.gen(), rng.gen()), rng.gen())?;
            let run = run_build(&rb, input, &[], &ExecConfig::traced());
            let states = run.trace.iter().map(|t| t.state).collect();
            let entries = targets.iter().map(|&t| (t, rb.states.get(t).expect("block entry"))).collect();
            references.push((states, entries));
        }
        Ok(RedirectPlan { sites, targets, references, fuel: benign.steps * 20 + 10_000 })
    }

    fn equivalent(&self, step: u64, target: u64) -> bool {
        self.references.iter().all(|(states, entries)| states[step as usize] == entries[&target])
    }

    /// Draws a redirect fault; returns it with the number of rejected draws.
    fn draw(&self, rng: &mut ChaCha8Rng) -> Option<(Fault, u64)> {
        let mut redraws = 0;
        for _ in 0..10_000 {
            let (step, is_call) = self.sites[rng.gen_range(0..self.sites.len())];
            let target = self.targets[rng.gen_range(0..self.targets.len())];
            if self.equivalent(step, target) {
                redraws += 1;
                continue;
            }
            let effect = if is_call { Effect::RedirectCall(target) } else { Effect::RedirectBranch(target) };
            return Some((Fault { trigger: Trigger::Step(step), effect }, redraws));
        }
        None
    }
}

fn trial_build(base: &Build, cfg: &CampaignConfig, rng: &mut ChaCha8Rng) -> Result<Build, ExperimentError> {
    if cfg.randomize_key {
        Ok(base.rekey(PacKey::new(rng.gen(), rng.gen()), rng.gen())?)
    } else {
        Ok(base.clone())
    }
}

/// Runs `cfg.trials` independent fault-injection trials.
///
/// Results depend only on the configuration: every trial owns an RNG stream
/// derived from `(seed, trial)`.
pub fn detection_campaign(cfg: &CampaignConfig) -> Result<CampaignReport, ExperimentError> {
    if cfg.trials == 0 {
        return Err(ExperimentError::InvalidConfig("trials must be at least 1".into()));
    }
    let program = corpus::get(&cfg.program).ok_or_else(|| ExperimentError::UnknownProgram(cfg.program.clone()))?;
    if cfg.fault_model == FaultModel::CombinedForge && program.name != "fig3" {
        return Err(ExperimentError::InvalidConfig("combined-forge runs on the fig3 program".into()));
    }
    let key: PacKey = cfg.key.parse().map_err(|e| ExperimentError::InvalidConfig(format!("key: {e}")))?;
    let pac = PacConfig::with_pac_bits(cfg.pac_bits)?;
    let input: Vec<u64> = cfg.input.clone().unwrap_or_else(|| program.inputs[0].to_vec());
    let source = program.program();
    let base = build(&source, BuildConfig::new(cfg.mode, cfg.policy, key).with_seed(cfg.seed).with_pac(pac))?;
    let overhead = measure_overhead(&source, &[&input], cfg.mode, cfg.policy, key, cfg.seed)?;

    let plan = match cfg.fault_model {
        FaultModel::Redirect | FaultModel::SkipCheck => Some(RedirectPlan::new(&base, &input, cfg.seed)?),
        FaultModel::CombinedForge => None,
    };

    let run_trial = |t: u64| -> Result<(Outcome, u64), ExperimentError> {
        let mut rng = trial_rng(cfg.seed, t);
        let b = trial_build(&base, cfg, &mut rng)?;
        let exec = ExecConfig { fuel: plan.as_ref().map_or(ExecConfig::default().fuel, |p| p.fuel), ..ExecConfig::default() };
        match cfg.fault_model {
            FaultModel::CombinedForge => {
                let s = Scenario::Fig3Forge;
                let faults = resolve_faults(&b.program, &s.faults(&b))?;
                Ok((classify(&run_build(&b, &input, &faults, &exec)), 0))
            }
            FaultModel::Redirect | FaultModel::SkipCheck => {
                let plan = plan.as_ref().expect("planned");
                let (fault, redraws) = plan
                    .draw(&mut rng)
                    .ok_or_else(|| ExperimentError::InvalidConfig("no non-equivalent redirect target".into()))?;
                let img = Image::from_build(&b);
                let first = execute(&img, &input, &[fault], &exec);
                if cfg.fault_model == FaultModel::SkipCheck {
                    if let Verdict::CfiTrap { step, .. } = first.verdict {
                        let skip = Fault { trigger: Trigger::Step(step), effect: Effect::Skip(1) };
                        let second = execute(&img, &input, &[fault, skip], &exec);
                        return Ok((classify(&second), redraws));
                    }
                }
                Ok((classify(&first), redraws))
            }
        }
    };
    let outcomes: Vec<(Outcome, u64)> =
        (0..cfg.trials).into_par_iter().map(run_trial).collect::<Result<_, _>>()?;

    let mut detected = 0;
    let mut crashed = 0;
    let mut missed = 0;
    let mut fuel = 0;
    let mut redraws = 0;
    let mut latencies = Vec::new();
    for (o, r) in &outcomes {
        redraws += r;
        match o {
            Outcome::Detected(l) => {
                detected += 1;
                latencies.push(*l);
            }
            Outcome::Crashed => crashed += 1,
            Outcome::Missed => missed += 1,
            Outcome::Fuel => fuel += 1,
        }
    }
    let n = cfg.trials as f64;
    Ok(CampaignReport {
        config: cfg.clone(),
        trials: cfg.trials,
        detected,
        crashed,
        missed,
        fuel_exhausted: fuel,
        equivalent_redraws: redraws,
        detection_rate: detected as f64 / n,
        crash_rate: crashed as f64 / n,
        caught_rate: (detected + crashed) as f64 / n,
        miss_rate: (missed + fuel) as f64 / n,
        caught_ci95: wilson_interval(detected + crashed, cfg.trials),
        single_check_miss_probability: collision_probability(cfg.pac_bits, 1),
        latency: LatencyStats::from_samples(&latencies),
        static_overhead: overhead.static_overhead(),
        dynamic_overhead: overhead.dynamic_overhead(),
    })
}

/// Campaign configurations shipped with the crate.
pub fn bundled_campaign(name: &str) -> Option<CampaignConfig> {
    let text = match name {
        "redirect" => include_str!("../campaigns/redirect.json"),
        "redirect-8bit" => include_str!("../campaigns/redirect-8bit.json"),
        "skip-check" => include_str!("../campaigns/skip-check.json"),
        "forge-baseline" => include_str!("../campaigns/forge-baseline.json"),
        "forge-fipac" => include_str!("../campaigns/forge-fipac.json"),
        _ => return None,
    };
    Some(serde_json::from_str(text).expect("bundled campaign parses"))
}

pub const BUNDLED_CAMPAIGNS: [&str; 5] = ["redirect", "redirect-8bit", "skip-check", "forge-baseline", "forge-fipac"];
