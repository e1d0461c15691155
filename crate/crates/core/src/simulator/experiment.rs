use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;

use super::config::{ConfigError, SimConfig};
use super::world::{generate_world, Label, SimWorld, WeekLog};
use crate::aggregator::UsersDistribution;
use crate::client::{decide, Decision, MIN_AD_SERVING_DOMAINS};
use crate::harness::{run_round, HarnessError, RoundOutcome};
use crate::threshold::{Threshold, ThresholdMode};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("unknown sweep parameter `{0}` (expected frequency_cap, num_users, mode or targeted_fraction)")]
    UnknownParameter(String),
    #[error("invalid value `{value}` for {parameter}")]
    InvalidValue { parameter: SweepParameter, value: String },
    #[error("the week produced no ads")]
    NoAds,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Classification outcomes against ground truth. Pairs with
/// insufficient data are kept out of the rates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
    pub insufficient_targeted: u64,
    pub insufficient_non_targeted: u64,
}

fn ratio(n: u64, d: u64) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

impl ConfusionCounts {
    pub fn record(&mut self, label: Label, decision: Decision) {
        match (label, decision) {
            (Label::Targeted, Decision::Targeted) => self.tp += 1,
            (Label::Targeted, Decision::NonTargeted) => self.fn_ += 1,
            (Label::NonTargeted, Decision::Targeted) => self.fp += 1,
            (Label::NonTargeted, Decision::NonTargeted) => self.tn += 1,
            (Label::Targeted, Decision::InsufficientData) => self.insufficient_targeted += 1,
            (Label::NonTargeted, Decision::InsufficientData) => self.insufficient_non_targeted += 1,
        }
    }

    pub fn add(&mut self, other: &Self) {
        self.tp += other.tp;
        self.fn_ += other.fn_;
        self.fp += other.fp;
        self.tn += other.tn;
        self.insufficient_targeted += other.insufficient_targeted;
        self.insufficient_non_targeted += other.insufficient_non_targeted;
    }

    pub fn classified(&self) -> u64 {
        self.tp + self.fn_ + self.fp + self.tn
    }

    pub fn insufficient(&self) -> u64 {
        self.insufficient_targeted + self.insufficient_non_targeted
    }

    /// FN / (FN + TP); 0 when no targeted pair was classified.
    pub fn fn_rate(&self) -> f64 {
        ratio(self.fn_, self.fn_ + self.tp)
    }

    /// FP / (FP + TN); 0 when no non-targeted pair was classified.
    pub fn fp_rate(&self) -> f64 {
        ratio(self.fp, self.fp + self.tn)
    }

    pub fn insufficient_fraction(&self) -> f64 {
        ratio(self.insufficient(), self.insufficient() + self.classified())
    }
}

/// Decision for every (user, campaign) pair a user saw, keyed by 0-based user.
pub type PairDecisions = BTreeMap<(u32, u32), Decision>;

/// Exact counting over a week: per-user domain sets and per-campaign user
/// counts, classified with the same rule the clients use.
#[derive(Debug, Clone)]
pub struct CleartextWeek {
    pub users_count: BTreeMap<u32, u32>,
    pub users_th: Option<Threshold>,
    pub domains_th: Vec<Option<Threshold>>,
    pub decisions: PairDecisions,
}

pub fn cleartext_week(log: &WeekLog, mode: ThresholdMode) -> CleartextWeek {
    let per_user: Vec<BTreeMap<u32, BTreeSet<u32>>> = log
        .impressions
        .iter()
        .map(|imps| {
            let mut ads: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
            for i in imps {
                ads.entry(i.campaign).or_default().insert(i.site);
            }
            ads
        })
        .collect();
    let mut users_count: BTreeMap<u32, u32> = BTreeMap::new();
    for ads in &per_user {
        for &c in ads.keys() {
            *users_count.entry(c).or_default() += 1;
        }
    }
    let values: Vec<u64> = users_count.values().map(|&v| v as u64).collect();
    let users_th = mode.apply(&values);
    let mut domains_th = Vec::with_capacity(per_user.len());
    let mut decisions = BTreeMap::new();
    for (user, ads) in per_user.iter().enumerate() {
        let serving: BTreeSet<u32> = ads.values().flatten().copied().collect();
        let counts: Vec<u64> = ads.values().map(|d| d.len() as u64).collect();
        let th = if serving.len() < MIN_AD_SERVING_DOMAINS {
            None
        } else {
            mode.apply(&counts)
        };
        domains_th.push(th);
        if let Some(uth) = users_th {
            for (&c, d) in ads {
                decisions.insert((user as u32, c), decide(d.len() as u64, th, users_count[&c] as u64, uth));
            }
        }
    }
    CleartextWeek {
        users_count,
        users_th,
        domains_th,
        decisions,
    }
}

/// Runs the week through the blinded-sketch protocol.
pub fn private_week(world: &SimWorld, log: &WeekLog) -> Result<(RoundOutcome, PairDecisions), SimError> {
    let config = world.config().harness_config(log.week)?;
    let outcome = run_round(&config, &log.observations(world))?;
    let index = world.campaign_index();
    let mut decisions = BTreeMap::new();
    for user in &outcome.decisions {
        for ad in &user.ads {
            decisions.insert((user.user - 1, index[&ad.ad]), ad.decision);
        }
    }
    Ok((outcome, decisions))
}

fn score(world: &SimWorld, decisions: &PairDecisions) -> ConfusionCounts {
    let mut counts = ConfusionCounts::default();
    for (&(user, c), &d) in decisions {
        counts.record(world.label(user, c), d);
    }
    counts
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeekResult {
    pub week: u32,
    pub counts: ConfusionCounts,
    pub users_th_clear: Option<Threshold>,
    pub users_th_cms: Option<Threshold>,
    /// Pairs whose decision differs between the private and the exact run.
    pub flips: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub counts: ConfusionCounts,
    pub weeks: Vec<WeekResult>,
}

impl ExperimentResult {
    fn mean_threshold(&self, f: impl Fn(&WeekResult) -> Option<Threshold>) -> Option<f64> {
        let v: Vec<f64> = self.weeks.iter().filter_map(|w| f(w).map(|t| t.to_f64())).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn users_th_clear(&self) -> Option<f64> {
        self.mean_threshold(|w| w.users_th_clear)
    }

    pub fn users_th_cms(&self) -> Option<f64> {
        self.mean_threshold(|w| w.users_th_cms)
    }
}

pub fn run_experiment(config: &SimConfig) -> Result<ExperimentResult, SimError> {
    config.validate()?;
    let world = generate_world(config);
    run_in_world(&world, config.frequency_cap)
}

fn run_in_world(world: &SimWorld, cap: u32) -> Result<ExperimentResult, SimError> {
    let config = world.config();
    let mut counts = ConfusionCounts::default();
    let mut weeks = Vec::new();
    for week in 0..config.weeks {
        let log = world.simulate_week_with_cap(week, cap);
        let clear = cleartext_week(&log, config.mode);
        let result = if config.privacy {
            let (outcome, decisions) = private_week(world, &log)?;
            let flips = decisions
                .iter()
                .filter(|(k, d)| clear.decisions.get(k).is_some_and(|c| c != *d))
                .count() as u64;
            WeekResult {
                week,
                counts: score(world, &decisions),
                users_th_clear: clear.users_th,
                users_th_cms: outcome.users_th,
                flips,
            }
        } else {
            WeekResult {
                week,
                counts: score(world, &clear.decisions),
                users_th_clear: clear.users_th,
                users_th_cms: None,
                flips: 0,
            }
        };
        counts.add(&result.counts);
        weeks.push(result);
    }
    Ok(ExperimentResult { counts, weeks })
}

/// Exact and sketch-derived user counts for the same week.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineComparison {
    pub users_th_clear: Threshold,
    pub users_th_cms: Threshold,
    /// Distinct ads at least one user saw.
    pub truly_seen: usize,
    /// Truly seen ads whose sketch estimate equals their exact user count.
    pub exact: usize,
    /// IDs kept by the aggregator's probe.
    pub retained: usize,
    pub underestimates: usize,
    pub max_overestimate: u32,
    /// Sum of |estimate - exact| over truly seen ads.
    pub total_abs_diff: u64,
    pub flips: u64,
}

impl PipelineComparison {
    pub fn exact_fraction(&self) -> f64 {
        ratio(self.exact as u64, self.truly_seen as u64)
    }

    pub fn threshold_ratio(&self) -> f64 {
        self.users_th_cms.to_f64() / self.users_th_clear.to_f64()
    }
}

/// Runs week 0 through exact counting and through the private pipeline.
pub fn compare_threshold_pipelines(config: &SimConfig) -> Result<PipelineComparison, SimError> {
    config.validate()?;
    let world = generate_world(config);
    let log = world.simulate_week(0);
    let clear = cleartext_week(&log, config.mode);
    let (outcome, decisions) = private_week(&world, &log)?;
    let users_th_clear = clear.users_th.ok_or(SimError::NoAds)?;
    let users_th_cms = outcome.users_th.ok_or(SimError::NoAds)?;

    // estimates are per ad ID; compare against exact users per ID, which is
    // what the sketch counts when two ads share an ID
    let mut ids: HashMap<u32, crate::oprf::AdId> = HashMap::new();
    for user in &outcome.decisions {
        for ad in &user.ads {
            ids.insert(world.campaign_index()[&ad.ad], ad.ad_id);
        }
    }
    let dropped: BTreeSet<u32> = config.drop.iter().map(|u| u - 1).collect();
    let mut per_id: BTreeMap<crate::oprf::AdId, u32> = BTreeMap::new();
    for (user, imps) in log.impressions.iter().enumerate() {
        if dropped.contains(&(user as u32)) {
            continue;
        }
        let seen: BTreeSet<u32> = imps.iter().map(|i| i.campaign).collect();
        for c in seen {
            *per_id.entry(ids[&c]).or_default() += 1;
        }
    }
    let dist: &UsersDistribution = &outcome.distribution;
    let mut cmp = PipelineComparison {
        users_th_clear,
        users_th_cms,
        truly_seen: 0,
        exact: 0,
        retained: dist.len(),
        underestimates: 0,
        max_overestimate: 0,
        total_abs_diff: 0,
        flips: decisions
            .iter()
            .filter(|(k, d)| clear.decisions.get(k).is_some_and(|c| c != *d))
            .count() as u64,
    };
    for (&c, _) in clear.users_count.iter() {
        let Some(&id) = ids.get(&c) else { continue };
        let truth = per_id[&id];
        let est = outcome.aggregate.query(id);
        cmp.truly_seen += 1;
        cmp.exact += (est == truth) as usize;
        cmp.underestimates += (est < truth) as usize;
        cmp.max_overestimate = cmp.max_overestimate.max(est.saturating_sub(truth));
        cmp.total_abs_diff += est.abs_diff(truth) as u64;
    }
    Ok(cmp)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParameter {
    FrequencyCap,
    NumUsers,
    Mode,
    TargetedFraction,
}

impl SweepParameter {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParameter::FrequencyCap => "frequency_cap",
            SweepParameter::NumUsers => "num_users",
            SweepParameter::Mode => "mode",
            SweepParameter::TargetedFraction => "targeted_fraction",
        }
    }

    /// A copy of `config` with the parameter set to `value`.
    pub fn apply(self, config: &SimConfig, value: &str) -> Result<SimConfig, SimError> {
        let bad = || SimError::InvalidValue {
            parameter: self,
            value: value.to_string(),
        };
        let mut c = config.clone();
        match self {
            SweepParameter::FrequencyCap => c.frequency_cap = value.parse().map_err(|_| bad())?,
            SweepParameter::NumUsers => c.num_users = value.parse().map_err(|_| bad())?,
            SweepParameter::Mode => c.mode = value.parse().map_err(|_| bad())?,
            SweepParameter::TargetedFraction => c.targeted_fraction = value.parse().map_err(|_| bad())?,
        }
        c.validate()?;
        Ok(c)
    }
}

impl fmt::Display for SweepParameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepParameter {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "frequency_cap" => Ok(SweepParameter::FrequencyCap),
            "num_users" => Ok(SweepParameter::NumUsers),
            "mode" => Ok(SweepParameter::Mode),
            "targeted_fraction" => Ok(SweepParameter::TargetedFraction),
            other => Err(SimError::UnknownParameter(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub parameter: String,
    pub seed: u64,
    pub fn_rate: f64,
    pub fp_rate: f64,
    pub insufficient_fraction: f64,
    pub users_th_clear: Option<f64>,
    pub users_th_cms: Option<f64>,
}

impl SweepRow {
    fn new(parameter: String, seed: u64, r: &ExperimentResult) -> Self {
        Self {
            parameter,
            seed,
            fn_rate: r.counts.fn_rate(),
            fp_rate: r.counts.fp_rate(),
            insufficient_fraction: r.counts.insufficient_fraction(),
            users_th_clear: r.users_th_clear(),
            users_th_cms: r.users_th_cms(),
        }
    }
}

pub const CSV_HEADER: [&str; 7] = [
    "parameter",
    "seed",
    "fn_rate",
    "fp_rate",
    "insufficient_fraction",
    "users_th_clear",
    "users_th_cms",
];

/// One row per value per seed, values outermost. Runs are independent and
/// may execute in parallel; row order does not depend on scheduling.
pub fn sweep(
    config: &SimConfig,
    parameter: SweepParameter,
    values: &[String],
    seeds: &[u64],
) -> Result<Vec<SweepRow>, SimError> {
    let mut jobs = Vec::with_capacity(values.len() * seeds.len());
    for v in values {
        let c = parameter.apply(config, v)?;
        for &seed in seeds {
            jobs.push((format!("{parameter}={v}"), SimConfig { seed, ..c.clone() }));
        }
    }
    let run = |(label, c): &(String, SimConfig)| -> Result<SweepRow, SimError> {
        Ok(SweepRow::new(label.clone(), c.seed, &run_experiment(c)?))
    };
    if config.parallel {
        jobs.par_iter().map(run).collect()
    } else {
        jobs.iter().map(run).collect()
    }
}

/// Frequency-cap sweep sharing one world per seed.
pub fn cap_sweep(config: &SimConfig, caps: &[u32], seeds: &[u64]) -> Result<Vec<SweepRow>, SimError> {
    config.validate()?;
    let per_seed = |&seed: &u64| -> Result<Vec<SweepRow>, SimError> {
        let world = generate_world(&SimConfig { seed, ..config.clone() });
        caps.iter()
            .map(|&cap| Ok(SweepRow::new(format!("frequency_cap={cap}"), seed, &run_in_world(&world, cap)?)))
            .collect()
    };
    let by_seed: Vec<Vec<SweepRow>> = if config.parallel {
        seeds.par_iter().map(per_seed).collect::<Result<_, _>>()?
    } else {
        seeds.iter().map(per_seed).collect::<Result<_, _>>()?
    };
    let mut rows = Vec::with_capacity(caps.len() * seeds.len());
    for i in 0..caps.len() {
        rows.extend(by_seed.iter().map(|r| r[i].clone()));
    }
    Ok(rows)
}

fn fixed(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

pub fn write_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.parameter.clone(),
            r.seed.to_string(),
            format!("{:.6}", r.fn_rate),
            format!("{:.6}", r.fp_rate),
            format!("{:.6}", r.insufficient_fraction),
            fixed(r.users_th_clear),
            fixed(r.users_th_cms),
        ])?;
    }
    w.flush()?;
    Ok(())
}
