use std::collections::HashMap;
use std::fs;
use std::path::Path;

use adcensus::client::{parse_replay, AdIdMapper, ClientWeekState, WEEK_SECS};
use adcensus::{AdId, AdKey, OprfError, SketchParams, Threshold, ThresholdMode};

use crate::CliError;

/// Sequential local IDs; the sketch is never reported here.
struct LocalIds(u64);

impl AdIdMapper for LocalIds {
    fn ad_id(&mut self, _: &AdKey) -> Result<AdId, OprfError> {
        self.0 += 1;
        Ok(AdId::new(self.0))
    }
}

pub struct Distribution {
    pub users_th: Threshold,
    pub counts: HashMap<AdKey, u64>,
}

pub fn parse_distribution(text: &str) -> Result<Distribution, String> {
    let mut users_th = None;
    let mut counts = HashMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (head, rest) = content
            .split_once(char::is_whitespace)
            .ok_or_else(|| format!("line {line}: expected two fields"))?;
        let rest = rest.trim();
        if head == "users_th" {
            if users_th.is_some() {
                return Err(format!("line {line}: users_th given twice"));
            }
            users_th = Some(rest.parse::<Threshold>().map_err(|e| format!("line {line}: {e}"))?);
            continue;
        }
        let count: u64 = head.parse().map_err(|_| format!("line {line}: invalid count `{head}`"))?;
        let key = AdKey::new(rest).map_err(|e| format!("line {line}: {e}"))?;
        if counts.insert(key, count).is_some() {
            return Err(format!("line {line}: ad listed twice"));
        }
    }
    let users_th = users_th.ok_or("missing users_th line")?;
    Ok(Distribution { users_th, counts })
}

/// One tab-separated decision line per distinct ad in the log, in key order.
pub fn classify(observations: &str, distribution: &str, mode: ThresholdMode) -> Result<String, String> {
    let dist = parse_distribution(distribution).map_err(|e| format!("distribution: {e}"))?;
    let log = parse_replay(observations).map_err(|e| format!("observations: {e}"))?;
    let start = log.iter().map(|o| o.timestamp).min().unwrap_or(0);
    let mut state = ClientWeekState::new(
        SketchParams::new(0.5, 0.5, 1, 0).expect("valid parameters"),
        start - start % WEEK_SECS,
    );
    let mut ids = LocalIds(0);
    for obs in &log {
        state
            .record_observation(obs, &mut ids)
            .map_err(|e| format!("observations: {e}"))?;
    }
    let domains_th = state.domains_threshold(mode);
    let mut out = String::from("ad\tdomains_count\tdomains_th\tusers_count\tusers_th\tdecision\n");
    for ad in state.ads() {
        let users = dist.counts.get(ad).copied().unwrap_or(0);
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            ad,
            state.domains_count(ad),
            domains_th.map_or("none".to_string(), |t| t.to_string()),
            users,
            dist.users_th,
            state.classify(ad, users, dist.users_th, mode)
        ));
    }
    Ok(out)
}

pub fn run(observations: &Path, distribution: &Path, mode: ThresholdMode) -> Result<String, CliError> {
    let read = |p: &Path| fs::read_to_string(p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())));
    classify(&read(observations)?, &read(distribution)?, mode).map_err(CliError::Usage)
}
