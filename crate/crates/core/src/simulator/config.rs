use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::harness::HarnessConfig;
use crate::oprf::DEFAULT_AD_SPACE;
use crate::sketch::{SketchParams, DEFAULT_CAPACITY_HINT, DEFAULT_DELTA, DEFAULT_EPSILON};
use crate::threshold::ThresholdMode;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{field}: {reason}")]
    Invalid { field: &'static str, reason: String },
}

/// How `avg_ads_per_site` is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlotModel {
    /// Ad slots filled on every page view of a site.
    SlotsPerView,
    /// Distinct static campaigns in a site's inventory, all shown on every view.
    CampaignsPerSite,
}

/// A group of users browsing only a few tail sites that carry the same
/// static campaigns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StressConfig {
    /// Fraction of users confined to the stress sites.
    pub user_fraction: f64,
    pub sites: u32,
    /// Static campaigns placed on every stress site.
    pub campaigns: u32,
}

impl Default for StressConfig {
    fn default() -> Self {
        Self {
            user_fraction: 0.1,
            sites: 20,
            campaigns: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub num_users: u32,
    pub num_websites: u32,
    /// Mean page views per user per week.
    pub avg_user_visits: f64,
    pub avg_ads_per_site: f64,
    pub slot_model: SlotModel,
    pub num_campaigns: u32,
    pub targeted_fraction: f64,
    /// Impressions of a targeted ad per targeted user per week.
    pub frequency_cap: u32,
    pub mode: ThresholdMode,
    pub weeks: u32,
    pub seed: u64,
    /// Run the blinded-sketch pipeline instead of exact counting.
    pub privacy: bool,
    pub zipf_exponent: f64,
    pub interest_clusters: u32,
    /// Mean size of a user's set of regularly visited sites. 0 lets every
    /// user browse the whole web by popularity.
    pub favourite_sites: f64,
    /// Fraction of static campaigns bought on popular sites.
    pub broad_fraction: f64,
    pub broad_sites: [u32; 2],
    pub narrow_sites: [u32; 2],
    /// Narrow campaigns pick sites with weight popularity^exponent.
    pub narrow_popularity_exponent: f64,
    /// Fraction of the chosen clusters a targeted campaign reaches.
    pub audience_fraction: [f64; 2],
    /// Number of interest clusters a targeted campaign draws from.
    pub audience_clusters: [u32; 2],
    pub stress: Option<StressConfig>,
    pub epsilon: f64,
    pub delta: f64,
    pub capacity_hint: u64,
    pub sketch_seed: u64,
    pub ad_space: u64,
    pub oprf_key_bits: usize,
    /// Users (1-based) that go silent before reporting. Privacy pipeline only.
    pub drop: Vec<u32>,
    pub parallel: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            num_users: 500,
            num_websites: 1000,
            avg_user_visits: 138.0,
            avg_ads_per_site: 20.0,
            slot_model: SlotModel::SlotsPerView,
            num_campaigns: 500,
            targeted_fraction: 0.1,
            frequency_cap: 7,
            mode: ThresholdMode::Mean,
            weeks: 1,
            seed: 1,
            privacy: false,
            zipf_exponent: 1.0,
            interest_clusters: 10,
            favourite_sites: 30.0,
            broad_fraction: 0.15,
            broad_sites: [5, 30],
            narrow_sites: [1, 5],
            narrow_popularity_exponent: 0.5,
            audience_fraction: [0.2, 1.0],
            audience_clusters: [1, 4],
            stress: None,
            epsilon: DEFAULT_EPSILON,
            delta: DEFAULT_DELTA,
            capacity_hint: DEFAULT_CAPACITY_HINT,
            sketch_seed: 0,
            ad_space: DEFAULT_AD_SPACE,
            oprf_key_bits: 512,
            drop: Vec::new(),
            parallel: false,
        }
    }
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

impl SimConfig {
    /// Parses and validates a TOML config. Missing keys take their defaults.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: SimConfig = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((1, 1), |s| line_column(text, s.start));
            ConfigError::Parse {
                line,
                column,
                message: e.message().to_string(),
            }
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn targeted_campaigns(&self) -> u32 {
        (self.num_campaigns as f64 * self.targeted_fraction).round() as u32
    }

    pub fn static_campaigns(&self) -> u32 {
        self.num_campaigns - self.targeted_campaigns()
    }

    pub fn sketch_params(&self) -> Result<SketchParams, ConfigError> {
        SketchParams::new(self.epsilon, self.delta, self.capacity_hint, self.sketch_seed).map_err(|e| ConfigError::Invalid {
            field: "sketch",
            reason: e.to_string(),
        })
    }

    /// Harness settings for the round of `week` (0-based).
    pub fn harness_config(&self, week: u32) -> Result<HarnessConfig, ConfigError> {
        let mut h = HarnessConfig::new(self.num_users, self.sketch_params()?);
        h.ad_space = self.ad_space;
        h.seed = crate::harness::sub_seed(self.seed, "round", week as u64);
        h.drop = self.drop.iter().copied().collect::<BTreeSet<u32>>();
        h.mode = self.mode;
        h.oprf_key_bits = self.oprf_key_bits;
        h.round = week as u64 + 1;
        h.window_start = week as u64 * crate::client::WEEK_SECS;
        h.parallel = self.parallel;
        h.shared_oprf_cache = true;
        h.validate().map_err(|e| ConfigError::Invalid {
            field: "harness",
            reason: e.to_string(),
        })?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn bad<T>(field: &'static str, reason: impl Into<String>) -> Result<T, ConfigError> {
            Err(ConfigError::Invalid {
                field,
                reason: reason.into(),
            })
        }
        let unit = |field: &'static str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                bad(field, format!("{v} is outside [0, 1]"))
            }
        };
        let range = |field: &'static str, r: [u32; 2]| {
            if r[0] >= 1 && r[0] <= r[1] {
                Ok(())
            } else {
                bad(field, format!("[{}, {}] is not a range of positive integers", r[0], r[1]))
            }
        };
        if self.num_users == 0 {
            return bad("num_users", "must be at least 1");
        }
        if self.num_websites == 0 {
            return bad("num_websites", "must be at least 1");
        }
        if !(self.avg_user_visits > 0.0 && self.avg_user_visits.is_finite()) {
            return bad("avg_user_visits", "must be positive");
        }
        if !(self.avg_ads_per_site > 0.0 && self.avg_ads_per_site.is_finite()) {
            return bad("avg_ads_per_site", "must be positive");
        }
        unit("targeted_fraction", self.targeted_fraction)?;
        if self.static_campaigns() == 0 {
            return bad("num_campaigns", "no static campaigns left");
        }
        if self.weeks == 0 {
            return bad("weeks", "must be at least 1");
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return bad("zipf_exponent", "must be non-negative");
        }
        if self.interest_clusters == 0 {
            return bad("interest_clusters", "must be at least 1");
        }
        if !(self.favourite_sites >= 0.0 && self.favourite_sites.is_finite()) {
            return bad("favourite_sites", "must be non-negative");
        }
        unit("broad_fraction", self.broad_fraction)?;
        range("broad_sites", self.broad_sites)?;
        range("narrow_sites", self.narrow_sites)?;
        if !(self.narrow_popularity_exponent >= 0.0 && self.narrow_popularity_exponent.is_finite()) {
            return bad("narrow_popularity_exponent", "must be non-negative");
        }
        let [lo, hi] = self.audience_fraction;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad("audience_fraction", format!("[{lo}, {hi}] is not a range inside (0, 1]"));
        }
        range("audience_clusters", self.audience_clusters)?;
        if let Some(s) = &self.stress {
            unit("stress.user_fraction", s.user_fraction)?;
            if s.sites == 0 || s.sites > self.num_websites {
                return bad("stress.sites", format!("must be in 1..={}", self.num_websites));
            }
            if s.campaigns == 0 || s.campaigns > self.static_campaigns() {
                return bad("stress.campaigns", format!("must be in 1..={}", self.static_campaigns()));
            }
        }
        self.sketch_params()?;
        if self.ad_space == 0 {
            return bad("ad_space", "must be at least 1");
        }
        if self.oprf_key_bits < 64 || self.oprf_key_bits % 2 != 0 {
            return bad("oprf_key_bits", format!("unsupported key size {}", self.oprf_key_bits));
        }
        let mut seen = BTreeSet::new();
        for &u in &self.drop {
            if u == 0 || u > self.num_users {
                return bad("drop", format!("index {u} is outside 1..={}", self.num_users));
            }
            if !seen.insert(u) {
                return bad("drop", format!("index {u} listed twice"));
            }
        }
        if seen.len() as u32 == self.num_users {
            return bad("drop", "every user is dropped");
        }
        Ok(())
    }
}
