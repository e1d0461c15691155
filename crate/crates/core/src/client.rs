//! Per-user weekly state: observations, per-ad domain counts, the local
//! threshold, the user's sketch, and classification.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use crate::blinding::{blind_cells, BlindedReport, BlindingError, PeerSecrets};
use crate::oprf::{AdId, OprfClient, OprfError, OprfTransport};
use crate::sketch::{CountMinSketch, SketchParams};
use crate::threshold::{Threshold, ThresholdMode};

pub const WEEK_SECS: u64 = 7 * 24 * 3600;

/// Below this many distinct ad-serving domains in the window a user has no
/// local threshold.
pub const MIN_AD_SERVING_DOMAINS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ClientError {
    #[error("observation at {timestamp} precedes the window starting at {window_start}")]
    Stale { timestamp: u64, window_start: u64 },
    #[error("observation at {timestamp} is past the window ending at {window_end}")]
    BeyondWindow { timestamp: u64, window_end: u64 },
    #[error("the window was closed by a report; advance it first")]
    WindowClosed,
    #[error("no report has been built in this window")]
    NoReport,
    #[error("ad key is empty")]
    EmptyAdKey,
    #[error("domain is empty")]
    EmptyDomain,
    #[error("line {line}: {reason}")]
    Replay { line: usize, reason: String },
    #[error(transparent)]
    Oprf(#[from] OprfError),
    #[error(transparent)]
    Blinding(#[from] BlindingError),
}

/// Canonical identity of an ad: its landing URL, or a content key such as
/// the creative's image URL.
///
/// Strings that parse as absolute URLs get a lowercase scheme and host and
/// lose their fragment; anything else is only trimmed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AdKey(Arc<str>);

impl AdKey {
    pub fn new(raw: &str) -> Result<Self, ClientError> {
        let raw = raw.trim();
        if raw.is_empty() {
            return Err(ClientError::EmptyAdKey);
        }
        let canonical = match url::Url::parse(raw) {
            Ok(mut u) if u.has_host() => {
                u.set_fragment(None);
                u.to_string()
            }
            _ => raw.to_string(),
        };
        Ok(AdKey(canonical.into()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AdKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Lowercases, drops scheme, path, port and trailing dot, and strips one
/// leading `www.`.
pub fn canonical_domain(raw: &str) -> Result<String, ClientError> {
    let mut s = raw.trim().to_ascii_lowercase();
    if let Some(pos) = s.find("://") {
        s.drain(..pos + 3);
    }
    if let Some(pos) = s.find(['/', '?', '#']) {
        s.truncate(pos);
    }
    if let Some(pos) = s.rfind('@') {
        s.drain(..=pos);
    }
    if let Some(pos) = s.find(':') {
        s.truncate(pos);
    }
    let s = s.trim_end_matches('.');
    let s = s.strip_prefix("www.").unwrap_or(s);
    if s.is_empty() {
        return Err(ClientError::EmptyDomain);
    }
    Ok(s.to_string())
}

/// One ad impression seen by a user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdObservation {
    pub ad: AdKey,
    pub domain: Arc<str>,
    pub timestamp: u64,
}

impl AdObservation {
    pub fn new(ad: &str, domain: &str, timestamp: u64) -> Result<Self, ClientError> {
        Ok(Self {
            ad: AdKey::new(ad)?,
            domain: canonical_domain(domain)?.into(),
            timestamp,
        })
    }
}

/// Parses an observation replay file: one `timestamp domain ad-key` record
/// per line, whitespace separated. Blank lines and `#` comments are skipped.
pub fn parse_replay(text: &str) -> Result<Vec<AdObservation>, ClientError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: String| ClientError::Replay { line: i + 1, reason };
        let mut parts = line.split_whitespace();
        let (Some(ts), Some(domain), Some(ad)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(err("expected `timestamp domain ad-key`".into()));
        };
        if parts.next().is_some() {
            return Err(err("trailing fields after the ad key".into()));
        }
        let ts: u64 = ts.parse().map_err(|_| err(format!("bad timestamp `{ts}`")))?;
        out.push(AdObservation::new(ad, domain, ts).map_err(|e| err(e.to_string()))?);
    }
    Ok(out)
}

/// Supplies ad IDs for ad keys seen for the first time.
pub trait AdIdMapper {
    fn ad_id(&mut self, key: &AdKey) -> Result<AdId, OprfError>;
}

/// Maps through the OPRF protocol over `transport`.
pub struct OprfMapper<'a, T: OprfTransport + ?Sized> {
    pub client: &'a mut OprfClient,
    pub transport: &'a mut T,
}

impl<T: OprfTransport + ?Sized> AdIdMapper for OprfMapper<'_, T> {
    fn ad_id(&mut self, key: &AdKey) -> Result<AdId, OprfError> {
        self.client.map_url(key.as_str(), self.transport)
    }
}

/// Outcome of classifying one ad for one user.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Decision {
    Targeted,
    NonTargeted,
    InsufficientData,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Targeted => "targeted",
            Decision::NonTargeted => "non-targeted",
            Decision::InsufficientData => "insufficient-data",
        }
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Targeted iff `domains_count > domains_th` and `users_count < users_th`.
/// Counts exactly at a threshold are not targeted.
pub fn decide(
    domains_count: u64,
    domains_th: Option<Threshold>,
    users_count: u64,
    users_th: Threshold,
) -> Decision {
    match domains_th {
        None => Decision::InsufficientData,
        Some(th) if th.exceeded_by(domains_count) && users_th.above(users_count) => Decision::Targeted,
        Some(_) => Decision::NonTargeted,
    }
}

/// A user's record for one tumbling one-week window.
#[derive(Debug, Clone)]
pub struct ClientWeekState {
    window_start: u64,
    ads: BTreeMap<AdKey, BTreeSet<Arc<str>>>,
    serving_domains: BTreeSet<Arc<str>>,
    sketch: CountMinSketch,
    ids: HashMap<AdKey, AdId>,
    insertions: u64,
    reported: Option<CountMinSketch>,
}

impl ClientWeekState {
    pub fn new(params: SketchParams, window_start: u64) -> Self {
        Self {
            window_start,
            ads: BTreeMap::new(),
            serving_domains: BTreeSet::new(),
            sketch: CountMinSketch::with_params(params),
            ids: HashMap::new(),
            insertions: 0,
            reported: None,
        }
    }

    pub fn window_start(&self) -> u64 {
        self.window_start
    }

    pub fn window_end(&self) -> u64 {
        self.window_start + WEEK_SECS
    }

    pub fn sketch(&self) -> &CountMinSketch {
        &self.sketch
    }

    /// Sketch updates made in this window.
    pub fn insertions(&self) -> u64 {
        self.insertions
    }

    pub fn ad_id(&self, ad: &AdKey) -> Option<AdId> {
        self.ids.get(ad).copied()
    }

    /// Distinct ads seen in the window, in key order.
    pub fn ads(&self) -> impl Iterator<Item = &AdKey> {
        self.ads.keys()
    }

    pub fn serving_domain_count(&self) -> usize {
        self.serving_domains.len()
    }

    /// Adds the impression to the window. The first sighting of an ad in the
    /// window inserts its ID into the sketch; the ID itself is looked up once
    /// per ad key for the lifetime of the state.
    pub fn record_observation<M: AdIdMapper + ?Sized>(
        &mut self,
        obs: &AdObservation,
        mapper: &mut M,
    ) -> Result<(), ClientError> {
        if self.reported.is_some() {
            return Err(ClientError::WindowClosed);
        }
        if obs.timestamp < self.window_start {
            return Err(ClientError::Stale {
                timestamp: obs.timestamp,
                window_start: self.window_start,
            });
        }
        if obs.timestamp >= self.window_end() {
            return Err(ClientError::BeyondWindow {
                timestamp: obs.timestamp,
                window_end: self.window_end(),
            });
        }
        if !self.ads.contains_key(&obs.ad) {
            let id = match self.ids.get(&obs.ad) {
                Some(id) => *id,
                None => {
                    let id = mapper.ad_id(&obs.ad)?;
                    self.ids.insert(obs.ad.clone(), id);
                    id
                }
            };
            self.sketch.update(id);
            self.insertions += 1;
        }
        self.ads
            .entry(obs.ad.clone())
            .or_default()
            .insert(obs.domain.clone());
        self.serving_domains.insert(obs.domain.clone());
        Ok(())
    }

    pub fn domains_count(&self, ad: &AdKey) -> u64 {
        self.ads.get(ad).map_or(0, |d| d.len() as u64)
    }

    /// Per-ad domain counts over every distinct ad in the window.
    pub fn domain_counts(&self) -> Vec<u64> {
        self.ads.values().map(|d| d.len() as u64).collect()
    }

    /// `None` when fewer than [`MIN_AD_SERVING_DOMAINS`] ad-serving domains
    /// were visited in the window.
    pub fn domains_threshold(&self, mode: ThresholdMode) -> Option<Threshold> {
        if self.serving_domains.len() < MIN_AD_SERVING_DOMAINS {
            return None;
        }
        mode.apply(&self.domain_counts())
    }

    pub fn classify(
        &self,
        ad: &AdKey,
        users_count: u64,
        users_th: Threshold,
        mode: ThresholdMode,
    ) -> Decision {
        decide(
            self.domains_count(ad),
            self.domains_threshold(mode),
            users_count,
            users_th,
        )
    }

    /// Blinds the window's sketch for the full roster and closes the window.
    /// The plain sketch is kept so an adjusted report can be built if peers
    /// drop out; the live sketch is reset.
    pub fn build_report(&mut self, secrets: &PeerSecrets) -> Result<BlindedReport, ClientError> {
        if self.reported.is_some() {
            return Err(ClientError::WindowClosed);
        }
        let bv = secrets.vector(self.sketch.cells().len(), &BTreeSet::new(), 0)?;
        let report = blind_cells(&self.sketch, &bv)?;
        let fresh = CountMinSketch::with_params(self.sketch.params().clone());
        self.reported = Some(std::mem::replace(&mut self.sketch, fresh));
        Ok(report)
    }

    /// Re-blinds the reported sketch over the roster minus `missing`.
    pub fn adjusted_report(
        &self,
        secrets: &PeerSecrets,
        missing: &BTreeSet<u32>,
        retry: u32,
    ) -> Result<BlindedReport, ClientError> {
        let sketch = self.reported.as_ref().ok_or(ClientError::NoReport)?;
        let bv = secrets.vector(sketch.cells().len(), missing, retry)?;
        Ok(blind_cells(sketch, &bv)?)
    }

    /// Starts the next week: every count is dropped, the ID cache is kept.
    pub fn advance_window(&mut self) {
        self.window_start += WEEK_SECS;
        self.ads.clear();
        self.serving_domains.clear();
        self.sketch.clear();
        self.insertions = 0;
        self.reported = None;
    }
}
