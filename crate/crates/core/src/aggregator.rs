//! Server side of a weekly round: report collection, the dropout adjustment,
//! unblinding, and the global users threshold.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::blinding::{unblind_aggregate, BlindedReport, BlindingError, RoundTag};
use crate::oprf::AdId;
use crate::sketch::{CountMinSketch, SketchParams};
use crate::threshold::{Threshold, ThresholdMode};

/// Adjustment rounds allowed after the original collection.
pub const DEFAULT_MAX_RETRIES: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AggregatorError {
    #[error("report for round {found} while collecting round {expected}")]
    WrongRound { expected: RoundTag, found: RoundTag },
    #[error("user {0} is not an expected sender in this phase")]
    UnknownSender(u32),
    #[error("user {0} already reported in this phase")]
    DuplicateReport(u32),
    #[error("report from user {user} does not fit the round's sketch: {reason}")]
    ShapeMismatch { user: u32, reason: String },
    #[error("round is finalized")]
    Finalized,
    #[error("round is not finalized")]
    NotFinalized,
    #[error("round has no participants")]
    EmptyRound,
    #[error("reports missing from users {missing:?}")]
    IncompleteRoster { missing: Vec<u32> },
    #[error("users {missing:?} still missing after {retries} adjustment round(s)")]
    RetriesExhausted { missing: Vec<u32>, retries: u32 },
    #[error("users distribution is empty")]
    EmptyDistribution,
    #[error(transparent)]
    Blinding(#[from] BlindingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Collecting,
    Adjusting,
    Finalized,
}

/// One round as seen by the aggregator.
///
/// The lifecycle is `Collecting -> (Adjusting)* -> Finalized`. Each call to
/// [`RoundState::detect_missing`] that finds silent users drops them for the
/// rest of the round, discards the reports collected so far and opens an
/// adjustment phase with a fresh retry tag.
#[derive(Debug, Clone)]
pub struct RoundState {
    round: u64,
    roster: Vec<u32>,
    params: SketchParams,
    phase: Phase,
    retry: u32,
    max_retries: u32,
    dropped: BTreeSet<u32>,
    reports: BTreeMap<u32, BlindedReport>,
    aggregate: Option<CountMinSketch>,
}

impl RoundState {
    pub fn new(round: u64, roster: impl IntoIterator<Item = u32>, params: SketchParams) -> Self {
        let mut roster: Vec<u32> = roster.into_iter().collect();
        roster.sort_unstable();
        roster.dedup();
        Self {
            round,
            roster,
            params,
            phase: Phase::Collecting,
            retry: 0,
            max_retries: DEFAULT_MAX_RETRIES,
            dropped: BTreeSet::new(),
            reports: BTreeMap::new(),
            aggregate: None,
        }
    }

    pub fn with_max_retries(mut self, max_retries: u32) -> Self {
        self.max_retries = max_retries;
        self
    }

    pub fn tag(&self) -> RoundTag {
        RoundTag::new(self.round).with_retry(self.retry)
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn params(&self) -> &SketchParams {
        &self.params
    }

    pub fn dropped(&self) -> &BTreeSet<u32> {
        &self.dropped
    }

    /// Roster members still expected to report.
    pub fn expected(&self) -> Vec<u32> {
        self.roster
            .iter()
            .copied()
            .filter(|u| !self.dropped.contains(u))
            .collect()
    }

    pub fn received(&self) -> usize {
        self.reports.len()
    }

    pub fn is_complete(&self) -> bool {
        self.expected().iter().all(|u| self.reports.contains_key(u))
    }

    pub fn collect(&mut self, report: BlindedReport) -> Result<(), AggregatorError> {
        if self.phase == Phase::Finalized {
            return Err(AggregatorError::Finalized);
        }
        if report.tag != self.tag() {
            return Err(AggregatorError::WrongRound {
                expected: self.tag(),
                found: report.tag,
            });
        }
        if self.roster.binary_search(&report.user).is_err() || self.dropped.contains(&report.user) {
            return Err(AggregatorError::UnknownSender(report.user));
        }
        if self.reports.contains_key(&report.user) {
            return Err(AggregatorError::DuplicateReport(report.user));
        }
        let shape = |reason: &str| AggregatorError::ShapeMismatch {
            user: report.user,
            reason: reason.into(),
        };
        if report.params_digest != self.params.digest() {
            return Err(shape("sketch parameters differ"));
        }
        if report.cells.len() != self.params.cell_count() {
            return Err(shape("cell count differs"));
        }
        self.reports.insert(report.user, report);
        Ok(())
    }

    /// Called at the collection deadline. Returns the sorted list of silent
    /// users; when it is non-empty they are dropped and an adjustment phase
    /// starts.
    pub fn detect_missing(&mut self) -> Result<Vec<u32>, AggregatorError> {
        if self.phase == Phase::Finalized {
            return Err(AggregatorError::Finalized);
        }
        let missing: Vec<u32> = self
            .expected()
            .into_iter()
            .filter(|u| !self.reports.contains_key(u))
            .collect();
        if missing.is_empty() {
            return Ok(missing);
        }
        if self.retry >= self.max_retries {
            return Err(AggregatorError::RetriesExhausted {
                missing,
                retries: self.retry,
            });
        }
        self.dropped.extend(missing.iter().copied());
        self.reports.clear();
        self.retry += 1;
        self.phase = Phase::Adjusting;
        Ok(missing)
    }

    /// Sums the reports of every expected user; the masks cancel and the
    /// result is the plain sum of their sketches.
    pub fn finalize_round(&mut self) -> Result<&CountMinSketch, AggregatorError> {
        if self.phase == Phase::Finalized {
            return Err(AggregatorError::Finalized);
        }
        let expected = self.expected();
        if expected.is_empty() {
            return Err(AggregatorError::EmptyRound);
        }
        let missing: Vec<u32> = expected
            .iter()
            .copied()
            .filter(|u| !self.reports.contains_key(u))
            .collect();
        if !missing.is_empty() {
            return Err(AggregatorError::IncompleteRoster { missing });
        }
        let reports: Vec<BlindedReport> = std::mem::take(&mut self.reports).into_values().collect();
        let aggregate = unblind_aggregate(&reports, &self.params, &expected)?;
        self.phase = Phase::Finalized;
        Ok(self.aggregate.insert(aggregate))
    }

    pub fn aggregate(&self) -> Option<&CountMinSketch> {
        self.aggregate.as_ref()
    }

    /// Estimated number of users who saw `id`: the aggregate's query.
    pub fn users_count(&self, id: AdId) -> Result<u32, AggregatorError> {
        Ok(self.aggregate.as_ref().ok_or(AggregatorError::NotFinalized)?.query(id))
    }

    pub fn broadcast_threshold(
        &self,
        users_th: Threshold,
        mode: ThresholdMode,
        dist: &UsersDistribution,
    ) -> Result<ThresholdBroadcast, AggregatorError> {
        if self.phase != Phase::Finalized {
            return Err(AggregatorError::NotFinalized);
        }
        Ok(ThresholdBroadcast {
            tag: self.tag(),
            users_th,
            mode,
            distinct_ads: dist.len() as u64,
        })
    }
}

/// Where a users distribution came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Cleartext,
    Sketch,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Cleartext => "cleartext",
            Source::Sketch => "sketch",
        })
    }
}

/// Per-ad user counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsersDistribution {
    counts: BTreeMap<AdId, u32>,
    probed: u64,
    source: Source,
}

impl UsersDistribution {
    /// Queries every ID in `[1, ad_space]` and keeps those with an estimate
    /// of at least one.
    pub fn from_sketch(aggregate: &CountMinSketch, ad_space: u64) -> Self {
        let counts = (1..=ad_space)
            .map(AdId::new)
            .filter_map(|id| {
                let c = aggregate.query(id);
                (c >= 1).then_some((id, c))
            })
            .collect();
        Self {
            counts,
            probed: ad_space,
            source: Source::Sketch,
        }
    }

    /// Exact counts; zero entries are dropped.
    pub fn from_cleartext(counts: impl IntoIterator<Item = (AdId, u32)>) -> Self {
        let counts: BTreeMap<AdId, u32> = counts.into_iter().filter(|(_, c)| *c >= 1).collect();
        Self {
            probed: counts.len() as u64,
            counts,
            source: Source::Cleartext,
        }
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn probed(&self) -> u64 {
        self.probed
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn get(&self, id: AdId) -> u32 {
        self.counts.get(&id).copied().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (AdId, u32)> + '_ {
        self.counts.iter().map(|(k, v)| (*k, *v))
    }

    pub fn values(&self) -> Vec<u64> {
        self.counts.values().map(|&c| c as u64).collect()
    }

    pub fn users_threshold(&self, mode: ThresholdMode) -> Result<Threshold, AggregatorError> {
        mode.apply(&self.values()).ok_or(AggregatorError::EmptyDistribution)
    }
}

/// Aggregate-side threshold announcement for one round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThresholdBroadcast {
    pub tag: RoundTag,
    pub users_th: Threshold,
    pub mode: ThresholdMode,
    pub distinct_ads: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blinding::{DhGroup, PeerSecrets, Roster, RosterEntry, ToySafePrimeGroup, UserKeyPair};
    use crate::blinding::blind_cells;

    struct Setup {
        secrets: Vec<PeerSecrets>,
        sketches: Vec<CountMinSketch>,
        params: SketchParams,
    }

    fn setup(n: u32) -> Setup {
        let params = SketchParams::new(0.05, 0.05, 100, 9).unwrap();
        let keys: Vec<UserKeyPair<ToySafePrimeGroup>> =
            (1..=n).map(|i| UserKeyPair::generate(i, 77 + i as u64)).collect();
        let roster = Roster::new(
            4,
            ToySafePrimeGroup::NAME,
            keys.iter()
                .map(|k| RosterEntry {
                    index: k.index(),
                    public_key: k.public_bytes(),
                })
                .collect(),
        )
        .unwrap();
        let secrets = keys.iter().map(|k| PeerSecrets::derive(k, &roster).unwrap()).collect();
        let sketches = (1..=n)
            .map(|i| {
                let mut s = CountMinSketch::with_params(params.clone());
                s.update(AdId::new(1));
                s.update(AdId::new(100 + i as u64));
                s
            })
            .collect();
        Setup {
            secrets,
            sketches,
            params,
        }
    }

    fn report(s: &Setup, user: u32, missing: &BTreeSet<u32>, retry: u32) -> BlindedReport {
        let i = user as usize - 1;
        let bv = s.secrets[i]
            .vector(s.params.cell_count(), missing, retry)
            .unwrap();
        blind_cells(&s.sketches[i], &bv).unwrap()
    }

    fn plain_merge(s: &Setup, users: &[u32]) -> CountMinSketch {
        let mut acc = CountMinSketch::with_params(s.params.clone());
        for &u in users {
            acc.merge_from(&s.sketches[u as usize - 1]).unwrap();
        }
        acc
    }

    #[test]
    fn full_round() {
        let s = setup(5);
        let mut round = RoundState::new(4, 1..=5, s.params.clone());
        let none = BTreeSet::new();
        for u in [3, 1, 5, 2, 4] {
            round.collect(report(&s, u, &none, 0)).unwrap();
        }
        assert_eq!(
            round.collect(report(&s, 2, &none, 0)),
            Err(AggregatorError::DuplicateReport(2))
        );
        assert!(round.is_complete());
        assert_eq!(round.detect_missing().unwrap(), Vec::<u32>::new());
        let agg = round.finalize_round().unwrap().clone();
        assert_eq!(agg, plain_merge(&s, &[1, 2, 3, 4, 5]));
        assert_eq!(round.users_count(AdId::new(1)).unwrap(), 5);
        assert_eq!(round.phase(), Phase::Finalized);
        assert_eq!(
            round.collect(report(&s, 1, &none, 0)),
            Err(AggregatorError::Finalized)
        );
    }

    #[test]
    fn collection_rejections() {
        let s = setup(3);
        let mut round = RoundState::new(5, 1..=3, s.params.clone());
        let stale = report(&s, 1, &BTreeSet::new(), 0);
        assert!(matches!(round.collect(stale), Err(AggregatorError::WrongRound { .. })));
        let mut outsider = report(&s, 1, &BTreeSet::new(), 0);
        outsider.tag = round.tag();
        outsider.user = 9;
        assert_eq!(round.collect(outsider), Err(AggregatorError::UnknownSender(9)));
        let mut short = report(&s, 1, &BTreeSet::new(), 0);
        short.tag = round.tag();
        short.cells.pop();
        assert!(matches!(round.collect(short), Err(AggregatorError::ShapeMismatch { .. })));
    }

    #[test]
    fn dropout_adjustment() {
        let s = setup(8);
        let mut round = RoundState::new(4, 1..=8, s.params.clone());
        let none = BTreeSet::new();
        for u in [1, 2, 4, 5, 6, 8] {
            round.collect(report(&s, u, &none, 0)).unwrap();
        }
        assert!(matches!(
            round.clone().finalize_round(),
            Err(AggregatorError::IncompleteRoster { missing }) if missing == vec![3, 7]
        ));
        assert_eq!(round.detect_missing().unwrap(), vec![3, 7]);
        assert_eq!(round.phase(), Phase::Adjusting);
        assert_eq!(round.tag(), RoundTag::new(4).with_retry(1));
        let missing: BTreeSet<u32> = [3, 7].into();
        assert_eq!(
            round.collect(report(&s, 3, &BTreeSet::new(), 1)),
            Err(AggregatorError::UnknownSender(3))
        );
        for u in [8, 6, 5, 4, 2, 1] {
            round.collect(report(&s, u, &missing, 1)).unwrap();
        }
        let agg = round.finalize_round().unwrap();
        assert_eq!(agg, &plain_merge(&s, &[1, 2, 4, 5, 6, 8]));
    }

    #[test]
    fn second_dropout_exhausts_retries() {
        let s = setup(4);
        let mut round = RoundState::new(4, 1..=4, s.params.clone());
        for u in [1, 2, 3] {
            round.collect(report(&s, u, &BTreeSet::new(), 0)).unwrap();
        }
        round.detect_missing().unwrap();
        let missing: BTreeSet<u32> = [4].into();
        round.collect(report(&s, 1, &missing, 1)).unwrap();
        assert_eq!(
            round.detect_missing(),
            Err(AggregatorError::RetriesExhausted {
                missing: vec![2, 3],
                retries: 1
            })
        );
    }

    #[test]
    fn single_and_empty_rounds() {
        let s = setup(1);
        let mut round = RoundState::new(4, [1], s.params.clone());
        round.collect(report(&s, 1, &BTreeSet::new(), 0)).unwrap();
        assert_eq!(round.finalize_round().unwrap(), &s.sketches[0]);
        let mut empty = RoundState::new(4, [], s.params.clone());
        assert_eq!(empty.finalize_round(), Err(AggregatorError::EmptyRound));
    }

    #[test]
    fn distribution_and_threshold() {
        let s = setup(2);
        let agg = plain_merge(&s, &[1, 2]);
        let dist = UsersDistribution::from_sketch(&agg, 200);
        assert_eq!(dist.get(AdId::new(1)), 2);
        assert!(dist.get(AdId::new(101)) >= 1 && dist.get(AdId::new(102)) >= 1);
        for id in [1, 101, 102] {
            assert!(dist.get(AdId::new(id)) >= 1);
        }
        let clear = UsersDistribution::from_cleartext([(AdId::new(1), 2), (AdId::new(101), 1), (AdId::new(102), 1)]);
        for (id, c) in clear.iter() {
            assert!(dist.get(id) >= c);
        }
        let empty = UsersDistribution::from_sketch(&CountMinSketch::with_params(s.params.clone()), 200);
        assert!(empty.is_empty());
        assert_eq!(
            empty.users_threshold(ThresholdMode::Mean),
            Err(AggregatorError::EmptyDistribution)
        );
        let hand = UsersDistribution::from_cleartext([(AdId::new(1), 1), (AdId::new(2), 1), (AdId::new(3), 4)]);
        assert_eq!(hand.users_threshold(ThresholdMode::Mean), Ok(Threshold::from_integer(2)));
        assert_eq!(
            hand.users_threshold(ThresholdMode::MeanPlusMedian),
            Ok(Threshold::from_integer(3))
        );
    }
}
