//! Deterministic in-process execution of a complete weekly round between N
//! clients, the aggregator and the oprf-server.
//!
//! Every protocol message is encoded to its wire form, logged in the
//! transcript and decoded by the receiver. Report delivery order comes from a
//! seeded scheduler, or from a recorded transcript when replaying.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::aggregator::{AggregatorError, RoundState, UsersDistribution};
use crate::blinding::{BlindingError, DhGroup, PeerSecrets, Ristretto255, Roster, RosterEntry, RoundTag, UserKeyPair};
use crate::client::{AdKey, AdObservation, ClientError, ClientWeekState, Decision, OprfMapper};
use crate::oprf::{AdId, LocalOprfServer, OprfClient, OprfError, OprfServerKey, OprfTransport, DEFAULT_AD_SPACE};
use crate::sketch::{CountMinSketch, SketchParams};
use crate::threshold::{Threshold, ThresholdMode};
use crate::wire::{self, Message, MessageKind, WireError};

/// Message kinds the aggregator may receive. Nothing else crosses from a
/// client to the aggregator.
pub const AGGREGATOR_INBOX: [MessageKind; 4] = [
    MessageKind::KeyAnnounce,
    MessageKind::Report,
    MessageKind::AdjustedReport,
    MessageKind::UsersCountRequest,
];

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("client {user}: {source}")]
    Client { user: u32, source: ClientError },
    #[error(transparent)]
    Aggregator(#[from] AggregatorError),
    #[error(transparent)]
    Blinding(#[from] BlindingError),
    #[error(transparent)]
    Oprf(#[from] OprfError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("{kind} sent to the aggregator")]
    PrivacyViolation { kind: MessageKind },
    #[error("replay diverged at step {step}: {reason}")]
    ReplayDivergence { step: usize, reason: String },
}

#[derive(Debug, Clone)]
pub struct HarnessConfig {
    pub num_users: u32,
    pub sketch: SketchParams,
    pub ad_space: u64,
    pub seed: u64,
    /// Users that go silent after the observation phase.
    pub drop: BTreeSet<u32>,
    pub mode: ThresholdMode,
    pub oprf_key_bits: usize,
    pub round: u64,
    pub window_start: u64,
    /// Compute key agreements and blinding vectors on the rayon pool.
    pub parallel: bool,
    /// One OPRF cache for all clients. The ID of a URL does not depend on
    /// who asks, so this only removes repeated exchanges.
    pub shared_oprf_cache: bool,
    /// Keep full message bytes in the transcript.
    pub capture_payloads: bool,
}

impl HarnessConfig {
    pub fn new(num_users: u32, sketch: SketchParams) -> Self {
        Self {
            num_users,
            sketch,
            ad_space: DEFAULT_AD_SPACE,
            seed: 0,
            drop: BTreeSet::new(),
            mode: ThresholdMode::Mean,
            oprf_key_bits: 1024,
            round: 1,
            window_start: 0,
            parallel: false,
            shared_oprf_cache: false,
            capture_payloads: false,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let err = |m: String| Err(HarnessError::Config(m));
        if self.num_users == 0 {
            return err("num_users must be at least 1".into());
        }
        if let Some(bad) = self.drop.iter().find(|&&u| u == 0 || u > self.num_users) {
            return err(format!("drop index {bad} is outside 1..={}", self.num_users));
        }
        if self.drop.len() as u32 == self.num_users {
            return err("every user is in the drop set".into());
        }
        if self.ad_space == 0 {
            return err("ad_space must be at least 1".into());
        }
        if self.oprf_key_bits < 64 || self.oprf_key_bits % 2 != 0 {
            return err(format!("unsupported OPRF key size {}", self.oprf_key_bits));
        }
        Ok(())
    }
}

/// Protocol participants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Party {
    Client(u32),
    Aggregator,
    OprfServer,
    /// Every client, through the bulletin board.
    AllClients,
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Party::Client(i) => write!(f, "client-{i}"),
            Party::Aggregator => f.write_str("aggregator"),
            Party::OprfServer => f.write_str("oprf-server"),
            Party::AllClients => f.write_str("all-clients"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptRecord {
    pub round: u64,
    pub step: usize,
    pub sender: Party,
    pub receiver: Party,
    pub kind: MessageKind,
    pub bytes: usize,
    pub digest: [u8; 32],
    pub payload: Option<Vec<u8>>,
}

/// Ordered log of every message in a round.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    pub records: Vec<TranscriptRecord>,
}

impl Transcript {
    /// One tab-separated line per message:
    /// `round step sender receiver kind bytes sha256`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.round,
                r.step,
                r.sender,
                r.receiver,
                r.kind,
                r.bytes,
                hex::encode(r.digest)
            ));
        }
        out
    }

    /// Kinds of every message addressed to the aggregator.
    pub fn aggregator_inbox(&self) -> BTreeSet<MessageKind> {
        self.records
            .iter()
            .filter(|r| r.receiver == Party::Aggregator)
            .map(|r| r.kind)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct KindStats {
    pub count: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdDecision {
    pub ad: AdKey,
    pub ad_id: AdId,
    pub domains_count: u64,
    pub users_count: u32,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserDecisions {
    pub user: u32,
    pub domains_th: Option<Threshold>,
    pub ads: Vec<AdDecision>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub aggregate: CountMinSketch,
    pub distribution: UsersDistribution,
    /// `None` when nobody saw any ad.
    pub users_th: Option<Threshold>,
    pub missing: Vec<u32>,
    /// One entry per user that stayed in the round, in index order.
    pub decisions: Vec<UserDecisions>,
    pub stats: BTreeMap<MessageKind, KindStats>,
    pub transcript: Transcript,
}

impl RoundOutcome {
    pub fn count(&self, kind: MessageKind) -> u64 {
        self.stats.get(&kind).map_or(0, |s| s.count)
    }

    pub fn bytes(&self, kind: MessageKind) -> u64 {
        self.stats.get(&kind).map_or(0, |s| s.bytes)
    }
}

/// Derives an independent seed for one purpose from the run seed.
pub fn sub_seed(seed: u64, label: &str, index: u64) -> u64 {
    let d = Sha256::new()
        .chain_update(b"adcensus/harness-seed/v1")
        .chain_update(seed.to_le_bytes())
        .chain_update((label.len() as u32).to_le_bytes())
        .chain_update(label.as_bytes())
        .chain_update(index.to_le_bytes())
        .finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

enum Scheduler<'a> {
    Seeded(ChaCha8Rng),
    Replay(&'a Transcript),
}

impl Scheduler<'_> {
    /// Delivery order for one batch of messages of `kind` from `senders`.
    fn order(&mut self, round: u64, kind: MessageKind, senders: &[Party]) -> Result<Vec<usize>, HarnessError> {
        match self {
            Scheduler::Seeded(rng) => {
                let mut idx: Vec<usize> = (0..senders.len()).collect();
                idx.shuffle(rng);
                Ok(idx)
            }
            Scheduler::Replay(t) => {
                let recorded: Vec<&TranscriptRecord> = t
                    .records
                    .iter()
                    .filter(|r| r.kind == kind && r.round == round)
                    .collect();
                let diverged = |reason: String| HarnessError::ReplayDivergence {
                    step: recorded.first().map_or(0, |r| r.step),
                    reason,
                };
                if recorded.len() != senders.len() {
                    return Err(diverged(format!(
                        "{} {kind} messages recorded, {} produced",
                        recorded.len(),
                        senders.len()
                    )));
                }
                let mut used = vec![false; senders.len()];
                recorded
                    .iter()
                    .map(|r| {
                        let i = senders
                            .iter()
                            .position(|s| *s == r.sender)
                            .filter(|&i| !used[i])
                            .ok_or_else(|| diverged(format!("unexpected {kind} from {}", r.sender)))?;
                        used[i] = true;
                        Ok(i)
                    })
                    .collect()
            }
        }
    }
}

struct Bus {
    round: u64,
    capture: bool,
    records: Vec<TranscriptRecord>,
    stats: BTreeMap<MessageKind, KindStats>,
}

impl Bus {
    /// Encodes, logs and decodes one message, returning what the receiver
    /// reads.
    fn send(&mut self, sender: Party, receiver: Party, tag: RoundTag, msg: &Message) -> Result<Message, HarnessError> {
        let kind = msg.kind();
        if receiver == Party::Aggregator && !AGGREGATOR_INBOX.contains(&kind) {
            return Err(HarnessError::PrivacyViolation { kind });
        }
        let bytes = wire::encode(tag, msg);
        let stats = self.stats.entry(kind).or_default();
        stats.count += 1;
        stats.bytes += bytes.len() as u64;
        let (_, decoded) = wire::decode(&bytes)?;
        self.records.push(TranscriptRecord {
            round: self.round,
            step: self.records.len(),
            sender,
            receiver,
            kind,
            bytes: bytes.len(),
            digest: Sha256::digest(&bytes).into(),
            payload: self.capture.then_some(bytes),
        });
        Ok(decoded)
    }
}

/// Carries one client's OPRF exchanges over the bus.
struct BusTransport<'a> {
    bus: &'a mut Bus,
    server: &'a mut LocalOprfServer,
    user: u32,
    tag: RoundTag,
}

impl OprfTransport for BusTransport<'_> {
    fn exchange(&mut self, request: &[u8]) -> Result<Vec<u8>, OprfError> {
        let to_transport = |e: HarnessError| OprfError::Transport {
            reason: e.to_string(),
            retryable: false,
        };
        let msg = Message::OprfRequest { element: request.to_vec() };
        let Message::OprfRequest { element } = self
            .bus
            .send(Party::Client(self.user), Party::OprfServer, self.tag, &msg)
            .map_err(to_transport)?
        else {
            unreachable!()
        };
        let response = self.server.exchange(&element)?;
        let msg = Message::OprfResponse { element: response };
        let Message::OprfResponse { element } = self
            .bus
            .send(Party::OprfServer, Party::Client(self.user), self.tag, &msg)
            .map_err(to_transport)?
        else {
            unreachable!()
        };
        Ok(element)
    }
}

fn expect_report(msg: Message) -> crate::blinding::BlindedReport {
    match msg {
        Message::Report(r) | Message::AdjustedReport(r) => r,
        other => unreachable!("expected a report, got {:?}", other.kind()),
    }
}

/// Runs one round over ristretto255.
pub fn run_round(config: &HarnessConfig, logs: &[Vec<AdObservation>]) -> Result<RoundOutcome, HarnessError> {
    run_round_in::<Ristretto255>(config, logs)
}

pub fn run_round_in<G: DhGroup>(
    config: &HarnessConfig,
    logs: &[Vec<AdObservation>],
) -> Result<RoundOutcome, HarnessError> {
    execute::<G>(config, logs, Scheduler::Seeded(ChaCha8Rng::seed_from_u64(sub_seed(config.seed, "schedule", 0))))
}

/// Re-runs a round delivering messages in the order recorded in `transcript`
/// and checks that every message is byte-identical to the recorded one.
pub fn replay(
    config: &HarnessConfig,
    logs: &[Vec<AdObservation>],
    transcript: &Transcript,
) -> Result<RoundOutcome, HarnessError> {
    replay_in::<Ristretto255>(config, logs, transcript)
}

pub fn replay_in<G: DhGroup>(
    config: &HarnessConfig,
    logs: &[Vec<AdObservation>],
    transcript: &Transcript,
) -> Result<RoundOutcome, HarnessError> {
    let outcome = execute::<G>(config, logs, Scheduler::Replay(transcript))?;
    let (new, old) = (&outcome.transcript.records, &transcript.records);
    for (step, (a, b)) in new.iter().zip(old).enumerate() {
        if (a.sender, a.receiver, a.kind, a.bytes, a.digest) != (b.sender, b.receiver, b.kind, b.bytes, b.digest) {
            return Err(HarnessError::ReplayDivergence {
                step,
                reason: format!("recorded {} {} -> {}, produced {} {} -> {}", b.kind, b.sender, b.receiver, a.kind, a.sender, a.receiver),
            });
        }
    }
    if new.len() != old.len() {
        return Err(HarnessError::ReplayDivergence {
            step: new.len().min(old.len()),
            reason: format!("recorded {} messages, produced {}", old.len(), new.len()),
        });
    }
    Ok(outcome)
}

fn execute<G: DhGroup>(
    config: &HarnessConfig,
    logs: &[Vec<AdObservation>],
    mut scheduler: Scheduler<'_>,
) -> Result<RoundOutcome, HarnessError> {
    config.validate()?;
    if logs.len() != config.num_users as usize {
        return Err(HarnessError::Config(format!(
            "{} observation logs for {} users",
            logs.len(),
            config.num_users
        )));
    }
    let n = config.num_users;
    let users: Vec<u32> = (1..=n).collect();
    let tag = RoundTag::new(config.round);
    let mut bus = Bus {
        round: config.round,
        capture: config.capture_payloads,
        records: Vec::new(),
        stats: BTreeMap::new(),
    };

    // setup: keys on the bulletin board, roster published by the aggregator
    let keys: Vec<UserKeyPair<G>> = users
        .iter()
        .map(|&i| UserKeyPair::generate(i, sub_seed(config.seed, "dh-key", i as u64)))
        .collect();
    let mut entries = Vec::with_capacity(keys.len());
    for k in &keys {
        let msg = Message::KeyAnnounce {
            user: k.index(),
            public_key: k.public_bytes(),
        };
        if let Message::KeyAnnounce { user, public_key } = bus.send(Party::Client(k.index()), Party::Aggregator, tag, &msg)? {
            entries.push(RosterEntry { index: user, public_key });
        }
    }
    let roster = Roster::new(config.round, G::NAME, entries)?;
    let published = bus.send(Party::Aggregator, Party::AllClients, tag, &Message::RosterPublish { roster: roster.to_text() })?;
    let Message::RosterPublish { roster: text } = published else { unreachable!() };
    let roster = Roster::from_text(&text)?;

    let derive = |k: &UserKeyPair<G>| PeerSecrets::derive(k, &roster);
    let secrets: Vec<PeerSecrets> = if config.parallel {
        keys.par_iter().map(derive).collect::<Result<_, _>>()?
    } else {
        keys.iter().map(derive).collect::<Result<_, _>>()?
    };

    // observation phase, with OPRF exchanges for first sightings
    let oprf_key = OprfServerKey::generate_seeded(config.oprf_key_bits, sub_seed(config.seed, "oprf-key", 0))?;
    let public = oprf_key.public().clone();
    let mut server = LocalOprfServer::new(oprf_key);
    let mut shared = OprfClient::new(public.clone(), config.ad_space, sub_seed(config.seed, "oprf-client", 0))?;
    let mut states: Vec<ClientWeekState> = Vec::with_capacity(users.len());
    for (&user, log) in users.iter().zip(logs) {
        let mut own;
        let client = if config.shared_oprf_cache {
            &mut shared
        } else {
            own = OprfClient::new(public.clone(), config.ad_space, sub_seed(config.seed, "oprf-client", user as u64))?;
            &mut own
        };
        let mut transport = BusTransport {
            bus: &mut bus,
            server: &mut server,
            user,
            tag,
        };
        let mut mapper = OprfMapper {
            client,
            transport: &mut transport,
        };
        let mut state = ClientWeekState::new(config.sketch.clone(), config.window_start);
        for obs in log {
            state
                .record_observation(obs, &mut mapper)
                .map_err(|source| HarnessError::Client { user, source })?;
        }
        states.push(state);
    }

    // reports from everyone outside the drop set
    let mut round = RoundState::new(config.round, users.iter().copied(), config.sketch.clone());
    let reporting: Vec<usize> = (0..users.len()).filter(|&i| !config.drop.contains(&users[i])).collect();
    let build = |(i, state): (usize, &mut ClientWeekState)| -> Option<Result<_, HarnessError>> {
        if config.drop.contains(&users[i]) {
            return None;
        }
        Some(state.build_report(&secrets[i]).map_err(|source| HarnessError::Client { user: users[i], source }))
    };
    let reports: Vec<_> = if config.parallel {
        states.par_iter_mut().enumerate().filter_map(build).collect::<Result<_, _>>()?
    } else {
        states.iter_mut().enumerate().filter_map(build).collect::<Result<_, _>>()?
    };
    let senders: Vec<Party> = reporting.iter().map(|&i| Party::Client(users[i])).collect();
    for k in scheduler.order(config.round, MessageKind::Report, &senders)? {
        let received = bus.send(senders[k], Party::Aggregator, tag, &Message::Report(reports[k].clone()))?;
        round.collect(expect_report(received))?;
    }
    drop(reports);

    // fault tolerance: missing list on the board, adjusted reports back
    let missing = round.detect_missing()?;
    if !missing.is_empty() {
        let msg = bus.send(Party::Aggregator, Party::AllClients, round.tag(), &Message::MissingList { missing: missing.clone() })?;
        let Message::MissingList { missing: heard } = msg else { unreachable!() };
        let heard: BTreeSet<u32> = heard.into_iter().collect();
        let retry = round.tag().retry;
        let adjust = |&i: &usize| {
            states[i]
                .adjusted_report(&secrets[i], &heard, retry)
                .map_err(|source| HarnessError::Client { user: users[i], source })
        };
        let adjusted: Vec<_> = if config.parallel {
            reporting.par_iter().map(adjust).collect::<Result<_, _>>()?
        } else {
            reporting.iter().map(adjust).collect::<Result<_, _>>()?
        };
        for k in scheduler.order(config.round, MessageKind::AdjustedReport, &senders)? {
            let received = bus.send(senders[k], Party::Aggregator, round.tag(), &Message::AdjustedReport(adjusted[k].clone()))?;
            round.collect(expect_report(received))?;
        }
    }

    let aggregate = round.finalize_round()?.clone();
    let distribution = UsersDistribution::from_sketch(&aggregate, config.ad_space);
    let users_th = distribution.users_threshold(config.mode).ok();

    // threshold broadcast, per-ad count pull, classification
    let mut decisions = Vec::with_capacity(reporting.len());
    if let Some(th) = users_th {
        let b = round.broadcast_threshold(th, config.mode, &distribution)?;
        bus.send(Party::Aggregator, Party::AllClients, round.tag(), &Message::ThresholdBroadcast(b))?;
    }
    for &i in &reporting {
        let state = &states[i];
        let user = users[i];
        let domains_th = state.domains_threshold(config.mode);
        let mut ads: Vec<(AdKey, AdId)> = state
            .ads()
            .map(|a| (a.clone(), state.ad_id(a).expect("every recorded ad has an id")))
            .collect();
        ads.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        let mut out = Vec::new();
        if let (Some(th), false) = (users_th, ads.is_empty()) {
            let ids: Vec<AdId> = ads.iter().map(|(_, id)| *id).collect();
            let req = bus.send(Party::Client(user), Party::Aggregator, round.tag(), &Message::UsersCountRequest { ids })?;
            let Message::UsersCountRequest { ids } = req else { unreachable!() };
            let counts = ids.iter().map(|id| round.users_count(*id)).collect::<Result<Vec<u32>, _>>()?;
            let resp = bus.send(Party::Aggregator, Party::Client(user), round.tag(), &Message::UsersCountResponse { counts })?;
            let Message::UsersCountResponse { counts } = resp else { unreachable!() };
            for ((ad, id), users_count) in ads.into_iter().zip(counts) {
                let domains_count = state.domains_count(&ad);
                out.push(AdDecision {
                    decision: crate::client::decide(domains_count, domains_th, users_count as u64, th),
                    ad,
                    ad_id: id,
                    domains_count,
                    users_count,
                });
            }
        }
        decisions.push(UserDecisions {
            user,
            domains_th,
            ads: out,
        });
    }

    Ok(RoundOutcome {
        aggregate,
        distribution,
        users_th,
        missing,
        decisions,
        stats: bus.stats,
        transcript: Transcript { records: bus.records },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blinding::ToySafePrimeGroup;

    fn config(n: u32) -> HarnessConfig {
        let mut c = HarnessConfig::new(n, SketchParams::new(0.01, 0.01, 1000, 5).unwrap());
        c.oprf_key_bits = 256;
        c.ad_space = 4096;
        c
    }

    fn logs(n: u32) -> Vec<Vec<AdObservation>> {
        (1..=n)
            .map(|u| {
                let mut log = Vec::new();
                for d in 0..5 {
                    log.push(AdObservation::new("https://shared.example/ad", &format!("site{d}.com"), 10 + d).unwrap());
                    log.push(AdObservation::new(&format!("https://own.example/{u}"), &format!("site{d}.com"), 20).unwrap());
                }
                log.push(AdObservation::new(&format!("https://rare.example/{}", u % 3), "site0.com", 30).unwrap());
                log
            })
            .collect()
    }

    #[test]
    fn config_errors_surface_first() {
        let mut c = config(3);
        c.drop = [4].into();
        assert!(matches!(run_round_in::<ToySafePrimeGroup>(&c, &logs(3)), Err(HarnessError::Config(_))));
        let c = config(3);
        assert!(matches!(run_round_in::<ToySafePrimeGroup>(&c, &logs(2)), Err(HarnessError::Config(_))));
    }

    #[test]
    fn small_round() {
        let c = config(4);
        let out = run_round_in::<ToySafePrimeGroup>(&c, &logs(4)).unwrap();
        assert_eq!(out.count(MessageKind::KeyAnnounce), 4);
        assert_eq!(out.count(MessageKind::Report), 4);
        assert_eq!(out.count(MessageKind::MissingList), 0);
        assert_eq!(out.count(MessageKind::ThresholdBroadcast), 1);
        let total: u64 = out.stats.values().map(|s| s.bytes).sum();
        assert_eq!(total, out.transcript.records.iter().map(|r| r.bytes as u64).sum::<u64>());
        assert!(out.transcript.aggregator_inbox().is_subset(&AGGREGATOR_INBOX.into_iter().collect()));
        let shared = out.decisions[0]
            .ads
            .iter()
            .find(|a| a.ad.as_str() == "https://shared.example/ad")
            .unwrap();
        assert_eq!(shared.users_count, 4);
        assert_eq!(out.decisions.len(), 4);
    }

    #[test]
    fn parallel_matches_sequential_and_replay() {
        let mut c = config(5);
        c.drop = [2].into();
        let a = run_round_in::<ToySafePrimeGroup>(&c, &logs(5)).unwrap();
        c.parallel = true;
        let b = run_round_in::<ToySafePrimeGroup>(&c, &logs(5)).unwrap();
        assert_eq!(a, b);
        let r = replay_in::<ToySafePrimeGroup>(&c, &logs(5), &a.transcript).unwrap();
        assert_eq!(a, r);
        let mut tampered = a.transcript.clone();
        let last = tampered.records.len() - 1;
        tampered.records[last].digest[0] ^= 1;
        assert!(matches!(
            replay_in::<ToySafePrimeGroup>(&c, &logs(5), &tampered),
            Err(HarnessError::ReplayDivergence { .. })
        ));
    }
}
