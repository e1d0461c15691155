//! Additive shares of zero for sketch cells, derived from pairwise
//! Diffie-Hellman secrets.
//!
//! User `i` blinds cell `m` in round `s` with
//!
//! ```text
//! b_i[m] = sum_{j != i} sign(i, j) * H(k_ij, m, s)      (mod 2^32)
//! sign(i, j) = +1 if i > j, -1 otherwise
//! ```
//!
//! where `k_ij = y_j^{x_i} = y_i^{x_j}`. Every pair contributes the same term
//! with opposite signs to its two members, so the vectors of a complete
//! roster sum to zero in every cell.
//!
//! `H(k, m, s)` is the `m`-th little-endian 32-bit word of the AES-128-CTR
//! keystream under the key `SHA-256(label || k || s)[..16]`, i.e. a PRF of
//! `(k, m, s)` truncated to 32 bits. Expanding it as a stream keeps a full
//! blinding vector to one key derivation per peer.

mod group;

pub use group::{DhGroup, Ristretto255, ToySafePrimeGroup};

use std::collections::BTreeSet;
use std::fmt;

use aes::cipher::{BlockEncrypt, KeyInit};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::sketch::{CountMinSketch, SketchParams};


const MASK_LABEL: &[u8] = b"adcensus/blinding-mask/v1";

/// Size of the fixed header of an encoded [`BlindedReport`].
pub const REPORT_HEADER_BYTES: usize = 8 + 4 + 4 + 32 + 4;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BlindingError {
    #[error("public key of user {0} is not a valid group element")]
    InvalidElement(u32),
    #[error("user {0} is not in the roster")]
    NotInRoster(u32),
    #[error("roster indices must be 1..=N in order; found {found} at position {position}")]
    RosterIndices { position: usize, found: u32 },
    #[error("roster is for group `{found}`, expected `{expected}`")]
    GroupMismatch { expected: String, found: String },
    #[error("blinding vector has {found} values but the sketch has {expected} cells")]
    LengthMismatch { expected: usize, found: usize },
    #[error("reports are missing from users {missing:?}")]
    IncompleteRoster { missing: Vec<u32> },
    #[error("report from user {user} does not match the round shape: {reason}")]
    ShapeMismatch { user: u32, reason: String },
    #[error("unexpected report from user {0}")]
    UnexpectedSender(u32),
    #[error("duplicate report from user {0}")]
    DuplicateReport(u32),
    #[error("user {0} cannot be both reporting and missing")]
    SelfMissing(u32),
    #[error("malformed roster file at line {line}: {reason}")]
    RosterSyntax { line: usize, reason: String },
    #[error("malformed report: {0}")]
    MalformedReport(String),
}

/// Round identifier. `retry` is bumped for every fault-tolerance adjustment so
/// adjusted masks never repeat the originals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RoundTag {
    pub round: u64,
    pub retry: u32,
}

impl RoundTag {
    pub fn new(round: u64) -> Self {
        Self { round, retry: 0 }
    }

    pub fn with_retry(self, retry: u32) -> Self {
        Self { retry, ..self }
    }
}

impl fmt::Display for RoundTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.round, self.retry)
    }
}

pub struct UserKeyPair<G: DhGroup> {
    index: u32,
    secret: G::Scalar,
    public: G::Element,
}

impl<G: DhGroup> UserKeyPair<G> {
    /// Deterministic key pair for roster position `index` (1-based).
    pub fn generate(index: u32, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let secret = G::random_scalar(&mut rng);
        let public = G::generator_mul(&secret);
        Self {
            index,
            secret,
            public,
        }
    }

    pub fn index(&self) -> u32 {
        self.index
    }

    pub fn public(&self) -> &G::Element {
        &self.public
    }

    pub fn public_bytes(&self) -> Vec<u8> {
        G::encode(&self.public)
    }

    /// Recomputes `g^x` and compares it with the stored public element.
    pub fn is_consistent(&self) -> bool {
        G::generator_mul(&self.secret) == self.public
    }
}

impl<G: DhGroup> fmt::Debug for UserKeyPair<G> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("UserKeyPair")
            .field("index", &self.index)
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

/// Byte encoding of `other_public ^ x_me`.
pub fn pair_secret<G: DhGroup>(
    me: &UserKeyPair<G>,
    other_index: u32,
    other_public: &[u8],
) -> Result<Vec<u8>, BlindingError> {
    let element = G::decode(other_public)
        .filter(|e| !G::is_identity(e))
        .ok_or(BlindingError::InvalidElement(other_index))?;
    Ok(G::encode(&G::mul(&element, &me.secret)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RosterEntry {
    pub index: u32,
    pub public_key: Vec<u8>,
}

/// Ordered list of participants and their public keys for one round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Roster {
    round: u64,
    group: String,
    entries: Vec<RosterEntry>,
}

impl Roster {
    pub fn new(
        round: u64,
        group: impl Into<String>,
        entries: Vec<RosterEntry>,
    ) -> Result<Self, BlindingError> {
        for (position, entry) in entries.iter().enumerate() {
            if entry.index as usize != position + 1 {
                return Err(BlindingError::RosterIndices {
                    position,
                    found: entry.index,
                });
            }
        }
        Ok(Self {
            round,
            group: group.into(),
            entries,
        })
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn group(&self) -> &str {
        &self.group
    }

    pub fn entries(&self) -> &[RosterEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn indices(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|e| e.index)
    }

    pub fn contains(&self, index: u32) -> bool {
        index >= 1 && index as usize <= self.entries.len()
    }

    /// Text form:
    ///
    /// ```text
    /// # comment lines and blank lines are ignored
    /// round 7
    /// group ristretto255
    /// 1 <hex public key>
    /// 2 <hex public key>
    /// ```
    pub fn to_text(&self) -> String {
        let mut out = format!("round {}\ngroup {}\n", self.round, self.group);
        for e in &self.entries {
            out.push_str(&format!("{} {}\n", e.index, hex::encode(&e.public_key)));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, BlindingError> {
        let mut round = None;
        let mut group = None;
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let syntax = |reason: &str| BlindingError::RosterSyntax {
                line: n + 1,
                reason: reason.into(),
            };
            let (key, value) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| syntax("expected two fields"))?;
            let value = value.trim();
            match key {
                "round" => round = Some(value.parse().map_err(|_| syntax("bad round"))?),
                "group" => group = Some(value.to_string()),
                index => {
                    let index: u32 = index.parse().map_err(|_| syntax("bad index"))?;
                    let public_key = hex::decode(value).map_err(|_| syntax("bad hex key"))?;
                    entries.push(RosterEntry { index, public_key });
                }
            }
        }
        let round = round.ok_or(BlindingError::RosterSyntax {
            line: 0,
            reason: "missing `round` line".into(),
        })?;
        let group = group.ok_or(BlindingError::RosterSyntax {
            line: 0,
            reason: "missing `group` line".into(),
        })?;
        Self::new(round, group, entries)
    }
}

/// Key for the mask stream shared by one pair in one round.
fn mask_key(secret: &[u8], tag: RoundTag) -> [u8; 16] {
    let mut h = Sha256::new();
    h.update(MASK_LABEL);
    h.update((secret.len() as u32).to_le_bytes());
    h.update(secret);
    h.update(tag.round.to_le_bytes());
    h.update(tag.retry.to_le_bytes());
    let digest = h.finalize();
    digest[..16].try_into().unwrap()
}

/// `H(k, m, s)` for a single cell.
pub fn cell_mask(secret: &[u8], cell: usize, tag: RoundTag) -> u32 {
    let cipher = aes::Aes128::new(&mask_key(secret, tag).into());
    let mut block = aes::Block::from(((cell / 4) as u128).to_be_bytes());
    cipher.encrypt_block(&mut block);
    let at = (cell % 4) * 4;
    u32::from_le_bytes(block[at..at + 4].try_into().unwrap())
}

/// Adds (or subtracts) `H(k, m, s)` into `acc[m]` for every cell. The words
/// are AES-128-CTR keystream from a zero counter, read little-endian.
fn accumulate_masks(acc: &mut [u32], secret: &[u8], tag: RoundTag, subtract: bool) {
    const BLOCKS: usize = 256;
    let cipher = aes::Aes128::new(&mask_key(secret, tag).into());
    let mut blocks = [aes::Block::default(); BLOCKS];
    let mut counter: u128 = 0;
    for cells in acc.chunks_mut(BLOCKS * 4) {
        let n = cells.len().div_ceil(4);
        for b in &mut blocks[..n] {
            *b = counter.to_be_bytes().into();
            counter += 1;
        }
        cipher.encrypt_blocks(&mut blocks[..n]);
        for (quad, b) in cells.chunks_mut(4).zip(&blocks[..n]) {
            let b: [u8; 16] = (*b).into();
            let words: [u32; 4] = std::array::from_fn(|i| u32::from_le_bytes([b[4 * i], b[4 * i + 1], b[4 * i + 2], b[4 * i + 3]]));
            if subtract {
                quad.iter_mut().zip(words).for_each(|(c, w)| *c = c.wrapping_sub(w));
            } else {
                quad.iter_mut().zip(words).for_each(|(c, w)| *c = c.wrapping_add(w));
            }
        }
    }
}

/// A user's blinding factors for every cell of one round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlindingVector {
    pub tag: RoundTag,
    pub user: u32,
    pub values: Vec<u32>,
}

/// Pairwise secrets of one user with every other roster member.
///
/// Secrets do not depend on the round, so a client derives them once per
/// roster and reuses them for the original and adjusted masks.
#[derive(Clone)]
pub struct PeerSecrets {
    index: u32,
    round: u64,
    peers: Vec<(u32, Vec<u8>)>,
}

impl PeerSecrets {
    pub fn derive<G: DhGroup>(me: &UserKeyPair<G>, roster: &Roster) -> Result<Self, BlindingError> {
        if roster.group() != G::NAME {
            return Err(BlindingError::GroupMismatch {
                expected: G::NAME.into(),
                found: roster.group().into(),
            });
        }
        if !roster.contains(me.index) {
            return Err(BlindingError::NotInRoster(me.index));
        }
        let peers = roster
            .entries()
            .iter()
            .filter(|e| e.index != me.index)
            .map(|e| Ok((e.index, pair_secret(me, e.index, &e.public_key)?)))
            .collect::<Result<_, BlindingError>>()?;
        Ok(Self {
            index: me.index,
            round: roster.round(),
            peers,
        })
    }

    pub fn index(&self) -> u32 {
        self.index
    }

    /// Vector over every peer outside `missing`, tagged `(round, retry)`.
    pub fn vector(
        &self,
        cell_count: usize,
        missing: &BTreeSet<u32>,
        retry: u32,
    ) -> Result<BlindingVector, BlindingError> {
        if missing.contains(&self.index) {
            return Err(BlindingError::SelfMissing(self.index));
        }
        if let Some(&unknown) = missing
            .iter()
            .find(|&&m| m != self.index && !self.peers.iter().any(|(j, _)| *j == m))
        {
            return Err(BlindingError::NotInRoster(unknown));
        }
        let tag = RoundTag::new(self.round).with_retry(retry);
        let mut values = vec![0u32; cell_count];
        for (j, secret) in &self.peers {
            if missing.contains(j) {
                continue;
            }
            accumulate_masks(&mut values, secret, tag, self.index < *j);
        }
        Ok(BlindingVector {
            tag,
            user: self.index,
            values,
        })
    }
}

/// Blinding vector of `me` over the full roster, for round `roster.round()`.
pub fn blinding_vector<G: DhGroup>(
    me: &UserKeyPair<G>,
    roster: &Roster,
    cell_count: usize,
) -> Result<BlindingVector, BlindingError> {
    PeerSecrets::derive(me, roster)?.vector(cell_count, &BTreeSet::new(), 0)
}

/// Blinding vector over the surviving roster (everyone outside `missing`),
/// tagged with `retry` so it differs from the original masks.
pub fn adjust_blinding<G: DhGroup>(
    me: &UserKeyPair<G>,
    roster: &Roster,
    missing: &BTreeSet<u32>,
    cell_count: usize,
    retry: u32,
) -> Result<BlindingVector, BlindingError> {
    PeerSecrets::derive(me, roster)?.vector(cell_count, missing, retry)
}

/// A sketch with every cell masked, as sent to the aggregator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlindedReport {
    pub tag: RoundTag,
    pub user: u32,
    pub params_digest: [u8; 32],
    pub cells: Vec<u32>,
}

impl BlindedReport {
    pub fn encoded_len(&self) -> usize {
        REPORT_HEADER_BYTES + self.cells.len() * 4
    }

    /// `round u64 | retry u32 | user u32 | params digest [32] | cell count u32 | cells u32*`,
    /// all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&self.tag.round.to_le_bytes());
        out.extend_from_slice(&self.tag.retry.to_le_bytes());
        out.extend_from_slice(&self.user.to_le_bytes());
        out.extend_from_slice(&self.params_digest);
        out.extend_from_slice(&(self.cells.len() as u32).to_le_bytes());
        for c in &self.cells {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BlindingError> {
        if bytes.len() < REPORT_HEADER_BYTES {
            return Err(BlindingError::MalformedReport(format!(
                "{} bytes is shorter than the header",
                bytes.len()
            )));
        }
        let round = u64::from_le_bytes(bytes[0..8].try_into().unwrap());
        let retry = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let user = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        let params_digest = bytes[16..48].try_into().unwrap();
        let count = u32::from_le_bytes(bytes[48..52].try_into().unwrap()) as usize;
        let payload = &bytes[REPORT_HEADER_BYTES..];
        if payload.len() != count * 4 {
            return Err(BlindingError::MalformedReport(format!(
                "expected {} cell bytes, found {}",
                count * 4,
                payload.len()
            )));
        }
        Ok(Self {
            tag: RoundTag { round, retry },
            user,
            params_digest,
            cells: payload
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        })
    }
}

/// `cells[k] + bv[k] mod 2^32` for every cell.
pub fn blind_cells(
    sketch: &CountMinSketch,
    bv: &BlindingVector,
) -> Result<BlindedReport, BlindingError> {
    if bv.values.len() != sketch.cells().len() {
        return Err(BlindingError::LengthMismatch {
            expected: sketch.cells().len(),
            found: bv.values.len(),
        });
    }
    Ok(BlindedReport {
        tag: bv.tag,
        user: bv.user,
        params_digest: sketch.params().digest(),
        cells: sketch
            .cells()
            .iter()
            .zip(&bv.values)
            .map(|(c, b)| c.wrapping_add(*b))
            .collect(),
    })
}

/// Sums the reports of exactly `expected` users. The masks cancel only when
/// every expected user is present.
pub fn unblind_aggregate(
    reports: &[BlindedReport],
    params: &SketchParams,
    expected: &[u32],
) -> Result<CountMinSketch, BlindingError> {
    let digest = params.digest();
    let tag = reports.first().map(|r| r.tag);
    let mut seen = BTreeSet::new();
    for r in reports {
        if !expected.contains(&r.user) {
            return Err(BlindingError::UnexpectedSender(r.user));
        }
        if !seen.insert(r.user) {
            return Err(BlindingError::DuplicateReport(r.user));
        }
        let shape_err = |reason: &str| BlindingError::ShapeMismatch {
            user: r.user,
            reason: reason.into(),
        };
        if Some(r.tag) != tag {
            return Err(shape_err("round tag differs"));
        }
        if r.params_digest != digest {
            return Err(shape_err("sketch parameters differ"));
        }
        if r.cells.len() != params.cell_count() {
            return Err(shape_err("cell count differs"));
        }
    }
    let missing: Vec<u32> = expected.iter().copied().filter(|u| !seen.contains(u)).collect();
    if !missing.is_empty() {
        return Err(BlindingError::IncompleteRoster { missing });
    }
    let mut sum = vec![0u32; params.cell_count()];
    for r in reports {
        sum.iter_mut().zip(&r.cells).for_each(|(s, c)| *s = s.wrapping_add(*c));
    }
    Ok(CountMinSketch::from_cells(params.clone(), sum).expect("cell count checked"))
}
