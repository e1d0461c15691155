//! Count-min sketch with 32-bit wrapping counters.
//!
//! A sketch has `depth = ceil(ln(T / delta))` rows and `width = ceil(e / epsilon)`
//! columns, where `T` is the expected number of distinct elements. Every cell is
//! a `u32` and all arithmetic is modulo 2^32, so the same representation carries
//! plain sketches, blinded reports and their sums.
//!
//! # Binary format
//!
//! All integers are little-endian.
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `b"CMSK"`                         |
//! | 4      | 2    | format version (`1`)                    |
//! | 6      | 8    | epsilon, IEEE-754 `f64`                 |
//! | 14     | 8    | delta, IEEE-754 `f64`                   |
//! | 22     | 8    | capacity hint `T`, `u64`                |
//! | 30     | 4    | depth, `u32`                            |
//! | 34     | 4    | width, `u32`                            |
//! | 38     | 8    | hash seed, `u64`                        |
//! | 46     | 4·d·w| cells, `u32`, row-major                 |
//!
//! The per-row hash keys are not stored; they are re-derived from the seed.

use std::hash::Hasher;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use siphasher::sip::SipHasher13;

use crate::oprf::AdId;

/// Size in bytes of one counter.
pub const CELL_BYTES: usize = 4;

/// Size in bytes of the fixed serialization header.
pub const HEADER_BYTES: usize = 46;

/// Capacity hint used when none is configured.
pub const DEFAULT_CAPACITY_HINT: u64 = 100_000;

pub const DEFAULT_EPSILON: f64 = 0.001;
pub const DEFAULT_DELTA: f64 = 0.001;

const MAGIC: &[u8; 4] = b"CMSK";
const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SketchError {
    #[error("invalid sketch parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("sketches are not mergeable: parameters or hash seeds differ")]
    Incompatible,
    #[error("malformed sketch header: {0}")]
    MalformedHeader(String),
    #[error("truncated sketch payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
}

/// Dimensioning and hashing parameters shared by every party of a round.
///
/// Two sketches can be merged only if their parameters compare equal.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchParams {
    epsilon: f64,
    delta: f64,
    capacity_hint: u64,
    depth: usize,
    width: usize,
    seed: u64,
    hash_seeds: Vec<u64>,
}

impl SketchParams {
    pub fn new(
        epsilon: f64,
        delta: f64,
        capacity_hint: u64,
        seed: u64,
    ) -> Result<Self, SketchError> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(SketchError::InvalidParameter {
                name: "epsilon",
                reason: format!("{epsilon} is outside (0, 1)"),
            });
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(SketchError::InvalidParameter {
                name: "delta",
                reason: format!("{delta} is outside (0, 1)"),
            });
        }
        if capacity_hint == 0 {
            return Err(SketchError::InvalidParameter {
                name: "capacity_hint",
                reason: "must be at least 1".into(),
            });
        }
        let (depth, width) = dimensions(epsilon, delta, capacity_hint);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hash_seeds = (0..depth).map(|_| rng.next_u64()).collect();
        Ok(Self {
            epsilon,
            delta,
            capacity_hint,
            depth,
            width,
            seed,
            hash_seeds,
        })
    }

    /// Parameters with the default `epsilon = delta = 0.001` and `T = 100_000`.
    pub fn with_seed(seed: u64) -> Self {
        Self::new(DEFAULT_EPSILON, DEFAULT_DELTA, DEFAULT_CAPACITY_HINT, seed)
            .expect("default sketch parameters are valid")
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn capacity_hint(&self) -> u64 {
        self.capacity_hint
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn hash_seeds(&self) -> &[u64] {
        &self.hash_seeds
    }

    /// Number of cells, `depth * width`.
    pub fn cell_count(&self) -> usize {
        self.depth * self.width
    }

    /// Size of the cell payload in bytes.
    pub fn payload_bytes(&self) -> usize {
        self.cell_count() * CELL_BYTES
    }

    /// Column hit by `item` in `row`.
    pub fn column(&self, row: usize, item: AdId) -> usize {
        let mut hasher = SipHasher13::new_with_keys(self.hash_seeds[row], row as u64);
        hasher.write_u64(item.get());
        (hasher.finish() % self.width as u64) as usize
    }

    /// SHA-256 over the encoded header fields. Reports carry it so the
    /// aggregator can reject reports built with foreign parameters.
    pub fn digest(&self) -> [u8; 32] {
        let mut header = Vec::with_capacity(HEADER_BYTES);
        self.write_header(&mut header);
        Sha256::digest(&header).into()
    }

    fn write_header(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.epsilon.to_le_bytes());
        out.extend_from_slice(&self.delta.to_le_bytes());
        out.extend_from_slice(&self.capacity_hint.to_le_bytes());
        out.extend_from_slice(&(self.depth as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
    }
}

/// `(depth, width)` for the given error parameters.
pub fn dimensions(epsilon: f64, delta: f64, capacity_hint: u64) -> (usize, usize) {
    let depth = (capacity_hint as f64 / delta).ln().ceil().max(1.0) as usize;
    let width = (std::f64::consts::E / epsilon).ceil().max(1.0) as usize;
    (depth, width)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountMinSketch {
    params: SketchParams,
    cells: Vec<u32>,
}

impl CountMinSketch {
    pub fn new(
        epsilon: f64,
        delta: f64,
        capacity_hint: u64,
        seed: u64,
    ) -> Result<Self, SketchError> {
        Ok(Self::with_params(SketchParams::new(
            epsilon,
            delta,
            capacity_hint,
            seed,
        )?))
    }

    pub fn with_params(params: SketchParams) -> Self {
        let cells = vec![0; params.cell_count()];
        Self { params, cells }
    }

    /// Rebuilds a sketch from raw cells, e.g. an unblinded sum.
    pub fn from_cells(params: SketchParams, cells: Vec<u32>) -> Result<Self, SketchError> {
        if cells.len() != params.cell_count() {
            return Err(SketchError::TruncatedPayload {
                expected: params.payload_bytes(),
                found: cells.len() * CELL_BYTES,
            });
        }
        Ok(Self { params, cells })
    }

    pub fn params(&self) -> &SketchParams {
        &self.params
    }

    /// Cells in row-major order.
    pub fn cells(&self) -> &[u32] {
        &self.cells
    }

    pub fn into_cells(self) -> Vec<u32> {
        self.cells
    }

    pub fn is_zero(&self) -> bool {
        self.cells.iter().all(|&c| c == 0)
    }

    pub fn update(&mut self, item: AdId) {
        let width = self.params.width;
        for row in 0..self.params.depth {
            let idx = row * width + self.params.column(row, item);
            self.cells[idx] = self.cells[idx].wrapping_add(1);
        }
    }

    /// Minimum over the rows. Never below the true count of `item`.
    pub fn query(&self, item: AdId) -> u32 {
        let width = self.params.width;
        (0..self.params.depth)
            .map(|row| self.cells[row * width + self.params.column(row, item)])
            .min()
            .unwrap_or(0)
    }

    /// Cell-wise sum of two sketches built with the same parameters.
    pub fn merge(&self, other: &Self) -> Result<Self, SketchError> {
        let mut out = self.clone();
        out.merge_from(other)?;
        Ok(out)
    }

    pub fn merge_from(&mut self, other: &Self) -> Result<(), SketchError> {
        if self.params != other.params {
            return Err(SketchError::Incompatible);
        }
        for (a, b) in self.cells.iter_mut().zip(&other.cells) {
            *a = a.wrapping_add(*b);
        }
        Ok(())
    }

    pub fn clear(&mut self) {
        self.cells.iter_mut().for_each(|c| *c = 0);
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_BYTES + self.params.payload_bytes()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.params.write_header(&mut out);
        for cell in &self.cells {
            out.extend_from_slice(&cell.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SketchError> {
        if bytes.len() < HEADER_BYTES {
            return Err(SketchError::MalformedHeader(format!(
                "need {HEADER_BYTES} header bytes, found {}",
                bytes.len()
            )));
        }
        let (header, payload) = bytes.split_at(HEADER_BYTES);
        if &header[0..4] != MAGIC {
            return Err(SketchError::MalformedHeader("bad magic".into()));
        }
        let version = u16::from_le_bytes([header[4], header[5]]);
        if version != FORMAT_VERSION {
            return Err(SketchError::MalformedHeader(format!(
                "unsupported format version {version}"
            )));
        }
        let f64_at = |at: usize| f64::from_le_bytes(header[at..at + 8].try_into().unwrap());
        let u64_at = |at: usize| u64::from_le_bytes(header[at..at + 8].try_into().unwrap());
        let u32_at = |at: usize| u32::from_le_bytes(header[at..at + 4].try_into().unwrap());

        let params = SketchParams::new(f64_at(6), f64_at(14), u64_at(22), u64_at(38))
            .map_err(|e| SketchError::MalformedHeader(e.to_string()))?;
        let (depth, width) = (u32_at(30) as usize, u32_at(34) as usize);
        if depth != params.depth || width != params.width {
            return Err(SketchError::MalformedHeader(format!(
                "dimensions {depth}x{width} do not match the parameters ({}x{})",
                params.depth, params.width
            )));
        }
        let expected = params.payload_bytes();
        if payload.len() != expected {
            return Err(SketchError::TruncatedPayload {
                expected,
                found: payload.len(),
            });
        }
        let cells = payload
            .chunks_exact(CELL_BYTES)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { params, cells })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    use proptest::prelude::*;
    use rand::Rng;

    fn id(v: u64) -> AdId {
        AdId::new(v)
    }

    #[test]
    fn dimensions_for_reported_input_sizes() {
        for (t, depth, bytes) in [
            (10_000, 17, 184_892),
            (50_000, 18, 195_768),
            (100_000, 19, 206_644),
        ] {
            let p = SketchParams::new(0.001, 0.001, t, 0).unwrap();
            assert_eq!((p.depth(), p.width()), (depth, 2719));
            assert_eq!(p.payload_bytes(), bytes);
        }
    }

    #[test]
    fn coarse_parameters() {
        let s = CountMinSketch::new(0.9, 0.9, 1, 3).unwrap();
        assert_eq!((s.params().depth(), s.params().width()), (1, 4));
        assert!((1..50).all(|v| s.query(id(v)) == 0));
    }

    #[test]
    fn rejects_bad_parameters() {
        for (e, d, t) in [(0.0, 0.1, 10), (1.0, 0.1, 10), (0.1, 0.0, 10), (0.1, 1.5, 10), (0.1, 0.1, 0)] {
            assert!(matches!(
                SketchParams::new(e, d, t, 0),
                Err(SketchError::InvalidParameter { .. })
            ));
        }
        assert!(SketchParams::new(f64::NAN, 0.1, 1, 0).is_err());
    }

    #[test]
    fn repeated_updates_count_exactly() {
        let mut s = CountMinSketch::with_params(SketchParams::with_seed(1));
        s.update(id(42));
        assert_eq!(s.query(id(42)), 1);
        for _ in 0..9 {
            s.update(id(42));
        }
        assert_eq!(s.query(id(42)), 10);
    }

    #[test]
    fn random_stream_within_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = CountMinSketch::new(0.001, 0.001, 10_000, 5).unwrap();
        let mut exact: HashMap<u64, u32> = HashMap::new();
        for _ in 0..1000 {
            let v = rng.gen_range(1..=10_000);
            s.update(id(v));
            *exact.entry(v).or_default() += 1;
        }
        let slack = (0.001f64 * 1000.0).ceil() as u32;
        let mut within = 0;
        for v in 1..=10_000u64 {
            let c = exact.get(&v).copied().unwrap_or(0);
            let est = s.query(id(v));
            assert!(est >= c);
            if est <= c + slack {
                within += 1;
            }
        }
        assert!(within as f64 >= 0.999 * 10_000.0);
    }

    #[test]
    fn merge_identity_and_mismatch() {
        let mut s = CountMinSketch::new(0.01, 0.01, 100, 9).unwrap();
        (1..20).for_each(|v| s.update(id(v)));
        let zero = CountMinSketch::new(0.01, 0.01, 100, 9).unwrap();
        assert_eq!(s.merge(&zero).unwrap(), s);

        let other = CountMinSketch::new(0.01, 0.01, 100, 10).unwrap();
        assert_eq!(s.merge(&other), Err(SketchError::Incompatible));
        let other = CountMinSketch::new(0.01, 0.02, 100, 9).unwrap();
        assert_eq!(s.merge(&other), Err(SketchError::Incompatible));
    }

    #[test]
    fn counters_wrap() {
        let p = SketchParams::new(0.5, 0.5, 1, 0).unwrap();
        let mut s = CountMinSketch::from_cells(p.clone(), vec![u32::MAX; p.cell_count()]).unwrap();
        s.update(id(1));
        assert_eq!(s.query(id(1)), 0);
    }

    #[test]
    fn serialized_size_for_fifty_thousand() {
        let s = CountMinSketch::new(0.001, 0.001, 50_000, 0).unwrap();
        assert_eq!(s.params().payload_bytes(), 195_768);
        assert_eq!(s.to_bytes().len(), HEADER_BYTES + 195_768);
    }

    #[test]
    fn truncated_and_malformed_input() {
        let mut s = CountMinSketch::new(0.05, 0.05, 100, 2).unwrap();
        s.update(id(7));
        let bytes = s.to_bytes();
        assert!(matches!(
            CountMinSketch::from_bytes(&bytes[..bytes.len() - 1]),
            Err(SketchError::TruncatedPayload { .. })
        ));
        assert!(matches!(
            CountMinSketch::from_bytes(&bytes[..10]),
            Err(SketchError::MalformedHeader(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            CountMinSketch::from_bytes(&bad),
            Err(SketchError::MalformedHeader(_))
        ));
        let mut bad = bytes.clone();
        bad[30] ^= 1;
        assert!(matches!(
            CountMinSketch::from_bytes(&bad),
            Err(SketchError::MalformedHeader(_))
        ));
    }

    #[test]
    fn per_row_collision_rate_near_one_over_width() {
        let p = SketchParams::new(0.01, 0.01, 1000, 77).unwrap();
        let w = p.width() as f64;
        let pairs = 200_000u64;
        for row in 0..p.depth() {
            let hits = (0..pairs)
                .filter(|&k| p.column(row, id(2 * k + 1)) == p.column(row, id(2 * k + 2)))
                .count() as f64;
            let rate = hits / pairs as f64;
            assert!((rate - 1.0 / w).abs() <= 0.2 / w, "row {row}: rate {rate}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn round_trip(seed in any::<u64>(), items in prop::collection::vec(1u64..5000, 0..200)) {
            let mut s = CountMinSketch::new(0.02, 0.05, 500, seed).unwrap();
            items.iter().for_each(|&v| s.update(id(v)));
            prop_assert_eq!(CountMinSketch::from_bytes(&s.to_bytes()).unwrap(), s);
        }

        #[test]
        fn never_underestimates(items in prop::collection::vec(1u64..300, 0..400)) {
            let mut s = CountMinSketch::new(0.1, 0.1, 50, 4).unwrap();
            let mut exact: HashMap<u64, u32> = HashMap::new();
            for &v in &items {
                s.update(id(v));
                *exact.entry(v).or_default() += 1;
            }
            for (v, c) in exact {
                prop_assert!(s.query(id(v)) >= c);
            }
        }

        #[test]
        fn merge_matches_concatenated_stream(
            a in prop::collection::vec(1u64..10_000, 0..300),
            b in prop::collection::vec(1u64..10_000, 0..300),
        ) {
            let p = SketchParams::new(0.01, 0.01, 1000, 8).unwrap();
            let build = |xs: &[u64]| {
                let mut s = CountMinSketch::with_params(p.clone());
                xs.iter().for_each(|&v| s.update(id(v)));
                s
            };
            let joined: Vec<u64> = a.iter().chain(&b).copied().collect();
            prop_assert_eq!(build(&a).merge(&build(&b)).unwrap(), build(&joined));
        }
    }
}
