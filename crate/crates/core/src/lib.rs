//! Privacy-preserving crowdsourced detection of targeted ads.
//!
//! Each client counts, per ad, the distinct websites on which it saw the ad
//! and reports the set of ads it saw to an untrusted aggregator as a blinded
//! count-min sketch. The blinding masks cancel in the sum, so the aggregator
//! learns only how many users saw each ad. Ads are named by pseudorandom IDs
//! obtained from an oblivious PRF, so neither server learns ad URLs. An ad is
//! labelled targeted for a user when it followed the user across more
//! websites than usual but was seen by fewer users than usual.

pub mod aggregator;
pub mod blinding;
pub mod client;
pub mod harness;
pub mod oprf;
pub mod simulator;
pub mod sketch;
pub mod threshold;
pub mod wire;

pub use aggregator::{AggregatorError, RoundState};
pub use blinding::{BlindedReport, BlindingError, Roster, RoundTag};
pub use client::{AdKey, AdObservation, Decision};
pub use oprf::{AdId, OprfError};
pub use sketch::{CountMinSketch, SketchError, SketchParams};
pub use threshold::{Threshold, ThresholdMode};
