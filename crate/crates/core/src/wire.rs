//! Length-prefixed binary messages exchanged between the parties.
//!
//! Every message is an envelope
//!
//! ```text
//! u32 LE   length of everything after this field
//! u8       schema version
//! u8       message kind
//! u64 LE   round
//! u32 LE   retry
//! ...      body
//! ```
//!
//! Bodies use little-endian integers. Variable-length byte strings and lists
//! are preceded by a `u32` LE count.

use std::fmt;

use crate::aggregator::ThresholdBroadcast;
use crate::blinding::{BlindedReport, BlindingError, RoundTag};
use crate::oprf::AdId;
use crate::threshold::{Threshold, ThresholdMode};

pub const SCHEMA_VERSION: u8 = 1;
pub const ENVELOPE_HEADER_BYTES: usize = 4 + 1 + 1 + 8 + 4;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WireError {
    #[error("message truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("unsupported schema version {0}")]
    Version(u8),
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("{0} trailing bytes after the body")]
    Trailing(usize),
    #[error("malformed body: {0}")]
    Body(String),
    #[error(transparent)]
    Report(#[from] BlindingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MessageKind {
    KeyAnnounce = 1,
    RosterPublish = 2,
    OprfRequest = 3,
    OprfResponse = 4,
    Report = 5,
    MissingList = 6,
    AdjustedReport = 7,
    ThresholdBroadcast = 8,
    UsersCountRequest = 9,
    UsersCountResponse = 10,
}

impl MessageKind {
    pub const ALL: [MessageKind; 10] = [
        MessageKind::KeyAnnounce,
        MessageKind::RosterPublish,
        MessageKind::OprfRequest,
        MessageKind::OprfResponse,
        MessageKind::Report,
        MessageKind::MissingList,
        MessageKind::AdjustedReport,
        MessageKind::ThresholdBroadcast,
        MessageKind::UsersCountRequest,
        MessageKind::UsersCountResponse,
    ];

    pub fn from_byte(b: u8) -> Result<Self, WireError> {
        Self::ALL
            .into_iter()
            .find(|k| *k as u8 == b)
            .ok_or(WireError::UnknownKind(b))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::KeyAnnounce => "KeyAnnounce",
            MessageKind::RosterPublish => "RosterPublish",
            MessageKind::OprfRequest => "OprfRequest",
            MessageKind::OprfResponse => "OprfResponse",
            MessageKind::Report => "Report",
            MessageKind::MissingList => "MissingList",
            MessageKind::AdjustedReport => "AdjustedReport",
            MessageKind::ThresholdBroadcast => "ThresholdBroadcast",
            MessageKind::UsersCountRequest => "UsersCountRequest",
            MessageKind::UsersCountResponse => "UsersCountResponse",
        }
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    KeyAnnounce { user: u32, public_key: Vec<u8> },
    /// The roster in its text form.
    RosterPublish { roster: String },
    OprfRequest { element: Vec<u8> },
    OprfResponse { element: Vec<u8> },
    Report(BlindedReport),
    MissingList { missing: Vec<u32> },
    AdjustedReport(BlindedReport),
    ThresholdBroadcast(ThresholdBroadcast),
    UsersCountRequest { ids: Vec<AdId> },
    UsersCountResponse { counts: Vec<u32> },
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self {
            Message::KeyAnnounce { .. } => MessageKind::KeyAnnounce,
            Message::RosterPublish { .. } => MessageKind::RosterPublish,
            Message::OprfRequest { .. } => MessageKind::OprfRequest,
            Message::OprfResponse { .. } => MessageKind::OprfResponse,
            Message::Report(_) => MessageKind::Report,
            Message::MissingList { .. } => MessageKind::MissingList,
            Message::AdjustedReport(_) => MessageKind::AdjustedReport,
            Message::ThresholdBroadcast(_) => MessageKind::ThresholdBroadcast,
            Message::UsersCountRequest { .. } => MessageKind::UsersCountRequest,
            Message::UsersCountResponse { .. } => MessageKind::UsersCountResponse,
        }
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

fn mode_byte(mode: ThresholdMode) -> u8 {
    match mode {
        ThresholdMode::Mean => 0,
        ThresholdMode::MeanPlusMedian => 1,
    }
}

pub fn encode(tag: RoundTag, msg: &Message) -> Vec<u8> {
    let mut body = Vec::new();
    match msg {
        Message::KeyAnnounce { user, public_key } => {
            body.extend_from_slice(&user.to_le_bytes());
            put_bytes(&mut body, public_key);
        }
        Message::RosterPublish { roster } => put_bytes(&mut body, roster.as_bytes()),
        Message::OprfRequest { element } | Message::OprfResponse { element } => {
            put_bytes(&mut body, element)
        }
        Message::Report(r) | Message::AdjustedReport(r) => body = r.to_bytes(),
        Message::MissingList { missing } => {
            body.extend_from_slice(&(missing.len() as u32).to_le_bytes());
            missing.iter().for_each(|m| body.extend_from_slice(&m.to_le_bytes()));
        }
        Message::ThresholdBroadcast(b) => {
            body.extend_from_slice(&b.tag.round.to_le_bytes());
            body.extend_from_slice(&b.tag.retry.to_le_bytes());
            body.extend_from_slice(&b.users_th.ratio().numer().to_le_bytes());
            body.extend_from_slice(&b.users_th.ratio().denom().to_le_bytes());
            body.push(mode_byte(b.mode));
            body.extend_from_slice(&b.distinct_ads.to_le_bytes());
        }
        Message::UsersCountRequest { ids } => {
            body.extend_from_slice(&(ids.len() as u32).to_le_bytes());
            ids.iter().for_each(|id| body.extend_from_slice(&id.get().to_le_bytes()));
        }
        Message::UsersCountResponse { counts } => {
            body.extend_from_slice(&(counts.len() as u32).to_le_bytes());
            counts.iter().for_each(|c| body.extend_from_slice(&c.to_le_bytes()));
        }
    }
    let mut out = Vec::with_capacity(ENVELOPE_HEADER_BYTES + body.len());
    out.extend_from_slice(&((ENVELOPE_HEADER_BYTES - 4 + body.len()) as u32).to_le_bytes());
    out.push(SCHEMA_VERSION);
    out.push(msg.kind() as u8);
    out.extend_from_slice(&tag.round.to_le_bytes());
    out.extend_from_slice(&tag.retry.to_le_bytes());
    out.extend_from_slice(&body);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(WireError::Truncated {
                needed: n,
                have: self.buf.len(),
            });
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<Vec<u8>, WireError> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }

    fn list<T>(&mut self, item: usize, f: impl Fn(&[u8]) -> T) -> Result<Vec<T>, WireError> {
        let n = self.u32()? as usize;
        let raw = self.take(n.checked_mul(item).ok_or_else(|| WireError::Body("list too long".into()))?)?;
        Ok(raw.chunks_exact(item).map(f).collect())
    }
}

/// Decodes one complete envelope.
pub fn decode(bytes: &[u8]) -> Result<(RoundTag, Message), WireError> {
    let mut r = Reader { buf: bytes };
    let len = r.u32()? as usize;
    if r.buf.len() < len {
        return Err(WireError::Truncated {
            needed: len,
            have: r.buf.len(),
        });
    }
    if r.buf.len() > len {
        return Err(WireError::Trailing(r.buf.len() - len));
    }
    let version = r.u8()?;
    if version != SCHEMA_VERSION {
        return Err(WireError::Version(version));
    }
    let kind = MessageKind::from_byte(r.u8()?)?;
    let tag = RoundTag::new(r.u64()?).with_retry(r.u32()?);
    let msg = match kind {
        MessageKind::KeyAnnounce => Message::KeyAnnounce {
            user: r.u32()?,
            public_key: r.bytes()?,
        },
        MessageKind::RosterPublish => Message::RosterPublish {
            roster: String::from_utf8(r.bytes()?).map_err(|_| WireError::Body("roster is not UTF-8".into()))?,
        },
        MessageKind::OprfRequest => Message::OprfRequest { element: r.bytes()? },
        MessageKind::OprfResponse => Message::OprfResponse { element: r.bytes()? },
        MessageKind::Report | MessageKind::AdjustedReport => {
            let report = BlindedReport::from_bytes(r.buf)?;
            r.buf = &[];
            if kind == MessageKind::Report {
                Message::Report(report)
            } else {
                Message::AdjustedReport(report)
            }
        }
        MessageKind::MissingList => Message::MissingList {
            missing: r.list(4, |c| u32::from_le_bytes(c.try_into().unwrap()))?,
        },
        MessageKind::ThresholdBroadcast => {
            let inner = RoundTag::new(r.u64()?).with_retry(r.u32()?);
            let (numer, denom) = (r.u64()?, r.u64()?);
            if denom == 0 {
                return Err(WireError::Body("zero threshold denominator".into()));
            }
            let mode = match r.u8()? {
                0 => ThresholdMode::Mean,
                1 => ThresholdMode::MeanPlusMedian,
                b => return Err(WireError::Body(format!("unknown threshold mode {b}"))),
            };
            Message::ThresholdBroadcast(ThresholdBroadcast {
                tag: inner,
                users_th: Threshold::new(numer, denom),
                mode,
                distinct_ads: r.u64()?,
            })
        }
        MessageKind::UsersCountRequest => Message::UsersCountRequest {
            ids: r.list(8, |c| AdId::new(u64::from_le_bytes(c.try_into().unwrap())))?,
        },
        MessageKind::UsersCountResponse => Message::UsersCountResponse {
            counts: r.list(4, |c| u32::from_le_bytes(c.try_into().unwrap()))?,
        },
    };
    if !r.buf.is_empty() {
        return Err(WireError::Trailing(r.buf.len()));
    }
    Ok((tag, msg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples() -> Vec<Message> {
        let report = BlindedReport {
            tag: RoundTag::new(3),
            user: 2,
            params_digest: [7; 32],
            cells: vec![1, u32::MAX, 0],
        };
        vec![
            Message::KeyAnnounce { user: 4, public_key: vec![1; 32] },
            Message::RosterPublish { roster: "round 3\ngroup g\n1 00\n".into() },
            Message::OprfRequest { element: vec![9; 64] },
            Message::OprfResponse { element: vec![8; 64] },
            Message::Report(report.clone()),
            Message::MissingList { missing: vec![3, 7] },
            Message::AdjustedReport(report),
            Message::ThresholdBroadcast(ThresholdBroadcast {
                tag: RoundTag::new(3).with_retry(1),
                users_th: Threshold::new(15, 2),
                mode: ThresholdMode::MeanPlusMedian,
                distinct_ads: 40,
            }),
            Message::UsersCountRequest { ids: vec![AdId::new(1), AdId::new(1 << 40)] },
            Message::UsersCountResponse { counts: vec![2, 0] },
        ]
    }

    #[test]
    fn round_trip_every_kind() {
        let tag = RoundTag::new(3).with_retry(1);
        for msg in samples() {
            let bytes = encode(tag, &msg);
            assert_eq!(
                u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize,
                bytes.len() - 4
            );
            assert_eq!(bytes[4], SCHEMA_VERSION);
            assert_eq!(decode(&bytes).unwrap(), (tag, msg));
        }
    }

    #[test]
    fn rejects_bad_envelopes() {
        let bytes = encode(RoundTag::new(1), &Message::MissingList { missing: vec![1] });
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(WireError::Truncated { .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert_eq!(decode(&extra), Err(WireError::Trailing(1)));
        let mut v = bytes.clone();
        v[4] = 9;
        assert_eq!(decode(&v), Err(WireError::Version(9)));
        let mut k = bytes;
        k[5] = 99;
        assert_eq!(decode(&k), Err(WireError::UnknownKind(99)));
    }
}
