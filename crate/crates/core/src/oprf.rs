//! RSA-based oblivious PRF that maps ad URLs to ad IDs.
//!
//! The PRF is `F(k, x) = G(H(x)^d mod N)`, where `H` is a full-domain hash into
//! `Z_N` and `G` hashes the result to 64 bits. A client sends the blinded
//! request `H(x) * r^e`, the server raises it to `d`, and the client divides
//! out `r`. The server never sees `H(x)`; the client never learns `d`.
//!
//! Both wire messages are one big-endian integer padded to the byte length of
//! the modulus.

use std::collections::HashMap;

use num_bigint_dig::{BigUint, ModInverse, RandBigInt, RandPrime};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Default size of the ad-ID space, an overestimate of the distinct ads seen
/// in a round.
pub const DEFAULT_AD_SPACE: u64 = 1 << 20;

/// Keys shorter than this are flagged insecure.
pub const SECURE_KEY_BITS: usize = 2048;

const FDH_LABEL: &[u8] = b"adcensus/oprf-fdh/v1";
const OUTPUT_LABEL: &[u8] = b"adcensus/oprf-output/v1";
const PUBLIC_EXPONENT: u32 = 65_537;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum OprfError {
    #[error("cannot generate a {0}-bit RSA key")]
    KeySize(usize),
    #[error("request is not in (0, N)")]
    OutOfRange,
    #[error("server response does not verify against the requested hash")]
    Inconsistent,
    #[error("element encoding has {found} bytes, expected {expected}")]
    Encoding { expected: usize, found: usize },
    #[error("ad space must be at least 1")]
    EmptyAdSpace,
    #[error("transport failure: {reason}")]
    Transport { reason: String, retryable: bool },
    #[error("malformed key descriptor at line {line}: {reason}")]
    Descriptor { line: usize, reason: String },
}

/// Pseudorandom identifier of an ad, in `[1, |A|]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AdId(u64);

impl AdId {
    pub const fn new(value: u64) -> Self {
        AdId(value)
    }

    pub const fn get(self) -> u64 {
        self.0
    }
}

impl std::fmt::Display for AdId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

/// The published half of the server key: `(N, e)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OprfPublicKey {
    modulus: BigUint,
    exponent: BigUint,
    bits: usize,
    insecure: bool,
}

impl OprfPublicKey {
    pub fn modulus(&self) -> &BigUint {
        &self.modulus
    }

    pub fn exponent(&self) -> &BigUint {
        &self.exponent
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn insecure(&self) -> bool {
        self.insecure
    }

    /// Byte length of every element on the wire.
    pub fn element_len(&self) -> usize {
        self.modulus.bits().div_ceil(8)
    }

    pub fn encode_element(&self, v: &BigUint) -> Vec<u8> {
        let raw = v.to_bytes_be();
        let mut out = vec![0u8; self.element_len().saturating_sub(raw.len())];
        out.extend_from_slice(&raw);
        out
    }

    pub fn decode_element(&self, bytes: &[u8]) -> Result<BigUint, OprfError> {
        if bytes.len() != self.element_len() {
            return Err(OprfError::Encoding {
                expected: self.element_len(),
                found: bytes.len(),
            });
        }
        let v = BigUint::from_bytes_be(bytes);
        if v.is_zero() || v >= self.modulus {
            return Err(OprfError::OutOfRange);
        }
        Ok(v)
    }

    /// Key descriptor file:
    ///
    /// ```text
    /// bits 1024
    /// insecure true
    /// e 010001
    /// n <hex modulus>
    /// ```
    pub fn to_descriptor(&self) -> String {
        format!(
            "bits {}\ninsecure {}\ne {}\nn {}\n",
            self.bits,
            self.insecure,
            self.exponent.to_str_radix(16),
            self.modulus.to_str_radix(16)
        )
    }

    pub fn from_descriptor(text: &str) -> Result<Self, OprfError> {
        let (mut bits, mut insecure, mut e, mut n) = (None, None, None, None);
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: &str| OprfError::Descriptor {
                line: i + 1,
                reason: reason.into(),
            };
            let (key, value) = line.split_once(' ').ok_or_else(|| err("expected `key value`"))?;
            let value = value.trim();
            match key {
                "bits" => bits = Some(value.parse::<usize>().map_err(|_| err("bad bits"))?),
                "insecure" => insecure = Some(value.parse::<bool>().map_err(|_| err("bad flag"))?),
                "e" => e = Some(BigUint::parse_bytes(value.as_bytes(), 16).ok_or_else(|| err("bad e"))?),
                "n" => n = Some(BigUint::parse_bytes(value.as_bytes(), 16).ok_or_else(|| err("bad n"))?),
                _ => return Err(err("unknown key")),
            }
        }
        let missing = |what: &str| OprfError::Descriptor {
            line: 0,
            reason: format!("missing `{what}`"),
        };
        let key = OprfPublicKey {
            bits: bits.ok_or_else(|| missing("bits"))?,
            insecure: insecure.ok_or_else(|| missing("insecure"))?,
            exponent: e.ok_or_else(|| missing("e"))?,
            modulus: n.ok_or_else(|| missing("n"))?,
        };
        if key.modulus.bits() != key.bits {
            return Err(OprfError::Descriptor {
                line: 0,
                reason: "modulus length does not match `bits`".into(),
            });
        }
        Ok(key)
    }
}

/// The oprf-server's RSA key. `d` never leaves this type except through
/// [`OprfServerKey::private_exponent`].
#[derive(Clone)]
pub struct OprfServerKey {
    public: OprfPublicKey,
    d: BigUint,
    p: BigUint,
    q: BigUint,
    d_p: BigUint,
    d_q: BigUint,
    q_inv: BigUint,
}

impl std::fmt::Debug for OprfServerKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OprfServerKey")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

impl OprfServerKey {
    /// Generates an RSA key with a `bits`-bit modulus and `e = 65537`.
    pub fn generate<R: RngCore + CryptoRng>(bits: usize, rng: &mut R) -> Result<Self, OprfError> {
        if bits < 64 || bits % 2 != 0 {
            return Err(OprfError::KeySize(bits));
        }
        let e = BigUint::from(PUBLIC_EXPONENT);
        loop {
            let p: BigUint = rng.gen_prime(bits / 2);
            let q: BigUint = rng.gen_prime(bits / 2);
            if p == q {
                continue;
            }
            let n = &p * &q;
            if n.bits() != bits {
                continue;
            }
            let one = BigUint::one();
            let phi = (&p - &one) * (&q - &one);
            if !e.gcd(&phi).is_one() {
                continue;
            }
            let d = e
                .clone()
                .mod_inverse(&phi)
                .and_then(|d| d.to_biguint())
                .expect("e is invertible modulo phi");
            assert!((&e * &d % &phi).is_one(), "ed = 1 mod phi(N)");
            let q_inv = q
                .clone()
                .mod_inverse(&p)
                .and_then(|v| v.to_biguint())
                .expect("distinct primes are coprime");
            return Ok(Self {
                d_p: &d % (&p - &one),
                d_q: &d % (&q - &one),
                q_inv,
                d,
                p,
                q,
                public: OprfPublicKey {
                    modulus: n,
                    exponent: e,
                    bits,
                    insecure: bits < SECURE_KEY_BITS,
                },
            });
        }
    }

    /// Deterministic key for simulations and tests.
    pub fn generate_seeded(bits: usize, seed: u64) -> Result<Self, OprfError> {
        Self::generate(bits, &mut ChaCha20Rng::seed_from_u64(seed))
    }

    pub fn public(&self) -> &OprfPublicKey {
        &self.public
    }

    pub fn private_exponent(&self) -> &BigUint {
        &self.d
    }

    /// `request^d mod N`, computed with the CRT.
    pub fn evaluate(&self, request: &BigUint) -> Result<BigUint, OprfError> {
        if request.is_zero() || request >= &self.public.modulus {
            return Err(OprfError::OutOfRange);
        }
        let m1 = request.modpow(&self.d_p, &self.p);
        let m2 = request.modpow(&self.d_q, &self.q);
        let diff = (&m1 + &self.p - (&m2 % &self.p)) % &self.p;
        let h = (&self.q_inv * diff) % &self.p;
        Ok(m2 + h * &self.q)
    }
}

/// Full-domain hash of `input` into `(0, N)`.
///
/// SHA-256 is run in counter mode to produce as many bytes as the modulus,
/// the excess high bits are cleared, and candidates outside `(0, N)` are
/// rejected.
pub fn fdh_hash(input: &[u8], modulus: &BigUint) -> BigUint {
    let bits = modulus.bits();
    let len = bits.div_ceil(8);
    let excess = len * 8 - bits;
    for attempt in 0u32.. {
        let mut bytes = Vec::with_capacity(len + 32);
        let mut block = 0u32;
        while bytes.len() < len {
            let mut h = Sha256::new();
            h.update(FDH_LABEL);
            h.update(attempt.to_be_bytes());
            h.update(block.to_be_bytes());
            h.update(input);
            bytes.extend_from_slice(&h.finalize());
            block += 1;
        }
        bytes.truncate(len);
        bytes[0] &= 0xff >> excess;
        let candidate = BigUint::from_bytes_be(&bytes);
        if !candidate.is_zero() && &candidate < modulus {
            return candidate;
        }
    }
    unreachable!("rejection sampling terminates")
}

/// `G`: hashes the canonical encoding of `H(x)^d` to 64 bits and reduces it
/// into `[1, ad_space]`.
pub fn output_id(public: &OprfPublicKey, unblinded: &BigUint, ad_space: u64) -> AdId {
    let mut h = Sha256::new();
    h.update(OUTPUT_LABEL);
    h.update(public.encode_element(unblinded));
    let digest = h.finalize();
    let g = u64::from_be_bytes(digest[..8].try_into().unwrap());
    AdId(g % ad_space + 1)
}

/// Client-side state between sending a request and receiving the response.
#[derive(Debug, Clone)]
pub struct OprfPending {
    r: BigUint,
    digest: BigUint,
}

impl OprfPending {
    pub fn blinding_factor(&self) -> &BigUint {
        &self.r
    }

    /// `H(url)`
    pub fn digest(&self) -> &BigUint {
        &self.digest
    }
}

/// `H(url) * r^e mod N` for a fresh unit `r`.
pub fn blind_request<R: RngCore + CryptoRng>(
    url: &[u8],
    public: &OprfPublicKey,
    rng: &mut R,
) -> (BigUint, OprfPending) {
    let n = &public.modulus;
    let r = loop {
        let r = rng.gen_biguint_below(n);
        if !r.is_zero() && r.gcd(n).is_one() {
            break r;
        }
    };
    let digest = fdh_hash(url, n);
    let request = (&digest * r.modpow(&public.exponent, n)) % n;
    (request, OprfPending { r, digest })
}

/// Removes the blinding and maps the PRF value into the ad space. Fails if
/// the server's answer does not satisfy `y'^e = H(url)`.
pub fn finalize(
    signed: &BigUint,
    pending: &OprfPending,
    public: &OprfPublicKey,
    ad_space: u64,
) -> Result<AdId, OprfError> {
    if ad_space == 0 {
        return Err(OprfError::EmptyAdSpace);
    }
    let n = &public.modulus;
    let r_inv = pending
        .r
        .clone()
        .mod_inverse(n)
        .and_then(|v| v.to_biguint())
        .expect("r is a unit");
    let unblinded = (signed * r_inv) % n;
    if unblinded.modpow(&public.exponent, n) != pending.digest {
        return Err(OprfError::Inconsistent);
    }
    Ok(output_id(public, &unblinded, ad_space))
}

/// One request/response exchange with the oprf-server, on wire bytes.
pub trait OprfTransport {
    fn exchange(&mut self, request: &[u8]) -> Result<Vec<u8>, OprfError>;
}

/// In-process oprf-server that counts the traffic it handles.
#[derive(Debug)]
pub struct LocalOprfServer {
    key: OprfServerKey,
    pub exchanges: u64,
    pub bytes_in: u64,
    pub bytes_out: u64,
}

impl LocalOprfServer {
    pub fn new(key: OprfServerKey) -> Self {
        Self {
            key,
            exchanges: 0,
            bytes_in: 0,
            bytes_out: 0,
        }
    }

    pub fn key(&self) -> &OprfServerKey {
        &self.key
    }

    /// Decodes, evaluates and re-encodes one request.
    pub fn handle(&self, request: &[u8]) -> Result<Vec<u8>, OprfError> {
        let public = self.key.public();
        let x = public.decode_element(request)?;
        Ok(public.encode_element(&self.key.evaluate(&x)?))
    }
}

impl OprfTransport for LocalOprfServer {
    fn exchange(&mut self, request: &[u8]) -> Result<Vec<u8>, OprfError> {
        let response = self.handle(request)?;
        self.exchanges += 1;
        self.bytes_in += request.len() as u64;
        self.bytes_out += response.len() as u64;
        Ok(response)
    }
}

/// Client side of the mapping with a per-URL cache, so each distinct ad costs
/// at most one exchange.
#[derive(Debug)]
pub struct OprfClient {
    public: OprfPublicKey,
    ad_space: u64,
    cache: HashMap<String, AdId>,
    rng: ChaCha20Rng,
}

impl OprfClient {
    pub fn new(public: OprfPublicKey, ad_space: u64, seed: u64) -> Result<Self, OprfError> {
        if ad_space == 0 {
            return Err(OprfError::EmptyAdSpace);
        }
        Ok(Self {
            public,
            ad_space,
            cache: HashMap::new(),
            rng: ChaCha20Rng::seed_from_u64(seed),
        })
    }

    pub fn ad_space(&self) -> u64 {
        self.ad_space
    }

    pub fn cached(&self, url: &str) -> Option<AdId> {
        self.cache.get(url).copied()
    }

    pub fn map_url<T: OprfTransport + ?Sized>(
        &mut self,
        url: &str,
        transport: &mut T,
    ) -> Result<AdId, OprfError> {
        if let Some(id) = self.cache.get(url) {
            return Ok(*id);
        }
        let (request, pending) = blind_request(url.as_bytes(), &self.public, &mut self.rng);
        let response = transport.exchange(&self.public.encode_element(&request))?;
        let signed = self.public.decode_element(&response)?;
        let id = finalize(&signed, &pending, &self.public, self.ad_space)?;
        self.cache.insert(url.to_string(), id);
        Ok(id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn test_key() -> OprfServerKey {
        OprfServerKey::generate_seeded(512, 1).unwrap()
    }

    /// Key-holder computation written independently of `finalize`.
    fn direct_map(key: &OprfServerKey, url: &str, ad_space: u64) -> AdId {
        let n = key.public().modulus();
        let y = fdh_hash(url.as_bytes(), n).modpow(key.private_exponent(), n);
        let mut bytes = y.to_bytes_be();
        while bytes.len() < key.public().element_len() {
            bytes.insert(0, 0);
        }
        let digest = Sha256::new()
            .chain_update(b"adcensus/oprf-output/v1")
            .chain_update(&bytes)
            .finalize();
        AdId::new(u64::from_be_bytes(digest[..8].try_into().unwrap()) % ad_space + 1)
    }

    #[test]
    fn rsa_round_trip_and_flags() {
        let key = test_key();
        assert!(key.public().insecure());
        assert_eq!(key.public().bits(), 512);
        let n = key.public().modulus().clone();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for _ in 0..100 {
            let m = rng.gen_biguint_below(&n);
            if m.is_zero() {
                continue;
            }
            let c = m.modpow(key.public().exponent(), &n);
            assert_eq!(key.evaluate(&c).unwrap(), m);
            assert_eq!(c.modpow(key.private_exponent(), &n), m);
        }
        assert_eq!(key.evaluate(&BigUint::one()).unwrap(), BigUint::one());
        assert_eq!(key.evaluate(&BigUint::zero()), Err(OprfError::OutOfRange));
        assert_eq!(key.evaluate(&n), Err(OprfError::OutOfRange));
        let other = OprfServerKey::generate_seeded(512, 2).unwrap();
        assert_ne!(other.public().modulus(), key.public().modulus());
        assert_eq!(OprfServerKey::generate_seeded(63, 0).unwrap_err(), OprfError::KeySize(63));
    }

    #[test]
    fn fdh_is_deterministic_and_in_range() {
        let key = test_key();
        let n = key.public().modulus();
        assert_eq!(fdh_hash(b"https://a.example/x", n), fdh_hash(b"https://a.example/x", n));
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let url: [u8; 12] = rng.gen();
            let h = fdh_hash(&url, n);
            assert!(!h.is_zero() && &h < n);
        }
    }

    #[test]
    fn fdh_rejects_out_of_range_candidates() {
        // 2^16 + 1 leaves almost half of every 17-bit draw above the modulus
        let n = BigUint::from(65_537u32);
        for i in 0..500u32 {
            let h = fdh_hash(&i.to_le_bytes(), &n);
            assert!(!h.is_zero() && h < n);
        }
    }

    #[test]
    fn fdh_buckets_are_balanced() {
        // chi-square over 20 equal-width buckets of Z_N, 19 dof, p=0.001 critical value 43.8
        let key = test_key();
        let n = key.public().modulus();
        let buckets = 20u32;
        let width = n / BigUint::from(buckets);
        let mut counts = vec![0f64; buckets as usize];
        let trials = 10_000;
        for i in 0..trials {
            let h = fdh_hash(format!("https://ads.example/{i}").as_bytes(), n);
            let b = num_traits::ToPrimitive::to_usize(&(h / &width)).unwrap();
            counts[b.min(buckets as usize - 1)] += 1.0;
        }
        let expected = trials as f64 / buckets as f64;
        let chi2: f64 = counts.iter().map(|o| (o - expected).powi(2) / expected).sum();
        assert!(chi2 < 43.8, "chi-square {chi2}");
    }

    #[test]
    fn blinded_protocol_matches_direct_map() {
        let key = test_key();
        let public = key.public().clone();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        for i in 0..50 {
            let url = format!("https://shop.example/item/{i}");
            let (request, pending) = blind_request(url.as_bytes(), &public, &mut rng);
            assert!(!request.is_zero() && &request < public.modulus());
            let r_e = pending.blinding_factor().modpow(public.exponent(), public.modulus());
            let r_e_inv = r_e.mod_inverse(public.modulus()).unwrap().to_biguint().unwrap();
            assert_eq!((&request * r_e_inv) % public.modulus(), fdh_hash(url.as_bytes(), public.modulus()));
            let signed = key.evaluate(&request).unwrap();
            let id = finalize(&signed, &pending, &public, DEFAULT_AD_SPACE).unwrap();
            assert_eq!(id, direct_map(&key, &url, DEFAULT_AD_SPACE));
            assert!((1..=DEFAULT_AD_SPACE).contains(&id.get()));
        }
    }

    #[test]
    fn fresh_blinding_hides_repetition() {
        let key = test_key();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let (a, pa) = blind_request(b"https://x.example", key.public(), &mut rng);
        let (b, pb) = blind_request(b"https://x.example", key.public(), &mut rng);
        assert_ne!(a, b);
        let ia = finalize(&key.evaluate(&a).unwrap(), &pa, key.public(), 1000).unwrap();
        let ib = finalize(&key.evaluate(&b).unwrap(), &pb, key.public(), 1000).unwrap();
        assert_eq!(ia, ib);
    }

    #[test]
    fn tampered_response_is_detected() {
        let key = test_key();
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let (req, pending) = blind_request(b"https://y.example", key.public(), &mut rng);
        let signed = key.evaluate(&req).unwrap() + BigUint::one();
        assert_eq!(
            finalize(&signed, &pending, key.public(), 1000),
            Err(OprfError::Inconsistent)
        );
        assert_eq!(
            finalize(&signed, &pending, key.public(), 0),
            Err(OprfError::EmptyAdSpace)
        );
    }

    #[test]
    fn cache_avoids_second_exchange() {
        let key = test_key();
        let mut server = LocalOprfServer::new(key.clone());
        let mut client = OprfClient::new(key.public().clone(), DEFAULT_AD_SPACE, 7).unwrap();
        let a = client.map_url("https://z.example/ad", &mut server).unwrap();
        assert_eq!(server.exchanges, 1);
        let len = key.public().element_len() as u64;
        assert_eq!((server.bytes_in, server.bytes_out), (len, len));
        let b = client.map_url("https://z.example/ad", &mut server).unwrap();
        assert_eq!(a, b);
        assert_eq!(server.exchanges, 1);
    }

    struct Down;
    impl OprfTransport for Down {
        fn exchange(&mut self, _: &[u8]) -> Result<Vec<u8>, OprfError> {
            Err(OprfError::Transport {
                reason: "connection refused".into(),
                retryable: true,
            })
        }
    }

    #[test]
    fn transport_failure_is_retryable_and_not_cached() {
        let key = test_key();
        let mut client = OprfClient::new(key.public().clone(), 10, 8).unwrap();
        assert!(matches!(
            client.map_url("https://q.example", &mut Down),
            Err(OprfError::Transport { retryable: true, .. })
        ));
        assert_eq!(client.cached("https://q.example"), None);
        let mut server = LocalOprfServer::new(key);
        assert!(client.map_url("https://q.example", &mut server).is_ok());
    }

    #[test]
    fn descriptor_round_trip() {
        let key = test_key();
        let text = key.public().to_descriptor();
        assert!(!text.contains(&key.private_exponent().to_str_radix(16)));
        assert_eq!(&OprfPublicKey::from_descriptor(&text).unwrap(), key.public());
        assert!(matches!(
            OprfPublicKey::from_descriptor("bits x\n"),
            Err(OprfError::Descriptor { line: 1, .. })
        ));
    }

    #[test]
    fn birthday_collisions() {
        // 1000 URLs into 2^20 ids: expected colliding pairs C(1000,2)/2^20 ~ 0.476
        let key = test_key();
        let mut server = LocalOprfServer::new(key.clone());
        let mut client = OprfClient::new(key.public().clone(), DEFAULT_AD_SPACE, 9).unwrap();
        let mut ids: Vec<u64> = (0..1000)
            .map(|i| client.map_url(&format!("https://c.example/{i}"), &mut server).unwrap().get())
            .collect();
        ids.sort_unstable();
        let collisions = ids.windows(2).filter(|w| w[0] == w[1]).count() as f64;
        let expected = 1000.0 * 999.0 / 2.0 / DEFAULT_AD_SPACE as f64;
        assert!((collisions - expected).abs() <= 3.0 * expected.sqrt() + 1.0);
    }
}
