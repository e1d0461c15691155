//! Prime-order groups used for the pairwise Diffie-Hellman agreement.

use curve25519_dalek::constants::RISTRETTO_BASEPOINT_TABLE;
use curve25519_dalek::ristretto::{CompressedRistretto, RistrettoPoint};
use curve25519_dalek::scalar::Scalar;
use curve25519_dalek::traits::Identity;
use rand::{CryptoRng, Rng, RngCore};

/// A cyclic group of prime order in which CDH is assumed hard.
///
/// Implementations are zero-sized markers; all operations are associated
/// functions.
pub trait DhGroup: Send + Sync + 'static {
    type Scalar: Clone + Send + Sync;
    type Element: Clone + PartialEq + Send + Sync + std::fmt::Debug;

    /// Name written into roster files.
    const NAME: &'static str;
    /// Set for groups that must never protect real data.
    const INSECURE: bool;

    /// Uniform non-zero scalar.
    fn random_scalar<R: RngCore + CryptoRng>(rng: &mut R) -> Self::Scalar;
    fn generator_mul(s: &Self::Scalar) -> Self::Element;
    fn mul(e: &Self::Element, s: &Self::Scalar) -> Self::Element;
    fn is_identity(e: &Self::Element) -> bool;
    fn encode(e: &Self::Element) -> Vec<u8>;
    /// `None` for byte strings that are not a canonical group element.
    fn decode(bytes: &[u8]) -> Option<Self::Element>;
}

/// The ristretto255 group over Curve25519.
#[derive(Debug, Clone, Copy, Default)]
pub struct Ristretto255;

impl DhGroup for Ristretto255 {
    type Scalar = Scalar;
    type Element = RistrettoPoint;

    const NAME: &'static str = "ristretto255";
    const INSECURE: bool = false;

    fn random_scalar<R: RngCore + CryptoRng>(rng: &mut R) -> Scalar {
        loop {
            let s = Scalar::random(rng);
            if s != Scalar::ZERO {
                return s;
            }
        }
    }

    fn generator_mul(s: &Scalar) -> RistrettoPoint {
        RISTRETTO_BASEPOINT_TABLE * s
    }

    fn mul(e: &RistrettoPoint, s: &Scalar) -> RistrettoPoint {
        e * s
    }

    fn is_identity(e: &RistrettoPoint) -> bool {
        *e == RistrettoPoint::identity()
    }

    fn encode(e: &RistrettoPoint) -> Vec<u8> {
        e.compress().to_bytes().to_vec()
    }

    fn decode(bytes: &[u8]) -> Option<RistrettoPoint> {
        CompressedRistretto::from_slice(bytes).ok()?.decompress()
    }
}

/// Quadratic residues modulo the 62-bit safe prime `p = 2q + 1`.
///
/// INSECURE: discrete logs in a 62-bit group are trivial to compute. It exists
/// so unit tests can run thousands of key agreements cheaply.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToySafePrimeGroup;

impl ToySafePrimeGroup {
    pub const P: u64 = 4_611_686_018_427_377_339;
    pub const Q: u64 = (Self::P - 1) / 2;
    pub const G: u64 = 4;

    fn mul_mod(a: u64, b: u64) -> u64 {
        ((a as u128 * b as u128) % Self::P as u128) as u64
    }

    fn pow_mod(mut base: u64, mut exp: u64) -> u64 {
        let mut acc = 1u64;
        base %= Self::P;
        while exp > 0 {
            if exp & 1 == 1 {
                acc = Self::mul_mod(acc, base);
            }
            base = Self::mul_mod(base, base);
            exp >>= 1;
        }
        acc
    }
}

impl DhGroup for ToySafePrimeGroup {
    type Scalar = u64;
    type Element = u64;

    const NAME: &'static str = "toy-safe-prime-62";
    const INSECURE: bool = true;

    fn random_scalar<R: RngCore + CryptoRng>(rng: &mut R) -> u64 {
        rng.gen_range(1..Self::Q)
    }

    fn generator_mul(s: &u64) -> u64 {
        Self::pow_mod(Self::G, *s)
    }

    fn mul(e: &u64, s: &u64) -> u64 {
        Self::pow_mod(*e, *s)
    }

    fn is_identity(e: &u64) -> bool {
        *e == 1
    }

    fn encode(e: &u64) -> Vec<u8> {
        e.to_be_bytes().to_vec()
    }

    fn decode(bytes: &[u8]) -> Option<u64> {
        let v = u64::from_be_bytes(bytes.try_into().ok()?);
        // members of the order-q subgroup satisfy v^q = 1
        (v != 0 && v < Self::P && Self::pow_mod(v, Self::Q) == 1).then_some(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn dh_commutes<G: DhGroup>() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let (a, b) = (G::random_scalar(&mut rng), G::random_scalar(&mut rng));
        let (ya, yb) = (G::generator_mul(&a), G::generator_mul(&b));
        assert_eq!(G::encode(&G::mul(&yb, &a)), G::encode(&G::mul(&ya, &b)));
        assert_eq!(G::decode(&G::encode(&ya)), Some(ya));
    }

    #[test]
    fn key_agreement_is_symmetric() {
        dh_commutes::<Ristretto255>();
        dh_commutes::<ToySafePrimeGroup>();
    }

    #[test]
    fn toy_group_rejects_non_members() {
        assert_eq!(ToySafePrimeGroup::decode(&0u64.to_be_bytes()), None);
        assert_eq!(ToySafePrimeGroup::decode(&ToySafePrimeGroup::P.to_be_bytes()), None);
        // -1 is a non-residue modulo a safe prime with p = 3 mod 4
        assert_eq!(ToySafePrimeGroup::decode(&(ToySafePrimeGroup::P - 1).to_be_bytes()), None);
        assert_eq!(ToySafePrimeGroup::pow_mod(ToySafePrimeGroup::G, ToySafePrimeGroup::Q), 1);
    }

    #[test]
    fn ristretto_rejects_garbage() {
        assert_eq!(Ristretto255::decode(&[0xff; 32]), None);
        assert_eq!(Ristretto255::decode(&[1, 2, 3]), None);
    }
}
