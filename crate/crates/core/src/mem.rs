//! Sparse byte-addressable memory with an approximate region, bit-flip
//! model and NaN injection.
//!
//! All multi-byte accesses are little-endian. Never-written bytes read as 0.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::Program;

const EXPONENT_MASK: u64 = 0x7FF0_0000_0000_0000;
const MANTISSA_MASK: u64 = 0x000F_FFFF_FFFF_FFFF;
const SIGN_MASK: u64 = 0x8000_0000_0000_0000;

/// Raw IEEE-754 binary64 pattern.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Float64Bits(pub u64);

impl Float64Bits {
    pub const ZERO: Float64Bits = Float64Bits(0);

    pub fn from_f64(v: f64) -> Self {
        Float64Bits(v.to_bits())
    }

    pub fn to_f64(self) -> f64 {
        f64::from_bits(self.0)
    }

    pub fn sign(self) -> bool {
        self.0 & SIGN_MASK != 0
    }

    /// Biased 11-bit exponent field.
    pub fn exponent(self) -> u64 {
        (self.0 & EXPONENT_MASK) >> 52
    }

    pub fn mantissa(self) -> u64 {
        self.0 & MANTISSA_MASK
    }

    pub fn is_nan(self) -> bool {
        is_nan_bits(self)
    }
}

impl fmt::Debug for Float64Bits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{:016x}", self.0)
    }
}

impl fmt::Display for Float64Bits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{:016x}", self.0)
    }
}

/// NaN iff the exponent is all ones and the mantissa is nonzero.
pub fn is_nan_bits(bits: Float64Bits) -> bool {
    bits.exponent() == 0x7FF && bits.mantissa() != 0
}

/// Turns a pattern into a NaN by setting every exponent bit. Sign and
/// mantissa are kept; a zero mantissa gets its low bit set so the result is
/// not an infinity. Already-NaN patterns are returned unchanged.
pub fn nan_from(bits: Float64Bits) -> Float64Bits {
    if bits.is_nan() {
        return bits;
    }
    let mut v = bits.0 | EXPONENT_MASK;
    if v & MANTISSA_MASK == 0 {
        v |= 1;
    }
    Float64Bits(v)
}

/// Half-open byte range `[start, start + len)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub start: u64,
    pub len: u64,
}

impl Region {
    pub fn new(start: u64, len: u64) -> Result<Self, MemError> {
        if len == 0 {
            return Err(MemError::EmptyRegion);
        }
        if start.checked_add(len - 1).is_none() {
            return Err(MemError::RegionWraps);
        }
        Ok(Region { start, len })
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.start && addr - self.start < self.len
    }

    /// Last address inside the region.
    pub fn last(&self) -> u64 {
        self.start + (self.len - 1)
    }

    pub fn overlaps(&self, other: &Region) -> bool {
        self.start <= other.last() && other.start <= self.last()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MemError {
    #[error("no approximate region configured")]
    NoApproxRegion,
    #[error("region length must be positive")]
    EmptyRegion,
    #[error("region wraps around the address space")]
    RegionWraps,
    #[error("flip probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("epoch length must be at least 1")]
    BadEpoch,
}

const PAGE_BITS: u32 = 12;
const PAGE_SIZE: usize = 1 << PAGE_BITS;
const PAGE_MASK: u64 = PAGE_SIZE as u64 - 1;

/// Sparse memory image. Storage is paged internally; the observable model
/// is a map from every 64-bit address to a byte, defaulting to zero.
#[derive(Clone, Default)]
pub struct MemoryImage {
    pages: BTreeMap<u64, Box<[u8; PAGE_SIZE]>>,
    approx_region: Option<Region>,
}

impl PartialEq for MemoryImage {
    fn eq(&self, other: &Self) -> bool {
        self.approx_region == other.approx_region && self.nonzero_bytes().eq(other.nonzero_bytes())
    }
}

impl fmt::Debug for MemoryImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MemoryImage")
            .field("pages", &self.pages.len())
            .field("approx_region", &self.approx_region)
            .finish()
    }
}

impl MemoryImage {
    pub fn new() -> Self {
        Self::default()
    }

    /// Memory initialized from a program's `.f64` directives.
    pub fn from_program(program: &Program) -> Self {
        let mut mem = MemoryImage::new();
        for d in program.data() {
            for (i, &v) in d.values.iter().enumerate() {
                mem.write_f64(d.address.wrapping_add(8 * i as u64), Float64Bits(v));
            }
        }
        mem
    }

    pub fn approx_region(&self) -> Option<Region> {
        self.approx_region
    }

    pub fn set_approx_region(&mut self, region: Option<Region>) {
        self.approx_region = region;
    }

    pub fn read_u8(&self, addr: u64) -> u8 {
        self.pages
            .get(&(addr >> PAGE_BITS))
            .map_or(0, |page| page[(addr & PAGE_MASK) as usize])
    }

    pub fn write_u8(&mut self, addr: u64, value: u8) {
        let page = self
            .pages
            .entry(addr >> PAGE_BITS)
            .or_insert_with(|| Box::new([0; PAGE_SIZE]));
        page[(addr & PAGE_MASK) as usize] = value;
    }

    pub fn read_bytes(&self, addr: u64) -> [u8; 8] {
        let offset = (addr & PAGE_MASK) as usize;
        if offset + 8 <= PAGE_SIZE {
            return match self.pages.get(&(addr >> PAGE_BITS)) {
                Some(page) => page[offset..offset + 8].try_into().unwrap(),
                None => [0; 8],
            };
        }
        std::array::from_fn(|i| self.read_u8(addr.wrapping_add(i as u64)))
    }

    pub fn write_bytes(&mut self, addr: u64, bytes: [u8; 8]) {
        let offset = (addr & PAGE_MASK) as usize;
        if offset + 8 <= PAGE_SIZE {
            let page = self
                .pages
                .entry(addr >> PAGE_BITS)
                .or_insert_with(|| Box::new([0; PAGE_SIZE]));
            page[offset..offset + 8].copy_from_slice(&bytes);
            return;
        }
        for (i, b) in bytes.into_iter().enumerate() {
            self.write_u8(addr.wrapping_add(i as u64), b);
        }
    }

    pub fn read_f64(&self, addr: u64) -> Float64Bits {
        Float64Bits(u64::from_le_bytes(self.read_bytes(addr)))
    }

    pub fn write_f64(&mut self, addr: u64, value: Float64Bits) {
        self.write_bytes(addr, value.0.to_le_bytes());
    }

    /// Forces the 8 bytes at `addr` to a NaN (see [`nan_from`]).
    pub fn inject_nan(&mut self, addr: u64) {
        let v = self.read_f64(addr);
        self.write_f64(addr, nan_from(v));
    }

    /// Flips bit `bit` (0 = mantissa LSB, 63 = sign) of the 64-bit word at `addr`.
    pub fn flip_bit(&mut self, addr: u64, bit: u32) {
        assert!(bit < 64, "bit index {bit} out of range");
        let v = self.read_f64(addr);
        self.write_f64(addr, Float64Bits(v.0 ^ (1u64 << bit)));
    }

    /// Every `(address, byte)` pair with a nonzero byte, in address order.
    pub fn nonzero_bytes(&self) -> impl Iterator<Item = (u64, u8)> + '_ {
        self.pages.iter().flat_map(|(&page, bytes)| {
            bytes
                .iter()
                .enumerate()
                .filter(|(_, b)| **b != 0)
                .map(move |(i, b)| ((page << PAGE_BITS) | i as u64, *b))
        })
    }

    /// Addresses whose bytes differ between two images.
    pub fn diff(&self, other: &MemoryImage) -> Vec<u64> {
        let mut keys: Vec<u64> = self
            .pages
            .keys()
            .chain(other.pages.keys())
            .copied()
            .collect();
        keys.sort_unstable();
        keys.dedup();
        let mut out = Vec::new();
        for page in keys {
            let base = page << PAGE_BITS;
            for i in 0..PAGE_SIZE as u64 {
                if self.read_u8(base | i) != other.read_u8(base | i) {
                    out.push(base | i);
                }
            }
        }
        out
    }

    /// One refresh epoch: flips each bit of the approximate region
    /// independently with probability `model.p_flip`. Returns the number of
    /// flipped bits.
    pub fn apply_epoch_flips(
        &mut self,
        model: &BitFlipModel,
        rng: &mut ChaCha8Rng,
    ) -> Result<u64, MemError> {
        let region = self.approx_region.ok_or(MemError::NoApproxRegion)?;
        if model.p_flip <= 0.0 {
            return Ok(0);
        }
        let total_bits = u128::from(region.len) * 8;
        let mut flips = 0u64;
        let mut flip = |mem: &mut MemoryImage, bit: u128| {
            let addr = region.start + (bit / 8) as u64;
            let v = mem.read_u8(addr);
            mem.write_u8(addr, v ^ (1 << (bit % 8)));
            flips += 1;
        };
        if model.p_flip >= 1.0 {
            for bit in 0..total_bits {
                flip(self, bit);
            }
            return Ok(flips);
        }
        // Gaps between successive flipped bits are geometric, which is the
        // same distribution as an independent Bernoulli draw per bit.
        let gaps =
            Geometric::new(model.p_flip).map_err(|_| MemError::BadProbability(model.p_flip))?;
        let mut bit = u128::from(gaps.sample(rng));
        while bit < total_bits {
            flip(self, bit);
            bit += 1 + u128::from(gaps.sample(rng));
        }
        Ok(flips)
    }
}

/// Stochastic bit-flip model: one flip pass per `epoch_len` executed instructions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BitFlipModel {
    pub p_flip: f64,
    pub epoch_len: u64,
    pub seed: u64,
}

impl BitFlipModel {
    pub fn new(p_flip: f64, epoch_len: u64, seed: u64) -> Result<Self, MemError> {
        let model = BitFlipModel {
            p_flip,
            epoch_len,
            seed,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), MemError> {
        if !(0.0..=1.0).contains(&self.p_flip) {
            return Err(MemError::BadProbability(self.p_flip));
        }
        if self.epoch_len == 0 {
            return Err(MemError::BadEpoch);
        }
        Ok(())
    }

    /// Fresh generator seeded from the model.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// Uniform sample in `[1, 2)`.
pub(crate) fn unit_interval_1_2(rng: &mut impl Rng) -> f64 {
    1.0 + rng.random::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nan_predicate() {
        assert!(is_nan_bits(Float64Bits(0x7ff0464544434241)));
        assert!(!is_nan_bits(Float64Bits(0x7ff0000000000000)));
        assert!(!is_nan_bits(Float64Bits(0x3ff0000000000000)));
        assert!(is_nan_bits(Float64Bits(0xfff8000000000000)));
        assert!(!is_nan_bits(Float64Bits(0xfff0000000000000)));
    }

    #[test]
    fn field_accessors() {
        let v = Float64Bits(0x7ff0464544434241);
        assert_eq!(v.exponent(), 0x7ff);
        assert_eq!(v.mantissa(), 0x0464544434241);
        assert!(!v.sign());
        assert!(Float64Bits::from_f64(-1.0).sign());
    }

    #[test]
    fn read_write_roundtrip_and_default() {
        let mut mem = MemoryImage::new();
        mem.write_f64(0x1000, Float64Bits(0x4045000000000000));
        assert_eq!(mem.read_f64(0x1000), Float64Bits(0x4045000000000000));
        assert_eq!(mem.read_f64(0x9000), Float64Bits(0));
    }

    #[test]
    fn unaligned_read_matches_byte_layout() {
        let mut mem = MemoryImage::new();
        let pattern = 0x4045000000000000u64;
        mem.write_f64(0x1000, Float64Bits(pattern));
        // Independent layout: serialize by shifting, then view bytes 1..9.
        let mut bytes = [0u8; 16];
        for (i, b) in bytes.iter_mut().take(8).enumerate() {
            *b = (pattern >> (8 * i)) as u8;
        }
        let mut expected = 0u64;
        for i in (0..8).rev() {
            expected = (expected << 8) | bytes[1 + i] as u64;
        }
        assert_eq!(mem.read_f64(0x1001), Float64Bits(expected));
        assert_eq!(expected, 0x0040450000000000);
    }

    #[test]
    fn page_straddling_access() {
        let mut mem = MemoryImage::new();
        let addr = 0x2000 - 3;
        mem.write_f64(addr, Float64Bits(0x0102030405060708));
        assert_eq!(mem.read_f64(addr), Float64Bits(0x0102030405060708));
        assert_eq!(mem.read_u8(0x2000 - 3), 0x08);
        assert_eq!(mem.read_u8(0x2000 + 4), 0x01);
        let top = u64::MAX - 3;
        mem.write_f64(top, Float64Bits(0xaabbccddeeff0011));
        assert_eq!(mem.read_f64(top), Float64Bits(0xaabbccddeeff0011));
        assert_eq!(mem.read_u8(3), 0xaa);
    }

    #[test]
    fn injection_cases() {
        let mut mem = MemoryImage::new();
        mem.write_f64(0, Float64Bits(0x4045000000000000));
        mem.write_f64(8, Float64Bits(0x3ff0000000000000));
        mem.write_f64(16, Float64Bits(0x7ff8000000000000));
        for a in [0, 8, 16] {
            mem.inject_nan(a);
            assert!(mem.read_f64(a).is_nan());
        }
        assert_eq!(mem.read_f64(0), Float64Bits(0x7ff5000000000000));
        assert_eq!(mem.read_f64(8), Float64Bits(0x7ff0000000000001));
        assert_eq!(mem.read_f64(16), Float64Bits(0x7ff8000000000000));
        // Zero-filled memory becomes the smallest positive quiet-less NaN.
        mem.inject_nan(0x500);
        assert_eq!(mem.read_f64(0x500), Float64Bits(0x7ff0000000000001));
    }

    #[test]
    fn flips_need_region() {
        let mut mem = MemoryImage::new();
        let model = BitFlipModel::new(0.5, 1, 0).unwrap();
        assert_eq!(
            mem.apply_epoch_flips(&model, &mut model.rng()),
            Err(MemError::NoApproxRegion)
        );
    }

    #[test]
    fn degenerate_probabilities() {
        let mut mem = MemoryImage::new();
        mem.set_approx_region(Some(Region::new(0x100, 1).unwrap()));
        mem.write_u8(0x101, 0x5a);
        let before = mem.clone();
        let zero = BitFlipModel::new(0.0, 1, 7).unwrap();
        assert_eq!(mem.apply_epoch_flips(&zero, &mut zero.rng()), Ok(0));
        assert_eq!(mem, before);
        let one = BitFlipModel::new(1.0, 1, 7).unwrap();
        assert_eq!(mem.apply_epoch_flips(&one, &mut one.rng()), Ok(8));
        assert_eq!(mem.read_u8(0x100), 0xff);
        assert_eq!(mem.read_u8(0x101), 0x5a);
    }

    #[test]
    fn seeded_flips_are_reproducible() {
        let run = || {
            let mut mem = MemoryImage::new();
            mem.set_approx_region(Some(Region::new(0x40, 64).unwrap()));
            let model = BitFlipModel::new(0.01, 1, 1234).unwrap();
            let mut rng = model.rng();
            let mut counts = Vec::new();
            for _ in 0..20 {
                counts.push(mem.apply_epoch_flips(&model, &mut rng).unwrap());
            }
            (mem, counts)
        };
        let (a, ca) = run();
        let (b, cb) = run();
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        assert!(ca.iter().sum::<u64>() > 0);
        assert!(a
            .diff(&MemoryImage::new())
            .iter()
            .all(|&addr| (0x40..0x80).contains(&addr)));
    }

    #[test]
    fn model_validation() {
        assert_eq!(
            BitFlipModel::new(1.5, 1, 0),
            Err(MemError::BadProbability(1.5))
        );
        assert_eq!(BitFlipModel::new(0.5, 0, 0), Err(MemError::BadEpoch));
        assert_eq!(Region::new(0, 0), Err(MemError::EmptyRegion));
    }
}
