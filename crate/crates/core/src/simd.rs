//! Portable vector contract.
//!
//! Every kernel is written against `[f32; V]` vectors and the handful of
//! operations below. The plain-Rust versions are the scalar emulation
//! backend; on x86_64 the zero compare has an intrinsic path that produces
//! the same mask.

use crate::error::{Error, Result};

/// Lane counts a kernel can be instantiated for.
pub const SUPPORTED_LANES: [usize; 3] = [4, 8, 16];

/// Number of 32-bit float lanes per vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VectorSpec {
    lanes: usize,
}

impl VectorSpec {
    pub fn new(lanes: usize) -> Result<Self> {
        if SUPPORTED_LANES.contains(&lanes) {
            Ok(Self { lanes })
        } else {
            Err(Error::VectorWidth(lanes))
        }
    }

    pub const fn lanes(self) -> usize {
        self.lanes
    }
}

impl Default for VectorSpec {
    fn default() -> Self {
        Self { lanes: 16 }
    }
}

/// One bit per lane; bit `i` corresponds to lane `i` (lowest address).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct LaneMask(u32);

impl LaneMask {
    pub const EMPTY: LaneMask = LaneMask(0);

    /// Keeps only the low `lanes` bits of `bits`.
    #[inline]
    pub fn from_bits(bits: u32, lanes: usize) -> Self {
        LaneMask(bits & Self::low_bits(lanes))
    }

    /// Mask with the first `lanes` lanes set.
    #[inline]
    pub fn first(lanes: usize) -> Self {
        LaneMask(Self::low_bits(lanes))
    }

    #[inline]
    fn low_bits(lanes: usize) -> u32 {
        if lanes >= 32 {
            u32::MAX
        } else {
            (1u32 << lanes) - 1
        }
    }

    #[inline]
    pub const fn bits(self) -> u32 {
        self.0
    }

    #[inline]
    pub const fn is_empty(self) -> bool {
        self.0 == 0
    }

    #[inline]
    pub const fn popcount(self) -> u32 {
        self.0.count_ones()
    }

    /// Index of the lowest set lane. The mask must not be empty.
    #[inline]
    pub fn trailing_zeros(self) -> u32 {
        debug_assert!(self.0 != 0, "trailing_zeros on an empty lane mask");
        self.0.trailing_zeros()
    }

    /// Drops the lowest set lane (located at `z = trailing_zeros()`) and
    /// everything below it: the mask is shifted right by `z + 1`.
    #[inline]
    pub fn shift_consume(self, z: u32) -> Self {
        LaneMask(self.0.checked_shr(z + 1).unwrap_or(0))
    }

    #[inline]
    pub fn and(self, other: LaneMask) -> Self {
        LaneMask(self.0 & other.0)
    }

    /// Iterates the set lanes in ascending order with a popcount-bounded
    /// loop that locates each lane by its trailing-zero count.
    #[inline]
    pub fn iter(self) -> SetLanes {
        SetLanes {
            mask: self,
            remaining: self.popcount(),
            position: 0,
        }
    }
}

/// Iterator over the set lanes of a [`LaneMask`].
#[derive(Debug, Clone)]
pub struct SetLanes {
    mask: LaneMask,
    remaining: u32,
    position: u32,
}

impl Iterator for SetLanes {
    type Item = usize;

    #[inline]
    fn next(&mut self) -> Option<usize> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let z = self.mask.trailing_zeros();
        let lane = self.position + z;
        self.mask = self.mask.shift_consume(z);
        self.position = lane + 1;
        Some(lane as usize)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining as usize, Some(self.remaining as usize))
    }
}

impl ExactSizeIterator for SetLanes {}

/// Bit `i` is set iff `v[i] != 0.0`. Both signed zeros are zero; NaN lanes
/// are non-zero.
#[inline]
pub fn cmp_neq_zero<const V: usize>(v: &[f32; V]) -> LaneMask {
    #[cfg(target_arch = "x86_64")]
    {
        x86::cmp_neq_zero(v)
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        cmp_neq_zero_scalar(v)
    }
}

/// Scalar reference for [`cmp_neq_zero`].
#[inline]
pub fn cmp_neq_zero_scalar<const V: usize>(v: &[f32; V]) -> LaneMask {
    let mut bits = 0u32;
    for (lane, &x) in v.iter().enumerate() {
        if x != 0.0 {
            bits |= 1 << lane;
        }
    }
    LaneMask(bits)
}

/// `acc[i] += scalar * w[i]` for every lane, fused when the target has FMA.
#[inline(always)]
pub fn broadcast_fma<const V: usize>(acc: &mut [f32; V], scalar: f32, w: &[f32; V]) {
    #[cfg(target_arch = "x86_64")]
    if x86::broadcast_fma(acc, scalar, w) {
        return;
    }
    broadcast_fma_scalar(acc, scalar, w);
}

/// Lane loop behind [`broadcast_fma`] for widths without a vector path.
#[inline(always)]
pub fn broadcast_fma_scalar<const V: usize>(acc: &mut [f32; V], scalar: f32, w: &[f32; V]) {
    for (a, &x) in acc.iter_mut().zip(w.iter()) {
        *a = fma(scalar, x, *a);
    }
}

#[inline(always)]
fn fma(a: f32, b: f32, c: f32) -> f32 {
    #[cfg(target_feature = "fma")]
    {
        a.mul_add(b, c)
    }
    #[cfg(not(target_feature = "fma"))]
    {
        c + a * b
    }
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use super::LaneMask;
    use std::arch::x86_64::*;

    /// One vector instruction per call where the build enables it;
    /// returns false when the caller must fall back to the lane loop.
    #[inline(always)]
    pub(super) fn broadcast_fma<const V: usize>(acc: &mut [f32; V], scalar: f32, w: &[f32; V]) -> bool {
        #[cfg(target_feature = "avx512f")]
        if V == 16 {
            // SAFETY: avx512f is enabled and both arrays hold 16 floats.
            unsafe {
                let a = _mm512_loadu_ps(acc.as_ptr());
                let r = _mm512_fmadd_ps(_mm512_set1_ps(scalar), _mm512_loadu_ps(w.as_ptr()), a);
                _mm512_storeu_ps(acc.as_mut_ptr(), r);
            }
            return true;
        }
        #[cfg(all(target_feature = "avx", target_feature = "fma"))]
        if V == 8 {
            // SAFETY: avx and fma are enabled and both arrays hold 8 floats.
            unsafe {
                let a = _mm256_loadu_ps(acc.as_ptr());
                let r = _mm256_fmadd_ps(_mm256_set1_ps(scalar), _mm256_loadu_ps(w.as_ptr()), a);
                _mm256_storeu_ps(acc.as_mut_ptr(), r);
            }
            return true;
        }
        #[cfg(target_feature = "fma")]
        if V == 4 {
            // SAFETY: fma is enabled and both arrays hold 4 floats.
            unsafe {
                let a = _mm_loadu_ps(acc.as_ptr());
                let r = _mm_fmadd_ps(_mm_set1_ps(scalar), _mm_loadu_ps(w.as_ptr()), a);
                _mm_storeu_ps(acc.as_mut_ptr(), r);
            }
            return true;
        }
        let _ = (acc, scalar, w);
        false
    }

    #[inline(always)]
    pub(super) fn cmp_neq_zero<const V: usize>(v: &[f32; V]) -> LaneMask {
        #[cfg(target_feature = "avx512f")]
        if V == 16 {
            // SAFETY: avx512f is enabled for this build and `v` holds 16 floats.
            let bits = unsafe {
                let x = _mm512_loadu_ps(v.as_ptr());
                _mm512_cmp_ps_mask::<_CMP_NEQ_UQ>(x, _mm512_setzero_ps())
            };
            return LaneMask(bits as u32);
        }
        if V % 4 != 0 {
            return super::cmp_neq_zero_scalar(v);
        }
        let mut bits = 0u32;
        let zero = unsafe { _mm_setzero_ps() };
        for chunk in 0..V / 4 {
            // SAFETY: sse2 is part of the x86_64 baseline; the load reads
            // four floats inside `v`.
            let nibble = unsafe {
                let x = _mm_loadu_ps(v.as_ptr().add(chunk * 4));
                _mm_movemask_ps(_mm_cmpneq_ps(x, zero))
            };
            bits |= (nibble as u32) << (chunk * 4);
        }
        LaneMask(bits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn vector_spec_rejects_odd_widths() {
        assert_eq!(VectorSpec::default().lanes(), 16);
        for lanes in SUPPORTED_LANES {
            assert_eq!(VectorSpec::new(lanes).unwrap().lanes(), lanes);
        }
        for lanes in [0, 1, 2, 3, 12, 32] {
            assert!(VectorSpec::new(lanes).is_err());
        }
    }

    #[test]
    fn cmp_examples() {
        assert_eq!(cmp_neq_zero(&[0.0f32; 8]).bits(), 0);
        let v = [0.0, 2.0, 0.0, 0.0, 5.0, 0.0, 7.0, 0.0];
        assert_eq!(cmp_neq_zero(&v).bits(), 0b0101_0010);
        let v = [-0.0, 1e-30, -3.5, 0.0];
        assert_eq!(cmp_neq_zero(&v).bits(), 0b0110);
        let v = [f32::NAN, f32::INFINITY, 0.0, f32::NEG_INFINITY];
        assert_eq!(cmp_neq_zero(&v).bits(), 0b1011);
    }

    #[test]
    fn cmp_backend_matches_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pool = [0.0f32, -0.0, 1.0, -2.5, 1e-40, f32::NAN, f32::MIN_POSITIVE];
        for _ in 0..2000 {
            let v16: [f32; 16] = std::array::from_fn(|_| pool[rng.gen_range(0..pool.len())]);
            assert_eq!(cmp_neq_zero(&v16), cmp_neq_zero_scalar(&v16));
            let v8: [f32; 8] = std::array::from_fn(|i| v16[i]);
            assert_eq!(cmp_neq_zero(&v8), cmp_neq_zero_scalar(&v8));
            let v4: [f32; 4] = std::array::from_fn(|i| v16[i + 8]);
            assert_eq!(cmp_neq_zero(&v4), cmp_neq_zero_scalar(&v4));
        }
    }

    #[test]
    fn popcount_and_trailing_zeros() {
        assert_eq!(LaneMask::from_bits(0b0101_0010, 8).popcount(), 3);
        assert_eq!(LaneMask::EMPTY.popcount(), 0);
        assert_eq!(LaneMask::from_bits(0xFFFF, 16).popcount(), 16);
        assert_eq!(LaneMask::from_bits(0b0101_0010, 8).trailing_zeros(), 1);
        assert_eq!(LaneMask::from_bits(0b1000, 4).trailing_zeros(), 3);
        assert_eq!(LaneMask::from_bits(0b0001, 4).trailing_zeros(), 0);
        assert_eq!(LaneMask::from_bits(0xFFFF_FFFF, 8).bits(), 0xFF);
    }

    #[test]
    fn shift_consume_examples() {
        let m = |b| LaneMask::from_bits(b, 8);
        assert_eq!(m(0b0101_0010).shift_consume(1), m(0b0001_0100));
        assert_eq!(m(0b1000).shift_consume(3), m(0));
        assert_eq!(m(0b0101).shift_consume(0), m(0b0010));
        assert_eq!(LaneMask(1 << 31).shift_consume(31), LaneMask::EMPTY);
    }

    #[test]
    fn broadcast_fma_examples() {
        let mut acc = [1.0f32; 4];
        broadcast_fma(&mut acc, 2.0, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(acc, [3.0, 5.0, 7.0, 9.0]);

        let mut acc = [0.0f32, 0.0];
        broadcast_fma(&mut acc, 0.5, &[4.0, -4.0]);
        assert_eq!(acc, [2.0, -2.0]);

        let before = [1.5f32, -0.0, 3.0, -7.25];
        let mut acc = before;
        broadcast_fma(&mut acc, 0.0, &[9.0, -1.0, 1e30, -3.0]);
        for (a, b) in acc.iter().zip(before.iter()) {
            assert!(a == b);
        }
    }

    #[test]
    fn set_lanes_visit_ascending_exhaustive_v8() {
        for bits in 0u32..256 {
            let mask = LaneMask::from_bits(bits, 8);
            let lanes: Vec<usize> = mask.iter().collect();
            let expected: Vec<usize> = (0..8).filter(|i| bits >> i & 1 == 1).collect();
            assert_eq!(lanes, expected, "mask {bits:#010b}");
        }
    }

    #[test]
    fn broadcast_fma_backend_matches_lane_loop() {
        fn check<const V: usize>(rng: &mut ChaCha8Rng) {
            let acc: [f32; V] = std::array::from_fn(|_| rng.gen_range(-4.0..4.0));
            let w: [f32; V] = std::array::from_fn(|_| rng.gen_range(-4.0..4.0));
            let s = rng.gen_range(-4.0f32..4.0);
            let (mut fast, mut slow) = (acc, acc);
            broadcast_fma(&mut fast, s, &w);
            broadcast_fma_scalar(&mut slow, s, &w);
            assert_eq!(fast, slow);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            check::<4>(&mut rng);
            check::<8>(&mut rng);
            check::<16>(&mut rng);
        }
    }

    #[test]
    fn set_lanes_visit_ascending_sampled_v16() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..20_000 {
            let bits: u32 = rng.gen_range(0..1 << 16);
            let lanes: Vec<usize> = LaneMask::from_bits(bits, 16).iter().collect();
            let expected: Vec<usize> = (0..16).filter(|i| bits >> i & 1 == 1).collect();
            assert_eq!(lanes, expected);
        }
    }
}
