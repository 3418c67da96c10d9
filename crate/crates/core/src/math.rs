//! Branch-free exponential that the compiler can vectorize.

const LOG2E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
/// `1.5·2^52`: adding it rounds to an integer held in the low mantissa bits.
const SHIFTER: f64 = 6_755_399_441_055_744.0;

/// `e^x` within a few ulp on `[-708, 709]`; inputs outside are clamped.
#[inline(always)]
pub(crate) fn exp(x: f64) -> f64 {
    let x = x.max(-708.0).min(709.0);
    let t = x * LOG2E + SHIFTER;
    let k = t - SHIFTER;
    let r = x - k * LN2_HI - k * LN2_LO;
    // Taylor series of e^r for |r| ≤ ln2/2
    let mut p = 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    let scale = f64::from_bits(t.to_bits().wrapping_sub(SHIFTER.to_bits()).wrapping_add(1023) << 52);
    p * scale
}

/// [`exp`] applied in place to a block of lanes, bit-identical to the
/// scalar version.
#[inline(always)]
pub(crate) fn exp_block<const N: usize>(x: &mut [f64; N]) {
    #[cfg(target_arch = "x86_64")]
    {
        let mut l = 0;
        while l + 2 <= N {
            // SAFETY: SSE2 is part of the x86_64 baseline and `l + 2 <= N`.
            unsafe {
                use std::arch::x86_64::_mm_storeu_pd;
                let v = sse2::exp(std::arch::x86_64::_mm_loadu_pd(x.as_ptr().add(l)));
                _mm_storeu_pd(x.as_mut_ptr().add(l), v);
            }
            l += 2;
        }
        if l < N {
            x[l] = exp(x[l]);
        }
    }
    #[cfg(not(target_arch = "x86_64"))]
    for v in x.iter_mut() {
        *v = exp(*v);
    }
}

#[cfg(target_arch = "x86_64")]
mod sse2 {
    use std::arch::x86_64::*;

    use super::{COEFFS, LN2_HI, LN2_LO, LOG2E, SHIFTER};

    #[inline(always)]
    pub(super) unsafe fn exp(x: __m128d) -> __m128d {
        let v = _mm_min_pd(_mm_max_pd(x, _mm_set1_pd(-708.0)), _mm_set1_pd(709.0));
        let shifter = _mm_set1_pd(SHIFTER);
        let t = _mm_add_pd(_mm_mul_pd(v, _mm_set1_pd(LOG2E)), shifter);
        let k = _mm_sub_pd(t, shifter);
        let r = _mm_sub_pd(
            _mm_sub_pd(v, _mm_mul_pd(k, _mm_set1_pd(LN2_HI))),
            _mm_mul_pd(k, _mm_set1_pd(LN2_LO)),
        );
        let mut p = _mm_set1_pd(1.0 / 479_001_600.0);
        for c in COEFFS {
            p = _mm_add_pd(_mm_mul_pd(p, r), _mm_set1_pd(c));
        }
        let bits = _mm_sub_epi64(_mm_castpd_si128(t), _mm_set1_epi64x(SHIFTER.to_bits() as i64));
        let bits = _mm_slli_epi64(_mm_add_epi64(bits, _mm_set1_epi64x(1023)), 52);
        _mm_mul_pd(p, _mm_castsi128_pd(bits))
    }
}

const COEFFS: [f64; 12] = [
    1.0 / 39_916_800.0,
    1.0 / 3_628_800.0,
    1.0 / 362_880.0,
    1.0 / 40_320.0,
    1.0 / 5_040.0,
    1.0 / 720.0,
    1.0 / 120.0,
    1.0 / 24.0,
    1.0 / 6.0,
    0.5,
    1.0,
    1.0,
];
