//! Scalar special functions for the standard normal distribution.
//!
//! Everything the softplus bound needs reduces to products of the form
//! `exp(a) * Phi(b)`, where `exp(a)` can be astronomically large and
//! `Phi(b)` astronomically small. The functions here evaluate such
//! products in log space, using the Mills ratio `R(t) = Phi(-t) / phi(t)`
//! for the lower tail.
//!
//! The central region uses `libm::erfc`. Below `-TAIL_SWITCH` the
//! complementary error function is replaced by the asymptotic expansion
//! of the Mills ratio, which is accurate to well below one ulp there.

use std::f64::consts::{FRAC_1_SQRT_2, SQRT_2};

use thiserror::Error;

/// `1 / sqrt(2 pi)`.
pub const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
/// `ln(sqrt(2 pi))`.
pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Arguments of magnitude at or beyond this value use the asymptotic
/// expansion of the Mills ratio.
const TAIL_SWITCH: f64 = 26.0;
const ASYMPTOTIC_TERMS: usize = 13;

/// Largest `v` with `exp(v)` finite.
const LN_MAX: f64 = 709.782_712_893_384;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum SpecFunError {
    #[error("exp({a}) * Phi({b}) overflows (log value {log_value})")]
    Overflow { a: f64, b: f64, log_value: f64 },
}

/// Standard normal density.
#[inline]
pub fn std_normal_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal CDF, `Phi(x) = erfc(-x / sqrt 2) / 2`.
#[inline]
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// `exp(t^2 / 2)` with the square split into a head and an exact tail.
#[inline]
fn exp_half_square(t: f64) -> f64 {
    let hi = t * t;
    let lo = t.mul_add(t, -hi);
    (0.5 * hi).exp() * (0.5 * lo).exp()
}

/// Mills ratio by its asymptotic series, `t >= TAIL_SWITCH`.
#[inline]
fn mills_asymptotic(t: f64) -> f64 {
    let inv_t2 = 1.0 / (t * t);
    let mut term = 1.0;
    let mut sum = 1.0;
    for j in 1..ASYMPTOTIC_TERMS {
        term *= -((2 * j - 1) as f64) * inv_t2;
        sum += term;
    }
    sum / t
}

/// Mills ratio `R(t) = Phi(-t) / phi(t)` for `t >= 0`.
///
/// Negative arguments are accepted but overflow once `t^2 / 2` exceeds
/// the exponent range; use [`ln_mills_ratio`] there.
pub fn mills_ratio(t: f64) -> f64 {
    if t >= TAIL_SWITCH {
        mills_asymptotic(t)
    } else {
        0.5 * libm::erfc(t / SQRT_2) * exp_half_square(t) / FRAC_1_SQRT_2PI
    }
}

/// `ln R(t)` for any finite `t`.
pub fn ln_mills_ratio(t: f64) -> f64 {
    if t >= 0.0 {
        mills_ratio(t).ln()
    } else {
        // R(t) = Phi(-t) / phi(t) with Phi(-t) >= 1/2
        log_std_normal_cdf(-t) + 0.5 * t * t + LN_SQRT_2PI
    }
}

/// `ln Phi(x)` without underflow in the lower tail.
pub fn log_std_normal_cdf(x: f64) -> f64 {
    if x >= 0.0 {
        (-0.5 * libm::erfc(x * FRAC_1_SQRT_2)).ln_1p()
    } else if x > -TAIL_SWITCH {
        std_normal_cdf(x).ln()
    } else {
        -0.5 * x * x - LN_SQRT_2PI + mills_asymptotic(-x).ln()
    }
}

/// `exp(a) * Phi(b)`, evaluated as `exp(a + ln Phi(b))`.
///
/// Underflow returns `0.0`; a product beyond the `f64` range is an error.
pub fn exp_times_cdf(a: f64, b: f64) -> Result<f64, SpecFunError> {
    let log_value = a + log_std_normal_cdf(b);
    if log_value > LN_MAX {
        return Err(SpecFunError::Overflow { a, b, log_value });
    }
    Ok(log_value.exp())
}

/// `log(1 + exp(x))`, stable for all `x`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic sigmoid `1 / (1 + exp(-x))`.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of the standard normal CDF by Newton refinement of
/// Acklam's rational approximation. Used only for interval half-widths.
pub fn std_normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile requires 0 < p < 1, got {p}");
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    let lower = 0.024_25;
    let mut x = if p < lower {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - lower {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    for _ in 0..2 {
        let err = std_normal_cdf(x) - p;
        let pdf = std_normal_pdf(x);
        if pdf > 0.0 {
            x -= err / pdf;
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn pdf_values() {
        assert!(rel(std_normal_pdf(0.0), 0.398_942_280_401_432_7) < 1e-15);
        assert!(rel(std_normal_pdf(1.0), 0.241_970_724_519_143_37) < 1e-15);
        assert_eq!(std_normal_pdf(1.7), std_normal_pdf(-1.7));
    }

    #[test]
    fn cdf_values() {
        assert_eq!(std_normal_cdf(0.0), 0.5);
        assert_eq!(std_normal_cdf(38.0), 1.0);
        assert!(rel(std_normal_cdf(1.0), 0.841_344_746_068_542_9) < 1e-15);
    }

    #[test]
    fn log_cdf_against_mpmath() {
        // 40-digit mpmath values of ln(ncdf(x)).
        let cases = [
            (0.0, -std::f64::consts::LN_2),
            (-40.0, -804.608_442_013_753_8),
            (5.0, -2.866_516_129_637_636e-7),
            (-10.0, -53.231_285_150_512_47),
            (-26.5, -355.322_502_226_356),
            (-30.0, -454.321_243_956_343_2),
            (-100.0, -5_005.524_208_694_205),
            (-1e4, -50_000_010.129_278_92),
            (-3.0, -6.607_726_221_510_35),
            (2.0, -0.023_012_909_328_963_488),
        ];
        for (x, want) in cases {
            let got = log_std_normal_cdf(x);
            assert!(rel(got, want) < 1e-13, "x={x}: {got} vs {want}");
        }
    }

    #[test]
    fn mills_against_mpmath() {
        let cases = [
            (0.0, 1.253_314_137_315_500_3),
            (1.0, 0.655_679_542_418_798_5),
            (5.0, 0.192_808_104_715_315_76),
            (20.0, 0.049_875_925_981_836_78),
            (26.0, 0.038_404_893_342_102_13),
            (27.0, 0.036_986_439_428_385_82),
            (40.0, 0.024_984_404_205_720_57),
        ];
        for (t, want) in cases {
            assert!(rel(mills_ratio(t), want) < 1e-13, "t={t}");
        }
        // both branches meet at the switch
        let below = 0.5 * libm::erfc(TAIL_SWITCH / SQRT_2) * exp_half_square(TAIL_SWITCH)
            / FRAC_1_SQRT_2PI;
        assert!(rel(mills_asymptotic(TAIL_SWITCH), below) < 1e-13);
    }

    #[test]
    fn exp_times_cdf_cases() {
        assert_eq!(exp_times_cdf(0.0, 0.0).unwrap(), 0.5);
        let v = exp_times_cdf(700.0, -40.0).unwrap();
        assert!(rel(v, 3.707_924_417_894_682e-46) < 1e-12, "{v}");
        assert!(rel(exp_times_cdf(700.0, 38.0).unwrap(), 700f64.exp()) < 1e-14);
        assert_eq!(exp_times_cdf(-800.0, 0.0).unwrap(), 0.0);
        assert!(matches!(
            exp_times_cdf(720.0, 1.0),
            Err(SpecFunError::Overflow { .. })
        ));
    }

    #[test]
    fn quantile_matches_975() {
        assert!((std_normal_quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-12);
        assert!((std_normal_quantile(0.5)).abs() < 1e-15);
    }

    #[test]
    fn softplus_and_sigmoid() {
        assert!(rel(softplus(0.0), std::f64::consts::LN_2) < 1e-16);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(3.0) + sigmoid(-3.0) - 1.0).abs() < 1e-15);
    }

    /// Trapezoid on a fine grid of `exp(t z) phi(z / tau) / tau` over [a, b].
    fn integral_oracle(a: f64, b: f64, t: f64, tau: f64) -> f64 {
        // composite Simpson; integrand is smooth and bounded on [a, b]
        let n = 20_000;
        let h = (b - a) / n as f64;
        let f = |z: f64| (t * z).exp() * std_normal_pdf(z / tau) / tau;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let z = a + h * i as f64;
            s += if i % 2 == 1 { 4.0 * f(z) } else { 2.0 * f(z) };
        }
        s * h / 3.0
    }

    #[test]
    fn truncated_exponential_moment_identity() {
        let cases = [
            (-1.0, 2.0, 0.5, 1.0),
            (0.0, 3.0, -2.0, 0.7),
            (-2.5, 0.3, 1.5, 2.0),
            (0.5, 4.0, 3.0, 0.4),
        ];
        for (a, b, t, tau) in cases {
            let want = integral_oracle(a, b, t, tau);
            let scale = 0.5 * tau * tau * t * t;
            let got = scale.exp()
                * (std_normal_cdf(b / tau - t * tau) - std_normal_cdf(a / tau - t * tau));
            assert!(rel(got, want) < 1e-8, "{a} {b} {t} {tau}: {got} vs {want}");
        }
    }

    proptest! {
        #[test]
        fn cdf_reflection(x in -40.0f64..40.0) {
            prop_assert!((std_normal_cdf(x) + std_normal_cdf(-x) - 1.0).abs() <= 1e-15);
        }

        #[test]
        fn log_cdf_increasing_below_zero(x in -1e4f64..0.0, dx in 1e-3f64..5.0) {
            let lo = log_std_normal_cdf(x - dx);
            let hi = log_std_normal_cdf(x);
            prop_assert!(lo < hi);
            prop_assert!(hi <= -std::f64::consts::LN_2);
        }

        #[test]
        fn log_cdf_matches_direct_above_zero(x in 0.0f64..3.0) {
            let direct = std_normal_cdf(x).ln();
            let got = log_std_normal_cdf(x);
            if direct != 0.0 {
                prop_assert!(((got - direct) / direct).abs() < 1e-12);
            }
        }

        #[test]
        fn exp_times_cdf_matches_naive(a in -500.0f64..500.0, b in -25.0f64..10.0) {
            let naive = a.exp() * std_normal_cdf(b);
            prop_assume!(naive.is_normal());
            let got = exp_times_cdf(a, b).unwrap();
            prop_assert!(((got - naive) / naive).abs() < 1e-12, "{} vs {}", got, naive);
        }

        #[test]
        fn exp_times_cdf_random_identity(
            a in -2.0f64..2.0, width in 0.1f64..3.0, t in -2.0f64..2.0, tau in 0.2f64..2.0
        ) {
            let b = a + width;
            let want = integral_oracle(a, b, t, tau);
            let scale = 0.5 * tau * tau * t * t;
            let (lo, hi) = (a / tau - t * tau, b / tau - t * tau);
            // difference of upper tails when both CDF values are near one
            let got = if lo > 0.0 {
                exp_times_cdf(scale, -lo).unwrap() - exp_times_cdf(scale, -hi).unwrap()
            } else {
                exp_times_cdf(scale, hi).unwrap() - exp_times_cdf(scale, lo).unwrap()
            };
            prop_assert!(((got - want) / want).abs() < 1e-8);
        }
    }
}
