//! Student's t distribution and the paired t-test.
//!
//! The CDF goes through the regularised incomplete beta function, evaluated
//! with the Lentz continued fraction; `ln_gamma` is the Lanczos
//! approximation (g = 7, 9 terms).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + 7.5;
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=300 {
        let m = f64::from(m);
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularised incomplete beta function `I_x(a, b)`.
pub fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

/// CDF of Student's t with `df` degrees of freedom.
pub fn t_cdf(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if t == f64::INFINITY {
        return 1.0;
    }
    if t == f64::NEG_INFINITY {
        return 0.0;
    }
    let tail = 0.5 * inc_beta(df / 2.0, 0.5, df / (df + t * t));
    if t > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Two-sided p-value of a t statistic.
pub fn two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    inc_beta(df / 2.0, 0.5, df / (df + t * t)).min(1.0)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator); 0 for fewer than 2 values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: f64,
}

/// Two-sided paired t-test on `a[i] - b[i]`.
///
/// All-zero differences give `t = 0, p = 1`; constant nonzero differences
/// give an infinite `t` and `p = 0`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("paired samples of length {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Invalid(format!("paired t-test needs at least 2 pairs, got {n}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let df = (n - 1) as f64;
    let m = mean(&d);
    let sd = sample_std(&d);
    if sd == 0.0 {
        return Ok(if m == 0.0 {
            TTest { t: 0.0, p: 1.0, df }
        } else {
            TTest {
                t: m.signum() * f64::INFINITY,
                p: 0.0,
                df,
            }
        });
    }
    let t = m / (sd / (n as f64).sqrt());
    Ok(TTest {
        t,
        p: two_sided_p(t, df),
        df,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gamma_matches_factorials() {
        let mut f = 1.0f64;
        for n in 1..15 {
            assert!((ln_gamma(n as f64) - f.ln()).abs() < 1e-10, "n={n}");
            f *= n as f64;
        }
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-12);
    }

    #[test]
    fn t_cdf_reference_values() {
        assert_eq!(t_cdf(0.0, 7.0), 0.5);
        // critical value of the two-sided 5% test at 10 df
        assert!((two_sided_p(2.228, 10.0) - 0.05).abs() < 5e-4);
        assert!(t_cdf(1e6, 5.0) > 1.0 - 1e-9);
        // df = 1 is the Cauchy distribution
        for t in [-3.0f64, -0.5, 0.7, 4.0] {
            let cauchy = 0.5 + t.atan() / std::f64::consts::PI;
            assert!((t_cdf(t, 1.0) - cauchy).abs() < 1e-12);
        }
        // df = 2 has a closed form
        for t in [-2.0f64, 0.3, 5.0] {
            let exact = 0.5 + t / (2.0 * (2.0 + t * t).sqrt());
            assert!((t_cdf(t, 2.0) - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn reference_paired_test() {
        let d: Vec<f64> = (1..=10).map(f64::from).collect();
        let r = paired_ttest(&d, &[0.0; 10]).unwrap();
        assert!((r.t - 5.744_562_646_538_029).abs() < 1e-9);
        assert!((r.p - 2.782e-4).abs() / 2.782e-4 < 1e-3, "{}", r.p);
    }

    #[test]
    fn p_value_matches_numerical_integration() {
        // density at 9 df with closed-form gamma values
        let g45 = 3.5 * 2.5 * 1.5 * 0.5 * std::f64::consts::PI.sqrt();
        let c = 24.0 / g45 / (9.0 * std::f64::consts::PI).sqrt();
        let pdf = |x: f64| c * (1.0 + x * x / 9.0).powf(-5.0);
        for t in [0.5, 1.7, 3.2, 5.744_562_646_538_029] {
            let n = 20_000;
            let h = t / n as f64;
            let mut acc = pdf(0.0) + pdf(t);
            for i in 1..n {
                acc += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(i as f64 * h);
            }
            let inner = 2.0 * acc * h / 3.0;
            assert!((two_sided_p(t, 9.0) - (1.0 - inner)).abs() < 1e-10, "t={t}");
        }
    }

    #[test]
    fn degenerate_samples() {
        let x = [0.3, 0.5, 0.9];
        assert_eq!(paired_ttest(&x, &x).unwrap(), TTest { t: 0.0, p: 1.0, df: 2.0 });
        let r = paired_ttest(&[1.0, 2.0], &[0.0, 1.0]).unwrap();
        assert_eq!((r.t, r.p), (f64::INFINITY, 0.0));
        assert!(paired_ttest(&[1.0], &[0.0]).is_err());
        assert!(paired_ttest(&[1.0, 2.0], &[0.0]).is_err());
    }

    proptest! {
        #[test]
        fn cdf_is_symmetric_and_monotone(t in -50.0f64..50.0, dt in 0.0f64..5.0, df in 1u32..60) {
            let df = f64::from(df);
            prop_assert!((t_cdf(-t, df) - (1.0 - t_cdf(t, df))).abs() < 1e-9);
            prop_assert!(t_cdf(t + dt, df) >= t_cdf(t, df) - 1e-15);
        }

        #[test]
        fn swapping_samples_negates_t(a in prop::collection::vec(0.0f64..1.0, 2..30), seed in 0u64..1000) {
            let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| (x * 7.3 + i as f64 * 0.37 + seed as f64 * 0.011).fract()).collect();
            let ab = paired_ttest(&a, &b).unwrap();
            let ba = paired_ttest(&b, &a).unwrap();
            prop_assert_eq!(ab.t, -ba.t);
            prop_assert_eq!(ab.p, ba.p);
            prop_assert!((0.0..=1.0).contains(&ab.p));
        }
    }
}
