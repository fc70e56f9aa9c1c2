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

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let t = x + 7.5;
    let mut a = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=300 {
        let m = m as f64;
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
        if (del - 1.0).abs() < 1e-15 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(b, a, 1.0 - x) / b
    }
}

pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    let tail = 0.5 * inc_beta(0.5 * df, 0.5, df / (df + t * t));
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom.
pub fn two_sided_p(t: f64, df: f64) -> f64 {
    inc_beta(0.5 * df, 0.5, df / (df + t * t))
}

/// Upper quantile: the `t > 0` with `P(T > t) = tail`, by bisection.
pub fn t_quantile(tail: f64, df: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, 1.0);
    while 1.0 - student_t_cdf(hi, df) > tail {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if 1.0 - student_t_cdf(mid, df) > tail {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
}

/// Paired t-test over repeated random splits with the variance inflated by
/// `n_test / n_train` for the overlap between training sets.
pub fn corrected_resampled_ttest(diffs: &[f64], n_train: usize, n_test: usize) -> Result<TTest> {
    let k = diffs.len();
    if k < 2 {
        return Err(Error::Degenerate(format!("t-test needs at least 2 repeats, got {k}")));
    }
    if n_train == 0 {
        return Err(Error::Config("t-test needs a nonempty training split".into()));
    }
    let s = aggregate(diffs)?;
    let var = s.sd * s.sd;
    // Differences that agree up to rounding carry no spread to test against.
    let scale = diffs.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    if !(s.sd > 1e-12 * scale) {
        return Err(Error::Degenerate("identical across repeats".into()));
    }
    let t = s.mean / ((1.0 / k as f64 + n_test as f64 / n_train as f64) * var).sqrt();
    let df = k - 1;
    Ok(TTest {
        t,
        p: two_sided_p(t, df as f64),
        df,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// `n − 1` denominator; zero for a single value.
    pub sd: f64,
    pub n: usize,
    pub single_sample: bool,
}

pub fn aggregate(values: &[f64]) -> Result<Summary> {
    let n = values.len();
    if n == 0 {
        return Err(Error::Degenerate("nothing to aggregate".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(Summary {
        mean,
        sd,
        n,
        single_sample: n == 1,
    })
}

pub fn stars(p: f64) -> &'static str {
    if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use statrs::distribution::{ContinuousCDF, StudentsT};

    #[test]
    fn hand_computed_statistic() {
        let r = corrected_resampled_ttest(&[0.1, 0.2, 0.3], 60, 20).unwrap();
        // 0.2 / √((1/3 + 1/3) · 0.01)
        assert_abs_diff_eq!(r.t, 0.2 / (2.0f64 / 3.0 * 0.01).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(r.t, 2.4495, epsilon = 1e-4);
        assert_eq!(r.df, 2);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(corrected_resampled_ttest(&[0.0; 5], 36, 12), Err(Error::Degenerate(_))));
        assert!(matches!(corrected_resampled_ttest(&[0.4; 3], 36, 12), Err(Error::Degenerate(_))));
        assert!(matches!(corrected_resampled_ttest(&[1.0], 36, 12), Err(Error::Degenerate(_))));
        // 0.3 − 0.2 differs from 0.1 in the last bit.
        let rounded = [0.3 - 0.2, 0.1, 0.1];
        assert!(matches!(corrected_resampled_ttest(&rounded, 36, 12), Err(Error::Degenerate(_))));
    }

    #[test]
    fn tabulated_quantiles() {
        for (df, q05, q01) in [(5.0, 2.5706, 4.0321), (9.0, 2.2622, 3.2498), (29.0, 2.0452, 2.7564)] {
            assert_abs_diff_eq!(t_quantile(0.025, df), q05, epsilon = 1e-4);
            assert_abs_diff_eq!(t_quantile(0.005, df), q01, epsilon = 1e-4);
            assert_abs_diff_eq!(two_sided_p(q05, df), 0.05, epsilon = 1e-4);
            assert_abs_diff_eq!(two_sided_p(q01, df), 0.01, epsilon = 1e-4);
        }
    }

    #[test]
    fn matches_reference_distribution() {
        for df in [1.0, 2.0, 5.0, 9.0, 29.0, 200.0] {
            let dist = StudentsT::new(0.0, 1.0, df).unwrap();
            for t in [-6.0, -2.1, -0.3, 0.0, 0.7, 1.9, 4.5, 12.0] {
                assert_abs_diff_eq!(student_t_cdf(t, df), dist.cdf(t), epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn ln_gamma_values() {
        assert_abs_diff_eq!(ln_gamma(1.0), 0.0, epsilon = 1e-13);
        assert_abs_diff_eq!(ln_gamma(5.0), 24.0f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(ln_gamma(0.5), std::f64::consts::PI.sqrt().ln(), epsilon = 1e-12);
    }

    #[test]
    fn centered_noise_is_not_significant() {
        let d = [0.3, -0.3, 0.1, -0.1, 0.2, -0.2, 0.05, -0.05, 0.0, 0.0];
        let r = corrected_resampled_ttest(&d, 36, 12).unwrap();
        assert!(r.t.abs() < 1e-12);
        assert!(r.p > 0.999);
    }

    #[test]
    fn aggregates() {
        let s = aggregate(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!((s.mean, s.sd), (1.0, 0.0));
        let s = aggregate(&[0.0, 2.0]).unwrap();
        assert_eq!(s.mean, 1.0);
        assert_abs_diff_eq!(s.sd, 1.41421, epsilon = 1e-5);
        let s = aggregate(&[3.5]).unwrap();
        assert_eq!((s.mean, s.sd, s.single_sample), (3.5, 0.0, true));
        assert!(!aggregate(&[1.0, 2.0]).unwrap().single_sample);
    }

    #[test]
    fn star_thresholds() {
        assert_eq!(stars(0.03), "*");
        assert_eq!(stars(0.005), "**");
        assert_eq!(stars(0.05), "");
        assert_eq!(stars(0.01), "*");
    }

    proptest! {
        #[test]
        fn negation_flips_t_and_keeps_p(d in prop::collection::vec(-5.0f64..5.0, 2..20), n_train in 1usize..100, n_test in 1usize..50) {
            if let Ok(r) = corrected_resampled_ttest(&d, n_train, n_test) {
                let neg: Vec<f64> = d.iter().map(|v| -v).collect();
                let s = corrected_resampled_ttest(&neg, n_train, n_test).unwrap();
                prop_assert!((r.t + s.t).abs() <= 1e-9 * r.t.abs().max(1.0));
                prop_assert!((r.p - s.p).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&r.p));
            }
        }
    }
}
