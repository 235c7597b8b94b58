//! Small-sample statistics: Fisher's exact test, the paired t-test with
//! Student-t tail probabilities, significance markers and mean/SE summaries.
//!
//! Everything here is a pure function. The Student-t CDF is evaluated via the
//! regularized incomplete beta function (continued fraction, modified Lentz).

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("paired t-test needs at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("paired samples differ in length ({before} vs {after})")]
    LengthMismatch { before: usize, after: usize },
    #[error("mean and standard error need at least one value")]
    Empty,
    #[error("non-finite input value")]
    NonFinite,
}

/// Outcome of a hypothesis test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    #[serde(with = "lenient_f64")]
    pub statistic: f64,
    /// Degrees of freedom; absent for exact tests.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub df: Option<f64>,
    pub p_value: f64,
    /// Set when the differences had zero variance but a nonzero mean; the
    /// statistic is then infinite and `p_value` is 0 by convention.
    #[serde(default)]
    pub zero_variance: bool,
}

/// JSON has no infinities or NaN; those are written as strings.
pub mod lenient_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("not a number: {other}"))),
            },
        }
    }
}

const LN_FACT_TABLE: usize = 1024;

fn ln_fact_table() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = vec![0.0; LN_FACT_TABLE];
        for i in 2..LN_FACT_TABLE {
            t[i] = t[i - 1] + (i as f64).ln();
        }
        t
    })
}

/// ln(n!)
pub fn ln_factorial(n: u64) -> f64 {
    if (n as usize) < LN_FACT_TABLE {
        ln_fact_table()[n as usize]
    } else {
        ln_gamma(n as f64 + 1.0)
    }
}

/// Natural log of the gamma function for x > 0 (Lanczos, g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
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
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    let t = x + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 10_000;
    const EPS: f64 = 1e-16;
    const TINY: f64 = 1e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
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
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function I_x(a, b) for a, b > 0 and x in [0, 1].
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = a * x.ln() + b * (1.0 - x).ln() - ln_beta(a, b);
    if x < (a + 1.0) / (a + b + 2.0) {
        (ln_front.exp() * beta_continued_fraction(a, b, x) / a).clamp(0.0, 1.0)
    } else {
        (1.0 - ln_front.exp() * beta_continued_fraction(b, a, 1.0 - x) / b).clamp(0.0, 1.0)
    }
}

/// Two-sided tail probability P(|T| >= |t|) for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if t.is_infinite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(x, 0.5 * df, 0.5)
}

/// Student-t cumulative distribution function.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    let tail = 0.5 * student_t_two_sided(t, df);
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Two-sided Fisher exact test on the 2x2 table `[[a, b], [c, d]]`.
///
/// Sums the hypergeometric probabilities of every table with the observed
/// margins whose point probability does not exceed the observed one. A
/// relative slack of 1e-7 absorbs floating-point ties. Tables with an empty
/// row or column carry no information and get p = 1.
pub fn fisher_exact_two_sided(a: u64, b: u64, c: u64, d: u64) -> f64 {
    let row1 = a + b;
    let row2 = c + d;
    let col1 = a + c;
    let col2 = b + d;
    let n = row1 + row2;
    if row1 == 0 || row2 == 0 || col1 == 0 || col2 == 0 {
        return 1.0;
    }

    let konst = ln_factorial(row1) + ln_factorial(row2) + ln_factorial(col1) + ln_factorial(col2)
        - ln_factorial(n);
    let ln_point = |x: u64| {
        // cells: x, row1 - x, col1 - x, row2 - col1 + x
        konst
            - ln_factorial(x)
            - ln_factorial(row1 - x)
            - ln_factorial(col1 - x)
            - ln_factorial(row2 + x - col1)
    };

    let lo = col1.saturating_sub(row2);
    let hi = row1.min(col1);
    let observed = ln_point(a);
    let cutoff = observed + 1e-7_f64.ln_1p();

    let mut p = 0.0;
    for x in lo..=hi {
        let lp = ln_point(x);
        if lp <= cutoff {
            p += lp.exp();
        }
    }
    p.min(1.0)
}

/// Two-sided paired t-test on `after - before`.
pub fn paired_t_test(before: &[f64], after: &[f64]) -> Result<TestResult, StatsError> {
    if before.len() != after.len() {
        return Err(StatsError::LengthMismatch {
            before: before.len(),
            after: after.len(),
        });
    }
    let n = before.len();
    if n < 2 {
        return Err(StatsError::TooFewPairs(n));
    }
    let diffs: Vec<f64> = before.iter().zip(after).map(|(b, a)| a - b).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let nf = n as f64;
    let mean = diffs.iter().sum::<f64>() / nf;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let df = nf - 1.0;

    if var == 0.0 {
        if mean == 0.0 {
            return Ok(TestResult {
                statistic: 0.0,
                df: Some(df),
                p_value: 1.0,
                zero_variance: false,
            });
        }
        return Ok(TestResult {
            statistic: mean.signum() * f64::INFINITY,
            df: Some(df),
            p_value: 0.0,
            zero_variance: true,
        });
    }

    let t = mean / (var.sqrt() / nf.sqrt());
    Ok(TestResult {
        statistic: t,
        df: Some(df),
        p_value: student_t_two_sided(t, df),
        zero_variance: false,
    })
}

/// Significance marker: `**` p<.01, `*` p<.05, `†` p<.10.
pub fn significance_marker(p: f64) -> &'static str {
    if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else if p < 0.10 {
        "†"
    } else {
        ""
    }
}

/// Mean and standard error of the mean (sample sd / sqrt(n)); se is 0 for n = 1.
pub fn mean_and_se(values: &[f64]) -> Result<(f64, f64), StatsError> {
    let n = values.len();
    if n == 0 {
        return Err(StatsError::Empty);
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    if n == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    Ok((mean, (var / nf).sqrt()))
}
