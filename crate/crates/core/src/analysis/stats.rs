//! Descriptive statistics, effect sizes and t-tests.
//!
//! Two-sided p-values come from the Student t CDF expressed through the
//! regularized incomplete beta function, evaluated by Lentz's continued
//! fraction.

use serde::{Deserialize, Serialize};

use super::AnalysisError;

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample (n−1) variance. Spread at the level of floating-point rounding
/// (relative 1e-12 of the largest magnitude) counts as exactly zero, so
/// constant inputs are recognized as constant.
pub fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0);
    let scale = v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    if var.sqrt() <= 1e-12 * scale {
        0.0
    } else {
        var
    }
}

/// Least-squares slope of `series` against its 0-based index.
pub fn ols_slope(series: &[f64]) -> Result<f64, AnalysisError> {
    let n = series.len();
    if n < 2 {
        return Err(AnalysisError::TooFew { what: "slope", needed: 2, got: n });
    }
    let x_bar = (n as f64 - 1.0) / 2.0;
    let y_bar = mean(series);
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in series.iter().enumerate() {
        let dx = i as f64 - x_bar;
        sxy += dx * (y - y_bar);
        sxx += dx * dx;
    }
    Ok(sxy / sxx)
}

/// Least-squares slope of `y` against explicit, not necessarily contiguous, `x`.
pub fn ols_slope_xy(x: &[f64], y: &[f64]) -> Result<f64, AnalysisError> {
    if x.len() != y.len() {
        return Err(AnalysisError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(AnalysisError::TooFew { what: "slope", needed: 2, got: x.len() });
    }
    let (x_bar, y_bar) = (mean(x), mean(y));
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (xi, yi) in x.iter().zip(y) {
        sxy += (xi - x_bar) * (yi - y_bar);
        sxx += (xi - x_bar) * (xi - x_bar);
    }
    if sxx == 0.0 {
        return Err(AnalysisError::ZeroVariance("slope abscissa"));
    }
    Ok(sxy / sxx)
}

/// (mean_a − mean_b) / pooled SD.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64, AnalysisError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(AnalysisError::TooFew { what: "Cohen's d group", needed: 2, got: a.len().min(b.len()) });
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let pooled = (((na - 1.0) * variance(a) + (nb - 1.0) * variance(b)) / (na + nb - 2.0)).sqrt();
    if pooled == 0.0 || !pooled.is_finite() {
        return Err(AnalysisError::ZeroVariance("Cohen's d"));
    }
    Ok((mean(a) - mean(b)) / pooled)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, AnalysisError> {
    if x.len() != y.len() {
        return Err(AnalysisError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(AnalysisError::TooFew { what: "correlation", needed: 2, got: x.len() });
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(AnalysisError::ZeroVariance("Pearson correlation"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    Welch,
    Paired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectReport {
    /// Pooled-SD d for Welch; mean/SD of the differences (d_z) for paired.
    pub cohens_d: f64,
    pub t_statistic: f64,
    pub degrees_of_freedom: f64,
    pub p_value: f64,
    pub test_kind: TestKind,
}

/// Welch's unequal-variance t-test with Welch–Satterthwaite df.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<EffectReport, AnalysisError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(AnalysisError::TooFew { what: "Welch group", needed: 2, got: a.len().min(b.len()) });
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (variance(a), variance(b));
    if va == 0.0 && vb == 0.0 {
        return Err(AnalysisError::ZeroVariance("Welch t-test"));
    }
    let (sa, sb) = (va / na, vb / nb);
    let se = (sa + sb).sqrt();
    let t = (mean(a) - mean(b)) / se;
    let df = (sa + sb).powi(2) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    Ok(EffectReport {
        cohens_d: cohens_d(a, b)?,
        t_statistic: t,
        degrees_of_freedom: df,
        p_value: t_two_sided_p(t, df),
        test_kind: TestKind::Welch,
    })
}

/// One-sample t on paired differences.
pub fn paired_t(diffs: &[f64]) -> Result<EffectReport, AnalysisError> {
    if diffs.len() < 2 {
        return Err(AnalysisError::TooFew { what: "paired differences", needed: 2, got: diffs.len() });
    }
    let n = diffs.len() as f64;
    let sd = variance(diffs).sqrt();
    if sd == 0.0 {
        return Err(AnalysisError::ZeroVariance("paired t-test"));
    }
    let m = mean(diffs);
    let t = m / (sd / n.sqrt());
    let df = n - 1.0;
    Ok(EffectReport {
        cohens_d: m / sd,
        t_statistic: t,
        degrees_of_freedom: df,
        p_value: t_two_sided_p(t, df),
        test_kind: TestKind::Paired,
    })
}

/// P(|T| ≥ |t|) for Student's t with `df` degrees of freedom.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_nan() || df.is_nan() || df <= 0.0 {
        return f64::NAN;
    }
    if t.is_infinite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

/// ln Γ(x) for x > 0 (Lanczos, g = 7, 9 terms).
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
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// I_x(a, b).
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
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

fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 500;
    const EPS: f64 = 1e-16;
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
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
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}
