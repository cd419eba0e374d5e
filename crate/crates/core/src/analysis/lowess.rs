//! LOWESS smoothing of an evenly indexed series: local linear fits with
//! tricube weights over the nearest ⌈frac·n⌉ points, followed by optional
//! bisquare robustness passes.

use super::AnalysisError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LowessParams {
    pub frac: f64,
    pub robust_iters: usize,
}

impl Default for LowessParams {
    fn default() -> Self {
        LowessParams { frac: 0.3, robust_iters: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lowess {
    pub fitted: Vec<f64>,
    /// Points whose window could not support a line; they fall back to the window mean.
    pub degenerate: Vec<usize>,
}

fn tricube(u: f64) -> f64 {
    if u >= 1.0 {
        0.0
    } else {
        let t = 1.0 - u * u * u;
        t * t * t
    }
}

fn bisquare(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        0.0
    } else {
        let t = 1.0 - u * u;
        t * t
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn fit_pass(y: &[f64], span: usize, robustness: &[f64], degenerate: &mut Vec<usize>) -> Vec<f64> {
    let n = y.len();
    let mut fitted = Vec::with_capacity(n);
    for i in 0..n {
        // window of `span` nearest indices (ties toward the left)
        let mut lo = i.saturating_sub(span - 1);
        let mut hi = lo + span - 1;
        if hi >= n {
            hi = n - 1;
            lo = n - span;
        }
        while lo < i && hi + 1 < n && (i - lo) > (hi + 1 - i) {
            lo += 1;
            hi += 1;
        }
        let h = (i - lo).max(hi - i) as f64;

        let (mut sw, mut swx, mut swy, mut swxx, mut swxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for j in lo..=hi {
            let d = (j as f64 - i as f64).abs();
            let w = if h > 0.0 { tricube(d / h) } else { 1.0 } * robustness[j];
            let x = j as f64;
            sw += w;
            swx += w * x;
            swy += w * y[j];
            swxx += w * x * x;
            swxy += w * x * y[j];
        }
        let value = if sw > 0.0 {
            let x_bar = swx / sw;
            let y_bar = swy / sw;
            let sxx = swxx / sw - x_bar * x_bar;
            if sxx > 1e-12 {
                let slope = (swxy / sw - x_bar * y_bar) / sxx;
                y_bar + slope * (i as f64 - x_bar)
            } else {
                degenerate.push(i);
                y_bar
            }
        } else {
            degenerate.push(i);
            y[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        };
        fitted.push(value);
    }
    fitted
}

pub fn lowess(series: &[f64], params: &LowessParams) -> Result<Lowess, AnalysisError> {
    let n = series.len();
    if n < 3 {
        return Err(AnalysisError::TooFew { what: "LOWESS points", needed: 3, got: n });
    }
    if params.frac.is_nan() || params.frac <= 0.0 || params.frac * (n as f64) < 2.0 {
        return Err(AnalysisError::BadParameter(format!("frac {} too small for {n} points", params.frac)));
    }
    let span = ((params.frac * n as f64).ceil() as usize).clamp(2, n);
    let mut robustness = vec![1.0; n];
    let mut degenerate = Vec::new();
    let mut fitted = fit_pass(series, span, &robustness, &mut degenerate);
    for _ in 0..params.robust_iters {
        let residuals: Vec<f64> = series.iter().zip(&fitted).map(|(y, f)| y - f).collect();
        let s = median(residuals.iter().map(|r| r.abs()).collect());
        if s <= 1e-12 * series.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300) {
            break;
        }
        for (w, r) in robustness.iter_mut().zip(&residuals) {
            *w = bisquare(r / (6.0 * s));
        }
        degenerate.clear();
        fitted = fit_pass(series, span, &robustness, &mut degenerate);
    }
    degenerate.sort_unstable();
    degenerate.dedup();
    Ok(Lowess { fitted, degenerate })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproduces_lines() {
        let y: Vec<f64> = (0..34).map(|t| 0.1 + 0.021 * t as f64).collect();
        let out = lowess(&y, &LowessParams::default()).unwrap();
        for (a, b) in out.fitted.iter().zip(&y) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(out.degenerate.is_empty());
        assert!(out.fitted.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn constant_stays_constant() {
        let out = lowess(&[0.37; 20], &LowessParams::default()).unwrap();
        assert!(out.fitted.iter().all(|v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn robust_pass_damps_outlier() {
        let mut y = vec![0.5; 21];
        for (i, v) in y.iter_mut().enumerate() {
            *v += 0.01 * ((i * 7) % 5) as f64;
        }
        y[10] = 1.0;
        let plain = lowess(&y, &LowessParams { frac: 0.3, robust_iters: 0 }).unwrap();
        let robust = lowess(&y, &LowessParams { frac: 0.3, robust_iters: 1 }).unwrap();
        let level = 0.52;
        assert!((robust.fitted[10] - level).abs() < (y[10] - level).abs());
        assert!((robust.fitted[10] - level).abs() < (plain.fitted[10] - level).abs());
    }

    #[test]
    fn output_length_and_preconditions() {
        let y: Vec<f64> = (0..10).map(|i| (i as f64).sin()).collect();
        assert_eq!(lowess(&y, &LowessParams::default()).unwrap().fitted.len(), 10);
        assert!(lowess(&[1.0, 2.0], &LowessParams::default()).is_err());
        assert!(lowess(&y, &LowessParams { frac: 0.1, robust_iters: 0 }).is_err());
    }

    #[test]
    fn two_point_window_falls_back() {
        // span 2: the far neighbour gets zero tricube weight
        let y = [1.0, 3.0, 2.0, 5.0];
        let out = lowess(&y, &LowessParams { frac: 0.5, robust_iters: 0 }).unwrap();
        assert_eq!(out.fitted, y.to_vec());
        assert_eq!(out.degenerate, vec![0, 1, 2, 3]);
    }
}
