//! Small-sample statistics for seed comparisons.

use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, StudentsT};

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation (`n − 1`); 0 for fewer than two values.
pub fn std(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

/// Pooled standard deviation of two samples.
pub fn pooled_std(a: &[f64], b: &[f64]) -> f64 {
    let df = (a.len() + b.len()).saturating_sub(2);
    if df == 0 {
        return 0.0;
    }
    let ss = |x: &[f64]| std(x).powi(2) * x.len().saturating_sub(1) as f64;
    ((ss(a) + ss(b)) / df as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct PairedT {
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    /// Two-sided p-value for `mean(a − b) ≠ 0`.
    pub p_two_sided: f64,
    /// One-sided p-value for `mean(a − b) > 0`.
    pub p_greater: f64,
}

/// Paired t-test of `a` against `b` (same length, matched by index).
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Option<PairedT> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len();
    let md = mean(&d);
    let se = std(&d) / (n as f64).sqrt();
    let (t, p_greater) = if se == 0.0 {
        let t = if md > 0.0 {
            f64::INFINITY
        } else if md < 0.0 {
            f64::NEG_INFINITY
        } else {
            0.0
        };
        (t, if md > 0.0 { 0.0 } else if md < 0.0 { 1.0 } else { 0.5 })
    } else {
        let t = md / se;
        let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("df >= 1");
        (t, dist.sf(t))
    };
    let p_two_sided = if md == 0.0 && se == 0.0 { 1.0 } else { (2.0 * p_greater.min(1.0 - p_greater)).min(1.0) };
    Some(PairedT {
        n,
        mean_diff: md,
        t,
        p_two_sided,
        p_greater,
    })
}

/// `P(X ≥ k)` for `X ~ Binomial(n, p)`.
pub fn binomial_upper_tail(k: u64, n: u64, p: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let b = Binomial::new(p, n).expect("valid binomial");
    b.sf(k - 1)
}
