//! Otsu thresholding over the exact empirical distribution: every distinct
//! value is a candidate threshold.

#[derive(Debug, Clone, PartialEq)]
pub struct OtsuResult {
    /// Largest value assigned to the low class; `binary[i]` is set iff
    /// `values[i] > threshold`.
    pub threshold: f64,
    pub binary: Vec<bool>,
    /// Set when the input had fewer than two distinct values. Everything is
    /// then foreground and `threshold` is the minimum.
    pub degenerate: bool,
}

/// Splits `values` into two classes with the threshold that maximises the
/// between-class variance `w0 * w1 * (mu0 - mu1)^2`. Ties keep the lowest
/// threshold. Non-finite inputs are treated as degenerate.
pub fn otsu_binarize(values: &[f64]) -> OtsuResult {
    let degenerate = |threshold: f64| OtsuResult {
        threshold,
        binary: vec![true; values.len()],
        degenerate: true,
    };
    if values.iter().any(|v| !v.is_finite()) {
        return degenerate(0.0);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let Some(&min) = sorted.first() else {
        return degenerate(0.0);
    };
    if sorted.last() == Some(&min) {
        return degenerate(min);
    }

    // distinct values with their counts and sums
    let mut levels: Vec<(f64, f64, f64)> = Vec::new();
    for &v in &sorted {
        match levels.last_mut() {
            Some((value, count, sum)) if *value == v => {
                *count += 1.0;
                *sum += v;
            }
            _ => levels.push((v, 1.0, v)),
        }
    }
    let total = sorted.len() as f64;
    let sum_total: f64 = levels.iter().map(|l| l.2).sum();
    let mut w0 = 0.0;
    let mut s0 = 0.0;
    let mut best_var = f64::NEG_INFINITY;
    let mut threshold = min;
    for &(value, count, sum) in &levels[..levels.len() - 1] {
        w0 += count;
        s0 += sum;
        let w1 = total - w0;
        let mu0 = s0 / w0;
        let mu1 = (sum_total - s0) / w1;
        let var = w0 * w1 * (mu0 - mu1).powi(2);
        if var > best_var {
            best_var = var;
            threshold = value;
        }
    }
    OtsuResult {
        threshold,
        binary: values.iter().map(|&v| v > threshold).collect(),
        degenerate: false,
    }
}
