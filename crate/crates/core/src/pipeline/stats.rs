//! Paired two-sided t-test on per-fold metrics.

use crate::error::{Error, Result};

/// Two-sided critical values of Student's t for df = 1..=29.
const T_CRIT_10: [f64; 29] = [
    6.3138, 2.9200, 2.3534, 2.1318, 2.0150, 1.9432, 1.8946, 1.8595, 1.8331, 1.8125, 1.7959, 1.7823,
    1.7709, 1.7613, 1.7531, 1.7459, 1.7396, 1.7341, 1.7291, 1.7247, 1.7207, 1.7171, 1.7139, 1.7109,
    1.7081, 1.7056, 1.7033, 1.7011, 1.6991,
];
const T_CRIT_05: [f64; 29] = [
    12.7062, 4.3027, 3.1824, 2.7764, 2.5706, 2.4469, 2.3646, 2.3060, 2.2622, 2.2281, 2.2010, 2.1788,
    2.1604, 2.1448, 2.1314, 2.1199, 2.1098, 2.1009, 2.0930, 2.0860, 2.0796, 2.0739, 2.0687, 2.0639,
    2.0595, 2.0555, 2.0518, 2.0484, 2.0452,
];
const T_CRIT_01: [f64; 29] = [
    63.6567, 9.9248, 5.8409, 4.6041, 4.0321, 3.7074, 3.4995, 3.3554, 3.2498, 3.1693, 3.1058, 3.0545,
    3.0123, 2.9768, 2.9467, 2.9208, 2.8982, 2.8784, 2.8609, 2.8453, 2.8314, 2.8188, 2.8073, 2.7969,
    2.7874, 2.7787, 2.7707, 2.7633, 2.7564,
];

/// Supported significance levels.
pub const ALPHAS: [f64; 3] = [0.10, 0.05, 0.01];

pub fn t_critical(alpha: f64, df: usize) -> Result<f64> {
    let table = match alpha {
        a if a == 0.10 => &T_CRIT_10,
        a if a == 0.05 => &T_CRIT_05,
        a if a == 0.01 => &T_CRIT_01,
        _ => return Err(Error::Validation(format!("alpha {alpha} not tabulated; use one of {ALPHAS:?}"))),
    };
    df.checked_sub(1)
        .and_then(|i| table.get(i))
        .copied()
        .ok_or_else(|| Error::Validation(format!("{df} degrees of freedom outside the 1..=29 table")))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    pub mean_diff: f64,
    pub sd_diff: f64,
    pub alpha: f64,
    pub critical: f64,
    pub reject: bool,
}

/// `t = mean(d) / (sd(d) / sqrt(k))` with `d = a - b` and the `k - 1`
/// sample standard deviation; rejects when `|t|` exceeds the critical value.
pub fn paired_t_test(a: &[f64], b: &[f64], alpha: f64) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Validation(format!(
            "paired t-test needs two equal samples of at least 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let k = a.len();
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / k as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    let sd = var.sqrt();
    if !(sd > 0.0) {
        return Err(Error::DegenerateTest(format!("all {k} paired differences equal {mean}")));
    }
    let t = mean / (sd / (k as f64).sqrt());
    let critical = t_critical(alpha, k - 1)?;
    Ok(TTest {
        t,
        df: k - 1,
        mean_diff: mean,
        sd_diff: sd,
        alpha,
        critical,
        reject: t.abs() > critical,
    })
}

/// Mean and `n - 1` sample standard deviation (0 for a single value).
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
