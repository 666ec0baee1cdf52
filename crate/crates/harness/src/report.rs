//! Regret series, evaluation points and curve fits.

use serde::Serialize;

/// `round(2^{k/4})` for `k = 0, 1, ...`, deduplicated, up to `t_max`.
pub fn quarter_octave_points(t_max: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for k in 0.. {
        let t = 2f64.powf(k as f64 / 4.0).round() as usize;
        if t > t_max {
            break;
        }
        if out.last() != Some(&t) {
            out.push(t);
        }
    }
    if out.last() != Some(&t_max) {
        out.push(t_max);
    }
    out
}

/// Cumulative `learner - comparator`; entry `T - 1` is the regret after `T` steps.
pub fn cumulative_regret(learner: &[f64], comparator: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    learner
        .iter()
        .zip(comparator)
        .map(|(l, c)| {
            acc += l - c;
            acc
        })
        .collect()
}

/// Per-step mean over replicas, summed in replica order.
pub fn mean_series(per_replica: &[Vec<f64>]) -> Vec<f64> {
    let n = per_replica.len() as f64;
    let len = per_replica.first().map_or(0, Vec::len);
    (0..len)
        .map(|t| per_replica.iter().map(|r| r[t]).sum::<f64>() / n)
        .collect()
}

/// Standard error of the mean of `values`; zero for fewer than two values.
pub fn standard_error(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (nf - 1.0);
    (var / nf).sqrt()
}

/// `R(T) ~ a + b log(T)^2`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LogSquaredFit {
    pub a: f64,
    pub b: f64,
    pub rss: f64,
}

/// `R(T) ~ c sqrt(T)`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SqrtFit {
    pub c: f64,
    pub rss: f64,
}

impl LogSquaredFit {
    pub fn eval(&self, t: f64) -> f64 {
        let l = t.ln();
        self.a + self.b * l * l
    }
}

impl SqrtFit {
    pub fn eval(&self, t: f64) -> f64 {
        self.c * t.sqrt()
    }
}

/// Least squares on `(t, r)` pairs.
pub fn fit_log_squared(ts: &[f64], rs: &[f64]) -> LogSquaredFit {
    let n = ts.len() as f64;
    let xs: Vec<f64> = ts.iter().map(|t| t.ln().powi(2)).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = rs.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(rs).map(|(x, y)| (x - mx) * (y - my)).sum();
    let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let a = my - b * mx;
    let fit = LogSquaredFit { a, b, rss: 0.0 };
    let rss = ts.iter().zip(rs).map(|(t, r)| (r - fit.eval(*t)).powi(2)).sum();
    LogSquaredFit { rss, ..fit }
}

pub fn fit_sqrt(ts: &[f64], rs: &[f64]) -> SqrtFit {
    let num: f64 = ts.iter().zip(rs).map(|(t, r)| t.sqrt() * r).sum();
    let den: f64 = ts.iter().sum();
    let c = if den > 0.0 { num / den } else { 0.0 };
    let rss = ts.iter().zip(rs).map(|(t, r)| (r - c * t.sqrt()).powi(2)).sum();
    SqrtFit { c, rss }
}

/// One row of the regret table.
#[derive(Debug, Clone, Serialize)]
pub struct RegretRow {
    pub t: usize,
    pub regret: f64,
    pub regret_se: f64,
    pub regret_over_sqrt_t: f64,
    pub log_squared_fit: f64,
    pub sqrt_fit: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitDiagnostics {
    pub fit_from: usize,
    pub log_squared: LogSquaredFit,
    pub sqrt: SqrtFit,
    /// `rss(log^2 fit) / rss(sqrt fit)`.
    pub rss_ratio: f64,
    /// `R(T)/sqrt(T)` strictly decreasing over powers of two `>= fit_from`.
    pub ratio_strictly_decreasing: bool,
    /// `R(2T) - R(T)` over the same powers of two.
    pub dyadic_increments: Vec<f64>,
    pub dyadic_increments_non_increasing: bool,
}

/// Builds the table at quarter-octave points and fits over `T >= fit_from`.
///
/// `per_replica_regret[r][t]` is replica `r`'s own cumulative regret, used
/// only for the standard-error column.
pub fn regret_table(regret: &[f64], per_replica_regret: &[Vec<f64>], fit_from: usize) -> (Vec<RegretRow>, FitDiagnostics) {
    let points = quarter_octave_points(regret.len());
    let fitted: Vec<usize> = points.iter().copied().filter(|t| *t >= fit_from).collect();
    let ts: Vec<f64> = fitted.iter().map(|t| *t as f64).collect();
    let rs: Vec<f64> = fitted.iter().map(|t| regret[t - 1]).collect();
    let log_squared = fit_log_squared(&ts, &rs);
    let sqrt = fit_sqrt(&ts, &rs);
    let rows: Vec<RegretRow> = points
        .iter()
        .map(|&t| {
            let r = regret[t - 1];
            let finals: Vec<f64> = per_replica_regret.iter().map(|v| v[t - 1]).collect();
            RegretRow {
                t,
                regret: r,
                regret_se: standard_error(&finals),
                regret_over_sqrt_t: r / (t as f64).sqrt(),
                log_squared_fit: log_squared.eval(t as f64),
                sqrt_fit: sqrt.eval(t as f64),
            }
        })
        .collect();
    let dyadic: Vec<&RegretRow> = rows.iter().filter(|r| r.t >= fit_from && r.t.is_power_of_two()).collect();
    let ratios: Vec<f64> = dyadic.iter().map(|r| r.regret_over_sqrt_t).collect();
    let increments: Vec<f64> = dyadic.windows(2).map(|w| w[1].regret - w[0].regret).collect();
    let diag = FitDiagnostics {
        fit_from,
        log_squared,
        sqrt,
        rss_ratio: if sqrt.rss > 0.0 { log_squared.rss / sqrt.rss } else { f64::INFINITY },
        ratio_strictly_decreasing: ratios.len() >= 2 && ratios.windows(2).all(|w| w[1] < w[0]),
        dyadic_increments_non_increasing: increments.windows(2).all(|w| w[1] <= w[0]),
        dyadic_increments: increments,
    };
    (rows, diag)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_are_increasing_and_end_at_t() {
        let p = quarter_octave_points(1 << 15);
        assert_eq!(p[0], 1);
        assert!(p.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(*p.last().unwrap(), 1 << 15);
        assert!(p.contains(&1024));
        assert_eq!(p.iter().filter(|t| **t >= 1024).count(), 21);
        assert_eq!(*quarter_octave_points(10).last().unwrap(), 10);
    }

    #[test]
    fn fits_recover_exact_curves() {
        let ts: Vec<f64> = quarter_octave_points(1 << 12).iter().map(|t| *t as f64).collect();
        let rs: Vec<f64> = ts.iter().map(|t| 3.0 + 0.5 * t.ln().powi(2)).collect();
        let f = fit_log_squared(&ts, &rs);
        assert!((f.a - 3.0).abs() < 1e-9 && (f.b - 0.5).abs() < 1e-10);
        assert!(f.rss < 1e-15);
        let rs: Vec<f64> = ts.iter().map(|t| 2.0 * t.sqrt()).collect();
        let s = fit_sqrt(&ts, &rs);
        assert!((s.c - 2.0).abs() < 1e-12 && s.rss < 1e-15);
    }

    #[test]
    fn cumulative_matches_hand_sum() {
        let r = cumulative_regret(&[3.0, 1.0, 2.0], &[1.0, 1.0, 0.5]);
        assert_eq!(r, vec![2.0, 2.0, 3.5]);
        assert_eq!(mean_series(&[vec![1.0, 2.0], vec![3.0, 6.0]]), vec![2.0, 4.0]);
        assert!((standard_error(&[1.0, 3.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn table_flags_monotone_ratio() {
        let regret: Vec<f64> = (1..=4096).map(|t| (t as f64).ln().powi(2)).collect();
        let (rows, diag) = regret_table(&regret, std::slice::from_ref(&regret), 1024);
        assert!(diag.ratio_strictly_decreasing);
        assert!(diag.rss_ratio < 1e-10);
        assert_eq!(rows.last().unwrap().t, 4096);
        // log^2 growth has growing dyadic increments, log growth constant ones
        assert_eq!(diag.dyadic_increments.len(), 2);
        assert!(!diag.dyadic_increments_non_increasing);
        let log: Vec<f64> = (1..=4096).map(|t| 5.0 * (t as f64).ln()).collect();
        let (_, diag) = regret_table(&log, &[], 1024);
        assert!(diag.dyadic_increments_non_increasing && diag.ratio_strictly_decreasing);
        let growing: Vec<f64> = (1..=4096).map(|t| t as f64).collect();
        let (_, diag) = regret_table(&growing, &[], 1024);
        assert!(!diag.ratio_strictly_decreasing);
    }
}
