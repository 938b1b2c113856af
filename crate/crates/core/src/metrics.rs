//! Evaluation statistics for parameter predictions.
//!
//! Truth and predictions are row-major: one `Vec` per sample, one entry per
//! target coordinate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stochastic::{domain, RngStream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no samples to evaluate")]
    EmptyInput,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("truth value is exactly zero at sample {sample}, coordinate {coord}")]
    ZeroTruthValue { sample: usize, coord: usize },
    #[error("truth is constant in coordinate {coord}")]
    ConstantTruth { coord: usize },
    #[error("invalid fold count k={k} for n={n}")]
    InvalidK { n: usize, k: usize },
}

fn check_shapes(truth: &[Vec<f64>], pred: &[Vec<f64>]) -> Result<usize, MetricsError> {
    if truth.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if truth.len() != pred.len() {
        return Err(MetricsError::DimensionMismatch(format!("{} truths vs {} predictions", truth.len(), pred.len())));
    }
    let dim = truth[0].len();
    if dim == 0 || truth.iter().chain(pred).any(|r| r.len() != dim) {
        return Err(MetricsError::DimensionMismatch("rows differ in length".into()));
    }
    Ok(dim)
}

fn column(rows: &[Vec<f64>], c: usize) -> impl Iterator<Item = f64> + '_ {
    rows.iter().map(move |r| r[c])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MseDecomposition {
    pub mse: f64,
    pub squared_bias: f64,
    pub c_mse: f64,
}

/// Per-coordinate `mse = squared_bias + c_mse`.
pub fn mse_decompose(truth: &[Vec<f64>], pred: &[Vec<f64>]) -> Result<Vec<MseDecomposition>, MetricsError> {
    let dim = check_shapes(truth, pred)?;
    let m = truth.len() as f64;
    Ok((0..dim)
        .map(|c| {
            let t_mean = column(truth, c).sum::<f64>() / m;
            let p_mean = column(pred, c).sum::<f64>() / m;
            let mut mse = 0.0;
            let mut c_mse = 0.0;
            for (t, p) in column(truth, c).zip(column(pred, c)) {
                mse += (t - p) * (t - p);
                let d = (t - t_mean) - (p - p_mean);
                c_mse += d * d;
            }
            MseDecomposition { mse: mse / m, squared_bias: (t_mean - p_mean).powi(2), c_mse: c_mse / m }
        })
        .collect())
}

/// Median of a non-empty slice; the even-count median averages the two
/// central order statistics.
pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median over all (sample, coordinate) pairs of `|t - p| / |t|`.
pub fn median_ape(truth: &[Vec<f64>], pred: &[Vec<f64>]) -> Result<f64, MetricsError> {
    check_shapes(truth, pred)?;
    let mut apes = Vec::with_capacity(truth.len() * truth[0].len());
    for (s, (tr, pr)) in truth.iter().zip(pred).enumerate() {
        for (c, (&t, &p)) in tr.iter().zip(pr).enumerate() {
            if t == 0.0 {
                return Err(MetricsError::ZeroTruthValue { sample: s, coord: c });
            }
            apes.push((t - p).abs() / t.abs());
        }
    }
    Ok(median(&mut apes))
}

/// Like [`median_ape`] but drops zero-truth pairs; returns the median and
/// the number of dropped pairs. `coords` restricts the pooled coordinates.
pub fn median_ape_excluding_zeros(
    truth: &[Vec<f64>],
    pred: &[Vec<f64>],
    coords: Option<&[usize]>,
) -> Result<(f64, usize), MetricsError> {
    let dim = check_shapes(truth, pred)?;
    let all: Vec<usize> = (0..dim).collect();
    let coords = coords.unwrap_or(&all);
    let mut apes = Vec::with_capacity(truth.len() * coords.len());
    let mut excluded = 0;
    for (tr, pr) in truth.iter().zip(pred) {
        for &c in coords {
            if tr[c] == 0.0 {
                excluded += 1;
            } else {
                apes.push((tr[c] - pr[c]).abs() / tr[c].abs());
            }
        }
    }
    if apes.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    Ok((median(&mut apes), excluded))
}

fn r2_sums(truth: &[Vec<f64>], pred: &[Vec<f64>], c: usize) -> (f64, f64) {
    let m = truth.len() as f64;
    let mean = column(truth, c).sum::<f64>() / m;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (t, p) in column(truth, c).zip(column(pred, c)) {
        ss_res += (t - p) * (t - p);
        ss_tot += (t - mean) * (t - mean);
    }
    (ss_res, ss_tot)
}

fn check_r2(truth: &[Vec<f64>], pred: &[Vec<f64>]) -> Result<usize, MetricsError> {
    let dim = check_shapes(truth, pred)?;
    if truth.len() < 2 {
        return Err(MetricsError::DimensionMismatch("R^2 needs at least two samples".into()));
    }
    Ok(dim)
}

/// `1 - SS_res / SS_tot` for each coordinate.
pub fn r_squared(truth: &[Vec<f64>], pred: &[Vec<f64>]) -> Result<Vec<f64>, MetricsError> {
    let dim = check_r2(truth, pred)?;
    (0..dim)
        .map(|c| {
            let (res, tot) = r2_sums(truth, pred, c);
            if tot == 0.0 {
                Err(MetricsError::ConstantTruth { coord: c })
            } else {
                Ok(1.0 - res / tot)
            }
        })
        .collect()
}

/// R^2 with residual and total sums pooled over coordinates.
pub fn r_squared_pooled(truth: &[Vec<f64>], pred: &[Vec<f64>]) -> Result<f64, MetricsError> {
    let dim = check_r2(truth, pred)?;
    let (res, tot) = (0..dim).map(|c| r2_sums(truth, pred, c)).fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    if tot == 0.0 {
        return Err(MetricsError::ConstantTruth { coord: 0 });
    }
    Ok(1.0 - res / tot)
}

/// Assignment of `n` sample indices to `k` folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    /// `assignment[i]` is the fold of sample `i`.
    pub assignment: Vec<usize>,
}

impl FoldPlan {
    /// Sample indices of each fold, ascending.
    pub fn folds(&self) -> Vec<Vec<usize>> {
        let mut folds = vec![Vec::new(); self.k];
        for (i, &f) in self.assignment.iter().enumerate() {
            folds[f].push(i);
        }
        folds
    }

    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] != fold).collect()
    }
}

/// Permutes `0..n` with stream `KFOLD` of `seed` and cuts it into `k`
/// contiguous chunks; the first `n % k` chunks hold one extra index.
pub fn kfold(n: usize, k: usize, seed: u64) -> Result<FoldPlan, MetricsError> {
    if k < 2 || k > n {
        return Err(MetricsError::InvalidK { n, k });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    RngStream::new(seed, domain::KFOLD).rng().shuffle(&mut perm);
    let mut assignment = vec![0; n];
    let (base, extra) = (n / k, n % k);
    let mut pos = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        for &i in &perm[pos..pos + size] {
            assignment[i] = f;
        }
        pos += size;
    }
    Ok(FoldPlan { k, assignment })
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> MeanStd {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateReport {
    pub name: String,
    pub mse: f64,
    pub squared_bias: f64,
    pub c_mse: f64,
    pub median_ape: Option<f64>,
    pub r2: Option<f64>,
}

/// Aggregate `mse`, `squared_bias` and `c_mse` average the per-coordinate
/// values; `median_ape` and `r2` pool all coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub mse: f64,
    pub squared_bias: f64,
    pub c_mse: f64,
    pub median_ape: f64,
    pub r2: f64,
    pub ape_excluded: usize,
    pub per_coordinate: Vec<CoordinateReport>,
    pub dataset_id: String,
    pub model_id: String,
}

pub fn coordinate_names(dim: usize) -> Vec<String> {
    const NAMES: [&str; 4] = ["theta0", "theta1", "sigma", "rho"];
    (0..dim).map(|i| NAMES.get(i).map_or_else(|| format!("coord{i}"), |s| s.to_string())).collect()
}

impl EvalReport {
    pub fn evaluate(truth: &[Vec<f64>], pred: &[Vec<f64>]) -> Result<EvalReport, MetricsError> {
        let dim = check_r2(truth, pred)?;
        let decomp = mse_decompose(truth, pred)?;
        let (median_ape, ape_excluded) = median_ape_excluding_zeros(truth, pred, None)?;
        let r2 = r_squared_pooled(truth, pred)?;
        let per_coordinate = coordinate_names(dim)
            .into_iter()
            .enumerate()
            .map(|(c, name)| {
                let (res, tot) = r2_sums(truth, pred, c);
                CoordinateReport {
                    name,
                    mse: decomp[c].mse,
                    squared_bias: decomp[c].squared_bias,
                    c_mse: decomp[c].c_mse,
                    median_ape: median_ape_excluding_zeros(truth, pred, Some(&[c])).ok().map(|r| r.0),
                    r2: (tot > 0.0).then(|| 1.0 - res / tot),
                }
            })
            .collect();
        let mean = |f: fn(&MseDecomposition) -> f64| decomp.iter().map(f).sum::<f64>() / dim as f64;
        Ok(EvalReport {
            n_samples: truth.len(),
            mse: mean(|d| d.mse),
            squared_bias: mean(|d| d.squared_bias),
            c_mse: mean(|d| d.c_mse),
            median_ape,
            r2,
            ape_excluded,
            per_coordinate,
            dataset_id: String::new(),
            model_id: String::new(),
        })
    }

    pub fn with_ids(mut self, dataset_id: impl Into<String>, model_id: impl Into<String>) -> Self {
        self.dataset_id = dataset_id.into();
        self.model_id = model_id.into();
        self
    }

    pub fn coordinate(&self, name: &str) -> Option<&CoordinateReport> {
        self.per_coordinate.iter().find(|c| c.name == name)
    }

    pub fn csv_header() -> &'static str {
        "n_samples,mse,squared_bias,c_mse,median_ape,r2,ape_excluded"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:?},{}",
            self.n_samples, self.mse, self.squared_bias, self.c_mse, self.median_ape, self.r2, self.ape_excluded
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn decomposition_examples() {
        let t = col(&[0.0, 2.0]);
        assert_eq!(mse_decompose(&t, &t).unwrap()[0], MseDecomposition { mse: 0.0, squared_bias: 0.0, c_mse: 0.0 });
        let d = mse_decompose(&t, &col(&[1.0, 1.0])).unwrap()[0];
        assert_eq!(d, MseDecomposition { mse: 1.0, squared_bias: 0.0, c_mse: 1.0 });
        assert_eq!(mse_decompose(&[], &[]), Err(MetricsError::EmptyInput));
    }

    #[test]
    fn median_ape_examples() {
        let t = col(&[1.0, 2.0, 4.0]);
        assert_eq!(median_ape(&t, &t).unwrap(), 0.0);
        assert_eq!(median_ape(&t, &col(&[1.1, 2.0, 4.0])).unwrap(), 0.0);
        let m = median_ape(&col(&[1.0, 2.0]), &col(&[1.1, 2.2])).unwrap();
        assert!((m - 0.1).abs() < 1e-15);
        assert_eq!(
            median_ape(&col(&[1.0, 0.0]), &col(&[1.0, 1.0])),
            Err(MetricsError::ZeroTruthValue { sample: 1, coord: 0 })
        );
        let (m, excluded) = median_ape_excluding_zeros(&col(&[1.0, 0.0, 2.0]), &col(&[1.5, 1.0, 2.0]), None).unwrap();
        assert_eq!(excluded, 1);
        assert!((m - 0.25).abs() < 1e-15);
    }

    #[test]
    fn r_squared_examples() {
        let t = col(&[0.0, 1.0, 2.0]);
        assert_eq!(r_squared(&t, &t).unwrap(), vec![1.0]);
        assert_eq!(r_squared(&t, &col(&[1.0, 1.0, 1.0])).unwrap(), vec![0.0]);
        assert_eq!(r_squared(&t, &col(&[2.0, 1.0, 0.0])).unwrap(), vec![-3.0]);
        assert_eq!(r_squared(&col(&[1.0, 1.0]), &col(&[1.0, 2.0])), Err(MetricsError::ConstantTruth { coord: 0 }));
    }

    #[test]
    fn pooled_r_squared_sums_over_coordinates() {
        let t = vec![vec![0.0, 10.0], vec![1.0, 20.0], vec![2.0, 30.0]];
        let p = vec![vec![2.0, 10.0], vec![1.0, 20.0], vec![0.0, 30.0]];
        // Residuals 8 + 0, totals 2 + 200.
        assert!((r_squared_pooled(&t, &p).unwrap() - (1.0 - 8.0 / 202.0)).abs() < 1e-15);
    }

    #[test]
    fn kfold_sizes() {
        let plan = kfold(12, 6, 1).unwrap();
        assert!(plan.folds().iter().all(|f| f.len() == 2));
        let mut sizes: Vec<usize> = kfold(7, 6, 1).unwrap().folds().iter().map(Vec::len).collect();
        assert_eq!(sizes.remove(0), 2);
        assert!(sizes.iter().all(|&s| s == 1));
        assert_eq!(kfold(5, 1, 0), Err(MetricsError::InvalidK { n: 5, k: 1 }));
        assert_eq!(kfold(5, 6, 0), Err(MetricsError::InvalidK { n: 5, k: 6 }));
        assert_eq!(kfold(100, 6, 3).unwrap(), kfold(100, 6, 3).unwrap());
    }

    #[test]
    fn report_aggregates() {
        let t = vec![vec![0.5, 0.2], vec![0.3, 0.9], vec![0.7, 0.4]];
        let p = vec![vec![0.4, 0.3], vec![0.35, 0.8], vec![0.6, 0.5]];
        let r = EvalReport::evaluate(&t, &p).unwrap();
        let d = mse_decompose(&t, &p).unwrap();
        assert!((r.mse - 0.5 * (d[0].mse + d[1].mse)).abs() < 1e-15);
        assert_eq!(r.r2, r_squared_pooled(&t, &p).unwrap());
        assert_eq!(r.per_coordinate[1].name, "theta1");
        let json = serde_json::to_value(&r).unwrap();
        for key in ["mse", "squared_bias", "c_mse", "median_ape", "r2", "per_coordinate"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        assert_eq!(r.csv_row().split(',').count(), EvalReport::csv_header().split(',').count());
    }
}
