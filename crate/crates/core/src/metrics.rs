//! Mechanism diagnostics: auxiliary/main overlap, spectral geometry of the
//! readout features, class separation and gate statistics.
//!
//! Effective rank is `exp(H(p))` with `p` the normalized singular spectrum of
//! the mean-centered feature matrix. Participation ratio is `(Σλ)² / Σλ²`
//! over covariance eigenvalues. Separation is the mean inter-centroid
//! distance over the mean sample-to-own-centroid distance. These definitions
//! are conventional choices; only comparisons between variants are
//! meaningful.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("{0}: empty sample set")]
    Empty(&'static str),
    #[error("{metric}: need at least {need} samples, got {got}")]
    TooFewSamples {
        metric: &'static str,
        need: usize,
        got: usize,
    },
    #[error("{0}: sample sets are not aligned")]
    Misaligned(&'static str),
    #[error("separation_score: need at least two classes with two samples each ({0})")]
    Classes(String),
}

/// Row-major `n × d` feature matrix in `f64`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Features<'a> {
    pub data: &'a [f64],
    pub n: usize,
    pub d: usize,
}

impl<'a> Features<'a> {
    pub fn new(data: &'a [f64], d: usize) -> Self {
        let n = data.len().checked_div(d).unwrap_or(0);
        Self { data, n, d }
    }

    fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

/// Cosine similarity; a zero vector has cosine 0 with anything.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Per-token absolute cosines between two aligned row sets.
pub fn abs_cosines(a: Features<'_>, b: Features<'_>) -> Result<Vec<f64>, MetricError> {
    if a.n != b.n || a.d != b.d {
        return Err(MetricError::Misaligned("abs_cosines"));
    }
    Ok((0..a.n).map(|i| cosine(a.row(i), b.row(i)).abs()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    /// Mean `|cos(q, m)|`.
    pub pre: f64,
    /// Mean `|cos(residual, m)|`; equals `pre` when no projection ran.
    pub post: f64,
    pub max_post: f64,
}

pub fn overlap_stats(
    q: Features<'_>,
    m: Features<'_>,
    residual: Option<Features<'_>>,
) -> Result<Overlap, MetricError> {
    if q.n == 0 {
        return Err(MetricError::Empty("overlap_stats"));
    }
    let pre = abs_cosines(q, m)?;
    let pre_mean = mean(&pre);
    match residual {
        Some(res) => {
            let post = abs_cosines(res, m)?;
            Ok(Overlap {
                pre: pre_mean,
                post: mean(&post),
                max_post: post.iter().copied().fold(0.0, f64::max),
            })
        }
        None => Ok(Overlap {
            pre: pre_mean,
            post: pre_mean,
            max_post: pre.iter().copied().fold(0.0, f64::max),
        }),
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean-centers the columns.
pub fn centered(x: Features<'_>) -> Vec<f64> {
    let mut mu = vec![0.0; x.d];
    for i in 0..x.n {
        for (m, v) in mu.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    for m in &mut mu {
        *m /= x.n as f64;
    }
    let mut out = x.data.to_vec();
    for row in out.chunks_mut(x.d) {
        for (o, m) in row.iter_mut().zip(&mu) {
            *o -= m;
        }
    }
    out
}

pub fn effective_rank(x: Features<'_>) -> Result<f64, MetricError> {
    if x.n < 2 {
        return Err(MetricError::TooFewSamples {
            metric: "effective_rank",
            need: 2,
            got: x.n,
        });
    }
    let c = centered(x);
    Ok(entropy_rank(&singular_values(&c, x.n, x.d)))
}

/// `exp` of the Shannon entropy of `s / Σs`; 1 for an all-zero spectrum.
pub fn entropy_rank(s: &[f64]) -> f64 {
    let total: f64 = s.iter().sum();
    if total <= 0.0 {
        return 1.0;
    }
    let h: f64 = s
        .iter()
        .map(|&v| v / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    h.exp()
}

pub fn participation_ratio(x: Features<'_>) -> Result<f64, MetricError> {
    if x.n < 2 {
        return Err(MetricError::TooFewSamples {
            metric: "participation_ratio",
            need: 2,
            got: x.n,
        });
    }
    let cov = covariance(x);
    // tr(C)² / ‖C‖_F² equals (Σλ)² / Σλ² for symmetric C.
    let d = (cov.len() as f64).sqrt() as usize;
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let fro2: f64 = cov.iter().map(|v| v * v).sum();
    if fro2 == 0.0 {
        return Ok(1.0);
    }
    Ok(trace * trace / fro2)
}

/// Sample covariance `XcᵀXc / (n − 1)` as a dense `d × d` matrix.
pub fn covariance(x: Features<'_>) -> Vec<f64> {
    let c = centered(x);
    let d = x.d;
    let mut cov = vec![0.0; d * d];
    for row in c.chunks(d) {
        for i in 0..d {
            let ri = row[i];
            if ri == 0.0 {
                continue;
            }
            for j in i..d {
                cov[i * d + j] += ri * row[j];
            }
        }
    }
    let denom = (x.n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / denom;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    cov
}

pub fn separation_score(x: Features<'_>, labels: &[usize]) -> Result<f64, MetricError> {
    if x.n == 0 {
        return Err(MetricError::Empty("separation_score"));
    }
    if labels.len() != x.n {
        return Err(MetricError::Misaligned("separation_score"));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; n_classes];
    let mut centroids = vec![0.0; n_classes * x.d];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (c, v) in centroids[l * x.d..(l + 1) * x.d].iter_mut().zip(x.row(i)) {
            *c += v;
        }
    }
    let present: Vec<usize> = (0..n_classes).filter(|&c| counts[c] > 0).collect();
    if present.len() < 2 {
        return Err(MetricError::Classes(format!("{} class(es) present", present.len())));
    }
    if let Some(&c) = present.iter().find(|&&c| counts[c] < 2) {
        return Err(MetricError::Classes(format!("class {c} has {} sample", counts[c])));
    }
    for &c in &present {
        for v in &mut centroids[c * x.d..(c + 1) * x.d] {
            *v /= counts[c] as f64;
        }
    }
    let centroid = |c: usize| &centroids[c * x.d..(c + 1) * x.d];
    let mut inter = 0.0;
    let mut pairs = 0usize;
    for (a_idx, &a) in present.iter().enumerate() {
        for &b in &present[a_idx + 1..] {
            inter += dist(centroid(a), centroid(b));
            pairs += 1;
        }
    }
    inter /= pairs as f64;
    let intra: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| dist(x.row(i), centroid(l)))
        .sum::<f64>()
        / x.n as f64;
    if intra == 0.0 {
        return Ok(if inter == 0.0 { 1.0 } else { f64::INFINITY });
    }
    Ok(inter / intra)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean and population standard deviation of post-sigmoid gate values.
pub fn gate_stats(gates: &[f64]) -> Result<(f64, f64), MetricError> {
    if gates.is_empty() {
        return Err(MetricError::Empty("gate_stats"));
    }
    let m = mean(gates);
    let var = gates.iter().map(|g| (g - m) * (g - m)).sum::<f64>() / gates.len() as f64;
    Ok((m, var.sqrt()))
}

// ------------------------------------------------------------- linalg

const JACOBI_SWEEPS: usize = 60;

/// Singular values of a row-major `n × d` matrix via one-sided (Hestenes)
/// Jacobi rotations on its columns, sorted descending.
pub fn singular_values(a: &[f64], n: usize, d: usize) -> Vec<f64> {
    // Column-major working copy: each column contiguous.
    let mut cols: Vec<Vec<f64>> = (0..d).map(|j| (0..n).map(|i| a[i * d + j]).collect()).collect();
    for _ in 0..JACOBI_SWEEPS {
        let mut rotated = false;
        for p in 0..d {
            for q in p + 1..d {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for (x, y) in cp.iter().zip(cq) {
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut s: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Eigenvalues of a symmetric `d × d` matrix by cyclic Jacobi, sorted descending.
pub fn symmetric_eigenvalues(m: &[f64], d: usize) -> Vec<f64> {
    let mut a = m.to_vec();
    for _ in 0..JACOBI_SWEEPS {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * d + j] * a[i * d + j])
            .sum();
        let diag: f64 = (0..d).map(|i| a[i * d + i] * a[i * d + i]).sum();
        if off <= 1e-30 * diag.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..d).map(|i| a[i * d + i]).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

// ------------------------------------------------------------- report

/// Mechanism statistics for one trained model on one evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismReport {
    pub variant: String,
    pub host: String,
    pub seed: u64,
    pub precision: String,
    pub accuracy: f64,
    /// Mean `|cos(q, m)|` per layer; empty without a complement.
    pub per_layer_overlap_pre: Vec<f64>,
    /// Mean `|cos(residual, m)|` per layer; equals the pre value when no
    /// projection ran.
    pub per_layer_overlap_post: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap_pre: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap_post: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap_post_max: Option<f64>,
    pub eff_rank: f64,
    pub part_ratio: f64,
    pub separation: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate_std: Option<f64>,
    pub n_samples: usize,
    pub feature_dim: usize,
    pub note: String,
}

pub const GEOMETRY_NOTE: &str =
    "eff_rank, part_ratio and separation use conventional definitions; compare variants ordinally only";

impl MechanismReport {
    pub const CSV_HEADER: [&'static str; 12] = [
        "variant",
        "seed",
        "acc",
        "eff_rank",
        "part_ratio",
        "sep",
        "overlap_pre",
        "overlap_post",
        "gate_mean",
        "gate_std",
        "n_samples",
        "host",
    ];

    pub fn csv_row(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        vec![
            self.variant.clone(),
            self.seed.to_string(),
            format!("{:.4}", self.accuracy),
            format!("{:.6}", self.eff_rank),
            format!("{:.6}", self.part_ratio),
            format!("{:.6}", self.separation),
            opt(self.overlap_pre),
            opt(self.overlap_post),
            opt(self.gate_mean),
            opt(self.gate_std),
            self.n_samples.to_string(),
            self.host.clone(),
        ]
    }
}
