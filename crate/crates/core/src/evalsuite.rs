//! Distribution metrics over extracted features: Frechet distance between
//! Gaussian fits, k-NN recall with an adaptive threshold, and 2-D PCA export.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::Image;

/// Anything that maps images to fixed-width feature rows (the harness
/// classifier's penultimate layer implements this).
pub trait FeatureExtractor {
    fn features(&self, images: &[Image]) -> Result<Array2<f32>>;
}

/// Gaussian fit of a feature set: mean vector and unbiased (n-1) covariance.
#[derive(Debug, Clone)]
pub struct FeatureStats {
    pub mu: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl FeatureStats {
    pub fn from_rows(rows: &Array2<f32>) -> Result<Self> {
        let (n, d) = rows.dim();
        if n < 2 {
            return Err(Error::Degenerate(format!(
                "need at least 2 rows for covariance, got {n}"
            )));
        }
        let mut mu = DVector::zeros(d);
        for row in rows.rows() {
            for (j, v) in row.iter().enumerate() {
                mu[j] += *v as f64;
            }
        }
        mu /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for row in rows.rows() {
            let centered: Vec<f64> = row
                .iter()
                .enumerate()
                .map(|(j, v)| *v as f64 - mu[j])
                .collect();
            for i in 0..d {
                for j in i..d {
                    cov[(i, j)] += centered[i] * centered[j];
                }
            }
        }
        cov /= (n - 1) as f64;
        for i in 0..d {
            for j in 0..i {
                cov[(i, j)] = cov[(j, i)];
            }
        }
        Ok(Self { mu, cov })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Symmetric PSD square root via eigendecomposition; eigenvalues below
/// `-tol * lambda_max` are a numeric error, small negatives clamp to zero.
fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let lambda_max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
    let tol = 1e-8 * lambda_max.max(1e-30);
    let mut sqrt_vals = DVector::zeros(eig.eigenvalues.len());
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        if l < -tol {
            return Err(Error::numeric(format!(
                "{what}: eigenvalue {l} below -{tol}"
            )));
        }
        sqrt_vals[i] = l.max(0.0).sqrt();
    }
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&sqrt_vals) * v.transpose())
}

/// `||mu_r - mu_g||^2 + Tr(S_r + S_g - 2 (S_r S_g)^{1/2})`, the trace term
/// computed through the symmetrized product `S_r^{1/2} S_g S_r^{1/2}`.
pub fn fid(stats_r: &FeatureStats, stats_g: &FeatureStats) -> Result<f64> {
    if stats_r.dim() != stats_g.dim() {
        return Err(Error::dimension(format!(
            "feature dims differ: {} vs {}",
            stats_r.dim(),
            stats_g.dim()
        )));
    }
    let diff = &stats_r.mu - &stats_g.mu;
    let mean_term = diff.dot(&diff);
    let a = psd_sqrt(&stats_r.cov, "cov_r")?;
    let prod = &a * &stats_g.cov * &a;
    let sqrt_prod = psd_sqrt(&prod, "cov product")?;
    let value = mean_term + stats_r.cov.trace() + stats_g.cov.trace() - 2.0 * sqrt_prod.trace();
    if !value.is_finite() {
        return Err(Error::numeric("fid is not finite"));
    }
    Ok(value)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauPolicy {
    /// tau = median over real points of their k-th nearest *real* neighbor
    /// distance (self excluded) — a manifold radius estimated from R alone.
    MedianRealToReal,
    /// tau = median of the scored real-to-generated k-NN distances
    /// themselves (pins the passing fraction near one half by construction).
    MedianPooled,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RecallConfig {
    pub k: usize,
    pub tau_policy: TauPolicy,
}

impl Default for RecallConfig {
    fn default() -> Self {
        Self {
            k: 10,
            tau_policy: TauPolicy::MedianRealToReal,
        }
    }
}

fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Distance from each row of `from` to its k-th nearest row of `to`;
/// `skip_self[i]` excludes index i of `to` for row i of `from`.
fn kth_nearest(from: &Array2<f32>, to: &Array2<f32>, k: usize, skip_self: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(from.nrows());
    for (i, row) in from.rows().into_iter().enumerate() {
        let a = row.as_slice().expect("contiguous");
        let mut dists: Vec<f64> = Vec::with_capacity(to.nrows());
        for (j, other) in to.rows().into_iter().enumerate() {
            if skip_self && i == j {
                continue;
            }
            dists.push(euclidean(a, other.as_slice().expect("contiguous")));
        }
        dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        out.push(dists[k - 1]);
    }
    out
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Fraction of real rows whose k-th nearest generated neighbor lies within
/// the adaptive threshold tau.
pub fn knn_recall(
    feats_r: &Array2<f32>,
    feats_g: &Array2<f32>,
    cfg: &RecallConfig,
) -> Result<f64> {
    if cfg.k == 0 {
        return Err(Error::config("k", "must be >= 1"));
    }
    if feats_g.nrows() <= cfg.k {
        return Err(Error::config(
            "k",
            format!("needs |G| > k, got |G| = {}, k = {}", feats_g.nrows(), cfg.k),
        ));
    }
    if feats_r.nrows() < 2 {
        return Err(Error::config("feats_r", "needs |R| >= 2"));
    }
    if feats_r.ncols() != feats_g.ncols() {
        return Err(Error::dimension("feature widths differ".to_string()));
    }
    let scored = kth_nearest(feats_r, feats_g, cfg.k, false);
    let tau = match cfg.tau_policy {
        TauPolicy::MedianRealToReal => {
            let k_real = cfg.k.min(feats_r.nrows() - 1);
            let mut real_dists = kth_nearest(feats_r, feats_r, k_real, true);
            median(&mut real_dists)
        }
        TauPolicy::MedianPooled => {
            let mut pool = scored.clone();
            median(&mut pool)
        }
    };
    let hits = scored.iter().filter(|&&d| d <= tau).count();
    Ok(hits as f64 / scored.len() as f64)
}

/// Mean pairwise Euclidean distance — the diversity proxy used for the
/// sigma-ordering checks.
pub fn mean_pairwise_distance(feats: &Array2<f32>) -> Result<f64> {
    let n = feats.nrows();
    if n < 2 {
        return Err(Error::Degenerate("need at least 2 rows".to_string()));
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for i in 0..n {
        let a = feats.row(i);
        let a = a.as_slice().expect("contiguous");
        for j in (i + 1)..n {
            let b = feats.row(j);
            total += euclidean(a, b.as_slice().expect("contiguous"));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// PCA projection output: coordinates plus explained-variance ratios.
#[derive(Debug, Clone)]
pub struct PcaProjection {
    pub coords: Array2<f64>,
    pub explained_variance_ratio: Vec<f64>,
}

/// Center, eigendecompose the (n-1) covariance, project onto the top
/// components. Sign convention: the first nonzero loading of each component
/// is positive.
pub fn pca_project(features: &Array2<f32>, n_components: usize) -> Result<PcaProjection> {
    let (n, d) = features.dim();
    if n < n_components || n < 2 {
        return Err(Error::Degenerate(format!(
            "{n} rows cannot support {n_components} components"
        )));
    }
    let stats = FeatureStats::from_rows(features)?;
    let total_var = stats.cov.trace();
    if total_var <= 0.0 {
        return Err(Error::Degenerate("zero-variance input".to_string()));
    }
    let eig = stats.cov.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
    });

    let mut components = Vec::with_capacity(n_components);
    let mut ratios = Vec::with_capacity(n_components);
    for &idx in order.iter().take(n_components) {
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                for x in v.iter_mut() {
                    *x = -*x;
                }
            }
        }
        components.push(v);
        ratios.push(eig.eigenvalues[idx].max(0.0) / total_var);
    }

    let mut coords = Array2::zeros((n, n_components));
    for (i, row) in features.rows().into_iter().enumerate() {
        for (c, comp) in components.iter().enumerate() {
            let mut acc = 0.0f64;
            for (j, v) in row.iter().enumerate() {
                acc += (*v as f64 - stats.mu[j]) * comp[j];
            }
            coords[[i, c]] = acc;
        }
    }
    Ok(PcaProjection {
        coords,
        explained_variance_ratio: ratios,
    })
}

/// One metric observation for the report CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    pub model_variant: String,
    pub sigma: f64,
    pub split: String,
    pub class: String,
    pub metric: String,
    pub value: f64,
}

/// Identity feature extractor: flattens pixels (tests, PCA on raw images).
pub struct PixelFeatures;

impl FeatureExtractor for PixelFeatures {
    fn features(&self, images: &[Image]) -> Result<Array2<f32>> {
        if images.is_empty() {
            return Err(Error::Degenerate("no images".to_string()));
        }
        let len = images[0].len();
        let mut out = Array2::zeros((images.len(), len));
        for (i, img) in images.iter().enumerate() {
            if img.len() != len {
                return Err(Error::dimension("ragged image set".to_string()));
            }
            for (j, v) in img.iter().enumerate() {
                out[[i, j]] = *v;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stats_1d(mu: f64, var: f64) -> FeatureStats {
        FeatureStats {
            mu: DVector::from_vec(vec![mu]),
            cov: DMatrix::from_vec(1, 1, vec![var]),
        }
    }

    #[test]
    fn fid_identical_stats_is_zero() {
        let rows = array![[0.1f32, 0.3], [1.2, -0.4], [0.5, 0.9], [-0.3, 0.2]];
        let s = FeatureStats::from_rows(&rows).unwrap();
        let v = fid(&s, &s).unwrap();
        assert!(v.abs() < 1e-9, "fid(a,a) = {v}");
    }

    #[test]
    fn fid_1d_closed_forms() {
        // N(0,1) vs N(1,1): (1)^2 + (1 + 1 - 2) = 1
        let v = fid(&stats_1d(0.0, 1.0), &stats_1d(1.0, 1.0)).unwrap();
        assert_relative_eq!(v, 1.0, epsilon = 1e-9);
        // N(0,1) vs N(0,4): 0 + (1 + 4 - 2*2) = 1
        let v = fid(&stats_1d(0.0, 1.0), &stats_1d(0.0, 4.0)).unwrap();
        assert_relative_eq!(v, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn fid_is_symmetric_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let a = Array2::from_shape_fn((30, 4), |_| rng.gen_range(-1.0f32..1.0));
            let b = Array2::from_shape_fn((25, 4), |_| rng.gen_range(-0.5f32..1.5));
            let sa = FeatureStats::from_rows(&a).unwrap();
            let sb = FeatureStats::from_rows(&b).unwrap();
            let ab = fid(&sa, &sb).unwrap();
            let ba = fid(&sb, &sa).unwrap();
            assert_relative_eq!(ab, ba, max_relative = 1e-6, epsilon = 1e-9);
            assert!(ab >= -1e-6);
        }
    }

    #[test]
    fn covariance_uses_unbiased_denominator() {
        let rows = array![[1.0f32], [3.0]];
        let s = FeatureStats::from_rows(&rows).unwrap();
        // mean 2, squared deviations 1+1 = 2, n-1 = 1 -> var 2
        assert_relative_eq!(s.cov[(0, 0)], 2.0, epsilon = 1e-9);
        assert!(s.cov.relative_eq(&s.cov.transpose(), 1e-8, 1e-8));
    }

    #[test]
    fn recall_g_equals_r_is_one() {
        let r = array![[0.0f32], [1.0], [2.0], [3.0], [4.0]];
        let cfg = RecallConfig {
            k: 1,
            tau_policy: TauPolicy::MedianRealToReal,
        };
        let v = knn_recall(&r, &r.clone(), &cfg).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn recall_far_cluster_is_zero() {
        let r = array![[0.0f32], [1.0], [2.0], [3.0]];
        let g = array![[100.0f32], [101.0], [102.0]];
        let cfg = RecallConfig {
            k: 1,
            tau_policy: TauPolicy::MedianRealToReal,
        };
        let v = knn_recall(&r, &g, &cfg).unwrap();
        assert_eq!(v, 0.0);
    }

    /// Brute-force oracle: all pairwise distances, k-th by full sort.
    fn recall_oracle(r: &Array2<f32>, g: &Array2<f32>, k: usize, policy: TauPolicy) -> f64 {
        let dist = |a: &[f32], b: &[f32]| -> f64 {
            a.iter()
                .zip(b)
                .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let kth = |point: &[f32], set: &Array2<f32>, skip: Option<usize>, k: usize| -> f64 {
            let mut ds: Vec<f64> = set
                .rows()
                .into_iter()
                .enumerate()
                .filter(|(j, _)| Some(*j) != skip)
                .map(|(_, row)| dist(point, row.as_slice().unwrap()))
                .collect();
            ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ds[k - 1]
        };
        let scored: Vec<f64> = r
            .rows()
            .into_iter()
            .map(|row| kth(row.as_slice().unwrap(), g, None, k))
            .collect();
        let mut pool: Vec<f64> = match policy {
            TauPolicy::MedianRealToReal => r
                .rows()
                .into_iter()
                .enumerate()
                .map(|(i, row)| kth(row.as_slice().unwrap(), r, Some(i), k.min(r.nrows() - 1)))
                .collect(),
            TauPolicy::MedianPooled => scored.clone(),
        };
        pool.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = pool.len();
        let tau = if n % 2 == 1 {
            pool[n / 2]
        } else {
            0.5 * (pool[n / 2 - 1] + pool[n / 2])
        };
        scored.iter().filter(|&&d| d <= tau).count() as f64 / scored.len() as f64
    }

    #[test]
    fn recall_agrees_with_bruteforce_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..20 {
            let nr = rng.gen_range(5..=50);
            let ng = rng.gen_range(12..=50);
            let r = Array2::from_shape_fn((nr, 3), |_| rng.gen_range(-2.0f32..2.0));
            let g = Array2::from_shape_fn((ng, 3), |_| rng.gen_range(-2.0f32..2.0));
            for policy in [TauPolicy::MedianRealToReal, TauPolicy::MedianPooled] {
                for k in [1usize, 3, 10] {
                    if ng <= k {
                        continue;
                    }
                    let cfg = RecallConfig {
                        k,
                        tau_policy: policy,
                    };
                    let got = knn_recall(&r, &g, &cfg).unwrap();
                    let want = recall_oracle(&r, &g, k, policy);
                    assert_eq!(got, want, "trial {trial} k {k} policy {policy:?}");
                }
            }
        }
    }

    #[test]
    fn recall_hand_instance_1d() {
        // R = {0, 1, 4, 9, 10}, G = {0.5, 6, 20}; k = 1.
        // scored: |r - nearest g| = 0.5, 0.5, 2.0, 3.0, 3.5
        // real-to-real 1-NN: 1, 1, 3, 1, 1 -> median tau = 1
        // hits: 0.5 <= 1, 0.5 <= 1 -> recall 2/5
        let r = array![[0.0f32], [1.0], [4.0], [9.0], [10.0]];
        let g = array![[0.5f32], [6.0], [20.0]];
        let cfg = RecallConfig {
            k: 1,
            tau_policy: TauPolicy::MedianRealToReal,
        };
        let v = knn_recall(&r, &g, &cfg).unwrap();
        assert_relative_eq!(v, 0.4, epsilon = 1e-12);
    }

    #[test]
    fn recall_rejects_small_g() {
        let r = array![[0.0f32], [1.0]];
        let g = array![[0.0f32], [1.0]];
        let cfg = RecallConfig {
            k: 2,
            tau_policy: TauPolicy::MedianRealToReal,
        };
        assert!(knn_recall(&r, &g, &cfg).is_err());
    }

    #[test]
    fn recall_is_isometry_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let r = Array2::from_shape_fn((12, 2), |_| rng.gen_range(-1.0f32..1.0));
        let g = Array2::from_shape_fn((15, 2), |_| rng.gen_range(-1.0f32..1.0));
        let cfg = RecallConfig {
            k: 3,
            tau_policy: TauPolicy::MedianRealToReal,
        };
        let base = knn_recall(&r, &g, &cfg).unwrap();
        // rotate by 30 degrees and translate
        let (s, c) = (30f32.to_radians().sin(), 30f32.to_radians().cos());
        let iso = |m: &Array2<f32>| {
            let mut out = m.clone();
            for mut row in out.rows_mut() {
                let (x, y) = (row[0], row[1]);
                row[0] = c * x - s * y + 5.0;
                row[1] = s * x + c * y - 2.0;
            }
            out
        };
        let moved = knn_recall(&iso(&r), &iso(&g), &cfg).unwrap();
        assert_relative_eq!(base, moved, epsilon = 1e-9);
    }

    #[test]
    fn pca_line_explains_everything() {
        let feats = array![
            [0.0f32, 0.0],
            [1.0, 2.0],
            [2.0, 4.0],
            [3.0, 6.0],
            [-1.0, -2.0]
        ];
        let p = pca_project(&feats, 2).unwrap();
        assert_relative_eq!(p.explained_variance_ratio[0], 1.0, epsilon = 1e-9);
        assert!(p.explained_variance_ratio[1].abs() < 1e-9);
    }

    #[test]
    fn pca_rejects_zero_variance() {
        let feats = Array2::from_elem((5, 3), 2.0f32);
        assert!(matches!(pca_project(&feats, 2), Err(Error::Degenerate(_))));
    }

    #[test]
    fn pca_isotropic_cloud_splits_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let feats = Array2::from_shape_fn((10_000, 2), |_| {
            rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng)
        });
        let p = pca_project(&feats, 2).unwrap();
        let (a, b) = (
            p.explained_variance_ratio[0],
            p.explained_variance_ratio[1],
        );
        assert!((a - b).abs() / a < 0.1, "ratios {a} vs {b}");
    }

    #[test]
    fn pca_preserves_distances_on_2d_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        // points spanning exactly a 2-D plane embedded in 4-D
        let mut feats = Array2::zeros((40, 4));
        for mut row in feats.rows_mut() {
            let (u, v) = (rng.gen_range(-1.0f32..1.0), rng.gen_range(-1.0f32..1.0));
            row[0] = u + v;
            row[1] = u - v;
            row[2] = 2.0 * u + 0.5 * v;
            row[3] = -v;
        }
        let p = pca_project(&feats, 2).unwrap();
        for i in 0..10 {
            for j in (i + 1)..10 {
                let orig: f64 = (0..4)
                    .map(|d| (feats[[i, d]] as f64 - feats[[j, d]] as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let proj: f64 = (0..2)
                    .map(|d| (p.coords[[i, d]] - p.coords[[j, d]]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert_relative_eq!(orig, proj, max_relative = 1e-4);
            }
        }
    }

    #[test]
    fn pca_sign_convention() {
        let feats = array![[0.0f32, 0.0], [-1.0, -2.0], [-2.0, -4.0], [1.0, 2.0]];
        let p = pca_project(&feats, 1).unwrap();
        // regardless of eigenvector orientation, coords follow the positive
        // first-loading convention: the point (1,2) projects positively
        assert!(p.coords[[3, 0]] > 0.0);
    }

    #[test]
    fn mean_pairwise_distance_hand_case() {
        let feats = array![[0.0f32], [1.0], [3.0]];
        // pairs: 1, 3, 2 -> mean 2
        assert_relative_eq!(mean_pairwise_distance(&feats).unwrap(), 2.0, epsilon = 1e-12);
    }
}
