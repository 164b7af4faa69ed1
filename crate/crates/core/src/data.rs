//! Synthetic datasets and sample-based distribution metrics.

use std::f64::consts::PI;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{pf_ode_rhs, Schedule, ScoreOracle, Solver};
use crate::error::{Error, Result};
use crate::residual::StackModel;
use crate::rng::{normal_vec, Seed};
use crate::tensor::Tensor;
use crate::training::model_score;

/// A toy data distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Isotropic Gaussian mixture; `weights` default to uniform.
    #[serde(alias = "gaussian-mixture-2d")]
    GaussianMixture {
        means: Vec<Vec<f64>>,
        variance: f64,
        #[serde(default)]
        weights: Option<Vec<f64>>,
    },
    TwoMoons {
        noise: f64,
    },
    #[serde(rename = "swiss-roll-2d")]
    SwissRoll {
        noise: f64,
    },
    /// `cells x cells` board on `[-size/2, size/2]^2`; points fill the cells
    /// with even `row + col`.
    #[serde(rename = "checkerboard-2d")]
    Checkerboard {
        cells: usize,
        size: f64,
    },
    /// 8x8 images of one of `classes` fixed stroke patterns (pixels in
    /// `{-1, 1}`), plus Gaussian pixel noise. Labels are the pattern index.
    ImageGrid {
        classes: usize,
        noise: f64,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::GaussianMixture {
            means: vec![vec![-1.5, 0.0], vec![1.5, 0.0]],
            variance: 0.2,
            weights: None,
        }
    }
}

pub const IMAGE_SIDE: usize = 8;
const IMAGE_PATTERNS: usize = 8;

fn image_pattern(k: usize, r: usize, c: usize) -> bool {
    match k {
        0 => r % 2 == 0,
        1 => c % 2 == 0,
        2 => r == c || r + c == IMAGE_SIDE - 1,
        3 => (r + c) % 2 == 0,
        4 => r == 0 || c == 0 || r == IMAGE_SIDE - 1 || c == IMAGE_SIDE - 1,
        5 => r == 3 || r == 4 || c == 3 || c == 4,
        6 => r < IMAGE_SIDE / 2,
        _ => (2..6).contains(&r) && (2..6).contains(&c),
    }
}

impl DatasetSpec {
    pub fn dim(&self) -> usize {
        match self {
            DatasetSpec::GaussianMixture { means, .. } => means.first().map_or(0, Vec::len),
            DatasetSpec::ImageGrid { .. } => IMAGE_SIDE * IMAGE_SIDE,
            _ => 2,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DatasetSpec::GaussianMixture { means, .. } => means.len(),
            DatasetSpec::TwoMoons { .. } | DatasetSpec::Checkerboard { .. } => 2,
            DatasetSpec::SwissRoll { .. } => 1,
            DatasetSpec::ImageGrid { classes, .. } => *classes,
        }
    }

    /// The exact density for mixture families.
    pub fn oracle(&self) -> Option<ScoreOracle> {
        match self {
            DatasetSpec::GaussianMixture {
                means,
                variance,
                weights,
            } => {
                let mut o = ScoreOracle::mixture(means.clone(), *variance);
                if let Some(w) = weights {
                    o.weights = w.clone();
                }
                Some(o)
            }
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("dataset: {m}")));
        match self {
            DatasetSpec::GaussianMixture { .. } => self.oracle().expect("mixture").validate(),
            DatasetSpec::TwoMoons { noise } | DatasetSpec::SwissRoll { noise } if *noise < 0.0 => {
                bad("noise must be non-negative")
            }
            DatasetSpec::Checkerboard { cells, size } if *cells == 0 || !(*size > 0.0) => {
                bad("checkerboard needs cells >= 1 and size > 0")
            }
            DatasetSpec::ImageGrid { classes, noise } if *classes == 0 || *classes > IMAGE_PATTERNS || *noise < 0.0 => {
                bad("image-grid supports 1 to 8 classes and non-negative noise")
            }
            _ => Ok(()),
        }
    }
}

/// Draws `n` points (and labels) from `spec`, deterministically in `seed`.
pub fn sample_dataset(spec: &DatasetSpec, n: usize, seed: Seed) -> Result<(Tensor, Vec<usize>)> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("sample size must be positive"));
    }
    let mut rng = seed.stream(0x6461_7461);
    if let Some(o) = spec.oracle() {
        return o.sample(n, &mut rng);
    }
    let d = spec.dim();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        match spec {
            DatasetSpec::TwoMoons { noise } => {
                let lower = rng.gen::<bool>();
                let th = rng.gen_range(0.0..PI);
                let (x, y) = if lower {
                    (1.0 - th.cos(), 0.5 - th.sin())
                } else {
                    (th.cos(), th.sin())
                };
                let e = normal_vec(&mut rng, 2);
                data.extend([x + noise * e[0], y + noise * e[1]]);
                labels.push(usize::from(lower));
            }
            DatasetSpec::SwissRoll { noise } => {
                let th = 1.5 * PI * (1.0 + 2.0 * rng.gen::<f64>());
                let e = normal_vec(&mut rng, 2);
                data.extend([th * th.cos() / 5.0 + noise * e[0], th * th.sin() / 5.0 + noise * e[1]]);
                labels.push(0);
            }
            DatasetSpec::Checkerboard { cells, size } => {
                let cell = size / *cells as f64;
                let (r, c) = loop {
                    let r = rng.gen_range(0..*cells);
                    let c = rng.gen_range(0..*cells);
                    if (r + c) % 2 == 0 {
                        break (r, c);
                    }
                };
                let x = -size / 2.0 + (c as f64 + rng.gen::<f64>()) * cell;
                let y = -size / 2.0 + (r as f64 + rng.gen::<f64>()) * cell;
                data.extend([x, y]);
                labels.push((r / 2 + c / 2) % 2);
            }
            DatasetSpec::ImageGrid { classes, noise } => {
                let k = rng.gen_range(0..*classes);
                let e = normal_vec(&mut rng, d);
                for r in 0..IMAGE_SIDE {
                    for c in 0..IMAGE_SIDE {
                        let v = if image_pattern(k, r, c) { 1.0 } else { -1.0 };
                        data.push(v + noise * e[r * IMAGE_SIDE + c]);
                    }
                }
                labels.push(k);
            }
            DatasetSpec::GaussianMixture { .. } => unreachable!("handled by the oracle"),
        }
    }
    Ok((Tensor::new(vec![n, d], data)?, labels))
}

/// Whether a 2-D point lies in an allowed checkerboard cell.
pub fn in_checkerboard(x: f64, y: f64, cells: usize, size: f64) -> bool {
    let cell = size / cells as f64;
    let c = ((x + size / 2.0) / cell).floor();
    let r = ((y + size / 2.0) / cell).floor();
    c >= 0.0 && r >= 0.0 && (c as usize) < cells && (r as usize) < cells && (r as usize + c as usize) % 2 == 0
}

/// Samples as CSV: `x0,...,x{d-1},label`.
pub fn samples_to_csv(x: &Tensor, labels: Option<&[usize]>) -> String {
    let d = x.cols();
    let mut s: String = (0..d).map(|j| format!("x{j},")).collect();
    s.push_str("label\n");
    for r in 0..x.rows() {
        for v in x.row(r) {
            s.push_str(&format!("{v:e},"));
        }
        if let Some(l) = labels {
            s.push_str(&l[r].to_string());
        }
        s.push('\n');
    }
    s
}

fn check_pair(a: &Tensor, b: &Tensor, min_rows: usize) -> Result<()> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
        return Err(Error::ShapeMismatch {
            op: "metric",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if a.rows() < min_rows || b.rows() < min_rows {
        return Err(Error::invalid(format!("metric needs at least {min_rows} rows per batch")));
    }
    Ok(())
}

/// 1-D Wasserstein-1 distance between two empirical distributions:
/// the integral of `|F_a^-1(q) - F_b^-1(q)|` over `q`.
pub fn wasserstein_1d(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        return a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut q = 0.0;
    let mut total = 0.0;
    while i < a.len() && j < b.len() {
        let qa = (i + 1) as f64 / na;
        let qb = (j + 1) as f64 / nb;
        let next = qa.min(qb);
        total += (next - q) * (a[i] - b[j]).abs();
        q = next;
        if qa <= next {
            i += 1;
        }
        if qb <= next {
            j += 1;
        }
    }
    total
}

/// Mean over `n_proj` random unit directions of the 1-D Wasserstein-1
/// distance between the projected batches.
///
/// ```
/// use nrdm::data::sliced_wasserstein;
/// use nrdm::rng::Seed;
/// use nrdm::Tensor;
///
/// let a = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
/// let b = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
/// assert_eq!(sliced_wasserstein(&a, &b, 16, Seed(0)).unwrap(), 1.0);
/// ```
pub fn sliced_wasserstein(a: &Tensor, b: &Tensor, n_proj: usize, seed: Seed) -> Result<f64> {
    check_pair(a, b, 1)?;
    if n_proj == 0 {
        return Err(Error::invalid("need at least one projection"));
    }
    let d = a.cols();
    let mut rng = seed.stream(0x7377);
    let project = |x: &Tensor, u: &[f64]| -> Vec<f64> {
        (0..x.rows()).map(|r| x.row(r).iter().zip(u).map(|(v, w)| v * w).sum()).collect()
    };
    let mut total = 0.0;
    for _ in 0..n_proj {
        let mut u = normal_vec(&mut rng, d);
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        u.iter_mut().for_each(|v| *v /= norm);
        total += wasserstein_1d(&mut project(a, &u), &mut project(b, &u));
    }
    Ok(total / n_proj as f64)
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Median pairwise Euclidean distance of the pooled rows (at most 1000
/// rows of each batch are used).
pub fn median_bandwidth(a: &Tensor, b: &Tensor) -> f64 {
    let rows: Vec<&[f64]> = (0..a.rows().min(1000))
        .map(|r| a.row(r))
        .chain((0..b.rows().min(1000)).map(|r| b.row(r)))
        .collect();
    let mut d: Vec<f64> = Vec::with_capacity(rows.len() * rows.len() / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(sq_dist(rows[i], rows[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    if *m > 0.0 {
        *m
    } else {
        1.0
    }
}

/// Unbiased MMD^2 with kernel `exp(-|x - y|^2 / (2 h^2))`, clipped at 0.
pub fn mmd_rbf(a: &Tensor, b: &Tensor, bandwidth: f64) -> Result<f64> {
    check_pair(a, b, 2)?;
    if !(bandwidth > 0.0) {
        return Err(Error::invalid(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let g = 1.0 / (2.0 * bandwidth * bandwidth);
    let k = |x: &[f64], y: &[f64]| (-g * sq_dist(x, y)).exp();
    let within = |x: &Tensor| {
        let n = x.rows();
        let mut s = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                s += k(x.row(i), x.row(j));
            }
        }
        2.0 * s / (n * (n - 1)) as f64
    };
    let mut cross = 0.0;
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            cross += k(a.row(i), b.row(j));
        }
    }
    cross /= (a.rows() * b.rows()) as f64;
    Ok((within(a) + within(b) - 2.0 * cross).max(0.0))
}

/// Mean over dimensions of `KL(p_a || p_b)` between per-dimension
/// histograms with `bins` equal bins over the pooled range. Counts get
/// `+0.5` smoothing so the divergence stays finite.
pub fn histogram_kl(a: &Tensor, b: &Tensor, bins: usize) -> Result<f64> {
    check_pair(a, b, 1)?;
    if bins == 0 {
        return Err(Error::invalid("need at least one bin"));
    }
    let d = a.cols();
    let mut total = 0.0;
    for j in 0..d {
        let col = |x: &Tensor| (0..x.rows()).map(|r| x.row(r)[j]).collect::<Vec<_>>();
        let (ca, cb) = (col(a), col(b));
        let lo = ca.iter().chain(&cb).cloned().fold(f64::INFINITY, f64::min);
        let hi = ca.iter().chain(&cb).cloned().fold(f64::NEG_INFINITY, f64::max);
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let hist = |c: &[f64]| {
            let mut h = vec![0.5; bins];
            for v in c {
                let k = (((v - lo) / width) as usize).min(bins - 1);
                h[k] += 1.0;
            }
            let s: f64 = h.iter().sum();
            h.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let (pa, pb) = (hist(&ca), hist(&cb));
        total += pa.iter().zip(&pb).map(|(p, q)| p * (p / q).ln()).sum::<f64>();
    }
    Ok((total / d as f64).max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub sliced_wasserstein: f64,
    pub mmd: f64,
    pub histogram_kl: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "sliced_wasserstein,mmd,histogram_kl,n_samples,seed";

    pub fn csv_row(&self) -> String {
        format!(
            "{:e},{:e},{:e},{},{}",
            self.sliced_wasserstein, self.mmd, self.histogram_kl, self.n_samples, self.seed
        )
    }
}

/// Rows used by the quadratic-cost MMD estimate.
pub const MMD_MAX_ROWS: usize = 2000;

/// Computes every metric between generated and reference samples.
pub fn compare_samples(generated: &Tensor, reference: &Tensor, seed: Seed) -> Result<MetricReport> {
    let sw = sliced_wasserstein(generated, reference, 128, seed.split(1))?;
    let sub = |x: &Tensor, key: u64| -> Result<Tensor> {
        if x.rows() <= MMD_MAX_ROWS {
            return Ok(x.clone());
        }
        let mut idx = sample_indices(&mut seed.split(key).rng(), x.rows(), MMD_MAX_ROWS).into_vec();
        idx.sort_unstable();
        let data = idx.iter().flat_map(|&r| x.row(r).to_vec()).collect();
        Tensor::new(vec![MMD_MAX_ROWS, x.cols()], data)
    };
    let (ga, rb) = (sub(generated, 2)?, sub(reference, 3)?);
    let mmd = mmd_rbf(&ga, &rb, median_bandwidth(&ga, &rb))?;
    let kl = histogram_kl(generated, reference, 32)?;
    Ok(MetricReport {
        sliced_wasserstein: sw,
        mmd,
        histogram_kl: kl,
        n_samples: generated.rows(),
        seed: seed.0,
    })
}

/// Which score drives the probability-flow sampler.
#[derive(Clone, Copy, Debug)]
pub enum ScoreSource<'a> {
    Model(&'a StackModel),
    /// Exact perturbed score of a mixture.
    Oracle(&'a ScoreOracle),
}

/// Sampler settings for [`generate`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub solver: Solver,
    pub steps: usize,
    /// Reverse integration stops here rather than at exactly 0.
    pub t_end: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            solver: Solver::Heun,
            steps: 200,
            t_end: 1e-3,
        }
    }
}

/// Draws `n` points from `N(0, var(1) I)` and integrates the
/// probability-flow ODE from `t = 1` back to `t_end`. Class-conditional
/// models receive labels `0, 1, ..., K-1, 0, ...` by row.
pub fn generate(
    source: ScoreSource,
    schedule: &Schedule,
    dim: usize,
    n: usize,
    sampler: &SamplerConfig,
    seed: Seed,
) -> Result<(Tensor, Option<Vec<usize>>)> {
    if n == 0 {
        return Err(Error::invalid("sample size must be positive"));
    }
    if !(0.0..1.0).contains(&sampler.t_end) {
        return Err(Error::invalid("t_end must lie in [0, 1)"));
    }
    let sd = schedule.added_variance(1.0).sqrt();
    let z1 = Tensor::new(vec![n, dim], normal_vec(&mut seed.stream(0x6e6f), n * dim))?.scale(sd);
    let labels = match source {
        ScoreSource::Model(m) if m.config().num_classes > 0 => {
            Some((0..n).map(|i| i % m.config().num_classes).collect::<Vec<_>>())
        }
        _ => None,
    };
    let score = |z: &Tensor, t: f64| -> Result<Tensor> {
        match source {
            ScoreSource::Oracle(o) => crate::dynamics::analytic_score_t(o, z, t, schedule),
            ScoreSource::Model(m) => match &labels {
                Some(l) => {
                    let f = m.forward_labeled(z, &[t], Some(l))?;
                    Ok(match m.config().output {
                        crate::residual::OutputKind::Score => f,
                        crate::residual::OutputKind::Epsilon => {
                            f.scale(-1.0 / schedule.added_variance(t).max(1e-12).sqrt())
                        }
                    })
                }
                None => model_score(m, schedule, z, t),
            },
        }
    };
    let rhs = |z: &Tensor, t: f64| pf_ode_rhs(z, t, schedule, score);
    let traj = sampler.solver.solve(rhs, &z1, 1.0, sampler.t_end, sampler.steps)?;
    Ok((traj.end().clone(), labels))
}

/// Where reference samples come from.
#[derive(Clone, Copy, Debug)]
pub enum Reference<'a> {
    Dataset(&'a DatasetSpec),
    Samples(&'a Tensor),
}

/// Generates `n` samples and compares them against `n` reference points.
pub fn eval_generated(
    source: ScoreSource,
    schedule: &Schedule,
    reference: Reference,
    n: usize,
    sampler: &SamplerConfig,
    seed: Seed,
) -> Result<(MetricReport, Tensor)> {
    if n == 0 {
        return Err(Error::invalid("sample size must be positive"));
    }
    let reference = match reference {
        Reference::Dataset(spec) => sample_dataset(spec, n, seed.split(7))?.0,
        Reference::Samples(x) => x.clone(),
    };
    let (generated, _) = generate(source, schedule, reference.cols(), n, sampler, seed.split(8))?;
    Ok((compare_samples(&generated, &reference, seed.split(9))?, generated))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(x: &[f64]) -> Tensor {
        Tensor::new(vec![x.len(), 1], x.to_vec()).unwrap()
    }

    #[test]
    fn normal_sample_mean_is_within_clt_bound() {
        let spec = DatasetSpec::GaussianMixture {
            means: vec![vec![0.0]],
            variance: 1.0,
            weights: None,
        };
        let n = 100_000;
        let (x, _) = sample_dataset(&spec, n, Seed(3)).unwrap();
        assert!(x.mean().abs() < 3.0 / (n as f64).sqrt());
        assert_eq!(sample_dataset(&spec, 10, Seed(5)).unwrap(), sample_dataset(&spec, 10, Seed(5)).unwrap());
    }

    #[test]
    fn checkerboard_points_land_in_allowed_cells() {
        let spec = DatasetSpec::Checkerboard { cells: 4, size: 4.0 };
        let (x, _) = sample_dataset(&spec, 2000, Seed(1)).unwrap();
        for r in 0..x.rows() {
            assert!(in_checkerboard(x.row(r)[0], x.row(r)[1], 4, 4.0));
        }
    }

    #[test]
    fn every_family_samples() {
        for spec in [
            DatasetSpec::TwoMoons { noise: 0.05 },
            DatasetSpec::SwissRoll { noise: 0.05 },
            DatasetSpec::ImageGrid { classes: 8, noise: 0.1 },
        ] {
            let (x, l) = sample_dataset(&spec, 50, Seed(2)).unwrap();
            assert_eq!(x.shape(), &[50, spec.dim()]);
            assert!(l.iter().all(|&k| k < spec.num_classes().max(1)));
        }
        assert!(sample_dataset(&DatasetSpec::default(), 0, Seed(0)).is_err());
    }

    #[test]
    fn sliced_wasserstein_examples() {
        let a = Tensor::new(vec![3, 2], vec![0.0, 1.0, 2.0, -1.0, 0.5, 0.5]).unwrap();
        assert_eq!(sliced_wasserstein(&a, &a, 32, Seed(0)).unwrap(), 0.0);
        let x = col(&[0.0, 1.0, 2.0, 5.0]);
        let y = col(&[3.0, 4.0, 5.0, 8.0]);
        assert!((sliced_wasserstein(&x, &y, 8, Seed(0)).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn unequal_sizes_use_quantile_coupling() {
        // {0, 1} vs {0, 0.5, 1}: quantile functions differ by 0.5 on [1/3, 1/2)
        // and by 0.5 on [1/2, 2/3)
        let w = wasserstein_1d(&mut [0.0, 1.0], &mut [0.0, 0.5, 1.0]);
        assert!((w - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn mmd_examples() {
        let a = Tensor::new(vec![2, 1], vec![0.0, 0.1]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![100.0, 100.1]).unwrap();
        // brute force with h = 1: within-batch kernel exp(-0.005) twice,
        // cross kernel ~ 0
        let want = 2.0 * (-0.005f64).exp();
        assert!((mmd_rbf(&a, &b, 1.0).unwrap() - want).abs() < 1e-12);
        assert_eq!(mmd_rbf(&a, &b, 1e12).unwrap(), 0.0);
        assert!(mmd_rbf(&col(&[1.0]), &col(&[2.0]), 1.0).is_err());
        let (x, _) = sample_dataset(&DatasetSpec::default(), 400, Seed(1)).unwrap();
        let m = mmd_rbf(&x, &x, median_bandwidth(&x, &x)).unwrap();
        assert!(m <= 2.0 / 20.0);
    }

    #[test]
    fn histogram_kl_is_zero_on_identical_batches() {
        let (x, _) = sample_dataset(&DatasetSpec::TwoMoons { noise: 0.1 }, 500, Seed(1)).unwrap();
        assert!(histogram_kl(&x, &x, 32).unwrap().abs() < 1e-12);
        let y = x.map(|v| v + 3.0);
        assert!(histogram_kl(&x, &y, 32).unwrap() > 0.5);
    }

    #[test]
    fn samples_csv_layout() {
        let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let csv = samples_to_csv(&x, Some(&[0, 1]));
        assert_eq!(csv.lines().next().unwrap(), "x0,x1,label");
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn empty_generation_is_rejected() {
        let o = ScoreOracle::standard_normal(2);
        let r = eval_generated(
            ScoreSource::Oracle(&o),
            &Schedule::default(),
            Reference::Dataset(&DatasetSpec::default()),
            0,
            &SamplerConfig::default(),
            Seed(0),
        );
        assert!(r.is_err());
    }
}
