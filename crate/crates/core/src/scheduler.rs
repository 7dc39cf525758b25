//! Training-sample schedulers.
//!
//! The Gaussian curriculum draws samples with probability
//! `P_i(t) ∝ exp(−(d_i − μ(t))² / 2σ²)` where the mean moves linearly from
//! `μ₀` to 1 over the run. Uniform random sampling and a strict
//! easy-to-hard sweep are provided as baselines.

use std::path::Path;

use log::warn;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::difficulty::DifficultyTable;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub mu0: f64,
    pub sigma: f64,
    pub total_steps: usize,
    pub batch_size: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            mu0: 0.0,
            sigma: 0.3,
            total_steps: 2000,
            batch_size: 2,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mu0) {
            return Err(Error::Config(format!("mu0 {} outside [0, 1]", self.mu0)));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!("sigma {} must be positive", self.sigma)));
        }
        if self.total_steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("total_steps and batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Curriculum mean at step `t`: `μ₀ + (t/T)(1 − μ₀)`, exactly 1 from `t = T` on.
pub fn mu_at(t: usize, cfg: &ScheduleConfig) -> f64 {
    let total = cfg.total_steps;
    if t > total {
        warn!("step {t} beyond total_steps {total}; clamping curriculum mean to 1");
        return 1.0;
    }
    if t == total {
        return 1.0;
    }
    cfg.mu0 + (t as f64 / total as f64) * (1.0 - cfg.mu0)
}

/// Normalized sampling probabilities over the dataset, all strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingDistribution {
    probs: Vec<f64>,
}

impl SamplingDistribution {
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Validation("empty distribution".into()));
        }
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|&p| !(p > 0.0)) || (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Validation(format!(
                "probabilities must be positive and sum to 1 (sum {sum})"
            )));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn min_prob(&self) -> f64 {
        self.probs.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Gaussian kernel over difficulties, normalized in log space.
pub fn sampling_distribution(table: &DifficultyTable, mu: f64, sigma: f64) -> Result<SamplingDistribution> {
    gaussian_probs(table.scores(), mu, sigma)
}

pub(crate) fn gaussian_probs(difficulties: &[f64], mu: f64, sigma: f64) -> Result<SamplingDistribution> {
    if difficulties.is_empty() {
        return Err(Error::Validation("difficulty table is empty".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::Validation(format!("sigma {sigma} must be positive")));
    }
    let two_var = 2.0 * sigma * sigma;
    let log_w: Vec<f64> = difficulties
        .iter()
        .map(|d| -(d - mu) * (d - mu) / two_var)
        .collect();
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // Underflowed weights are lifted to the smallest positive double so every
    // sample keeps nonzero mass.
    let w: Vec<f64> = log_w
        .iter()
        .map(|l| (l - max).exp().max(f64::MIN_POSITIVE))
        .collect();
    let z: f64 = w.iter().sum();
    Ok(SamplingDistribution {
        probs: w.into_iter().map(|x| x / z).collect(),
    })
}

/// `k` independent draws with replacement.
pub fn sample_batch<R: Rng + ?Sized>(dist: &SamplingDistribution, k: usize, rng: &mut R) -> Vec<usize> {
    let index = WeightedIndex::new(dist.probs()).expect("distribution is positive and finite");
    (0..k).map(|_| index.sample(rng)).collect()
}

/// Dataset indices sorted by ascending difficulty, ties by ascending id.
pub fn naive_cl_order(table: &DifficultyTable) -> Vec<usize> {
    let mut order: Vec<usize> = (0..table.len()).collect();
    order.sort_by(|&a, &b| {
        let (ia, da) = table.get(a);
        let (ib, db) = table.get(b);
        da.total_cmp(&db).then(ia.cmp(&ib))
    });
    order
}

/// Window `t` (1-based) of `k` consecutive entries of the easy-to-hard order,
/// wrapping around the dataset.
pub fn naive_cl_batch(table: &DifficultyTable, t: usize, k: usize) -> Vec<usize> {
    naive_window(&naive_cl_order(table), t, k)
}

fn naive_window(order: &[usize], t: usize, k: usize) -> Vec<usize> {
    let n = order.len();
    let start = t.saturating_sub(1) * k;
    (0..k).map(|j| order[(start + j) % n]).collect()
}

/// `k` uniform draws with replacement from `0..n`.
pub fn random_batch<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    (0..k).map(|_| rng.random_range(0..n)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Random,
    NaiveCl,
    SaGcs,
}

impl SamplerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplerKind::Random => "random",
            SamplerKind::NaiveCl => "naive_cl",
            SamplerKind::SaGcs => "sa_gcs",
        }
    }
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What one training step drew.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDraw {
    pub step: usize,
    /// Curriculum mean, Gaussian sampler only.
    pub mu: Option<f64>,
    /// Smallest sampling probability, Gaussian sampler only.
    pub min_prob: Option<f64>,
    /// Indices into the difficulty table.
    pub indices: Vec<usize>,
}

/// A sampler bound to a dataset's difficulty table.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    kind: SamplerKind,
    schedule: ScheduleConfig,
    table: DifficultyTable,
    order: Vec<usize>,
}

impl BatchSampler {
    pub fn new(kind: SamplerKind, schedule: ScheduleConfig, table: DifficultyTable) -> Result<Self> {
        schedule.validate()?;
        if table.is_empty() {
            return Err(Error::Validation("difficulty table is empty".into()));
        }
        let order = naive_cl_order(&table);
        Ok(Self {
            kind,
            schedule,
            table,
            order,
        })
    }

    pub fn table(&self) -> &DifficultyTable {
        &self.table
    }

    /// Draws the batch for 1-based step `t`.
    pub fn draw<R: Rng + ?Sized>(&self, t: usize, rng: &mut R) -> Result<StepDraw> {
        let k = self.schedule.batch_size;
        Ok(match self.kind {
            SamplerKind::Random => StepDraw {
                step: t,
                mu: None,
                min_prob: None,
                indices: random_batch(self.table.len(), k, rng),
            },
            SamplerKind::NaiveCl => StepDraw {
                step: t,
                mu: None,
                min_prob: None,
                indices: naive_window(&self.order, t, k),
            },
            SamplerKind::SaGcs => {
                let mu = mu_at(t, &self.schedule);
                let dist = sampling_distribution(&self.table, mu, self.schedule.sigma)?;
                StepDraw {
                    step: t,
                    mu: Some(mu),
                    min_prob: Some(dist.min_prob()),
                    indices: sample_batch(&dist, k, rng),
                }
            }
        })
    }
}

/// One row of the sampling audit CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub step: usize,
    pub mu: Option<f64>,
    pub min_prob: Option<f64>,
    /// Sampled instance ids, `;`-separated.
    pub ids: String,
    /// Difficulties of the sampled instances, `;`-separated.
    pub difficulties: String,
}

impl AuditRow {
    pub fn from_draw(draw: &StepDraw, table: &DifficultyTable) -> Self {
        let join = |f: &dyn Fn(usize) -> String| {
            draw.indices.iter().map(|&i| f(i)).collect::<Vec<_>>().join(";")
        };
        AuditRow {
            step: draw.step,
            mu: draw.mu,
            min_prob: draw.min_prob,
            ids: join(&|i| table.get(i).0.to_string()),
            difficulties: join(&|i| table.get(i).1.to_string()),
        }
    }

    pub fn id_list(&self) -> Result<Vec<u64>> {
        split_field(&self.ids)
    }

    pub fn difficulty_list(&self) -> Result<Vec<f64>> {
        split_field(&self.difficulties)
    }
}

fn split_field<T: std::str::FromStr>(s: &str) -> Result<Vec<T>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|x| {
            x.parse()
                .map_err(|_| Error::Validation(format!("malformed audit field {s:?}")))
        })
        .collect()
}

pub fn write_audit(rows: &[AuditRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_audit(path: &Path) -> Result<Vec<AuditRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<AuditRow>, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table(ds: &[f64]) -> DifficultyTable {
        DifficultyTable::new(ds.iter().enumerate().map(|(i, &d)| (i as u64, d)).collect()).unwrap()
    }

    #[test]
    fn mu_endpoints_and_midpoint() {
        let cfg = ScheduleConfig { mu0: 0.3, ..Default::default() };
        assert_eq!(mu_at(0, &cfg), 0.3);
        assert_eq!(mu_at(2000, &cfg), 1.0);
        assert_eq!(mu_at(2500, &cfg), 1.0);
        let cfg = ScheduleConfig::default();
        assert_eq!(mu_at(1000, &cfg), 0.5);
    }

    #[test]
    fn uniform_when_all_equal() {
        let d = sampling_distribution(&table(&[0.4; 5]), 0.1, 0.3).unwrap();
        for &p in d.probs() {
            assert_abs_diff_eq!(p, 0.2, epsilon = 1e-15);
        }
    }

    #[test]
    fn two_point_example() {
        let d = sampling_distribution(&table(&[0.2, 0.8]), 0.2, 0.3).unwrap();
        let e2 = (-2.0f64).exp();
        assert_abs_diff_eq!(d.probs()[0], 1.0 / (1.0 + e2), epsilon = 1e-15);
        assert_abs_diff_eq!(d.probs()[0], 0.88080, epsilon = 1e-5);
        assert_abs_diff_eq!(d.probs()[1], 0.11920, epsilon = 1e-5);
    }

    #[test]
    fn symmetric_pair() {
        for delta in [0.0, 0.05, 0.3, 0.45] {
            let d = sampling_distribution(&table(&[0.5 - delta, 0.5 + delta]), 0.5, 0.2).unwrap();
            assert_abs_diff_eq!(d.probs()[0], 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn tiny_sigma_stays_positive() {
        let d = sampling_distribution(&table(&[0.0, 1.0]), 0.0, 1e-4).unwrap();
        assert!(d.probs().iter().all(|&p| p > 0.0));
        assert_abs_diff_eq!(d.probs().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_table_is_error() {
        assert!(gaussian_probs(&[], 0.5, 0.3).is_err());
    }

    #[test]
    fn degenerate_batch() {
        let d = SamplingDistribution::from_probs(vec![1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_batch(&d, 3, &mut rng), vec![0, 0, 0]);
        assert_eq!(random_batch(1, 4, &mut rng), vec![0, 0, 0, 0]);
    }

    #[test]
    fn batches_reproducible() {
        let d = sampling_distribution(&table(&[0.1, 0.5, 0.9]), 0.3, 0.3).unwrap();
        let a = sample_batch(&d, 20, &mut ChaCha8Rng::seed_from_u64(5));
        let b = sample_batch(&d, 20, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        let a = random_batch(10, 20, &mut ChaCha8Rng::seed_from_u64(5));
        let b = random_batch(10, 20, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn weighted_frequency() {
        let d = sampling_distribution(&table(&[0.2, 0.8]), 0.2, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws = sample_batch(&d, 100_000, &mut rng);
        let f0 = draws.iter().filter(|&&i| i == 0).count() as f64 / 1e5;
        assert!((f0 - 0.8808).abs() < 0.01, "{f0}");
    }

    #[test]
    fn uniform_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let draws = random_batch(10, 100_000, &mut rng);
        for i in 0..10 {
            let f = draws.iter().filter(|&&x| x == i).count() as f64 / 1e5;
            assert!((f - 0.1).abs() < 0.01);
        }
    }

    #[test]
    fn naive_curriculum_windows() {
        let t = table(&[0.9, 0.1, 0.5]);
        assert_eq!(naive_cl_batch(&t, 1, 2), vec![1, 2]);
        assert_eq!(naive_cl_batch(&t, 2, 2), vec![0, 1]);
        let t = DifficultyTable::new(vec![(7, 0.5), (3, 0.5), (5, 0.5)]).unwrap();
        assert_eq!(naive_cl_batch(&t, 1, 3), vec![1, 2, 0]);
    }

    #[test]
    fn audit_roundtrip() {
        let t = table(&[0.25, 0.75]);
        let draw = StepDraw { step: 3, mu: Some(0.5), min_prob: Some(0.4), indices: vec![1, 0, 1] };
        let rows = vec![
            AuditRow::from_draw(&draw, &t),
            AuditRow::from_draw(&StepDraw { step: 4, mu: None, min_prob: None, indices: vec![0] }, &t),
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("audit.csv");
        write_audit(&rows, &p).unwrap();
        let back = read_audit(&p).unwrap();
        assert_eq!(back, rows);
        assert_eq!(back[0].id_list().unwrap(), vec![1, 0, 1]);
        assert_eq!(back[0].difficulty_list().unwrap(), vec![0.75, 0.25, 0.75]);
    }

    #[test]
    fn sampler_dispatch() {
        let t = table(&[0.9, 0.1, 0.5]);
        let cfg = ScheduleConfig { total_steps: 10, batch_size: 2, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let naive = BatchSampler::new(SamplerKind::NaiveCl, cfg.clone(), t.clone()).unwrap();
        assert_eq!(naive.draw(1, &mut rng).unwrap().indices, vec![1, 2]);
        let gcs = BatchSampler::new(SamplerKind::SaGcs, cfg, t).unwrap();
        let d = gcs.draw(5, &mut rng).unwrap();
        assert_eq!(d.mu, Some(0.5));
        assert!(d.min_prob.unwrap() > 0.0);
    }

    proptest! {
        #[test]
        fn distribution_normalized_and_positive(
            ds in proptest::collection::vec(0.0f64..=1.0, 1..60),
            t in 0usize..=2000,
            sigma in 0.01f64..1.0,
        ) {
            let cfg = ScheduleConfig { sigma, ..Default::default() };
            let d = sampling_distribution(&table(&ds), mu_at(t, &cfg), sigma).unwrap();
            prop_assert!(d.min_prob() > 0.0);
            prop_assert!((d.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn argmax_drifts_toward_hard(t1 in 0usize..2000, dt in 0usize..2000) {
            let cfg = ScheduleConfig::default();
            let grid: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
            let tab = table(&grid);
            let argmax = |t: usize| {
                let d = sampling_distribution(&tab, mu_at(t, &cfg), cfg.sigma).unwrap();
                d.probs().iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0
            };
            let t2 = (t1 + dt).min(2000);
            prop_assert!(argmax(t1) <= argmax(t2));
        }

        #[test]
        fn narrower_sigma_concentrates(
            ds in proptest::collection::vec(0.0f64..=1.0, 2..40),
            mu in 0.0f64..=1.0,
            s1 in 0.02f64..1.0,
            shrink in 0.1f64..1.0,
        ) {
            let tab = table(&ds);
            let nearest = (0..ds.len())
                .min_by(|&a, &b| (ds[a] - mu).abs().total_cmp(&(ds[b] - mu).abs()))
                .unwrap();
            let wide = sampling_distribution(&tab, mu, s1).unwrap();
            let narrow = sampling_distribution(&tab, mu, s1 * shrink).unwrap();
            prop_assert!(narrow.probs()[nearest] >= wide.probs()[nearest] - 1e-12);
        }
    }
}
