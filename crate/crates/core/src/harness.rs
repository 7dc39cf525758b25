//! Experiment orchestration: configuration, dataset persistence, the curriculum
//! training loop, periodic evaluation, and curve and report emission.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionParams;
use crate::difficulty::{score_dataset, DifficultyTable, ScoringConfig};
use crate::error::{Error, Result};
use crate::evalnav::{metric_report, run_episode, EpisodeLog, EvalConfig, MetricReport};
use crate::navsim::{generate_dataset, render_semantic_map, reset, GenConfig, NavInstance};
use crate::scheduler::{write_audit, AuditRow, BatchSampler, SamplerKind, ScheduleConfig};
use crate::trainer::{
    featurize, train_on_instance, CellFeatures, GrpoConfig, PolicyConfig, PolicyParams, RewardConfig,
    FEATURE_DIM,
};

pub const DATASET_SCHEMA: u64 = 1;
pub const SEED_ENV: &str = "SAGCS_SEED";

const SAMPLER_SALT: u64 = 0x5A4D_504C_0000_0001;
const POLICY_SALT: u64 = 0x504F_4C49_0000_0002;
const EVAL_SALT: u64 = 0x4556_414C_0000_0003;

/// Flat experiment configuration; the JSON config file mirrors these names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sampler: SamplerKind,
    pub mu0: f64,
    pub sigma: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub map_rows: usize,
    pub map_cols: usize,
    pub cell_size: f64,
    pub distractor_min: usize,
    pub distractor_max: usize,
    pub landmark_min: usize,
    pub landmark_max: usize,
    pub ambiguity_min: f64,
    pub ambiguity_max: f64,
    /// Cells per attention patch used for difficulty scoring.
    pub patch_px: usize,
    pub group_size: usize,
    pub lr: f64,
    pub kl_coef: f64,
    pub bbox_top_q: usize,
    pub field_dropout: f64,
    pub eval_every: usize,
    /// Seed of the held-out split; must differ from `seed`.
    pub eval_split_seed: u64,
    pub max_steps: usize,
    pub lookahead_k: usize,
    pub greedy_eval: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let gen = GenConfig::default();
        let sched = ScheduleConfig::default();
        let eval = EvalConfig::default();
        Self {
            sampler: SamplerKind::SaGcs,
            mu0: sched.mu0,
            sigma: sched.sigma,
            total_steps: sched.total_steps,
            batch_size: sched.batch_size,
            // One ascending pass of Naive CL consumes exactly T * k instances.
            n_train: sched.total_steps * sched.batch_size,
            n_eval: 100,
            map_rows: gen.map_cells.0,
            map_cols: gen.map_cells.1,
            cell_size: gen.cell_size,
            distractor_min: gen.distractor_count_range.0,
            distractor_max: gen.distractor_count_range.1,
            landmark_min: gen.landmark_count_range.0,
            landmark_max: gen.landmark_count_range.1,
            // Training runs skip near-trivial scenes; the generator default keeps [0, 1].
            ambiguity_min: 0.1,
            ambiguity_max: gen.ambiguity_level_range.1,
            patch_px: 1,
            group_size: GrpoConfig::default().group_size,
            lr: 0.003,
            kl_coef: 0.0,
            bbox_top_q: 1,
            field_dropout: 0.0,
            eval_every: 100,
            eval_split_seed: 1_000_003,
            max_steps: eval.max_steps,
            lookahead_k: eval.lookahead_k,
            greedy_eval: false,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Replaces `seed` with the parsed override value, if any.
    pub fn with_seed_override(mut self, value: Option<&str>) -> Result<Self> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(self)
    }

    /// Applies the `SAGCS_SEED` environment override.
    pub fn with_env_overrides(self) -> Result<Self> {
        let value = std::env::var(SEED_ENV).ok();
        self.with_seed_override(value.as_deref())
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            mu0: self.mu0,
            sigma: self.sigma,
            total_steps: self.total_steps,
            batch_size: self.batch_size,
        }
    }

    fn gen(&self, n: usize, seed: u64) -> GenConfig {
        GenConfig {
            n_instances: n,
            map_cells: (self.map_rows, self.map_cols),
            cell_size: self.cell_size,
            distractor_count_range: (self.distractor_min, self.distractor_max),
            landmark_count_range: (self.landmark_min, self.landmark_max),
            ambiguity_level_range: (self.ambiguity_min, self.ambiguity_max),
            seed,
        }
    }

    pub fn train_gen(&self) -> GenConfig {
        self.gen(self.n_train, self.seed)
    }

    /// Held-out split: disjoint seed, same ambiguity distribution.
    pub fn eval_gen(&self) -> GenConfig {
        self.gen(self.n_eval, self.eval_split_seed)
    }

    pub fn scoring(&self) -> ScoringConfig {
        ScoringConfig {
            attention: AttentionParams {
                noise_seed: self.seed,
                ..Default::default()
            },
            patch_px: self.patch_px,
            ..Default::default()
        }
    }

    pub fn grpo(&self) -> GrpoConfig {
        GrpoConfig {
            group_size: self.group_size,
            kl_coef: self.kl_coef,
            ..Default::default()
        }
    }

    pub fn policy(&self) -> PolicyConfig {
        PolicyConfig {
            bbox_top_q: self.bbox_top_q,
            field_dropout: self.field_dropout,
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            max_steps: self.max_steps,
            lookahead_k: self.lookahead_k,
            greedy: self.greedy_eval,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        self.schedule().validate()?;
        self.train_gen().validate()?;
        if self.n_train == 0 || self.n_eval == 0 {
            return err("n_train and n_eval must be at least 1".into());
        }
        if self.eval_every == 0 {
            return err("eval_every must be at least 1".into());
        }
        if self.eval_split_seed == self.seed {
            return err(format!("eval_split_seed equals seed ({})", self.seed));
        }
        if self.group_size < 2 {
            return err(format!("group_size {} < 2", self.group_size));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return err(format!("lr {} must be positive", self.lr));
        }
        if !(self.kl_coef >= 0.0) {
            return err(format!("kl_coef {} must be non-negative", self.kl_coef));
        }
        if !(0.0..=1.0).contains(&self.field_dropout) {
            return err(format!("field_dropout {} outside [0, 1]", self.field_dropout));
        }
        if self.max_steps == 0 || self.lookahead_k == 0 || self.bbox_top_q == 0 {
            return err("max_steps, lookahead_k and bbox_top_q must be at least 1".into());
        }
        if self.patch_px == 0 || !self.map_rows.is_multiple_of(self.patch_px) || !self.map_cols.is_multiple_of(self.patch_px) {
            return err(format!("patch_px {} must tile the map", self.patch_px));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct RecordOut<'a> {
    schema: u64,
    #[serde(flatten)]
    instance: &'a NavInstance,
}

#[derive(Deserialize)]
struct RecordIn {
    schema: u64,
    #[serde(flatten)]
    instance: NavInstance,
}

/// Writes one `{"schema":1, ...instance}` JSON object per line.
pub fn save_dataset(instances: &[NavInstance], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for instance in instances {
        serde_json::to_writer(&mut out, &RecordOut { schema: DATASET_SCHEMA, instance })?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Vec<NavInstance>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let schema = value
            .get("schema")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| parse_err("missing integer \"schema\" field".into()))?;
        if schema != DATASET_SCHEMA {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                line: i + 1,
                found: schema,
                expected: DATASET_SCHEMA,
            });
        }
        let record: RecordIn = serde_json::from_value(value).map_err(|e| parse_err(e.to_string()))?;
        debug_assert_eq!(record.schema, DATASET_SCHEMA);
        record.instance.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(record.instance);
    }
    Ok(out)
}

/// Features of every instance at its initial pose.
pub fn featurize_all(instances: &[NavInstance]) -> Result<Vec<CellFeatures>> {
    instances
        .iter()
        .map(|inst| featurize(inst, &render_semantic_map(inst, &reset(inst))))
        .collect()
}

/// Datasets, difficulties and features shared by every sampler of one seed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Vec<NavInstance>,
    pub eval: Vec<NavInstance>,
    pub table: DifficultyTable,
    pub train_features: Vec<CellFeatures>,
    pub eval_features: Vec<CellFeatures>,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let train = generate_dataset(&cfg.train_gen())?;
    let eval = generate_dataset(&cfg.eval_gen())?;
    let table = score_dataset(&train, &cfg.scoring())?;
    Ok(Prepared {
        train_features: featurize_all(&train)?,
        eval_features: featurize_all(&eval)?,
        train,
        eval,
        table,
    })
}

/// Runs every evaluation episode, drawing goal samples from per-instance
/// streams so repeated evaluations share their random numbers.
pub fn evaluate_episodes(
    params: &PolicyParams,
    instances: &[NavInstance],
    features: &[CellFeatures],
    config: &EvalConfig,
    seed: u64,
) -> Result<Vec<EpisodeLog>> {
    if instances.is_empty() {
        return Err(Error::Validation("evaluation split is empty".into()));
    }
    if instances.len() != features.len() {
        return Err(Error::Validation("features do not match the evaluation split".into()));
    }
    instances
        .iter()
        .zip(features)
        .map(|(inst, f)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ EVAL_SALT);
            rng.set_stream(inst.id);
            run_episode(params, inst, f, config, &mut rng)
        })
        .collect()
}

pub fn evaluate(
    params: &PolicyParams,
    instances: &[NavInstance],
    features: &[CellFeatures],
    config: &EvalConfig,
    seed: u64,
) -> Result<MetricReport> {
    let logs = evaluate_episodes(params, instances, features, config, seed)?;
    metric_report(&logs, config.success_threshold)
}

/// One row of the curves CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub ne: f64,
    pub sr: f64,
    pub osr: f64,
    pub spl: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub metrics: MetricReport,
}

impl From<&EvalPoint> for CurvePoint {
    fn from(p: &EvalPoint) -> Self {
        CurvePoint {
            step: p.step,
            ne: p.metrics.ne,
            sr: p.metrics.sr,
            osr: p.metrics.osr,
            spl: p.metrics.spl,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub sampler: SamplerKind,
    pub seed: u64,
    pub total_steps: usize,
    pub evals: Vec<EvalPoint>,
    #[serde(rename = "final")]
    pub final_metrics: MetricReport,
    pub audit_path: Option<PathBuf>,
    /// Not serialized, so identical runs produce identical files.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl RunReport {
    pub fn curve(&self) -> Vec<CurvePoint> {
        self.evals.iter().map(CurvePoint::from).collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// One per-instance policy update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub sampler: SamplerKind,
    pub instance_id: u64,
    pub mean_reward: f64,
    pub max_reward: f64,
    pub advantage_std: f64,
    pub param_norm: f64,
}

/// Everything a training run produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub audit: Vec<AuditRow>,
    pub train_log: Vec<TrainLogRow>,
    pub params: PolicyParams,
}

impl RunOutput {
    /// Writes run.json, curves.csv, audit.csv, train_log.csv and params.json.
    pub fn write_to(&mut self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let audit_path = dir.join("audit.csv");
        write_audit(&self.audit, &audit_path)?;
        self.report.audit_path = Some(PathBuf::from("audit.csv"));
        self.report.write_json(&dir.join("run.json"))?;
        emit_curves(&self.report, &dir.join("curves.csv"))?;
        write_csv(&self.train_log, &dir.join("train_log.csv"))?;
        let params = serde_json::to_string_pretty(&self.params)?;
        let p = dir.join("params.json");
        fs::write(&p, params + "\n").map_err(|e| Error::io(&p, e))
    }
}

fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn run_experiment(cfg: &RunConfig) -> Result<RunOutput> {
    let prepared = prepare(cfg)?;
    run_prepared(cfg, &prepared)
}

/// The training loop over already prepared data.
pub fn run_prepared(cfg: &RunConfig, data: &Prepared) -> Result<RunOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let sampler = BatchSampler::new(cfg.sampler, cfg.schedule(), data.table.clone())?;
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SAMPLER_SALT);
    let mut policy_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ POLICY_SALT);
    let (grpo, policy, rewards, eval_cfg) = (cfg.grpo(), cfg.policy(), RewardConfig::default(), cfg.eval());

    let mut params = PolicyParams::initial(FEATURE_DIM);
    let mut evals = Vec::new();
    let mut audit = Vec::with_capacity(cfg.total_steps);
    let mut train_log = Vec::with_capacity(cfg.total_steps * cfg.batch_size);
    let eval_at = |params: &PolicyParams, step: usize| -> Result<EvalPoint> {
        let metrics = evaluate(params, &data.eval, &data.eval_features, &eval_cfg, cfg.seed)?;
        debug!("{} step {step}: sr {:.1} ne {:.1}", cfg.sampler, metrics.sr, metrics.ne);
        Ok(EvalPoint { step, metrics })
    };
    evals.push(eval_at(&params, 0)?);

    for t in 1..=cfg.total_steps {
        let draw = sampler.draw(t, &mut sample_rng)?;
        audit.push(AuditRow::from_draw(&draw, &data.table));
        for &i in &draw.indices {
            let (next, stats) = train_on_instance(
                &params,
                &data.train[i],
                &data.train_features[i],
                &grpo,
                &policy,
                &rewards,
                cfg.lr,
                &mut policy_rng,
            )?;
            params = next;
            train_log.push(TrainLogRow {
                step: t,
                sampler: cfg.sampler,
                instance_id: data.train[i].id,
                mean_reward: stats.mean_reward,
                max_reward: stats.max_reward,
                advantage_std: stats.advantage_std,
                param_norm: stats.param_norm,
            });
        }
        if t % cfg.eval_every == 0 || t == cfg.total_steps {
            evals.push(eval_at(&params, t)?);
        }
    }

    let final_metrics = evals.last().expect("step 0 is always evaluated").metrics;
    let wall = start.elapsed().as_secs_f64();
    info!(
        "{} seed {}: final sr {:.1} after {} steps ({wall:.1}s)",
        cfg.sampler, cfg.seed, final_metrics.sr, cfg.total_steps
    );
    Ok(RunOutput {
        report: RunReport {
            sampler: cfg.sampler,
            seed: cfg.seed,
            total_steps: cfg.total_steps,
            evals,
            final_metrics,
            audit_path: None,
            wall_clock_seconds: wall,
        },
        audit,
        train_log,
        params,
    })
}

/// Writes the step-indexed metric curve; rewriting yields identical bytes.
pub fn emit_curves(report: &RunReport, path: &Path) -> Result<()> {
    if report.evals.is_empty() {
        return Err(Error::Validation("report has no evaluation points".into()));
    }
    write_csv(&report.curve(), path)
}

pub fn read_curves(path: &Path) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Mean SR over training: trapezoidal area under the SR curve divided by its step span.
pub fn sr_auc(curve: &[CurvePoint]) -> f64 {
    match curve {
        [] => 0.0,
        [only] => only.sr,
        [first, .., last] => {
            let area: f64 = curve
                .windows(2)
                .map(|w| 0.5 * (w[0].sr + w[1].sr) * (w[1].step - w[0].step) as f64)
                .sum();
            area / (last.step - first.step) as f64
        }
    }
}

/// First evaluated step whose SR reaches 90% of the final SR.
pub fn steps_to_90(curve: &[CurvePoint]) -> usize {
    let Some(last) = curve.last() else { return 0 };
    let goal = 0.9 * last.sr;
    curve.iter().find(|p| p.sr >= goal).map_or(last.step, |p| p.step)
}

/// Seed-averaged statistics of one sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSummary {
    pub sampler: SamplerKind,
    pub runs: usize,
    pub auc_sr: f64,
    pub final_sr: f64,
    pub final_spl: f64,
    pub steps_to_90: f64,
}

pub fn summarize(reports: &[RunReport]) -> Vec<SamplerSummary> {
    [SamplerKind::Random, SamplerKind::NaiveCl, SamplerKind::SaGcs]
        .into_iter()
        .filter_map(|kind| {
            let runs: Vec<&RunReport> = reports.iter().filter(|r| r.sampler == kind).collect();
            if runs.is_empty() {
                return None;
            }
            let n = runs.len() as f64;
            let mean = |f: &dyn Fn(&RunReport) -> f64| runs.iter().map(|r| f(r)).sum::<f64>() / n;
            Some(SamplerSummary {
                sampler: kind,
                runs: runs.len(),
                auc_sr: mean(&|r| sr_auc(&r.curve())),
                final_sr: mean(&|r| r.final_metrics.sr),
                final_spl: mean(&|r| r.final_metrics.spl),
                steps_to_90: mean(&|r| steps_to_90(&r.curve()) as f64),
            })
        })
        .collect()
}

pub fn write_summary(rows: &[SamplerSummary], path: &Path) -> Result<()> {
    write_csv(rows, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::read_audit;

    fn small() -> RunConfig {
        RunConfig {
            n_train: 20,
            n_eval: 6,
            total_steps: 30,
            eval_every: 10,
            ..Default::default()
        }
    }

    #[test]
    fn config_round_trip_and_rejects_unknown() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
        let partial: RunConfig = serde_json::from_str(r#"{"sampler":"naive_cl","seed":4}"#).unwrap();
        assert_eq!(partial.sampler, SamplerKind::NaiveCl);
        assert_eq!(partial.total_steps, 2000);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sigmaa":0.2}"#).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(RunConfig::default().validate().is_ok());
        for bad in [
            RunConfig { eval_every: 0, ..Default::default() },
            RunConfig { group_size: 1, ..Default::default() },
            RunConfig { sigma: 0.0, ..Default::default() },
            RunConfig { seed: 7, eval_split_seed: 7, ..Default::default() },
            RunConfig { patch_px: 5, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn seed_override() {
        let cfg = RunConfig::default().with_seed_override(Some(" 42 ")).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(RunConfig::default().with_seed_override(None).unwrap().seed, 0);
        assert!(RunConfig::default().with_seed_override(Some("x")).is_err());
    }

    #[test]
    fn single_step_single_update() {
        let cfg = RunConfig { total_steps: 1, batch_size: 1, group_size: 2, ..small() };
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.train_log.len(), 1);
        assert_eq!(out.audit.len(), 1);
        assert_eq!(out.audit[0].id_list().unwrap().len(), 1);
        assert_eq!(out.params.version, 1);
        let steps: Vec<usize> = out.report.evals.iter().map(|e| e.step).collect();
        assert_eq!(steps, vec![0, 1]);
    }

    #[test]
    fn eval_points_and_audit_totals() {
        let cfg = RunConfig { total_steps: 25, ..small() };
        let out = run_experiment(&cfg).unwrap();
        let steps: Vec<usize> = out.report.evals.iter().map(|e| e.step).collect();
        assert_eq!(steps, vec![0, 10, 20, 25]);
        assert_eq!(out.report.final_metrics, out.report.evals.last().unwrap().metrics);
        let drawn: usize = out.audit.iter().map(|r| r.id_list().unwrap().len()).sum();
        assert_eq!(drawn, 25 * cfg.batch_size);
    }

    #[test]
    fn runs_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        for name in ["a", "b"] {
            run_experiment(&cfg).unwrap().write_to(&dir.path().join(name)).unwrap();
        }
        for file in ["run.json", "curves.csv", "audit.csv", "train_log.csv", "params.json"] {
            let a = fs::read(dir.path().join("a").join(file)).unwrap();
            let b = fs::read(dir.path().join("b").join(file)).unwrap();
            assert_eq!(a, b, "{file}");
        }
        let audit = read_audit(&dir.path().join("a/audit.csv")).unwrap();
        assert_eq!(audit.len(), cfg.total_steps);
    }

    #[test]
    fn sampler_isolation() {
        let a = prepare(&small()).unwrap();
        let b = prepare(&RunConfig { sampler: SamplerKind::Random, ..small() }).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.eval, b.eval);
        assert_eq!(a.table, b.table);
        assert!(a.train.iter().zip(&a.eval).any(|(x, y)| x != y));
    }

    #[test]
    fn curves_round_trip_and_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let m = |sr| MetricReport { ne: 12.5, sr, osr: 60.0, spl: 20.0 / 3.0, n: 10 };
        let report = RunReport {
            sampler: SamplerKind::SaGcs,
            seed: 0,
            total_steps: 100,
            evals: vec![EvalPoint { step: 0, metrics: m(10.0) }, EvalPoint { step: 100, metrics: m(40.0) }],
            final_metrics: m(40.0),
            audit_path: None,
            wall_clock_seconds: 1.0,
        };
        let path = dir.path().join("curves.csv");
        emit_curves(&report, &path).unwrap();
        let first = fs::read(&path).unwrap();
        emit_curves(&report, &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
        assert!(String::from_utf8(first).unwrap().starts_with("step,ne,sr,osr,spl\n"));
        assert_eq!(read_curves(&path).unwrap(), report.curve());
        let empty = RunReport { evals: vec![], ..report };
        assert!(emit_curves(&empty, &path).is_err());
        assert!(emit_curves(&empty, &dir.path().join("missing/dir/c.csv")).is_err());
    }

    #[test]
    fn dataset_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_dataset(&GenConfig { n_instances: 4, ..Default::default() }).unwrap();
        let path = dir.path().join("d.jsonl");
        save_dataset(&data, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), data);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.lines().all(|l| l.starts_with("{\"schema\":1,")));

        let lines: Vec<&str> = text.lines().collect();
        let truncated = format!("{}\n{}\n{}\n", lines[0], lines[1], &lines[2][..lines[2].len() / 2]);
        fs::write(&path, truncated).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Parse { line: 3, .. })));

        fs::write(&path, lines[0].replacen("\"schema\":1", "\"schema\":2", 1)).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Schema { found: 2, line: 1, .. })));
    }

    #[test]
    fn auc_and_steps_to_90() {
        let c = |step, sr| CurvePoint { step, ne: 0.0, sr, osr: sr, spl: 0.0 };
        let curve = [c(0, 0.0), c(100, 50.0), c(200, 50.0)];
        assert_eq!(sr_auc(&curve), (25.0 * 100.0 + 50.0 * 100.0) / 200.0);
        assert_eq!(steps_to_90(&curve), 100);
        assert_eq!(steps_to_90(&[c(0, 0.0), c(10, 0.0)]), 0);
    }

    #[test]
    fn empty_eval_split_rejected() {
        let p = PolicyParams::initial(FEATURE_DIM);
        assert!(matches!(evaluate(&p, &[], &[], &EvalConfig::default(), 0), Err(Error::Validation(_))));
    }
}
