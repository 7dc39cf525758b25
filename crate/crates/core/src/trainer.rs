//! Goal-inference policy and its group-relative policy-gradient training.
//!
//! The policy is softmax-linear over map cells: `π(c) ∝ exp(f(c)·w)` with
//! hand-built per-cell features. A sampled cell is the predicted target; the
//! landmark box comes from a separate fixed-weight scorer. Each output earns a
//! goal, a reasoning and a format reward; group-standardized totals weight
//! the closed-form log-likelihood gradient.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::softmax;
use crate::error::{Error, Result};
use crate::grid::Rect;
use crate::navsim::{horizontal_distance, Environment, NavInstance, SemanticGrid, SUCCESS_THRESHOLD_M};

/// Paper-scale learning rate for the RL stage, kept for reference; the toy
/// policy here trains with a much larger step (see `RunConfig::lr`).
pub const REFERENCE_RL_LR: f64 = 1e-5;

pub const FEATURE_NAMES: [&str; 5] = [
    "landmark_distance",
    "class_match",
    "color_match",
    "local_distractors",
    "in_landmark",
];
pub const FEATURE_DIM: usize = FEATURE_NAMES.len();

/// Distances to the landmark outline are expressed in units of this many cells.
const DISTANCE_SCALE_CELLS: f64 = 8.0;
const DISTRACTOR_RADIUS_CELLS: f64 = 3.0;
const DISTRACTOR_NORM: f64 = 4.0;

/// Per-cell feature rows, cell-major (`cell * dim + feature`).
#[derive(Debug, Clone, PartialEq)]
pub struct CellFeatures {
    rows: usize,
    cols: usize,
    dim: usize,
    data: Vec<f64>,
}

impl CellFeatures {
    pub fn new(rows: usize, cols: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols * dim || dim == 0 {
            return Err(Error::Validation(format!(
                "feature tensor has {} values, expected {rows}x{cols}x{dim}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, dim, data })
    }

    pub fn n_cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn cell(&self, index: usize) -> &[f64] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        self.cell(row * self.cols + col)
    }

    fn scores(&self, weights: &[f64]) -> Vec<f64> {
        self.data
            .chunks(self.dim)
            .map(|f| f.iter().zip(weights).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `Σ_c p(c) f(c)`.
    fn expectation(&self, probs: &[f64]) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for (f, &p) in self.data.chunks(self.dim).zip(probs) {
            for (m, x) in mean.iter_mut().zip(f) {
                *m += p * x;
            }
        }
        mean
    }
}

/// Distance from a point to the boundary of `rect`, from outside or inside.
fn outline_distance(rect: &Rect, x: f64, y: f64) -> f64 {
    let (x1, y1, x2, y2) = (rect.x1 as f64, rect.y1 as f64, rect.x2 as f64, rect.y2 as f64);
    let dx = (x1 - x).max(x - x2);
    let dy = (y1 - y).max(y - y2);
    if dx <= 0.0 && dy <= 0.0 {
        -dx.max(dy)
    } else {
        dx.max(0.0).hypot(dy.max(0.0))
    }
}

/// Builds the per-cell features the policy scores.
pub fn featurize(instance: &NavInstance, map: &SemanticGrid) -> Result<CellFeatures> {
    let env = &instance.environment;
    let (rows, cols) = (env.rows(), env.cols());
    if map.classes.shape() != (rows, cols) {
        return Err(Error::Validation("semantic map does not match the environment".into()));
    }
    let desc = instance.instruction.descriptor()?;
    let landmark = instance.referenced_landmark()?.region;
    let class_code = desc.class.code();
    let color_code = desc.color.map(|c| c.code());
    let candidates: Vec<(Rect, (f64, f64))> = env
        .objects
        .iter()
        .filter(|o| o.class == desc.class)
        .map(|o| (o.bbox, o.bbox.center()))
        .collect();

    let mut data = Vec::with_capacity(rows * cols * FEATURE_DIM);
    for r in 0..rows {
        for c in 0..cols {
            let (cx, cy) = (c as f64 + 0.5, r as f64 + 0.5);
            let outline = outline_distance(&landmark, cx, cy);
            let class_match = *map.classes.get(r, c) == class_code;
            let color_match = color_code.is_some_and(|code| *map.colors.get(r, c) == code);
            let nearby = candidates
                .iter()
                .filter(|(bbox, (ox, oy))| {
                    !bbox.contains_cell(r, c) && (ox - cx).hypot(oy - cy) <= DISTRACTOR_RADIUS_CELLS
                })
                .count() as f64;
            data.extend([
                outline / DISTANCE_SCALE_CELLS,
                f64::from(u8::from(class_match)),
                f64::from(u8::from(color_match)),
                (nearby / DISTRACTOR_NORM).min(1.0),
                f64::from(u8::from(landmark.contains_cell(r, c))),
            ]);
        }
    }
    CellFeatures::new(rows, cols, FEATURE_DIM, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    /// Cell-scoring weights, one per feature.
    pub weights: Vec<f64>,
    /// Landmark-region scoring weights, one per feature.
    pub bbox_weights: Vec<f64>,
    pub version: u64,
}

impl PolicyParams {
    /// Zero cell weights (uniform policy) and a landmark-indicator box scorer.
    pub fn initial(dim: usize) -> Self {
        let mut bbox_weights = vec![0.0; dim];
        if dim == FEATURE_DIM {
            bbox_weights[0] = -1.0;
            bbox_weights[4] = 1.0;
        }
        Self {
            weights: vec![0.0; dim],
            bbox_weights,
            version: 0,
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    /// Number of best landmark-scored cells whose bounding box is proposed
    /// (cells tied with the q-th score are included).
    pub bbox_top_q: usize,
    /// Probability of dropping each of the think/answer records of an output.
    pub field_dropout: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            bbox_top_q: 1,
            field_dropout: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyForward {
    pub probs: Vec<f64>,
    pub bbox: Rect,
}

/// Softmax over `features · weights`.
pub fn cell_distribution(weights: &[f64], features: &CellFeatures) -> Result<Vec<f64>> {
    if weights.len() != features.dim() {
        return Err(Error::Validation(format!(
            "{} weights for {} features",
            weights.len(),
            features.dim()
        )));
    }
    Ok(softmax(&features.scores(weights)))
}

pub fn policy_forward(
    params: &PolicyParams,
    features: &CellFeatures,
    config: &PolicyConfig,
) -> Result<PolicyForward> {
    let probs = cell_distribution(&params.weights, features)?;
    if params.bbox_weights.len() != features.dim() {
        return Err(Error::Validation("bbox weights do not match the feature dimension".into()));
    }
    let scores = features.scores(&params.bbox_weights);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let q = config.bbox_top_q.clamp(1, order.len());
    let cutoff = scores[order[q - 1]] - 1e-12;
    let (rows, cols) = features.shape();
    let (mut x1, mut y1, mut x2, mut y2) = (cols, rows, 0, 0);
    for &i in order.iter().take_while(|&&i| scores[i] >= cutoff) {
        let (r, c) = (i / cols, i % cols);
        x1 = x1.min(c);
        y1 = y1.min(r);
        x2 = x2.max(c + 1);
        y2 = y2.max(r + 1);
    }
    Ok(PolicyForward {
        probs,
        bbox: Rect { x1, y1, x2, y2 },
    })
}

/// Reasoning record: `{"landmark_bbox": [x1, y1, x2, y2]}` in cell units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Think {
    pub landmark_bbox: [i64; 4],
}

/// Answer record: `{"target_location": [x, y]}`, the predicted cell's column and row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub target_location: [i64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutput {
    pub think: Option<Think>,
    pub answer: Option<Answer>,
    pub log_prob: f64,
}

impl PolicyOutput {
    /// Structured output for a chosen cell.
    pub fn for_cell(index: usize, cols: usize, bbox: Rect, log_prob: f64) -> Self {
        PolicyOutput {
            think: Some(Think {
                landmark_bbox: [bbox.x1 as i64, bbox.y1 as i64, bbox.x2 as i64, bbox.y2 as i64],
            }),
            answer: Some(Answer {
                target_location: [(index % cols) as i64, (index / cols) as i64],
            }),
            log_prob,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub goal: f64,
    pub reasoning: f64,
    pub format: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroupSample {
    pub outputs: Vec<PolicyOutput>,
    /// Sampled cell index of each output.
    pub cells: Vec<usize>,
    pub rewards: Vec<RewardBreakdown>,
    pub advantages: Vec<f64>,
}

/// Draws `g` independent cells from the policy.
pub fn sample_group<R: Rng + ?Sized>(
    params: &PolicyParams,
    features: &CellFeatures,
    g: usize,
    config: &PolicyConfig,
    rng: &mut R,
) -> Result<GroupSample> {
    if g < 2 {
        return Err(Error::Config(format!("group size {g} < 2")));
    }
    let fwd = policy_forward(params, features, config)?;
    let index = WeightedIndex::new(&fwd.probs)
        .map_err(|e| Error::NonFinite(format!("policy distribution: {e}")))?;
    let cols = features.shape().1;
    let mut group = GroupSample::default();
    for _ in 0..g {
        let cell = index.sample(rng);
        let mut out = PolicyOutput::for_cell(cell, cols, fwd.bbox, fwd.probs[cell].ln());
        if config.field_dropout > 0.0 {
            if rng.random::<f64>() < config.field_dropout {
                out.think = None;
            }
            if rng.random::<f64>() < config.field_dropout {
                out.answer = None;
            }
        }
        group.outputs.push(out);
        group.cells.push(cell);
    }
    Ok(group)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub success_threshold: f64,
    /// Goal reward reaches zero at `radius_factor · success_threshold`.
    pub radius_factor: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            success_threshold: SUCCESS_THRESHOLD_M,
            radius_factor: 2.0,
        }
    }
}

/// `max(0, 1 − dist / (radius_factor · threshold))` over horizontal meters.
pub fn reward_goal(predicted: [f64; 2], target: [f64; 2], config: &RewardConfig) -> f64 {
    let d = horizontal_distance(predicted, target);
    (1.0 - d / (config.radius_factor * config.success_threshold)).max(0.0)
}

/// Hard IoU of half-open cell rectangles; a missing or degenerate prediction scores 0.
pub fn reward_reasoning(pred: Option<[i64; 4]>, gt: [i64; 4]) -> Result<f64> {
    let [gx1, gy1, gx2, gy2] = gt;
    if gx1 >= gx2 || gy1 >= gy2 {
        return Err(Error::Validation(format!("degenerate ground-truth box {gt:?}")));
    }
    let Some([px1, py1, px2, py2]) = pred else {
        return Ok(0.0);
    };
    if px1 >= px2 || py1 >= py2 {
        return Ok(0.0);
    }
    let iw = (px2.min(gx2) - px1.max(gx1)).max(0);
    let ih = (py2.min(gy2) - py1.max(gy1)).max(0);
    let inter = (iw * ih) as f64;
    let union = ((px2 - px1) * (py2 - py1) + (gx2 - gx1) * (gy2 - gy1)) as f64 - inter;
    Ok(inter / union)
}

/// 1 when both records are present and well formed on a `rows × cols` grid.
pub fn reward_format(output: &PolicyOutput, rows: usize, cols: usize) -> f64 {
    let (rows, cols) = (rows as i64, cols as i64);
    let bbox_ok = output.think.is_some_and(|t| {
        let [x1, y1, x2, y2] = t.landmark_bbox;
        0 <= x1 && x1 < x2 && x2 <= cols && 0 <= y1 && y1 < y2 && y2 <= rows
    });
    let answer_ok = output.answer.is_some_and(|a| {
        let [x, y] = a.target_location;
        (0..cols).contains(&x) && (0..rows).contains(&y)
    });
    f64::from(u8::from(bbox_ok && answer_ok))
}

pub fn total_reward(goal: f64, reasoning: f64, format: f64) -> RewardBreakdown {
    RewardBreakdown {
        goal,
        reasoning,
        format,
        total: goal + reasoning + format,
    }
}

/// Rewards one output against an instance.
pub fn score_output(
    output: &PolicyOutput,
    instance: &NavInstance,
    config: &RewardConfig,
) -> Result<RewardBreakdown> {
    let env = &instance.environment;
    let format = reward_format(output, env.rows(), env.cols());
    let goal = match output.answer {
        Some(a) if format > 0.0 || in_grid(env, a.target_location) => {
            let [x, y] = a.target_location;
            reward_goal(env.cell_center(y as usize, x as usize), instance.target_position, config)
        }
        _ => 0.0,
    };
    let lm = instance.referenced_landmark()?.region;
    let gt = [lm.x1 as i64, lm.y1 as i64, lm.x2 as i64, lm.y2 as i64];
    let reasoning = reward_reasoning(output.think.map(|t| t.landmark_bbox), gt)?;
    Ok(total_reward(goal, reasoning, format))
}

fn in_grid(env: &Environment, [x, y]: [i64; 2]) -> bool {
    (0..env.cols() as i64).contains(&x) && (0..env.rows() as i64).contains(&y)
}

/// `(r − mean) / max(std, floor)` with population std; all zeros when the
/// rewards' std does not exceed the floor.
pub fn group_advantages(rewards: &[f64], std_floor: f64) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > std_floor) {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// Fills rewards and advantages of a sampled group.
pub fn score_group(
    group: &mut GroupSample,
    instance: &NavInstance,
    rewards: &RewardConfig,
    std_floor: f64,
) -> Result<()> {
    group.rewards = group
        .outputs
        .iter()
        .map(|o| score_output(o, instance, rewards))
        .collect::<Result<_>>()?;
    let totals: Vec<f64> = group.rewards.iter().map(|r| r.total).collect();
    group.advantages = group_advantages(&totals, std_floor);
    Ok(())
}

/// `Σ_i A_i log π(cell_i)`.
pub fn surrogate_objective(
    weights: &[f64],
    features: &CellFeatures,
    cells: &[usize],
    advantages: &[f64],
) -> Result<f64> {
    let scores = features.scores(weights);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    Ok(cells
        .iter()
        .zip(advantages)
        .map(|(&c, a)| a * (scores[c] - log_z))
        .sum())
}

/// Closed-form gradient of [`surrogate_objective`]:
/// `Σ_i A_i (f(cell_i) − E_π f)`.
pub fn policy_gradient(
    weights: &[f64],
    features: &CellFeatures,
    cells: &[usize],
    advantages: &[f64],
) -> Result<Vec<f64>> {
    let probs = cell_distribution(weights, features)?;
    let mean = features.expectation(&probs);
    let mut grad = vec![0.0; features.dim()];
    for (&c, &a) in cells.iter().zip(advantages) {
        if a == 0.0 {
            continue;
        }
        for ((g, f), m) in grad.iter_mut().zip(features.cell(c)).zip(&mean) {
            *g += a * (f - m);
        }
    }
    Ok(grad)
}

/// Gradient of `KL(π_w ‖ uniform)`: `Σ_c π(c)(s_c − s̄)(f(c) − f̄)`.
fn kl_uniform_gradient(weights: &[f64], features: &CellFeatures) -> Vec<f64> {
    let scores = features.scores(weights);
    let probs = softmax(&scores);
    let mean_f = features.expectation(&probs);
    let mean_s: f64 = probs.iter().zip(&scores).map(|(p, s)| p * s).sum();
    let mut grad = vec![0.0; features.dim()];
    for (c, (&p, &s)) in probs.iter().zip(&scores).enumerate() {
        for ((g, f), m) in grad.iter_mut().zip(features.cell(c)).zip(&mean_f) {
            *g += p * (s - mean_s) * (f - m);
        }
    }
    grad
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub std_floor: f64,
    /// Weight of a KL penalty toward the uniform policy; 0 disables it.
    ///
    /// No ratio clipping: each group updates the policy that sampled it once,
    /// so the importance ratio is identically 1.
    pub kl_coef: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            std_floor: 1e-8,
            kl_coef: 0.0,
        }
    }
}

/// One gradient-ascent step on the group's surrogate objective.
pub fn update_policy(
    params: &PolicyParams,
    features: &CellFeatures,
    group: &GroupSample,
    lr: f64,
    kl_coef: f64,
) -> Result<PolicyParams> {
    if group.advantages.len() != group.cells.len() {
        return Err(Error::Usage("group advantages not computed".into()));
    }
    let mut grad = policy_gradient(&params.weights, features, &group.cells, &group.advantages)?;
    if kl_coef != 0.0 {
        for (g, k) in grad.iter_mut().zip(kl_uniform_gradient(&params.weights, features)) {
            *g -= kl_coef * k;
        }
    }
    if let Some(bad) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient component {bad} ({}) at version {}",
            FEATURE_NAMES.get(bad).unwrap_or(&"?"),
            params.version
        )));
    }
    let weights: Vec<f64> = params.weights.iter().zip(&grad).map(|(w, g)| w + lr * g).collect();
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFinite(format!("weights after update {}", params.version + 1)));
    }
    Ok(PolicyParams {
        weights,
        bbox_weights: params.bbox_weights.clone(),
        version: params.version + 1,
    })
}

/// Summary of one per-instance update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub mean_reward: f64,
    pub max_reward: f64,
    pub advantage_std: f64,
    pub param_norm: f64,
}

/// Sample a group, score it and apply the update.
#[allow(clippy::too_many_arguments)]
pub fn train_on_instance<R: Rng + ?Sized>(
    params: &PolicyParams,
    instance: &NavInstance,
    features: &CellFeatures,
    grpo: &GrpoConfig,
    policy: &PolicyConfig,
    rewards: &RewardConfig,
    lr: f64,
    rng: &mut R,
) -> Result<(PolicyParams, UpdateStats)> {
    let mut group = sample_group(params, features, grpo.group_size, policy, rng)?;
    score_group(&mut group, instance, rewards, grpo.std_floor)?;
    let next = update_policy(params, features, &group, lr, grpo.kl_coef)?;
    let totals: Vec<f64> = group.rewards.iter().map(|r| r.total).collect();
    let n = totals.len() as f64;
    let adv_mean = group.advantages.iter().sum::<f64>() / n;
    let adv_var = group.advantages.iter().map(|a| (a - adv_mean).powi(2)).sum::<f64>() / n;
    let stats = UpdateStats {
        mean_reward: totals.iter().sum::<f64>() / n,
        max_reward: totals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        advantage_std: adv_var.sqrt(),
        param_norm: next.l2_norm(),
    };
    Ok((next, stats))
}

/// Expected goal reward of the policy's cell distribution on one instance.
pub fn expected_goal_reward(
    params: &PolicyParams,
    instance: &NavInstance,
    features: &CellFeatures,
    config: &RewardConfig,
) -> Result<f64> {
    let probs = cell_distribution(&params.weights, features)?;
    let env = &instance.environment;
    let cols = env.cols();
    Ok(probs
        .iter()
        .enumerate()
        .map(|(i, p)| p * reward_goal(env.cell_center(i / cols, i % cols), instance.target_position, config))
        .sum())
}
