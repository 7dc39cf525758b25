//! Synthetic cross-modal attention and the heatmap construction pipeline.
//!
//! [`compute_attention`] plays the role of a vision-language decoder: every
//! (layer, head, text token) row is a softmax over image patches. The rest of
//! the module turns such a stack into a `[0, 1]` heatmap on the cell grid:
//! pick the tokens describing the target, average heads and tokens, blend
//! layers with weights that favour higher layers, then upsample and normalize.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Rect};
use crate::navsim::{Environment, Instruction, NavInstance};

/// Salt separating attention noise from the generator's stream for the same seed.
const NOISE_SALT: u64 = 0x5EED_A77E_0000_0001;

/// Attention of every (layer, head, token) row over image patches.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    layers: usize,
    heads: usize,
    tokens: usize,
    patches: usize,
    values: Vec<f64>,
}

impl AttentionStack {
    /// Builds a stack from `L × K × T × N` row-major values, checking that
    /// every row is a probability vector.
    pub fn new(
        layers: usize,
        heads: usize,
        tokens: usize,
        patches: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        if layers == 0 || heads == 0 || tokens == 0 || patches == 0 {
            return Err(Error::Validation("attention stack dimensions must be positive".into()));
        }
        if values.len() != layers * heads * tokens * patches {
            return Err(Error::Validation(format!(
                "attention stack has {} values, expected {}",
                values.len(),
                layers * heads * tokens * patches
            )));
        }
        for (i, row) in values.chunks(patches).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Validation(format!(
                    "attention row {i} is not normalized (sum {sum})"
                )));
            }
        }
        Ok(Self {
            layers,
            heads,
            tokens,
            patches,
            values,
        })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn patches(&self) -> usize {
        self.patches
    }

    pub fn row(&self, layer: usize, head: usize, token: usize) -> &[f64] {
        let start = ((layer * self.heads + head) * self.tokens + token) * self.patches;
        &self.values[start..start + self.patches]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.patches)
    }
}

/// Layout of image patches over the cell grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    /// Cells per patch side.
    pub patch_px: usize,
}

impl PatchGrid {
    /// Patch grid tiling `env` exactly with square patches of `patch_px` cells.
    pub fn covering(env: &Environment, patch_px: usize) -> Result<Self> {
        let (rows, cols) = (env.rows(), env.cols());
        if patch_px == 0 || rows % patch_px != 0 || cols % patch_px != 0 {
            return Err(Error::Config(format!(
                "patch size {patch_px} does not tile a {rows}x{cols} grid"
            )));
        }
        Ok(Self {
            rows: rows / patch_px,
            cols: cols / patch_px,
            patch_px,
        })
    }

    pub fn n_patches(&self) -> usize {
        self.rows * self.cols
    }

    fn patch_rect(&self, pr: usize, pc: usize) -> Rect {
        Rect {
            x1: pc * self.patch_px,
            y1: pr * self.patch_px,
            x2: (pc + 1) * self.patch_px,
            y2: (pr + 1) * self.patch_px,
        }
    }

    fn check_covers(&self, env: &Environment) -> Result<()> {
        if self.rows * self.patch_px != env.rows() || self.cols * self.patch_px != env.cols() {
            return Err(Error::Config(format!(
                "patch grid {}x{} of {} cells does not match a {}x{} environment",
                self.rows,
                self.cols,
                self.patch_px,
                env.rows(),
                env.cols()
            )));
        }
        Ok(())
    }
}

/// Per-layer blending weights, normalized to sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerWeighting {
    /// `w_l ∝ l` with `l = 1` at the lowest layer.
    #[default]
    Linear,
    Uniform,
    /// `w_l ∝ base^l`.
    Exponential { base: f64 },
}

impl LayerWeighting {
    pub fn weights(&self, layers: usize) -> Vec<f64> {
        let raw: Vec<f64> = (1..=layers)
            .map(|l| match *self {
                LayerWeighting::Linear => l as f64,
                LayerWeighting::Uniform => 1.0,
                LayerWeighting::Exponential { base } => base.powi(l as i32),
            })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / total).collect()
    }
}

/// Knobs of the synthetic attention model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionParams {
    pub layers: usize,
    pub heads: usize,
    pub temperature: f64,
    /// Score noise standard deviation at ambiguity 0.
    pub noise_base: f64,
    /// Added noise standard deviation per unit of ambiguity.
    pub noise_slope: f64,
    pub layer_weighting: LayerWeighting,
    pub noise_seed: u64,
    /// Replaces the instance id as the noise stream when set.
    pub stream_override: Option<u64>,
}

impl Default for AttentionParams {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            temperature: 0.1,
            noise_base: 0.05,
            noise_slope: 0.45,
            layer_weighting: LayerWeighting::Linear,
            noise_seed: 0,
            stream_override: None,
        }
    }
}

impl AttentionParams {
    pub fn noise_sigma(&self, ambiguity: f64) -> f64 {
        self.noise_base + self.noise_slope * ambiguity
    }

    fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 {
            return Err(Error::Config("attention needs at least one layer and head".into()));
        }
        if !(self.temperature > 0.0) || self.noise_base < 0.0 || self.noise_slope < 0.0 {
            return Err(Error::Config("attention temperature/noise out of range".into()));
        }
        Ok(())
    }
}

/// Runs the synthetic attention model for one instance.
///
/// Target-description tokens score each patch by the best descriptor match of
/// the objects it overlaps (1.0 class and color, 0.5 class only); landmark-name
/// tokens score 1.0 on the referenced landmark; other tokens score 0. Gaussian
/// noise with standard deviation `noise_base + noise_slope · ambiguity` is added
/// per entry before a temperature softmax over patches.
pub fn compute_attention(
    instance: &NavInstance,
    grid: &PatchGrid,
    params: &AttentionParams,
) -> Result<AttentionStack> {
    params.validate()?;
    let env = &instance.environment;
    grid.check_covers(env)?;
    let descriptor = instance.instruction.descriptor()?;
    let landmark = instance.referenced_landmark()?.region;
    let [t_start, t_end] = instance.instruction.target_token_span;
    let landmark_span = instance.instruction.landmark_token_span();
    let n_tokens = instance.instruction.tokens().len();
    let n_patches = grid.n_patches();

    let mut target_scores = vec![0.0; n_patches];
    let mut landmark_scores = vec![0.0; n_patches];
    for pr in 0..grid.rows {
        for pc in 0..grid.cols {
            let patch = grid.patch_rect(pr, pc);
            let p = pr * grid.cols + pc;
            target_scores[p] = env
                .objects
                .iter()
                .filter(|o| o.bbox.intersects(&patch))
                .map(|o| descriptor.match_score(o))
                .fold(0.0, f64::max);
            if landmark.intersects(&patch) {
                landmark_scores[p] = 1.0;
            }
        }
    }
    let zeros = vec![0.0; n_patches];
    let token_scores: Vec<&[f64]> = (0..n_tokens)
        .map(|t| {
            if (t_start..t_end).contains(&t) {
                &target_scores[..]
            } else if landmark_span.is_some_and(|[s, e]| (s..e).contains(&t)) {
                &landmark_scores[..]
            } else {
                &zeros[..]
            }
        })
        .collect();

    let sigma = params.noise_sigma(env.ambiguity);
    let mut rng = ChaCha8Rng::seed_from_u64(params.noise_seed ^ NOISE_SALT);
    rng.set_stream(params.stream_override.unwrap_or(instance.id));

    let (layers, heads) = (params.layers, params.heads);
    let mut values = Vec::with_capacity(layers * heads * n_tokens * n_patches);
    let mut logits = vec![0.0; n_patches];
    for _ in 0..layers * heads {
        for scores in &token_scores {
            for (logit, &s) in logits.iter_mut().zip(scores.iter()) {
                let z: f64 = rng.sample(StandardNormal);
                *logit = (s + sigma * z) / params.temperature;
            }
            values.extend(softmax(&logits));
        }
    }
    AttentionStack::new(layers, heads, n_tokens, n_patches, values)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Token indices describing the target.
pub fn select_target_tokens(instruction: &Instruction) -> Result<Vec<usize>> {
    let [start, end] = instruction.target_token_span;
    if start >= end {
        return Err(Error::Validation(format!("empty target token span [{start}, {end})")));
    }
    let n = instruction.tokens().len();
    if end > n {
        return Err(Error::Validation(format!(
            "target token span [{start}, {end}) exceeds {n} tokens"
        )));
    }
    Ok((start..end).collect())
}

/// Collapses a stack to one patch vector: mean over heads, mean over the
/// selected tokens, then a weighted average over layers.
pub fn fuse_layers(
    stack: &AttentionStack,
    tokens: &[usize],
    weighting: LayerWeighting,
) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(Error::Validation("no tokens selected for fusion".into()));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= stack.tokens) {
        return Err(Error::Validation(format!(
            "token {bad} out of range for {} tokens",
            stack.tokens
        )));
    }
    let weights = weighting.weights(stack.layers);
    let mut fused = vec![0.0; stack.patches];
    let head_token_norm = (stack.heads * tokens.len()) as f64;
    for (layer, w) in weights.iter().enumerate() {
        let mut layer_vec = vec![0.0; stack.patches];
        for &t in tokens {
            for h in 0..stack.heads {
                for (acc, v) in layer_vec.iter_mut().zip(stack.row(layer, h, t)) {
                    *acc += v;
                }
            }
        }
        for (f, v) in fused.iter_mut().zip(&layer_vec) {
            *f += w * v / head_token_norm;
        }
    }
    Ok(fused)
}

/// Attention map on the cell grid with entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    values: Grid<f64>,
}

impl Heatmap {
    /// Wraps raw values, rejecting anything outside `[0, 1]`.
    pub fn new(values: Grid<f64>) -> Result<Self> {
        if values.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation("heatmap values must lie in [0, 1]".into()));
        }
        Ok(Self { values })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    pub fn values(&self) -> &[f64] {
        self.values.as_slice()
    }

    pub fn grid(&self) -> &Grid<f64> {
        &self.values
    }
}

/// Reshapes a patch vector, upsamples it bilinearly (corner-aligned) to
/// `out = (rows, cols)` and min–max normalizes. A constant map becomes all
/// zeros.
pub fn to_heatmap(vector: &[f64], grid: &PatchGrid, out: (usize, usize)) -> Result<Heatmap> {
    if vector.len() != grid.n_patches() {
        return Err(Error::Validation(format!(
            "patch vector has {} entries, grid has {}",
            vector.len(),
            grid.n_patches()
        )));
    }
    let (out_rows, out_cols) = out;
    if out_rows == 0 || out_cols == 0 {
        return Err(Error::Validation("heatmap output must be non-empty".into()));
    }
    let src = |r: usize, c: usize| vector[r * grid.cols + c];
    let scale = |n_in: usize, n_out: usize, i: usize| {
        if n_out == 1 || n_in == 1 {
            0.0
        } else {
            i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
        }
    };
    let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);

    let mut up = Vec::with_capacity(out_rows * out_cols);
    for i in 0..out_rows {
        let sy = scale(grid.rows, out_rows, i);
        let y0 = (sy.floor() as usize).min(grid.rows - 1);
        let y1 = (y0 + 1).min(grid.rows - 1);
        let ty = sy - y0 as f64;
        for j in 0..out_cols {
            let sx = scale(grid.cols, out_cols, j);
            let x0 = (sx.floor() as usize).min(grid.cols - 1);
            let x1 = (x0 + 1).min(grid.cols - 1);
            let tx = sx - x0 as f64;
            let top = lerp(src(y0, x0), src(y0, x1), tx);
            let bottom = lerp(src(y1, x0), src(y1, x1), tx);
            up.push(lerp(top, bottom, ty));
        }
    }

    let min = up.iter().copied().fold(f64::INFINITY, f64::min);
    let max = up.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let normalized = if range <= f64::EPSILON * max.abs().max(1.0) {
        vec![0.0; up.len()]
    } else {
        up.iter().map(|v| ((v - min) / range).clamp(0.0, 1.0)).collect()
    };
    Heatmap::new(Grid::from_vec(out_rows, out_cols, normalized)?)
}

/// Full pipeline for one instance: attention, target tokens, fusion, heatmap.
/// Returns the fused patch vector alongside the heatmap.
pub fn instance_heatmap(
    instance: &NavInstance,
    grid: &PatchGrid,
    params: &AttentionParams,
) -> Result<(Vec<f64>, Heatmap)> {
    let stack = compute_attention(instance, grid, params)?;
    let tokens = select_target_tokens(&instance.instruction)?;
    let fused = fuse_layers(&stack, &tokens, params.layer_weighting)?;
    let env = &instance.environment;
    let heatmap = to_heatmap(&fused, grid, (env.rows(), env.cols()))?;
    Ok((fused, heatmap))
}

#[derive(Serialize)]
struct DebugSidecar<'a> {
    patch_rows: usize,
    patch_cols: usize,
    heatmap_rows: usize,
    heatmap_cols: usize,
    fused: &'a [f64],
}

/// Writes `<stem>.pgm` (8-bit grayscale, row 0 at the top of the image is the
/// northernmost grid row) and `<stem>.json` with the fused vector.
pub fn dump_debug(
    heatmap: &Heatmap,
    fused: &[f64],
    grid: &PatchGrid,
    dir: &Path,
    stem: &str,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (rows, cols) = heatmap.shape();
    let mut pgm = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    for r in (0..rows).rev() {
        for c in 0..cols {
            pgm.push((heatmap.grid().get(r, c) * 255.0).round() as u8);
        }
    }
    let pgm_path = dir.join(format!("{stem}.pgm"));
    fs::File::create(&pgm_path)
        .and_then(|mut f| f.write_all(&pgm))
        .map_err(|e| Error::io(&pgm_path, e))?;
    let sidecar = DebugSidecar {
        patch_rows: grid.rows,
        patch_cols: grid.cols,
        heatmap_rows: rows,
        heatmap_cols: cols,
        fused,
    };
    let json_path = dir.join(format!("{stem}.json"));
    fs::write(&json_path, serde_json::to_vec_pretty(&sidecar)?)
        .map_err(|e| Error::io(&json_path, e))?;
    Ok(())
}
