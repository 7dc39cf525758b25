//! Semantic-aware difficulty: one minus the Soft-IoU between an attention
//! heatmap and a ground-truth mask.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{instance_heatmap, AttentionParams, Heatmap, PatchGrid};
use crate::error::{Error, Result};
use crate::navsim::NavInstance;

pub use crate::grid::TargetMask;

/// Soft-IoU `Σ(H·M) / (ΣH + ΣM − Σ(H·M))` over raw values.
///
/// `heat` is used as given, so this also serves the pre-normalization path.
/// Returns 0 when `ΣH == 0`.
pub fn soft_iou_values(heat: &[f64], mask: &TargetMask) -> Result<f64> {
    let (rows, cols) = mask.shape();
    if heat.len() != rows * cols {
        return Err(Error::Validation(format!(
            "heatmap has {} cells, mask is {rows}x{cols}",
            heat.len()
        )));
    }
    let mut sum_h = 0.0;
    let mut inter = 0.0;
    for (&h, &m) in heat.iter().zip(mask.cells()) {
        sum_h += h;
        if m {
            inter += h;
        }
    }
    if sum_h == 0.0 {
        return Ok(0.0);
    }
    let sum_m = mask.count() as f64;
    Ok(inter / (sum_h + sum_m - inter))
}

pub fn soft_iou(heat: &Heatmap, mask: &TargetMask) -> Result<f64> {
    if heat.shape() != mask.shape() {
        return Err(Error::Validation(format!(
            "heatmap shape {:?} differs from mask shape {:?}",
            heat.shape(),
            mask.shape()
        )));
    }
    soft_iou_values(heat.values(), mask)
}

/// `1 − soft_iou`; an all-zero heatmap scores 1.
pub fn difficulty(heat: &Heatmap, mask: &TargetMask) -> Result<f64> {
    Ok(1.0 - soft_iou(heat, mask)?)
}

/// Which ground-truth region a heatmap is scored against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    #[default]
    Target,
    Landmark,
}

/// Difficulty scoring setup for a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringConfig {
    pub attention: AttentionParams,
    /// Cells per attention patch.
    pub patch_px: usize,
    pub mask: MaskSource,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            attention: AttentionParams::default(),
            patch_px: 1,
            mask: MaskSource::Target,
        }
    }
}

pub fn score_instance(instance: &NavInstance, config: &ScoringConfig) -> Result<f64> {
    let grid = PatchGrid::covering(&instance.environment, config.patch_px)?;
    let (_, heat) = instance_heatmap(instance, &grid, &config.attention)?;
    let mask = match config.mask {
        MaskSource::Target => instance.target_mask()?,
        MaskSource::Landmark => instance.landmark_mask.clone(),
    };
    difficulty(&heat, &mask)
}

/// Per-instance difficulty, in dataset order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyTable {
    ids: Vec<u64>,
    scores: Vec<f64>,
}

impl DifficultyTable {
    pub fn new(entries: Vec<(u64, f64)>) -> Result<Self> {
        let mut seen = BTreeMap::new();
        for (i, &(id, d)) in entries.iter().enumerate() {
            if !(0.0..=1.0).contains(&d) {
                return Err(Error::Validation(format!("difficulty {d} of instance {id} outside [0, 1]")));
            }
            if seen.insert(id, i).is_some() {
                return Err(Error::Validation(format!("duplicate instance id {id}")));
            }
        }
        let (ids, scores) = entries.into_iter().unzip();
        Ok(Self { ids, scores })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn get(&self, index: usize) -> (u64, f64) {
        (self.ids[index], self.scores[index])
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["id", "difficulty"])?;
        for (id, d) in self.ids.iter().zip(&self.scores) {
            w.write_record([id.to_string(), d.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            id: u64,
            difficulty: f64,
        }
        let mut r = csv::Reader::from_path(path)?;
        let entries = r
            .deserialize::<Row>()
            .map(|row| row.map(|r| (r.id, r.difficulty)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Self::new(entries)
    }
}

/// Scores every instance with the attention pipeline.
pub fn score_dataset(instances: &[NavInstance], config: &ScoringConfig) -> Result<DifficultyTable> {
    if instances.is_empty() {
        return Err(Error::Validation("cannot score an empty dataset".into()));
    }
    let entries = instances
        .iter()
        .map(|inst| Ok((inst.id, score_instance(inst, config)?)))
        .collect::<Result<Vec<_>>>()?;
    DifficultyTable::new(entries)
}

/// One equal-width bin of [`histogram`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_low: f64,
    pub bin_high: f64,
    pub count: usize,
}

/// Counts over `bins` equal-width bins of `[0, 1]`; each bin is half-open
/// except the last, which includes 1.
pub fn histogram(table: &DifficultyTable, bins: usize) -> Result<Vec<HistogramBin>> {
    if bins == 0 {
        return Err(Error::Validation("histogram needs at least one bin".into()));
    }
    let mut counts = vec![0usize; bins];
    for &d in table.scores() {
        let b = ((d * bins as f64).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            bin_low: i as f64 / bins as f64,
            bin_high: (i + 1) as f64 / bins as f64,
            count,
        })
        .collect())
}

pub fn write_histogram_csv(bins: &[HistogramBin], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for b in bins {
        w.serialize(b)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
