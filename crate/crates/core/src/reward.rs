//! Cell-accuracy and order rewards, their fixed mixture, and the one-time
//! bootstrapped scale calibration.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{self, Vocabulary, DEFAULT_MAX_NEW_TOKENS};
use crate::dataset::{record_to_json, PuzzleRecord};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::nn::{sample_completion, Checkpoint, Sampling, Transformer};
use crate::sudoku::{Move, Trajectory};
use crate::util::{derive_seed, sha256_hex};

/// Clamp applied to bootstrap means before dividing.
pub const SCALE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_cell: f64,
    pub r_order: f64,
    pub r_total: f64,
    pub n_correct: usize,
    pub n_solution: usize,
}

impl RewardBreakdown {
    /// Order reward per solution cell; 1.0 for a perfect solver-order rollout.
    pub fn normalized_order(&self) -> f64 {
        self.r_order / self.n_solution as f64
    }
}

/// Fraction of solution triplets present in `predicted`, and their count.
/// Order-insensitive; membership is exact `(row, col, val)` equality.
pub fn cell_accuracy(solution: &Trajectory, predicted: &Trajectory) -> Result<(f64, usize)> {
    if solution.is_empty() {
        return Err(Error::input("cell accuracy is undefined for an empty solution"));
    }
    let truth: HashSet<Move> = solution.iter().copied().collect();
    let hits = predicted
        .iter()
        .copied()
        .collect::<HashSet<Move>>()
        .intersection(&truth)
        .count();
    Ok((hits as f64 / truth.len() as f64, hits))
}

/// Sum over correctly placed moves of `1 / (1 + |solver index - emitted index|)`.
///
/// Emitted indices are positions in `predicted`, which is expected to be a
/// decoded rollout (one move per cell). Moves whose value disagrees with the
/// solver contribute nothing.
pub fn order_reward(solver: &Trajectory, predicted: &Trajectory) -> f64 {
    let index: HashMap<(u8, u8), (usize, u8)> = solver
        .iter()
        .enumerate()
        .map(|(i, m)| (m.cell(), (i, m.val)))
        .collect();
    predicted
        .iter()
        .enumerate()
        .filter_map(|(j, m)| {
            let &(i, val) = index.get(&m.cell())?;
            (val == m.val).then(|| 1.0 / (1.0 + i.abs_diff(j) as f64))
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapMeans {
    pub mean_cell: f64,
    pub mean_order: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleProvenance {
    pub checkpoint_hash: String,
    pub validation_hash: String,
}

/// Frozen mixture weights: `r_total = cell_scale * r_cell + order_scale * r_order`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardScales {
    pub alpha: f64,
    pub cell_scale: f64,
    pub order_scale: f64,
    pub bootstrap_means: BootstrapMeans,
    pub provenance: ScaleProvenance,
}

impl RewardScales {
    /// Scales that put the bootstrap means in ratio `alpha : 1 - alpha`.
    pub fn from_means(alpha: f64, means: BootstrapMeans, provenance: ScaleProvenance) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::input(format!("alpha {alpha} outside [0, 1]")));
        }
        Ok(RewardScales {
            alpha,
            cell_scale: alpha / means.mean_cell.max(SCALE_EPS),
            order_scale: (1.0 - alpha) / means.mean_order.max(SCALE_EPS),
            bootstrap_means: means,
            provenance,
        })
    }

    /// Fixed scales without calibration, e.g. `(1, 0)` for pure cell reward.
    pub fn fixed(cell_scale: f64, order_scale: f64) -> Self {
        RewardScales {
            alpha: f64::NAN,
            cell_scale,
            order_scale,
            bootstrap_means: BootstrapMeans {
                mean_cell: f64::NAN,
                mean_order: f64::NAN,
            },
            provenance: ScaleProvenance {
                checkpoint_hash: String::new(),
                validation_hash: String::new(),
            },
        }
    }

    pub fn total(&self, r_cell: f64, r_order: f64) -> f64 {
        total_reward(r_cell, r_order, self)
    }

    /// Refuses scales calibrated against a different checkpoint.
    pub fn check_checkpoint(&self, checkpoint_hash: &str) -> Result<()> {
        if self.provenance.checkpoint_hash != checkpoint_hash {
            return Err(Error::Provenance(format!(
                "scales were calibrated on checkpoint {} but the policy is {}",
                self.provenance.checkpoint_hash, checkpoint_hash
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("scales serialize");
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            reason: e.to_string(),
        })
    }
}

pub fn total_reward(r_cell: f64, r_order: f64, scales: &RewardScales) -> f64 {
    scales.cell_scale * r_cell + scales.order_scale * r_order
}

/// Scores a decoded rollout against the record's solver trajectory.
pub fn score(solver: &Trajectory, predicted: &Trajectory, scales: &RewardScales) -> Result<RewardBreakdown> {
    let (r_cell, n_correct) = cell_accuracy(solver, predicted)?;
    let r_order = order_reward(solver, predicted);
    Ok(RewardBreakdown {
        r_cell,
        r_order,
        r_total: total_reward(r_cell, r_order, scales),
        n_correct,
        n_solution: solver.len(),
    })
}

/// Scores raw completion tokens (junk-tolerant).
pub fn score_completion(
    record: &PuzzleRecord,
    completion: &[u32],
    vocab: &Vocabulary,
    scales: &RewardScales,
) -> Result<RewardBreakdown> {
    score(&record.solver_order, &codec::decode_completion(completion, vocab), scales)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub temperature: f64,
    pub seed: u64,
    pub max_new_tokens: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            temperature: 1.0,
            seed: 0,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        }
    }
}

/// Hash of a record list in its serialized corpus form.
pub fn records_hash(records: &[PuzzleRecord]) -> String {
    let text: String = records.iter().map(|r| record_to_json(r) + "\n").collect();
    sha256_hex(text.as_bytes())
}

/// Mean raw rewards of one sampled completion per record from a frozen model.
pub fn bootstrap_means(
    model: &Transformer<f32>,
    records: &[PuzzleRecord],
    cfg: &BootstrapConfig,
    exec: Execution,
) -> Result<BootstrapMeans> {
    if records.is_empty() {
        return Err(Error::input("bootstrap needs a non-empty validation split"));
    }
    let vocab = Vocabulary::new(records[0].side())?;
    let neutral = RewardScales::fixed(0.0, 0.0);
    let idx: Vec<usize> = (0..records.len()).collect();
    let scored = exec.try_map(&idx, |&i| {
        let rec = &records[i];
        let prompt = codec::encode_prompt(&rec.puzzle, &vocab)?;
        let mode = Sampling::Categorical {
            temperature: cfg.temperature,
            seed: derive_seed(cfg.seed, "bootstrap", i as u64),
        };
        let out = sample_completion(model, &prompt, mode, cfg.max_new_tokens)?;
        score_completion(rec, &out.ids, &vocab, &neutral)
    })?;
    let n = scored.len() as f64;
    Ok(BootstrapMeans {
        mean_cell: scored.iter().map(|b| b.r_cell).sum::<f64>() / n,
        mean_order: scored.iter().map(|b| b.r_order).sum::<f64>() / n,
    })
}

/// Calibrates frozen scales for mixture `alpha` from a checkpoint's
/// behaviour on the validation split.
pub fn bootstrap_scales(
    checkpoint: &Checkpoint,
    validation: &[PuzzleRecord],
    alpha: f64,
    cfg: &BootstrapConfig,
    exec: Execution,
) -> Result<RewardScales> {
    let means = bootstrap_means(&checkpoint.model, validation, cfg, exec)?;
    RewardScales::from_means(alpha, means, provenance(checkpoint, validation))
}

pub fn provenance(checkpoint: &Checkpoint, validation: &[PuzzleRecord]) -> ScaleProvenance {
    ScaleProvenance {
        checkpoint_hash: checkpoint.hash(),
        validation_hash: records_hash(validation),
    }
}
