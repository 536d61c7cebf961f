//! Held-out evaluation with greedy decoding.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::codec::{self, Vocabulary};
use crate::dataset::PuzzleRecord;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::nn::{sample_completion, Checkpoint, Sampling, Transformer};
use crate::reward::{self, RewardScales};

/// Anything that can answer a puzzle prompt with completion tokens.
pub trait CompletionSource: Sync {
    fn complete(&self, record: &PuzzleRecord, prompt: &[u32], max_new: usize) -> Result<Vec<u32>>;
}

impl CompletionSource for Transformer<f32> {
    fn complete(&self, _record: &PuzzleRecord, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
        Ok(sample_completion(self, prompt, Sampling::Greedy, max_new)?.ids)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordScore {
    pub id: String,
    pub r_cell: f64,
    pub r_order: f64,
    pub n_correct: usize,
    pub n_solution: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_records: usize,
    /// Mean of per-record cell accuracy.
    pub cell_accuracy: f64,
    /// Correct cells pooled over the whole split.
    pub micro_cell_accuracy: f64,
    pub full_solve_rate: f64,
    pub mean_order_reward: f64,
    pub mean_normalized_order: f64,
    pub records: Vec<RecordScore>,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "records              {}", self.n_records)?;
        writeln!(f, "cell accuracy        {:.4}", self.cell_accuracy)?;
        writeln!(f, "cell accuracy (pool) {:.4}", self.micro_cell_accuracy)?;
        writeln!(f, "full solve rate      {:.4}", self.full_solve_rate)?;
        writeln!(f, "order reward         {:.4}", self.mean_order_reward)?;
        write!(f, "normalized order     {:.4}", self.mean_normalized_order)
    }
}

/// Greedy-decodes every record and aggregates cell and order statistics.
pub fn evaluate<S: CompletionSource>(
    source: &S,
    records: &[PuzzleRecord],
    max_new: usize,
    exec: Execution,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::input("cannot evaluate an empty split"));
    }
    let vocab = Vocabulary::new(records[0].side())?;
    let neutral = RewardScales::fixed(0.0, 0.0);
    let scores = exec.try_map(records, |rec| {
        let prompt = codec::encode_prompt(&rec.puzzle, &vocab)?;
        let ids = source.complete(rec, &prompt, max_new)?;
        let b = reward::score_completion(rec, &ids, &vocab, &neutral)?;
        Ok::<_, Error>(RecordScore {
            id: rec.id.clone(),
            r_cell: b.r_cell,
            r_order: b.r_order,
            n_correct: b.n_correct,
            n_solution: b.n_solution,
        })
    })?;
    Ok(aggregate(scores))
}

fn aggregate(records: Vec<RecordScore>) -> EvalReport {
    let n = records.len() as f64;
    let mean = |f: &dyn Fn(&RecordScore) -> f64| records.iter().map(f).sum::<f64>() / n;
    let correct: usize = records.iter().map(|r| r.n_correct).sum();
    let cells: usize = records.iter().map(|r| r.n_solution).sum();
    EvalReport {
        n_records: records.len(),
        cell_accuracy: mean(&|r| r.r_cell),
        micro_cell_accuracy: correct as f64 / cells as f64,
        full_solve_rate: mean(&|r| if r.r_cell == 1.0 { 1.0 } else { 0.0 }),
        mean_order_reward: mean(&|r| r.r_order),
        mean_normalized_order: mean(&|r| r.r_order / r.n_solution as f64),
        records,
    }
}

/// Evaluates a checkpoint after checking its vocabulary matches the data.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    records: &[PuzzleRecord],
    max_new: usize,
    exec: Execution,
) -> Result<EvalReport> {
    let side = records
        .first()
        .ok_or_else(|| Error::input("cannot evaluate an empty split"))?
        .side();
    check_vocab(checkpoint, side)?;
    evaluate(&checkpoint.model, records, max_new, exec)
}

pub fn check_vocab(checkpoint: &Checkpoint, side: usize) -> Result<()> {
    let expected = Vocabulary::new(side)?.hash();
    if checkpoint.vocab_hash != expected {
        return Err(Error::Provenance(format!(
            "checkpoint vocabulary {} does not match {side}x{side} data ({expected})",
            checkpoint.vocab_hash
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::EOS;
    use crate::dataset::{generate_corpus, CorpusConfig, Order};

    struct Replay(Order);

    impl CompletionSource for Replay {
        fn complete(&self, rec: &PuzzleRecord, _: &[u32], _: usize) -> Result<Vec<u32>> {
            let v = Vocabulary::new(rec.side())?;
            Ok(codec::encode_trajectory(rec.trajectory(self.0), &v))
        }
    }

    struct OnlyEos;

    impl CompletionSource for OnlyEos {
        fn complete(&self, _: &PuzzleRecord, _: &[u32], _: usize) -> Result<Vec<u32>> {
            Ok(vec![EOS])
        }
    }

    fn records() -> Vec<PuzzleRecord> {
        let cfg = CorpusConfig {
            n_train: 0,
            n_val: 0,
            n_test: 6,
            ..CorpusConfig::small(1)
        };
        generate_corpus(&cfg, Execution::default()).unwrap().test
    }

    #[test]
    fn solver_replay_is_perfect() {
        let r = evaluate(&Replay(Order::Solver), &records(), 48, Execution::default()).unwrap();
        assert_eq!(r.cell_accuracy, 1.0);
        assert_eq!(r.micro_cell_accuracy, 1.0);
        assert_eq!(r.full_solve_rate, 1.0);
        assert_eq!(r.mean_normalized_order, 1.0);
    }

    #[test]
    fn random_replay_is_correct_but_less_ordered() {
        let r = evaluate(&Replay(Order::Random), &records(), 48, Execution::default()).unwrap();
        assert_eq!(r.cell_accuracy, 1.0);
        assert!(r.mean_normalized_order < 1.0);
    }

    #[test]
    fn eos_only_scores_zero() {
        let r = evaluate(&OnlyEos, &records(), 48, Execution::default()).unwrap();
        assert_eq!(r.cell_accuracy, 0.0);
        assert_eq!(r.full_solve_rate, 0.0);
    }

    #[test]
    fn full_solve_rate_consistent_with_records() {
        let scores = vec![
            RecordScore {
                id: "a".into(),
                r_cell: 1.0,
                r_order: 4.0,
                n_correct: 4,
                n_solution: 4,
            },
            RecordScore {
                id: "b".into(),
                r_cell: 0.5,
                r_order: 1.0,
                n_correct: 6,
                n_solution: 12,
            },
        ];
        let r = aggregate(scores);
        assert_eq!(r.full_solve_rate, 0.5);
        assert_eq!(r.cell_accuracy, 0.75);
        assert_eq!(r.micro_cell_accuracy, 10.0 / 16.0);
    }

    #[test]
    fn empty_split_rejected() {
        assert!(evaluate(&OnlyEos, &[], 10, Execution::default()).is_err());
    }
}
