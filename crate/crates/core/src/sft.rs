//! Supervised fine-tuning on solver-order or random-order trajectories with
//! validation-based early stopping.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{self, TokenSequence, Vocabulary, DEFAULT_MAX_NEW_TOKENS};
use crate::dataset::{Corpus, Order, PuzzleRecord};
use crate::error::{Error, Result};
use crate::eval;
use crate::exec::Execution;
use crate::nn::{AdamW, AdamWConfig, Checkpoint, ModelConfig, RngState, Transformer};
use crate::util::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub order: Order,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub patience: usize,
    pub max_steps: usize,
    pub eval_interval: usize,
    /// Validation records decoded per evaluation; `0` means all.
    pub eval_records: usize,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl SftConfig {
    /// Defaults per ordering: lr `1e-5` for solver order, `5e-5` for random.
    pub fn for_order(order: Order) -> Self {
        SftConfig {
            order,
            lr: match order {
                Order::Solver => 1e-5,
                Order::Random => 5e-5,
            },
            batch_size: 32,
            weight_decay: 0.01,
            patience: 10,
            max_steps: 20_000,
            eval_interval: 200,
            eval_records: 0,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.patience == 0 || self.batch_size == 0 || self.eval_interval == 0 {
            return Err(Error::input("patience, batch_size and eval_interval must be >= 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::input("lr must be > 0"));
        }
        Ok(())
    }
}

/// One metrics-log row; train rows carry `loss`, validation rows carry
/// `cell_accuracy`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub split: String,
    pub loss: Option<f64>,
    pub cell_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SftOutcome {
    pub best: Checkpoint,
    pub best_step: usize,
    pub best_val_accuracy: f64,
    pub last_step: usize,
    pub metrics: Vec<MetricRow>,
}

/// Checks that a model config fits a vocabulary.
pub fn check_model_fits(config: &ModelConfig, vocab: &Vocabulary) -> Result<()> {
    if config.vocab_size != vocab.size() {
        return Err(Error::input(format!(
            "model vocab_size {} != vocabulary size {}",
            config.vocab_size,
            vocab.size()
        )));
    }
    if config.max_seq_len < vocab.max_seq_len() {
        return Err(Error::input(format!(
            "model max_seq_len {} < required {}",
            config.max_seq_len,
            vocab.max_seq_len()
        )));
    }
    Ok(())
}

/// Encodes records unpadded (length = content length).
pub fn encode_all(records: &[PuzzleRecord], order: Order, vocab: &Vocabulary) -> Result<Vec<TokenSequence>> {
    records
        .iter()
        .map(|r| {
            let mut s = codec::encode(r, order, vocab, vocab.max_seq_len())?;
            s.ids.truncate(s.len);
            s.loss_mask.truncate(s.len);
            Ok(s)
        })
        .collect()
}

/// Endless epoch-shuffled minibatches of indices.
pub(crate) struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    pub(crate) fn new(n: usize, rng: ChaCha8Rng) -> Self {
        let mut b = Batcher {
            order: (0..n).collect(),
            pos: n,
            rng,
        };
        b.refill();
        b
    }

    fn refill(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub(crate) fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.refill();
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }

    pub(crate) fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }
}

fn eval_slice(records: &[PuzzleRecord], limit: usize) -> &[PuzzleRecord] {
    if limit == 0 {
        records
    } else {
        &records[..limit.min(records.len())]
    }
}

/// Masked causal-LM training from a fresh model.
///
/// Validation cell accuracy (greedy decoding) is measured before training
/// and every `eval_interval` steps; training stops after `patience`
/// evaluations without a strict improvement or at `max_steps`. The returned
/// checkpoint is the best-scoring one.
pub fn train_sft(corpus: &Corpus, model_config: ModelConfig, cfg: &SftConfig, exec: Execution) -> Result<SftOutcome> {
    cfg.validate()?;
    if corpus.train.is_empty() || corpus.validation.is_empty() {
        return Err(Error::input("SFT needs non-empty train and validation splits"));
    }
    let vocab = Vocabulary::new(corpus.train[0].side())?;
    check_model_fits(&model_config, &vocab)?;
    let train = encode_all(&corpus.train, cfg.order, &vocab)?;
    let val = eval_slice(&corpus.validation, cfg.eval_records);

    let mut model = Transformer::<f32>::new(model_config)?;
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        model.num_params(),
    );
    let mut batcher = Batcher::new(train.len(), rng_for(cfg.seed, "sft-batches", 0));

    let snapshot = |model: &Transformer<f32>, opt: &AdamW<f32>, step: usize, batcher: &Batcher| {
        let mut c = Checkpoint::new(model.clone(), vocab.hash());
        c.optimizer = Some(opt.clone());
        c.rng = Some(RngState::capture(batcher.rng()));
        c.step = step as u64;
        c.meta.insert("stage".into(), "sft".into());
        c.meta.insert("order".into(), cfg.order.as_str().into());
        c
    };

    let mut metrics = Vec::new();
    let initial = eval::evaluate(&model, val, cfg.max_new_tokens, exec)?.cell_accuracy;
    metrics.push(MetricRow {
        step: 0,
        split: "validation".into(),
        loss: None,
        cell_accuracy: Some(initial),
    });
    let mut best = snapshot(&model, &opt, 0, &batcher);
    let (mut best_acc, mut best_step, mut stale) = (initial, 0, 0);
    let (mut loss_sum, mut loss_n) = (0.0f64, 0usize);
    let mut step = 0;

    while step < cfg.max_steps {
        step += 1;
        let idx = batcher.next_batch(cfg.batch_size);
        let batch: Vec<TokenSequence> = idx.iter().map(|&i| train[i].clone()).collect();
        let (loss, grads) = model.loss_and_grads(&batch, exec)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("SFT loss is {loss} at step {step}")));
        }
        opt.step(model.params_mut(), &grads)?;
        loss_sum += loss as f64;
        loss_n += 1;

        if step % cfg.eval_interval == 0 || step == cfg.max_steps {
            metrics.push(MetricRow {
                step,
                split: "train".into(),
                loss: Some(loss_sum / loss_n as f64),
                cell_accuracy: None,
            });
            loss_sum = 0.0;
            loss_n = 0;
            let acc = eval::evaluate(&model, val, cfg.max_new_tokens, exec)?.cell_accuracy;
            metrics.push(MetricRow {
                step,
                split: "validation".into(),
                loss: None,
                cell_accuracy: Some(acc),
            });
            if acc > best_acc {
                best_acc = acc;
                best_step = step;
                best = snapshot(&model, &opt, step, &batcher);
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    Ok(SftOutcome {
        best,
        best_step,
        best_val_accuracy: best_acc,
        last_step: step,
        metrics,
    })
}
