//! GRPO post-training: grouped rollouts, group-normalized advantages, the
//! clipped surrogate with a KL penalty to a frozen reference, and the
//! mixture sweep.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::codec::{self, Vocabulary, DEFAULT_MAX_NEW_TOKENS};
use crate::dataset::{Corpus, PuzzleRecord};
use crate::error::{Error, Result};
use crate::eval;
use crate::exec::Execution;
use crate::nn::{AdamW, AdamWConfig, Checkpoint, Policy, RngState, Sampling, Transformer};
use crate::reward::{self, BootstrapConfig, RewardBreakdown, RewardScales};
use crate::sft::Batcher;
use crate::util::{derive_seed, rng_for};

/// Added to the group standard deviation before dividing.
pub const ADV_EPS: f64 = 1e-8;
const GRAD_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub kl_beta: f64,
    pub clip_eps: f64,
    pub max_new_tokens: usize,
    pub batch_prompts: usize,
    pub steps: usize,
    pub alpha: f64,
    pub temperature: f64,
    pub eval_interval: usize,
    /// Validation records decoded per evaluation; `0` means all.
    pub eval_records: usize,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 8,
            lr: 1e-5,
            weight_decay: 0.01,
            kl_beta: 0.01,
            clip_eps: 0.2,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            batch_prompts: 8,
            steps: 300,
            alpha: 0.75,
            temperature: 1.0,
            eval_interval: 25,
            eval_records: 0,
            seed: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::input("group_size must be >= 2"));
        }
        if !(self.kl_beta >= 0.0) || !(self.clip_eps > 0.0) || !(self.temperature > 0.0) {
            return Err(Error::input("need kl_beta >= 0, clip_eps > 0, temperature > 0"));
        }
        if self.batch_prompts == 0 || self.eval_interval == 0 || self.max_new_tokens == 0 {
            return Err(Error::input("batch_prompts, eval_interval, max_new_tokens must be >= 1"));
        }
        Ok(())
    }

    pub fn bootstrap(&self) -> BootstrapConfig {
        BootstrapConfig {
            temperature: 1.0,
            seed: self.seed,
            max_new_tokens: self.max_new_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub ids: Vec<u32>,
    /// Per-token log-probabilities under the behaviour policy at sampling time.
    pub logprobs: Vec<f32>,
    pub breakdown: RewardBreakdown,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub prompt_id: String,
    pub prompt: Vec<u32>,
    pub rollouts: Vec<Rollout>,
}

/// `(r - mean) / (std + eps)` with the population standard deviation; all
/// zeros when every reward is equal.
pub fn compute_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::input("advantages need a group of at least 2"));
    }
    let n = rewards.len() as f64;
    let first = rewards[0];
    if rewards.iter().all(|&r| r == first) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / (std + ADV_EPS)).collect())
}

/// Samples `group_size` completions for one prompt and scores them.
///
/// Rollout `i` draws from the stream keyed by `(seed, prompt id, round, i)`.
/// The prompt is prefilled once and its cache shared by every rollout.
pub fn generate_group(
    policy: &Transformer<f32>,
    record: &PuzzleRecord,
    scales: &RewardScales,
    cfg: &GrpoConfig,
    round: u64,
    exec: Execution,
) -> Result<RolloutGroup> {
    let vocab = Vocabulary::new(record.side())?;
    let prompt = codec::encode_prompt(&record.puzzle, &vocab)?;
    let mut cache = policy.kv_cache();
    let logits = policy.extend(&mut cache, &prompt)?;
    let stream = format!("rollout/{}/{round}", record.id);
    let rollouts = exec.try_map(&(0..cfg.group_size).collect::<Vec<_>>(), |&i| {
        let mode = Sampling::Categorical {
            temperature: cfg.temperature,
            seed: derive_seed(cfg.seed, &stream, i as u64),
        };
        let out = crate::nn::sample::continue_from(policy, cache.clone(), logits.clone(), mode, cfg.max_new_tokens)?;
        let breakdown = reward::score_completion(record, &out.ids, &vocab, scales)?;
        Ok::<_, Error>(Rollout {
            ids: out.ids,
            logprobs: out.logprobs,
            breakdown,
            advantage: 0.0,
        })
    })?;
    let mut group = RolloutGroup {
        prompt_id: record.id.clone(),
        prompt,
        rollouts,
    };
    assign_advantages(&mut group)?;
    Ok(group)
}

pub fn assign_advantages(group: &mut RolloutGroup) -> Result<()> {
    let rewards: Vec<f64> = group.rollouts.iter().map(|r| r.breakdown.r_total).collect();
    let adv = compute_advantages(&rewards)?;
    group.rollouts.iter_mut().zip(adv).for_each(|(r, a)| r.advantage = a);
    Ok(())
}

/// Per-token pieces of the GRPO objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenTerms {
    pub ratio: f64,
    pub kl: f64,
    pub loss: f64,
    /// Derivative of `loss` with respect to the current log-probability.
    pub dloss: f64,
    pub clipped: bool,
}

/// Loss `-min(rho a, clip(rho, 1-eps, 1+eps) a) + beta kl` for one token,
/// with `rho = exp(lp - lp_behavior)` and
/// `kl = exp(lp_ref - lp) - (lp_ref - lp) - 1`.
pub fn token_terms(lp: f64, lp_behavior: f64, lp_ref: f64, advantage: f64, clip_eps: f64, beta: f64) -> TokenTerms {
    let ratio = (lp - lp_behavior).exp();
    let unclipped = ratio * advantage;
    let clipped_val = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage;
    let active = unclipped <= clipped_val;
    let surrogate = unclipped.min(clipped_val);
    let delta = lp_ref - lp;
    let kl = kl_term(lp_ref, lp);
    let dsurr = if active { unclipped } else { 0.0 };
    TokenTerms {
        ratio,
        kl,
        loss: -surrogate + beta * kl,
        dloss: -dsurr + beta * (1.0 - delta.exp()),
        clipped: !active,
    }
}

/// Nonnegative per-token KL estimator against the reference.
pub fn kl_term(lp_ref: f64, lp: f64) -> f64 {
    let delta = lp_ref - lp;
    delta.exp() - delta - 1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
    pub n_tokens: usize,
}

struct ItemStats {
    loss: f64,
    kl_sum: f64,
    ratio_sum: f64,
    clipped: usize,
    tokens: usize,
}

/// One GRPO update: [`grpo_loss_and_grads`] followed by a single optimizer
/// step.
pub fn grpo_step<P: Policy>(
    policy: &mut P,
    optimizer: &mut AdamW<f32>,
    reference: &P,
    groups: &[RolloutGroup],
    cfg: &GrpoConfig,
    exec: Execution,
) -> Result<StepStats> {
    let (stats, grads) = grpo_loss_and_grads(policy, reference, groups, cfg, exec)?;
    optimizer.step(policy.params_mut(), &grads)?;
    Ok(stats)
}

/// The GRPO objective over `groups` and its gradient. Every rollout's tokens
/// are weighted by `1 / (rollouts * tokens_in_rollout)` and gradients are
/// summed in rollout order.
pub fn grpo_loss_and_grads<P: Policy>(
    policy: &P,
    reference: &P,
    groups: &[RolloutGroup],
    cfg: &GrpoConfig,
    exec: Execution,
) -> Result<(StepStats, Vec<f32>)> {
    let items: Vec<(usize, usize)> = groups
        .iter()
        .enumerate()
        .flat_map(|(g, grp)| (0..grp.rollouts.len()).map(move |r| (g, r)))
        .collect();
    if items.is_empty() {
        return Err(Error::input("grpo_step needs at least one rollout"));
    }
    let n_rollouts = items.len() as f64;
    let temp = cfg.temperature as f32;
    let np = policy.params().len();
    let mut grads = vec![0.0f32; np];
    let mut totals = ItemStats {
        loss: 0.0,
        kl_sum: 0.0,
        ratio_sum: 0.0,
        clipped: 0,
        tokens: 0,
    };
    {
        let current = policy;
        for chunk in items.chunks(GRAD_CHUNK) {
            let parts = exec.try_map(chunk, |&(g, r)| {
                let grp = &groups[g];
                let ro = &grp.rollouts[r];
                if ro.ids.is_empty() || ro.logprobs.len() != ro.ids.len() {
                    return Err(Error::input("rollout has no tokens or mismatched log-probs"));
                }
                let ids: Vec<u32> = grp.prompt.iter().chain(&ro.ids).copied().collect();
                let targets: Vec<usize> = (grp.prompt.len()..ids.len()).collect();
                let lp_ref = reference.target_logprobs(&ids, &targets, temp)?;
                let w = 1.0 / (n_rollouts * targets.len() as f64);
                let terms = |lp: &[f32]| -> Vec<TokenTerms> {
                    lp.iter()
                        .enumerate()
                        .map(|(j, &l)| {
                            token_terms(
                                l as f64,
                                ro.logprobs[j] as f64,
                                lp_ref[j] as f64,
                                ro.advantage,
                                cfg.clip_eps,
                                cfg.kl_beta,
                            )
                        })
                        .collect()
                };
                let mut g_local = vec![0.0f32; np];
                let lp = current.logprob_vjp(
                    &ids,
                    &targets,
                    temp,
                    &|lp| terms(lp).iter().map(|t| (w * t.dloss) as f32).collect(),
                    &mut g_local,
                )?;
                let tt = terms(&lp);
                let stats = ItemStats {
                    loss: w * tt.iter().map(|t| t.loss).sum::<f64>(),
                    kl_sum: tt.iter().map(|t| t.kl).sum(),
                    ratio_sum: tt.iter().map(|t| t.ratio).sum(),
                    clipped: tt.iter().filter(|t| t.clipped).count(),
                    tokens: tt.len(),
                };
                Ok((stats, g_local))
            })?;
            for (s, g) in parts {
                totals.loss += s.loss;
                totals.kl_sum += s.kl_sum;
                totals.ratio_sum += s.ratio_sum;
                totals.clipped += s.clipped;
                totals.tokens += s.tokens;
                grads.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
            }
        }
    }
    if !totals.loss.is_finite() {
        return Err(Error::Numerical(format!("GRPO loss is {}", totals.loss)));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical("GRPO gradient has non-finite entries".into()));
    }
    let n = totals.tokens as f64;
    let stats = StepStats {
        loss: totals.loss,
        mean_kl: totals.kl_sum / n,
        clip_fraction: totals.clipped as f64 / n,
        mean_ratio: totals.ratio_sum / n,
        n_tokens: totals.tokens,
    };
    Ok((stats, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoMetricRow {
    pub step: usize,
    pub alpha: f64,
    pub mean_r_cell: f64,
    pub mean_r_order: f64,
    pub mean_r_total: f64,
    /// Mean of `order_scale * r_order`, the order term's share of `r_total`.
    pub mean_order_contribution: f64,
    pub mean_normalized_order: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_cell_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct GrpoOutcome {
    pub last: Checkpoint,
    pub best: Checkpoint,
    pub best_step: usize,
    pub initial_val_accuracy: Option<f64>,
    pub best_val_accuracy: Option<f64>,
    pub metrics: Vec<GrpoMetricRow>,
}

fn eval_slice(records: &[PuzzleRecord], limit: usize) -> &[PuzzleRecord] {
    if limit == 0 {
        records
    } else {
        &records[..limit.min(records.len())]
    }
}

/// Post-trains an SFT checkpoint with GRPO under frozen reward scales.
///
/// The scales must have been calibrated on exactly this checkpoint. The
/// reference policy is a frozen copy of the input. With `steps == 0` the
/// input checkpoint is returned unchanged.
pub fn run_grpo(
    sft: &Checkpoint,
    corpus: &Corpus,
    scales: &RewardScales,
    cfg: &GrpoConfig,
    exec: Execution,
) -> Result<GrpoOutcome> {
    cfg.validate()?;
    scales.check_checkpoint(&sft.hash())?;
    if corpus.train.is_empty() {
        return Err(Error::input("GRPO needs a non-empty train split"));
    }
    eval::check_vocab(sft, corpus.train[0].side())?;
    if cfg.steps == 0 {
        return Ok(GrpoOutcome {
            last: sft.clone(),
            best: sft.clone(),
            best_step: 0,
            initial_val_accuracy: None,
            best_val_accuracy: None,
            metrics: Vec::new(),
        });
    }
    let reference = sft.model.clone();
    let mut policy = sft.model.clone();
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        policy.num_params(),
    );
    let val = eval_slice(&corpus.validation, cfg.eval_records);
    let validate = |m: &Transformer<f32>| -> Result<Option<f64>> {
        if val.is_empty() {
            return Ok(None);
        }
        Ok(Some(eval::evaluate(m, val, cfg.max_new_tokens, exec)?.cell_accuracy))
    };
    let mut batcher = Batcher::new(corpus.train.len(), rng_for(cfg.seed, "grpo-prompts", 0));
    let snapshot = |m: &Transformer<f32>, opt: &AdamW<f32>, step: usize, batcher: &Batcher| {
        let mut c = Checkpoint::new(m.clone(), sft.vocab_hash.clone());
        c.optimizer = Some(opt.clone());
        c.rng = Some(RngState::capture(batcher.rng()));
        c.step = step as u64;
        c.meta = sft.meta.clone();
        c.meta.insert("stage".into(), "grpo".into());
        c.meta.insert("alpha".into(), format!("{}", scales.alpha));
        c.meta.insert("sft_checkpoint".into(), scales.provenance.checkpoint_hash.clone());
        c
    };

    let initial_val = validate(&policy)?;
    let mut best_val = initial_val;
    let mut best = sft.clone();
    let mut best_step = 0;
    let mut metrics = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let idx = batcher.next_batch(cfg.batch_prompts);
        let groups = exec.try_map(&idx, |&i| {
            generate_group(&policy, &corpus.train[i], scales, cfg, step as u64, exec)
        })?;
        let stats = grpo_step(&mut policy, &mut opt, &reference, &groups, cfg, exec)?;
        let all: Vec<&Rollout> = groups.iter().flat_map(|g| &g.rollouts).collect();
        let n = all.len() as f64;
        let mean = |f: &dyn Fn(&Rollout) -> f64| all.iter().map(|r| f(r)).sum::<f64>() / n;
        let mut row = GrpoMetricRow {
            step,
            alpha: scales.alpha,
            mean_r_cell: mean(&|r| r.breakdown.r_cell),
            mean_r_order: mean(&|r| r.breakdown.r_order),
            mean_r_total: mean(&|r| r.breakdown.r_total),
            mean_order_contribution: mean(&|r| scales.order_scale * r.breakdown.r_order),
            mean_normalized_order: mean(&|r| r.breakdown.normalized_order()),
            mean_kl: stats.mean_kl,
            clip_fraction: stats.clip_fraction,
            val_cell_accuracy: None,
        };
        if step % cfg.eval_interval == 0 || step == cfg.steps {
            row.val_cell_accuracy = validate(&policy)?;
            if let (Some(acc), Some(b)) = (row.val_cell_accuracy, best_val) {
                if acc > b {
                    best_val = Some(acc);
                    best_step = step;
                    best = snapshot(&policy, &opt, step, &batcher);
                }
            }
        }
        metrics.push(row);
    }
    let last = snapshot(&policy, &opt, cfg.steps, &batcher);
    if best_val.is_none() {
        best = last.clone();
        best_step = cfg.steps;
    }
    Ok(GrpoOutcome {
        last,
        best,
        best_step,
        initial_val_accuracy: initial_val,
        best_val_accuracy: best_val,
        metrics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub alpha: Option<f64>,
    pub cell_accuracy: f64,
}

/// Test cell accuracy per mixture plus the two fine-tuned baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub bootstrap_means: reward::BootstrapMeans,
}

pub fn mixture_label(alpha: f64) -> String {
    format!("{} : {}", trim_float(alpha), trim_float(1.0 - alpha))
}

fn trim_float(x: f64) -> String {
    let s = format!("{x:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

impl fmt::Display for SweepReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(18);
        writeln!(f, "{:<w$}  Cell Accuracy", "Cell : Order Weight")?;
        writeln!(f, "{}", "-".repeat(w + 15))?;
        let mixtures = self.rows.iter().filter(|r| r.alpha.is_some()).count();
        for (i, r) in self.rows.iter().enumerate() {
            if i == mixtures {
                writeln!(f, "{}", "-".repeat(w + 15))?;
            }
            writeln!(f, "{:<w$}  {:.3}", r.label, r.cell_accuracy)?;
        }
        Ok(())
    }
}

/// Independent calibration and GRPO run per `alpha`, all from the same
/// random-order checkpoint, each scored on the test split; followed by the
/// random-order and solver-order fine-tuned baselines.
///
/// Bootstrap means do not depend on `alpha`, so they are measured once and
/// turned into per-mixture scales.
pub fn sweep_alpha(
    random_sft: &Checkpoint,
    solver_sft: &Checkpoint,
    corpus: &Corpus,
    alphas: &[f64],
    cfg: &GrpoConfig,
    exec: Execution,
) -> Result<(SweepReport, Vec<GrpoOutcome>)> {
    if corpus.test.is_empty() {
        return Err(Error::input("sweep needs a non-empty test split"));
    }
    let means = reward::bootstrap_means(&random_sft.model, &corpus.validation, &cfg.bootstrap(), exec)?;
    let prov = reward::provenance(random_sft, &corpus.validation);
    let test_acc = |c: &Checkpoint| -> Result<f64> {
        Ok(eval::evaluate_checkpoint(c, &corpus.test, cfg.max_new_tokens, exec)?.cell_accuracy)
    };
    let mut rows = Vec::with_capacity(alphas.len() + 2);
    let mut runs = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let scales = RewardScales::from_means(alpha, means, prov.clone())?;
        let run_cfg = GrpoConfig {
            alpha,
            ..cfg.clone()
        };
        let out = run_grpo(random_sft, corpus, &scales, &run_cfg, exec)?;
        rows.push(SweepRow {
            label: mixture_label(alpha),
            alpha: Some(alpha),
            cell_accuracy: test_acc(&out.best)?,
        });
        runs.push(out);
    }
    rows.push(SweepRow {
        label: "Fine-tuned (random order)".into(),
        alpha: None,
        cell_accuracy: test_acc(random_sft)?,
    });
    rows.push(SweepRow {
        label: "Fine-tuned (solver order)".into(),
        alpha: None,
        cell_accuracy: test_acc(solver_sft)?,
    });
    Ok((
        SweepReport {
            rows,
            bootstrap_means: means,
        },
        runs,
    ))
}
