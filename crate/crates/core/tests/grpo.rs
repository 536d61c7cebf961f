use orderhint::codec::Vocabulary;
use orderhint::dataset::{self, CorpusConfig};
use orderhint::grpo::{self, GrpoConfig, Rollout, RolloutGroup};
use orderhint::nn::{AdamW, AdamWConfig, Checkpoint, ModelConfig, Policy, Transformer};
use orderhint::reward::{RewardBreakdown, RewardScales};
use orderhint::{Execution, Result};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Single-step two-action softmax policy: the prompt is one token and the
/// completion is the action id (0 or 1).
struct Bandit {
    logits: Vec<f32>,
}

impl Bandit {
    fn probs(&self) -> [f64; 2] {
        let m = self.logits[0].max(self.logits[1]) as f64;
        let e = [(self.logits[0] as f64 - m).exp(), (self.logits[1] as f64 - m).exp()];
        let z = e[0] + e[1];
        [e[0] / z, e[1] / z]
    }
}

impl Policy for Bandit {
    fn params(&self) -> &[f32] {
        &self.logits
    }

    fn params_mut(&mut self) -> &mut [f32] {
        &mut self.logits
    }

    fn target_logprobs(&self, ids: &[u32], targets: &[usize], _t: f32) -> Result<Vec<f32>> {
        let p = self.probs();
        Ok(targets.iter().map(|&t| p[ids[t] as usize].ln() as f32).collect())
    }

    fn logprob_vjp(
        &self,
        ids: &[u32],
        targets: &[usize],
        t: f32,
        coeffs: &dyn Fn(&[f32]) -> Vec<f32>,
        grads: &mut [f32],
    ) -> Result<Vec<f32>> {
        let lp = self.target_logprobs(ids, targets, t)?;
        let c = coeffs(&lp);
        let p = self.probs();
        for (j, &tg) in targets.iter().enumerate() {
            let a = ids[tg] as usize;
            for k in 0..2 {
                let onehot = if k == a { 1.0 } else { 0.0 };
                grads[k] += c[j] * (onehot - p[k]) as f32;
            }
        }
        Ok(lp)
    }
}

fn breakdown(r: f64) -> RewardBreakdown {
    RewardBreakdown {
        r_cell: r,
        r_order: 0.0,
        r_total: r,
        n_correct: r as usize,
        n_solution: 1,
    }
}

#[test]
fn bandit_moves_toward_better_action() {
    let mut policy = Bandit { logits: vec![0.0, 0.8] };
    let reference = Bandit { logits: policy.logits.clone() };
    let cfg = GrpoConfig {
        kl_beta: 0.0,
        group_size: 8,
        ..GrpoConfig::default()
    };
    let mut opt = AdamW::new(AdamWConfig { lr: 0.01, weight_decay: 0.0, ..AdamWConfig::default() }, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let initial = policy.probs()[0];
    for _ in 0..200 {
        let p = policy.probs();
        let rollouts = (0..cfg.group_size)
            .map(|_| {
                let a = if rng.random::<f64>() < p[0] { 0u32 } else { 1 };
                Rollout {
                    ids: vec![a],
                    logprobs: vec![p[a as usize].ln() as f32],
                    breakdown: breakdown(if a == 0 { 1.0 } else { 0.0 }),
                    advantage: 0.0,
                }
            })
            .collect();
        let mut group = RolloutGroup {
            prompt_id: "bandit".into(),
            prompt: vec![2],
            rollouts,
        };
        grpo::assign_advantages(&mut group).unwrap();
        let mean: f64 = group.rollouts.iter().map(|r| r.advantage).sum::<f64>() / 8.0;
        assert!(mean.abs() <= 1e-9);
        grpo::grpo_step(&mut policy, &mut opt, &reference, &[group], &cfg, Execution::Sequential).unwrap();
    }
    let final_p = policy.probs()[0];
    assert!(final_p - initial >= 0.2, "P(A) {initial} -> {final_p}");
}

proptest! {
    #[test]
    fn advantages_are_centered(rewards in prop::collection::vec(-100.0f64..100.0, 2..32)) {
        let a = grpo::compute_advantages(&rewards).unwrap();
        let mean = a.iter().sum::<f64>() / a.len() as f64;
        prop_assert!(mean.abs() <= 1e-9);
    }

    #[test]
    fn kl_term_is_nonnegative(lr in -30.0f64..0.0, l in -30.0f64..0.0) {
        prop_assert!(grpo::kl_term(lr, l) >= 0.0);
    }
}

fn setup() -> (Checkpoint, dataset::Corpus, RewardScales) {
    let cfg = CorpusConfig {
        n_train: 6,
        n_val: 4,
        n_test: 2,
        givens_min: 5,
        givens_max: 8,
        ..CorpusConfig::small(8)
    };
    let corpus = dataset::generate_corpus(&cfg, Execution::Sequential).unwrap();
    let vocab = Vocabulary::new(4).unwrap();
    let mc = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        vocab_size: vocab.size(),
        max_seq_len: vocab.max_seq_len(),
        seed: 4,
    };
    let ckpt = Checkpoint::new(Transformer::new(mc).unwrap(), vocab.hash());
    let means = orderhint::reward::BootstrapMeans { mean_cell: 0.2, mean_order: 0.5 };
    let scales = RewardScales::from_means(0.75, means, orderhint::reward::provenance(&ckpt, &corpus.validation)).unwrap();
    (ckpt, corpus, scales)
}

fn test_cfg() -> GrpoConfig {
    GrpoConfig {
        group_size: 4,
        batch_prompts: 2,
        steps: 3,
        lr: 1e-3,
        eval_interval: 2,
        max_new_tokens: 40,
        ..GrpoConfig::default()
    }
}

#[test]
fn identity_policy_has_unit_ratio_and_zero_kl() {
    let (ckpt, corpus, scales) = setup();
    let cfg = test_cfg();
    let group = grpo::generate_group(&ckpt.model, &corpus.train[0], &scales, &cfg, 0, Execution::Sequential).unwrap();
    // Recompute behaviour log-probs with the full forward so every term is exact.
    let mut exact = group.clone();
    for r in &mut exact.rollouts {
        let ids: Vec<u32> = exact.prompt.iter().chain(&r.ids).copied().collect();
        let targets: Vec<usize> = (exact.prompt.len()..ids.len()).collect();
        r.logprobs = ckpt.model.target_logprobs(&ids, &targets, 1.0).unwrap();
    }
    let (stats, _) = grpo::grpo_loss_and_grads(&ckpt.model, &ckpt.model, &[exact], &cfg, Execution::Sequential).unwrap();
    assert_eq!(stats.mean_ratio, 1.0);
    assert_eq!(stats.mean_kl, 0.0);
    assert_eq!(stats.clip_fraction, 0.0);

    for r in &group.rollouts {
        let ids: Vec<u32> = group.prompt.iter().chain(&r.ids).copied().collect();
        let targets: Vec<usize> = (group.prompt.len()..ids.len()).collect();
        let lp = ckpt.model.target_logprobs(&ids, &targets, 1.0).unwrap();
        for (a, b) in lp.iter().zip(&r.logprobs) {
            assert!((a - b).abs() <= 1e-5);
        }
    }
}

#[test]
fn groups_are_reproducible_and_bounded() {
    let (ckpt, corpus, scales) = setup();
    let cfg = GrpoConfig { group_size: 8, ..test_cfg() };
    let rec = &corpus.train[1];
    let a = grpo::generate_group(&ckpt.model, rec, &scales, &cfg, 3, Execution::Sequential).unwrap();
    let b = grpo::generate_group(&ckpt.model, rec, &scales, &cfg, 3, Execution::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rollouts.len(), 8);
    assert!(a.rollouts.iter().all(|r| r.ids.len() <= cfg.max_new_tokens));
}

#[test]
fn vanishing_temperature_gives_degenerate_group() {
    let (ckpt, corpus, scales) = setup();
    let cfg = GrpoConfig { group_size: 8, temperature: 1e-4, ..test_cfg() };
    let g = grpo::generate_group(&ckpt.model, &corpus.train[0], &scales, &cfg, 0, Execution::Sequential).unwrap();
    assert!(g.rollouts.iter().all(|r| r.ids == g.rollouts[0].ids));
    assert!(g.rollouts.iter().all(|r| r.advantage == 0.0));
}

#[test]
fn zero_advantages_and_no_kl_give_zero_loss() {
    let (ckpt, corpus, scales) = setup();
    let cfg = GrpoConfig { kl_beta: 0.0, ..test_cfg() };
    let mut g = grpo::generate_group(&ckpt.model, &corpus.train[0], &scales, &cfg, 0, Execution::Sequential).unwrap();
    g.rollouts.iter_mut().for_each(|r| r.advantage = 0.0);
    let (stats, grads) = grpo::grpo_loss_and_grads(&ckpt.model, &ckpt.model, &[g], &cfg, Execution::Sequential).unwrap();
    assert_eq!(stats.loss, 0.0);
    assert!(grads.iter().all(|&x| x == 0.0));
}

#[test]
fn unclipped_update_is_advantage_weighted_likelihood_gradient() {
    let (ckpt, corpus, scales) = setup();
    let cfg = GrpoConfig { kl_beta: 0.0, clip_eps: 1e9, ..test_cfg() };
    let model = &ckpt.model;
    let groups: Vec<RolloutGroup> = (0..2)
        .map(|i| grpo::generate_group(model, &corpus.train[i], &scales, &cfg, 0, Execution::Sequential).unwrap())
        .collect();
    let (_, grads) = grpo::grpo_loss_and_grads(model, model, &groups, &cfg, Execution::Sequential).unwrap();

    let n = groups.iter().map(|g| g.rollouts.len()).sum::<usize>() as f64;
    let mut direct = vec![0.0f32; model.num_params()];
    for g in &groups {
        for r in &g.rollouts {
            let ids: Vec<u32> = g.prompt.iter().chain(&r.ids).copied().collect();
            let targets: Vec<usize> = (g.prompt.len()..ids.len()).collect();
            let w = (-r.advantage / (n * targets.len() as f64)) as f32;
            model
                .logprob_vjp(&ids, &targets, 1.0, &|lp| {
                    // rho = exp(lp - behaviour), equal to 1 up to cache rounding
                    lp.iter().zip(&r.logprobs).map(|(l, b)| w * (l - b).exp()).collect()
                }, &mut direct)
                .unwrap();
        }
    }
    let scale = direct.iter().map(|x| x.abs()).fold(0.0f32, f32::max);
    assert!(scale > 0.0);
    for (a, b) in grads.iter().zip(&direct) {
        assert!((a - b).abs() <= 1e-5 * scale, "{a} vs {b}");
    }
}

#[test]
fn training_leaves_reference_untouched() {
    let (ckpt, corpus, scales) = setup();
    let before = ckpt.to_bytes();
    let out = grpo::run_grpo(&ckpt, &corpus, &scales, &test_cfg(), Execution::Sequential).unwrap();
    assert_eq!(ckpt.to_bytes(), before);
    assert_ne!(out.last.model.params(), ckpt.model.params());
    assert_eq!(out.metrics.len(), 3);
    assert!(out.metrics.iter().all(|m| m.mean_kl >= 0.0));
}

#[test]
fn run_is_deterministic_across_execution_modes() {
    let (ckpt, corpus, scales) = setup();
    let a = grpo::run_grpo(&ckpt, &corpus, &scales, &test_cfg(), Execution::Sequential).unwrap();
    let b = grpo::run_grpo(&ckpt, &corpus, &scales, &test_cfg(), Execution::default()).unwrap();
    assert_eq!(a.last.hash(), b.last.hash());
    assert_eq!(a.metrics, b.metrics);
}

#[test]
fn zero_steps_returns_input() {
    let (ckpt, corpus, scales) = setup();
    let cfg = GrpoConfig { steps: 0, ..test_cfg() };
    let out = grpo::run_grpo(&ckpt, &corpus, &scales, &cfg, Execution::Sequential).unwrap();
    assert_eq!(out.last.hash(), ckpt.hash());
    assert_eq!(out.best.hash(), ckpt.hash());
}

#[test]
fn pure_cell_mixture_logs_no_order_contribution() {
    let (ckpt, corpus, _) = setup();
    let means = orderhint::reward::BootstrapMeans { mean_cell: 0.2, mean_order: 0.5 };
    let scales = RewardScales::from_means(1.0, means, orderhint::reward::provenance(&ckpt, &corpus.validation)).unwrap();
    let out = grpo::run_grpo(&ckpt, &corpus, &scales, &test_cfg(), Execution::Sequential).unwrap();
    assert!(out.metrics.iter().all(|m| m.mean_order_contribution == 0.0));
}

#[test]
fn mismatched_scales_are_refused() {
    let (ckpt, corpus, scales) = setup();
    let mut other = ckpt.clone();
    other.model.params_mut()[0] += 1.0;
    let err = grpo::run_grpo(&other, &corpus, &scales, &test_cfg(), Execution::Sequential).unwrap_err();
    assert_eq!(err.class(), orderhint::ErrorClass::Provenance);
}

#[test]
fn sweep_has_one_row_per_mixture_plus_baselines() {
    let (ckpt, corpus, _) = setup();
    let cfg = GrpoConfig { steps: 1, ..test_cfg() };
    let alphas = [0.0, 0.5, 1.0];
    let (report, runs) = grpo::sweep_alpha(&ckpt, &ckpt, &corpus, &alphas, &cfg, Execution::Sequential).unwrap();
    assert_eq!(report.rows.len(), alphas.len() + 2);
    assert_eq!(runs.len(), alphas.len());
    assert!(report.rows.iter().all(|r| (0.0..=1.0).contains(&r.cell_accuracy)));
    assert_eq!(report.to_string().lines().count(), alphas.len() + 2 + 3);
}
