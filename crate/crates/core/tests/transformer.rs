use orderhint::codec::{self, Vocabulary, BOS, EOS, SEP};
use orderhint::dataset::{CorpusConfig, Order};
use orderhint::nn::{log_softmax, sample_completion, ModelConfig, Sampling, Transformer};
use orderhint::{dataset, Execution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny<T: orderhint::nn::Float>(seed: u64) -> Transformer<T> {
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        vocab_size: 9,
        max_seq_len: 51,
        seed,
    };
    Transformer::new(cfg).unwrap()
}

fn small_batch(n: usize) -> Vec<codec::TokenSequence> {
    let cfg = CorpusConfig {
        n_train: n,
        n_val: 1,
        n_test: 1,
        ..CorpusConfig::small(3)
    };
    let corpus = dataset::generate_corpus(&cfg, Execution::Sequential).unwrap();
    let vocab = Vocabulary::new(4).unwrap();
    orderhint::sft::encode_all(&corpus.train, Order::Random, &vocab).unwrap()
}

#[test]
fn gradient_matches_central_differences() {
    let mut model = tiny::<f64>(11);
    let batch = small_batch(3);
    let exec = Execution::Sequential;
    let (_, grad) = model.loss_and_grads(&batch, exec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-5;
    for _ in 0..20 {
        let dir: Vec<f64> = (0..model.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let analytic: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        let base = model.params().to_vec();
        let mut eval = |s: f64| {
            for ((p, b), d) in model.params_mut().iter_mut().zip(&base).zip(&dir) {
                *p = b + s * d;
            }
            model.loss_and_grads(&batch, exec).unwrap().0
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        eval(0.0);
        let rel = (analytic - numeric).abs() / analytic.abs().max(1e-8);
        assert!(rel < 1e-4, "analytic {analytic} numeric {numeric} rel {rel}");
    }
}

#[test]
fn future_tokens_do_not_change_past_logits() {
    let model = tiny::<f32>(2);
    let ids = [BOS, 4, 5, 6, SEP, 7, 8, 4, EOS];
    let a = model.logits(&ids).unwrap();
    let mut changed = ids;
    changed[7] = 6;
    changed[8] = 5;
    let b = model.logits(&changed).unwrap();
    let v = 9;
    assert_eq!(a[..7 * v], b[..7 * v]);
    assert_ne!(a[7 * v..], b[7 * v..]);
}

#[test]
fn forward_is_deterministic_and_mode_independent() {
    let model = tiny::<f32>(4);
    let batch: Vec<Vec<u32>> = small_batch(5).iter().map(|s| s.content().to_vec()).collect();
    let a = model.forward(&batch, Execution::Sequential).unwrap();
    let b = model.forward(&batch, Execution::default()).unwrap();
    assert_eq!(a, b);
    let seqs = small_batch(20);
    let (la, ga) = model.loss_and_grads(&seqs, Execution::Sequential).unwrap();
    let (lb, gb) = model.loss_and_grads(&seqs, Execution::default()).unwrap();
    assert_eq!(la.to_bits(), lb.to_bits());
    assert_eq!(ga, gb);
}

#[test]
fn log_softmax_normalizes() {
    let row = [0.3f64, -2.0, 5.5, 1.0, 0.0];
    let mut out = [0.0; 5];
    log_softmax(&row, 1.0, &mut out);
    let total: f64 = out.iter().map(|x| x.exp()).sum();
    assert!((total - 1.0).abs() < 1e-12);
    let mut u = [0.0f64; 9];
    log_softmax(&[7.0; 9], 0.5, &mut u);
    assert!(u.iter().all(|&x| (x + 9f64.ln()).abs() < 1e-12));
}

#[test]
fn zero_output_weights_give_uniform_cross_entropy() {
    let mut model = tiny::<f64>(1);
    let v = model.config().vocab_size;
    let d = model.config().d_model;
    let head: Vec<usize> = {
        let t = model.tensors().iter().find(|t| t.name == "lm_head.weight").unwrap();
        (t.offset..t.offset + d * v).collect()
    };
    for i in head {
        model.params_mut()[i] = 0.0;
    }
    let (loss, _) = model.loss_and_grads(&small_batch(2), Execution::Sequential).unwrap();
    assert!((loss - (v as f64).ln()).abs() < 1e-12);
}

#[test]
fn loss_ignores_positions_outside_the_mask() {
    let model = tiny::<f64>(8);
    let seqs = small_batch(2);
    let (base, gbase) = model.loss_and_grads(&seqs, Execution::Sequential).unwrap();
    // Trailing tokens with the mask off contribute nothing.
    let mut padded = seqs.clone();
    for s in &mut padded {
        s.ids.extend([EOS, 5, 6]);
        s.loss_mask.extend([false; 3]);
    }
    let (l2, g2) = model.loss_and_grads(&padded, Execution::Sequential).unwrap();
    assert_eq!(base, l2);
    assert_eq!(gbase, g2);
}

#[test]
fn weighted_loss_properties() {
    let model = tiny::<f64>(9);
    let seqs = small_batch(3);
    let exec = Execution::Sequential;
    let zeros: Vec<Vec<f64>> = seqs.iter().map(|s| vec![0.0; s.len]).collect();
    let (l0, g0) = model.weighted_token_loss(&seqs, &zeros, exec).unwrap();
    assert_eq!(l0, 0.0);
    assert!(g0.iter().all(|&g| g == 0.0));

    let ones: Vec<Vec<f64>> = seqs.iter().map(|s| vec![0.7; s.len]).collect();
    let neg: Vec<Vec<f64>> = seqs.iter().map(|s| vec![-0.7; s.len]).collect();
    let (lp, gp) = model.weighted_token_loss(&seqs, &ones, exec).unwrap();
    let (ln, gn) = model.weighted_token_loss(&seqs, &neg, exec).unwrap();
    assert!((lp + ln).abs() < 1e-12);
    assert!(gp.iter().zip(&gn).all(|(a, b)| (a + b).abs() < 1e-12));

    let total: usize = seqs.iter().map(|s| s.num_targets()).sum();
    let mean: Vec<Vec<f64>> = seqs.iter().map(|s| vec![1.0 / total as f64; s.len]).collect();
    let (lw, gw) = model.weighted_token_loss(&seqs, &mean, exec).unwrap();
    let (lm, gm) = model.loss_and_grads(&seqs, exec).unwrap();
    assert!((lw - lm).abs() < 1e-12);
    assert!(gw.iter().zip(&gm).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn empty_or_unmasked_batches_are_rejected() {
    let model = tiny::<f32>(0);
    assert!(model.loss_and_grads(&[], Execution::Sequential).is_err());
    let mut s = small_batch(1);
    s[0].loss_mask.iter_mut().for_each(|m| *m = false);
    assert!(model.loss_and_grads(&s, Execution::Sequential).is_err());
}

fn prompts(n: usize) -> Vec<Vec<u32>> {
    let cfg = CorpusConfig {
        n_train: n,
        n_val: 1,
        n_test: 1,
        ..CorpusConfig::small(21)
    };
    let corpus = dataset::generate_corpus(&cfg, Execution::Sequential).unwrap();
    let vocab = Vocabulary::new(4).unwrap();
    corpus
        .train
        .iter()
        .map(|r| codec::encode_prompt(&r.puzzle, &vocab).unwrap())
        .collect()
}

#[test]
fn greedy_is_deterministic_and_respects_budget() {
    let model = tiny::<f32>(3);
    let p = &prompts(1)[0];
    let a = sample_completion(&model, p, Sampling::Greedy, 40).unwrap();
    let b = sample_completion(&model, p, Sampling::Greedy, 40).unwrap();
    assert_eq!(a, b);
    let one = sample_completion(&model, p, Sampling::Greedy, 1).unwrap();
    assert_eq!(one.ids.len(), 1);
    assert_eq!(one.ids[0], a.ids[0]);
    assert!(sample_completion(&model, p, Sampling::Greedy, 0).is_err());
}

#[test]
fn vanishing_temperature_matches_greedy() {
    let model = tiny::<f32>(6);
    for (i, p) in prompts(20).iter().enumerate() {
        let g = sample_completion(&model, p, Sampling::Greedy, 30).unwrap();
        let mode = Sampling::Categorical {
            temperature: 1e-4,
            seed: i as u64,
        };
        let s = sample_completion(&model, p, mode, 30).unwrap();
        assert_eq!(g.ids, s.ids);
    }
}

#[test]
fn sampled_logprobs_match_recomputation() {
    let model = tiny::<f32>(7);
    for (i, p) in prompts(5).iter().enumerate() {
        for temperature in [1.0, 0.7] {
            let mode = Sampling::Categorical { temperature, seed: i as u64 };
            let c = sample_completion(&model, p, mode, 40).unwrap();
            let ids: Vec<u32> = p.iter().chain(&c.ids).copied().collect();
            let targets: Vec<usize> = (p.len()..ids.len()).collect();
            let lp = model.target_logprobs(&ids, &targets, temperature as f32).unwrap();
            for (a, b) in lp.iter().zip(&c.logprobs) {
                assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn seeded_sampling_is_reproducible() {
    let model = tiny::<f32>(7);
    let p = &prompts(1)[0];
    let mode = Sampling::Categorical { temperature: 1.0, seed: 99 };
    assert_eq!(
        sample_completion(&model, p, mode, 40).unwrap(),
        sample_completion(&model, p, mode, 40).unwrap()
    );
}
