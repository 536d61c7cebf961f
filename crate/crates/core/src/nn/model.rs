//! Pre-norm decoder-only transformer with a hand-derived backward pass.
//!
//! Blocks are `x + attn(ln_1(x))` then `x + mlp(ln_2(x))`, with learned
//! absolute positions, GELU (tanh form) MLPs of width `4 d`, a final layer
//! norm and an untied output projection. All parameters live in one flat
//! buffer described by [`TensorInfo`]s so optimizers and checkpoints can
//! treat them uniformly.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::float::{gemm, Float};
use super::layout::{Init, LayerOffsets, Layout, TensorInfo};
use crate::codec::TokenSequence;
use crate::error::{Error, Result};
use crate::exec::Execution;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
/// Sequences per gradient chunk; bounds peak memory of per-item gradients.
const GRAD_CHUNK: usize = 16;

#[derive(Clone)]
pub struct Transformer<T: Float> {
    config: ModelConfig,
    layout: Arc<Layout>,
    params: Vec<T>,
}

impl<T: Float> std::fmt::Debug for Transformer<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Transformer")
            .field("config", &self.config)
            .field("dtype", &T::DTYPE)
            .field("num_params", &self.params.len())
            .finish()
    }
}

struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

struct LayerCache<T> {
    ln1: LnCache<T>,
    h1: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    y: Vec<T>,
    ln2: LnCache<T>,
    h2: Vec<T>,
    f: Vec<T>,
    g: Vec<T>,
}

struct Cache<T> {
    layers: Vec<LayerCache<T>>,
    lnf: LnCache<T>,
    xf: Vec<T>,
    logits: Vec<T>,
}

impl<T: Float> Transformer<T> {
    /// Freshly initialized model: `N(0, 0.02)` weights and embeddings, zero
    /// biases, unit norm gains, drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![T::zero(); layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0f64, INIT_STD).expect("valid std");
        for t in &layout.tensors {
            let slot = &mut params[t.range()];
            match t.init {
                Init::Normal => slot.iter_mut().for_each(|p| *p = T::c(normal.sample(&mut rng))),
                Init::Zeros => {}
                Init::Ones => slot.iter_mut().for_each(|p| *p = T::one()),
            }
        }
        Ok(Transformer {
            config,
            layout: Arc::new(layout),
            params,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::input(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Transformer {
            config,
            layout: Arc::new(layout),
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.layout.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout
            .tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &self.params[t.range()])
    }

    /// Same weights in another precision.
    pub fn cast<U: Float>(&self) -> Transformer<U> {
        Transformer {
            config: self.config,
            layout: self.layout.clone(),
            params: self
                .params
                .iter()
                .map(|&p| U::from_f64(p.to_f64().expect("finite")).expect("castable"))
                .collect(),
        }
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::input("empty token sequence"));
        }
        if ids.len() > self.config.max_seq_len {
            return Err(Error::input(format!(
                "sequence length {} exceeds max_seq_len {}",
                ids.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::input(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Logits `[len x vocab]` for one sequence.
    pub fn logits(&self, ids: &[u32]) -> Result<Vec<T>> {
        self.check_ids(ids)?;
        Ok(self.forward_cached(ids).logits)
    }

    /// Logits for each sequence of a batch; sequences may differ in length.
    pub fn forward<S: AsRef<[u32]> + Sync>(&self, batch: &[S], exec: Execution) -> Result<Vec<Vec<T>>> {
        exec.try_map(batch, |ids| self.logits(ids.as_ref()))
    }

    fn embed(&self, ids: &[u32], pos0: usize, x: &mut [T]) {
        let d = self.config.d_model;
        let p = &self.params;
        for (i, &tok) in ids.iter().enumerate() {
            let te = &p[self.layout.wte + tok as usize * d..][..d];
            let pe = &p[self.layout.wpe + (pos0 + i) * d..][..d];
            for ((o, &a), &b) in x[i * d..(i + 1) * d].iter_mut().zip(te).zip(pe) {
                *o = a + b;
            }
        }
    }

    fn linear(&self, x: &[T], n: usize, din: usize, w: usize, b: Option<usize>, dout: usize) -> Vec<T> {
        let mut out = vec![T::zero(); n * dout];
        let mut beta = T::zero();
        if let Some(b) = b {
            let bias = &self.params[b..b + dout];
            out.chunks_exact_mut(dout).for_each(|row| row.copy_from_slice(bias));
            beta = T::one();
        }
        let w = &self.params[w..w + din * dout];
        gemm(n, din, dout, T::one(), (x, din, 1), (w, dout, 1), beta, &mut out, dout, 1);
        out
    }

    fn forward_cached(&self, ids: &[u32]) -> Cache<T> {
        let c = &self.config;
        let (n, d, nh, hd) = (ids.len(), c.d_model, c.n_heads, c.head_dim());
        let scale = T::one() / T::c(hd as f64).sqrt();
        let p = &self.params;
        let mut x = vec![T::zero(); n * d];
        self.embed(ids, 0, &mut x);
        let mut layers = Vec::with_capacity(c.n_layers);
        for lo in &self.layout.layers {
            let mut h1 = vec![T::zero(); n * d];
            let ln1 = layer_norm(&x, &p[lo.ln1_g..][..d], &p[lo.ln1_b..][..d], n, d, &mut h1);
            let qkv = self.linear(&h1, n, d, lo.qkv_w, Some(lo.qkv_b), 3 * d);
            let mut probs = vec![T::zero(); nh * n * n];
            let mut y = vec![T::zero(); n * d];
            for h in 0..nh {
                attention(
                    (&qkv[h * hd..], 3 * d),
                    (&qkv[d + h * hd..], 3 * d),
                    (&qkv[2 * d + h * hd..], 3 * d),
                    n,
                    n,
                    0,
                    hd,
                    scale,
                    &mut probs[h * n * n..(h + 1) * n * n],
                    &mut y[h * hd..],
                    d,
                );
            }
            let a = self.linear(&y, n, d, lo.proj_w, Some(lo.proj_b), d);
            add_assign(&mut x, &a);
            let mut h2 = vec![T::zero(); n * d];
            let ln2 = layer_norm(&x, &p[lo.ln2_g..][..d], &p[lo.ln2_b..][..d], n, d, &mut h2);
            let f = self.linear(&h2, n, d, lo.fc_w, Some(lo.fc_b), 4 * d);
            let g: Vec<T> = f.iter().map(|&v| gelu(v)).collect();
            let m = self.linear(&g, n, 4 * d, lo.out_w, Some(lo.out_b), d);
            add_assign(&mut x, &m);
            layers.push(LayerCache {
                ln1,
                h1,
                qkv,
                probs,
                y,
                ln2,
                h2,
                f,
                g,
            });
        }
        let mut xf = vec![T::zero(); n * d];
        let lnf = layer_norm(
            &x,
            &p[self.layout.lnf_g..][..d],
            &p[self.layout.lnf_b..][..d],
            n,
            d,
            &mut xf,
        );
        let logits = self.linear(&xf, n, d, self.layout.head_w, None, c.vocab_size);
        Cache {
            layers,
            lnf,
            xf,
            logits,
        }
    }

    /// Accumulates parameter gradients for upstream `dlogits` into `grads`.
    fn backward(&self, ids: &[u32], cache: &Cache<T>, dlogits: &[T], grads: &mut [T]) {
        let c = &self.config;
        let (n, d, nh, hd, v) = (ids.len(), c.d_model, c.n_heads, c.head_dim(), c.vocab_size);
        let scale = T::one() / T::c(hd as f64).sqrt();
        let p = &self.params;
        let lay = &self.layout;

        let hw = lay.head_w;
        gemm(d, n, v, T::one(), (&cache.xf, 1, d), (dlogits, v, 1), T::one(), &mut grads[hw..], v, 1);
        let mut dxf = vec![T::zero(); n * d];
        gemm(n, v, d, T::one(), (dlogits, v, 1), (&p[hw..], 1, v), T::zero(), &mut dxf, d, 1);
        let mut dx = vec![T::zero(); n * d];
        layer_norm_backward(&dxf, &cache.lnf, &p[lay.lnf_g..][..d], n, d, grads, lay.lnf_g, lay.lnf_b, &mut dx);

        for (lo, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            self.mlp_backward(lo, lc, n, &mut dx, grads);
            // attention branch
            let dy = linear_backward(p, &lc.y, &dx, n, d, d, lo.proj_w, lo.proj_b, grads);
            let mut dqkv = vec![T::zero(); n * 3 * d];
            let mut dp = vec![T::zero(); n * n];
            for h in 0..nh {
                let probs = &lc.probs[h * n * n..(h + 1) * n * n];
                let q = &lc.qkv[h * hd..];
                let k = &lc.qkv[d + h * hd..];
                let vv = &lc.qkv[2 * d + h * hd..];
                let dyh = &dy[h * hd..];
                gemm(n, hd, n, T::one(), (dyh, d, 1), (vv, 1, 3 * d), T::zero(), &mut dp, n, 1);
                gemm(n, n, hd, T::one(), (probs, 1, n), (dyh, d, 1), T::zero(), &mut dqkv[2 * d + h * hd..], 3 * d, 1);
                for i in 0..n {
                    let pr = &probs[i * n..(i + 1) * n];
                    let dr = &mut dp[i * n..(i + 1) * n];
                    let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for (g, &pv) in dr.iter_mut().zip(pr) {
                        *g = pv * (*g - dot);
                    }
                }
                gemm(n, n, hd, scale, (&dp, n, 1), (k, 3 * d, 1), T::zero(), &mut dqkv[h * hd..], 3 * d, 1);
                gemm(n, n, hd, scale, (&dp, 1, n), (q, 3 * d, 1), T::zero(), &mut dqkv[d + h * hd..], 3 * d, 1);
            }
            let dh1 = linear_backward(p, &lc.h1, &dqkv, n, d, 3 * d, lo.qkv_w, lo.qkv_b, grads);
            layer_norm_backward(&dh1, &lc.ln1, &p[lo.ln1_g..][..d], n, d, grads, lo.ln1_g, lo.ln1_b, &mut dx);
        }

        for (i, &tok) in ids.iter().enumerate() {
            let row = &dx[i * d..(i + 1) * d];
            add_assign(&mut grads[lay.wte + tok as usize * d..][..d], row);
            add_assign(&mut grads[lay.wpe + i * d..][..d], row);
        }
    }

    fn mlp_backward(&self, lo: &LayerOffsets, lc: &LayerCache<T>, n: usize, dx: &mut [T], grads: &mut [T]) {
        let d = self.config.d_model;
        let p = &self.params;
        let mut df = linear_backward(p, &lc.g, dx, n, 4 * d, d, lo.out_w, lo.out_b, grads);
        for (g, &f) in df.iter_mut().zip(&lc.f) {
            *g *= gelu_grad(f);
        }
        let dh2 = linear_backward(p, &lc.h2, &df, n, d, 4 * d, lo.fc_w, lo.fc_b, grads);
        layer_norm_backward(&dh2, &lc.ln2, &p[lo.ln2_g..][..d], n, d, grads, lo.ln2_g, lo.ln2_b, dx);
    }

    /// Log-probabilities of `ids[t]` for each `t` in `targets` under
    /// `softmax(logits[t - 1] / temperature)`.
    pub fn target_logprobs(&self, ids: &[u32], targets: &[usize], temperature: T) -> Result<Vec<T>> {
        self.check_targets(ids, targets)?;
        let cache = self.forward_cached(ids);
        let v = self.config.vocab_size;
        let inv_t = T::one() / temperature;
        let mut buf = vec![T::zero(); v];
        Ok(targets
            .iter()
            .map(|&t| {
                log_softmax(&cache.logits[(t - 1) * v..t * v], inv_t, &mut buf);
                buf[ids[t] as usize]
            })
            .collect())
    }

    /// Computes target log-probabilities `lp`, asks `coeffs(lp)` for one
    /// coefficient per target, and accumulates the gradient of
    /// `sum_i coeff_i * lp_i` into `grads`. Returns `lp`.
    pub fn logprob_vjp(
        &self,
        ids: &[u32],
        targets: &[usize],
        temperature: T,
        coeffs: &dyn Fn(&[T]) -> Vec<T>,
        grads: &mut [T],
    ) -> Result<Vec<T>> {
        self.check_targets(ids, targets)?;
        if grads.len() != self.params.len() {
            return Err(Error::input("gradient buffer has the wrong length"));
        }
        let cache = self.forward_cached(ids);
        let v = self.config.vocab_size;
        let inv_t = T::one() / temperature;
        let mut lsm = vec![T::zero(); targets.len() * v];
        let lp: Vec<T> = targets
            .iter()
            .enumerate()
            .map(|(j, &t)| {
                let out = &mut lsm[j * v..(j + 1) * v];
                log_softmax(&cache.logits[(t - 1) * v..t * v], inv_t, out);
                out[ids[t] as usize]
            })
            .collect();
        let cs = coeffs(&lp);
        if cs.len() != targets.len() {
            return Err(Error::input("coefficient count does not match targets"));
        }
        let mut dlogits = vec![T::zero(); ids.len() * v];
        for (j, &t) in targets.iter().enumerate() {
            let cj = cs[j];
            if cj == T::zero() {
                continue;
            }
            let row = &mut dlogits[(t - 1) * v..t * v];
            // d lp / d logits = (onehot - softmax) / temperature
            for (o, &l) in row.iter_mut().zip(&lsm[j * v..(j + 1) * v]) {
                *o += -cj * l.exp() * inv_t;
            }
            row[ids[t] as usize] += cj * inv_t;
        }
        self.backward(ids, &cache, &dlogits, grads);
        Ok(lp)
    }

    fn check_targets(&self, ids: &[u32], targets: &[usize]) -> Result<()> {
        self.check_ids(ids)?;
        if let Some(&t) = targets.iter().find(|&&t| t == 0 || t >= ids.len()) {
            return Err(Error::input(format!(
                "target position {t} outside 1..{}",
                ids.len()
            )));
        }
        Ok(())
    }

    /// `sum over mask-true positions of weight * (-log p(token))` and its
    /// exact gradient. `weights[b][t]` is read only where the mask is set.
    pub fn weighted_token_loss(
        &self,
        batch: &[TokenSequence],
        weights: &[Vec<T>],
        exec: Execution,
    ) -> Result<(T, Vec<T>)> {
        if batch.is_empty() {
            return Err(Error::input("empty batch"));
        }
        if weights.len() != batch.len() {
            return Err(Error::input("one weight vector per sequence required"));
        }
        let targets: Vec<Vec<usize>> = batch
            .iter()
            .map(|s| (1..s.len).filter(|&t| s.loss_mask[t]).collect())
            .collect();
        if targets.iter().all(|t| t.is_empty()) {
            return Err(Error::input("batch has no loss-mask-true positions"));
        }
        for (s, w) in batch.iter().zip(weights) {
            if w.len() < s.len {
                return Err(Error::input("weight vector shorter than sequence"));
            }
        }
        let items: Vec<usize> = (0..batch.len()).collect();
        self.accumulate(&items, exec, |&b, grads| {
            let tg = &targets[b];
            if tg.is_empty() {
                return Ok(T::zero());
            }
            let w: Vec<T> = tg.iter().map(|&t| weights[b][t]).collect();
            let lp = self.logprob_vjp(
                batch[b].content(),
                tg,
                T::one(),
                &|_| w.iter().map(|&x| -x).collect(),
                grads,
            )?;
            Ok(lp.iter().zip(&w).map(|(&l, &x)| -x * l).sum())
        })
    }

    /// Mean token cross-entropy over mask-true positions and its gradient.
    pub fn loss_and_grads(&self, batch: &[TokenSequence], exec: Execution) -> Result<(T, Vec<T>)> {
        let total: usize = batch.iter().map(|s| s.loss_mask[..s.len].iter().filter(|&&m| m).count()).sum();
        if total == 0 {
            return Err(Error::input("batch has no loss-mask-true positions"));
        }
        let w = T::one() / T::c(total as f64);
        let weights: Vec<Vec<T>> = batch.iter().map(|s| vec![w; s.len]).collect();
        self.weighted_token_loss(batch, &weights, exec)
    }

    /// Runs `f` for each item with a private gradient buffer and sums the
    /// buffers and returned scalars in item order.
    pub(crate) fn accumulate<I, F>(&self, items: &[I], exec: Execution, f: F) -> Result<(T, Vec<T>)>
    where
        I: Sync,
        F: Fn(&I, &mut [T]) -> Result<T> + Sync + Send,
    {
        let np = self.params.len();
        let mut grads = vec![T::zero(); np];
        let mut total = T::zero();
        for chunk in items.chunks(GRAD_CHUNK) {
            let parts = exec.try_map(chunk, |item| {
                let mut g = vec![T::zero(); np];
                let s = f(item, &mut g)?;
                Ok::<_, Error>((s, g))
            })?;
            for (s, g) in parts {
                total += s;
                add_assign(&mut grads, &g);
            }
        }
        Ok((total, grads))
    }

    pub fn kv_cache(&self) -> KvCache<T> {
        let c = &self.config;
        KvCache {
            k: vec![vec![T::zero(); c.max_seq_len * c.d_model]; c.n_layers],
            v: vec![vec![T::zero(); c.max_seq_len * c.d_model]; c.n_layers],
            len: 0,
        }
    }

    /// Feeds `ids` after the tokens already in `cache` and returns the logits
    /// of the last fed position.
    pub fn extend(&self, cache: &mut KvCache<T>, ids: &[u32]) -> Result<Vec<T>> {
        let c = &self.config;
        let (m, d, nh, hd) = (ids.len(), c.d_model, c.n_heads, c.head_dim());
        let pos0 = cache.len;
        if m == 0 {
            return Err(Error::input("extend needs at least one token"));
        }
        if pos0 + m > c.max_seq_len {
            return Err(Error::input("kv cache is full"));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= c.vocab_size) {
            return Err(Error::input(format!("token id {bad} outside vocabulary")));
        }
        let kv_len = pos0 + m;
        let scale = T::one() / T::c(hd as f64).sqrt();
        let p = &self.params;
        let mut x = vec![T::zero(); m * d];
        self.embed(ids, pos0, &mut x);
        let mut probs = vec![T::zero(); m * kv_len];
        for (l, lo) in self.layout.layers.iter().enumerate() {
            let mut h1 = vec![T::zero(); m * d];
            layer_norm(&x, &p[lo.ln1_g..][..d], &p[lo.ln1_b..][..d], m, d, &mut h1);
            let qkv = self.linear(&h1, m, d, lo.qkv_w, Some(lo.qkv_b), 3 * d);
            for i in 0..m {
                let row = &qkv[i * 3 * d..(i + 1) * 3 * d];
                cache.k[l][(pos0 + i) * d..(pos0 + i + 1) * d].copy_from_slice(&row[d..2 * d]);
                cache.v[l][(pos0 + i) * d..(pos0 + i + 1) * d].copy_from_slice(&row[2 * d..]);
            }
            let mut y = vec![T::zero(); m * d];
            for h in 0..nh {
                attention(
                    (&qkv[h * hd..], 3 * d),
                    (&cache.k[l][h * hd..], d),
                    (&cache.v[l][h * hd..], d),
                    m,
                    kv_len,
                    pos0,
                    hd,
                    scale,
                    &mut probs,
                    &mut y[h * hd..],
                    d,
                );
            }
            let a = self.linear(&y, m, d, lo.proj_w, Some(lo.proj_b), d);
            add_assign(&mut x, &a);
            let mut h2 = vec![T::zero(); m * d];
            layer_norm(&x, &p[lo.ln2_g..][..d], &p[lo.ln2_b..][..d], m, d, &mut h2);
            let mut f = self.linear(&h2, m, d, lo.fc_w, Some(lo.fc_b), 4 * d);
            f.iter_mut().for_each(|v| *v = gelu(*v));
            let mo = self.linear(&f, m, 4 * d, lo.out_w, Some(lo.out_b), d);
            add_assign(&mut x, &mo);
        }
        cache.len = kv_len;
        let last = &x[(m - 1) * d..];
        let mut xf = vec![T::zero(); d];
        layer_norm(
            last,
            &p[self.layout.lnf_g..][..d],
            &p[self.layout.lnf_b..][..d],
            1,
            d,
            &mut xf,
        );
        Ok(self.linear(&xf, 1, d, self.layout.head_w, None, c.vocab_size))
    }
}

/// Per-layer key/value history for incremental decoding.
#[derive(Clone)]
pub struct KvCache<T> {
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    len: usize,
}

impl<T> KvCache<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn add_assign<T: Float>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
}

/// Causal attention for `m` query rows at absolute positions `pos0..pos0+m`
/// against `kv_len` key/value rows. `probs` receives `[m x kv_len]`.
#[allow(clippy::too_many_arguments)]
fn attention<T: Float>(
    q: (&[T], usize),
    k: (&[T], usize),
    v: (&[T], usize),
    m: usize,
    kv_len: usize,
    pos0: usize,
    hd: usize,
    scale: T,
    probs: &mut [T],
    y: &mut [T],
    rsy: usize,
) {
    gemm(m, hd, kv_len, scale, (q.0, q.1, 1), (k.0, 1, k.1), T::zero(), probs, kv_len, 1);
    for i in 0..m {
        let row = &mut probs[i * kv_len..(i + 1) * kv_len];
        let visible = pos0 + i + 1;
        let mx = row[..visible].iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut sum = T::zero();
        for s in row[..visible].iter_mut() {
            *s = (*s - mx).exp();
            sum += *s;
        }
        let inv = T::one() / sum;
        row[..visible].iter_mut().for_each(|s| *s *= inv);
        row[visible..].iter_mut().for_each(|s| *s = T::zero());
    }
    gemm(m, kv_len, hd, T::one(), (probs, kv_len, 1), (v.0, v.1, 1), T::zero(), y, rsy, 1);
}

fn layer_norm<T: Float>(x: &[T], g: &[T], b: &[T], n: usize, d: usize, out: &mut [T]) -> LnCache<T> {
    let mut xhat = vec![T::zero(); n * d];
    let mut rstd = vec![T::zero(); n];
    let inv_d = T::one() / T::c(d as f64);
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let r = T::one() / (var + T::c(LN_EPS)).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let xh = (row[j] - mean) * r;
            xhat[i * d + j] = xh;
            out[i * d + j] = xh * g[j] + b[j];
        }
    }
    LnCache { xhat, rstd }
}

/// Accumulates gain/bias gradients into `grads` and the input gradient into `dx`.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward<T: Float>(
    dout: &[T],
    ln: &LnCache<T>,
    g: &[T],
    n: usize,
    d: usize,
    grads: &mut [T],
    g_off: usize,
    b_off: usize,
    dx: &mut [T],
) {
    let inv_d = T::one() / T::c(d as f64);
    let mut dxhat = vec![T::zero(); d];
    for i in 0..n {
        let dr = &dout[i * d..(i + 1) * d];
        let xh = &ln.xhat[i * d..(i + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for j in 0..d {
            grads[g_off + j] += dr[j] * xh[j];
            grads[b_off + j] += dr[j];
            dxhat[j] = dr[j] * g[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let r = ln.rstd[i];
        for j in 0..d {
            dx[i * d + j] += r * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
}

/// Backward of `y = x @ W + b`: accumulates `dW`, `db` and returns `dx`.
#[allow(clippy::too_many_arguments)]
fn linear_backward<T: Float>(
    p: &[T],
    x: &[T],
    dy: &[T],
    n: usize,
    din: usize,
    dout: usize,
    w: usize,
    b: usize,
    grads: &mut [T],
) -> Vec<T> {
    gemm(din, n, dout, T::one(), (x, 1, din), (dy, dout, 1), T::one(), &mut grads[w..], dout, 1);
    for row in dy.chunks_exact(dout) {
        add_assign(&mut grads[b..b + dout], row);
    }
    let mut dx = vec![T::zero(); n * din];
    gemm(n, dout, din, T::one(), (dy, dout, 1), (&p[w..], 1, dout), T::zero(), &mut dx, din, 1);
    dx
}

const GELU_K: f64 = 0.044715;

#[inline]
fn gelu<T: Float>(x: T) -> T {
    let c = T::c((2.0 / std::f64::consts::PI).sqrt());
    let half = T::c(0.5);
    half * x * (T::one() + (c * (x + T::c(GELU_K) * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::c((2.0 / std::f64::consts::PI).sqrt());
    let half = T::c(0.5);
    let t = (c * (x + T::c(GELU_K) * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::c(3.0 * GELU_K) * x * x)
}

/// `out = log_softmax(row * inv_temp)`.
pub fn log_softmax<T: Float>(row: &[T], inv_temp: T, out: &mut [T]) {
    let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b * inv_temp));
    let lse = row.iter().map(|&v| (v * inv_temp - mx).exp()).sum::<T>().ln() + mx;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v * inv_temp - lse;
    }
}
