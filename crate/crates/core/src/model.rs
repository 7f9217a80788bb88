//! Decoder checkpoint surgery and a self-contained reference forward pass.
//!
//! The expansion inserts one identity-initialized block after every
//! `period` base blocks: the new block copies its predecessor's weights
//! except the attention output projection and the feed-forward down
//! projection, which are zeroed, so the block's residual contribution is
//! exactly zero and the expanded model computes the same function as the
//! base model.
//!
//! The forward pass is the verification tool: token embedding, pre-norm
//! (RMS) causal grouped-query attention with rotary positions, pre-norm
//! SiLU-gated feed-forward, final norm, unembedding. Reverse-mode
//! gradients are implemented for the same pass; they are meant for tiny
//! models, enough to validate the freeze-mask contract.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Checkpoint, Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub rope_theta: f64,
    pub context_length: usize,
    pub norm_eps: f64,
}

impl ModelConfig {
    /// The full-scale architecture after expansion: 40 layers, 32 heads,
    /// hidden size 4096, 8,192-token context.
    pub fn full_scale() -> Self {
        ModelConfig {
            n_layers: 40,
            n_heads: 32,
            n_kv_heads: 8,
            d_model: 4096,
            d_ff: 14336,
            vocab_size: 128_256,
            rope_theta: 500_000.0,
            context_length: 8192,
            norm_eps: 1e-5,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(Error::ConfigMismatch(format!(
                "n_heads {} not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::ConfigMismatch(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Canonical per-layer tensor suffixes.
pub const LAYER_TENSORS: [&str; 9] = [
    "attn.q", "attn.k", "attn.v", "attn.o", "mlp.gate", "mlp.up", "mlp.down", "norm_attn",
    "norm_mlp",
];

pub fn layer_tensor_name(layer: usize, suffix: &str) -> String {
    format!("layers.{layer}.{suffix}")
}

// ---------------------------------------------------------------------------
// expansion planning and surgery

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionPlan {
    pub period: usize,
    pub copies_per_group: usize,
    /// source_to_target[j] is the target index of base layer j.
    pub source_to_target: Vec<usize>,
    pub new_targets: Vec<usize>,
    pub result_layers: usize,
}

impl ExpansionPlan {
    /// A plan that inserts nothing.
    pub fn identity(base_layers: usize) -> Self {
        ExpansionPlan {
            period: base_layers,
            copies_per_group: 0,
            source_to_target: (0..base_layers).collect(),
            new_targets: Vec::new(),
            result_layers: base_layers,
        }
    }
}

/// One new block after every `period` base blocks, base order preserved.
/// Base layer j lands at target j + floor(j / period).
pub fn plan_interleave(base_layers: usize, period: usize) -> Result<ExpansionPlan> {
    if period == 0 || base_layers % period != 0 {
        return Err(Error::NonDivisiblePeriod(base_layers, period));
    }
    let groups = base_layers / period;
    let source_to_target = (0..base_layers).map(|j| j + j / period).collect();
    let new_targets = (0..groups).map(|g| (g + 1) * period + g).collect();
    Ok(ExpansionPlan {
        period,
        copies_per_group: 1,
        source_to_target,
        new_targets,
        result_layers: base_layers + groups,
    })
}

/// tensor name -> trainable flag.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FreezeMask {
    pub entries: BTreeMap<String, bool>,
}

impl FreezeMask {
    pub fn trainable(&self, name: &str) -> bool {
        self.entries.get(name).copied().unwrap_or(false)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for (name, trainable) in &self.entries {
            writeln!(w, "{name}\t{trainable}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for line in r.lines() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (name, flag) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("freeze-mask line missing tab: {line:?}")))?;
            let flag = flag
                .parse::<bool>()
                .map_err(|e| Error::Format(format!("bad trainable flag: {e}")))?;
            entries.insert(name.to_string(), flag);
        }
        Ok(FreezeMask { entries })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ExpandOptions {
    /// When set, embedding/unembedding rows from this id upward are newly
    /// initialized vocabulary rows and marked trainable in the mask.
    pub new_vocab_rows_from: Option<usize>,
}

impl Default for ExpandOptions {
    fn default() -> Self {
        ExpandOptions {
            new_vocab_rows_from: None,
        }
    }
}

/// Block-expansion surgery. Base tensors are copied bit-identically to
/// their mapped indices; each new block copies the immediately preceding
/// base block with zeroed `attn.o` and `mlp.down`. The freeze mask marks
/// exactly the new blocks' tensors trainable.
pub fn expand_checkpoint<T: Scalar>(
    ckpt: &Checkpoint<T>,
    plan: &ExpansionPlan,
    options: ExpandOptions,
) -> Result<(Checkpoint<T>, FreezeMask)> {
    let config = &ckpt.config;
    if plan.source_to_target.len() != config.n_layers {
        return Err(Error::ConfigMismatch(format!(
            "plan covers {} layers, checkpoint has {}",
            plan.source_to_target.len(),
            config.n_layers
        )));
    }
    // completeness check up front so errors name the missing tensor
    for name in ["embed", "unembed", "norm_final"] {
        ckpt.get(name)?;
    }
    for layer in 0..config.n_layers {
        for suffix in LAYER_TENSORS {
            ckpt.get(&layer_tensor_name(layer, suffix))?;
        }
    }

    let mut out_config = config.clone();
    out_config.n_layers = plan.result_layers;
    let mut out = Checkpoint::new(
        out_config,
        format!("expanded from {} layers, period {}", config.n_layers, plan.period),
    );
    let mut mask = FreezeMask::default();

    for name in ["embed", "unembed", "norm_final"] {
        out.insert(name, ckpt.get(name)?.clone());
        mask.entries.insert(name.to_string(), false);
    }
    if let Some(start) = options.new_vocab_rows_from {
        mask.entries.insert(format!("embed.rows.{start}+"), true);
        mask.entries.insert(format!("unembed.rows.{start}+"), true);
    }

    // target index -> source base layer, None for new blocks
    let mut target_source: Vec<Option<usize>> = vec![None; plan.result_layers];
    for (j, &t) in plan.source_to_target.iter().enumerate() {
        target_source[t] = Some(j);
    }
    for &t in &plan.new_targets {
        // the block immediately preceding a new block is always a base block
        let pred = target_source[t - 1].expect("new blocks follow base blocks");
        for suffix in LAYER_TENSORS {
            let src = ckpt.get(&layer_tensor_name(pred, suffix))?;
            let mut tensor = src.clone();
            if suffix == "attn.o" || suffix == "mlp.down" {
                tensor.data.iter_mut().for_each(|v| *v = T::zero());
            }
            let name = layer_tensor_name(t, suffix);
            mask.entries.insert(name.clone(), true);
            out.insert(name, tensor);
        }
    }
    for (j, &t) in plan.source_to_target.iter().enumerate() {
        for suffix in LAYER_TENSORS {
            let name = layer_tensor_name(t, suffix);
            mask.entries.insert(name.clone(), false);
            out.insert(name, ckpt.get(&layer_tensor_name(j, suffix))?.clone());
        }
    }
    Ok((out, mask))
}

// ---------------------------------------------------------------------------
// reference forward pass

pub fn rmsnorm<T: Scalar>(x: &[T], w: &[T], eps: T) -> (Vec<T>, T) {
    let d = T::cast_from(x.len() as f64);
    let mean_sq = x.iter().fold(T::zero(), |a, &v| a + v * v) / d;
    let inv_rms = T::one() / (mean_sq + eps).sqrt();
    (
        x.iter().zip(w).map(|(&v, &wi)| wi * v * inv_rms).collect(),
        inv_rms,
    )
}

/// In-place softmax over a slice.
pub fn softmax<T: Scalar>(row: &mut [T]) {
    let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Rotates consecutive pairs of one head's vector by the position-dependent
/// angles; `sign` of -1 applies the inverse rotation (used by backprop).
pub fn rope_rotate<T: Scalar>(head: &mut [T], pos: usize, theta: f64, sign: f64) {
    let hd = head.len();
    for j in 0..hd / 2 {
        let freq = theta.powf(-2.0 * j as f64 / hd as f64);
        let angle = sign * pos as f64 * freq;
        let (sin, cos) = (T::cast_from(angle.sin()), T::cast_from(angle.cos()));
        let (a, b) = (head[2 * j], head[2 * j + 1]);
        head[2 * j] = a * cos - b * sin;
        head[2 * j + 1] = a * sin + b * cos;
    }
}

/// y = W x with W row-major (out, in).
fn matvec<T: Scalar>(w: &Tensor<T>, x: &[T]) -> Vec<T> {
    assert_eq!(w.shape[1], x.len());
    (0..w.shape[0])
        .map(|r| {
            w.row(r)
                .iter()
                .zip(x)
                .fold(T::zero(), |acc, (&wv, &xv)| acc + wv * xv)
        })
        .collect()
}

fn silu<T: Scalar>(z: T) -> T {
    z / (T::one() + (-z).exp())
}

struct LayerCache<T> {
    x_in: Vec<Vec<T>>,
    a: Vec<Vec<T>>,
    inv_rms_attn: Vec<T>,
    q: Vec<Vec<T>>,
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    /// probs[h][t] has length t+1 (causal).
    probs: Vec<Vec<Vec<T>>>,
    cat: Vec<Vec<T>>,
    x_mid: Vec<Vec<T>>,
    m: Vec<Vec<T>>,
    inv_rms_mlp: Vec<T>,
    gate: Vec<Vec<T>>,
    up: Vec<Vec<T>>,
    hidden: Vec<Vec<T>>,
}

struct ForwardCache<T> {
    layers: Vec<LayerCache<T>>,
    x_out: Vec<Vec<T>>,
    f: Vec<Vec<T>>,
    inv_rms_final: Vec<T>,
    logits: Vec<Vec<T>>,
}

/// Causal grouped-query attention over already-rotated q/k and plain v.
/// Returns the concatenated head outputs and the per-head attention rows.
/// q: [n][n_heads*hd], k/v: [n][n_kv*hd].
pub fn grouped_attention<T: Scalar>(
    q: &[Vec<T>],
    k: &[Vec<T>],
    v: &[Vec<T>],
    n_heads: usize,
    n_kv_heads: usize,
) -> (Vec<Vec<T>>, Vec<Vec<Vec<T>>>) {
    let n = q.len();
    let hd = q[0].len() / n_heads;
    let group = n_heads / n_kv_heads;
    let scale = T::cast_from(1.0 / (hd as f64).sqrt());
    let mut cat = vec![vec![T::zero(); n_heads * hd]; n];
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let kv = h / group;
        let mut head_probs = Vec::with_capacity(n);
        for t in 0..n {
            let qh = &q[t][h * hd..(h + 1) * hd];
            let mut scores: Vec<T> = (0..=t)
                .map(|s| {
                    let kh = &k[s][kv * hd..(kv + 1) * hd];
                    qh.iter().zip(kh).fold(T::zero(), |a, (&x, &y)| a + x * y) * scale
                })
                .collect();
            softmax(&mut scores);
            for (s, &p) in scores.iter().enumerate() {
                let vh = &v[s][kv * hd..(kv + 1) * hd];
                for (o, &vv) in cat[t][h * hd..(h + 1) * hd].iter_mut().zip(vh) {
                    *o += p * vv;
                }
            }
            head_probs.push(scores);
        }
        probs.push(head_probs);
    }
    (cat, probs)
}

fn run_forward<T: Scalar>(ckpt: &Checkpoint<T>, token_ids: &[u32]) -> Result<ForwardCache<T>> {
    let config = &ckpt.config;
    config.validate()?;
    if token_ids.len() > config.context_length {
        return Err(Error::ContextOverflow(token_ids.len(), config.context_length));
    }
    let embed = ckpt.get("embed")?;
    for &id in token_ids {
        if id as usize >= config.vocab_size {
            return Err(Error::TokenIdOutOfRange(id, config.vocab_size));
        }
    }
    let n = token_ids.len();
    let hd = config.head_dim();
    let eps = T::cast_from(config.norm_eps);

    let mut x: Vec<Vec<T>> = token_ids
        .iter()
        .map(|&id| embed.row(id as usize).to_vec())
        .collect();

    let mut layers = Vec::with_capacity(config.n_layers);
    for layer in 0..config.n_layers {
        let get = |s: &str| ckpt.get(&layer_tensor_name(layer, s));
        let (wq, wk, wv, wo) = (get("attn.q")?, get("attn.k")?, get("attn.v")?, get("attn.o")?);
        let (wg, wu, wd) = (get("mlp.gate")?, get("mlp.up")?, get("mlp.down")?);
        let (na, nm) = (get("norm_attn")?, get("norm_mlp")?);

        let mut a = Vec::with_capacity(n);
        let mut inv_rms_attn = Vec::with_capacity(n);
        for xt in &x {
            let (at, r) = rmsnorm(xt, &na.data, eps);
            a.push(at);
            inv_rms_attn.push(r);
        }
        let mut q: Vec<Vec<T>> = a.iter().map(|at| matvec(wq, at)).collect();
        let mut k: Vec<Vec<T>> = a.iter().map(|at| matvec(wk, at)).collect();
        let v: Vec<Vec<T>> = a.iter().map(|at| matvec(wv, at)).collect();
        for (t, qt) in q.iter_mut().enumerate() {
            for h in 0..config.n_heads {
                rope_rotate(&mut qt[h * hd..(h + 1) * hd], t, config.rope_theta, 1.0);
            }
        }
        for (t, kt) in k.iter_mut().enumerate() {
            for h in 0..config.n_kv_heads {
                rope_rotate(&mut kt[h * hd..(h + 1) * hd], t, config.rope_theta, 1.0);
            }
        }
        let (cat, probs) = grouped_attention(&q, &k, &v, config.n_heads, config.n_kv_heads);
        let x_mid: Vec<Vec<T>> = x
            .iter()
            .zip(&cat)
            .map(|(xt, ct)| {
                let proj = matvec(wo, ct);
                xt.iter().zip(&proj).map(|(&a, &b)| a + b).collect()
            })
            .collect();

        let mut m = Vec::with_capacity(n);
        let mut inv_rms_mlp = Vec::with_capacity(n);
        for xt in &x_mid {
            let (mt, r) = rmsnorm(xt, &nm.data, eps);
            m.push(mt);
            inv_rms_mlp.push(r);
        }
        let gate: Vec<Vec<T>> = m.iter().map(|mt| matvec(wg, mt)).collect();
        let up: Vec<Vec<T>> = m.iter().map(|mt| matvec(wu, mt)).collect();
        let hidden: Vec<Vec<T>> = gate
            .iter()
            .zip(&up)
            .map(|(gt, ut)| gt.iter().zip(ut).map(|(&g, &u)| silu(g) * u).collect())
            .collect();
        let x_out: Vec<Vec<T>> = x_mid
            .iter()
            .zip(&hidden)
            .map(|(xt, ht)| {
                let proj = matvec(wd, ht);
                xt.iter().zip(&proj).map(|(&a, &b)| a + b).collect()
            })
            .collect();

        layers.push(LayerCache {
            x_in: std::mem::replace(&mut x, x_out),
            a,
            inv_rms_attn,
            q,
            k,
            v,
            probs,
            cat,
            x_mid,
            m,
            inv_rms_mlp,
            gate,
            up,
            hidden,
        });
    }

    let nf = ckpt.get("norm_final")?;
    let unembed = ckpt.get("unembed")?;
    let mut f = Vec::with_capacity(n);
    let mut inv_rms_final = Vec::with_capacity(n);
    for xt in &x {
        let (ft, r) = rmsnorm(xt, &nf.data, eps);
        f.push(ft);
        inv_rms_final.push(r);
    }
    let logits: Vec<Vec<T>> = f.iter().map(|ft| matvec(unembed, ft)).collect();
    Ok(ForwardCache {
        layers,
        x_out: x,
        f,
        inv_rms_final,
        logits,
    })
}

/// Reference forward pass: logits of shape (seq_len, vocab_size).
pub fn forward<T: Scalar>(ckpt: &Checkpoint<T>, token_ids: &[u32]) -> Result<Tensor<T>> {
    let cache = run_forward(ckpt, token_ids)?;
    Ok(Tensor::from_rows(cache.logits))
}

/// Max absolute logit difference between two checkpoints over probe inputs.
pub fn verify_identity<T: Scalar>(
    base: &Checkpoint<T>,
    expanded: &Checkpoint<T>,
    probes: &[Vec<u32>],
) -> Result<f64> {
    let (a, b) = (&base.config, &expanded.config);
    if a.d_model != b.d_model
        || a.n_heads != b.n_heads
        || a.n_kv_heads != b.n_kv_heads
        || a.d_ff != b.d_ff
        || a.vocab_size != b.vocab_size
        || a.rope_theta != b.rope_theta
        || a.norm_eps != b.norm_eps
    {
        return Err(Error::ConfigMismatch(
            "base and expanded checkpoints disagree on the architecture".to_string(),
        ));
    }
    let mut max_diff = 0.0f64;
    for probe in probes {
        let la = forward(base, probe)?;
        let lb = forward(expanded, probe)?;
        for (x, y) in la.data.iter().zip(&lb.data) {
            max_diff = max_diff.max((x.cast_f64() - y.cast_f64()).abs());
        }
    }
    Ok(max_diff)
}

// ---------------------------------------------------------------------------
// reverse-mode gradients (tiny reference models)

pub struct GradStore<T> {
    pub grads: HashMap<String, Tensor<T>>,
}

impl<T: Scalar> GradStore<T> {
    fn accumulate_outer(&mut self, name: &str, shape: &[usize], dy: &[T], x: &[T]) {
        let g = self
            .grads
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(shape.to_vec()));
        let cols = shape[1];
        for (r, &d) in dy.iter().enumerate() {
            for (c, &xv) in x.iter().enumerate() {
                g.data[r * cols + c] += d * xv;
            }
        }
    }

    fn accumulate_vec(&mut self, name: &str, dy: &[T]) {
        let g = self
            .grads
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(vec![dy.len()]));
        for (gv, &d) in g.data.iter_mut().zip(dy) {
            *gv += d;
        }
    }

    /// Zeroes gradients of tensors the mask does not mark trainable.
    pub fn apply_freeze(&mut self, mask: &FreezeMask) {
        for (name, grad) in self.grads.iter_mut() {
            if !mask.trainable(name) {
                grad.data.iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }
}

fn matvec_t<T: Scalar>(w: &Tensor<T>, dy: &[T]) -> Vec<T> {
    let (rows, cols) = (w.shape[0], w.shape[1]);
    let mut dx = vec![T::zero(); cols];
    for r in 0..rows {
        let wr = w.row(r);
        let d = dy[r];
        for c in 0..cols {
            dx[c] += wr[c] * d;
        }
    }
    dx
}

fn rmsnorm_backward<T: Scalar>(dy: &[T], x: &[T], w: &[T], inv_rms: T) -> (Vec<T>, Vec<T>) {
    let d = T::cast_from(x.len() as f64);
    let s = dy
        .iter()
        .zip(w)
        .zip(x)
        .fold(T::zero(), |acc, ((&dyi, &wi), &xi)| acc + dyi * wi * xi);
    let r3 = inv_rms * inv_rms * inv_rms;
    let dx = dy
        .iter()
        .zip(w)
        .zip(x)
        .map(|((&dyi, &wi), &xi)| dyi * wi * inv_rms - xi * r3 * s / d)
        .collect();
    let dw = dy
        .iter()
        .zip(x)
        .map(|(&dyi, &xi)| dyi * xi * inv_rms)
        .collect();
    (dx, dw)
}

/// Mean cross-entropy of next-token predictions and gradients w.r.t. every
/// weight tensor. `targets[t]` is scored against `logits[t]`.
pub fn cross_entropy_grads<T: Scalar>(
    ckpt: &Checkpoint<T>,
    token_ids: &[u32],
    targets: &[u32],
) -> Result<(T, GradStore<T>)> {
    assert_eq!(token_ids.len(), targets.len());
    let cache = run_forward(ckpt, token_ids)?;
    let config = &ckpt.config;
    let n = token_ids.len();
    let hd = config.head_dim();
    let group = config.n_heads / config.n_kv_heads;
    let scale = T::cast_from(1.0 / (hd as f64).sqrt());
    let inv_n = T::one() / T::cast_from(n as f64);

    let mut store = GradStore {
        grads: HashMap::new(),
    };

    // loss and dlogits
    let mut loss = T::zero();
    let mut dlogits: Vec<Vec<T>> = Vec::with_capacity(n);
    for (t, row) in cache.logits.iter().enumerate() {
        let mut p = row.clone();
        softmax(&mut p);
        let target = targets[t] as usize;
        loss -= p[target].ln() * inv_n;
        let mut drow = p;
        drow[target] -= T::one();
        drow.iter_mut().for_each(|v| *v *= inv_n);
        dlogits.push(drow);
    }

    // unembedding and final norm
    let unembed = ckpt.get("unembed")?;
    let nf = ckpt.get("norm_final")?;
    let mut dx: Vec<Vec<T>> = Vec::with_capacity(n);
    for t in 0..n {
        store.accumulate_outer("unembed", &unembed.shape, &dlogits[t], &cache.f[t]);
        let df = matvec_t(unembed, &dlogits[t]);
        let (dxt, dwf) = rmsnorm_backward(&df, &cache.x_out[t], &nf.data, cache.inv_rms_final[t]);
        store.accumulate_vec("norm_final", &dwf);
        dx.push(dxt);
    }

    for layer in (0..config.n_layers).rev() {
        let lc = &cache.layers[layer];
        let name = |s: &str| layer_tensor_name(layer, s);
        let get = |s: &str| ckpt.get(&name(s));
        let (wq, wk, wv, wo) = (get("attn.q")?, get("attn.k")?, get("attn.v")?, get("attn.o")?);
        let (wg, wu, wd) = (get("mlp.gate")?, get("mlp.up")?, get("mlp.down")?);
        let (na, nm) = (get("norm_attn")?, get("norm_mlp")?);

        // mlp block: x_out = x_mid + Wd (silu(g) * u), m = rmsnorm(x_mid)
        let mut dx_mid: Vec<Vec<T>> = Vec::with_capacity(n);
        for t in 0..n {
            let dh = matvec_t(wd, &dx[t]);
            store.accumulate_outer(&name("mlp.down"), &wd.shape, &dx[t], &lc.hidden[t]);
            let mut dg = vec![T::zero(); dh.len()];
            let mut du = vec![T::zero(); dh.len()];
            for i in 0..dh.len() {
                let g = lc.gate[t][i];
                let sig = T::one() / (T::one() + (-g).exp());
                let silu_g = g * sig;
                du[i] = dh[i] * silu_g;
                // d silu(g)/dg = sig * (1 + g * (1 - sig))
                dg[i] = dh[i] * lc.up[t][i] * sig * (T::one() + g * (T::one() - sig));
            }
            store.accumulate_outer(&name("mlp.gate"), &wg.shape, &dg, &lc.m[t]);
            store.accumulate_outer(&name("mlp.up"), &wu.shape, &du, &lc.m[t]);
            let mut dm = matvec_t(wg, &dg);
            for (a, b) in dm.iter_mut().zip(matvec_t(wu, &du)) {
                *a += b;
            }
            let (dxm_norm, dwn) =
                rmsnorm_backward(&dm, &lc.x_mid[t], &nm.data, lc.inv_rms_mlp[t]);
            store.accumulate_vec(&name("norm_mlp"), &dwn);
            let dxm: Vec<T> = dx[t].iter().zip(&dxm_norm).map(|(&a, &b)| a + b).collect();
            dx_mid.push(dxm);
        }

        // attention block: x_mid = x_in + Wo cat
        let mut dcat: Vec<Vec<T>> = Vec::with_capacity(n);
        for t in 0..n {
            store.accumulate_outer(&name("attn.o"), &wo.shape, &dx_mid[t], &lc.cat[t]);
            dcat.push(matvec_t(wo, &dx_mid[t]));
        }
        let mut dq = vec![vec![T::zero(); config.n_heads * hd]; n];
        let mut dk = vec![vec![T::zero(); config.n_kv_heads * hd]; n];
        let mut dv = vec![vec![T::zero(); config.n_kv_heads * hd]; n];
        for h in 0..config.n_heads {
            let kv = h / group;
            for t in 0..n {
                let dctx = &dcat[t][h * hd..(h + 1) * hd];
                let probs = &lc.probs[h][t];
                // dp and dv
                let mut dp: Vec<T> = Vec::with_capacity(t + 1);
                for s in 0..=t {
                    let vh = &lc.v[s][kv * hd..(kv + 1) * hd];
                    dp.push(dctx.iter().zip(vh).fold(T::zero(), |a, (&x, &y)| a + x * y));
                    for (dvv, &dc) in dv[s][kv * hd..(kv + 1) * hd].iter_mut().zip(dctx) {
                        *dvv += probs[s] * dc;
                    }
                }
                // softmax backward
                let dot = dp
                    .iter()
                    .zip(probs)
                    .fold(T::zero(), |a, (&x, &y)| a + x * y);
                for s in 0..=t {
                    let dscore = probs[s] * (dp[s] - dot) * scale;
                    let kh = &lc.k[s][kv * hd..(kv + 1) * hd];
                    let qh = &lc.q[t][h * hd..(h + 1) * hd];
                    for i in 0..hd {
                        dq[t][h * hd + i] += dscore * kh[i];
                        dk[s][kv * hd + i] += dscore * qh[i];
                    }
                }
            }
        }
        // un-rotate and push through the projections
        let mut da: Vec<Vec<T>> = vec![vec![T::zero(); config.d_model]; n];
        for t in 0..n {
            for h in 0..config.n_heads {
                rope_rotate(&mut dq[t][h * hd..(h + 1) * hd], t, config.rope_theta, -1.0);
            }
            for h in 0..config.n_kv_heads {
                rope_rotate(&mut dk[t][h * hd..(h + 1) * hd], t, config.rope_theta, -1.0);
            }
            store.accumulate_outer(&name("attn.q"), &wq.shape, &dq[t], &lc.a[t]);
            store.accumulate_outer(&name("attn.k"), &wk.shape, &dk[t], &lc.a[t]);
            store.accumulate_outer(&name("attn.v"), &wv.shape, &dv[t], &lc.a[t]);
            for (acc, v) in da[t].iter_mut().zip(matvec_t(wq, &dq[t])) {
                *acc += v;
            }
            for (acc, v) in da[t].iter_mut().zip(matvec_t(wk, &dk[t])) {
                *acc += v;
            }
            for (acc, v) in da[t].iter_mut().zip(matvec_t(wv, &dv[t])) {
                *acc += v;
            }
        }
        let mut dx_in: Vec<Vec<T>> = Vec::with_capacity(n);
        for t in 0..n {
            let (dxa, dwn) = rmsnorm_backward(&da[t], &lc.x_in[t], &na.data, lc.inv_rms_attn[t]);
            store.accumulate_vec(&name("norm_attn"), &dwn);
            dx_in.push(dx_mid[t].iter().zip(&dxa).map(|(&a, &b)| a + b).collect());
        }
        dx = dx_in;
    }

    // embedding rows
    let embed = ckpt.get("embed")?;
    let demb = store
        .grads
        .entry("embed".to_string())
        .or_insert_with(|| Tensor::zeros(embed.shape.clone()));
    for (t, &id) in token_ids.iter().enumerate() {
        for (g, &d) in demb.row_mut(id as usize).iter_mut().zip(&dx[t]) {
            *g += d;
        }
    }

    Ok((loss, store))
}

// ---------------------------------------------------------------------------
// toy checkpoint construction

/// A randomly initialized checkpoint with the canonical tensor set, for
/// desk-scale experiments and tests.
pub fn random_checkpoint<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Checkpoint<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random = |shape: Vec<usize>, scale: f64| {
        let n: usize = shape.iter().product();
        Tensor {
            data: (0..n)
                .map(|_| T::cast_from(rng.gen_range(-scale..scale)))
                .collect(),
            shape,
        }
    };
    let d = config.d_model;
    let hd = config.head_dim();
    let scale = 0.4 / (d as f64).sqrt();
    let mut ckpt = Checkpoint::new(config.clone(), "random toy checkpoint");
    ckpt.insert("embed", random(vec![config.vocab_size, d], scale));
    ckpt.insert("unembed", random(vec![config.vocab_size, d], scale));
    for layer in 0..config.n_layers {
        let name = |s: &str| layer_tensor_name(layer, s);
        ckpt.insert(name("attn.q"), random(vec![config.n_heads * hd, d], scale));
        ckpt.insert(name("attn.k"), random(vec![config.n_kv_heads * hd, d], scale));
        ckpt.insert(name("attn.v"), random(vec![config.n_kv_heads * hd, d], scale));
        ckpt.insert(name("attn.o"), random(vec![d, config.n_heads * hd], scale));
        ckpt.insert(name("mlp.gate"), random(vec![config.d_ff, d], scale));
        ckpt.insert(name("mlp.up"), random(vec![config.d_ff, d], scale));
        ckpt.insert(name("mlp.down"), random(vec![d, config.d_ff], scale));
        let mut ones = Tensor::zeros(vec![d]);
        ones.data.iter_mut().for_each(|v| *v = T::one());
        ckpt.insert(name("norm_attn"), ones.clone());
        ckpt.insert(name("norm_mlp"), ones);
    }
    let mut ones = Tensor::zeros(vec![d]);
    ones.data.iter_mut().for_each(|v| *v = T::one());
    ckpt.insert("norm_final", ones);
    Ok(ckpt)
}
