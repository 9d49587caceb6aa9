use std::fmt::Write as _;

use crate::dist::{Rng, TokenId};
use crate::error::{Error, Result};

use super::cache::KvCache;
use super::{AttentionSpec, HiddenState};

/// Architecture of a [`TinyTransformer`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Base vocabulary; the only ids the output head scores.
    pub vocab: usize,
    /// Appended `[MASK]` input ids, `vocab..vocab + mask_count`.
    pub mask_count: usize,
    pub max_position: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
    /// Base embedding rows and the output head are copies of a target model's
    /// and stay frozen during training.
    pub share_embeddings_with_target: bool,
    pub init_seed: u64,
}

/// The only positional encoding implemented; recorded in checkpoints.
pub const POSITIONAL_ENCODING: &str = "rope";

impl Default for ModelConfig {
    fn default() -> Self {
        Self::target(64)
    }
}

impl ModelConfig {
    /// Default target: 2 layers, width 64, 4 heads.
    pub fn target(vocab: usize) -> Self {
        Self {
            layers: 2,
            d_model: 64,
            heads: 4,
            d_ff: 128,
            vocab,
            mask_count: 0,
            max_position: 512,
            rope_base: 10_000.0,
            norm_eps: 1e-6,
            share_embeddings_with_target: false,
            init_seed: 0,
        }
    }

    /// Default drafter: one layer of the target's width with `k` mask tokens.
    pub fn drafter(vocab: usize, k: usize) -> Self {
        Self {
            layers: 1,
            mask_count: k,
            ..Self::target(vocab)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn total_ids(&self) -> usize {
        self.vocab + self.mask_count
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("model config: {m}")));
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 || self.d_ff == 0 {
            return bad("layers, d_model, heads and d_ff must be positive");
        }
        if self.vocab == 0 {
            return bad("vocab must be positive");
        }
        if self.d_model % self.heads != 0 || self.head_dim() % 2 != 0 {
            return bad("d_model must split into heads of even width");
        }
        if self.max_position == 0 {
            return bad("max_position must be positive");
        }
        if !(self.rope_base.is_finite() && self.rope_base > 1.0) {
            return bad("rope_base must exceed 1");
        }
        if !(self.norm_eps.is_finite() && self.norm_eps > 0.0) {
            return bad("norm_eps must be positive");
        }
        Ok(())
    }

    /// `key = value` lines, the textual form stored in checkpoints.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "positional = {POSITIONAL_ENCODING}");
        let _ = writeln!(s, "layers = {}", self.layers);
        let _ = writeln!(s, "d_model = {}", self.d_model);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "d_ff = {}", self.d_ff);
        let _ = writeln!(s, "vocab = {}", self.vocab);
        let _ = writeln!(s, "mask_count = {}", self.mask_count);
        let _ = writeln!(s, "max_position = {}", self.max_position);
        let _ = writeln!(s, "rope_base = {:?}", self.rope_base);
        let _ = writeln!(s, "norm_eps = {:?}", self.norm_eps);
        let _ = writeln!(
            s,
            "share_embeddings_with_target = {}",
            self.share_embeddings_with_target
        );
        let _ = writeln!(s, "init_seed = {}", self.init_seed);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::target(1);
        let mut seen = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Malformed(format!("config line without '=': {line}")))?;
            let (key, value) = (key.trim(), value.trim());
            let num = |v: &str| -> Result<usize> {
                v.parse()
                    .map_err(|_| Error::Malformed(format!("config {key}: bad integer {v:?}")))
            };
            let float = |v: &str| -> Result<f64> {
                v.parse()
                    .map_err(|_| Error::Malformed(format!("config {key}: bad float {v:?}")))
            };
            match key {
                "positional" => {
                    if value != POSITIONAL_ENCODING {
                        return Err(Error::Malformed(format!(
                            "unsupported positional encoding {value:?}"
                        )));
                    }
                }
                "layers" => cfg.layers = num(value)?,
                "d_model" => cfg.d_model = num(value)?,
                "heads" => cfg.heads = num(value)?,
                "d_ff" => cfg.d_ff = num(value)?,
                "vocab" => cfg.vocab = num(value)?,
                "mask_count" => cfg.mask_count = num(value)?,
                "max_position" => cfg.max_position = num(value)?,
                "rope_base" => cfg.rope_base = float(value)?,
                "norm_eps" => cfg.norm_eps = float(value)?,
                "share_embeddings_with_target" => {
                    cfg.share_embeddings_with_target = value
                        .parse()
                        .map_err(|_| Error::Malformed(format!("config {key}: bad bool {value:?}")))?
                }
                "init_seed" => {
                    cfg.init_seed = value
                        .parse()
                        .map_err(|_| Error::Malformed(format!("config {key}: bad u64 {value:?}")))?
                }
                other => return Err(Error::Malformed(format!("unknown config key {other:?}"))),
            }
            seen.push(key.to_string());
        }
        for required in ["layers", "d_model", "heads", "d_ff", "vocab", "mask_count", "max_position"] {
            if !seen.iter().any(|k| k == required) {
                return Err(Error::Malformed(format!("config is missing {required}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A named `f32` parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    fn new(name: String, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            name,
            shape,
            data: vec![0.0; len],
        }
    }
}

// Tensor layout: [embedding, per layer 8 tensors, final_norm, head].
pub(crate) const EMBEDDING: usize = 0;
pub(crate) const ATTN_NORM: usize = 0;
pub(crate) const WQ: usize = 1;
pub(crate) const WK: usize = 2;
pub(crate) const WV: usize = 3;
pub(crate) const WO: usize = 4;
pub(crate) const MLP_NORM: usize = 5;
pub(crate) const W_UP: usize = 6;
pub(crate) const W_DOWN: usize = 7;
pub(crate) const PER_LAYER: usize = 8;

pub(crate) fn layer_tensor(layer: usize, which: usize) -> usize {
    1 + layer * PER_LAYER + which
}

pub(crate) fn final_norm_index(cfg: &ModelConfig) -> usize {
    1 + cfg.layers * PER_LAYER
}

pub(crate) fn head_index(cfg: &ModelConfig) -> usize {
    2 + cfg.layers * PER_LAYER
}

/// Names and shapes every checkpoint of `cfg` must contain, in order.
pub(crate) fn expected_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut out = vec![("embedding".to_string(), vec![cfg.total_ids(), d])];
    for l in 0..cfg.layers {
        let p = |n: &str| format!("layers.{l}.{n}");
        out.push((p("attn_norm"), vec![d]));
        out.push((p("wq"), vec![d, d]));
        out.push((p("wk"), vec![d, d]));
        out.push((p("wv"), vec![d, d]));
        out.push((p("wo"), vec![d, d]));
        out.push((p("mlp_norm"), vec![d]));
        out.push((p("w_up"), vec![d, cfg.d_ff]));
        out.push((p("w_down"), vec![cfg.d_ff, d]));
    }
    out.push(("final_norm".to_string(), vec![d]));
    out.push(("head".to_string(), vec![d, cfg.vocab]));
    out
}

/// Small pre-norm decoder with rotary position encoding driven entirely by the
/// caller-supplied position indices.
///
/// Parameters are stored as `f32`; arithmetic runs in `f64`.
#[derive(Debug, Clone)]
pub struct TinyTransformer {
    config: ModelConfig,
    params: Vec<Tensor>,
    wide: Vec<Vec<f64>>,
    rope: Vec<f64>,
}

/// Logits over the base vocabulary and final-norm hidden states, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub(crate) n: usize,
    pub(crate) vocab: usize,
    pub(crate) d_model: usize,
    pub(crate) logits: Vec<f64>,
    pub(crate) hidden: Vec<f64>,
}

impl ForwardOutput {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn logits_row(&self, i: usize) -> &[f64] {
        &self.logits[i * self.vocab..(i + 1) * self.vocab]
    }

    pub fn hidden_row(&self, i: usize) -> &[f64] {
        &self.hidden[i * self.d_model..(i + 1) * self.d_model]
    }

    pub fn hidden_state(&self, i: usize) -> HiddenState {
        HiddenState(self.hidden_row(i).to_vec())
    }
}

/// Activations kept for reverse-mode differentiation.
#[derive(Debug, Default)]
pub(crate) struct Tape {
    pub tokens: Vec<TokenId>,
    pub positions: Vec<usize>,
    pub mask: Vec<bool>,
    pub layers: Vec<LayerTape>,
    pub final_in: Vec<f64>,
    pub final_inv_rms: Vec<f64>,
    pub hidden: Vec<f64>,
}

#[derive(Debug, Default)]
pub(crate) struct LayerTape {
    pub x_in: Vec<f64>,
    pub attn_in: Vec<f64>,
    pub attn_inv_rms: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// `[row][head][key]`, zero where masked.
    pub weights: Vec<f64>,
    pub attn_out: Vec<f64>,
    pub x_mid: Vec<f64>,
    pub mlp_in: Vec<f64>,
    pub mlp_inv_rms: Vec<f64>,
    pub up: Vec<f64>,
    pub act: Vec<f64>,
}

pub(crate) fn rms_norm(x: &[f64], weight: &[f64], eps: f64, out: &mut [f64]) -> f64 {
    let mean_sq = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (mean_sq + eps).sqrt();
    for ((o, &v), &w) in out.iter_mut().zip(x).zip(weight) {
        *o = v * inv * w;
    }
    inv
}

/// `out = x · w` for `x` of length `rows(w)`, `w` row-major `[in × out]`.
pub(crate) fn vec_mat(x: &[f64], w: &[f64], out: &mut [f64]) {
    let cols = out.len();
    out.iter_mut().for_each(|o| *o = 0.0);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * cols..(i + 1) * cols];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

impl TinyTransformer {
    /// Freshly initialized model: uniform weights scaled by fan-in, unit norm
    /// gains, all drawn from `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.init_seed);
        let mut params: Vec<Tensor> = expected_layout(&config)
            .into_iter()
            .map(|(name, shape)| Tensor::new(name, shape))
            .collect();
        for t in params.iter_mut() {
            if t.shape.len() == 1 {
                t.data.iter_mut().for_each(|v| *v = 1.0);
                continue;
            }
            // Embedding rows are looked up, not multiplied, so they get unit scale.
            let bound = if t.name == "embedding" {
                1.0
            } else {
                1.0 / (t.shape[0] as f64).sqrt()
            };
            for v in t.data.iter_mut() {
                *v = ((2.0 * rng.uniform() - 1.0) * bound) as f32;
            }
        }
        Self::from_params(config, params)
    }

    /// Assembles a model from tensors, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = expected_layout(&config);
        if layout.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&params) {
            if name != &t.name || shape != &t.shape {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {} {:?} does not match expected {name} {shape:?}",
                    t.name, t.shape
                )));
            }
            if t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::ShapeMismatch(format!("tensor {name} has wrong length")));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("tensor {name} has non-finite values")));
            }
        }
        let mut model = Self {
            rope: rope_table(&config),
            config,
            params,
            wide: Vec::new(),
        };
        model.refresh();
        Ok(model)
    }

    fn refresh(&mut self) {
        self.wide = self
            .params
            .iter()
            .map(|t| t.data.iter().map(|&v| v as f64).collect())
            .collect();
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Mutates parameters in place and refreshes the compute copy.
    pub fn update_params<F: FnOnce(&mut [Tensor])>(&mut self, f: F) {
        f(&mut self.params);
        self.refresh();
    }

    /// Overwrites one coordinate of the compute copy only, returning the old
    /// value. The stored `f32` parameters are untouched, so finite-difference
    /// probes are exact in `f64`.
    pub(crate) fn set_compute_value(&mut self, tensor: usize, index: usize, value: f64) -> f64 {
        std::mem::replace(&mut self.wide[tensor][index], value)
    }

    pub(crate) fn w(&self, index: usize) -> &[f64] {
        &self.wide[index]
    }

    /// Copies embedding rows of the base vocabulary and the output head from
    /// `target`, and marks them as shared.
    pub fn share_embeddings_from(&mut self, target: &TinyTransformer) -> Result<()> {
        let (a, b) = (&self.config, target.config());
        if a.d_model != b.d_model || a.vocab != b.vocab {
            return Err(Error::DimensionMismatch(format!(
                "cannot share embeddings between width {}/vocab {} and width {}/vocab {}",
                a.d_model, a.vocab, b.d_model, b.vocab
            )));
        }
        let rows = a.vocab * a.d_model;
        let head = head_index(a);
        let target_head = head_index(b);
        self.config.share_embeddings_with_target = true;
        self.update_params(|p| {
            p[EMBEDDING].data[..rows].copy_from_slice(&target.params[EMBEDDING].data[..rows]);
            p[head].data.copy_from_slice(&target.params[target_head].data);
        });
        Ok(())
    }

    /// Cache-free forward over `tokens` with an explicit attention spec.
    pub fn forward(&self, tokens: &[TokenId], attn: &AttentionSpec) -> Result<ForwardOutput> {
        let mut cache = KvCache::new(self);
        self.run(&mut cache, tokens, attn.positions(), attn.mask(), None)
    }

    /// Forward over a block of new tokens appended to `cache`.
    ///
    /// Every new token sees all cache entries; among the new tokens,
    /// `mask[i * n + j]` decides visibility. The block's keys and values are
    /// appended to the cache as speculative entries.
    pub fn forward_cached(
        &self,
        cache: &mut KvCache,
        tokens: &[TokenId],
        positions: &[usize],
        mask: &[bool],
    ) -> Result<ForwardOutput> {
        cache.check_owner(self)?;
        self.run(cache, tokens, positions, mask, None)
    }

    pub(crate) fn forward_taped(
        &self,
        tokens: &[TokenId],
        attn: &AttentionSpec,
    ) -> Result<(ForwardOutput, Tape)> {
        let mut cache = KvCache::new(self);
        let mut tape = Tape::default();
        let out = self.run(&mut cache, tokens, attn.positions(), attn.mask(), Some(&mut tape))?;
        Ok((out, tape))
    }

    fn check_inputs(&self, tokens: &[TokenId], positions: &[usize], mask: &[bool]) -> Result<()> {
        let n = tokens.len();
        if positions.len() != n || mask.len() != n * n {
            return Err(Error::DimensionMismatch(format!(
                "{n} tokens, {} positions, {} mask entries",
                positions.len(),
                mask.len()
            )));
        }
        let limit = self.config.total_ids();
        if let Some(&id) = tokens.iter().find(|&&t| t >= limit) {
            return Err(Error::TokenOutOfRange { id, limit });
        }
        if let Some(&position) = positions.iter().find(|&&p| p >= self.config.max_position) {
            return Err(Error::PositionOverflow {
                position,
                max: self.config.max_position,
            });
        }
        Ok(())
    }

    fn rotate(&self, x: &mut [f64], position: usize) {
        let hd = self.config.head_dim();
        let half = hd / 2;
        let row = &self.rope[position * hd..(position + 1) * hd];
        for head in x.chunks_exact_mut(hd) {
            for i in 0..half {
                let (c, s) = (row[2 * i], row[2 * i + 1]);
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * c - b * s;
                head[2 * i + 1] = a * s + b * c;
            }
        }
    }

    /// Inverse rotation, used by the backward pass.
    pub(crate) fn unrotate(&self, x: &mut [f64], position: usize) {
        let hd = self.config.head_dim();
        let half = hd / 2;
        let row = &self.rope[position * hd..(position + 1) * hd];
        for head in x.chunks_exact_mut(hd) {
            for i in 0..half {
                let (c, s) = (row[2 * i], row[2 * i + 1]);
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * c + b * s;
                head[2 * i + 1] = -a * s + b * c;
            }
        }
    }

    fn run(
        &self,
        cache: &mut KvCache,
        tokens: &[TokenId],
        positions: &[usize],
        mask: &[bool],
        mut tape: Option<&mut Tape>,
    ) -> Result<ForwardOutput> {
        self.check_inputs(tokens, positions, mask)?;
        let cfg = &self.config;
        let (n, d, ff, heads, hd) = (tokens.len(), cfg.d_model, cfg.d_ff, cfg.heads, cfg.head_dim());
        let cached = cache.len();
        let keys_total = cached + n;
        let scale = 1.0 / (hd as f64).sqrt();

        let mut x = vec![0.0; n * d];
        let emb = self.w(EMBEDDING);
        for (i, &t) in tokens.iter().enumerate() {
            x[i * d..(i + 1) * d].copy_from_slice(&emb[t * d..(t + 1) * d]);
        }
        if let Some(tape) = tape.as_deref_mut() {
            tape.tokens = tokens.to_vec();
            tape.positions = positions.to_vec();
            tape.mask = mask.to_vec();
        }

        let mut normed = vec![0.0; n * d];
        let mut inv_rms = vec![0.0; n];
        let mut q = vec![0.0; n * d];
        let mut k = vec![0.0; n * d];
        let mut v = vec![0.0; n * d];
        let mut attn_out = vec![0.0; n * d];
        let mut proj = vec![0.0; d];
        let mut scores = vec![0.0; keys_total];
        let mut up = vec![0.0; n * ff];
        let mut act = vec![0.0; n * ff];

        for layer in 0..cfg.layers {
            let mut lt = tape.as_ref().map(|_| LayerTape {
                x_in: x.clone(),
                weights: vec![0.0; n * heads * n],
                ..LayerTape::default()
            });

            let attn_norm = self.w(layer_tensor(layer, ATTN_NORM));
            for i in 0..n {
                let row = i * d..(i + 1) * d;
                inv_rms[i] = rms_norm(&x[row.clone()], attn_norm, cfg.norm_eps, &mut normed[row]);
            }
            let (wq, wk, wv) = (
                self.w(layer_tensor(layer, WQ)),
                self.w(layer_tensor(layer, WK)),
                self.w(layer_tensor(layer, WV)),
            );
            for i in 0..n {
                let row = i * d..(i + 1) * d;
                vec_mat(&normed[row.clone()], wq, &mut q[row.clone()]);
                vec_mat(&normed[row.clone()], wk, &mut k[row.clone()]);
                vec_mat(&normed[row.clone()], wv, &mut v[row.clone()]);
                self.rotate(&mut q[row.clone()], positions[i]);
                self.rotate(&mut k[row], positions[i]);
            }

            {
                let (ck, cv) = cache.layer(layer);
                for i in 0..n {
                    for h in 0..heads {
                        let qh = &q[i * d + h * hd..i * d + (h + 1) * hd];
                        let mut max = f64::NEG_INFINITY;
                        for j in 0..keys_total {
                            let kj = if j < cached {
                                &ck[j * d + h * hd..j * d + (h + 1) * hd]
                            } else {
                                let jj = j - cached;
                                if !mask[i * n + jj] {
                                    continue;
                                }
                                &k[jj * d + h * hd..jj * d + (h + 1) * hd]
                            };
                            let s = qh.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                            scores[j] = s;
                            max = max.max(s);
                        }
                        let mut sum = 0.0;
                        for j in 0..keys_total {
                            if j >= cached && !mask[i * n + j - cached] {
                                continue;
                            }
                            let e = (scores[j] - max).exp();
                            scores[j] = e;
                            sum += e;
                        }
                        let out = &mut attn_out[i * d + h * hd..i * d + (h + 1) * hd];
                        out.iter_mut().for_each(|o| *o = 0.0);
                        for j in 0..keys_total {
                            let vj = if j < cached {
                                &cv[j * d + h * hd..j * d + (h + 1) * hd]
                            } else {
                                let jj = j - cached;
                                if !mask[i * n + jj] {
                                    continue;
                                }
                                &v[jj * d + h * hd..jj * d + (h + 1) * hd]
                            };
                            let w = scores[j] / sum;
                            if let Some(lt) = lt.as_mut() {
                                // Taped runs are cache-free, so j indexes the block.
                                lt.weights[(i * heads + h) * n + j] = w;
                            }
                            for (o, &val) in out.iter_mut().zip(vj) {
                                *o += w * val;
                            }
                        }
                    }
                }
            }
            cache.append(layer, &k, &v);

            let wo = self.w(layer_tensor(layer, WO));
            for i in 0..n {
                vec_mat(&attn_out[i * d..(i + 1) * d], wo, &mut proj);
                for (xv, p) in x[i * d..(i + 1) * d].iter_mut().zip(&proj) {
                    *xv += p;
                }
            }
            if let Some(lt) = lt.as_mut() {
                lt.attn_in = normed.clone();
                lt.attn_inv_rms = inv_rms.clone();
                lt.q = q.clone();
                lt.k = k.clone();
                lt.v = v.clone();
                lt.attn_out = attn_out.clone();
                lt.x_mid = x.clone();
            }

            let mlp_norm = self.w(layer_tensor(layer, MLP_NORM));
            let (w_up, w_down) = (self.w(layer_tensor(layer, W_UP)), self.w(layer_tensor(layer, W_DOWN)));
            for i in 0..n {
                let row = i * d..(i + 1) * d;
                inv_rms[i] = rms_norm(&x[row.clone()], mlp_norm, cfg.norm_eps, &mut normed[row.clone()]);
                let urow = i * ff..(i + 1) * ff;
                vec_mat(&normed[row.clone()], w_up, &mut up[urow.clone()]);
                for (a, &u) in act[urow.clone()].iter_mut().zip(&up[urow.clone()]) {
                    *a = silu(u);
                }
                vec_mat(&act[urow], w_down, &mut proj);
                for (xv, p) in x[row].iter_mut().zip(&proj) {
                    *xv += p;
                }
            }
            if let (Some(tape), Some(mut lt)) = (tape.as_deref_mut(), lt) {
                lt.mlp_in = normed.clone();
                lt.mlp_inv_rms = inv_rms.clone();
                lt.up = up.clone();
                lt.act = act.clone();
                tape.layers.push(lt);
            }
        }
        cache.push_tokens(tokens, positions);

        let final_norm = self.w(final_norm_index(cfg));
        let head = self.w(head_index(cfg));
        let mut hidden = vec![0.0; n * d];
        let mut logits = vec![0.0; n * cfg.vocab];
        for i in 0..n {
            let row = i * d..(i + 1) * d;
            inv_rms[i] = rms_norm(&x[row.clone()], final_norm, cfg.norm_eps, &mut hidden[row.clone()]);
            vec_mat(&hidden[row], head, &mut logits[i * cfg.vocab..(i + 1) * cfg.vocab]);
        }
        if let Some(tape) = tape {
            tape.final_in = x;
            tape.final_inv_rms = inv_rms;
            tape.hidden = hidden.clone();
        }
        Ok(ForwardOutput {
            n,
            vocab: cfg.vocab,
            d_model: d,
            logits,
            hidden,
        })
    }
}

fn rope_table(cfg: &ModelConfig) -> Vec<f64> {
    let hd = cfg.head_dim();
    let half = hd / 2;
    let mut table = vec![0.0; cfg.max_position * hd];
    for pos in 0..cfg.max_position {
        for i in 0..half {
            let theta = cfg.rope_base.powf(-(2.0 * i as f64) / hd as f64);
            let angle = pos as f64 * theta;
            table[pos * hd + 2 * i] = angle.cos();
            table[pos * hd + 2 * i + 1] = angle.sin();
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(seed: u64, mask_count: usize) -> TinyTransformer {
        TinyTransformer::new(ModelConfig {
            layers: 2,
            d_model: 16,
            heads: 2,
            d_ff: 24,
            vocab: 11,
            mask_count,
            max_position: 64,
            init_seed: seed,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn forward_is_deterministic() {
        let m = tiny(1, 0);
        let toks = [3, 1, 4, 1, 5];
        let a = m.forward(&toks, &AttentionSpec::causal(5)).unwrap();
        let b = m.forward(&toks, &AttentionSpec::causal(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn causal_forward_matches_each_prefix() {
        let m = tiny(2, 0);
        let toks = [7, 2, 9, 9, 0, 3];
        let full = m.forward(&toks, &AttentionSpec::causal(toks.len())).unwrap();
        for len in 1..=toks.len() {
            let part = m.forward(&toks[..len], &AttentionSpec::causal(len)).unwrap();
            let (x, y) = (full.logits_row(len - 1), part.logits_row(len - 1));
            for (a, b) in x.iter().zip(y) {
                assert!((a - b).abs() <= 1e-5 * a.abs().max(1e-12), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn self_only_row_ignores_other_tokens() {
        let m = tiny(3, 0);
        let n = 4;
        let mut mask = vec![false; n * n];
        for i in 0..n {
            mask[i * n + i] = true;
        }
        let attn = AttentionSpec::new(mask, vec![0, 1, 2, 3]).unwrap();
        let a = m.forward(&[1, 2, 3, 4], &attn).unwrap();
        let b = m.forward(&[8, 2, 0, 10], &attn).unwrap();
        assert_eq!(a.logits_row(1), b.logits_row(1));
    }

    #[test]
    fn permuted_layout_permutes_outputs() {
        let m = tiny(4, 0);
        let toks = [5, 6, 7];
        let base = m.forward(&toks, &AttentionSpec::causal(3)).unwrap();
        // Swap tokens 1 and 2 in array order while keeping the logical structure.
        let perm = [0usize, 2, 1];
        let swapped: Vec<_> = perm.iter().map(|&p| toks[p]).collect();
        let mut mask = vec![false; 9];
        for i in 0..3 {
            for j in 0..3 {
                mask[i * 3 + j] = j <= i;
            }
        }
        let mut pmask = vec![false; 9];
        for i in 0..3 {
            for j in 0..3 {
                pmask[i * 3 + j] = mask[perm[i] * 3 + perm[j]];
            }
        }
        let attn = AttentionSpec::new(pmask, perm.to_vec()).unwrap();
        let out = m.forward(&swapped, &attn).unwrap();
        for i in 0..3 {
            for (a, b) in out.logits_row(i).iter().zip(base.logits_row(perm[i])) {
                assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = tiny(5, 2);
        assert!(matches!(
            m.forward(&[13], &AttentionSpec::causal(1)),
            Err(Error::TokenOutOfRange { id: 13, limit: 13 })
        ));
        assert!(m.forward(&[12], &AttentionSpec::causal(1)).is_ok());
        assert!(matches!(
            m.forward(&[1, 2], &AttentionSpec::causal(1)),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(matches!(
            m.forward(&[1], &AttentionSpec::causal_from(1, 64)),
            Err(Error::PositionOverflow { .. })
        ));
    }

    #[test]
    fn output_excludes_mask_ids() {
        let m = tiny(6, 3);
        let out = m.forward(&[1, 11, 12], &AttentionSpec::causal(3)).unwrap();
        assert_eq!(out.logits_row(0).len(), 11);
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = ModelConfig::drafter(64, 4);
        assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(ModelConfig::from_text("layers = 1").is_err());
    }

    #[test]
    fn rotation_inverts() {
        let m = tiny(7, 0);
        let mut x: Vec<f64> = (0..16).map(|i| i as f64 * 0.3 - 1.0).collect();
        let orig = x.clone();
        m.rotate(&mut x, 17);
        m.unrotate(&mut x, 17);
        for (a, b) in x.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
