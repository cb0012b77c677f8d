//! Seeded decoder-only transformer with per-layer KV caching.
//!
//! Pre-norm blocks (RMSNorm, rotary multi-head attention, SiLU MLP with 4x
//! expansion) over a residual stream. A forward pass may stop at any layer;
//! the positions left short are recorded as pending in the cache and can be
//! resumed from their stored hidden state.

use std::collections::BTreeMap;

use crate::cache::{KvCache, PendingPosition};
use crate::config::{ModelConfig, TokenId};
use crate::digest::Hasher;
use crate::error::{Error, Result};
use crate::heads::LinearHead;
use crate::math::{dot, rms_norm, silu, softmax, Matrix};
use crate::rng::gaussian;

const NORM_EPS: f64 = 1e-6;
const ROPE_BASE: f64 = 10_000.0;
const FFN_MULT: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attn_norm: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Vec<f64>,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: ModelConfig,
    embedding: Matrix,
    blocks: Vec<Block>,
    unembed: LinearHead,
    // [position][pair] -> (cos, sin)
    rope: Vec<Vec<(f64, f64)>>,
    digest: String,
}

/// Name, shape and data of one parameter tensor.
pub struct ParamView<'a> {
    pub path: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

fn rope_table(config: &ModelConfig) -> Vec<Vec<(f64, f64)>> {
    let hd = config.head_dim();
    (0..config.max_seq_len)
        .map(|pos| {
            (0..hd / 2)
                .map(|i| {
                    let freq = ROPE_BASE.powf(-(2.0 * i as f64) / hd as f64);
                    let angle = pos as f64 * freq;
                    (angle.cos(), angle.sin())
                })
                .collect()
        })
        .collect()
}

impl Backbone {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let v = config.vocab_size();
        let l = config.num_layers;
        let seed = config.init_seed;
        let ffn = FFN_MULT * d;
        let mat = |path: String, rows: usize, cols: usize, std: f64| {
            Matrix::new(rows, cols, gaussian(seed, &path, rows * cols, std))
        };
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();

        let embedding = mat("embedding".into(), v, d, 1.0);
        let blocks = (1..=l)
            .map(|i| Block {
                attn_norm: vec![1.0; d],
                wq: mat(format!("layers.{i}.wq"), d, d, inv_sqrt_d),
                wk: mat(format!("layers.{i}.wk"), d, d, inv_sqrt_d),
                wv: mat(format!("layers.{i}.wv"), d, d, inv_sqrt_d),
                wo: mat(format!("layers.{i}.wo"), d, d, inv_sqrt_d),
                ffn_norm: vec![1.0; d],
                w_up: mat(format!("layers.{i}.w_up"), ffn, d, inv_sqrt_d),
                w_down: mat(format!("layers.{i}.w_down"), d, ffn, 1.0 / (ffn as f64).sqrt()),
            })
            .collect();
        // The residual stream grows roughly like sqrt(L); keep final logits O(1).
        let unembed_std = 2.0 / ((d * (l + 1)) as f64).sqrt();
        let unembed = LinearHead {
            weight: mat("unembed.weight".into(), v, d, unembed_std),
            bias: gaussian(seed, "unembed.bias", v, 0.1),
        };
        Ok(Self::assemble(config, embedding, blocks, unembed))
    }

    fn assemble(config: ModelConfig, embedding: Matrix, blocks: Vec<Block>, unembed: LinearHead) -> Self {
        let rope = rope_table(&config);
        let mut b = Self {
            config,
            embedding,
            blocks,
            unembed,
            rope,
            digest: String::new(),
        };
        b.digest = b.compute_digest();
        b
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn embedding(&self) -> &Matrix {
        &self.embedding
    }

    /// The final-layer LM head `g_L`.
    pub fn unembed(&self) -> &LinearHead {
        &self.unembed
    }

    /// Content digest recorded at construction.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn compute_digest(&self) -> String {
        let mut h = Hasher::new();
        for p in self.parameters() {
            h.label(&p.path).floats(p.data);
        }
        h.finish()
    }

    pub fn parameters<'a>(&'a self) -> Vec<ParamView<'a>> {
        let d = self.config.hidden_dim;
        let mut out = vec![ParamView {
            path: "embedding".into(),
            shape: vec![self.embedding.rows, d],
            data: &self.embedding.data,
        }];
        for (i, b) in self.blocks.iter().enumerate() {
            let i = i + 1;
            let mut push = |name: &str, shape: Vec<usize>, data: &'a [f64]| {
                out.push(ParamView { path: format!("layers.{i}.{name}"), shape, data });
            };
            push("attn_norm", vec![d], &b.attn_norm);
            push("wq", vec![b.wq.rows, b.wq.cols], &b.wq.data);
            push("wk", vec![b.wk.rows, b.wk.cols], &b.wk.data);
            push("wv", vec![b.wv.rows, b.wv.cols], &b.wv.data);
            push("wo", vec![b.wo.rows, b.wo.cols], &b.wo.data);
            push("ffn_norm", vec![d], &b.ffn_norm);
            push("w_up", vec![b.w_up.rows, b.w_up.cols], &b.w_up.data);
            push("w_down", vec![b.w_down.rows, b.w_down.cols], &b.w_down.data);
        }
        out.push(ParamView {
            path: "unembed.weight".into(),
            shape: vec![self.unembed.weight.rows, d],
            data: &self.unembed.weight.data,
        });
        out.push(ParamView {
            path: "unembed.bias".into(),
            shape: vec![self.unembed.bias.len()],
            data: &self.unembed.bias,
        });
        out
    }

    /// Rebuilds a backbone from named tensors, checking every shape.
    pub fn from_parameters(config: ModelConfig, mut params: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let v = config.vocab_size();
        let ffn = FFN_MULT * d;
        let mut take = |path: String, len: usize| -> Result<Vec<f64>> {
            let data = params
                .remove(&path)
                .ok_or_else(|| Error::Container(format!("missing tensor {path}")))?;
            if data.len() != len {
                return Err(Error::Container(format!("tensor {path} has {} values, expected {len}", data.len())));
            }
            if data.iter().any(|x| !x.is_finite()) {
                return Err(Error::Container(format!("tensor {path} has non-finite values")));
            }
            Ok(data)
        };
        let embedding = Matrix::new(v, d, take("embedding".into(), v * d)?);
        let mut blocks = Vec::with_capacity(config.num_layers);
        for i in 1..=config.num_layers {
            blocks.push(Block {
                attn_norm: take(format!("layers.{i}.attn_norm"), d)?,
                wq: Matrix::new(d, d, take(format!("layers.{i}.wq"), d * d)?),
                wk: Matrix::new(d, d, take(format!("layers.{i}.wk"), d * d)?),
                wv: Matrix::new(d, d, take(format!("layers.{i}.wv"), d * d)?),
                wo: Matrix::new(d, d, take(format!("layers.{i}.wo"), d * d)?),
                ffn_norm: take(format!("layers.{i}.ffn_norm"), d)?,
                w_up: Matrix::new(ffn, d, take(format!("layers.{i}.w_up"), ffn * d)?),
                w_down: Matrix::new(d, ffn, take(format!("layers.{i}.w_down"), d * ffn)?),
            });
        }
        let unembed = LinearHead {
            weight: Matrix::new(v, d, take("unembed.weight".into(), v * d)?),
            bias: take("unembed.bias".into(), v)?,
        };
        if let Some(extra) = params.keys().next() {
            return Err(Error::Container(format!("unexpected tensor {extra}")));
        }
        Ok(Self::assemble(config, embedding, blocks, unembed))
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(self.config.num_layers, self.config.hidden_dim, self.config.max_seq_len)
    }

    pub fn embed(&self, token: TokenId) -> Result<Vec<f64>> {
        let id = token as usize;
        if id >= self.config.vocab_size() {
            return Err(Error::InvalidConfig(format!("token {token} outside vocabulary")));
        }
        Ok(self.embedding.row(id).to_vec())
    }

    /// Final-layer next-token distribution `softmax(g_L(h))`.
    pub fn final_distribution(&self, hidden: &[f64]) -> Vec<f64> {
        softmax(&self.unembed.logits(hidden))
    }

    fn apply_rope(&self, x: &mut [f64], position: usize) {
        let hd = self.config.head_dim();
        let table = &self.rope[position];
        for head in x.chunks_mut(hd) {
            for (i, &(c, s)) in table.iter().enumerate() {
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * c - b * s;
                head[2 * i + 1] = a * s + b * c;
            }
        }
    }

    /// Runs block `layer` for one position whose layers below are done.
    /// Writes the position's K/V at `layer` and returns `h^(layer)`.
    ///
    /// Every earlier position must already be complete at `layer`; otherwise
    /// this returns [`Error::StaleAttention`] without touching the cache.
    pub fn layer_forward(&self, cache: &mut KvCache, position: usize, layer: usize, input: &[f64]) -> Result<Vec<f64>> {
        if let Some(blocking) = cache.first_incomplete_before(position, layer) {
            return Err(Error::StaleAttention {
                position,
                layer,
                blocking,
                blocking_depth: cache.depth(blocking),
            });
        }
        let block = &self.blocks[layer - 1];
        let hd = self.config.head_dim();
        let d = self.config.hidden_dim;

        let xn = rms_norm(input, &block.attn_norm, NORM_EPS);
        let mut q = block.wq.matvec(&xn);
        let mut k = block.wk.matvec(&xn);
        let v = block.wv.matvec(&xn);
        self.apply_rope(&mut q, position);
        self.apply_rope(&mut k, position);
        cache.write(position, layer, &k, &v)?;

        let keys = cache.keys_upto(layer, position);
        let values = cache.values_upto(layer, position);
        let scale = 1.0 / (hd as f64).sqrt();
        let mut attn = vec![0.0; d];
        let mut scores = vec![0.0; position + 1];
        for h in 0..self.config.num_heads {
            let span = h * hd..(h + 1) * hd;
            let qh = &q[span.clone()];
            for (t, s) in scores.iter_mut().enumerate() {
                *s = dot(qh, &keys[t * d + span.start..t * d + span.end]) * scale;
            }
            let weights = softmax(&scores);
            let out = &mut attn[span.clone()];
            for (t, w) in weights.iter().enumerate() {
                let vt = &values[t * d + span.start..t * d + span.end];
                for (o, x) in out.iter_mut().zip(vt) {
                    *o += w * x;
                }
            }
        }

        let mut h: Vec<f64> = input.iter().zip(block.wo.matvec(&attn)).map(|(a, b)| a + b).collect();
        let hn = rms_norm(&h, &block.ffn_norm, NORM_EPS);
        let up: Vec<f64> = block.w_up.matvec(&hn).into_iter().map(silu).collect();
        for (x, y) in h.iter_mut().zip(block.w_down.matvec(&up)) {
            *x += y;
        }
        Ok(h)
    }

    /// Runs `token` at `position` through layers `1..=upto_layer`.
    ///
    /// Returns `h^(1)..h^(upto_layer)`. A pass that stops below the top layer
    /// leaves the position pending with its last hidden state.
    pub fn forward_step(&self, cache: &mut KvCache, token: TokenId, position: usize, upto_layer: usize) -> Result<Vec<Vec<f64>>> {
        let l = self.config.num_layers;
        if upto_layer < 1 || upto_layer > l {
            return Err(Error::Cache(format!("upto_layer {upto_layer} outside 1..={l}")));
        }
        if position >= self.config.max_seq_len {
            return Err(Error::PositionOverflow { position, max_seq_len: self.config.max_seq_len });
        }
        if let Some(blocking) = cache.first_incomplete_before(position, upto_layer) {
            return Err(Error::StaleAttention {
                position,
                layer: upto_layer,
                blocking,
                blocking_depth: cache.depth(blocking),
            });
        }
        let mut x = self.embed(token)?;
        cache.open_position(position)?;
        let mut hiddens = Vec::with_capacity(upto_layer);
        for layer in 1..=upto_layer {
            x = self.layer_forward(cache, position, layer, &x)?;
            hiddens.push(x.clone());
        }
        if upto_layer < l {
            cache.pending_mut().push(PendingPosition {
                position,
                exit_layer: upto_layer,
                hidden: x,
            });
        }
        Ok(hiddens)
    }

    /// Brings every pending position up to `target_layer`, layer by layer in
    /// ascending position order so each position sees its predecessors'
    /// fresh entries. Positions that reach the top layer leave the pending
    /// list. Returns the number of block evaluations performed.
    pub fn advance_pending_to(&self, cache: &mut KvCache, target_layer: usize) -> Result<usize> {
        let l = self.config.num_layers;
        let target = target_layer.min(l);
        let mut pending = std::mem::take(cache.pending_mut());
        pending.sort_by_key(|p| p.position);
        let lowest = pending.iter().map(|p| p.exit_layer).min().unwrap_or(target);
        let mut evaluations = 0;
        let mut outcome = Ok(());
        'layers: for layer in lowest + 1..=target {
            for p in pending.iter_mut().filter(|p| p.exit_layer < layer) {
                match self.layer_forward(cache, p.position, layer, &p.hidden) {
                    Ok(h) => {
                        p.hidden = h;
                        p.exit_layer = layer;
                        evaluations += 1;
                    }
                    Err(e) => {
                        outcome = Err(e);
                        break 'layers;
                    }
                }
            }
        }
        pending.retain(|p| p.exit_layer < l);
        *cache.pending_mut() = pending;
        outcome.map(|()| evaluations)
    }

    /// Completes every pending position below `current_position` to full depth.
    pub fn backfill_pending(&self, cache: &mut KvCache, current_position: usize) -> Result<usize> {
        for p in cache.pending() {
            if p.hidden.len() != self.config.hidden_dim {
                return Err(Error::Cache(format!("pending position {} has no stored hidden state", p.position)));
            }
            if p.position >= current_position {
                return Err(Error::Cache(format!(
                    "pending position {} is not before current position {current_position}",
                    p.position
                )));
            }
        }
        self.advance_pending_to(cache, self.config.num_layers)
    }

    /// Full-depth teacher-forced pass over `tokens` into a fresh cache.
    pub fn teacher_forced_cache(&self, tokens: &[TokenId]) -> Result<KvCache> {
        let mut cache = self.new_cache();
        for (pos, &tok) in tokens.iter().enumerate() {
            self.forward_step(&mut cache, tok, pos, self.config.num_layers)?;
        }
        Ok(cache)
    }
}
