//! Layer-specific LM heads distilled from the frozen final head.
//!
//! Each intermediate layer gets an affine map from its hidden state to the
//! vocabulary, trained with soft cross-entropy against the final-layer
//! distribution collected from full-depth rollouts. Heads start as copies of
//! the final head, so the top layer is exact and training only moves the
//! intermediate ones.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::config::TokenId;
use crate::digest::Hasher;
use crate::error::{Error, Result};
use crate::interleave::{apply_mask, modality_mask, InterleaveState};
use crate::math::{log_softmax, softmax, Matrix};
use crate::rng::keyed_rng;
use crate::sampling::{sample_with, SamplingConfig, SamplingRng};

/// Affine map `h -> W h + b` into vocabulary logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LinearHead {
    pub fn logits(&self, hidden: &[f64]) -> Vec<f64> {
        let mut z = self.weight.matvec(hidden);
        for (zi, bi) in z.iter_mut().zip(&self.bias) {
            *zi += bi;
        }
        z
    }

    pub fn distribution(&self, hidden: &[f64]) -> Vec<f64> {
        softmax(&self.logits(hidden))
    }

    pub fn is_finite(&self) -> bool {
        self.weight.data.iter().chain(&self.bias).all(|x| x.is_finite())
    }
}

/// `-sum_v q(v) log softmax(z)(v)` for one example.
pub fn soft_cross_entropy(head: &LinearHead, hidden: &[f64], teacher: &[f64]) -> f64 {
    let lp = log_softmax(&head.logits(hidden));
    -teacher.iter().zip(&lp).filter(|(q, _)| **q > 0.0).map(|(q, l)| q * l).sum::<f64>()
}

/// Gradient of the mean soft cross-entropy with respect to the head.
#[derive(Debug, Clone)]
pub struct HeadGrad {
    pub loss: f64,
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl HeadGrad {
    pub fn norm(&self) -> f64 {
        self.weight.data.iter().chain(&self.bias).map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Mean loss and analytic gradient over a batch. With `p = softmax(W h + b)`,
/// `dL/dz = p - q`, so `dL/dW = (p - q) h^T` and `dL/db = p - q`.
pub fn soft_cross_entropy_grad(head: &LinearHead, hiddens: &[&[f64]], teachers: &[&[f64]]) -> HeadGrad {
    let (rows, cols) = (head.weight.rows, head.weight.cols);
    let mut gw = Matrix::zeros(rows, cols);
    let mut gb = vec![0.0; rows];
    let mut loss = 0.0;
    let n = hiddens.len() as f64;
    for (h, q) in hiddens.iter().zip(teachers) {
        let lp = log_softmax(&head.logits(h));
        loss -= q.iter().zip(&lp).filter(|(qv, _)| **qv > 0.0).map(|(qv, l)| qv * l).sum::<f64>();
        for (v, l) in lp.iter().enumerate() {
            let dz = (l.exp() - q[v]) / n;
            gb[v] += dz;
            for (g, x) in gw.row_mut(v).iter_mut().zip(h.iter()) {
                *g += dz * x;
            }
        }
    }
    HeadGrad { loss: loss / n, weight: gw, bias: gb }
}

/// Hidden states and teacher distributions gathered from full-depth rollouts.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillCorpus {
    /// Teacher `p_L` per example.
    pub teachers: Vec<Vec<f64>>,
    /// `h^(l)` per example for each collected layer.
    pub hiddens: BTreeMap<usize, Vec<Vec<f64>>>,
}

impl DistillCorpus {
    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }

    pub fn layers(&self) -> BTreeSet<usize> {
        self.hiddens.keys().copied().collect()
    }

    pub fn digest(&self) -> String {
        let mut h = Hasher::new();
        h.u64(self.teachers.len() as u64);
        for t in &self.teachers {
            h.floats(t);
        }
        for (layer, rows) in &self.hiddens {
            h.u64(*layer as u64);
            for r in rows {
                h.floats(r);
            }
        }
        h.finish()
    }

    /// Splits off the last `fraction` of examples as a held-out set.
    pub fn split(&self, fraction: f64) -> (DistillCorpus, DistillCorpus) {
        let n = self.len();
        let cut = n - ((n as f64 * fraction).round() as usize).min(n);
        let part = |range: std::ops::Range<usize>| DistillCorpus {
            teachers: self.teachers[range.clone()].to_vec(),
            hiddens: self.hiddens.iter().map(|(l, rows)| (*l, rows[range.clone()].to_vec())).collect(),
        };
        (part(0..cut), part(cut..n))
    }

    pub fn batch(&self, layer: usize) -> Option<(Vec<&[f64]>, Vec<&[f64]>)> {
        let rows = self.hiddens.get(&layer)?;
        Some((rows.iter().map(Vec::as_slice).collect(), self.teachers.iter().map(Vec::as_slice).collect()))
    }
}

/// Runs full-depth rollouts of `rollout_steps` tokens from each prompt,
/// recording `(h^(l), p_L)` at every step for each requested layer.
pub fn collect_distill_corpus(
    backbone: &Backbone,
    prompts: &[Vec<TokenId>],
    layers: &BTreeSet<usize>,
    sampling: &SamplingConfig,
    rollout_steps: usize,
) -> Result<DistillCorpus> {
    if prompts.is_empty() {
        return Err(Error::EmptyInput("prompt list"));
    }
    sampling.validate()?;
    let config = backbone.config();
    let l = config.num_layers;
    if let Some(bad) = layers.iter().find(|&&x| x < 1 || x > l) {
        return Err(Error::MissingHead(*bad));
    }
    let mut rng = SamplingRng::for_config(sampling);
    let mut corpus = DistillCorpus {
        teachers: Vec::new(),
        hiddens: layers.iter().map(|&x| (x, Vec::new())).collect(),
    };
    for prompt in prompts {
        if prompt.is_empty() {
            return Err(Error::EmptyInput("prompt"));
        }
        let mut cache = backbone.new_cache();
        for (pos, &tok) in prompt[..prompt.len() - 1].iter().enumerate() {
            backbone.forward_step(&mut cache, tok, pos, l)?;
        }
        let mut input = *prompt.last().unwrap();
        let mut state = InterleaveState::for_config(config);
        for step in 0..rollout_steps {
            let position = prompt.len() - 1 + step;
            if position >= config.max_seq_len {
                break;
            }
            let hs = backbone.forward_step(&mut cache, input, position, l)?;
            let teacher = backbone.final_distribution(&hs[l - 1]);
            for (&layer, rows) in corpus.hiddens.iter_mut() {
                rows.push(hs[layer - 1].clone());
            }
            let mask = modality_mask(&state, config);
            let masked = apply_mask(&teacher, &mask).ok_or(Error::EmptyAdmissibleSet)?;
            corpus.teachers.push(teacher);
            let token = sample_with(&masked, &mask, sampling, &mut rng)?;
            if token == config.eos_token() {
                break;
            }
            input = token;
            state = state.advance();
        }
    }
    Ok(corpus)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub clip_norm: f64,
    /// Record the loss every this many steps.
    pub log_every: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            learning_rate: 0.2,
            steps: 600,
            batch_size: 32,
            seed: 0,
            clip_norm: 1.0,
            log_every: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub layer: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub steps: usize,
    pub final_loss: BTreeMap<usize, f64>,
    pub corpus_digest: Option<String>,
    pub curve: Vec<CurvePoint>,
}

/// Per-layer heads plus the shared final head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSet {
    num_layers: usize,
    heads: BTreeMap<usize, LinearHead>,
    final_head: LinearHead,
    pub meta: TrainingMeta,
}

impl HeadSet {
    /// Only the shared final head.
    pub fn final_only(backbone: &Backbone) -> Self {
        Self {
            num_layers: backbone.num_layers(),
            heads: BTreeMap::new(),
            final_head: backbone.unembed().clone(),
            meta: TrainingMeta::default(),
        }
    }

    /// Untrained heads for `layers`, each a copy of the final head.
    pub fn warm_start(backbone: &Backbone, layers: &BTreeSet<usize>) -> Self {
        let mut set = Self::final_only(backbone);
        for &layer in layers {
            if layer >= 1 && layer < set.num_layers {
                set.heads.insert(layer, backbone.unembed().clone());
            }
        }
        set
    }

    /// Assembles a head set from stored parts; the final head must match the backbone.
    pub fn from_parts(backbone: &Backbone, heads: BTreeMap<usize, LinearHead>, meta: TrainingMeta) -> Result<Self> {
        let l = backbone.num_layers();
        for (layer, head) in &heads {
            if *layer < 1 || *layer >= l {
                return Err(Error::Container(format!("head for layer {layer} outside 1..{l}")));
            }
            let (v, d) = (backbone.config().vocab_size(), backbone.hidden_dim());
            if head.weight.rows != v || head.weight.cols != d || head.bias.len() != v {
                return Err(Error::Container(format!("head for layer {layer} has wrong shape")));
            }
            if !head.is_finite() {
                return Err(Error::Container(format!("head for layer {layer} has non-finite values")));
            }
        }
        Ok(Self { num_layers: l, heads, final_head: backbone.unembed().clone(), meta })
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    /// Layers with a usable head, including the final layer.
    pub fn layers(&self) -> BTreeSet<usize> {
        let mut s: BTreeSet<usize> = self.heads.keys().copied().collect();
        s.insert(self.num_layers);
        s
    }

    /// Intermediate heads only.
    pub fn intermediate(&self) -> &BTreeMap<usize, LinearHead> {
        &self.heads
    }

    pub fn head(&self, layer: usize) -> Result<&LinearHead> {
        if layer == self.num_layers {
            return Ok(&self.final_head);
        }
        self.heads.get(&layer).ok_or(Error::MissingHead(layer))
    }

    pub fn covers(&self, layers: &BTreeSet<usize>) -> Result<()> {
        match layers.iter().find(|l| self.head(**l).is_err()) {
            Some(&missing) => Err(Error::MissingHead(missing)),
            None => Ok(()),
        }
    }

    /// `p_l = softmax(g_l(h))`.
    pub fn predict_at_layer(&self, layer: usize, hidden: &[f64]) -> Result<Vec<f64>> {
        Ok(self.head(layer)?.distribution(hidden))
    }

    pub fn digest(&self) -> String {
        let mut h = Hasher::new();
        for (layer, head) in self.heads.iter().chain([(&self.num_layers, &self.final_head)]) {
            h.u64(*layer as u64).floats(&head.weight.data).floats(&head.bias);
        }
        h.finish()
    }
}

/// Mean soft cross-entropy of `head` over `(hiddens, teachers)`.
pub fn mean_cross_entropy(head: &LinearHead, hiddens: &[Vec<f64>], teachers: &[Vec<f64>]) -> f64 {
    let n = hiddens.len() as f64;
    hiddens.iter().zip(teachers).map(|(h, q)| soft_cross_entropy(head, h, q)).sum::<f64>() / n
}

/// Mean entropy of the teacher distributions.
pub fn mean_teacher_entropy(teachers: &[Vec<f64>]) -> f64 {
    let n = teachers.len() as f64;
    teachers
        .iter()
        .map(|q| -q.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>())
        .sum::<f64>()
        / n
}

fn train_one(head: &mut LinearHead, rows: &[Vec<f64>], teachers: &[Vec<f64>], layer: usize, hyper: &TrainHyper) -> Result<Vec<CurvePoint>> {
    let mut rng = keyed_rng(hyper.seed, &format!("heads.{layer}.batches"));
    let mut curve = Vec::new();
    let n = rows.len();
    for step in 0..hyper.steps {
        let idx: Vec<usize> = (0..hyper.batch_size).map(|_| rng.random_range(0..n)).collect();
        let hs: Vec<&[f64]> = idx.iter().map(|&i| rows[i].as_slice()).collect();
        let qs: Vec<&[f64]> = idx.iter().map(|&i| teachers[i].as_slice()).collect();
        let grad = soft_cross_entropy_grad(head, &hs, &qs);
        if !grad.loss.is_finite() {
            return Err(Error::Divergence { layer, step, loss: grad.loss });
        }
        if step % hyper.log_every.max(1) == 0 {
            curve.push(CurvePoint { step, layer, loss: grad.loss });
        }
        let norm = grad.norm();
        let scale = if norm > hyper.clip_norm { hyper.clip_norm / norm } else { 1.0 };
        let lr = hyper.learning_rate * scale;
        for (w, g) in head.weight.data.iter_mut().zip(&grad.weight.data) {
            *w -= lr * g;
        }
        for (b, g) in head.bias.iter_mut().zip(&grad.bias) {
            *b -= lr * g;
        }
        if !head.is_finite() {
            return Err(Error::Divergence { layer, step, loss: f64::NAN });
        }
    }
    let (all_h, all_q): (Vec<&[f64]>, Vec<&[f64]>) = (rows.iter().map(Vec::as_slice).collect(), teachers.iter().map(Vec::as_slice).collect());
    let final_loss = all_h.iter().zip(&all_q).map(|(h, q)| soft_cross_entropy(head, h, q)).sum::<f64>() / n as f64;
    curve.push(CurvePoint { step: hyper.steps, layer, loss: final_loss });
    Ok(curve)
}

/// Trains one head per intermediate layer in the corpus with clipped SGD on
/// soft cross-entropy. The backbone is only read; the final layer is skipped.
pub fn train_heads(backbone: &Backbone, corpus: &DistillCorpus, hyper: &TrainHyper) -> Result<HeadSet> {
    let digest_before = backbone.compute_digest();
    let l = backbone.num_layers();
    if corpus.is_empty() {
        return Err(Error::EmptyInput("distillation corpus"));
    }
    let layers: Vec<usize> = corpus.layers().into_iter().filter(|&x| x < l).collect();
    let trained: Vec<(usize, LinearHead, Vec<CurvePoint>)> = layers
        .par_iter()
        .map(|&layer| {
            let mut head = backbone.unembed().clone();
            let curve = train_one(&mut head, &corpus.hiddens[&layer], &corpus.teachers, layer, hyper)?;
            Ok((layer, head, curve))
        })
        .collect::<Result<_>>()?;

    let mut meta = TrainingMeta {
        steps: hyper.steps,
        corpus_digest: Some(corpus.digest()),
        ..Default::default()
    };
    let mut heads = BTreeMap::new();
    for (layer, head, curve) in trained {
        meta.final_loss.insert(layer, curve.last().map(|c| c.loss).unwrap_or(f64::NAN));
        meta.curve.extend(curve);
        heads.insert(layer, head);
    }
    if backbone.compute_digest() != digest_before || digest_before != backbone.digest() {
        return Err(Error::BackboneMutated);
    }
    HeadSet::from_parts(backbone, heads, meta)
}

/// Training curve as CSV: `step,layer,loss`.
pub fn curve_csv(meta: &TrainingMeta) -> String {
    let mut out = String::from("step,layer,loss\n");
    for c in &meta.curve {
        out.push_str(&format!("{},{},{:.9}\n", c.step, c.layer, c.loss));
    }
    out
}

/// `KL(p_L || p_l)` averaged over examples: cross-entropy minus teacher entropy.
pub fn mean_kl(head: &LinearHead, hiddens: &[Vec<f64>], teachers: &[Vec<f64>]) -> f64 {
    mean_cross_entropy(head, hiddens, teachers) - mean_teacher_entropy(teachers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::rng::gaussian;

    fn small_backbone() -> Backbone {
        Backbone::new(ModelConfig {
            num_layers: 4,
            hidden_dim: 16,
            num_heads: 2,
            text_vocab_size: 8,
            speech_vocab_size: 16,
            max_seq_len: 128,
            ..ModelConfig::toy()
        })
        .unwrap()
    }

    #[test]
    fn final_layer_head_is_shared() {
        let b = small_backbone();
        let heads = HeadSet::warm_start(&b, &BTreeSet::from([1, 2]));
        let h = gaussian(3, "h", 16, 1.0);
        assert_eq!(heads.predict_at_layer(4, &h).unwrap(), b.final_distribution(&h));
        assert!(matches!(heads.predict_at_layer(3, &h), Err(Error::MissingHead(3))));
        let p = heads.predict_at_layer(1, &h).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_hidden_gives_bias_softmax() {
        let b = small_backbone();
        let heads = HeadSet::final_only(&b);
        let p = heads.predict_at_layer(4, &[0.0; 16]).unwrap();
        assert_eq!(p, softmax(&b.unembed().bias));
    }

    #[test]
    fn corpus_counts_and_teacher_rederivation() {
        let b = small_backbone();
        let layers = BTreeSet::from([2, 4]);
        let prompt = vec![b.config().bos_token(), 1, 2];
        let c = collect_distill_corpus(&b, std::slice::from_ref(&prompt), &layers, &SamplingConfig::Greedy, 10).unwrap();
        assert_eq!(c.len(), 10);
        assert_eq!(c.hiddens[&2].len(), 10);
        for (h, q) in c.hiddens[&4].iter().zip(&c.teachers) {
            let again = b.final_distribution(h);
            assert!(crate::math::max_abs_diff(&again, q) <= 1e-6);
        }
        let c2 = collect_distill_corpus(&b, &[prompt], &layers, &SamplingConfig::Greedy, 10).unwrap();
        assert_eq!(c.digest(), c2.digest());
        assert!(matches!(
            collect_distill_corpus(&b, &[], &layers, &SamplingConfig::Greedy, 10),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn warm_start_ce_at_top_equals_teacher_entropy() {
        let b = small_backbone();
        let prompts: Vec<Vec<TokenId>> = (0..3).map(|i| vec![b.config().bos_token(), i]).collect();
        let c = collect_distill_corpus(&b, &prompts, &BTreeSet::from([4]), &SamplingConfig::Greedy, 12).unwrap();
        let ce = mean_cross_entropy(b.unembed(), &c.hiddens[&4], &c.teachers);
        let h = mean_teacher_entropy(&c.teachers);
        assert!((ce - h).abs() <= 1e-6, "ce {ce} vs entropy {h}");
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let (v, d, n) = (5, 4, 3);
        let head = LinearHead {
            weight: Matrix::new(v, d, gaussian(1, "w", v * d, 1.0)),
            bias: gaussian(1, "b", v, 1.0),
        };
        let hs: Vec<Vec<f64>> = (0..n).map(|i| gaussian(2, &format!("h{i}"), d, 1.0)).collect();
        let qs: Vec<Vec<f64>> = (0..n).map(|i| softmax(&gaussian(3, &format!("q{i}"), v, 1.0))).collect();
        let hr: Vec<&[f64]> = hs.iter().map(Vec::as_slice).collect();
        let qr: Vec<&[f64]> = qs.iter().map(Vec::as_slice).collect();
        let grad = soft_cross_entropy_grad(&head, &hr, &qr);
        let eps = 1e-6;
        for i in 0..v * d {
            let mut plus = head.clone();
            plus.weight.data[i] += eps;
            let mut minus = head.clone();
            minus.weight.data[i] -= eps;
            let fd = (mean_cross_entropy(&plus, &hs, &qs) - mean_cross_entropy(&minus, &hs, &qs)) / (2.0 * eps);
            assert!((fd - grad.weight.data[i]).abs() <= 1e-4 * fd.abs().max(1e-3));
        }
    }

    #[test]
    fn training_lowers_held_out_loss_and_leaves_backbone() {
        let b = small_backbone();
        let prompts: Vec<Vec<TokenId>> = (0..12).map(|i| vec![b.config().bos_token(), i % 8, (i * 3) % 8]).collect();
        let sampling = SamplingConfig::nucleus(1.0, 1.0, 5);
        let c = collect_distill_corpus(&b, &prompts, &BTreeSet::from([1, 2, 3]), &sampling, 30).unwrap();
        let (train, held) = c.split(0.25);
        let digest = b.digest().to_string();
        let heads = train_heads(&b, &train, &TrainHyper { steps: 200, ..Default::default() }).unwrap();
        assert_eq!(b.compute_digest(), digest);
        for layer in [1, 2, 3] {
            let before = mean_cross_entropy(b.unembed(), &held.hiddens[&layer], &held.teachers);
            let after = mean_cross_entropy(heads.head(layer).unwrap(), &held.hiddens[&layer], &held.teachers);
            assert!(after < before, "layer {layer}: {after} !< {before}");
        }
        assert!(!heads.meta.curve.is_empty());
        assert!(curve_csv(&heads.meta).starts_with("step,layer,loss\n"));
    }

    #[test]
    fn divergence_is_reported() {
        let b = small_backbone();
        let mut c = collect_distill_corpus(&b, &[vec![b.config().bos_token()]], &BTreeSet::from([2]), &SamplingConfig::Greedy, 4).unwrap();
        c.hiddens.get_mut(&2).unwrap()[0][0] = f64::NAN;
        let hyper = TrainHyper { steps: 50, batch_size: 4, ..Default::default() };
        assert!(matches!(train_heads(&b, &c, &hyper), Err(Error::Divergence { layer: 2, .. })));
    }
}
