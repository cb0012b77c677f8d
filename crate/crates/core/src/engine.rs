//! Autoregressive generation with per-step exit depth.
//!
//! Each step feeds the previous token, decides how many layers to run from
//! the modality of the token being predicted, reads the next-token
//! distribution from that layer's head, masks it to the current modality and
//! samples. Positions that stopped short stay pending in the cache; before
//! any later position runs layer `l`, every pending position is brought up
//! to layer `l` (layer-major, ascending positions), so a full-depth step
//! backfills all earlier early exits alongside its own computation.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::cache::{KvCache, PendingPosition};
use crate::config::TokenId;
use crate::error::{Error, Result};
use crate::heads::HeadSet;
use crate::interleave::{modality_mask, InterleaveState, Modality};
use crate::policy::{entropy, DepthDecision, ExitPolicy, PolicyStack};
use crate::sampling::{greedy, sample_with, SamplingConfig, SamplingRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EndOfResponse,
    MaxLength,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub token: TokenId,
    pub modality: Modality,
    /// Slot within the modality run (1-based).
    pub local_index: usize,
    pub exit_layer: usize,
    /// `(layer, entropy)` for every head probed by a confidence policy.
    pub entropies: Option<Vec<(usize, f64)>>,
    /// Block evaluations spent completing earlier positions during this step.
    pub backfill_layers: usize,
    /// Running total of block evaluations, this step included.
    pub layer_computations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub num_layers: usize,
    pub prompt_len: usize,
    pub steps: Vec<StepRecord>,
    pub stop_reason: StopReason,
    /// Block evaluations of the closing backfill after the last step.
    pub final_backfill_layers: usize,
}

impl GenerationResult {
    pub fn tokens(&self) -> Vec<TokenId> {
        self.steps.iter().map(|s| s.token).collect()
    }

    /// Sum of per-step exit layers: the sequential depth of the decode.
    pub fn seq_depth(&self) -> usize {
        self.steps.iter().map(|s| s.exit_layer).sum()
    }

    pub fn backfill_layers(&self) -> usize {
        self.steps.iter().map(|s| s.backfill_layers).sum::<usize>() + self.final_backfill_layers
    }

    /// All block evaluations, backfill included.
    pub fn layer_computations(&self) -> usize {
        self.steps.last().map_or(0, |s| s.layer_computations) + self.final_backfill_layers
    }

    pub fn probe_count(&self) -> usize {
        self.steps.iter().filter_map(|s| s.entropies.as_ref()).map(Vec::len).sum()
    }

    pub fn exit_trace(&self, modality: Modality) -> Vec<usize> {
        self.steps.iter().filter(|s| s.modality == modality).map(|s| s.exit_layer).collect()
    }
}

/// A finished decode together with the cache it left behind.
#[derive(Debug, Clone)]
pub struct Generation {
    pub result: GenerationResult,
    pub cache: KvCache,
}

impl Generation {
    /// Prompt plus every generated token that was fed back into the model.
    pub fn fed_tokens(&self, prompt: &[TokenId]) -> Vec<TokenId> {
        let mut seq = prompt.to_vec();
        let fed = self.result.steps.len().saturating_sub(1);
        seq.extend(self.result.steps[..fed].iter().map(|s| s.token));
        seq
    }
}

fn check_prompt(backbone: &Backbone, prompt: &[TokenId], max_new_tokens: usize) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::EmptyInput("prompt"));
    }
    let cfg = backbone.config();
    if prompt.len() + max_new_tokens > cfg.max_seq_len {
        return Err(Error::PositionOverflow {
            position: prompt.len() + max_new_tokens,
            max_seq_len: cfg.max_seq_len,
        });
    }
    if let Some(bad) = prompt.iter().find(|&&t| t as usize >= cfg.vocab_size()) {
        return Err(Error::InvalidConfig(format!("prompt token {bad} outside vocabulary")));
    }
    Ok(())
}

fn prefill(backbone: &Backbone, cache: &mut KvCache, prompt: &[TokenId]) -> Result<()> {
    for (pos, &tok) in prompt[..prompt.len() - 1].iter().enumerate() {
        backbone.forward_step(cache, tok, pos, backbone.num_layers())?;
    }
    Ok(())
}

pub fn generate(
    backbone: &Backbone,
    heads: &HeadSet,
    policy: &PolicyStack,
    prompt: &[TokenId],
    sampling: &SamplingConfig,
    max_new_tokens: usize,
) -> Result<GenerationResult> {
    generate_with_cache(backbone, heads, policy, prompt, sampling, max_new_tokens).map(|g| g.result)
}

pub fn generate_with_cache(
    backbone: &Backbone,
    heads: &HeadSet,
    policy: &PolicyStack,
    prompt: &[TokenId],
    sampling: &SamplingConfig,
    max_new_tokens: usize,
) -> Result<Generation> {
    let config = backbone.config();
    let l = config.num_layers;
    policy.validate(l)?;
    heads.covers(&policy.head_layers(l))?;
    sampling.validate()?;
    check_prompt(backbone, prompt, max_new_tokens)?;

    let mut cache = backbone.new_cache();
    prefill(backbone, &mut cache, prompt)?;
    let mut rng = SamplingRng::for_config(sampling);
    let mut state = InterleaveState::for_config(config);
    let mut input = *prompt.last().unwrap();
    let mut steps = Vec::with_capacity(max_new_tokens);
    let mut total = 0usize;
    let mut stop_reason = StopReason::MaxLength;

    for t in 0..max_new_tokens {
        let position = prompt.len() - 1 + t;
        let modality = state.modality();
        let local_index = state.local_index();
        let decision = policy.decide(modality, local_index, l);

        cache.open_position(position)?;
        let mut x = backbone.embed(input)?;
        let mut backfill = 0;
        let mut run_layer = |layer: usize, x: &[f64], cache: &mut KvCache| -> Result<Vec<f64>> {
            backfill += backbone.advance_pending_to(cache, layer)?;
            backbone.layer_forward(cache, position, layer, x)
        };

        let (exit_layer, dist, entropies) = match decision {
            DepthDecision::Dynamic => {
                let Some(ExitPolicy::Confidence { threshold, min_layer, .. }) = policy.governing(modality) else {
                    unreachable!("only confidence policies decide dynamically");
                };
                let mut probes = Vec::new();
                let mut chosen = None;
                for layer in 1..=l {
                    x = run_layer(layer, &x, &mut cache)?;
                    if layer >= *min_layer && layer < l {
                        let p = heads.predict_at_layer(layer, &x)?;
                        let h = entropy(&p)?;
                        probes.push((layer, h));
                        if h <= *threshold {
                            chosen = Some((layer, p));
                            break;
                        }
                    }
                }
                let (exit, p) = match chosen {
                    Some(c) => c,
                    None => (l, heads.predict_at_layer(l, &x)?),
                };
                (exit, p, Some(probes))
            }
            d => {
                let target = d.layer(l).unwrap();
                for layer in 1..=target {
                    x = run_layer(layer, &x, &mut cache)?;
                }
                (target, heads.predict_at_layer(target, &x)?, None)
            }
        };
        if exit_layer < l {
            cache.pending_mut().push(PendingPosition {
                position,
                exit_layer,
                hidden: x,
            });
        }
        total += exit_layer + backfill;

        let mask = modality_mask(&state, config);
        let token = sample_with(&dist, &mask, sampling, &mut rng)?;
        steps.push(StepRecord {
            t,
            token,
            modality,
            local_index,
            exit_layer,
            entropies,
            backfill_layers: backfill,
            layer_computations: total,
        });
        if token == config.eos_token() {
            stop_reason = StopReason::EndOfResponse;
            break;
        }
        input = token;
        state = state.advance();
    }

    let final_backfill_layers = backbone.advance_pending_to(&mut cache, l)?;
    debug_assert!(cache.is_fully_complete());
    Ok(Generation {
        result: GenerationResult {
            num_layers: l,
            prompt_len: prompt.len(),
            steps,
            stop_reason,
            final_backfill_layers,
        },
        cache,
    })
}

/// Plain full-depth decoder: every step runs all layers and reads `g_L`.
pub fn reference_decode(backbone: &Backbone, prompt: &[TokenId], sampling: &SamplingConfig, max_new_tokens: usize) -> Result<Generation> {
    let config = backbone.config();
    let l = config.num_layers;
    sampling.validate()?;
    check_prompt(backbone, prompt, max_new_tokens)?;
    let mut cache = backbone.new_cache();
    prefill(backbone, &mut cache, prompt)?;
    let mut rng = SamplingRng::for_config(sampling);
    let mut state = InterleaveState::for_config(config);
    let mut input = *prompt.last().unwrap();
    let mut steps = Vec::new();
    let mut stop_reason = StopReason::MaxLength;
    for t in 0..max_new_tokens {
        let hs = backbone.forward_step(&mut cache, input, prompt.len() - 1 + t, l)?;
        let dist = backbone.final_distribution(&hs[l - 1]);
        let mask = modality_mask(&state, config);
        let token = sample_with(&dist, &mask, sampling, &mut rng)?;
        steps.push(StepRecord {
            t,
            token,
            modality: state.modality(),
            local_index: state.local_index(),
            exit_layer: l,
            entropies: None,
            backfill_layers: 0,
            layer_computations: (t + 1) * l,
        });
        if token == config.eos_token() {
            stop_reason = StopReason::EndOfResponse;
            break;
        }
        input = token;
        state = state.advance();
    }
    Ok(Generation {
        result: GenerationResult {
            num_layers: l,
            prompt_len: prompt.len(),
            steps,
            stop_reason,
            final_backfill_layers: 0,
        },
        cache,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub t: usize,
    pub modality: Modality,
    /// Token actually present in the forced sequence.
    pub forced: TokenId,
    /// Masked argmax of each requested layer's head.
    pub predictions: BTreeMap<usize, TokenId>,
}

/// Full-depth pass over a fixed sequence, reading each requested layer's
/// head at every response step. Intermediate predictions are never fed back.
pub fn teacher_forced_trace(
    backbone: &Backbone,
    heads: &HeadSet,
    tokens: &[TokenId],
    prompt_len: usize,
    layers: &BTreeSet<usize>,
) -> Result<Vec<TraceStep>> {
    heads.covers(layers)?;
    if prompt_len == 0 || prompt_len > tokens.len() {
        return Err(Error::EmptyInput("prompt"));
    }
    let config = backbone.config();
    let l = config.num_layers;
    let mut cache = backbone.new_cache();
    prefill(backbone, &mut cache, &tokens[..prompt_len])?;
    let mut state = InterleaveState::for_config(config);
    let mut out = Vec::with_capacity(tokens.len() - prompt_len);
    for t in 0..tokens.len() - prompt_len {
        let position = prompt_len - 1 + t;
        let hs = backbone.forward_step(&mut cache, tokens[position], position, l)?;
        let mask = modality_mask(&state, config);
        let mut predictions = BTreeMap::new();
        for &layer in layers {
            let p = heads.predict_at_layer(layer, &hs[layer - 1])?;
            predictions.insert(layer, greedy(&p, &mask)?);
        }
        out.push(TraceStep {
            t,
            modality: state.modality(),
            forced: tokens[position + 1],
            predictions,
        });
        state = state.advance();
    }
    Ok(out)
}

/// First line of a generation JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub artifact_version: String,
    pub config_digest: String,
    pub backbone_digest: String,
    pub heads_digest: String,
    pub policy: String,
    pub sampling: SamplingConfig,
    pub prompt: Vec<TokenId>,
    pub max_new_tokens: usize,
    pub stop_reason: StopReason,
    #[serde(default)]
    pub overrides: Vec<String>,
}

#[derive(Serialize)]
struct StepLine<'a> {
    t: usize,
    token: TokenId,
    modality: Modality,
    exit_layer: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    entropies: Option<&'a Vec<(usize, f64)>>,
}

/// Header line followed by one line per step.
pub fn to_jsonl(header: &RunHeader, result: &GenerationResult) -> Result<String> {
    let mut out = String::new();
    let mut head = serde_json::to_value(header)?;
    head.as_object_mut()
        .expect("header is an object")
        .insert("type".into(), "header".into());
    out.push_str(&serde_json::to_string(&head)?);
    out.push('\n');
    for s in &result.steps {
        let line = StepLine {
            t: s.t,
            token: s.token,
            modality: s.modality,
            exit_layer: s.exit_layer,
            entropies: s.entropies.as_ref(),
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}
