//! Fixed-ratio text/speech interleaving.
//!
//! A response is a sequence of cycles, each `n_text` text tokens followed by
//! a chunk of `n_speech` speech tokens. Sampling is restricted to the current
//! modality's sub-vocabulary. End-of-response is admitted only at the first
//! text slot after at least one full cycle, so every emitted chunk is whole.

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;

/// Where end-of-response may be sampled; recorded in report files.
pub const EOS_PLACEMENT: &str = "first text slot after a complete speech chunk";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Speech,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Text, Modality::Speech];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Speech => "speech",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InterleaveState {
    n_text: usize,
    n_speech: usize,
    /// 1-based slot within the cycle.
    pub cycle_position: usize,
    /// 1-based index within the current speech chunk, 0 on text slots.
    pub chunk_local_index: usize,
    pub cycle_count: usize,
}

impl InterleaveState {
    pub fn new(n_text: usize, n_speech: usize) -> Self {
        assert!(n_text >= 1 && n_speech >= 1, "interleave ratio must be positive");
        Self::at(n_text, n_speech, 1, 0)
    }

    pub fn for_config(config: &ModelConfig) -> Self {
        Self::new(config.n_text, config.n_speech)
    }

    /// State at slot `cycle_position` of cycle number `cycle_count`.
    pub fn at(n_text: usize, n_speech: usize, cycle_position: usize, cycle_count: usize) -> Self {
        assert!((1..=n_text + n_speech).contains(&cycle_position));
        let chunk_local_index = cycle_position.saturating_sub(n_text);
        Self {
            n_text,
            n_speech,
            cycle_position,
            chunk_local_index,
            cycle_count,
        }
    }

    pub fn modality(&self) -> Modality {
        if self.cycle_position <= self.n_text {
            Modality::Text
        } else {
            Modality::Speech
        }
    }

    /// 1-based index within the current modality's run: the text slot on
    /// text positions, the chunk index on speech positions.
    pub fn local_index(&self) -> usize {
        match self.modality() {
            Modality::Text => self.cycle_position,
            Modality::Speech => self.chunk_local_index,
        }
    }

    /// Whether this slot closes its speech chunk.
    pub fn is_chunk_end(&self) -> bool {
        self.cycle_position == self.n_text + self.n_speech
    }

    pub fn eos_allowed(&self) -> bool {
        self.cycle_position == 1 && self.cycle_count >= 1
    }

    pub fn advance(self) -> Self {
        if self.cycle_position == self.n_text + self.n_speech {
            Self::at(self.n_text, self.n_speech, 1, self.cycle_count + 1)
        } else {
            Self::at(self.n_text, self.n_speech, self.cycle_position + 1, self.cycle_count)
        }
    }
}

/// Admissible token ids at `state`.
pub fn modality_mask(state: &InterleaveState, config: &ModelConfig) -> Vec<bool> {
    let mut mask = vec![false; config.vocab_size()];
    let range = match state.modality() {
        Modality::Text => config.text_range(),
        Modality::Speech => config.speech_range(),
    };
    for m in &mut mask[range] {
        *m = true;
    }
    if state.eos_allowed() {
        mask[config.eos_token() as usize] = true;
    }
    mask
}

/// Zeroes inadmissible entries and renormalizes. Returns `None` if no
/// admissible id carries mass.
pub fn apply_mask(dist: &[f64], mask: &[bool]) -> Option<Vec<f64>> {
    let mut out: Vec<f64> = dist
        .iter()
        .zip(mask)
        .map(|(&p, &ok)| if ok { p } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    for p in &mut out {
        *p /= total;
    }
    Some(out)
}
