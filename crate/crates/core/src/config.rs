//! Model shape and vocabulary layout.
//!
//! The vocabulary is laid out as `[text | speech | control]`:
//! text ids occupy `0..text_vocab_size`, speech ids follow, and the two
//! control tokens (begin-of-response, end-of-response) close the table.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interleave::Modality;

pub type TokenId = u32;

/// Number of control tokens appended after the text and speech ranges.
pub const NUM_CONTROL_TOKENS: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub text_vocab_size: usize,
    pub speech_vocab_size: usize,
    pub n_text: usize,
    pub n_speech: usize,
    pub max_seq_len: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Small 8-layer model with a 1:4 text/speech cycle, sized for fast tests.
    pub fn toy() -> Self {
        Self {
            num_layers: 8,
            hidden_dim: 64,
            num_heads: 4,
            text_vocab_size: 32,
            speech_vocab_size: 128,
            n_text: 1,
            n_speech: 4,
            max_seq_len: 512,
            init_seed: 7,
        }
    }

    /// 28 layers with a 1:4 interleave at toy width.
    pub fn step_toy() -> Self {
        Self {
            num_layers: 28,
            n_text: 1,
            n_speech: 4,
            init_seed: 1,
            ..Self::toy()
        }
    }

    /// 40 layers with a 13:26 interleave at toy width.
    pub fn glm_toy() -> Self {
        Self {
            num_layers: 40,
            n_text: 13,
            n_speech: 26,
            init_seed: 1,
            ..Self::toy()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "toy" => Some(Self::toy()),
            "step-toy" => Some(Self::step_toy()),
            "glm-toy" => Some(Self::glm_toy()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_layers < 2 {
            return fail(format!("num_layers must be >= 2, got {}", self.num_layers));
        }
        if self.hidden_dim == 0 || self.num_heads == 0 {
            return fail("hidden_dim and num_heads must be positive".into());
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return fail(format!("head_dim {} must be even for rotary encoding", self.head_dim()));
        }
        if self.text_vocab_size == 0 || self.speech_vocab_size == 0 {
            return fail("text_vocab_size and speech_vocab_size must be positive".into());
        }
        if self.n_text == 0 || self.n_speech == 0 {
            return fail("n_text and n_speech must be positive".into());
        }
        if self.max_seq_len == 0 {
            return fail("max_seq_len must be positive".into());
        }
        if self.vocab_size() > TokenId::MAX as usize {
            return fail("vocabulary too large".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn vocab_size(&self) -> usize {
        self.text_vocab_size + self.speech_vocab_size + NUM_CONTROL_TOKENS
    }

    pub fn cycle_len(&self) -> usize {
        self.n_text + self.n_speech
    }

    pub fn bos_token(&self) -> TokenId {
        (self.text_vocab_size + self.speech_vocab_size) as TokenId
    }

    pub fn eos_token(&self) -> TokenId {
        self.bos_token() + 1
    }

    pub fn text_range(&self) -> std::ops::Range<usize> {
        0..self.text_vocab_size
    }

    pub fn speech_range(&self) -> std::ops::Range<usize> {
        self.text_vocab_size..self.text_vocab_size + self.speech_vocab_size
    }

    /// Modality of a content token; control tokens have none.
    pub fn token_modality(&self, token: TokenId) -> Option<Modality> {
        let id = token as usize;
        if self.text_range().contains(&id) {
            Some(Modality::Text)
        } else if self.speech_range().contains(&id) {
            Some(Modality::Speech)
        } else {
            None
        }
    }

    /// SHA-256 over the canonical JSON form.
    pub fn digest(&self) -> String {
        crate::digest::json_digest(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_layout() {
        let cfg = ModelConfig {
            num_layers: 4,
            hidden_dim: 32,
            num_heads: 4,
            text_vocab_size: 16,
            speech_vocab_size: 64,
            ..ModelConfig::toy()
        };
        assert_eq!(cfg.vocab_size(), 82);
        assert_eq!(cfg.bos_token(), 80);
        assert_eq!(cfg.eos_token(), 81);
        assert_eq!(cfg.token_modality(15), Some(Modality::Text));
        assert_eq!(cfg.token_modality(16), Some(Modality::Speech));
        assert_eq!(cfg.token_modality(80), None);
    }

    #[test]
    fn rejects_bad_shapes() {
        let bad = ModelConfig { num_layers: 1, ..ModelConfig::toy() };
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        let bad = ModelConfig { num_heads: 5, ..ModelConfig::toy() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { n_speech: 0, ..ModelConfig::toy() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn presets_mirror_reference_shapes() {
        let s = ModelConfig::preset("step-toy").unwrap();
        assert_eq!((s.num_layers, s.n_text, s.n_speech), (28, 1, 4));
        let g = ModelConfig::preset("glm-toy").unwrap();
        assert_eq!((g.num_layers, g.n_text, g.n_speech), (40, 13, 26));
        assert!(ModelConfig::preset("nope").is_none());
    }
}
