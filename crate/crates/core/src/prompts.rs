//! Prompt sources: the bundled 64-prompt suite and seeded random prompts.

use rand::Rng;
use serde::Deserialize;

use crate::config::{ModelConfig, TokenId};
use crate::digest::Hasher;
use crate::error::{Error, Result};
use crate::rng::keyed_rng;

const SUITE_JSON: &str = include_str!("../data/toy_prompts.json");

#[derive(Deserialize)]
struct SuiteFile {
    max_text_id: usize,
    prompts: Vec<Vec<TokenId>>,
}

/// The bundled suite, each prompt prefixed with begin-of-response.
pub fn toy_suite(config: &ModelConfig) -> Result<Vec<Vec<TokenId>>> {
    let suite: SuiteFile = serde_json::from_str(SUITE_JSON)?;
    if suite.max_text_id >= config.text_vocab_size {
        return Err(Error::InvalidConfig(format!(
            "bundled prompts need text_vocab_size > {}",
            suite.max_text_id
        )));
    }
    Ok(suite
        .prompts
        .into_iter()
        .map(|p| std::iter::once(config.bos_token()).chain(p).collect())
        .collect())
}

/// `count` prompts of random text and speech tokens, keyed by `seed`.
pub fn synthetic(config: &ModelConfig, count: usize, seed: u64) -> Vec<Vec<TokenId>> {
    let mut rng = keyed_rng(seed, "prompts");
    let content = config.text_vocab_size + config.speech_vocab_size;
    (0..count)
        .map(|_| {
            let len = rng.random_range(2..=8);
            std::iter::once(config.bos_token())
                .chain((0..len).map(|_| rng.random_range(0..content) as TokenId))
                .collect()
        })
        .collect()
}

pub fn digest(prompts: &[Vec<TokenId>]) -> String {
    let mut h = Hasher::new();
    for p in prompts {
        h.u64(p.len() as u64);
        for &t in p {
            h.u64(t as u64);
        }
    }
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_has_sixty_four_prompts() {
        let cfg = ModelConfig::toy();
        let suite = toy_suite(&cfg).unwrap();
        assert_eq!(suite.len(), 64);
        assert!(suite.iter().all(|p| p[0] == cfg.bos_token() && p.len() >= 4));
        let tiny = ModelConfig { text_vocab_size: 8, ..cfg };
        assert!(toy_suite(&tiny).is_err());
    }

    #[test]
    fn synthetic_prompts_are_seeded() {
        let cfg = ModelConfig::toy();
        assert_eq!(synthetic(&cfg, 5, 1), synthetic(&cfg, 5, 1));
        assert_ne!(digest(&synthetic(&cfg, 5, 1)), digest(&synthetic(&cfg, 5, 2)));
    }
}
