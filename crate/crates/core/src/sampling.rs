//! Greedy and nucleus (top-p) token selection under a modality mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TokenId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
#[derive(Default)]
pub enum SamplingConfig {
    #[default]
    Greedy,
    Nucleus { temperature: f64, top_p: f64, seed: u64 },
}


impl SamplingConfig {
    pub fn nucleus(temperature: f64, top_p: f64, seed: u64) -> Self {
        SamplingConfig::Nucleus { temperature, top_p, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if let SamplingConfig::Nucleus { temperature, top_p, .. } = self {
            if !(*temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::InvalidSampling(format!("temperature {temperature} must be > 0")));
            }
            if !(*top_p > 0.0 && *top_p <= 1.0) {
                return Err(Error::InvalidSampling(format!("top_p {top_p} must be in (0, 1]")));
            }
        }
        Ok(())
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            SamplingConfig::Greedy => None,
            SamplingConfig::Nucleus { seed, .. } => Some(*seed),
        }
    }

    /// Same configuration with a different RNG seed.
    pub fn reseeded(&self, new_seed: u64) -> Self {
        match self {
            SamplingConfig::Greedy => SamplingConfig::Greedy,
            SamplingConfig::Nucleus { temperature, top_p, .. } => SamplingConfig::Nucleus {
                temperature: *temperature,
                top_p: *top_p,
                seed: new_seed,
            },
        }
    }
}

/// Random stream owned by one decoding session.
pub struct SamplingRng(Option<ChaCha8Rng>);

impl SamplingRng {
    pub fn for_config(config: &SamplingConfig) -> Self {
        SamplingRng(config.seed().map(ChaCha8Rng::seed_from_u64))
    }

    fn uniform(&mut self) -> f64 {
        match &mut self.0 {
            Some(rng) => rng.random::<f64>(),
            None => unreachable!("greedy decoding draws no random numbers"),
        }
    }
}

/// Highest-probability admissible id, lowest id on ties.
pub fn greedy(dist: &[f64], mask: &[bool]) -> Result<TokenId> {
    let mut best: Option<usize> = None;
    for (i, (&p, &ok)) in dist.iter().zip(mask).enumerate() {
        if ok && best.is_none_or(|b| p > dist[b]) {
            best = Some(i);
        }
    }
    best.map(|i| i as TokenId).ok_or(Error::EmptyAdmissibleSet)
}

/// Candidate set and renormalized probabilities the nucleus rule draws from.
///
/// Probabilities are tempered as `p^(1/T)` (temperature on log-probabilities),
/// renormalized over admissible ids, sorted descending (ties by id), and cut
/// at the shortest prefix whose mass reaches `top_p`.
pub fn nucleus_candidates(dist: &[f64], mask: &[bool], temperature: f64, top_p: f64) -> Result<Vec<(TokenId, f64)>> {
    let logs: Vec<(usize, f64)> = dist
        .iter()
        .zip(mask)
        .enumerate()
        .filter(|(_, (&p, &ok))| ok && p > 0.0)
        .map(|(i, (&p, _))| (i, p.ln() / temperature))
        .collect();
    if logs.is_empty() {
        return Err(Error::EmptyAdmissibleSet);
    }
    let max = logs.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
    let mut weighted: Vec<(usize, f64)> = logs.into_iter().map(|(i, z)| (i, (z - max).exp())).collect();
    let total: f64 = weighted.iter().map(|x| x.1).sum();
    for w in &mut weighted {
        w.1 /= total;
    }
    weighted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let mut kept = Vec::new();
    let mut mass = 0.0;
    for (i, p) in weighted {
        kept.push((i as TokenId, p));
        mass += p;
        // Tolerance absorbs rounding in the running sum.
        if mass >= top_p - 1e-12 {
            break;
        }
    }
    for k in &mut kept {
        k.1 /= mass;
    }
    Ok(kept)
}

pub fn sample_with(dist: &[f64], mask: &[bool], config: &SamplingConfig, rng: &mut SamplingRng) -> Result<TokenId> {
    match config {
        SamplingConfig::Greedy => greedy(dist, mask),
        SamplingConfig::Nucleus { temperature, top_p, .. } => {
            let candidates = nucleus_candidates(dist, mask, *temperature, *top_p)?;
            let u = rng.uniform();
            let mut acc = 0.0;
            for &(id, p) in &candidates {
                acc += p;
                if u < acc {
                    return Ok(id);
                }
            }
            Ok(candidates.last().unwrap().0)
        }
    }
}

/// One-shot draw with a fresh stream seeded from `config`.
pub fn sample(dist: &[f64], mask: &[bool], config: &SamplingConfig) -> Result<TokenId> {
    sample_with(dist, mask, config, &mut SamplingRng::for_config(config))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_argmax_and_ties() {
        assert_eq!(greedy(&[0.1, 0.7, 0.2], &[true; 3]).unwrap(), 1);
        assert_eq!(greedy(&[0.4, 0.2, 0.4], &[true; 3]).unwrap(), 0);
        assert_eq!(greedy(&[0.1, 0.7, 0.2], &[true, false, true]).unwrap(), 2);
        assert!(matches!(greedy(&[0.5, 0.5], &[false, false]), Err(Error::EmptyAdmissibleSet)));
    }

    #[test]
    fn nucleus_prefix_rule() {
        let c = nucleus_candidates(&[0.5, 0.4, 0.1], &[true; 3], 1.0, 0.9).unwrap();
        let ids: Vec<TokenId> = c.iter().map(|x| x.0).collect();
        assert_eq!(ids, [0, 1]);
        assert!((c[0].1 - 0.5 / 0.9).abs() < 1e-12);
        let all = nucleus_candidates(&[0.5, 0.4, 0.1], &[true; 3], 1.0, 1.0).unwrap();
        assert_eq!(all.len(), 3);
    }

    #[test]
    fn temperature_sharpens() {
        let c = nucleus_candidates(&[0.6, 0.4], &[true; 2], 0.5, 1.0).unwrap();
        // 0.36 / (0.36 + 0.16)
        assert!((c[0].1 - 0.36 / 0.52).abs() < 1e-12);
    }

    #[test]
    fn validation() {
        assert!(SamplingConfig::nucleus(0.0, 0.9, 1).validate().is_err());
        assert!(SamplingConfig::nucleus(0.7, 0.0, 1).validate().is_err());
        assert!(SamplingConfig::nucleus(0.7, 1.5, 1).validate().is_err());
        assert!(SamplingConfig::nucleus(0.7, 0.9, 1).validate().is_ok());
    }

    #[test]
    fn seeded_draws_repeat() {
        let cfg = SamplingConfig::nucleus(0.7, 0.9, 42);
        let dist = [0.1, 0.2, 0.3, 0.4];
        let mut a = SamplingRng::for_config(&cfg);
        let mut b = SamplingRng::for_config(&cfg);
        for _ in 0..50 {
            assert_eq!(
                sample_with(&dist, &[true; 4], &cfg, &mut a).unwrap(),
                sample_with(&dist, &[true; 4], &cfg, &mut b).unwrap()
            );
        }
    }

    #[test]
    fn json_form() {
        let s: SamplingConfig = serde_json::from_str(r#"{"kind": "nucleus", "temperature": 0.7, "top_p": 0.9, "seed": 3}"#).unwrap();
        assert_eq!(s, SamplingConfig::nucleus(0.7, 0.9, 3));
        let g: SamplingConfig = serde_json::from_str(r#"{"kind": "greedy"}"#).unwrap();
        assert_eq!(g, SamplingConfig::Greedy);
    }
}
