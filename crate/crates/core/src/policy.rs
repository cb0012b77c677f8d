//! Exit policies and their depth arithmetic.
//!
//! A policy decides, for each decoding step, how many transformer layers run
//! before the next token is predicted. Schedule-based policies (disable,
//! fixed-layer, periodic alternation) decide ahead of the forward pass and
//! have a closed-form average depth; the confidence policy probes layer
//! heads during the pass and stops at the first low-entropy layer.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::interleave::Modality;

pub type ModalitySet = BTreeSet<Modality>;

fn speech_only() -> ModalitySet {
    BTreeSet::from([Modality::Speech])
}

/// Periodic refresh pattern inside a speech chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SparkVariant {
    /// `{L, e, L, e, ...}`
    Even,
    /// `{e, L, e, L, ...}`
    Odd,
    /// `{L, e, e, L, e, e, ...}`
    Triple,
}

impl SparkVariant {
    pub fn period(self) -> usize {
        match self {
            SparkVariant::Even | SparkVariant::Odd => 2,
            SparkVariant::Triple => 3,
        }
    }

    /// Whether the 1-based `index` within a chunk exits early. The pattern
    /// restarts at every chunk and a short final subgroup is truncated.
    pub fn exits_at(self, index: usize) -> bool {
        match self {
            SparkVariant::Even => index.is_multiple_of(2),
            SparkVariant::Odd => index % 2 == 1,
            SparkVariant::Triple => index % 3 != 1,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            SparkVariant::Even => "even",
            SparkVariant::Odd => "odd",
            SparkVariant::Triple => "triple",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ExitPolicy {
    Disable,
    Fixed {
        exit_layer: usize,
        #[serde(default = "speech_only")]
        applies_to: ModalitySet,
    },
    Spark {
        variant: SparkVariant,
        exit_layer: usize,
        #[serde(default = "speech_only")]
        applies_to: ModalitySet,
    },
    Confidence {
        threshold: f64,
        min_layer: usize,
        #[serde(default = "speech_only")]
        applies_to: ModalitySet,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthDecision {
    FullDepth,
    ExitAt(usize),
    /// Resolved during the forward pass by probing layer heads.
    Dynamic,
}

impl DepthDecision {
    /// Layer count for schedule decisions; `None` for `Dynamic`.
    pub fn layer(self, num_layers: usize) -> Option<usize> {
        match self {
            DepthDecision::FullDepth => Some(num_layers),
            DepthDecision::ExitAt(l) => Some(l),
            DepthDecision::Dynamic => None,
        }
    }
}

impl ExitPolicy {
    pub fn spark(variant: SparkVariant, exit_layer: usize) -> Self {
        ExitPolicy::Spark { variant, exit_layer, applies_to: speech_only() }
    }

    pub fn fixed(exit_layer: usize) -> Self {
        ExitPolicy::Fixed { exit_layer, applies_to: speech_only() }
    }

    pub fn confidence(threshold: f64, min_layer: usize) -> Self {
        ExitPolicy::Confidence { threshold, min_layer, applies_to: speech_only() }
    }

    /// Same policy restricted to a different modality set.
    pub fn with_applies_to(mut self, set: ModalitySet) -> Self {
        match &mut self {
            ExitPolicy::Disable => {}
            ExitPolicy::Fixed { applies_to, .. }
            | ExitPolicy::Spark { applies_to, .. }
            | ExitPolicy::Confidence { applies_to, .. } => *applies_to = set,
        }
        self
    }

    pub fn applies_to(&self) -> ModalitySet {
        match self {
            ExitPolicy::Disable => ModalitySet::new(),
            ExitPolicy::Fixed { applies_to, .. }
            | ExitPolicy::Spark { applies_to, .. }
            | ExitPolicy::Confidence { applies_to, .. } => applies_to.clone(),
        }
    }

    pub fn is_schedule(&self) -> bool {
        !matches!(self, ExitPolicy::Confidence { .. })
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidPolicy(msg));
        match self {
            ExitPolicy::Disable => return Ok(()),
            ExitPolicy::Fixed { exit_layer, .. } | ExitPolicy::Spark { exit_layer, .. } => {
                if *exit_layer < 1 || *exit_layer >= num_layers {
                    return fail(format!("exit layer {exit_layer} outside 1..{num_layers}"));
                }
            }
            ExitPolicy::Confidence { threshold, min_layer, .. } => {
                if !(*threshold >= 0.0) {
                    return fail(format!("entropy threshold {threshold} must be >= 0"));
                }
                if *min_layer < 1 || *min_layer > num_layers {
                    return fail(format!("min layer {min_layer} outside 1..={num_layers}"));
                }
            }
        }
        if self.applies_to().is_empty() {
            return fail(format!("{self} applies to no modality"));
        }
        Ok(())
    }

    /// Layers whose heads this policy may consult.
    pub fn head_layers(&self, num_layers: usize) -> BTreeSet<usize> {
        match self {
            ExitPolicy::Disable => BTreeSet::new(),
            ExitPolicy::Fixed { exit_layer, .. } | ExitPolicy::Spark { exit_layer, .. } => {
                BTreeSet::from([*exit_layer])
            }
            ExitPolicy::Confidence { min_layer, .. } => (*min_layer..num_layers).collect(),
        }
    }

    /// Average exit layer over one run of `modality` (a speech chunk or the
    /// text slots of a cycle), as an exact rational.
    pub fn expected_depth_for(&self, config: &ModelConfig, modality: Modality) -> Result<Ratio<u64>> {
        let l = config.num_layers;
        let run = match modality {
            Modality::Text => config.n_text,
            Modality::Speech => config.n_speech,
        };
        let mut total = 0u64;
        for index in 1..=run {
            match decide_depth(self, modality, index, l) {
                DepthDecision::Dynamic => return Err(Error::NoClosedForm(self.to_string())),
                d => total += d.layer(l).unwrap() as u64,
            }
        }
        Ok(Ratio::new(total, run as u64))
    }
}

/// Per-step depth decision for a single policy.
pub fn decide_depth(policy: &ExitPolicy, modality: Modality, local_index: usize, num_layers: usize) -> DepthDecision {
    if !policy.applies_to().contains(&modality) {
        return DepthDecision::FullDepth;
    }
    match policy {
        ExitPolicy::Disable => DepthDecision::FullDepth,
        ExitPolicy::Fixed { exit_layer, .. } => DepthDecision::ExitAt(*exit_layer),
        ExitPolicy::Spark { variant, exit_layer, .. } => {
            debug_assert!(local_index >= 1, "chunk indices are 1-based");
            if variant.exits_at(local_index) {
                DepthDecision::ExitAt(*exit_layer)
            } else {
                DepthDecision::FullDepth
            }
        }
        ExitPolicy::Confidence { min_layer, .. } => {
            if *min_layer >= num_layers {
                DepthDecision::FullDepth
            } else {
                DepthDecision::Dynamic
            }
        }
    }
}

/// Average speech exit layer over one chunk.
pub fn expected_depth(policy: &ExitPolicy, config: &ModelConfig) -> Result<Ratio<u64>> {
    policy.expected_depth_for(config, Modality::Speech)
}

/// `(L - avg) / L`.
pub fn speedup(avg: Ratio<u64>, num_layers: usize) -> Ratio<u64> {
    let l = Ratio::from_integer(num_layers as u64);
    (l - avg) / l
}

pub fn ratio_to_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Shannon entropy in nats, `0 log 0 = 0`.
pub fn entropy(dist: &[f64]) -> Result<f64> {
    let sum: f64 = dist.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || dist.iter().any(|&p| !(p >= 0.0)) {
        return Err(Error::NotNormalized(sum));
    }
    Ok(-dist.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
}

/// First probed layer in `min_layer..num_layers` whose entropy is at most
/// `threshold`; `num_layers` if none qualifies.
pub fn confidence_exit_layer(
    entropies: &BTreeMap<usize, f64>,
    threshold: f64,
    min_layer: usize,
    num_layers: usize,
) -> usize {
    entropies
        .range(min_layer..num_layers)
        .find(|(_, &h)| h <= threshold)
        .map(|(&l, _)| l)
        .unwrap_or(num_layers)
}

/// Ordered set of policies with disjoint modality coverage. The policy
/// whose `applies_to` contains a step's modality governs that step; other
/// steps run at full depth.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyStack(pub Vec<ExitPolicy>);

impl From<ExitPolicy> for PolicyStack {
    fn from(p: ExitPolicy) -> Self {
        PolicyStack(vec![p])
    }
}

impl PolicyStack {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::InvalidPolicy("empty policy stack".into()));
        }
        let mut seen = ModalitySet::new();
        for p in &self.0 {
            p.validate(num_layers)?;
            for m in p.applies_to() {
                if !seen.insert(m) {
                    return Err(Error::InvalidPolicy(format!("two policies govern {m} steps")));
                }
            }
        }
        Ok(())
    }

    pub fn governing(&self, modality: Modality) -> Option<&ExitPolicy> {
        self.0.iter().find(|p| p.applies_to().contains(&modality))
    }

    pub fn decide(&self, modality: Modality, local_index: usize, num_layers: usize) -> DepthDecision {
        match self.governing(modality) {
            Some(p) => decide_depth(p, modality, local_index, num_layers),
            None => DepthDecision::FullDepth,
        }
    }

    pub fn head_layers(&self, num_layers: usize) -> BTreeSet<usize> {
        self.0.iter().flat_map(|p| p.head_layers(num_layers)).collect()
    }

    pub fn is_schedule(&self) -> bool {
        self.0.iter().all(ExitPolicy::is_schedule)
    }

    pub fn expected_depth_for(&self, config: &ModelConfig, modality: Modality) -> Result<Ratio<u64>> {
        match self.governing(modality) {
            Some(p) => p.expected_depth_for(config, modality),
            None => Ok(Ratio::from_integer(config.num_layers as u64)),
        }
    }
}

impl Serialize for PolicyStack {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.0.as_slice() {
            [single] => single.serialize(s),
            many => many.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for PolicyStack {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            One(ExitPolicy),
            Many(Vec<ExitPolicy>),
        }
        Ok(match Repr::deserialize(d)? {
            Repr::One(p) => PolicyStack(vec![p]),
            Repr::Many(ps) => PolicyStack(ps),
        })
    }
}

fn fmt_applies_to(set: &ModalitySet, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    if *set == speech_only() {
        Ok(())
    } else if set.len() == 2 {
        f.write_str("@both")
    } else if set.contains(&Modality::Text) {
        f.write_str("@text")
    } else {
        f.write_str("@none")
    }
}

/// Short form used on the command line and in report rows:
/// `disable`, `fixed-25`, `spark-even-22`, `conf-0.1-26`, optionally
/// suffixed with `@text`, `@speech` or `@both`.
impl fmt::Display for ExitPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExitPolicy::Disable => f.write_str("disable"),
            ExitPolicy::Fixed { exit_layer, applies_to } => {
                write!(f, "fixed-{exit_layer}")?;
                fmt_applies_to(applies_to, f)
            }
            ExitPolicy::Spark { variant, exit_layer, applies_to } => {
                write!(f, "spark-{}-{exit_layer}", variant.as_str())?;
                fmt_applies_to(applies_to, f)
            }
            ExitPolicy::Confidence { threshold, min_layer, applies_to } => {
                write!(f, "conf-{threshold}-{min_layer}")?;
                fmt_applies_to(applies_to, f)
            }
        }
    }
}

impl fmt::Display for PolicyStack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, p) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("+")?;
            }
            write!(f, "{p}")?;
        }
        Ok(())
    }
}

impl FromStr for ExitPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidPolicy(format!("cannot parse policy '{s}'"));
        let (body, scope) = match s.split_once('@') {
            Some((b, m)) => (b, Some(m)),
            None => (s, None),
        };
        let parts: Vec<&str> = body.split('-').collect();
        let layer = |x: &str| x.parse::<usize>().map_err(|_| bad());
        let policy = match parts.as_slice() {
            ["disable"] => ExitPolicy::Disable,
            ["fixed", l] => ExitPolicy::fixed(layer(l)?),
            ["spark", v, l] => {
                let variant = match *v {
                    "even" => SparkVariant::Even,
                    "odd" => SparkVariant::Odd,
                    "triple" => SparkVariant::Triple,
                    _ => return Err(bad()),
                };
                ExitPolicy::spark(variant, layer(l)?)
            }
            ["conf", t, l] => {
                let t: f64 = t.parse().map_err(|_| bad())?;
                ExitPolicy::confidence(t, layer(l)?)
            }
            _ => return Err(bad()),
        };
        let set = match scope {
            None | Some("speech") => speech_only(),
            Some("text") => BTreeSet::from([Modality::Text]),
            Some("both") => BTreeSet::from(Modality::ALL),
            Some(_) => return Err(bad()),
        };
        Ok(match policy {
            ExitPolicy::Disable => ExitPolicy::Disable,
            p => p.with_applies_to(set),
        })
    }
}

impl FromStr for PolicyStack {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.split('+').map(str::parse).collect::<Result<Vec<_>>>().map(PolicyStack)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trace(policy: &ExitPolicy, modality: Modality, n: usize, l: usize) -> Vec<DepthDecision> {
        (1..=n).map(|i| decide_depth(policy, modality, i, l)).collect()
    }

    use DepthDecision::{ExitAt, FullDepth};

    #[test]
    fn even_and_triple_patterns() {
        let even = ExitPolicy::spark(SparkVariant::Even, 22);
        assert_eq!(trace(&even, Modality::Speech, 4, 28), [FullDepth, ExitAt(22), FullDepth, ExitAt(22)]);
        let odd = ExitPolicy::spark(SparkVariant::Odd, 22);
        assert_eq!(trace(&odd, Modality::Speech, 4, 28), [ExitAt(22), FullDepth, ExitAt(22), FullDepth]);
        let triple = ExitPolicy::spark(SparkVariant::Triple, 22);
        assert_eq!(trace(&triple, Modality::Speech, 4, 28), [FullDepth, ExitAt(22), ExitAt(22), FullDepth]);
    }

    #[test]
    fn modality_gating() {
        for p in [
            ExitPolicy::spark(SparkVariant::Odd, 3),
            ExitPolicy::fixed(3),
            ExitPolicy::confidence(0.5, 3),
            ExitPolicy::Disable,
        ] {
            assert_eq!(decide_depth(&p, Modality::Text, 1, 8), FullDepth);
        }
        assert_eq!(decide_depth(&ExitPolicy::fixed(5), Modality::Speech, 1, 8), ExitAt(5));
        assert_eq!(decide_depth(&ExitPolicy::confidence(0.5, 5), Modality::Speech, 3, 8), DepthDecision::Dynamic);
    }

    #[test]
    fn expected_depth_step_shape() {
        let cfg = ModelConfig::step_toy();
        let avg = expected_depth(&ExitPolicy::spark(SparkVariant::Even, 22), &cfg).unwrap();
        assert_eq!(avg, Ratio::from_integer(25));
        assert_eq!(speedup(avg, 28), Ratio::new(3, 28));
    }

    #[test]
    fn expected_depth_glm_shape() {
        let cfg = ModelConfig::glm_toy();
        let even = expected_depth(&ExitPolicy::spark(SparkVariant::Even, 36), &cfg).unwrap();
        assert_eq!(even, Ratio::from_integer(38));
        assert_eq!(speedup(even, 40), Ratio::new(1, 20));
        // 9 refresh positions at 40 and 17 exits at 37 over a 26-token chunk.
        let brute: u64 = (1..=26u64).map(|i| if i % 3 == 1 { 40 } else { 37 }).sum();
        assert_eq!(brute, 989);
        let triple = expected_depth(&ExitPolicy::spark(SparkVariant::Triple, 37), &cfg).unwrap();
        assert_eq!(triple, Ratio::new(989, 26));
    }

    #[test]
    fn expected_depth_identities() {
        let cfg = ModelConfig::toy();
        assert_eq!(expected_depth(&ExitPolicy::Disable, &cfg).unwrap(), Ratio::from_integer(8));
        assert_eq!(expected_depth(&ExitPolicy::fixed(5), &cfg).unwrap(), Ratio::from_integer(5));
        assert!(matches!(
            expected_depth(&ExitPolicy::confidence(0.1, 4), &cfg),
            Err(Error::NoClosedForm(_))
        ));
    }

    #[test]
    fn entropy_cases() {
        assert!((entropy(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((entropy(&[0.5, 0.5, 0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(matches!(entropy(&[0.5, 0.4]), Err(Error::NotNormalized(_))));
    }

    #[test]
    fn confidence_layer_examples() {
        let e = BTreeMap::from([(36, 0.7), (37, 0.4)]);
        assert_eq!(confidence_exit_layer(&e, 0.5, 36, 40), 37);
        let e = BTreeMap::from([(26, 0.3), (27, 0.2)]);
        assert_eq!(confidence_exit_layer(&e, 0.1, 26, 28), 28);
        assert_eq!(confidence_exit_layer(&e, f64::INFINITY, 26, 28), 26);
    }

    #[test]
    fn validation() {
        assert!(ExitPolicy::spark(SparkVariant::Even, 8).validate(8).is_err());
        assert!(ExitPolicy::spark(SparkVariant::Even, 0).validate(8).is_err());
        assert!(ExitPolicy::confidence(-1.0, 3).validate(8).is_err());
        assert!(ExitPolicy::fixed(3).with_applies_to(ModalitySet::new()).validate(8).is_err());
        let overlap = PolicyStack(vec![ExitPolicy::fixed(3), ExitPolicy::spark(SparkVariant::Odd, 4)]);
        assert!(overlap.validate(8).is_err());
    }

    #[test]
    fn json_forms() {
        let p: ExitPolicy = serde_json::from_str(
            r#"{"kind": "spark", "variant": "triple", "exit_layer": 37, "applies_to": ["speech"]}"#,
        )
        .unwrap();
        assert_eq!(p, ExitPolicy::spark(SparkVariant::Triple, 37));
        let p: ExitPolicy = serde_json::from_str(r#"{"kind": "fixed", "exit_layer": 25}"#).unwrap();
        assert_eq!(p, ExitPolicy::fixed(25));
        let p: ExitPolicy = serde_json::from_str(r#"{"kind": "disable"}"#).unwrap();
        assert_eq!(p, ExitPolicy::Disable);
        let s: PolicyStack = serde_json::from_str(
            r#"[{"kind": "confidence", "threshold": 0.5, "min_layer": 36, "applies_to": ["text"]},
                {"kind": "spark", "variant": "even", "exit_layer": 36}]"#,
        )
        .unwrap();
        assert_eq!(s.to_string(), "conf-0.5-36@text+spark-even-36");
        let back: PolicyStack = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn short_form_round_trip() {
        for s in ["disable", "fixed-25", "spark-even-22", "spark-triple-37@both", "conf-0.1-26", "conf-0.5-36@text+spark-even-36"] {
            let p: PolicyStack = s.parse().unwrap();
            assert_eq!(p.to_string(), s);
        }
        assert!("spark-quad-3".parse::<ExitPolicy>().is_err());
    }

    proptest! {
        #[test]
        fn spark_is_periodic_and_refreshes(idx in 1usize..500, v in 0usize..3) {
            let variant = [SparkVariant::Even, SparkVariant::Odd, SparkVariant::Triple][v];
            let k = variant.period();
            let p = ExitPolicy::spark(variant, 3);
            prop_assert_eq!(decide_depth(&p, Modality::Speech, idx, 8), decide_depth(&p, Modality::Speech, idx + k, 8));
            let any_full = (idx..idx + k).any(|i| decide_depth(&p, Modality::Speech, i, 8) == FullDepth);
            prop_assert!(any_full);
        }
    }
}
