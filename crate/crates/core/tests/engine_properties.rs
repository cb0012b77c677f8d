use std::collections::BTreeSet;

use proptest::prelude::*;
use sparkee::engine::{generate, generate_with_cache};
use sparkee::interleave::Modality;
use sparkee::policy::{decide_depth, expected_depth, DepthDecision, SparkVariant};
use sparkee::{Backbone, ExitPolicy, HeadSet, ModelConfig, SamplingConfig, TokenId};

fn small(n_text: usize, n_speech: usize) -> Backbone {
    Backbone::new(ModelConfig {
        num_layers: 6,
        hidden_dim: 16,
        num_heads: 2,
        text_vocab_size: 12,
        speech_vocab_size: 20,
        n_text,
        n_speech,
        max_seq_len: 96,
        init_seed: 11,
    })
    .unwrap()
}

fn variant() -> impl Strategy<Value = SparkVariant> {
    prop_oneof![Just(SparkVariant::Even), Just(SparkVariant::Odd), Just(SparkVariant::Triple)]
}

fn prompt(b: &Backbone, body: &[TokenId]) -> Vec<TokenId> {
    let n = (b.config().text_vocab_size + b.config().speech_vocab_size) as TokenId;
    std::iter::once(b.config().bos_token()).chain(body.iter().map(|t| t % n)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn schedule_runs_backfill_to_the_oracle_cache(
        v in variant(),
        exit in 1usize..6,
        n_text in 1usize..4,
        n_speech in 1usize..7,
        body in prop::collection::vec(0u32..40, 0..5),
        max_new in 1usize..60,
        seed in any::<u64>(),
    ) {
        let b = small(n_text, n_speech);
        let heads = HeadSet::warm_start(&b, &BTreeSet::from([exit]));
        let p = prompt(&b, &body);
        let policy = ExitPolicy::spark(v, exit);
        let g = generate_with_cache(&b, &heads, &policy.clone().into(), &p, &SamplingConfig::nucleus(0.9, 0.9, seed), max_new).unwrap();
        let oracle = b.teacher_forced_cache(&g.fed_tokens(&p)).unwrap();
        prop_assert!(g.cache.max_abs_diff(&oracle).unwrap() <= 1e-12);

        // compute accounting
        let r = &g.result;
        let early: usize = r.steps.iter().map(|s| 6 - s.exit_layer).sum();
        prop_assert_eq!(r.backfill_layers(), early);
        prop_assert_eq!(r.layer_computations(), r.seq_depth() + r.backfill_layers());
        prop_assert_eq!(r.layer_computations(), 6 * r.steps.len());

        // conformance
        for s in &r.steps {
            prop_assert_eq!(Some(s.exit_layer), decide_depth(&policy, s.modality, s.local_index, 6).layer(6));
        }
    }

    #[test]
    fn decisions_are_periodic_and_refresh(v in variant(), exit in 1usize..40, start in 1usize..200) {
        let k = v.period();
        let d = |i| decide_depth(&ExitPolicy::spark(v, exit), Modality::Speech, i, 40);
        prop_assert_eq!(d(start), d(start + k));
        prop_assert!((start..start + k).any(|i| d(i) == DepthDecision::FullDepth));
        prop_assert_eq!(d(start), decide_depth(&ExitPolicy::spark(v, exit), Modality::Speech, (start - 1) % k + 1, 40));
    }

    #[test]
    fn fixed_and_disable_closed_forms(exit in 1usize..28) {
        let cfg = ModelConfig::step_toy();
        prop_assert_eq!(expected_depth(&ExitPolicy::fixed(exit), &cfg).unwrap(), (exit as u64).into());
        prop_assert_eq!(expected_depth(&ExitPolicy::Disable, &cfg).unwrap(), 28u64.into());
    }
}

#[test]
fn truncated_chunks_stay_within_one_chunk_of_the_closed_form() {
    let b = small(1, 5);
    let heads = HeadSet::warm_start(&b, &BTreeSet::from([2]));
    let policy = ExitPolicy::spark(SparkVariant::Triple, 2);
    let expected = expected_depth(&policy, b.config()).unwrap();
    for max_new in 6..30 {
        let r = generate(&b, &heads, &policy.clone().into(), &prompt(&b, &[1]), &SamplingConfig::Greedy, max_new).unwrap();
        let speech = r.exit_trace(Modality::Speech);
        let whole = speech.len() / 5 * 5;
        let complete: usize = speech[..whole].iter().sum();
        assert_eq!(num_rational::Ratio::new(complete as u64, whole as u64), expected);
        // a partial chunk moves the mean by at most one chunk's share
        let avg = speech.iter().sum::<usize>() as f64 / speech.len() as f64;
        let gap = (avg - *expected.numer() as f64 / *expected.denom() as f64).abs();
        assert!(gap <= 6.0 * 5.0 / speech.len() as f64, "max_new {max_new}: gap {gap}");
    }
}

#[test]
fn end_of_response_closes_whole_cycles() {
    let b = small(2, 3);
    let heads = HeadSet::final_only(&b);
    let mut ended = 0;
    for seed in 0..40 {
        let r = generate(&b, &heads, &ExitPolicy::Disable.into(), &prompt(&b, &[3]), &SamplingConfig::nucleus(1.5, 1.0, seed), 80).unwrap();
        let mods: Vec<Modality> = r.steps.iter().map(|s| s.modality).collect();
        if r.stop_reason == sparkee::engine::StopReason::EndOfResponse {
            ended += 1;
            let last = r.steps.last().unwrap();
            assert_eq!(last.token, b.config().eos_token());
            assert_eq!((mods.len() - 1) % 5, 0);
        }
        for (i, m) in mods.iter().enumerate() {
            let want = if i % 5 < 2 { Modality::Text } else { Modality::Speech };
            assert_eq!(*m, want);
        }
    }
    assert!(ended > 0, "no run ended early; raise the temperature");
}

#[test]
fn repeated_runs_are_bit_identical() {
    let b = small(1, 4);
    let heads = HeadSet::warm_start(&b, &(1..6).collect());
    let policy = ExitPolicy::confidence(2.5, 2).into();
    let run = || generate_with_cache(&b, &heads, &policy, &prompt(&b, &[4, 9]), &SamplingConfig::nucleus(0.7, 0.9, 3), 40).unwrap();
    let (x, y) = (run(), run());
    assert_eq!(x.result, y.result);
    assert_eq!(x.cache, y.cache);
}
