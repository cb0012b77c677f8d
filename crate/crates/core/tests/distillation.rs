use std::collections::BTreeSet;

use sparkee::container;
use sparkee::heads::{collect_distill_corpus, mean_cross_entropy, mean_kl, mean_teacher_entropy, soft_cross_entropy, train_heads};
use sparkee::{prompts, Backbone, ModelConfig, SamplingConfig, TrainHyper};

fn trained() -> (Backbone, sparkee::heads::DistillCorpus, sparkee::HeadSet) {
    let b = Backbone::new(ModelConfig::toy()).unwrap();
    let suite = prompts::toy_suite(b.config()).unwrap();
    let layers: BTreeSet<usize> = (1..=8).collect();
    let corpus = collect_distill_corpus(&b, &suite[..48], &layers, &SamplingConfig::nucleus(1.0, 0.95, 5), 32).unwrap();
    let (train, held) = corpus.split(0.25);
    let heads = train_heads(&b, &train, &TrainHyper { steps: 400, ..Default::default() }).unwrap();
    (b, held, heads)
}

#[test]
fn held_out_kl_falls_with_depth_and_ce_bounds_entropy() {
    let (b, held, heads) = trained();
    let kl: Vec<f64> = (1..8)
        .map(|l| mean_kl(heads.head(l).unwrap(), &held.hiddens[&l], &held.teachers))
        .collect();
    let inversions = kl.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(inversions <= 1, "kl by layer {kl:?}");
    assert!(kl.iter().all(|&k| k >= -1e-6));

    // cross-entropy is bounded below by the teacher entropy, example by example
    for l in 1..8 {
        let head = heads.head(l).unwrap();
        for (h, q) in held.hiddens[&l].iter().zip(&held.teachers).take(64) {
            let h_q = mean_teacher_entropy(std::slice::from_ref(q));
            assert!(soft_cross_entropy(head, h, q) >= h_q - 1e-6);
        }
    }
    let final_ce = mean_cross_entropy(b.unembed(), &held.hiddens[&8], &held.teachers);
    assert!((final_ce - mean_teacher_entropy(&held.teachers)).abs() < 1e-9);
}

#[test]
fn trained_heads_survive_a_container_round_trip() {
    let (b, held, heads) = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("heads.spkw");
    container::save(&path, &b, Some(&heads)).unwrap();
    let loaded = container::load(&path).unwrap();
    assert_eq!(loaded.backbone.digest(), b.digest());
    let back = loaded.heads.unwrap();
    assert_eq!(back.digest(), heads.digest());
    assert_eq!(back.meta, heads.meta);
    let h = &held.hiddens[&3][0];
    assert_eq!(back.predict_at_layer(3, h).unwrap(), heads.predict_at_layer(3, h).unwrap());
}

#[test]
fn training_is_seeded() {
    let b = Backbone::new(ModelConfig { num_layers: 3, ..ModelConfig::toy() }).unwrap();
    let suite = prompts::toy_suite(b.config()).unwrap();
    let corpus = collect_distill_corpus(&b, &suite[..6], &BTreeSet::from([1, 2]), &SamplingConfig::Greedy, 10).unwrap();
    let hyper = TrainHyper { steps: 30, ..Default::default() };
    let x = train_heads(&b, &corpus, &hyper).unwrap();
    let y = train_heads(&b, &corpus, &hyper).unwrap();
    assert_eq!(x, y);
    let z = train_heads(&b, &corpus, &TrainHyper { seed: 1, ..hyper }).unwrap();
    assert_ne!(x.digest(), z.digest());
}
