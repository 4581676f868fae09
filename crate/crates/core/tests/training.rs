mod common;

use common::*;
use fsac_core::data::split_paired;
use fsac_core::experiment::train_and_evaluate;
use fsac_core::trainer::{apply_sgd, gradients, triplet_loss, Gradients};
use fsac_core::{
    generate_world, run_fsac, ClusterConfig, EmbeddingHead, EvalOptions, PipelineConfig, TrainConfig, WorldConfig,
};
use proptest::prelude::*;

fn flatten(g: &Gradients) -> Vec<f64> {
    let mut v = g.weight.as_slice().to_vec();
    v.extend(&g.bias);
    v.extend(g.classifier.as_slice());
    v
}

#[test]
fn analytic_gradients_match_central_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let case = random_grad_case(seed);
        let (grads, loss) = gradients(&case.head, &case.classifier, case.batch(), case.margin, case.weights).unwrap();
        assert!((loss.total - case.loss(&case.head, &case.classifier)).abs() < 1e-12);
        let err = relative_error(&flatten(&grads), &numeric_gradient(&case, 1e-5));
        assert!(err < 1e-4, "batch {seed}: relative error {err}");
        worst = worst.max(err);
    }
    eprintln!("worst relative gradient error {worst:.2e}");
}

#[test]
fn tiny_sgd_step_never_increases_loss() {
    for seed in 1000..1020 {
        let case = random_grad_case(seed);
        let before = case.loss(&case.head, &case.classifier);
        let (grads, _) = gradients(&case.head, &case.classifier, case.batch(), case.margin, case.weights).unwrap();
        let (mut head, mut cls) = (case.head.clone(), case.classifier.clone());
        apply_sgd(&mut head, &mut cls, &grads, 1e-6);
        let after = case.loss(&head, &cls);
        assert!(after <= before + 1e-12, "batch {seed}: {before} -> {after}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn triplet_loss_is_rotation_invariant(
        pts in (2usize..8).prop_flat_map(|d| prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), 5)),
        margin in 0.0f64..1.0,
    ) {
        let q = rotation(&pts[3], &pts[4]);
        let (a, p, n) = (&pts[0], &pts[1], &pts[2]);
        let plain = triplet_loss(a, p, n, margin);
        let rotated = triplet_loss(&q.mul_vec(a), &q.mul_vec(p), &q.mul_vec(n), margin);
        prop_assert!((plain - rotated).abs() < 1e-12);
    }
}

fn small_world(seed: u64) -> fsac_core::World {
    generate_world(&WorldConfig {
        n_books: 3,
        frames_per_book: 200,
        seed,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn zero_epochs_keep_initial_heads() {
    let w = small_world(4);
    let cfg = TrainConfig {
        epochs: 0,
        seed: 11,
        ..Default::default()
    };
    let out = run_fsac(&w.faces, &w.bodies, &w.graph, &ClusterConfig::default(), &cfg, None).unwrap();
    assert!(out.log.is_empty());
    let d = w.faces.dim();
    assert_eq!(out.face_head, EmbeddingHead::init(d, d, cfg.init_noise, 11).unwrap());
    assert_eq!(out.body_head, EmbeddingHead::init(d, d, cfg.init_noise, 12).unwrap());
}

#[test]
fn clean_world_clusters_into_identities() {
    let w = generate_world(&WorldConfig {
        n_books: 4,
        noise_scale: 0.0,
        exaggeration_prob: 0.0,
        ..Default::default()
    })
    .unwrap();
    let head = EmbeddingHead::identity(w.faces.dim(), w.faces.dim());
    for set in [&w.faces, &w.bodies] {
        let feats = head.forward_all(&set.embeddings()).unwrap();
        let got = ClusterConfig::default().run(&feats, 0).unwrap();
        assert_eq!(got.n_noise(), 0);
        let mut ids: Vec<&str> = set.samples().iter().map(|s| s.identity.as_deref().unwrap()).collect();
        let names = {
            let mut n = ids.clone();
            n.sort();
            n.dedup();
            n
        };
        let truth: Vec<Option<usize>> = ids.drain(..).map(|i| names.binary_search(&i).ok()).collect();
        assert_eq!(canonical(&got.labels), canonical(&truth));
    }
}

#[test]
fn training_improves_on_initial_heads() {
    let mut improved = 0;
    for seed in 0..5 {
        let world = generate_world(&WorldConfig {
            seed,
            ..Default::default()
        })
        .unwrap();
        let cfg = PipelineConfig {
            train: TrainConfig {
                epochs: 2,
                ..Default::default()
            },
            eval: EvalOptions {
                per_epoch: true,
                ..Default::default()
            },
            ..Default::default()
        }
        .seeded(seed);
        let (out, last) = train_and_evaluate(&world, &cfg).unwrap();
        let first = out.initial.as_ref().unwrap().face.map;
        eprintln!("seed {seed}: face mAP {first:.4} -> {:.4}", last.face.map);
        assert_eq!(out.final_metrics(), Some(&last));
        improved += usize::from(last.face.map > first);
    }
    assert!(improved >= 4, "improved on {improved} of 5 seeds");
}

#[test]
fn runs_are_reproducible() {
    let w = small_world(2);
    let cfg = TrainConfig {
        epochs: 2,
        shuffle: true,
        seed: 5,
        ..Default::default()
    };
    let run = || run_fsac(&w.faces, &w.bodies, &w.graph, &ClusterConfig::default(), &cfg, None).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn paired_split_is_seeded_and_keeps_pairs_together() {
    let w = small_world(1);
    let a = split_paired(&w.faces, &w.bodies, &w.graph, 1.0 / 3.0, 9).unwrap();
    let b = split_paired(&w.faces, &w.bodies, &w.graph, 1.0 / 3.0, 9).unwrap();
    assert_eq!(a, b);
    let (face, body) = a;
    for (f, bo) in [(&face.train, &body.train), (&face.gallery, &body.gallery), (&face.query, &body.query)] {
        assert_eq!(f.len(), bo.len());
        for s in f.samples() {
            assert!(bo.by_id(&s.id.replace("-face", "-body")).is_some());
        }
    }
    let mut ids: Vec<_> = face.query.samples().iter().map(|s| s.identity.clone()).collect();
    let n = ids.len();
    ids.dedup();
    assert_eq!(ids.len(), n, "one query per identity");
}
