mod common;

use common::*;
use fsac_core::data::{split_dataset, DatasetSplit, Part, SampleSet};
use fsac_core::eval::{export_features, rank_gallery, CMC_RANKS};
use fsac_core::{evaluate, generate_world, EmbeddingHead, Matrix, MetricsReport, Ranking, WorldConfig};
use proptest::prelude::*;

fn unit(deg: f64) -> Vec<f64> {
    let r = deg.to_radians();
    vec![r.cos(), r.sin()]
}

#[test]
fn toy_split_matches_hand_computation() {
    let at = |id: &str, frame, deg, who: &str| sample(id, "b", frame, unit(deg), who);
    let query = SampleSet::new(Part::Face, vec![at("qa", 0, 0.0, "A"), at("qb", 1, 90.0, "B")]).unwrap();
    let gallery = SampleSet::new(
        Part::Face,
        vec![
            at("g0", 2, 10.0, "A"),
            at("g1", 3, 20.0, "B"),
            at("g2", 4, 30.0, "A"),
            at("g3", 5, 80.0, "B"),
            at("g4", 6, 95.0, "A"),
            at("g5", 7, 175.0, "B"),
        ],
    )
    .unwrap();
    let split = DatasetSplit {
        train: SampleSet::empty(Part::Face, 2),
        gallery,
        query,
    };
    let r = evaluate(&split, &EmbeddingHead::identity(2, 2)).unwrap();
    // A hits at ranks 1, 3, 5; B hits at ranks 2, 4, 6
    let ap_a = (1.0 + 2.0 / 3.0 + 3.0 / 5.0) / 3.0;
    let ap_b = (1.0 / 2.0 + 2.0 / 4.0 + 3.0 / 6.0) / 3.0;
    assert!((r.map - (ap_a + ap_b) / 2.0).abs() < 1e-12);
    assert!((r.map - 113.0 / 180.0).abs() < 1e-12);
    assert_eq!((r.rank(1), r.rank(5), r.rank(10)), (0.5, 1.0, 1.0));
    assert_eq!((r.n_queries, r.n_rejected), (2, 0));
}

fn report(query: &Matrix, qid: &[usize], gallery: &Matrix, gid: &[usize]) -> MetricsReport {
    let rankings: Vec<Ranking> = (0..query.rows())
        .filter_map(|q| {
            let order = rank_gallery(query.row(q), gallery).unwrap();
            let relevant: Vec<bool> = order.iter().map(|&g| gid[g] == qid[q]).collect();
            relevant.contains(&true).then(|| Ranking {
                query_id: q.to_string(),
                order,
                relevant,
            })
        })
        .collect();
    MetricsReport::from_rankings(&rankings, query.rows() - rankings.len()).unwrap()
}

fn instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<usize>, Vec<usize>)> {
    (2usize..6, 1usize..12, 3usize..20).prop_flat_map(|(d, nq, ng)| {
        (
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), nq),
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), ng),
            prop::collection::vec(0usize..3, nq),
            // every identity present in the gallery
            prop::collection::vec(0usize..3, ng).prop_map(|mut g| {
                g[..3].copy_from_slice(&[0, 1, 2]);
                g
            }),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn metrics_ignore_gallery_order((q, g, qid, gid) in instance(), seed in any::<u64>()) {
        use rand::{seq::SliceRandom, SeedableRng};
        let mut perm: Vec<usize> = (0..g.len()).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let pg: Vec<Vec<f64>> = perm.iter().map(|&i| g[i].clone()).collect();
        let pid: Vec<usize> = perm.iter().map(|&i| gid[i]).collect();
        let qm = Matrix::from_rows(&q).unwrap();
        let a = report(&qm, &qid, &Matrix::from_rows(&g).unwrap(), &gid);
        let b = report(&qm, &qid, &Matrix::from_rows(&pg).unwrap(), &pid);
        prop_assert!((a.map - b.map).abs() < 1e-12);
        prop_assert_eq!(&a.cmc, &b.cmc);
    }

    #[test]
    fn metrics_ignore_rotations((q, g, qid, gid) in instance(), u in prop::collection::vec(-1.0f64..1.0, 6), v in prop::collection::vec(-1.0f64..1.0, 6)) {
        let d = q[0].len();
        let rot = rotation(&u[..d], &v[..d]);
        let (qm, gm) = (Matrix::from_rows(&q).unwrap(), Matrix::from_rows(&g).unwrap());
        let a = report(&qm, &qid, &gm, &gid);
        let b = report(&rotate_rows(&qm, &rot), &qid, &rotate_rows(&gm, &rot), &gid);
        prop_assert!((a.map - b.map).abs() < 1e-9);
        prop_assert_eq!(&a.cmc, &b.cmc);
        prop_assert!(a.rank(1) <= a.rank(5) && a.rank(5) <= a.rank(10));
    }
}

#[test]
fn rotating_the_head_output_leaves_world_metrics_unchanged() {
    let w = generate_world(&WorldConfig {
        n_books: 2,
        frames_per_book: 150,
        ..Default::default()
    })
    .unwrap();
    let split = split_dataset(&w.faces, 1.0 / 3.0, 3).unwrap();
    let d = w.faces.dim();
    let head = EmbeddingHead::init(d, 8, 0.3, 1).unwrap();
    let rot = rotation(&unit(20.0).repeat(4), &unit(75.0).repeat(4));
    let mut turned = head.clone();
    turned.weight = {
        let rows: Vec<Vec<f64>> = (0..8).map(|r| (0..d).map(|c| (0..8).map(|k| rot[(r, k)] * head.weight[(k, c)]).sum()).collect()).collect();
        Matrix::from_rows(&rows).unwrap()
    };
    turned.bias = rot.mul_vec(&head.bias);
    let a = evaluate(&split, &head).unwrap();
    let b = evaluate(&split, &turned).unwrap();
    assert!((a.map - b.map).abs() < 1e-9);
    for k in CMC_RANKS {
        assert_eq!(a.rank(k), b.rank(k));
    }
}

#[test]
fn exported_features_parse_back_exactly() {
    let w = generate_world(&WorldConfig {
        n_books: 1,
        frames_per_book: 40,
        ..Default::default()
    })
    .unwrap();
    let head = EmbeddingHead::init(w.faces.dim(), 5, 0.2, 7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("features.csv");
    export_features(&w.faces, &head, &path).unwrap();

    let mut reader = csv::Reader::from_path(&path).unwrap();
    let header = reader.headers().unwrap().clone();
    assert_eq!(header.len(), 2 + 5);
    let mut n = 0;
    for (rec, s) in reader.records().zip(w.faces.samples()) {
        let rec = rec.unwrap();
        assert_eq!(&rec[0], s.id);
        assert_eq!(Some(&rec[1]), s.identity.as_deref());
        let parsed: Vec<f64> = rec.iter().skip(2).map(|v| v.parse().unwrap()).collect();
        assert_eq!(parsed, head.forward(&s.embedding).unwrap());
        n += 1;
    }
    assert_eq!(n, w.faces.len());
}
