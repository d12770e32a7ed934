use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest, ProptestConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use soundscape_core::cluster::{dbscan, default_eps, DEFAULT_MIN_PTS};
use soundscape_core::corpus::{MemoryFrames, SensorInfo};
use soundscape_core::metrics::roc_auc;
use soundscape_core::prototype::{
    assemble_training_set, classify_day, compute_representatives, AnnotationLog, DecisionTree, Forest, ForestParams,
    PrototypeStore, TrainParams, TreeNode,
};
use soundscape_core::synthetic::{axis_centers, generate_day, PlantedConcept, SyntheticSpec, TemporalPattern};
use soundscape_core::types::day_start;
use soundscape_core::{Embedding, Error, Frame, FrameRef, FrameSource, Polarity};

fn date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2022, 3, 14).unwrap()
}

fn frame_ref(i: usize) -> FrameRef {
    FrameRef::new("s", day_start(date()) + (i / 10) as i64 * 20, (i % 10) as u8).unwrap()
}

fn random_frames(n: usize, dim: usize, seed: u64) -> MemoryFrames {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = (0..n)
        .map(|i| {
            let v = (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            Frame::new(frame_ref(i), Embedding::new(v).unwrap())
        })
        .collect();
    MemoryFrames::new(frames).unwrap()
}

/// Frames drawn around the given centres, `per` each.
fn blobs(centers: &[Vec<f32>], per: usize, stddev: f32, seed: u64) -> MemoryFrames {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = Vec::new();
    for c in centers {
        for _ in 0..per {
            let v = c.iter().map(|&m| m + stddev * rng.sample::<f32, _>(StandardNormal)).collect();
            frames.push(Frame::new(frame_ref(frames.len()), Embedding::new(v).unwrap()));
        }
    }
    MemoryFrames::new(frames).unwrap()
}

/// Walks a tree by hand from its node list.
fn traverse(nodes: &[TreeNode], x: &[f32]) -> f64 {
    let mut i = 0;
    loop {
        match nodes[i] {
            TreeNode::Leaf { positive_fraction } => return positive_fraction,
            TreeNode::Split { feature, threshold, left, right } => {
                i = if x[feature as usize] <= threshold { left as usize } else { right as usize };
            }
        }
    }
}

fn oracle_likelihood(trees: &[DecisionTree], x: &[f32]) -> f64 {
    trees.iter().map(|t| traverse(t.nodes(), x)).sum::<f64>() / trees.len() as f64
}

fn split(feature: u32, threshold: f32, left: u32, right: u32) -> TreeNode {
    TreeNode::Split { feature, threshold, left, right }
}

fn leaf(positive_fraction: f64) -> TreeNode {
    TreeNode::Leaf { positive_fraction }
}

fn three_trees() -> Vec<DecisionTree> {
    vec![
        DecisionTree::new(vec![split(0, 0.0, 1, 2), leaf(0.25), split(1, 1.5, 3, 4), leaf(0.5), leaf(1.0)]).unwrap(),
        DecisionTree::new(vec![split(2, -1.0, 1, 2), leaf(0.0), leaf(0.8)]).unwrap(),
        DecisionTree::new(vec![leaf(0.6)]).unwrap(),
    ]
}

#[test]
fn three_tree_forest_by_hand() {
    let forest = Forest::from_trees(3, three_trees()).unwrap();
    // (0.25 + 0.8 + 0.6) / 3: left of the first split, right of the second.
    assert!((forest.predict_one(&[-1.0, 0.0, 0.0]).unwrap() - 1.65 / 3.0).abs() < 1e-12);
    // (1.0 + 0.0 + 0.6) / 3
    assert!((forest.predict_one(&[1.0, 2.0, -2.0]).unwrap() - 1.6 / 3.0).abs() < 1e-12);
    // Thresholds are inclusive on the left: (0.25 + 0.0 + 0.6) / 3.
    assert!((forest.predict_one(&[0.0, 9.0, -1.0]).unwrap() - 0.85 / 3.0).abs() < 1e-12);
    assert_eq!(forest.predict(&[]).unwrap(), Vec::<f64>::new());
    assert!(matches!(forest.predict_one(&[0.0; 2]), Err(Error::DimMismatch { .. })));
}

#[test]
fn malformed_trees_rejected() {
    assert!(DecisionTree::new(vec![split(0, 0.0, 0, 1), leaf(0.5)]).is_err());
    assert!(DecisionTree::new(vec![leaf(1.5)]).is_err());
    assert!(DecisionTree::new(vec![split(0, 0.0, 1, 7), leaf(0.5)]).is_err());
    assert!(Forest::from_trees(2, three_trees()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn three_tree_likelihood_is_the_mean_of_leaves(x in prop::collection::vec(-3.0f32..3.0, 3)) {
        let trees = three_trees();
        let forest = Forest::from_trees(3, trees.clone()).unwrap();
        let got = forest.predict_one(&x).unwrap();
        prop_assert!((got - oracle_likelihood(&trees, &x)).abs() < 1e-6);
        prop_assert!((0.0..=1.0).contains(&got));
    }
}

#[test]
fn fitted_forest_matches_traversal_oracle() {
    let source = blobs(&axis_centers(2, 8, 2.0), 60, 1.0, 3);
    let x: Vec<f32> = source.iter().flat_map(|(_, v)| v.to_vec()).collect();
    let y: Vec<bool> = (0..120).map(|i| i < 60).collect();
    let params = ForestParams { seed: 4, ..ForestParams::default() };
    let forest = Forest::fit(&x, 8, &y, &params).unwrap();
    assert_eq!(forest.trees().len(), 100);
    let probe = random_frames(200, 8, 5);
    for (_, v) in probe.iter() {
        let got = forest.predict_one(v).unwrap();
        assert!((got - oracle_likelihood(forest.trees(), v)).abs() < 1e-6);
        assert!((0.0..=1.0).contains(&got));
    }
    for tree in forest.trees() {
        for node in tree.nodes() {
            if let TreeNode::Leaf { positive_fraction } = node {
                assert!((0.0..=1.0).contains(positive_fraction));
            }
        }
    }
    // Same seed, same trees.
    let again = Forest::fit(&x, 8, &y, &params).unwrap();
    assert_eq!(again.trees(), forest.trees());
}

#[test]
fn degenerate_training_data_rejected() {
    let x = vec![1.0f32; 4 * 10];
    let y: Vec<bool> = (0..10).map(|i| i % 2 == 0).collect();
    let err = Forest::fit(&x, 4, &y, &ForestParams::default()).unwrap_err();
    assert!(err.to_string().contains("degenerate"), "{err}");
    assert!(Forest::fit(&x, 4, &[true; 10], &ForestParams::default()).is_err());
}

#[test]
fn training_set_counts() {
    let source = random_frames(1000, 4, 1);
    let mut labels = BTreeMap::new();
    for i in 0..50 {
        labels.insert(frame_ref(i), Polarity::Positive);
    }
    for i in 50..60 {
        labels.insert(frame_ref(i), Polarity::Negative);
    }
    let set = assemble_training_set("c", &labels, &source, 9).unwrap();
    assert_eq!(set.positives.len(), 50);
    assert_eq!(set.explicit_negatives.len(), 10);
    assert_eq!(set.random_negatives.len(), 100);
    assert_eq!(set.len(), 160);
    assert_eq!(assemble_training_set("c", &labels, &source, 9).unwrap(), set);
    assert_ne!(assemble_training_set("c", &labels, &source, 10).unwrap().random_negatives, set.random_negatives);

    let only_negative: BTreeMap<_, _> = [(frame_ref(0), Polarity::Negative)].into();
    assert!(matches!(assemble_training_set("c", &only_negative, &source, 0), Err(Error::NoPositives(_))));
}

/// Replays annotations in order; later ones overwrite earlier ones.
fn replay(events: &[(Vec<usize>, bool)]) -> BTreeMap<FrameRef, Polarity> {
    let mut out = BTreeMap::new();
    for (refs, positive) in events {
        for &i in refs {
            out.insert(frame_ref(i), if *positive { Polarity::Positive } else { Polarity::Negative });
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn training_set_law(
        n in 5usize..300,
        events in prop::collection::vec((prop::collection::vec(0usize..300, 1..20), prop::bool::ANY), 1..12),
        seed in 0u64..10_000,
    ) {
        let source = random_frames(n, 3, seed);
        let log = AnnotationLog::in_memory();
        let mut applied = Vec::new();
        for (refs, positive) in &events {
            let refs: Vec<usize> = refs.iter().map(|i| i % n).collect();
            let ids: Vec<FrameRef> = refs.iter().map(|&i| frame_ref(i)).collect();
            let polarity = if *positive { Polarity::Positive } else { Polarity::Negative };
            log.record("u", "c", &ids, polarity, &source).unwrap();
            applied.push((refs, *positive));
        }
        let labels = log.labels("c");
        prop_assert_eq!(&labels, &replay(&applied));
        prop_assert_eq!(log.len(), applied.len());

        let positives = labels.values().filter(|p| **p == Polarity::Positive).count();
        match assemble_training_set("c", &labels, &source, seed) {
            Err(Error::NoPositives(_)) => prop_assert_eq!(positives, 0),
            Err(e) => return Err(proptest::test_runner::TestCaseError::fail(e.to_string())),
            Ok(set) => {
                let pool = n - labels.len();
                prop_assert_eq!(set.positives.len(), positives);
                prop_assert_eq!(set.explicit_negatives.len(), labels.len() - positives);
                prop_assert_eq!(set.random_negatives.len(), (2 * positives).min(pool));
                for r in &set.random_negatives {
                    prop_assert!(source.contains(r));
                    prop_assert!(!labels.contains_key(r));
                }
                prop_assert!(set.positives.is_disjoint(&set.explicit_negatives));
                prop_assert_eq!(assemble_training_set("c", &labels, &source, seed).unwrap(), set);
            }
        }
    }
}

#[test]
fn annotation_errors_and_durability() {
    let dir = tempfile::tempdir().unwrap();
    let source = random_frames(30, 3, 2);
    let path = dir.path().join("log.jsonl");
    let log = AnnotationLog::open(&path).unwrap();
    let refs: Vec<FrameRef> = (0..30).map(frame_ref).collect();
    let first = log.record("ana", "dog bark", &refs, Polarity::Positive, &source).unwrap();
    let second = log.record("ana", "dog bark", &refs[..1], Polarity::Negative, &source).unwrap();
    assert_ne!(first, second);
    assert_eq!(log.len(), 2);
    assert!(log.record("ana", "dog bark", &[], Polarity::Positive, &source).is_err());
    let unknown = FrameRef::new("zz", 0, 0).unwrap();
    assert!(log.record("ana", "dog bark", &[unknown], Polarity::Positive, &source).is_err());
    assert!(log.record("ana", "../etc", &refs, Polarity::Positive, &source).is_err());
    assert_eq!(log.len(), 2);

    let reopened = AnnotationLog::open(&path).unwrap();
    assert_eq!(reopened.entries(), log.entries());
    assert_eq!(reopened.labels("dog bark")[&refs[0]], Polarity::Negative);
    assert_eq!(reopened.labels("dog bark")[&refs[1]], Polarity::Positive);
}

/// The member of `members` nearest their centroid, by brute force.
fn nearest_to_centroid(points: &[Vec<f32>], members: &[usize]) -> usize {
    let dim = points[0].len();
    let centroid: Vec<f64> = (0..dim)
        .map(|d| members.iter().map(|&m| points[m][d] as f64).sum::<f64>() / members.len() as f64)
        .collect();
    let dist = |m: usize| -> f64 { points[m].iter().zip(&centroid).map(|(&a, &b)| (a as f64 - b).powi(2)).sum() };
    *members.iter().min_by(|&&a, &&b| dist(a).total_cmp(&dist(b))).unwrap()
}

#[test]
fn two_blobs_two_representatives() {
    let mut centers = axis_centers(2, 6, 10.0);
    centers[1][0] = 0.0;
    let source = blobs(&centers, 40, 0.5, 8);
    let positives: BTreeSet<FrameRef> = source.refs().iter().cloned().collect();
    let reps = compute_representatives("c", &positives, &source).unwrap();
    assert_eq!(reps.len(), 2);

    let refs: Vec<FrameRef> = positives.iter().cloned().collect();
    let points: Vec<Vec<f32>> = refs.iter().map(|r| source.embedding(r).unwrap().into_vec()).collect();
    let slices: Vec<&[f32]> = points.iter().map(Vec::as_slice).collect();
    let clusters = dbscan(&slices, default_eps(&slices), DEFAULT_MIN_PTS).unwrap();
    assert_eq!(clusters.n_clusters(), 2);
    let mut blobs_hit = BTreeSet::new();
    for (c, rep) in reps.iter().enumerate() {
        assert!(positives.contains(rep));
        let want = nearest_to_centroid(&points, &clusters.members(c));
        assert_eq!(rep, &refs[want]);
        blobs_hit.insert(source.position(rep).unwrap() / 40);
    }
    assert_eq!(blobs_hit.len(), 2);
}

#[test]
fn representative_fallbacks() {
    let source = random_frames(20, 4, 6);
    let one: BTreeSet<FrameRef> = [frame_ref(7)].into();
    assert_eq!(compute_representatives("c", &one, &source).unwrap(), vec![frame_ref(7)]);

    // Four scattered points are all noise at min_pts 5.
    let few: BTreeSet<FrameRef> = (0..4).map(frame_ref).collect();
    let reps = compute_representatives("c", &few, &source).unwrap();
    assert_eq!(reps.len(), 1);
    let points: Vec<Vec<f32>> = (0..4).map(|i| source.vector(i).to_vec()).collect();
    assert_eq!(reps[0], frame_ref(nearest_to_centroid(&points, &[0, 1, 2, 3])));

    assert!(matches!(compute_representatives("c", &BTreeSet::new(), &source), Err(Error::NoPositives(_))));
}

fn planted_spec(seed: u64) -> SyntheticSpec {
    let centers = axis_centers(5, 32, 8.0);
    SyntheticSpec {
        sensors: vec![SensorInfo { id: "s".into(), lat: 0.0, lon: 0.0, name: "s".into() }],
        start_date: date(),
        days: 1,
        dim: 32,
        seed,
        concepts: centers
            .into_iter()
            .enumerate()
            .map(|(i, center)| PlantedConcept {
                name: format!("c{i}"),
                center,
                stddev: 1.0,
                pattern: TemporalPattern::all_day(0.02),
            })
            .collect(),
        audio_clips_per_day: 0,
    }
}

#[test]
fn incremental_labeling_converges() {
    let (day, planted) = generate_day(&planted_spec(21), 0, 0).unwrap();
    let source = MemoryFrames::from_days([&day]).unwrap();
    let concept_frames: Vec<FrameRef> = planted.iter().filter(|(_, c)| *c == 0).map(|(r, _)| r.clone()).collect();
    let planted_any: BTreeSet<&FrameRef> = planted.iter().map(|(r, _)| r).collect();
    let others: Vec<FrameRef> = day.refs().iter().filter(|r| !planted_any.contains(r)).step_by(97).cloned().collect();

    let store = PrototypeStore::in_memory();
    let params = TrainParams { seed: 5, ..TrainParams::default() };
    // Each round labels 15 concept frames and 5 background frames.
    for round in 0..6 {
        let pos = &concept_frames[round * 15..(round + 1) * 15];
        let neg = &others[round * 5..(round + 1) * 5];
        store.record_annotation("u", "c0", pos, Polarity::Positive, &source).unwrap();
        store.record_annotation("u", "c0", neg, Polarity::Negative, &source).unwrap();
        let v = store.train("c0", &source, &params).unwrap();
        assert_eq!(v.version as usize, round + 1);
        assert_eq!(v.convergence_delta.is_none(), round == 0);
    }
    let proto = store.prototype("c0").unwrap();
    let mut deltas = Vec::new();
    for pair in proto.versions.windows(2) {
        let (prev, cur) = (&pair[0], &pair[1]);
        let mut sum = 0.0;
        for l in &cur.labeled {
            let x = source.embedding(&l.frame).unwrap();
            sum += (oracle_likelihood(cur.forest.trees(), x.as_slice()) - oracle_likelihood(prev.forest.trees(), x.as_slice())).abs();
        }
        let oracle = sum / cur.labeled.len() as f64;
        let stored = cur.convergence_delta.unwrap();
        assert!((stored - oracle).abs() < 1e-6, "v{}: {stored} vs {oracle}", cur.version);
        deltas.push(stored);
    }
    assert_eq!(deltas.len(), 5);
    assert!(deltas[4] < deltas[0], "{deltas:?}");

    let summary = store.model_summary("c0").unwrap();
    assert_eq!(summary.versions.len(), 6);
    assert_eq!(summary.versions[0].convergence_delta, None);
    let summary_deltas: Vec<f64> = summary.versions[1..].iter().map(|v| v.convergence_delta.unwrap()).collect();
    assert_eq!(summary_deltas, deltas);
    assert!(matches!(store.model_summary("nope"), Err(Error::UnknownConcept(_))));
}

#[test]
fn planted_concept_is_recovered() {
    let spec = planted_spec(31);
    let (day, planted) = generate_day(&spec, 0, 0).unwrap();
    let source = MemoryFrames::from_days([&day]).unwrap();
    let truth: BTreeSet<&FrameRef> = planted.iter().filter(|(_, c)| *c == 2).map(|(r, _)| r).collect();
    let positives: Vec<FrameRef> = truth.iter().take(50).map(|r| (*r).clone()).collect();
    let negatives: Vec<FrameRef> = day.refs().iter().filter(|r| !truth.contains(r)).step_by(1000).take(10).cloned().collect();

    let store = PrototypeStore::in_memory();
    store.record_annotation("u", "c2", &positives, Polarity::Positive, &source).unwrap();
    store.record_annotation("u", "c2", &negatives, Polarity::Negative, &source).unwrap();
    let v = store.train("c2", &source, &TrainParams::default()).unwrap();
    assert_eq!(v.training_counts.random_negatives, 100);
    assert!(!v.representatives.is_empty());
    for r in &v.representatives {
        assert!(positives.contains(r));
    }

    let scores = classify_day(&v, &day).unwrap();
    assert_eq!(scores.len(), day.len());
    let labeled: BTreeSet<FrameRef> = v.labeled_refs().into_iter().collect();
    let mut held_scores = Vec::new();
    let mut held_truth = Vec::new();
    let (mut pos_sum, mut pos_n, mut neg_sum, mut neg_n) = (0.0, 0, 0.0, 0);
    for (r, &s) in &scores {
        let t = truth.contains(r);
        if t {
            pos_sum += s;
            pos_n += 1;
        } else {
            neg_sum += s;
            neg_n += 1;
        }
        if !labeled.contains(r) {
            held_scores.push(s);
            held_truth.push(t);
        }
    }
    assert!(pos_sum / pos_n as f64 > neg_sum / neg_n as f64);
    let auc = roc_auc(&held_scores, &held_truth).unwrap();
    assert!(auc >= 0.95, "auc {auc}");
}

#[test]
fn classify_day_agrees_with_predict() {
    let source = blobs(&axis_centers(2, 5, 3.0), 30, 1.0, 12);
    let store = PrototypeStore::in_memory();
    let pos: Vec<FrameRef> = source.refs()[..30].to_vec();
    store.record_annotation("u", "a", &pos, Polarity::Positive, &source).unwrap();
    let v = store.train("a", &source, &TrainParams::default()).unwrap();

    let mut frames: Vec<Frame> = source.iter().map(|(r, x)| Frame::new(r.clone(), Embedding::new(x.to_vec()).unwrap())).collect();
    let day = soundscape_core::corpus::DayFrameSet::from_frames("s", date(), frames.clone()).unwrap();
    let by_day = classify_day(&v, &day).unwrap();
    frames.reverse();
    let embeddings: Vec<Embedding> = frames.iter().map(|f| f.embedding.clone()).collect();
    let direct = v.predict(&embeddings).unwrap();
    for (f, p) in frames.iter().zip(direct) {
        assert_eq!(by_day[&f.id], p);
    }

    let constant = Forest::from_trees(5, vec![DecisionTree::new(vec![leaf(0.5)]).unwrap()]).unwrap();
    let mut flat = (*v).clone();
    flat.forest = constant;
    assert!(classify_day(&flat, &day).unwrap().values().all(|&p| p == 0.5));
}

#[test]
fn versions_persist_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    let source = blobs(&axis_centers(2, 4, 3.0), 25, 1.0, 14);
    let store = PrototypeStore::open(dir.path()).unwrap();
    store.record_annotation("u", "x", &source.refs()[..25], Polarity::Positive, &source).unwrap();
    let v1 = store.train("x", &source, &TrainParams::default()).unwrap();
    store.record_annotation("u", "x", &source.refs()[25..30], Polarity::Negative, &source).unwrap();
    let v2 = store.train("x", &source, &TrainParams { seed: 3, ..TrainParams::default() }).unwrap();
    assert_eq!((v1.version, v2.version), (1, 2));
    assert!(!store.is_training("x"));
    assert!(matches!(store.latest("y"), Err(Error::UnknownConcept(_))));

    let reopened = PrototypeStore::open(dir.path()).unwrap();
    let p = reopened.prototype("x").unwrap();
    assert_eq!(p.versions.len(), 2);
    assert_eq!(*p.versions[0], *v1);
    assert_eq!(*p.versions[1], *v2);
    assert_eq!(reopened.model_summary("x").unwrap(), store.model_summary("x").unwrap());
    assert_eq!(reopened.log().len(), 2);
}

#[test]
fn training_without_positives_fails() {
    let source = random_frames(20, 3, 1);
    let store = PrototypeStore::in_memory();
    assert!(matches!(store.train("none", &source, &TrainParams::default()), Err(Error::NoPositives(_))));
    store.record_annotation("u", "neg", &[frame_ref(0)], Polarity::Negative, &source).unwrap();
    assert!(matches!(store.train("neg", &source, &TrainParams::default()), Err(Error::NoPositives(_))));
    assert!(store.concepts().is_empty());
}
