use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::Arc;
use std::time::Instant;

use chrono::{Datelike, NaiveDate, Timelike};
use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest, ProptestConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use soundscape_core::corpus::{MemoryFrames, SensorInfo};
use soundscape_core::index::{brute_force_knn, IndexParams, IndexScope, SimilarityIndex};
use soundscape_core::metrics::recall;
use soundscape_core::prototype::{PrototypeStore, TrainParams};
use soundscape_core::query::{
    calendar_summary, frame_classification_matrix, likelihood_bin, query_by_example, query_by_prototype,
    selection_summary, IndexSet, PrototypeQuery, QuerySeed, QuerySource, ScoreKind,
};
use soundscape_core::synthetic::{axis_centers, generate_day, PlantedConcept, SyntheticSpec, TemporalPattern};
use soundscape_core::types::day_start;
use soundscape_core::{Embedding, Error, Frame, FrameRef, FrameSource, Polarity};

fn year_start(year: i32) -> i64 {
    day_start(NaiveDate::from_ymd_opt(year, 1, 1).unwrap())
}

/// Groups frames by (date, 6-hour slice) through chrono.
fn grouping_oracle(frames: &[FrameRef], year: i32) -> BTreeMap<NaiveDate, [u32; 4]> {
    let mut out: BTreeMap<NaiveDate, [u32; 4]> = BTreeMap::new();
    for f in frames {
        let t = f.datetime();
        if t.year() == year {
            out.entry(t.date_naive()).or_default()[(t.hour() / 6) as usize] += 1;
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn calendar_matches_grouping(
        year in 2019i32..2026,
        offsets in prop::collection::vec(-86_400i64 * 3..86_400 * 370, 0..400),
        frame_index in 0u8..10,
    ) {
        let frames: Vec<FrameRef> = offsets
            .iter()
            .map(|o| FrameRef::new("s", year_start(year) + o, frame_index).unwrap())
            .collect();
        let summary = calendar_summary(&frames, year).unwrap();
        let leap = NaiveDate::from_ymd_opt(year, 2, 29).is_some();
        prop_assert_eq!(summary.cells.len(), if leap { 366 } else { 365 });
        let oracle = grouping_oracle(&frames, year);
        let mut max = 0;
        for cell in &summary.cells {
            prop_assert_eq!(cell.slice_counts.iter().sum::<u32>(), cell.total);
            prop_assert_eq!(cell.slice_counts, oracle.get(&cell.date).copied().unwrap_or_default());
            max = max.max(cell.total);
        }
        for cell in &summary.cells {
            let want = if max == 0 { 0.0 } else { cell.total as f64 / max as f64 };
            prop_assert_eq!(cell.density, want);
        }
        if max > 0 {
            prop_assert!(summary.cells.iter().any(|c| c.density == 1.0));
        }
    }
}

#[test]
fn calendar_slice_boundaries() {
    let base = year_start(2021) + 40 * 86_400;
    let at = |s: i64| FrameRef::new("s", base + s, 0).unwrap();
    let frames = [at(0), at(6 * 3600 - 1), at(6 * 3600), at(12 * 3600), at(18 * 3600 - 1), at(18 * 3600), at(86_399)];
    let summary = calendar_summary(&frames, 2021).unwrap();
    assert_eq!(summary.cells[40].slice_counts, [2, 1, 2, 2]);
    assert_eq!(summary.cells[40].density, 1.0);
    // The frame index shifts the timestamp across a boundary.
    let late = FrameRef::new("s", base + 6 * 3600 - 5, 7).unwrap();
    assert_eq!(calendar_summary([&late], 2021).unwrap().cells[40].slice_counts, [0, 1, 0, 0]);

    let empty = calendar_summary(std::iter::empty(), 2020).unwrap();
    assert_eq!(empty.cells.len(), 366);
    assert!(empty.cells.iter().all(|c| c.total == 0 && c.density == 0.0));
}

#[test]
fn calendar_for_100k_hits_is_fast() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let frames: Vec<FrameRef> = (0..100_000)
        .map(|_| FrameRef::new("s", year_start(2021) + rng.random_range(0..365 * 86_400), rng.random_range(0..10)).unwrap())
        .collect();
    let mut times = Vec::new();
    for _ in 0..5 {
        let t = Instant::now();
        let summary = calendar_summary(&frames, 2021).unwrap();
        times.push(t.elapsed());
        assert_eq!(summary.cells.iter().map(|c| c.total).sum::<u32>(), 100_000);
    }
    times.sort();
    assert!(times[2].as_millis() < 100, "{times:?}");
}

fn frame_ref(i: usize, sensor: &str) -> FrameRef {
    FrameRef::new(sensor, year_start(2022) + (i / 10) as i64 * 617, (i % 10) as u8).unwrap()
}

fn gaussian_frames(n: usize, dim: usize, sensor: &str, seed: u64) -> Vec<Frame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let v = (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            Frame::new(frame_ref(i, sensor), Embedding::new(v).unwrap())
        })
        .collect()
}

fn index_of(frames: &[Frame]) -> Arc<SimilarityIndex> {
    let items = frames.iter().map(|f| (&f.id, f.embedding.as_slice()));
    Arc::new(SimilarityIndex::build(items, IndexParams::default(), IndexScope::Explicit).unwrap())
}

#[test]
fn example_query_over_two_indices_matches_brute_force() {
    let a = gaussian_frames(3000, 16, "a", 1);
    let b = gaussian_frames(3000, 16, "b", 2);
    let scope = IndexSet::new(vec![index_of(&a), index_of(&b)]);
    let all: Vec<Frame> = a.iter().chain(&b).cloned().collect();
    let source = MemoryFrames::new(all.clone()).unwrap();

    let mut total = 0.0;
    for q in 0..10 {
        let seed = &all[q * 531].id;
        let hits = query_by_example(&QuerySeed::Frame(seed.clone()), 100, &scope, &source).unwrap();
        assert_eq!(hits.source, QuerySource::ExampleFrame { frame: seed.clone() });
        assert_eq!(hits.score, ScoreKind::Distance);
        assert_eq!(hits.len(), 100);
        assert!(hits.hits.windows(2).all(|w| w[0].score <= w[1].score));
        assert_eq!(hits.frames().collect::<HashSet<_>>().len(), 100);
        let exact = brute_force_knn(all.iter().map(|f| (&f.id, f.embedding.as_slice())), all[q * 531].embedding.as_slice(), 100).unwrap();
        let got: Vec<FrameRef> = hits.frames().cloned().collect();
        let want: Vec<FrameRef> = exact.into_iter().map(|h| h.frame).collect();
        total += recall(&got, &want);
    }
    assert!(total / 10.0 >= 0.9, "recall {}", total / 10.0);

    let own = query_by_example(&QuerySeed::Frame(a[17].id.clone()), 1, &scope, &source).unwrap();
    assert_eq!(own.hits[0].frame, a[17].id);
    assert_eq!(own.hits[0].score, 0.0);

    let uploaded = query_by_example(&QuerySeed::Embedding(b[5].embedding.clone()), 3, &scope, &source).unwrap();
    assert_eq!(uploaded.source, QuerySource::UploadedFrame);
    assert_eq!(uploaded.hits[0].frame, b[5].id);

    let big = query_by_example(&QuerySeed::Frame(a[0].id.clone()), 10_000, &scope, &source).unwrap();
    assert_eq!(big.len(), 6000);

    let missing = FrameRef::new("zz", 0, 0).unwrap();
    assert!(matches!(query_by_example(&QuerySeed::Frame(missing), 5, &scope, &source), Err(Error::UnknownFrame(_))));
    assert!(query_by_example(&QuerySeed::Frame(a[0].id.clone()), 0, &scope, &source).is_err());
    assert!(query_by_example(&QuerySeed::Frame(a[0].id.clone()), 5, &IndexSet::new(vec![]), &source).is_err());
}

fn planted_source(seed: u64, frames: usize) -> (MemoryFrames, BTreeSet<FrameRef>) {
    let spec = SyntheticSpec {
        sensors: vec![SensorInfo { id: "s".into(), lat: 0.0, lon: 0.0, name: "s".into() }],
        start_date: NaiveDate::from_ymd_opt(2022, 5, 1).unwrap(),
        days: 1,
        dim: 32,
        seed,
        concepts: axis_centers(5, 32, 8.0)
            .into_iter()
            .enumerate()
            .map(|(i, center)| PlantedConcept {
                name: format!("c{i}"),
                center,
                stddev: 1.0,
                pattern: TemporalPattern::all_day(0.03),
            })
            .collect(),
        audio_clips_per_day: 0,
    };
    let (day, planted) = generate_day(&spec, 0, 0).unwrap();
    let frames: Vec<Frame> = day.to_frames().into_iter().take(frames).collect();
    let keep: HashSet<&FrameRef> = frames.iter().map(|f| &f.id).collect();
    let truth = planted.iter().filter(|(r, c)| *c == 1 && keep.contains(r)).map(|(r, _)| r.clone()).collect();
    (MemoryFrames::new(frames).unwrap(), truth)
}

#[test]
fn prototype_query_finds_planted_frames() {
    let (source, truth) = planted_source(4, 12_000);
    assert!(truth.len() > 150);
    let frames: Vec<Frame> = source.iter().map(|(r, v)| Frame::new(r.clone(), Embedding::new(v.to_vec()).unwrap())).collect();
    let scope = IndexSet::new(vec![index_of(&frames)]);
    let store = PrototypeStore::in_memory();
    let positives: Vec<FrameRef> = truth.iter().take(50).cloned().collect();
    let negatives: Vec<FrameRef> = source.refs().iter().filter(|r| !truth.contains(r)).step_by(500).take(10).cloned().collect();
    store.record_annotation("u", "c1", &positives, Polarity::Positive, &source).unwrap();
    store.record_annotation("u", "c1", &negatives, Polarity::Negative, &source).unwrap();
    let v = store.train("c1", &source, &TrainParams::default()).unwrap();

    let hits = query_by_prototype(&v, &PrototypeQuery::default(), &scope, &source).unwrap();
    assert_eq!(hits.source, QuerySource::PrototypeConcept { concept: "c1".into(), version: 1 });
    assert_eq!(hits.len(), 100);
    assert!(hits.hits.windows(2).all(|w| w[0].score >= w[1].score));
    for h in &hits.hits {
        assert!(h.score >= 0.5);
        let direct = v.predict(&[source.embedding(&h.frame).unwrap()]).unwrap()[0];
        assert_eq!(h.score, direct);
    }
    let precision = hits.frames().filter(|r| truth.contains(r)).count() as f64 / 100.0;
    assert!(precision >= 0.9, "precision {precision}");

    let none = query_by_prototype(&v, &PrototypeQuery { tau: 1.01, ..PrototypeQuery::default() }, &scope, &source).unwrap();
    assert!(none.is_empty());

    let mut bare = (*v).clone();
    bare.representatives.clear();
    assert!(matches!(query_by_prototype(&bare, &PrototypeQuery::default(), &scope, &source), Err(Error::NoRepresentatives(_))));
}

#[test]
fn selection_summary_matches_counting() {
    let frames = gaussian_frames(2000, 6, "s", 9);
    let source = MemoryFrames::new(frames.clone()).unwrap();
    let store = PrototypeStore::in_memory();
    let pos: Vec<FrameRef> = frames.iter().filter(|f| f.embedding.as_slice()[0] > 1.0).map(|f| f.id.clone()).collect();
    store.record_annotation("u", "hi", &pos, Polarity::Positive, &source).unwrap();
    let v = store.train("hi", &source, &TrainParams::default()).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let selection: Vec<FrameRef> = (0..300).map(|_| frames[rng.random_range(0..frames.len())].id.clone()).collect();
    let summary = selection_summary(&selection, Some(&v), &source).unwrap();
    let mut hours = [0u32; 24];
    let mut bins = [0u32; 10];
    for r in &selection {
        hours[r.datetime().hour() as usize] += 1;
        let l = v.predict(&[source.embedding(r).unwrap()]).unwrap()[0];
        bins[((l * 10.0) as usize).min(9)] += 1;
    }
    assert_eq!(summary.hour_histogram, hours);
    assert_eq!(summary.likelihood_histogram, Some(bins));
    assert_eq!(selection_summary(&selection, None, &source).unwrap().likelihood_histogram, None);

    let eight: Vec<FrameRef> = (0..5).map(|i| FrameRef::new("s", year_start(2022) + 8 * 3600 + i * 60, 0).unwrap()).collect();
    let eight_source = MemoryFrames::new(eight.iter().map(|r| Frame::new(r.clone(), Embedding::new(vec![0.0]).unwrap())).collect()).unwrap();
    assert_eq!(selection_summary(&eight, None, &eight_source).unwrap().hour_histogram[8], 5);
    assert_eq!((likelihood_bin(0.05), likelihood_bin(0.95), likelihood_bin(1.0), likelihood_bin(0.0)), (0, 9, 9, 0));

    let unknown = [FrameRef::new("q", 0, 0).unwrap()];
    assert!(matches!(selection_summary(&unknown, None, &source), Err(Error::UnknownFrame(_))));
}

#[test]
fn classification_matrix_matches_predict() {
    let frames = gaussian_frames(400, 5, "s", 11);
    let source = MemoryFrames::new(frames.clone()).unwrap();
    let store = PrototypeStore::in_memory();
    for (name, d) in [("first", 0usize), ("second", 1)] {
        let pos: Vec<FrameRef> = frames.iter().filter(|f| f.embedding.as_slice()[d] > 0.8).map(|f| f.id.clone()).collect();
        store.record_annotation("u", name, &pos, Polarity::Positive, &source).unwrap();
        store.train(name, &source, &TrainParams::default()).unwrap();
    }
    let versions = vec![store.latest("first").unwrap(), store.latest("second").unwrap()];
    let clip = frames[120].id.clip();
    let m = frame_classification_matrix(&clip, &versions, &source).unwrap();
    assert_eq!(m.rows.len(), 10);
    assert_eq!(m.concepts, vec!["first".to_string(), "second".to_string()]);
    for (f, row) in clip.frames().zip(&m.rows) {
        let e = source.embedding(&f).unwrap();
        let want: Vec<f64> = versions.iter().map(|v| v.predict(std::slice::from_ref(&e)).unwrap()[0]).collect();
        assert_eq!(row, &want);
    }
    let empty = frame_classification_matrix(&clip, &[], &source).unwrap();
    assert_eq!(empty.rows, vec![Vec::<f64>::new(); 10]);
    let missing = FrameRef::new("s", 5, 0).unwrap().clip();
    assert!(matches!(frame_classification_matrix(&missing, &versions, &source), Err(Error::UnknownClip(_))));
}
