use proptest::prelude::*;

use super::io::parse_episodes;
use super::*;

#[test]
fn reward_to_go_examples() {
    assert_eq!(reward_to_go(&[1.0, 1.0, 1.0]), vec![3.0, 2.0, 1.0]);
    assert_eq!(reward_to_go(&[0.0; 4]), vec![0.0; 4]);
}

proptest! {
    #[test]
    fn reward_to_go_recurrence(r in prop::collection::vec(-10.0f64..10.0, 1..50)) {
        let g = reward_to_go(&r);
        let t = r.len();
        prop_assert_eq!(g[t - 1], r[t - 1]);
        for i in 0..t - 1 {
            prop_assert_eq!(g[i], r[i] + g[i + 1]);
        }
    }
}

#[test]
fn normalized_score_examples() {
    assert_eq!(normalized_score(7.0, -3.0, 7.0).unwrap(), 100.0);
    assert_eq!(normalized_score(-3.0, -3.0, 7.0).unwrap(), 0.0);
    assert_eq!(normalized_score(2.0, -3.0, 7.0).unwrap(), 50.0);
    assert!(normalized_score(1.0, 2.0, 2.0).is_err());
}

fn toy_episode(len: usize, tag: f64) -> Episode {
    Episode::new(
        (0..len).map(|t| vec![t as f64, tag]).collect(),
        (0..len).map(|t| vec![t as f64 * 0.1]).collect(),
        vec![1.0; len],
        EpisodeMeta {
            env: "toy".into(),
            quality: Quality::Expert,
            seed: 0,
        },
    )
    .unwrap()
}

fn toy_dataset(lens: &[usize]) -> Dataset {
    Dataset {
        manifest: DatasetManifest {
            schema_version: SCHEMA_VERSION,
            env: "toy".into(),
            env_spec_hash: String::new(),
            episodes: lens.len(),
            quality_mix: BTreeMap::new(),
            reference: ReferenceScores {
                random: 0.0,
                expert: 1.0,
                episodes: 0,
                seed: 0,
            },
            creation_seed: 0,
            episodes_file: EPISODES_FILE.into(),
            episodes_sha256: String::new(),
        },
        episodes: lens.iter().enumerate().map(|(i, &l)| toy_episode(l, i as f64)).collect(),
    }
}

#[test]
fn short_episodes_are_front_padded() {
    let ds = toy_dataset(&[5]);
    let mut r = rng::stream(0, &[]);
    for s in sample_batch(&ds, 10, 20, &mut r).unwrap() {
        assert_eq!(s.valid.len(), 20);
        assert_eq!(s.pad(), 15);
        assert_eq!(s.len_valid(), 5);
        assert!(s.valid[..15].iter().all(|v| !v));
        assert_eq!(s.timesteps[15..], [0, 1, 2, 3, 4]);
    }
}

#[test]
fn context_of_one_gives_single_steps() {
    let ds = toy_dataset(&[7, 3]);
    let mut r = rng::stream(1, &[]);
    for s in sample_batch(&ds, 50, 1, &mut r).unwrap() {
        assert_eq!(s.valid, vec![true]);
        let ep = &ds.episodes[s.episode];
        assert_eq!(s.observations[0], ep.observations[s.start]);
        assert_eq!(s.rtg[0], ep.rtg[s.start]);
    }
}

#[test]
fn slice_starts_are_uniform() {
    let ds = toy_dataset(&[30]);
    let k = 10;
    let bins = 21;
    let mut counts = vec![0usize; bins];
    let mut r = rng::stream(2, &[]);
    let n = 100_000;
    for _ in 0..n {
        let s = sample_slice(&ds.episodes, k, &mut r);
        assert_eq!(s.len_valid(), k);
        counts[s.start] += 1;
    }
    let expected = n as f64 / bins as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 99.9th percentile of chi-squared with 20 degrees of freedom.
    assert!(chi2 < 45.31, "chi2 = {chi2}");
}

#[test]
fn empty_dataset_cannot_be_sampled() {
    let ds = toy_dataset(&[]);
    assert!(sample_batch(&ds, 1, 3, &mut rng::stream(0, &[])).is_err());
}

#[test]
fn write_read_round_trip_and_line_errors() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset("chainrunner", Quality::Medium, 12, 5, Execution::Parallel).unwrap();
    let m = write_dataset(dir.path(), &ds).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.episodes, ds.episodes);
    assert_eq!(back.manifest, m);
    let via_manifest = read_dataset(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(via_manifest.episodes, ds.episodes);

    let text = std::fs::read_to_string(dir.path().join(EPISODES_FILE)).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let cut = &lines[2][..lines[2].len() / 2];
    lines[2] = cut;
    let broken = lines.join("\n");
    let err = parse_episodes(&broken, Path::new("episodes.jsonl")).unwrap_err();
    assert!(err.to_string().starts_with("episodes.jsonl:3:"), "{err}");
    std::fs::write(dir.path().join(EPISODES_FILE), broken).unwrap();
    assert!(read_dataset(dir.path()).is_err());
}

use std::path::Path;

#[test]
fn same_seed_gives_byte_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let ds = generate_dataset("gridnav", Quality::Medium, 8, 11, Execution::Parallel).unwrap();
        write_dataset(d.path(), &ds).unwrap();
    }
    for f in [EPISODES_FILE, MANIFEST_FILE] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap()
        );
    }
    let seq = generate_dataset("gridnav", Quality::Medium, 8, 11, Execution::Sequential).unwrap();
    let par = generate_dataset("gridnav", Quality::Medium, 8, 11, Execution::Parallel).unwrap();
    assert_eq!(seq, par);
}

#[test]
fn zero_episodes_make_a_valid_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset("chainrunner", Quality::Expert, 0, 1, Execution::Sequential).unwrap();
    write_dataset(dir.path(), &ds).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert!(back.episodes.is_empty());
    assert_eq!(back.manifest.episodes, 0);
}

#[test]
fn reference_scores_regenerate_from_stored_seeds() {
    let ds = generate_dataset("gridnav", Quality::Expert, 4, 21, Execution::Parallel).unwrap();
    let r = &ds.manifest.reference;
    let again = reference_scores(&ds.manifest.env, r.episodes, r.seed, Execution::Sequential).unwrap();
    assert_eq!(&again, r);
}

#[test]
fn medium_data_lies_between_random_and_expert() {
    for env in ["gridnav", "chainrunner"] {
        let mean = |q| {
            generate_dataset(env, q, 200, 3, Execution::Parallel)
                .unwrap()
                .mean_return(Some(q))
                .unwrap()
        };
        let (r, m, e) = (mean(Quality::Random), mean(Quality::Medium), mean(Quality::Expert));
        assert!(r < m && m < e, "{env}: {r} {m} {e}");
    }
}

#[test]
fn stored_observations_are_full_and_rtg_holds() {
    let ds = generate_dataset("gridnav", Quality::Expert, 5, 2, Execution::Sequential).unwrap();
    let mut env = make_env("gridnav").unwrap();
    for ep in &ds.episodes {
        assert_eq!(env.reset(ep.meta.seed), ep.observations[0]);
        for t in 0..ep.len() {
            let next = if t + 1 < ep.len() { ep.rtg[t + 1] } else { 0.0 };
            assert_eq!(ep.rtg[t], ep.rewards[t] + next);
        }
    }
}
