use super::*;
use crate::data::generate_dataset;
use crate::eval::Stat;
use crate::envs::Quality;

fn tiny(mode: Mode) -> TrainConfig {
    TrainConfig {
        mode,
        transformer: TransformerConfig {
            n_layers: 1,
            n_heads: 1,
            embed_dim: 8,
            context_length: 3,
            dropout: 0.1,
            causal: true,
        },
        mlp: MlpConfig {
            n_layers: 1,
            hidden: 8,
            dropout: 0.1,
        },
        optimizer: Some(AdamConfig {
            lr: 1e-3,
            ..AdamConfig::transformer()
        }),
        steps: 12,
        batch_size: 4,
        eval_every: 6,
        eval_episodes: 2,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn dataset(env: &str) -> Dataset {
    generate_dataset(env, Quality::Expert, 6, 1, Execution::Sequential).unwrap()
}

#[test]
fn loose_constraint_never_raises_gamma() {
    let ds = dataset("chainrunner");
    for mode in [Mode::Bdt, Mode::Rcbc] {
        let out = train(&tiny(mode), &ds).unwrap();
        assert!(out.log.steps.iter().all(|r| r.gamma == 0.0 && r.phi == 0.0), "{mode}");
        assert_eq!(out.penalty.gamma, 0.0);
    }
}

#[test]
fn tight_constraint_raises_gamma_monotonically() {
    let ds = dataset("gridnav");
    let mut cfg = tiny(Mode::Bdt);
    cfg.budget.constraint = 0.05;
    cfg.budget.gamma_step = 0.5;
    cfg.budget.gamma_max = 2.0;
    let out = train(&cfg, &ds).unwrap();
    assert!(out.log.gamma_nondecreasing());
    assert_eq!(out.log.steps[0].gamma, 0.0);
    assert_eq!(out.penalty.gamma, 2.0);
    assert!(out.penalty.capped);
}

#[test]
fn forced_full_bdt_trace_equals_dt_trace() {
    let ds = dataset("chainrunner");
    let mut b = tiny(Mode::Bdt);
    b.force_full_masks = true;
    let d = tiny(Mode::Dt);
    let lb = train(&b, &ds).unwrap().log;
    let ld = train(&d, &ds).unwrap().log;
    assert_eq!(lb.steps_csv(), ld.steps_csv());
    assert_eq!(lb, ld);
}

#[test]
fn runs_are_reproducible_and_independent_of_threading() {
    let ds = dataset("gridnav");
    let mut cfg = tiny(Mode::Bdt);
    cfg.budget.constraint = 0.3;
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    train_to_dir(&cfg, &ds, a.path()).unwrap();
    cfg.execution = Execution::Sequential;
    let mut cfg_b = cfg.clone();
    cfg_b.execution = Execution::Parallel;
    train_to_dir(&cfg_b, &ds, b.path()).unwrap();
    for f in [LOG_FILE, EVALS_FILE, CHECKPOINT_FILE, FINAL_CHECKPOINT_FILE, CONFIG_FILE] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
    let seq = train(&cfg, &ds).unwrap();
    let loaded = load_policy(&a.path().join(FINAL_CHECKPOINT_FILE)).unwrap();
    assert_eq!(seq.final_policy, loaded);
}

#[test]
fn selection_respects_the_cost_ceiling() {
    let ds = dataset("gridnav");
    let mut cfg = tiny(Mode::Bdt);
    cfg.budget.constraint = 0.0;
    cfg.selection_slack = 0.0;
    let out = train(&cfg, &ds).unwrap();
    // Costs of sampled masks are positive, so nothing qualifies.
    assert!(out.best.is_none());
    assert_eq!(out.policy, out.final_policy);
    assert_eq!(out.log.evals.len(), 2);

    cfg.budget.constraint = 1.0;
    let out = train(&cfg, &ds).unwrap();
    let best = out.best.unwrap();
    assert!(out.log.evals.iter().all(|e| e.normalized_score <= best.normalized_score));
}

#[test]
fn non_finite_loss_aborts_and_keeps_last_good_parameters() {
    let mut ds = dataset("chainrunner");
    for ep in ds.episodes.iter_mut() {
        for o in ep.observations.iter_mut() {
            o.fill(f64::NAN);
        }
    }
    let cfg = tiny(Mode::Bc);
    let dir = tempfile::tempdir().unwrap();
    let err = train_to_dir(&cfg, &ds, dir.path()).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    let saved = load_policy(&dir.path().join(LAST_GOOD_FILE)).unwrap();
    assert!(saved.params.all_finite());
}

#[test]
fn config_files_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let toml_path = dir.path().join("c.toml");
    std::fs::write(&toml_path, "mode = \"rcbc\"\nsteps = 7\n[budget]\nconstraint = 0.5\n").unwrap();
    let c = TrainConfig::from_path(&toml_path).unwrap();
    assert_eq!((c.mode, c.steps, c.budget.constraint), (Mode::Rcbc, 7, 0.5));
    assert_eq!(c.batch_size, 64);

    let json_path = dir.path().join("c.json");
    std::fs::write(&json_path, serde_json::to_string(&c).unwrap()).unwrap();
    assert_eq!(TrainConfig::from_path(&json_path).unwrap(), c);

    std::fs::write(&json_path, "{\"stepz\": 3}").unwrap();
    assert!(matches!(TrainConfig::from_path(&json_path), Err(Error::Parse { .. })));

    let mut bad = TrainConfig::default();
    bad.batch_size = 0;
    assert!(bad.validate().unwrap_err().to_string().contains("batch_size"));
    let mut bad = TrainConfig::default();
    bad.budget.window = 0;
    assert!(bad.validate().unwrap_err().to_string().contains("budget"));
    let bad = TrainConfig {
        mode: Mode::Dt,
        force_full_masks: true,
        ..TrainConfig::default()
    };
    assert!(bad.validate().unwrap_err().to_string().contains("force_full_masks"));
}

#[test]
fn dataset_must_match_the_environment() {
    let mut ds = dataset("chainrunner");
    ds.manifest.env_spec_hash = "0".repeat(64);
    assert!(matches!(Trainer::new(tiny(Mode::Bc), &ds), Err(Error::Config(_))));
}

#[test]
fn sweep_records_failures_and_summarizes() {
    let ds = dataset("chainrunner");
    let mut cfg = tiny(Mode::Bc);
    cfg.steps = 4;
    cfg.eval_episodes = 0;
    let sc = SweepConfig {
        constraints: vec![1.0],
        seeds: vec![0],
        eval_episodes: 2,
        execution: Execution::Sequential,
    };
    let r = sweep(&cfg, &ds, &sc).unwrap();
    assert_eq!(r.runs.len(), 1);
    assert_eq!(r.rows.len(), 1);
    assert!(r.runs[0].error.is_none());

    let sc = SweepConfig {
        constraints: vec![1.0, 0.5],
        seeds: vec![0, 1, 2],
        ..sc
    };
    let mut broken = ds.clone();
    for ep in broken.episodes.iter_mut() {
        for o in ep.observations.iter_mut() {
            o.fill(f64::NAN);
        }
    }
    let r = sweep(&cfg, &broken, &sc).unwrap();
    assert_eq!(r.runs.len(), 6);
    assert!(r.runs.iter().all(|x| x.error.is_some()));
    assert!(r.rows.iter().all(|x| x.runs == 0));
    assert_eq!(r.runs_csv().lines().count(), 7);
    assert_eq!(r.table_csv().lines().count(), 3);
}

#[test]
fn trend_helpers() {
    let row = |c: f64, cost: f64, score: f64| SweepRow {
        constraint: c,
        runs: 1,
        mean_step_cost: Stat { mean: cost, sd: 0.0 },
        normalized_score: Stat { mean: score, sd: 0.0 },
    };
    let r = SweepResult {
        runs: vec![],
        rows: vec![row(0.25, 0.2, 80.0), row(1.0, 0.9, 95.0), row(0.5, 0.45, 97.0)],
    };
    assert!(r.score_increases(5.0).is_empty());
    assert_eq!(r.score_increases(1.0), vec![(1.0, 0.5)]);
    assert!(r.cost_increases(0.0).is_empty());
}
