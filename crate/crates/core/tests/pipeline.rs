//! Dataset to training to evaluation, through the files each stage writes.

use bdt_core::data::{generate_dataset, read_dataset, write_dataset};
use bdt_core::envs::{make_env, Quality};
use bdt_core::eval::{default_target_rtg, rollout, write_heatmap, write_metrics, AcquisitionMode, RolloutConfig};
use bdt_core::exec::Execution;
use bdt_core::nn::{MlpConfig, TransformerConfig};
use bdt_core::policies::Mode;
use bdt_core::train::{load_policy, train_to_dir, TrainConfig, CHECKPOINT_FILE, FINAL_CHECKPOINT_FILE};

fn small(mode: Mode) -> TrainConfig {
    let mut cfg = TrainConfig {
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
            n_layers: 2,
            hidden: 8,
            dropout: 0.1,
        },
        steps: 20,
        batch_size: 4,
        eval_every: 10,
        eval_episodes: 3,
        seed: 9,
        ..TrainConfig::default()
    };
    cfg.budget.constraint = 0.4;
    cfg
}

#[test]
fn every_mode_round_trips_through_disk() {
    let tmp = tempfile::tempdir().unwrap();
    for (env, mode) in [
        ("gridnav", Mode::Bdt),
        ("gridnav-keyed", Mode::Dt),
        ("chainrunner", Mode::Rcbc),
        ("chainrunner-min+noisy", Mode::Bc),
    ] {
        let ds = generate_dataset(env, Quality::Medium, 8, 2, Execution::default()).unwrap();
        let data_dir = tmp.path().join(format!("data-{env}"));
        write_dataset(&data_dir, &ds).unwrap();
        let ds = read_dataset(&data_dir).unwrap();

        let run = tmp.path().join(format!("run-{env}-{mode}"));
        let out = train_to_dir(&small(mode), &ds, &run).unwrap();
        assert_eq!(out.log.steps.len(), 20);
        assert_eq!(out.log.evals.len(), 2);
        assert!(out.log.gamma_nondecreasing());

        let selected = load_policy(&run.join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(selected.params, out.policy.params);
        let last = load_policy(&run.join(FINAL_CHECKPOINT_FILE)).unwrap();
        assert_eq!(last.params, out.final_policy.params);
        assert_eq!(selected.cfg.mode, mode);

        let cfg = RolloutConfig {
            episodes: 4,
            target_rtg: default_target_rtg(&ds),
            seed: 1,
            acquisition: if mode.has_acquisition() {
                AcquisitionMode::Policy
            } else {
                AcquisitionMode::Full
            },
            execution: Execution::default(),
        };
        let r = rollout(&selected, &ds.manifest.reference, &cfg).unwrap();
        assert_eq!(r.metrics.episodes.len(), 4);
        let s = r.metrics.summary();
        assert!((0.0..=1.0).contains(&s.mean_step_cost.mean));
        if !mode.has_acquisition() {
            assert_eq!(s.mean_step_cost.mean, 1.0);
        }
        write_metrics(&run.join("metrics.csv"), &r.metrics).unwrap();
        write_heatmap(&run.join("heatmap.csv"), &r.heatmap).unwrap();
        let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 5);
    }
}

#[test]
fn checkpoint_from_another_environment_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let grid = generate_dataset("gridnav", Quality::Random, 4, 0, Execution::Sequential).unwrap();
    let run = tmp.path().join("run");
    let mut cfg = small(Mode::Bdt);
    cfg.steps = 2;
    cfg.eval_every = 2;
    train_to_dir(&cfg, &grid, &run).unwrap();
    let p = load_policy(&run.join(CHECKPOINT_FILE)).unwrap();
    p.check_env(make_env("gridnav").unwrap().spec()).unwrap();
    let err = p.check_env(make_env("chainrunner").unwrap().spec()).unwrap_err();
    assert_eq!(err.exit_code(), 5);
}
