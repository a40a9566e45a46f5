use super::*;
use crate::envs::reference_scores;
use crate::nn::{MlpConfig, TransformerConfig};
use crate::policies::{Mode, PolicyConfig};

fn policy(mode: Mode, env: &str) -> Policy {
    let spec = make_env(env).unwrap().spec().clone();
    let mut cfg = PolicyConfig::for_env(mode, &spec);
    cfg.transformer = TransformerConfig {
        n_layers: 1,
        n_heads: 1,
        embed_dim: 8,
        context_length: 3,
        dropout: 0.1,
        causal: true,
    };
    cfg.mlp = MlpConfig {
        n_layers: 1,
        hidden: 8,
        dropout: 0.0,
    };
    Policy::new(cfg, 1).unwrap()
}

fn reference(env: &str) -> ReferenceScores {
    reference_scores(env, 8, 0, Execution::Sequential).unwrap()
}

fn cfg(episodes: usize, acquisition: AcquisitionMode) -> RolloutConfig {
    RolloutConfig {
        episodes,
        target_rtg: 20.0,
        seed: 3,
        acquisition,
        execution: Execution::Parallel,
    }
}

#[test]
fn full_acquisition_costs_one_every_step() {
    let p = policy(Mode::Bdt, "gridnav");
    let r = rollout(&p, &reference("gridnav"), &cfg(4, AcquisitionMode::Full)).unwrap();
    for e in &r.traces {
        for q in &e.masks {
            assert_eq!(query_cost(q, &p.cfg.features).unwrap(), 1.0);
        }
    }
    assert!(r.metrics.episodes.iter().all(|e| e.mean_step_cost == 1.0));
}

#[test]
fn target_rtg_is_decremented_by_rewards() {
    let p = policy(Mode::Bdt, "chainrunner");
    let r = rollout(&p, &reference("chainrunner"), &cfg(3, AcquisitionMode::Policy)).unwrap();
    for e in &r.traces {
        let mut acc = 0.0;
        for (t, &target) in e.targets.iter().enumerate() {
            assert!((target - (20.0 - acc)).abs() < 1e-12, "step {t}");
            acc += e.rewards[t];
        }
    }
}

#[test]
fn reported_cost_matches_an_independent_pass() {
    let p = policy(Mode::Rcbc, "gridnav");
    let r = rollout(&p, &reference("gridnav"), &cfg(5, AcquisitionMode::Policy)).unwrap();
    let costs = p.cfg.features.costs();
    let total: f64 = costs.iter().sum();
    for (m, e) in r.metrics.episodes.iter().zip(&r.traces) {
        let mut s = 0.0;
        for q in &e.masks {
            let mut c = 0.0;
            for (i, &f) in costs.iter().enumerate() {
                if q.get(i) {
                    c += f;
                }
            }
            s += c / total;
        }
        assert!((m.mean_step_cost - s / e.masks.len() as f64).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&m.mean_step_cost));
    }
}

#[test]
fn heatmap_columns_match_costs_under_uniform_costs() {
    let p = policy(Mode::Bc, "chainrunner");
    let r = rollout(&p, &reference("chainrunner"), &cfg(6, AcquisitionMode::Random(0.4))).unwrap();
    let h = &r.heatmap;
    let m = h.features.len();
    for t in 0..h.t_max() {
        let col: f64 = (0..m).map(|i| h.freq[i][t]).sum::<f64>() / m as f64;
        let alive: Vec<&EpisodeTrace> = r.traces.iter().filter(|e| e.masks.len() > t).collect();
        let mean_cost = alive
            .iter()
            .map(|e| query_cost(&e.masks[t], &p.cfg.features).unwrap())
            .sum::<f64>()
            / alive.len() as f64;
        assert!((col - mean_cost).abs() < 1e-12);
        assert!(h.freq.iter().all(|row| (0.0..=1.0).contains(&row[t])));
    }
}

#[test]
fn free_features_fill_their_heatmap_rows() {
    let p = policy(Mode::Bdt, "gridnav");
    let r = rollout(&p, &reference("gridnav"), &cfg(4, AcquisitionMode::Random(0.1))).unwrap();
    for i in p.cfg.features.free_features() {
        let sum: f64 = r.heatmap.freq[i].iter().sum();
        assert_eq!(sum, r.heatmap.t_max() as f64);
    }
}

#[test]
fn random_rate_one_equals_full_acquisition() {
    let p = policy(Mode::Bdt, "chainrunner");
    let rf = reference("chainrunner");
    let a = rollout(&p, &rf, &cfg(3, AcquisitionMode::Random(1.0))).unwrap();
    let b = rollout(&p, &rf, &cfg(3, AcquisitionMode::Full)).unwrap();
    assert_eq!(a.metrics, b.metrics);
}

#[test]
fn random_rate_sets_achieved_cost() {
    let p = policy(Mode::Bc, "chainrunner");
    let r = rollout(&p, &reference("chainrunner"), &cfg(40, AcquisitionMode::Random(0.3))).unwrap();
    let (mut on, mut n) = (0usize, 0usize);
    for e in &r.traces {
        for q in &e.masks {
            on += q.count();
            n += q.len();
        }
    }
    let rate = on as f64 / n as f64;
    // Several thousand Bernoulli(0.3) draws: a few standard errors.
    assert!((rate - 0.3).abs() < 0.03, "{rate}");
}

#[test]
fn sequential_and_parallel_rollouts_agree() {
    let p = policy(Mode::Bdt, "gridnav");
    let rf = reference("gridnav");
    let mut c = cfg(6, AcquisitionMode::Policy);
    let a = rollout(&p, &rf, &c).unwrap();
    c.execution = Execution::Sequential;
    let b = rollout(&p, &rf, &c).unwrap();
    assert_eq!(a, b);
}

#[test]
fn mismatched_environment_is_rejected() {
    let mut p = policy(Mode::Bc, "chainrunner");
    p.cfg.env = "gridnav".into();
    let err = rollout(&p, &reference("gridnav"), &cfg(1, AcquisitionMode::Policy)).unwrap_err();
    assert!(matches!(err, Error::Policy(_)), "{err}");
}

#[test]
fn csv_export() {
    let empty = RolloutMetrics::default();
    assert_eq!(
        metrics_csv(&empty).unwrap(),
        "episode,return,normalized_score,mean_step_cost,length,success\n"
    );
    let p = policy(Mode::Bdt, "gridnav");
    let r = rollout(&p, &reference("gridnav"), &cfg(2, AcquisitionMode::Policy)).unwrap();
    let a = metrics_csv(&r.metrics).unwrap();
    assert_eq!(a, metrics_csv(&r.metrics.clone()).unwrap());
    assert_eq!(a.lines().count(), 3);
    let h = heatmap_csv(&r.heatmap).unwrap();
    assert_eq!(h.lines().count(), 1 + p.cfg.m());
    assert!(h.starts_with("feature,t0,"));

    let c = make_env("chainrunner").unwrap();
    let pc = policy(Mode::Bc, "chainrunner");
    let rc = rollout(&pc, &reference("chainrunner"), &cfg(1, AcquisitionMode::Policy)).unwrap();
    assert!(c.success().is_none());
    let line = metrics_csv(&rc.metrics).unwrap().lines().nth(1).unwrap().to_string();
    assert!(line.ends_with(','), "{line}");
}

#[test]
fn summary_statistics() {
    let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(s.mean, 2.5);
    assert!((s.sd - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert_eq!(Stat::of(&[7.0]), Stat { mean: 7.0, sd: 0.0 });
}
