//! The budgeted training loop and the constraint sweep.
//!
//! Each iteration samples a batch of context windows, evaluates `Δ + γ·φ`
//! on every window (in parallel, one graph per window), sums the gradients in
//! window order, takes one optimizer step, and raises `γ` when the batch
//! penalty is positive.

mod sweep;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::budget::{BudgetConfig, PenaltyState, QueryMask};
use crate::data::{sample_batch, Dataset};
use crate::envs::{make_env, EnvSpec};
use crate::error::{Error, Result};
use crate::eval::{default_target_rtg, rollout, AcquisitionMode, Rollout, RolloutConfig};
use crate::exec::Execution;
use crate::nn::{Adam, AdamConfig, Checkpoint, Fwd, Grads, MlpConfig, ParamStore, TransformerConfig};
use crate::policies::{sequence_loss, LossBudget, MaskSource, Mode, Policy, PolicyConfig};
use crate::rng::{self, tag};

pub use sweep::{sweep, SweepConfig, SweepResult, SweepRow, SweepRun};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub budget: BudgetConfig,
    pub transformer: TransformerConfig,
    pub mlp: MlpConfig,
    /// Optimizer settings; the mode's defaults when absent.
    pub optimizer: Option<AdamConfig>,
    /// Gradient steps.
    pub steps: usize,
    pub batch_size: usize,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Episodes per evaluation; 0 disables evaluation.
    pub eval_episodes: usize,
    /// Desired return at evaluation; the dataset's expert mean when absent.
    pub target_rtg: Option<f64>,
    /// A checkpoint is eligible for selection when its evaluation cost is at
    /// most `C + selection_slack`.
    pub selection_slack: f64,
    /// Train with every feature acquired (constant masks).
    pub force_full_masks: bool,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Bdt,
            budget: BudgetConfig::default(),
            transformer: TransformerConfig::default(),
            mlp: MlpConfig::default(),
            optimizer: None,
            steps: 50_000,
            batch_size: 64,
            eval_every: 5_000,
            eval_episodes: 64,
            target_rtg: None,
            selection_slack: 0.05,
            force_full_masks: false,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> AdamConfig {
        self.optimizer.unwrap_or_else(|| {
            if self.mode.is_transformer() {
                AdamConfig::transformer()
            } else {
                AdamConfig::mlp()
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("{field}: {why}")));
        if self.steps == 0 {
            return bad("steps", "must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if !(self.selection_slack >= 0.0) {
            return bad("selection_slack", format!("{} must be nonnegative", self.selection_slack));
        }
        if self.force_full_masks && !self.mode.has_acquisition() {
            return bad("force_full_masks", format!("{} mode already uses full masks", self.mode));
        }
        if let Some(t) = self.target_rtg {
            if !t.is_finite() {
                return bad("target_rtg", format!("{t} is not finite"));
            }
        }
        let o = self.optimizer();
        if !(o.lr > 0.0) || !(o.weight_decay >= 0.0) || !(o.grad_clip >= 0.0) {
            return bad("optimizer", "lr must be positive, weight_decay and grad_clip nonnegative".into());
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return bad("optimizer", "betas must lie in [0, 1) and eps be positive".into());
        }
        self.budget.validate().map_err(|e| Error::Config(format!("budget: {e}")))?;
        if self.mode.is_transformer() {
            self.transformer.validate().map_err(|e| Error::Config(format!("transformer: {e}")))?;
        }
        Ok(())
    }

    /// Reads a JSON or TOML file, by extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
                msg: e.message().to_string(),
            })?,
            _ => serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: e.line(),
                msg: e.to_string(),
            })?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn policy_config(&self, spec: &EnvSpec) -> PolicyConfig {
        let mut p = PolicyConfig::for_env(self.mode, spec);
        p.transformer = self.transformer;
        p.mlp = self.mlp;
        p
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: u64,
    pub delta: f64,
    pub phi: f64,
    /// Penalty weight used at this step.
    pub gamma: f64,
    pub mean_batch_cost: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub k: u64,
    pub normalized_score: f64,
    pub mean_step_cost: f64,
    #[serde(rename = "return")]
    pub ret: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainLog {
    /// `k,delta,phi,gamma,mean_batch_cost,grad_norm` rows.
    pub fn steps_csv(&self) -> String {
        let mut s = String::from("k,delta,phi,gamma,mean_batch_cost,grad_norm\n");
        for r in &self.steps {
            writeln!(
                s,
                "{},{},{},{},{},{}",
                r.k, r.delta, r.phi, r.gamma, r.mean_batch_cost, r.grad_norm
            )
            .expect("string write");
        }
        s
    }

    /// `k,normalized_score,mean_step_cost,return` rows.
    pub fn evals_csv(&self) -> String {
        let mut s = String::from("k,normalized_score,mean_step_cost,return\n");
        for r in &self.evals {
            writeln!(s, "{},{},{},{}", r.k, r.normalized_score, r.mean_step_cost, r.ret).expect("string write");
        }
        s
    }

    pub fn gamma_nondecreasing(&self) -> bool {
        self.steps.windows(2).all(|w| w[0].gamma <= w[1].gamma)
    }
}

/// The result of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// The selected policy: best eligible evaluation, else the final one.
    pub policy: Policy,
    pub final_policy: Policy,
    pub best: Option<EvalRecord>,
    pub log: TrainLog,
    pub penalty: PenaltyState,
}

/// Training state between steps.
pub struct Trainer<'d> {
    pub cfg: TrainConfig,
    dataset: &'d Dataset,
    policy: Policy,
    adam: Adam,
    penalty: PenaltyState,
    constraint: f64,
    target_rtg: f64,
    log: TrainLog,
    best: Option<(EvalRecord, ParamStore)>,
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: TrainConfig, dataset: &'d Dataset) -> Result<Self> {
        cfg.validate()?;
        let env = make_env(&dataset.manifest.env)?;
        let spec = env.spec();
        if spec.hash() != dataset.manifest.env_spec_hash {
            return Err(Error::Config(format!(
                "dataset was recorded on a different version of {}",
                spec.id
            )));
        }
        if dataset.episodes.is_empty() {
            return Err(Error::Config("dataset has no episodes".into()));
        }
        let policy = Policy::new(cfg.policy_config(spec), cfg.seed)?;
        Ok(Trainer {
            constraint: cfg.budget.normalized_constraint(&spec.features),
            target_rtg: cfg.target_rtg.unwrap_or_else(|| default_target_rtg(dataset)),
            adam: Adam::new(cfg.optimizer()),
            penalty: PenaltyState::new(),
            log: TrainLog::default(),
            best: None,
            cfg,
            dataset,
            policy,
        })
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn penalty(&self) -> PenaltyState {
        self.penalty
    }

    /// Normalized cost ceiling.
    pub fn constraint(&self) -> f64 {
        self.constraint
    }

    pub fn target_rtg(&self) -> f64 {
        self.target_rtg
    }

    /// One gradient step. On a numeric failure the parameters are left as
    /// they were before the step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let k = self.penalty.k + 1;
        let cfg = &self.cfg;
        let kc = self.policy.cfg.context_length();
        let mut br = rng::stream(cfg.seed, &[tag::BATCH, k]);
        let batch = sample_batch(self.dataset, cfg.batch_size, kc, &mut br)?;
        let budget = LossBudget {
            constraint: self.constraint,
            window: cfg.budget.window,
            gamma: self.penalty.gamma,
        };
        let full = vec![QueryMask::ones(self.policy.cfg.m()); kc];
        let constant_masks = cfg.force_full_masks || !cfg.mode.has_acquisition();
        let inv_b = 1.0 / cfg.batch_size as f64;
        let policy = &self.policy;
        let results = cfg.execution.map_indices(cfg.batch_size, |i| {
            let mut f = Fwd::new(&policy.params, true, Some(rng::stream(cfg.seed, &[tag::DROPOUT, k, i as u64])));
            let mut mr = rng::stream(cfg.seed, &[tag::MASK, k, i as u64]);
            let src = if constant_masks {
                MaskSource::Forced(&full)
            } else {
                MaskSource::Sample(&mut mr)
            };
            let parts = sequence_loss(policy, &mut f, &batch[i], budget, src)?;
            let lv = f.g.value(parts.loss).item();
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("loss is {lv} at step {k}")));
            }
            let scaled = f.g.scale(parts.loss, inv_b);
            f.g.backward(scaled)?;
            Ok((f.grads(), parts.delta, parts.phi, parts.mask_cost))
        });
        let mut grads = Grads::default();
        let (mut delta, mut phi, mut cost) = (0.0, 0.0, 0.0);
        for r in results {
            let (g, d, p, c) = r?;
            grads.accumulate(&g);
            delta += d;
            phi += p;
            cost += c;
        }
        let stats = self.adam.step(&mut self.policy.params, &mut grads)?;
        let rec = StepRecord {
            k,
            delta: delta * inv_b,
            phi: phi * inv_b,
            gamma: self.penalty.gamma,
            mean_batch_cost: cost * inv_b,
            grad_norm: stats.grad_norm,
        };
        if self.cfg.mode.has_acquisition() {
            self.penalty.update(rec.phi, &self.cfg.budget);
        }
        self.penalty.k = k;
        self.log.steps.push(rec);
        Ok(rec)
    }

    /// Evaluates the current parameters and keeps them if they are the best
    /// eligible so far.
    pub fn evaluate(&mut self) -> Result<EvalRecord> {
        let rc = RolloutConfig {
            episodes: self.cfg.eval_episodes,
            target_rtg: self.target_rtg,
            seed: rng::derive_seed(self.cfg.seed, &[tag::EVAL]),
            acquisition: if self.cfg.force_full_masks {
                AcquisitionMode::Full
            } else {
                AcquisitionMode::Policy
            },
            execution: self.cfg.execution,
        };
        let r = rollout(&self.policy, &self.dataset.manifest.reference, &rc)?;
        let s = r.metrics.summary();
        let rec = EvalRecord {
            k: self.penalty.k,
            normalized_score: s.normalized_score.mean,
            mean_step_cost: s.mean_step_cost.mean,
            ret: s.ret.mean,
        };
        self.log.evals.push(rec);
        let eligible = rec.mean_step_cost <= self.constraint + self.cfg.selection_slack;
        let better = self
            .best
            .as_ref()
            .is_none_or(|(b, _)| rec.normalized_score > b.normalized_score);
        if eligible && better {
            self.best = Some((rec, self.policy.params.clone()));
        }
        log::info!(
            "step {}: score {:.2}, cost {:.3}, gamma {:.4}",
            rec.k,
            rec.normalized_score,
            rec.mean_step_cost,
            self.penalty.gamma
        );
        Ok(rec)
    }

    /// Runs the remaining steps with periodic evaluation.
    pub fn run(&mut self) -> Result<()> {
        while (self.penalty.k as usize) < self.cfg.steps {
            self.step()?;
            let k = self.penalty.k as usize;
            let due = k == self.cfg.steps || (self.cfg.eval_every > 0 && k % self.cfg.eval_every == 0);
            if self.cfg.eval_episodes > 0 && due {
                self.evaluate()?;
            }
        }
        Ok(())
    }

    pub fn finish(self) -> TrainOutcome {
        let final_policy = self.policy.clone();
        let (best, policy) = match self.best {
            Some((rec, params)) => (
                Some(rec),
                Policy {
                    cfg: self.policy.cfg,
                    params,
                },
            ),
            None => {
                if self.cfg.eval_episodes > 0 {
                    log::warn!("no evaluation met the cost ceiling; keeping the final parameters");
                }
                (None, self.policy)
            }
        };
        TrainOutcome {
            policy,
            final_policy,
            best,
            log: self.log,
            penalty: self.penalty,
        }
    }
}

/// Trains a policy on `dataset`.
pub fn train(cfg: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    let mut t = Trainer::new(cfg.clone(), dataset)?;
    t.run()?;
    Ok(t.finish())
}

/// Provenance written next to a run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub dataset_env: String,
    pub dataset_sha256: String,
    pub dataset_creation_seed: u64,
    pub target_rtg: f64,
    pub normalized_constraint: f64,
}

pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "log.csv";
pub const EVALS_FILE: &str = "evals.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const FINAL_CHECKPOINT_FILE: &str = "checkpoint_final.json";
pub const LAST_GOOD_FILE: &str = "checkpoint_last_good.json";

fn write(dir: &Path, name: &str, body: &str) -> Result<()> {
    let p = dir.join(name);
    std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
}

/// Trains and writes the run directory: the resolved config, the logs and
/// the checkpoints. After a numeric failure the last good parameters are
/// saved before the error is returned.
pub fn train_to_dir(cfg: &TrainConfig, dataset: &Dataset, dir: &Path) -> Result<TrainOutcome> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut t = Trainer::new(cfg.clone(), dataset)?;
    let manifest = RunManifest {
        config: cfg.clone(),
        dataset_env: dataset.manifest.env.clone(),
        dataset_sha256: dataset.manifest.episodes_sha256.clone(),
        dataset_creation_seed: dataset.manifest.creation_seed,
        target_rtg: t.target_rtg(),
        normalized_constraint: t.constraint(),
    };
    write(dir, CONFIG_FILE, &(serde_json::to_string_pretty(&manifest).expect("serializes") + "\n"))?;
    let result = t.run();
    write(dir, LOG_FILE, &t.log().steps_csv())?;
    write(dir, EVALS_FILE, &t.log().evals_csv())?;
    if let Err(e) = result {
        if matches!(e, Error::Numeric(_)) {
            t.policy().checkpoint().save(&dir.join(LAST_GOOD_FILE))?;
        }
        return Err(e);
    }
    let out = t.finish();
    out.policy.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
    out.final_policy.checkpoint().save(&dir.join(FINAL_CHECKPOINT_FILE))?;
    Ok(out)
}

/// Held-out evaluation of a trained policy, on episode seeds disjoint from
/// the ones used for checkpoint selection.
pub fn final_evaluation(
    cfg: &TrainConfig,
    dataset: &Dataset,
    policy: &Policy,
    acquisition: AcquisitionMode,
    episodes: usize,
) -> Result<Rollout> {
    let rc = RolloutConfig {
        episodes,
        target_rtg: cfg.target_rtg.unwrap_or_else(|| default_target_rtg(dataset)),
        seed: rng::derive_seed(cfg.seed, &[tag::EVAL, 1]),
        acquisition,
        execution: cfg.execution,
    };
    rollout(policy, &dataset.manifest.reference, &rc)
}

/// Loads a policy checkpoint.
pub fn load_policy(path: &Path) -> Result<Policy> {
    Policy::from_checkpoint(&Checkpoint::load(path)?)
}

#[cfg(test)]
mod tests;
