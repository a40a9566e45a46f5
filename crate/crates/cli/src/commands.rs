use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use serde_json::json;

use bdt_core::acceptance::{self, desk_config, CRITERIA};
use bdt_core::data::{generate_dataset, read_dataset, write_dataset, Dataset};
use bdt_core::error::Error;
use bdt_core::eval::{rollout, write_heatmap, write_metrics, AcquisitionMode, Rollout, RolloutConfig, default_target_rtg};
use bdt_core::exec::Execution;
use bdt_core::policies::{Mode, Policy};
use bdt_core::train::{final_evaluation, load_policy, sweep, train_to_dir, SweepConfig, TrainConfig};

use crate::{Cli, Command, EvalArgs, GenDataArgs, HeatmapArgs, RolloutFlags, SweepArgs, TrainArgs, TrainFlags, VerifyArgs};

/// Exit status for an error: the code of the library error it wraps, if any.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    e.chain()
        .find_map(|c| c.downcast_ref::<Error>())
        .map_or(1, |e| e.exit_code() as u8)
}

pub fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    let root = &cli.output_root;
    match &cli.command {
        Command::GenData(a) => gen_data(a, root, exec),
        Command::Train(a) => train(a, root, exec),
        Command::Sweep(a) => run_sweep(a, root, exec),
        Command::Eval(a) => eval(a, root, exec),
        Command::Heatmap(a) => heatmap(a, root, exec),
        Command::Verify(a) => verify(a, root),
    }
}

fn write_json(dir: &Path, name: &str, v: &serde_json::Value) -> anyhow::Result<()> {
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(v).expect("json value serializes") + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn make_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn gen_data(a: &GenDataArgs, root: &Path, exec: Execution) -> anyhow::Result<()> {
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| root.join("data").join(format!("{}-{}-s{}", a.env, a.quality, a.seed)));
    let ds = generate_dataset(&a.env, a.quality, a.episodes, a.seed, exec)?;
    let m = write_dataset(&out, &ds)?;
    println!(
        "{}: {} episodes of {} ({}), reference random {:.3} expert {:.3}",
        out.display(),
        m.episodes,
        m.env,
        a.quality,
        m.reference.random,
        m.reference.expert
    );
    Ok(())
}

/// Maps a config field named in a validation error to the flags that set it.
fn flags_for(field: &str) -> &'static str {
    match field {
        "steps" => "--steps",
        "batch_size" => "--batch-size",
        "selection_slack" => "--selection-slack",
        "force_full_masks" => "--force-full-masks",
        "target_rtg" => "--target-rtg",
        "optimizer" => "--lr/--weight-decay/--grad-clip",
        "budget" => "--constraint/--window/--gamma-step/--gamma-max",
        "transformer" => "--embed-dim/--layers/--heads/--context/--dropout",
        _ => "--config",
    }
}

fn flag_error(e: Error) -> Error {
    match e {
        Error::Config(msg) => {
            let field = msg.split(':').next().unwrap_or("");
            Error::Config(format!("{} ({msg})", flags_for(field)))
        }
        other => other,
    }
}

fn resolve_train_config(f: &TrainFlags, exec: Execution) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &f.config {
        Some(p) => TrainConfig::from_path(p)?,
        None if f.desk => desk_config(f.mode.unwrap_or(Mode::Bdt)),
        None => TrainConfig::default(),
    };
    if let Some(m) = f.mode {
        if f.config.is_some() || !f.desk {
            cfg.mode = m;
        }
    }
    if let Some(c) = f.constraint {
        cfg.budget.constraint = c;
    }
    if f.raw_constraint {
        cfg.budget.normalized = false;
    }
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = f.$flag { cfg.$($field).+ = v; })*
        };
    }
    set!(
        window => budget.window,
        gamma_step => budget.gamma_step,
        gamma_max => budget.gamma_max,
        steps => steps,
        batch_size => batch_size,
        seed => seed,
        eval_every => eval_every,
        eval_episodes => eval_episodes,
        selection_slack => selection_slack,
        embed_dim => transformer.embed_dim,
        layers => transformer.n_layers,
        heads => transformer.n_heads,
        context => transformer.context_length,
        dropout => transformer.dropout,
        hidden => mlp.hidden,
    );
    if let Some(d) = f.dropout {
        cfg.mlp.dropout = d;
    }
    if f.target_rtg.is_some() {
        cfg.target_rtg = f.target_rtg;
    }
    if f.force_full_masks {
        cfg.force_full_masks = true;
    }
    if f.lr.is_some() || f.weight_decay.is_some() || f.grad_clip.is_some() {
        let mut o = cfg.optimizer();
        o.lr = f.lr.unwrap_or(o.lr);
        o.weight_decay = f.weight_decay.unwrap_or(o.weight_decay);
        o.grad_clip = f.grad_clip.unwrap_or(o.grad_clip);
        cfg.optimizer = Some(o);
    }
    cfg.execution = exec;
    cfg.validate().map_err(flag_error)?;
    Ok(cfg)
}

fn load_data(path: &Path) -> anyhow::Result<Dataset> {
    Ok(read_dataset(path).with_context(|| format!("loading dataset {}", path.display()))?)
}

fn train(a: &TrainArgs, root: &Path, exec: Execution) -> anyhow::Result<()> {
    let cfg = resolve_train_config(&a.train, exec)?;
    let ds = load_data(&a.train.data)?;
    let dir = a.run_dir.clone().unwrap_or_else(|| {
        root.join(format!(
            "train-{}-{}-c{}-s{}",
            cfg.mode, ds.manifest.env, cfg.budget.constraint, cfg.seed
        ))
    });
    let out = train_to_dir(&cfg, &ds, &dir)?;
    let mut summary = json!({
        "run_dir": dir,
        "steps": out.log.steps.len(),
        "final_gamma": out.penalty.gamma,
        "gamma_capped": out.penalty.capped,
        "selected": out.best,
    });
    if a.final_eval_episodes > 0 {
        let acq = if cfg.force_full_masks {
            AcquisitionMode::Full
        } else {
            AcquisitionMode::Policy
        };
        let r = final_evaluation(&cfg, &ds, &out.policy, acq, a.final_eval_episodes)?;
        write_metrics(&dir.join("final_metrics.csv"), &r.metrics)?;
        summary["final_evaluation"] = serde_json::to_value(r.metrics.summary()).expect("serializes");
    }
    write_json(&dir, "summary.json", &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary).expect("serializes"));
    Ok(())
}

fn run_sweep(a: &SweepArgs, root: &Path, exec: Execution) -> anyhow::Result<()> {
    let cfg = resolve_train_config(&a.train, exec)?;
    if a.seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()).into());
    }
    let ds = load_data(&a.train.data)?;
    let sc = SweepConfig {
        constraints: a.constraints.clone(),
        seeds: (0..a.seeds).collect(),
        eval_episodes: a.final_eval_episodes,
        execution: if a.parallel_runs { exec } else { Execution::Sequential },
    };
    let dir = a
        .run_dir
        .clone()
        .unwrap_or_else(|| root.join(format!("sweep-{}-{}", cfg.mode, ds.manifest.env)));
    make_dir(&dir)?;
    write_json(
        &dir,
        "config.json",
        &json!({
            "train": cfg,
            "sweep": sc,
            "dataset_env": ds.manifest.env,
            "dataset_sha256": ds.manifest.episodes_sha256,
            "dataset_creation_seed": ds.manifest.creation_seed,
        }),
    )?;
    let r = sweep(&cfg, &ds, &sc)?;
    for (name, body) in [("runs.csv", r.runs_csv()), ("table.csv", r.table_csv())] {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    print!("{}", r.table_csv());
    let failed = r.runs.iter().filter(|x| x.error.is_some()).count();
    if failed > 0 {
        log::warn!("{failed} of {} runs failed; see runs.csv", r.runs.len());
    }
    Ok(())
}

fn rollout_setup(f: &RolloutFlags) -> anyhow::Result<(Policy, Dataset, f64)> {
    let policy = load_policy(&f.checkpoint).with_context(|| format!("loading {}", f.checkpoint.display()))?;
    let ds = load_data(&f.data)?;
    let target = f.target_rtg.unwrap_or_else(|| default_target_rtg(&ds));
    Ok((policy, ds, target))
}

fn run_rollout(
    f: &RolloutFlags,
    acquisition: AcquisitionMode,
    exec: Execution,
    dir: &Path,
) -> anyhow::Result<Rollout> {
    let (policy, ds, target_rtg) = rollout_setup(f)?;
    let rc = RolloutConfig {
        episodes: f.episodes,
        target_rtg,
        seed: f.seed,
        acquisition,
        execution: exec,
    };
    rc.validate().map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("--random-acquisition/--target-rtg ({m})")),
        other => other,
    })?;
    make_dir(dir)?;
    write_json(
        dir,
        "config.json",
        &json!({
            "checkpoint": f.checkpoint,
            "policy": policy.cfg,
            "rollout": rc,
            "dataset_env": ds.manifest.env,
            "dataset_sha256": ds.manifest.episodes_sha256,
        }),
    )?;
    Ok(rollout(&policy, &ds.manifest.reference, &rc)?)
}

fn default_rollout_dir(root: &Path, kind: &str, f: &RolloutFlags, tag: &str) -> PathBuf {
    f.run_dir.clone().unwrap_or_else(|| {
        let stem = f
            .checkpoint
            .parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "policy".into());
        root.join(format!("{kind}-{stem}-{tag}-s{}", f.seed))
    })
}

fn eval(a: &EvalArgs, root: &Path, exec: Execution) -> anyhow::Result<()> {
    let (acq, tag) = match (a.random_acquisition, a.full_acquisition, a.no_info) {
        (Some(p), ..) => (AcquisitionMode::Random(p), format!("random{p}")),
        (None, true, _) => (AcquisitionMode::Full, "full".to_string()),
        (None, false, true) => (AcquisitionMode::NoInfo, "noinfo".to_string()),
        _ => (AcquisitionMode::Policy, "policy".to_string()),
    };
    let dir = default_rollout_dir(root, "eval", &a.rollout, &tag);
    let r = run_rollout(&a.rollout, acq, exec, &dir)?;
    write_metrics(&dir.join("metrics.csv"), &r.metrics)?;
    write_heatmap(&dir.join("heatmap.csv"), &r.heatmap)?;
    let summary = serde_json::to_value(r.metrics.summary()).expect("serializes");
    write_json(&dir, "summary.json", &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary).expect("serializes"));
    Ok(())
}

fn heatmap(a: &HeatmapArgs, root: &Path, exec: Execution) -> anyhow::Result<()> {
    let dir = default_rollout_dir(root, "heatmap", &a.rollout, "policy");
    let r = run_rollout(&a.rollout, AcquisitionMode::Policy, exec, &dir)?;
    write_heatmap(&dir.join("heatmap.csv"), &r.heatmap)?;
    let h = &r.heatmap;
    let width = h.features.iter().map(String::len).max().unwrap_or(0);
    for (name, row) in h.features.iter().zip(&h.freq) {
        let mean = if row.is_empty() { 0.0 } else { row.iter().sum::<f64>() / row.len() as f64 };
        println!("{name:width$}  {mean:.3}");
    }
    println!("{}", dir.join("heatmap.csv").display());
    Ok(())
}

fn verify(a: &VerifyArgs, root: &Path) -> anyhow::Result<()> {
    let ids: Vec<u8> = if a.criteria.is_empty() {
        CRITERIA.iter().map(|(id, _)| *id).collect()
    } else {
        a.criteria.clone()
    };
    if let Some(bad) = ids.iter().find(|id| acceptance::title(**id).is_none()) {
        return Err(Error::Config(format!("--criteria: no criterion {bad} (1 to {})", CRITERIA.len())).into());
    }
    let dir = a.run_dir.clone().unwrap_or_else(|| root.join("verify"));
    make_dir(&dir)?;
    write_json(&dir, "config.json", &json!({ "criteria": ids }))?;
    let outcomes = acceptance::run_all(&ids, &dir, |o| println!("{o}"));
    let report: String = outcomes.iter().map(|o| format!("{o}\n")).collect();
    let p = dir.join("acceptance.txt");
    fs::write(&p, report).map_err(|e| Error::io(&p, e))?;
    let failed: Vec<String> = outcomes.iter().filter(|o| !o.passed).map(|o| format!("C{}", o.id)).collect();
    if failed.is_empty() {
        println!("all {} criteria passed", outcomes.len());
        Ok(())
    } else {
        Err(Error::Acceptance(format!("failed: {}", failed.join(", "))).into())
    }
}
