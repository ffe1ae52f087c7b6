//! Subcommand bodies. Each returns a one-line JSON summary for stdout.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use share_core::adapt::{spawn_temporary, train_coefficients_only, train_temporary};
use share_core::adapter::{reconstruct_adapter, LayerShape, LoraAdapter, LoraLayer};
use share_core::analytics::{
    forgetting_and_bwt, retention, savings, series_csv, EvalGrid, ForgettingMode, SavingsParams,
};
use share_core::io::{self, container, FileKind, RunConfig};
use share_core::linalg::KPolicy;
use share_core::merge::{compress_adapters, merge, MergeInput, MergeOptions};
use share_core::rng::derive_seed;
use share_core::sim::{gen_stream, planted_alpha, run_continual, theorem1_probe};
use share_core::{Result, ShareError};

use crate::{
    AdaptArgs, AnalyzeArgs, Cli, Command, CompressArgs, InitArgs, MergeArgs, ProbeArgs, ReconstructArgs, SimulateArgs,
};

pub fn run(cli: &Cli) -> Result<String> {
    let summary = match &cli.command {
        Command::Init(a) => init(a)?,
        Command::Adapt(a) => adapt(cli, a)?,
        Command::Merge(a) => merge_cmd(a)?,
        Command::Compress(a) => compress(a)?,
        Command::Reconstruct(a) => reconstruct(a)?,
        Command::Simulate(a) => simulate(cli, a)?,
        Command::ProbeTheorem1(a) => probe(a)?,
        Command::Analyze(a) => analyze(a)?,
    };
    Ok(summary.to_string())
}

/// Name the file in io errors, which otherwise only carry the OS message.
fn at<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        ShareError::Io(io) => ShareError::Validation { field: path.display().to_string(), detail: io.to_string() },
        other => other,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    container::write_atomic(path, text.as_bytes())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    container::write_atomic(path, text.as_bytes())
}

fn maybe_report<T: Serialize>(path: Option<&PathBuf>, value: &T) -> Result<()> {
    match path {
        Some(p) => write_json(p, value),
        None => Ok(()),
    }
}

/// Load a run config (or the defaults), apply the seed override and log
/// what will actually be used.
fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => at(p, RunConfig::load(p))?,
        None => {
            let mut cfg = RunConfig::default();
            cfg.apply_seed_override(std::env::var(io::SEED_ENV).ok().as_deref())?;
            cfg.validate()?;
            cfg
        }
    };
    log::info!("resolved config: {}", serde_json::to_string(&cfg)?);
    log::info!("seeds: stream={} train={}", cfg.stream.seed, cfg.train.seed);
    Ok(cfg)
}

fn load_adapters(paths: &[PathBuf]) -> Result<Vec<LoraAdapter>> {
    paths.iter().map(|p| at(p, io::import_adapter(p))).collect()
}

fn max_rank(adapters: &[LoraAdapter]) -> usize {
    adapters.iter().map(|a| a.rank).max().unwrap_or(1)
}

fn build_state(
    adapters: &[LoraAdapter],
    policy: KPolicy,
    p: Option<usize>,
    output: &Path,
    report: Option<&PathBuf>,
) -> Result<serde_json::Value> {
    if adapters.is_empty() {
        return Err(ShareError::Argument("no adapters given".into()));
    }
    let p = p.unwrap_or_else(|| max_rank(adapters));
    log::info!("k policy {policy:?}, p={p}, {} adapters", adapters.len());
    let (state, rep) = compress_adapters(adapters, policy, p)?;
    for w in &rep.warnings {
        log::warn!("{w}");
    }
    io::save_state(output, &state)?;
    maybe_report(report, &rep)?;
    Ok(json!({
        "output": output,
        "k": rep.k,
        "tasks": state.tasks.len(),
        "mean_relative_error": rep.mean_relative_error,
        "memory_ratio": rep.memory_ratio,
    }))
}

fn init(a: &InitArgs) -> Result<serde_json::Value> {
    let policy = match (a.k, a.var_threshold) {
        (Some(k), _) => KPolicy::fixed(k),
        (None, Some(t)) => KPolicy::variance(t),
        (None, None) => return Err(ShareError::Argument("pass --k or --var-threshold".into())),
    };
    build_state(&load_adapters(&a.adapters)?, policy, a.p, &a.output, a.report.as_ref())
}

fn compress(a: &CompressArgs) -> Result<serde_json::Value> {
    let policy = KPolicy::parse(&a.k_policy)?;
    let mut paths: Vec<PathBuf> = at(
        &a.adapters,
        std::fs::read_dir(&a.adapters)
            .and_then(|d| d.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>())
            .map_err(ShareError::from),
    )?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "shrx"));
    paths.sort();
    if paths.is_empty() {
        return Err(ShareError::Argument(format!("no .shrx files in {}", a.adapters.display())));
    }
    build_state(&load_adapters(&paths)?, policy, a.p, &a.output, a.report.as_ref())
}

/// Split `config.json#3` into the config path and the task index.
fn parse_task_ref(task_ref: &str) -> Result<(PathBuf, usize)> {
    let (path, idx) = task_ref
        .rsplit_once('#')
        .ok_or_else(|| ShareError::Argument(format!("task {task_ref:?} should look like config.json#index")))?;
    let idx =
        idx.parse().map_err(|_| ShareError::Argument(format!("task index {idx:?} is not an unsigned integer")))?;
    Ok((PathBuf::from(path), idx))
}

fn adapt(cli: &Cli, a: &AdaptArgs) -> Result<serde_json::Value> {
    let (cfg_path, index) = parse_task_ref(&a.task)?;
    let cfg = load_config(Some(&cfg_path))?;
    let strict = cli.strict_override().unwrap_or(cfg.strict_cl);
    let stream = gen_stream(&cfg.stream)?;
    let task = stream.tasks.get(index).ok_or_else(|| {
        ShareError::Argument(format!("stream has {} tasks, index {index} is out of range", stream.tasks.len()))
    })?;
    let state = at(&a.state, io::load_state(&a.state))?;
    let name = a.task_name.clone().unwrap_or_else(|| task.task_name.clone());
    let known = state.tasks.iter().any(|t| t.task_name == name);
    let mut data = task.data(&stream);
    data.task_name = name.clone();

    if a.refit_coefficients {
        if strict {
            return Err(ShareError::Policy(format!(
                "refitting the coefficients of {name} revisits its training data; pass --relax-cl"
            )));
        }
        let (coeffs, rep) = train_coefficients_only(&state, &name, None, &data, &cfg.train)?;
        let mut next = state.clone();
        let slot =
            next.tasks.iter_mut().find(|t| t.task_name == name).ok_or_else(|| ShareError::UnknownTask(name.clone()))?;
        *slot = coeffs;
        io::save_state(&a.output, &next)?;
        maybe_report(a.report.as_ref(), &rep)?;
        return Ok(
            json!({ "output": a.output, "task_name": name, "refit": true, "trainable_params": rep.trainable_params }),
        );
    }

    if known && strict {
        return Err(ShareError::Policy(format!(
            "task {name} is already in the state; training on its data again needs --relax-cl"
        )));
    }
    let phi = a.phi.unwrap_or(cfg.hyper.phi.min(state.factors.k));
    let seed = derive_seed(cfg.train.seed, "temporary", index as u64);
    let tmp = spawn_temporary(&state, &name, phi, cfg.hyper.sigma, seed)?;
    let (trained, rep) = train_temporary(&tmp, &data, &cfg.train)?;
    io::save_temporary(&a.output, &trained)?;
    maybe_report(a.report.as_ref(), &rep)?;
    Ok(json!({ "output": a.output, "task_name": name, "phi": phi, "trainable_params": rep.trainable_params }))
}

fn merge_cmd(a: &MergeArgs) -> Result<serde_json::Value> {
    let state = at(&a.state, io::load_state(&a.state))?;
    let mut input = match at(&a.input, io::file_kind(&a.input))? {
        FileKind::Temporary => MergeInput::Temporary(at(&a.input, io::load_temporary(&a.input))?),
        FileKind::Adapter => MergeInput::Adapter(at(&a.input, io::import_adapter(&a.input))?),
        FileKind::State => {
            return Err(ShareError::Format(format!("{} is a state, not a mergeable input", a.input.display())))
        }
    };
    if let Some(name) = &a.task_name {
        match &mut input {
            MergeInput::Temporary(t) => t.task_name = name.clone(),
            MergeInput::Adapter(ad) => ad.task_name = name.clone(),
        }
    }
    let opts =
        MergeOptions { k_policy: a.k_policy.as_deref().map(KPolicy::parse).transpose()?, ..MergeOptions::default() };
    let (next, rep) = merge(&state, &input, &opts)?;
    for w in &rep.warnings {
        log::warn!("{w}");
    }
    io::save_state(&a.output, &next)?;
    maybe_report(a.report.as_ref(), &rep)?;
    Ok(json!({ "output": a.output, "task_name": input.task_name(), "k": rep.k, "tasks": next.tasks.len() }))
}

fn reconstruct(a: &ReconstructArgs) -> Result<serde_json::Value> {
    let state = at(&a.state, io::load_state(&a.state))?;
    let coeffs = state.task(&a.task)?;
    let rec = reconstruct_adapter(&state.factors, coeffs, state.uses_mean(&a.task))?;
    let layers: BTreeMap<String, LoraLayer> =
        rec.into_iter().map(|(id, l)| (id, LoraLayer { a: l.a_hat, b: l.b_hat })).collect();
    let adapter = LoraAdapter::new(a.task.clone(), layers)?;
    io::export_adapter(&a.output, &adapter)?;
    Ok(json!({ "output": a.output, "task_name": a.task, "rank": adapter.rank }))
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> Result<serde_json::Value> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(strict) = cli.strict_override() {
        cfg.strict_cl = strict;
    }
    let stream = gen_stream(&cfg.stream)?;
    let order: Vec<usize> = (0..stream.tasks.len()).collect();
    let run = run_continual(&stream, &order, &cfg.continual())?;
    std::fs::create_dir_all(&a.out)?;
    let out = |name: &str| a.out.join(name);

    let state = run.final_state.as_ref().expect("a finished run keeps its state");
    io::save_state(&out("state.shrx"), state)?;
    write_json(&out("config.json"), &cfg)?;
    write_json(&out("grid.json"), &run.grid)?;
    write_text(&out("grid.csv"), &run.grid.to_csv()?)?;
    let forgetting = json!({
        "peak": forgetting_and_bwt(&run.grid, ForgettingMode::Peak)?,
        "prev": forgetting_and_bwt(&run.grid, ForgettingMode::Prev)?,
        "retention": retention(&run.grid)?,
    });
    write_json(&out("forgetting.json"), &forgetting)?;
    let series = vec![
        ("planted_cka".to_string(), run.cka.iter().copied().enumerate().collect()),
        ("k".to_string(), run.k_trajectory.iter().map(|&k| k as f64).enumerate().collect()),
    ];
    write_text(&out("cka.csv"), &series_csv(&series)?)?;
    write_json(&out("merges.json"), &run.merge_reports)?;

    let shapes = stream
        .config
        .layer_ids()
        .into_iter()
        .map(|id| LayerShape::new(id, cfg.stream.n, cfg.stream.d))
        .collect::<Result<Vec<_>>>()?;
    let params = SavingsParams {
        r: cfg.hyper.lora_rank,
        k: state.factors.k,
        p: cfg.hyper.p,
        phi: cfg.hyper.phi,
        num_tasks: stream.tasks.len(),
        bytes_per_scalar: 4,
    };
    write_json(&out("savings.json"), &savings(&shapes, params)?)?;

    Ok(json!({
        "out": a.out,
        "tasks": stream.tasks.len(),
        "final_k": state.factors.k,
        "final_planted_cka": run.cka.last(),
        "average_forgetting": forgetting["peak"]["average_forgetting"],
    }))
}

fn probe(a: &ProbeArgs) -> Result<serde_json::Value> {
    let cfg = load_config(a.config.as_deref())?;
    let stream = gen_stream(&cfg.stream)?;
    let task = stream.tasks.get(a.task).ok_or_else(|| {
        ShareError::Argument(format!("stream has {} tasks, index {} is out of range", stream.tasks.len(), a.task))
    })?;
    let basis = planted_alpha(&stream, cfg.probe.k);
    let curve = theorem1_probe(&stream, task, &basis, &cfg.probe)?;
    let at = |values: &[f64]| -> Vec<(usize, f64)> {
        curve.sample_sizes.iter().copied().zip(values.iter().copied()).collect()
    };
    let flat = |v: f64| at(&vec![v; curve.sample_sizes.len()]);
    let series = vec![
        ("restricted".to_string(), at(&curve.restricted)),
        ("unrestricted".to_string(), at(&curve.unrestricted)),
        ("tail_mass".to_string(), flat(curve.tail_mass)),
        ("population_restricted".to_string(), flat(curve.population_restricted)),
    ];
    write_text(&a.out, &series_csv(&series)?)?;
    Ok(json!({ "out": a.out, "curve": curve }))
}

fn analyze(a: &AnalyzeArgs) -> Result<serde_json::Value> {
    let mode: ForgettingMode = a.mode.parse()?;
    let text = at(&a.grid, std::fs::read_to_string(&a.grid).map_err(ShareError::from))?;
    let grid: EvalGrid = serde_json::from_str(&text)?;
    let report = forgetting_and_bwt(&grid, mode)?;
    let out = json!({
        "forgetting": report,
        "retention": if grid.higher_is_better { Some(retention(&grid)?) } else { None },
    });
    match &a.out {
        Some(path) => {
            write_json(path, &out)?;
            Ok(json!({ "out": path, "average_forgetting": report.average_forgetting }))
        }
        None => Ok(out),
    }
}
