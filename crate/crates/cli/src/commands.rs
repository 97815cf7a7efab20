//! Subcommand implementations and artifact writing.

use std::io::Write;
use std::path::{Path, PathBuf};

use dtr_core::checkpoint::Checkpoint;
use dtr_core::eval::{self, evaluate, pca_project, run_ablation, run_sensitivity_sweep, FeatureMatrix, FeatureSpace};
use dtr_core::trainer::{train_with_observer, TrainState};

use crate::config::RunConfig;
use crate::CliError;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(io_err(path))
}

/// Echo the effective config; the echo is itself a valid config file.
fn write_config_echo(run: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(run)
        .map_err(|e| CliError::Internal(format!("config echo: {e}")))?;
    write_file(&dir.join("config.json"), &text)
}

pub fn cmd_train(run: &RunConfig, dir: &Path, quiet: bool) -> Result<(), CliError> {
    write_config_echo(run, dir)?;
    let (source, target) = run.data.build(run.train.seed)?;
    let log_interval = run.train.log_interval;
    let outcome = train_with_observer(&run.train, &source, &target, |state, report| {
        if !quiet && state.step % log_interval == 0 {
            println!(
                "step {:6}  e_cls_s {:.4}  e_dist {:.4}  e_cls_d {:.4}  e_rec {:.4}  m {}",
                state.step, report.e_cls_s, report.e_dist, report.e_cls_d, report.e_rec,
                report.m_selected
            );
        }
    })?;

    let metrics_path = dir.join("metrics.jsonl");
    let mut metrics = std::fs::File::create(&metrics_path).map_err(io_err(&metrics_path))?;
    for record in &outcome.metrics {
        let line = serde_json::to_string(record)
            .map_err(|e| CliError::Internal(format!("metrics line: {e}")))?;
        writeln!(metrics, "{line}").map_err(io_err(&metrics_path))?;
    }

    Checkpoint::from_state(&outcome.state)
        .save(&dir.join("checkpoint.json"))
        .map_err(CliError::from)?;

    if let Some(last) = outcome.evals.last() {
        let summary = serde_json::to_string(last)
            .map_err(|e| CliError::Internal(format!("summary: {e}")))?;
        println!("{summary}");
    }
    if !quiet {
        println!("artifacts written to {}", dir.display());
    }
    Ok(())
}

fn restore_state(run: &RunConfig, checkpoint: &Path) -> Result<(TrainState, Checkpoint), CliError> {
    let (source, _) = run.data.build(run.train.seed)?;
    let mut state =
        TrainState::new(run.train.clone(), source.input_dim, source.num_classes)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    ckpt.apply(&state.ensemble, &mut state.bank)?;
    state.step = ckpt.step;
    Ok((state, ckpt))
}

pub fn cmd_eval(run: &RunConfig, dir: &Path, checkpoint: &Path) -> Result<(), CliError> {
    write_config_echo(run, dir)?;
    let (source, target) = run.data.build(run.train.seed)?;
    let (state, ckpt) = restore_state(run, checkpoint)?;
    let report = evaluate(
        &state.ensemble,
        &state.bank,
        &source,
        &target,
        ckpt.step,
        run.train.seed,
    )?;
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Internal(format!("eval report: {e}")))?;
    write_file(&dir.join("eval.json"), &text)?;
    println!(
        "{}",
        serde_json::to_string(&report).map_err(|e| CliError::Internal(e.to_string()))?
    );
    Ok(())
}

fn in_pool<T: Send>(
    jobs: Option<usize>,
    work: impl FnOnce() -> Result<T, CliError> + Send,
) -> Result<T, CliError> {
    match jobs {
        None => work(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| CliError::Internal(format!("thread pool: {e}")))?
            .install(work),
    }
}

pub fn cmd_sweep(
    run: &RunConfig,
    dir: &Path,
    r_values: &[u64],
    seeds: &[u64],
    jobs: Option<usize>,
) -> Result<(), CliError> {
    write_config_echo(run, dir)?;
    let data = run.data.clone();
    let factory = move |seed: u64| data.build(seed);
    let rows = in_pool(jobs, || {
        run_sensitivity_sweep(&run.train, &factory, r_values, seeds).map_err(CliError::from)
    })?;

    let tables = dir.join("tables");
    std::fs::create_dir_all(&tables).map_err(io_err(&tables))?;
    let mut csv = String::from("r,mean,std,median\n");
    for row in &rows {
        csv.push_str(&format!("{},{},{},{}\n", row.r, row.mean, row.std, row.median));
    }
    write_file(&tables.join("sensitivity_r.csv"), &csv)?;
    let summary = serde_json::to_string_pretty(&rows)
        .map_err(|e| CliError::Internal(format!("sweep summary: {e}")))?;
    write_file(&dir.join("sweep.json"), &summary)?;
    println!("{}", serde_json::to_string(&rows).map_err(|e| CliError::Internal(e.to_string()))?);
    Ok(())
}

pub fn cmd_ablate(
    run: &RunConfig,
    dir: &Path,
    seeds: &[u64],
    jobs: Option<usize>,
) -> Result<(), CliError> {
    write_config_echo(run, dir)?;
    let data = run.data.clone();
    let factory = move |seed: u64| data.build(seed);
    let outcome = in_pool(jobs, || {
        run_ablation(&run.train, &factory, seeds).map_err(CliError::from)
    })?;

    let tables = dir.join("tables");
    std::fs::create_dir_all(&tables).map_err(io_err(&tables))?;
    let mut csv = String::from("mode,mean,std,median\n");
    for row in &outcome.rows {
        csv.push_str(&format!("{},{},{},{}\n", row.label, row.mean, row.std, row.median));
    }
    write_file(&tables.join("ablation.csv"), &csv)?;
    let summary = serde_json::to_string_pretty(&outcome)
        .map_err(|e| CliError::Internal(format!("ablation summary: {e}")))?;
    write_file(&dir.join("ablation.json"), &summary)?;
    println!(
        "{}",
        serde_json::to_string(&outcome).map_err(|e| CliError::Internal(e.to_string()))?
    );
    Ok(())
}

fn stack_domains(
    run: &RunConfig,
    state: &TrainState,
    space: FeatureSpace,
) -> Result<(FeatureMatrix, Vec<String>, Vec<&'static str>), CliError> {
    let (source, target) = run.data.build(run.train.seed)?;
    let src = eval::extract_features(&state.ensemble, &source, space)?;
    let tgt = eval::extract_features(&state.ensemble, &target, space)?;
    let mut data = src.data.clone();
    data.extend_from_slice(&tgt.data);
    let stacked = FeatureMatrix::new(src.rows + tgt.rows, src.cols, data);
    let mut labels: Vec<String> = source
        .eval_labels()
        .map(|l| l.iter().map(usize::to_string).collect())
        .unwrap_or_else(|| vec![String::new(); source.len()]);
    labels.extend(
        target
            .eval_labels()
            .map(|l| l.iter().map(usize::to_string).collect())
            .unwrap_or_else(|| vec![String::new(); target.len()]),
    );
    let mut domains = vec!["source"; source.len()];
    domains.extend(vec!["target"; target.len()]);
    Ok((stacked, labels, domains))
}

fn write_projection(
    run: &RunConfig,
    state: &TrainState,
    space: FeatureSpace,
    path: &Path,
) -> Result<Vec<f64>, CliError> {
    let (features, labels, domains) = stack_domains(run, state, space)?;
    let projection = pca_project(&features, 2)?;
    let mut csv = String::from("x,y,label,domain\n");
    for i in 0..features.rows {
        let row = projection.coords.row(i);
        csv.push_str(&format!("{},{},{},{}\n", row[0], row[1], labels[i], domains[i]));
    }
    write_file(path, &csv)?;
    Ok(projection.explained)
}

pub fn cmd_export(
    run: &RunConfig,
    dir: &Path,
    checkpoint: &Path,
    baseline: Option<&PathBuf>,
) -> Result<(), CliError> {
    write_config_echo(run, dir)?;
    let (source, target) = run.data.build(run.train.seed)?;
    source.write_csv(&dir.join("data_source.csv"))?;
    target.write_csv(&dir.join("data_target.csv"))?;

    let projections = dir.join("projections");
    std::fs::create_dir_all(&projections).map_err(io_err(&projections))?;
    let mut explained = serde_json::Map::new();
    let mut export = |tag: &str, ckpt_path: &Path| -> Result<(), CliError> {
        let (state, _) = restore_state(run, ckpt_path)?;
        let fg = write_projection(
            run,
            &state,
            FeatureSpace::Extractor,
            &projections.join(format!("fg_{tag}.csv")),
        )?;
        let fdi = write_projection(
            run,
            &state,
            FeatureSpace::Invariant,
            &projections.join(format!("fdi_{tag}.csv")),
        )?;
        explained.insert(format!("fg_{tag}"), serde_json::json!(fg));
        explained.insert(format!("fdi_{tag}"), serde_json::json!(fdi));
        Ok(())
    };
    export("post", checkpoint)?;
    if let Some(pre) = baseline {
        export("pre", pre)?;
    }
    let summary = serde_json::Value::Object(explained);
    write_file(
        &dir.join("export.json"),
        &serde_json::to_string_pretty(&summary)
            .map_err(|e| CliError::Internal(format!("export summary: {e}")))?,
    )?;
    println!("{summary}");
    Ok(())
}
