//! One function per verb. Every artifact goes through an atomic write
//! (temp file + rename), and overwriting an existing artifact requires
//! --force.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use oommix_core::analysis::{self, LambdaLog};
use oommix_core::checkpoint::{self, atomic_write};
use oommix_core::config::Config;
use oommix_core::corpus::{self, LabeledExample};
use oommix_core::error::{Error, Result};
use oommix_core::gradsuite;
use oommix_core::trainer::{self, Sinks};

use crate::svg;
use crate::{Common, Verb};

pub fn dispatch(verb: Verb) -> Result<ExitCode> {
    match verb {
        Verb::Train(c) => train(&c),
        Verb::Eval { common, model, data } => eval(&common, &model, data.as_deref()),
        Verb::Gradcheck { common, instances } => gradcheck(&common, instances),
        Verb::SweepLayers { common, m_gs, m_ds, seeds, include_equal, threads } => {
            sweep(&common, &m_gs, &m_ds, &seeds, include_equal, threads)
        }
        Verb::Analyze { common, model, lambda_log, pairs, bins, knn_k, cap, coverage } => {
            analyze(&common, &model, &lambda_log, pairs, bins, knn_k, cap, coverage)
        }
        Verb::SynthData(c) => synth_data(&c),
        Verb::EmitPlots(c) => emit_plots(&c),
    }
}

// ── shared plumbing ─────────────────────────────────────────────────────

fn assemble(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::from_file(p)
            .map_err(|e| Error::Config(format!("{}: {}", p.display(), e)))?,
        None => Config::default(),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set {:?} is not KEY=VALUE", kv)))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Path of an artifact in the output directory, refusing to clobber
/// without --force.
fn artifact(common: &Common, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(&common.out)?;
    let p = common.out.join(name);
    if p.exists() && !common.force {
        return Err(Error::Config(format!(
            "{} already exists; pass --force to overwrite",
            p.display()
        )));
    }
    Ok(p)
}

fn tmp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

fn write_json<S: serde::Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Analysis(format!("serializing {}: {}", path.display(), e)))?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

// ── train ───────────────────────────────────────────────────────────────

fn train(common: &Common) -> Result<ExitCode> {
    let cfg = assemble(common)?;
    let report_p = artifact(common, "report.json")?;
    let ckpt_p = artifact(common, "model.ckpt")?;
    let metrics_p = artifact(common, "metrics.jsonl")?;
    let lambda_p = artifact(common, "lambda.csv")?;

    let data = corpus::prepare(&cfg, cfg.seed)?;
    println!(
        "training on {} examples ({} val, {} test), strategy {}",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        cfg.mix.strategy.name()
    );

    // the trainer streams these; keep the final names atomic by staging
    let metrics_tmp = tmp_sibling(&metrics_p);
    let lambda_tmp = tmp_sibling(&lambda_p);
    let sinks =
        Sinks { metrics: Some(metrics_tmp.clone()), lambda_log: Some(lambda_tmp.clone()) };
    let trained = match trainer::train::<f32>(&cfg, &data, &sinks) {
        Ok(t) => t,
        Err(e) => {
            let _ = fs::remove_file(&metrics_tmp);
            let _ = fs::remove_file(&lambda_tmp);
            return Err(e);
        }
    };
    fs::rename(&metrics_tmp, &metrics_p)?;
    fs::rename(&lambda_tmp, &lambda_p)?;

    trainer::save_checkpoint(&ckpt_p, &cfg, &trained)?;
    let mut report = trained.report.clone();
    report.metrics_path = Some(metrics_p.display().to_string());
    report.lambda_log_path = Some(lambda_p.display().to_string());
    write_json(&report_p, &report)?;

    println!(
        "done: {} steps, best val acc {:.4} at step {}, test acc {:.4}",
        report.steps_run, report.best_val_acc, report.best_step, report.test_acc
    );
    println!("wrote {}", report_p.display());
    Ok(ExitCode::SUCCESS)
}

// ── eval ────────────────────────────────────────────────────────────────

fn eval(common: &Common, model: &Path, data: Option<&Path>) -> Result<ExitCode> {
    let header = checkpoint::read_header(model)?;
    let (split_name, accuracy, n) = match header.dtype.as_str() {
        "f32" => eval_typed::<f32>(model, data)?,
        "f64" => eval_typed::<f64>(model, data)?,
        other => return Err(Error::Checkpoint(format!("unknown dtype {:?}", other))),
    };
    let out = artifact(common, "accuracy.json")?;
    write_json(
        &out,
        &serde_json::json!({
            "checkpoint": model.display().to_string(),
            "split": split_name,
            "examples": n,
            "accuracy": accuracy,
        }),
    )?;
    println!("{} accuracy {:.6} over {} examples", split_name, accuracy, n);
    Ok(ExitCode::SUCCESS)
}

fn eval_typed<T: oommix_core::autodiff::Scalar>(
    model: &Path,
    data: Option<&Path>,
) -> Result<(String, f64, usize)> {
    let (header, loaded) = checkpoint::load::<T>(model)?;
    let (enc, _mix, store) = trainer::rebuild(&header, &loaded)?;
    let (name, examples): (String, Vec<LabeledExample>) = match data {
        Some(p) => {
            let rows = corpus::load_csv(p, header.config.data.text_cols)?;
            (p.display().to_string(), rows)
        }
        None => {
            let split = corpus::prepare(&header.config, header.config.seed)?;
            ("test".into(), split.test)
        }
    };
    let acc = trainer::evaluate_examples(&store, &enc, &header.vocabulary, &examples)?;
    Ok((name, acc, examples.len()))
}

// ── gradcheck ───────────────────────────────────────────────────────────

fn gradcheck(common: &Common, instances: usize) -> Result<ExitCode> {
    let entries = gradsuite::full_suite(instances, gradsuite::SUITE_EPS)?;
    let mut csv = String::from("case,instances,checked,max_rel_err,worst\n");
    println!("{:<26} {:>8} {:>12}  worst", "case", "checked", "max rel err");
    let mut failed = 0usize;
    for e in &entries {
        println!(
            "{:<26} {:>8} {:>12.3e}  {}{}",
            e.name,
            e.checked,
            e.max_rel_err,
            e.worst,
            if e.passes() { "" } else { "  FAIL" }
        );
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            e.name, e.instances, e.checked, e.max_rel_err, e.worst
        ));
        if !e.passes() {
            failed += 1;
        }
    }
    let out = artifact(common, "gradcheck.csv")?;
    atomic_write(&out, csv.as_bytes())?;
    if failed > 0 {
        eprintln!(
            "{} of {} cases breach the {} threshold",
            failed,
            entries.len(),
            gradsuite::SUITE_THRESHOLD
        );
        return Ok(ExitCode::from(3));
    }
    println!("all {} cases under {}", entries.len(), gradsuite::SUITE_THRESHOLD);
    Ok(ExitCode::SUCCESS)
}

// ── sweep-layers ────────────────────────────────────────────────────────

fn sweep(
    common: &Common,
    m_gs: &[usize],
    m_ds: &[usize],
    seeds: &[u64],
    include_equal: bool,
    threads: usize,
) -> Result<ExitCode> {
    let cfg = assemble(common)?;
    let seeds: Vec<u64> = if seeds.is_empty() { vec![cfg.seed] } else { seeds.to_vec() };

    let cells = m_gs.len() * m_ds.len();
    let mut workers = if threads == 0 { cells.max(1) } else { threads };
    if let Ok(cap) = std::env::var("OOMMIX_THREADS") {
        let cap: usize = cap
            .parse()
            .map_err(|_| Error::Config(format!("OOMMIX_THREADS {:?} is not a count", cap)))?;
        workers = workers.min(cap.max(1));
    }

    let grid = analysis::layer_sweep(&cfg, m_gs, m_ds, &seeds, include_equal, workers)?;
    let out = artifact(common, "sweep.csv")?;
    atomic_write(&out, analysis::render_sweep_csv(&grid).as_bytes())?;
    for cell in &grid {
        if cell.skipped {
            println!("m_g={} m_d={}  skipped", cell.m_g, cell.m_d);
        } else {
            println!(
                "m_g={} m_d={}  acc {:.4} ± {:.4} over {} seeds",
                cell.m_g,
                cell.m_d,
                cell.mean,
                cell.std,
                cell.accs.len()
            );
        }
    }
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

// ── analyze ─────────────────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
fn analyze(
    common: &Common,
    model: &Path,
    lambda_log: &Path,
    pairs: usize,
    bins: usize,
    knn_k: usize,
    cap: usize,
    coverage: f64,
) -> Result<ExitCode> {
    let header = checkpoint::read_header(model)?;
    match header.dtype.as_str() {
        "f32" => analyze_typed::<f32>(common, model, lambda_log, pairs, bins, knn_k, cap, coverage),
        "f64" => analyze_typed::<f64>(common, model, lambda_log, pairs, bins, knn_k, cap, coverage),
        other => Err(Error::Checkpoint(format!("unknown dtype {:?}", other))),
    }
}

#[allow(clippy::too_many_arguments)]
fn analyze_typed<T: oommix_core::autodiff::Scalar>(
    common: &Common,
    model: &Path,
    lambda_log: &Path,
    pairs: usize,
    bins: usize,
    knn_k: usize,
    cap: usize,
    coverage: f64,
) -> Result<ExitCode> {
    let (header, loaded) = checkpoint::load::<T>(model)?;
    let (enc, mix, store) = trainer::rebuild(&header, &loaded)?;
    let cfg = &header.config;

    // λ histogram and phase medians, when the run logged mixing at all
    let log = LambdaLog::load(lambda_log)?;
    let mut lambda_summary = serde_json::Value::Null;
    if log.records.is_empty() {
        println!("λ log {} has no records; skipping histogram", lambda_log.display());
    } else {
        let hist = analysis::lambda_histogram(&log, bins)?;
        let out = artifact(common, "histogram.csv")?;
        atomic_write(&out, analysis::render_histogram_csv(&hist, bins).as_bytes())?;
        let m1 = analysis::median_lambda(&log, 0)?;
        let m2 = analysis::median_lambda(&log, 1)?;
        let ld = analysis::final_running_ld(&log, cfg.mix.e_window)?;
        println!("median λ: first phase {:.4}, second phase {:.4}", m1, m2);
        println!("final running L_D over {} records: {:.4}", cfg.mix.e_window, ld);
        lambda_summary = serde_json::json!({
            "records": log.records.len(),
            "median_phase1": m1,
            "median_phase2": m2,
            "final_running_ld": ld,
        });
    }

    // embedding dump on the validation split (test when no val was held out)
    let split = corpus::prepare(cfg, cfg.seed)?;
    let (split_name, examples) =
        if split.val.is_empty() { ("test", &split.test) } else { ("val", &split.val) };
    let dump = analysis::dump_embeddings(
        &store,
        &enc,
        mix.as_ref(),
        &header.vocabulary,
        examples,
        pairs,
        cfg.seed,
    )?;
    let dump_p = artifact(common, "dump.csv")?;
    atomic_write(&dump_p, analysis::render_dump_csv(&dump).as_bytes())?;

    let proj = analysis::isomap_dump(&dump, cap, knn_k)?;
    let proj_p = artifact(common, "projection.csv")?;
    atomic_write(&proj_p, analysis::render_projection_csv(&dump, &proj).as_bytes())?;
    println!(
        "isomap kept {} of {} points ({} dropped outside the main component)",
        proj.kept.len(),
        proj.kept.len() + proj.dropped,
        proj.dropped
    );

    // PCA coverage: the mixture points should demand extra directions
    let actual = analysis::actual_points(&dump, cap);
    let frac_actual = analysis::spectral::pca_variance_coverage(&actual, coverage)?;
    let (_, mixed) = analysis::isomap_inputs(&dump, cap);
    let frac_mixed = analysis::spectral::pca_variance_coverage(&mixed, coverage)?;
    let dim = dump.dim;
    let mut pca_csv = String::from("set,points,components,dims,fraction,target\n");
    for (name, pts, frac) in
        [("actual", actual.len(), frac_actual), ("actual+generated", mixed.len(), frac_mixed)]
    {
        let k = (frac * dim as f64).round() as usize;
        pca_csv.push_str(&format!("{},{},{},{},{},{}\n", name, pts, k, dim, frac, coverage));
    }
    let pca_p = artifact(common, "pca.csv")?;
    atomic_write(&pca_p, pca_csv.as_bytes())?;
    println!(
        "PCA {:.0}% coverage: actual {:.3} of dims, with generated {:.3}",
        coverage * 100.0,
        frac_actual,
        frac_mixed
    );

    let summary_p = artifact(common, "summary.json")?;
    write_json(
        &summary_p,
        &serde_json::json!({
            "checkpoint": model.display().to_string(),
            "split": split_name,
            "pairs": pairs,
            "lambda": lambda_summary,
            "isomap": {
                "knn_k": knn_k,
                "kept": proj.kept.len(),
                "dropped": proj.dropped,
                "eigenvalues": proj.eigenvalues,
            },
            "pca": {
                "target": coverage,
                "actual_fraction": frac_actual,
                "mixed_fraction": frac_mixed,
            },
        }),
    )?;
    println!("wrote {}", summary_p.display());
    Ok(ExitCode::SUCCESS)
}

// ── synth-data ──────────────────────────────────────────────────────────

fn synth_data(common: &Common) -> Result<ExitCode> {
    let cfg = assemble(common)?;
    let split = corpus::synth_dataset(&cfg.synth, cfg.seed);
    for (name, rows) in
        [("train.csv", &split.train), ("val.csv", &split.val), ("test.csv", &split.test)]
    {
        let p = artifact(common, name)?;
        let staging = tmp_sibling(&p);
        corpus::write_csv(&staging, rows)?;
        fs::rename(&staging, &p)?;
        println!("wrote {} ({} rows)", p.display(), rows.len());
    }
    Ok(ExitCode::SUCCESS)
}

// ── emit-plots ──────────────────────────────────────────────────────────

fn emit_plots(common: &Common) -> Result<ExitCode> {
    let mut emitted = 0usize;

    let hist_src = common.out.join("histogram.csv");
    if hist_src.exists() {
        let rows = analysis::parse_histogram_csv(&fs::read_to_string(&hist_src)?)?;
        let p = artifact(common, "lambda_hist.svg")?;
        atomic_write(&p, svg::lambda_histogram(&rows).as_bytes())?;
        println!("wrote {}", p.display());
        emitted += 1;
    }

    let sweep_src = common.out.join("sweep.csv");
    if sweep_src.exists() {
        let rows = analysis::parse_sweep_csv(&fs::read_to_string(&sweep_src)?)?;
        let p = artifact(common, "sweep_accuracy.svg")?;
        atomic_write(&p, svg::sweep_lines(&rows)?.as_bytes())?;
        println!("wrote {}", p.display());
        emitted += 1;
    }

    let proj_src = common.out.join("projection.csv");
    if proj_src.exists() {
        let rows = analysis::parse_projection_csv(&fs::read_to_string(&proj_src)?)?;
        let p = artifact(common, "projection.svg")?;
        atomic_write(&p, svg::projection_scatter(&rows).as_bytes())?;
        println!("wrote {}", p.display());
        emitted += 1;
    }

    if emitted == 0 {
        return Err(Error::Config(format!(
            "no histogram.csv, sweep.csv or projection.csv under {}; run analyze or sweep-layers first",
            common.out.display()
        )));
    }
    Ok(ExitCode::SUCCESS)
}
