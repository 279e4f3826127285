use std::path::{Path, PathBuf};
use std::time::Instant;

use emocaps::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use emocaps::config::RunSeeds;
use emocaps::data::{generate_synthetic, load_dataset, save_dataset, split, write_atomic, Dataset};
use emocaps::gradcheck::{check_model, toy_problem, GradCheckOptions, DEFAULT_TOY_SEED};
use emocaps::metrics::probabilities_csv;
use emocaps::train::{evaluate, predict_dialogues, run_ablation, with_threads};
use emocaps::{EmoCaps, Error, EvalReport, LabelSet, ModalitySet, Preset, Result, RunConfig};

use crate::Common;

/// Config file first, then command-line flags on top.
fn resolve(c: &Common) -> Result<RunConfig> {
    let mut rc = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &c.preset {
        rc.preset = p.parse()?;
    }
    if c.seed.is_some() {
        rc.seed = c.seed;
    }
    if c.out.is_some() {
        rc.out = c.out.clone();
    }
    if c.threads.is_some() {
        rc.threads = c.threads;
    }
    if c.manifest.is_some() {
        rc.manifest = c.manifest.clone();
    }
    if c.checkpoint.is_some() {
        rc.checkpoint = c.checkpoint.clone();
    }
    Ok(rc)
}

fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::Config(format!("{flag} is required (flag or config field)")))
}

fn parse_list(s: &str) -> Result<Vec<ModalitySet>> {
    s.split(',').map(|p| p.trim().parse()).collect()
}

fn single_modalities(c: &Common) -> Result<Option<ModalitySet>> {
    let Some(s) = &c.modalities else {
        return Ok(None);
    };
    match parse_list(s)?.as_slice() {
        [one] => Ok(Some(*one)),
        _ => Err(Error::Config(format!(
            "--modalities takes one set here, got {s:?}; lists are for ablate"
        ))),
    }
}

fn threads(rc: &RunConfig) -> usize {
    rc.threads.unwrap_or(1)
}

fn check_preset_labels(preset: Preset, labels: &LabelSet) -> Result<()> {
    match preset.labels() {
        Some(expected) if &expected != labels => Err(Error::Config(format!(
            "preset {preset} expects labels [{}], manifest has [{}]",
            expected.names().join(", "),
            labels.names().join(", ")
        ))),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn write_report(dir: &Path, prefix: &str, report: &EvalReport) -> Result<()> {
    write_text(&dir.join(format!("{prefix}metrics.csv")), &report.to_csv())?;
    write_text(&dir.join(format!("{prefix}metrics.json")), &report.to_json())?;
    write_text(&dir.join(format!("{prefix}probabilities.csv")), &report.probabilities_csv())
}

struct Prepared {
    rc: RunConfig,
    out: PathBuf,
    dataset: Dataset,
    seeds: RunSeeds,
}

fn prepare(c: &Common) -> Result<Prepared> {
    let rc = resolve(c)?;
    let out = require(&rc.out, "--out")?.to_path_buf();
    let dataset = load_dataset(require(&rc.manifest, "--manifest")?)?;
    check_preset_labels(rc.preset, &dataset.labels)?;
    let seeds = RunSeeds::derive(rc.seed.unwrap_or(0));
    Ok(Prepared {
        rc,
        out,
        dataset,
        seeds,
    })
}

pub fn train(c: &Common) -> Result<()> {
    let Prepared {
        rc,
        out,
        dataset,
        seeds,
    } = prepare(c)?;
    let keep = single_modalities(c)?.unwrap_or(rc.keep());
    let mut tcfg = rc.train_config()?;
    tcfg.seed = seeds.train;
    let mcfg = rc.model_config(dataset.dims()?, dataset.labels.len())?;
    let parts = split(&dataset.dialogues, rc.split_fractions(), seeds.split)?;

    let resolved = serde_json::json!({
        "preset": rc.preset,
        "manifest": rc.manifest,
        "seed": rc.seed.unwrap_or(0),
        "modalities": keep,
        "split": rc.split_fractions(),
        "train": tcfg,
        "model": mcfg,
    });
    let resolved = serde_json::to_string_pretty(&resolved).expect("plain json value");
    write_text(&out.join("run_config.json"), &resolved)?;

    let mut model = EmoCaps::new(mcfg, seeds.model)?;
    let mut log = String::new();
    let outcome = emocaps::train::train(&mut model, &parts.train, &parts.dev, &tcfg, keep, |e| {
        let line = e.to_line();
        println!("{line}");
        log.push_str(&line);
        log.push('\n');
    })?;
    write_text(&out.join("loss_log.txt"), &log)?;
    save_checkpoint(&out.join("checkpoint"), &model, &dataset.labels, keep)?;

    let score = |m: &EmoCaps| with_threads(tcfg.threads, || evaluate(m, &parts.test, &dataset.labels, keep));
    if !parts.test.is_empty() {
        let report = score(&model)??;
        write_report(&out, "test_", &report)?;
        println!("test_weighted_f1={} test_utterances={}", report.weighted_f1, report.n_utterances());
    }
    if let Some(best) = outcome.best {
        let mut best_model = model.clone();
        *best_model.store_mut() = best.params;
        save_checkpoint(&out.join("best_checkpoint"), &best_model, &dataset.labels, keep)?;
        let mut line = format!("best_epoch={} best_dev_weighted_f1={}", best.epoch, best.dev_weighted_f1);
        if !parts.test.is_empty() {
            let report = score(&best_model)??;
            write_report(&out, "best_test_", &report)?;
            line.push_str(&format!(" best_test_weighted_f1={}", report.weighted_f1));
        }
        println!("{line}");
    }
    println!("out={}", out.display());
    Ok(())
}

/// Checkpoint plus a manifest whose feature extents it accepts.
fn load_pair(rc: &RunConfig) -> Result<(Checkpoint, Dataset)> {
    let ck = load_checkpoint(require(&rc.checkpoint, "--checkpoint")?)?;
    let dataset = load_dataset(require(&rc.manifest, "--manifest")?)?;
    ck.model.config().check_data(dataset.dims()?, ck.model.config().n_labels)?;
    Ok((ck, dataset))
}

pub fn eval(c: &Common) -> Result<()> {
    let rc = resolve(c)?;
    let out = require(&rc.out, "--out")?;
    let (ck, dataset) = load_pair(&rc)?;
    if ck.labels != dataset.labels {
        return Err(Error::Config(format!(
            "checkpoint labels [{}] differ from manifest labels [{}]",
            ck.labels.names().join(", "),
            dataset.labels.names().join(", ")
        )));
    }
    let keep = single_modalities(c)?.or(rc.keep).unwrap_or(ck.keep);
    let report = with_threads(threads(&rc), || evaluate(&ck.model, &dataset.dialogues, &ck.labels, keep))??;
    write_report(out, "", &report)?;
    println!(
        "weighted_f1={} accuracy={} utterances={}",
        report.weighted_f1,
        report.accuracy,
        report.n_utterances()
    );
    Ok(())
}

pub fn predict(c: &Common) -> Result<()> {
    let rc = resolve(c)?;
    let (ck, dataset) = load_pair(&rc)?;
    let keep = single_modalities(c)?.or(rc.keep).unwrap_or(ck.keep);
    let rows = with_threads(threads(&rc), || predict_dialogues(&ck.model, &dataset.dialogues, keep))??;
    let csv = probabilities_csv(ck.labels.names(), &rows);
    match &rc.out {
        Some(dir) => {
            let path = dir.join("predictions.csv");
            write_text(&path, &csv)?;
            println!("predictions={} rows={}", path.display(), rows.len());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

pub fn ablate(c: &Common) -> Result<()> {
    let Prepared {
        rc,
        out,
        dataset,
        seeds,
    } = prepare(c)?;
    let settings = match &c.modalities {
        Some(s) => parse_list(s)?,
        None => rc
            .modalities
            .clone()
            .unwrap_or_else(|| ModalitySet::ablation_rows().to_vec()),
    };
    let mut tcfg = rc.train_config()?;
    tcfg.seed = seeds.train;
    let mcfg = rc.model_config(dataset.dims()?, dataset.labels.len())?;
    let parts = split(&dataset.dialogues, rc.split_fractions(), seeds.split)?;
    if parts.test.is_empty() {
        return Err(Error::Config("split leaves no test dialogues".into()));
    }
    let mut csv = String::from("modalities,weighted_f1,best_dev_weighted_f1\n");
    run_ablation(
        || EmoCaps::new(mcfg.clone(), seeds.model),
        &parts.train,
        &parts.dev,
        &parts.test,
        &dataset.labels,
        &settings,
        &tcfg,
        |row| {
            let best = row.best_dev_weighted_f1.map(|f| f.to_string());
            println!(
                "modalities={} weighted_f1={} best_dev_weighted_f1={}",
                row.modalities,
                row.weighted_f1,
                best.as_deref().unwrap_or("na")
            );
            csv.push_str(&format!(
                "{},{},{}\n",
                row.modalities,
                row.weighted_f1,
                best.as_deref().unwrap_or("")
            ));
        },
    )?;
    write_text(&out.join("ablation.csv"), &csv)
}

pub fn gradcheck(c: &Common, step: Option<f64>, corrupt: bool) -> Result<()> {
    let rc = resolve(c)?;
    let toy = toy_problem(rc.seed.unwrap_or(DEFAULT_TOY_SEED))?;
    let mut opts = GradCheckOptions {
        corrupt,
        ..GradCheckOptions::default()
    };
    if let Some(h) = step {
        opts.step = h;
    }
    let start = Instant::now();
    let report = with_threads(threads(&rc), || check_model(&toy.model, &toy.dialogues, &opts))??;
    let elapsed = start.elapsed().as_secs_f64();

    println!("{:<18} {:>8} {:>8} {:>14}  worst", "component", "entries", "reduced", "max_rel_error");
    for comp in &report.components {
        let worst = comp
            .worst
            .as_ref()
            .map_or_else(|| "-".to_string(), |(name, i)| format!("{name}[{i}]"));
        println!(
            "{:<18} {:>8} {:>8} {:>14.3e}  {worst}",
            comp.name, comp.entries, comp.reduced_steps, comp.max_rel_error
        );
    }
    if let Some(dir) = &rc.out {
        let json = serde_json::to_string_pretty(&report).expect("report is serializable");
        write_text(&dir.join("gradcheck.json"), &json)?;
    }
    let status = if report.passed() { "pass" } else { "fail" };
    println!("status={status} tolerance={} elapsed_s={elapsed:.2}", report.tolerance);
    if report.passed() {
        return Ok(());
    }
    let worst = report.worst().expect("at least one component");
    let at = worst
        .worst
        .as_ref()
        .map_or_else(String::new, |(name, i)| format!(" at {name}[{i}]"));
    Err(Error::Numeric(format!(
        "gradient check failed: {} max relative error {:.3e}{at} (tolerance {:e})",
        worst.name, worst.max_rel_error, report.tolerance
    )))
}

pub fn synth(c: &Common) -> Result<()> {
    let rc = resolve(c)?;
    let out = require(&rc.out, "--out")?;
    let mut spec = rc.synth.clone().unwrap_or_default();
    if let Some(s) = rc.seed {
        spec.seed = s;
    }
    let dataset = generate_synthetic(&spec)?;
    let manifest = save_dataset(out, &dataset)?;
    println!(
        "manifest={} dialogues={} utterances={}",
        manifest.display(),
        dataset.dialogues.len(),
        dataset.n_utterances()
    );
    Ok(())
}
