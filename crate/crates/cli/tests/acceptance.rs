//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero if any criterion fails.

use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use emocaps::config::RunSeeds;
use emocaps::data::{generate_synthetic, save_dataset, split, FeatureDims, SignalStrength, SynthSpec};
use emocaps::emoformer::residual_concat;
use emocaps::model::ForwardOptions;
use emocaps::train::{evaluate, run_ablation, train};
use emocaps::{EmoCaps, EvalReport, Graph, LabelSet, ModalitySet, ModelConfig, Preset, Rng, RunConfig, Tensor};

type Check = fn() -> Result<String, String>;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_emocaps"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradient_correctness() -> Result<String, String> {
    let start = Instant::now();
    let out = run(&["gradcheck"]);
    let elapsed = start.elapsed();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let mut rows = Vec::new();
    for line in stdout.lines().skip(1) {
        if line.starts_with("status=") {
            break;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        let err: f64 = cols
            .get(3)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("unparsable row {line:?}"))?;
        rows.push((cols[0].to_string(), err));
    }
    let worst = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    let names: Vec<&str> = rows.iter().map(|r| r.0.as_str()).collect();
    for needed in ["emoformer.audio", "emoformer.visual", "text_path", "bilstm", "head"] {
        ensure(names.contains(&needed), || format!("no row for {needed}"))?;
    }
    ensure(out.status.code() == Some(0), || {
        format!("exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr).trim())
    })?;
    ensure(worst < 1e-4, || format!("max relative error {worst:.3e}"))?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} components, max rel error {worst:.2e}, {:.1}s",
        rows.len(),
        elapsed.as_secs_f64()
    ))
}

/// Random small model and a one-dialogue dataset for it.
fn random_case(seed: u64) -> (EmoCaps, emocaps::Dialogue) {
    let mut rng = Rng::new(seed);
    let heads = [1, 2, 4][rng.below(3)];
    let dims = FeatureDims {
        text: rng.range_inclusive(2, 12),
        audio: heads * rng.range_inclusive(1, 4),
        visual: heads * rng.range_inclusive(1, 4),
    };
    let m = rng.range_inclusive(2, 7);
    let data = generate_synthetic(&SynthSpec {
        n_dialogues: 1,
        min_utterances: 1,
        max_utterances: 6,
        n_labels: m,
        dims,
        seq_len: rng.range_inclusive(1, 5),
        noise: 2.0,
        seed,
        ..SynthSpec::default()
    })
    .expect("valid spec");
    let mut cfg = ModelConfig::new(dims, m);
    cfg.n_heads = heads;
    cfg.d_text_emotion = rng.range_inclusive(1, 8);
    cfg.d_audio_emotion = rng.range_inclusive(1, 8);
    cfg.d_visual_emotion = rng.range_inclusive(1, 8);
    cfg.d_hidden = rng.range_inclusive(1, 8);
    let model = EmoCaps::new(cfg, seed.wrapping_mul(31)).expect("valid config");
    (model, data.dialogues.into_iter().next().expect("one dialogue"))
}

fn row_sum_deviation(values: &[f64], cols: usize) -> f64 {
    values
        .chunks(cols)
        .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

fn normalization() -> Result<String, String> {
    let mut worst = 0.0f64;
    let mut attention_maps = 0;
    for pass in 0..100u64 {
        let (model, dialogue) = random_case(pass);
        let opts = if pass % 2 == 0 {
            ForwardOptions::eval(ModalitySet::ALL)
        } else {
            ForwardOptions::train(ModalitySet::ALL, 0.3)
        };
        let mut g = model.graph();
        let out = model
            .forward(&mut g, &dialogue, &opts, &mut Rng::new(pass))
            .map_err(|e| e.to_string())?;
        for &w in &out.attention {
            let cols = *g.shape(w).last().expect("matrix");
            worst = worst.max(row_sum_deviation(g.value(w), cols));
            attention_maps += 1;
        }
        worst = worst.max(row_sum_deviation(g.value(out.probs), model.config().n_labels));
    }
    ensure(worst < 1e-6, || format!("row sum off by {worst:.3e}"))?;
    Ok(format!("100 passes, {attention_maps} attention maps, max |sum - 1| = {worst:.1e}"))
}

fn structural() -> Result<String, String> {
    let err = |e: emocaps::Error| e.to_string();
    let (mut extents, mut perturbations) = (0, 0);
    for case in 0..20u64 {
        let (model, dialogue) = random_case(1000 + case);
        let cfg = model.config().clone();

        // Capsule extent and bit-exact recovery of the sentence slice.
        let expected = cfg.d_text + cfg.d_text_emotion + cfg.d_visual_emotion + cfg.d_audio_emotion;
        ensure(model.layout().extent() == expected, || "layout extent".into())?;
        let mut g = model.graph();
        let out = model
            .forward(&mut g, &dialogue, &ForwardOptions::eval(ModalitySet::ALL), &mut Rng::new(0))
            .map_err(err)?;
        ensure(g.shape(out.capsules) == [dialogue.len(), expected], || {
            format!("capsules {:?}, expected width {expected}", g.shape(out.capsules))
        })?;
        let caps = g.tensor(out.capsules);
        for (i, u) in dialogue.utterances.iter().enumerate() {
            ensure(&caps.row(i)[..cfg.d_text] == u.text.data(), || "sentence slice differs".into())?;
        }
        extents += 1;

        // Residual concat: both halves come back unchanged.
        let mut rng = Rng::new(case);
        let t = rng.range_inclusive(1, 5);
        let d = rng.range_inclusive(1, 9);
        let a = Tensor::normal(&[t, d], 1.0, &mut rng);
        let b = Tensor::normal(&[t, d], 1.0, &mut rng);
        let mut g2 = Graph::new();
        let (va, vb) = (g2.constant(a.clone()), g2.constant(b.clone()));
        let h = residual_concat(&mut g2, va, vb).map_err(err)?;
        let left = g2.slice_cols(h, 0..d).map_err(err)?;
        let right = g2.slice_cols(h, d..2 * d).map_err(err)?;
        ensure(g2.value(left) == a.data() && g2.value(right) == b.data(), || "residual slices differ".into())?;

        // Mapping networks: five chained affine layers per modality.
        for (prefix, input, output) in [
            ("text.map", cfg.d_text, cfg.d_text_emotion),
            ("audio.map", 2 * cfg.d_audio, cfg.d_audio_emotion),
            ("visual.map", 2 * cfg.d_visual, cfg.d_visual_emotion),
        ] {
            let shapes: Vec<Vec<usize>> = model
                .store()
                .iter()
                .filter(|(_, n, _)| n.starts_with(prefix) && n.ends_with(".weight"))
                .map(|(_, _, t)| t.shape().to_vec())
                .collect();
            ensure(shapes.len() == 5, || format!("{prefix} has {} layers", shapes.len()))?;
            ensure(shapes[0][0] == input && shapes[4][1] == output, || format!("{prefix} ends {shapes:?}"))?;
            ensure(shapes.windows(2).all(|w| w[0][1] == w[1][0]), || format!("{prefix} chain {shapes:?}"))?;
        }

        // Perturbing utterance j leaves forward states before j and
        // backward states after j bit-identical.
        let n = dialogue.len();
        if n < 2 {
            continue;
        }
        let j = rng.below(n);
        let mut changed = dialogue.clone();
        for x in changed.utterances[j].text.data_mut() {
            *x += 1.0;
        }
        let states = |dlg: &emocaps::Dialogue| -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), String> {
            let mut g = model.graph();
            let out = model
                .forward(&mut g, dlg, &ForwardOptions::eval(ModalitySet::ALL), &mut Rng::new(0))
                .map_err(err)?;
            let f = out.states.forward.iter().map(|&v| g.value(v).to_vec()).collect();
            let b = out.states.backward.iter().map(|&v| g.value(v).to_vec()).collect();
            Ok((f, b))
        };
        let (f0, b0) = states(&dialogue)?;
        let (f1, b1) = states(&changed)?;
        for i in 0..n {
            ensure(i >= j || f0[i] == f1[i], || format!("h_fwd[{i}] moved after perturbing {j}"))?;
            ensure(i <= j || b0[i] == b1[i], || format!("h_bwd[{i}] moved after perturbing {j}"))?;
        }
        ensure(f0[j] != f1[j], || "perturbation had no effect".into())?;
        perturbations += 1;
    }
    Ok(format!(
        "{extents} models: capsule extents, residual slices, 5-layer mappings; {perturbations} causality probes"
    ))
}

fn learnability() -> Result<String, String> {
    let dims = FeatureDims {
        text: 16,
        audio: 16,
        visual: 16,
    };
    let mut good = 0;
    let mut slowest = Duration::ZERO;
    let mut detail = Vec::new();
    for seed in 0..5u64 {
        let start = Instant::now();
        let seeds = RunSeeds::derive(seed);
        let data = generate_synthetic(&SynthSpec {
            n_dialogues: 200,
            n_labels: 4,
            dims,
            noise: 0.5,
            seed,
            ..SynthSpec::default()
        })
        .map_err(|e| e.to_string())?;
        let parts = split(&data.dialogues, [0.8, 0.1, 0.1], seeds.split).map_err(|e| e.to_string())?;
        let mut model = EmoCaps::new(Preset::Iemocap.model_config(dims, 4), seeds.model).map_err(|e| e.to_string())?;
        let mut cfg = Preset::Iemocap.train_config();
        cfg.epochs = 20;
        cfg.seed = seeds.train;
        train(&mut model, &parts.train, &parts.dev, &cfg, ModalitySet::ALL, |_| {}).map_err(|e| e.to_string())?;
        let f1 = |set| evaluate(&model, set, &data.labels, ModalitySet::ALL).map(|r| r.weighted_f1);
        let (tr, te) = (f1(&parts.train).map_err(|e| e.to_string())?, f1(&parts.test).map_err(|e| e.to_string())?);
        slowest = slowest.max(start.elapsed());
        if tr >= 0.95 && te >= 0.85 {
            good += 1;
        }
        detail.push(format!("{tr:.3}/{te:.3}"));
    }
    let summary = format!(
        "{good}/5 seeds reach train>=0.95 and test>=0.85 (train/test: {}), slowest run {:.0}s",
        detail.join(" "),
        slowest.as_secs_f64()
    );
    ensure(good >= 4 && slowest < Duration::from_secs(300), || summary.clone())?;
    Ok(summary)
}

/// Mean test F1 of T-only and T+V+A over five seeds.
fn ablation_means(signal: SignalStrength) -> Result<(f64, f64), String> {
    let dims = FeatureDims {
        text: 16,
        audio: 16,
        visual: 16,
    };
    let (mut text_only, mut all) = (0.0, 0.0);
    for seed in 0..5u64 {
        let seeds = RunSeeds::derive(seed);
        let data = generate_synthetic(&SynthSpec {
            n_dialogues: 200,
            n_labels: 4,
            dims,
            noise: 1.0,
            signal,
            seed,
            ..SynthSpec::default()
        })
        .map_err(|e| e.to_string())?;
        let parts = split(&data.dialogues, [0.8, 0.1, 0.1], seeds.split).map_err(|e| e.to_string())?;
        let mut mcfg = ModelConfig::new(dims, 4);
        mcfg.d_text_emotion = 16;
        mcfg.d_audio_emotion = 16;
        mcfg.d_visual_emotion = 16;
        mcfg.d_hidden = 32;
        let mut cfg = Preset::Iemocap.train_config();
        cfg.epochs = 20;
        cfg.lr = 1e-3;
        cfg.seed = seeds.train;
        let rows = run_ablation(
            || EmoCaps::new(mcfg.clone(), seeds.model),
            &parts.train,
            &parts.dev,
            &parts.test,
            &data.labels,
            &[ModalitySet::TEXT, ModalitySet::ALL],
            &cfg,
            |_| {},
        )
        .map_err(|e| e.to_string())?;
        text_only += rows[0].weighted_f1 / 5.0;
        all += rows[1].weighted_f1 / 5.0;
    }
    Ok((text_only, all))
}

fn ablation_direction() -> Result<String, String> {
    let s = 1.0 / 3f64.sqrt();
    let (t, tva) = ablation_means(SignalStrength {
        text: s,
        audio: s,
        visual: s,
    })?;
    let (t0, tva0) = ablation_means(SignalStrength::only_text(1.0))?;
    let summary = format!("split signal T={t:.3} T+V+A={tva:.3}; text-only signal T={t0:.3} T+V+A={tva0:.3}");
    ensure(tva >= t && (t0 - tva0).abs() <= 0.02, || summary.clone())?;
    Ok(summary)
}

/// Counts every quantity by scanning the raw pairs once per class.
fn oracle_check(gold: &[usize], pred: &[usize], m: usize, report: &EvalReport) -> Result<(), String> {
    let n = gold.len();
    let mut weighted = 0.0;
    for c in 0..m {
        let tp = (0..n).filter(|&i| gold[i] == c && pred[i] == c).count();
        let fp = (0..n).filter(|&i| gold[i] != c && pred[i] == c).count();
        let fn_ = (0..n).filter(|&i| gold[i] == c && pred[i] != c).count();
        let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = div(tp, tp + fp);
        let recall = div(tp, tp + fn_);
        let f1 = div(2 * tp, 2 * tp + fp + fn_);
        let support = tp + fn_;
        weighted += support as f64 * f1;
        let got = &report.per_class[c];
        ensure(
            got.precision == precision && got.recall == recall && got.f1 == f1 && got.support == support,
            || format!("class {c}: got {got:?}, oracle p={precision} r={recall} f1={f1} support={support}"),
        )?;
        for k in 0..m {
            let count = (0..n).filter(|&i| gold[i] == c && pred[i] == k).count();
            ensure(report.confusion[c][k] == count, || format!("confusion[{c}][{k}]"))?;
        }
    }
    let weighted = if n == 0 { 0.0 } else { weighted / n as f64 };
    ensure(report.weighted_f1 == weighted, || {
        format!("weighted F1 {} vs oracle {weighted}", report.weighted_f1)
    })
}

fn metric_oracle() -> Result<String, String> {
    let mut rng = Rng::new(2024);
    let (mut zero_support, mut zero_predicted) = (0, 0);
    for _ in 0..100 {
        let m = rng.range_inclusive(2, 7);
        let n = rng.range_inclusive(0, 40);
        // Draw from a random subset of classes so some have no support or
        // are never predicted.
        let gold_pool: Vec<usize> = (0..m).filter(|_| rng.bernoulli(0.7)).collect();
        let pred_pool: Vec<usize> = (0..m).filter(|_| rng.bernoulli(0.7)).collect();
        let draw = |pool: &[usize], rng: &mut Rng| if pool.is_empty() { 0 } else { pool[rng.below(pool.len())] };
        let gold: Vec<usize> = (0..n).map(|_| draw(&gold_pool, &mut rng)).collect();
        let pred: Vec<usize> = (0..n).map(|_| draw(&pred_pool, &mut rng)).collect();
        let labels = LabelSet::numbered(m).map_err(|e| e.to_string())?;
        let report = EvalReport::from_predictions(&gold, &pred, &labels).map_err(|e| e.to_string())?;
        oracle_check(&gold, &pred, m, &report)?;
        zero_support += (0..m).filter(|c| !gold.contains(c)).count();
        zero_predicted += (0..m).filter(|c| !pred.contains(c)).count();
    }
    Ok(format!(
        "100 random sets match exactly ({zero_support} zero-support classes, {zero_predicted} never-predicted classes)"
    ))
}

fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).expect("readable dir") {
            let p = entry.expect("dir entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).expect("under dir").display().to_string();
                out.push((rel, std::fs::read(&p).expect("readable file")));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = tmp.path().join("config.json");
    std::fs::write(
        &config,
        r#"{"synth": {"n_dialogues": 24, "dims": {"text": 8, "audio": 8, "visual": 8}, "seq_len": 2},
            "train": {"epochs": 4, "lr": 0.001, "batch_size": 6},
            "model": {"n_heads": 2, "d_hidden": 8, "d_text_emotion": 4, "d_audio_emotion": 4, "d_visual_emotion": 4}}"#,
    )
    .map_err(|e| e.to_string())?;
    let cfg = config.to_str().expect("utf-8 path");
    let data = tmp.path().join("data");
    let out = run(&["synth", "--config", cfg, "--out", data.to_str().unwrap(), "--seed", "4"]);
    ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
    let manifest = data.join("manifest.json");
    let train_into = |name: &str| -> Result<std::path::PathBuf, String> {
        let dir = tmp.path().join(name);
        let out = run(&[
            "train",
            "--config",
            cfg,
            "--manifest",
            manifest.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
            "--seed",
            "9",
        ]);
        ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
        Ok(dir)
    };
    let (a, b) = (train_into("a")?, train_into("b")?);
    let log_a = std::fs::read(a.join("loss_log.txt")).map_err(|e| e.to_string())?;
    let log_b = std::fs::read(b.join("loss_log.txt")).map_err(|e| e.to_string())?;
    ensure(!log_a.is_empty() && log_a == log_b, || "loss logs differ".into())?;
    let mut files = 0;
    for sub in ["checkpoint", "best_checkpoint"] {
        let (fa, fb) = (files_under(&a.join(sub)), files_under(&b.join(sub)));
        ensure(!fa.is_empty() && fa == fb, || format!("{sub} differs"))?;
        files += fa.len();
    }
    Ok(format!(
        "two seeded runs: identical loss logs ({} bytes) and {files} identical checkpoint files",
        log_a.len()
    ))
}

fn preset_fidelity() -> Result<String, String> {
    let iemocap = Preset::Iemocap.values().ok_or("no iemocap values")?;
    let meld = Preset::Meld.values().ok_or("no meld values")?;
    for (name, v, dim_a, dim_t) in [("iemocap", iemocap, 100, 100), ("meld", meld, 300, 600)] {
        ensure(
            (v.epochs, v.lr, v.dropout, v.batch_size, v.dim_v, v.dim_a, v.dim_t) == (80, 0.0001, 0.1, 30, 256, dim_a, dim_t),
            || format!("{name}: {v:?}"),
        )?;
        let rc: RunConfig = serde_json::from_str(&format!(r#"{{"preset": "{name}"}}"#)).map_err(|e| e.to_string())?;
        let t = rc.train_config().map_err(|e| e.to_string())?;
        ensure((t.epochs, t.lr, t.dropout, t.batch_size) == (80, 0.0001, 0.1, 30), || format!("{name}: {t:?}"))?;
    }

    // End to end: the resolved configuration a preset run records.
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dims = FeatureDims {
        text: 4,
        audio: 4,
        visual: 4,
    };
    let mut data = generate_synthetic(&SynthSpec {
        n_dialogues: 3,
        min_utterances: 2,
        max_utterances: 2,
        n_labels: 6,
        dims,
        ..SynthSpec::default()
    })
    .map_err(|e| e.to_string())?;
    data.labels = LabelSet::iemocap();
    let manifest = save_dataset(&tmp.path().join("data"), &data).map_err(|e| e.to_string())?;
    let run_dir = tmp.path().join("run");
    let out = run(&[
        "train",
        "--preset",
        "iemocap",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
    let resolved: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run_dir.join("run_config.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let (t, m) = (&resolved["train"], &resolved["model"]);
    let got = (
        t["epochs"].as_u64(),
        t["lr"].as_f64(),
        t["dropout"].as_f64(),
        t["batch_size"].as_u64(),
        m["d_visual_emotion"].as_u64(),
        m["d_audio_emotion"].as_u64(),
        m["d_text_emotion"].as_u64(),
    );
    ensure(
        got == (Some(80), Some(0.0001), Some(0.1), Some(30), Some(256), Some(100), Some(100)),
        || format!("cli resolved {got:?}"),
    )?;
    Ok("iemocap and meld presets match, including a CLI run's resolved config".into())
}

fn main() {
    let criteria: [(&str, Check); 8] = [
        ("gradient_correctness", gradient_correctness),
        ("normalization_invariants", normalization),
        ("structural_invariants", structural),
        ("learnability", learnability),
        ("ablation_direction", ablation_direction),
        ("metric_oracle", metric_oracle),
        ("determinism", determinism),
        ("preset_fidelity", preset_fidelity),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
