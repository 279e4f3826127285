//! Mini-batch training, evaluation and modality ablations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::capsule::ModalitySet;
use crate::config::TrainConfig;
use crate::context::predict;
use crate::data::{Dialogue, LabelSet};
use crate::error::{Error, Result};
use crate::metrics::{EvalReport, ProbabilityRow};
use crate::model::{EmoCaps, ForwardOptions};
use crate::tensor::{clip_global_norm, Adam, AdamConfig, Gradients, ParamStore, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Training loss per utterance, averaged over the epoch.
    pub mean_loss: f64,
    pub dev_weighted_f1: Option<f64>,
}

impl EpochLog {
    /// `epoch=3 mean_loss=0.41 dev_weighted_f1=0.87`
    pub fn to_line(&self) -> String {
        let dev = self
            .dev_weighted_f1
            .map_or_else(|| "na".to_string(), |f| f.to_string());
        format!("epoch={} mean_loss={} dev_weighted_f1={dev}", self.epoch, self.mean_loss)
    }
}

#[derive(Clone, Debug)]
pub struct BestEpoch {
    pub epoch: usize,
    pub dev_weighted_f1: f64,
    pub params: ParamStore,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// Parameters from the epoch with the highest dev F1, when a dev set was given.
    pub best: Option<BestEpoch>,
}

/// Run `f` on a pool of `threads` workers.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))?;
    Ok(pool.install(f))
}

struct DialogueGrad {
    loss: f64,
    utterances: usize,
    grads: Gradients,
}

fn dialogue_gradient(
    model: &EmoCaps,
    dialogue: &Dialogue,
    opts: &ForwardOptions,
    mut rng: Rng,
) -> Result<DialogueGrad> {
    let mut g = model.graph();
    let out = model.forward(&mut g, dialogue, opts, &mut rng)?;
    let loss = model.loss(&mut g, &out, dialogue)?;
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Ok(DialogueGrad {
            loss: value,
            utterances: dialogue.len(),
            grads: Gradients::empty(model.store()),
        });
    }
    g.backward(loss)?;
    Ok(DialogueGrad {
        loss: value,
        utterances: dialogue.len(),
        grads: g.param_grads(),
    })
}

/// Train `model` in place. Batches are `cfg.batch_size` dialogues; gradients
/// are summed in dialogue order and averaged over the batch's utterances.
pub fn train(
    model: &mut EmoCaps,
    train_set: &[Dialogue],
    dev_set: &[Dialogue],
    cfg: &TrainConfig,
    keep: ModalitySet,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    for d in train_set.iter().chain(dev_set) {
        d.labels()?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} worker threads: {e}", cfg.threads)))?;
    let mut adam = Adam::new(
        model.store(),
        AdamConfig {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        },
    );
    let opts = ForwardOptions::train(keep, cfg.dropout);
    let root = Rng::new(cfg.seed);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<BestEpoch> = None;
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        let epoch_rng = root.fork(epoch as u64);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        epoch_rng.fork(0).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut epoch_utterances = 0usize;

        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            step += 1;
            let m: &EmoCaps = model;
            let results: Vec<Result<DialogueGrad>> = pool.install(|| {
                batch
                    .par_iter()
                    .enumerate()
                    .map(|(k, &i)| {
                        let rng = epoch_rng.fork(1 + (b * cfg.batch_size + k) as u64);
                        dialogue_gradient(m, &train_set[i], &opts, rng)
                    })
                    .collect()
            });
            let mut grads = Gradients::zeros(model.store());
            let mut batch_utterances = 0;
            for (r, &i) in results.into_iter().zip(batch) {
                let r = r?;
                if !r.loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss {} at epoch {epoch} step {step} (dialogue {})",
                        r.loss, train_set[i].id
                    )));
                }
                epoch_loss += r.loss;
                batch_utterances += r.utterances;
                grads.accumulate(&r.grads);
            }
            epoch_utterances += batch_utterances;
            grads.scale(1.0 / batch_utterances as f64);
            let norm = match cfg.clip_norm {
                Some(c) => clip_global_norm(&mut grads, c),
                None => grads.global_norm(),
            };
            if !norm.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient norm at epoch {epoch} step {step}"
                )));
            }
            adam.step(model.store_mut(), &grads)?;
        }

        let dev_weighted_f1 = if dev_set.is_empty() {
            None
        } else {
            let labels = LabelSet::numbered(model.config().n_labels)?;
            let m: &EmoCaps = model;
            let report = pool.install(|| evaluate(m, dev_set, &labels, keep))?;
            Some(report.weighted_f1)
        };
        if let Some(f1) = dev_weighted_f1 {
            if best.as_ref().is_none_or(|b| f1 > b.dev_weighted_f1) {
                best = Some(BestEpoch {
                    epoch,
                    dev_weighted_f1: f1,
                    params: model.store().clone(),
                });
            }
        }
        let entry = EpochLog {
            epoch,
            mean_loss: epoch_loss / epoch_utterances as f64,
            dev_weighted_f1,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { log, best })
}

/// Eval-mode predictions for every utterance, scored against the gold labels.
pub fn evaluate(
    model: &EmoCaps,
    dialogues: &[Dialogue],
    labels: &LabelSet,
    keep: ModalitySet,
) -> Result<EvalReport> {
    if labels.len() != model.config().n_labels {
        return Err(Error::Config(format!(
            "label set has {} names, model predicts {}",
            labels.len(),
            model.config().n_labels
        )));
    }
    for d in dialogues {
        d.labels()?;
    }
    let rows = predict_dialogues(model, dialogues, keep)?;
    let gold: Vec<usize> = rows.iter().map(|r| r.gold.expect("checked above")).collect();
    let predicted: Vec<usize> = rows.iter().map(|r| r.predicted).collect();
    let mut report = EvalReport::from_predictions(&gold, &predicted, labels)?;
    report.probabilities = rows;
    Ok(report)
}

/// Probability rows for every utterance; labels may be absent.
pub fn predict_dialogues(
    model: &EmoCaps,
    dialogues: &[Dialogue],
    keep: ModalitySet,
) -> Result<Vec<ProbabilityRow>> {
    let per_dialogue: Vec<Result<Vec<ProbabilityRow>>> = dialogues
        .par_iter()
        .map(|d| {
            let probs = model.predict_proba(d, keep)?;
            Ok(d.utterances
                .iter()
                .zip(probs)
                .map(|(u, p)| ProbabilityRow {
                    dialogue: d.id.clone(),
                    utterance: u.id.clone(),
                    gold: u.label,
                    predicted: predict(&p),
                    probs: p,
                })
                .collect())
        })
        .collect();
    let mut rows = Vec::new();
    for r in per_dialogue {
        rows.extend(r?);
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub modalities: ModalitySet,
    /// Test weighted F1 of the model after the last epoch.
    pub weighted_f1: f64,
    /// Test weighted F1 of the best-dev epoch, when a dev set was given.
    pub best_dev_weighted_f1: Option<f64>,
}

/// Train one fresh model per modality setting and score it on `test_set`.
pub fn run_ablation(
    factory: impl Fn() -> Result<EmoCaps>,
    train_set: &[Dialogue],
    dev_set: &[Dialogue],
    test_set: &[Dialogue],
    labels: &LabelSet,
    settings: &[ModalitySet],
    cfg: &TrainConfig,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(settings.len());
    for &keep in settings {
        let mut model = factory()?;
        let outcome = train(&mut model, train_set, dev_set, cfg, keep, |_| {})?;
        let weighted_f1 = evaluate(&model, test_set, labels, keep)?.weighted_f1;
        let best_dev_weighted_f1 = match outcome.best {
            Some(best) => {
                *model.store_mut() = best.params;
                Some(evaluate(&model, test_set, labels, keep)?.weighted_f1)
            }
            None => None,
        };
        let row = AblationRow {
            modalities: keep,
            weighted_f1,
            best_dev_weighted_f1,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}
