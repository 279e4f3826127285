//! Whole-model gradient check against central finite differences, reported
//! per parameter group.

use serde::Serialize;

use crate::capsule::ModalitySet;
use crate::config::ModelConfig;
use crate::data::{generate_synthetic, Dialogue, FeatureDims, SynthSpec};
use crate::error::{Error, Result};
use crate::model::{EmoCaps, ForwardOptions};
use crate::tensor::gradcheck::{analytic_gradients, compare_with_central_differences};
use crate::tensor::{Graph, Rng, Var};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_STEP: f64 = 3e-3;
/// Seed used by the CLI and tests for [`toy_problem`].
pub const DEFAULT_TOY_SEED: u64 = 1;

/// Small model and data for the check.
#[derive(Clone, Debug)]
pub struct ToyProblem {
    pub model: EmoCaps,
    pub dialogues: Vec<Dialogue>,
}

/// `d_model = 16`, emotion extents 8, `d_h = 8`, four labels, two dialogues
/// of three utterances with three feature rows each.
pub fn toy_problem(seed: u64) -> Result<ToyProblem> {
    let dims = FeatureDims {
        text: 16,
        audio: 16,
        visual: 16,
    };
    let mut cfg = ModelConfig::new(dims, 4);
    cfg.d_text_emotion = 8;
    cfg.d_audio_emotion = 8;
    cfg.d_visual_emotion = 8;
    cfg.d_hidden = 8;
    cfg.d_mlp = Some(8);
    let data = generate_synthetic(&SynthSpec {
        n_dialogues: 2,
        min_utterances: 3,
        max_utterances: 3,
        n_labels: 4,
        dims,
        seq_len: 3,
        noise: 1.0,
        seed,
        ..SynthSpec::default()
    })?;
    Ok(ToyProblem {
        model: EmoCaps::new(cfg, seed)?,
        dialogues: data.dialogues,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ComponentReport {
    pub name: String,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries: usize,
    /// Entries checked with a reduced step to avoid a ReLU kink.
    pub reduced_steps: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelGradCheck {
    pub components: Vec<ComponentReport>,
    pub tolerance: f64,
}

impl ModelGradCheck {
    pub fn passed(&self) -> bool {
        self.components.iter().all(|c| c.max_rel_error < self.tolerance)
    }

    pub fn worst(&self) -> Option<&ComponentReport> {
        self.components
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Test hook: add 1 to one analytic gradient entry before comparing.
    pub corrupt: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            corrupt: false,
        }
    }
}

/// Summed eval-mode cross-entropy over `dialogues`, checked for every
/// parameter of `model`.
pub fn check_model(model: &EmoCaps, dialogues: &[Dialogue], opts: &GradCheckOptions) -> Result<ModelGradCheck> {
    if dialogues.is_empty() {
        return Err(Error::Usage("gradient check needs at least one dialogue".into()));
    }
    // The objective reads parameters through the graph, so a copy of the
    // model supplies structure while the original store is perturbed.
    let structure = model.clone();
    let mut store = model.store().clone();
    let objective = |g: &mut Graph<'_>| -> Result<Var> {
        let mut total: Option<Var> = None;
        let mut rng = Rng::new(0);
        for d in dialogues {
            let out = structure.forward(g, d, &ForwardOptions::eval(ModalitySet::ALL), &mut rng)?;
            let loss = structure.loss(g, &out, d)?;
            total = Some(match total {
                None => loss,
                Some(t) => g.add(t, loss)?,
            });
        }
        Ok(total.expect("nonempty"))
    };
    let mut analytic = analytic_gradients(&store, &objective)?;
    let groups = model.param_groups();
    if opts.corrupt {
        let id = groups[0].1[0];
        let mut t = analytic.get(id).cloned().unwrap_or_else(|| store.get(id).clone());
        t.data_mut()[0] += 1.0;
        analytic.set(id, t);
    }
    let mut components = Vec::with_capacity(groups.len());
    for (name, ids) in groups {
        let r = compare_with_central_differences(&mut store, &ids, opts.step, &objective, &analytic)?;
        components.push(ComponentReport {
            name: name.to_string(),
            max_rel_error: r.max_rel_error,
            worst: r.worst,
            entries: r.entries_checked,
            reduced_steps: r.reduced_steps,
        });
    }
    Ok(ModelGradCheck {
        components,
        tolerance: opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_shapes() {
        let toy = toy_problem(0).unwrap();
        assert_eq!(toy.dialogues.len(), 2);
        assert!(toy.dialogues.iter().all(|d| d.len() == 3));
        assert_eq!(toy.model.layout().extent(), 16 + 8 + 8 + 8);
        assert_eq!(toy.model.param_groups().len(), 5);
    }

    #[test]
    fn toy_model_passes_and_corruption_is_caught() {
        let toy = toy_problem(DEFAULT_TOY_SEED).unwrap();
        let report = check_model(&toy.model, &toy.dialogues, &GradCheckOptions::default()).unwrap();
        assert!(report.passed(), "{:?}", report.worst());
        let bad = check_model(
            &toy.model,
            &toy.dialogues,
            &GradCheckOptions {
                corrupt: true,
                ..GradCheckOptions::default()
            },
        )
        .unwrap();
        assert!(!bad.passed());
        assert_eq!(bad.worst().unwrap().name, "emoformer.audio");
    }
}
