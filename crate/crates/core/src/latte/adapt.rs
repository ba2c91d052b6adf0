use serde::{Deserialize, Serialize};

use super::{
    average_class_texts, encode_class_texts, encode_prompts_on_tape, split_templates, transductive_pseudolabels_with,
    zero_shot_predict, TemplateSet, VisionLanguageModel, DEFAULT_TEMPERATURE,
};
use crate::error::{Error, Result};
use crate::imagecore::ImageTensor;
use crate::numerics::{adam_step, AdamConfig, LoraSpec, Matrix, ParamId, Tape, Var};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptSet {
    Lora,
    LayerNorms,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub temperature: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub adapt_set: AdaptSet,
    pub episodic_reset: bool,
    /// Softmax temperature of the pseudolabel similarities.
    pub pseudolabel_temperature: f64,
    /// Build each template's text targets from that template's own argmax
    /// instead of the template-averaged prediction.
    pub per_template_predictions: bool,
    /// Also adapt the text encoder's layer-norm affines.
    pub adapt_text_norms: bool,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            learning_rate: 1e-3,
            batch_size: 128,
            temperature: DEFAULT_TEMPERATURE,
            lora_rank: 2,
            lora_alpha: 1.0,
            adapt_set: AdaptSet::Both,
            episodic_reset: true,
            pseudolabel_temperature: 1.0,
            per_template_predictions: false,
            adapt_text_norms: false,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !(self.pseudolabel_temperature > 0.0) {
            return Err(Error::validation("temperatures must be > 0"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::validation("learning_rate must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be >= 1"));
        }
        if self.lora_rank == 0 {
            return Err(Error::validation("lora_rank must be >= 1"));
        }
        Ok(())
    }

    pub fn lora(&self) -> LoraSpec {
        LoraSpec {
            rank: self.lora_rank,
            alpha: self.lora_alpha,
        }
    }

    /// Parameters updated by LATTE on `model`.
    pub fn adapted_params(&self, model: &VisionLanguageModel) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if matches!(self.adapt_set, AdaptSet::Lora | AdaptSet::Both) {
            ids.extend(model.vision.lora_params());
        }
        if matches!(self.adapt_set, AdaptSet::LayerNorms | AdaptSet::Both) {
            ids.extend(model.vision.norm_params());
            if self.adapt_text_norms {
                ids.extend(model.text.norm_params());
            }
        }
        ids
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Objective before this iteration's update.
    pub loss: f64,
    /// Predictions that differ from the source model's at this iteration.
    pub changed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptOutcome {
    pub source_predictions: Vec<usize>,
    pub predictions: Vec<usize>,
    pub trace: Vec<IterationRecord>,
}

/// Pseudolabel targets of one iteration, held fixed while differentiating.
#[derive(Debug, Clone, PartialEq)]
pub struct LatteTargets {
    /// Template-averaged prediction per image.
    pub predictions: Vec<usize>,
    /// Per template: the class whose text stands in for each image.
    pub template_predictions: Vec<Vec<usize>>,
    /// Per template: `B x B` pseudolabels.
    pub pseudolabels: Vec<Matrix>,
}

pub fn latte_targets(z_v: &Matrix, z_t_per_template: &[Matrix], config: &AdaptationConfig) -> Result<LatteTargets> {
    let predictions = zero_shot_predict(z_v, z_t_per_template, config.temperature)?.predictions;
    let per_template = par::map(z_t_per_template, |z_t| -> Result<(Vec<usize>, Matrix)> {
        let preds = if config.per_template_predictions {
            z_v.matmul_nt(z_t)?.argmax_rows()
        } else {
            predictions.clone()
        };
        let zhat = z_t.select_rows(&preds);
        let p = transductive_pseudolabels_with(z_v, &zhat, config.pseudolabel_temperature)?;
        Ok((preds, p))
    });
    let (template_predictions, pseudolabels) = per_template
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    Ok(LatteTargets {
        predictions,
        template_predictions,
        pseudolabels,
    })
}

/// Weighted sum over templates of the cross-entropy between `z_v Zhat_t^T`
/// and the fixed pseudolabels. `z_t` stacks every template's class texts,
/// template-major, `classes` rows per template. Returns the loss node and the
/// per-template values in template order.
pub fn latte_objective(
    tape: &mut Tape,
    z_v: Var,
    z_t: Var,
    classes: usize,
    targets: &LatteTargets,
    weights: &[f64],
    tau: f64,
) -> Result<(Var, Vec<f64>)> {
    let q = targets.template_predictions.len();
    if weights.len() != q || tape.value(z_t).rows() != q * classes {
        return Err(Error::arg(format!(
            "{} weights and {} text rows for {q} templates of {classes} classes",
            weights.len(),
            tape.value(z_t).rows()
        )));
    }
    let mut terms = Vec::with_capacity(q);
    let mut values = Vec::with_capacity(q);
    for (t, (preds, p)) in targets
        .template_predictions
        .iter()
        .zip(&targets.pseudolabels)
        .enumerate()
    {
        let rows: Vec<usize> = preds.iter().map(|&c| t * classes + c).collect();
        let zhat = tape.gather_rows(z_t, &rows)?;
        let logits = tape.matmul_nt(z_v, zhat)?;
        let l = tape.cross_entropy_rows(logits, p, tau)?;
        values.push(tape.value(l).item());
        terms.push((l, weights[t]));
    }
    Ok((tape.weighted_sum(&terms)?, values))
}

fn count_changed(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Runs `step` for each iteration with the chosen parameters unfrozen, then
/// predicts; restores the model afterwards when the reset is episodic.
fn adapt_loop(
    model: &mut VisionLanguageModel,
    images: &[&ImageTensor],
    class_names: &[String],
    templates: &TemplateSet,
    config: &AdaptationConfig,
    params: Vec<ParamId>,
    mut objective: impl FnMut(&mut Tape, Var, Var, &[Matrix]) -> Result<Var>,
) -> Result<AdaptOutcome> {
    config.validate()?;
    if images.is_empty() {
        return Err(Error::arg("cannot adapt on an empty batch"));
    }
    let snapshot = model.store.clone();
    for &id in &params {
        let p = model.store.get_mut(id);
        p.moment1.fill(0.0);
        p.moment2.fill(0.0);
    }
    model.store.freeze_all();
    model.store.set_trainable(&params, true);
    let adam = AdamConfig::with_lr(config.learning_rate);
    let (q, c) = (templates.len(), class_names.len());

    let result = (|| {
        let mut source_predictions = None;
        let mut trace = Vec::with_capacity(config.iterations);
        for it in 0..config.iterations {
            let mut tape = Tape::new();
            let z_v = model.vision.forward(&mut tape, &model.store, images)?;
            let z_t = encode_prompts_on_tape(&mut tape, model, templates, class_names)?;
            let z_t_mats = split_templates(tape.value(z_t), q, c);
            let preds = zero_shot_predict(tape.value(z_v), &z_t_mats, config.temperature)?.predictions;
            let source = source_predictions.get_or_insert_with(|| preds.clone());
            let changed = count_changed(source, &preds);
            let loss = objective(&mut tape, z_v, z_t, &z_t_mats)?;
            trace.push(IterationRecord {
                iteration: it,
                loss: tape.value(loss).item(),
                changed,
            });
            model.store.zero_grads();
            tape.backward(loss, &mut model.store)?;
            adam_step(&mut model.store, &params, &adam, it as u32 + 1);
        }
        let z_v = super::encode_images(model, images)?;
        let z_t = encode_class_texts(model, templates, class_names)?;
        let predictions = zero_shot_predict(&z_v, &z_t, config.temperature)?.predictions;
        let source_predictions = source_predictions.unwrap_or_else(|| predictions.clone());
        Ok(AdaptOutcome {
            source_predictions,
            predictions,
            trace,
        })
    })();

    if config.episodic_reset {
        model.store = snapshot;
    } else {
        model.store.freeze_all();
        model.store.set_trainable(&snapshot.trainable_ids(), true);
    }
    result
}

/// LATTE on one batch: per iteration, pseudolabel the batch, take one Adam
/// step on the template-weighted cross-entropy, and finally predict with the
/// adapted model.
pub fn adapt_batch(
    model: &mut VisionLanguageModel,
    images: &[&ImageTensor],
    class_names: &[String],
    templates: &TemplateSet,
    config: &AdaptationConfig,
) -> Result<AdaptOutcome> {
    let params = config.adapted_params(model);
    let weights = templates.weights().to_vec();
    let classes = class_names.len();
    adapt_loop(
        model,
        images,
        class_names,
        templates,
        config,
        params,
        |tape, z_v, z_t, z_t_mats| {
            let targets = latte_targets(tape.value(z_v), z_t_mats, config)?;
            Ok(latte_objective(tape, z_v, z_t, classes, &targets, &weights, config.temperature)?.0)
        },
    )
}

/// Entropy-minimization baseline on the vision layer-norm affines.
pub fn tent_adapt_batch(
    model: &mut VisionLanguageModel,
    images: &[&ImageTensor],
    class_names: &[String],
    templates: &TemplateSet,
    config: &AdaptationConfig,
) -> Result<AdaptOutcome> {
    let params = model.vision.norm_params();
    adapt_loop(
        model,
        images,
        class_names,
        templates,
        config,
        params,
        |tape, z_v, _, z_t_mats| {
            let classes = tape.constant(average_class_texts(z_t_mats)?);
            let logits = tape.matmul_nt(z_v, classes)?;
            let p = tape.softmax_rows(logits, config.temperature)?;
            Ok(tape.entropy_rows(p))
        },
    )
}
