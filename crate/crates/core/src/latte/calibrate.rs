use serde::{Deserialize, Serialize};

use super::{class_prompts, TemplateSet, VisionLanguageModel, DEFAULT_TEMPERATURE};
use crate::error::{Error, Result};
use crate::imagecore::ImageTensor;
use crate::numerics::{adam_step, linear_lora_forward, AdamConfig, Matrix, Tape};

/// Supervised fit of the two output projections on a small labelled set. This
/// is model preparation, not test-time adaptation: it gives the random towers
/// a shared embedding space in which zero-shot prediction works.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    /// Probability mass spread uniformly over the classes in the targets,
    /// which caps the confidence the fit can reach.
    pub label_smoothing: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rate: 1e-2,
            temperature: DEFAULT_TEMPERATURE,
            label_smoothing: 0.0,
        }
    }
}

/// Returns the loss before each step.
pub fn calibrate_projections(
    model: &mut VisionLanguageModel,
    images: &[&ImageTensor],
    labels: &[usize],
    class_names: &[String],
    templates: &TemplateSet,
    config: &CalibrationConfig,
) -> Result<Vec<f64>> {
    if images.len() != labels.len() {
        return Err(Error::arg(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    let classes = class_names.len();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::arg(format!("label {bad} out of range for {classes} classes")));
    }
    let q = templates.len();
    let (vision_features, text_features) = {
        let mut tape = Tape::new();
        let fv = model.vision.features(&mut tape, &model.store, images)?;
        let prompts = class_prompts(templates, class_names)?;
        let ft = model.text.features(&mut tape, &model.store, &prompts)?;
        (tape.value(fv).clone(), tape.value(ft).clone())
    };
    if !(0.0..1.0).contains(&config.label_smoothing) {
        return Err(Error::arg(format!(
            "label smoothing must be in [0, 1), got {}",
            config.label_smoothing
        )));
    }
    let eps = config.label_smoothing;
    let targets = Matrix::from_fn(labels.len(), classes, |i, c| {
        (1.0 - eps) * f64::from(u8::from(labels[i] == c)) + eps / classes as f64
    });
    // template-major rows regrouped per class
    let class_major: Vec<usize> = (0..classes)
        .flat_map(|c| (0..q).map(move |t| t * classes + c))
        .collect();
    let offsets: Vec<usize> = (0..=classes).map(|c| c * q).collect();
    let params = [model.vision.projection, model.text.projection];
    let flags = model.store.trainable_ids();
    model.store.freeze_all();
    model.store.set_trainable(&params, true);
    let adam = AdamConfig::with_lr(config.learning_rate);
    let mut losses = Vec::with_capacity(config.steps);
    let result = (|| {
        for step in 1..=config.steps {
            let mut tape = Tape::new();
            let fv = tape.constant(vision_features.clone());
            let zv = linear_lora_forward(&mut tape, &model.store, fv, model.vision.projection, None, None)?;
            let zv = tape.l2_normalize_rows(zv)?;
            let ft = tape.constant(text_features.clone());
            let zt = linear_lora_forward(&mut tape, &model.store, ft, model.text.projection, None, None)?;
            let zt = tape.l2_normalize_rows(zt)?;
            let zt = tape.gather_rows(zt, &class_major)?;
            let zc = tape.mean_groups(zt, &offsets)?;
            let zc = tape.l2_normalize_rows(zc)?;
            let logits = tape.matmul_nt(zv, zc)?;
            let loss = tape.cross_entropy_rows(logits, &targets, config.temperature)?;
            losses.push(tape.value(loss).item());
            model.store.zero_grads();
            tape.backward(loss, &mut model.store)?;
            adam_step(&mut model.store, &params, &adam, step as u32);
        }
        Ok(())
    })();
    model.store.zero_grads();
    for &id in &params {
        let p = model.store.get_mut(id);
        p.moment1.fill(0.0);
        p.moment2.fill(0.0);
    }
    model.store.freeze_all();
    model.store.set_trainable(&flags, true);
    result.map(|()| losses)
}
