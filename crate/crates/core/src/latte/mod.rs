//! Test-time adaptation of a toy vision-language model with transductive
//! pseudolabels and a loss-level ensemble over prompt templates, plus an
//! entropy-minimization baseline.
//!
//! Shapes follow one convention throughout: embeddings are rows, so a batch
//! of `B` images is `B x d_e` and a template's class texts are `C x d_e`.

mod adapt;
mod calibrate;
mod encoder;
mod templates;

pub use adapt::{
    adapt_batch, latte_objective, latte_targets, tent_adapt_batch, AdaptOutcome, AdaptSet, AdaptationConfig,
    IterationRecord, LatteTargets,
};
pub use calibrate::{calibrate_projections, CalibrationConfig};
pub use encoder::{tokenize, TextEncoderConfig, ToyTextEncoder, ToyVisionEncoder, VisionEncoderConfig};
pub use templates::{TemplateSet, PLACEHOLDER};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{ImageTensor, Rng64};
use crate::numerics::{self, LoraSpec, Matrix, ParamStore, Tape, Var};

/// Default softmax temperature of the zero-shot logits.
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vision: VisionEncoderConfig,
    pub text: TextEncoderConfig,
    pub init_seed: u64,
}

/// Both towers and the single store holding all of their parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionLanguageModel {
    pub store: ParamStore,
    pub vision: ToyVisionEncoder,
    pub text: ToyTextEncoder,
}

impl VisionLanguageModel {
    /// Random frozen weights drawn from `config.init_seed`; every adapter starts
    /// with a zero `B` factor.
    pub fn new(config: &ModelConfig, lora: LoraSpec) -> Result<Self> {
        let mut rng = Rng64::new(config.init_seed);
        let mut store = ParamStore::new();
        let vision = ToyVisionEncoder::new(&mut store, config.vision.clone(), lora, &mut rng)?;
        let text = ToyTextEncoder::new(&mut store, config.text.clone(), lora, &mut rng)?;
        if config.vision.output_dim != config.text.output_dim {
            return Err(Error::arg(format!(
                "vision output dim {} differs from text output dim {}",
                config.vision.output_dim, config.text.output_dim
            )));
        }
        Ok(Self { store, vision, text })
    }
}

/// `B x d_e` unit-norm image embeddings.
pub fn encode_images(model: &VisionLanguageModel, images: &[&ImageTensor]) -> Result<Matrix> {
    let mut tape = Tape::new();
    let z = model.vision.forward(&mut tape, &model.store, images)?;
    Ok(tape.value(z).clone())
}

/// Every template instantiated with every class name, template-major.
pub fn class_prompts(templates: &TemplateSet, class_names: &[String]) -> Result<Vec<String>> {
    if class_names.is_empty() {
        return Err(Error::arg("at least one class name is required"));
    }
    Ok((0..templates.len())
        .flat_map(|q| class_names.iter().map(move |c| templates.instantiate(q, c)))
        .collect())
}

/// Text embeddings of [`class_prompts`] recorded on `tape`, `Q*C x d_e`.
pub fn encode_prompts_on_tape(
    tape: &mut Tape,
    model: &VisionLanguageModel,
    templates: &TemplateSet,
    class_names: &[String],
) -> Result<Var> {
    let prompts = class_prompts(templates, class_names)?;
    model.text.forward(tape, &model.store, &prompts)
}

/// Splits template-major rows into one `c`-row matrix per template.
pub fn split_templates(all: &Matrix, q: usize, c: usize) -> Vec<Matrix> {
    (0..q)
        .map(|t| all.select_rows(&(t * c..(t + 1) * c).collect::<Vec<_>>()))
        .collect()
}

/// One `C x d_e` matrix per template.
pub fn encode_class_texts(
    model: &VisionLanguageModel,
    templates: &TemplateSet,
    class_names: &[String],
) -> Result<Vec<Matrix>> {
    let mut tape = Tape::new();
    let z = encode_prompts_on_tape(&mut tape, model, templates, class_names)?;
    Ok(split_templates(tape.value(z), templates.len(), class_names.len()))
}

/// Mean of the per-template class embeddings, re-normalized.
pub fn average_class_texts(z_t_per_template: &[Matrix]) -> Result<Matrix> {
    let first = z_t_per_template
        .first()
        .ok_or_else(|| Error::arg("at least one template is required"))?;
    let mut sum = Matrix::zeros(first.rows(), first.cols());
    for z in z_t_per_template {
        if z.shape() != first.shape() {
            return Err(Error::arg("per-template class embeddings differ in shape"));
        }
        sum.add_assign(z);
    }
    numerics::l2_normalize_rows(&sum.scale(1.0 / z_t_per_template.len() as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShot {
    /// `B x C` class probabilities.
    pub probabilities: Matrix,
    pub predictions: Vec<usize>,
}

/// Softmax over cosine logits against the template-averaged class texts.
/// Ties go to the lowest class index.
pub fn zero_shot_predict(z_v: &Matrix, z_t_per_template: &[Matrix], tau: f64) -> Result<ZeroShot> {
    let classes = average_class_texts(z_t_per_template)?;
    let logits = z_v.matmul_nt(&classes)?;
    let probabilities = numerics::softmax_rows(&logits, tau)?;
    let predictions = probabilities.argmax_rows();
    Ok(ZeroShot {
        probabilities,
        predictions,
    })
}

/// `softmax((Z_v Z_v^T + Zhat_t Zhat_t^T) / 2)` row-wise at temperature 1.
pub fn transductive_pseudolabels(z_v: &Matrix, zhat_t: &Matrix) -> Result<Matrix> {
    transductive_pseudolabels_with(z_v, zhat_t, 1.0)
}

/// As [`transductive_pseudolabels`] with an explicit softmax temperature.
pub fn transductive_pseudolabels_with(z_v: &Matrix, zhat_t: &Matrix, temperature: f64) -> Result<Matrix> {
    if z_v.rows() != zhat_t.rows() {
        return Err(Error::arg(format!(
            "{} image rows but {} text rows",
            z_v.rows(),
            zhat_t.rows()
        )));
    }
    let s_v = z_v.matmul_nt(z_v)?;
    let s_t = zhat_t.matmul_nt(zhat_t)?;
    let combined = s_v.add(&s_t)?.scale(0.5);
    numerics::softmax_rows(&combined, temperature)
}

/// Cross-entropy of the logits `Z_v Zhat_t^T` against the pseudolabels built
/// from the same embeddings.
pub fn latte_loss_single_template(z_v: &Matrix, zhat_t: &Matrix, tau: f64) -> Result<f64> {
    let targets = transductive_pseudolabels(z_v, zhat_t)?;
    let logits = z_v.matmul_nt(zhat_t)?;
    numerics::cross_entropy_rows(&logits, &targets, tau)
}

/// `sum_q alpha_q L_q`; the weights must sum to one.
pub fn ensemble_loss(per_template_losses: &[f64], weights: &[f64]) -> Result<f64> {
    if per_template_losses.len() != weights.len() {
        return Err(Error::arg(format!(
            "{} losses for {} weights",
            per_template_losses.len(),
            weights.len()
        )));
    }
    templates::check_weights(weights)?;
    Ok(per_template_losses.iter().zip(weights).map(|(l, w)| l * w).sum())
}

/// Mean row entropy of class probabilities.
pub fn tent_entropy_loss(probabilities: &Matrix) -> f64 {
    numerics::mean_entropy(probabilities)
}
