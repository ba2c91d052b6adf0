#![allow(dead_code)]

use std::path::Path;

use histobench::harness::{write_dataset, DatasetManifest};
use histobench::latte::{
    class_prompts, latte_objective, latte_targets, AdaptationConfig, ModelConfig, TemplateSet, VisionLanguageModel,
};
use histobench::numerics::{grad_check, randn, GradCheckOptions, GradCheckReport, Tape};
use histobench::synthetic::{class_names, texture_dataset, TextureParams};
use histobench::{ImageTensor, Rng64};

/// Writes `count` synthetic textures as PNGs with a manifest under `dir`.
pub fn texture_manifest(dir: &Path, count: usize, seed: u64) -> DatasetManifest {
    let params = TextureParams {
        size: 32,
        ..TextureParams::default()
    };
    let samples = texture_dataset(count, &params, seed, "img").unwrap();
    write_dataset(dir, &class_names(), samples.into_iter().map(Into::into)).unwrap()
}

pub fn small_images(count: usize, size: usize, seed: u64) -> Vec<ImageTensor> {
    let params = TextureParams {
        size,
        ..TextureParams::default()
    };
    texture_dataset(count, &params, seed, "x")
        .unwrap()
        .into_iter()
        .map(|s| s.image)
        .collect()
}

pub fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

/// Central-difference check of the complete objective: image and prompt
/// encoders, pseudolabels held fixed, per-template cross-entropies and their
/// weighted sum. LoRA `B` factors are randomized so every adapter gradient is
/// nonzero.
pub fn full_pipeline_grad_check(
    images: usize,
    classes: &[&str],
    templates: usize,
    opts: &GradCheckOptions,
) -> GradCheckReport {
    let config = AdaptationConfig::default();
    let mut model = VisionLanguageModel::new(&ModelConfig::default(), config.lora()).unwrap();
    let mut rng = Rng64::new(99);
    for id in model.vision.lora_params() {
        if model.store.name(id).ends_with("lora_b") {
            let (r, c) = model.store.value(id).shape();
            model.store.get_mut(id).value = randn(&mut rng, r, c, 0.05);
        }
    }
    let imgs = small_images(images, 16, 5);
    let refs: Vec<&ImageTensor> = imgs.iter().collect();
    let names = names(classes);
    let set = TemplateSet::default_set().take(templates).unwrap();
    let prompts = class_prompts(&set, &names).unwrap();

    let mut tape = Tape::new();
    let z_v = model.vision.forward(&mut tape, &model.store, &refs).unwrap();
    let z_t = model.text.forward(&mut tape, &model.store, &prompts).unwrap();
    let mats = histobench::latte::split_templates(tape.value(z_t), templates, names.len());
    let targets = latte_targets(tape.value(z_v), &mats, &config).unwrap();

    let mut ids = model.vision.lora_params();
    ids.extend(model.vision.norm_params());
    model.store.set_trainable(&ids, true);
    let (vision, text) = (model.vision.clone(), model.text.clone());
    let weights = set.weights().to_vec();
    let run = |store: &mut histobench::numerics::ParamStore| {
        let mut tape = Tape::new();
        let z_v = vision.forward(&mut tape, store, &refs)?;
        let z_t = text.forward(&mut tape, store, &prompts)?;
        let (loss, _) = latte_objective(&mut tape, z_v, z_t, names.len(), &targets, &weights, config.temperature)?;
        tape.backward(loss, store)?;
        Ok(tape.value(loss).item())
    };
    grad_check(&mut model.store, &ids, run, opts).unwrap()
}
