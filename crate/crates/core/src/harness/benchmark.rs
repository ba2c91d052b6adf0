use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::evaluate::{next_batch, Tally};
use super::manifest::{load_manifest, DatasetManifest};
use super::stream::{corrupt_stream, CorruptionChain, ItemError};
use crate::error::{Error, Result};
use crate::imagecore::{fnv1a64, load_image, ImageTensor};
use crate::latte::{
    adapt_batch, calibrate_projections, encode_class_texts, encode_images, tent_adapt_batch, zero_shot_predict,
    AdaptOutcome, AdaptationConfig, CalibrationConfig, ModelConfig, TemplateSet, VisionLanguageModel,
};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Source,
    Tent,
    Latte,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Source, Method::Tent, Method::Latte];

    pub fn name(self) -> &'static str {
        match self {
            Method::Source => "source",
            Method::Tent => "tent",
            Method::Latte => "latte",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown method '{s}' (expected source, tent or latte)")))
    }
}

/// Prompt templates: a file path or an inline list. Absent means the bundled set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TemplateSource {
    Inline(Vec<String>),
    File(PathBuf),
}

/// Labelled clean images used to fit the output projections before any run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSetup {
    pub manifest: PathBuf,
    #[serde(default)]
    pub fit: CalibrationConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub adaptation: AdaptationConfig,
    pub model: ModelConfig,
    pub templates: Option<TemplateSource>,
    pub calibration: Option<CalibrationSetup>,
}

impl BenchmarkConfig {
    /// Reads a JSON config; relative paths inside it resolve against the
    /// config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: Self =
            serde_json::from_str(&text).map_err(|e| Error::validation(format!("{}: {e}", path.display())))?;
        let path = std::fs::canonicalize(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().unwrap_or(Path::new(""));
        if let Some(TemplateSource::File(p)) = &mut config.templates {
            *p = dir.join(&*p);
        }
        if let Some(c) = &mut config.calibration {
            c.manifest = dir.join(&c.manifest);
        }
        Ok(config)
    }

    pub fn template_set(&self) -> Result<TemplateSet> {
        match &self.templates {
            None => Ok(TemplateSet::default_set()),
            Some(TemplateSource::Inline(list)) => TemplateSet::new(list.iter().cloned()),
            Some(TemplateSource::File(p)) => TemplateSet::load(p),
        }
    }

    /// Copy with the templates spelled out, so the echo does not depend on a
    /// template file.
    pub fn resolved(&self) -> Result<Self> {
        Ok(Self {
            templates: Some(TemplateSource::Inline(self.template_set()?.templates().to_vec())),
            ..self.clone()
        })
    }

    /// Builds the model and applies the configured calibration.
    pub fn build_model(&self, class_names: &[String]) -> Result<VisionLanguageModel> {
        self.adaptation.validate()?;
        let mut model = VisionLanguageModel::new(&self.model, self.adaptation.lora())?;
        if let Some(cal) = &self.calibration {
            let manifest = load_manifest(&cal.manifest)?;
            if manifest.class_names != class_names {
                return Err(Error::validation(format!(
                    "calibration classes {:?} differ from dataset classes {class_names:?}",
                    manifest.class_names
                )));
            }
            let images = manifest
                .entries
                .iter()
                .map(|e| load_image(manifest.resolve(e)))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&ImageTensor> = images.iter().collect();
            let labels: Vec<usize> = manifest.entries.iter().map(|e| e.label).collect();
            calibrate_projections(&mut model, &refs, &labels, class_names, &self.template_set()?, &cal.fit)?;
        }
        Ok(model)
    }
}

/// Everything a run depends on besides the manifest bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkPlan {
    pub manifest: PathBuf,
    pub corruptions: Vec<CorruptionChain>,
    pub methods: Vec<Method>,
    pub config: BenchmarkConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub corruption: String,
    pub method: Method,
    pub accuracy: Option<f64>,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub images: usize,
    /// Mean over batches of the adaptation objective at each iteration.
    pub loss_trace: Vec<f64>,
    pub item_errors: Vec<ItemError>,
    pub error: Option<String>,
    pub wall_clock_seconds: f64,
}

impl CellReport {
    pub fn failed(&self) -> bool {
        self.error.is_some() || !self.item_errors.is_empty()
    }

    /// Equality of everything except timing.
    pub fn same_result(&self, other: &CellReport) -> bool {
        Self {
            wall_clock_seconds: 0.0,
            ..self.clone()
        } == Self {
            wall_clock_seconds: 0.0,
            ..other.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Replayable echo of the run, with templates inlined.
    pub plan: BenchmarkPlan,
    pub global_seed: u64,
    /// FNV-1a of the manifest file bytes, hex.
    pub manifest_digest: String,
    pub class_names: Vec<String>,
    pub cells: Vec<CellReport>,
}

impl RunReport {
    pub fn has_failures(&self) -> bool {
        self.cells.iter().any(CellReport::failed)
    }

    pub fn same_results(&self, other: &RunReport) -> bool {
        self.plan == other.plan
            && self.manifest_digest == other.manifest_digest
            && self.cells.len() == other.cells.len()
            && self.cells.iter().zip(&other.cells).all(|(a, b)| a.same_result(b))
    }

    pub fn cell(&self, corruption: &str, method: Method) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.corruption == corruption && c.method == method)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::validation(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn manifest_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:016x}", fnv1a64(&bytes)))
}

struct MethodState {
    method: Method,
    model: VisionLanguageModel,
    tally: Tally,
    traces: Vec<Vec<f64>>,
    error: Option<String>,
    seconds: f64,
}

impl MethodState {
    fn step(
        &mut self,
        images: &[&ImageTensor],
        labels: &[usize],
        class_names: &[String],
        templates: &TemplateSet,
        config: &AdaptationConfig,
    ) {
        if self.error.is_some() {
            return;
        }
        let start = Instant::now();
        let outcome = match self.method {
            Method::Source => source_predict(&self.model, images, class_names, templates, config),
            Method::Tent => tent_adapt_batch(&mut self.model, images, class_names, templates, config),
            Method::Latte => adapt_batch(&mut self.model, images, class_names, templates, config),
        };
        let recorded = outcome.and_then(|o| {
            self.traces.push(o.trace.iter().map(|r| r.loss).collect());
            self.tally.record(labels, &o.predictions)
        });
        if let Err(e) = recorded {
            self.error = Some(e.to_string());
        }
        self.seconds += start.elapsed().as_secs_f64();
    }

    fn report(self, corruption: &str, item_errors: Vec<ItemError>) -> CellReport {
        let evaluation = match &self.error {
            Some(_) => None,
            None => self.tally.finish(Vec::new()).ok(),
        };
        let iterations = self.traces.iter().map(Vec::len).max().unwrap_or(0);
        let loss_trace = (0..iterations)
            .map(|i| {
                let vals: Vec<f64> = self.traces.iter().filter_map(|t| t.get(i).copied()).collect();
                vals.iter().sum::<f64>() / vals.len() as f64
            })
            .collect();
        let error = self
            .error
            .or_else(|| evaluation.is_none().then(|| "no images were evaluated".to_string()));
        CellReport {
            corruption: corruption.to_string(),
            method: self.method,
            accuracy: evaluation.as_ref().map(|e| e.accuracy),
            per_class_accuracy: evaluation.map(|e| e.per_class_accuracy).unwrap_or_default(),
            images: self.tally.count(),
            loss_trace,
            item_errors,
            error,
            wall_clock_seconds: self.seconds,
        }
    }
}

fn source_predict(
    model: &VisionLanguageModel,
    images: &[&ImageTensor],
    class_names: &[String],
    templates: &TemplateSet,
    config: &AdaptationConfig,
) -> Result<AdaptOutcome> {
    let z_v = encode_images(model, images)?;
    let z_t = encode_class_texts(model, templates, class_names)?;
    let predictions = zero_shot_predict(&z_v, &z_t, config.temperature)?.predictions;
    Ok(AdaptOutcome {
        source_predictions: predictions.clone(),
        predictions,
        trace: Vec::new(),
    })
}

fn run_corruption(
    manifest: &DatasetManifest,
    chain: &CorruptionChain,
    methods: &[Method],
    model: &VisionLanguageModel,
    templates: &TemplateSet,
    config: &AdaptationConfig,
) -> Vec<CellReport> {
    let name = chain.name();
    let mut states: Vec<MethodState> = methods
        .iter()
        .map(|&method| MethodState {
            method,
            model: model.clone(),
            tally: Tally::new(manifest.num_classes()),
            traces: Vec::new(),
            error: None,
            seconds: 0.0,
        })
        .collect();
    let mut item_errors = Vec::new();
    match corrupt_stream(manifest, chain.clone()) {
        Err(e) => {
            for s in &mut states {
                s.error = Some(e.to_string());
            }
        }
        Ok(mut stream) => loop {
            let batch = next_batch(&mut stream, config.batch_size, &mut item_errors);
            if batch.is_empty() {
                break;
            }
            let images: Vec<&ImageTensor> = batch.iter().map(|s| &s.image).collect();
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
            for s in &mut states {
                s.step(&images, &labels, &manifest.class_names, templates, config);
            }
        },
    }
    states
        .into_iter()
        .map(|s| s.report(&name, item_errors.clone()))
        .collect()
}

/// Evaluates every corruption × method cell. Corruptions run in parallel;
/// within one, batches follow manifest order. A failing cell is recorded and
/// the rest of the grid continues. Errors in the setup (config, templates,
/// calibration) abort the run.
pub fn run_benchmark(manifest: &DatasetManifest, plan: &BenchmarkPlan, global_seed: u64) -> Result<RunReport> {
    if plan.methods.is_empty() || plan.corruptions.is_empty() {
        return Err(Error::validation(
            "a benchmark needs at least one corruption and one method",
        ));
    }
    let config = plan.config.resolved()?;
    let templates = config.template_set()?;
    let model = config.build_model(&manifest.class_names)?;
    let cells = par::map(&plan.corruptions, |chain| {
        run_corruption(manifest, chain, &plan.methods, &model, &templates, &config.adaptation)
    })
    .into_iter()
    .flatten()
    .collect();
    Ok(RunReport {
        plan: BenchmarkPlan { config, ..plan.clone() },
        global_seed,
        manifest_digest: manifest_digest(&plan.manifest)?,
        class_names: manifest.class_names.clone(),
        cells,
    })
}

/// Re-runs a report from its own echo. Fails if the manifest bytes changed.
pub fn replay(report: &RunReport) -> Result<RunReport> {
    let digest = manifest_digest(&report.plan.manifest)?;
    if digest != report.manifest_digest {
        return Err(Error::validation(format!(
            "manifest {} changed since the report was written (digest {digest}, expected {})",
            report.plan.manifest.display(),
            report.manifest_digest
        )));
    }
    let manifest = load_manifest(&report.plan.manifest)?;
    run_benchmark(&manifest, &report.plan, report.global_seed)
}
