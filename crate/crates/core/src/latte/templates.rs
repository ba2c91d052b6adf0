use std::path::Path;

use crate::error::{Error, Result};

pub const PLACEHOLDER: &str = "{class}";

const DEFAULT_TEMPLATES: &str = include_str!("../../assets/templates.txt");

/// Prompt templates with their loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    templates: Vec<String>,
    weights: Vec<f64>,
}

impl TemplateSet {
    /// Uniform weights.
    pub fn new<S: Into<String>>(templates: impl IntoIterator<Item = S>) -> Result<Self> {
        let templates: Vec<String> = templates.into_iter().map(Into::into).collect();
        let q = templates.len();
        Self::with_weights(templates, vec![1.0 / q.max(1) as f64; q])
    }

    pub fn with_weights(templates: Vec<String>, weights: Vec<f64>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::arg("a template set needs at least one template"));
        }
        if weights.len() != templates.len() {
            return Err(Error::arg(format!(
                "{} weights for {} templates",
                weights.len(),
                templates.len()
            )));
        }
        for t in &templates {
            let n = t.matches(PLACEHOLDER).count();
            if n != 1 {
                return Err(Error::arg(format!(
                    "template {t:?} has {n} placeholders, expected exactly one"
                )));
            }
        }
        check_weights(&weights)?;
        Ok(Self { templates, weights })
    }

    /// The bundled 25 templates.
    pub fn default_set() -> Self {
        Self::parse(DEFAULT_TEMPLATES).expect("bundled templates are valid")
    }

    /// One template per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// First `q` templates with uniform weights.
    pub fn take(&self, q: usize) -> Result<Self> {
        Self::new(self.templates.iter().take(q).cloned())
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn instantiate(&self, q: usize, class_name: &str) -> String {
        self.templates[q].replace(PLACEHOLDER, class_name)
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::default_set()
    }
}

pub(crate) fn check_weights(weights: &[f64]) -> Result<()> {
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::arg("template weights must be finite and non-negative"));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::arg(format!("template weights sum to {sum}, expected 1")));
    }
    Ok(())
}
