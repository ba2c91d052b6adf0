use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, ManifestEntry};
use crate::corruption::{CorruptionKind, CorruptionSpec};
use crate::error::{Error, Result};
use crate::imagecore::{load_image, ImageTensor};
use crate::par;

/// Items loaded and corrupted together, in parallel, ahead of consumption.
const PREFETCH: usize = 16;

/// Corruptions applied in sequence. Step `i` draws from `global_seed + i` so
/// the steps use independent streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CorruptionChain {
    pub steps: Vec<CorruptionSpec>,
}

impl CorruptionChain {
    /// `kinds` joined by `+`, e.g. `stain-heavy+gaussian-noise`, all at their
    /// default severities.
    pub fn parse(kinds: &str, global_seed: u64) -> Result<Self> {
        let steps = kinds
            .split('+')
            .enumerate()
            .map(|(i, k)| {
                let kind = CorruptionKind::from_str(k.trim())?;
                Ok(CorruptionSpec::new(kind, global_seed.wrapping_add(i as u64)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { steps })
    }

    pub fn name(&self) -> String {
        self.steps.iter().map(|s| s.kind.name()).collect::<Vec<_>>().join("+")
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::validation("a corruption chain needs at least one step"));
        }
        self.steps.iter().try_for_each(CorruptionSpec::validate)
    }

    pub fn apply(&self, image: &ImageTensor, image_id: &str) -> Result<ImageTensor> {
        let mut out = image.clone();
        for step in &self.steps {
            out = step.apply(&out, image_id)?;
        }
        Ok(out)
    }
}

impl From<CorruptionSpec> for CorruptionChain {
    fn from(spec: CorruptionSpec) -> Self {
        Self { steps: vec![spec] }
    }
}

impl fmt::Display for CorruptionChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: ImageTensor,
    pub label: usize,
}

impl From<crate::synthetic::SyntheticSample> for Sample {
    fn from(s: crate::synthetic::SyntheticSample) -> Self {
        Self {
            id: s.id,
            image: s.image,
            label: s.label,
        }
    }
}

/// An image that could not be loaded or corrupted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemError {
    pub id: String,
    pub message: String,
}

pub type StreamItem = std::result::Result<Sample, ItemError>;

/// Lazily loads and corrupts manifest entries in manifest order.
pub struct CorruptStream<'a> {
    manifest: &'a DatasetManifest,
    chain: CorruptionChain,
    next: usize,
    ready: VecDeque<StreamItem>,
}

impl CorruptStream<'_> {
    fn load(&self, entry: &ManifestEntry) -> StreamItem {
        let fail = |e: Error| ItemError {
            id: entry.id.clone(),
            message: e.to_string(),
        };
        let image = load_image(self.manifest.resolve(entry)).map_err(fail)?;
        let image = self.chain.apply(&image, &entry.id).map_err(fail)?;
        Ok(Sample {
            id: entry.id.clone(),
            image,
            label: entry.label,
        })
    }
}

impl Iterator for CorruptStream<'_> {
    type Item = StreamItem;

    fn next(&mut self) -> Option<StreamItem> {
        if self.ready.is_empty() && self.next < self.manifest.entries.len() {
            let end = (self.next + PREFETCH).min(self.manifest.entries.len());
            let entries = &self.manifest.entries[self.next..end];
            let items = par::map(entries, |e| self.load(e));
            self.ready.extend(items);
            self.next = end;
        }
        self.ready.pop_front()
    }
}

/// Streams `(id, corrupted image, label)`; each image is corrupted with the
/// per-image seed derived from its id. Load failures surface as item errors
/// and the stream continues.
pub fn corrupt_stream(manifest: &DatasetManifest, chain: impl Into<CorruptionChain>) -> Result<CorruptStream<'_>> {
    let chain = chain.into();
    chain.validate()?;
    Ok(CorruptStream {
        manifest,
        chain,
        next: 0,
        ready: VecDeque::new(),
    })
}
