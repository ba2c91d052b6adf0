use serde::{Deserialize, Serialize};

use super::stream::{ItemError, Sample, StreamItem};
use crate::error::{Error, Result};
use crate::imagecore::ImageTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Micro-averaged over every evaluated image.
    pub accuracy: f64,
    /// `None` for classes absent from the stream.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub evaluated: usize,
    pub errors: Vec<ItemError>,
}

/// Running correct/total counts per class.
#[derive(Debug, Clone, Default, PartialEq)]
pub(crate) struct Tally {
    correct: Vec<usize>,
    total: Vec<usize>,
}

impl Tally {
    pub(crate) fn new(classes: usize) -> Self {
        Self {
            correct: vec![0; classes],
            total: vec![0; classes],
        }
    }

    pub(crate) fn record(&mut self, labels: &[usize], predictions: &[usize]) -> Result<()> {
        if labels.len() != predictions.len() {
            return Err(Error::validation(format!(
                "classifier returned {} predictions for {} images",
                predictions.len(),
                labels.len()
            )));
        }
        for (&l, &p) in labels.iter().zip(predictions) {
            self.total[l] += 1;
            self.correct[l] += usize::from(l == p);
        }
        Ok(())
    }

    pub(crate) fn count(&self) -> usize {
        self.total.iter().sum()
    }

    pub(crate) fn finish(&self, errors: Vec<ItemError>) -> Result<Evaluation> {
        let n = self.count();
        if n == 0 {
            return Err(Error::arg("no images were evaluated"));
        }
        Ok(Evaluation {
            accuracy: self.correct.iter().sum::<usize>() as f64 / n as f64,
            per_class_accuracy: self
                .correct
                .iter()
                .zip(&self.total)
                .map(|(&c, &t)| (t > 0).then(|| c as f64 / t as f64))
                .collect(),
            evaluated: n,
            errors,
        })
    }
}

/// Pulls up to `batch_size` good samples, recording failed items.
pub(crate) fn next_batch(
    stream: &mut impl Iterator<Item = StreamItem>,
    batch_size: usize,
    errors: &mut Vec<ItemError>,
) -> Vec<Sample> {
    let mut batch = Vec::with_capacity(batch_size);
    while batch.len() < batch_size {
        match stream.next() {
            Some(Ok(s)) => batch.push(s),
            Some(Err(e)) => errors.push(e),
            None => break,
        }
    }
    batch
}

/// Runs `classifier` on consecutive batches (the last may be short) and
/// scores its predictions. Labels must be below `num_classes`.
pub fn evaluate<F>(
    stream: impl IntoIterator<Item = StreamItem>,
    num_classes: usize,
    batch_size: usize,
    mut classifier: F,
) -> Result<Evaluation>
where
    F: FnMut(&[&ImageTensor]) -> Result<Vec<usize>>,
{
    if batch_size == 0 {
        return Err(Error::arg("batch_size must be >= 1"));
    }
    let mut stream = stream.into_iter();
    let mut tally = Tally::new(num_classes);
    let mut errors = Vec::new();
    loop {
        let batch = next_batch(&mut stream, batch_size, &mut errors);
        if batch.is_empty() {
            break;
        }
        if let Some(bad) = batch.iter().find(|s| s.label >= num_classes) {
            return Err(Error::validation(format!(
                "entry '{}': label {} out of range [0, {num_classes})",
                bad.id, bad.label
            )));
        }
        let images: Vec<&ImageTensor> = batch.iter().map(|s| &s.image).collect();
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        tally.record(&labels, &classifier(&images)?)?;
    }
    tally.finish(errors)
}
