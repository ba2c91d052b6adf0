//! Small transformer encoders standing in for the two towers of a
//! vision-language model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{fnv1a64, ImageTensor, Rng64, CHANNELS};
use crate::numerics::{
    linear_lora_forward, randn, LayerNorm, LoraSpec, Matrix, ParamId, ParamStore, Tape, TransformerBlock, Var,
};
use crate::par;

const POSITION_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisionEncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub output_dim: usize,
}

impl Default for VisionEncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 32,
            depth: 2,
            heads: 4,
            output_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub output_dim: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 4096,
            embed_dim: 32,
            heads: 4,
            output_dim: 16,
        }
    }
}

/// Fixed sinusoidal position code, `tokens x dim`.
fn position_code(tokens: usize, dim: usize) -> Matrix {
    Matrix::from_fn(tokens, dim, |n, j| {
        let freq = 1.0 / 10_000f64.powf((2 * (j / 2)) as f64 / dim as f64);
        let a = n as f64 * freq;
        POSITION_SCALE * if j % 2 == 0 { a.sin() } else { a.cos() }
    })
}

fn group_offsets(groups: usize, per_group: usize) -> Vec<usize> {
    (0..=groups).map(|g| g * per_group).collect()
}

/// Patch embedding, transformer blocks, final norm, mean pooling and a linear
/// projection onto the unit sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyVisionEncoder {
    pub config: VisionEncoderConfig,
    pub patch_embed: ParamId,
    pub patch_bias: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub final_norm: LayerNorm,
    pub projection: ParamId,
}

impl ToyVisionEncoder {
    pub fn new(store: &mut ParamStore, config: VisionEncoderConfig, lora: LoraSpec, rng: &mut Rng64) -> Result<Self> {
        let VisionEncoderConfig {
            patch_size: p,
            embed_dim: d,
            depth,
            heads,
            output_dim,
        } = config;
        if p == 0 || d == 0 || output_dim == 0 {
            return Err(Error::arg("vision encoder sizes must be positive"));
        }
        let patch_len = p * p * CHANNELS;
        let patch_embed = store.add(
            "vision.patch.weight",
            randn(rng, patch_len, d, (1.0 / patch_len as f64).sqrt()),
        );
        let patch_bias = store.add("vision.patch.bias", Matrix::zeros(1, d));
        let blocks = (0..depth)
            .map(|i| TransformerBlock::new(store, &format!("vision.block{i}"), d, heads, Some(lora), rng))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = LayerNorm::new(store, "vision.ln_final", d);
        let projection = store.add("vision.proj", randn(rng, d, output_dim, (1.0 / d as f64).sqrt()));
        Ok(Self {
            config,
            patch_embed,
            patch_bias,
            blocks,
            final_norm,
            projection,
        })
    }

    /// Centred patch pixels, one row per patch, images stacked in order.
    pub fn patchify(&self, images: &[&ImageTensor]) -> Result<(Matrix, usize)> {
        let p = self.config.patch_size;
        let first = images
            .first()
            .ok_or_else(|| Error::arg("cannot encode an empty image batch"))?;
        let side = first.height();
        for (i, img) in images.iter().enumerate() {
            if img.height() != img.width() {
                return Err(Error::arg(format!(
                    "image {i} is {}x{}, expected square",
                    img.height(),
                    img.width()
                )));
            }
            if img.height() != side {
                return Err(Error::arg(format!(
                    "image {i} has side {}, batch uses {side}",
                    img.height()
                )));
            }
        }
        if side % p != 0 {
            return Err(Error::arg(format!("image side {side} not divisible by patch size {p}")));
        }
        let grid = side / p;
        let tokens = grid * grid;
        let patch_len = p * p * CHANNELS;
        let rows: Vec<Vec<f64>> = par::map(images, |img| {
            let mut out = Vec::with_capacity(tokens * patch_len);
            for gy in 0..grid {
                for gx in 0..grid {
                    for y in 0..p {
                        let start = ((gy * p + y) * side + gx * p) * CHANNELS;
                        out.extend(img.data()[start..start + p * CHANNELS].iter().map(|&v| v as f64 - 0.5));
                    }
                }
            }
            out
        });
        let data = rows.into_iter().flatten().collect();
        Ok((Matrix::from_vec(images.len() * tokens, patch_len, data)?, tokens))
    }

    /// Pooled features before the projection, `B x embed_dim`.
    pub fn features(&self, tape: &mut Tape, store: &ParamStore, images: &[&ImageTensor]) -> Result<Var> {
        let (patches, tokens) = self.patchify(images)?;
        let offsets = group_offsets(images.len(), tokens);
        let x = tape.constant(patches);
        let mut h = linear_lora_forward(tape, store, x, self.patch_embed, None, Some(self.patch_bias))?;
        let pos = position_code(tokens, self.config.embed_dim);
        let tiled = Matrix::from_fn(images.len() * tokens, self.config.embed_dim, |r, c| {
            pos.get(r % tokens, c)
        });
        let pos = tape.constant(tiled);
        h = tape.add(h, pos)?;
        for block in &self.blocks {
            h = block.forward(tape, store, h, &offsets)?;
        }
        let h = self.final_norm.forward(tape, store, h)?;
        tape.mean_groups(h, &offsets)
    }

    /// Unit-norm embeddings, `B x output_dim`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, images: &[&ImageTensor]) -> Result<Var> {
        let f = self.features(tape, store, images)?;
        let z = linear_lora_forward(tape, store, f, self.projection, None, None)?;
        tape.l2_normalize_rows(z)
    }

    pub fn lora_params(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(|b| b.lora_params()).collect()
    }

    pub fn norm_params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.blocks.iter().flat_map(|b| b.norm_params()).collect();
        ids.extend(self.final_norm.params());
        ids
    }
}

/// Lower-cased alphanumeric words.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Hashed word embeddings, one transformer block, final norm, mean pooling and
/// a projection onto the unit sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTextEncoder {
    pub config: TextEncoderConfig,
    pub token_table: ParamId,
    pub block: TransformerBlock,
    pub final_norm: LayerNorm,
    pub projection: ParamId,
}

impl ToyTextEncoder {
    pub fn new(store: &mut ParamStore, config: TextEncoderConfig, lora: LoraSpec, rng: &mut Rng64) -> Result<Self> {
        let TextEncoderConfig {
            vocab_size,
            embed_dim: d,
            heads,
            output_dim,
        } = config;
        if vocab_size == 0 || d == 0 || output_dim == 0 {
            return Err(Error::arg("text encoder sizes must be positive"));
        }
        let token_table = store.add("text.tokens", randn(rng, vocab_size, d, 1.0));
        let block = TransformerBlock::new(store, "text.block0", d, heads, Some(lora), rng)?;
        let final_norm = LayerNorm::new(store, "text.ln_final", d);
        let projection = store.add("text.proj", randn(rng, d, output_dim, (1.0 / d as f64).sqrt()));
        Ok(Self {
            config,
            token_table,
            block,
            final_norm,
            projection,
        })
    }

    pub fn token_ids(&self, text: &str) -> Vec<usize> {
        tokenize(text)
            .iter()
            .map(|w| (fnv1a64(w.as_bytes()) % self.config.vocab_size as u64) as usize)
            .collect()
    }

    /// Pooled features before the projection, one row per string.
    pub fn features(&self, tape: &mut Tape, store: &ParamStore, texts: &[String]) -> Result<Var> {
        if texts.is_empty() {
            return Err(Error::arg("cannot encode an empty list of texts"));
        }
        let mut ids = Vec::new();
        let mut offsets = vec![0];
        let mut positions = Vec::new();
        for t in texts {
            let tok = self.token_ids(t);
            if tok.is_empty() {
                return Err(Error::arg(format!("text {t:?} has no tokens")));
            }
            positions.extend(0..tok.len());
            ids.extend(tok);
            offsets.push(ids.len());
        }
        let d = self.config.embed_dim;
        let max_len = positions.iter().max().map_or(1, |m| m + 1);
        let code = position_code(max_len, d);
        let table = tape.param(store, self.token_table);
        let h = tape.gather_rows(table, &ids)?;
        let pos = tape.constant(code.select_rows(&positions));
        let h = tape.add(h, pos)?;
        let h = self.block.forward(tape, store, h, &offsets)?;
        let h = self.final_norm.forward(tape, store, h)?;
        tape.mean_groups(h, &offsets)
    }

    /// Unit-norm embeddings, one row per string.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, texts: &[String]) -> Result<Var> {
        let f = self.features(tape, store, texts)?;
        let z = linear_lora_forward(tape, store, f, self.projection, None, None)?;
        tape.l2_normalize_rows(z)
    }

    pub fn lora_params(&self) -> Vec<ParamId> {
        self.block.lora_params()
    }

    pub fn norm_params(&self) -> Vec<ParamId> {
        let mut ids = self.block.norm_params();
        ids.extend(self.final_norm.params());
        ids
    }
}
