//! Differentiable layers built on the tape: layer norm, linear maps with
//! low-rank adapters, multi-head attention and the MLP.

use super::tape::{ParamId, ParamStore, Tape, Var};
use super::Matrix;
use crate::error::{Error, Result};
use crate::imagecore::Rng64;

/// Standard deviation of the Gaussian used for the `A` factor of a fresh adapter.
pub const LORA_A_INIT_STD: f64 = 0.02;

pub fn randn(rng: &mut Rng64, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gaussian() * std)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    /// Unit scale, zero shift.
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Matrix::filled(1, dim, 1.0)),
            beta: store.add(format!("{name}.beta"), Matrix::zeros(1, dim)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.gamma, self.beta]
    }
}

/// Low-rank update `delta = (alpha / rank) * A * B` with `A: d_in x r`, `B: r x d_out`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraPair {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraPair {
    /// Fresh adapter: `A ~ N(0, 0.02^2)`, `B = 0`, so the adapted layer starts
    /// out identical to the frozen one. Requires `rank <= d_in / 2`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        rng: &mut Rng64,
    ) -> Result<Self> {
        if rank == 0 || rank > d_in / 2 {
            return Err(Error::arg(format!(
                "lora rank {rank} must lie in 1..={} for d_in = {d_in}",
                d_in / 2
            )));
        }
        let a = randn(rng, d_in, rank, LORA_A_INIT_STD);
        Self::from_factors(store, name, a, Matrix::zeros(rank, d_out), alpha)
    }

    /// Adapter with explicit factors; only shape agreement is checked.
    pub fn from_factors(store: &mut ParamStore, name: &str, a: Matrix, b: Matrix, alpha: f64) -> Result<Self> {
        if a.cols() != b.rows() || a.cols() == 0 {
            return Err(Error::arg(format!(
                "lora factors {:?} and {:?} do not chain",
                a.shape(),
                b.shape()
            )));
        }
        let rank = a.cols();
        Ok(Self {
            a: store.add(format!("{name}.lora_a"), a),
            b: store.add(format!("{name}.lora_b"), b),
            rank,
            alpha,
        })
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// The dense update the adapter currently represents.
    pub fn delta(&self, store: &ParamStore) -> Result<Matrix> {
        Ok(store.value(self.a).matmul(store.value(self.b))?.scale(self.scaling()))
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.a, self.b]
    }
}

/// `y = x * (W + (alpha / r) A B) + bias`. `W` is expected to be frozen; `A`,
/// `B` and the bias receive gradients when trainable.
pub fn linear_lora_forward(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    weight: ParamId,
    lora: Option<&LoraPair>,
    bias: Option<ParamId>,
) -> Result<Var> {
    let mut w = tape.param(store, weight);
    if let Some(l) = lora {
        let a = tape.param(store, l.a);
        let b = tape.param(store, l.b);
        let ab = tape.matmul(a, b)?;
        let delta = tape.scale(ab, l.scaling());
        w = tape.add(w, delta)?;
    }
    let mut y = tape.matmul(x, w)?;
    if let Some(bias) = bias {
        let b = tape.param(store, bias);
        y = tape.add_row(y, b)?;
    }
    Ok(y)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraLinear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub lora: Option<LoraPair>,
}

/// Adapter placement when building layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
}

impl LoraLinear {
    /// Frozen `W ~ N(0, 1 / d_in)`, zero bias, optional fresh adapter.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        lora: Option<LoraSpec>,
        rng: &mut Rng64,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            randn(rng, d_in, d_out, (1.0 / d_in as f64).sqrt()),
        );
        let bias = Some(store.add(format!("{name}.bias"), Matrix::zeros(1, d_out)));
        let lora = match lora {
            Some(s) => Some(LoraPair::new(store, name, d_in, d_out, s.rank, s.alpha, rng)?),
            None => None,
        };
        Ok(Self { weight, bias, lora })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        linear_lora_forward(tape, store, x, self.weight, self.lora.as_ref(), self.bias)
    }

    pub fn lora_params(&self) -> Vec<ParamId> {
        self.lora.iter().flat_map(|l| l.params()).collect()
    }
}

/// Pre-norm multi-head self-attention sublayer: `O(MHA(Q(ln x), K(ln x), V(ln x)))`.
/// The residual connection is left to the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    pub norm: LayerNorm,
    pub query: LoraLinear,
    pub key: LoraLinear,
    pub value: LoraLinear,
    pub output: LoraLinear,
    pub heads: usize,
}

impl AttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        lora: Option<LoraSpec>,
        rng: &mut Rng64,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::arg(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.ln"), dim),
            query: LoraLinear::new(store, &format!("{name}.q"), dim, dim, lora, rng)?,
            key: LoraLinear::new(store, &format!("{name}.k"), dim, dim, lora, rng)?,
            value: LoraLinear::new(store, &format!("{name}.v"), dim, dim, lora, rng)?,
            output: LoraLinear::new(store, &format!("{name}.o"), dim, dim, lora, rng)?,
            heads,
        })
    }

    /// `offsets` delimit the token rows of each sequence.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, offsets: &[usize]) -> Result<Var> {
        let h = self.norm.forward(tape, store, x)?;
        let q = self.query.forward(tape, store, h)?;
        let k = self.key.forward(tape, store, h)?;
        let v = self.value.forward(tape, store, h)?;
        let a = tape.attention(q, k, v, offsets, self.heads)?;
        self.output.forward(tape, store, a)
    }

    pub fn lora_params(&self) -> Vec<ParamId> {
        [&self.query, &self.key, &self.value, &self.output]
            .iter()
            .flat_map(|l| l.lora_params())
            .collect()
    }

    pub fn norm_params(&self) -> Vec<ParamId> {
        self.norm.params().to_vec()
    }
}

/// Pre-norm two-layer GELU MLP sublayer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub norm: LayerNorm,
    pub fc1: LoraLinear,
    pub fc2: LoraLinear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        lora: Option<LoraSpec>,
        rng: &mut Rng64,
    ) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.ln"), dim),
            fc1: LoraLinear::new(store, &format!("{name}.fc1"), dim, hidden, lora, rng)?,
            fc2: LoraLinear::new(store, &format!("{name}.fc2"), hidden, dim, lora, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.norm.forward(tape, store, x)?;
        let h = self.fc1.forward(tape, store, h)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, store, h)
    }
}

/// Residual transformer block: `x + attn(x)`, then `+ mlp(.)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock {
    pub attention: AttentionBlock,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        lora: Option<LoraSpec>,
        rng: &mut Rng64,
    ) -> Result<Self> {
        Ok(Self {
            attention: AttentionBlock::new(store, &format!("{name}.attn"), dim, heads, lora, rng)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, 4 * dim, lora, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, offsets: &[usize]) -> Result<Var> {
        let a = self.attention.forward(tape, store, x, offsets)?;
        let x = tape.add(x, a)?;
        let m = self.mlp.forward(tape, store, x)?;
        tape.add(x, m)
    }

    pub fn lora_params(&self) -> Vec<ParamId> {
        let mut ids = self.attention.lora_params();
        ids.extend(self.mlp.fc1.lora_params());
        ids.extend(self.mlp.fc2.lora_params());
        ids
    }

    pub fn norm_params(&self) -> Vec<ParamId> {
        let mut ids = self.attention.norm_params();
        ids.extend(self.mlp.norm.params());
        ids
    }
}
