//! Parameterized building blocks recorded on a [`Graph`].
//!
//! Parameters are addressed by dotted names: a linear layer under prefix `p`
//! owns `p.weight` (in × out) and `p.bias` (1 × out).

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LinearInit {
    /// Glorot-uniform weights, zero bias.
    Xavier,
    /// Zero weights with a constant bias: the layer outputs `bias` for any input.
    Constant(f64),
}

pub fn init_linear(
    store: &mut ParamStore,
    prefix: &str,
    input: usize,
    output: usize,
    init: LinearInit,
    rng: &mut Rng,
) -> Result<()> {
    let (w, b) = match init {
        LinearInit::Xavier => {
            let a = (6.0 / (input + output) as f64).sqrt();
            let w = (0..input * output).map(|_| rng.range(-a, a)).collect();
            (w, vec![0.0; output])
        }
        LinearInit::Constant(c) => (vec![0.0; input * output], vec![c; output]),
    };
    store.insert(&format!("{prefix}.weight"), Tensor::matrix(input, output, w)?)?;
    store.insert(&format!("{prefix}.bias"), Tensor::matrix(1, output, b)?)?;
    Ok(())
}

pub fn linear(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let b = g.param(store, &format!("{prefix}.bias"))?;
    let (_, xin) = g.value(x).dims2()?;
    let (win, _) = g.value(w).dims2()?;
    if xin != win {
        return Err(Error::shape(prefix, format!("input width {xin}, layer expects {win}")));
    }
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Layer widths including input and output, e.g. `[32, 32, 1]`.
    pub sizes: Vec<usize>,
    /// Applied between layers, never after the last one.
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(sizes: Vec<usize>, activation: Activation) -> Self {
        Self { sizes, activation }
    }

    pub fn layers(&self) -> usize {
        self.sizes.len().saturating_sub(1)
    }
}

/// Initializes an MLP. `last` controls the final layer, which lets a head start
/// as an exact constant map.
pub fn init_mlp(store: &mut ParamStore, prefix: &str, spec: &MlpSpec, last: LinearInit, rng: &mut Rng) -> Result<()> {
    if spec.sizes.len() < 2 {
        return Err(Error::InvalidArgument(format!("{prefix}: an MLP needs at least two sizes")));
    }
    for i in 0..spec.layers() {
        let init = if i + 1 == spec.layers() { last } else { LinearInit::Xavier };
        init_linear(store, &format!("{prefix}.{i}"), spec.sizes[i], spec.sizes[i + 1], init, rng)?;
    }
    Ok(())
}

pub fn mlp_apply(g: &mut Graph, store: &ParamStore, prefix: &str, spec: &MlpSpec, x: Var) -> Result<Var> {
    let mut h = x;
    for i in 0..spec.layers() {
        let name = format!("{prefix}.{i}");
        let (_, width) = g.value(h).dims2()?;
        if width != spec.sizes[i] {
            return Err(Error::shape(name, format!("input width {width}, expected {}", spec.sizes[i])));
        }
        h = linear(g, store, &name, h)?;
        if g.value(h).cols() != spec.sizes[i + 1] {
            return Err(Error::shape(
                name,
                format!("output width {}, expected {}", g.value(h).cols(), spec.sizes[i + 1]),
            ));
        }
        if i + 1 < spec.layers() && spec.activation == Activation::Relu {
            h = g.relu(h);
        }
    }
    Ok(h)
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<()> {
    store.insert(&format!("{prefix}.gamma"), Tensor::filled(vec![1, dim], 1.0))?;
    store.insert(&format!("{prefix}.beta"), Tensor::zeros(vec![1, dim]))?;
    Ok(())
}

pub fn layer_norm(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let gamma = g.param(store, &format!("{prefix}.gamma"))?;
    let beta = g.param(store, &format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta, 1e-5)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionSpec {
    pub dim: usize,
    pub heads: usize,
}

impl AttentionSpec {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Query/key/value/output projections. With `zero_output` the output
/// projection starts at zero so the block initially contributes nothing.
pub fn init_attention(
    store: &mut ParamStore,
    prefix: &str,
    spec: AttentionSpec,
    zero_output: bool,
    rng: &mut Rng,
) -> Result<()> {
    if spec.heads == 0 || spec.dim % spec.heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "{prefix}: {} heads do not divide width {}",
            spec.heads, spec.dim
        )));
    }
    for p in ["q", "k", "v"] {
        init_linear(store, &format!("{prefix}.{p}"), spec.dim, spec.dim, LinearInit::Xavier, rng)?;
    }
    let out_init = if zero_output { LinearInit::Constant(0.0) } else { LinearInit::Xavier };
    init_linear(store, &format!("{prefix}.o"), spec.dim, spec.dim, out_init, rng)
}

pub struct AttentionOutput {
    pub out: Var,
    /// Per head, the N×T attention weights.
    pub weights: Vec<Tensor>,
}

/// Scaled dot-product attention: `softmax(Q Wq (K Wk)ᵀ / √d) V Wv`, heads
/// concatenated and mapped through the output projection.
pub fn attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    spec: AttentionSpec,
    q: Var,
    k: Var,
    v: Var,
) -> Result<AttentionOutput> {
    let t = g.value(k).rows();
    if t == 0 {
        return Err(Error::Empty(format!("{prefix}: no keys")));
    }
    if g.value(v).rows() != t {
        return Err(Error::shape(prefix, format!("{t} keys but {} values", g.value(v).rows())));
    }
    let qp = linear(g, store, &format!("{prefix}.q"), q)?;
    let kp = linear(g, store, &format!("{prefix}.k"), k)?;
    let vp = linear(g, store, &format!("{prefix}.v"), v)?;
    let d = spec.head_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let mut heads = Vec::with_capacity(spec.heads);
    let mut weights = Vec::with_capacity(spec.heads);
    for h in 0..spec.heads {
        let (qh, kh, vh) = if spec.heads == 1 {
            (qp, kp, vp)
        } else {
            (
                g.slice_cols(qp, h * d, (h + 1) * d)?,
                g.slice_cols(kp, h * d, (h + 1) * d)?,
                g.slice_cols(vp, h * d, (h + 1) * d)?,
            )
        };
        let kt = g.transpose(kh)?;
        let logits = g.matmul(qh, kt)?;
        let logits = g.scale(logits, scale);
        let w = g.softmax_rows(logits)?;
        weights.push(g.value(w).clone());
        heads.push(g.matmul(w, vh)?);
    }
    let merged = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let out = linear(g, store, &format!("{prefix}.o"), merged)?;
    Ok(AttentionOutput { out, weights })
}
