//! Building blocks of the grounding network: positional encoding, text
//! embedding, query selection, query modulation, text-driven region
//! activation and the shared decoder.

use crate::boxes::Vec3;
use crate::error::{Error, Result};
use crate::tensor::{
    attention, layer_norm, linear, mlp_apply, Activation, AttentionSpec, Graph, MlpSpec, ParamStore, Tensor, Var,
};

/// Sinusoidal encoding of 3D positions. Channel `i` encodes axis `(i/2) % 3`
/// at angular frequency `2^((i/2) / 3)`, sine on even channels and cosine on
/// odd ones.
pub fn positional_encoding(points: &[Vec3], dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(points.len() * dim);
    for p in points {
        for i in 0..dim {
            let pair = i / 2;
            let freq = f64::powi(2.0, (pair / 3) as i32);
            let x = p[pair % 3] * freq;
            data.push(if i % 2 == 0 { x.sin() } else { x.cos() });
        }
    }
    Tensor::raw(vec![points.len(), dim], data)
}

/// Token matrix (T × C) and its mean-pooled sentence vector (1 × C).
#[derive(Clone, Copy, Debug)]
pub struct TextEmbedding {
    pub tokens: Var,
    pub sentence: Var,
}

/// Arithmetic mean of token rows.
pub fn sentence_embed(tokens: &Tensor) -> Result<Tensor> {
    let (t, c) = tokens.dims2()?;
    if t == 0 {
        return Err(Error::Empty("sentence has no tokens".into()));
    }
    let mut out = vec![0.0; c];
    for r in 0..t {
        out.iter_mut().zip(tokens.row(r)).for_each(|(o, x)| *o += x);
    }
    out.iter_mut().for_each(|o| *o /= t as f64);
    Tensor::matrix(1, c, out)
}

/// Projects fixed word vectors to the model width and mean-pools them.
pub fn embed_text(g: &mut Graph, store: &ParamStore, words: &Tensor) -> Result<TextEmbedding> {
    if words.rows() == 0 {
        return Err(Error::Empty("sentence has no tokens".into()));
    }
    let w = g.constant(words.clone());
    let tokens = linear(g, store, "text_proj", w)?;
    let sentence = g.mean_rows(tokens)?;
    Ok(TextEmbedding { tokens, sentence })
}

/// Indices of the `k` highest scores, best first; equal scores keep
/// ascending index order.
pub fn select_top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if k > scores.len() {
        return Err(Error::InvalidArgument(format!("K = {k} exceeds {} candidates", scores.len())));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Row-wise max of a score-logit matrix: the detection selection score.
pub fn max_per_row(t: &Tensor) -> Vec<f64> {
    (0..t.rows()).map(|r| t.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect()
}

/// Selected object queries.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    /// Voxel indices, best first.
    pub indices: Vec<usize>,
    pub positions: Vec<Vec3>,
    pub scores: Vec<f64>,
}

pub(crate) fn qim_spec(dim: usize) -> MlpSpec {
    MlpSpec::new(vec![dim, dim, dim], Activation::Relu)
}

/// `β ⊙ Q + γ ⊙ S` with `β = ξ1(S)`, `γ = ξ2(S)`; `S` is broadcast over queries.
pub fn qim_modulate(g: &mut Graph, store: &ParamStore, queries: Var, sentence: Var) -> Result<Var> {
    let dim = g.value(sentence).cols();
    let spec = qim_spec(dim);
    let beta = mlp_apply(g, store, "qim.beta", &spec, sentence)?;
    let gamma = mlp_apply(g, store, "qim.gamma", &spec, sentence)?;
    let scaled = g.mul_row(queries, beta)?;
    let shift = g.mul(gamma, sentence)?;
    g.add_row(scaled, shift)
}

/// Plain-value form of the modulation for fixed β and γ.
pub fn film(queries: &Tensor, beta: &[f64], gamma: &[f64], sentence: &[f64]) -> Result<Tensor> {
    let (k, c) = queries.dims2()?;
    if beta.len() != c || gamma.len() != c || sentence.len() != c {
        return Err(Error::shape("film", format!("width {c}")));
    }
    let mut out = Vec::with_capacity(k * c);
    for r in 0..k {
        for (j, q) in queries.row(r).iter().enumerate() {
            out.push(beta[j] * q + gamma[j] * sentence[j]);
        }
    }
    Tensor::matrix(k, c, out)
}

pub(crate) fn relevance_spec(dim: usize) -> MlpSpec {
    MlpSpec::new(vec![dim, dim, 1], Activation::Relu)
}

pub struct RagOutput {
    /// `F_visual + attention(F_visual, F_text, F_text)`, N × C.
    pub region: Var,
    /// N × 1 relevance logits.
    pub relevance: Var,
    pub weights: Vec<Tensor>,
}

pub fn rag_apply(
    g: &mut Graph,
    store: &ParamStore,
    heads: usize,
    visual: Var,
    text: &TextEmbedding,
) -> Result<RagOutput> {
    let dim = g.value(visual).cols();
    let spec = AttentionSpec { dim, heads };
    let att = attention(g, store, "rag.attn", spec, visual, text.tokens, text.tokens)?;
    let region = g.add(visual, att.out)?;
    let relevance = mlp_apply(g, store, "rag.relevance", &relevance_spec(dim), region)?;
    Ok(RagOutput {
        region,
        relevance,
        weights: att.weights,
    })
}

pub(crate) fn ffn_spec(dim: usize, hidden: usize) -> MlpSpec {
    MlpSpec::new(vec![dim, hidden, dim], Activation::Relu)
}

/// Pre-norm self-attention encoder over voxels. Positions are added once at
/// the input, so attention can relate voxels by where they are.
pub fn context_encode(
    g: &mut Graph,
    store: &ParamStore,
    layers: usize,
    heads: usize,
    ffn_hidden: usize,
    features: Var,
    position: Var,
) -> Result<Var> {
    if layers == 0 {
        return Ok(features);
    }
    let dim = g.value(features).cols();
    let spec = AttentionSpec { dim, heads };
    let mut h = g.add(features, position)?;
    for l in 0..layers {
        let p = format!("context.{l}");
        let n = layer_norm(g, store, &format!("{p}.norm_attn"), h)?;
        let a = attention(g, store, &format!("{p}.attn"), spec, n, n, n)?;
        h = g.add(h, a.out)?;
        let n = layer_norm(g, store, &format!("{p}.norm_ffn"), h)?;
        let f = mlp_apply(g, store, &format!("{p}.ffn"), &ffn_spec(dim, ffn_hidden), n)?;
        h = g.add(h, f)?;
    }
    Ok(h)
}

/// What a decoder layer attends to besides the other queries.
pub struct DecoderContext {
    /// N × C visual keys (features plus positional encoding).
    pub keys: Var,
    /// N × C visual values.
    pub values: Var,
    /// T × C text tokens; `None` masks text cross-attention.
    pub text: Option<Var>,
}

/// Pre-norm decoder: per layer, self-attention, text cross-attention (when
/// text is present), visual cross-attention and a feed-forward block, each
/// with a residual connection. A final layer norm follows the stack.
pub fn decode(
    g: &mut Graph,
    store: &ParamStore,
    layers: usize,
    heads: usize,
    ffn_hidden: usize,
    queries: Var,
    ctx: &DecoderContext,
) -> Result<Var> {
    let dim = g.value(queries).cols();
    let spec = AttentionSpec { dim, heads };
    let mut h = queries;
    for l in 0..layers {
        let p = format!("decoder.{l}");
        let n = layer_norm(g, store, &format!("{p}.norm_self"), h)?;
        let a = attention(g, store, &format!("{p}.self_attn"), spec, n, n, n)?;
        h = g.add(h, a.out)?;
        if let Some(text) = ctx.text {
            let n = layer_norm(g, store, &format!("{p}.norm_text"), h)?;
            let a = attention(g, store, &format!("{p}.text_attn"), spec, n, text, text)?;
            h = g.add(h, a.out)?;
        }
        let n = layer_norm(g, store, &format!("{p}.norm_vis"), h)?;
        let a = attention(g, store, &format!("{p}.vis_attn"), spec, n, ctx.keys, ctx.values)?;
        h = g.add(h, a.out)?;
        let n = layer_norm(g, store, &format!("{p}.norm_ffn"), h)?;
        let f = mlp_apply(g, store, &format!("{p}.ffn"), &ffn_spec(dim, ffn_hidden), n)?;
        h = g.add(h, f)?;
    }
    layer_norm(g, store, "decoder.norm_out", h)
}
