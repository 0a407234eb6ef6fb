//! The shared-query detection and grounding network.
//!
//! Both tasks run on one set of fused voxel features, one decoder and one box
//! head. Grounding additionally routes features through the text-driven region
//! activation block and modulates its queries with the sentence embedding;
//! detection bypasses both and masks text cross-attention.

mod parts;

pub use parts::{
    context_encode, decode, embed_text, film, max_per_row, positional_encoding, qim_modulate, rag_apply, select_top_k,
    sentence_embed, DecoderContext, QuerySet, RagOutput, TextEmbedding,
};

use serde::{Deserialize, Serialize};

use crate::boxes::Box9DoF;
use crate::error::{Error, Result};
use crate::geometry::{fuse_sampled, init_fusion, FusionDims, VoxelFeatureSet};
use crate::losses::{decode_all, Task, BOX_DIM};
use crate::rng::Rng;
use crate::scene::{StubEmbeddings, CLASS_NAMES};
use crate::tensor::{
    init_attention, init_layer_norm, init_linear, init_mlp, linear, mlp_apply, Activation, AttentionSpec, Graph,
    LinearInit, MlpSpec, ParamStore, Tensor, Var,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Model width C.
    pub dim: usize,
    pub layers: usize,
    /// Voxel self-attention layers after fusion; they give each voxel scene
    /// context, which a convolutional backbone would otherwise provide. Off by
    /// default: on the synthetic scenes they cost several times the training
    /// time without improving grounding.
    pub context_layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub k_det: usize,
    pub k_grd: usize,
    pub num_classes: usize,
    /// Raw per-voxel feature width fed to the voxel encoder.
    pub point_dim: usize,
    /// Voxel encoder output width.
    pub geometric_dim: usize,
    /// Stub 2D feature width.
    pub view_dim: usize,
    /// Width of the fixed word vectors.
    pub word_dim: usize,
    /// Seed of the fixed word table.
    pub embed_seed: u64,
    pub use_qim: bool,
    pub use_rag: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            layers: 2,
            context_layers: 0,
            heads: 1,
            ffn_hidden: 64,
            k_det: 32,
            k_grd: 16,
            num_classes: CLASS_NAMES.len(),
            point_dim: 3,
            geometric_dim: 16,
            view_dim: 8,
            word_dim: 16,
            embed_seed: 7,
            use_qim: true,
            use_rag: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("k_det", self.k_det),
            ("k_grd", self.k_grd),
            ("num_classes", self.num_classes),
            ("point_dim", self.point_dim),
            ("geometric_dim", self.geometric_dim),
            ("view_dim", self.view_dim),
            ("word_dim", self.word_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("model.{name} must be positive")));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!("{} heads do not divide width {}", self.heads, self.dim)));
        }
        Ok(())
    }

    fn spec(&self) -> AttentionSpec {
        AttentionSpec {
            dim: self.dim,
            heads: self.heads,
        }
    }

    pub fn k(&self, task: Task) -> usize {
        match task {
            Task::Detection => self.k_det,
            Task::Grounding => self.k_grd,
        }
    }

    pub fn task_classes(&self, task: Task) -> usize {
        match task {
            Task::Detection => self.num_classes,
            Task::Grounding => 1,
        }
    }

    fn head_spec(&self, out: usize) -> MlpSpec {
        MlpSpec::new(vec![self.dim, self.dim, out], Activation::Relu)
    }
}

/// Parameters plus the fixed word table.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub words: StubEmbeddings,
}

impl Model {
    /// Fresh parameters. QIM starts as the identity (β ≡ 1, γ ≡ 0) and the
    /// region-activation residual starts at zero, whether or not the blocks
    /// are enabled.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.dim;
        let mut rng = Rng::new(seed);
        let mut s = ParamStore::new();
        let fusion = FusionDims {
            point: config.point_dim,
            geometric: config.geometric_dim,
            view: config.view_dim,
            out: c,
        };
        init_fusion(&mut s, fusion, &mut rng)?;
        for l in 0..config.context_layers {
            let p = format!("context.{l}");
            init_layer_norm(&mut s, &format!("{p}.norm_attn"), c)?;
            init_attention(&mut s, &format!("{p}.attn"), config.spec(), false, &mut rng)?;
            init_layer_norm(&mut s, &format!("{p}.norm_ffn"), c)?;
            init_mlp(&mut s, &format!("{p}.ffn"), &parts::ffn_spec(c, config.ffn_hidden), LinearInit::Xavier, &mut rng)?;
        }
        init_linear(&mut s, "text_proj", config.word_dim, c, LinearInit::Xavier, &mut rng)?;
        init_linear(&mut s, "score.det", c, config.num_classes, LinearInit::Xavier, &mut rng)?;
        init_linear(&mut s, "score.grd", c, 1, LinearInit::Xavier, &mut rng)?;
        init_mlp(&mut s, "qim.beta", &parts::qim_spec(c), LinearInit::Constant(1.0), &mut rng)?;
        init_mlp(&mut s, "qim.gamma", &parts::qim_spec(c), LinearInit::Constant(0.0), &mut rng)?;
        init_attention(&mut s, "rag.attn", config.spec(), true, &mut rng)?;
        init_mlp(&mut s, "rag.relevance", &parts::relevance_spec(c), LinearInit::Xavier, &mut rng)?;
        for l in 0..config.layers {
            let p = format!("decoder.{l}");
            for (norm, att) in [("norm_self", "self_attn"), ("norm_text", "text_attn"), ("norm_vis", "vis_attn")] {
                init_layer_norm(&mut s, &format!("{p}.{norm}"), c)?;
                init_attention(&mut s, &format!("{p}.{att}"), config.spec(), false, &mut rng)?;
            }
            init_layer_norm(&mut s, &format!("{p}.norm_ffn"), c)?;
            init_mlp(&mut s, &format!("{p}.ffn"), &parts::ffn_spec(c, config.ffn_hidden), LinearInit::Xavier, &mut rng)?;
        }
        init_layer_norm(&mut s, "decoder.norm_out", c)?;
        init_mlp(&mut s, "head.box", &config.head_spec(BOX_DIM), LinearInit::Xavier, &mut rng)?;
        init_mlp(&mut s, "head.det", &config.head_spec(config.num_classes), LinearInit::Xavier, &mut rng)?;
        init_mlp(&mut s, "head.grd", &config.head_spec(1), LinearInit::Xavier, &mut rng)?;
        Ok(Self::from_params(config, s))
    }

    pub fn from_params(config: ModelConfig, params: ParamStore) -> Self {
        let words = StubEmbeddings::new(config.word_dim, config.embed_seed);
        Self { config, params, words }
    }
}

/// Per-scene network input: voxels with raw features, and the 2D features
/// already sampled at each voxel center.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneInputs {
    pub voxels: VoxelFeatureSet,
    pub sampled: Tensor,
}

impl SceneInputs {
    /// The voxels at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let v = &self.voxels;
        if let Some(&i) = idx.iter().find(|&&i| i >= v.len()) {
            return Err(Error::InvalidArgument(format!("voxel {i} out of range ({})", v.len())));
        }
        Ok(Self {
            voxels: VoxelFeatureSet {
                coords: idx.iter().map(|&i| v.coords[i]).collect(),
                indices: idx.iter().map(|&i| v.indices[i]).collect(),
                features: v.features.gather_rows(idx),
                voxel_size: v.voxel_size,
            },
            sampled: self.sampled.gather_rows(idx),
        })
    }
}

/// Task-independent encodings shared by both branches within one graph.
pub struct Encoded {
    /// N × C fused features, after the context encoder.
    pub visual: Var,
    /// N × C positional encoding of voxel centers.
    pub position: Var,
}

pub fn encode_scene(g: &mut Graph, model: &Model, inputs: &SceneInputs) -> Result<Encoded> {
    if inputs.voxels.is_empty() {
        return Err(Error::Empty("scene has no voxels".into()));
    }
    let cfg = &model.config;
    let fused = fuse_sampled(g, &model.params, &inputs.voxels, &inputs.sampled)?;
    let position = g.constant(positional_encoding(&inputs.voxels.coords, cfg.dim));
    let visual = context_encode(g, &model.params, cfg.context_layers, cfg.heads, cfg.ffn_hidden, fused, position)?;
    Ok(Encoded { visual, position })
}

/// Graph handles for one task's forward pass.
pub struct TaskGraph {
    pub task: Task,
    pub queries: QuerySet,
    /// K × num_classes (detection) or K × 1 (grounding).
    pub logits: Var,
    /// K × [`BOX_DIM`], angle pairs normalized.
    pub boxes: Var,
    /// N × 1 relevance logits when region activation is on.
    pub relevance: Option<Var>,
    /// N × (num_classes | 1) scoring-head logits used for selection.
    pub score_logits: Var,
    /// Region-activation attention weights (per head, N × T).
    pub rag_weights: Vec<Tensor>,
}

/// Runs one task. `tokens` is required for grounding. `selection` fixes the
/// chosen voxels instead of taking the top-K of the scoring head.
pub fn forward_task(
    g: &mut Graph,
    model: &Model,
    inputs: &SceneInputs,
    enc: &Encoded,
    task: Task,
    tokens: Option<&[usize]>,
    selection: Option<&[usize]>,
) -> Result<TaskGraph> {
    let cfg = &model.config;
    let store = &model.params;
    let text = match task {
        Task::Detection => None,
        Task::Grounding => {
            let tokens = tokens.ok_or_else(|| Error::InvalidArgument("grounding needs instruction tokens".into()))?;
            Some(embed_text(g, store, &model.words.embed(tokens)?)?)
        }
    };

    let mut features = enc.visual;
    let mut relevance = None;
    let mut rag_weights = Vec::new();
    if let (Some(text), true) = (&text, cfg.use_rag) {
        let rag = rag_apply(g, store, cfg.heads, enc.visual, text)?;
        features = rag.region;
        relevance = Some(rag.relevance);
        rag_weights = rag.weights;
    }

    let score_logits = match task {
        Task::Detection => linear(g, store, "score.det", features)?,
        Task::Grounding => linear(g, store, "score.grd", features)?,
    };
    let scores = match task {
        Task::Detection => max_per_row(g.value(score_logits)),
        Task::Grounding => g.value(score_logits).data().to_vec(),
    };
    let k = cfg.k(task);
    let indices = match selection {
        Some(sel) => {
            if sel.len() != k || sel.iter().any(|&i| i >= scores.len()) {
                return Err(Error::InvalidArgument(format!(
                    "fixed selection must hold {k} voxel indices below {}",
                    scores.len()
                )));
            }
            sel.to_vec()
        }
        None => select_top_k(&scores, k)?,
    };
    let queries = QuerySet {
        positions: indices.iter().map(|&i| inputs.voxels.coords[i]).collect(),
        scores: indices.iter().map(|&i| scores[i]).collect(),
        indices,
    };

    let picked = g.gather_rows(features, &queries.indices)?;
    let pe = g.gather_rows(enc.position, &queries.indices)?;
    let mut q = g.add(picked, pe)?;
    if let (Some(text), true) = (&text, cfg.use_qim) {
        q = qim_modulate(g, store, q, text.sentence)?;
    }

    let keys = g.add(features, enc.position)?;
    let ctx = DecoderContext {
        keys,
        values: features,
        text: text.map(|t| t.tokens),
    };
    let h = decode(g, store, cfg.layers, cfg.heads, cfg.ffn_hidden, q, &ctx)?;

    let raw = mlp_apply(g, store, "head.box", &cfg.head_spec(BOX_DIM), h)?;
    let linear_part = g.slice_cols(raw, 0, 6)?;
    let angle_part = g.slice_cols(raw, 6, BOX_DIM)?;
    let angles = g.normalize_pairs(angle_part)?;
    let boxes = g.concat_cols(&[linear_part, angles])?;
    let logits = match task {
        Task::Detection => mlp_apply(g, store, "head.det", &cfg.head_spec(cfg.num_classes), h)?,
        Task::Grounding => mlp_apply(g, store, "head.grd", &cfg.head_spec(1), h)?,
    };
    Ok(TaskGraph {
        task,
        queries,
        logits,
        boxes,
        relevance,
        score_logits,
        rag_weights,
    })
}

/// Materialized predictions for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderOutput {
    pub task: Task,
    pub boxes: Vec<Box9DoF>,
    /// K × num_classes (detection) or K × 1 (grounding).
    pub logits: Tensor,
    /// Per-voxel relevance logits (grounding with region activation).
    pub relevance: Option<Vec<f64>>,
    pub queries: QuerySet,
}

impl DecoderOutput {
    /// Per-query confidence: sigmoid of the best class (detection) or of the
    /// grounding logit.
    pub fn confidences(&self) -> Vec<f64> {
        max_per_row(&self.logits).into_iter().map(crate::tensor::sigmoid).collect()
    }

    /// Arg-max class per query.
    pub fn classes(&self) -> Vec<usize> {
        (0..self.logits.rows())
            .map(|r| {
                let row = self.logits.row(r);
                (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b })
            })
            .collect()
    }
}

pub fn materialize(g: &Graph, t: &TaskGraph) -> Result<DecoderOutput> {
    Ok(DecoderOutput {
        task: t.task,
        boxes: decode_all(g, t.boxes, &t.queries.positions)?,
        logits: g.value(t.logits).clone(),
        relevance: t.relevance.map(|r| g.value(r).data().to_vec()),
        queries: t.queries.clone(),
    })
}

/// Inference for one task.
pub fn predict(model: &Model, inputs: &SceneInputs, task: Task, tokens: Option<&[usize]>) -> Result<DecoderOutput> {
    let mut g = Graph::new();
    let enc = encode_scene(&mut g, model, inputs)?;
    let t = forward_task(&mut g, model, inputs, &enc, task, tokens, None)?;
    materialize(&g, &t)
}
