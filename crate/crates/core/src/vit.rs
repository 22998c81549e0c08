//! Vision Transformer: patch embedding, pre-norm encoder blocks and a
//! class-token classifier head.
//!
//! Activations flow as `[batch, tokens, hidden]`. Attention runs with the
//! heads folded into the leading dimension (`[batch * heads, tokens, d_k]`),
//! which is also the layout of the tensors captured for the sparse penalty.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::sparse::SparsePosition;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub hidden_size: usize,
    pub mlp_size: usize,
    pub num_heads: usize,
    pub depth: usize,
    pub num_classes: usize,
    pub layer_norm_eps: f64,
}

impl ViTConfig {
    /// Desk-scale model: 32px RGB, 8px patches, width 64, 4 heads, 2 blocks.
    pub fn toy() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            hidden_size: 64,
            mlp_size: 128,
            num_heads: 4,
            depth: 2,
            num_classes: 10,
            layer_norm_eps: 1e-6,
        }
    }

    /// ViT-B/16 at 384px with a 10-class head.
    pub fn vit_b16() -> Self {
        Self {
            image_size: 384,
            patch_size: 16,
            channels: 3,
            hidden_size: 768,
            mlp_size: 3072,
            num_heads: 12,
            depth: 12,
            num_classes: 10,
            layer_norm_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("hidden_size", self.hidden_size),
            ("mlp_size", self.mlp_size),
            ("num_heads", self.num_heads),
            ("depth", self.depth),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Patches plus the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    /// Closed-form count of every scalar in [`init_params`]' store.
    pub fn param_count(&self) -> usize {
        let d = self.hidden_size;
        let embed = self.patch_dim() * d + d + d + self.num_tokens() * d;
        let attn = 4 * (d * d + d);
        let mlp = d * self.mlp_size + self.mlp_size + self.mlp_size * d + d;
        let block = 2 * 2 * d + attn + mlp;
        embed + self.depth * block + 2 * d + d * self.num_classes + self.num_classes
    }
}

/// Parameter families, used to include or exclude groups from pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Weight,
    Bias,
    Norm,
    Embedding,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        if name == "cls_token" || name == "pos_embed" {
            ParamGroup::Embedding
        } else if name.ends_with(".gamma") || name.ends_with(".beta") {
            ParamGroup::Norm
        } else if name.ends_with(".bias") {
            ParamGroup::Bias
        } else {
            ParamGroup::Weight
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Weight => "weight",
            ParamGroup::Bias => "bias",
            ParamGroup::Norm => "norm",
            ParamGroup::Embedding => "embedding",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "weight" => Ok(ParamGroup::Weight),
            "bias" => Ok(ParamGroup::Bias),
            "norm" => Ok(ParamGroup::Norm),
            "embedding" => Ok(ParamGroup::Embedding),
            other => Err(Error::Config(format!(
                "unknown parameter group `{other}`; expected weight, bias, norm or embedding"
            ))),
        }
    }
}

/// Named model parameters in a fixed order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter; names must be unique. The tensor is flagged
    /// `requires_grad`.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor.with_requires_grad(true)));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, ta), (nb, tb))| na == nb && ta.bitwise_eq(tb))
    }

    fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    /// Checks that every parameter the model needs exists with the right shape.
    pub fn check_against(&self, config: &ViTConfig) -> Result<()> {
        let expected = param_shapes(config);
        for (name, shape) in &expected {
            let t = self.tensor(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "parameter `{name}` has shape {:?}, config needs {shape:?}",
                    t.shape()
                )));
            }
        }
        if self.len() != expected.len() {
            return Err(Error::Shape(format!(
                "store has {} tensors, config needs {}",
                self.len(),
                expected.len()
            )));
        }
        Ok(())
    }
}

/// Name and shape of every parameter, in store order.
pub fn param_shapes(config: &ViTConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.hidden_size;
    let mut shapes = vec![
        ("patch_embed.weight".to_string(), vec![config.patch_dim(), d]),
        ("patch_embed.bias".to_string(), vec![d]),
        ("cls_token".to_string(), vec![1, d]),
        ("pos_embed".to_string(), vec![config.num_tokens(), d]),
    ];
    for i in 0..config.depth {
        let p = format!("blocks.{i}");
        shapes.push((format!("{p}.norm1.gamma"), vec![d]));
        shapes.push((format!("{p}.norm1.beta"), vec![d]));
        for proj in ["q", "k", "v", "out"] {
            shapes.push((format!("{p}.attn.{proj}.weight"), vec![d, d]));
            shapes.push((format!("{p}.attn.{proj}.bias"), vec![d]));
        }
        shapes.push((format!("{p}.norm2.gamma"), vec![d]));
        shapes.push((format!("{p}.norm2.beta"), vec![d]));
        shapes.push((format!("{p}.mlp.fc1.weight"), vec![d, config.mlp_size]));
        shapes.push((format!("{p}.mlp.fc1.bias"), vec![config.mlp_size]));
        shapes.push((format!("{p}.mlp.fc2.weight"), vec![config.mlp_size, d]));
        shapes.push((format!("{p}.mlp.fc2.bias"), vec![d]));
    }
    shapes.push(("norm.gamma".to_string(), vec![d]));
    shapes.push(("norm.beta".to_string(), vec![d]));
    shapes.push(("head.weight".to_string(), vec![d, config.num_classes]));
    shapes.push(("head.bias".to_string(), vec![config.num_classes]));
    shapes
}

/// Deterministic initialization: truncated normal (±2σ, σ = 0.02) for
/// weight matrices and the position embedding, zeros for biases, class
/// token and LN β, ones for LN γ.
pub fn init_params(config: &ViTConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape) in param_shapes(config) {
        let n: usize = shape.iter().product();
        let tensor = if name.ends_with(".gamma") {
            Tensor::ones(&shape)
        } else if name == "cls_token" || name.ends_with(".bias") || name.ends_with(".beta") {
            Tensor::zeros(&shape)
        } else {
            let data = (0..n).map(|_| truncated_normal(&mut rng) * INIT_STD).collect();
            Tensor::new(shape, data)?
        };
        store.insert(name, tensor)?;
    }
    Ok(store)
}

fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

/// Which tensors the forward pass captured for the sparse penalty.
#[derive(Debug, Clone, Copy)]
pub struct TapEntry {
    pub block: usize,
    pub var: Var,
}

/// Capture point for one [`SparsePosition`]. Each entry holds one block's
/// tensor with every image and head folded in.
#[derive(Debug, Clone, Default)]
pub struct HookTap {
    position: Option<SparsePosition>,
    entries: Vec<TapEntry>,
}

impl HookTap {
    pub fn at(position: SparsePosition) -> Self {
        Self { position: Some(position), entries: Vec::new() }
    }

    pub fn disabled() -> Self {
        Self::default()
    }

    pub fn position(&self) -> Option<SparsePosition> {
        self.position
    }

    pub fn entries(&self) -> &[TapEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn wants(&self, position: SparsePosition) -> bool {
        self.position == Some(position)
    }

    pub fn record(&mut self, block: usize, var: Var) {
        self.entries.push(TapEntry { block, var });
    }

    fn offer(&mut self, block: usize, position: SparsePosition, var: Var) {
        if self.wants(position) {
            self.record(block, var);
        }
    }
}

pub struct BlockVars {
    pub norm1: (Var, Var),
    pub q: (Var, Var),
    pub k: (Var, Var),
    pub v: (Var, Var),
    pub out: (Var, Var),
    pub norm2: (Var, Var),
    pub fc1: (Var, Var),
    pub fc2: (Var, Var),
}

/// Graph handles for every parameter of a [`ParamStore`].
pub struct ModelVars {
    pub patch: (Var, Var),
    pub cls_token: Var,
    pub pos_embed: Var,
    pub blocks: Vec<BlockVars>,
    pub norm: (Var, Var),
    pub head: (Var, Var),
    by_name: Vec<(String, Var)>,
}

impl ModelVars {
    /// Records every parameter of `store` as a leaf of `g`.
    pub fn bind(g: &mut Graph, store: &ParamStore, config: &ViTConfig) -> Result<Self> {
        store.check_against(config)?;
        let by_name: Vec<(String, Var)> =
            store.iter().map(|(n, t)| (n.to_string(), g.leaf(t.clone()))).collect();
        let lookup: HashMap<&str, Var> = by_name.iter().map(|(n, v)| (n.as_str(), *v)).collect();
        let pair = |prefix: &str, a: &str, b: &str| {
            (lookup[format!("{prefix}.{a}").as_str()], lookup[format!("{prefix}.{b}").as_str()])
        };
        let linear = |prefix: &str| pair(prefix, "weight", "bias");
        let norm = |prefix: &str| pair(prefix, "gamma", "beta");
        let blocks = (0..config.depth)
            .map(|i| {
                let p = format!("blocks.{i}");
                BlockVars {
                    norm1: norm(&format!("{p}.norm1")),
                    q: linear(&format!("{p}.attn.q")),
                    k: linear(&format!("{p}.attn.k")),
                    v: linear(&format!("{p}.attn.v")),
                    out: linear(&format!("{p}.attn.out")),
                    norm2: norm(&format!("{p}.norm2")),
                    fc1: linear(&format!("{p}.mlp.fc1")),
                    fc2: linear(&format!("{p}.mlp.fc2")),
                }
            })
            .collect();
        Ok(Self {
            patch: linear("patch_embed"),
            cls_token: lookup["cls_token"],
            pos_embed: lookup["pos_embed"],
            blocks,
            norm: norm("norm"),
            head: linear("head"),
            by_name,
        })
    }

    /// `(name, var)` in store order.
    pub fn named(&self) -> &[(String, Var)] {
        &self.by_name
    }
}

/// Splits one `[H, W, C]` image into `[N, P²C]` patches. Patches are taken
/// row-major over the patch grid and flattened row-major over
/// `(row, column, channel)`.
pub fn patchify(image: &Tensor, config: &ViTConfig) -> Result<Tensor> {
    let (s, c) = (config.image_size, config.channels);
    if image.shape() != [s, s, c] {
        return Err(Error::Config(format!(
            "image shape {:?} does not match config [{s}, {s}, {c}]",
            image.shape()
        )));
    }
    let data = patchify_into(image.data(), config, Vec::with_capacity(image.len()));
    Ok(Tensor::from_raw(vec![config.num_patches(), config.patch_dim()], data))
}

fn patchify_into(pixels: &[f64], config: &ViTConfig, mut out: Vec<f64>) -> Vec<f64> {
    let (s, p, c) = (config.image_size, config.patch_size, config.channels);
    let grid = s / p;
    for pr in 0..grid {
        for pc in 0..grid {
            for r in 0..p {
                let start = ((pr * p + r) * s + pc * p) * c;
                out.extend_from_slice(&pixels[start..start + p * c]);
            }
        }
    }
    out
}

/// Patchifies a `[B, H, W, C]` batch into `[B * N, P²C]`.
pub fn patchify_batch(images: &Tensor, config: &ViTConfig) -> Result<Tensor> {
    let (s, c) = (config.image_size, config.channels);
    let shape = images.shape();
    if shape.len() != 4 || shape[1..] != [s, s, c] {
        return Err(Error::Config(format!(
            "image batch shape {shape:?} does not match config [B, {s}, {s}, {c}]"
        )));
    }
    let per_image = s * s * c;
    let mut out = Vec::with_capacity(images.len());
    for img in images.data().chunks(per_image) {
        out = patchify_into(img, config, out);
    }
    Ok(Tensor::from_raw(vec![shape[0] * config.num_patches(), config.patch_dim()], out))
}

/// `x · W + b` over the last dimension of `x`.
pub fn linear(g: &mut Graph, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let in_dim = *shape.last().ok_or_else(|| Error::Shape("linear of scalar".into()))?;
    let out_dim = g.shape(w).get(1).copied().unwrap_or(0);
    let rows = shape.iter().product::<usize>() / in_dim;
    let flat = g.reshape(x, &[rows, in_dim])?;
    let y = g.matmul(flat, w)?;
    let y = g.add_broadcast(y, b)?;
    let mut out_shape = shape;
    *out_shape.last_mut().expect("non-empty") = out_dim;
    g.reshape(y, &out_shape)
}

/// Projects `[B * N, P²C]` patches to `[B, N + 1, D]` tokens: linear
/// projection, class token prepended, position embedding added.
pub fn embed(g: &mut Graph, patches: Var, batch: usize, vars: &ModelVars) -> Result<Var> {
    let rows = g.shape(patches)[0];
    if batch == 0 || !rows.is_multiple_of(batch) {
        return Err(Error::Config(format!("{rows} patch rows do not split into {batch} images")));
    }
    let n = rows / batch;
    let d = g.shape(vars.patch.0)[1];
    let projected = linear(g, patches, vars.patch)?;
    let projected = g.reshape(projected, &[batch, n, d])?;
    let cls = g.reshape(vars.cls_token, &[1, 1, d])?;
    let cls = if batch == 1 { cls } else { g.concat(&vec![cls; batch], 0)? };
    let tokens = g.concat(&[cls, projected], 1)?;
    g.add_broadcast(tokens, vars.pos_embed)
}

/// `softmax(Q Kᵗ / √d_k) V` for `[.., T, d_k]` inputs. Offers the scaled
/// score, the attention weight and the weighted value to `taps`.
pub fn attention_head(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    block: usize,
    taps: &mut HookTap,
) -> Result<Var> {
    let dk = *g.shape(q).last().ok_or_else(|| Error::Shape("attention of scalar".into()))?;
    let kt = g.transpose(k)?;
    let raw = g.matmul(q, kt)?;
    let scores = g.scale(raw, 1.0 / (dk as f64).sqrt());
    taps.offer(block, SparsePosition::SimilarityScore, scores);
    let weights = g.softmax_rows(scores);
    taps.offer(block, SparsePosition::AttentionWeight, weights);
    let weighted = g.matmul(weights, v)?;
    taps.offer(block, SparsePosition::WeightedValue, weighted);
    Ok(weighted)
}

fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let (b, t, d) = dims3(g, x)?;
    let x = g.reshape(x, &[b, t, heads, d / heads])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b * heads, t, d / heads])
}

fn merge_heads(g: &mut Graph, x: Var, batch: usize, heads: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (t, dk) = (shape[1], shape[2]);
    let x = g.reshape(x, &[batch, heads, t, dk])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[batch, t, heads * dk])
}

fn dims3(g: &Graph, x: Var) -> Result<(usize, usize, usize)> {
    match *g.shape(x) {
        [b, t, d] => Ok((b, t, d)),
        ref other => Err(Error::Shape(format!("expected [batch, tokens, hidden], got {other:?}"))),
    }
}

/// Multi-head self-attention on `[B, T, D]` with output projection.
pub fn multi_head_attention(
    g: &mut Graph,
    x: Var,
    block: &BlockVars,
    num_heads: usize,
    block_index: usize,
    taps: &mut HookTap,
) -> Result<Var> {
    let (b, _, d) = dims3(g, x)?;
    if num_heads == 0 || d % num_heads != 0 {
        return Err(Error::Config(format!("hidden size {d} not divisible by {num_heads} heads")));
    }
    let q = linear(g, x, block.q)?;
    let k = linear(g, x, block.k)?;
    let v = linear(g, x, block.v)?;
    let q = split_heads(g, q, num_heads)?;
    let k = split_heads(g, k, num_heads)?;
    let v = split_heads(g, v, num_heads)?;
    let heads = attention_head(g, q, k, v, block_index, taps)?;
    let merged = merge_heads(g, heads, b, num_heads)?;
    let out = linear(g, merged, block.out)?;
    taps.offer(block_index, SparsePosition::AttentionOutput, out);
    Ok(out)
}

/// Pre-norm block: `x + MSA(LN(x))`, then `x + MLP(LN(x))`.
pub fn encoder_block(
    g: &mut Graph,
    x: Var,
    block: &BlockVars,
    config: &ViTConfig,
    block_index: usize,
    taps: &mut HookTap,
) -> Result<Var> {
    let eps = config.layer_norm_eps;
    let h = g.layer_norm(x, block.norm1.0, block.norm1.1, eps)?;
    let attn = multi_head_attention(g, h, block, config.num_heads, block_index, taps)?;
    let x = g.add(x, attn)?;
    let h = g.layer_norm(x, block.norm2.0, block.norm2.1, eps)?;
    let pre = linear(g, h, block.fc1)?;
    taps.offer(block_index, SparsePosition::MlpGeluInput, pre);
    let act = g.gelu(pre);
    let mlp = linear(g, act, block.fc2)?;
    g.add(x, mlp)
}

/// Logits `[B, num_classes]` for a `[B, H, W, C]` batch. `taps` is cleared
/// and then filled for its position.
pub fn forward(
    g: &mut Graph,
    vars: &ModelVars,
    config: &ViTConfig,
    images: &Tensor,
    taps: &mut HookTap,
) -> Result<Var> {
    taps.clear();
    let batch = images.shape().first().copied().unwrap_or(0);
    if batch == 0 {
        return Err(Error::Config("empty image batch".into()));
    }
    let patches = g.constant(patchify_batch(images, config)?);
    let mut x = embed(g, patches, batch, vars)?;
    for (i, block) in vars.blocks.iter().enumerate() {
        x = encoder_block(g, x, block, config, i, taps)?;
    }
    let x = g.layer_norm(x, vars.norm.0, vars.norm.1, config.layer_norm_eps)?;
    let cls = g.slice(x, 1, 0, 1)?;
    let cls = g.reshape(cls, &[batch, config.hidden_size])?;
    linear(g, cls, vars.head)
}

/// Forward pass without keeping the graph: logits as a plain tensor.
pub fn logits(store: &ParamStore, config: &ViTConfig, images: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = ModelVars::bind(&mut g, store, config)?;
    let out = forward(&mut g, &vars, config, images, &mut HookTap::disabled())?;
    Ok(g.value(out).clone())
}
