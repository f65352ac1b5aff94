//! Query-token decoder: stage-4 guided query initialization, GCN query
//! refinement with learnable adjacency, cross-attention over a
//! partition-pooled stage-3 sequence, and a per-token FFN.
//!
//! Each of the `num_layers` layers runs pre-norm residual blocks:
//!
//! ```text
//! t += gcn(LN(t));  t += cross_attend(LN(t), S);  t += ffn(LN(t))
//! ```
//!
//! `S` is pooled and projected once per forward and shared by every layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{normal_tensor, xavier, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const GCN_DEPTH: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub num_queries: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub ffn_hidden: usize,
    pub gcn_depth: usize,
    pub grid_side: usize,
    pub stage3_channels: usize,
    pub stage4_channels: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_queries: 6,
            embed_dim: 384,
            num_heads: 6,
            ffn_hidden: 2048,
            gcn_depth: GCN_DEPTH,
            grid_side: 6,
            stage3_channels: 512,
            stage4_channels: 1024,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("num_queries", self.num_queries),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("ffn_hidden", self.ffn_hidden),
            ("grid_side", self.grid_side),
            ("stage3_channels", self.stage3_channels),
            ("stage4_channels", self.stage4_channels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.gcn_depth != GCN_DEPTH {
            return Err(Error::Config(format!(
                "gcn_depth is fixed at {GCN_DEPTH}, got {}",
                self.gcn_depth
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// Stage-3 and stage-4 backbone maps of one image, `h×w×C` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct StageFeatures {
    pub stage3: Tensor,
    pub stage4: Tensor,
}

impl StageFeatures {
    pub fn validate(&self, config: &DecoderConfig) -> Result<()> {
        for (name, t, c) in [
            ("stage3", &self.stage3, config.stage3_channels),
            ("stage4", &self.stage4, config.stage4_channels),
        ] {
            if t.shape().len() != 3 || t.shape()[2] != c {
                return Err(Error::dim(name, t.shape(), &[0, 0, c]));
            }
            if !t.is_finite() {
                return Err(Error::Argument(format!(
                    "{name} contains non-finite values"
                )));
            }
        }
        let (h3, w3) = (self.stage3.shape()[0], self.stage3.shape()[1]);
        if h3 < config.grid_side || w3 < config.grid_side {
            return Err(Error::Config(format!(
                "grid side {} exceeds stage3 extent {h3}×{w3}",
                config.grid_side
            )));
        }
        Ok(())
    }
}

/// Dense affine map `x·W + b` with `W: in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(rng, fan_in, fan_out));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self { weight, bias }
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    pub fn param_count(fan_in: usize, fan_out: usize) -> usize {
        fan_in * fan_out + fan_out
    }
}

#[derive(Clone, Debug)]
pub struct GcnBlock {
    pub adjacency: [ParamId; GCN_DEPTH],
    pub weights: [ParamId; GCN_DEPTH],
}

impl GcnBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        n: usize,
        d: usize,
        rng: &mut R,
    ) -> Self {
        let adjacency = std::array::from_fn(|i| {
            let mut a = normal_tensor(rng, &[n, n], 0.01);
            for j in 0..n {
                a.data_mut()[j * n + j] += 1.0;
            }
            store.add(format!("{name}.adjacency{}", i + 1), a)
        });
        let weights =
            std::array::from_fn(|i| store.add(format!("{name}.weight{i}"), xavier(rng, d, d)));
        Self { adjacency, weights }
    }
}

#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub num_heads: usize,
}

impl CrossAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        num_heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), d, d, rng),
            key: Linear::new(store, &format!("{name}.key"), d, d, rng),
            value: Linear::new(store, &format!("{name}.value"), d, d, rng),
            output: Linear::new(store, &format!("{name}.output"), d, d, rng),
            num_heads,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

impl Ffn {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, d, rng),
        }
    }

    /// Trainable scalars of a `d → hidden → d` FFN with biases.
    pub fn param_count(d: usize, hidden: usize) -> usize {
        Linear::param_count(d, hidden) + Linear::param_count(hidden, d)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub gcn: GcnBlock,
    pub attention: CrossAttention,
    pub ffn: Ffn,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub query_init: ParamId,
    pub stage4_proj: Linear,
    pub stage3_proj: Linear,
    pub layers: Vec<DecoderLayer>,
}

impl Decoder {
    pub fn new<R: Rng>(config: DecoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (n, d) = (config.num_queries, config.embed_dim);
        let query_init = store.add("decoder.query_init", normal_tensor(rng, &[n, d], 0.02));
        let stage4_proj = Linear::new(store, "decoder.stage4_proj", config.stage4_channels, d, rng);
        let stage3_proj = Linear::new(store, "decoder.stage3_proj", config.stage3_channels, d, rng);
        let layers = (0..config.num_layers)
            .map(|l| DecoderLayer {
                gcn: GcnBlock::new(store, &format!("decoder.layer{l}.gcn"), n, d, rng),
                attention: CrossAttention::new(
                    store,
                    &format!("decoder.layer{l}.attn"),
                    d,
                    config.num_heads,
                    rng,
                ),
                ffn: Ffn::new(
                    store,
                    &format!("decoder.layer{l}.ffn"),
                    d,
                    config.ffn_hidden,
                    rng,
                ),
            })
            .collect();
        Ok(Self {
            config,
            query_init,
            stage4_proj,
            stage3_proj,
            layers,
        })
    }

    /// Runs the full decoder and returns the final `N×D` token matrix.
    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        features: &StageFeatures,
    ) -> Result<Var> {
        features.validate(&self.config)?;
        let mut tokens = init_queries(
            g,
            store,
            &features.stage4,
            self.query_init,
            &self.stage4_proj,
        )?;
        let seq = partition_pool(
            g,
            store,
            &features.stage3,
            self.config.grid_side,
            &self.stage3_proj,
        )?;
        for layer in &self.layers {
            tokens = self.layer_forward(g, store, layer, tokens, seq)?;
        }
        Ok(tokens)
    }

    pub fn layer_forward<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        layer: &DecoderLayer,
        tokens: Var,
        seq: Var,
    ) -> Result<Var> {
        let normed = g.layer_norm(tokens, LAYER_NORM_EPS);
        let refined = gcn_refine(g, store, normed, &layer.gcn)?;
        let tokens = g.add(tokens, refined)?;

        let normed = g.layer_norm(tokens, LAYER_NORM_EPS);
        let attended = cross_attend(g, store, normed, seq, &layer.attention)?;
        let tokens = g.add(tokens, attended)?;

        let normed = g.layer_norm(tokens, LAYER_NORM_EPS);
        let mixed = ffn(g, store, normed, &layer.ffn)?;
        g.add(tokens, mixed)
    }
}

fn spatial_rows(map: &Tensor) -> Result<Tensor> {
    let shape = map.shape();
    if shape.len() != 3 {
        return Err(Error::dim("spatial map", shape, &[0, 0, 0]));
    }
    map.clone().reshape(&[shape[0] * shape[1], shape[2]])
}

/// `Q′ = broadcast(GAP(P4(stage4))) + Q_init`.
pub fn init_queries<'a>(
    g: &mut Graph<'a>,
    store: &'a ParamStore,
    stage4: &Tensor,
    query_init: ParamId,
    proj: &Linear,
) -> Result<Var> {
    let c4 = store.value(proj.weight).shape()[0];
    if stage4.shape().last() != Some(&c4) {
        return Err(Error::dim(
            "init_queries",
            stage4.shape(),
            store.value(proj.weight).shape(),
        ));
    }
    let positions = g.constant(spatial_rows(stage4)?);
    let projected = proj.forward(g, store, positions)?;
    let context = g.mean_rows(projected);
    let q = g.param(store, query_init);
    g.add_row(q, context)
}

/// Three-layer message passing among query tokens:
/// `Q1 = relu(A1·Q·W0)`, `Q2 = relu(A2·Q1·W1)`, `Q3 = A3·Q2·W2`.
pub fn gcn_refine<'a>(
    g: &mut Graph<'a>,
    store: &'a ParamStore,
    q: Var,
    block: &GcnBlock,
) -> Result<Var> {
    let mut h = q;
    for layer in 0..GCN_DEPTH {
        let a = g.param(store, block.adjacency[layer]);
        let w = g.param(store, block.weights[layer]);
        let mixed = g.matmul(a, h)?;
        h = g.matmul(mixed, w)?;
        if layer + 1 < GCN_DEPTH {
            h = g.relu(h);
        }
    }
    Ok(h)
}

/// Half-open `[start, end)` bounds of cell `i` when splitting `extent`
/// into `cells` floor-aligned parts.
pub fn cell_bounds(extent: usize, cells: usize, i: usize) -> (usize, usize) {
    (i * extent / cells, (i + 1) * extent / cells)
}

/// Averages an `h×w×C` map over a `grid×grid` partition. Row `r` of the
/// result is cell `(r / grid, r % grid)`.
pub fn pool_cells(map: &Tensor, grid: usize) -> Result<Tensor> {
    let shape = map.shape();
    if shape.len() != 3 {
        return Err(Error::dim("pool_cells", shape, &[0, 0, 0]));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if grid == 0 || grid > h || grid > w {
        return Err(Error::Config(format!(
            "grid side {grid} exceeds spatial extent {h}×{w}"
        )));
    }
    let mut out = vec![0.0; grid * grid * c];
    for ci in 0..grid {
        let (r0, r1) = cell_bounds(h, grid, ci);
        for cj in 0..grid {
            let (c0, c1) = cell_bounds(w, grid, cj);
            let dst = &mut out[(ci * grid + cj) * c..(ci * grid + cj + 1) * c];
            for y in r0..r1 {
                for x in c0..c1 {
                    let src = &map.data()[(y * w + x) * c..(y * w + x + 1) * c];
                    for (o, v) in dst.iter_mut().zip(src) {
                        *o += v;
                    }
                }
            }
            let count = ((r1 - r0) * (c1 - c0)) as f64;
            dst.iter_mut().for_each(|v| *v /= count);
        }
    }
    Tensor::new(&[grid * grid, c], out)
}

/// Partition-pools stage-3 and projects each cell to the embedding width.
pub fn partition_pool<'a>(
    g: &mut Graph<'a>,
    store: &'a ParamStore,
    stage3: &Tensor,
    grid: usize,
    proj: &Linear,
) -> Result<Var> {
    let pooled = g.constant(pool_cells(stage3, grid)?);
    proj.forward(g, store, pooled)
}

/// Multi-head scaled dot-product attention with `q` as queries and the rows
/// of `s` as keys and values.
pub fn cross_attend<'a>(
    g: &mut Graph<'a>,
    store: &'a ParamStore,
    q: Var,
    s: Var,
    attn: &CrossAttention,
) -> Result<Var> {
    let d = g.value(q).cols();
    if !d.is_multiple_of(attn.num_heads) {
        return Err(Error::Config(format!(
            "embed_dim {d} is not divisible by num_heads {}",
            attn.num_heads
        )));
    }
    let head_dim = d / attn.num_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let queries = attn.query.forward(g, store, q)?;
    let keys = attn.key.forward(g, store, s)?;
    let values = attn.value.forward(g, store, s)?;
    let mut heads = Vec::with_capacity(attn.num_heads);
    for h in 0..attn.num_heads {
        let qh = g.slice_cols(queries, h * head_dim, head_dim)?;
        let kh = g.slice_cols(keys, h * head_dim, head_dim)?;
        let vh = g.slice_cols(values, h * head_dim, head_dim)?;
        let logits = g.matmul_nt(qh, kh)?;
        let logits = g.scale(logits, scale);
        let weights = g.softmax(logits)?;
        heads.push(g.matmul(weights, vh)?);
    }
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    attn.output.forward(g, store, joined)
}

/// `relu(x·W1 + b1)·W2 + b2`, applied per token.
pub fn ffn<'a>(g: &mut Graph<'a>, store: &'a ParamStore, x: Var, weights: &Ffn) -> Result<Var> {
    let hidden = weights.up.forward(g, store, x)?;
    let hidden = g.relu(hidden);
    weights.down.forward(g, store, hidden)
}
