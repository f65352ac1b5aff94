//! Full quality model: decoder followed by the MoE scoring head, plus the
//! per-record training objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Precision, Var};
use crate::decoder::{Decoder, DecoderConfig, StageFeatures};
use crate::error::{Error, Result};
use crate::losses::{load_balance_on_graph, z_loss_on_graph, LossBreakdown, LossWeights};
use crate::moe::{MoeConfig, MoeHead, RoutingRecord};
use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub decoder: DecoderConfig,
    pub moe: MoeConfig,
}

impl ModelConfig {
    /// Full-size layout: 4 layers, 6 queries, width 384, 6 heads, FFN 2048,
    /// 4 experts with Top-2 and expert width 1536.
    pub fn reference(stage3_channels: usize, stage4_channels: usize) -> Self {
        Self {
            decoder: DecoderConfig {
                stage3_channels,
                stage4_channels,
                ..DecoderConfig::default()
            },
            moe: MoeConfig::default(),
        }
    }

    /// Desk-scale model used for the synthetic generalization runs.
    pub fn small(stage3_channels: usize, stage4_channels: usize) -> Self {
        Self {
            decoder: DecoderConfig {
                num_layers: 2,
                num_queries: 6,
                embed_dim: 64,
                num_heads: 4,
                ffn_hidden: 128,
                gcn_depth: 3,
                grid_side: 6,
                stage3_channels,
                stage4_channels,
            },
            moe: MoeConfig {
                num_experts: 4,
                top_k: 2,
                expert_hidden: 128,
                embed_dim: 64,
            },
        }
    }

    /// Gradient-check sized model.
    pub fn tiny(stage3_channels: usize, stage4_channels: usize) -> Self {
        Self {
            decoder: DecoderConfig {
                num_layers: 1,
                num_queries: 3,
                embed_dim: 8,
                num_heads: 2,
                ffn_hidden: 5,
                gcn_depth: 3,
                grid_side: 2,
                stage3_channels,
                stage4_channels,
            },
            moe: MoeConfig {
                num_experts: 3,
                top_k: 2,
                expert_hidden: 5,
                embed_dim: 8,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        self.moe.validate()?;
        if self.moe.embed_dim != self.decoder.embed_dim {
            return Err(Error::Config(format!(
                "MoE width {} differs from decoder width {}",
                self.moe.embed_dim, self.decoder.embed_dim
            )));
        }
        Ok(())
    }
}

/// Affine map from MOS units to the `[0, 1]` training scale, fitted on the
/// training labels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelScale {
    pub min: f64,
    pub max: f64,
}

impl LabelScale {
    pub fn fit(labels: &[f64]) -> Result<Self> {
        let min = labels.iter().copied().fold(f64::INFINITY, f64::min);
        let max = labels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(min.is_finite() && max.is_finite()) || max <= min {
            return Err(Error::Argument(
                "label normalization needs at least two distinct finite labels".into(),
            ));
        }
        Ok(Self { min, max })
    }

    pub fn normalize(&self, mos: f64) -> f64 {
        (mos - self.min) / (self.max - self.min)
    }

    pub fn denormalize(&self, y: f64) -> f64 {
        self.min + y * (self.max - self.min)
    }
}

impl Default for LabelScale {
    fn default() -> Self {
        Self { min: 0.0, max: 1.0 }
    }
}

#[derive(Clone, Debug)]
pub struct QualityModel {
    pub config: ModelConfig,
    pub decoder: Decoder,
    pub head: MoeHead,
}

/// Handles produced by one model forward on a graph.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub tokens: Var,
    pub score: Var,
    pub aux: Var,
    pub z: Var,
    pub routing: RoutingRecord,
    pub expert_calls: usize,
}

/// Loss components and parameter gradients for one record.
#[derive(Clone, Debug)]
pub struct RecordGrad {
    pub prediction: f64,
    pub loss: LossBreakdown,
    pub grads: Gradients,
    pub routing: RoutingRecord,
}

impl QualityModel {
    /// Builds the model and its freshly initialized parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let decoder = Decoder::new(config.decoder.clone(), &mut store, &mut rng)?;
        let head = MoeHead::new(config.moe.clone(), &mut store, &mut rng)?;
        // start predictions at the centre of the normalized label range
        store.get_mut(head.regressor.bias).value = Tensor::scalar(0.5);
        Ok((
            Self {
                config,
                decoder,
                head,
            },
            store,
        ))
    }

    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        features: &StageFeatures,
    ) -> Result<ForwardOutput> {
        let tokens = self.decoder.forward(g, store, features)?;
        let head = self.head.forward(g, store, tokens)?;
        let aux = load_balance_on_graph(g, head.probs, &head.routing.mask)?;
        let z = z_loss_on_graph(g, head.logits);
        Ok(ForwardOutput {
            tokens,
            score: head.score,
            aux,
            z,
            routing: head.routing,
            expert_calls: head.expert_calls,
        })
    }

    pub fn predict(
        &self,
        store: &ParamStore,
        features: &StageFeatures,
        precision: Precision,
    ) -> Result<f64> {
        let mut g = Graph::new(precision);
        let out = self.forward(&mut g, store, features)?;
        Ok(g.value(out.score).data()[0])
    }

    /// Loss `|ŷ − y| + λ1·aux + λ2·z` for one record and its gradient, with
    /// both scaled by `weight` (the record's share of the batch mean).
    pub fn record_gradient(
        &self,
        store: &ParamStore,
        features: &StageFeatures,
        target: f64,
        loss_weights: &LossWeights,
        weight: f64,
        precision: Precision,
    ) -> Result<RecordGrad> {
        let mut g = Graph::new(precision);
        let out = self.forward(&mut g, store, features)?;
        let err = g.add_const(out.score, -target);
        let main = g.abs(err);
        let aux_w = g.scale(out.aux, loss_weights.aux);
        let z_w = g.scale(out.z, loss_weights.z);
        let total = g.add(main, aux_w)?;
        let total = g.add(total, z_w)?;
        let total = g.scale(total, weight);
        let adj = g.backward(total)?;
        let scalar = |v: Var| g.value(v).data()[0];
        let loss = LossBreakdown {
            main: scalar(main),
            aux: scalar(out.aux),
            z: scalar(out.z),
            total: scalar(main)
                + loss_weights.aux * scalar(out.aux)
                + loss_weights.z * scalar(out.z),
        };
        Ok(RecordGrad {
            prediction: scalar(out.score),
            loss,
            grads: g.param_gradients(&adj, store),
            routing: out.routing,
        })
    }
}
