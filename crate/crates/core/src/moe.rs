//! Post-decoder sparse mixture-of-experts head.
//!
//! Tokens are gated by an affine router, the `K` largest logits per token are
//! kept (the rest are masked to `-inf` before the softmax), and the selected
//! expert MLPs are mixed with the resulting sparse weights. A learnable scalar
//! bypass adds `γ·X` back before a per-token linear regressor whose outputs
//! are averaged into one quality score.
//!
//! The Top-K mask is a constant during backpropagation: gradients flow
//! through the softmax over the kept logits and through the selected experts.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::decoder::{Ffn, Linear};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{softmax_lastdim, topk_indices, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub num_experts: usize,
    pub top_k: usize,
    pub expert_hidden: usize,
    pub embed_dim: usize,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            num_experts: 4,
            top_k: 2,
            expert_hidden: 1536,
            embed_dim: 384,
        }
    }
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::Config(format!(
                "top_k must satisfy 1 <= K <= num_experts ({}), got {}",
                self.num_experts, self.top_k
            )));
        }
        if self.expert_hidden == 0 || self.embed_dim == 0 {
            return Err(Error::Config(
                "expert_hidden and embed_dim must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Trainable scalars of one `d → hidden → d` expert MLP with biases.
pub fn expert_param_count(embed_dim: usize, hidden: usize) -> usize {
    2 * embed_dim * hidden + hidden + embed_dim
}

/// Scalars in all experts of a head (gate excluded).
pub fn experts_param_count(config: &MoeConfig) -> usize {
    config.num_experts * expert_param_count(config.embed_dim, config.expert_hidden)
}

pub fn gate_param_count(config: &MoeConfig) -> usize {
    config.embed_dim * config.num_experts + config.num_experts
}

/// Gate logits, Top-K mask, dense and sparse routing probabilities for one
/// MoE pass over `N` tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingRecord {
    pub logits: Tensor,
    pub mask: Tensor,
    pub probs: Tensor,
    pub sparse_weights: Tensor,
    /// Selected experts per token, ascending.
    pub assignments: Vec<Vec<usize>>,
}

impl RoutingRecord {
    pub fn num_tokens(&self) -> usize {
        self.logits.rows()
    }

    pub fn num_experts(&self) -> usize {
        self.logits.cols()
    }

    /// Token indices routed to expert `e`, ascending.
    pub fn tokens_for(&self, e: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, sel)| sel.contains(&e))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn keep_bits(&self) -> Vec<bool> {
        self.mask.data().iter().map(|&m| m == 1.0).collect()
    }

    /// Smallest gap between the K-th and (K+1)-th logit over all tokens;
    /// `inf` when `K == N_E`. A small margin means the selection can flip
    /// under a small perturbation.
    pub fn selection_margin(&self) -> f64 {
        let e = self.num_experts();
        let mut margin = f64::INFINITY;
        for (i, sel) in self.assignments.iter().enumerate() {
            if sel.len() == e {
                continue;
            }
            let row = self.logits.row(i);
            let kept_min = sel.iter().map(|&j| row[j]).fold(f64::INFINITY, f64::min);
            let dropped_max = (0..e)
                .filter(|j| !sel.contains(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            margin = margin.min(kept_min - dropped_max);
        }
        margin
    }
}

/// Builds the routing record from finite gate logits.
pub fn route(logits: &Tensor, k: usize) -> Result<RoutingRecord> {
    if !logits.is_finite() {
        return Err(Error::Routing("gate logits must be finite".into()));
    }
    let (n, e) = logits.dims2();
    let mut mask = Tensor::zeros(&[n, e]);
    let mut masked = Tensor::full(&[n, e], f64::NEG_INFINITY);
    let mut assignments = Vec::with_capacity(n);
    for i in 0..n {
        let sel = topk_indices(logits.row(i), k)?;
        for &j in &sel {
            mask.data_mut()[i * e + j] = 1.0;
            masked.data_mut()[i * e + j] = logits.get2(i, j);
        }
        assignments.push(sel);
    }
    let logits2 = logits.clone().reshape(&[n, e])?;
    Ok(RoutingRecord {
        probs: softmax_lastdim(&logits2)?,
        sparse_weights: softmax_lastdim(&masked)?,
        logits: logits2,
        mask,
        assignments,
    })
}

#[derive(Clone, Debug)]
pub struct MoeHead {
    pub config: MoeConfig,
    pub gate: Linear,
    pub experts: Vec<Ffn>,
    pub gamma: ParamId,
    pub regressor: Linear,
}

/// Graph handles and routing produced by one head forward.
#[derive(Clone, Debug)]
pub struct HeadOutput {
    pub score: Var,
    pub logits: Var,
    pub probs: Var,
    pub routing: RoutingRecord,
    /// Number of (token, expert) MLP evaluations performed.
    pub expert_calls: usize,
}

impl MoeHead {
    pub fn new<R: Rng>(config: MoeConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let gate = Linear::new(store, "head.gate", d, config.num_experts, rng);
        let experts = (0..config.num_experts)
            .map(|e| {
                Ffn::new(
                    store,
                    &format!("head.expert{e}"),
                    d,
                    config.expert_hidden,
                    rng,
                )
            })
            .collect();
        let gamma = store.add("head.gamma", Tensor::scalar(1.0));
        let regressor = Linear::new(store, "head.regressor", d, 1, rng);
        Ok(Self {
            config,
            gate,
            experts,
            gamma,
            regressor,
        })
    }

    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        x: Var,
    ) -> Result<HeadOutput> {
        let logits = gate(g, store, x, &self.gate)?;
        let routing = route(g.value(logits), self.config.top_k)?;
        let probs = g.softmax(logits)?;
        let masked = g.mask_neg_inf(logits, routing.keep_bits())?;
        let sparse = g.softmax(masked)?;
        let (mixed, expert_calls) = moe_forward(g, store, x, sparse, &routing, &self.experts)?;
        let combined = bypass_combine(g, store, mixed, x, self.gamma)?;
        let score = score_from_tokens(g, store, combined, &self.regressor)?;
        Ok(HeadOutput {
            score,
            logits,
            probs,
            routing,
            expert_calls,
        })
    }
}

/// `g_i = W_g·x_i + b_g` for every token.
pub fn gate<'a>(g: &mut Graph<'a>, store: &'a ParamStore, x: Var, gate: &Linear) -> Result<Var> {
    gate.forward(g, store, x)
}

/// Weighted sum of the selected experts per token. `sparse` holds the sparse
/// routing weights on the graph; experts are only evaluated on the tokens
/// routed to them. Returns the mixture and the number of expert evaluations.
pub fn moe_forward<'a>(
    g: &mut Graph<'a>,
    store: &'a ParamStore,
    x: Var,
    sparse: Var,
    routing: &RoutingRecord,
    experts: &[Ffn],
) -> Result<(Var, usize)> {
    let (n, d) = g.value(x).dims2();
    if routing.num_tokens() != n || routing.num_experts() != experts.len() {
        return Err(Error::dim(
            "moe_forward",
            &[n, experts.len()],
            routing.logits.shape(),
        ));
    }
    let mut out: Option<Var> = None;
    let mut calls = 0;
    for (e, expert) in experts.iter().enumerate() {
        let rows = routing.tokens_for(e);
        if rows.is_empty() {
            continue;
        }
        calls += rows.len();
        let picked = g.gather_rows(x, rows.clone())?;
        let y = crate::decoder::ffn(g, store, picked, expert)?;
        let w = g.gather_elems(sparse, rows.iter().map(|&i| (i, e)).collect())?;
        let weighted = g.mul_col(y, w)?;
        let placed = g.scatter_rows(weighted, rows, n)?;
        out = Some(match out {
            Some(acc) => g.add(acc, placed)?,
            None => placed,
        });
    }
    let out = out.ok_or_else(|| Error::Routing("no expert selected for any token".into()))?;
    debug_assert_eq!(g.value(out).dims2(), (n, d));
    Ok((out, calls))
}

/// `y_moe + γ·x`.
pub fn bypass_combine<'a>(
    g: &mut Graph<'a>,
    store: &'a ParamStore,
    y_moe: Var,
    x: Var,
    gamma: ParamId,
) -> Result<Var> {
    let gm = g.param(store, gamma);
    let skip = g.mul_scalar(x, gm)?;
    g.add(y_moe, skip)
}

/// Per-token `w·token + b`, averaged over tokens.
pub fn score_from_tokens<'a>(
    g: &mut Graph<'a>,
    store: &'a ParamStore,
    tokens: Var,
    regressor: &Linear,
) -> Result<Var> {
    let per_token = regressor.forward(g, store, tokens)?;
    Ok(g.mean_all(per_token))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::normal_tensor;
    use crate::tensor::matmul;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        normal_tensor(&mut rng(seed), shape, 1.0)
    }

    fn set(store: &mut ParamStore, id: ParamId, t: Tensor) {
        store.get_mut(id).value = t;
    }

    #[test]
    fn param_counts_match_reported_totals() {
        let cfg = |e| MoeConfig {
            num_experts: e,
            ..MoeConfig::default()
        };
        assert_eq!(experts_param_count(&cfg(2)), 2_363_136);
        assert_eq!(experts_param_count(&cfg(4)), 4_726_272);
        assert_eq!(experts_param_count(&cfg(8)), 9_452_544);
        assert_eq!(expert_param_count(384, 0), 384);
        assert_eq!(gate_param_count(&cfg(4)), 384 * 4 + 4);
    }

    #[test]
    fn config_rejects_bad_k() {
        assert!(MoeConfig {
            top_k: 0,
            ..MoeConfig::default()
        }
        .validate()
        .is_err());
        assert!(MoeConfig {
            top_k: 5,
            ..MoeConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn gate_examples() {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "gate", 3, 4, &mut rng(0));
        let bias = Tensor::new(&[4], vec![0.1, -0.2, 0.3, 0.0]).unwrap();
        set(&mut store, lin.bias, bias.clone());
        let mut g = Graph::default();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let l = gate(&mut g, &store, x, &lin).unwrap();
        for i in 0..2 {
            assert_eq!(g.value(l).row(i), bias.data());
        }

        let x_in = random(&[1, 3], 1);
        let mut expected = matmul(&x_in, store.value(lin.weight)).unwrap();
        for (v, b) in expected.data_mut().iter_mut().zip(bias.data()) {
            *v += b;
        }
        let mut g = Graph::default();
        let x = g.constant(x_in);
        let l = gate(&mut g, &store, x, &lin).unwrap();
        assert!(g.value(l).max_abs_diff(&expected) < 1e-15);

        set(&mut store, lin.weight, Tensor::zeros(&[3, 4]));
        set(&mut store, lin.bias, Tensor::zeros(&[4]));
        let mut g = Graph::default();
        let x = g.constant(random(&[2, 3], 2));
        let l = gate(&mut g, &store, x, &lin).unwrap();
        assert_eq!(g.value(l), &Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn route_closed_form_two_way() {
        let logits = Tensor::from_rows(&[&[2.0, 1.0, 0.0, -1.0]]);
        let r = route(&logits, 2).unwrap();
        assert_eq!(r.assignments, vec![vec![0, 1]]);
        assert_eq!(r.mask.data(), &[1.0, 1.0, 0.0, 0.0]);
        let e = std::f64::consts::E;
        let w = r.sparse_weights.data();
        assert!((w[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((w[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert_eq!(&w[2..], &[0.0, 0.0]);
        assert!((w[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn route_full_k_is_dense_softmax() {
        let logits = random(&[5, 4], 3);
        let r = route(&logits, 4).unwrap();
        assert!(r.sparse_weights.max_abs_diff(&r.probs) < 1e-15);
        assert_eq!(r.selection_margin(), f64::INFINITY);
    }

    #[test]
    fn route_single_expert_collapse() {
        let logits = Tensor::from_rows(&[&[0.3, 0.9, 0.9, -1.0], &[5.0, 0.0, 1.0, 2.0]]);
        let r = route(&logits, 1).unwrap();
        assert_eq!(r.sparse_weights.row(0), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(r.sparse_weights.row(1), &[1.0, 0.0, 0.0, 0.0]);
    }

    fn head(seed: u64, experts: usize, k: usize) -> (ParamStore, MoeHead) {
        let mut store = ParamStore::new();
        let cfg = MoeConfig {
            num_experts: experts,
            top_k: k,
            expert_hidden: 7,
            embed_dim: 5,
        };
        let h = MoeHead::new(cfg, &mut store, &mut rng(seed)).unwrap();
        (store, h)
    }

    fn mixture(store: &ParamStore, h: &MoeHead, x_in: &Tensor) -> (Tensor, RoutingRecord, usize) {
        let mut g = Graph::default();
        let x = g.constant(x_in.clone());
        let logits = gate(&mut g, store, x, &h.gate).unwrap();
        let routing = route(g.value(logits), h.config.top_k).unwrap();
        let masked = g.mask_neg_inf(logits, routing.keep_bits()).unwrap();
        let sparse = g.softmax(masked).unwrap();
        let (y, calls) = moe_forward(&mut g, store, x, sparse, &routing, &h.experts).unwrap();
        (g.value(y).clone(), routing, calls)
    }

    fn expert_output(store: &ParamStore, f: &Ffn, x: &Tensor) -> Tensor {
        let mut g = Graph::default();
        let xv = g.constant(x.clone());
        let y = crate::decoder::ffn(&mut g, store, xv, f).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn identity_experts_reproduce_input() {
        // expert(x) = relu(x·I)·I - relu(-x·I)·I = x, built from two halves
        let (mut store, h) = head(4, 3, 2);
        let d = 5;
        for f in &h.experts {
            let mut up = Tensor::zeros(&[d, 7]);
            let mut down = Tensor::zeros(&[7, d]);
            for j in 0..d.min(3) {
                up.data_mut()[j * 7 + 2 * j] = 1.0;
                up.data_mut()[j * 7 + 2 * j + 1] = -1.0;
                down.data_mut()[2 * j * d + j] = 1.0;
                down.data_mut()[(2 * j + 1) * d + j] = -1.0;
            }
            set(&mut store, f.up.weight, up);
            set(&mut store, f.up.bias, Tensor::zeros(&[7]));
            set(&mut store, f.down.weight, down);
            set(&mut store, f.down.bias, Tensor::zeros(&[d]));
        }
        let mut x_in = random(&[4, d], 5);
        for i in 0..4 {
            for j in 3..d {
                x_in.data_mut()[i * d + j] = 0.0;
            }
        }
        let (y, _, _) = mixture(&store, &h, &x_in);
        assert!(y.max_abs_diff(&x_in) < 1e-14);
    }

    #[test]
    fn top1_is_argmax_expert() {
        let (store, h) = head(6, 4, 1);
        let x_in = random(&[3, 5], 7);
        let (y, routing, calls) = mixture(&store, &h, &x_in);
        assert_eq!(calls, 3);
        for i in 0..3 {
            let e = routing.assignments[i][0];
            let row = Tensor::new(&[1, 5], x_in.row(i).to_vec()).unwrap();
            let expected = expert_output(&store, &h.experts[e], &row);
            assert_eq!(y.row(i), expected.data());
        }
    }

    #[test]
    fn full_k_matches_dense_mixture_oracle() {
        let (store, h) = head(8, 4, 4);
        let x_in = random(&[6, 5], 9);
        let (y, routing, calls) = mixture(&store, &h, &x_in);
        assert_eq!(calls, 24);
        let mut expected = Tensor::zeros(&[6, 5]);
        for (e, f) in h.experts.iter().enumerate() {
            let out = expert_output(&store, f, &x_in);
            for i in 0..6 {
                let p = routing.probs.get2(i, e);
                for j in 0..5 {
                    expected.data_mut()[i * 5 + j] += p * out.get2(i, j);
                }
            }
        }
        assert!(y.max_abs_diff(&expected) < 1e-6);
    }

    #[test]
    fn bypass_examples() {
        let mut store = ParamStore::new();
        let gamma = store.add("gamma", Tensor::scalar(0.0));
        let run = |store: &ParamStore, y: Tensor, x: Tensor| {
            let mut g = Graph::default();
            let yv = g.constant(y);
            let xv = g.constant(x);
            let out = bypass_combine(&mut g, store, yv, xv, gamma).unwrap();
            g.value(out).clone()
        };
        let y = random(&[2, 3], 10);
        assert_eq!(run(&store, y.clone(), random(&[2, 3], 11)), y);
        set(&mut store, gamma, Tensor::scalar(1.0));
        let x = random(&[2, 3], 12);
        assert_eq!(run(&store, Tensor::zeros(&[2, 3]), x.clone()), x);
        set(&mut store, gamma, Tensor::scalar(2.0));
        assert_eq!(
            run(&store, Tensor::scalar(3.0), Tensor::scalar(1.0)).data(),
            &[5.0]
        );
    }

    #[test]
    fn gamma_gradient_equals_input() {
        let mut store = ParamStore::new();
        let gamma = store.add("gamma", Tensor::scalar(0.7));
        let x_in = random(&[3, 4], 13);
        for k in 0..x_in.numel() {
            let mut g = Graph::default();
            let y = g.constant(random(&[3, 4], 14));
            let x = g.constant(x_in.clone());
            let out = bypass_combine(&mut g, &store, y, x, gamma).unwrap();
            let picked = g.gather_elems(out, vec![(k / 4, k % 4)]).unwrap();
            let s = g.sum_all(picked);
            let adj = g.backward(s).unwrap();
            let grads = g.param_gradients(&adj, &store);
            assert_eq!(grads.get(gamma).data()[0], x_in.data()[k]);
        }
    }

    #[test]
    fn score_examples() {
        let mut store = ParamStore::new();
        let reg = Linear::new(&mut store, "reg", 3, 1, &mut rng(15));
        set(&mut store, reg.bias, Tensor::scalar(0.25));
        let run = |store: &ParamStore, t: Tensor| {
            let mut g = Graph::default();
            let tv = g.constant(t);
            let s = score_from_tokens(&mut g, store, tv, &reg).unwrap();
            g.value(s).data()[0]
        };
        let tokens = Tensor::from_rows(&[&[1.0, 2.0, -1.0], &[0.5, 0.0, 3.0]]);
        let w = store.value(reg.weight).data().to_vec();
        let s1 = w[0] + 2.0 * w[1] - w[2] + 0.25;
        let s2 = 0.5 * w[0] + 3.0 * w[2] + 0.25;
        assert!((run(&store, tokens) - (s1 + s2) / 2.0).abs() < 1e-15);

        let one = Tensor::from_rows(&[&[0.3, -0.2, 0.9]]);
        let same = Tensor::new(&[4, 3], [0.3, -0.2, 0.9].repeat(4)).unwrap();
        assert!((run(&store, one) - run(&store, same)).abs() < 1e-15);

        set(&mut store, reg.weight, Tensor::zeros(&[3, 1]));
        assert_eq!(run(&store, random(&[4, 3], 16)), 0.25);
    }
}
