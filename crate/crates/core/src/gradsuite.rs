//! End-to-end gradient check of the full model on a tiny configuration.
//!
//! Every parameter group is compared against central differences at several
//! jittered points. Points whose Top-K selection sits within
//! [`MIN_ROUTING_MARGIN`] of a tie are redrawn, since a perturbation there can
//! flip the routing and the loss is not differentiable across the flip.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Graph, Precision};
use crate::data::{synth_record, FeatureRecord, SynthDims};
use crate::error::{Error, Result};
use crate::gradcheck::{gradient_check, relative_error};
use crate::losses::LossWeights;
use crate::model::{ModelConfig, QualityModel};
use crate::params::{normal_tensor, Gradients, ParamStore};

pub const SUITE_STEP: f64 = 1e-5;
pub const SUITE_TOLERANCE: f64 = 1e-4;
pub const SUITE_POINTS: usize = 3;
pub const MIN_ROUTING_MARGIN: f64 = 1e-3;
const JITTER_STD: f64 = 0.05;
const MAX_REDRAWS: usize = 50;

pub const GROUPS: [&str; 12] = [
    "Q_init",
    "P4",
    "P3",
    "A",
    "W",
    "attention",
    "FFN",
    "W_g",
    "b_g",
    "experts",
    "gamma",
    "score regression",
];

/// Parameter group a model parameter belongs to, by name.
pub fn group_of(name: &str) -> Option<&'static str> {
    let g = if name == "decoder.query_init" {
        "Q_init"
    } else if name.starts_with("decoder.stage4_proj.") {
        "P4"
    } else if name.starts_with("decoder.stage3_proj.") {
        "P3"
    } else if name.contains(".gcn.adjacency") {
        "A"
    } else if name.contains(".gcn.weight") {
        "W"
    } else if name.contains(".attn.") {
        "attention"
    } else if name.starts_with("decoder.") && name.contains(".ffn.") {
        "FFN"
    } else if name == "head.gate.weight" {
        "W_g"
    } else if name == "head.gate.bias" {
        "b_g"
    } else if name.starts_with("head.expert") {
        "experts"
    } else if name == "head.gamma" {
        "gamma"
    } else if name.starts_with("head.regressor.") {
        "score regression"
    } else {
        return None;
    };
    Some(g)
}

#[derive(Clone, Debug, Default)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Negates the analytic gradient of this group, to confirm the suite
    /// catches a wrong backward pass.
    pub flip_group: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupResult {
    pub group: String,
    pub max_rel_err: f64,
    pub max_abs_grad: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub groups: Vec<GroupResult>,
    pub points: usize,
    pub redraws: usize,
    /// Largest deviation of the closed-form `gamma` gradient from central
    /// differences over all points.
    pub gamma_closed_form_err: f64,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn group(&self, name: &str) -> Option<&GroupResult> {
        self.groups.iter().find(|g| g.group == name)
    }
}

struct Fixture {
    model: QualityModel,
    record: FeatureRecord,
    target: f64,
    weights: LossWeights,
}

impl Fixture {
    fn loss_and_grad(&self, store: &ParamStore) -> Result<(f64, Gradients)> {
        let out = self.model.record_gradient(
            store,
            &self.record.features(),
            self.target,
            &self.weights,
            1.0,
            Precision::Double,
        )?;
        Ok((out.loss.total, out.grads))
    }

    /// Returns the prediction, the routing margin and the closed-form
    /// `∂L/∂gamma = sign(ŷ − y) · mean_i(w · x_i)`.
    fn probe(&self, store: &ParamStore) -> Result<(f64, f64, f64)> {
        let mut g = Graph::new(Precision::Double);
        let out = self.model.forward(&mut g, store, &self.record.features())?;
        let pred = g.value(out.score).data()[0];
        let w = store.value(self.model.head.regressor.weight);
        let x = g.value(out.tokens);
        let mut acc = 0.0;
        for i in 0..x.rows() {
            acc += x
                .row(i)
                .iter()
                .zip(w.data())
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
        let closed = (pred - self.target).signum() * acc / x.rows() as f64;
        Ok((pred, out.routing.selection_margin(), closed))
    }
}

fn jitter(base: &ParamStore, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut s = base.clone();
    for p in s.iter_mut() {
        let noise = normal_tensor(rng, p.value.shape(), JITTER_STD);
        p.value.add_assign(&noise).expect("same shape");
    }
    s
}

/// Runs the gradient suite on the tiny model with one synthetic record.
pub fn run_gradient_suite(options: &SuiteOptions) -> Result<SuiteReport> {
    let start = Instant::now();
    let dims = SynthDims {
        stage3: [4, 4, 4],
        stage4: [2, 2, 6],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let record = synth_record(&mut rng, "gradcheck".into(), &dims);
    let (model, base) = QualityModel::new(
        ModelConfig::tiny(dims.stage3[2], dims.stage4[2]),
        options.seed,
    )?;
    if let Some(flip) = &options.flip_group {
        if !GROUPS.contains(&flip.as_str()) {
            return Err(Error::Argument(format!("unknown parameter group `{flip}`")));
        }
    }
    let flip_ids: Vec<usize> = base
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            options
                .flip_group
                .as_deref()
                .is_some_and(|f| group_of(&p.name) == Some(f))
        })
        .map(|(i, _)| i)
        .collect();

    let mut fixture = Fixture {
        model,
        record,
        target: 0.0,
        weights: LossWeights::default(),
    };
    let mut worst: BTreeMap<&'static str, (f64, f64)> =
        GROUPS.iter().map(|&g| (g, (0.0, 0.0))).collect();
    let mut redraws = 0;
    let mut gamma_err: f64 = 0.0;
    for _ in 0..SUITE_POINTS {
        let mut point = None;
        for _ in 0..MAX_REDRAWS {
            let candidate = jitter(&base, &mut rng);
            let (pred, margin, _) = fixture.probe(&candidate)?;
            if margin > MIN_ROUTING_MARGIN {
                point = Some((candidate, pred));
                break;
            }
            redraws += 1;
        }
        let (point, pred) = point.ok_or_else(|| {
            Error::Oracle(format!(
                "no point with routing margin above {MIN_ROUTING_MARGIN} in {MAX_REDRAWS} draws"
            ))
        })?;
        // keep the absolute-value loss well away from its kink
        fixture.target = pred - 0.5;

        let objective = |s: &ParamStore| -> Result<(f64, Gradients)> {
            let (v, mut g) = fixture.loss_and_grad(s)?;
            for &i in &flip_ids {
                g.tensors[i] = g.tensors[i].map(|x| -x);
            }
            Ok((v, g))
        };
        let report = gradient_check(&objective, &point, SUITE_STEP)?;
        for check in &report.params {
            let group = group_of(&check.name)
                .ok_or_else(|| Error::Oracle(format!("parameter `{}` has no group", check.name)))?;
            let entry = worst.get_mut(group).expect("known group");
            entry.0 = entry.0.max(check.max_rel_err);
            entry.1 = entry.1.max(check.max_abs_grad);
        }

        let (_, _, closed) = fixture.probe(&point)?;
        let numeric = report
            .get("head.gamma")
            .map(|_| {
                let id = point.find("head.gamma").expect("gamma exists");
                let mut probe = point.clone();
                let orig = probe.value(id).data()[0];
                probe.get_mut(id).value.data_mut()[0] = orig + SUITE_STEP;
                let plus = fixture.loss_and_grad(&probe).map(|r| r.0);
                probe.get_mut(id).value.data_mut()[0] = orig - SUITE_STEP;
                let minus = fixture.loss_and_grad(&probe).map(|r| r.0);
                Ok::<f64, Error>((plus? - minus?) / (2.0 * SUITE_STEP))
            })
            .transpose()?
            .ok_or_else(|| Error::Oracle("gamma missing from the check".into()))?;
        gamma_err = gamma_err.max(relative_error(closed, numeric));
    }

    let groups = GROUPS
        .iter()
        .map(|&g| {
            let (err, grad) = worst[g];
            GroupResult {
                group: g.to_string(),
                max_rel_err: err,
                max_abs_grad: grad,
                passed: err < SUITE_TOLERANCE,
            }
        })
        .collect();
    Ok(SuiteReport {
        groups,
        points: SUITE_POINTS,
        redraws,
        gamma_closed_form_err: gamma_err,
        elapsed: start.elapsed(),
    })
}
