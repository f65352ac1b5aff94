//! Acceptance suite. Each test writes one `PASS`/`FAIL` line per criterion
//! to stderr (uncaptured), then asserts.

use std::collections::HashMap;
use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use iqa_core::autodiff::{Graph, Precision};
use iqa_core::checkpoint::{encode_checkpoint, CheckpointMeta};
use iqa_core::data::{
    decode_feature_record, encode_feature_record, median_of_runs, read_feature_file, split,
    synth_record, write_feature_file, FeatureRecord, Manifest, ManifestEntry, SplitSpec, SynthDims,
};
use iqa_core::decoder::{ffn, Ffn};
use iqa_core::gradsuite::{run_gradient_suite, SuiteOptions, GROUPS, SUITE_TOLERANCE};
use iqa_core::losses::{load_balance_from_stats, total_loss, z_loss, LossWeights};
use iqa_core::metrics::{plcc, srocc};
use iqa_core::model::{ModelConfig, QualityModel};
use iqa_core::moe::{
    expert_param_count, experts_param_count, gate_param_count, moe_forward, route, MoeConfig,
    MoeHead,
};
use iqa_core::parallel::Execution;
use iqa_core::params::ParamStore;
use iqa_core::tensor::Tensor;
use iqa_core::train::{evaluate, train, TrainConfig};

fn report(criterion: &str, passed: bool, detail: impl AsRef<str>) -> bool {
    let status = if passed { "PASS" } else { "FAIL" };
    let line = format!("[acceptance] {status} {criterion}: {}\n", detail.as_ref());
    let _ = std::io::stderr().write_all(line.as_bytes());
    passed
}

fn millions(n: usize) -> String {
    format!("{:.2}", n as f64 / 1e6)
}

#[test]
fn parameter_counts() {
    // independent arithmetic: two dense layers with biases
    let dense = |i: usize, o: usize| i * o + o;
    let ffn_count = Ffn::param_count(384, 2048);
    let ffn_ok = ffn_count == dense(384, 2048) + dense(2048, 384)
        && ffn_count == 1_575_296
        && millions(ffn_count) == "1.58";
    let mut ok = report(
        "params.ffn",
        ffn_ok,
        format!("FFN(384, 2048) = {ffn_count} ({}M)", millions(ffn_count)),
    );

    // exact counts cover the expert MLPs; the rounded totals also include the gate
    for (experts, exact, rounded) in [
        (2, 2_363_136, "2.36"),
        (4, 4_726_272, "4.73"),
        (8, 9_452_544, "9.46"),
    ] {
        let cfg = MoeConfig {
            num_experts: experts,
            ..MoeConfig::default()
        };
        let n = experts_param_count(&cfg);
        let with_gate = n + gate_param_count(&cfg);
        let pass = n == exact
            && n == experts * (dense(384, 1536) + dense(1536, 384))
            && with_gate == n + dense(384, experts)
            && millions(with_gate) == rounded;
        ok &= report(
            &format!("params.moe{experts}"),
            pass,
            format!(
                "{experts} experts x {} = {n}; with gate {with_gate} ({}M)",
                expert_param_count(384, 1536),
                millions(with_gate)
            ),
        );
    }
    assert!(ok);
}

#[test]
fn gradient_suite() {
    let start = Instant::now();
    let r = run_gradient_suite(&SuiteOptions::default()).expect("suite runs");
    let elapsed = start.elapsed();
    let mut ok = true;
    for g in &r.groups {
        ok &= report(
            &format!("gradcheck.{}", g.group.replace(' ', "_")),
            g.passed && g.max_rel_err < SUITE_TOLERANCE,
            format!("max rel err {:.3e}", g.max_rel_err),
        );
    }
    ok &= report(
        "gradcheck.groups",
        r.groups.len() == GROUPS.len(),
        format!("{} groups checked", r.groups.len()),
    );
    ok &= report(
        "gradcheck.gamma_closed_form",
        r.gamma_closed_form_err < 1e-8,
        format!(
            "closed-form vs central difference {:.3e}",
            r.gamma_closed_form_err
        ),
    );
    let a = r.group("A").expect("adjacency group");
    ok &= report(
        "gradcheck.adjacency_nonzero",
        a.max_abs_grad > 0.0,
        format!("max |dL/dA| {:.3e}", a.max_abs_grad),
    );
    ok &= report(
        "gradcheck.runtime",
        elapsed < Duration::from_secs(60),
        format!("{:.2}s", elapsed.as_secs_f64()),
    );
    assert!(ok);
}

#[test]
fn routing_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let logit = Normal::new(0.0, 3.0).unwrap();
    let n = 1000;
    let (mut k_ok, mut sum_ok, mut shift_ok) = (true, true, true);
    let (mut worst_sum, mut worst_shift) = (0.0f64, 0.0f64);
    for num_experts in 2..=8 {
        for k in 1..=num_experts {
            let logits = Tensor::new(
                &[n, num_experts],
                (0..n * num_experts)
                    .map(|_| logit.sample(&mut rng))
                    .collect(),
            )
            .unwrap();
            let r = route(&logits, k).unwrap();
            for i in 0..n {
                let row = r.sparse_weights.row(i);
                k_ok &= row.iter().filter(|&&w| w != 0.0).count() == k;
                k_ok &= r.mask.row(i).iter().sum::<f64>() == k as f64;
                let s: f64 = row.iter().sum();
                worst_sum = worst_sum.max((s - 1.0).abs());
            }
            let shifts: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect();
            let shifted = Tensor::new(
                &[n, num_experts],
                logits
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(j, v)| v + shifts[j / num_experts])
                    .collect(),
            )
            .unwrap();
            let rs = route(&shifted, k).unwrap();
            shift_ok &= rs.mask == r.mask && rs.assignments == r.assignments;
            worst_shift = worst_shift.max(rs.sparse_weights.max_abs_diff(&r.sparse_weights));
        }
    }
    sum_ok &= worst_sum < 1e-6;
    shift_ok &= worst_shift < 1e-6;
    let mut ok = report(
        "routing.k_nonzero",
        k_ok,
        format!("{n} tokens, N_E 2..=8, every K"),
    );
    ok &= report(
        "routing.sum_to_one",
        sum_ok,
        format!("max |sum - 1| {worst_sum:.2e}"),
    );
    ok &= report(
        "routing.shift_invariance",
        shift_ok,
        format!("max weight change {worst_shift:.2e}"),
    );

    // K = N_E reduces to the dense softmax mixture
    let d = 6;
    let num_experts = 4;
    let cfg = MoeConfig {
        num_experts,
        top_k: num_experts,
        expert_hidden: 7,
        embed_dim: d,
    };
    let mut store = ParamStore::new();
    let head = MoeHead::new(cfg.clone(), &mut store, &mut rng).unwrap();
    let x = Tensor::new(
        &[n, d],
        (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let logits = Tensor::new(
        &[n, num_experts],
        (0..n * num_experts)
            .map(|_| logit.sample(&mut rng))
            .collect(),
    )
    .unwrap();
    let r = route(&logits, num_experts).unwrap();
    let mut g = Graph::new(Precision::Double);
    let xv = g.constant(x.clone());
    let weights = g.constant(r.sparse_weights.clone());
    let (mixed, calls) = moe_forward(&mut g, &store, xv, weights, &r, &head.experts).unwrap();
    let mut dense = Tensor::zeros(&[n, d]);
    for (e, expert) in head.experts.iter().enumerate() {
        let ye = ffn(&mut g, &store, xv, expert).unwrap();
        let ye = g.value(ye).clone();
        for i in 0..n {
            for c in 0..d {
                dense.data_mut()[i * d + c] += r.probs.get2(i, e) * ye.get2(i, c);
            }
        }
    }
    let dense_err = g
        .value(mixed)
        .max_abs_diff(&dense)
        .max(r.sparse_weights.max_abs_diff(&r.probs));
    ok &= report(
        "routing.dense_equivalence",
        dense_err < 1e-6,
        format!("max deviation {dense_err:.2e}"),
    );
    ok &= report(
        "routing.dense_calls",
        calls == n * num_experts,
        format!("{calls} expert calls"),
    );

    // expert-call counter on the full head
    let mut calls_ok = true;
    for k in 1..=3 {
        let cfg = MoeConfig {
            num_experts: 3,
            top_k: k,
            expert_hidden: 5,
            embed_dim: d,
        };
        let mut store = ParamStore::new();
        let head = MoeHead::new(cfg, &mut store, &mut rng).unwrap();
        let mut g = Graph::new(Precision::Double);
        let xv = g.constant(x.clone());
        let out = head.forward(&mut g, &store, xv).unwrap();
        calls_ok &= out.expert_calls == n * k;
    }
    ok &= report(
        "routing.expert_calls",
        calls_ok,
        format!("calls = N*K for N = {n}, K = 1..=3"),
    );
    assert!(ok);
}

#[test]
fn loss_closed_forms() {
    let mut ok = true;
    let mut worst_aux = 0.0f64;
    for num_experts in 1..=8usize {
        for k in 1..=num_experts {
            // every expert chosen by exactly K/N_E of the tokens, uniform probabilities
            let n = num_experts * 5;
            let probs = Tensor::full(&[n, num_experts], 1.0 / num_experts as f64);
            let mut mask = Tensor::zeros(&[n, num_experts]);
            for i in 0..n {
                for j in 0..k {
                    mask.data_mut()[i * num_experts + (i + j) % num_experts] = 1.0;
                }
            }
            let aux = load_balance_from_stats(&probs, &mask);
            worst_aux = worst_aux.max((aux - k as f64).abs());
        }
    }
    ok &= report(
        "loss.aux_uniform",
        worst_aux < 1e-9,
        format!("max |L_aux - K| {worst_aux:.2e}"),
    );

    let mut worst_z = 0.0f64;
    for num_experts in 1..=16usize {
        let z = z_loss(&Tensor::zeros(&[7, num_experts]));
        worst_z = worst_z.max((z - (num_experts as f64).ln().powi(2)).abs());
    }
    ok &= report(
        "loss.z_zero_logits",
        worst_z < 1e-12,
        format!("max |L_z - ln(N_E)^2| {worst_z:.2e}"),
    );

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_total = 0.0f64;
    let (model, store) = QualityModel::new(ModelConfig::tiny(4, 6), 5).unwrap();
    let dims = SynthDims {
        stage3: [4, 4, 4],
        stage4: [2, 2, 6],
    };
    let w = LossWeights::default();
    for i in 0..20 {
        let rec = synth_record(&mut rng, format!("r{i}"), &dims);
        let target = rng.gen_range(0.0..1.0);
        let out = model
            .record_gradient(&store, &rec.features(), target, &w, 1.0, Precision::Double)
            .unwrap();
        let b = out.loss;
        let recomposed = total_loss((out.prediction - target).abs(), b.aux, b.z, &w);
        worst_total = worst_total
            .max((b.total - (b.main + w.aux * b.aux + w.z * b.z)).abs())
            .max((recomposed.total - b.total).abs());
    }
    ok &= report(
        "loss.decomposition",
        worst_total < 1e-9,
        format!("max deviation {worst_total:.2e}"),
    );
    assert!(ok);
}

fn brute_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let less = v.iter().filter(|&&y| y < x).count() as f64;
            let equal = v.iter().filter(|&&y| y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

fn brute_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut worst_p, mut worst_s, mut worst_mono) = (0.0f64, 0.0f64, 0.0f64);
    for pair in 0..100 {
        let n = rng.gen_range(5..=50);
        // every third pair is quantized to force ties
        let quantize = |v: f64| {
            if pair % 3 == 0 {
                (v * 4.0).round() / 4.0
            } else {
                v
            }
        };
        let a: Vec<f64> = (0..n).map(|_| quantize(rng.gen_range(-2.0..2.0))).collect();
        let b: Vec<f64> = a
            .iter()
            .map(|x| quantize(x + rng.gen_range(-1.5..1.5)))
            .collect();
        let p = plcc(&a, &b).unwrap();
        let s = srocc(&a, &b).unwrap();
        worst_p = worst_p.max((p - brute_pearson(&a, &b)).abs());
        worst_s = worst_s.max((s - brute_pearson(&brute_ranks(&a), &brute_ranks(&b))).abs());
        let warped: Vec<f64> = a.iter().map(|x| (2.0 * x).exp() + x.powi(3)).collect();
        worst_mono = worst_mono.max((srocc(&warped, &b).unwrap() - s).abs());
    }
    let mut ok = report(
        "metrics.plcc_oracle",
        worst_p < 1e-9,
        format!("100 pairs, max deviation {worst_p:.2e}"),
    );
    ok &= report(
        "metrics.srocc_oracle",
        worst_s < 1e-9,
        format!("100 pairs, max deviation {worst_s:.2e}"),
    );
    ok &= report(
        "metrics.srocc_monotone",
        worst_mono < 1e-9,
        format!("max deviation {worst_mono:.2e}"),
    );
    assert!(ok);
}

fn overfit_config(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        epochs: 500,
        batch_size: 16,
        decay_every: 1000,
        seed,
        ..TrainConfig::default()
    }
}

fn overfit_records(seed: u64) -> Vec<FeatureRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..16)
        .map(|i| synth_record(&mut rng, format!("o{i}"), &SynthDims::default()))
        .collect()
}

#[test]
fn overfit_sixteen_records() {
    let start = Instant::now();
    let records = overfit_records(0);
    let dims = SynthDims::default();
    let (model, mut store) =
        QualityModel::new(ModelConfig::tiny(dims.stage3[2], dims.stage4[2]), 0).unwrap();
    let report_ = train(
        &model,
        &mut store,
        &records,
        &overfit_config(0),
        Execution::Parallel,
    )
    .unwrap();
    let mut l1 = 0.0;
    for r in &records {
        let pred = model
            .predict(&store, &r.features(), Precision::Double)
            .unwrap();
        l1 += (pred - report_.label_scale.normalize(r.mos)).abs() / records.len() as f64;
    }
    let elapsed = start.elapsed();
    let mut ok = report(
        "overfit.train_l1",
        report_.steps == 500 && l1 < 0.05,
        format!("{} steps, train L1 {l1:.4}", report_.steps),
    );
    ok &= report(
        "overfit.runtime",
        elapsed < Duration::from_secs(120),
        format!("{:.1}s", elapsed.as_secs_f64()),
    );
    assert!(ok);
}

#[test]
fn overfit_loss_decreases_across_seeds() {
    let mut decreased = 0;
    for seed in 0..10u64 {
        let records = overfit_records(100 + seed);
        let dims = SynthDims::default();
        let (model, mut store) =
            QualityModel::new(ModelConfig::tiny(dims.stage3[2], dims.stage4[2]), seed).unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            ..overfit_config(seed)
        };
        let r = train(&model, &mut store, &records, &cfg, Execution::Parallel).unwrap();
        let first = r.epoch_losses.first().unwrap().total;
        let last = r.epoch_losses.last().unwrap().total;
        decreased += usize::from(last < first);
    }
    assert!(report(
        "overfit.loss_decrease",
        decreased >= 9,
        format!("{decreased}/10 seeds end below their first epoch")
    ));
}

#[test]
fn generalization_on_planted_labels() {
    let start = Instant::now();
    let dims = SynthDims::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let records: Vec<FeatureRecord> = (0..640)
        .map(|i| synth_record(&mut rng, format!("g{i:04}"), &dims))
        .collect();
    let by_id: HashMap<&str, &FeatureRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut manifest = Manifest::new(".");
    manifest.records = records
        .iter()
        .map(|r| ManifestEntry {
            id: r.id.clone(),
            path: format!("{}.lifq", r.id),
            mos: r.mos,
        })
        .collect();

    let cfg = TrainConfig {
        learning_rate: 3e-3,
        epochs: 10,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let (mut sroccs, mut ploccs) = (Vec::new(), Vec::new());
    let mut good = 0;
    for seed in 0..10u64 {
        let parts = split(
            &manifest,
            &SplitSpec {
                seed,
                train_fraction: 0.8,
                run_index: 0,
            },
        )
        .unwrap();
        assert_eq!((parts.train.len(), parts.test.len()), (512, 128));
        let pick = |ids: &[String]| {
            ids.iter()
                .map(|id| by_id[id.as_str()].clone())
                .collect::<Vec<_>>()
        };
        let (train_set, test_set) = (pick(&parts.train), pick(&parts.test));
        let model_cfg = ModelConfig::small(dims.stage3[2], dims.stage4[2]);
        let (model, mut store) = QualityModel::new(model_cfg, seed).unwrap();
        let run = train(
            &model,
            &mut store,
            &train_set,
            &TrainConfig {
                seed,
                ..cfg.clone()
            },
            Execution::Parallel,
        )
        .unwrap();
        let eval = evaluate(
            &model,
            &store,
            &test_set,
            &run.label_scale,
            Precision::Double,
            Execution::Parallel,
        )
        .unwrap();
        let _ = std::io::stderr().write_all(
            format!(
                "[acceptance]      split seed {seed}: srocc {:.4} plcc {:.4}\n",
                eval.srocc, eval.plcc
            )
            .as_bytes(),
        );
        good += usize::from(eval.srocc >= 0.9 && eval.plcc >= 0.9);
        sroccs.push(eval.srocc);
        ploccs.push(eval.plcc);
    }
    let elapsed = start.elapsed();
    let mut ok = report(
        "generalization.seeds",
        good >= 8,
        format!(
            "{good}/10 seeds with SROCC and PLCC >= 0.90; median SROCC {:.4} PLCC {:.4}",
            median_of_runs(&sroccs).unwrap(),
            median_of_runs(&ploccs).unwrap()
        ),
    );
    ok &= report(
        "generalization.runtime",
        elapsed < Duration::from_secs(15 * 60),
        format!("{:.1}s", elapsed.as_secs_f64()),
    );
    assert!(ok);
}

#[test]
fn training_determinism() {
    let dims = SynthDims {
        stage3: [6, 6, 4],
        stage4: [3, 3, 6],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let records: Vec<FeatureRecord> = (0..24)
        .map(|i| synth_record(&mut rng, format!("d{i}"), &dims))
        .collect();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        epochs: 3,
        batch_size: 5,
        seed: 4,
        ..TrainConfig::default()
    };
    let run = |exec| {
        let model_cfg = ModelConfig::tiny(4, 6);
        let (model, mut store) = QualityModel::new(model_cfg.clone(), 4).unwrap();
        let r = train(&model, &mut store, &records, &cfg, exec).unwrap();
        let meta = CheckpointMeta {
            model: model_cfg,
            label_scale: r.label_scale,
            seed: 4,
        };
        (r.to_csv(), encode_checkpoint(&store, &meta).unwrap())
    };
    let a = run(Execution::Sequential);
    let b = run(Execution::Sequential);
    let c = run(Execution::Parallel);
    let mut ok = report(
        "determinism.sequential",
        a == b,
        "loss CSV and checkpoint bytes identical across two runs",
    );
    ok &= report(
        "determinism.parallel",
        a == c,
        "parallel run matches the sequential bytes",
    );
    assert!(ok);
}

fn random_record(rng: &mut ChaCha8Rng, i: usize) -> FeatureRecord {
    let mut dims = || {
        [
            rng.gen_range(1..=5),
            rng.gen_range(1..=5),
            rng.gen_range(1..=8),
        ]
    };
    let (mut s3, mut s4) = (dims(), dims());
    if i.is_multiple_of(10) {
        s3 = [1, 1, s3[2]];
        s4 = [1, 1, s4[2]];
    }
    let mut tensor = |shape: [usize; 3]| {
        let n = shape.iter().product();
        Tensor::new(
            &shape,
            (0..n).map(|_| rng.gen_range(-1e3f32..1e3) as f64).collect(),
        )
        .unwrap()
    };
    let (stage3, stage4) = (tensor(s3), tensor(s4));
    FeatureRecord {
        id: format!("rec-{i}-ü"),
        stage3,
        stage4,
        mos: rng.gen_range(0.0..100.0),
    }
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn lifq_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut ok = true;
    let mut degenerate = 0;
    for i in 0..100 {
        let r = random_record(&mut rng, i);
        degenerate += usize::from(r.stage3.shape()[..2] == [1, 1]);
        let bytes = encode_feature_record(&r).unwrap();
        let back = decode_feature_record(&bytes).unwrap();
        let path = dir.path().join(format!("{i}.lifq"));
        write_feature_file(&r, &path).unwrap();
        let from_disk = read_feature_file(&path).unwrap();
        for b in [&back, &from_disk] {
            ok &= b.id == r.id
                && b.mos.to_bits() == r.mos.to_bits()
                && b.stage3.shape() == r.stage3.shape()
                && b.stage4.shape() == r.stage4.shape()
                && bits(&b.stage3) == bits(&r.stage3)
                && bits(&b.stage4) == bits(&r.stage4);
        }
        ok &= encode_feature_record(&back).unwrap() == bytes;
        ok &= std::fs::read(&path).unwrap() == bytes;
    }
    assert!(report(
        "format.lifq_round_trip",
        ok && degenerate >= 10,
        format!("100 records bit-exact, {degenerate} with 1x1 maps"),
    ));
}
