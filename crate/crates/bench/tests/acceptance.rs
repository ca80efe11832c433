//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_RED` are expected to fail; the run errors if one
//! of them unexpectedly passes, or if any other criterion fails.

#[path = "../../core/tests/oracle/mod.rs"]
mod oracle;

use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use ba2::arch::{ConvShape, ConvSpec};
use ba2::budget::DEFAULT_LAMBDA_LR;
use ba2::complexity::count_conv_layers;
use ba2::model::adapter_forward;
use ba2::ops::{self, BnConfig, PoolWindow, RunningStats};
use ba2::store::{self, pack_switches, unpack_switches};
use ba2::train::{evaluate, train_domain, train_multi_budget_joint};
use ba2::{
    Architecture, Backbone32, Budget, BudgetSpec, ConstraintMode, Dataset, DomainAdapter32, Kernel64, Mode,
    ResNetConfig, Shape4, Tape64, Tensor64, TrainConfig,
};
use ba2_bench::config::BenchConfig;
use ba2_bench::data::{ingest, DataFormat, DatasetSpec, Splits, SyntheticSpec};
use ba2_bench::runner::{self, run_benchmark};
use ba2_bench::scoring::{domain_score, efficiency_scores, PERFECT};
use num_rational::Ratio;
use oracle::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

/// Printed S_O 3102 for the PA row cannot follow from its printed Score and
/// FLOP: 3412 / 1.099 = 3104.6.
const KNOWN_RED: &[usize] = &[4];

fn main() {
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "masked-conv equivalence", masked_conv_equivalence),
        (2, "gradient oracle suite", gradient_suite),
        (3, "FLOP proportionality", flop_proportionality),
        (4, "score table reproduction", table_reproduction),
        (5, "score normalization", score_normalization),
        (6, "constrained-training dynamics", training_dynamics),
        (7, "frozen backbone", frozen_backbone),
        (8, "storage round-trip", storage_round_trip),
        (9, "determinism", determinism),
        (10, "joint multi-budget mode", joint_mode),
    ];
    let mut unexpected = 0;
    for (id, name, check) in criteria {
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        let expected_red = KNOWN_RED.contains(&id);
        let (status, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        let note = if expected_red { " [known red]" } else { "" };
        println!("criterion {id:>2} {status}{note}: {name} ({secs:.1}s) {detail}");
        if outcome.is_ok() == expected_red {
            unexpected += 1;
        }
    }
    if unexpected > 0 {
        eprintln!("{unexpected} criterion outcome(s) differ from expectation");
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    ensure(start.elapsed() < limit, || format!("took {:?}, limit {limit:?}", start.elapsed()))
}

fn random_conv(rng: &mut ChaCha8Rng) -> (Tensor64, Kernel64, usize, usize) {
    let size: usize = [1, 3, 5][rng.random_range(0..3)];
    let (c_in, c_out) = (rng.random_range(1..9), rng.random_range(1..6));
    let pad = rng.random_range(0..=size / 2);
    let lo = size.saturating_sub(2 * pad).max(1);
    let (h, w) = (rng.random_range(lo..10), rng.random_range(lo..10));
    let batch = rng.random_range(1..3);
    let x = random_tensor(rng, Shape4::new(batch, h, w, c_in), -1.0, 1.0);
    let k = Kernel64::new(random_tensor(rng, Shape4::new(size, size, c_in, c_out), -1.0, 1.0)).unwrap();
    (x, k, rng.random_range(1..3), pad)
}

fn masked_conv_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for case in 0..100 {
        let (x, k, stride, pad) = random_conv(&mut rng);
        let plain = ops::conv2d_forward(&x, &k, stride, pad).map_err(|e| e.to_string())?;
        let all_on = ops::masked_conv_forward(&x, &k, &vec![true; k.c_in()], stride, pad).map_err(|e| e.to_string())?;
        ensure(plain == all_on, || format!("case {case}: all-on mask differs from plain conv"))?;

        let mask: Vec<bool> = (0..k.c_in()).map(|_| rng.random_bool(0.5)).collect();
        let before = ops::masked_conv_forward(&x, &k, &mask, stride, pad).map_err(|e| e.to_string())?;
        let mut perturbed = k.clone();
        let (c_in, c_out) = (k.c_in(), k.c_out());
        for (i, v) in perturbed.tensor_mut().data_mut().iter_mut().enumerate() {
            if !mask[(i / c_out) % c_in] {
                *v += rng.random_range(-50.0..50.0);
            }
        }
        let after = ops::masked_conv_forward(&x, &perturbed, &mask, stride, pad).map_err(|e| e.to_string())?;
        ensure(before == after, || format!("case {case}: output depends on an inactive kernel slice"))?;
    }
    within(start, Duration::from_secs(10))?;
    Ok("100 shapes bit-exact".into())
}

const GRAD_INSTANCES: u64 = 20;
const GRAD_TOL: f64 = 1e-6;

fn grad_case(rng: &mut ChaCha8Rng) -> (Tensor64, Tensor64, usize, usize) {
    let size = if rng.random_bool(0.5) { 3 } else { 1 };
    let (c_in, c_out) = (rng.random_range(1..4), rng.random_range(1..4));
    let (h, w) = (rng.random_range(size..6), rng.random_range(size..6));
    let pad = if size == 3 { rng.random_range(0..2) } else { 0 };
    let x = random_tensor(rng, Shape4::new(2, h, w, c_in), -1.0, 1.0);
    let k = random_tensor(rng, Shape4::new(size, size, c_in, c_out), -1.0, 1.0);
    (x, k, rng.random_range(1..3), pad)
}

fn switch_gradient_error(rng: &mut ChaCha8Rng) -> f64 {
    let (x, k, stride, pad) = grad_case(rng);
    let c_in = x.shape().c();
    let relaxed: Vec<f64> = (0..c_in).map(|_| rng.random_range(-1.0..1.0)).collect();
    let gate: Vec<f64> = relaxed.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
    let mut tape = Tape64::new();
    let (xi, ki) = (tape.constant(x.clone()), tape.constant(k.clone()));
    let si = tape.param(Tensor64::vector(relaxed));
    let y = tape.masked_conv2d(xi, ki, si, stride, pad).unwrap();
    let seed = random_tensor(rng, tape.value(y).unwrap().shape(), -1.0, 1.0);
    tape.backward_from(y, seed.clone()).unwrap();
    let analytic = tape.grad(si).unwrap().data().to_vec();
    // derivative of the network with each input channel scaled by a continuous gate
    let numeric = fd_grad(&gate, |g| {
        let scaled = Tensor64::from_fn(k.shape(), |i| k.data()[i] * g[(i / k.shape().c()) % c_in]);
        let mut t = Tape64::new();
        let (a, b) = (t.constant(x.clone()), t.constant(scaled));
        let out = t.conv2d(a, b, stride, pad).unwrap();
        dot(t.value(out).unwrap().data(), seed.data())
    });
    max_rel_err(&analytic, &numeric)
}

fn penalty_gradient_error(rng: &mut ChaCha8Rng) -> f64 {
    let c = rng.random_range(1..12);
    let (lambda, beta) = (rng.random_range(0.0..3.0), rng.random_range(0.1..1.0));
    let relaxed: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut tape = Tape64::new();
    let s = tape.param(Tensor64::vector(relaxed.clone()));
    let m = tape.binarized_mean(s).unwrap();
    let p = tape.affine(&[(m, lambda)], -lambda * beta).unwrap();
    tape.backward(p).unwrap();
    let numeric = fd_grad(&relaxed, |v| lambda * (v.iter().sum::<f64>() / c as f64 - beta));
    max_rel_err(tape.grad(s).unwrap().data(), &numeric)
}

fn bn_inputs(rng: &mut ChaCha8Rng) -> [Tensor64; 3] {
    let c = rng.random_range(1..4);
    let shape = Shape4::new(rng.random_range(2..4), rng.random_range(1..4), rng.random_range(1..4), c);
    [
        random_tensor(rng, shape, -2.0, 2.0),
        random_tensor(rng, Shape4::vector(c), 0.5, 1.5),
        random_tensor(rng, Shape4::vector(c), -0.5, 0.5),
    ]
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    type Check = fn(&mut ChaCha8Rng) -> f64;
    let checks: Vec<(&str, Check)> = vec![
        ("conv2d", |rng| {
            let (x, k, s, p) = grad_case(rng);
            vjp_check(rng, &[x, k], |t, ids| t.conv2d(ids[0], ids[1], s, p).unwrap())
        }),
        ("masked conv", |rng| {
            let (x, k, s, p) = grad_case(rng);
            let c = x.shape().c();
            let sw = Tensor64::vector((0..c).map(|_| if rng.random_bool(0.6) { 0.5 } else { -0.5 }).collect());
            vjp_check(rng, &[x, k], |t, ids| {
                let si = t.constant(sw.clone());
                t.masked_conv2d(ids[0], ids[1], si, s, p).unwrap()
            })
        }),
        ("switch", switch_gradient_error),
        ("budget penalty", penalty_gradient_error),
        ("batch norm train", |rng| {
            let inputs = bn_inputs(rng);
            let c = inputs[1].len();
            vjp_check(rng, &inputs, |t, ids| {
                let mut stats = RunningStats::new(c);
                t.batch_norm(ids[0], ids[1], ids[2], &mut stats, Mode::Train, BnConfig::default()).unwrap()
            })
        }),
        ("batch norm eval", |rng| {
            let inputs = bn_inputs(rng);
            let c = inputs[1].len();
            let stats = RunningStats {
                mean: (0..c).map(|_| rng.random_range(-1.0..1.0)).collect(),
                var: (0..c).map(|_| rng.random_range(0.5..2.0)).collect(),
            };
            vjp_check(rng, &inputs, |t, ids| {
                let mut s = stats.clone();
                t.batch_norm(ids[0], ids[1], ids[2], &mut s, Mode::Eval, BnConfig::default()).unwrap()
            })
        }),
        ("relu", |rng| {
            let x = Tensor64::from_fn(Shape4::new(2, 3, 3, 2), |_| {
                let v: f64 = rng.random_range(0.1..2.0);
                if rng.random_bool(0.5) { v } else { -v }
            });
            vjp_check(rng, &[x], |t, ids| t.relu(ids[0]).unwrap())
        }),
        ("add", |rng| {
            let shape = Shape4::new(2, 2, 3, 2);
            let (a, b) = (random_tensor(rng, shape, -1.0, 1.0), random_tensor(rng, shape, -1.0, 1.0));
            vjp_check(rng, &[a, b], |t, ids| t.add(ids[0], ids[1]).unwrap())
        }),
        ("pooling", |rng| {
            let x = random_tensor(rng, Shape4::new(2, 4, 5, 2), -1.0, 1.0);
            let win = PoolWindow::square(2, rng.random_range(1..3));
            let avg = vjp_check(rng, std::slice::from_ref(&x), |t, ids| t.avg_pool(ids[0], win).unwrap());
            let global = vjp_check(rng, std::slice::from_ref(&x), |t, ids| t.global_avg_pool(ids[0]).unwrap());
            avg.max(global).max(vjp_check(rng, &[x], |t, ids| t.max_pool(ids[0], win).unwrap()))
        }),
        ("dense", |rng| {
            let (f, o) = (rng.random_range(1..6), rng.random_range(1..5));
            let x = random_tensor(rng, Shape4::new(3, 1, 1, f), -1.0, 1.0);
            let w = random_tensor(rng, Shape4::new(1, 1, f, o), -1.0, 1.0);
            let b = random_tensor(rng, Shape4::vector(o), -1.0, 1.0);
            vjp_check(rng, &[x, w, b], |t, ids| t.dense(ids[0], ids[1], ids[2]).unwrap())
        }),
        ("cross-entropy", |rng| {
            let classes = rng.random_range(2..6);
            let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..classes)).collect();
            let logits = random_tensor(rng, Shape4::new(3, 1, 1, classes), -3.0, 3.0);
            vjp_check(rng, &[logits], |t, ids| t.softmax_cross_entropy(ids[0], &labels).unwrap())
        }),
    ];
    let mut worst = (0.0f64, "");
    for (name, check) in &checks {
        for seed in 0..GRAD_INSTANCES {
            let err = check(&mut ChaCha8Rng::seed_from_u64(seed));
            ensure(err < GRAD_TOL, || format!("{name} instance {seed}: relative error {err:e}"))?;
            if err > worst.0 {
                worst = (err, name);
            }
        }
    }
    within(start, Duration::from_secs(60))?;
    Ok(format!("{} ops x {GRAD_INSTANCES}, worst {:.1e} ({})", checks.len(), worst.0, worst.1))
}

fn flop_proportionality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for case in 0..50 {
        let rows: usize = [1, 3, 5][rng.random_range(0..3)];
        let spec = ConvSpec {
            rows,
            cols: rows,
            c_in: rng.random_range(1..48),
            c_out: rng.random_range(1..48),
            stride: rng.random_range(1..3),
            padding: rows / 2,
        };
        let extent = rng.random_range(rows..24);
        let (out_h, out_w) = spec.output_extent(extent, extent);
        let shape = ConvShape { spec, in_h: extent, in_w: extent, out_h, out_w };
        let mask: Vec<bool> = (0..spec.c_in).map(|_| rng.random_bool(0.5)).collect();
        let active = mask.iter().filter(|&&b| b).count() as u64;
        let masked = count_conv_layers(&[shape], Some(&[&mask])).map_err(|e| e.to_string())?.conv_flops;
        let full = count_conv_layers(&[shape], None).map_err(|e| e.to_string())?.conv_flops;
        let expected = Ratio::new(active, spec.c_in as u64);
        ensure(Ratio::new(masked, full) == expected, || format!("case {case}: {masked}/{full} != {expected}"))?;
    }
    Ok("50 layers exact".into())
}

/// (method, FLOP, Params, Score, printed S_O, printed S_P)
const TABLE: &[(&str, f64, f64, f64, f64, f64)] = &[
    ("Feature", 1.0, 1.0, 544.0, 544.0, 544.0),
    ("Finetune", 1.0, 10.0, 2500.0, 2500.0, 250.0),
    ("SpotTune", 1.0, 11.0, 3612.0, 3612.0, 328.0),
    ("RA", 1.099, 2.0, 2118.0, 1926.0, 1059.0),
    ("DAM", 1.0, 2.17, 2851.0, 2851.0, 1314.0),
    ("PA", 1.099, 2.0, 3412.0, 3102.0, 1706.0),
    ("PB", 1.0, 1.28, 2838.0, 2838.0, 2217.0),
    ("WTPB", 1.0, 1.29, 3497.0, 3497.0, 2710.0),
    ("beta=1.00", 0.646, 1.03, 3199.0, 4952.0, 3106.0),
    ("beta=0.75", 0.612, 1.03, 3063.0, 5005.0, 2974.0),
    ("beta=0.50", 0.543, 1.03, 2999.0, 5523.0, 2912.0),
    ("beta=0.25", 0.325, 1.03, 2538.0, 7809.0, 2464.0),
];

fn table_reproduction() -> Outcome {
    let mut misses = Vec::new();
    for &(name, flop, params, score, so, sp) in TABLE {
        let (got_o, got_p) = efficiency_scores(score, flop, params).map_err(|e| e.to_string())?;
        for (what, got, printed) in [("S_O", got_o, so), ("S_P", got_p, sp)] {
            if (got.round() - printed).abs() > 1.0 {
                misses.push(format!("{name} {what} {got:.1} vs printed {printed}"));
            }
        }
    }
    if misses.is_empty() {
        Ok(format!("{} rows", TABLE.len()))
    } else {
        Err(misses.join("; "))
    }
}

fn score_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    for _ in 0..1000 {
        let e_max: f64 = rng.random_range(0.001..2.0);
        let perfect = domain_score(0, 0.0, e_max).map_err(|e| e.to_string())?.partial;
        ensure(perfect == PERFECT, || format!("zero error with e_max {e_max} scored {perfect}"))?;
        let worse = rng.random_range(e_max.min(1.0)..=1.0);
        let zero = domain_score(0, worse, e_max).map_err(|e| e.to_string())?.partial;
        ensure(worse < e_max || zero == 0.0, || format!("error {worse} >= e_max {e_max} scored {zero}"))?;
    }
    Ok("1000 baselines".into())
}

fn bench_root() -> &'static Path {
    Path::new(env!("CARGO_MANIFEST_DIR"))
}

fn training_dynamics() -> Outcome {
    let cfg = BenchConfig::load(&bench_root().join("../../configs/desk.toml")).map_err(|e| e.to_string())?;
    let arch = cfg.architecture().map_err(|e| e.to_string())?;
    let domains = runner::load_domains(&cfg, &arch).map_err(|e| e.to_string())?;
    let (backbone, _) = runner::pretrain(&cfg, &domains).map_err(|e| e.to_string())?;
    let target = &domains[1];
    let train = cfg.train_config();
    let mut accuracy = Vec::new();
    for beta in [1.0, 0.75, 0.5] {
        let budget = Budget::new(beta).unwrap();
        let spec = BudgetSpec::new(budget, ConstraintMode::PerLayer, arch.num_convs(), cfg.lambda_lr).unwrap();
        let run = train_domain(&backbone, &target.name, &target.train, spec, &train).map_err(|e| e.to_string())?;
        // recomputed here from the binary switches, not taken from the run
        for (l, g) in run.adapter.gates().iter().enumerate() {
            let theta = g.iter().filter(|&&b| b).count() as f64 / g.len() as f64;
            ensure(theta <= beta, || format!("beta {beta}: layer {l} theta_bar {theta:.3}"))?;
        }
        if beta == 1.0 {
            ensure(run.trace.records().iter().all(|r| r.lambdas.iter().all(|&l| l == 0.0)), || {
                "multiplier moved at beta 1".into()
            })?;
        }
        let error = evaluate(&backbone, &run.adapter, &target.test).map_err(|e| e.to_string())?;
        accuracy.push((beta, 1.0 - error));
    }
    let drop = accuracy[0].1 - accuracy[2].1;
    let shown: Vec<String> = accuracy.iter().map(|(b, a)| format!("b{b}={a:.3}")).collect();
    ensure(drop <= 0.05, || format!("accuracy drop {drop:.3} at beta 0.5 ({})", shown.join(" ")))?;
    Ok(format!("compliant; accuracy {}", shown.join(" ")))
}

fn synthetic(seed: u64, classes: usize, n: usize) -> Dataset {
    let spec = DatasetSpec {
        name: format!("s{seed}"),
        format: DataFormat::Synthetic(SyntheticSpec {
            seed,
            classes,
            samples: n + 8,
            height: 8,
            width: 8,
            channels: 2,
            noise: 0.6,
            max_shift: 1,
        }),
        classes,
        splits: Splits { train: n, val: 0, test: 8 },
        sha256: vec![],
        normalization: None,
        split_seed: 0,
    };
    ingest(&spec, Path::new("."), 8, 8, 2).unwrap().train
}

fn small_arch() -> Architecture {
    Architecture::new(ResNetConfig { in_channels: 2, height: 8, width: 8, widths: vec![4, 8, 8], blocks_per_stage: 1 })
        .unwrap()
}

fn small_train() -> TrainConfig {
    let mut cfg = TrainConfig { epochs: 4, batch_size: 16, mirror: false, settle_epochs: 20, ..TrainConfig::default() };
    cfg.adapter.lr = 0.01;
    cfg
}

fn per_layer(beta: f64) -> BudgetSpec {
    BudgetSpec::new(Budget::new(beta).unwrap(), ConstraintMode::PerLayer, small_arch().num_convs(), DEFAULT_LAMBDA_LR)
        .unwrap()
}

fn frozen_backbone() -> Outcome {
    let backbone = Backbone32::init(small_arch(), 3, 7);
    let before = backbone.clone();
    let probe = synthetic(9, 3, 8).images;
    let err = |e: ba2::Error| e.to_string();
    let a = train_domain(&backbone, "a", &synthetic(1, 3, 64), per_layer(1.0), &small_train()).map_err(err)?.adapter;
    let out_a = adapter_forward(&backbone, &mut a.clone(), &probe, Mode::Eval).map_err(err)?;
    let b = train_domain(&backbone, "b", &synthetic(2, 4, 64), per_layer(0.5), &small_train()).map_err(err)?.adapter;
    ensure(backbone == before, || "backbone changed during adapter training".into())?;
    let again = adapter_forward(&backbone, &mut a.clone(), &probe, Mode::Eval).map_err(err)?;
    ensure(again == out_a, || "first domain's outputs changed after training the second".into())?;
    let out_b = adapter_forward(&backbone, &mut b.clone(), &probe, Mode::Eval).map_err(err)?;
    ensure(out_b.shape().c() == 4, || "second domain head has the wrong width".into())?;
    Ok("bit-identical".into())
}

/// Independent statement of the adapter file layout.
fn layout_size(arch: &Architecture, domain: &str, classes: usize) -> usize {
    let header = 4 + 2 + 32 + (4 + domain.len()) + 4 + 4;
    let convs = arch.convs();
    let switches: usize = convs.iter().map(|c| 4 + c.c_in.div_ceil(8)).sum();
    let bn: usize = convs.iter().map(|c| 4 + 4 * 4 * c.c_out).sum();
    let head = 4 + 4 + 4 * (arch.feature_dim() * classes + classes);
    header + switches + bn + head
}

fn storage_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    for i in 0..10_000 {
        let n: usize = rng.random_range(1..200);
        let gate: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let packed = pack_switches(&gate);
        ensure(packed.len() == n.div_ceil(8), || format!("vector {i}: packed length {}", packed.len()))?;
        let back = unpack_switches(&packed, n).map_err(|e| e.to_string())?;
        ensure(back == gate, || format!("vector {i}: unpack(pack(g)) != g"))?;
        if n % 8 != 0 {
            let mut bad = packed.clone();
            *bad.last_mut().unwrap() |= 0x80;
            ensure(unpack_switches(&bad, n).is_err(), || format!("vector {i}: set padding bit accepted"))?;
        }
    }

    let arch = small_arch();
    let backbone = Backbone32::init(arch.clone(), 3, 1);
    let mut adapter = DomainAdapter32::new(&backbone, "roundtrip", Budget::new(0.5).unwrap(), 5, 2);
    for s in adapter.switches.iter_mut() {
        let n = s.len();
        s.update(|v| (0..n).for_each(|c| v[c] = rng.random_range(-1.0..1.0)));
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("a.ba2a");
    store::save_adapter(&path, &adapter, &arch).map_err(|e| e.to_string())?;
    let first = std::fs::read(&path).map_err(|e| e.to_string())?;
    let expected = layout_size(&arch, "roundtrip", 5);
    ensure(first.len() == expected, || format!("file is {} bytes, layout says {expected}", first.len()))?;
    let loaded = store::load_adapter::<f32>(&path, &arch).map_err(|e| e.to_string())?;
    store::save_adapter(&path, &loaded, &arch).map_err(|e| e.to_string())?;
    ensure(std::fs::read(&path).map_err(|e| e.to_string())? == first, || "save-load-save changed bytes".into())?;
    Ok(format!("10^4 vectors; {expected}-byte file stable"))
}

fn determinism() -> Outcome {
    let fixture = bench_root().join("tests/fixtures/tiny.toml");
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut cfg = BenchConfig::load(&fixture).map_err(|e| e.to_string())?;
        cfg.output = dir.path().to_path_buf();
        let run = run_benchmark(&cfg).map_err(|e| e.to_string())?;
        let mut bytes = Vec::new();
        for (budget, _) in &run.reports {
            bytes.extend(std::fs::read(dir.path().join(runner::results_file_name(*budget))).map_err(|e| e.to_string())?);
        }
        bytes.extend(std::fs::read(dir.path().join(runner::SWEEP_FILE)).map_err(|e| e.to_string())?);
        outputs.push(bytes);
    }
    ensure(outputs[0] == outputs[1], || "reports differ between runs".into())?;
    Ok(format!("{} report bytes identical", outputs[0].len()))
}

fn joint_mode() -> Outcome {
    let backbone = Backbone32::init(small_arch(), 3, 11);
    let data = synthetic(3, 3, 96);
    let joint = train_multi_budget_joint(&backbone, "j", &data, vec![per_layer(1.0), per_layer(0.5)], &small_train())
        .map_err(|e| e.to_string())?;
    let models: Vec<ba2::ComposedModel<f32>> = joint
        .runs
        .iter()
        .map(|r| ba2::ComposedModel::new(Arc::clone(&joint.backbone), r.adapter.clone()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    ensure(models[0].backbone.kernels == models[1].backbone.kernels, || "kernels differ between budgets".into())?;
    for run in &joint.runs {
        let beta = run.spec.beta.value();
        for (l, g) in run.adapter.gates().iter().enumerate() {
            let theta = g.iter().filter(|&&b| b).count() as f64 / g.len() as f64;
            ensure(theta <= beta, || format!("beta {beta}: layer {l} theta_bar {theta:.3}"))?;
        }
    }
    // no nesting is imposed: count layers where the tighter set is not inside the looser one
    let (full, half) = (joint.runs[0].adapter.gates(), joint.runs[1].adapter.gates());
    let unnested = full.iter().zip(&half).filter(|(f, h)| f.iter().zip(h.iter()).any(|(&a, &b)| b && !a)).count();
    Ok(format!("shared kernels; both budgets met; {unnested} layer(s) with non-nested switch sets"))
}
