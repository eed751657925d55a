//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

#![allow(clippy::needless_range_loop)]

use std::process::{Command, ExitCode};
use std::time::Instant;

use ccnn_core::eval::{bench_latency, operating_point, roc_auc, score_shots, DEFAULT_MAX_FPR};
use ccnn_core::gradcore::{bce_with_logits, sigmoid, Graph, NodeId, Parameters, Tensor};
use ccnn_core::kernels::{CoordinateGrid, KernelConfig, MagnetKernel};
use ccnn_core::model::{CcnnConfig, CcnnModel, Mode, NormKind};
use ccnn_core::shots::{oracle_score, prepare_shot, synth_generate, Shot, SynthConfig, N_FEATURES};
use ccnn_core::train::{run_case, CaseRun, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn report(id: u32, name: &str, started: Instant, o: &Outcome) {
    println!(
        "[{}] {id:>2} {name}: {} ({:.1} s)",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        started.elapsed().as_secs_f64()
    );
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::new(shape.to_vec(), data).unwrap().into_param()
}

fn normal_input(rng: &mut ChaCha8Rng, t_len: usize) -> Tensor {
    let data = (0..N_FEATURES * t_len)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Tensor::new(vec![N_FEATURES, t_len], data).unwrap()
}

/// Every primitive composed into one scalar loss.
fn composite(g: &mut Graph, p: &[NodeId], variant: usize) -> NodeId {
    let (x, w, mw, mb, row, gain, bias) = (p[0], p[1], p[2], p[3], p[4], p[5], p[6]);
    let conv = g.causal_conv1d(x, w).unwrap();
    let mixed = g.pointwise_linear(conv, mw, mb).unwrap();
    let act = match variant % 4 {
        0 => g.sin(mixed),
        1 => g.sigmoid(mixed),
        2 => g.gelu(mixed),
        _ => {
            let n = g.neg(mixed);
            g.exp(n)
        }
    };
    let prod = g.mul(act, row).unwrap();
    let normed = g.layer_norm(prod, gain, bias).unwrap();
    let diff = g.sub(normed, x).unwrap();
    let sq = g.square(diff);
    let ma = g.moving_average(sq).unwrap();
    let pooled = g.mean_time(ma).unwrap();
    let total = g.add(pooled, pooled).unwrap();
    let s = g.sum(total);
    let logit = g.scale(s, 0.3);
    g.bce_with_logits(logit, (variant % 2) as f64, 1.7).unwrap()
}

fn composite_case(rng: &mut ChaCha8Rng, case: usize) -> f64 {
    let c = rng.random_range(1..4);
    let t_len = rng.random_range(1..8);
    let k = rng.random_range(1..6);
    let params = vec![
        rand_tensor(rng, &[c, t_len]),
        rand_tensor(rng, &[c, k]),
        rand_tensor(rng, &[c, c]),
        rand_tensor(rng, &[c]),
        rand_tensor(rng, &[1, t_len]),
        rand_tensor(rng, &[c]),
        rand_tensor(rng, &[c]),
    ];
    let eval = |ps: &[Tensor]| {
        let mut g = Graph::new();
        let ids: Vec<_> = ps.iter().map(|p| g.leaf(p)).collect();
        let l = composite(&mut g, &ids, case);
        g.value(l).data()[0]
    };
    let mut g = Graph::new();
    let ids: Vec<_> = params.iter().map(|p| g.leaf(p)).collect();
    let l = composite(&mut g, &ids, case);
    g.backward(l).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (pi, id) in ids.iter().enumerate() {
        let analytic = g.grad(*id).unwrap();
        for k in 0..params[pi].numel() {
            let mut plus = params.clone();
            plus[pi].data_mut()[k] += h;
            let mut minus = params.clone();
            minus[pi].data_mut()[k] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(analytic[k], numeric));
        }
    }
    worst
}

fn flat_params(m: &CcnnModel) -> Vec<f64> {
    let mut out = Vec::new();
    m.visit("", &mut |_, t| out.extend_from_slice(t.data()));
    out
}

fn with_param(m: &CcnnModel, index: usize, delta: f64) -> CcnnModel {
    let mut out = m.clone();
    let mut offset = 0;
    out.visit_mut("", &mut |_, t| {
        if (offset..offset + t.numel()).contains(&index) {
            t.data_mut()[index - offset] += delta;
        }
        offset += t.numel();
    });
    out
}

fn tap_pattern(m: &CcnnModel, t_len: usize) -> Vec<bool> {
    let grid = m.config.grid_for(t_len).unwrap();
    m.blocks
        .iter()
        .flat_map(|b| b.kernel.sample(&grid).unwrap().into_data())
        .map(|v| v != 0.0)
        .collect()
}

/// Worst relative error and number of probes skipped for crossing the mask
/// boundary.
fn model_case(rng: &mut ChaCha8Rng, seed: u64) -> (f64, usize) {
    let cfg = CcnnConfig {
        hidden_channels: rng.random_range(1..5),
        n_blocks: 1,
        n_f: rng.random_range(0..3),
        hidden_width: rng.random_range(1..5),
        norm: if rng.random::<bool>() {
            NormKind::Layer
        } else {
            NormKind::None
        },
        seed,
        ..CcnnConfig::default()
    };
    let mut model = CcnnModel::init(&cfg).unwrap();
    model.blocks[0].kernel.mask_mu =
        Tensor::full(vec![1, 1], rng.random_range(-0.05..0.05)).into_param();
    model.blocks[0].kernel.mask_log_sigma =
        Tensor::full(vec![1, 1], rng.random_range(-4.5f64..-2.5)).into_param();
    let t_len = rng.random_range(2..30);
    let x = normal_input(rng, t_len);
    let y = if rng.random::<bool>() { 1.0 } else { 0.0 };

    let mut g = Graph::new();
    let vars = model.bind(&mut g, true);
    let grid = cfg.grid_for(t_len).unwrap();
    let kernels = model.sample_kernels(&mut g, &vars, &grid).unwrap();
    let xn = g.constant(x.clone());
    let logit = model
        .forward_on_graph(&mut g, &vars, &kernels, xn, Mode::Label)
        .unwrap();
    let loss = g.bce_with_logits(logit, y, 1.0).unwrap();
    g.backward(loss).unwrap();
    let analytic: Vec<f64> = vars
        .ids()
        .iter()
        .flat_map(|&id| {
            g.grad(id)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; g.value(id).numel()])
        })
        .collect();

    let loss_of = |m: &CcnnModel| bce_with_logits(m.forward_label(&x).unwrap(), y);
    let base_pattern = tap_pattern(&model, t_len);
    let h = 1e-5;
    let (mut worst, mut skipped) = (0.0f64, 0);
    for i in 0..flat_params(&model).len() {
        let plus = with_param(&model, i, h);
        let minus = with_param(&model, i, -h);
        if tap_pattern(&plus, t_len) != base_pattern || tap_pattern(&minus, t_len) != base_pattern {
            skipped += 1;
            continue;
        }
        let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    (worst, skipped)
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_plain, mut worst_gelu) = (0.0f64, 0.0f64);
    let cases = 200;
    for case in 0..cases {
        let e = composite_case(&mut rng, case);
        if case % 4 == 2 {
            worst_gelu = worst_gelu.max(e);
        } else {
            worst_plain = worst_plain.max(e);
        }
    }
    let (mut worst_model, mut skipped) = (0.0f64, 0);
    let model_cases = 30;
    for seed in 0..model_cases {
        let (e, s) = model_case(&mut rng, seed);
        worst_model = worst_model.max(e);
        skipped += s;
    }
    Outcome::new(
        worst_plain < 1e-4 && worst_gelu < 1e-3 && worst_model < 1e-3,
        format!(
            "{cases} graphs + {model_cases} one-block models; max rel err {worst_plain:.2e} \
             (< 1e-4), GELU {worst_gelu:.2e} (< 1e-3), model {worst_model:.2e} (< 1e-3); \
             {skipped} mask-boundary probes skipped"
        ),
    )
}

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut total, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            total += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    total / pairs
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < 1000 {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(1..=n.max(2));
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
            .collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        let auc = roc_auc(&scores, &labels).unwrap().auc;
        worst = worst.max((auc - pairwise_auc(&scores, &labels)).abs());
        done += 1;
    }
    Outcome::new(
        worst <= 1e-12,
        format!("1000 tied instances, max |Δ| {worst:.1e}"),
    )
}

fn criterion_3() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut nonzero_below = 0;
    let mut below = 0;
    for seed in 0..20u64 {
        let mut k = MagnetKernel::init(&KernelConfig::default(), seed).unwrap();
        let coarse = CoordinateGrid::full(0.005, 2.0).unwrap();
        let fine = CoordinateGrid::full(0.0025, 2.0).unwrap();
        let a = k.continuous(coarse.coords()).unwrap();
        let b = k.continuous(fine.coords()).unwrap();
        let (kc, kf) = (coarse.len(), fine.len());
        for c in 0..k.out_channels() {
            for i in 0..kc {
                worst = worst.max((a.data()[c * kc + i] - b.data()[c * kf + 2 * i]).abs());
            }
        }
        k.mask_mu = Tensor::full(vec![1, 1], -0.1 * (seed % 5) as f64);
        k.mask_log_sigma = Tensor::full(vec![1, 1], (0.05 + 0.02 * seed as f64).ln());
        for grid in [&coarse, &fine] {
            let s = k.sample(grid).unwrap();
            let mask = k.mask_values(grid.coords());
            for c in 0..k.out_channels() {
                for (i, &m) in mask.iter().enumerate() {
                    if m < k.config.mask_threshold {
                        below += 1;
                        if s.data()[c * grid.len() + i] != 0.0 {
                            nonzero_below += 1;
                        }
                    }
                }
            }
        }
    }
    Outcome::new(
        worst <= 1e-12 && nonzero_below == 0 && below > 0,
        format!("max 200/400 Hz difference {worst:.1e}; {nonzero_below} of {below} sub-threshold taps nonzero"),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut mismatches = 0;
    let mut causality_breaks = 0;
    for seed in 0..100u64 {
        let cfg = CcnnConfig {
            hidden_channels: rng.random_range(1..9),
            n_blocks: rng.random_range(1..4),
            n_f: rng.random_range(0..3),
            hidden_width: rng.random_range(1..11),
            seed,
            ..CcnnConfig::default()
        };
        let model = CcnnModel::init(&cfg).unwrap();
        let t_len = rng.random_range(1..120);
        let x = normal_input(&mut rng, t_len);
        let trace = model.forward_trace(&x).unwrap();
        if *trace.last().unwrap() != sigmoid(model.forward_label(&x).unwrap()) {
            mismatches += 1;
        }
        let cut = rng.random_range(0..t_len);
        let mut y = x.clone();
        for ch in 0..N_FEATURES {
            for t in cut + 1..t_len {
                y.data_mut()[ch * t_len + t] += 10.0;
            }
        }
        let perturbed = model.forward_trace(&y).unwrap();
        if perturbed[..=cut] != trace[..=cut] {
            causality_breaks += 1;
        }
    }
    Outcome::new(
        mismatches == 0 && causality_breaks == 0,
        format!(
            "100 models: {mismatches} head mismatches, {causality_breaks} causality violations"
        ),
    )
}

/// Independent count of the reference configuration's learnable scalars.
fn reference_param_formula(c: &CcnnConfig) -> usize {
    let (h, w, inp) = (c.hidden_channels, c.hidden_width, c.in_channels);
    let kernel = 2 * w + c.n_f * (4 * w + w * w + w) + (w * h + h) + 2;
    let block = kernel + h * h + h + 2 * h;
    (inp * h + h) + c.n_blocks * block + (h + 1)
}

fn criterion_8() -> Outcome {
    let cfg = CcnnConfig::default();
    let formula = reference_param_formula(&cfg);
    let closed = cfg.param_count();
    let runtime = CcnnModel::init(&cfg).unwrap().param_count();
    Outcome::new(
        formula == closed && closed == runtime && (900..=3000).contains(&runtime),
        format!("closed form {closed}, enumeration {runtime}, independent count {formula}"),
    )
}

fn criterion_9() -> Outcome {
    let model = CcnnModel::init(&CcnnConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let x = normal_input(&mut rng, 200);
    let stats = bench_latency(&model, &x, 50, 1000).unwrap();
    let note = if stats.median_ms < 3.0 {
        ""
    } else {
        " [above the 3 ms target]"
    };
    Outcome::new(
        stats.median_ms < 10.0,
        format!(
            "median {:.3} ms, p95 {:.3} ms on 200 samples{note}",
            stats.median_ms, stats.p95_ms
        ),
    )
}

fn default_dataset() -> Vec<Shot> {
    let (_, shots) = synth_generate(&SynthConfig::default(), 0).unwrap();
    shots.into_iter().filter_map(prepare_shot).collect()
}

fn train(shots: &[Shot], case: u8, seed: u64) -> CaseRun {
    let model_cfg = CcnnConfig {
        seed,
        ..CcnnConfig::default()
    };
    let cfg = TrainConfig {
        case,
        seed,
        ..TrainConfig::default()
    };
    run_case(shots, &model_cfg, &cfg).unwrap()
}

fn report_json(run: &CaseRun) -> String {
    serde_json::to_string_pretty(&run.report).unwrap()
}

fn auc_with(scores: &[f64], shots: &[Shot]) -> f64 {
    let labels: Vec<bool> = shots.iter().map(|s| s.label.is_disruptive()).collect();
    roc_auc(scores, &labels).unwrap().auc
}

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    if !filter.is_empty() {
        // cargo test passes name filters through; this target has no named tests.
        println!("acceptance: filter {filter:?} given, skipping");
        return ExitCode::SUCCESS;
    }
    let mut failed = 0;
    let mut record = |id: u32, name: &str, started: Instant, o: Outcome| {
        report(id, name, started, &o);
        if !o.pass {
            failed += 1;
        }
    };

    let t = Instant::now();
    record(1, "gradient suite", t, criterion_1());
    let t = Instant::now();
    record(2, "AUC oracle equivalence", t, criterion_2());
    let t = Instant::now();
    record(3, "continuous-kernel consistency", t, criterion_3());
    let t = Instant::now();
    record(4, "head equivalence and causality", t, criterion_4());
    let t = Instant::now();
    record(8, "parameter budget", t, criterion_8());
    let t = Instant::now();
    record(9, "latency", t, criterion_9());

    let shots = default_dataset();

    let t = Instant::now();
    let case1 = train(&shots, 1, 0);
    let test = &case1.split.test;
    let oracle_scores: Vec<f64> = test.iter().map(oracle_score).collect();
    let oracle_auc = auc_with(&oracle_scores, test);
    let auc1 = case1.report.test_auc.unwrap();
    record(
        5,
        "end-to-end synthetic benchmark",
        t,
        Outcome::new(
            auc1 >= 0.95 && auc1 >= oracle_auc - 0.03 && t.elapsed().as_secs() <= 900,
            format!(
                "test AUC {auc1:.4} (>= 0.95), oracle {oracle_auc:.4} (model >= oracle - 0.03), \
                 {} test shots, {} params",
                test.len(),
                case1.report.param_count
            ),
        ),
    );

    let t = Instant::now();
    let scores = score_shots(&case1.model, test).unwrap();
    let values: Vec<f64> = scores.iter().map(|s| s.score).collect();
    let labels: Vec<bool> = scores.iter().map(|s| s.label.is_disruptive()).collect();
    let op = operating_point(&roc_auc(&values, &labels).unwrap(), DEFAULT_MAX_FPR);
    record(
        10,
        "operating point",
        t,
        Outcome::new(
            op.tpr >= 0.85 && op.fpr <= DEFAULT_MAX_FPR,
            format!(
                "tpr {:.4} at fpr {:.4} (budget {DEFAULT_MAX_FPR})",
                op.tpr, op.fpr
            ),
        ),
    );

    let t = Instant::now();
    let dir = tempfile::TempDir::new().unwrap();
    let model_path = dir.path().join("model.json");
    case1.model.save(&model_path).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ccnn"))
        .args(["export-kernels", "--model"])
        .arg(&model_path)
        .arg("--out")
        .arg(dir.path().join("kernels"))
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    let lengths: Vec<f64> = text
        .lines()
        .filter_map(|l| l.strip_prefix("block "))
        .filter_map(|l| l.rsplit(' ').next()?.parse().ok())
        .collect();
    let expected = case1.model.config.n_blocks * case1.model.config.hidden_channels;
    let longest = lengths.iter().copied().fold(0.0, f64::max);
    record(
        11,
        "effective-length reporting",
        t,
        Outcome::new(
            out.status.success()
                && lengths.len() == expected
                && lengths.iter().all(|l| l.is_finite())
                && longest > 150.0,
            format!(
                "{} filters reported, longest {longest} ms (> 150 ms)",
                lengths.len()
            ),
        ),
    );

    let t = Instant::now();
    let case2 = train(&shots, 2, 0);
    let auc2 = case2.report.test_auc.unwrap();
    let same_test = case2
        .split
        .test
        .iter()
        .map(|s| &s.id)
        .eq(test.iter().map(|s| &s.id));
    record(
        6,
        "imbalance degradation",
        t,
        Outcome::new(
            same_test && case2.report.n_train_disruptive == 20 && auc2 < auc1,
            format!(
                "case 2 AUC {auc2:.4} < case 1 AUC {auc1:.4} on the same {} test shots",
                test.len()
            ),
        ),
    );

    let t = Instant::now();
    let mut case1_aucs = vec![auc1];
    let mut case3_runs = Vec::new();
    for seed in 0..3 {
        if seed > 0 {
            case1_aucs.push(train(&shots, 1, seed).report.test_auc.unwrap());
        }
        case3_runs.push(train(&shots, 3, seed));
    }
    let case3_aucs: Vec<f64> = case3_runs
        .iter()
        .map(|r| r.report.test_auc.unwrap())
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (m1, m3) = (mean(&case1_aucs), mean(&case3_aucs));
    record(
        7,
        "case-3 analogue",
        t,
        Outcome::new(
            (m1 - m3).abs() <= 0.05,
            format!("mean case 3 AUC {m3:.4} vs case 1 {m1:.4} over seeds 0-2 ({case3_aucs:.4?} / {case1_aucs:.4?})"),
        ),
    );

    let t = Instant::now();
    let repeats = [
        (report_json(&case1), report_json(&train(&shots, 1, 0))),
        (report_json(&case2), report_json(&train(&shots, 2, 0))),
        (
            report_json(&case3_runs[0]),
            report_json(&train(&shots, 3, 0)),
        ),
    ];
    let identical = repeats.iter().filter(|(a, b)| a == b).count();
    record(
        12,
        "determinism",
        t,
        Outcome::new(
            identical == repeats.len(),
            format!(
                "{identical} of {} repeated reports byte-identical",
                repeats.len()
            ),
        ),
    );

    if failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}
