//! Acceptance criteria on the generated benchmark.
//!
//! Prints one PASS/FAIL line per criterion and fails if any criterion fails.
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use readood::calibration::{search_epsilon, CalibrationConfig, CalibrationResult};
use readood::class_stats::{ClassStats, Regularization};
use readood::complexity::{complexities, OodCharacter, DEFAULT_TRIM};
use readood::evaluation::{auroc, fpr_at_tpr, report_from_scores, score_set, EvalReport, ScoreVariant};
use readood::io::benchmark::{generate_benchmark, to_unit, BenchmarkSpec};
use readood::io::checkpoint;
use readood::models::{AutoencoderArch, AutoencoderModel, ClassifierArch, ClassifierModel, HeadKind};
use readood::numerics::{finite_difference_gradient, gradient, evaluate, Bindings, ExprGraph, Mode, NodeId};
use readood::scoring::{nearest_center, score_cla_ed, score_cla_md, Detector, ScoringOptions, Variant};
use readood::training::{train_autoencoder, train_classifier, TrainConfig};
use readood::Tensor;

const SEED: u64 = 20240611;
const CLASSIFIER_EPOCHS: usize = 60;
const AUTOENCODER_EPOCHS: usize = 60;
const SUITES: [&str; 3] = ["easy", "medium", "hard"];

struct Gate {
    failed: Vec<String>,
}

impl Gate {
    fn check(&mut self, id: &str, what: &str, pass: bool, detail: String) {
        println!("[{}] {id} {what}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(id.to_string());
        }
    }
}

// ---------------------------------------------------------------------------
// 1. Autodiff against central differences.

struct GradCase {
    graph: ExprGraph,
    output: NodeId,
    leaves: BTreeMap<String, Tensor<f64>>,
    wrt: Vec<&'static str>,
    mode: Mode,
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, for ops with a kink there.
fn rand_away(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.05..1.5);
        if rng.random_bool(0.5) { v } else { -v }
    })
}

/// Builds `sum(op(...) * w)` with a fixed random weighting `w`.
fn grad_case(op: &str, rng: &mut ChaCha8Rng) -> GradCase {
    let mut g = ExprGraph::new();
    let mut leaves = BTreeMap::new();
    let mut wrt = vec!["a"];
    let mut mode = Mode::Inference;
    let a = g.input("a");
    let unary = |shape: &[usize], rng: &mut ChaCha8Rng| rand_t(rng, shape, -1.5, 1.5);
    let out = match op {
        "add" | "sub" | "mul" | "div" => {
            let b = g.input("b");
            leaves.insert("a".into(), unary(&[2, 3], rng));
            let bt = if op == "div" { rand_t(rng, &[2, 3], 0.5, 2.0) } else { unary(&[2, 3], rng) };
            leaves.insert("b".into(), bt);
            wrt.push("b");
            match op {
                "add" => g.add(a, b),
                "sub" => g.sub(a, b),
                "mul" => g.mul(a, b),
                _ => g.div(a, b),
            }
        }
        "add_scalar" | "mul_scalar" => {
            leaves.insert("a".into(), unary(&[2, 3], rng));
            let c = rng.random_range(-2.0..2.0);
            if op == "add_scalar" { g.add_scalar(a, c) } else { g.mul_scalar(a, c) }
        }
        "bias_add" => {
            let b = g.input("b");
            leaves.insert("a".into(), unary(&[2, 3, 2, 2], rng));
            leaves.insert("b".into(), unary(&[3], rng));
            wrt.push("b");
            g.bias_add(a, b)
        }
        "matmul" => {
            let b = g.input("b");
            leaves.insert("a".into(), unary(&[2, 3], rng));
            leaves.insert("b".into(), unary(&[3, 4], rng));
            wrt.push("b");
            g.matmul(a, b)
        }
        "transpose" => {
            leaves.insert("a".into(), unary(&[3, 2], rng));
            g.transpose(a)
        }
        "conv2d" => {
            let w = g.input("b");
            leaves.insert("a".into(), unary(&[2, 2, 5, 5], rng));
            leaves.insert("b".into(), unary(&[3, 2, 3, 3], rng));
            wrt.push("b");
            let stride = rng.random_range(1..=2);
            let pad = rng.random_range(0..=1);
            g.conv2d(a, w, stride, pad)
        }
        "conv_transpose2d" => {
            let w = g.input("b");
            leaves.insert("a".into(), unary(&[2, 2, 3, 3], rng));
            leaves.insert("b".into(), unary(&[2, 3, 4, 4], rng));
            wrt.push("b");
            g.conv_transpose2d(a, w, 2, 1)
        }
        "relu" => {
            leaves.insert("a".into(), rand_away(rng, &[2, 3, 2]));
            g.relu(a)
        }
        "sigmoid" | "square" => {
            leaves.insert("a".into(), unary(&[2, 3], rng));
            if op == "sigmoid" { g.sigmoid(a) } else { g.square(a) }
        }
        "log" => {
            leaves.insert("a".into(), rand_t(rng, &[2, 3], 0.2, 3.0));
            g.log(a)
        }
        "softmax" | "log_softmax" => {
            leaves.insert("a".into(), unary(&[3, 4], rng));
            if op == "softmax" { g.softmax(a) } else { g.log_softmax(a) }
        }
        "sum" | "mean" => {
            leaves.insert("a".into(), unary(&[2, 3], rng));
            if op == "sum" { g.sum(a) } else { g.mean(a) }
        }
        "batch_norm" | "batch_norm_inference" => {
            leaves.insert("a".into(), unary(&[4, 3, 2, 2], rng));
            leaves.insert("bn.gamma".into(), rand_t(rng, &[3], 0.5, 1.5));
            leaves.insert("bn.beta".into(), unary(&[3], rng));
            leaves.insert("bn.running_mean".into(), unary(&[3], rng));
            leaves.insert("bn.running_var".into(), rand_t(rng, &[3], 0.5, 2.0));
            wrt.extend(["bn.gamma", "bn.beta"]);
            if op == "batch_norm" {
                mode = Mode::Train;
            }
            g.batch_norm(a, "bn")
        }
        "downsample" => {
            leaves.insert("a".into(), unary(&[2, 2, 4, 4], rng));
            g.downsample(a, 2)
        }
        "upsample" => {
            leaves.insert("a".into(), unary(&[2, 2, 2, 2], rng));
            g.upsample(a, 2)
        }
        "reshape" => {
            leaves.insert("a".into(), unary(&[2, 3, 2], rng));
            g.reshape(a, &[-1, 4])
        }
        "global_avg_pool" => {
            leaves.insert("a".into(), unary(&[2, 3, 3, 3], rng));
            g.global_avg_pool(a)
        }
        "expand_cols" => {
            leaves.insert("a".into(), unary(&[3, 1], rng));
            g.expand_cols(a, 4)
        }
        "pairwise_sq_dist" => {
            let c = g.input("b");
            leaves.insert("a".into(), unary(&[3, 4], rng));
            leaves.insert("b".into(), unary(&[2, 4], rng));
            wrt.push("b");
            g.pairwise_sq_dist(a, c)
        }
        other => panic!("no gradient case for {other}"),
    };
    // Probe the output shape to draw the weighting.
    let shape = {
        let b = Bindings::new().extend(&leaves);
        evaluate(&g, &b, mode, &[out]).unwrap().value(out).unwrap().shape().to_vec()
    };
    let w = g.input("w");
    leaves.insert("w".into(), unary(&shape, rng));
    let weighted = g.mul(out, w);
    let output = g.sum(weighted);
    GradCase { graph: g, output, leaves, wrt, mode }
}

fn scalar_value(c: &GradCase, leaves: &BTreeMap<String, Tensor<f64>>) -> f64 {
    let b = Bindings::new().extend(leaves);
    evaluate(&c.graph, &b, c.mode, &[c.output]).unwrap().value(c.output).unwrap().data()[0]
}

fn max_gradient_error(c: &GradCase) -> f64 {
    let b = Bindings::new().extend(&c.leaves);
    let ad = gradient(&c.graph, &b, c.mode, c.output, &c.wrt).unwrap();
    let mut worst: f64 = 0.0;
    for name in &c.wrt {
        let fd = finite_difference_gradient(
            |t| {
                let mut l = c.leaves.clone();
                l.insert(name.to_string(), t.clone());
                Ok(scalar_value(c, &l))
            },
            &c.leaves[*name],
            1e-5,
        )
        .unwrap();
        let a = ad[*name].data();
        let num: f64 = a.iter().zip(fd.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(fd.data().iter().map(|x| x * x).sum::<f64>().sqrt());
        worst = worst.max(if den < 1e-12 { num } else { num / den });
    }
    worst
}

const OP_KINDS: [&str; 27] = [
    "add",
    "sub",
    "mul",
    "div",
    "add_scalar",
    "mul_scalar",
    "bias_add",
    "matmul",
    "transpose",
    "conv2d",
    "conv_transpose2d",
    "relu",
    "sigmoid",
    "log",
    "square",
    "softmax",
    "log_softmax",
    "sum",
    "mean",
    "batch_norm",
    "batch_norm_inference",
    "downsample",
    "upsample",
    "reshape",
    "global_avg_pool",
    "expand_cols",
    "pairwise_sq_dist",
];

fn criterion_1(gate: &mut Gate) {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 1);
    let mut worst = (0.0f64, "");
    for op in OP_KINDS {
        for _ in 0..50 {
            let e = max_gradient_error(&grad_case(op, &mut rng));
            if e > worst.0 {
                worst = (e, op);
            }
        }
    }
    gate.check(
        "1",
        "autodiff vs central differences",
        worst.0 < 1e-4,
        format!("{} op kinds x 50 cases, max relative error {:.2e} ({})", OP_KINDS.len(), worst.0, worst.1),
    );
}

// ---------------------------------------------------------------------------
// 2. Metric and statistics oracles.

fn pairwise_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut s = 0.0;
    for &a in id {
        for &b in ood {
            s += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
        }
    }
    s / (id.len() * ood.len()) as f64
}

/// Largest ID score that keeps at least 95% of ID scores at or above it.
fn counted_fpr(id: &[f64], ood: &[f64]) -> f64 {
    let mut sorted = id.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = id.len();
    let tau = sorted
        .iter()
        .copied()
        .find(|&t| 20 * id.iter().filter(|&&s| s >= t).count() >= 19 * n)
        .unwrap();
    ood.iter().filter(|&&s| s >= tau).count() as f64 / ood.len() as f64
}

fn criterion_2(gate: &mut Gate) {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 2);
    let mut auroc_err: f64 = 0.0;
    let mut fpr_mismatch = 0;
    for i in 0..100 {
        let n = rng.random_range(20..120);
        let m = rng.random_range(1..120);
        let draw = |rng: &mut ChaCha8Rng, k: usize, shift: f64| -> Vec<f64> {
            (0..k)
                .map(|_| {
                    let v: f64 = rng.random_range(-3.0..3.0) + shift;
                    // Every other set is integer-valued to exercise ties.
                    if i % 2 == 0 { v.round() } else { v }
                })
                .collect()
        };
        let id = draw(&mut rng, n, 0.7);
        let ood = draw(&mut rng, m, 0.0);
        auroc_err = auroc_err.max((auroc(&id, &ood).unwrap() - pairwise_auroc(&id, &ood)).abs());
        if fpr_at_tpr(&id, &ood, 0.95).unwrap().fpr != counted_fpr(&id, &ood) {
            fpr_mismatch += 1;
        }
    }
    let mut maha_err: f64 = 0.0;
    for _ in 0..20 {
        let (n, d, k) = (120, 6, 3);
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let feats = Tensor::from_fn(&[n, d], |j| rng.random_range(-2.0..2.0) + (labels[j / d] as f64) * 0.5);
        let stats = ClassStats::fit(&feats, &labels, k, Regularization::Fixed(1e-3)).unwrap();
        let a = DMatrix::from_row_slice(d, d, stats.covariance.data()) + DMatrix::identity(d, d) * stats.reg;
        let lu = a.lu();
        for _ in 0..10 {
            let z: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let via_precision = stats.mahalanobis(&z);
            for c in 0..k {
                let diff = DVector::from_iterator(d, z.iter().zip(stats.means.item_slice(c)).map(|(a, b)| a - b));
                let solved = diff.dot(&lu.solve(&diff).unwrap());
                maha_err = maha_err.max((via_precision[c] - solved).abs() / solved.abs().max(1.0));
            }
        }
    }
    gate.check(
        "2",
        "metric and statistics oracles",
        auroc_err <= 1e-9 && fpr_mismatch == 0 && maha_err <= 1e-5,
        format!(
            "AUROC max |rank - pairwise| {auroc_err:.1e} over 100 sets; FPR@95TPR mismatches {fpr_mismatch}/100; Mahalanobis vs LU solve max error {maha_err:.1e}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 3. Identity-covariance reduction.

fn criterion_3(gate: &mut Gate) {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 3);
    let (k, d) = (5, 16);
    let means = Tensor::from_fn(&[k, d], |_| rng.random_range(-2.0..2.0));
    let eye = Tensor::from_fn(&[d, d], |i| if i / d == i % d { 1.0 } else { 0.0 });
    let stats = ClassStats::from_parts(means.clone(), eye.clone(), eye, 0.0).unwrap();
    let mismatches = (0..1000)
        .filter(|_| {
            let z: Vec<f64> = (0..d).map(|_| rng.random_range(-4.0..4.0)).collect();
            score_cla_md(&z, &stats) != score_cla_ed(&z, &means)
        })
        .count();
    gate.check(
        "3",
        "identity-covariance reduction",
        mismatches == 0,
        format!("{mismatches}/1000 latents differ"),
    );
}

// ---------------------------------------------------------------------------
// Trained pipeline.

struct Data {
    train_x: Tensor<f32>,
    train_y: Vec<usize>,
    val_x: Tensor<f32>,
    val_y: Vec<usize>,
    test_x: Tensor<f32>,
    suites: Vec<(String, Tensor<f32>)>,
}

fn load_data(seed: u64, spec: &BenchmarkSpec) -> Data {
    let b = generate_benchmark(seed, spec).unwrap();
    Data {
        train_x: to_unit(&b.train_x),
        train_y: b.train_y.clone(),
        val_x: to_unit(&b.val_x),
        val_y: b.val_y.clone(),
        test_x: to_unit(&b.test_x),
        suites: b.ood_suites().iter().map(|(n, t)| (n.to_string(), to_unit(t))).collect(),
    }
}

struct Trained {
    detector: Detector,
    report: EvalReport,
    val_accuracy: f64,
}

fn train_ae(data: &Data, seed: u64, epochs: usize) -> AutoencoderModel {
    let s = data.train_x.shape();
    let mut ae = AutoencoderModel::new(AutoencoderArch::desk(s[1], s[2]), seed).unwrap();
    let cfg = TrainConfig::autoencoder_desk().with_epochs(epochs);
    train_autoencoder(&mut ae, &data.train_x, &cfg, &mut ChaCha8Rng::seed_from_u64(seed + 1)).unwrap();
    ae
}

fn run_variant(
    data: &Data,
    variant: Variant,
    ae: &AutoencoderModel,
    seed: u64,
    epochs: usize,
    calibration: &CalibrationConfig,
) -> Trained {
    let s = data.train_x.shape();
    let arch = ClassifierArch::desk(s[1], s[2], 4, variant.head());
    let mut clf = ClassifierModel::new(arch, seed).unwrap();
    let cfg = TrainConfig::classifier_desk().with_epochs(epochs);
    train_classifier(&mut clf, &data.train_x, &data.train_y, &cfg, &mut ChaCha8Rng::seed_from_u64(seed + 1)).unwrap();
    let val_accuracy = clf.accuracy(&data.val_x, &data.val_y, 256).unwrap();
    let mut det = Detector::new(variant, clf, ae.clone(), ScoringOptions::default()).unwrap();
    det.fit(&data.train_x, &data.train_y, Regularization::Auto, DEFAULT_TRIM).unwrap();
    let cal = search_epsilon(&det, &data.val_x, calibration, &mut ChaCha8Rng::seed_from_u64(seed + 2)).unwrap();
    det.set_calibration(Some(cal));
    let id = score_set(&det, "test", &data.test_x, true).unwrap();
    let oods: Vec<_> = data
        .suites
        .iter()
        .map(|(n, x)| score_set(&det, n, x, true).unwrap())
        .collect();
    let report = report_from_scores(variant.as_str(), &id, &oods, &ScoreVariant::ALL).unwrap();
    Trained {
        detector: det,
        report,
        val_accuracy,
    }
}

fn mean_fpr(report: &EvalReport, method: &str, v: ScoreVariant) -> f64 {
    SUITES
        .iter()
        .map(|s| report.row(method, s, v).unwrap().fpr_at_95_tpr)
        .sum::<f64>()
        / SUITES.len() as f64
}

fn criteria_4_to_8(gate: &mut Gate, data: &Data, md: &Trained, ed: &Trained) {
    let mut c4 = Vec::new();
    let mut pass4 = true;
    for t in [md, ed] {
        let m = t.detector.variant().as_str();
        let a = t.report.row(m, "hard", ScoreVariant::RecOnly).unwrap().auroc;
        pass4 &= a >= 0.80;
        c4.push(format!("{m} {a:.4}"));
    }
    gate.check("4", "rec-only AUROC vs hard OOD >= 0.80", pass4, c4.join(", "));

    let mut c5 = Vec::new();
    let mut pass5 = true;
    for t in [md, ed] {
        let m = t.detector.variant().as_str();
        let agg = mean_fpr(&t.report, m, ScoreVariant::Aggregated);
        let cla = mean_fpr(&t.report, m, ScoreVariant::ClaOnly);
        let rec = mean_fpr(&t.report, m, ScoreVariant::RecOnly);
        pass5 &= agg <= cla.min(rec) + 0.02;
        c5.push(format!("{m} aggregated {agg:.4} vs cla {cla:.4} / rec {rec:.4}"));
    }
    gate.check("5", "combination mean FPR@95TPR <= min(cla, rec) + 0.02", pass5, c5.join("; "));

    let mut c6 = Vec::new();
    let mut pass6 = true;
    for t in [md, ed] {
        let m = t.detector.variant().as_str();
        let plain = t.report.row(m, "easy", ScoreVariant::Aggregated).unwrap().fpr_at_95_tpr;
        let adj = t.report.row(m, "easy", ScoreVariant::AggregatedAdjust).unwrap().fpr_at_95_tpr;
        pass6 &= adj <= plain;
        c6.push(format!("{m} {adj:.4} (adjusted) vs {plain:.4}"));
    }
    gate.check("6", "easy-OOD FPR@95TPR with adjustment <= without", pass6, c6.join("; "));

    let bounds = md.detector.bounds().unwrap();
    let share = |x: &Tensor<f32>, ch: OodCharacter| {
        let c = complexities(x).unwrap();
        c.iter().filter(|&&v| bounds.characterize(v) == ch).count() as f64 / c.len() as f64
    };
    let easy = share(&data.suites[0].1, OodCharacter::Easy);
    let hard = share(&data.suites[2].1, OodCharacter::Hard);
    let within = share(&data.test_x, OodCharacter::Within);
    gate.check(
        "7",
        "complexity characterization",
        easy >= 0.80 && hard >= 0.80 && (0.88..=1.0).contains(&within),
        format!("easy suite {easy:.3} easy, hard suite {hard:.3} hard, ID test {within:.3} within"),
    );

    let mut c8 = Vec::new();
    let mut pass8 = true;
    for t in [md, ed] {
        let cal: &CalibrationResult = t.detector.calibration().unwrap();
        let p = t.detector.prepare(&data.val_x).unwrap();
        let scores = t.detector.raw_scores(&p, cal.epsilon).unwrap();
        let accepted = scores.iter().filter(|r| r.final_score() >= cal.tau).count();
        let tpr = accepted as f64 / scores.len() as f64;
        let at_star = cal.mean_fpr_at(cal.epsilon).unwrap();
        let at_zero = cal.mean_fpr_at(0.0).unwrap();
        pass8 &= 20 * accepted >= 19 * scores.len() && at_star <= at_zero;
        c8.push(format!(
            "{} eps* {} TPR {tpr:.4}, pool FPR {at_star:.4} vs {at_zero:.4} at eps 0",
            t.detector.variant().as_str(),
            cal.epsilon
        ));
    }
    gate.check("8", "calibration TPR and argmin", pass8, c8.join("; "));
}

fn criterion_9(gate: &mut Gate, trained: &Trained, data: &Data) {
    let spec = BenchmarkSpec {
        image_size: 16,
        train_per_class: 12,
        val_per_class: 6,
        test_per_class: 10,
        ood_per_suite: 24,
        ..BenchmarkSpec::default()
    };
    let cal = CalibrationConfig {
        grid: vec![0.0, 0.002, 0.01],
        max_pool_per_kind: 24,
        ..CalibrationConfig::default()
    };
    let run = || {
        let d = load_data(SEED ^ 9, &spec);
        let ae = train_ae(&d, SEED ^ 90, 3);
        run_variant(&d, Variant::ReadMd, &ae, SEED ^ 91, 3, &cal).report.to_json().unwrap()
    };
    let (r1, r2) = (run(), run());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("detector.rck");
    checkpoint::save_detector(&path, &trained.detector, None).unwrap();
    let loaded = checkpoint::load_detector(&path).unwrap();
    let probe = data.test_x.select(&(0..64).collect::<Vec<_>>());
    let a = trained.detector.detect(&probe).unwrap();
    let b = loaded.detect(&probe).unwrap();
    let bitwise = a.len() == b.len()
        && a.iter().zip(&b).all(|(x, y)| {
            x.final_score.to_bits() == y.final_score.to_bits()
                && x.score_cla.to_bits() == y.score_cla.to_bits()
                && x.score_rec_raw.to_bits() == y.score_rec_raw.to_bits()
                && x.verdict == y.verdict
                && x.predicted_class == y.predicted_class
        });
    gate.check(
        "9",
        "determinism and persistence",
        r1 == r2 && bitwise,
        format!(
            "repeat pipeline report identical: {}; checkpoint round-trip probe scores bitwise equal: {bitwise}",
            r1 == r2
        ),
    );
}

fn criterion_10(gate: &mut Gate, ed: &Trained) {
    let clf = ed.detector.classifier();
    assert_eq!(clf.head_kind(), HeadKind::Decomposed);
    let centers: Tensor<f64> = clf.centers().unwrap().cast();
    let d = clf.latent_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 10);
    // Latents spread around the learned centers.
    let scale = centers.data().iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
    let z = Tensor::<f32>::from_fn(&[1000, d], |_| (rng.random_range(-1.0..1.0) * scale) as f32);
    let logits = clf.head_logits(&z).unwrap();
    let k = clf.num_classes();
    let mismatches = (0..1000)
        .filter(|&i| {
            let predicted = readood::models::predict_from_logits(&logits.data()[i * k..(i + 1) * k]).class;
            let zi: Vec<f64> = z.item_slice(i).iter().map(|&v| v as f64).collect();
            predicted != nearest_center(&zi, &centers).0
        })
        .count();
    gate.check(
        "10",
        "decomposed head predicts the nearest center",
        mismatches == 0,
        format!("{mismatches}/1000 latents differ"),
    );
}

#[test]
fn acceptance() {
    let start = Instant::now();
    let mut gate = Gate { failed: Vec::new() };
    criterion_1(&mut gate);
    criterion_2(&mut gate);
    criterion_3(&mut gate);

    let spec = BenchmarkSpec {
        val_per_class: 60,
        test_per_class: 100,
        ood_per_suite: 400,
        ..BenchmarkSpec::default()
    };
    let data = load_data(SEED, &spec);
    let ae = train_ae(&data, SEED ^ 100, AUTOENCODER_EPOCHS);
    let cal = CalibrationConfig::default();
    let md = run_variant(&data, Variant::ReadMd, &ae, SEED ^ 200, CLASSIFIER_EPOCHS, &cal);
    let ed = run_variant(&data, Variant::ReadEd, &ae, SEED ^ 300, CLASSIFIER_EPOCHS, &cal);
    println!(
        "info: validation accuracy read-md {:.4}, read-ed {:.4}; training and scoring took {:.0}s",
        md.val_accuracy,
        ed.val_accuracy,
        start.elapsed().as_secs_f64()
    );
    for t in [&md, &ed] {
        for r in &t.report.aggregates {
            println!(
                "info: {} {:<26} mean AUROC {:.4} mean FPR@95TPR {:.4}",
                r.method,
                r.variant.as_str(),
                r.auroc,
                r.fpr_at_95_tpr
            );
        }
    }

    criteria_4_to_8(&mut gate, &data, &md, &ed);
    criterion_9(&mut gate, &md, &data);
    criterion_10(&mut gate, &ed);
    println!("info: acceptance finished in {:.0}s", start.elapsed().as_secs_f64());
    assert!(gate.failed.is_empty(), "failed criteria: {:?}", gate.failed);
}
