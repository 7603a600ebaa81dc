//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use fscil_core::backbone::{ClassifierHead, MlpBackbone};
use fscil_core::checkpoint::{audit_checkpoint, Checkpoint};
use fscil_core::config::{AblationSwitches, Config};
use fscil_core::datagen::{extract_features, ImageSample};
use fscil_core::losses::{ce_loss, ct_loss, kd_loss_directed, triplet_loss, CenterBank, KdDirection};
use fscil_core::metrics::{average_accuracy, performance_drop, round_half_up, EvalReport};
use fscil_core::numerics::{Mat, Rng};
use fscil_core::sessions::{
    build_report, continue_pipeline, separation_ratio, stage1_forward_compatible_train, start_pipeline, PipelineState,
    Protocol,
};

const DESK: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml");

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict { passed, detail: detail.into() }
}

fn desk() -> Config {
    Config::load(Path::new(DESK)).expect("desk config")
}

struct Run {
    report: EvalReport,
    state: PipelineState,
    boundary_checksums: Vec<u64>,
    elapsed: Duration,
}

fn run(protocol: &Protocol, config: &Config) -> Run {
    let t = Instant::now();
    let mut state = start_pipeline(protocol, config).expect("base sessions");
    let mut boundary_checksums = vec![state.backbone.checksum()];
    continue_pipeline(&mut state, protocol, config, |s| {
        boundary_checksums.push(s.backbone.checksum());
        Ok(())
    })
    .expect("incremental sessions");
    let report = build_report(&state, config, config.eval.tracks).expect("report");
    Run { report, state, boundary_checksums, elapsed: t.elapsed() }
}

// ---------------------------------------------------------------- criterion 1

/// Nine session accuracies, then the published AA and PD.
const TABLE: [(&str, [f64; 9], f64, f64); 16] = [
    ("FCPill CEC", [93.71, 91.63, 90.08, 90.22, 89.10, 88.67, 89.22, 89.34, 88.11], 90.01, 5.59),
    ("FCPill LIMIT", [93.11, 90.07, 88.65, 88.54, 87.18, 86.68, 87.33, 87.39, 86.01], 88.33, 7.10),
    ("FCPill SSFE-Net", [94.49, 93.26, 90.61, 90.53, 88.63, 87.72, 88.40, 88.54, 87.29], 89.94, 7.20),
    ("FCPill BiDistFSCIL", [94.71, 91.74, 89.61, 88.54, 87.73, 87.36, 87.90, 87.62, 86.00], 89.02, 8.71),
    ("FCPill FACT", [96.22, 92.84, 89.98, 89.31, 87.80, 86.72, 87.09, 86.67, 84.73], 89.04, 11.49),
    ("FCPill ALICE", [89.20, 85.84, 83.40, 81.46, 78.73, 77.48, 76.76, 76.13, 74.91], 80.43, 14.29),
    ("FCPill SAVC", [94.62, 92.57, 90.02, 89.28, 87.20, 85.95, 85.04, 84.14, 82.50], 87.92, 12.12),
    ("FCPill proposed", [96.38, 94.54, 92.74, 92.03, 91.04, 90.41, 90.68, 90.66, 89.59], 92.01, 6.79),
    ("mCURE CEC", [82.26, 79.52, 73.65, 70.92, 67.52, 66.35, 62.36, 59.24, 58.40], 68.91, 23.86),
    ("mCURE LIMIT", [82.26, 79.33, 74.35, 71.40, 68.44, 66.79, 62.87, 59.42, 58.31], 69.24, 23.95),
    ("mCURE SSFE-Net", [93.41, 90.22, 86.24, 85.46, 80.48, 80.27, 76.53, 72.95, 72.71], 82.03, 20.70),
    ("mCURE BiDistFSCIL", [67.36, 63.66, 58.69, 54.71, 51.22, 48.19, 46.23, 42.70, 42.22], 52.78, 25.14),
    ("mCURE FACT", [84.00, 78.24, 73.39, 71.20, 68.67, 64.90, 62.68, 58.39, 57.31], 68.75, 26.69),
    ("mCURE ALICE", [51.10, 49.21, 46.04, 44.71, 42.21, 40.46, 39.74, 38.23, 37.22], 43.21, 13.88),
    ("mCURE SAVC", [89.63, 85.57, 81.04, 79.28, 75.04, 72.72, 71.26, 67.64, 67.14], 76.59, 22.49),
    ("mCURE proposed", [93.85, 91.67, 88.15, 87.48, 84.00, 83.63, 80.81, 78.86, 78.15], 85.18, 15.69),
];

fn criterion_1() -> Verdict {
    let t = Instant::now();
    let mut misses = Vec::new();
    for (name, accs, aa, pd) in TABLE {
        let got_aa = round_half_up(average_accuracy(&accs).unwrap(), 2);
        let got_pd = round_half_up(performance_drop(&accs).unwrap(), 2);
        if (got_aa - aa).abs() > 0.005 {
            misses.push(format!("{name} AA {got_aa:.2} vs {aa:.2}"));
        }
        if (got_pd - pd).abs() > 0.005 {
            misses.push(format!("{name} PD {got_pd:.2} vs {pd:.2}"));
        }
    }
    let elapsed = t.elapsed();
    let fast = elapsed < Duration::from_secs(1);
    let detail = if misses.is_empty() {
        format!("32 cells reproduced in {elapsed:?}")
    } else {
        format!("{} of 32 cells off: {}", misses.len(), misses.join("; "))
    };
    verdict(misses.is_empty() && fast, detail)
}

// ---------------------------------------------------------------- criterion 2

const H: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;
/// Instances whose hinge arguments or hidden pre-activations sit closer
/// than this to zero are redrawn, so the difference stencil never crosses
/// a kink.
const KINK: f64 = 1e-4;

fn central_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + H;
            let up = f(&p);
            p[i] = x[i] - H;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * H)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`; below a norm of 1e-6 (a vanishing gradient,
/// e.g. positive and negative mapped to the same feature) the gap is
/// compared in absolute terms against that floor.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    n(&diff) / n(a).max(n(b)).max(1e-6)
}

fn random_vec(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(-scale, scale)).collect()
}

struct Instance {
    model: MlpBackbone,
    head: ClassifierHead,
    inputs: Vec<Vec<f64>>,
    classes: usize,
}

fn instance(rng: &mut Rng, samples: usize) -> Instance {
    let d_in = 2 + rng.below(7);
    let hidden = 2 + rng.below(7);
    let d_feat = 2 + rng.below(7);
    let classes = 2 + rng.below(4);
    let model = MlpBackbone::new(&[d_in, hidden, d_feat], rng).unwrap();
    let head = ClassifierHead::random(d_feat, classes, rng.bernoulli(0.5), rng);
    let inputs = (0..samples).map(|_| random_vec(rng, d_in, 1.5)).collect();
    Instance { model, head, inputs, classes }
}

fn batch(inputs: &[Vec<f64>]) -> Mat {
    Mat::from_rows(inputs).unwrap()
}

fn features_with(model: &MlpBackbone, params: &[f64], x: &[f64]) -> Vec<f64> {
    let mut m = model.clone();
    m.set_parameters(params).unwrap();
    m.forward_features(x).unwrap()
}

/// Gradient check of a logit loss through backbone and head. `loss` maps
/// logits to value and `dL/dlogits`.
fn logit_check(inst: &Instance, loss: &dyn Fn(&[f64]) -> (f64, Vec<f64>)) -> Option<f64> {
    let x = batch(&inst.inputs);
    let trace = inst.model.forward_batch(&x).unwrap();
    if trace.min_hidden_margin() < KINK {
        return None;
    }
    let logits = inst.head.forward_batch(trace.features()).unwrap();
    let (_, g) = loss(logits.row(0));
    let gl = Mat::from_vec(1, g.len(), g).unwrap();
    let (hg, gf) = inst.head.backward(trace.features(), &gl).unwrap();
    let mut analytic = inst.model.backward(&trace, &gf).unwrap().flatten();
    analytic.extend(hg.flatten());

    let nb = inst.model.parameter_count();
    let mut params = inst.model.parameters();
    params.extend(inst.head.parameters());
    let f = |p: &[f64]| {
        let feat = features_with(&inst.model, &p[..nb], &inst.inputs[0]);
        let mut h = inst.head.clone();
        h.set_parameters(&p[nb..]).unwrap();
        loss(&h.forward_logits(&feat).unwrap()).0
    };
    Some(rel_err(&analytic, &central_difference(&f, &params)))
}

fn ce_instance(rng: &mut Rng) -> Option<f64> {
    let inst = instance(rng, 1);
    let label = rng.below(inst.classes);
    logit_check(&inst, &|z| {
        let r = ce_loss(z, label).unwrap();
        (r.value, r.grad_logits)
    })
}

fn kd_instance(rng: &mut Rng) -> Option<f64> {
    let inst = instance(rng, 1);
    let teacher = random_vec(rng, inst.classes, 3.0);
    let temperature = rng.uniform(1.0, 5.0);
    let direction = if rng.bernoulli(0.5) { KdDirection::Forward } else { KdDirection::Reverse };
    logit_check(&inst, &|z| {
        let r = kd_loss_directed(z, &teacher, temperature, direction).unwrap();
        (r.value, r.grad_logits)
    })
}

fn triplet_instance(rng: &mut Rng) -> Option<f64> {
    let inst = instance(rng, 3);
    let margin = rng.uniform(0.0, 2.0);
    let trace = inst.model.forward_batch(&batch(&inst.inputs)).unwrap();
    if trace.min_hidden_margin() < KINK {
        return None;
    }
    let fm = trace.features();
    let r = triplet_loss(fm.row(0), fm.row(1), fm.row(2), margin).unwrap();
    let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let arg = margin + d(fm.row(0), fm.row(1)) - d(fm.row(0), fm.row(2));
    if arg.abs() < KINK || d(fm.row(0), fm.row(1)) < KINK || d(fm.row(0), fm.row(2)) < KINK {
        return None;
    }
    let gf = Mat::from_rows(&r.grad_features).unwrap();
    let analytic = inst.model.backward(&trace, &gf).unwrap().flatten();
    let f = |p: &[f64]| {
        let a = features_with(&inst.model, p, &inst.inputs[0]);
        let pos = features_with(&inst.model, p, &inst.inputs[1]);
        let neg = features_with(&inst.model, p, &inst.inputs[2]);
        (margin + d(&a, &pos) - d(&a, &neg)).max(0.0)
    };
    Some(rel_err(&analytic, &central_difference(&f, &inst.model.parameters())))
}

fn ct_instance(rng: &mut Rng) -> Option<f64> {
    let inst = instance(rng, 1);
    let dim = inst.model.output_dim();
    let centers: Vec<Vec<f64>> = (0..inst.classes).map(|_| random_vec(rng, dim, 1.0)).collect();
    let bank = CenterBank::from_centers(centers.clone(), 0.1).unwrap();
    let label = rng.below(inst.classes);
    let margin = rng.uniform(0.0, 2.0);
    let trace = inst.model.forward_batch(&batch(&inst.inputs)).unwrap();
    if trace.min_hidden_margin() < KINK {
        return None;
    }
    let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let gap = (0..inst.classes)
        .filter(|j| *j != label)
        .map(|j| d(&centers[label], &centers[j]))
        .fold(f64::INFINITY, f64::min);
    let feat = trace.features().row(0).to_vec();
    let dist = d(&feat, &centers[label]);
    if (margin + dist - gap).abs() < KINK || dist < KINK {
        return None;
    }
    let r = ct_loss(&feat, label, &bank, margin).unwrap();
    let gf = Mat::from_rows(&r.grad_features).unwrap();
    let analytic = inst.model.backward(&trace, &gf).unwrap().flatten();
    let f = |p: &[f64]| {
        let v = features_with(&inst.model, p, &inst.inputs[0]);
        (margin + d(&v, &centers[label]) - gap).max(0.0)
    };
    Some(rel_err(&analytic, &central_difference(&f, &inst.model.parameters())))
}

fn criterion_2() -> Verdict {
    let t = Instant::now();
    let suites: [(&str, fn(&mut Rng) -> Option<f64>); 4] =
        [("CE", ce_instance), ("triplet", triplet_instance), ("CT", ct_instance), ("KD", kd_instance)];
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, (name, check)) in suites.iter().enumerate() {
        let mut rng = Rng::new(2024 + i as u64);
        let mut worst = 0.0f64;
        let (mut done, mut redrawn) = (0, 0);
        while done < 50 {
            match check(&mut rng) {
                Some(e) => {
                    worst = worst.max(e);
                    done += 1;
                }
                None => redrawn += 1,
            }
        }
        ok &= worst < TOLERANCE;
        parts.push(format!("{name} max {worst:.1e} ({redrawn} redrawn)"));
    }
    let elapsed = t.elapsed();
    ok &= elapsed < Duration::from_secs(30);
    verdict(ok, format!("{} in {elapsed:?}", parts.join(", ")))
}

// ---------------------------------------------------------------- criterion 3

fn entropy_of(logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    -e.iter().map(|v| v / s).filter(|p| *p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

fn criterion_3(full: &Run, config: &Config) -> Verdict {
    let state = &full.state;
    let q = config.pfs.synthesized_per_class;
    let mut accepted = 0usize;
    let mut bad = Vec::new();
    for log in &state.pfs_logs {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        let mut fallbacks = 0;
        for r in &log.records {
            *counts.entry(r.source_class).or_default() += 1;
            let bank = &state.banks[&r.source_class];
            if r.fallback {
                fallbacks += 1;
                continue;
            }
            accepted += 1;
            let f = &bank.stored[r.source_index];
            let err = f
                .iter()
                .zip(&bank.mean)
                .zip(&r.vector)
                .map(|((fi, mi), v)| (r.alpha * fi + (1.0 - r.alpha) * mi - v).abs())
                .fold(0.0, f64::max);
            let logits = log.head.forward_logits(&r.vector).unwrap();
            let top = (0..logits.len()).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
            if err > 1e-12 || !(r.alpha > 0.0 && r.alpha < 1.0) {
                bad.push(format!("session {} class {} reconstruction {err:e}", log.session, r.source_class));
            }
            if top != r.source_class {
                bad.push(format!("session {} class {} predicted {top}", log.session, r.source_class));
            }
            if log.uncertainty_filter && !(entropy_of(&logits) < log.threshold) {
                bad.push(format!("session {} class {} entropy above threshold", log.session, r.source_class));
            }
        }
        let old = log.head.num_classes();
        let counts_ok = (0..old).all(|c| counts.get(&c).copied().unwrap_or(0) == q) && counts.len() == old;
        if !counts_ok || fallbacks != log.fallbacks {
            bad.push(format!("session {} per-class counts or fallback tally wrong", log.session));
        }
    }
    let library = audit_checkpoint(state).map(|a| a.values().all(|x| x.passed())).unwrap_or(false);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(Checkpoint::file_name(state.completed.unwrap()));
    Checkpoint::new(config, None, state).save(&path).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_fscil"))
        .args(["pfs-audit", "--checkpoint"])
        .arg(&path)
        .output()
        .expect("spawn fscil");
    let stdout = String::from_utf8_lossy(&out.stdout);
    let cli = out.status.success() && stdout.lines().filter(|l| l.ends_with("PASS")).count() == state.pfs_logs.len();

    let fallbacks: usize = state.pfs_logs.iter().map(|l| l.fallbacks).sum();
    verdict(
        bad.is_empty() && library && cli && accepted > 0,
        format!(
            "{accepted} accepted pseudo-features in {} sessions, {fallbacks} reported fallbacks, {} violations, pfs-audit {}",
            state.pfs_logs.len(),
            bad.len(),
            if cli { "ok" } else { "failed" }
        ),
    )
}

// ---------------------------------------------------------------- criterion 4

fn final_session(run: &Run) -> (f64, f64) {
    let last = run.report.tracks[0].sessions.last().unwrap();
    (last.accuracy, last.base_class_accuracy)
}

fn criterion_4(full: &Run, naive: &Run, plain_ce: &Run, protocol: &Protocol) -> Verdict {
    let shape_ok = protocol.sessions.len() == 5
        && protocol.sessions[0].classes.len() == 20
        && protocol.sessions[1..].iter().all(|s| s.classes.len() == 2 && s.train.len() == 10);
    let (full_acc, full_base) = final_session(full);
    let (naive_acc, naive_base) = final_session(naive);
    let full_s0 = full.report.tracks[0].sessions[0].accuracy;
    let ce_s0 = plain_ce.report.tracks[0].sessions[0].accuracy;
    let a = full_acc > naive_acc;
    let b = full_base - naive_base >= 10.0;
    let c = full_s0 > ce_s0;
    let elapsed = full.elapsed + naive.elapsed + plain_ce.elapsed;
    let fast = elapsed < Duration::from_secs(600);
    verdict(
        shape_ok && a && b && c && fast,
        format!(
            "(a) final {full_acc:.2} vs naive {naive_acc:.2}; (b) base {full_base:.2} vs {naive_base:.2}; \
             (c) session 0 {full_s0:.2} vs CE {ce_s0:.2}; {elapsed:?} for three runs"
        ),
    )
}

// ---------------------------------------------------------------- criterion 5

fn base_images(protocol: &Protocol) -> Vec<ImageSample> {
    let base = &protocol.sessions[0];
    let column: BTreeMap<usize, usize> = base.classes.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let mut images = protocol.images(&base.train);
    for s in &mut images {
        s.label = column[&s.label];
    }
    images
}

fn criterion_5(protocol: &Protocol, config: &Config) -> Verdict {
    let images = base_images(protocol);
    let classes = protocol.sessions[0].classes.len();
    let root = Rng::new(config.data.seed);
    let ratio = |ct: bool| -> f64 {
        let switches = AblationSwitches { vcg: false, ct, pfs: true, us: true };
        let s1 = stage1_forward_compatible_train(&images, classes, protocol.image_shape, config, switches, &root).unwrap();
        separation_ratio(&extract_features(&s1.backbone, &images).unwrap()).unwrap()
    };
    let with_ct = ratio(true);
    let ce_only = ratio(false);
    verdict(with_ct < ce_only, format!("CE+CT {with_ct:.4} vs CE {ce_only:.4}"))
}

// ---------------------------------------------------------------- criterion 6

fn criterion_6(full: &Run, again: &Run) -> Verdict {
    let a = full.report.payload_json().unwrap();
    let b = again.report.payload_json().unwrap();
    let same_state = full.state == again.state;
    verdict(a == b && same_state, format!("{} payload bytes, identical: {}", a.len(), a == b))
}

// ---------------------------------------------------------------- criterion 7

fn criterion_7(protocol: &Protocol, full: &Run) -> Verdict {
    let mut problems = Vec::new();
    if let Err(e) = protocol.validate() {
        problems.push(format!("validate: {e}"));
    }
    let mut seen = std::collections::BTreeSet::new();
    for s in &protocol.sessions {
        if !s.classes.iter().all(|c| seen.insert(*c)) {
            problems.push(format!("session {} reuses a label", s.id));
        }
        let train_labels: std::collections::BTreeSet<usize> = s.train.iter().map(|i| protocol.samples[*i].label).collect();
        if train_labels != s.classes.iter().copied().collect() {
            problems.push(format!("session {} train labels differ from its classes", s.id));
        }
        if s.id > 0 {
            for c in &s.classes {
                let k = s.train.iter().filter(|i| protocol.samples[**i].label == *c).count();
                if k != 5 {
                    problems.push(format!("session {} class {c} has {k} shots", s.id));
                }
            }
        }
        let pool = protocol.test_pool(s.id);
        let expected: usize = protocol.sessions[..=s.id].iter().map(|x| x.test.len()).sum();
        let pool_labels: std::collections::BTreeSet<usize> = pool.iter().map(|i| protocol.samples[*i].label).collect();
        if pool.len() != expected || pool_labels != seen {
            problems.push(format!("session {} test pool is not cumulative", s.id));
        }
    }
    for (i, s) in full.report.tracks[0].sessions.iter().enumerate() {
        let total: u64 = s.confusion.counts.iter().flatten().sum();
        if total as usize != protocol.test_pool(i).len() {
            problems.push(format!("session {i} confusion total {total}"));
        }
    }
    let frozen = full.state.frozen_checksum.unwrap();
    let checks = full.boundary_checksums.len();
    if full.boundary_checksums.iter().any(|c| *c != frozen) || full.state.check_frozen().is_err() {
        problems.push("backbone changed after stage 1".into());
    }
    let mut broken = protocol.clone();
    let moved = broken.sessions[1].classes[0];
    broken.sessions[2].classes.push(moved);
    if broken.validate().is_ok() {
        problems.push("overlapping label spaces accepted".into());
    }
    verdict(
        problems.is_empty(),
        if problems.is_empty() {
            format!("{} sessions conform, {checks} boundary checksums equal {frozen:016x}", protocol.sessions.len())
        } else {
            problems.join("; ")
        },
    )
}

fn main() {
    let config = desk();
    let protocol = Protocol::generate(&config.data).expect("desk protocol");

    let mut results: Vec<(usize, Verdict)> = vec![(1, criterion_1()), (2, criterion_2())];

    let full = run(&protocol, &config);
    let mut naive_config = config.clone();
    naive_config.ablation = AblationSwitches::all_off();
    let naive = run(&protocol, &naive_config);
    let mut ce_config = config.clone();
    ce_config.ablation = AblationSwitches { vcg: false, ct: false, pfs: true, us: true };
    let plain_ce = run(&protocol, &ce_config);
    let again = run(&protocol, &config);

    results.push((3, criterion_3(&full, &config)));
    results.push((4, criterion_4(&full, &naive, &plain_ce, &protocol)));
    results.push((5, criterion_5(&protocol, &config)));
    results.push((6, criterion_6(&full, &again)));
    results.push((7, criterion_7(&protocol, &full)));

    let mut failed = 0;
    for (n, v) in &results {
        println!("criterion {n}: {} | {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.passed);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
