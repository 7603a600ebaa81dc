//! The session protocol and the three-stage training pipeline.
//!
//! Stage 1 trains backbone and a wide head on real plus virtual base classes
//! with cross-entropy and the center-triplet term, then freezes the
//! backbone. Stage 2 drops the virtual columns and fine-tunes the head on P
//! stored features per base class. Stage 3 runs once per incremental
//! session: imprint new columns, replay current features with pseudo-features
//! of old classes, and distill from the previous session's head.
//!
//! Internally every class is addressed by its head column; `class_order`
//! maps columns back to dataset class ids.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::backbone::{backward_and_step, ClassifierHead, HeadSnapshot, MlpBackbone, Sgd};
use crate::config::{AblationSwitches, Config, DataConfig, OptimConfig, Similarity, TrackSelection};
use crate::datagen::{
    extract_features, generate_dataset, generate_virtual_classes, random_class_specs, read_images, write_images,
    FeatureDataset, ImageSample, ImageShape, Provenance,
};
use crate::error::{check_dim, Error, Result};
use crate::losses::{ce_batch, ct_loss, kd_loss_directed, CenterBank, KdDirection};
use crate::metrics::{EvalReport, SessionResult, Track, TrackReport, SCHEMA_VERSION};
use crate::numerics::{argmax, cosine_similarity, euclidean_distance, mean_vector, norm, Mat, Rng};
use crate::pfs::{assemble_replay_set, build_memory_bank, ClassMemoryBank, PseudoFeature, SynthesisParams};

const STREAM_CLASSES: u64 = 1;
const STREAM_IMAGES: u64 = 2;
const STREAM_SPLIT: u64 = 3;
const STREAM_INIT: u64 = 4;
const STREAM_VIRTUAL: u64 = 5;
const STREAM_STAGE1: u64 = 6;
const STREAM_STAGE2: u64 = 7;
const STREAM_SESSION_BASE: u64 = 1000;

/// One session: its label space and the sample indices of its splits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub id: usize,
    pub classes: Vec<usize>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// `(N, K)` for incremental sessions.
    pub shape: Option<(usize, usize)>,
}

/// All images plus the session layout over them.
#[derive(Clone, Debug, PartialEq)]
pub struct Protocol {
    pub image_shape: ImageShape,
    pub samples: Vec<ImageSample>,
    pub sessions: Vec<SessionSpec>,
}

impl Protocol {
    /// Renders the dataset described by `[data]` and lays out the base
    /// session followed by N-way K-shot sessions. Pure in `(config, seed)`.
    pub fn generate(data: &DataConfig) -> Result<Self> {
        let root = Rng::new(data.seed);
        let total = data.total_classes();
        let specs = random_class_specs(total, &mut root.derive(STREAM_CLASSES));
        let shape = ImageShape::square(data.image_size);
        let generated = generate_dataset(
            &specs,
            shape,
            data.train_per_class,
            data.test_per_class,
            &data.jitter,
            &mut root.derive(STREAM_IMAGES),
        )?;
        let n_train = generated.train.len();
        let mut samples = generated.train;
        samples.extend(generated.test);
        let session_of = |class: usize| if class < data.base_classes { 0 } else { 1 + (class - data.base_classes) / data.ways };
        for s in &mut samples {
            s.session = session_of(s.label);
        }
        let mut train_by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut test_by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            let map = if i < n_train { &mut train_by_class } else { &mut test_by_class };
            map.entry(s.label).or_default().push(i);
        }
        let mut split_rng = root.derive(STREAM_SPLIT);
        let mut sessions = Vec::with_capacity(1 + data.incremental_sessions);
        for id in 0..=data.incremental_sessions {
            let classes: Vec<usize> = if id == 0 {
                (0..data.base_classes).collect()
            } else {
                let start = data.base_classes + (id - 1) * data.ways;
                (start..start + data.ways).collect()
            };
            let mut train = Vec::new();
            let mut test = Vec::new();
            for c in &classes {
                let pool = &train_by_class[c];
                if id == 0 {
                    train.extend_from_slice(pool);
                } else {
                    let mut pick: Vec<usize> =
                        split_rng.sample_indices(pool.len(), data.shots).into_iter().map(|k| pool[k]).collect();
                    pick.sort_unstable();
                    train.extend(pick);
                }
                test.extend_from_slice(&test_by_class[c]);
            }
            let shape = (id > 0).then_some((data.ways, data.shots));
            sessions.push(SessionSpec { id, classes, train, test, shape });
        }
        let protocol = Protocol { image_shape: shape, samples, sessions };
        protocol.validate()?;
        Ok(protocol)
    }

    /// Session order, disjoint label spaces, index ranges, label membership,
    /// and the N-way K-shot shape of incremental sessions.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Protocol(m));
        if self.sessions.is_empty() {
            return bad("no sessions".into());
        }
        let mut seen_classes = BTreeSet::new();
        let mut seen_samples = BTreeSet::new();
        for (pos, s) in self.sessions.iter().enumerate() {
            if s.id != pos {
                return bad(format!("session at position {pos} has id {}", s.id));
            }
            let classes: BTreeSet<usize> = s.classes.iter().copied().collect();
            if classes.len() != s.classes.len() {
                return bad(format!("session {} lists a class twice", s.id));
            }
            if let Some(c) = classes.iter().find(|c| seen_classes.contains(*c)) {
                return bad(format!("class {c} of session {} already belongs to an earlier session", s.id));
            }
            seen_classes.extend(classes.iter().copied());
            let mut train_counts: BTreeMap<usize, usize> = BTreeMap::new();
            let mut test_counts: BTreeMap<usize, usize> = BTreeMap::new();
            for (split, indices, counts) in
                [("train", &s.train, &mut train_counts), ("test", &s.test, &mut test_counts)]
            {
                for &i in indices {
                    let Some(sample) = self.samples.get(i) else {
                        return bad(format!("session {} {split} index {i} out of range", s.id));
                    };
                    if !classes.contains(&sample.label) {
                        return bad(format!(
                            "session {} {split} sample {i} has label {} outside its label space",
                            s.id, sample.label
                        ));
                    }
                    if !seen_samples.insert(i) {
                        return bad(format!("sample {i} is used twice"));
                    }
                    *counts.entry(sample.label).or_default() += 1;
                }
            }
            for c in &classes {
                if !test_counts.contains_key(c) {
                    return bad(format!("class {c} of session {} has no test samples", s.id));
                }
            }
            if s.id == 0 {
                if classes.len() < 2 {
                    return bad("the base session needs at least two classes".into());
                }
                if let Some(c) = classes.iter().find(|c| train_counts.get(*c).copied().unwrap_or(0) < 2) {
                    return bad(format!("base class {c} needs at least two training samples"));
                }
                if s.shape.is_some() {
                    return bad("the base session has no N-way K-shot shape".into());
                }
            } else {
                let Some((n, k)) = s.shape else {
                    return bad(format!("session {} lacks its N-way K-shot shape", s.id));
                };
                if classes.len() != n {
                    return bad(format!("session {} has {} classes, expected {n}-way", s.id, classes.len()));
                }
                for c in &classes {
                    let got = train_counts.get(c).copied().unwrap_or(0);
                    if got != k {
                        return bad(format!("session {} class {c} has {got} training samples, expected {k}-shot", s.id));
                    }
                }
            }
        }
        if let Some(s) = self.samples.iter().find(|s| s.pixels.len() != self.image_shape.len()) {
            return bad(format!("sample of class {} does not match the image shape", s.label));
        }
        Ok(())
    }

    /// Test indices of sessions `0..=session`.
    pub fn test_pool(&self, session: usize) -> Vec<usize> {
        self.sessions[..=session].iter().flat_map(|s| s.test.iter().copied()).collect()
    }

    /// Clones of the samples at `indices`.
    pub fn images(&self, indices: &[usize]) -> Vec<ImageSample> {
        indices.iter().map(|i| self.samples[*i].clone()).collect()
    }

    /// Writes `samples.bin` (image container) and `sessions.txt` (split file).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_images(&self.samples, self.image_shape, &dir.join("samples.bin"))?;
        let path = dir.join("sessions.txt");
        std::fs::write(&path, format_split(&self.sessions)).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (image_shape, mut samples) = read_images(&dir.join("samples.bin"))?;
        let path = dir.join("sessions.txt");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let sessions = parse_split(&text)?;
        let session_of: BTreeMap<usize, usize> =
            sessions.iter().flat_map(|s| s.classes.iter().map(move |c| (*c, s.id))).collect();
        for sample in &mut samples {
            sample.session = session_of.get(&sample.label).copied().unwrap_or(0);
        }
        let protocol = Protocol { image_shape, samples, sessions };
        protocol.validate()?;
        Ok(protocol)
    }
}

/// Split file: a `fscil-split 1` line, then per session a `session <id>`
/// line (`session <id> <N>-way <K>-shot` for incremental sessions) followed
/// by `classes`, `train` and `test` lines of space-separated indices.
pub fn format_split(sessions: &[SessionSpec]) -> String {
    let mut out = String::from("fscil-split 1\n");
    let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
    for s in sessions {
        match s.shape {
            Some((n, k)) => writeln!(out, "session {} {n}-way {k}-shot", s.id),
            None => writeln!(out, "session {}", s.id),
        }
        .expect("write to string");
        let _ = writeln!(out, "classes {}", join(&s.classes));
        let _ = writeln!(out, "train {}", join(&s.train));
        let _ = writeln!(out, "test {}", join(&s.test));
    }
    out
}

pub fn parse_split(text: &str) -> Result<Vec<SessionSpec>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let err = |n: usize, m: String| Error::parse(format!("split line {}", n + 1), m);
    match lines.next() {
        Some((_, l)) if l.trim() == "fscil-split 1" => {}
        Some((n, _)) => return Err(err(n, "expected header `fscil-split 1`".into())),
        None => return Err(err(0, "empty split file".into())),
    }
    let number = |n: usize, tok: &str| tok.parse::<usize>().map_err(|_| err(n, format!("bad integer {tok:?}")));
    let mut sessions = Vec::new();
    while let Some((n, line)) = lines.next() {
        let words: Vec<&str> = line.split_whitespace().collect();
        if words.first() != Some(&"session") || !(words.len() == 2 || words.len() == 4) {
            return Err(err(n, "expected `session <id>` or `session <id> <N>-way <K>-shot`".into()));
        }
        let id = number(n, words[1])?;
        let shape = if words.len() == 4 {
            let n_way = words[2].strip_suffix("-way").ok_or_else(|| err(n, "expected <N>-way".into()))?;
            let k_shot = words[3].strip_suffix("-shot").ok_or_else(|| err(n, "expected <K>-shot".into()))?;
            Some((number(n, n_way)?, number(n, k_shot)?))
        } else {
            None
        };
        let mut field = |name: &str| -> Result<Vec<usize>> {
            let (n, line) = lines.next().ok_or_else(|| err(n, format!("session {id} is missing its {name} line")))?;
            let mut words = line.split_whitespace();
            if words.next() != Some(name) {
                return Err(err(n, format!("expected `{name}` line")));
            }
            words.map(|w| number(n, w)).collect()
        };
        let classes = field("classes")?;
        let train = field("train")?;
        let test = field("test")?;
        sessions.push(SessionSpec { id, classes, train, test, shape });
    }
    Ok(sessions)
}

/// One mean-feature prototype per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub classes: Vec<usize>,
    pub prototypes: Vec<Vec<f64>>,
    pub similarity: Similarity,
}

/// Mean feature of each class present in `features`, in ascending label order.
pub fn compute_prototypes(features: &FeatureDataset, similarity: Similarity) -> Result<PrototypeSet> {
    let mut by_class: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    for (f, y) in features.features.iter().zip(&features.labels) {
        by_class.entry(*y).or_default().push(f);
    }
    if by_class.is_empty() {
        return Err(Error::InvalidInput("no features to build prototypes from".into()));
    }
    let mut classes = Vec::with_capacity(by_class.len());
    let mut prototypes = Vec::with_capacity(by_class.len());
    for (c, fs) in by_class {
        classes.push(c);
        prototypes.push(mean_vector(&fs)?);
    }
    Ok(PrototypeSet { classes, prototypes, similarity })
}

/// Class of the most similar prototype; ties go to the lowest index.
pub fn ncm_classify(set: &PrototypeSet, feature: &[f64]) -> Result<usize> {
    if set.prototypes.is_empty() {
        return Err(Error::InvalidInput("no prototypes".into()));
    }
    let mut scores = Vec::with_capacity(set.prototypes.len());
    for p in &set.prototypes {
        check_dim(p.len(), feature.len())?;
        scores.push(match set.similarity {
            Similarity::Cosine => cosine_similarity(p, feature)?,
            Similarity::Euclidean => -euclidean_distance(p, feature)?,
        });
    }
    Ok(set.classes[argmax(&scores)])
}

/// Mean distance of each feature to its class mean, divided by the smallest
/// distance between two class means. Smaller is better separated.
pub fn separation_ratio(features: &FeatureDataset) -> Result<f64> {
    let protos = compute_prototypes(features, Similarity::Euclidean)?;
    if protos.classes.len() < 2 {
        return Err(Error::InvalidInput("separation needs at least two classes".into()));
    }
    let index: BTreeMap<usize, usize> = protos.classes.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let mut intra = 0.0;
    for (f, y) in features.features.iter().zip(&features.labels) {
        intra += euclidean_distance(f, &protos.prototypes[index[y]])?;
    }
    intra /= features.len() as f64;
    let mut inter = f64::INFINITY;
    for i in 0..protos.prototypes.len() {
        for j in i + 1..protos.prototypes.len() {
            inter = inter.min(euclidean_distance(&protos.prototypes[i], &protos.prototypes[j])?);
        }
    }
    if inter == 0.0 {
        return Err(Error::Degenerate("two class means coincide".into()));
    }
    Ok(intra / inter)
}

/// Pseudo-features drawn in one incremental session, with the head and
/// threshold that filtered them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PfsSessionLog {
    pub session: usize,
    pub head: ClassifierHead,
    pub threshold: f64,
    pub uncertainty_filter: bool,
    pub per_class: usize,
    pub records: Vec<PseudoFeature>,
    pub fallbacks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionEval {
    pub softmax: SessionResult,
    pub ncm: SessionResult,
}

/// Everything needed to continue the pipeline after a session boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub backbone: MlpBackbone,
    pub head: ClassifierHead,
    pub centers: Option<CenterBank>,
    /// Keyed by head column.
    pub banks: BTreeMap<usize, ClassMemoryBank>,
    /// Head at the end of the last completed session.
    pub snapshot: Option<HeadSnapshot>,
    /// Dataset class id of each head column.
    pub class_order: Vec<usize>,
    pub base_classes: usize,
    /// Last completed session, `None` before stage 2 finished.
    pub completed: Option<usize>,
    pub switches: AblationSwitches,
    pub frozen_checksum: Option<u64>,
    pub stage1_losses: Vec<f64>,
    pub stage1_head_width: usize,
    pub stage2_features: usize,
    pub pfs_logs: Vec<PfsSessionLog>,
    pub results: Vec<SessionEval>,
    pub warnings: Vec<String>,
    pub rng: Rng,
}

impl PipelineState {
    pub fn next_session(&self) -> usize {
        self.completed.map_or(0, |s| s + 1)
    }

    /// Head column of every seen class id.
    pub fn column_of(&self) -> BTreeMap<usize, usize> {
        self.class_order.iter().enumerate().map(|(col, c)| (*c, col)).collect()
    }

    /// Errors if the backbone changed since it was frozen.
    pub fn check_frozen(&self) -> Result<()> {
        match self.frozen_checksum {
            Some(sum) if sum == self.backbone.checksum() && self.backbone.is_frozen() => Ok(()),
            Some(_) => Err(Error::Consistency("backbone parameters changed after stage 1".into())),
            None => Err(Error::Protocol("stage 1 has not run".into())),
        }
    }

    /// NCM prototypes from the class means captured with the memory banks.
    pub fn prototypes(&self, similarity: Similarity) -> Result<PrototypeSet> {
        let mut classes = Vec::new();
        let mut prototypes = Vec::new();
        for (col, bank) in &self.banks {
            classes.push(*col);
            prototypes.push(bank.mean.clone());
        }
        if prototypes.is_empty() {
            return Err(Error::Protocol("no class means captured yet".into()));
        }
        Ok(PrototypeSet { classes, prototypes, similarity })
    }
}

/// Output of stage 1 before the pipeline state exists.
#[derive(Clone, Debug)]
pub struct Stage1Outcome {
    pub backbone: MlpBackbone,
    pub head: ClassifierHead,
    pub centers: Option<CenterBank>,
    /// Mean total loss per epoch.
    pub losses: Vec<f64>,
}

fn rows_of(data: &Mat, idx: &[usize]) -> Result<Mat> {
    let mut out = Vec::with_capacity(idx.len() * data.cols());
    for &i in idx {
        out.extend_from_slice(data.row(i));
    }
    Mat::from_vec(idx.len(), data.cols(), out)
}

fn pixel_matrix(images: &[ImageSample], input_dim: usize) -> Result<Mat> {
    let mut data = Vec::with_capacity(images.len() * input_dim);
    for s in images {
        check_dim(input_dim, s.pixels.len())?;
        data.extend_from_slice(&s.pixels);
    }
    Mat::from_vec(images.len(), input_dim, data)
}

/// Base training over real (and, with VCG on, virtual) classes with CE plus
/// `λ·CT` when CT is on. Centers are refreshed with each batch before the CT
/// term is evaluated. The returned backbone is frozen.
pub fn stage1_forward_compatible_train(
    base: &[ImageSample],
    num_real: usize,
    image_shape: ImageShape,
    config: &Config,
    switches: AblationSwitches,
    root: &Rng,
) -> Result<Stage1Outcome> {
    let s1 = &config.stage1;
    if !(s1.lambda >= 0.0) || !(s1.margin >= 0.0) {
        return Err(Error::Config(format!("lambda and margin must be nonnegative, got {} and {}", s1.lambda, s1.margin)));
    }
    if num_real < 2 || base.len() < 2 * num_real {
        return Err(Error::Protocol("base training needs at least two classes with two samples each".into()));
    }
    let fold = if switches.vcg { s1.virtual_fold } else { 0 };
    let set = generate_virtual_classes(base, image_shape, num_real, fold, &s1.virtual_ranges, &mut root.derive(STREAM_VIRTUAL))?;
    let width = set.num_classes;
    let mut dims = vec![image_shape.len()];
    dims.extend_from_slice(&config.model.hidden);
    dims.push(config.model.feature_dim);
    let mut init_rng = root.derive(STREAM_INIT);
    let mut backbone = MlpBackbone::new(&dims, &mut init_rng)?;
    let mut head = ClassifierHead::random(config.model.feature_dim, width, config.model.head_bias, &mut init_rng);
    let mut centers = if switches.ct { Some(CenterBank::new(width, config.model.feature_dim, s1.center_rate)?) } else { None };
    let x = pixel_matrix(&set.samples, image_shape.len())?;
    let labels: Vec<usize> = set.samples.iter().map(|s| s.label).collect();
    let epochs = config.optim.scaled_epochs(s1.epochs);
    let mut rng = root.derive(STREAM_STAGE1);
    let (mut bopt, mut hopt) = (Sgd::new(), Sgd::new());
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut losses = Vec::with_capacity(epochs);
    info!("stage 1: {} samples, head width {width}, {epochs} epochs, {switches}", labels.len());
    for epoch in 0..epochs {
        let sgd = config.optim.sgd(config.optim.learning_rate, epoch, epochs);
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(config.optim.batch_size) {
            let xb = rows_of(&x, batch)?;
            let yb: Vec<usize> = batch.iter().map(|i| labels[*i]).collect();
            let trace = backbone.forward_batch(&xb)?;
            let logits = head.forward_batch(trace.features())?;
            let (ce, grad_logits) = ce_batch(&logits, &yb)?;
            let mut loss = ce;
            let mut extra = None;
            if let Some(c) = centers.as_mut() {
                let feats = trace.features();
                let rows: Vec<&[f64]> = (0..feats.rows()).map(|r| feats.row(r)).collect();
                c.update(&rows, &yb)?;
                if c.initialized_count() >= 2 {
                    let n = yb.len() as f64;
                    let mut g = Mat::zeros(feats.rows(), feats.cols());
                    let mut ct = 0.0;
                    for (r, &y) in yb.iter().enumerate() {
                        let l = ct_loss(feats.row(r), y, c, s1.margin)?;
                        ct += l.value;
                        for (gv, v) in g.row_mut(r).iter_mut().zip(&l.grad_features[0]) {
                            *gv = s1.lambda * v / n;
                        }
                    }
                    loss += s1.lambda * ct / n;
                    extra = Some(g);
                }
            }
            backward_and_step(&mut backbone, &mut head, &trace, &grad_logits, extra.as_ref(), &sgd, &mut bopt, &mut hopt)?;
            total += loss * batch.len() as f64;
        }
        let mean = total / labels.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Degenerate(format!("stage 1 loss diverged at epoch {epoch}")));
        }
        debug!("stage 1 epoch {epoch}: loss {mean:.5}");
        losses.push(mean);
    }
    backbone.freeze();
    Ok(Stage1Outcome { backbone, head, centers, losses })
}

/// Mini-batch SGD on a fixed feature set; with a teacher, adds
/// `β·KD(teacher ‖ student)` over the teacher's columns.
#[allow(clippy::too_many_arguments)]
fn train_head(
    head: &mut ClassifierHead,
    data: &FeatureDataset,
    epochs: usize,
    base_lr: f64,
    optim: &OptimConfig,
    teacher: Option<(&ClassifierHead, f64, f64, KdDirection)>,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let x = data.as_matrix()?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut opt = Sgd::new();
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let sgd = optim.sgd(base_lr, epoch, epochs);
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(optim.batch_size) {
            let xb = rows_of(&x, batch)?;
            let yb: Vec<usize> = batch.iter().map(|i| data.labels[*i]).collect();
            let logits = head.forward_batch(&xb)?;
            let (ce, mut grad) = ce_batch(&logits, &yb)?;
            let mut loss = ce;
            if let Some((t, beta, temperature, direction)) = teacher {
                if beta > 0.0 {
                    let old = t.num_classes();
                    let tl = t.forward_batch(&xb)?;
                    let n = yb.len() as f64;
                    let mut kd = 0.0;
                    for r in 0..yb.len() {
                        let l = kd_loss_directed(&logits.row(r)[..old], tl.row(r), temperature, direction)?;
                        kd += l.value;
                        for (g, v) in grad.row_mut(r)[..old].iter_mut().zip(&l.grad_logits) {
                            *g += beta * v / n;
                        }
                    }
                    loss += beta * kd / n;
                }
            }
            let (grads, _) = head.backward(&xb, &grad)?;
            opt.step_head(&sgd, head, &grads)?;
            total += loss * batch.len() as f64;
        }
        losses.push(total / data.len() as f64);
    }
    Ok(losses)
}

fn feature_dataset(backbone: &MlpBackbone, images: &[ImageSample], column_of: &BTreeMap<usize, usize>) -> Result<FeatureDataset> {
    let mut ds = extract_features(backbone, images)?;
    for y in &mut ds.labels {
        *y = *column_of
            .get(y)
            .ok_or_else(|| Error::Protocol(format!("class {y} has no head column")))?;
    }
    Ok(ds)
}

/// Stage 1 followed by stage 2 and the session-0 evaluation.
pub fn start_pipeline(protocol: &Protocol, config: &Config) -> Result<PipelineState> {
    config.validate()?;
    protocol.validate()?;
    let switches = config.ablation;
    let root = Rng::new(config.data.seed);
    let base = &protocol.sessions[0];
    let class_order = base.classes.clone();
    let column_of: BTreeMap<usize, usize> = class_order.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let mut base_images = protocol.images(&base.train);
    for s in &mut base_images {
        s.label = column_of[&s.label];
    }
    let s1 = stage1_forward_compatible_train(&base_images, class_order.len(), protocol.image_shape, config, switches, &root)?;
    let mut state = PipelineState {
        frozen_checksum: Some(s1.backbone.checksum()),
        stage1_head_width: s1.head.num_classes(),
        backbone: s1.backbone,
        head: s1.head,
        centers: s1.centers,
        banks: BTreeMap::new(),
        snapshot: None,
        base_classes: class_order.len(),
        class_order,
        completed: None,
        switches,
        stage1_losses: s1.losses,
        stage2_features: 0,
        pfs_logs: Vec::new(),
        results: Vec::new(),
        warnings: Vec::new(),
        rng: root.derive(STREAM_STAGE2),
    };
    stage2_base_finetune(&mut state, protocol, config)?;
    state.completed = Some(0);
    let eval = evaluate_session(&state, protocol, 0, config.eval.similarity)?;
    info!("session 0: softmax {:.2}% ncm {:.2}%", eval.softmax.accuracy, eval.ncm.accuracy);
    state.results.push(eval);
    Ok(state)
}

/// Drops virtual columns, captures base memory banks, and fine-tunes the
/// head on the stored features.
pub fn stage2_base_finetune(state: &mut PipelineState, protocol: &Protocol, config: &Config) -> Result<()> {
    state.check_frozen()?;
    if state.completed.is_some() || !state.banks.is_empty() {
        return Err(Error::Protocol("stage 2 runs once, right after stage 1".into()));
    }
    let base = &protocol.sessions[0];
    let column_of = state.column_of();
    let features = feature_dataset(&state.backbone, &protocol.images(&base.train), &column_of)?;
    let mut head = state.head.truncate(state.base_classes)?;
    let mut finetune = FeatureDataset::empty(features.dim, Provenance::SyntheticBackbone);
    for col in 0..state.base_classes {
        let bank = build_memory_bank(col, &features.class_features(col), config.pfs.stored_per_class, &mut state.rng)?;
        for f in &bank.stored {
            finetune.push(f.clone(), col)?;
        }
        state.banks.insert(col, bank);
    }
    state.stage2_features = finetune.len();
    if config.stage2.enabled {
        let epochs = config.optim.scaled_epochs(config.stage2.epochs);
        let lr = config.stage2.learning_rate.unwrap_or(config.optim.learning_rate);
        info!("stage 2: {} stored features, {epochs} epochs", finetune.len());
        train_head(&mut head, &finetune, epochs, lr, &config.optim, None, &mut state.rng)?;
    }
    state.centers = None;
    state.snapshot = Some(head.snapshot());
    state.head = head;
    Ok(())
}

/// Mean norm of the head's columns; imprinted columns are scaled to it so
/// their logits are on the same scale as the trained ones.
fn mean_column_norm(head: &ClassifierHead) -> f64 {
    let n = head.num_classes();
    (0..n).map(|c| norm(&head.column(c))).sum::<f64>() / n as f64
}

/// One incremental session: imprint, replay with pseudo-features, distill,
/// capture new banks, roll the snapshot forward, evaluate.
pub fn stage3_incremental_session(state: &mut PipelineState, protocol: &Protocol, config: &Config) -> Result<()> {
    let id = state.next_session();
    if id == 0 {
        return Err(Error::Protocol("the base session must complete before incremental sessions".into()));
    }
    let spec = protocol
        .sessions
        .get(id)
        .ok_or_else(|| Error::Protocol(format!("protocol has no session {id}")))?;
    let snapshot = state
        .snapshot
        .clone()
        .ok_or_else(|| Error::Protocol("no head snapshot from the previous session".into()))?;
    if snapshot.session_id() != id - 1 {
        return Err(Error::Protocol(format!(
            "snapshot belongs to session {}, expected {}",
            snapshot.session_id(),
            id - 1
        )));
    }
    state.check_frozen()?;
    let Some((n_way, k_shot)) = spec.shape else {
        return Err(Error::Protocol(format!("session {id} lacks its N-way K-shot shape")));
    };
    if spec.classes.len() != n_way || spec.train.len() != n_way * k_shot {
        return Err(Error::Protocol(format!("session {id} is not {n_way}-way {k_shot}-shot")));
    }
    if let Some(c) = spec.classes.iter().find(|c| state.class_order.contains(c)) {
        return Err(Error::Protocol(format!("class {c} of session {id} was seen before")));
    }
    let old = state.class_order.len();
    state.class_order.extend_from_slice(&spec.classes);
    let column_of = state.column_of();
    let current = feature_dataset(&state.backbone, &protocol.images(&spec.train), &column_of)?;
    let mut new_means = Vec::with_capacity(n_way);
    for col in old..old + n_way {
        let feats = current.class_features(col);
        if feats.len() != k_shot {
            return Err(Error::Protocol(format!("session {id} class column {col} has {} shots, expected {k_shot}", feats.len())));
        }
        new_means.push(mean_vector(&feats)?);
    }
    let target = mean_column_norm(&state.head);
    let imprinted: Vec<Vec<f64>> = new_means
        .iter()
        .map(|m| {
            let s = target / norm(m).max(1e-12);
            m.iter().map(|v| v * s).collect()
        })
        .collect();
    let mut head = state.head.extend(&imprinted, id)?;

    let session_rng = Rng::new(config.data.seed).derive(STREAM_SESSION_BASE + id as u64);
    let teacher = snapshot.head();
    let (replay, beta) = if state.switches.pfs {
        let q = config.pfs.synthesized_per_class;
        let threshold = config.pfs.entropy_threshold().resolve(teacher.num_classes());
        let params = SynthesisParams {
            per_class: q,
            threshold,
            max_attempts: config.pfs.attempts_per_feature * q,
            uncertainty_filter: state.switches.us,
        };
        let set = assemble_replay_set(
            &state.banks,
            old,
            &current,
            teacher,
            &params,
            config.stage3.replay_stored,
            &session_rng.derive(1),
        )?;
        let mut per_class_fallbacks: BTreeMap<usize, usize> = BTreeMap::new();
        for p in set.pseudo.iter().filter(|p| p.fallback) {
            *per_class_fallbacks.entry(p.source_class).or_default() += 1;
        }
        for (col, n) in per_class_fallbacks {
            let msg = format!(
                "session {id}: class {} filled {n} of {q} pseudo-feature slots with its mean after {} attempts",
                state.class_order[col], params.max_attempts
            );
            warn!("{msg}");
            state.warnings.push(msg);
        }
        state.pfs_logs.push(PfsSessionLog {
            session: id,
            head: teacher.clone(),
            threshold,
            uncertainty_filter: params.uncertainty_filter,
            per_class: q,
            records: set.pseudo,
            fallbacks: set.fallbacks,
        });
        (set.dataset, config.stage3.beta)
    } else {
        (current.clone(), 0.0)
    };
    let epochs = config.optim.scaled_epochs(config.stage3.epochs);
    let lr = config.stage3.learning_rate.unwrap_or(config.optim.learning_rate);
    info!("session {id}: replay set of {} features, beta {beta}, {epochs} epochs", replay.len());
    let kd = Some((teacher, beta, config.stage3.temperature, config.stage3.kd_direction));
    let mut train_rng = session_rng.derive(2);
    train_head(&mut head, &replay, epochs, lr, &config.optim, kd, &mut train_rng)?;

    let mut bank_rng = session_rng.derive(3);
    for col in old..old + n_way {
        let bank = build_memory_bank(col, &current.class_features(col), config.pfs.stored_per_class, &mut bank_rng)?;
        state.banks.insert(col, bank);
    }
    state.snapshot = Some(head.snapshot());
    state.head = head;
    state.completed = Some(id);
    state.check_frozen()?;
    let eval = evaluate_session(state, protocol, id, config.eval.similarity)?;
    info!("session {id}: softmax {:.2}% ncm {:.2}%", eval.softmax.accuracy, eval.ncm.accuracy);
    state.results.push(eval);
    Ok(())
}

/// Evaluates the current head and the class-mean prototypes on the test
/// sets of sessions `0..=session`.
pub fn evaluate_session(state: &PipelineState, protocol: &Protocol, session: usize, similarity: Similarity) -> Result<SessionEval> {
    let pool = protocol.test_pool(session);
    let column_of = state.column_of();
    let features = feature_dataset(&state.backbone, &protocol.images(&pool), &column_of)?;
    let x = features.as_matrix()?;
    let logits = state.head.forward_batch(&x)?;
    let softmax_pred: Vec<usize> = (0..logits.rows()).map(|r| argmax(logits.row(r))).collect();
    let protos = state.prototypes(similarity)?;
    let ncm_pred = features.features.iter().map(|f| ncm_classify(&protos, f)).collect::<Result<Vec<_>>>()?;
    let to_class = |cols: &[usize]| -> Vec<usize> { cols.iter().map(|c| state.class_order[*c]).collect() };
    let labels = to_class(&features.labels);
    let seen = &state.class_order;
    Ok(SessionEval {
        softmax: SessionResult::from_predictions(session, seen, state.base_classes, &to_class(&softmax_pred), &labels)?,
        ncm: SessionResult::from_predictions(session, seen, state.base_classes, &to_class(&ncm_pred), &labels)?,
    })
}

/// Runs every remaining session; `on_boundary` sees the state after each
/// completed session (used for checkpoints).
pub fn continue_pipeline<F>(state: &mut PipelineState, protocol: &Protocol, config: &Config, mut on_boundary: F) -> Result<()>
where
    F: FnMut(&PipelineState) -> Result<()>,
{
    while state.next_session() < protocol.sessions.len() {
        stage3_incremental_session(state, protocol, config)?;
        on_boundary(state)?;
    }
    Ok(())
}

/// Assembles the report from the evaluated sessions.
pub fn build_report(state: &PipelineState, config: &Config, tracks: TrackSelection) -> Result<EvalReport> {
    let mut out = Vec::new();
    if matches!(tracks, TrackSelection::Softmax | TrackSelection::Both) {
        out.push(TrackReport::new(Track::Softmax, state.results.iter().map(|r| r.softmax.clone()).collect())?);
    }
    if matches!(tracks, TrackSelection::Ncm | TrackSelection::Both) {
        out.push(TrackReport::new(Track::Ncm, state.results.iter().map(|r| r.ncm.clone()).collect())?);
    }
    Ok(EvalReport {
        schema_version: SCHEMA_VERSION,
        seed: config.data.seed,
        config: config.clone(),
        tracks: out,
        warnings: state.warnings.clone(),
        timestamps: None,
    })
}

/// The full pipeline over all sessions, returning the report and final state.
pub fn run_pipeline(protocol: &Protocol, config: &Config) -> Result<(EvalReport, PipelineState)> {
    let mut state = start_pipeline(protocol, config)?;
    continue_pipeline(&mut state, protocol, config, |_| Ok(()))?;
    let report = build_report(&state, config, config.eval.tracks)?;
    Ok((report, state))
}
