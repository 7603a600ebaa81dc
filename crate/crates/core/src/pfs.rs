//! Per-class memory banks and uncertainty-guided pseudo-feature synthesis.
//!
//! A pseudo-feature is a convex combination `α·f + (1 − α)·μ_c` of a stored
//! feature and its class mean, kept only when the capturing head predicts
//! the source class with entropy below a threshold.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::ClassifierHead;
use crate::datagen::{FeatureDataset, Provenance};
use crate::error::{check_dim, Error, Result};
use crate::numerics::{argmax, check_finite, mean_vector, softmax, Rng};

/// Stored features of one class plus the mean over all of its features at
/// capture time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMemoryBank {
    pub class_id: usize,
    pub stored: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

impl ClassMemoryBank {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Keeps `min(P, N_c)` uniformly chosen features and the exact mean of all `N_c`.
pub fn build_memory_bank(
    class_id: usize,
    features: &[Vec<f64>],
    per_class: usize,
    rng: &mut Rng,
) -> Result<ClassMemoryBank> {
    if features.is_empty() {
        return Err(Error::InvalidInput(format!("class {class_id} has no features")));
    }
    if per_class == 0 {
        return Err(Error::Config("memory bank size P must be at least 1".into()));
    }
    for f in features {
        check_finite(f)?;
    }
    let mean = mean_vector(features)?;
    let stored = rng.sample_indices(features.len(), per_class).into_iter().map(|i| features[i].clone()).collect();
    Ok(ClassMemoryBank { class_id, stored, mean })
}

/// Shannon entropy `-Σ p log p` with `0·log 0 = 0`.
pub fn entropy(probabilities: &[f64]) -> Result<f64> {
    if probabilities.is_empty() {
        return Err(Error::InvalidInput("empty distribution".into()));
    }
    if probabilities.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
        return Err(Error::InvalidInput("probabilities must be finite and nonnegative".into()));
    }
    let total: f64 = probabilities.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("probabilities sum to {total}, not 1")));
    }
    Ok(-probabilities.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>())
}

/// Entropy of the head's softmax output for `feature`, and the predicted class.
pub fn predict_with_entropy(head: &ClassifierHead, feature: &[f64]) -> Result<(usize, f64)> {
    let logits = head.forward_logits(feature)?;
    let probs = softmax(&logits, 1.0)?;
    Ok((argmax(&logits), entropy(&probs)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum EntropyThreshold {
    /// Fraction of the maximum entropy `ln |C|` of the filtering head.
    MaxEntropyFraction(f64),
    Absolute(f64),
}

impl Default for EntropyThreshold {
    fn default() -> Self {
        EntropyThreshold::MaxEntropyFraction(0.5)
    }
}

impl EntropyThreshold {
    pub fn resolve(&self, num_classes: usize) -> f64 {
        match *self {
            EntropyThreshold::MaxEntropyFraction(f) => f * (num_classes as f64).ln(),
            EntropyThreshold::Absolute(v) => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoFeature {
    pub vector: Vec<f64>,
    pub source_class: usize,
    /// Index of the stored feature `f` inside the class bank.
    pub source_index: usize,
    pub alpha: f64,
    /// Entropy of the filtering head's prediction; `None` for fallbacks.
    pub entropy: Option<f64>,
    /// Slot filled with the class mean after the attempt budget ran out.
    pub fallback: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisParams {
    /// Pseudo-features per class (Q).
    pub per_class: usize,
    /// Absolute entropy threshold.
    pub threshold: f64,
    pub max_attempts: usize,
    /// Apply the entropy test; without it only the prediction check filters.
    pub uncertainty_filter: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisOutcome {
    pub features: Vec<PseudoFeature>,
    pub attempts: usize,
    pub fallbacks: usize,
}

/// Draws candidates until `per_class` are accepted or `max_attempts` runs
/// out; remaining slots are filled with the class mean and counted as
/// fallbacks.
pub fn synthesize_pseudo_features(
    bank: &ClassMemoryBank,
    head: &ClassifierHead,
    params: &SynthesisParams,
    rng: &mut Rng,
) -> Result<SynthesisOutcome> {
    if params.max_attempts < params.per_class {
        return Err(Error::Config(format!(
            "attempt budget {} is smaller than Q = {}",
            params.max_attempts, params.per_class
        )));
    }
    if bank.class_id >= head.num_classes() {
        return Err(Error::Protocol(format!(
            "class {} has no column in a {}-class head",
            bank.class_id,
            head.num_classes()
        )));
    }
    check_dim(head.dim(), bank.dim())?;
    if bank.stored.is_empty() {
        return Err(Error::Protocol(format!("memory bank of class {} is empty", bank.class_id)));
    }
    let mut features = Vec::with_capacity(params.per_class);
    let mut attempts = 0;
    while features.len() < params.per_class && attempts < params.max_attempts {
        attempts += 1;
        let source_index = rng.below(bank.stored.len());
        let alpha = rng.open_unit();
        let vector = convex_combination(&bank.stored[source_index], &bank.mean, alpha);
        let (predicted, h) = predict_with_entropy(head, &vector)?;
        if predicted == bank.class_id && (!params.uncertainty_filter || h < params.threshold) {
            features.push(PseudoFeature {
                vector,
                source_class: bank.class_id,
                source_index,
                alpha,
                entropy: Some(h),
                fallback: false,
            });
        }
    }
    let fallbacks = params.per_class - features.len();
    for _ in 0..fallbacks {
        features.push(PseudoFeature {
            vector: bank.mean.clone(),
            source_class: bank.class_id,
            source_index: 0,
            alpha: 0.0,
            entropy: None,
            fallback: true,
        });
    }
    Ok(SynthesisOutcome { features, attempts, fallbacks })
}

/// `α·f + (1 − α)·μ`
pub fn convex_combination(feature: &[f64], mean: &[f64], alpha: f64) -> Vec<f64> {
    feature.iter().zip(mean).map(|(f, m)| alpha * f + (1.0 - alpha) * m).collect()
}

/// Labeled replay features for one incremental session.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplaySet {
    pub dataset: FeatureDataset,
    pub pseudo: Vec<PseudoFeature>,
    pub fallbacks: usize,
}

/// Union of the current session's features with `Q` pseudo-features per old
/// class (and optionally the stored real features). Each class draws from a
/// sub-generator derived from `(rng seed, class id)`.
pub fn assemble_replay_set(
    banks: &BTreeMap<usize, ClassMemoryBank>,
    old_classes: usize,
    current: &FeatureDataset,
    head: &ClassifierHead,
    params: &SynthesisParams,
    include_stored: bool,
    rng: &Rng,
) -> Result<ReplaySet> {
    let mut dataset = FeatureDataset::empty(current.dim, Provenance::SyntheticBackbone);
    dataset.extend(current)?;
    let mut pseudo = Vec::new();
    let mut fallbacks = 0;
    for class in 0..old_classes {
        let bank = banks
            .get(&class)
            .ok_or_else(|| Error::Protocol(format!("no memory bank for seen class {class}")))?;
        if include_stored {
            for f in &bank.stored {
                dataset.push(f.clone(), class)?;
            }
        }
        if params.per_class == 0 {
            continue;
        }
        let mut class_rng = rng.derive(class as u64);
        let outcome = synthesize_pseudo_features(bank, head, params, &mut class_rng)?;
        fallbacks += outcome.fallbacks;
        for p in outcome.features {
            dataset.push(p.vector.clone(), class)?;
            pseudo.push(p);
        }
    }
    Ok(ReplaySet { dataset, pseudo, fallbacks })
}

/// Outcome of re-checking recorded pseudo-features.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PfsAudit {
    pub checked: usize,
    pub fallbacks: usize,
    pub reconstruction_failures: usize,
    pub prediction_failures: usize,
    pub entropy_failures: usize,
    pub count_failures: usize,
    pub max_reconstruction_error: f64,
}

impl PfsAudit {
    pub fn passed(&self) -> bool {
        self.reconstruction_failures == 0
            && self.prediction_failures == 0
            && self.entropy_failures == 0
            && self.count_failures == 0
    }

    pub fn merge(&mut self, other: &PfsAudit) {
        self.checked += other.checked;
        self.fallbacks += other.fallbacks;
        self.reconstruction_failures += other.reconstruction_failures;
        self.prediction_failures += other.prediction_failures;
        self.entropy_failures += other.entropy_failures;
        self.count_failures += other.count_failures;
        self.max_reconstruction_error = self.max_reconstruction_error.max(other.max_reconstruction_error);
    }
}

/// Re-verifies accepted pseudo-features against the banks and the head that
/// filtered them: exact convex reconstruction (< 1e-12), argmax equal to the
/// source class, entropy strictly below `threshold` (when the entropy test
/// was on), and `expected_per_class` records for every banked class the
/// head covers.
pub fn audit_pseudo_features(
    records: &[PseudoFeature],
    banks: &BTreeMap<usize, ClassMemoryBank>,
    head: &ClassifierHead,
    threshold: f64,
    uncertainty_filter: bool,
    expected_per_class: usize,
) -> Result<PfsAudit> {
    let mut audit = PfsAudit::default();
    let mut per_class: BTreeMap<usize, usize> =
        banks.keys().filter(|c| **c < head.num_classes()).map(|c| (*c, 0)).collect();
    for r in records {
        *per_class.entry(r.source_class).or_default() += 1;
        if r.fallback {
            audit.fallbacks += 1;
            continue;
        }
        audit.checked += 1;
        let bank = banks
            .get(&r.source_class)
            .ok_or_else(|| Error::Protocol(format!("no memory bank for class {}", r.source_class)))?;
        let source = bank
            .stored
            .get(r.source_index)
            .ok_or_else(|| Error::Protocol(format!("stored feature {} missing", r.source_index)))?;
        let rebuilt = convex_combination(source, &bank.mean, r.alpha);
        let err = crate::numerics::norm(&crate::numerics::sub(&rebuilt, &r.vector));
        audit.max_reconstruction_error = audit.max_reconstruction_error.max(err);
        if !(err < 1e-12) || !(r.alpha > 0.0 && r.alpha < 1.0) {
            audit.reconstruction_failures += 1;
        }
        let (predicted, h) = predict_with_entropy(head, &r.vector)?;
        if predicted != r.source_class {
            audit.prediction_failures += 1;
        }
        if uncertainty_filter && !(h < threshold) {
            audit.entropy_failures += 1;
        }
    }
    audit.count_failures = per_class.values().filter(|n| **n != expected_per_class).count();
    Ok(audit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Mat;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn bank_examples() {
        let mut rng = Rng::new(1);
        let one = build_memory_bank(3, &[vec![1.5, -2.0]], 5, &mut rng).unwrap();
        assert_eq!(one.stored, vec![vec![1.5, -2.0]]);
        assert_eq!(one.mean, vec![1.5, -2.0]);

        let feats = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![4.0, 0.0]];
        let two = build_memory_bank(0, &feats, 2, &mut rng).unwrap();
        assert_eq!(two.mean, vec![2.0, 0.0]);
        assert_eq!(two.stored.len(), 2);
        assert_ne!(two.stored[0], two.stored[1]);
        assert!(two.stored.iter().all(|s| feats.contains(s)));

        let all = build_memory_bank(0, &feats, 10, &mut rng).unwrap();
        assert_eq!(all.stored.len(), 3);
        assert!(build_memory_bank(0, &[], 2, &mut rng).is_err());
    }

    #[test]
    fn bank_selection_is_roughly_uniform() {
        let feats: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        let mut counts = [0usize; 5];
        let mut rng = Rng::new(2);
        for _ in 0..5000 {
            for s in build_memory_bank(0, &feats, 2, &mut rng).unwrap().stored {
                counts[s[0] as usize] += 1;
            }
        }
        // expected 2000 each
        assert!(counts.iter().all(|c| (1850..2150).contains(c)), "{counts:?}");
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!(close(entropy(&[0.25; 4]).unwrap(), 4f64.ln(), 1e-15));
        // -(0.7 ln 0.7 + 0.2 ln 0.2 + 0.1 ln 0.1)
        let h = entropy(&[0.7, 0.2, 0.1]).unwrap();
        let oracle = -(0.7f64 * 0.7f64.ln() + 0.2 * 0.2f64.ln() + 0.1 * 0.1f64.ln());
        assert!(close(h, oracle, 1e-15));
        assert!(close(h, 0.80182, 1e-4));
        assert!(entropy(&[0.5, 0.6]).is_err());
        assert!(entropy(&[1.2, -0.2]).is_err());
        assert!(entropy(&[]).is_err());
    }

    fn toy_head() -> ClassifierHead {
        ClassifierHead::from_columns(&[vec![4.0, 0.0], vec![0.0, 4.0]], false, 0).unwrap()
    }

    fn toy_bank() -> ClassMemoryBank {
        ClassMemoryBank { class_id: 0, stored: vec![vec![2.0, 0.5], vec![1.0, -0.5]], mean: vec![1.5, 0.0] }
    }

    #[test]
    fn convex_endpoints_and_midpoint() {
        assert_eq!(convex_combination(&[2.0, 2.0], &[0.0, 0.0], 0.5), vec![1.0, 1.0]);
        assert_eq!(convex_combination(&[2.0, 3.0], &[5.0, 7.0], 0.0), vec![5.0, 7.0]);
        assert_eq!(convex_combination(&[2.0, 3.0], &[5.0, 7.0], 1.0), vec![2.0, 3.0]);
    }

    #[test]
    fn synthesis_accepts_exactly_q() {
        let params = SynthesisParams { per_class: 12, threshold: 0.5 * 2f64.ln(), max_attempts: 1200, uncertainty_filter: true };
        let out = synthesize_pseudo_features(&toy_bank(), &toy_head(), &params, &mut Rng::new(3)).unwrap();
        assert_eq!(out.features.len(), 12);
        assert_eq!(out.fallbacks, 0);
        let bank = toy_bank();
        for p in &out.features {
            assert!(p.alpha > 0.0 && p.alpha < 1.0);
            let rebuilt = convex_combination(&bank.stored[p.source_index], &bank.mean, p.alpha);
            assert!(crate::numerics::norm(&crate::numerics::sub(&rebuilt, &p.vector)) < 1e-12);
            let (pred, h) = predict_with_entropy(&toy_head(), &p.vector).unwrap();
            assert_eq!(pred, 0);
            assert!(h < params.threshold);
        }
        let none = SynthesisParams { per_class: 0, ..params };
        assert!(synthesize_pseudo_features(&bank, &toy_head(), &none, &mut Rng::new(3)).unwrap().features.is_empty());
    }

    #[test]
    fn synthesis_is_deterministic() {
        let params = SynthesisParams { per_class: 5, threshold: 0.6, max_attempts: 500, uncertainty_filter: true };
        let a = synthesize_pseudo_features(&toy_bank(), &toy_head(), &params, &mut Rng::new(9)).unwrap();
        let b = synthesize_pseudo_features(&toy_bank(), &toy_head(), &params, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn exhausted_budget_falls_back_to_mean() {
        // the head always predicts class 1, so nothing of class 0 is accepted
        let head = ClassifierHead::new(Mat::from_vec(2, 2, vec![0.0, 0.0, 0.0, 0.0]).unwrap(), Some(vec![0.0, 1.0]), 0)
            .unwrap();
        let params = SynthesisParams { per_class: 3, threshold: 10.0, max_attempts: 30, uncertainty_filter: true };
        let out = synthesize_pseudo_features(&toy_bank(), &head, &params, &mut Rng::new(1)).unwrap();
        assert_eq!(out.attempts, 30);
        assert_eq!(out.fallbacks, 3);
        assert!(out.features.iter().all(|p| p.fallback && p.vector == toy_bank().mean));
        let bad = SynthesisParams { max_attempts: 2, ..params };
        assert!(synthesize_pseudo_features(&toy_bank(), &head, &bad, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn uncertainty_filter_switch() {
        // a weak head: every candidate is predicted correctly but with high entropy
        let head = ClassifierHead::from_columns(&[vec![0.01, 0.0], vec![0.0, 0.01]], false, 0).unwrap();
        let strict = SynthesisParams { per_class: 4, threshold: 0.1, max_attempts: 40, uncertainty_filter: true };
        let out = synthesize_pseudo_features(&toy_bank(), &head, &strict, &mut Rng::new(4)).unwrap();
        assert_eq!(out.fallbacks, 4);
        let raw = SynthesisParams { uncertainty_filter: false, ..strict };
        let out = synthesize_pseudo_features(&toy_bank(), &head, &raw, &mut Rng::new(4)).unwrap();
        assert_eq!(out.fallbacks, 0);
    }

    #[test]
    fn replay_set_composition() {
        let mut banks = BTreeMap::new();
        banks.insert(0, toy_bank());
        banks.insert(1, ClassMemoryBank { class_id: 1, stored: vec![vec![0.0, 2.0]], mean: vec![0.2, 1.8] });
        let mut current = FeatureDataset::empty(2, Provenance::SyntheticBackbone);
        current.push(vec![1.0, 1.0], 2).unwrap();
        let params = SynthesisParams { per_class: 10, threshold: 0.5 * 2f64.ln(), max_attempts: 1000, uncertainty_filter: true };
        let set = assemble_replay_set(&banks, 2, &current, &toy_head(), &params, true, &Rng::new(5)).unwrap();
        assert_eq!(set.dataset.len(), 1 + 3 + 20);
        assert_eq!(set.pseudo.len(), 20);
        let stored_only = SynthesisParams { per_class: 0, ..params };
        let set = assemble_replay_set(&banks, 2, &current, &toy_head(), &stored_only, true, &Rng::new(5)).unwrap();
        assert_eq!(set.dataset.len(), 4);
        assert!(set.pseudo.is_empty());
        assert!(matches!(
            assemble_replay_set(&banks, 3, &current, &toy_head(), &params, true, &Rng::new(5)),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn audit_detects_tampering() {
        let mut banks = BTreeMap::new();
        banks.insert(0, toy_bank());
        let params = SynthesisParams { per_class: 6, threshold: 0.4, max_attempts: 600, uncertainty_filter: true };
        let out = synthesize_pseudo_features(&toy_bank(), &toy_head(), &params, &mut Rng::new(8)).unwrap();
        let audit = audit_pseudo_features(&out.features, &banks, &toy_head(), 0.4, true, 6).unwrap();
        assert!(audit.passed(), "{audit:?}");
        assert_eq!(audit.checked, 6);

        let mut tampered = out.features.clone();
        tampered[0].vector[0] += 1e-9;
        let audit = audit_pseudo_features(&tampered, &banks, &toy_head(), 0.4, true, 6).unwrap();
        assert_eq!(audit.reconstruction_failures, 1);
        let audit = audit_pseudo_features(&out.features[1..], &banks, &toy_head(), 0.4, true, 6).unwrap();
        assert_eq!(audit.count_failures, 1);
        let audit = audit_pseudo_features(&out.features, &banks, &toy_head(), 1e-6, true, 6).unwrap();
        assert_eq!(audit.entropy_failures, 6);
    }

    #[test]
    fn threshold_resolution() {
        assert!(close(EntropyThreshold::default().resolve(20), 0.5 * 20f64.ln(), 1e-15));
        assert_eq!(EntropyThreshold::Absolute(0.3).resolve(20), 0.3);
    }
}
