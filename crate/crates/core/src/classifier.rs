//! Hashed n-gram logistic classifier trained with a class-weighted
//! cross-entropy.
//!
//! Features are FNV-1a hashes of space-joined token n-grams reduced modulo a
//! power-of-two dimension. The model predicts the probability that a report
//! is `Normal`; errors on `Normal` examples cost `pos_weight` times more.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::seeded_rng;
use crate::labeling::Label;
use crate::report::InputMode;

pub const LOSS_EPS: f64 = 1e-12;
const MODEL_MAGIC: &[u8; 4] = b"NCLM";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("text has no tokens")]
    EmptyInput,
    #[error("training data lacks class {0}")]
    MissingClass(Label),
    #[error("uncertain label in training data")]
    UncertainLabel,
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub dimension: usize,
    pub ngram_min: usize,
    pub ngram_max: usize,
    pub lowercase: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { dimension: 1 << 18, ngram_min: 1, ngram_max: 2, lowercase: true }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        if !self.dimension.is_power_of_two() || self.dimension < 1 << 10 || self.dimension > u32::MAX as usize {
            return Err(ClassifierError::InvalidConfig(format!(
                "dimension {} must be a power of two in [2^10, 2^32)",
                self.dimension
            )));
        }
        if !(1 <= self.ngram_min && self.ngram_min <= self.ngram_max && self.ngram_max <= 3) {
            return Err(ClassifierError::InvalidConfig(format!(
                "n-gram range {}..={} must satisfy 1 <= min <= max <= 3",
                self.ngram_min, self.ngram_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub pos_weight: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub seed: u64,
    pub input_mode: InputMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pos_weight: 10.0,
            learning_rate: 0.2,
            epochs: 8,
            batch_size: 16,
            l2: 1e-6,
            seed: 0,
            input_mode: InputMode::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        let bad = |m: &str| Err(ClassifierError::InvalidConfig(m.to_string()));
        if !(self.pos_weight.is_finite() && self.pos_weight > 0.0) {
            return bad("pos_weight must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1");
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return bad("l2 must be non-negative");
        }
        Ok(())
    }
}

/// Sparse feature vector: strictly increasing indices with their counts.
pub type Features = Vec<(u32, f64)>;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn tokenize(text: &str, lowercase: bool) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| if lowercase { t.to_lowercase() } else { t.to_string() })
        .collect()
}

pub fn featurize(text: &str, config: &FeatureConfig) -> Result<Features, ClassifierError> {
    let tokens = tokenize(text, config.lowercase);
    if tokens.is_empty() {
        return Err(ClassifierError::EmptyInput);
    }
    let mask = (config.dimension - 1) as u64;
    let mut idx: Vec<u32> = Vec::new();
    let mut gram = String::new();
    for n in config.ngram_min..=config.ngram_max {
        for window in tokens.windows(n) {
            gram.clear();
            for (i, t) in window.iter().enumerate() {
                if i > 0 {
                    gram.push(' ');
                }
                gram.push_str(t);
            }
            idx.push((fnv1a(gram.as_bytes()) & mask) as u32);
        }
    }
    idx.sort_unstable();
    let mut out: Features = Vec::with_capacity(idx.len());
    for i in idx {
        match out.last_mut() {
            Some((j, c)) if *j == i => *c += 1.0,
            _ => out.push((i, 1.0)),
        }
    }
    Ok(out)
}

/// Class-weighted cross-entropy; `p` is clamped to [ε, 1-ε].
pub fn weighted_loss(y: bool, p: f64, pos_weight: f64) -> f64 {
    let p = p.clamp(LOSS_EPS, 1.0 - LOSS_EPS);
    if y {
        -pos_weight * p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Derivative of the weighted loss with respect to the logit.
fn logit_gradient(y: bool, p: f64, pos_weight: f64) -> f64 {
    if y {
        pos_weight * (p - 1.0)
    } else {
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub config: FeatureConfig,
    pub pos_weight: f64,
}

/// Dense gradient of the training objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<f64>,
    pub bias: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainReport {
    pub final_loss: f64,
    pub epochs: usize,
}

impl LinearModel {
    pub fn zeros(config: FeatureConfig, pos_weight: f64) -> Self {
        Self { weights: vec![0.0; config.dimension], bias: 0.0, config, pos_weight }
    }

    pub fn logit(&self, x: &Features) -> f64 {
        self.bias + x.iter().map(|&(i, c)| self.weights[i as usize] * c).sum::<f64>()
    }

    pub fn predict_features(&self, x: &Features) -> f64 {
        sigmoid(self.logit(x))
    }

    /// Probability that `text` is a normal report.
    pub fn predict(&self, text: &str) -> Result<f64, ClassifierError> {
        Ok(self.predict_features(&featurize(text, &self.config)?))
    }

    /// Normal iff p > 0.5; a tie goes to Abnormal.
    pub fn classify(&self, text: &str) -> Result<Label, ClassifierError> {
        Ok(decide(self.predict(text)?))
    }

    /// Mean weighted loss plus `l2`·‖w‖² (bias unpenalized).
    pub fn objective(&self, data: &[(Features, bool)], l2: f64) -> f64 {
        let loss: f64 = data.iter().map(|(x, y)| weighted_loss(*y, self.predict_features(x), self.pos_weight)).sum();
        loss / data.len() as f64 + l2 * self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    pub fn gradient(&self, data: &[(Features, bool)], l2: f64) -> Gradient {
        let n = data.len() as f64;
        let mut weights: Vec<f64> = self.weights.iter().map(|w| 2.0 * l2 * w).collect();
        let mut bias = 0.0;
        for (x, y) in data {
            let g = logit_gradient(*y, self.predict_features(x), self.pos_weight) / n;
            bias += g;
            for &(i, c) in x {
                weights[i as usize] += g * c;
            }
        }
        Gradient { weights, bias }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), ClassifierError> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&(self.config.dimension as u64).to_le_bytes())?;
        w.write_all(&(self.config.ngram_min as u32).to_le_bytes())?;
        w.write_all(&(self.config.ngram_max as u32).to_le_bytes())?;
        w.write_all(&u32::from(self.config.lowercase).to_le_bytes())?;
        w.write_all(&self.pos_weight.to_le_bytes())?;
        for v in &self.weights {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.bias.to_le_bytes())?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(36 + 8 * (self.weights.len() + 1));
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, ClassifierError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(ClassifierError::Format("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        let mut u32_le = |r: &mut R| -> Result<u32, ClassifierError> {
            r.read_exact(&mut b4)?;
            Ok(u32::from_le_bytes(b4))
        };
        let version = u32_le(&mut r)?;
        if version != MODEL_VERSION {
            return Err(ClassifierError::Format(format!("unsupported version {version}")));
        }
        r.read_exact(&mut b8)?;
        let dimension = u64::from_le_bytes(b8) as usize;
        let ngram_min = u32_le(&mut r)? as usize;
        let ngram_max = u32_le(&mut r)? as usize;
        let lowercase = u32_le(&mut r)? != 0;
        let config = FeatureConfig { dimension, ngram_min, ngram_max, lowercase };
        config.validate().map_err(|e| ClassifierError::Format(e.to_string()))?;
        let mut f64_le = |r: &mut R| -> Result<f64, ClassifierError> {
            r.read_exact(&mut b8)?;
            Ok(f64::from_le_bytes(b8))
        };
        let pos_weight = f64_le(&mut r)?;
        let mut weights = Vec::with_capacity(dimension);
        for _ in 0..dimension {
            weights.push(f64_le(&mut r)?);
        }
        let bias = f64_le(&mut r)?;
        Ok(Self { weights, bias, config, pos_weight })
    }
}

pub fn decide(p: f64) -> Label {
    if p > 0.5 {
        Label::Normal
    } else {
        Label::Abnormal
    }
}

/// Featurizes labeled texts; Uncertain labels are rejected.
pub fn prepare(examples: &[(String, Label)], config: &FeatureConfig) -> Result<Vec<(Features, bool)>, ClassifierError> {
    examples
        .iter()
        .map(|(text, label)| {
            let y = match label {
                Label::Normal => true,
                Label::Abnormal => false,
                Label::Uncertain => return Err(ClassifierError::UncertainLabel),
            };
            Ok((featurize(text, config)?, y))
        })
        .collect()
}

/// Mini-batch SGD on the weighted objective.
///
/// Examples are put in a canonical order before the per-epoch seeded shuffle,
/// so the result depends on the example multiset, not on input order.
pub fn train(
    examples: &[(String, Label)],
    cfg: &TrainConfig,
    fcfg: &FeatureConfig,
) -> Result<(LinearModel, TrainReport), ClassifierError> {
    cfg.validate()?;
    fcfg.validate()?;
    let mut canonical: Vec<&(String, Label)> = examples.iter().collect();
    canonical.sort();
    let owned: Vec<(String, Label)> = canonical.into_iter().cloned().collect();
    let data = prepare(&owned, fcfg)?;
    if !data.iter().any(|(_, y)| *y) {
        return Err(ClassifierError::MissingClass(Label::Normal));
    }
    if !data.iter().any(|(_, y)| !*y) {
        return Err(ClassifierError::MissingClass(Label::Abnormal));
    }

    let mut model = LinearModel::zeros(*fcfg, cfg.pos_weight);
    // weights are stored as scale·v so the L2 shrink is O(1) per step
    let mut scale = 1.0f64;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = seeded_rng(cfg.seed);
    let lr = cfg.learning_rate;
    let shrink = 1.0 - 2.0 * lr * cfg.l2;
    if shrink <= 0.0 {
        return Err(ClassifierError::InvalidConfig("learning_rate·l2 too large".into()));
    }
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let b = batch.len() as f64;
            let mut grads: Vec<(f64, usize)> = Vec::with_capacity(batch.len());
            for &k in batch {
                let (x, y) = &data[k];
                let z = model.bias + scale * x.iter().map(|&(i, c)| model.weights[i as usize] * c).sum::<f64>();
                grads.push((logit_gradient(*y, sigmoid(z), cfg.pos_weight), k));
            }
            scale *= shrink;
            for (g, k) in grads {
                let step = lr * g / b;
                model.bias -= step;
                for &(i, c) in &data[k].0 {
                    model.weights[i as usize] -= step * c / scale;
                }
            }
            if scale < 1e-6 {
                model.weights.iter_mut().for_each(|w| *w *= scale);
                scale = 1.0;
            }
        }
        let loss = {
            let mut snapshot = model.clone();
            snapshot.weights.iter_mut().for_each(|w| *w *= scale);
            snapshot.objective(&data, cfg.l2)
        };
        if !loss.is_finite() {
            return Err(ClassifierError::Divergence { epoch, loss });
        }
    }
    model.weights.iter_mut().for_each(|w| *w *= scale);
    let final_loss = model.objective(&data, cfg.l2);
    if !final_loss.is_finite() || model.weights.iter().any(|w| !w.is_finite()) {
        return Err(ClassifierError::Divergence { epoch: cfg.epochs, loss: final_loss });
    }
    Ok((model, TrainReport { final_loss, epochs: cfg.epochs }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn small() -> FeatureConfig {
        FeatureConfig { dimension: 1 << 10, ngram_min: 1, ngram_max: 1, lowercase: true }
    }

    #[test]
    fn featurize_counts() {
        let f = featurize("a b", &small()).unwrap();
        assert!(f.len() == 2 || f.len() == 1);
        assert_eq!(f.iter().map(|x| x.1).sum::<f64>(), 2.0);
        assert_eq!(featurize("A b", &small()).unwrap(), f);
        let aa = featurize("a a", &small()).unwrap();
        assert_eq!(aa.len(), 1);
        assert_eq!(aa[0].1, 2.0);
        assert!(matches!(featurize(" .,; ", &small()), Err(ClassifierError::EmptyInput)));
    }

    #[test]
    fn featurize_bigrams_and_fnv() {
        // FNV-1a reference values for the empty string and "a"
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        let cfg = FeatureConfig { ngram_max: 2, ..small() };
        let f = featurize("x y z", &cfg).unwrap();
        assert_eq!(f.iter().map(|x| x.1).sum::<f64>(), 5.0);
    }

    #[test]
    fn config_validation() {
        assert!(FeatureConfig::default().validate().is_ok());
        assert!(FeatureConfig { dimension: 512, ..small() }.validate().is_err());
        assert!(FeatureConfig { dimension: 3000, ..small() }.validate().is_err());
        assert!(FeatureConfig { ngram_min: 2, ngram_max: 1, ..small() }.validate().is_err());
        assert!(FeatureConfig { ngram_max: 4, ..small() }.validate().is_err());
    }

    #[test]
    fn loss_values() {
        assert!(weighted_loss(false, 0.0, 10.0) < 1e-11);
        assert!((weighted_loss(true, 0.9, 10.0) - (-10.0 * 0.9f64.ln())).abs() < 1e-12);
        assert!((weighted_loss(true, 0.9, 10.0) - 1.05361).abs() < 1e-5);
        assert!((weighted_loss(true, 0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn zero_model_predicts_half() {
        let m = LinearModel::zeros(small(), 1.0);
        assert_eq!(m.predict("anything at all").unwrap(), 0.5);
        assert_eq!(m.classify("anything").unwrap(), Label::Abnormal);
    }

    #[test]
    fn raising_present_weight_raises_p() {
        let mut m = LinearModel::zeros(small(), 1.0);
        let f = featurize("word", &small()).unwrap();
        let p0 = m.predict("word").unwrap();
        m.weights[f[0].0 as usize] += 0.3;
        assert!(m.predict("word").unwrap() > p0);
    }

    fn toy() -> Vec<(String, Label)> {
        let mut ex = Vec::new();
        for i in 0..10 {
            ex.push((format!("normal{}", i % 2), Label::Normal));
            ex.push((format!("lesion{}", i % 3), Label::Abnormal));
        }
        ex
    }

    #[test]
    fn separable_toy_fits() {
        let cfg = TrainConfig { epochs: 100, pos_weight: 1.0, learning_rate: 1.0, ..TrainConfig::default() };
        let (m, report) = train(&toy(), &cfg, &small()).unwrap();
        for (t, l) in toy() {
            assert_eq!(m.classify(&t).unwrap(), l, "{t}");
        }
        assert!(report.final_loss < 0.1, "{}", report.final_loss);
    }

    #[test]
    fn single_class_rejected() {
        let ex = vec![("a".to_string(), Label::Normal)];
        assert!(matches!(
            train(&ex, &TrainConfig::default(), &small()),
            Err(ClassifierError::MissingClass(Label::Abnormal))
        ));
        let ex = vec![("a".to_string(), Label::Uncertain)];
        assert!(matches!(train(&ex, &TrainConfig::default(), &small()), Err(ClassifierError::UncertainLabel)));
    }

    #[test]
    fn divergence_reported() {
        let cfg = TrainConfig { learning_rate: 1e300, l2: 0.0, epochs: 50, ..TrainConfig::default() };
        assert!(matches!(train(&toy(), &cfg, &small()), Err(ClassifierError::Divergence { .. })));
    }

    #[test]
    fn order_invariant_model_bits() {
        let cfg = TrainConfig { seed: 42, ..TrainConfig::default() };
        let mut ex = toy();
        let (a, _) = train(&ex, &cfg, &small()).unwrap();
        ex.reverse();
        ex.rotate_left(3);
        let (b, _) = train(&ex, &cfg, &small()).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn binary_round_trip_layout() {
        let (m, _) = train(&toy(), &TrainConfig::default(), &small()).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"NCLM");
        assert_eq!(bytes.len(), 4 + 4 + 8 + 4 * 3 + 8 + 8 * (1024 + 1));
        let back = LinearModel::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, m);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(LinearModel::read_from(bad.as_slice()), Err(ClassifierError::Format(_))));
        assert!(LinearModel::read_from(&bytes[..40]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let texts = [
            ("normal brain study", Label::Normal),
            ("mass lesion right frontal", Label::Abnormal),
            ("normal ventricles", Label::Normal),
            ("resection cavity stable", Label::Abnormal),
            ("no lesion", Label::Abnormal),
        ];
        let ex: Vec<(String, Label)> = texts.iter().map(|(t, l)| (t.to_string(), *l)).collect();
        let data = prepare(&ex, &small()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut m = LinearModel::zeros(small(), 10.0);
        for w in m.weights.iter_mut() {
            *w = rng.random_range(-0.5..0.5);
        }
        m.bias = 0.1;
        let l2 = 1e-3;
        let g = m.gradient(&data, l2);
        let h = 1e-6;
        let mut touched: Vec<usize> = data.iter().flat_map(|(x, _)| x.iter().map(|&(i, _)| i as usize)).collect();
        touched.extend([0, 17, 1023]);
        for i in touched {
            let mut plus = m.clone();
            plus.weights[i] += h;
            let mut minus = m.clone();
            minus.weights[i] -= h;
            let fd = (plus.objective(&data, l2) - minus.objective(&data, l2)) / (2.0 * h);
            let rel = (fd - g.weights[i]).abs() / fd.abs().max(g.weights[i].abs()).max(1e-8);
            assert!(rel < 1e-5, "w[{i}] fd={fd} an={} rel={rel}", g.weights[i]);
        }
        let mut plus = m.clone();
        plus.bias += h;
        let mut minus = m.clone();
        minus.bias -= h;
        let fd = (plus.objective(&data, l2) - minus.objective(&data, l2)) / (2.0 * h);
        assert!((fd - g.bias).abs() / fd.abs() < 1e-5);
    }

    proptest! {
        #[test]
        fn loss_non_negative(y in any::<bool>(), p in 0.0f64..=1.0, w in 0.01f64..100.0) {
            prop_assert!(weighted_loss(y, p, w) >= 0.0);
        }

        #[test]
        fn unit_weight_is_cross_entropy(y in any::<bool>(), p in 0.001f64..0.999) {
            let ce = if y { -p.ln() } else { -(1.0 - p).ln() };
            prop_assert!((weighted_loss(y, p, 1.0) - ce).abs() < 1e-12);
        }

        #[test]
        fn predict_strictly_inside(z in -30.0f64..30.0) {
            let p = sigmoid(z);
            prop_assert!(p > 0.0 && p < 1.0);
        }

        #[test]
        fn featurize_deterministic(text in "[a-zA-Z ]{1,60}") {
            prop_assume!(text.chars().any(|c| c.is_alphabetic()));
            let cfg = FeatureConfig::default();
            prop_assert_eq!(featurize(&text, &cfg).unwrap(), featurize(&text, &cfg).unwrap());
        }
    }
}
