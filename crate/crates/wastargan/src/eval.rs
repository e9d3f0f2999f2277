//! Objective evaluation: a speaker classifier trained on real features, then
//! identification accuracy over converted samples and verification equal
//! error rate from cosine trials against per-speaker enrollment means.
//!
//! The classifier is architecturally separate from the model's speaker
//! encoder (it shares only the statistic-pooling idea): ReLU convolutions, a
//! plain linear embedding layer, and a softmax output.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init, Adam, ParamId, ParamStore, Tape, Var};
use crate::training::FeatureSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub channels: usize,
    pub embedding_dim: usize,
    pub kernel: usize,
    pub train_steps: usize,
    pub batch_size: usize,
    pub segment_frames: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            channels: 32,
            embedding_dim: 32,
            kernel: 5,
            train_steps: 500,
            batch_size: 8,
            segment_frames: 128,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Anything that predicts a speaker index from `[D, T]` features.
pub trait Classify {
    fn predict(&self, features: &Array2<f64>) -> usize;
}

/// Anything that embeds `[D, T]` features into a fixed-size vector.
pub trait Embed {
    fn embed(&self, features: &Array2<f64>) -> Array1<f64>;
}

pub struct SpeakerClassifier {
    pub config: ClassifierConfig,
    pub n_speakers: usize,
    in_dim: usize,
    store: ParamStore,
    conv1: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
    lin_emb: (ParamId, ParamId),
    lin_out: (ParamId, ParamId),
}

impl SpeakerClassifier {
    pub fn new<R: Rng>(
        in_dim: usize,
        n_speakers: usize,
        config: ClassifierConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if n_speakers < 2 {
            return Err(Error::Eval(format!(
                "classifier needs at least 2 speakers, got {n_speakers}"
            )));
        }
        let c = config.channels;
        let k = config.kernel;
        let e = config.embedding_dim;
        let mut store = ParamStore::new();
        let conv1 = (
            store.add("conv1.w", init::kaiming(rng, &[c, in_dim, k], in_dim * k)),
            store.add("conv1.b", init::zeros(&[c])),
        );
        let conv2 = (
            store.add("conv2.w", init::kaiming(rng, &[c, c, k], c * k)),
            store.add("conv2.b", init::zeros(&[c])),
        );
        let lin_emb = (
            store.add("emb.w", init::kaiming(rng, &[2 * c, e], 2 * c)),
            store.add("emb.b", init::zeros(&[e])),
        );
        let lin_out = (
            store.add("out.w", init::kaiming(rng, &[e, n_speakers], e)),
            store.add("out.b", init::zeros(&[n_speakers])),
        );
        Ok(SpeakerClassifier {
            config,
            n_speakers,
            in_dim,
            store,
            conv1,
            conv2,
            lin_emb,
            lin_out,
        })
    }

    /// Trunk + pooling + the pre-activation embedding layer.
    fn forward_embedding(&self, tape: &mut Tape, x: Var) -> Var {
        let w1 = tape.param(&self.store, self.conv1.0);
        let b1 = tape.param(&self.store, self.conv1.1);
        let h = tape.conv1d(x, w1, b1);
        let h = tape.relu(h);
        let w2 = tape.param(&self.store, self.conv2.0);
        let b2 = tape.param(&self.store, self.conv2.1);
        let h = tape.conv1d(h, w2, b2);
        let h = tape.relu(h);
        let pooled = tape.stat_pool(h);
        let we = tape.param(&self.store, self.lin_emb.0);
        let be = tape.param(&self.store, self.lin_emb.1);
        tape.linear(pooled, we, be)
    }

    fn forward_logits(&self, tape: &mut Tape, x: Var) -> Var {
        let emb = self.forward_embedding(tape, x);
        let act = tape.relu(emb);
        let wo = tape.param(&self.store, self.lin_out.0);
        let bo = tape.param(&self.store, self.lin_out.1);
        tape.linear(act, wo, bo)
    }

    /// Softmax posteriors for a `[B, D, T]` batch; rows sum to 1.
    pub fn posteriors(&self, x: &Array3<f64>) -> Array2<f64> {
        assert_eq!(x.dim().1, self.in_dim, "classifier feature dim mismatch");
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone().into_dyn());
        let logits = self.forward_logits(&mut tape, xv);
        let z = tape
            .value(logits)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let mut out = z;
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        out
    }

    fn store_grads_step(&mut self, tape: &mut Tape, loss: Var, opt: &mut Adam) {
        let grads = tape.backward(loss);
        let g = grads.for_store(&self.store);
        opt.step(&mut self.store, &g);
    }
}

impl Classify for SpeakerClassifier {
    fn predict(&self, features: &Array2<f64>) -> usize {
        let (d, t) = features.dim();
        let x = features
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((1, d, t))
            .unwrap();
        let p = self.posteriors(&x);
        p.row(0)
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap()
    }
}

impl Embed for SpeakerClassifier {
    fn embed(&self, features: &Array2<f64>) -> Array1<f64> {
        let (d, t) = features.dim();
        let x = features
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((1, d, t))
            .unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x.into_dyn());
        let emb = self.forward_embedding(&mut tape, xv);
        tape.value(emb)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .row(0)
            .to_owned()
    }
}

/// Trains the classifier on the feature set with random crops and softmax
/// cross-entropy. Returns the classifier and its final training accuracy (as
/// a percentage over whole utterances).
pub fn train_speaker_classifier(
    set: &FeatureSet,
    cfg: &ClassifierConfig,
) -> Result<(SpeakerClassifier, f64)> {
    if set.n_speakers() < 2 {
        return Err(Error::Eval(format!(
            "classifier training needs >= 2 speakers, got {}",
            set.n_speakers()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut clf = SpeakerClassifier::new(set.feature_dim(), set.n_speakers(), cfg.clone(), &mut rng)?;
    let mut opt = Adam::new(&clf.store, cfg.lr, 0.9, 0.999);

    for _ in 0..cfg.train_steps {
        let mut x = Array3::<f64>::zeros((cfg.batch_size, set.feature_dim(), cfg.segment_frames));
        let mut labels = Vec::with_capacity(cfg.batch_size);
        for bi in 0..cfg.batch_size {
            let idx = rng.gen_range(0..set.len());
            let crop = set.crop_segment(idx, cfg.segment_frames, &mut rng);
            x.index_axis_mut(Axis(0), bi).assign(&crop);
            labels.push(set.speaker_of(idx));
        }
        let mut tape = Tape::new();
        let xv = tape.leaf(x.into_dyn());
        let logits = clf.forward_logits(&mut tape, xv);
        let loss = tape.cross_entropy(logits, &labels);
        if !tape.scalar(loss).is_finite() {
            return Err(Error::Eval("non-finite classifier loss".into()));
        }
        clf.store_grads_step(&mut tape, loss, &mut opt);
    }

    // Whole-utterance training accuracy.
    let mut correct = 0usize;
    for i in 0..set.len() {
        if clf.predict(set.feature(i)) == set.speaker_of(i) {
            correct += 1;
        }
    }
    let acc = 100.0 * correct as f64 / set.len() as f64;
    Ok((clf, acc))
}

/// Fraction of converted utterances whose predicted speaker equals the
/// intended target, as a percentage, plus intended -> predicted counts.
pub fn identification_accuracy<C: Classify>(
    classifier: &C,
    converted: &[(Array2<f64>, usize)],
) -> (f64, BTreeMap<usize, BTreeMap<usize, usize>>) {
    let mut confusion: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    let mut correct = 0usize;
    for (features, intended) in converted {
        let predicted = classifier.predict(features);
        *confusion
            .entry(*intended)
            .or_default()
            .entry(predicted)
            .or_insert(0) += 1;
        if predicted == *intended {
            correct += 1;
        }
    }
    let acc = if converted.is_empty() {
        0.0
    } else {
        100.0 * correct as f64 / converted.len() as f64
    };
    (acc, confusion)
}

/// Verification trials with target/non-target labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialScoreSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub names: Vec<String>,
}

impl TrialScoreSet {
    pub fn validate(&self) -> Result<()> {
        if self.scores.len() != self.labels.len() || self.scores.len() != self.names.len() {
            return Err(Error::Eval("trial vectors have differing lengths".into()));
        }
        if !self.labels.iter().any(|&l| l) || !self.labels.iter().any(|&l| !l) {
            return Err(Error::Eval(
                "EER needs at least one target and one non-target trial".into(),
            ));
        }
        Ok(())
    }
}

fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(b) / (na * nb)
}

/// Cosine scores between each conversion's embedding and every enrolled
/// speaker's mean embedding. The trial against the intended speaker is the
/// target; every other enrolled speaker is a non-target.
pub fn score_trials<E: Embed>(
    embedder: &E,
    converted: &[(String, Array2<f64>, usize)],
    enrollment: &BTreeMap<usize, Vec<Array2<f64>>>,
) -> Result<TrialScoreSet> {
    if enrollment.is_empty() {
        return Err(Error::Eval("empty enrollment".into()));
    }
    let mut means: BTreeMap<usize, Array1<f64>> = BTreeMap::new();
    for (&speaker, utts) in enrollment {
        if utts.is_empty() {
            return Err(Error::Eval(format!("speaker {speaker} has no enrollment data")));
        }
        let mut acc: Option<Array1<f64>> = None;
        for u in utts {
            let e = embedder.embed(u);
            acc = Some(match acc {
                None => e,
                Some(a) => a + e,
            });
        }
        means.insert(speaker, acc.unwrap() / utts.len() as f64);
    }

    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut names = Vec::new();
    for (conv_id, features, intended) in converted {
        let emb = embedder.embed(features);
        for (&speaker, mean) in &means {
            scores.push(cosine(&emb, mean));
            labels.push(speaker == *intended);
            names.push(format!("{conv_id}|spk{speaker}"));
        }
    }
    Ok(TrialScoreSet {
        scores,
        labels,
        names,
    })
}

/// Equal error rate, percent. Sweeps thresholds over the sorted unique
/// scores with `FAR(t) = frac(non-target >= t)`, `FRR(t) = frac(target < t)`,
/// finds the sign change of `FAR - FRR`, interpolates linearly between the
/// bracketing thresholds, and returns the midpoint of FAR and FRR there.
pub fn compute_eer(t: &TrialScoreSet) -> Result<f64> {
    t.validate()?;
    let targets: Vec<f64> = t
        .scores
        .iter()
        .zip(&t.labels)
        .filter(|(_, &l)| l)
        .map(|(&s, _)| s)
        .collect();
    let non_targets: Vec<f64> = t
        .scores
        .iter()
        .zip(&t.labels)
        .filter(|(_, &l)| !l)
        .map(|(&s, _)| s)
        .collect();

    let mut thresholds: Vec<f64> = t.scores.clone();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    let max = *thresholds.last().unwrap();
    thresholds.push(max + 1.0); // sentinel above every score

    let rates = |theta: f64| -> (f64, f64) {
        let far = non_targets.iter().filter(|&&s| s >= theta).count() as f64
            / non_targets.len() as f64;
        let frr =
            targets.iter().filter(|&&s| s < theta).count() as f64 / targets.len() as f64;
        (far, frr)
    };

    let mut prev = rates(thresholds[0]);
    if prev.0 - prev.1 <= 0.0 {
        // Crossing at or below the smallest score.
        return Ok(100.0 * (prev.0 + prev.1) / 2.0);
    }
    for &theta in &thresholds[1..] {
        let cur = rates(theta);
        let d_prev = prev.0 - prev.1;
        let d_cur = cur.0 - cur.1;
        if d_cur <= 0.0 {
            if d_prev == 0.0 {
                return Ok(100.0 * (prev.0 + prev.1) / 2.0);
            }
            let frac = d_prev / (d_prev - d_cur);
            let far = prev.0 + frac * (cur.0 - prev.0);
            let frr = prev.1 + frac * (cur.1 - prev.1);
            return Ok(100.0 * (far + frr) / 2.0);
        }
        prev = cur;
    }
    unreachable!("sentinel threshold guarantees a crossing");
}

/// Objective evaluation results plus the trial protocol description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc: f64,
    pub eer: f64,
    pub n_converted: usize,
    pub n_trials: usize,
    pub classifier_train_acc: f64,
    /// intended speaker label -> predicted speaker label -> count
    pub confusion: BTreeMap<String, BTreeMap<String, usize>>,
    pub protocol: String,
}

impl EvalReport {
    /// Table mirroring the objective-results layout.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str("condition        | ACC (%) | EER (%)\n");
        out.push_str("-----------------|---------|--------\n");
        out.push_str(&format!(
            "converted (n={:4}) | {:7.2} | {:6.2}\n",
            self.n_converted, self.acc, self.eer
        ));
        out
    }
}

pub const TRIAL_PROTOCOL: &str = "cosine similarity of classifier embeddings against per-speaker \
enrollment means computed over the real training split; one target trial per conversion \
(its intended speaker) and one non-target trial against every other enrolled speaker";

/// Full objective evaluation: trains the classifier on the real manifest's
/// training split, scores every conversion for identification accuracy, and
/// computes the verification EER over cosine trials.
pub fn evaluate_conversions(
    real_manifest: &crate::data::Manifest,
    conversions: &crate::convert::ConversionManifest,
    cfg: &ClassifierConfig,
) -> Result<EvalReport> {
    if conversions.records.is_empty() {
        return Err(Error::Eval("empty conversion set".into()));
    }
    let set = FeatureSet::load(real_manifest)?;
    let (classifier, train_acc) = train_speaker_classifier(&set, cfg)?;

    // Converted features, with intended targets resolved against the real
    // manifest's speaker table.
    let mut items: Vec<(String, Array2<f64>, usize)> = Vec::new();
    for r in &conversions.records {
        let intended = real_manifest.speaker_index(&r.target_speaker)?;
        let c = crate::container::Container::read(&r.feature_path)?;
        let mcep = c
            .get_f32("mcep")
            .ok_or_else(|| Error::Eval(format!("{}: no mcep array", r.conv_id)))?
            .mapv(|v| v as f64)
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|e| Error::Eval(e.to_string()))?;
        items.push((r.conv_id.clone(), mcep.t().as_standard_layout().to_owned(), intended));
    }

    let for_acc: Vec<(Array2<f64>, usize)> =
        items.iter().map(|(_, f, i)| (f.clone(), *i)).collect();
    let (acc, confusion_idx) = identification_accuracy(&classifier, &for_acc);

    let mut enrollment: BTreeMap<usize, Vec<Array2<f64>>> = BTreeMap::new();
    for i in 0..set.len() {
        enrollment
            .entry(set.speaker_of(i))
            .or_default()
            .push(set.feature(i).clone());
    }
    let trials = score_trials(&classifier, &items, &enrollment)?;
    let eer = compute_eer(&trials)?;

    let label = |idx: usize| -> String {
        real_manifest
            .speaker_table
            .get(idx)
            .cloned()
            .unwrap_or_else(|| format!("#{idx}"))
    };
    let confusion = confusion_idx
        .into_iter()
        .map(|(intended, preds)| {
            (
                label(intended),
                preds.into_iter().map(|(p, n)| (label(p), n)).collect(),
            )
        })
        .collect();

    Ok(EvalReport {
        acc,
        eer,
        n_converted: items.len(),
        n_trials: trials.scores.len(),
        classifier_train_acc: train_acc,
        confusion,
        protocol: TRIAL_PROTOCOL.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    struct StubClassifier {
        answer: Option<usize>,
    }

    impl Classify for StubClassifier {
        fn predict(&self, features: &Array2<f64>) -> usize {
            self.answer.unwrap_or_else(|| features[[0, 0]] as usize)
        }
    }

    struct StubEmbedder;

    impl Embed for StubEmbedder {
        /// First column of the features is the embedding.
        fn embed(&self, features: &Array2<f64>) -> Array1<f64> {
            features.column(0).to_owned()
        }
    }

    fn toy_feature_set() -> FeatureSet {
        // Three speakers with band-distinct patterns in their coefficients.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut feats = Vec::new();
        for s in 0..3usize {
            for _ in 0..4 {
                let f = Array2::from_shape_fn((6, 60), |(d, _)| {
                    let sig = if d == s + 1 { 2.0 } else { 0.0 };
                    sig + 0.1 * (rng.gen::<f64>() - 0.5)
                });
                feats.push((s, f));
            }
        }
        FeatureSet::from_arrays(feats, 3)
    }

    #[test]
    fn classifier_separates_band_distinct_speakers() {
        let set = toy_feature_set();
        let cfg = ClassifierConfig {
            channels: 8,
            embedding_dim: 8,
            train_steps: 200,
            batch_size: 6,
            segment_frames: 32,
            ..ClassifierConfig::default()
        };
        let (clf, train_acc) = train_speaker_classifier(&set, &cfg).unwrap();
        assert!(train_acc >= 99.0, "train accuracy {train_acc}");

        // Posterior rows sum to one.
        let x = Array3::from_shape_fn((2, 6, 20), |(_, d, _)| if d == 1 { 2.0 } else { 0.0 });
        let p = clf.posteriors(&x);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn classifier_training_is_stable_under_record_order() {
        let set = toy_feature_set();
        let mut reordered_feats = Vec::new();
        for i in (0..set.len()).rev() {
            reordered_feats.push((set.speaker_of(i), set.feature(i).clone()));
        }
        let reordered = FeatureSet::from_arrays(reordered_feats, 3);
        let cfg = ClassifierConfig {
            channels: 8,
            embedding_dim: 8,
            train_steps: 200,
            batch_size: 6,
            segment_frames: 32,
            ..ClassifierConfig::default()
        };
        let (_, acc1) = train_speaker_classifier(&set, &cfg).unwrap();
        let (_, acc2) = train_speaker_classifier(&reordered, &cfg).unwrap();
        // Same accuracy class within one sample (1/12 of 100%).
        assert!((acc1 - acc2).abs() <= 100.0 / 12.0 + 1e-9);
    }

    #[test]
    fn single_speaker_set_is_rejected() {
        let feats = vec![(0usize, Array2::<f64>::zeros((4, 20)))];
        let set = FeatureSet::from_arrays(feats, 1);
        assert!(train_speaker_classifier(&set, &ClassifierConfig::default()).is_err());
    }

    #[test]
    fn identification_accuracy_stub_cases() {
        let items: Vec<(Array2<f64>, usize)> = (0..8)
            .map(|i| (Array2::from_elem((2, 3), i as f64), i % 4))
            .collect();
        let always_right = |items: &[(Array2<f64>, usize)]| -> Vec<(Array2<f64>, usize)> {
            items
                .iter()
                .map(|(_, intended)| (Array2::from_elem((2, 3), *intended as f64), *intended))
                .collect()
        };
        let (acc, _) = identification_accuracy(&StubClassifier { answer: None }, &always_right(&items));
        assert_eq!(acc, 100.0);

        let never: Vec<(Array2<f64>, usize)> = items
            .iter()
            .map(|(_, intended)| (Array2::from_elem((2, 3), 99.0), *intended))
            .collect();
        let (acc, _) = identification_accuracy(&StubClassifier { answer: None }, &never);
        assert_eq!(acc, 0.0);

        // 5 correct of 8 -> 62.5.
        let mixed: Vec<(Array2<f64>, usize)> = (0..8)
            .map(|i| {
                let intended = i % 4;
                let predicted = if i < 5 { intended } else { 98 };
                (Array2::from_elem((2, 3), predicted as f64), intended)
            })
            .collect();
        let (acc, confusion) = identification_accuracy(&StubClassifier { answer: None }, &mixed);
        assert_eq!(acc, 62.5);
        let total: usize = confusion.values().flat_map(|m| m.values()).sum();
        assert_eq!(total, 8);
    }

    #[test]
    fn score_trials_cosine_cases() {
        // Conversion embedding equals its enrollment mean -> score 1;
        // orthogonal speaker -> 0.
        let mut enrollment: BTreeMap<usize, Vec<Array2<f64>>> = BTreeMap::new();
        let e0 = Array2::from_shape_vec((2, 1), vec![1.0, 0.0]).unwrap();
        let e1 = Array2::from_shape_vec((2, 1), vec![0.0, 1.0]).unwrap();
        enrollment.insert(0, vec![e0.clone()]);
        enrollment.insert(1, vec![e1]);
        let converted = vec![("c0".to_string(), e0, 0usize)];
        let trials = score_trials(&StubEmbedder, &converted, &enrollment).unwrap();
        assert_eq!(trials.scores.len(), 2); // n_converted x n_enrolled
        let target_score = trials
            .scores
            .iter()
            .zip(&trials.labels)
            .find(|(_, &l)| l)
            .map(|(&s, _)| s)
            .unwrap();
        let non_score = trials
            .scores
            .iter()
            .zip(&trials.labels)
            .find(|(_, &l)| !l)
            .map(|(&s, _)| s)
            .unwrap();
        assert!((target_score - 1.0).abs() < 1e-12);
        assert!(non_score.abs() < 1e-12);
    }

    fn eer_of(targets: &[f64], non_targets: &[f64]) -> f64 {
        let mut scores = targets.to_vec();
        scores.extend_from_slice(non_targets);
        let mut labels = vec![true; targets.len()];
        labels.extend(vec![false; non_targets.len()]);
        let names = (0..scores.len()).map(|i| format!("t{i}")).collect();
        compute_eer(&TrialScoreSet {
            scores,
            labels,
            names,
        })
        .unwrap()
    }

    /// Exhaustive oracle: evaluates FAR/FRR on every one of the 2n+1
    /// threshold intervals by direct counting, then applies the same
    /// crossing/interpolation definition.
    pub(super) fn brute_force_eer(targets: &[f64], non_targets: &[f64]) -> f64 {
        let mut all = targets.to_vec();
        all.extend_from_slice(non_targets);
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // Candidate thresholds: below everything, at each score, between
        // scores, above everything.
        let mut candidates = Vec::new();
        candidates.push(all[0] - 1.0);
        for i in 0..all.len() {
            candidates.push(all[i]);
            let next = if i + 1 < all.len() { all[i + 1] } else { all[i] + 2.0 };
            candidates.push((all[i] + next) / 2.0 + f64::EPSILON);
        }
        let rates = |theta: f64| -> (f64, f64) {
            let mut far_n = 0usize;
            for &s in non_targets {
                if s >= theta {
                    far_n += 1;
                }
            }
            let mut frr_n = 0usize;
            for &s in targets {
                if s < theta {
                    frr_n += 1;
                }
            }
            (
                far_n as f64 / non_targets.len() as f64,
                frr_n as f64 / targets.len() as f64,
            )
        };
        let mut prev = rates(candidates[0]);
        if prev.0 - prev.1 <= 0.0 {
            return 100.0 * (prev.0 + prev.1) / 2.0;
        }
        for &theta in &candidates[1..] {
            let cur = rates(theta);
            let d_prev = prev.0 - prev.1;
            let d_cur = cur.0 - cur.1;
            // Skip duplicate rate points: interpolation is between distinct
            // (FAR, FRR) pairs.
            if cur == prev {
                continue;
            }
            if d_cur <= 0.0 {
                if d_prev == 0.0 {
                    return 100.0 * (prev.0 + prev.1) / 2.0;
                }
                let frac = d_prev / (d_prev - d_cur);
                let far = prev.0 + frac * (cur.0 - prev.0);
                let frr = prev.1 + frac * (cur.1 - prev.1);
                return 100.0 * (far + frr) / 2.0;
            }
            prev = cur;
        }
        100.0 * (prev.0 + prev.1) / 2.0
    }

    #[test]
    fn eer_separated_fixture_is_zero() {
        assert_eq!(eer_of(&[0.9, 0.8], &[0.7, 0.1]), 0.0);
    }

    #[test]
    fn eer_three_by_three_fixture() {
        let eer = eer_of(&[0.9, 0.8, 0.3], &[0.7, 0.2, 0.1]);
        assert!((eer - 33.333333333).abs() < 0.01, "eer {eer}");
    }

    #[test]
    fn eer_matches_brute_force_on_random_small_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        for case in 0..100 {
            let nt = rng.gen_range(1..=10);
            let nn = rng.gen_range(1..=10);
            let targets: Vec<f64> = (0..nt).map(|_| (rng.gen::<f64>() * 8.0).round() / 8.0).collect();
            let non_targets: Vec<f64> =
                (0..nn).map(|_| (rng.gen::<f64>() * 8.0).round() / 8.0).collect();
            let fast = eer_of(&targets, &non_targets);
            let slow = brute_force_eer(&targets, &non_targets);
            assert_eq!(fast, slow, "case {case}: {targets:?} vs {non_targets:?}");
        }
    }

    #[test]
    fn eer_same_distribution_is_near_fifty() {
        let mut rng = ChaCha8Rng::seed_from_u64(405);
        let targets: Vec<f64> = (0..10_000).map(|_| rng.gen::<f64>()).collect();
        let non_targets: Vec<f64> = (0..10_000).map(|_| rng.gen::<f64>()).collect();
        let eer = eer_of(&targets, &non_targets);
        assert!((eer - 50.0).abs() < 2.0, "eer {eer}");
    }

    #[test]
    fn eer_requires_both_trial_kinds() {
        let t = TrialScoreSet {
            scores: vec![0.5, 0.6],
            labels: vec![true, true],
            names: vec!["a".into(), "b".into()],
        };
        assert!(compute_eer(&t).is_err());
    }

    proptest! {
        #[test]
        fn eer_invariant_under_increasing_transforms(
            targets in proptest::collection::vec(-1.0f64..1.0, 1..12),
            non_targets in proptest::collection::vec(-1.0f64..1.0, 1..12),
        ) {
            let base = eer_of(&targets, &non_targets);
            let map = |v: f64| 3.0 * v + 10.0; // strictly increasing affine
            let t2: Vec<f64> = targets.iter().map(|&v| map(v)).collect();
            let n2: Vec<f64> = non_targets.iter().map(|&v| map(v)).collect();
            let mapped = eer_of(&t2, &n2);
            prop_assert!((base - mapped).abs() < 1e-9);
        }

        #[test]
        fn eer_invariant_under_negation_and_label_swap(
            targets in proptest::collection::vec(-1.0f64..1.0, 1..12),
            non_targets in proptest::collection::vec(-1.0f64..1.0, 1..12),
        ) {
            let base = eer_of(&targets, &non_targets);
            let t2: Vec<f64> = non_targets.iter().map(|&v| -v).collect();
            let n2: Vec<f64> = targets.iter().map(|&v| -v).collect();
            let swapped = eer_of(&t2, &n2);
            prop_assert!((base - swapped).abs() < 1e-6, "base {base} swapped {swapped}");
        }
    }
}
