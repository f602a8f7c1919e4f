//! Fine-tuning per-code classifiers on generated features, and the
//! centroid meta-embedding baseline.
//!
//! Every classifier row is updated on its own; rows that are not targeted
//! are copied through untouched.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::extractor::{bce_with_logits_on_tape, FeatureDump};
use crate::generation::GanModel;
use crate::params::{Adam, ParamSet};
use crate::tape::{sigmoid, softplus, Tape};

/// Generated positives for one code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisBatch {
    pub code: String,
    /// `count × d_f`, entrywise nonnegative.
    pub features: Array2<f64>,
}

pub fn synthesize_features(model: &GanModel, code: &str, count: usize, seed: u64) -> Result<SynthesisBatch> {
    if count == 0 {
        return Err(Error::invalid("synthesis count must be positive"));
    }
    let l = model
        .conditioning
        .index_of(code)
        .ok_or_else(|| Error::UnknownCode(code.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Array2::from_shape_fn((count, model.config.noise_dim), |_| {
        StandardNormal.sample(&mut rng)
    });
    Ok(SynthesisBatch {
        code: code.to_string(),
        features: model.generate(l, &noise)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub synthesized: usize,
    pub negatives: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Fraction of the pool held out for early stopping.
    pub holdout: f64,
    /// Epochs without held-out improvement before stopping.
    pub patience: usize,
    pub positive_weight: f64,
    /// Also fine-tune few-shot codes, not just zero-shot ones.
    pub include_few_shot: bool,
    pub selection: Selection,
}

/// How the kept fine-tuning epoch is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// Lowest loss on a held-out slice of the training pool, with patience.
    Holdout,
    /// Run every epoch; the caller picks one with [`select_epoch`].
    #[default]
    Validation,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            synthesized: 256,
            negatives: 1024,
            learning_rate: 1e-5,
            batch_size: 128,
            max_epochs: 50,
            holdout: 0.1,
            patience: 5,
            positive_weight: 1.0,
            include_few_shot: false,
            selection: Selection::Validation,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLog {
    pub train_losses: Vec<f64>,
    pub holdout_losses: Vec<f64>,
    /// Epoch whose weights were kept; `None` when none ran.
    pub best_epoch: Option<usize>,
    /// Weights after each epoch.
    #[serde(default)]
    pub trajectory: Vec<Vec<f64>>,
}

fn weighted_loss(g: &Array1<f64>, x: &Array2<f64>, y: &[f64], pos_weight: f64) -> f64 {
    let logits = x.dot(g);
    let total: f64 = logits
        .iter()
        .zip(y)
        .map(|(&z, &y)| {
            let w = if y > 0.5 { pos_weight } else { 1.0 };
            w * (softplus(z) - y * z)
        })
        .sum();
    total / y.len().max(1) as f64
}

/// Logistic regression on `σ(gᵀf)` starting from the pretrained `g`.
///
/// Under [`Selection::Holdout`] keeps the weights of the epoch with the
/// lowest held-out loss; otherwise runs every epoch and returns the last.
pub fn finetune_classifier(
    g: &Array1<f64>,
    positives: &Array2<f64>,
    negatives: &Array2<f64>,
    config: &FinetuneConfig,
    seed: u64,
) -> Result<(Array1<f64>, FinetuneLog)> {
    if positives.nrows() == 0 {
        return Err(Error::invalid("no positive features to fine-tune on"));
    }
    if negatives.nrows() == 0 {
        return Err(Error::invalid("empty negative pool"));
    }
    if positives.ncols() != g.len() || negatives.ncols() != g.len() {
        return Err(Error::invalid("feature dimension does not match the classifier"));
    }
    let pool = ndarray::concatenate(Axis(0), &[positives.view(), negatives.view()])
        .expect("same width");
    let labels: Vec<f64> = (0..pool.nrows())
        .map(|i| if i < positives.nrows() { 1.0 } else { 0.0 })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pool.nrows()).collect();
    order.shuffle(&mut rng);
    let n_hold = if pool.nrows() >= 10 {
        ((pool.nrows() as f64) * config.holdout).round() as usize
    } else {
        0
    };
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let hold_x = pool.select(Axis(0), hold_idx);
    let hold_y: Vec<f64> = hold_idx.iter().map(|&i| labels[i]).collect();
    let mut train_idx = train_idx.to_vec();

    let mut params = ParamSet::new();
    params.insert("g", g.clone().insert_axis(Axis(0)));
    let mut opt = Adam::new(config.learning_rate);
    let mut log = FinetuneLog::default();
    let mut best = g.clone();
    let mut best_loss = f64::INFINITY;
    let mut since_best = 0;
    for epoch in 0..config.max_epochs {
        train_idx.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in train_idx.chunks(config.batch_size.max(1)) {
            let x = pool.select(Axis(0), chunk);
            let cur = params.get("g").expect("g").row(0).to_owned();
            let logits = x.dot(&cur);
            let mut grad = Array1::<f64>::zeros(cur.len());
            let mut loss = 0.0;
            for (r, &i) in chunk.iter().enumerate() {
                let y = labels[i];
                let w = if y > 0.5 { config.positive_weight } else { 1.0 };
                loss += w * (softplus(logits[r]) - y * logits[r]);
                grad.scaled_add(w * (sigmoid(logits[r]) - y), &x.row(r));
            }
            let n = chunk.len() as f64;
            sum += loss;
            let mut grads = BTreeMap::new();
            grads.insert("g".to_string(), (grad / n).insert_axis(Axis(0)));
            opt.step(&mut params, &grads);
        }
        let cur = params.get("g").expect("g").row(0).to_owned();
        log.train_losses.push(sum / train_idx.len().max(1) as f64);
        let score = if n_hold > 0 {
            weighted_loss(&cur, &hold_x, &hold_y, config.positive_weight)
        } else {
            *log.train_losses.last().expect("pushed")
        };
        log.holdout_losses.push(score);
        log.trajectory.push(cur.to_vec());
        if config.selection == Selection::Validation {
            best = cur;
            log.best_epoch = Some(epoch);
            continue;
        }
        if score < best_loss {
            best_loss = score;
            best = cur;
            log.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience.max(1) {
                break;
            }
        }
    }
    if !best.iter().all(|x| x.is_finite()) {
        return Err(Error::Divergence("fine-tuned classifier is not finite".into()));
    }
    Ok((best, log))
}

/// Classifier matrix after fine-tuning, with the codes that changed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptedClassifiers {
    pub codes: Vec<String>,
    /// `L × d_f`, one row per code.
    pub classifiers: Array2<f64>,
    pub finetuned: Vec<String>,
    pub logs: BTreeMap<String, FinetuneLog>,
    /// Epoch installed by [`select_epoch`], counted from 1.
    #[serde(default)]
    pub selected_epoch: Option<usize>,
    /// Validation micro F1 of the fine-tuned codes after each epoch.
    #[serde(default)]
    pub validation_f1: Vec<f64>,
}

/// Fine-tunes the listed codes concurrently; all other rows are copied.
///
/// Negatives for code `l` are the dump's rows of `l` with `y_l = 0`,
/// subsampled to `config.negatives`.
pub fn finetune_codes(
    codes: &[String],
    classifiers: &Array2<f64>,
    positives: &BTreeMap<String, Array2<f64>>,
    dump: &FeatureDump,
    config: &FinetuneConfig,
    seed: u64,
) -> Result<AdaptedClassifiers> {
    if codes.len() != classifiers.nrows() {
        return Err(Error::invalid("one classifier row per code required"));
    }
    let by_code = dump.by_code();
    let jobs: Vec<(usize, &String, &Array2<f64>)> = positives
        .iter()
        .map(|(code, pos)| {
            let l = codes
                .iter()
                .position(|c| c == code)
                .ok_or_else(|| Error::UnknownCode(code.clone()))?;
            Ok((l, code, pos))
        })
        .collect::<Result<_>>()?;
    let results: Vec<(usize, String, Array1<f64>, FinetuneLog)> = jobs
        .par_iter()
        .map(|&(l, code, pos)| {
            let mut neg: Vec<&Vec<f64>> = by_code
                .get(code.as_str())
                .map(|rows| rows.iter().filter(|r| !r.positive).map(|r| &r.features).collect())
                .unwrap_or_default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (l as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            neg.shuffle(&mut rng);
            neg.truncate(config.negatives);
            let mut negatives = Array2::zeros((neg.len(), dump.dim));
            for (r, f) in neg.iter().enumerate() {
                negatives.row_mut(r).assign(&ndarray::ArrayView1::from(f.as_slice()));
            }
            let (g, log) = finetune_classifier(
                &classifiers.row(l).to_owned(),
                pos,
                &negatives,
                config,
                rng.random::<u64>(),
            )
            .map_err(|e| match e {
                Error::Invalid(m) => Error::Invalid(format!("code `{code}`: {m}")),
                other => other,
            })?;
            Ok((l, code.clone(), g, log))
        })
        .collect::<Result<_>>()?;
    let mut adapted = AdaptedClassifiers {
        codes: codes.to_vec(),
        classifiers: classifiers.clone(),
        finetuned: Vec::new(),
        logs: BTreeMap::new(),
        selected_epoch: None,
        validation_f1: Vec::new(),
    };
    for (l, code, g, log) in results {
        adapted.classifiers.row_mut(l).assign(&g);
        adapted.finetuned.push(code.clone());
        adapted.logs.insert(code, log);
    }
    Ok(adapted)
}

impl AdaptedClassifiers {
    /// Number of epochs in the longest recorded trajectory.
    pub fn epochs(&self) -> usize {
        self.logs.values().map(|l| l.trajectory.len()).max().unwrap_or(0)
    }

    /// Classifier matrix as it stood after `epoch` (from 1); codes that
    /// stopped earlier keep their last weights.
    pub fn at_epoch(&self, epoch: usize) -> Result<Array2<f64>> {
        let mut out = self.classifiers.clone();
        for (code, log) in &self.logs {
            let Some(last) = log.trajectory.len().checked_sub(1) else {
                continue;
            };
            let l = self
                .codes
                .iter()
                .position(|c| c == code)
                .ok_or_else(|| Error::UnknownCode(code.clone()))?;
            let w = &log.trajectory[epoch.saturating_sub(1).min(last)];
            out.row_mut(l).assign(&ndarray::ArrayView1::from(w.as_slice()));
        }
        Ok(out)
    }
}

/// Micro F1 (fraction) of `classifiers` on the listed codes over labeled
/// documents; `features[i]` holds document `i`'s `L × d_f` features.
fn micro_f1_on(
    classifiers: &Array2<f64>,
    codes: &[(usize, &str)],
    features: &[Array2<f64>],
    docs: &[Document],
    threshold: f64,
) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (f, doc) in features.iter().zip(docs) {
        for &(l, code) in codes {
            let predicted = sigmoid(f.row(l).dot(&classifiers.row(l))) >= threshold;
            match (predicted, doc.labels.contains(code)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Installs the fine-tuning epoch whose classifiers score the best micro F1
/// over the fine-tuned codes on labeled validation documents.
///
/// Ties go to the earliest epoch; if no epoch scores above zero the last one
/// is kept. Returns the chosen epoch (from 1).
pub fn select_epoch(
    adapted: &mut AdaptedClassifiers,
    features: &[Array2<f64>],
    docs: &[Document],
    threshold: f64,
) -> Result<Option<usize>> {
    if features.len() != docs.len() {
        return Err(Error::invalid("one feature matrix per validation document required"));
    }
    let epochs = adapted.epochs();
    if epochs == 0 {
        return Ok(None);
    }
    let codes: Vec<(usize, &str)> = adapted
        .finetuned
        .iter()
        .map(|c| {
            adapted
                .codes
                .iter()
                .position(|x| x == c)
                .map(|l| (l, c.as_str()))
                .ok_or_else(|| Error::UnknownCode(c.clone()))
        })
        .collect::<Result<_>>()?;
    let scores: Vec<f64> = (1..=epochs)
        .map(|e| Ok(micro_f1_on(&adapted.at_epoch(e)?, &codes, features, docs, threshold)))
        .collect::<Result<_>>()?;
    let mut best = epochs;
    let mut best_score = 0.0;
    for (i, &s) in scores.iter().enumerate() {
        if s > best_score {
            best_score = s;
            best = i + 1;
        }
    }
    let chosen = adapted.at_epoch(best)?;
    adapted.classifiers = chosen;
    for log in adapted.logs.values_mut() {
        if !log.trajectory.is_empty() {
            log.best_epoch = Some(best.min(log.trajectory.len()) - 1);
        }
    }
    adapted.selected_epoch = Some(best);
    adapted.validation_f1 = scores;
    Ok(Some(best))
}

/// Per-code mean of positive training features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidBank {
    pub codes: Vec<String>,
    /// `|M| × d_f`.
    pub centroids: Array2<f64>,
}

impl CentroidBank {
    pub fn get(&self, code: &str) -> Result<ndarray::ArrayView1<'_, f64>> {
        self.codes
            .iter()
            .position(|c| c == code)
            .map(|i| self.centroids.row(i))
            .ok_or_else(|| Error::UnknownCode(format!("no centroid for `{code}`")))
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

/// Codes without a positive row are left out.
pub fn build_centroids(dump: &FeatureDump) -> Result<CentroidBank> {
    let mut sums: BTreeMap<&str, (Array1<f64>, usize)> = BTreeMap::new();
    for row in dump.positives() {
        let e = sums
            .entry(row.code.as_str())
            .or_insert_with(|| (Array1::zeros(dump.dim), 0));
        e.0 += &ndarray::ArrayView1::from(row.features.as_slice());
        e.1 += 1;
    }
    if sums.is_empty() {
        return Err(Error::invalid("feature dump has no positive rows"));
    }
    let mut centroids = Array2::zeros((sums.len(), dump.dim));
    let mut codes = Vec::with_capacity(sums.len());
    for (i, (code, (sum, n))) in sums.into_iter().enumerate() {
        centroids.row_mut(i).assign(&(sum / n as f64));
        codes.push(code.to_string());
    }
    Ok(CentroidBank { codes, centroids })
}

/// `f + e ⊙ (oᵀ M)`.
pub fn meta_embed(f: &Array1<f64>, m: &Array2<f64>, o: &Array1<f64>, e: &Array1<f64>) -> Result<Array1<f64>> {
    if o.len() != m.nrows() || e.len() != f.len() || m.ncols() != f.len() {
        return Err(Error::invalid("meta-embedding shapes are inconsistent"));
    }
    Ok(f + &(e * &m.t().dot(o)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 10,
        }
    }
}

/// `o(f) = softmax(W_o f + b_o)` over centroids, `e(f) = tanh(W_e f + b_e)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaEmbeddingHead {
    pub centroids: CentroidBank,
    pub params: ParamSet,
}

impl MetaEmbeddingHead {
    pub fn new(centroids: CentroidBank, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, d) = centroids.centroids.dim();
        let mut params = ParamSet::new();
        params.init_weight("meta.ow", k, d, &mut rng);
        params.init_zeros("meta.ob", 1, k);
        params.init_weight("meta.ew", d, d, &mut rng);
        params.init_zeros("meta.eb", 1, d);
        Self { centroids, params }
    }

    fn on_tape(&self, tape: &mut Tape, b: &crate::params::Bound, f: crate::tape::Var) -> crate::tape::Var {
        let o = tape.matmul_t(f, b["meta.ow"]);
        let o = tape.add_row(o, b["meta.ob"]);
        let o = tape.log_softmax_rows(o);
        let o = tape.exp(o);
        let m = tape.constant(self.centroids.centroids.clone());
        let mixed = tape.matmul(o, m);
        let e = tape.matmul_t(f, b["meta.ew"]);
        let e = tape.add_row(e, b["meta.eb"]);
        let e = tape.tanh(e);
        let gated = tape.mul(e, mixed);
        tape.add(f, gated)
    }

    /// Meta-embeddings of feature rows.
    pub fn apply(&self, features: &Array2<f64>) -> Array2<f64> {
        let mut tape = Tape::new();
        let b = self.params.bind_frozen(&mut tape);
        let f = tape.constant(features.clone());
        let out = self.on_tape(&mut tape, &b, f);
        tape.value(out).clone()
    }
}

/// One labeled training example for the meta head.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaSample {
    pub code: usize,
    pub features: Array1<f64>,
    pub positive: bool,
}

/// Trains `o` and `e` against `σ(g_lᵀ f_meta)` with frozen classifiers.
pub fn train_meta_head(
    centroids: CentroidBank,
    classifiers: &Array2<f64>,
    samples: &[MetaSample],
    config: &MetaConfig,
    seed: u64,
) -> Result<(MetaEmbeddingHead, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::invalid("no meta-embedding training samples"));
    }
    if centroids.centroids.ncols() != classifiers.ncols() {
        return Err(Error::invalid("centroid and classifier dimensions differ"));
    }
    let mut head = MetaEmbeddingHead::new(centroids, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3e7a_0003);
    let mut opt = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let d = classifiers.ncols();
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let mut x = Array2::zeros((chunk.len(), d));
            let mut g = Array2::zeros((chunk.len(), d));
            let mut y = Array1::zeros(chunk.len());
            for (r, &i) in chunk.iter().enumerate() {
                let s = &samples[i];
                x.row_mut(r).assign(&s.features);
                g.row_mut(r).assign(&classifiers.row(s.code));
                y[r] = if s.positive { 1.0 } else { 0.0 };
            }
            let mut tape = Tape::new();
            let b = head.params.bind(&mut tape);
            let f = tape.constant(x);
            let meta = head.on_tape(&mut tape, &b, f);
            let g = tape.constant(g);
            let prod = tape.mul(meta, g);
            let logits = tape.sum_cols(prod);
            let loss = bce_with_logits_on_tape(&mut tape, logits, &y);
            let loss = tape.scale(loss, 1.0 / chunk.len() as f64);
            sum += tape.scalar(loss) * chunk.len() as f64;
            let grads = tape.backward(loss);
            let grads = head.params.collect_grads(&b, &grads);
            opt.step(&mut head.params, &grads);
        }
        let mean = sum / samples.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence(format!("meta head loss became {mean} in epoch {epoch}")));
        }
        losses.push(mean);
    }
    Ok((head, losses))
}

/// Per-document probabilities `σ(g_lᵀ f_l)`, `N × L`. Codes in `meta_codes`
/// are scored on meta-embedded features instead.
pub fn score_features(
    features: &[Array2<f64>],
    classifiers: &Array2<f64>,
    meta: Option<(&MetaEmbeddingHead, &BTreeSet<usize>)>,
) -> Array2<f64> {
    let rows: Vec<Array1<f64>> = features
        .par_iter()
        .map(|f| {
            let mut f = f.clone();
            if let Some((head, codes)) = meta {
                let idx: Vec<usize> = codes.iter().copied().collect();
                if !idx.is_empty() {
                    let embedded = head.apply(&f.select(Axis(0), &idx));
                    for (r, &l) in idx.iter().enumerate() {
                        f.row_mut(l).assign(&embedded.row(r));
                    }
                }
            }
            (&f * classifiers).sum_axis(Axis(1)).mapv(sigmoid)
        })
        .collect();
    let mut out = Array2::zeros((features.len(), classifiers.nrows()));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(r);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extractor::FeatureRow;
    use ndarray::array;

    fn row(code: &str, positive: bool, f: Vec<f64>) -> FeatureRow {
        FeatureRow {
            code: code.into(),
            doc_id: "d".into(),
            positive,
            features: f,
        }
    }

    #[test]
    fn centroids_are_positive_means() {
        let dump = FeatureDump {
            dim: 2,
            rows: vec![
                row("A", true, vec![0.0, 0.0]),
                row("A", true, vec![2.0, 2.0]),
                row("A", false, vec![9.0, 9.0]),
                row("B", true, vec![1.0, 3.0]),
                row("C", false, vec![1.0, 1.0]),
            ],
        };
        let bank = build_centroids(&dump).unwrap();
        assert_eq!(bank.get("A").unwrap(), array![1.0, 1.0]);
        assert_eq!(bank.get("B").unwrap(), array![1.0, 3.0]);
        assert!(matches!(bank.get("C"), Err(Error::UnknownCode(_))));
    }

    #[test]
    fn meta_embed_examples() {
        let f = array![1.0, 2.0];
        let m = array![[1.0, 0.0], [0.0, 3.0]];
        assert_eq!(meta_embed(&f, &m, &array![0.5, 0.5], &array![0.0, 0.0]).unwrap(), f);
        assert_eq!(meta_embed(&f, &m, &array![0.0, 1.0], &array![1.0, 1.0]).unwrap(), array![1.0, 5.0]);
        assert_eq!(meta_embed(&f, &m, &array![0.5, 0.5], &array![1.0, 1.0]).unwrap(), array![1.5, 3.5]);
        assert!(meta_embed(&f, &m, &array![1.0], &array![1.0, 1.0]).is_err());
    }

    #[test]
    fn zero_epochs_leave_classifier_unchanged() {
        let g = array![0.1, -0.2];
        let cfg = FinetuneConfig {
            max_epochs: 0,
            ..Default::default()
        };
        let (out, log) = finetune_classifier(&g, &array![[1.0, 0.0]], &array![[0.0, 1.0]], &cfg, 1).unwrap();
        assert_eq!(out, g);
        assert_eq!(log.best_epoch, None);
    }

    #[test]
    fn empty_pools_are_errors() {
        let g = array![0.0, 0.0];
        let cfg = FinetuneConfig::default();
        assert!(finetune_classifier(&g, &array![[1.0, 0.0]], &Array2::zeros((0, 2)), &cfg, 1).is_err());
        assert!(finetune_classifier(&g, &Array2::zeros((0, 2)), &array![[1.0, 0.0]], &cfg, 1).is_err());
    }

    #[test]
    fn meta_head_with_zero_lr_is_unchanged() {
        let bank = CentroidBank {
            codes: vec!["A".into(), "B".into()],
            centroids: array![[1.0, 0.0], [0.0, 1.0]],
        };
        let samples = vec![
            MetaSample {
                code: 0,
                features: array![0.5, 0.1],
                positive: true,
            },
            MetaSample {
                code: 1,
                features: array![0.2, 0.3],
                positive: false,
            },
        ];
        let g = array![[1.0, 0.0], [0.0, 1.0]];
        let cfg = MetaConfig {
            learning_rate: 0.0,
            epochs: 3,
            ..Default::default()
        };
        let (head, _) = train_meta_head(bank.clone(), &g, &samples, &cfg, 5).unwrap();
        assert_eq!(head.params, MetaEmbeddingHead::new(bank, 5).params);
    }

    fn selection_fixture(trajectory: Vec<Vec<f64>>) -> (AdaptedClassifiers, Vec<Array2<f64>>, Vec<Document>) {
        let mut logs = BTreeMap::new();
        logs.insert(
            "Z".to_string(),
            FinetuneLog {
                trajectory,
                ..FinetuneLog::default()
            },
        );
        let adapted = AdaptedClassifiers {
            codes: vec!["S".into(), "Z".into()],
            classifiers: array![[1.0, 0.0], [0.0, 0.0]],
            finetuned: vec!["Z".into()],
            logs,
            selected_epoch: None,
            validation_f1: Vec::new(),
        };
        // Feature row 1 of each document belongs to Z; the first is positive.
        let features = vec![array![[0.0, 0.0], [1.0, 0.0]], array![[0.0, 0.0], [0.0, 1.0]]];
        let doc = |id: &str, labels: &[&str]| Document {
            doc_id: id.into(),
            tokens: vec![2],
            labels: labels.iter().map(|s| s.to_string()).collect(),
            group: None,
        };
        (adapted, features, vec![doc("a", &["Z"]), doc("b", &[])])
    }

    #[test]
    fn selection_keeps_the_best_validation_epoch() {
        // epoch 1 flags both docs, epoch 2 only the positive, epoch 3 neither
        let (mut a, f, docs) = selection_fixture(vec![vec![5.0, 5.0], vec![5.0, -5.0], vec![-5.0, -5.0]]);
        assert_eq!(select_epoch(&mut a, &f, &docs, 0.5).unwrap(), Some(2));
        assert_eq!(a.classifiers, array![[1.0, 0.0], [5.0, -5.0]]);
        assert_eq!(a.validation_f1, vec![2.0 / 3.0, 1.0, 0.0]);
        assert_eq!(a.logs["Z"].best_epoch, Some(1));
    }

    #[test]
    fn selection_ties_go_early_and_all_zero_keeps_last() {
        let (mut a, f, docs) = selection_fixture(vec![vec![5.0, -5.0], vec![6.0, -6.0]]);
        assert_eq!(select_epoch(&mut a, &f, &docs, 0.5).unwrap(), Some(1));
        let (mut a, f, docs) = selection_fixture(vec![vec![-5.0, 0.0], vec![-6.0, 0.0]]);
        assert_eq!(select_epoch(&mut a, &f, &docs, 0.5).unwrap(), Some(2));
        assert_eq!(a.classifiers.row(1), array![-6.0, 0.0]);
    }
}
