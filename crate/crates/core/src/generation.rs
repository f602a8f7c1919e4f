//! Conditional WGAN-GP over label-wise features.
//!
//! A code is encoded as `c_l = e_l ‖ g_l`: `e_l` is the dimension-wise max of
//! LSTM hidden states over the description words, `g_l` the extractor's
//! frozen classifier vector. The generator maps `(z, c_l)` to a nonnegative
//! feature; the critic scores `(f, c_l)` pairs. Zero-shot codes borrow real
//! features from their nearest seen sibling. Optional auxiliary terms are
//! keyword reconstruction, classification by the frozen `g_l` and cycle
//! regression back to `c_l`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{extract_keywords, Document, EmbeddingTable, KeywordIndex, KeywordSet};
use crate::error::{Error, Result};
use crate::extractor::{ExtractorModel, FeatureDump};
use crate::hierarchy::{cosine, LabelHierarchy};
use crate::params::{Adam, Bound, GradMap, ParamSet};
use crate::tape::{Tape, Var};

/// Added under the square root of the tape penalty so its derivative stays finite.
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    /// Hidden width of generator and critic.
    pub hidden: usize,
    pub noise_dim: usize,
    /// LSTM hidden size, i.e. `dim(e_l)`.
    pub encoder_hidden: usize,
    pub critic_steps: usize,
    pub batch_size: usize,
    /// Zero-shot items per critic batch; proportional to `|U| : |S|` when unset.
    pub zero_shot_batch: Option<usize>,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub epochs: usize,
    pub lambda: f64,
    /// Weight of the keyword reconstruction term.
    pub beta: f64,
    pub cls_weight: f64,
    pub cyc_weight: f64,
    pub critic_slope: f64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            hidden: 800,
            noise_dim: 100,
            encoder_hidden: 200,
            critic_steps: 5,
            batch_size: 128,
            zero_shot_batch: None,
            learning_rate: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            epochs: 60,
            lambda: 10.0,
            beta: 0.1,
            cls_weight: 0.01,
            cyc_weight: 0.1,
            critic_slope: 0.2,
        }
    }
}

/// Which auxiliary objectives are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossFlags {
    pub zero_shot: bool,
    pub keywords: bool,
    pub cls: bool,
    pub cyc: bool,
}

/// Named loss combinations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    Wgan,
    WganCls,
    WganCyc,
    WganKey,
    WganZ,
    WganZCls,
    WganZCyc,
    WganZKey,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Wgan,
        Method::WganCls,
        Method::WganCyc,
        Method::WganKey,
        Method::WganZ,
        Method::WganZCls,
        Method::WganZCyc,
        Method::WganZKey,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Wgan => "wgan",
            Method::WganCls => "wgan+cls",
            Method::WganCyc => "wgan+cyc",
            Method::WganKey => "wgan+key",
            Method::WganZ => "wganz",
            Method::WganZCls => "wganz+cls",
            Method::WganZCyc => "wganz+cyc",
            Method::WganZKey => "wganz+key",
        }
    }

    pub fn flags(self) -> LossFlags {
        let zero_shot = matches!(
            self,
            Method::WganZ | Method::WganZCls | Method::WganZCyc | Method::WganZKey
        );
        LossFlags {
            zero_shot,
            keywords: matches!(self, Method::WganKey | Method::WganZKey),
            cls: matches!(self, Method::WganCls | Method::WganZCls),
            cyc: matches!(self, Method::WganCyc | Method::WganZCyc),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let known: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown method `{s}`; expected one of {}", known.join(", ")))
            })
    }
}

/// Frozen per-code inputs taken from a trained extractor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    pub codes: Vec<String>,
    /// Description word vectors per code, `M × d`.
    pub descriptions: Vec<Array2<f64>>,
    /// Description-mean label embeddings `v_l`, `L × d`.
    pub label_vectors: Array2<f64>,
    /// Graph label embeddings `g_l`, `L × d_f`.
    pub classifiers: Array2<f64>,
}

impl Conditioning {
    pub fn from_extractor(model: &ExtractorModel) -> Self {
        let (v, g) = model.label_state();
        let emb = model.embedding_matrix();
        let descriptions = model
            .graph
            .description_ids
            .iter()
            .map(|ids| emb.select(Axis(0), ids))
            .collect();
        Self {
            codes: model.graph.codes.clone(),
            descriptions,
            label_vectors: v,
            classifiers: g,
        }
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.codes.iter().position(|c| c == code)
    }

    pub fn word_dim(&self) -> usize {
        self.label_vectors.ncols()
    }

    pub fn feature_dim(&self) -> usize {
        self.classifiers.ncols()
    }
}

/// Global keyword vocabulary `𝒦` with the word vectors used as output weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeywordVocab {
    pub tokens: Vec<usize>,
    /// `|𝒦| × d`.
    pub vectors: Array2<f64>,
}

impl KeywordVocab {
    pub fn new(tokens: Vec<usize>, embeddings: &Array2<f64>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::invalid("keyword vocabulary is empty"));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= embeddings.nrows()) {
            return Err(Error::invalid(format!("keyword token {t} outside the embedding table")));
        }
        Ok(Self {
            vectors: embeddings.select(Axis(0), &tokens),
            tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Maps `(token, score)` pairs to `(vocabulary position, score)`.
    pub fn positions(&self, entries: &[(usize, f64)]) -> Result<Vec<(usize, f64)>> {
        entries
            .iter()
            .map(|&(t, s)| {
                self.tokens
                    .binary_search(&t)
                    .map(|p| (p, s))
                    .map_err(|_| Error::invalid(format!("keyword token {t} is not in the vocabulary")))
            })
            .collect()
    }
}

/// Dimension-wise max over hidden states (`M × h`), concatenated with `g`.
pub fn encode_label(hidden: &Array2<f64>, g: &Array1<f64>) -> Result<Array1<f64>> {
    if hidden.nrows() == 0 {
        return Err(Error::invalid("description has no words"));
    }
    let e = hidden.fold_axis(Axis(0), f64::NEG_INFINITY, |m, &x| m.max(x));
    Ok(ndarray::concatenate(Axis(0), &[e.view(), g.view()]).expect("1-d concat"))
}

/// A critic seen only through its scores and input gradients.
pub trait Critic {
    fn scores(&self, f: &Array2<f64>, c: &Array2<f64>) -> Array1<f64>;
    /// `∂D/∂f` per row.
    fn input_gradients(&self, f: &Array2<f64>, c: &Array2<f64>) -> Array2<f64>;
}

/// `α·real + (1−α)·fake`, one `α` per row.
pub fn interpolate(real: &Array2<f64>, fake: &Array2<f64>, alpha: &[f64]) -> Result<Array2<f64>> {
    if real.dim() != fake.dim() || alpha.len() != real.nrows() {
        return Err(Error::invalid("interpolation inputs have mismatched shapes"));
    }
    let a = Array1::from(alpha.to_vec()).insert_axis(Axis(1));
    Ok(&a * real + &(1.0 - &a) * fake)
}

/// `λ·mean((‖∇_f̂ D(f̂, c)‖₂ − 1)²)` at the interpolates.
pub fn gradient_penalty(
    critic: &impl Critic,
    real: &Array2<f64>,
    fake: &Array2<f64>,
    c: &Array2<f64>,
    alpha: &[f64],
    lambda: f64,
) -> Result<f64> {
    if c.nrows() != real.nrows() {
        return Err(Error::invalid("conditions and features have different row counts"));
    }
    if real.nrows() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let hat = interpolate(real, fake, alpha)?;
    let grads = critic.input_gradients(&hat, c);
    let total: f64 = grads
        .rows()
        .into_iter()
        .map(|g| (g.dot(&g).sqrt() - 1.0).powi(2))
        .sum();
    Ok(lambda * total / real.nrows() as f64)
}

/// Critic loss `E[D(f̃,c)] − E[D(f,c)] + penalty` and generator loss `−E[D(f̃,c)]`.
pub fn wgan_losses(
    critic: &impl Critic,
    real: &Array2<f64>,
    fake: &Array2<f64>,
    c: &Array2<f64>,
    alpha: &[f64],
    lambda: f64,
) -> Result<(f64, f64)> {
    let ones = vec![1.0; real.nrows()];
    zero_shot_losses(critic, real, fake, c, &ones, alpha, lambda)
}

/// Wasserstein terms weighted per row by `π(c, c_sib)`; the penalty is unweighted.
pub fn zero_shot_losses(
    critic: &impl Critic,
    sibling_real: &Array2<f64>,
    fake: &Array2<f64>,
    c: &Array2<f64>,
    weights: &[f64],
    alpha: &[f64],
    lambda: f64,
) -> Result<(f64, f64)> {
    let n = sibling_real.nrows();
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if weights.len() != n {
        return Err(Error::invalid("one weight per row required"));
    }
    let penalty = gradient_penalty(critic, sibling_real, fake, c, alpha, lambda)?;
    let w = Array1::from(weights.to_vec());
    let d_real = (&critic.scores(sibling_real, c) * &w).sum() / n as f64;
    let d_fake = (&critic.scores(fake, c) * &w).sum() / n as f64;
    Ok((d_fake - d_real + penalty, -d_fake))
}

/// `−Σ_k max(0, π_k)·log softmax_𝒦(W_𝒦·Q·f)_k` for one feature.
///
/// Scores are clipped at zero so the loss stays a weighted cross-entropy.
pub fn keyword_loss(
    feature: &Array1<f64>,
    keywords: &[(usize, f64)],
    q: &Array2<f64>,
    vocab: &Array2<f64>,
) -> Result<f64> {
    if vocab.nrows() == 0 {
        return Err(Error::invalid("keyword vocabulary is empty"));
    }
    if let Some((p, _)) = keywords.iter().find(|(p, _)| *p >= vocab.nrows()) {
        return Err(Error::invalid(format!("keyword position {p} outside the vocabulary")));
    }
    let mut tape = Tape::new();
    let f = tape.constant(feature.clone().insert_axis(Axis(0)));
    let q = tape.constant(q.clone());
    let w = tape.constant(vocab.clone());
    let loss = keyword_on_tape(&mut tape, f, q, w, &[Some(keywords.to_vec())]);
    Ok(loss.map(|l| tape.scalar(l)).unwrap_or(0.0))
}

/// `−log σ(gᵀ f)`.
pub fn cls_loss(feature: &Array1<f64>, g: &Array1<f64>) -> f64 {
    crate::tape::softplus(-feature.dot(g))
}

/// `‖c − R f‖²` with `R` of shape `dim(c) × d_f`.
pub fn cyc_loss(feature: &Array1<f64>, c: &Array1<f64>, r: &Array2<f64>) -> f64 {
    let res = c - &r.dot(feature);
    res.dot(&res)
}

/// Generator, critic, label encoder and optional heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanModel {
    pub config: GanConfig,
    pub flags: LossFlags,
    pub conditioning: Conditioning,
    pub keyword_vocab: Option<KeywordVocab>,
    pub params: ParamSet,
}

/// Real features of seen codes with their conditioning rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SeenBatch {
    pub codes: Vec<usize>,
    pub real: Array2<f64>,
    /// Keyword positions and scores per row, when available.
    pub keywords: Vec<Option<Vec<(usize, f64)>>>,
}

/// Zero-shot codes paired with real features of their nearest siblings.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ZeroShotBatch {
    pub codes: Vec<usize>,
    pub siblings: Vec<usize>,
    pub sibling_real: Array2<f64>,
    pub keywords: Vec<Option<Vec<(usize, f64)>>>,
}

/// Random inputs of one step: Gaussian noise and interpolation weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Draws {
    pub noise: Array2<f64>,
    pub alpha: Vec<f64>,
}

impl Draws {
    pub fn sample<R: Rng>(rows: usize, noise_dim: usize, rng: &mut R) -> Self {
        let noise = Array2::from_shape_fn((rows, noise_dim), |_| StandardNormal.sample(rng));
        let alpha = (0..rows).map(|_| rng.random::<f64>()).collect();
        Self { noise, alpha }
    }
}

fn is_critic(name: &str) -> bool {
    name.starts_with("critic.")
}

impl GanModel {
    pub fn new(
        config: GanConfig,
        flags: LossFlags,
        conditioning: Conditioning,
        keyword_vocab: Option<KeywordVocab>,
        seed: u64,
    ) -> Result<Self> {
        if conditioning.is_empty() {
            return Err(Error::invalid("no codes to condition on"));
        }
        if flags.keywords && keyword_vocab.is_none() {
            return Err(Error::Config("keyword loss requires a keyword vocabulary".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = conditioning.word_dim();
        let df = conditioning.feature_dim();
        let h = config.encoder_hidden;
        let cdim = h + df;
        let mut params = ParamSet::new();
        params.init_weight("enc.wi", 4 * h, d, &mut rng);
        params.init_weight("enc.wh", 4 * h, h, &mut rng);
        params.init_zeros("enc.b", 1, 4 * h);
        params.init_weight("gen.w1", config.hidden, config.noise_dim + cdim, &mut rng);
        params.init_zeros("gen.b1", 1, config.hidden);
        params.init_weight("gen.w2", df, config.hidden, &mut rng);
        params.init_zeros("gen.b2", 1, df);
        params.init_weight("critic.w1f", config.hidden, df, &mut rng);
        params.init_weight("critic.w1c", config.hidden, cdim, &mut rng);
        params.init_zeros("critic.b1", 1, config.hidden);
        params.init_weight("critic.w2", 1, config.hidden, &mut rng);
        params.init_zeros("critic.b2", 1, 1);
        if flags.keywords {
            params.init_weight("key.q", d, df, &mut rng);
        }
        if flags.cyc {
            params.init_weight("cyc.r", cdim, df, &mut rng);
        }
        Ok(Self {
            config,
            flags,
            conditioning,
            keyword_vocab,
            params,
        })
    }

    /// The keyword predictor learned alongside the generator, if any.
    pub fn keyword_head(&self) -> Option<KeywordHead> {
        Some(KeywordHead {
            q: self.params.get("key.q")?.clone(),
            vocab: self.keyword_vocab.clone()?,
        })
    }

    pub fn condition_dim(&self) -> usize {
        self.config.encoder_hidden + self.conditioning.feature_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.conditioning.feature_dim()
    }

    /// Label codes `c_l` for every code, `L × (h + d_f)`.
    pub fn encode_labels(&self) -> Array2<f64> {
        self.encode_with(&self.params)
    }

    fn encode_with(&self, params: &ParamSet) -> Array2<f64> {
        let mut tape = Tape::new();
        let b = params.bind_frozen(&mut tape);
        let c = encode_on_tape(&mut tape, &b, &self.conditioning, self.config.encoder_hidden);
        tape.value(c).clone()
    }

    /// LSTM hidden states over one code's description, `M × h`.
    pub fn description_states(&self, code: usize) -> Array2<f64> {
        let mut tape = Tape::new();
        let b = self.params.bind_frozen(&mut tape);
        let states = lstm_states(
            &mut tape,
            &b,
            &self.conditioning.descriptions[code],
            self.config.encoder_hidden,
        );
        let states = tape.concat_rows(&states);
        tape.value(states).clone()
    }

    /// Generated features for `noise.nrows()` draws conditioned on `code`.
    pub fn generate(&self, code: usize, noise: &Array2<f64>) -> Result<Array2<f64>> {
        let conds = self.encode_labels();
        self.generate_from(&conds, &vec![code; noise.nrows()], noise)
    }

    /// Generated features for explicit condition rows.
    pub fn generate_from(
        &self,
        conds: &Array2<f64>,
        codes: &[usize],
        noise: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        if codes.len() != noise.nrows() || noise.ncols() != self.config.noise_dim {
            return Err(Error::invalid("noise shape does not match the request"));
        }
        if let Some(&c) = codes.iter().find(|&&c| c >= conds.nrows()) {
            return Err(Error::UnknownCode(format!("code index {c}")));
        }
        let mut tape = Tape::new();
        let b = self.params.bind_frozen(&mut tape);
        let z = tape.constant(noise.clone());
        let c = tape.constant(conds.select(Axis(0), codes));
        let out = generate_on_tape(&mut tape, &b, z, c);
        Ok(tape.value(out).clone())
    }

    /// The critic under the current parameters.
    pub fn critic(&self) -> MlpCritic<'_> {
        MlpCritic {
            params: &self.params,
            slope: self.config.critic_slope,
        }
    }

    /// Critic objective and its gradients with respect to `critic.*` only.
    ///
    /// Conditions and generated features are detached.
    pub fn critic_loss(
        &self,
        params: &ParamSet,
        seen: &SeenBatch,
        seen_draws: &Draws,
        zero: Option<(&ZeroShotBatch, &Draws)>,
    ) -> Result<(f64, GradMap)> {
        let conds = self.encode_with(params);
        let mut tape = Tape::new();
        let b = params.bind_with(&mut tape, is_critic);
        let mut total = self.critic_terms(&mut tape, &b, &conds, &seen.codes, &seen.real, seen_draws, None)?;
        if let Some((zb, draws)) = zero {
            let weights = sibling_weights(&conds, &zb.codes, &zb.siblings);
            let z = self.critic_terms(
                &mut tape,
                &b,
                &conds,
                &zb.codes,
                &zb.sibling_real,
                draws,
                Some(&weights),
            )?;
            total = tape.add(total, z);
        }
        Ok(finish(&tape, &b, params, total, is_critic))
    }

    #[allow(clippy::too_many_arguments)]
    fn critic_terms(
        &self,
        tape: &mut Tape,
        b: &Bound,
        conds: &Array2<f64>,
        codes: &[usize],
        real: &Array2<f64>,
        draws: &Draws,
        weights: Option<&Array1<f64>>,
    ) -> Result<Var> {
        if codes.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        if real.nrows() != codes.len() || draws.noise.nrows() != codes.len() {
            return Err(Error::invalid("batch rows do not match"));
        }
        let c_rows = conds.select(Axis(0), codes);
        let fake = self.generate_from(conds, codes, &draws.noise)?;
        let hat = interpolate(real, &fake, &draws.alpha)?;
        let c = tape.constant(c_rows);
        let real_v = tape.constant(real.clone());
        let fake_v = tape.constant(fake);
        let d_real = critic_on_tape(tape, b, real_v, c, self.config.critic_slope);
        let d_fake = critic_on_tape(tape, b, fake_v, c, self.config.critic_slope);
        let (d_real, d_fake) = match weights {
            Some(w) => {
                let w = tape.constant(w.clone().insert_axis(Axis(1)));
                (tape.mul(d_real, w), tape.mul(d_fake, w))
            }
            None => (d_real, d_fake),
        };
        let m_real = tape.mean(d_real);
        let m_fake = tape.mean(d_fake);
        let wass = tape.sub(m_fake, m_real);
        let hat = tape.constant(hat);
        let gp = penalty_on_tape(tape, b, hat, c, self.config.critic_slope, self.config.lambda);
        Ok(tape.add(wass, gp))
    }

    /// Generator objective and its gradients with respect to every
    /// non-critic parameter; the label encoder learns only through `G`.
    pub fn generator_loss(
        &self,
        params: &ParamSet,
        seen: &SeenBatch,
        seen_noise: &Array2<f64>,
        zero: Option<(&ZeroShotBatch, &Array2<f64>)>,
    ) -> Result<(f64, GradMap)> {
        if seen.codes.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let trainable = |n: &str| !is_critic(n);
        let mut tape = Tape::new();
        let b = params.bind_with(&mut tape, trainable);
        let conds = encode_on_tape(&mut tape, &b, &self.conditioning, self.config.encoder_hidden);
        let detached = tape.value(conds).clone();
        let slope = self.config.critic_slope;

        let (fake, c_det) = self.fake_on_tape(&mut tape, &b, conds, &detached, &seen.codes, seen_noise)?;
        let score = critic_on_tape(&mut tape, &b, fake, c_det, slope);
        let m = tape.mean(score);
        let mut total = tape.scale(m, -1.0);

        let mut zero_fake = None;
        if let Some((zb, noise)) = zero {
            if zb.codes.is_empty() {
                return Err(Error::invalid("empty zero-shot batch"));
            }
            let weights = sibling_weights(&detached, &zb.codes, &zb.siblings);
            let (zf, zc) = self.fake_on_tape(&mut tape, &b, conds, &detached, &zb.codes, noise)?;
            let score = critic_on_tape(&mut tape, &b, zf, zc, slope);
            let w = tape.constant(weights.insert_axis(Axis(1)));
            let weighted = tape.mul(score, w);
            let m = tape.mean(weighted);
            total = tape.sub(total, m);
            zero_fake = Some((zf, zb));
        }

        if self.flags.keywords && self.config.beta != 0.0 {
            let vocab = self
                .keyword_vocab
                .as_ref()
                .ok_or_else(|| Error::Config("keyword loss requires a keyword vocabulary".into()))?;
            let mut rows = vec![fake];
            let mut sets = seen.keywords.clone();
            if let Some((zf, zb)) = zero_fake {
                rows.push(zf);
                sets.extend(zb.keywords.iter().cloned());
            }
            let all = tape.concat_rows(&rows);
            let w = tape.constant(vocab.vectors.clone());
            if let Some(k) = keyword_on_tape(&mut tape, all, b["key.q"], w, &sets) {
                let k = tape.scale(k, self.config.beta);
                total = tape.add(total, k);
            }
        }
        if self.flags.cls {
            let g = tape.constant(self.conditioning.classifiers.select(Axis(0), &seen.codes));
            let prod = tape.mul(fake, g);
            let logits = tape.sum_cols(prod);
            let neg = tape.scale(logits, -1.0);
            let sp = tape.softplus(neg);
            let m = tape.mean(sp);
            let m = tape.scale(m, self.config.cls_weight);
            total = tape.add(total, m);
        }
        if self.flags.cyc {
            let rec = tape.matmul_t(fake, b["cyc.r"]);
            let diff = tape.sub(c_det, rec);
            let sq = tape.square(diff);
            let per = tape.sum_cols(sq);
            let m = tape.mean(per);
            let m = tape.scale(m, self.config.cyc_weight);
            total = tape.add(total, m);
        }
        Ok(finish(&tape, &b, params, total, trainable))
    }

    fn fake_on_tape(
        &self,
        tape: &mut Tape,
        b: &Bound,
        conds: Var,
        detached: &Array2<f64>,
        codes: &[usize],
        noise: &Array2<f64>,
    ) -> Result<(Var, Var)> {
        if noise.nrows() != codes.len() || noise.ncols() != self.config.noise_dim {
            return Err(Error::invalid("noise shape does not match the batch"));
        }
        let c = tape.gather(conds, codes);
        let z = tape.constant(noise.clone());
        let fake = generate_on_tape(tape, b, z, c);
        let c_det = tape.constant(detached.select(Axis(0), codes));
        Ok((fake, c_det))
    }
}

fn finish(
    tape: &Tape,
    b: &Bound,
    params: &ParamSet,
    total: Var,
    trainable: impl Fn(&str) -> bool,
) -> (f64, GradMap) {
    let value = tape.scalar(total);
    let grads = tape.backward(total);
    let mut map = params.collect_grads(b, &grads);
    map.retain(|k, _| trainable(k));
    (value, map)
}

/// `max(0, cos(c_u, c_sib))` per zero-shot row.
fn sibling_weights(conds: &Array2<f64>, codes: &[usize], siblings: &[usize]) -> Array1<f64> {
    codes
        .iter()
        .zip(siblings)
        .map(|(&u, &s)| {
            let a = conds.row(u).to_vec();
            let b = conds.row(s).to_vec();
            cosine(&a, &b).max(0.0)
        })
        .collect()
}

/// The two-layer critic as a [`Critic`].
pub struct MlpCritic<'a> {
    pub params: &'a ParamSet,
    pub slope: f64,
}

impl MlpCritic<'_> {
    fn p(&self, name: &str) -> &Array2<f64> {
        self.params.get(name).unwrap_or_else(|| panic!("missing `{name}`"))
    }

    fn pre(&self, f: &Array2<f64>, c: &Array2<f64>) -> Array2<f64> {
        f.dot(&self.p("critic.w1f").t()) + c.dot(&self.p("critic.w1c").t()) + self.p("critic.b1")
    }
}

impl Critic for MlpCritic<'_> {
    fn scores(&self, f: &Array2<f64>, c: &Array2<f64>) -> Array1<f64> {
        let s = self.slope;
        let h = self.pre(f, c).mapv(|x| if x > 0.0 { x } else { s * x });
        let out = h.dot(&self.p("critic.w2").t()) + self.p("critic.b2");
        out.column(0).to_owned()
    }

    fn input_gradients(&self, f: &Array2<f64>, c: &Array2<f64>) -> Array2<f64> {
        let s = self.slope;
        let mask = self.pre(f, c).mapv(|x| if x > 0.0 { 1.0 } else { s });
        let scaled = &mask * &self.p("critic.w2").row(0);
        scaled.dot(self.p("critic.w1f"))
    }
}

fn lstm_states(tape: &mut Tape, b: &Bound, words: &Array2<f64>, h: usize) -> Vec<Var> {
    let x = tape.constant(words.clone());
    let xw = tape.matmul_t(x, b["enc.wi"]);
    let xw = tape.add_row(xw, b["enc.b"]);
    let mut hidden = tape.constant(Array2::zeros((1, h)));
    let mut cell = tape.constant(Array2::zeros((1, h)));
    let mut states = Vec::with_capacity(words.nrows());
    for t in 0..words.nrows() {
        let xt = tape.gather(xw, &[t]);
        let hw = tape.matmul_t(hidden, b["enc.wh"]);
        let gates = tape.add(xt, hw);
        let i = tape.slice_cols(gates, 0, h);
        let i = tape.sigmoid(i);
        let f = tape.slice_cols(gates, h, 2 * h);
        let f = tape.sigmoid(f);
        let g = tape.slice_cols(gates, 2 * h, 3 * h);
        let g = tape.tanh(g);
        let o = tape.slice_cols(gates, 3 * h, 4 * h);
        let o = tape.sigmoid(o);
        let keep = tape.mul(f, cell);
        let write = tape.mul(i, g);
        cell = tape.add(keep, write);
        let squashed = tape.tanh(cell);
        hidden = tape.mul(o, squashed);
        states.push(hidden);
    }
    states
}

fn encode_on_tape(tape: &mut Tape, b: &Bound, cond: &Conditioning, h: usize) -> Var {
    let rows: Vec<Var> = cond
        .descriptions
        .iter()
        .map(|words| {
            let states = lstm_states(tape, b, words, h);
            let states = tape.concat_rows(&states);
            tape.max_rows(states)
        })
        .collect();
    let e = tape.concat_rows(&rows);
    let g = tape.constant(cond.classifiers.clone());
    tape.concat_cols(&[e, g])
}

fn generate_on_tape(tape: &mut Tape, b: &Bound, z: Var, c: Var) -> Var {
    let x = tape.concat_cols(&[z, c]);
    let h = tape.matmul_t(x, b["gen.w1"]);
    let h = tape.add_row(h, b["gen.b1"]);
    let h = tape.relu(h);
    let out = tape.matmul_t(h, b["gen.w2"]);
    let out = tape.add_row(out, b["gen.b2"]);
    tape.relu(out)
}

fn critic_pre_on_tape(tape: &mut Tape, b: &Bound, f: Var, c: Var) -> Var {
    let a = tape.matmul_t(f, b["critic.w1f"]);
    let k = tape.matmul_t(c, b["critic.w1c"]);
    let s = tape.add(a, k);
    tape.add_row(s, b["critic.b1"])
}

/// Critic scores, one row per example.
fn critic_on_tape(tape: &mut Tape, b: &Bound, f: Var, c: Var, slope: f64) -> Var {
    let pre = critic_pre_on_tape(tape, b, f, c);
    let h = tape.leaky_relu(pre, slope);
    let out = tape.matmul_t(h, b["critic.w2"]);
    tape.add_row(out, b["critic.b2"])
}

/// Penalty with the input gradient written out in closed form,
/// `∇_f D = (leaky'(pre) ⊙ w2)·W1f`, so critic gradients need no second
/// reverse pass. `leaky'` is piecewise constant and enters as a constant.
fn penalty_on_tape(tape: &mut Tape, b: &Bound, hat: Var, c: Var, slope: f64, lambda: f64) -> Var {
    let pre = critic_pre_on_tape(tape, b, hat, c);
    let mask = tape.value(pre).mapv(|x| if x > 0.0 { 1.0 } else { slope });
    let rows = mask.nrows();
    let mask = tape.constant(mask);
    let w2 = tape.broadcast_rows(b["critic.w2"], rows);
    let m = tape.mul(mask, w2);
    let grad = tape.matmul(m, b["critic.w1f"]);
    let sq = tape.square(grad);
    let s = tape.sum_cols(sq);
    let s = tape.add_scalar(s, NORM_EPS);
    let norm = tape.sqrt(s);
    let dev = tape.add_scalar(norm, -1.0);
    let dev = tape.square(dev);
    let m = tape.mean(dev);
    tape.scale(m, lambda)
}

/// Mean over rows that carry keywords of the weighted cross-entropy; `None`
/// when no row does.
fn keyword_on_tape(
    tape: &mut Tape,
    features: Var,
    q: Var,
    vocab: Var,
    sets: &[Option<Vec<(usize, f64)>>],
) -> Option<Var> {
    let rows: Vec<usize> = (0..sets.len()).filter(|&i| sets[i].is_some()).collect();
    if rows.is_empty() {
        return None;
    }
    let k = tape.shape(vocab).0;
    let mut weights = Array2::zeros((rows.len(), k));
    for (r, &i) in rows.iter().enumerate() {
        for &(p, s) in sets[i].as_ref().expect("filtered") {
            weights[[r, p]] += s.max(0.0);
        }
    }
    let f = tape.gather(features, &rows);
    let proj = tape.matmul_t(f, q);
    let logits = tape.matmul_t(proj, vocab);
    let logp = tape.log_softmax_rows(logits);
    let w = tape.constant(weights);
    let weighted = tape.mul(logp, w);
    let s = tape.sum(weighted);
    Some(tape.scale(s, -1.0 / rows.len() as f64))
}

/// Keyword sets for every `(doc, code)` positive of a seen code, scored
/// against `v_l`. For each zero-shot code with a sibling, the sibling's
/// documents are also scored against the zero-shot code's `v_u` and stored
/// under the zero-shot code.
pub fn build_keyword_index(
    docs: &[Document],
    hierarchy: &LabelHierarchy,
    conditioning: &Conditioning,
    table: &EmbeddingTable,
    k: usize,
) -> Result<KeywordIndex> {
    let mut borrowers: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for code in hierarchy.zero_shot() {
        if let Ok(sib) = hierarchy.nearest_sibling(code, &conditioning.label_vectors) {
            let sib = hierarchy.node(&sib)?.code.as_str();
            borrowers.entry(sib).or_default().push(code);
        }
    }
    let vector = |code: &str| -> Result<Vec<f64>> {
        let l = conditioning
            .index_of(code)
            .ok_or_else(|| Error::UnknownCode(code.to_string()))?;
        Ok(conditioning.label_vectors.row(l).to_vec())
    };
    let sets: Vec<Vec<(String, String, KeywordSet)>> = docs
        .par_iter()
        .map(|doc| {
            let mut out = Vec::new();
            for code in &doc.labels {
                if !hierarchy.is_seen(code) {
                    continue;
                }
                let set = extract_keywords(&doc.tokens, k, table, &vector(code)?)?;
                out.push((doc.doc_id.clone(), code.clone(), set));
                for &u in borrowers.get(code.as_str()).into_iter().flatten() {
                    let set = extract_keywords(&doc.tokens, k, table, &vector(u)?)?;
                    out.push((doc.doc_id.clone(), u.to_string(), set));
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut index = KeywordIndex::default();
    for (doc, code, set) in sets.into_iter().flatten() {
        index.insert(&doc, &code, set);
    }
    Ok(index)
}

/// One real training feature and its keywords.
#[derive(Clone, Debug, PartialEq)]
pub struct RealSample {
    pub doc_id: String,
    pub features: Array1<f64>,
    pub keywords: Option<Vec<(usize, f64)>>,
}

/// Training material prepared from a feature dump.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GanData {
    /// `(code index, sample)` for every positive seen-code row.
    pub seen: Vec<(usize, RealSample)>,
    /// Zero-shot code index → (sibling index, sibling samples keyed to the zero-shot code).
    pub zero_shot: BTreeMap<usize, (usize, Vec<RealSample>)>,
    /// Zero-shot codes dropped because no usable sibling exists.
    pub skipped: Vec<String>,
}

impl GanData {
    /// Collects positive rows of seen codes and, per zero-shot code, the
    /// positive rows of its nearest sibling. Keywords for sibling rows are
    /// looked up under the zero-shot code.
    pub fn prepare(
        dump: &FeatureDump,
        hierarchy: &LabelHierarchy,
        conditioning: &Conditioning,
        keywords: Option<(&KeywordIndex, &KeywordVocab)>,
    ) -> Result<Self> {
        if dump.dim != conditioning.feature_dim() {
            return Err(Error::Config(format!(
                "feature dump has dimension {}, model expects {}",
                dump.dim,
                conditioning.feature_dim()
            )));
        }
        let lookup = |doc: &str, code: &str| -> Result<Option<Vec<(usize, f64)>>> {
            match keywords {
                Some((idx, vocab)) => idx
                    .get(doc, code)
                    .map(|s| vocab.positions(&s.entries))
                    .transpose(),
                None => Ok(None),
            }
        };
        let mut data = GanData::default();
        let mut by_code: BTreeMap<usize, Vec<RealSample>> = BTreeMap::new();
        for row in dump.positives() {
            let Some(l) = conditioning.index_of(&row.code) else {
                return Err(Error::UnknownCode(row.code.clone()));
            };
            if !hierarchy.is_seen(&row.code) {
                continue;
            }
            let sample = RealSample {
                doc_id: row.doc_id.clone(),
                features: Array1::from(row.features.clone()),
                keywords: lookup(&row.doc_id, &row.code)?,
            };
            by_code.entry(l).or_default().push(sample.clone());
            data.seen.push((l, sample));
        }
        if data.seen.is_empty() {
            return Err(Error::invalid("feature dump has no positive rows of seen codes"));
        }
        for code in hierarchy.zero_shot() {
            let u = conditioning
                .index_of(code)
                .ok_or_else(|| Error::UnknownCode(code.to_string()))?;
            let sib = match hierarchy.nearest_sibling(code, &conditioning.label_vectors) {
                Ok(s) => s,
                Err(Error::NoSibling(_)) => {
                    data.skipped.push(code.to_string());
                    continue;
                }
                Err(e) => return Err(e),
            };
            let s = conditioning
                .index_of(&sib)
                .ok_or_else(|| Error::UnknownCode(sib.clone()))?;
            let Some(rows) = by_code.get(&s) else {
                data.skipped.push(code.to_string());
                continue;
            };
            let samples = rows
                .iter()
                .map(|r| {
                    Ok(RealSample {
                        doc_id: r.doc_id.clone(),
                        features: r.features.clone(),
                        keywords: lookup(&r.doc_id, code)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            data.zero_shot.insert(u, (s, samples));
        }
        if !data.skipped.is_empty() {
            log::warn!("{} zero-shot codes have no usable sibling", data.skipped.len());
        }
        Ok(data)
    }

    fn seen_batch(&self, idx: &[usize], dim: usize) -> SeenBatch {
        let mut real = Array2::zeros((idx.len(), dim));
        let mut codes = Vec::with_capacity(idx.len());
        let mut keywords = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            let (code, s) = &self.seen[i];
            real.row_mut(r).assign(&s.features);
            codes.push(*code);
            keywords.push(s.keywords.clone());
        }
        SeenBatch {
            codes,
            real,
            keywords,
        }
    }

    fn zero_shot_batch<R: Rng>(&self, n: usize, dim: usize, rng: &mut R) -> ZeroShotBatch {
        let targets: Vec<(&usize, &(usize, Vec<RealSample>))> = self.zero_shot.iter().collect();
        let mut batch = ZeroShotBatch {
            sibling_real: Array2::zeros((n, dim)),
            ..Default::default()
        };
        for r in 0..n {
            let (&u, (s, rows)) = targets[rng.random_range(0..targets.len())];
            let sample = &rows[rng.random_range(0..rows.len())];
            batch.sibling_real.row_mut(r).assign(&sample.features);
            batch.codes.push(u);
            batch.siblings.push(*s);
            batch.keywords.push(sample.keywords.clone());
        }
        batch
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepKind {
    Critic,
    Generator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub kind: StepKind,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GanLog {
    pub steps: Vec<StepRecord>,
    /// Zero-shot code → nearest sibling used for the sibling loss.
    pub siblings: BTreeMap<String, String>,
    pub skipped: Vec<String>,
}

impl GanLog {
    pub fn count(&self, kind: StepKind) -> usize {
        self.steps.iter().filter(|s| s.kind == kind).count()
    }

    pub fn last(&self, kind: StepKind) -> Option<f64> {
        self.steps.iter().rev().find(|s| s.kind == kind).map(|s| s.loss)
    }
}

/// Reshuffled pass over `0..n` handing out fixed-size batches.
struct Stream {
    order: Vec<usize>,
    pos: usize,
}

impl Stream {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next<R: Rng>(&mut self, size: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            let take = (size - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

/// Trains the GAN with `critic_steps` critic updates per generator update.
pub fn train_gan(
    data: &GanData,
    conditioning: Conditioning,
    keyword_vocab: Option<KeywordVocab>,
    config: &GanConfig,
    flags: LossFlags,
    seed: u64,
) -> Result<(GanModel, GanLog)> {
    let mut model = GanModel::new(config.clone(), flags, conditioning, keyword_vocab, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a4e_0002);
    let dim = model.feature_dim();
    let batch = config.batch_size.max(1).min(data.seen.len());
    let mut log = GanLog {
        skipped: data.skipped.clone(),
        ..Default::default()
    };
    let use_zero = flags.zero_shot && !data.zero_shot.is_empty();
    if flags.zero_shot && data.zero_shot.is_empty() {
        log::warn!("sibling loss requested but no zero-shot code has a usable sibling");
    }
    for (&u, (s, _)) in &data.zero_shot {
        log.siblings.insert(
            model.conditioning.codes[u].clone(),
            model.conditioning.codes[*s].clone(),
        );
    }
    let seen_codes: BTreeSet<usize> = data.seen.iter().map(|(c, _)| *c).collect();
    let zero_batch = config.zero_shot_batch.unwrap_or_else(|| {
        let ratio = data.zero_shot.len() as f64 / seen_codes.len() as f64;
        ((batch as f64 * ratio).round() as usize).max(1)
    });
    let mut critic_opt = Adam::with_betas(config.learning_rate, config.adam_beta1, config.adam_beta2);
    let mut gen_opt = Adam::with_betas(config.learning_rate, config.adam_beta1, config.adam_beta2);
    let mut stream = Stream::new(data.seen.len());
    let per_epoch = data.seen.len().div_ceil(batch * config.critic_steps.max(1)).max(1);
    let diverged = |what: &str, epoch: usize, loss: f64| {
        Error::Divergence(format!("{what} loss became {loss} in epoch {epoch}"))
    };

    for epoch in 0..config.epochs {
        for _ in 0..per_epoch {
            for _ in 0..config.critic_steps {
                let idx = stream.next(batch, &mut rng);
                let seen = data.seen_batch(&idx, dim);
                let draws = Draws::sample(batch, config.noise_dim, &mut rng);
                let zero = use_zero.then(|| {
                    let zb = data.zero_shot_batch(zero_batch, dim, &mut rng);
                    let zd = Draws::sample(zero_batch, config.noise_dim, &mut rng);
                    (zb, zd)
                });
                let (loss, grads) = model.critic_loss(
                    &model.params,
                    &seen,
                    &draws,
                    zero.as_ref().map(|(b, d)| (b, d)),
                )?;
                if !loss.is_finite() {
                    return Err(diverged("critic", epoch, loss));
                }
                critic_opt.step(&mut model.params, &grads);
                log.steps.push(StepRecord {
                    epoch,
                    kind: StepKind::Critic,
                    loss,
                });
            }
            let idx = stream.next(batch, &mut rng);
            let seen = data.seen_batch(&idx, dim);
            let noise = Draws::sample(batch, config.noise_dim, &mut rng).noise;
            let zero = use_zero.then(|| {
                let zb = data.zero_shot_batch(zero_batch, dim, &mut rng);
                let zn = Draws::sample(zero_batch, config.noise_dim, &mut rng).noise;
                (zb, zn)
            });
            let (loss, grads) = model.generator_loss(
                &model.params,
                &seen,
                &noise,
                zero.as_ref().map(|(b, n)| (b, n)),
            )?;
            if !loss.is_finite() {
                return Err(diverged("generator", epoch, loss));
            }
            gen_opt.step(&mut model.params, &grads);
            log.steps.push(StepRecord {
                epoch,
                kind: StepKind::Generator,
                loss,
            });
        }
        if let (Some(c), Some(g)) = (log.last(StepKind::Critic), log.last(StepKind::Generator)) {
            log::info!("gan epoch {epoch}: critic {c:.5} generator {g:.5}");
        }
    }
    if !model.params.all_finite() {
        return Err(Error::Divergence("GAN parameters are not finite".into()));
    }
    Ok((model, log))
}

/// A keyword predictor `softmax_𝒦(W_𝒦·Q·f)` on its own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeywordHead {
    pub q: Array2<f64>,
    pub vocab: KeywordVocab,
}

impl KeywordHead {
    pub fn logits(&self, feature: &Array1<f64>) -> Array1<f64> {
        self.vocab.vectors.dot(&self.q.dot(feature))
    }

    /// Vocabulary positions by descending logit; ties keep position order.
    pub fn ranking(&self, feature: &Array1<f64>) -> Vec<usize> {
        let logits = self.logits(feature);
        let mut order: Vec<usize> = (0..logits.len()).collect();
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        order
    }

    /// Mean over `targets` found in the vocabulary of `1 / rank` (ranks from 1).
    /// `None` when no target is in the vocabulary.
    pub fn reciprocal_rank(&self, feature: &Array1<f64>, targets: &[usize]) -> Option<f64> {
        let ranking = self.ranking(feature);
        let mut rank_of = vec![0usize; ranking.len()];
        for (r, &p) in ranking.iter().enumerate() {
            rank_of[p] = r + 1;
        }
        let found: Vec<f64> = targets
            .iter()
            .filter_map(|t| self.vocab.tokens.binary_search(t).ok())
            .map(|p| 1.0 / rank_of[p] as f64)
            .collect();
        (!found.is_empty()).then(|| found.iter().sum::<f64>() / found.len() as f64)
    }
}

/// Fits `Q` on real features and their keyword sets with Adam.
pub fn train_keyword_head(
    samples: &[(Array1<f64>, Vec<(usize, f64)>)],
    vocab: KeywordVocab,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<(KeywordHead, Vec<f64>)> {
    let Some((first, _)) = samples.first() else {
        return Err(Error::invalid("no keyword samples"));
    };
    let df = first.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    params.init_weight("key.q", vocab.vectors.ncols(), df, &mut rng);
    let mut opt = Adam::new(learning_rate);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut n = 0;
        for chunk in order.chunks(batch_size.max(1)) {
            let mut feats = Array2::zeros((chunk.len(), df));
            let mut sets = Vec::with_capacity(chunk.len());
            for (r, &i) in chunk.iter().enumerate() {
                feats.row_mut(r).assign(&samples[i].0);
                sets.push(Some(samples[i].1.clone()));
            }
            let mut tape = Tape::new();
            let b = params.bind(&mut tape);
            let f = tape.constant(feats);
            let w = tape.constant(vocab.vectors.clone());
            let loss = keyword_on_tape(&mut tape, f, b["key.q"], w, &sets).expect("nonempty");
            let (value, grads) = finish(&tape, &b, &params, loss, |_| true);
            opt.step(&mut params, &grads);
            sum += value;
            n += 1;
        }
        losses.push(sum / n as f64);
    }
    let q = params.get("key.q").expect("q").clone();
    Ok((KeywordHead { q, vocab }, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    struct Linear(Array1<f64>);

    impl Critic for Linear {
        fn scores(&self, f: &Array2<f64>, _c: &Array2<f64>) -> Array1<f64> {
            f.dot(&self.0)
        }
        fn input_gradients(&self, f: &Array2<f64>, _c: &Array2<f64>) -> Array2<f64> {
            let mut g = Array2::zeros(f.dim());
            for mut row in g.rows_mut() {
                row.assign(&self.0);
            }
            g
        }
    }

    #[test]
    fn max_pool_of_single_state_is_the_state() {
        let c = encode_label(&array![[0.3, -0.2, 0.5]], &array![1.0, 2.0]).unwrap();
        assert_eq!(c, array![0.3, -0.2, 0.5, 1.0, 2.0]);
    }

    #[test]
    fn max_pool_is_dimension_wise() {
        let c = encode_label(&array![[1.0, 0.0], [0.0, 1.0]], &array![]).unwrap();
        assert_eq!(c, array![1.0, 1.0]);
    }

    #[test]
    fn encoding_dimension_is_sum_of_parts() {
        let c = encode_label(&Array2::zeros((2, 3)), &Array1::zeros(2)).unwrap();
        assert_eq!(c.len(), 5);
        assert!(encode_label(&Array2::zeros((0, 3)), &Array1::zeros(2)).is_err());
    }

    #[test]
    fn unit_linear_critic_has_no_penalty() {
        let w = array![0.6, 0.8, 0.0];
        let real = array![[1.0, 2.0, 3.0], [0.5, -1.0, 2.0]];
        let fake = array![[0.0, 1.0, 0.0], [2.0, 2.0, 2.0]];
        let c = Array2::zeros((2, 1));
        let p = gradient_penalty(&Linear(w), &real, &fake, &c, &[0.3, 0.9], 10.0).unwrap();
        assert!(p.abs() < 1e-12);
    }

    #[test]
    fn constant_critic_penalty_is_lambda() {
        let z = Array2::zeros((3, 4));
        let c = Array2::zeros((3, 1));
        let p = gradient_penalty(&Linear(Array1::zeros(4)), &z, &z, &c, &[0.1, 0.5, 0.9], 7.0).unwrap();
        assert_eq!(p, 7.0);
    }

    #[test]
    fn sum_critic_penalty_is_nine_lambda() {
        let f = Array2::ones((2, 4));
        let c = Array2::zeros((2, 1));
        let p = gradient_penalty(&Linear(Array1::from_elem(4, 2.0)), &f, &f, &c, &[0.2, 0.4], 10.0).unwrap();
        assert!((p - 90.0).abs() < 1e-12);
    }

    #[test]
    fn zero_critic_losses() {
        let f = array![[1.0, 2.0]];
        let c = Array2::zeros((1, 1));
        let (cl, gl) = wgan_losses(&Linear(Array1::zeros(2)), &f, &f, &c, &[0.5], 10.0).unwrap();
        assert_eq!(cl, 10.0);
        assert_eq!(gl, 0.0);
        assert!(wgan_losses(&Linear(Array1::zeros(2)), &Array2::zeros((0, 2)), &Array2::zeros((0, 2)), &Array2::zeros((0, 1)), &[], 1.0).is_err());
    }

    #[test]
    fn zero_weight_leaves_only_penalty() {
        let w = array![2.0, 0.0];
        let real = array![[1.0, 1.0], [3.0, 0.0]];
        let fake = array![[0.0, 0.0], [1.0, 5.0]];
        let c = Array2::zeros((2, 1));
        let (cl, gl) = zero_shot_losses(&Linear(w.clone()), &real, &fake, &c, &[0.0, 0.0], &[0.5, 0.5], 3.0).unwrap();
        let p = gradient_penalty(&Linear(w), &real, &fake, &c, &[0.5, 0.5], 3.0).unwrap();
        assert_eq!(cl, p);
        assert_eq!(gl, 0.0);
    }

    #[test]
    fn unit_weight_matches_plain_losses() {
        let w = array![0.5, -1.0];
        let real = array![[1.0, 1.0], [3.0, 0.0]];
        let fake = array![[0.0, 2.0], [1.0, 5.0]];
        let c = Array2::zeros((2, 1));
        let a = zero_shot_losses(&Linear(w.clone()), &real, &fake, &c, &[1.0, 1.0], &[0.2, 0.7], 10.0).unwrap();
        let b = wgan_losses(&Linear(w), &real, &fake, &c, &[0.2, 0.7], 10.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_word_vocabulary_has_zero_keyword_loss() {
        let l = keyword_loss(&array![1.0, -2.0], &[(0, 0.9)], &array![[0.3, 0.1]], &array![[2.0]]).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn two_equal_logits_give_two_ln_two() {
        let l = keyword_loss(&array![0.0, 0.0], &[(0, 1.0), (1, 1.0)], &Array2::eye(2), &Array2::eye(2)).unwrap();
        assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!(keyword_loss(&array![0.0, 0.0], &[(2, 1.0)], &Array2::eye(2), &Array2::eye(2)).is_err());
    }

    #[test]
    fn cls_and_cyc_examples() {
        assert!((cls_loss(&array![0.0], &array![1.0]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((cls_loss(&array![1.0], &array![-1.0]) - 1.313_261_687_518_222_7).abs() < 1e-12);
        assert!(cls_loss(&array![1.0], &array![1e3]) < 1e-300);
        let r = Array2::eye(2);
        assert_eq!(cyc_loss(&array![1.0, 2.0], &array![1.0, 2.0], &r), 0.0);
        assert_eq!(cyc_loss(&array![0.0, 0.0], &array![1.0, 1.0], &r), 2.0);
        assert_eq!(cyc_loss(&array![0.0, 0.0], &array![3.0, 4.0], &r), 25.0);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("wgan+foo".parse::<Method>().is_err());
        assert_eq!(Method::Wgan.flags(), LossFlags::default());
        let f = Method::WganZKey.flags();
        assert!(f.zero_shot && f.keywords && !f.cls && !f.cyc);
    }

    #[test]
    fn stream_covers_every_index_per_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = Stream::new(7);
        let mut seen: Vec<usize> = Vec::new();
        for _ in 0..7 {
            seen.extend(s.next(1, &mut rng));
        }
        seen.sort();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
        assert_eq!(s.next(10, &mut rng).len(), 10);
    }
}
