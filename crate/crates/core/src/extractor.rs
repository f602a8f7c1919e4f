//! Label-wise attentive feature extractor with graph-propagated classifiers.
//!
//! A document's word vectors pass through a same-padded 1-D convolution.
//! Each code attends over the convolved rows with its description embedding,
//! the attended vector is mapped to a nonnegative feature `f_l`, and the code
//! is predicted by `σ(g_lᵀ f_l)` where `g_l` is the code's label embedding
//! after `t` rounds of GRU message passing over the label tree. There is no
//! separate classifier tensor: `g_l` is the classifier.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, EmbeddingTable, PAD};
use crate::error::{Error, Result};
use crate::hierarchy::LabelHierarchy;
use crate::params::{Adam, Bound, ParamSet};
use crate::tape::{sigmoid, Tape, Var};

/// Probability clamp used by [`bce_loss`].
pub const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    /// Convolution output channels `d_c`.
    pub filters: usize,
    pub kernel_width: usize,
    /// Feature and graph-embedding size `d_f`.
    pub feature_dim: usize,
    /// Dropout rate on word embeddings during training.
    pub dropout: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// LDAM margin constant `C`; `None` trains with plain BCE.
    pub ldam_c: Option<f64>,
    /// Rounds of graph propagation `t`.
    pub propagation_steps: usize,
    /// Keep the word-embedding table at its initial values.
    pub freeze_embeddings: bool,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            filters: 100,
            kernel_width: 5,
            feature_dim: 400,
            dropout: 0.5,
            batch_size: 8,
            learning_rate: 1e-3,
            epochs: 40,
            ldam_c: None,
            propagation_steps: 2,
            freeze_embeddings: false,
        }
    }
}

/// Label-side constants derived from the hierarchy and vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelGraph {
    pub codes: Vec<String>,
    pub description_ids: Vec<Vec<usize>>,
    /// Row `l` averages the neighbors of `l`; isolated codes map to themselves.
    pub neighbor_mean: Array2<f64>,
    pub train_counts: Vec<usize>,
}

impl LabelGraph {
    pub fn build(hierarchy: &LabelHierarchy, table: &EmbeddingTable) -> Result<Self> {
        let codes = hierarchy.codes().to_vec();
        let n = codes.len();
        let mut description_ids = Vec::with_capacity(n);
        let mut neighbor_mean = Array2::zeros((n, n));
        let mut train_counts = Vec::with_capacity(n);
        for (i, code) in codes.iter().enumerate() {
            let node = hierarchy.node(code)?;
            description_ids.push(table.lookup_all(&node.description_words));
            train_counts.push(node.train_count);
            let nbrs = hierarchy.neighbors(code);
            if nbrs.is_empty() {
                neighbor_mean[[i, i]] = 1.0;
            } else {
                let w = 1.0 / nbrs.len() as f64;
                for nb in nbrs {
                    let j = hierarchy.index_of(nb).expect("neighbor indexed");
                    neighbor_mean[[i, j]] += w;
                }
            }
        }
        Ok(Self {
            codes,
            description_ids,
            neighbor_mean,
            train_counts,
        })
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

    /// Flattened description ids and the `L × total` matrix averaging them per code.
    fn description_mean(&self) -> (Vec<usize>, Array2<f64>) {
        let flat: Vec<usize> = self.description_ids.iter().flatten().copied().collect();
        let mut avg = Array2::zeros((self.len(), flat.len()));
        let mut col = 0;
        for (l, ids) in self.description_ids.iter().enumerate() {
            for _ in ids {
                avg[[l, col]] = 1.0 / ids.len() as f64;
                col += 1;
            }
        }
        (flat, avg)
    }
}

/// Per-document outputs for every code.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelwiseFeatures {
    /// Attention weights, `N × L`; each column sums to one.
    pub attention: Array2<f64>,
    /// Attended convolution rows `a_l`, `L × d_c`.
    pub attended: Array2<f64>,
    /// Rectified features `f_l`, `L × d_f`.
    pub features: Array2<f64>,
    pub logits: Array1<f64>,
    pub probabilities: Array1<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorModel {
    pub config: ExtractorConfig,
    pub graph: LabelGraph,
    pub word_dim: usize,
    pub params: ParamSet,
}

struct LabelBlock {
    label_vectors: Var,
    classifiers: Var,
}

struct DocOutputs {
    attention: Var,
    attended: Var,
    features: Var,
    logits: Var,
}

impl ExtractorModel {
    pub fn new(
        config: ExtractorConfig,
        graph: LabelGraph,
        table: &EmbeddingTable,
        seed: u64,
    ) -> Result<Self> {
        if config.kernel_width % 2 == 0 {
            return Err(Error::Config("kernel width must be odd".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = table.dim();
        let (dc, df) = (config.filters, config.feature_dim);
        let mut params = ParamSet::new();
        let mut emb = table.matrix().clone();
        emb.row_mut(PAD).fill(0.0);
        params.insert("emb", emb);
        params.init_weight("conv.w", config.kernel_width * d, dc, &mut rng);
        if let Some(w) = params.get_mut("conv.w") {
            // fan-in of the convolution is the window, not the channel count
            let k = (dc as f64 / (config.kernel_width * d) as f64).sqrt();
            w.mapv_inplace(|x| x * k);
        }
        params.init_zeros("conv.b", 1, dc);
        params.init_weight("attn.w", d, dc, &mut rng);
        params.init_zeros("attn.b", 1, d);
        params.init_weight("out.w", df, dc, &mut rng);
        params.init_zeros("out.b", 1, df);
        if d != df {
            params.init_weight("proj.w", df, d, &mut rng);
        }
        for gate in ["z", "r", "h"] {
            params.init_weight(&format!("gru.w{gate}"), df, df, &mut rng);
            params.init_weight(&format!("gru.u{gate}"), df, df, &mut rng);
            params.init_zeros(&format!("gru.b{gate}"), 1, df);
        }
        Ok(Self {
            config,
            graph,
            word_dim: d,
            params,
        })
    }

    pub fn num_codes(&self) -> usize {
        self.graph.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn embedding_matrix(&self) -> &Array2<f64> {
        self.params.get("emb").expect("emb param")
    }

    /// The shared word table as updated by training.
    pub fn embedding_table(&self, base: &EmbeddingTable) -> Result<EmbeddingTable> {
        base.with_matrix(self.embedding_matrix().clone())
    }

    fn label_block(&self, tape: &mut Tape, b: &Bound) -> LabelBlock {
        let (flat, avg) = self.graph.description_mean();
        let words = tape.gather(b["emb"], &flat);
        let avg = tape.constant(avg);
        let v = tape.matmul(avg, words);
        let g0 = match b.try_get("proj.w") {
            Some(p) => tape.matmul_t(v, p),
            None => v,
        };
        let g = propagate_on_tape(
            tape,
            b,
            &self.graph.neighbor_mean,
            g0,
            self.config.propagation_steps,
        );
        LabelBlock {
            label_vectors: v,
            classifiers: g,
        }
    }

    fn doc_forward(&self, tape: &mut Tape, b: &Bound, block: &LabelBlock, words: Var) -> DocOutputs {
        let unfolded = tape.unfold(words, self.config.kernel_width);
        let conv = tape.matmul(unfolded, b["conv.w"]);
        let conv = tape.add_row(conv, b["conv.b"]);
        let h = tape.tanh(conv);
        let (attention, attended) =
            attend_on_tape(tape, h, block.label_vectors, b["attn.w"], b["attn.b"]);
        let features = features_on_tape(tape, attended, b["out.w"], b["out.b"]);
        let prod = tape.mul(features, block.classifiers);
        let logits = tape.sum_cols(prod);
        DocOutputs {
            attention,
            attended,
            features,
            logits,
        }
    }

    /// Label embeddings `v` (`L × d`) and classifiers `g` (`L × d_f`).
    pub fn label_state(&self) -> (Array2<f64>, Array2<f64>) {
        let mut tape = Tape::new();
        let b = self.params.bind_frozen(&mut tape);
        let block = self.label_block(&mut tape, &b);
        (
            tape.value(block.label_vectors).clone(),
            tape.value(block.classifiers).clone(),
        )
    }

    /// The tied per-code classifiers `g_l`, one row per code.
    pub fn classifiers(&self) -> Array2<f64> {
        self.label_state().1
    }

    /// Inference forward pass for one document (no dropout).
    pub fn forward(&self, tokens: &[usize]) -> LabelwiseFeatures {
        let (v, g) = self.label_state();
        self.forward_with(tokens, &v, &g)
    }

    fn forward_with(&self, tokens: &[usize], v: &Array2<f64>, g: &Array2<f64>) -> LabelwiseFeatures {
        let mut tape = Tape::new();
        let mut b = Bound::default();
        for name in ["conv.w", "conv.b", "attn.w", "attn.b", "out.w", "out.b"] {
            let var = tape.constant(self.params.get(name).expect("param").clone());
            b = b.with(name, var);
        }
        let block = LabelBlock {
            label_vectors: tape.constant(v.clone()),
            classifiers: tape.constant(g.clone()),
        };
        let words = tape.constant(self.embedding_matrix().select(Axis(0), tokens));
        let out = self.doc_forward(&mut tape, &b, &block, words);
        let logits = tape.value(out.logits).column(0).to_owned();
        LabelwiseFeatures {
            attention: tape.value(out.attention).clone(),
            attended: tape.value(out.attended).clone(),
            features: tape.value(out.features).clone(),
            probabilities: logits.mapv(sigmoid),
            logits,
        }
    }

    /// Features for many documents, computed in parallel; output keeps input order.
    pub fn forward_many(&self, docs: &[Document]) -> Vec<LabelwiseFeatures> {
        let (v, g) = self.label_state();
        docs.par_iter()
            .map(|d| self.forward_with(&d.tokens, &v, &g))
            .collect()
    }

    /// Binary targets for a document in label order.
    pub fn targets(&self, doc: &Document) -> Array1<f64> {
        self.graph
            .codes
            .iter()
            .map(|c| if doc.labels.contains(c) { 1.0 } else { 0.0 })
            .collect()
    }

    /// Per-code margins `C / n_l^{1/4}` applied to positive targets.
    fn margins(&self, targets: &Array1<f64>) -> Result<Option<Array2<f64>>> {
        let Some(c) = self.config.ldam_c else {
            return Ok(None);
        };
        let logits = Array1::zeros(targets.len());
        let deltas = ldam_margins(&logits, targets, &self.graph.train_counts, c)?;
        Ok(Some(deltas.insert_axis(Axis(1))))
    }

    /// Summed per-label loss for one document on the tape.
    fn doc_loss(
        &self,
        tape: &mut Tape,
        logits: Var,
        targets: &Array1<f64>,
    ) -> Result<Var> {
        let x = match self.margins(targets)? {
            Some(m) => {
                let m = tape.constant(m);
                tape.sub(logits, m)
            }
            None => logits,
        };
        Ok(bce_with_logits_on_tape(tape, x, targets))
    }

    /// Mean per-document loss over a batch, with optional embedding dropout.
    pub fn batch_loss(
        &self,
        params: &ParamSet,
        docs: &[&Document],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, crate::params::GradMap)> {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let model = ExtractorModel {
            config: self.config.clone(),
            graph: self.graph.clone(),
            word_dim: self.word_dim,
            params: params.clone(),
        };
        let block = model.label_block(&mut tape, &b);
        let mut rng = rng;
        let mut total: Option<Var> = None;
        for doc in docs {
            let mut words = tape.gather(b["emb"], &doc.tokens);
            if let Some(r) = rng.as_deref_mut() {
                if self.config.dropout > 0.0 {
                    let keep = 1.0 - self.config.dropout;
                    let shape = tape.shape(words);
                    let mask = Array2::from_shape_fn(shape, |_| {
                        if r.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    let mask = tape.constant(mask);
                    words = tape.mul(words, mask);
                }
            }
            let out = model.doc_forward(&mut tape, &b, &block, words);
            let loss = model.doc_loss(&mut tape, out.logits, &model.targets(doc))?;
            total = Some(match total {
                Some(t) => tape.add(t, loss),
                None => loss,
            });
        }
        let total = total.ok_or_else(|| Error::invalid("empty batch"))?;
        let mean = tape.scale(total, 1.0 / docs.len() as f64);
        let value = tape.scalar(mean);
        let grads = tape.backward(mean);
        let mut g = params.collect_grads(&b, &grads);
        if let Some(e) = g.get_mut("emb") {
            e.row_mut(PAD).fill(0.0);
        }
        Ok((value, g))
    }
}

impl Bound {
    fn with(mut self, name: &str, var: Var) -> Self {
        self.insert(name, var);
        self
    }
}

/// `s = softmax(tanh(H·W_aᵀ + b_a)·vᵀ)` down each column, `a = sᵀ·H`.
fn attend_on_tape(tape: &mut Tape, h: Var, label_vectors: Var, wa: Var, ba: Var) -> (Var, Var) {
    let z = tape.matmul_t(h, wa);
    let z = tape.add_row(z, ba);
    let z = tape.tanh(z);
    let scores = tape.matmul_t(z, label_vectors);
    let attention = tape.softmax_cols(scores);
    let at = tape.transpose(attention);
    let attended = tape.matmul(at, h);
    (attention, attended)
}

fn features_on_tape(tape: &mut Tape, attended: Var, wo: Var, bo: Var) -> Var {
    let pre = tape.matmul_t(attended, wo);
    let pre = tape.add_row(pre, bo);
    tape.relu(pre)
}

/// Row-wise GRU update; each row is one label.
fn gru_on_tape(tape: &mut Tape, b: &Bound, h: Var, g_prev: Var) -> Var {
    let gate = |tape: &mut Tape, w: &str, u: &str, bias: &str, hidden: Var| {
        let a = tape.matmul_t(h, b[w]);
        let c = tape.matmul_t(hidden, b[u]);
        let s = tape.add(a, c);
        tape.add_row(s, b[bias])
    };
    let z = gate(tape, "gru.wz", "gru.uz", "gru.bz", g_prev);
    let z = tape.sigmoid(z);
    let r = gate(tape, "gru.wr", "gru.ur", "gru.br", g_prev);
    let r = tape.sigmoid(r);
    let rg = tape.mul(r, g_prev);
    let cand = gate(tape, "gru.wh", "gru.uh", "gru.bh", rg);
    let cand = tape.tanh(cand);
    // (1 - z) ⊙ g + z ⊙ cand  ==  g + z ⊙ (cand - g)
    let diff = tape.sub(cand, g_prev);
    let step = tape.mul(z, diff);
    tape.add(g_prev, step)
}

fn propagate_on_tape(
    tape: &mut Tape,
    b: &Bound,
    neighbor_mean: &Array2<f64>,
    g0: Var,
    steps: usize,
) -> Var {
    let adj = tape.constant(neighbor_mean.clone());
    let mut g = g0;
    for _ in 0..steps {
        let h = tape.matmul(adj, g);
        g = gru_on_tape(tape, b, h, g);
    }
    g
}

/// Summed `softplus(x) − y·x`, the logit form of binary cross-entropy.
pub(crate) fn bce_with_logits_on_tape(tape: &mut Tape, logits: Var, targets: &Array1<f64>) -> Var {
    let y = tape.constant(targets.clone().insert_axis(Axis(1)));
    let sp = tape.softplus(logits);
    let yx = tape.mul(y, logits);
    let per = tape.sub(sp, yx);
    tape.sum(per)
}

/// Label-wise attention for one code over convolved rows `h` (`N × d_c`).
///
/// `wa` is `d × d_c` and maps convolution channels into word space.
pub fn attend_labelwise(
    h: &Array2<f64>,
    label_vector: &Array1<f64>,
    wa: &Array2<f64>,
    ba: &Array1<f64>,
) -> Result<(Array1<f64>, Array1<f64>)> {
    if h.nrows() == 0 {
        return Err(Error::invalid("attention over zero rows"));
    }
    if wa.ncols() != h.ncols() || wa.nrows() != label_vector.len() || ba.len() != wa.nrows() {
        return Err(Error::invalid("attention shape mismatch"));
    }
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let v = tape.constant(label_vector.clone().insert_axis(Axis(0)));
    let w = tape.constant(wa.clone());
    let bias = tape.constant(ba.clone().insert_axis(Axis(0)));
    let (s, a) = attend_on_tape(&mut tape, hv, v, w, bias);
    Ok((
        tape.value(s).column(0).to_owned(),
        tape.value(a).row(0).to_owned(),
    ))
}

/// `f = rectifier(W_o·a + b_o)`.
pub fn extract_features(attended: &Array1<f64>, wo: &Array2<f64>, bo: &Array1<f64>) -> Result<Array1<f64>> {
    if wo.ncols() != attended.len() || wo.nrows() != bo.len() {
        return Err(Error::invalid("output map shape mismatch"));
    }
    let mut tape = Tape::new();
    let a = tape.constant(attended.clone().insert_axis(Axis(0)));
    let w = tape.constant(wo.clone());
    let b = tape.constant(bo.clone().insert_axis(Axis(0)));
    let f = features_on_tape(&mut tape, a, w, b);
    Ok(tape.value(f).row(0).to_owned())
}

/// One GRU update of `g_prev` given message `h`, with `gru.*` parameters.
pub fn gru_cell(h: &Array1<f64>, g_prev: &Array1<f64>, params: &ParamSet) -> Array1<f64> {
    let mut tape = Tape::new();
    let b = params.bind_frozen(&mut tape);
    let hv = tape.constant(h.clone().insert_axis(Axis(0)));
    let gv = tape.constant(g_prev.clone().insert_axis(Axis(0)));
    let out = gru_on_tape(&mut tape, &b, hv, gv);
    tape.value(out).row(0).to_owned()
}

/// `t` rounds of neighbor averaging plus GRU update starting from `g0`.
pub fn propagate_graph(graph: &LabelGraph, g0: &Array2<f64>, steps: usize, params: &ParamSet) -> Array2<f64> {
    let mut tape = Tape::new();
    let b = params.bind_frozen(&mut tape);
    let g = tape.constant(g0.clone());
    let out = propagate_on_tape(&mut tape, &b, &graph.neighbor_mean, g, steps);
    tape.value(out).clone()
}

/// `−Σ_l [y_l ln ŷ_l + (1 − y_l) ln(1 − ŷ_l)]` with `ŷ` clamped to `[ε, 1 − ε]`.
pub fn bce_loss(targets: &[f64], probs: &[f64]) -> Result<f64> {
    if targets.len() != probs.len() {
        return Err(Error::invalid("target and probability lengths differ"));
    }
    Ok(targets
        .iter()
        .zip(probs)
        .map(|(&y, &p)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum())
}

fn ldam_margins(
    _logits: &Array1<f64>,
    targets: &Array1<f64>,
    counts: &[usize],
    c: f64,
) -> Result<Array1<f64>> {
    targets
        .iter()
        .zip(counts)
        .map(|(&y, &n)| {
            if y == 1.0 {
                if n == 0 {
                    return Err(Error::invalid(
                        "positive target for a code with no training examples",
                    ));
                }
                Ok(c / (n as f64).powf(0.25))
            } else {
                Ok(0.0)
            }
        })
        .collect()
}

/// Margin-adjusted probabilities `σ(logit − 1[y=1]·C/n^{1/4})`.
pub fn ldam_probabilities(logits: &[f64], targets: &[f64], counts: &[usize], c: f64) -> Result<Vec<f64>> {
    if logits.len() != targets.len() || logits.len() != counts.len() {
        return Err(Error::invalid("logit, target and count lengths differ"));
    }
    let deltas = ldam_margins(
        &Array1::from(logits.to_vec()),
        &Array1::from(targets.to_vec()),
        counts,
        c,
    )?;
    Ok(logits
        .iter()
        .zip(deltas.iter())
        .map(|(x, d)| sigmoid(x - d))
        .collect())
}

pub fn ldam_loss(logits: &[f64], targets: &[f64], counts: &[usize], c: f64) -> Result<f64> {
    bce_loss(targets, &ldam_probabilities(logits, targets, counts, c)?)
}

/// Trains the extractor with Adam over shuffled minibatches.
pub fn train_extractor(
    train: &[Document],
    hierarchy: &LabelHierarchy,
    table: &EmbeddingTable,
    config: &ExtractorConfig,
    seed: u64,
) -> Result<(ExtractorModel, TrainingLog)> {
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let graph = LabelGraph::build(hierarchy, table)?;
    let mut model = ExtractorModel::new(config.clone(), graph, table, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
    let mut opt = Adam::new(config.learning_rate);
    let mut log = TrainingLog::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let docs: Vec<&Document> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = model.batch_loss(&model.params, &docs, Some(&mut rng))?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "extractor loss became {loss} in epoch {epoch}"
                )));
            }
            let mut grads = grads;
            if config.freeze_embeddings {
                grads.remove("emb");
            }
            opt.step(&mut model.params, &grads);
            sum += loss;
            batches += 1;
        }
        let mean = sum / batches as f64;
        log::info!("extractor epoch {epoch}: loss {mean:.5}");
        log.epoch_losses.push(mean);
    }
    if !model.params.all_finite() {
        return Err(Error::Divergence("extractor parameters are not finite".into()));
    }
    Ok((model, log))
}

/// One `(code, document)` feature row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub code: String,
    pub doc_id: String,
    pub positive: bool,
    pub features: Vec<f64>,
}

/// Label-wise features of a document split, as consumed by feature generation
/// and classifier fine-tuning.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureDump {
    pub dim: usize,
    pub rows: Vec<FeatureRow>,
}

impl FeatureDump {
    /// Every positive `(doc, code)` pair plus up to `negatives_per_code`
    /// uniformly sampled negatives per code.
    pub fn build(
        model: &ExtractorModel,
        docs: &[Document],
        negatives_per_code: usize,
        seed: u64,
    ) -> Self {
        let outputs = model.forward_many(docs);
        let codes = &model.graph.codes;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut negatives: Vec<BTreeSet<usize>> = Vec::with_capacity(codes.len());
        for code in codes {
            let mut pool: Vec<usize> = (0..docs.len())
                .filter(|&i| !docs[i].labels.contains(code))
                .collect();
            pool.shuffle(&mut rng);
            pool.truncate(negatives_per_code);
            negatives.push(pool.into_iter().collect());
        }
        let mut rows = Vec::new();
        for (i, (doc, out)) in docs.iter().zip(&outputs).enumerate() {
            for (l, code) in codes.iter().enumerate() {
                let positive = doc.labels.contains(code);
                if positive || negatives[l].contains(&i) {
                    rows.push(FeatureRow {
                        code: code.clone(),
                        doc_id: doc.doc_id.clone(),
                        positive,
                        features: out.features.row(l).to_vec(),
                    });
                }
            }
        }
        Self {
            dim: model.feature_dim(),
            rows,
        }
    }

    pub fn positives(&self) -> impl Iterator<Item = &FeatureRow> {
        self.rows.iter().filter(|r| r.positive)
    }

    pub fn by_code(&self) -> BTreeMap<&str, Vec<&FeatureRow>> {
        let mut out: BTreeMap<&str, Vec<&FeatureRow>> = BTreeMap::new();
        for r in &self.rows {
            out.entry(r.code.as_str()).or_default().push(r);
        }
        out
    }

    /// Writes `code_id, doc_id, y, f_1 … f_d` tab-separated rows.
    pub fn write(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        for r in &self.rows {
            write!(w, "{}\t{}\t{}", r.code, r.doc_id, u8::from(r.positive)).map_err(io)?;
            for x in &r.features {
                write!(w, "\t{x}").map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut dump = FeatureDump::default();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() < 4 {
                return Err(Error::format(Some(i + 1), "feature rows need code, doc, y and values"));
            }
            let features = f[3..]
                .iter()
                .map(|x| x.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::format(Some(i + 1), format!("bad feature value: {e}")))?;
            if dump.rows.is_empty() {
                dump.dim = features.len();
            } else if features.len() != dump.dim {
                return Err(Error::format(Some(i + 1), "inconsistent feature dimension"));
            }
            let positive = match f[2] {
                "1" => true,
                "0" => false,
                other => return Err(Error::format(Some(i + 1), format!("bad label `{other}`"))),
            };
            dump.rows.push(FeatureRow {
                code: f[0].to_string(),
                doc_id: f[1].to_string(),
                positive,
                features,
            });
        }
        Ok(dump)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn zero_gru(dim: usize) -> ParamSet {
        let mut p = ParamSet::new();
        for gate in ["z", "r", "h"] {
            p.init_zeros(&format!("gru.w{gate}"), dim, dim);
            p.init_zeros(&format!("gru.u{gate}"), dim, dim);
            p.init_zeros(&format!("gru.b{gate}"), 1, dim);
        }
        p
    }

    #[test]
    fn identical_rows_give_uniform_attention() {
        let h = array![[0.5, -1.0], [0.5, -1.0], [0.5, -1.0]];
        let wa = array![[0.3, 0.2], [-0.1, 0.4]];
        let (s, a) = attend_labelwise(&h, &array![1.0, 2.0], &wa, &array![0.1, 0.0]).unwrap();
        for x in s.iter() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((a[0] - 0.5).abs() < 1e-15 && (a[1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn attention_logits_ln2_and_zero() {
        // tanh(H W_aᵀ) v = (ln 2, 0) with W_a = identity, v = (1, 0).
        let t = 2f64.ln().atanh();
        let h = array![[t, 0.0], [0.0, 0.0]];
        let wa = Array2::eye(2);
        let (s, _) = attend_labelwise(&h, &array![1.0, 0.0], &wa, &array![0.0, 0.0]).unwrap();
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((s[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_row_attention() {
        let h = array![[0.7, 0.1]];
        let (s, a) = attend_labelwise(&h, &array![1.0], &array![[1.0, 1.0]], &array![0.0]).unwrap();
        assert_eq!(s, array![1.0]);
        assert_eq!(a, array![0.7, 0.1]);
    }

    #[test]
    fn attention_shape_errors() {
        let h = Array2::<f64>::zeros((0, 2));
        assert!(attend_labelwise(&h, &array![1.0], &array![[1.0, 1.0]], &array![0.0]).is_err());
        let h = Array2::<f64>::zeros((2, 3));
        assert!(attend_labelwise(&h, &array![1.0], &array![[1.0, 1.0]], &array![0.0]).is_err());
    }

    #[test]
    fn feature_map_examples() {
        let eye = Array2::eye(2);
        assert_eq!(extract_features(&array![0.3, 1.2], &eye, &array![0.0, 0.0]).unwrap(), array![0.3, 1.2]);
        assert_eq!(extract_features(&array![-1.0, 2.0], &eye, &array![0.0, 0.0]).unwrap(), array![0.0, 2.0]);
        assert_eq!(extract_features(&array![0.0, 0.0], &eye, &array![-1.0, -1.0]).unwrap(), array![0.0, 0.0]);
    }

    #[test]
    fn gru_with_zero_params_halves_state() {
        let p = zero_gru(3);
        let g = array![1.0, -2.0, 0.5];
        let out = gru_cell(&array![3.0, 1.0, -1.0], &g, &p);
        assert_eq!(out, &g * 0.5);
    }

    #[test]
    fn gru_closed_gate_keeps_state() {
        let mut p = zero_gru(2);
        p.insert("gru.bz", array![[-50.0, -50.0]]);
        p.insert("gru.wh", array![[1.0, 0.0], [0.0, 1.0]]);
        let g = array![0.3, -0.4];
        let out = gru_cell(&array![2.0, 2.0], &g, &p);
        for (a, b) in out.iter().zip(g.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gru_open_gate_takes_candidate() {
        let mut p = zero_gru(2);
        p.insert("gru.bz", array![[50.0, 50.0]]);
        let wh = array![[0.5, -0.2], [0.1, 0.3]];
        p.insert("gru.wh", wh.clone());
        let h = array![1.0, 2.0];
        let out = gru_cell(&h, &array![0.9, -0.9], &p);
        let expect = wh.dot(&h).mapv(f64::tanh);
        for (a, b) in out.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn star_graph() -> LabelGraph {
        // center 0 with leaves 1, 2, 3
        let mut m = Array2::zeros((4, 4));
        for j in 1..4 {
            m[[0, j]] = 1.0 / 3.0;
            m[[j, 0]] = 1.0;
        }
        LabelGraph {
            codes: (0..4).map(|i| format!("c{i}")).collect(),
            description_ids: vec![vec![2]; 4],
            neighbor_mean: m,
            train_counts: vec![1; 4],
        }
    }

    #[test]
    fn zero_steps_returns_initial_embeddings() {
        let g0 = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]];
        let out = propagate_graph(&star_graph(), &g0, 0, &zero_gru(2));
        assert_eq!(out, g0);
    }

    #[test]
    fn star_center_message_is_leaf_mean() {
        // With z forced open and W_h = I, U_h = 0, the update is tanh(h).
        let mut p = zero_gru(2);
        p.insert("gru.bz", array![[60.0, 60.0]]);
        p.insert("gru.wh", Array2::eye(2));
        let g0 = array![[0.0, 0.0], [0.3, 0.1], [0.6, -0.2], [-0.3, 0.4]];
        let out = propagate_graph(&star_graph(), &g0, 1, &p);
        let leaf_mean: [f64; 2] = [
            (0.3 + 0.6 - 0.3) / 3.0,
            (0.1 - 0.2 + 0.4) / 3.0,
        ];
        assert!((out[[0, 0]] - leaf_mean[0].tanh()).abs() < 1e-12);
        assert!((out[[0, 1]] - leaf_mean[1].tanh()).abs() < 1e-12);
        // Leaves only see the center.
        assert!((out[[1, 0]] - 0.0f64.tanh()).abs() < 1e-12);
    }

    #[test]
    fn bce_examples() {
        assert!((bce_loss(&[1.0], &[0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((bce_loss(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!(bce_loss(&[1.0], &[1.0 - PROB_EPS]).unwrap() < 1e-11);
        assert!(bce_loss(&[1.0], &[0.0]).unwrap().is_finite());
    }

    #[test]
    fn ldam_examples() {
        let p = ldam_probabilities(&[0.5], &[1.0], &[16], 1.0).unwrap();
        assert_eq!(p[0], 0.5);
        let p = ldam_probabilities(&[0.5], &[0.0], &[16], 1.0).unwrap();
        assert!((p[0] - 0.622_459_331_201_854_6).abs() < 1e-15);
        assert!(ldam_probabilities(&[0.5], &[1.0], &[0], 1.0).is_err());
    }

    #[test]
    fn ldam_with_zero_constant_is_bce() {
        let logits = [0.3, -1.2, 2.5];
        let y = [1.0, 0.0, 1.0];
        let probs: Vec<f64> = logits.iter().map(|&x| sigmoid(x)).collect();
        let a = ldam_loss(&logits, &y, &[3, 4, 5], 0.0).unwrap();
        let b = bce_loss(&y, &probs).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
