//! Tiny fixtures and finite-difference helpers shared by integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use zscode::corpus::{Document, EmbeddingTable};
use zscode::extractor::{ExtractorConfig, ExtractorModel, LabelGraph};
use zscode::generation::{
    Conditioning, Draws, GanConfig, GanModel, KeywordVocab, LossFlags, SeenBatch, ZeroShotBatch,
};
use zscode::params::{GradMap, ParamSet};

/// Differences are taken at both steps and the closer one counts, so a
/// piecewise-linear kink within one step of the point cannot fail the check.
pub const STEPS: [f64; 2] = [1e-5, 1e-6];
pub const TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
pub const FLOOR: f64 = 1e-6;

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Largest relative error between `grads` and central differences of `loss`
/// over every entry of the parameters accepted by `check`.
pub fn max_gradient_error(
    params: &ParamSet,
    grads: &GradMap,
    check: impl Fn(&str) -> bool,
    loss: impl Fn(&ParamSet) -> f64,
) -> (f64, String) {
    let mut worst = (0.0, String::new());
    let names: Vec<String> = params.names().filter(|n| check(n)).map(String::from).collect();
    assert!(!names.is_empty(), "nothing to check");
    for name in names {
        let shape = params.get(&name).unwrap().dim();
        for i in 0..shape.0 {
            for j in 0..shape.1 {
                let analytic = grads.get(&name).map(|g| g[[i, j]]).unwrap_or(0.0);
                let (err, numeric) = STEPS
                    .iter()
                    .map(|&h| {
                        let mut p = params.clone();
                        p.get_mut(&name).unwrap()[[i, j]] += h;
                        let up = loss(&p);
                        p.get_mut(&name).unwrap()[[i, j]] -= 2.0 * h;
                        let numeric = (up - loss(&p)) / (2.0 * h);
                        (relative_error(analytic, numeric), numeric)
                    })
                    .min_by(|a, b| a.0.total_cmp(&b.0))
                    .unwrap();
                if err > worst.0 {
                    worst = (err, format!("{name}[{i},{j}] analytic {analytic:e} numeric {numeric:e}"));
                }
            }
        }
    }
    worst
}

/// Replaces zero-initialized biases so their gradients are exercised.
pub fn randomize_biases(params: &mut ParamSet, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = params
        .names()
        .filter(|n| n.split('.').nth(1).is_some_and(|s| s.starts_with('b')))
        .map(String::from)
        .collect();
    for name in names {
        let p = params.get_mut(&name).unwrap();
        let shape = p.dim();
        *p = uniform(&mut rng, shape.0, shape.1, 0.3);
    }
}

/// Word table with `d = 4` over eight words.
pub fn tiny_table(seed: u64) -> EmbeddingTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..8)
        .map(|i| (format!("w{i}"), (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect();
    EmbeddingTable::from_rows(4, rows).unwrap()
}

/// Three codes on a path `c0 - c1 - c2`.
pub fn tiny_graph() -> LabelGraph {
    let mut m = Array2::zeros((3, 3));
    m[[0, 1]] = 1.0;
    m[[1, 0]] = 0.5;
    m[[1, 2]] = 0.5;
    m[[2, 1]] = 1.0;
    LabelGraph {
        codes: vec!["c0".into(), "c1".into(), "c2".into()],
        description_ids: vec![vec![2, 3], vec![4, 5], vec![6, 7, 8]],
        neighbor_mean: m,
        train_counts: vec![2, 1, 3],
    }
}

pub fn doc(id: &str, tokens: &[usize], labels: &[&str]) -> Document {
    Document {
        doc_id: id.into(),
        tokens: tokens.to_vec(),
        labels: labels.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>(),
        group: None,
    }
}

pub fn tiny_docs() -> Vec<Document> {
    vec![
        doc("a", &[2, 5, 7, 3], &["c0", "c2"]),
        doc("b", &[4, 1, 9, 6, 2], &["c1"]),
        doc("c", &[8, 3, 3, 5], &["c0", "c1", "c2"]),
    ]
}

/// Extractor with `d = d_c = d_f = 4`, kernel 3, two propagation rounds.
pub fn tiny_extractor(ldam_c: Option<f64>, seed: u64) -> ExtractorModel {
    let config = ExtractorConfig {
        filters: 4,
        kernel_width: 3,
        feature_dim: 4,
        dropout: 0.0,
        batch_size: 3,
        learning_rate: 1e-2,
        epochs: 1,
        ldam_c,
        propagation_steps: 2,
        freeze_embeddings: false,
    };
    let mut model = ExtractorModel::new(config, tiny_graph(), &tiny_table(seed), seed).unwrap();
    randomize_biases(&mut model.params, seed + 1);
    model
}

/// Three codes with `d = 3` and `d_f = 2`; codes 0 and 1 are seen, 2 is
/// zero-shot.
pub fn tiny_conditioning(seed: u64) -> Conditioning {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Conditioning {
        codes: vec!["c0".into(), "c1".into(), "c2".into()],
        descriptions: (0..3).map(|i| uniform(&mut rng, 2 + i % 2, 3, 1.0)).collect(),
        label_vectors: uniform(&mut rng, 3, 3, 1.0),
        classifiers: uniform(&mut rng, 3, 2, 1.0),
    }
}

pub fn tiny_vocab(seed: u64, size: usize) -> KeywordVocab {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let emb = uniform(&mut rng, size + 2, 3, 1.0);
    KeywordVocab::new((2..size + 2).collect(), &emb).unwrap()
}

pub fn tiny_gan_config() -> GanConfig {
    GanConfig {
        hidden: 4,
        noise_dim: 2,
        encoder_hidden: 2,
        batch_size: 3,
        ..GanConfig::default()
    }
}

pub fn tiny_gan(flags: LossFlags, seed: u64) -> GanModel {
    let vocab = flags.keywords.then(|| tiny_vocab(seed, 4));
    let mut model = GanModel::new(tiny_gan_config(), flags, tiny_conditioning(seed), vocab, seed).unwrap();
    randomize_biases(&mut model.params, seed + 7);
    model
}

pub struct TinyBatches {
    pub seen: SeenBatch,
    pub seen_draws: Draws,
    pub zero: ZeroShotBatch,
    pub zero_draws: Draws,
}

pub fn tiny_batches(seed: u64) -> TinyBatches {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positive = |rng: &mut ChaCha8Rng, rows| uniform(rng, rows, 2, 1.0).mapv(f64::abs);
    TinyBatches {
        seen: SeenBatch {
            codes: vec![0, 1, 0],
            real: positive(&mut rng, 3),
            keywords: vec![Some(vec![(0, 0.8), (2, 0.3)]), None, Some(vec![(1, 0.5), (3, -0.2)])],
        },
        seen_draws: Draws::sample(3, 2, &mut rng),
        zero: ZeroShotBatch {
            codes: vec![2, 2],
            siblings: vec![1, 0],
            sibling_real: positive(&mut rng, 2),
            keywords: vec![Some(vec![(3, 0.6)]), Some(vec![(0, 0.4), (1, 0.9)])],
        },
        zero_draws: Draws::sample(2, 2, &mut rng),
    }
}

pub fn is_critic(name: &str) -> bool {
    name.starts_with("critic.")
}

/// Worst relative error of each loss family against central differences.
///
/// Generator checks leave out `enc.*`: the encoder also feeds the critic and
/// the sibling weights through detached condition rows, which finite
/// differences of the loss value would see but the gradient deliberately
/// does not.
pub fn gradient_checks(seed: u64) -> Vec<(&'static str, f64, String)> {
    let mut out = Vec::new();
    let docs = tiny_docs();
    let refs: Vec<&Document> = docs.iter().collect();
    for (name, c) in [("bce", None), ("ldam", Some(1.5))] {
        let model = tiny_extractor(c, seed);
        let (_, grads) = model.batch_loss(&model.params, &refs, None).unwrap();
        let (err, at) = max_gradient_error(&model.params, &grads, |_| true, |p| {
            model.batch_loss(p, &refs, None).unwrap().0
        });
        out.push((name, err, at));
    }

    let b = tiny_batches(seed);
    let generator_side = |n: &str| !is_critic(n) && !n.starts_with("enc.");
    let cases = [
        ("wgan", LossFlags::default()),
        ("z", LossFlags { zero_shot: true, ..LossFlags::default() }),
        ("key", LossFlags { zero_shot: true, keywords: true, ..LossFlags::default() }),
        ("cls", LossFlags { cls: true, ..LossFlags::default() }),
        ("cyc", LossFlags { cyc: true, ..LossFlags::default() }),
    ];
    for (name, flags) in cases {
        let model = tiny_gan(flags, seed);
        let critic_zero = flags.zero_shot.then_some((&b.zero, &b.zero_draws));
        let gen_zero = flags.zero_shot.then_some((&b.zero, &b.zero_draws.noise));
        if matches!(name, "wgan" | "z") {
            let (_, grads) = model.critic_loss(&model.params, &b.seen, &b.seen_draws, critic_zero).unwrap();
            let (err, at) = max_gradient_error(&model.params, &grads, is_critic, |p| {
                model.critic_loss(p, &b.seen, &b.seen_draws, critic_zero).unwrap().0
            });
            out.push((if name == "wgan" { "wgan critic + penalty" } else { "z critic" }, err, at));
        }
        let (_, grads) = model.generator_loss(&model.params, &b.seen, &b.seen_draws.noise, gen_zero).unwrap();
        let (err, at) = max_gradient_error(&model.params, &grads, generator_side, |p| {
            model.generator_loss(p, &b.seen, &b.seen_draws.noise, gen_zero).unwrap().0
        });
        let label = match name {
            "wgan" => "wgan generator",
            "z" => "z generator",
            other => other,
        };
        out.push((label, err, at));
    }
    out
}

/// A critic that is linear in the features, `D(f, c) = w·f`.
pub struct LinearCritic(pub ndarray::Array1<f64>);

impl zscode::generation::Critic for LinearCritic {
    fn scores(&self, f: &Array2<f64>, _c: &Array2<f64>) -> ndarray::Array1<f64> {
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

/// The degenerate cases under which richer losses reduce to simpler ones.
/// Each entry is `(name, holds, detail)`.
pub fn identity_checks(seed: u64) -> Vec<(&'static str, bool, String)> {
    use zscode::extractor::{bce_loss, ldam_loss};
    use zscode::generation::{gradient_penalty, keyword_loss, wgan_losses, Critic};
    use zscode::tape::sigmoid;

    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let docs = tiny_docs();
    let refs: Vec<&Document> = docs.iter().collect();
    let (bce, bce_grads) = {
        let m = tiny_extractor(None, seed);
        m.batch_loss(&m.params, &refs, None).unwrap()
    };
    let (ldam, ldam_grads) = {
        let m = tiny_extractor(Some(0.0), seed);
        m.batch_loss(&m.params, &refs, None).unwrap()
    };
    let logits: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
    let targets = [1.0, 0.0, 1.0, 1.0, 0.0];
    let probs: Vec<f64> = logits.iter().map(|&x| sigmoid(x)).collect();
    let scalar_ldam = ldam_loss(&logits, &targets, &[1, 4, 9, 2, 7], 0.0).unwrap();
    let scalar_bce = bce_loss(&targets, &probs).unwrap();
    out.push((
        "C = 0 turns LDAM into BCE",
        bce.to_bits() == ldam.to_bits() && bce_grads == ldam_grads && scalar_ldam.to_bits() == scalar_bce.to_bits(),
        format!("model {bce} vs {ldam}; scalar {scalar_bce} vs {scalar_ldam}"),
    ));

    let b = tiny_batches(seed);
    let plain = tiny_gan(LossFlags::default(), seed);
    let mut keyed = tiny_gan(LossFlags { keywords: true, ..LossFlags::default() }, seed);
    keyed.config.beta = 0.0;
    for (name, value) in plain.params.iter() {
        *keyed.params.get_mut(name).unwrap() = value.clone();
    }
    let g_plain = plain.generator_loss(&plain.params, &b.seen, &b.seen_draws.noise, None).unwrap();
    let g_keyed = keyed.generator_loss(&keyed.params, &b.seen, &b.seen_draws.noise, None).unwrap();
    let c_plain = plain.critic_loss(&plain.params, &b.seen, &b.seen_draws, None).unwrap();
    let c_keyed = keyed.critic_loss(&keyed.params, &b.seen, &b.seen_draws, None).unwrap();
    let conds = plain.encode_labels();
    let fake = plain.generate_from(&conds, &b.seen.codes, &b.seen_draws.noise).unwrap();
    let c_rows = conds.select(ndarray::Axis(0), &b.seen.codes);
    let (critic_ref, gen_ref) = wgan_losses(
        &plain.critic(),
        &b.seen.real,
        &fake,
        &c_rows,
        &b.seen_draws.alpha,
        plain.config.lambda,
    )
    .unwrap();
    // The tape penalty adds a tiny epsilon under its square root.
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + b.abs());
    out.push((
        "beta = 0 without other terms is the plain WGAN objective",
        g_plain.0.to_bits() == g_keyed.0.to_bits()
            && c_plain.0.to_bits() == c_keyed.0.to_bits()
            && close(g_plain.0, gen_ref)
            && close(c_plain.0, critic_ref),
        format!(
            "generator {} / {} / {gen_ref}; critic {} / {} / {critic_ref}",
            g_plain.0, g_keyed.0, c_plain.0, c_keyed.0
        ),
    ));

    let feature = uniform(&mut rng, 1, 4, 1.0).row(0).to_owned();
    let q = uniform(&mut rng, 3, 4, 1.0);
    let single = uniform(&mut rng, 1, 3, 1.0);
    let key = keyword_loss(&feature, &[(0, 0.7)], &q, &single).unwrap();
    out.push(("a single keyword gives zero KEY loss", key.abs() == 0.0, format!("{key:e}")));

    let mut w = uniform(&mut rng, 1, 4, 1.0).row(0).to_owned();
    w /= w.dot(&w).sqrt();
    let critic = LinearCritic(w);
    let real = uniform(&mut rng, 3, 4, 1.0);
    let fake = uniform(&mut rng, 3, 4, 1.0);
    let c = Array2::zeros((3, 2));
    let alpha = [0.1, 0.5, 0.9];
    let gp = gradient_penalty(&critic, &real, &fake, &c, &alpha, 10.0).unwrap();
    let grads_unit = critic
        .input_gradients(&real, &c)
        .rows()
        .into_iter()
        .all(|g| (g.dot(&g) - 1.0).abs() < 1e-12);
    out.push((
        "a unit-gradient linear critic has zero penalty",
        gp.abs() <= 1e-10 && grads_unit,
        format!("{gp:e}"),
    ));
    out
}

/// One random scoring problem: `docs × codes` scores and gold labels.
#[derive(Clone, Debug)]
pub struct MetricInstance {
    pub docs: usize,
    pub codes: usize,
    pub scores: Vec<f64>,
    pub gold: Vec<bool>,
    pub threshold: f64,
}

impl MetricInstance {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let docs = rng.random_range(1..=10);
        let codes = rng.random_range(1..=100 / docs);
        let n = docs * codes;
        // Coarse grid so ties and threshold hits are common.
        let scores = (0..n).map(|_| rng.random_range(0..=10) as f64 / 10.0).collect();
        let rate = rng.random_range(0.0..1.0);
        let gold = (0..n).map(|_| rng.random_bool(rate)).collect();
        Self {
            docs,
            codes,
            scores,
            gold,
            threshold: 0.5,
        }
    }

    fn at(&self, i: usize, l: usize) -> (f64, bool) {
        let k = i * self.codes + l;
        (self.scores[k], self.gold[k])
    }
}

/// Precision, recall and F1 in percent straight from the definitions.
fn oracle_prf(pairs: &[(f64, bool)], threshold: f64) -> [f64; 3] {
    let predicted: Vec<bool> = pairs.iter().map(|&(s, _)| s > threshold).collect();
    let tp = pairs.iter().zip(&predicted).filter(|(p, &d)| p.1 && d).count() as f64;
    let pp = predicted.iter().filter(|&&d| d).count() as f64;
    let gp = pairs.iter().filter(|p| p.1).count() as f64;
    let p = if pp > 0.0 { tp / pp } else { 0.0 };
    let r = if gp > 0.0 { tp / gp } else { 0.0 };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    [100.0 * p, 100.0 * r, 100.0 * f]
}

/// Fraction of positive/negative pairs ordered correctly, ties counting half.
fn oracle_auc(pairs: &[(f64, bool)]) -> Option<f64> {
    let (mut wins, mut total) = (0.0, 0.0);
    for &(sp, gp) in pairs {
        if !gp {
            continue;
        }
        for &(sn, gn) in pairs {
            if gn {
                continue;
            }
            total += 1.0;
            wins += if sp > sn {
                1.0
            } else if sp == sn {
                0.5
            } else {
                0.0
            };
        }
    }
    (total > 0.0).then(|| 100.0 * wins / total)
}

/// Compares library metrics with the oracles; `Err` describes the first mismatch.
pub fn check_metric_instance(inst: &MetricInstance) -> Result<(), String> {
    use zscode::evaluation::{auc, confusion_counts, prf1, GoldMatrix, Mode, PredictionMatrix};

    let doc_ids: Vec<String> = (0..inst.docs).map(|i| format!("d{i}")).collect();
    let codes: Vec<String> = (0..inst.codes).map(|l| format!("c{l:03}")).collect();
    let scores = Array2::from_shape_vec((inst.docs, inst.codes), inst.scores.clone()).unwrap();
    let labels = Array2::from_shape_vec((inst.docs, inst.codes), inst.gold.clone()).unwrap();
    let pred = PredictionMatrix::new(doc_ids.clone(), codes.clone(), scores, inst.threshold).unwrap();
    let gold = GoldMatrix {
        doc_ids,
        codes: codes.clone(),
        labels,
    };
    let table = confusion_counts(&pred, &gold, &codes).map_err(|e| e.to_string())?;

    let all: Vec<(f64, bool)> = (0..inst.codes)
        .flat_map(|l| (0..inst.docs).map(move |i| (l, i)))
        .map(|(l, i)| inst.at(i, l))
        .collect();
    let per_code: Vec<Vec<(f64, bool)>> = (0..inst.codes)
        .map(|l| (0..inst.docs).map(|i| inst.at(i, l)).collect())
        .collect();

    let near = |a: f64, b: f64| (a - b).abs() <= 1e-9;
    let micro = prf1(&table, Mode::Micro);
    let want = oracle_prf(&all, inst.threshold);
    if !(near(micro.precision, want[0]) && near(micro.recall, want[1]) && near(micro.f1, want[2])) {
        return Err(format!("micro prf1 {micro:?} vs oracle {want:?} on {inst:?}"));
    }
    let macro_ = prf1(&table, Mode::Macro);
    let per: Vec<[f64; 3]> = per_code.iter().map(|p| oracle_prf(p, inst.threshold)).collect();
    let want: Vec<f64> = (0..3)
        .map(|k| per.iter().map(|v| v[k]).sum::<f64>() / per.len() as f64)
        .collect();
    if !(near(macro_.precision, want[0]) && near(macro_.recall, want[1]) && near(macro_.f1, want[2])) {
        return Err(format!("macro prf1 {macro_:?} vs oracle {want:?} on {inst:?}"));
    }

    match (auc(&pred, &gold, &codes, Mode::Micro), oracle_auc(&all)) {
        (Ok(got), Some(want)) if near(got.value, want) && got.excluded == 0 => {}
        (Err(_), None) => {}
        (got, want) => return Err(format!("micro auc {got:?} vs oracle {want:?} on {inst:?}")),
    }
    let per_auc: Vec<Option<f64>> = per_code.iter().map(|p| oracle_auc(p)).collect();
    let defined: Vec<f64> = per_auc.iter().flatten().copied().collect();
    let excluded = per_auc.len() - defined.len();
    let want = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    match (auc(&pred, &gold, &codes, Mode::Macro), want) {
        (Ok(got), Some(want)) if near(got.value, want) && got.excluded == excluded => {}
        (Err(_), None) => {}
        (got, want) => return Err(format!("macro auc {got:?} vs oracle {want:?} on {inst:?}")),
    }
    Ok(())
}

/// Runs `trials` random instances; returns the mismatches.
pub fn metric_oracle_trials(trials: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials)
        .filter_map(|_| check_metric_instance(&MetricInstance::random(&mut rng)).err())
        .collect()
}
