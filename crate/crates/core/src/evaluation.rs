//! Cohort-aware multi-label metrics.
//!
//! All reported values are percentages. Micro metrics pool every
//! `(doc, code)` decision of a cohort; macro metrics average per-code values.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, Splits};
use crate::error::{Error, Result};
use crate::hierarchy::{Cohort, LabelHierarchy};

/// Scores in `[0, 1]` per `(doc, code)`; decisions are `score > threshold`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionMatrix {
    pub doc_ids: Vec<String>,
    pub codes: Vec<String>,
    pub scores: Array2<f64>,
    pub threshold: f64,
}

impl PredictionMatrix {
    pub fn new(doc_ids: Vec<String>, codes: Vec<String>, scores: Array2<f64>, threshold: f64) -> Result<Self> {
        if scores.dim() != (doc_ids.len(), codes.len()) {
            return Err(Error::invalid("score matrix shape does not match documents and codes"));
        }
        if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::invalid("scores must lie in [0, 1]"));
        }
        Ok(Self {
            doc_ids,
            codes,
            scores,
            threshold,
        })
    }

    pub fn decision(&self, doc: usize, code: usize) -> bool {
        self.scores[[doc, code]] > self.threshold
    }

    pub fn decisions(&self) -> Array2<bool> {
        self.scores.mapv(|s| s > self.threshold)
    }

    /// SHA-256 over ids and the exact score bits.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for id in self.doc_ids.iter().chain(&self.codes) {
            h.update(id.as_bytes());
            h.update([0u8]);
        }
        for s in &self.scores {
            h.update(s.to_le_bytes());
        }
        h.update(self.threshold.to_le_bytes());
        hex::encode(h.finalize())
    }
}

/// Gold labels aligned like a [`PredictionMatrix`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoldMatrix {
    pub doc_ids: Vec<String>,
    pub codes: Vec<String>,
    pub labels: Array2<bool>,
}

impl GoldMatrix {
    pub fn from_documents(docs: &[Document], codes: &[String]) -> Self {
        let labels = Array2::from_shape_fn((docs.len(), codes.len()), |(i, l)| {
            docs[i].labels.contains(&codes[l])
        });
        Self {
            doc_ids: docs.iter().map(|d| d.doc_id.clone()).collect(),
            codes: codes.to_vec(),
            labels,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfusionTable {
    pub per_code: BTreeMap<String, Counts>,
    pub pooled: Counts,
}

impl ConfusionTable {
    pub fn is_empty(&self) -> bool {
        self.per_code.is_empty()
    }
}

fn check_aligned(pred: &PredictionMatrix, gold: &GoldMatrix) -> Result<()> {
    if pred.doc_ids != gold.doc_ids || pred.codes != gold.codes {
        return Err(Error::invalid("predictions and gold labels are not aligned"));
    }
    Ok(())
}

fn cohort_columns(codes: &[String], cohort: &[String]) -> Result<Vec<usize>> {
    cohort
        .iter()
        .map(|c| {
            codes
                .iter()
                .position(|x| x == c)
                .ok_or_else(|| Error::UnknownCode(c.clone()))
        })
        .collect()
}

pub fn confusion_counts(pred: &PredictionMatrix, gold: &GoldMatrix, cohort: &[String]) -> Result<ConfusionTable> {
    check_aligned(pred, gold)?;
    let cols = cohort_columns(&pred.codes, cohort)?;
    let mut table = ConfusionTable::default();
    for (&l, code) in cols.iter().zip(cohort) {
        let mut c = Counts::default();
        for i in 0..pred.doc_ids.len() {
            match (pred.decision(i, l), gold.labels[[i, l]]) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        table.pooled += c;
        table.per_code.insert(code.clone(), c);
    }
    Ok(table)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Micro,
    Macro,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and F1 as fractions in `[0, 1]`.
pub fn prf1_fraction(c: &Counts) -> Prf1 {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf1 {
        precision,
        recall,
        f1,
    }
}

/// Percentages; an empty table gives zeros.
pub fn prf1(table: &ConfusionTable, mode: Mode) -> Prf1 {
    let frac = match mode {
        Mode::Micro => prf1_fraction(&table.pooled),
        Mode::Macro => {
            let n = table.per_code.len();
            if n == 0 {
                Prf1::default()
            } else {
                let mut acc = Prf1::default();
                for c in table.per_code.values() {
                    let p = prf1_fraction(c);
                    acc.precision += p.precision;
                    acc.recall += p.recall;
                    acc.f1 += p.f1;
                }
                Prf1 {
                    precision: acc.precision / n as f64,
                    recall: acc.recall / n as f64,
                    f1: acc.f1 / n as f64,
                }
            }
        }
    };
    Prf1 {
        precision: 100.0 * frac.precision,
        recall: 100.0 * frac.recall,
        f1: 100.0 * frac.f1,
    }
}

/// Mann-Whitney AUC in percent; tied scores share average ranks, which gives
/// tied positive/negative pairs half credit. `None` unless both classes occur.
pub fn binary_auc(scores: &[f64], gold: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), gold.len(), "scores and labels differ in length");
    let n_pos = gold.iter().filter(|&&g| g).count();
    let n_neg = gold.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum, so tied ranks stay integral.
    let mut rank2_pos: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let rank2 = (i + 1 + j + 1) as u128;
        for &k in &order[i..=j] {
            if gold[k] {
                rank2_pos += rank2;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    let u2 = rank2_pos - p * (p + 1);
    Some(100.0 * u2 as f64 / (2 * p * n) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucResult {
    pub value: f64,
    /// Codes left out of a macro average for having a single class.
    pub excluded: usize,
}

pub fn auc(pred: &PredictionMatrix, gold: &GoldMatrix, cohort: &[String], mode: Mode) -> Result<AucResult> {
    check_aligned(pred, gold)?;
    let cols = cohort_columns(&pred.codes, cohort)?;
    let n = pred.doc_ids.len();
    match mode {
        Mode::Micro => {
            let mut s = Vec::with_capacity(n * cols.len());
            let mut g = Vec::with_capacity(n * cols.len());
            for &l in &cols {
                for i in 0..n {
                    s.push(pred.scores[[i, l]]);
                    g.push(gold.labels[[i, l]]);
                }
            }
            binary_auc(&s, &g)
                .map(|value| AucResult { value, excluded: 0 })
                .ok_or_else(|| Error::invalid("pooled AUC needs both classes"))
        }
        Mode::Macro => {
            let per: Vec<Option<f64>> = cols
                .par_iter()
                .map(|&l| {
                    let s: Vec<f64> = pred.scores.column(l).to_vec();
                    let g: Vec<bool> = gold.labels.column(l).to_vec();
                    binary_auc(&s, &g)
                })
                .collect();
            let vals: Vec<f64> = per.iter().flatten().copied().collect();
            if vals.is_empty() {
                return Err(Error::invalid("no code in the cohort has both classes"));
            }
            Ok(AucResult {
                value: vals.iter().sum::<f64>() / vals.len() as f64,
                excluded: per.len() - vals.len(),
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CohortName {
    ZeroShot,
    FewShot,
    Frequent,
    Seen,
    All,
}

impl CohortName {
    pub const ALL: [CohortName; 5] = [
        CohortName::ZeroShot,
        CohortName::FewShot,
        CohortName::Frequent,
        CohortName::Seen,
        CohortName::All,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CohortName::ZeroShot => "zero-shot",
            CohortName::FewShot => "few-shot",
            CohortName::Frequent => "frequent",
            CohortName::Seen => "seen",
            CohortName::All => "all",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    fn contains(self, cohort: Cohort) -> bool {
        match self {
            CohortName::ZeroShot => cohort == Cohort::ZeroShot,
            CohortName::FewShot => cohort == Cohort::FewShot,
            CohortName::Frequent => cohort == Cohort::Frequent,
            CohortName::Seen => cohort != Cohort::ZeroShot,
            CohortName::All => true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when undefined (a single class throughout).
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortReport {
    pub cohort: CohortName,
    pub codes: Vec<String>,
    /// No evaluable code in this cohort; metrics are zero.
    pub empty: bool,
    pub micro: Metrics,
    pub macro_: Metrics,
    pub macro_auc_excluded: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cohorts: Vec<CohortReport>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: f64,
    /// A code is evaluated only with more than this many positives in the split.
    pub min_examples: usize,
    pub cohorts: Vec<CohortName>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            min_examples: 5,
            cohorts: CohortName::ALL.to_vec(),
        }
    }
}

/// Metrics for one cohort over an explicit code list.
pub fn cohort_report(
    pred: &PredictionMatrix,
    gold: &GoldMatrix,
    cohort: CohortName,
    codes: Vec<String>,
) -> Result<CohortReport> {
    if codes.is_empty() {
        return Ok(CohortReport {
            cohort,
            codes,
            empty: true,
            micro: Metrics::default(),
            macro_: Metrics::default(),
            macro_auc_excluded: 0,
        });
    }
    let table = confusion_counts(pred, gold, &codes)?;
    let mi = prf1(&table, Mode::Micro);
    let ma = prf1(&table, Mode::Macro);
    let micro_auc = auc(pred, gold, &codes, Mode::Micro).ok().map(|a| a.value);
    let macro_auc = auc(pred, gold, &codes, Mode::Macro).ok();
    Ok(CohortReport {
        cohort,
        empty: false,
        micro: Metrics {
            precision: mi.precision,
            recall: mi.recall,
            f1: mi.f1,
            auc: micro_auc,
        },
        macro_: Metrics {
            precision: ma.precision,
            recall: ma.recall,
            f1: ma.f1,
            auc: macro_auc.map(|a| a.value),
        },
        macro_auc_excluded: macro_auc.map(|a| a.excluded).unwrap_or(codes.len()),
        codes,
    })
}

/// Report over the configured cohorts; membership follows training counts
/// in `hierarchy`, evaluability follows positives in `docs`.
pub fn evaluate(
    pred: &PredictionMatrix,
    docs: &[Document],
    hierarchy: &LabelHierarchy,
    config: &EvalConfig,
) -> Result<MetricsReport> {
    let gold = GoldMatrix::from_documents(docs, &pred.codes);
    check_aligned(pred, &gold)?;
    let evaluable = hierarchy.evaluable_codes(&Splits::label_counts(docs), config.min_examples);
    let mut report = MetricsReport::default();
    for &name in &config.cohorts {
        let codes: Vec<String> = evaluable
            .iter()
            .filter(|c| hierarchy.cohort(c).map(|k| name.contains(k)).unwrap_or(false))
            .filter(|c| pred.codes.contains(c))
            .cloned()
            .collect();
        report.cohorts.push(cohort_report(pred, &gold, name, codes)?);
    }
    report
        .metadata
        .insert("threshold".into(), config.threshold.to_string());
    report
        .metadata
        .insert("predictions_sha256".into(), pred.digest());
    Ok(report)
}

impl MetricsReport {
    pub fn cohort(&self, name: CohortName) -> Option<&CohortReport> {
        self.cohorts.iter().find(|c| c.cohort == name)
    }

    pub fn render(&self) -> String {
        let rows: Vec<(String, usize, bool, [Option<f64>; 8])> = self
            .cohorts
            .iter()
            .map(|c| {
                let v = [
                    Some(c.micro.precision),
                    Some(c.micro.recall),
                    Some(c.micro.f1),
                    c.micro.auc,
                    Some(c.macro_.precision),
                    Some(c.macro_.recall),
                    Some(c.macro_.f1),
                    c.macro_.auc,
                ];
                (c.cohort.name().to_string(), c.codes.len(), c.empty, v)
            })
            .collect();
        render_rows(&rows, |x| match x {
            Some(v) => format!("{v:.2}"),
            None => "-".into(),
        })
    }
}

fn render_rows<T>(rows: &[(String, usize, bool, [T; 8])], fmt: impl Fn(&T) -> String) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:>5} | {:>15} {:>15} {:>15} {:>15} | {:>15} {:>15} {:>15} {:>15}",
        "cohort", "codes", "micro P", "micro R", "micro F1", "micro AUC", "macro P", "macro R", "macro F1", "macro AUC"
    );
    for (name, n, empty, vals) in rows {
        let _ = write!(out, "{name:<10} {n:>5} |");
        if *empty {
            let _ = writeln!(out, " (no evaluable codes)");
            continue;
        }
        for (i, v) in vals.iter().enumerate() {
            if i == 4 {
                out.push_str(" |");
            }
            let _ = write!(out, " {:>15}", fmt(v));
        }
        out.push('\n');
    }
    out
}

/// Mean and sample standard deviation of one metric across seeds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub sd: f64,
    /// Seeds where the metric was defined.
    pub n: usize,
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, sd, n }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub cohort: CohortName,
    pub codes: usize,
    pub empty: bool,
    /// Micro P, R, F1, AUC then macro P, R, F1, AUC.
    pub values: [Spread; 8],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seeds: usize,
    pub cohorts: Vec<CohortSummary>,
}

/// Aggregates per-seed reports that share a cohort layout.
pub fn summarize(reports: &[MetricsReport]) -> Result<SeedSummary> {
    let Some(first) = reports.first() else {
        return Err(Error::invalid("no reports to summarize"));
    };
    let mut cohorts = Vec::new();
    for (k, c0) in first.cohorts.iter().enumerate() {
        let mut cols: [Vec<f64>; 8] = Default::default();
        for r in reports {
            let c = r
                .cohorts
                .get(k)
                .filter(|c| c.cohort == c0.cohort)
                .ok_or_else(|| Error::invalid("reports have different cohorts"))?;
            if c.empty {
                continue;
            }
            let vals = [
                Some(c.micro.precision),
                Some(c.micro.recall),
                Some(c.micro.f1),
                c.micro.auc,
                Some(c.macro_.precision),
                Some(c.macro_.recall),
                Some(c.macro_.f1),
                c.macro_.auc,
            ];
            for (col, v) in cols.iter_mut().zip(vals) {
                if let Some(v) = v {
                    col.push(v);
                }
            }
        }
        cohorts.push(CohortSummary {
            cohort: c0.cohort,
            codes: c0.codes.len(),
            empty: cols[0].is_empty(),
            values: cols.map(|c| Spread::of(&c)),
        });
    }
    Ok(SeedSummary {
        seeds: reports.len(),
        cohorts,
    })
}

impl SeedSummary {
    pub fn cohort(&self, name: CohortName) -> Option<&CohortSummary> {
        self.cohorts.iter().find(|c| c.cohort == name)
    }

    pub fn render(&self) -> String {
        let rows: Vec<(String, usize, bool, [Spread; 8])> = self
            .cohorts
            .iter()
            .map(|c| (c.cohort.name().to_string(), c.codes, c.empty, c.values))
            .collect();
        let mut out = format!("mean ± sd over {} seeds\n", self.seeds);
        out.push_str(&render_rows(&rows, |s| {
            if s.n == 0 {
                "-".into()
            } else {
                format!("{:.2} ± {:.2}", s.mean, s.sd)
            }
        }));
        out
    }
}
