//! Documents, vocabulary, word vectors, splits and keyword extraction.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{cosine, LabelHierarchy};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Lowercases, drops non-alphanumeric characters, splits on whitespace and
/// discards tokens shorter than two characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| w.chars().count() >= 2)
        .collect()
}

/// Vocabulary plus one `d`-dimensional vector per token.
///
/// Row 0 is padding (kept at zero), row 1 the shared unknown vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    matrix: Array2<f64>,
}

impl EmbeddingTable {
    pub fn from_rows(dim: usize, rows: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut matrix = Array2::zeros((rows.len() + 2, dim));
        for (i, (tok, vec)) in rows.into_iter().enumerate() {
            if vec.len() != dim {
                return Err(Error::format(
                    Some(i + 2),
                    format!("token `{tok}` has {} values, expected {dim}", vec.len()),
                ));
            }
            if vec.iter().any(|x| !x.is_finite()) {
                return Err(Error::format(Some(i + 2), format!("token `{tok}` has non-finite values")));
            }
            matrix.row_mut(i + 2).assign(&Array1::from(vec));
            tokens.push(tok);
        }
        let mut table = EmbeddingTable {
            tokens,
            index: HashMap::new(),
            matrix,
        };
        table.rebuild_index()?;
        Ok(table)
    }

    fn rebuild_index(&mut self) -> Result<()> {
        self.index.clear();
        for (i, t) in self.tokens.iter().enumerate() {
            if self.index.insert(t.clone(), i).is_some() {
                return Err(Error::format(None, format!("duplicate token `{t}` in embedding table")));
            }
        }
        Ok(())
    }

    /// Restores the token index after deserialization.
    pub fn reindex(mut self) -> Result<Self> {
        self.rebuild_index()?;
        Ok(self)
    }

    /// Reads the text word-vector format: a `count dim` header, then
    /// `token v_1 … v_d` per line.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::format(Some(1), "empty embedding file"))?;
        let mut head = header.split_whitespace();
        let parse_usize = |s: Option<&str>| -> Result<usize> {
            s.and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::format(Some(1), "header must be `count dim`"))
        };
        let count = parse_usize(head.next())?;
        let dim = parse_usize(head.next())?;
        let mut rows = Vec::with_capacity(count);
        for (i, line) in lines {
            let mut parts = line.split_whitespace();
            let tok = parts.next().expect("non-empty line").to_string();
            let vals = parts
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::format(Some(i + 1), format!("bad number: {e}")))?;
            if vals.len() != dim {
                return Err(Error::format(
                    Some(i + 1),
                    format!("token `{tok}` has {} values, expected {dim}", vals.len()),
                ));
            }
            rows.push((tok, vals));
        }
        if rows.len() != count {
            return Err(Error::format(
                Some(1),
                format!("header declares {count} vectors, found {}", rows.len()),
            ));
        }
        Self::from_rows(dim, rows)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!("{} {}\n", self.tokens.len() - 2, self.dim()));
        for (tok, row) in self.tokens.iter().zip(self.matrix.rows()).skip(2) {
            out.push_str(tok);
            for x in row {
                out.push(' ');
                out.push_str(&format!("{x:.6}"));
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    /// Replaces the vectors, e.g. with embeddings fine-tuned by the extractor.
    pub fn with_matrix(&self, matrix: Array2<f64>) -> Result<Self> {
        if matrix.dim() != self.matrix.dim() {
            return Err(Error::invalid(format!(
                "embedding matrix shape {:?} does not match vocabulary {:?}",
                matrix.dim(),
                self.matrix.dim()
            )));
        }
        Ok(EmbeddingTable {
            tokens: self.tokens.clone(),
            index: self.index.clone(),
            matrix,
        })
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn lookup(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn lookup_all(&self, words: &[String]) -> Vec<usize> {
        words.iter().map(|w| self.lookup(w)).collect()
    }

    pub fn vector(&self, id: usize) -> ndarray::ArrayView1<'_, f64> {
        self.matrix.row(id)
    }

    pub fn mean_of(&self, ids: &[usize]) -> Array1<f64> {
        let mut acc = Array1::zeros(self.dim());
        for &id in ids {
            acc += &self.matrix.row(id);
        }
        acc / ids.len().max(1) as f64
    }

    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

/// One input record of a corpus file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: String,
    pub text: String,
    pub labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    /// Fixed split assignment (`train`, `valid` or `test`); random when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

pub fn parse_corpus(text: &str) -> Result<Vec<RawRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord = serde_json::from_str(line)
            .map_err(|e| Error::format(Some(i + 1), format!("bad corpus record: {e}")))?;
        if let Some(s) = &rec.split {
            if SplitName::parse(s).is_none() {
                return Err(Error::format(Some(i + 1), format!("unknown split `{s}`")));
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_corpus(path: &Path) -> Result<Vec<RawRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text)
}

pub fn write_corpus(path: &Path, records: &[RawRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    /// Vocabulary ids; never empty.
    pub tokens: Vec<usize>,
    pub labels: BTreeSet<String>,
    #[serde(default)]
    pub group: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub dropped_labels: usize,
    pub rejected_records: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

impl SplitName {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Self::Train),
            "valid" | "dev" => Some(Self::Valid),
            "test" => Some(Self::Test),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Valid => "valid",
            Self::Test => "test",
        }
    }
}

/// Target fractions for train/valid/test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<Document>,
    pub valid: Vec<Document>,
    pub test: Vec<Document>,
}

impl Splits {
    pub fn get(&self, name: SplitName) -> &[Document] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Valid => &self.valid,
            SplitName::Test => &self.test,
        }
    }

    /// Positive-document count per code.
    pub fn label_counts(docs: &[Document]) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for d in docs {
            for l in &d.labels {
                *counts.entry(l.clone()).or_insert(0) += 1;
            }
        }
        counts
    }
}

/// Tokenizes records into documents, dropping labels outside the hierarchy
/// and rejecting records with no tokens left. Runs in parallel; output keeps
/// input order.
pub fn ingest(
    records: &[RawRecord],
    hierarchy: &LabelHierarchy,
    table: &EmbeddingTable,
    max_len: usize,
) -> (Vec<Option<Document>>, IngestStats) {
    use rayon::prelude::*;
    let converted: Vec<(Option<Document>, usize)> = records
        .par_iter()
        .map(|r| {
            let mut words = tokenize(&r.text);
            words.truncate(max_len);
            let mut dropped = 0;
            let labels: BTreeSet<String> = r
                .labels
                .iter()
                .filter(|l| {
                    let keep = hierarchy.contains(l);
                    if !keep {
                        dropped += 1;
                    }
                    keep
                })
                .cloned()
                .collect();
            if words.is_empty() {
                return (None, dropped);
            }
            let doc = Document {
                doc_id: r.id.clone(),
                tokens: table.lookup_all(&words),
                labels,
                group: r.group.clone(),
            };
            (Some(doc), dropped)
        })
        .collect();
    let mut stats = IngestStats::default();
    let docs = converted
        .into_iter()
        .map(|(d, dropped)| {
            stats.dropped_labels += dropped;
            if d.is_none() {
                stats.rejected_records += 1;
            }
            d
        })
        .collect();
    if stats.dropped_labels > 0 {
        log::warn!("dropped {} labels outside the hierarchy", stats.dropped_labels);
    }
    (docs, stats)
}

/// Partitions ingested records into train/valid/test.
///
/// Records carrying a `split` field keep it. The rest are shuffled by group
/// (each ungrouped record is its own group) and dealt into splits until each
/// reaches its target size, so a group never spans splits.
pub fn build_splits(
    records: &[RawRecord],
    hierarchy: &LabelHierarchy,
    table: &EmbeddingTable,
    spec: SplitSpec,
    max_len: usize,
    seed: u64,
) -> Result<(Splits, IngestStats)> {
    let (docs, stats) = ingest(records, hierarchy, table, max_len);
    let mut splits = Splits::default();
    let mut units: BTreeMap<String, Vec<Document>> = BTreeMap::new();
    let mut unit_order: Vec<String> = Vec::new();
    for (rec, doc) in records.iter().zip(docs) {
        let Some(doc) = doc else { continue };
        if let Some(name) = rec.split.as_deref().and_then(SplitName::parse) {
            match name {
                SplitName::Train => splits.train.push(doc),
                SplitName::Valid => splits.valid.push(doc),
                SplitName::Test => splits.test.push(doc),
            }
            continue;
        }
        let key = match &doc.group {
            Some(g) => format!("g:{g}"),
            None => format!("d:{}", doc.doc_id),
        };
        if !units.contains_key(&key) {
            unit_order.push(key.clone());
        }
        units.entry(key).or_default().push(doc);
    }

    let remaining: usize = units.values().map(Vec::len).sum();
    if remaining > 0 {
        let total = spec.train + spec.valid + spec.test;
        if !(total > 0.0) || spec.train < 0.0 || spec.valid < 0.0 || spec.test < 0.0 {
            return Err(Error::invalid("split fractions must be nonnegative with a positive sum"));
        }
        let n_train = ((spec.train / total) * remaining as f64).round() as usize;
        let n_valid = ((spec.valid / total) * remaining as f64).round() as usize;
        let targets = [n_train, n_valid, remaining.saturating_sub(n_train + n_valid)];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        unit_order.shuffle(&mut rng);
        // Largest groups first, each to the split with the largest deficit.
        unit_order.sort_by_key(|k| std::cmp::Reverse(units[k].len()));
        let mut filled = [0usize; 3];
        for key in unit_order {
            let unit = units.remove(&key).expect("unit present");
            let deficit = |s: usize| targets[s] as isize - filled[s] as isize;
            let slot = (0..3).fold(0, |best, s| if deficit(s) > deficit(best) { s } else { best });
            filled[slot] += unit.len();
            let dst = match slot {
                0 => &mut splits.train,
                1 => &mut splits.valid,
                _ => &mut splits.test,
            };
            dst.extend(unit);
        }
    }
    for (name, docs) in [("train", &splits.train), ("valid", &splits.valid), ("test", &splits.test)] {
        if docs.is_empty() {
            return Err(Error::invalid(format!("split `{name}` is empty")));
        }
    }
    for docs in [&mut splits.train, &mut splits.valid, &mut splits.test] {
        docs.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    }
    Ok((splits, stats))
}

/// Top-k distinct document tokens by cosine similarity to a label embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeywordSet {
    /// `(token id, cosine score)`, scores descending.
    pub entries: Vec<(usize, f64)>,
}

impl KeywordSet {
    pub fn tokens(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|(t, _)| *t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn extract_keywords(
    tokens: &[usize],
    k: usize,
    table: &EmbeddingTable,
    label_vector: &[f64],
) -> Result<KeywordSet> {
    if k == 0 {
        return Err(Error::invalid("keyword count k must be at least 1"));
    }
    if label_vector.iter().all(|x| *x == 0.0) {
        return Err(Error::invalid("label embedding has zero norm"));
    }
    let distinct: BTreeSet<usize> = tokens.iter().copied().filter(|&t| t != PAD).collect();
    let mut scored: Vec<(usize, f64)> = distinct
        .into_iter()
        .map(|t| {
            let v = table.vector(t);
            let score = cosine(v.as_slice().expect("contiguous"), label_vector).clamp(-1.0, 1.0);
            (t, score)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(KeywordSet { entries: scored })
}

/// Keyword sets keyed by `(doc_id, code)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KeywordIndex {
    pub sets: BTreeMap<(String, String), KeywordSet>,
}

impl KeywordIndex {
    pub fn insert(&mut self, doc_id: &str, code: &str, set: KeywordSet) {
        self.sets.insert((doc_id.to_string(), code.to_string()), set);
    }

    pub fn get(&self, doc_id: &str, code: &str) -> Option<&KeywordSet> {
        self.sets.get(&(doc_id.to_string(), code.to_string()))
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    /// The global keyword vocabulary: every token appearing in any set, sorted.
    pub fn vocabulary(&self) -> Vec<usize> {
        let all: BTreeSet<usize> = self.sets.values().flat_map(|s| s.tokens()).collect();
        all.into_iter().collect()
    }

    /// Writes `doc_id, code_id, token, score` rows, tab separated.
    pub fn write(&self, path: &Path, table: &EmbeddingTable) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for ((doc, code), set) in &self.sets {
            for (tok, score) in &set.entries {
                writeln!(w, "{doc}\t{code}\t{}\t{score:.17e}", table.token(*tok))
                    .map_err(|e| Error::io(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, table: &EmbeddingTable) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut idx = KeywordIndex::default();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(Error::format(Some(i + 1), "keyword rows need 4 fields"));
            }
            let score: f64 = f[3]
                .parse()
                .map_err(|e| Error::format(Some(i + 1), format!("bad score: {e}")))?;
            idx.sets
                .entry((f[0].to_string(), f[1].to_string()))
                .or_insert_with(|| KeywordSet { entries: vec![] })
                .entries
                .push((table.lookup(f[2]), score));
        }
        Ok(idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::HierarchyRecord;

    fn table() -> EmbeddingTable {
        EmbeddingTable::from_rows(
            2,
            vec![
                ("aa".into(), vec![1.0, 0.0]),
                ("bb".into(), vec![0.0, 1.0]),
                ("cc".into(), vec![-1.0, 0.0]),
            ],
        )
        .unwrap()
    }

    fn hierarchy() -> LabelHierarchy {
        let recs = vec![
            HierarchyRecord { code: "A".into(), parent: None, description: "aa".into() },
            HierarchyRecord { code: "B".into(), parent: None, description: "bb".into() },
        ];
        LabelHierarchy::from_records(recs, &BTreeMap::new()).unwrap()
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(tokenize("Hello, World! a b2 x-ray"), vec!["hello", "world", "b2", "xray"]);
    }

    #[test]
    fn embedding_file_round_trip() {
        let t = table();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.txt");
        t.write(&p).unwrap();
        let back = EmbeddingTable::read(&p).unwrap();
        assert_eq!(back.tokens(), t.tokens());
        assert_eq!(back.matrix(), t.matrix());
        assert_eq!(back.lookup("zz"), UNK);
        assert!(back.vector(PAD).iter().all(|x| *x == 0.0));
    }

    #[test]
    fn embedding_header_mismatch_rejected() {
        assert!(EmbeddingTable::parse("3 2\naa 1 0\n").is_err());
        assert!(EmbeddingTable::parse("1 2\naa 1\n").is_err());
    }

    #[test]
    fn keywords_identical_direction_scores_one() {
        let t = table();
        let kw = extract_keywords(&[2, 3], 1, &t, &[1.0, 0.0]).unwrap();
        assert_eq!(kw.entries, vec![(2, 1.0)]);
    }

    #[test]
    fn keywords_k_larger_than_distinct_tokens() {
        let t = table();
        let kw = extract_keywords(&[2, 3, 2, 3], 10, &t, &[1.0, 0.0]).unwrap();
        assert_eq!(kw.len(), 2);
    }

    #[test]
    fn keywords_antipodal_order() {
        let t = table();
        let kw = extract_keywords(&[4, 2], 2, &t, &[1.0, 0.0]).unwrap();
        assert_eq!(kw.entries, vec![(2, 1.0), (4, -1.0)]);
    }

    #[test]
    fn keywords_zero_norm_label_rejected() {
        assert!(extract_keywords(&[2], 1, &table(), &[0.0, 0.0]).is_err());
    }

    fn records(n: usize) -> Vec<RawRecord> {
        (0..n)
            .map(|i| RawRecord {
                id: format!("d{i:02}"),
                text: "aa bb".into(),
                labels: vec!["A".into()],
                group: None,
                split: None,
            })
            .collect()
    }

    #[test]
    fn split_sizes_follow_fractions() {
        let spec = SplitSpec { train: 0.8, valid: 0.1, test: 0.1 };
        let (s, _) = build_splits(&records(10), &hierarchy(), &table(), spec, 100, 7).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (8, 1, 1));
    }

    #[test]
    fn groups_never_span_splits() {
        let mut recs = records(4);
        recs[0].group = Some("g".into());
        recs[1].group = Some("g".into());
        let spec = SplitSpec { train: 0.5, valid: 0.25, test: 0.25 };
        for seed in 0..20 {
            let (s, _) = build_splits(&recs, &hierarchy(), &table(), spec, 100, seed).unwrap();
            let holder = [&s.train, &s.valid, &s.test]
                .iter()
                .filter(|docs| docs.iter().any(|d| d.group.as_deref() == Some("g")))
                .count();
            assert_eq!(holder, 1);
        }
    }

    #[test]
    fn missing_labels_field_reports_line() {
        let text = "{\"id\":\"a\",\"text\":\"aa\",\"labels\":[\"A\"]}\n{\"id\":\"b\",\"text\":\"aa\"}\n";
        match parse_corpus(text) {
            Err(Error::Format { line: Some(2), .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_labels_dropped_and_counted() {
        let mut recs = records(3);
        recs[0].labels.push("ZZ".into());
        recs[2].text = "! ?".into();
        let (docs, stats) = ingest(&recs, &hierarchy(), &table(), 100);
        assert_eq!(stats.dropped_labels, 1);
        assert_eq!(stats.rejected_records, 1);
        assert!(docs[2].is_none());
        assert_eq!(docs[0].as_ref().unwrap().labels.len(), 1);
    }

    #[test]
    fn empty_split_is_an_error() {
        let spec = SplitSpec { train: 1.0, valid: 0.0, test: 0.0 };
        assert!(build_splits(&records(3), &hierarchy(), &table(), spec, 100, 0).is_err());
    }
}
