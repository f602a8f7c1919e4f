//! Label tree: descriptions, training counts, cohorts and sibling lookup.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, EmbeddingTable};
use crate::error::{Error, Result};

/// Codes with at most this many training examples form the few-shot cohort.
pub const FEW_SHOT_MAX: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelNode {
    pub code: String,
    pub description: String,
    /// Preprocessed description words; never empty.
    pub description_words: Vec<String>,
    pub parent: Option<String>,
    pub children: Vec<String>,
    pub train_count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cohort {
    ZeroShot,
    FewShot,
    Frequent,
}

/// An immutable label forest with cohort membership derived from training counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelHierarchy {
    /// Codes in file order; a code's position is its label index.
    order: Vec<String>,
    nodes: BTreeMap<String, LabelNode>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    few_shot_max: usize,
}

/// One parsed line of a hierarchy file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HierarchyRecord {
    pub code: String,
    pub parent: Option<String>,
    pub description: String,
}

pub fn parse_hierarchy(text: &str) -> Result<Vec<HierarchyRecord>> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::format(
                Some(lineno),
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let code = fields[0].trim();
        if code.is_empty() {
            return Err(Error::format(Some(lineno), "empty code"));
        }
        let parent = fields[1].trim();
        let description = fields[2].trim();
        if description.is_empty() {
            return Err(Error::format(
                Some(lineno),
                format!("code `{code}` has no description"),
            ));
        }
        records.push(HierarchyRecord {
            code: code.to_string(),
            parent: (!parent.is_empty()).then(|| parent.to_string()),
            description: description.to_string(),
        });
    }
    Ok(records)
}

pub fn load_hierarchy(path: &Path, counts: &BTreeMap<String, usize>) -> Result<LabelHierarchy> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    LabelHierarchy::from_records(parse_hierarchy(&text)?, counts)
}

impl LabelHierarchy {
    pub fn from_records(
        records: Vec<HierarchyRecord>,
        counts: &BTreeMap<String, usize>,
    ) -> Result<Self> {
        let mut nodes = BTreeMap::new();
        let mut order = Vec::with_capacity(records.len());
        for rec in &records {
            let words = tokenize(&rec.description);
            if words.is_empty() {
                return Err(Error::format(
                    None,
                    format!("description of `{}` is empty after preprocessing", rec.code),
                ));
            }
            let node = LabelNode {
                code: rec.code.clone(),
                description: rec.description.clone(),
                description_words: words,
                parent: rec.parent.clone(),
                children: Vec::new(),
                train_count: counts.get(&rec.code).copied().unwrap_or(0),
            };
            if nodes.insert(rec.code.clone(), node).is_some() {
                return Err(Error::format(None, format!("duplicate code `{}`", rec.code)));
            }
            order.push(rec.code.clone());
        }
        for rec in &records {
            if let Some(parent) = &rec.parent {
                if parent == &rec.code {
                    return Err(Error::Structure(format!("code `{parent}` is its own parent")));
                }
                let p = nodes.get_mut(parent).ok_or_else(|| {
                    Error::Structure(format!(
                        "parent `{parent}` of `{}` does not exist",
                        rec.code
                    ))
                })?;
                p.children.push(rec.code.clone());
            }
        }
        let mut h = LabelHierarchy {
            order,
            nodes,
            index: HashMap::new(),
            few_shot_max: FEW_SHOT_MAX,
        };
        h.check_acyclic()?;
        h.rebuild_index();
        Ok(h)
    }

    fn check_acyclic(&self) -> Result<()> {
        for start in &self.order {
            let mut steps = 0;
            let mut cur = self.nodes[start].parent.as_deref();
            while let Some(p) = cur {
                steps += 1;
                if p == start || steps > self.order.len() {
                    return Err(Error::Structure(format!("cycle through code `{start}`")));
                }
                cur = self.nodes[p].parent.as_deref();
            }
        }
        Ok(())
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .order
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i))
            .collect();
    }

    /// Restores lookup tables after deserialization.
    pub fn reindex(mut self) -> Self {
        self.rebuild_index();
        self
    }

    pub fn with_few_shot_max(mut self, max: usize) -> Self {
        self.few_shot_max = max;
        self
    }

    pub fn with_counts(mut self, counts: &BTreeMap<String, usize>) -> Self {
        for (code, node) in self.nodes.iter_mut() {
            node.train_count = counts.get(code).copied().unwrap_or(0);
        }
        self
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn codes(&self) -> &[String] {
        &self.order
    }

    pub fn node(&self, code: &str) -> Result<&LabelNode> {
        self.nodes
            .get(code)
            .ok_or_else(|| Error::UnknownCode(code.to_string()))
    }

    pub fn contains(&self, code: &str) -> bool {
        self.nodes.contains_key(code)
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.index.get(code).copied()
    }

    pub fn train_count(&self, code: &str) -> usize {
        self.nodes.get(code).map(|n| n.train_count).unwrap_or(0)
    }

    pub fn cohort(&self, code: &str) -> Result<Cohort> {
        let n = self.node(code)?.train_count;
        Ok(match n {
            0 => Cohort::ZeroShot,
            n if n <= self.few_shot_max => Cohort::FewShot,
            _ => Cohort::Frequent,
        })
    }

    pub fn is_seen(&self, code: &str) -> bool {
        self.train_count(code) > 0
    }

    /// Seen set: codes with at least one training example.
    pub fn seen(&self) -> BTreeSet<&str> {
        self.filter_codes(|n| n.train_count > 0)
    }

    pub fn zero_shot(&self) -> BTreeSet<&str> {
        self.filter_codes(|n| n.train_count == 0)
    }

    pub fn few_shot(&self) -> BTreeSet<&str> {
        let max = self.few_shot_max;
        self.filter_codes(|n| (1..=max).contains(&n.train_count))
    }

    pub fn frequent(&self) -> BTreeSet<&str> {
        let max = self.few_shot_max;
        self.filter_codes(|n| n.train_count > max)
    }

    fn filter_codes(&self, pred: impl Fn(&LabelNode) -> bool) -> BTreeSet<&str> {
        self.nodes
            .values()
            .filter(|n| pred(n))
            .map(|n| n.code.as_str())
            .collect()
    }

    /// Ancestors of `code`, nearest first.
    pub fn ancestors(&self, code: &str) -> Vec<&str> {
        let mut out = Vec::new();
        let mut cur = self.nodes.get(code).and_then(|n| n.parent.as_deref());
        while let Some(p) = cur {
            out.push(p);
            cur = self.nodes[p].parent.as_deref();
        }
        out
    }

    pub fn roots(&self) -> Vec<&str> {
        self.order
            .iter()
            .filter(|c| self.nodes[c.as_str()].parent.is_none())
            .map(String::as_str)
            .collect()
    }

    /// `code` and all of its descendants.
    pub fn subtree(&self, code: &str) -> Vec<&str> {
        let mut out = Vec::new();
        let mut stack = vec![code];
        while let Some(c) = stack.pop() {
            if let Some(n) = self.nodes.get(c) {
                out.push(n.code.as_str());
                stack.extend(n.children.iter().rev().map(String::as_str));
            }
        }
        out
    }

    /// Undirected tree adjacency: parent plus children.
    pub fn neighbors(&self, code: &str) -> Vec<&str> {
        let Some(n) = self.nodes.get(code) else {
            return Vec::new();
        };
        n.parent
            .as_deref()
            .into_iter()
            .chain(n.children.iter().map(String::as_str))
            .collect()
    }

    /// Mean of the description word vectors of `code`.
    pub fn label_embedding(&self, code: &str, table: &EmbeddingTable) -> Result<Array1<f64>> {
        let node = self.node(code)?;
        if node.description_words.is_empty() {
            return Err(Error::invalid(format!("code `{code}` has an empty description")));
        }
        let ids = table.lookup_all(&node.description_words);
        Ok(table.mean_of(&ids))
    }

    /// Label embeddings for every code, one row per label index.
    pub fn label_embeddings(&self, table: &EmbeddingTable) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((self.len(), table.dim()));
        for (i, code) in self.order.iter().enumerate() {
            out.row_mut(i).assign(&self.label_embedding(code, table)?);
        }
        Ok(out)
    }

    /// The seen code standing in for zero-shot `code`.
    ///
    /// Candidates are the seen children of the parent; failing that, the
    /// seen codes of the first ancestor subtree that holds any. Roots share an
    /// implicit super-root. Within a tier the highest cosine similarity of
    /// label vectors wins, ties going to the smaller code id.
    pub fn nearest_sibling(&self, code: &str, label_vectors: &Array2<f64>) -> Result<String> {
        let node = self.node(code)?;
        let target = label_vectors.row(self.index[code]).to_owned();
        let pick = |cands: Vec<&str>| -> Option<String> {
            let mut best: Option<(f64, &str)> = None;
            for c in cands {
                if c == code || !self.is_seen(c) {
                    continue;
                }
                let cos = cosine(
                    target.as_slice().expect("contiguous"),
                    label_vectors
                        .row(self.index[c])
                        .as_slice()
                        .expect("contiguous"),
                );
                let better = match best {
                    None => true,
                    Some((bc, bcode)) => cos > bc || (cos == bc && c < bcode),
                };
                if better {
                    best = Some((cos, c));
                }
            }
            best.map(|(_, c)| c.to_string())
        };

        let siblings: Vec<&str> = match &node.parent {
            Some(p) => self.nodes[p].children.iter().map(String::as_str).collect(),
            None => self.roots(),
        };
        if let Some(found) = pick(siblings) {
            return Ok(found);
        }
        for anc in self.ancestors(code) {
            if let Some(found) = pick(self.subtree(anc)) {
                return Ok(found);
            }
        }
        pick(self.order.iter().map(String::as_str).collect())
            .ok_or_else(|| Error::NoSibling(code.to_string()))
    }

    /// Codes with more than `min_examples` positives in a split's label counts.
    pub fn evaluable_codes(
        &self,
        split_counts: &BTreeMap<String, usize>,
        min_examples: usize,
    ) -> Vec<String> {
        self.order
            .iter()
            .filter(|c| split_counts.get(c.as_str()).copied().unwrap_or(0) > min_examples)
            .cloned()
            .collect()
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn rec(code: &str, parent: &str, desc: &str) -> HierarchyRecord {
        HierarchyRecord {
            code: code.into(),
            parent: (!parent.is_empty()).then(|| parent.to_string()),
            description: desc.into(),
        }
    }

    fn counts(pairs: &[(&str, usize)]) -> BTreeMap<String, usize> {
        pairs.iter().map(|(c, n)| (c.to_string(), *n)).collect()
    }

    #[test]
    fn chain_cohorts() {
        let recs = vec![rec("root", "", "root node"), rec("A", "root", "alpha"), rec("B", "A", "beta")];
        let h = LabelHierarchy::from_records(recs, &counts(&[("A", 10), ("B", 0)])).unwrap();
        assert!(h.zero_shot().contains("B"));
        assert!(h.seen().contains("A"));
        assert!(h.zero_shot().contains("root"));
        assert_eq!(h.cohort("A").unwrap(), Cohort::Frequent);
    }

    #[test]
    fn five_examples_is_few_shot() {
        let recs = vec![rec("A", "", "alpha"), rec("B", "", "beta")];
        let h = LabelHierarchy::from_records(recs, &counts(&[("A", 5), ("B", 6)])).unwrap();
        assert!(h.few_shot().contains("A"));
        assert_eq!(h.cohort("B").unwrap(), Cohort::Frequent);
    }

    #[test]
    fn self_loop_is_a_cycle_error() {
        let recs = vec![rec("B", "B", "beta")];
        let err = LabelHierarchy::from_records(recs, &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, Error::Structure(_)), "{err}");
    }

    #[test]
    fn longer_cycle_detected() {
        let recs = vec![rec("A", "C", "aa"), rec("B", "A", "bb"), rec("C", "B", "cc")];
        let err = LabelHierarchy::from_records(recs, &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, Error::Structure(_)));
    }

    #[test]
    fn duplicate_and_missing_description_are_format_errors() {
        let recs = vec![rec("A", "", "aa"), rec("A", "", "bb")];
        assert!(matches!(
            LabelHierarchy::from_records(recs, &BTreeMap::new()),
            Err(Error::Format { .. })
        ));
        let err = parse_hierarchy("A\t\t\n").unwrap_err();
        assert!(matches!(err, Error::Format { line: Some(1), .. }));
        let err = parse_hierarchy("A\t\n").unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn missing_parent_is_structural() {
        let err = LabelHierarchy::from_records(vec![rec("A", "Z", "aa")], &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, Error::Structure(_)));
    }

    fn vectors(h: &LabelHierarchy, by_code: &[(&str, [f64; 2])]) -> Array2<f64> {
        let mut m = Array2::zeros((h.len(), 2));
        for (c, v) in by_code {
            m.row_mut(h.index_of(c).unwrap()).assign(&array![v[0], v[1]]);
        }
        m
    }

    #[test]
    fn unique_seen_sibling_is_chosen() {
        let recs = vec![rec("P", "", "pp"), rec("A", "P", "aa"), rec("B", "P", "bb")];
        let h = LabelHierarchy::from_records(recs, &counts(&[("B", 3)])).unwrap();
        let v = vectors(&h, &[("A", [1.0, 0.0]), ("B", [0.0, 1.0]), ("P", [1.0, 1.0])]);
        assert_eq!(h.nearest_sibling("A", &v).unwrap(), "B");
    }

    #[test]
    fn most_similar_sibling_wins() {
        let recs = vec![
            rec("P", "", "pp"),
            rec("A", "P", "aa"),
            rec("B", "P", "bb"),
            rec("C", "P", "cc"),
        ];
        let h = LabelHierarchy::from_records(recs, &counts(&[("B", 3), ("C", 3)])).unwrap();
        let cos09 = [0.9, (1.0f64 - 0.81).sqrt()];
        let cos02 = [0.2, (1.0f64 - 0.04).sqrt()];
        let v = vectors(&h, &[("A", [1.0, 0.0]), ("B", cos02), ("C", cos09)]);
        assert_eq!(h.nearest_sibling("A", &v).unwrap(), "C");
    }

    #[test]
    fn ties_break_lexicographically() {
        let recs = vec![rec("P", "", "pp"), rec("A", "P", "aa"), rec("Z", "P", "zz"), rec("C", "P", "cc")];
        let h = LabelHierarchy::from_records(recs, &counts(&[("Z", 3), ("C", 3)])).unwrap();
        let v = vectors(&h, &[("A", [1.0, 0.0]), ("Z", [1.0, 0.0]), ("C", [2.0, 0.0])]);
        assert_eq!(h.nearest_sibling("A", &v).unwrap(), "C");
    }

    #[test]
    fn no_seen_code_anywhere_is_an_error() {
        let recs = vec![rec("P", "", "pp"), rec("A", "P", "aa")];
        let h = LabelHierarchy::from_records(recs, &BTreeMap::new()).unwrap();
        let v = Array2::ones((2, 2));
        assert!(matches!(h.nearest_sibling("A", &v), Err(Error::NoSibling(_))));
    }

    #[test]
    fn neighbors_are_undirected() {
        let recs = vec![rec("P", "", "pp"), rec("A", "P", "aa"), rec("B", "A", "bb")];
        let h = LabelHierarchy::from_records(recs, &BTreeMap::new()).unwrap();
        assert_eq!(h.neighbors("A"), vec!["P", "B"]);
        assert_eq!(h.neighbors("P"), vec!["A"]);
    }

    #[test]
    fn label_embedding_means_description_vectors() {
        let table = EmbeddingTable::from_rows(
            2,
            vec![("one".into(), vec![1.0, 0.0]), ("two".into(), vec![0.0, 1.0])],
        )
        .unwrap();
        let recs = vec![rec("A", "", "one"), rec("B", "", "one two"), rec("C", "", "two one")];
        let h = LabelHierarchy::from_records(recs, &BTreeMap::new()).unwrap();
        assert_eq!(h.label_embedding("A", &table).unwrap(), array![1.0, 0.0]);
        assert_eq!(h.label_embedding("B", &table).unwrap(), array![0.5, 0.5]);
        assert_eq!(
            h.label_embedding("B", &table).unwrap(),
            h.label_embedding("C", &table).unwrap()
        );
        let zeros = EmbeddingTable::from_rows(2, vec![("one".into(), vec![0.0, 0.0])]).unwrap();
        assert_eq!(h.label_embedding("A", &zeros).unwrap(), array![0.0, 0.0]);
    }
}
