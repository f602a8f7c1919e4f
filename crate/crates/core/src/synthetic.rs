//! Seeded synthetic corpora with a known label tree, topic vocabulary and
//! word vectors, for desk-scale runs without restricted clinical data.
//!
//! Leaves come in sibling pairs under chapter roots. Both members of a pair
//! share `sibling_shared_words` topic words; the rest of each topic list is
//! unique to the code. Word vectors are built from chapter, pair and code
//! directions so that description embeddings make the pair partner the
//! nearest sibling.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::Array1;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{write_corpus, EmbeddingTable, RawRecord};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub chapters: usize,
    pub pairs_per_chapter: usize,
    pub topic_words_per_code: usize,
    pub sibling_shared_words: usize,
    /// Description words drawn from the code's unique topic words.
    pub description_unique_words: usize,
    /// Description words drawn from the shared topic words.
    pub description_shared_words: usize,
    pub filler_words: usize,
    pub dim: usize,
    pub train_docs: usize,
    pub valid_docs: usize,
    pub test_docs: usize,
    /// Codes (one per pair, at most one per chapter-pair) never seen in training.
    pub zero_shot_codes: usize,
    /// Codes with between one and five training documents.
    pub few_shot_codes: usize,
    pub min_labels_per_doc: usize,
    pub max_labels_per_doc: usize,
    /// Topic-word occurrences emitted per assigned label.
    pub topic_occurrences: usize,
    pub doc_length: usize,
    /// Topic words of random codes mentioned per document without the label.
    pub background_mentions: usize,
    /// Probability that a valid/test document also carries a zero-shot code.
    pub zero_shot_rate: f64,
    /// Probability that a valid/test document also carries a few-shot code.
    pub few_shot_rate: f64,
    /// Zipf exponent of the frequent-code distribution.
    pub zipf_exponent: f64,
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            chapters: 6,
            pairs_per_chapter: 3,
            topic_words_per_code: 8,
            sibling_shared_words: 4,
            description_unique_words: 2,
            description_shared_words: 1,
            filler_words: 300,
            dim: 32,
            train_docs: 1600,
            valid_docs: 200,
            test_docs: 200,
            zero_shot_codes: 6,
            few_shot_codes: 4,
            min_labels_per_doc: 1,
            max_labels_per_doc: 3,
            topic_occurrences: 6,
            doc_length: 48,
            background_mentions: 2,
            zero_shot_rate: 0.4,
            few_shot_rate: 0.15,
            zipf_exponent: 0.6,
            noise: 0.35,
        }
    }
}

/// One leaf code of the generated tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCode {
    pub code: String,
    pub chapter: usize,
    pub pair: usize,
    pub sibling: String,
    pub topic_words: Vec<String>,
    pub description: Vec<String>,
    pub zero_shot: bool,
    pub few_shot: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    pub seed: u64,
    /// `(code, parent, description)` in file order.
    pub hierarchy: Vec<(String, Option<String>, String)>,
    pub codes: Vec<SyntheticCode>,
    pub records: Vec<RawRecord>,
    pub embeddings: EmbeddingTable,
}

impl SyntheticCorpus {
    pub fn code(&self, code: &str) -> Option<&SyntheticCode> {
        self.codes.iter().find(|c| c.code == code)
    }

    pub fn hierarchy_text(&self) -> String {
        let mut out = String::new();
        for (code, parent, desc) in &self.hierarchy {
            out.push_str(code);
            out.push('\t');
            out.push_str(parent.as_deref().unwrap_or(""));
            out.push('\t');
            out.push_str(desc);
            out.push('\n');
        }
        out
    }

    /// Writes `hierarchy.tsv`, `corpus.jsonl` and `embeddings.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<SyntheticPaths> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = SyntheticPaths::in_dir(dir);
        std::fs::write(&paths.hierarchy, self.hierarchy_text())
            .map_err(|e| Error::io(&paths.hierarchy, e))?;
        write_corpus(&paths.corpus, &self.records)?;
        self.embeddings.write(&paths.embeddings)?;
        Ok(paths)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticPaths {
    pub hierarchy: std::path::PathBuf,
    pub corpus: std::path::PathBuf,
    pub embeddings: std::path::PathBuf,
}

impl SyntheticPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            hierarchy: dir.join("hierarchy.tsv"),
            corpus: dir.join("corpus.jsonl"),
            embeddings: dir.join("embeddings.txt"),
        }
    }
}

fn unit<R: Rng>(dim: usize, rng: &mut R) -> Array1<f64> {
    let v: Array1<f64> = (0..dim).map(|_| -> f64 { StandardNormal.sample(rng) }).collect();
    let n = v.dot(&v).sqrt();
    v / n
}

fn noise<R: Rng>(dim: usize, scale: f64, rng: &mut R) -> Array1<f64> {
    (0..dim)
        .map(|_| { let x: f64 = StandardNormal.sample(rng); scale * x / (dim as f64).sqrt() })
        .collect()
}

pub fn generate_synthetic_corpus(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticCorpus> {
    let leaves = spec.chapters * spec.pairs_per_chapter * 2;
    if leaves == 0 {
        return Err(Error::invalid("synthetic tree has no leaf codes"));
    }
    if spec.zero_shot_codes > spec.chapters * spec.pairs_per_chapter {
        return Err(Error::invalid("at most one zero-shot code per sibling pair"));
    }
    if spec.zero_shot_codes + spec.few_shot_codes >= leaves {
        return Err(Error::invalid("synthetic spec leaves zero seen codes"));
    }
    if spec.sibling_shared_words > spec.topic_words_per_code {
        return Err(Error::invalid("shared words exceed topic words"));
    }
    if spec.min_labels_per_doc == 0 || spec.max_labels_per_doc < spec.min_labels_per_doc {
        return Err(Error::invalid("labels per document range is empty"));
    }
    let unique_words = spec.topic_words_per_code - spec.sibling_shared_words;
    if spec.description_unique_words > unique_words
        || spec.description_shared_words > spec.sibling_shared_words
        || spec.description_unique_words + spec.description_shared_words == 0
    {
        return Err(Error::invalid("description word counts exceed the topic lists"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = spec.dim;
    let mut vectors: Vec<(String, Vec<f64>)> = Vec::new();
    let mut hierarchy = Vec::new();
    let mut codes = Vec::new();

    for c in 0..spec.chapters {
        let chapter_dir = unit(dim, &mut rng);
        let chapter_words: Vec<String> = (0..3).map(|i| format!("ch{c}gen{i}")).collect();
        for w in &chapter_words {
            let v = &chapter_dir + &noise(dim, spec.noise, &mut rng);
            vectors.push((w.clone(), v.to_vec()));
        }
        let root = format!("C{c}");
        hierarchy.push((root.clone(), None, chapter_words.join(" ")));
        for p in 0..spec.pairs_per_chapter {
            let pair_dir = unit(dim, &mut rng);
            let shared: Vec<String> = (0..spec.sibling_shared_words)
                .map(|i| format!("ch{c}pr{p}sh{i}"))
                .collect();
            for w in &shared {
                let v = 0.5 * &chapter_dir + &pair_dir + noise(dim, spec.noise, &mut rng);
                vectors.push((w.clone(), v.to_vec()));
            }
            for m in 0..2 {
                let code_dir = unit(dim, &mut rng);
                let uniq: Vec<String> = (0..unique_words)
                    .map(|i| format!("ch{c}pr{p}cd{m}uq{i}"))
                    .collect();
                for w in &uniq {
                    let v = 0.5 * &chapter_dir
                        + 0.6 * &pair_dir
                        + &code_dir
                        + noise(dim, spec.noise, &mut rng);
                    vectors.push((w.clone(), v.to_vec()));
                }
                let code = format!("C{c}.{p}{m}");
                let sibling = format!("C{c}.{p}{}", 1 - m);
                let mut description: Vec<String> =
                    uniq[..spec.description_unique_words].to_vec();
                description.extend_from_slice(&shared[..spec.description_shared_words]);
                let mut topic_words = shared.clone();
                topic_words.extend(uniq);
                hierarchy.push((code.clone(), Some(root.clone()), description.join(" ")));
                codes.push(SyntheticCode {
                    code,
                    chapter: c,
                    pair: p,
                    sibling,
                    topic_words,
                    description,
                    zero_shot: false,
                    few_shot: false,
                });
            }
        }
    }
    let fillers: Vec<String> = (0..spec.filler_words).map(|i| format!("fill{i}")).collect();
    for w in &fillers {
        vectors.push((w.clone(), noise(dim, 1.0, &mut rng).to_vec()));
    }

    // Zero-shot: one member of distinct pairs, spread across chapters first.
    let mut pair_slots: Vec<(usize, usize)> = (0..spec.pairs_per_chapter)
        .flat_map(|p| (0..spec.chapters).map(move |c| (c, p)))
        .collect();
    pair_slots.truncate(spec.zero_shot_codes);
    for (c, p) in pair_slots {
        let member = rng.random_range(0..2);
        let idx = (c * spec.pairs_per_chapter + p) * 2 + member;
        codes[idx].zero_shot = true;
    }
    let mut candidates: Vec<usize> = codes
        .iter()
        .enumerate()
        .filter(|(_, c)| !c.zero_shot)
        .map(|(i, _)| i)
        .collect();
    candidates.shuffle(&mut rng);
    for &i in candidates.iter().take(spec.few_shot_codes) {
        codes[i].few_shot = true;
    }

    let frequent: Vec<usize> = (0..codes.len())
        .filter(|&i| !codes[i].zero_shot && !codes[i].few_shot)
        .collect();
    let mut ranks: Vec<usize> = (0..frequent.len()).collect();
    ranks.shuffle(&mut rng);
    let weights: Vec<f64> = ranks
        .iter()
        .map(|&r| 1.0 / ((r + 1) as f64).powf(spec.zipf_exponent))
        .collect();
    let zero_shot: Vec<usize> = (0..codes.len()).filter(|&i| codes[i].zero_shot).collect();
    let few_shot: Vec<usize> = (0..codes.len()).filter(|&i| codes[i].few_shot).collect();

    let sample_frequent = |rng: &mut ChaCha8Rng| -> usize {
        let total: f64 = weights.iter().sum();
        let mut x = rng.random::<f64>() * total;
        for (k, w) in weights.iter().enumerate() {
            if x < *w {
                return frequent[k];
            }
            x -= w;
        }
        *frequent.last().expect("frequent codes exist")
    };

    // Few-shot training documents: each few-shot code gets 1..=5 of them.
    let few_train: Vec<usize> = few_shot.iter().map(|_| rng.random_range(1..=5)).collect();
    let mut few_slots: Vec<Option<usize>> = vec![None; spec.train_docs];
    {
        let mut positions: Vec<usize> = (0..spec.train_docs).collect();
        positions.shuffle(&mut rng);
        let mut it = positions.into_iter();
        for (k, &n) in few_train.iter().enumerate() {
            for _ in 0..n {
                if let Some(pos) = it.next() {
                    few_slots[pos] = Some(few_shot[k]);
                }
            }
        }
    }

    let mut records = Vec::new();
    let splits = [
        ("train", spec.train_docs),
        ("valid", spec.valid_docs),
        ("test", spec.test_docs),
    ];
    let mut doc_no = 0usize;
    for (split, n) in splits {
        for i in 0..n {
            let n_labels = rng.random_range(spec.min_labels_per_doc..=spec.max_labels_per_doc);
            let mut labels: BTreeSet<usize> = BTreeSet::new();
            if split == "train" {
                if let Some(f) = few_slots[i] {
                    labels.insert(f);
                }
            } else {
                if !zero_shot.is_empty() && rng.random::<f64>() < spec.zero_shot_rate {
                    labels.insert(*zero_shot.choose(&mut rng).expect("nonempty"));
                }
                if !few_shot.is_empty() && rng.random::<f64>() < spec.few_shot_rate {
                    labels.insert(*few_shot.choose(&mut rng).expect("nonempty"));
                }
            }
            let mut guard = 0;
            while labels.len() < n_labels && guard < 100 {
                labels.insert(sample_frequent(&mut rng));
                guard += 1;
            }
            let mut words: Vec<&str> = Vec::new();
            for &l in &labels {
                for _ in 0..spec.topic_occurrences {
                    words.push(codes[l].topic_words.choose(&mut rng).expect("topic words"));
                }
            }
            for _ in 0..spec.background_mentions {
                let code = codes.choose(&mut rng).expect("codes exist");
                words.push(code.topic_words.choose(&mut rng).expect("topic words"));
            }
            while words.len() < spec.doc_length.max(words.len()) {
                words.push(fillers.choose(&mut rng).map(String::as_str).unwrap_or("fill"));
                if words.len() >= spec.doc_length {
                    break;
                }
            }
            words.shuffle(&mut rng);
            records.push(RawRecord {
                id: format!("doc{doc_no:05}"),
                text: words.join(" "),
                labels: labels.iter().map(|&l| codes[l].code.clone()).collect(),
                group: None,
                split: Some(split.to_string()),
            });
            doc_no += 1;
        }
    }

    let vectors = vectors
        .into_iter()
        .map(|(w, v)| (w, v.into_iter().map(|x| (x * 1e6).round() / 1e6).collect()))
        .collect();
    let embeddings = EmbeddingTable::from_rows(dim, vectors)?;

    Ok(SyntheticCorpus {
        spec: spec.clone(),
        seed,
        hierarchy,
        codes,
        records,
        embeddings,
    })
}
