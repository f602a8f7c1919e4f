//! Stage orchestration over an artifact root.
//!
//! Layout under the root:
//!
//! ```text
//! synthetic/                     gen-synthetic
//! prepared/                      prepare
//! extractor/                     train-extractor
//! features/                      dump-features
//! runs/seed-<r>/gan/<method>/    train-gan
//! runs/seed-<r>/synth/<method>/  synthesize
//! runs/seed-<r>/adapted/<method>/ finetune
//! runs/seed-<r>/meta/            train-meta
//! runs/seed-<r>/eval/<row>/      evaluate
//! tables/<row>/                  reproduce-table
//! ```
//!
//! Every directory holds a `manifest.json`; a stage refuses to start until
//! the manifests of its prerequisites exist and match the configuration.

pub mod config;
pub mod manifest;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use config::{derive_seed, hash_json, splitmix64, DataConfig, FeatureConfig, RunConfig};
pub use manifest::{ExperimentManifest, FileHash, Lineage};

use crate::adaptation::{
    build_centroids, finetune_codes, score_features, select_epoch, synthesize_features,
    train_meta_head, AdaptedClassifiers, MetaEmbeddingHead, MetaSample, Selection,
};
use crate::corpus::{build_splits, read_corpus, EmbeddingTable, KeywordIndex, Splits};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, summarize, MetricsReport, PredictionMatrix, SeedSummary};
use crate::extractor::{train_extractor, ExtractorModel, FeatureDump, TrainingLog};
use crate::generation::{
    build_keyword_index, train_gan, Conditioning, GanData, GanLog, GanModel, KeywordVocab, Method,
};
use crate::hierarchy::{parse_hierarchy, LabelHierarchy};
use crate::synthetic::{generate_synthetic_corpus, SyntheticPaths};

/// Environment variable naming the artifact root.
pub const ROOT_ENV: &str = "ZSCODE_ROOT";
pub const DEFAULT_ROOT: &str = "artifacts";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    GenSynthetic,
    Prepare,
    TrainExtractor,
    DumpFeatures,
    TrainGan,
    Synthesize,
    Finetune,
    TrainMeta,
    Evaluate,
    ReproduceTable,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenSynthetic => "gen-synthetic",
            Stage::Prepare => "prepare",
            Stage::TrainExtractor => "train-extractor",
            Stage::DumpFeatures => "dump-features",
            Stage::TrainGan => "train-gan",
            Stage::Synthesize => "synthesize",
            Stage::Finetune => "finetune",
            Stage::TrainMeta => "train-meta",
            Stage::Evaluate => "evaluate",
            Stage::ReproduceTable => "reproduce-table",
        }
    }

    /// Counter used in seed derivation.
    fn id(self) -> u32 {
        self as u32 + 1
    }
}

/// Which classifiers `evaluate` scores with: the extractor's own, the
/// meta-embedding baseline, or classifiers fine-tuned on a GAN's output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Row {
    Baseline,
    Meta,
    Gan(Method),
}

impl Row {
    pub fn name(self) -> &'static str {
        match self {
            Row::Baseline => "baseline",
            Row::Meta => "meta",
            Row::Gan(m) => m.name(),
        }
    }

    pub fn all() -> Vec<Row> {
        let mut rows = vec![Row::Baseline, Row::Meta];
        rows.extend(Method::ALL.into_iter().map(Row::Gan));
        rows
    }
}

impl fmt::Display for Row {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Row {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Row::Baseline),
            "meta" => Ok(Row::Meta),
            other => other.parse::<Method>().map(Row::Gan).map_err(|_| {
                let known: Vec<_> = Row::all().iter().map(|r| r.name()).collect();
                Error::Config(format!("unknown method `{other}`; expected one of {}", known.join(", ")))
            }),
        }
    }
}

/// Output of `prepare`, reloaded by later stages.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub splits: Splits,
    /// Cohorts follow the training split's label counts.
    pub hierarchy: LabelHierarchy,
    pub table: EmbeddingTable,
}

/// Output of `dump-features`.
#[derive(Clone, Debug)]
pub struct Features {
    pub dump: FeatureDump,
    pub keywords: KeywordIndex,
}

/// Multi-seed result of `reproduce-table`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableResult {
    pub row: Row,
    pub reports: Vec<MetricsReport>,
    pub summary: SeedSummary,
}

/// An artifact root plus the configuration every stage runs under.
#[derive(Clone, Debug)]
pub struct Workspace {
    root: PathBuf,
    config: RunConfig,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Collects inputs, outputs and lineage while a stage runs.
struct Record {
    stage: Stage,
    dir: PathBuf,
    config_hash: String,
    seed: u64,
    inputs: Vec<FileHash>,
    outputs: Vec<PathBuf>,
    lineage: Vec<Lineage>,
    started_at: u64,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>, config: RunConfig) -> Self {
        Self {
            root: root.into(),
            config,
        }
    }

    /// Root from [`ROOT_ENV`], falling back to `./artifacts`.
    pub fn from_env(config: RunConfig) -> Self {
        let root = std::env::var_os(ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_ROOT));
        Self::new(root, config)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn synthetic_dir(&self) -> PathBuf {
        self.root.join("synthetic")
    }

    pub fn prepared_dir(&self) -> PathBuf {
        self.root.join("prepared")
    }

    pub fn extractor_dir(&self) -> PathBuf {
        self.root.join("extractor")
    }

    pub fn features_dir(&self) -> PathBuf {
        self.root.join("features")
    }

    pub fn run_dir(&self, replicate: u32) -> PathBuf {
        self.root.join("runs").join(format!("seed-{replicate}"))
    }

    pub fn gan_dir(&self, replicate: u32, method: Method) -> PathBuf {
        self.run_dir(replicate).join("gan").join(method.name())
    }

    pub fn synth_dir(&self, replicate: u32, method: Method) -> PathBuf {
        self.run_dir(replicate).join("synth").join(method.name())
    }

    pub fn adapted_dir(&self, replicate: u32, method: Method) -> PathBuf {
        self.run_dir(replicate).join("adapted").join(method.name())
    }

    pub fn meta_dir(&self, replicate: u32) -> PathBuf {
        self.run_dir(replicate).join("meta")
    }

    pub fn eval_dir(&self, replicate: u32, row: Row) -> PathBuf {
        self.run_dir(replicate).join("eval").join(row.name())
    }

    pub fn table_dir(&self, row: Row) -> PathBuf {
        self.root.join("tables").join(row.name())
    }

    pub fn stage_seed(&self, stage: Stage, replicate: u32) -> u64 {
        derive_seed(self.config.seed, stage.id(), replicate)
    }

    fn uses_synthetic(&self) -> bool {
        let d = &self.config.data;
        d.corpus.is_none() || d.hierarchy.is_none() || d.embeddings.is_none()
    }

    /// Configuration slice a stage depends on, including its upstream.
    fn stage_inputs(&self, stage: Stage, row: Option<Row>) -> serde_json::Value {
        use serde_json::json;
        let c = &self.config;
        match stage {
            Stage::GenSynthetic => json!({ "seed": c.seed, "synthetic": c.synthetic }),
            Stage::Prepare => {
                let upstream = if self.uses_synthetic() {
                    self.stage_inputs(Stage::GenSynthetic, None)
                } else {
                    serde_json::Value::Null
                };
                json!({ "seed": c.seed, "data": c.data, "upstream": upstream })
            }
            Stage::TrainExtractor => json!({
                "extractor": c.extractor,
                "upstream": self.stage_inputs(Stage::Prepare, None),
            }),
            Stage::DumpFeatures => json!({
                "features": c.features,
                "upstream": self.stage_inputs(Stage::TrainExtractor, None),
            }),
            Stage::TrainGan => json!({
                "gan": c.gan,
                "method": row.map(Row::name),
                "upstream": self.stage_inputs(Stage::DumpFeatures, None),
            }),
            Stage::Synthesize => json!({
                "synthesized": c.finetune.synthesized,
                "include_few_shot": c.finetune.include_few_shot,
                "keyword_predictions": c.features.keyword_predictions,
                "upstream": self.stage_inputs(Stage::TrainGan, row),
            }),
            Stage::Finetune => json!({
                "finetune": c.finetune,
                "threshold": c.eval.threshold,
                "upstream": self.stage_inputs(Stage::Synthesize, row),
            }),
            Stage::TrainMeta => json!({
                "meta": c.meta,
                "upstream": self.stage_inputs(Stage::DumpFeatures, None),
            }),
            Stage::Evaluate => {
                let upstream = match row {
                    Some(Row::Gan(_)) => self.stage_inputs(Stage::Finetune, row),
                    Some(Row::Meta) => self.stage_inputs(Stage::TrainMeta, None),
                    _ => self.stage_inputs(Stage::TrainExtractor, None),
                };
                json!({ "eval": c.eval, "row": row.map(Row::name), "upstream": upstream })
            }
            Stage::ReproduceTable => json!({
                "seeds": c.seeds,
                "upstream": self.stage_inputs(Stage::Evaluate, row),
            }),
        }
    }

    /// Hash recorded in, and checked against, a stage's manifest.
    pub fn config_hash(&self, stage: Stage, row: Option<Row>) -> Result<String> {
        hash_json(&self.stage_inputs(stage, row))
    }

    fn begin(&self, stage: Stage, dir: PathBuf, row: Option<Row>, replicate: u32) -> Result<Record> {
        create_dir(&dir)?;
        let stale = dir.join(manifest::MANIFEST_FILE);
        if stale.exists() {
            std::fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
        }
        log::info!("{}: writing {}", stage.name(), dir.display());
        Ok(Record {
            stage,
            dir,
            config_hash: self.config_hash(stage, row)?,
            seed: self.stage_seed(stage, replicate),
            inputs: Vec::new(),
            outputs: Vec::new(),
            lineage: Vec::new(),
            started_at: manifest::now(),
        })
    }

    fn finish(&self, rec: Record) -> Result<ExperimentManifest> {
        let config_path = rec.dir.join("config.toml");
        write_text(&config_path, &self.config.to_toml()?)?;
        let outputs = rec
            .outputs
            .iter()
            .map(|p| manifest::file_hash(&self.root, p))
            .collect::<Result<Vec<_>>>()?;
        let m = ExperimentManifest {
            stage: rec.stage.name().to_string(),
            config_hash: rec.config_hash,
            seed: rec.seed,
            inputs: rec.inputs,
            outputs,
            lineage: rec.lineage,
            started_at: rec.started_at,
            finished_at: manifest::now(),
        };
        m.write(&rec.dir)?;
        Ok(m)
    }

    /// Verifies a finished prerequisite and returns its lineage entry.
    fn require(&self, stage: Stage, dir: &Path, row: Option<Row>) -> Result<Lineage> {
        let hash = self.config_hash(stage, row)?;
        let m = ExperimentManifest::load_verified(&self.root, dir, stage.name(), &hash)?;
        Ok(m.lineage_entry(&self.root, dir))
    }

    /// True when `stage` already finished under the current configuration.
    pub fn is_current(&self, stage: Stage, dir: &Path, row: Option<Row>) -> bool {
        self.require(stage, dir, row).is_ok()
    }

    // ---- gen-synthetic -------------------------------------------------

    pub fn gen_synthetic(&self) -> Result<ExperimentManifest> {
        let mut rec = self.begin(Stage::GenSynthetic, self.synthetic_dir(), None, 0)?;
        let corpus = generate_synthetic_corpus(&self.config.synthetic, rec.seed)?;
        let paths = corpus.write(&rec.dir)?;
        let truth = rec.dir.join("codes.json");
        write_json(&truth, &corpus.codes)?;
        rec.outputs = vec![paths.hierarchy, paths.corpus, paths.embeddings, truth];
        self.finish(rec)
    }

    // ---- prepare -------------------------------------------------------

    fn input_paths(&self) -> Result<(SyntheticPaths, Option<Lineage>)> {
        let d = &self.config.data;
        if self.uses_synthetic() {
            let lineage = self.require(Stage::GenSynthetic, &self.synthetic_dir(), None)?;
            let mut paths = SyntheticPaths::in_dir(&self.synthetic_dir());
            if let Some(p) = &d.corpus {
                paths.corpus = p.clone();
            }
            if let Some(p) = &d.hierarchy {
                paths.hierarchy = p.clone();
            }
            if let Some(p) = &d.embeddings {
                paths.embeddings = p.clone();
            }
            return Ok((paths, Some(lineage)));
        }
        let get = |p: &Option<PathBuf>| p.clone().expect("checked by uses_synthetic");
        Ok((
            SyntheticPaths {
                hierarchy: get(&d.hierarchy),
                corpus: get(&d.corpus),
                embeddings: get(&d.embeddings),
            },
            None,
        ))
    }

    pub fn prepare(&self) -> Result<ExperimentManifest> {
        let (paths, lineage) = self.input_paths()?;
        let mut rec = self.begin(Stage::Prepare, self.prepared_dir(), None, 0)?;
        rec.lineage.extend(lineage);
        for p in [&paths.hierarchy, &paths.corpus, &paths.embeddings] {
            rec.inputs.push(manifest::file_hash(&self.root, p)?);
        }
        let table = EmbeddingTable::read(&paths.embeddings)?;
        let hierarchy_text =
            std::fs::read_to_string(&paths.hierarchy).map_err(|e| Error::io(&paths.hierarchy, e))?;
        let records = parse_hierarchy(&hierarchy_text)?;
        let hierarchy = LabelHierarchy::from_records(records, &BTreeMap::new())?;
        let corpus = read_corpus(&paths.corpus)?;
        let (splits, stats) = build_splits(
            &corpus,
            &hierarchy,
            &table,
            self.config.data.split,
            self.config.data.max_len,
            rec.seed,
        )?;
        let out_h = rec.dir.join("hierarchy.tsv");
        write_text(&out_h, &hierarchy_text)?;
        let out_e = rec.dir.join("embeddings.txt");
        table.write(&out_e)?;
        let out_s = rec.dir.join("splits.json");
        write_json(&out_s, &splits)?;
        let out_stats = rec.dir.join("stats.json");
        write_json(
            &out_stats,
            &serde_json::json!({
                "ingest": stats,
                "documents": {
                    "train": splits.train.len(),
                    "valid": splits.valid.len(),
                    "test": splits.test.len(),
                },
                "train_label_counts": Splits::label_counts(&splits.train),
            }),
        )?;
        rec.outputs = vec![out_h, out_e, out_s, out_stats];
        self.finish(rec)
    }

    pub fn load_prepared(&self) -> Result<Prepared> {
        let dir = self.prepared_dir();
        self.require(Stage::Prepare, &dir, None)?;
        let splits: Splits = read_json(&dir.join("splits.json"))?;
        let table = EmbeddingTable::read(&dir.join("embeddings.txt"))?;
        let path = dir.join("hierarchy.tsv");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let hierarchy =
            LabelHierarchy::from_records(parse_hierarchy(&text)?, &Splits::label_counts(&splits.train))?;
        Ok(Prepared {
            splits,
            hierarchy,
            table,
        })
    }

    // ---- train-extractor -----------------------------------------------

    pub fn train_extractor(&self) -> Result<ExperimentManifest> {
        let lineage = self.require(Stage::Prepare, &self.prepared_dir(), None)?;
        let prepared = self.load_prepared()?;
        let mut rec = self.begin(Stage::TrainExtractor, self.extractor_dir(), None, 0)?;
        rec.lineage.push(lineage);
        let (model, log) = train_extractor(
            &prepared.splits.train,
            &prepared.hierarchy,
            &prepared.table,
            &self.config.extractor,
            rec.seed,
        )?;
        let model_path = rec.dir.join("model.json");
        write_json(&model_path, &model)?;
        let log_path = rec.dir.join("log.json");
        write_json(&log_path, &log)?;
        rec.outputs = vec![model_path, log_path];
        self.finish(rec)
    }

    pub fn load_extractor(&self) -> Result<ExtractorModel> {
        let dir = self.extractor_dir();
        self.require(Stage::TrainExtractor, &dir, None)?;
        read_json(&dir.join("model.json"))
    }

    pub fn load_extractor_log(&self) -> Result<TrainingLog> {
        let dir = self.extractor_dir();
        self.require(Stage::TrainExtractor, &dir, None)?;
        read_json(&dir.join("log.json"))
    }

    // ---- dump-features -------------------------------------------------

    pub fn dump_features(&self) -> Result<ExperimentManifest> {
        let lineage = self.require(Stage::TrainExtractor, &self.extractor_dir(), None)?;
        let prepared = self.load_prepared()?;
        let model = self.load_extractor()?;
        let mut rec = self.begin(Stage::DumpFeatures, self.features_dir(), None, 0)?;
        rec.lineage.push(lineage);
        let f = &self.config.features;
        let dump = FeatureDump::build(&model, &prepared.splits.train, f.negatives_per_code, rec.seed);
        let table = model.embedding_table(&prepared.table)?;
        let cond = Conditioning::from_extractor(&model);
        let keywords = build_keyword_index(
            &prepared.splits.train,
            &prepared.hierarchy,
            &cond,
            &table,
            f.keywords_per_doc,
        )?;
        let dump_path = rec.dir.join("dump.tsv");
        dump.write(&dump_path)?;
        let kw_path = rec.dir.join("keywords.tsv");
        keywords.write(&kw_path, &table)?;
        rec.outputs = vec![dump_path, kw_path];
        self.finish(rec)
    }

    pub fn load_features(&self) -> Result<Features> {
        let dir = self.features_dir();
        self.require(Stage::DumpFeatures, &dir, None)?;
        let prepared = self.load_prepared()?;
        let model = self.load_extractor()?;
        let table = model.embedding_table(&prepared.table)?;
        Ok(Features {
            dump: FeatureDump::read(&dir.join("dump.tsv"))?,
            keywords: KeywordIndex::read(&dir.join("keywords.tsv"), &table)?,
        })
    }

    // ---- train-gan -----------------------------------------------------

    pub fn train_gan(&self, replicate: u32, method: Method) -> Result<ExperimentManifest> {
        let row = Some(Row::Gan(method));
        let lineage = self.require(Stage::DumpFeatures, &self.features_dir(), None)?;
        let prepared = self.load_prepared()?;
        let model = self.load_extractor()?;
        let features = self.load_features()?;
        let mut rec = self.begin(Stage::TrainGan, self.gan_dir(replicate, method), row, replicate)?;
        rec.lineage.push(lineage);
        let cond = Conditioning::from_extractor(&model);
        let table = model.embedding_table(&prepared.table)?;
        let vocab = KeywordVocab::new(features.keywords.vocabulary(), table.matrix())?;
        let data = GanData::prepare(
            &features.dump,
            &prepared.hierarchy,
            &cond,
            Some((&features.keywords, &vocab)),
        )?;
        let flags = method.flags();
        let (gan, log) = train_gan(
            &data,
            cond,
            flags.keywords.then_some(vocab),
            &self.config.gan,
            flags,
            rec.seed,
        )?;
        let model_path = rec.dir.join("model.json");
        write_json(&model_path, &gan)?;
        let log_path = rec.dir.join("log.json");
        write_json(&log_path, &log)?;
        rec.outputs = vec![model_path, log_path];
        self.finish(rec)
    }

    pub fn load_gan(&self, replicate: u32, method: Method) -> Result<(GanModel, GanLog)> {
        let dir = self.gan_dir(replicate, method);
        self.require(Stage::TrainGan, &dir, Some(Row::Gan(method)))?;
        Ok((read_json(&dir.join("model.json"))?, read_json(&dir.join("log.json"))?))
    }

    // ---- synthesize ----------------------------------------------------

    /// Codes that receive generated positives.
    pub fn target_codes(&self, hierarchy: &LabelHierarchy) -> Vec<String> {
        let mut codes: BTreeSet<&str> = hierarchy.zero_shot();
        if self.config.finetune.include_few_shot {
            codes.extend(hierarchy.few_shot());
        }
        codes.into_iter().map(str::to_string).collect()
    }

    pub fn synthesize(&self, replicate: u32, method: Method) -> Result<ExperimentManifest> {
        let row = Some(Row::Gan(method));
        let gan_dir = self.gan_dir(replicate, method);
        let lineage = self.require(Stage::TrainGan, &gan_dir, row)?;
        let prepared = self.load_prepared()?;
        let (gan, _) = self.load_gan(replicate, method)?;
        let mut rec = self.begin(Stage::Synthesize, self.synth_dir(replicate, method), row, replicate)?;
        rec.lineage.push(lineage);
        let codes = self.target_codes(&prepared.hierarchy);
        let count = self.config.finetune.synthesized;
        let batches: BTreeMap<String, Array2<f64>> = codes
            .par_iter()
            .enumerate()
            .map(|(i, code)| {
                let b = synthesize_features(&gan, code, count, splitmix64(rec.seed ^ i as u64))?;
                Ok((code.clone(), b.features))
            })
            .collect::<Result<_>>()?;
        let features_path = rec.dir.join("features.json");
        write_json(&features_path, &batches)?;
        rec.outputs = vec![features_path];
        if let Some(head) = gan.keyword_head() {
            let n = self.config.features.keyword_predictions;
            let mut text = String::new();
            for (code, feats) in &batches {
                let Some(mean) = feats.mean_axis(ndarray::Axis(0)) else { continue };
                let words: Vec<&str> = head
                    .ranking(&mean)
                    .into_iter()
                    .take(n)
                    .map(|p| prepared.table.token(head.vocab.tokens[p]))
                    .collect();
                text.push_str(&format!("{code}\t{}\n", words.join(" ")));
            }
            let kw_path = rec.dir.join("keywords.tsv");
            write_text(&kw_path, &text)?;
            rec.outputs.push(kw_path);
        }
        self.finish(rec)
    }

    pub fn load_synthesized(&self, replicate: u32, method: Method) -> Result<BTreeMap<String, Array2<f64>>> {
        let dir = self.synth_dir(replicate, method);
        self.require(Stage::Synthesize, &dir, Some(Row::Gan(method)))?;
        read_json(&dir.join("features.json"))
    }

    // ---- finetune ------------------------------------------------------

    pub fn finetune(&self, replicate: u32, method: Method) -> Result<ExperimentManifest> {
        let row = Some(Row::Gan(method));
        let lineage = self.require(Stage::Synthesize, &self.synth_dir(replicate, method), row)?;
        let model = self.load_extractor()?;
        let features = self.load_features()?;
        let positives = self.load_synthesized(replicate, method)?;
        let mut rec = self.begin(Stage::Finetune, self.adapted_dir(replicate, method), row, replicate)?;
        rec.lineage.push(lineage);
        let (_, g) = model.label_state();
        let mut adapted = finetune_codes(
            &model.graph.codes,
            &g,
            &positives,
            &features.dump,
            &self.config.finetune,
            rec.seed,
        )?;
        if self.config.finetune.selection == Selection::Validation {
            let valid = &self.load_prepared()?.splits.valid;
            let feats: Vec<Array2<f64>> =
                model.forward_many(valid).into_iter().map(|o| o.features).collect();
            select_epoch(&mut adapted, &feats, valid, self.config.eval.threshold)?;
        }
        let path = rec.dir.join("classifiers.json");
        write_json(&path, &adapted)?;
        rec.outputs = vec![path];
        self.finish(rec)
    }

    pub fn load_adapted(&self, replicate: u32, method: Method) -> Result<AdaptedClassifiers> {
        let dir = self.adapted_dir(replicate, method);
        self.require(Stage::Finetune, &dir, Some(Row::Gan(method)))?;
        read_json(&dir.join("classifiers.json"))
    }

    // ---- train-meta ----------------------------------------------------

    /// Codes scored on meta-embedded features.
    pub fn meta_codes(&self, hierarchy: &LabelHierarchy, codes: &[String]) -> BTreeSet<usize> {
        let targets: BTreeSet<&str> = hierarchy.zero_shot().union(&hierarchy.few_shot()).copied().collect();
        codes
            .iter()
            .enumerate()
            .filter(|(_, c)| targets.contains(c.as_str()))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn train_meta(&self, replicate: u32) -> Result<ExperimentManifest> {
        let lineage = self.require(Stage::DumpFeatures, &self.features_dir(), None)?;
        let prepared = self.load_prepared()?;
        let model = self.load_extractor()?;
        let features = self.load_features()?;
        let mut rec = self.begin(Stage::TrainMeta, self.meta_dir(replicate), Some(Row::Meta), replicate)?;
        rec.lineage.push(lineage);
        let centroids = build_centroids(&features.dump)?;
        let codes = &model.graph.codes;
        let samples: Vec<MetaSample> = features
            .dump
            .rows
            .iter()
            .filter(|r| prepared.hierarchy.is_seen(&r.code))
            .filter_map(|r| {
                Some(MetaSample {
                    code: codes.iter().position(|c| *c == r.code)?,
                    features: ndarray::Array1::from(r.features.clone()),
                    positive: r.positive,
                })
            })
            .collect();
        let (_, g) = model.label_state();
        let (head, losses) = train_meta_head(centroids, &g, &samples, &self.config.meta, rec.seed)?;
        let head_path = rec.dir.join("head.json");
        write_json(&head_path, &head)?;
        let log_path = rec.dir.join("log.json");
        write_json(&log_path, &losses)?;
        rec.outputs = vec![head_path, log_path];
        self.finish(rec)
    }

    pub fn load_meta(&self, replicate: u32) -> Result<MetaEmbeddingHead> {
        let dir = self.meta_dir(replicate);
        self.require(Stage::TrainMeta, &dir, Some(Row::Meta))?;
        read_json(&dir.join("head.json"))
    }

    // ---- evaluate ------------------------------------------------------

    /// Test-split probabilities for a row, without writing anything.
    pub fn predict(&self, replicate: u32, row: Row) -> Result<(PredictionMatrix, Prepared)> {
        let prepared = self.load_prepared()?;
        let model = self.load_extractor()?;
        let (_, g) = model.label_state();
        let codes = model.graph.codes.clone();
        let outs = model.forward_many(&prepared.splits.test);
        let feats: Vec<Array2<f64>> = outs.into_iter().map(|o| o.features).collect();
        let scores = match row {
            Row::Baseline => score_features(&feats, &g, None),
            Row::Gan(m) => {
                let adapted = self.load_adapted(replicate, m)?;
                if adapted.codes != codes {
                    return Err(Error::Config(
                        "fine-tuned classifiers do not match the extractor's codes".into(),
                    ));
                }
                score_features(&feats, &adapted.classifiers, None)
            }
            Row::Meta => {
                let head = self.load_meta(replicate)?;
                let targets = self.meta_codes(&prepared.hierarchy, &codes);
                score_features(&feats, &g, Some((&head, &targets)))
            }
        };
        let doc_ids = prepared.splits.test.iter().map(|d| d.doc_id.clone()).collect();
        let pred = PredictionMatrix::new(doc_ids, codes, scores, self.config.eval.threshold)?;
        Ok((pred, prepared))
    }

    pub fn evaluate(&self, replicate: u32, row: Row) -> Result<MetricsReport> {
        let lineage = match row {
            Row::Baseline => self.require(Stage::TrainExtractor, &self.extractor_dir(), None)?,
            Row::Meta => self.require(Stage::TrainMeta, &self.meta_dir(replicate), Some(row))?,
            Row::Gan(m) => self.require(Stage::Finetune, &self.adapted_dir(replicate, m), Some(row))?,
        };
        let (pred, prepared) = self.predict(replicate, row)?;
        let mut report = evaluate(&pred, &prepared.splits.test, &prepared.hierarchy, &self.config.eval)?;
        report.metadata.insert("method".into(), row.name().into());
        let mut rec = self.begin(Stage::Evaluate, self.eval_dir(replicate, row), Some(row), replicate)?;
        rec.lineage.push(lineage);
        let json_path = rec.dir.join("report.json");
        write_text(&json_path, &(serde_json::to_string_pretty(&report)? + "\n"))?;
        let text_path = rec.dir.join("report.txt");
        write_text(&text_path, &report.render())?;
        rec.outputs = vec![json_path, text_path];
        self.finish(rec)?;
        Ok(report)
    }

    pub fn load_report(&self, replicate: u32, row: Row) -> Result<MetricsReport> {
        let dir = self.eval_dir(replicate, row);
        self.require(Stage::Evaluate, &dir, Some(row))?;
        read_json(&dir.join("report.json"))
    }

    // ---- reproduce-table -----------------------------------------------

    /// Runs the shared stages that are missing or stale.
    pub fn ensure_shared(&self) -> Result<()> {
        if self.uses_synthetic() && !self.is_current(Stage::GenSynthetic, &self.synthetic_dir(), None) {
            self.gen_synthetic()?;
        }
        if !self.is_current(Stage::Prepare, &self.prepared_dir(), None) {
            self.prepare()?;
        }
        if !self.is_current(Stage::TrainExtractor, &self.extractor_dir(), None) {
            self.train_extractor()?;
        }
        if !self.is_current(Stage::DumpFeatures, &self.features_dir(), None) {
            self.dump_features()?;
        }
        Ok(())
    }

    /// Every per-replicate stage of `row`, rerunning only what is stale.
    pub fn run_replicate(&self, replicate: u32, row: Row) -> Result<MetricsReport> {
        let r = Some(row);
        match row {
            Row::Baseline => {}
            Row::Meta => {
                if !self.is_current(Stage::TrainMeta, &self.meta_dir(replicate), r) {
                    self.train_meta(replicate)?;
                }
            }
            Row::Gan(m) => {
                if !self.is_current(Stage::TrainGan, &self.gan_dir(replicate, m), r) {
                    self.train_gan(replicate, m)?;
                }
                if !self.is_current(Stage::Synthesize, &self.synth_dir(replicate, m), r) {
                    self.synthesize(replicate, m)?;
                }
                if !self.is_current(Stage::Finetune, &self.adapted_dir(replicate, m), r) {
                    self.finetune(replicate, m)?;
                }
            }
        }
        if self.is_current(Stage::Evaluate, &self.eval_dir(replicate, row), r) {
            return self.load_report(replicate, row);
        }
        self.evaluate(replicate, row)
    }

    /// Runs `row` for `config.seeds` replicates in parallel and writes the
    /// mean ± sd table.
    pub fn reproduce_table(&self, row: Row) -> Result<TableResult> {
        self.ensure_shared()?;
        let n = self.config.seeds as u32;
        let reports: Vec<MetricsReport> = (0..n)
            .into_par_iter()
            .map(|r| self.run_replicate(r, row))
            .collect::<Result<_>>()?;
        let summary = summarize(&reports)?;
        let mut rec = self.begin(Stage::ReproduceTable, self.table_dir(row), Some(row), 0)?;
        for r in 0..n {
            rec.lineage.push(self.require(Stage::Evaluate, &self.eval_dir(r, row), Some(row))?);
        }
        let result = TableResult {
            row,
            reports,
            summary,
        };
        let json_path = rec.dir.join("table.json");
        write_text(&json_path, &(serde_json::to_string_pretty(&result)? + "\n"))?;
        let text_path = rec.dir.join("table.txt");
        write_text(
            &text_path,
            &format!("{} over {} seeds\n{}", row.name(), n, result.summary.render()),
        )?;
        rec.outputs = vec![json_path, text_path];
        self.finish(rec)?;
        Ok(result)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_names_round_trip() {
        for row in Row::all() {
            assert_eq!(row.name().parse::<Row>().unwrap(), row);
        }
        assert!(matches!("wgan+foo".parse::<Row>(), Err(Error::Config(_))));
    }

    #[test]
    fn stage_hashes_separate_methods_and_sections() {
        let ws = Workspace::new("/nonexistent", RunConfig::desk());
        let a = ws.config_hash(Stage::TrainGan, Some(Row::Gan(Method::Wgan))).unwrap();
        let b = ws.config_hash(Stage::TrainGan, Some(Row::Gan(Method::WganZ))).unwrap();
        assert_ne!(a, b);
        let mut cfg = RunConfig::desk();
        cfg.eval.threshold = 0.3;
        let ws2 = Workspace::new("/nonexistent", cfg);
        assert_eq!(
            ws.config_hash(Stage::TrainExtractor, None).unwrap(),
            ws2.config_hash(Stage::TrainExtractor, None).unwrap()
        );
        assert_ne!(
            ws.config_hash(Stage::Evaluate, Some(Row::Baseline)).unwrap(),
            ws2.config_hash(Stage::Evaluate, Some(Row::Baseline)).unwrap()
        );
    }

    #[test]
    fn evaluate_without_finetune_names_the_missing_stage() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path(), RunConfig::desk());
        let err = ws.evaluate(0, Row::Gan(Method::Wgan)).unwrap_err();
        assert!(matches!(err, Error::MissingPrerequisite { stage: "finetune", .. }), "{err}");
    }

    #[test]
    fn prepare_requires_generated_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path(), RunConfig::desk());
        let err = ws.prepare().unwrap_err();
        assert!(matches!(err, Error::MissingPrerequisite { stage: "gen-synthetic", .. }));
    }
}
