//! Run configuration and stage drivers. Every stage reads the previous
//! stage's artifacts from the run directory and writes its outputs plus a
//! `manifest.json` carrying the config digest and seed.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path as FsPath, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{
    bias_report, f1, hits_at_1, retrieval_time, BiasReport, DiagnosticsConfig, EvalRecord,
};
use crate::graph::{KnowledgeGraph, Signature};
use crate::inference::{
    retrieve_and_answer, AnswerGenerator, HttpChatGenerator, InferenceConfig, MockGenerator,
    RetrievalRecord, SimilarityScorer, PROMPT_TEMPLATE_V1,
};
use crate::mining::{
    mine_corpus, read_json, read_jsonl, write_json, write_jsonl, InstanceRecord, MiningConfig,
    QueryRecord,
};
use crate::scorer::{CrossAttentiveScorer, PathScorer, ScorerConfig};
use crate::similarity::{HashedBagOfWords, HttpEmbedder, SimilarityModel};
use crate::synth::{SynthConfig, SynthCorpus, SynthStats};
use crate::training::{count_occurrences, train, TrainingConfig};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Tab-separated triple file.
    pub graph: Option<PathBuf>,
    /// Line-delimited query records.
    pub qa: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Retriever {
    /// The trained cross-attentive scorer.
    #[default]
    Trained,
    /// Frozen similarity between question and serialized path.
    Similarity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub out_dir: PathBuf,
    /// Overrides the seeds of mining, scorer initialization and training.
    pub seed: u64,
    /// `hashed-bow` or `http` (see [`HttpEmbedder::from_env`]).
    pub similarity: String,
    pub retriever: Retriever,
    /// Split retrieved and evaluated.
    pub eval_split: String,
    pub synth: SynthConfig,
    pub mining: MiningConfig,
    pub scorer: ScorerConfig,
    pub training: TrainingConfig,
    pub inference: InferenceConfig,
    pub diagnostics: DiagnosticsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            out_dir: PathBuf::from("run"),
            seed: 0,
            similarity: "hashed-bow".to_string(),
            retriever: Retriever::Trained,
            eval_split: "test".to_string(),
            synth: SynthConfig::default(),
            mining: MiningConfig::default(),
            scorer: ScorerConfig::default(),
            training: TrainingConfig::default(),
            inference: InferenceConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn load(path: &FsPath) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Copy with the top-level seed pushed into every seeded section.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.mining.seed = c.seed;
        c.scorer.seed = c.seed;
        c.training.seed = c.seed;
        c
    }

    /// SHA-256 of the resolved config's JSON form. Paths inside the output
    /// directory count relative to it, so relocated runs share a digest.
    pub fn digest(&self) -> String {
        let mut c = self.resolved();
        for p in [&mut c.data.graph, &mut c.data.qa].into_iter().flatten() {
            if let Ok(rel) = p.strip_prefix(&self.out_dir) {
                *p = rel.to_path_buf();
            }
        }
        c.out_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.out_dir.join(stage)
    }

    pub fn similarity_model(&self) -> Result<Box<dyn SimilarityModel>> {
        match self.similarity.as_str() {
            "hashed-bow" => Ok(Box::new(HashedBagOfWords::default())),
            "http" => Ok(Box::new(HttpEmbedder::from_env()?)),
            other => Err(Error::invalid(format!(
                "unknown similarity backend `{other}`"
            ))),
        }
    }

    pub fn generator(&self) -> Result<Box<dyn AnswerGenerator>> {
        match self.inference.generator.as_str() {
            "mock" => Ok(Box::new(MockGenerator)),
            "http" => Ok(Box::new(HttpChatGenerator::from_env()?)),
            other => Err(Error::invalid(format!("unknown generator `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub seed: u64,
    pub config_digest: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub details: serde_json::Value,
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact(path))
    }
}

fn create_dir(dir: &FsPath) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_manifest(
    cfg: &RunConfig,
    stage: &str,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    details: serde_json::Value,
) -> Result<Manifest> {
    let m = Manifest {
        stage: stage.to_string(),
        seed: cfg.seed,
        config_digest: cfg.digest(),
        inputs,
        outputs,
        details,
    };
    write_json(&cfg.stage_dir(stage).join(MANIFEST), &m)?;
    Ok(m)
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("value serializes")
}

// artifact locations
const GRAPH: &str = "graph.tsv";
const QUERIES: &str = "queries.jsonl";
const INSTANCES: &str = "instances.jsonl";
const CHECKPOINT: &str = "checkpoint.json";
const TRAIN_LOG: &str = "train_log.jsonl";
pub const PATH_COUNTS: &str = "path_counts.json";
const RETRIEVALS: &str = "retrievals.jsonl";
pub const EVAL_RECORDS: &str = "eval_records.jsonl";
pub const METRICS: &str = "metrics.json";
pub const TIMING: &str = "timing.json";
pub const BIAS_REPORT_TEXT: &str = "bias_report.txt";
pub const BIAS_REPORT_JSON: &str = "bias_report.json";

/// Generates the synthetic corpus and points `data` at it.
pub fn cmd_synth(cfg: &mut RunConfig) -> Result<SynthStats> {
    let dir = cfg.stage_dir("synth");
    let corpus = SynthCorpus::generate(&cfg.synth)?;
    let m = cfg.similarity_model()?;
    let stats = corpus.stats(m.as_ref())?;
    corpus.write(&dir, &stats)?;
    cfg.data.graph = Some(dir.join(crate::synth::GRAPH_FILE));
    cfg.data.qa = Some(dir.join(crate::synth::QA_FILE));
    write_manifest(
        cfg,
        "synth",
        Vec::new(),
        vec![
            dir.join(crate::synth::GRAPH_FILE),
            dir.join(crate::synth::QA_FILE),
            dir.join(crate::synth::GOLD_FILE),
        ],
        to_value(&stats),
    )?;
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub entities: usize,
    pub triples: usize,
    pub relations: usize,
    pub queries: usize,
    pub splits: BTreeMap<String, usize>,
    pub max_hop: usize,
}

/// Parses a line-delimited query file. An empty file is an empty dataset.
pub fn read_queries(path: &FsPath) -> Result<Vec<QueryRecord>> {
    let queries: Vec<QueryRecord> = read_jsonl(path)?;
    let mut seen = BTreeSet::new();
    for q in &queries {
        if !seen.insert(q.qid.as_str()) {
            return Err(Error::invalid(format!("duplicate qid {}", q.qid)));
        }
        q.validate()?;
    }
    Ok(queries)
}

/// Loads the triple and query files, checks that every topic and answer
/// resolves, and stores canonical copies.
pub fn cmd_ingest(cfg: &RunConfig) -> Result<IngestSummary> {
    // without explicit data, fall back to a synthetic corpus in this run
    let synth = cfg.stage_dir("synth");
    let graph_path = cfg
        .data
        .graph
        .clone()
        .unwrap_or_else(|| synth.join(crate::synth::GRAPH_FILE));
    let qa_path = cfg
        .data
        .qa
        .clone()
        .unwrap_or_else(|| synth.join(crate::synth::QA_FILE));
    let graph_path = require(graph_path)?;
    let qa_path = require(qa_path)?;
    let g = KnowledgeGraph::load(&graph_path)?;
    let queries = read_queries(&qa_path)?;

    let mut unresolved = Vec::new();
    for q in &queries {
        let missing: Vec<&str> = q
            .topics
            .iter()
            .chain(&q.answers)
            .filter(|e| !g.contains(e))
            .map(String::as_str)
            .collect();
        if !missing.is_empty() {
            unresolved.push(format!("{} ({})", q.qid, missing.join(", ")));
        }
    }
    if !unresolved.is_empty() {
        return Err(Error::Unresolved(unresolved.join("; ")));
    }

    let dir = cfg.stage_dir("ingest");
    create_dir(&dir)?;
    let out_graph = dir.join(GRAPH);
    std::fs::write(&out_graph, g.to_triple_file()).map_err(|e| Error::io(&out_graph, e))?;
    write_jsonl(&dir.join(QUERIES), &queries)?;
    let mut splits = BTreeMap::new();
    for q in &queries {
        *splits.entry(q.split.clone()).or_insert(0) += 1;
    }
    let summary = IngestSummary {
        entities: g.num_entities(),
        triples: g.num_triples(),
        relations: g.relations().len(),
        queries: queries.len(),
        splits,
        max_hop: cfg.mining.max_hop,
    };
    log::info!(
        "ingested {} triples, {} queries ({:?})",
        summary.triples,
        summary.queries,
        summary.splits
    );
    write_manifest(
        cfg,
        "ingest",
        vec![graph_path, qa_path],
        vec![out_graph, dir.join(QUERIES)],
        to_value(&summary),
    )?;
    Ok(summary)
}

fn load_ingested(cfg: &RunConfig) -> Result<(KnowledgeGraph, Vec<QueryRecord>, Vec<PathBuf>)> {
    let dir = cfg.stage_dir("ingest");
    let gp = require(dir.join(GRAPH))?;
    let qp = require(dir.join(QUERIES))?;
    Ok((KnowledgeGraph::load(&gp)?, read_queries(&qp)?, vec![gp, qp]))
}

/// Mines training instances from the `train` split.
pub fn cmd_mine(cfg: &RunConfig) -> Result<Vec<InstanceRecord>> {
    let cfg = cfg.resolved();
    let (g, queries, inputs) = load_ingested(&cfg)?;
    let train_q: Vec<QueryRecord> = queries.into_iter().filter(|q| q.split == "train").collect();
    let m = cfg.similarity_model()?;
    let corpus = mine_corpus(&train_q, &g, m.as_ref(), &cfg.mining)?;
    let dir = cfg.stage_dir("mine");
    create_dir(&dir)?;
    write_jsonl(&dir.join(INSTANCES), &corpus.records)?;
    // positive signature frequencies, read back by the long-tail diagnostics
    let counts = if corpus.records.is_empty() {
        BTreeMap::new()
    } else {
        count_occurrences(&corpus.records)?.positive
    };
    let path_counts: Vec<(&Signature, &usize)> = counts.iter().collect();
    write_json(&dir.join(PATH_COUNTS), &path_counts)?;
    write_manifest(
        &cfg,
        "mine",
        inputs,
        vec![dir.join(INSTANCES), dir.join(PATH_COUNTS)],
        to_value(&corpus.manifest),
    )?;
    Ok(corpus.records)
}

/// Trains the scorer on the mined instances.
pub fn cmd_train(cfg: &RunConfig) -> Result<CrossAttentiveScorer> {
    let cfg = cfg.resolved();
    let inst_path = require(cfg.stage_dir("mine").join(INSTANCES))?;
    let records: Vec<InstanceRecord> = read_jsonl(&inst_path)?;
    let mut scorer = CrossAttentiveScorer::new(cfg.scorer.clone())?;
    let report = train(&records, &cfg.training, &mut scorer)?;

    let dir = cfg.stage_dir("train");
    create_dir(&dir)?;
    let ck = dir.join(CHECKPOINT);
    scorer.save(
        &ck,
        serde_json::json!({ "seed": cfg.seed, "config_digest": cfg.digest(), "best_epoch": report.best_epoch }),
    )?;
    write_jsonl(&dir.join(TRAIN_LOG), &report.log)?;
    write_manifest(
        &cfg,
        "train",
        vec![inst_path],
        vec![ck, dir.join(TRAIN_LOG)],
        serde_json::json!({
            "best_epoch": report.best_epoch,
            "best_val_loss": report.best_val_loss,
            "train_instances": report.train_instances,
            "val_instances": report.val_instances,
        }),
    )?;
    Ok(scorer)
}

/// Retrieves paths and generates answers for the evaluation split.
pub fn cmd_retrieve(cfg: &RunConfig) -> Result<Vec<RetrievalRecord>> {
    let cfg = cfg.resolved();
    cfg.inference.validate()?;
    let (g, queries, mut inputs) = load_ingested(&cfg)?;
    let m = cfg.similarity_model()?;
    let trained;
    let baseline;
    let scorer: &dyn PathScorer = match cfg.retriever {
        Retriever::Trained => {
            let ck = require(cfg.stage_dir("train").join(CHECKPOINT))?;
            trained = CrossAttentiveScorer::load(&ck)?;
            inputs.push(ck);
            &trained
        }
        Retriever::Similarity => {
            baseline = SimilarityScorer { model: m.as_ref() };
            &baseline
        }
    };
    let llm = cfg.generator()?;
    let mut records = Vec::new();
    for q in queries.iter().filter(|q| q.split == cfg.eval_split) {
        let answered = retrieve_and_answer(
            &g,
            q,
            scorer,
            llm.as_ref(),
            &cfg.inference,
            PROMPT_TEMPLATE_V1,
        )?;
        records.push(answered.to_record(&g, &q.qid));
    }
    let dir = cfg.stage_dir("retrieve");
    create_dir(&dir)?;
    write_jsonl(&dir.join(RETRIEVALS), &records)?;
    write_manifest(
        &cfg,
        "retrieve",
        inputs,
        vec![dir.join(RETRIEVALS)],
        serde_json::json!({ "queries": records.len(), "retriever": cfg.retriever, "split": cfg.eval_split }),
    )?;
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub records: usize,
    pub hits_at_1: f64,
    pub f1: f64,
}

/// Scores generated answers against gold. Timing goes to its own file so
/// the metric file is reproducible.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<Metrics> {
    let (g, queries, mut inputs) = load_ingested(cfg)?;
    let rp = require(cfg.stage_dir("retrieve").join(RETRIEVALS))?;
    let retrievals: Vec<RetrievalRecord> = read_jsonl(&rp)?;
    inputs.push(rp);
    let by_qid: BTreeMap<&str, &QueryRecord> =
        queries.iter().map(|q| (q.qid.as_str(), q)).collect();
    let mut records = Vec::with_capacity(retrievals.len());
    for r in &retrievals {
        let q = by_qid
            .get(r.qid.as_str())
            .ok_or_else(|| Error::invalid(format!("retrieval for unknown qid {}", r.qid)))?;
        let gold = q.answers.iter().map(|a| g.label(a).to_string()).collect();
        records.push(EvalRecord::new(
            &q.qid,
            &q.question,
            vec![r.answer.clone()],
            gold,
            r.paths.first().map(String::as_str).unwrap_or(""),
            r.rt_secs,
        ));
    }
    let metrics = Metrics {
        records: records.len(),
        hits_at_1: hits_at_1(&records)?,
        f1: f1(&records)?,
    };
    let dir = cfg.stage_dir("evaluate");
    create_dir(&dir)?;
    write_jsonl(&dir.join(EVAL_RECORDS), &records)?;
    write_json(&dir.join(METRICS), &metrics)?;
    write_json(
        &dir.join(TIMING),
        &serde_json::json!({ "mean_retrieval_secs": retrieval_time(&records)? }),
    )?;
    write_manifest(
        cfg,
        "evaluate",
        inputs,
        vec![dir.join(EVAL_RECORDS), dir.join(METRICS), dir.join(TIMING)],
        to_value(&metrics),
    )?;
    Ok(metrics)
}

/// Shortcut and long-tail diagnostics over the evaluated records.
pub fn cmd_diagnose(cfg: &RunConfig) -> Result<BiasReport> {
    let ep = require(cfg.stage_dir("evaluate").join(EVAL_RECORDS))?;
    let cp = require(cfg.stage_dir("mine").join(PATH_COUNTS))?;
    let records: Vec<EvalRecord> = read_jsonl(&ep)?;
    let raw: Vec<(Signature, usize)> = read_json(&cp)?;
    let counts: BTreeMap<Signature, usize> = raw.into_iter().collect();
    let m = cfg.similarity_model()?;
    let report = bias_report(&records, m.as_ref(), &counts, &cfg.diagnostics)?;
    let dir = cfg.stage_dir("diagnose");
    create_dir(&dir)?;
    let text = dir.join(BIAS_REPORT_TEXT);
    std::fs::write(&text, report.render()).map_err(|e| Error::io(&text, e))?;
    write_json(&dir.join(BIAS_REPORT_JSON), &report)?;
    write_manifest(
        cfg,
        "diagnose",
        vec![ep, cp],
        vec![text, dir.join(BIAS_REPORT_JSON)],
        serde_json::json!({ "error": report.error }),
    )?;
    Ok(report)
}

/// Ingest through diagnose, optionally on a freshly generated synthetic
/// corpus.
pub fn run_all(cfg: &RunConfig, synthetic: bool) -> Result<BiasReport> {
    let mut cfg = cfg.clone();
    if synthetic {
        cmd_synth(&mut cfg)?;
    }
    cmd_ingest(&cfg)?;
    cmd_mine(&cfg)?;
    if cfg.retriever == Retriever::Trained {
        cmd_train(&cfg)?;
    }
    cmd_retrieve(&cfg)?;
    cmd_evaluate(&cfg)?;
    cmd_diagnose(&cfg)
}
