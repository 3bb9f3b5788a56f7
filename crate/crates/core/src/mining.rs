//! Training-set construction: hard positive curation over shortest paths and
//! per-hop hard/normal negative curation.

use std::collections::{BTreeSet, HashSet};
use std::io::Write;
use std::path::Path as FsPath;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{parse_serialized, serialize_relations, KnowledgeGraph, Path, Signature, EOP};
use crate::similarity::{fnv1a, top_k_similar, SimilarityInfo, SimilarityModel};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub qid: String,
    pub question: String,
    pub topics: Vec<String>,
    pub answers: Vec<String>,
    #[serde(default = "default_split")]
    pub split: String,
}

fn default_split() -> String {
    "train".to_string()
}

impl QueryRecord {
    pub fn answer_set(&self) -> BTreeSet<String> {
        self.answers.iter().cloned().collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.topics.is_empty() || self.answers.is_empty() {
            return Err(Error::invalid(format!(
                "query {} needs at least one topic and one answer",
                self.qid
            )));
        }
        if self.question.trim().is_empty() {
            return Err(Error::invalid(format!(
                "query {} has an empty question",
                self.qid
            )));
        }
        Ok(())
    }
}

/// One positive path perturbed at a single hop.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub qid: String,
    pub question: String,
    pub positive: Path,
    /// 1-based index of the perturbed hop.
    pub hop: usize,
    pub hard: Vec<Path>,
    pub normal: Vec<Path>,
}

impl TrainingInstance {
    pub fn negatives(&self) -> impl Iterator<Item = &Path> {
        self.hard.iter().chain(self.normal.iter())
    }
}

/// Per-query generator derived from the master seed, so that curation order
/// does not affect sampling.
pub fn query_rng(seed: u64, qid: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(qid.as_bytes()))
}

/// Shortest paths from each topic to the answers, kept when their similarity
/// to the question reaches the topic's mean candidate similarity.
pub fn curate_hard_positives(
    q: &QueryRecord,
    g: &KnowledgeGraph,
    m: &dyn SimilarityModel,
    max_hop: usize,
) -> Result<Vec<Path>> {
    let answers = q.answer_set();
    let mut seen: HashSet<(String, Signature)> = HashSet::new();
    let mut out = Vec::new();
    for topic in &q.topics {
        let candidates = g.shortest_paths(topic, &answers, max_hop)?;
        if candidates.is_empty() {
            continue;
        }
        let sims = candidates
            .iter()
            .map(|p| m.sim(&q.question, &g.serialize_path(p)))
            .collect::<Result<Vec<f64>>>()?;
        let mean = sims.iter().sum::<f64>() / sims.len() as f64;
        for (p, s) in candidates.into_iter().zip(sims) {
            // tolerance absorbs rounding in the mean of equal values
            if s >= mean - 1e-12 && seen.insert((p.topic.clone(), p.signature())) {
                out.push(p);
            }
        }
    }
    if out.is_empty() {
        log::info!("query {}: no path within {max_hop} hops, skipped", q.qid);
    }
    Ok(out)
}

/// Perturbs every hop of every positive: hard negatives are the `k` sibling
/// relations most similar to the true relation, normal negatives are `k`
/// relations drawn from the whole relation set.
pub fn curate_hard_negatives(
    qid: &str,
    question: &str,
    positives: &[Path],
    g: &KnowledgeGraph,
    m: &dyn SimilarityModel,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainingInstance>> {
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    let all_relations: Vec<&String> = g.relations().iter().collect();
    let mut out = Vec::new();
    for p in positives {
        let mut frontier = p.topic.as_str();
        for (h, hop) in p.hops.iter().enumerate() {
            let target = hop.relation.as_str();
            let siblings: Vec<String> = g
                .relations_of(frontier)?
                .into_iter()
                .filter(|r| *r != target)
                .map(str::to_string)
                .collect();
            let hard_rel = if siblings.is_empty() {
                Vec::new()
            } else {
                top_k_similar(m, target, &siblings, k)?
            };

            let pool: Vec<&String> = all_relations
                .iter()
                .copied()
                .filter(|r| *r != target)
                .collect();
            let mut normal_rel: Vec<String> = if pool.len() >= k {
                sample(rng, pool.len(), k)
                    .into_iter()
                    .map(|i| pool[i].clone())
                    .collect()
            } else {
                pool.iter().map(|r| r.to_string()).collect()
            };
            normal_rel.sort();

            let prefix = p.prefix(h);
            let hard: Vec<Path> = hard_rel.iter().map(|r| prefix.extended(r, None)).collect();
            let normal: Vec<Path> = normal_rel
                .iter()
                .map(|r| prefix.extended(r, None))
                .collect();
            if !hard.is_empty() || !normal.is_empty() {
                out.push(TrainingInstance {
                    qid: qid.to_string(),
                    question: question.to_string(),
                    positive: p.clone(),
                    hop: h + 1,
                    hard,
                    normal,
                });
            }
            if let Some(next) = hop.entity.as_deref() {
                frontier = next;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiningConfig {
    /// Negatives per hop for both the hard and the normal set.
    pub k: usize,
    pub max_hop: usize,
    pub seed: u64,
    /// Append `[EOP]` to positives and add an early-stop negative on every
    /// inner hop, so the scorer learns when to terminate.
    pub stop_decisions: bool,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            k: 15,
            max_hop: 2,
            seed: 0,
            stop_decisions: true,
        }
    }
}

/// Line record of the instance corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub qid: String,
    pub question: String,
    /// Full positive path serialization.
    pub positive: String,
    /// 1-based perturbed hop.
    pub hop: usize,
    pub hard: Vec<String>,
    pub normal: Vec<String>,
}

impl InstanceRecord {
    pub fn from_instance(g: &KnowledgeGraph, inst: &TrainingInstance) -> Self {
        let ser = |p: &Path| g.serialize_path(p);
        InstanceRecord {
            qid: inst.qid.clone(),
            question: inst.question.clone(),
            positive: ser(&inst.positive),
            hop: inst.hop,
            hard: inst.hard.iter().map(ser).collect(),
            normal: inst.normal.iter().map(ser).collect(),
        }
    }

    /// The positive truncated after the perturbed hop: the sequence the
    /// negatives compete against.
    pub fn positive_target(&self) -> String {
        let (label, rels) = parse_serialized(&self.positive);
        serialize_relations(&label, rels.iter().take(self.hop).map(String::as_str))
    }

    pub fn positive_signature(&self) -> Signature {
        crate::graph::signature_of_serialized(&self.positive)
    }

    /// Union of hard and normal negatives, first occurrence kept.
    pub fn negatives(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.hard
            .iter()
            .chain(self.normal.iter())
            .map(String::as_str)
            .filter(|s| seen.insert(*s))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningManifest {
    pub seed: u64,
    pub k: usize,
    pub max_hop: usize,
    pub stop_decisions: bool,
    pub queries: usize,
    pub skipped_queries: Vec<String>,
    pub instances: usize,
    pub n_pos: usize,
    pub n_neg: usize,
    pub similarity: SimilarityInfo,
}

pub struct MinedCorpus {
    pub records: Vec<InstanceRecord>,
    pub manifest: MiningManifest,
}

/// Runs positive and negative curation for every query.
pub fn mine_corpus(
    queries: &[QueryRecord],
    g: &KnowledgeGraph,
    m: &dyn SimilarityModel,
    cfg: &MiningConfig,
) -> Result<MinedCorpus> {
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut n_pos = 0;
    for q in queries {
        q.validate()?;
        let positives = curate_hard_positives(q, g, m, cfg.max_hop)?;
        if positives.is_empty() {
            skipped.push(q.qid.clone());
            continue;
        }
        n_pos += positives.len();
        let positives: Vec<Path> = if cfg.stop_decisions {
            positives.iter().map(Path::terminated).collect()
        } else {
            positives
        };
        let mut rng = query_rng(cfg.seed, &q.qid);
        let instances =
            curate_hard_negatives(&q.qid, &q.question, &positives, g, m, cfg.k, &mut rng)?;
        for mut inst in instances {
            if cfg.stop_decisions && inst.positive.hops[inst.hop - 1].relation != EOP {
                inst.hard
                    .push(inst.positive.prefix(inst.hop - 1).terminated());
            }
            records.push(InstanceRecord::from_instance(g, &inst));
        }
    }
    let n_neg = records.iter().map(|r| r.negatives().len()).sum();
    let manifest = MiningManifest {
        seed: cfg.seed,
        k: cfg.k,
        max_hop: cfg.max_hop,
        stop_decisions: cfg.stop_decisions,
        queries: queries.len(),
        skipped_queries: skipped,
        instances: records.len(),
        n_pos,
        n_neg,
        similarity: SimilarityInfo::of(m),
    };
    Ok(MinedCorpus { records, manifest })
}

pub const INSTANCES_FILE: &str = "instances.jsonl";
pub const MINING_MANIFEST_FILE: &str = "mining_manifest.json";

/// Mines the corpus and persists it as `instances.jsonl` plus a manifest.
pub fn build_training_set(
    queries: &[QueryRecord],
    g: &KnowledgeGraph,
    m: &dyn SimilarityModel,
    cfg: &MiningConfig,
    out_dir: &FsPath,
) -> Result<MinedCorpus> {
    let corpus = mine_corpus(queries, g, m, cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_jsonl(&out_dir.join(INSTANCES_FILE), &corpus.records)?;
    write_json(&out_dir.join(MINING_MANIFEST_FILE), &corpus.manifest)?;
    Ok(corpus)
}

pub fn write_jsonl<T: Serialize>(path: &FsPath, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for it in items {
        serde_json::to_writer(&mut buf, it).map_err(|e| Error::json(path, e))?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &FsPath) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
        .collect()
}

pub fn write_json<T: Serialize>(path: &FsPath, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &FsPath) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}
