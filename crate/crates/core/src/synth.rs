//! Seeded synthetic KG + QA corpus with planted lexical shortcuts and a
//! power-law distribution over relation paths.
//!
//! An intent pairs an attribute with a qualifier. The question names both
//! through cue words; the graph names them through a disjoint vocabulary.
//! The attribute picks the first relation from the topic, the qualifier
//! picks a second relation from the node reached (or stopping there, for
//! qualifier 0). Each topic also carries a distractor relation spelled with
//! the question's cue words, which wins on lexical overlap but leads to a
//! wrong entity, plus other attributes' first relations.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path as FsPath;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    serialize_relations, signature_of_serialized, KnowledgeGraph, Signature, Triple,
};
use crate::mining::{write_json, write_jsonl, QueryRecord};
use crate::similarity::SimilarityModel;

pub const GRAPH_FILE: &str = "graph.tsv";
pub const QA_FILE: &str = "qa.jsonl";
pub const GOLD_FILE: &str = "gold_paths.jsonl";

const TEMPLATES: [&str; 3] = [
    "what {cue} belongs to {topic}",
    "which {cue} is tied to {topic}",
    "name the {cue} of {topic}",
];
const LEAF_RELATION: &str = "meta.kind";
const KINDS: usize = 4;
/// Words per half of a topic name; names are `first_last` pairs.
const NAME_POOL: usize = 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub queries: usize,
    pub attributes: usize,
    /// Qualifier 0 ends the path after one hop; the others add a second.
    pub qualifiers: usize,
    /// Exponent of the power law over intent frequencies in the train split.
    pub zipf_exponent: f64,
    /// Other attributes' first relations attached to each topic.
    pub noise_relations: usize,
    /// Test queries per intent; the rest follow the power law and are tagged
    /// `train`.
    pub test_per_intent: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            queries: 200,
            attributes: 4,
            qualifiers: 3,
            zipf_exponent: 1.5,
            noise_relations: 2,
            test_per_intent: 3,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn intents(&self) -> usize {
        self.attributes * self.qualifiers
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Intent {
    pub attribute: usize,
    pub qualifier: usize,
    pub cue: [String; 2],
    pub relations: Vec<String>,
    pub distractor: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldPath {
    pub qid: String,
    pub intent: usize,
    pub path: String,
    pub distractor_path: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub intents: Vec<Intent>,
    pub triples: Vec<Triple>,
    pub queries: Vec<QueryRecord>,
    pub gold: Vec<GoldPath>,
}

/// Generator self-checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthStats {
    /// Share of queries where the distractor path is more similar to the
    /// question than the correct path.
    pub distractor_win_rate: f64,
    /// Max/min count over gold path signatures.
    pub frequency_ratio: f64,
    pub signature_counts: BTreeMap<String, usize>,
}

struct Words {
    rng: ChaCha8Rng,
    used: BTreeSet<String>,
}

impl Words {
    fn next(&mut self) -> String {
        const C: &[u8] = b"bdfgklmnprstvz";
        const V: &[u8] = b"aeiou";
        loop {
            let syllables = self.rng.gen_range(2..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push(C[self.rng.gen_range(0..C.len())] as char);
                w.push(V[self.rng.gen_range(0..V.len())] as char);
            }
            if self.rng.gen_bool(0.5) {
                w.push(C[self.rng.gen_range(0..C.len())] as char);
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    fn take(&mut self, n: usize) -> Vec<String> {
        (0..n).map(|_| self.next()).collect()
    }
}

fn zipf_counts(total: usize, n: usize, s: f64) -> Vec<usize> {
    let raw: Vec<f64> = (1..=n).map(|k| (k as f64).powf(-s)).collect();
    let z: f64 = raw.iter().sum();
    let mut counts: Vec<usize> = raw
        .iter()
        .map(|r| ((r / z) * total as f64).floor().max(1.0) as usize)
        .collect();
    // hand out the rounding remainder from the head
    let mut i = 0;
    while counts.iter().sum::<usize>() < total {
        counts[i % n] += 1;
        i += 1;
    }
    while counts.iter().sum::<usize>() > total {
        let j = counts
            .iter()
            .enumerate()
            .max_by_key(|(_, c)| **c)
            .map(|(j, _)| j)
            .unwrap_or(0);
        counts[j] -= 1;
    }
    counts
}

/// Attaches `node -qualifier-> node.q<b>` for every two-hop qualifier plus a
/// leaf relation, so that stopping and continuing are both possible.
fn hub(
    node: &str,
    qualifier_relations: &[String],
    rng: &mut ChaCha8Rng,
    triples: &mut Vec<Triple>,
) {
    for (b, rel) in qualifier_relations.iter().enumerate().skip(1) {
        let tail = format!("{node}.q{b}");
        triples.push(Triple::new(node, rel, &tail));
        leaf(&tail, rng, triples);
    }
    leaf(node, rng, triples);
}

fn leaf(node: &str, rng: &mut ChaCha8Rng, triples: &mut Vec<Triple>) {
    triples.push(Triple::new(
        node,
        LEAF_RELATION,
        format!("kind.{}", rng.gen_range(0..KINDS)),
    ));
}

impl SynthCorpus {
    pub fn generate(cfg: &SynthConfig) -> Result<Self> {
        if cfg.attributes < 2 || cfg.qualifiers < 1 {
            return Err(Error::invalid(
                "need at least two attributes and one qualifier",
            ));
        }
        let n_intents = cfg.intents();
        let n_test = n_intents * cfg.test_per_intent;
        if cfg.queries < n_test + n_intents {
            return Err(Error::invalid(format!(
                "{} queries cannot cover {n_intents} intents with {} test queries each",
                cfg.queries, cfg.test_per_intent
            )));
        }
        if cfg.noise_relations >= cfg.attributes {
            return Err(Error::invalid(
                "noise_relations must be below the attribute count",
            ));
        }
        let mut words = Words {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            used: [
                "what", "which", "belongs", "to", "is", "tied", "name", "the", "of", "meta", "kind",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 1);

        let attribute_cues = words.take(cfg.attributes);
        let qualifier_cues = words.take(cfg.qualifiers);
        let first_relations: Vec<String> = (0..cfg.attributes)
            .map(|_| format!("{}.{}", words.next(), words.next()))
            .collect();
        let qualifier_domain = words.next();
        // index 0 is unused: qualifier 0 stops after the first hop
        let qualifier_relations: Vec<String> = (0..cfg.qualifiers)
            .map(|_| format!("{qualifier_domain}.{}", words.next()))
            .collect();
        let mut intents = Vec::with_capacity(n_intents);
        for a in 0..cfg.attributes {
            for b in 0..cfg.qualifiers {
                let cue = [attribute_cues[a].clone(), qualifier_cues[b].clone()];
                let mut relations = vec![first_relations[a].clone()];
                if b > 0 {
                    relations.push(qualifier_relations[b].clone());
                }
                let distractor = format!("{}.{}_{}", words.next(), cue[0], cue[1]);
                intents.push(Intent {
                    attribute: a,
                    qualifier: b,
                    cue,
                    relations,
                    distractor,
                });
            }
        }

        // frequency ranks are assigned to intents at random
        let mut rank: Vec<usize> = (0..n_intents).collect();
        rank.shuffle(&mut rng);
        let by_rank = zipf_counts(cfg.queries - n_test, n_intents, cfg.zipf_exponent);
        let train_counts: Vec<usize> = (0..n_intents).map(|i| by_rank[rank[i]]).collect();
        let mut slots: Vec<(usize, &str)> = Vec::with_capacity(cfg.queries);
        for (i, c) in train_counts.iter().enumerate() {
            slots.extend(std::iter::repeat_n((i, "train"), *c));
            slots.extend(std::iter::repeat_n((i, "test"), cfg.test_per_intent));
        }
        slots.shuffle(&mut rng);

        let first = words.take(NAME_POOL);
        let last = words.take(NAME_POOL);
        let mut names: Vec<String> = first
            .iter()
            .flat_map(|a| last.iter().map(move |b| format!("{a}_{b}")))
            .collect();
        if names.len() < slots.len() {
            return Err(Error::invalid("too many queries for the topic name pool"));
        }
        names.shuffle(&mut rng);
        let mut attribute_totals = vec![0.0; cfg.attributes];
        for (i, c) in train_counts.iter().enumerate() {
            attribute_totals[intents[i].attribute] += (c + cfg.test_per_intent) as f64;
        }

        let mut triples = Vec::new();
        let mut queries = Vec::with_capacity(slots.len());
        let mut gold = Vec::with_capacity(slots.len());
        for (n, (i, split)) in slots.iter().enumerate() {
            let intent = &intents[*i];
            let topic = names[n].clone();

            let node = format!("{topic}.hub");
            triples.push(Triple::new(&topic, &intent.relations[0], &node));
            hub(&node, &qualifier_relations, &mut rng, &mut triples);
            let answer = if intent.qualifier == 0 {
                node.clone()
            } else {
                format!("{node}.q{}", intent.qualifier)
            };
            let alt = format!("{topic}.alt");
            triples.push(Triple::new(&topic, &intent.distractor, &alt));
            leaf(&alt, &mut rng, &mut triples);

            // noise: other attributes' first relations, drawn by frequency
            let mut others: Vec<usize> = (0..cfg.attributes)
                .filter(|a| *a != intent.attribute)
                .collect();
            for k in 0..cfg.noise_relations {
                let a = *others
                    .choose_weighted(&mut rng, |a| attribute_totals[*a])
                    .map_err(|e| Error::invalid(e.to_string()))?;
                others.retain(|o| *o != a);
                let e = format!("{topic}.n{k}");
                triples.push(Triple::new(&topic, &first_relations[a], &e));
                hub(&e, &qualifier_relations, &mut rng, &mut triples);
            }

            let template = TEMPLATES[rng.gen_range(0..TEMPLATES.len())];
            let question = template
                .replace("{cue}", &format!("{} {}", intent.cue[0], intent.cue[1]))
                .replace("{topic}", &topic);
            let qid = format!("syn-{n:03}");
            queries.push(QueryRecord {
                qid: qid.clone(),
                question,
                topics: vec![topic.clone()],
                answers: vec![answer],
                split: split.to_string(),
            });
            gold.push(GoldPath {
                qid,
                intent: *i,
                path: serialize_relations(&topic, intent.relations.iter().map(String::as_str)),
                distractor_path: serialize_relations(&topic, [intent.distractor.as_str()]),
            });
        }
        Ok(SynthCorpus {
            config: cfg.clone(),
            intents,
            triples,
            queries,
            gold,
        })
    }

    pub fn graph(&self) -> Result<KnowledgeGraph> {
        KnowledgeGraph::from_triples(
            self.triples
                .iter()
                .map(|t| (t.head.as_str(), t.relation.as_str(), t.tail.as_str())),
        )
    }

    /// Counts of gold path signatures, optionally restricted to one split.
    pub fn signature_counts(&self, split: Option<&str>) -> BTreeMap<Signature, usize> {
        let mut counts = BTreeMap::new();
        for (q, g) in self.queries.iter().zip(&self.gold) {
            if split.is_none_or(|s| q.split == s) {
                *counts.entry(signature_of_serialized(&g.path)).or_insert(0) += 1;
            }
        }
        counts
    }

    pub fn stats(&self, m: &dyn SimilarityModel) -> Result<SynthStats> {
        let mut wins = 0usize;
        for (q, g) in self.queries.iter().zip(&self.gold) {
            if m.sim(&q.question, &g.distractor_path)? > m.sim(&q.question, &g.path)? {
                wins += 1;
            }
        }
        let counts = self.signature_counts(None);
        let max = counts.values().max().copied().unwrap_or(0) as f64;
        let min = counts.values().min().copied().unwrap_or(0) as f64;
        Ok(SynthStats {
            distractor_win_rate: wins as f64 / self.queries.len().max(1) as f64,
            frequency_ratio: if min > 0.0 { max / min } else { 0.0 },
            signature_counts: counts
                .into_iter()
                .map(|(s, c)| (s.to_string(), c))
                .collect(),
        })
    }

    pub fn write(&self, dir: &FsPath, stats: &SynthStats) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let g = self.graph()?;
        let path = dir.join(GRAPH_FILE);
        std::fs::write(&path, g.to_triple_file()).map_err(|e| Error::io(&path, e))?;
        write_jsonl(&dir.join(QA_FILE), &self.queries)?;
        write_jsonl(&dir.join(GOLD_FILE), &self.gold)?;
        write_json(&dir.join("synth_stats.json"), stats)
    }
}
