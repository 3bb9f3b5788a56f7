//! Generators and independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use kgpath::graph::{KnowledgeGraph, Path, EOP};
use kgpath::inference::ScoredPath;
use kgpath::scorer::PathScorer;
use kgpath::similarity::SimilarityModel;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const RELATION_POOL: [&str; 8] = [
    "people.person.nationality",
    "people.person.spouse",
    "location.country.capital",
    "location.location.contains",
    "film.film.directed_by",
    "film.actor.film",
    "music.artist.genre",
    "sports.team.roster",
];

/// Random multigraph over `e0 .. e{n-1}` with `edges` triples drawn from the
/// first `relations` names of [`RELATION_POOL`].
pub fn random_graph(
    rng: &mut ChaCha8Rng,
    n: usize,
    edges: usize,
    relations: usize,
) -> KnowledgeGraph {
    let mut triples = BTreeSet::new();
    for _ in 0..edges {
        let h = rng.gen_range(0..n);
        let t = rng.gen_range(0..n);
        let r = RELATION_POOL[rng.gen_range(0..relations)];
        triples.insert((format!("e{h}"), r.to_string(), format!("e{t}")));
    }
    // every entity appears at least once
    for i in 0..n {
        let r = RELATION_POOL[rng.gen_range(0..relations)];
        triples.insert((format!("e{i}"), r.to_string(), format!("e{}", (i + 1) % n)));
    }
    KnowledgeGraph::from_triples(
        triples
            .iter()
            .map(|(h, r, t)| (h.as_str(), r.as_str(), t.as_str())),
    )
    .expect("valid random graph")
}

/// Largest number of distinct relations leaving any entity.
pub fn max_relation_fanout(g: &KnowledgeGraph) -> usize {
    g.entities()
        .map(|e| g.relations_of(&e.id).map(|r| r.len()).unwrap_or(0))
        .max()
        .unwrap_or(0)
}

/// Deterministic scorer: a hash of the query and path text quantized to ten
/// levels, so ties are common.
pub struct HashScorer;

impl PathScorer for HashScorer {
    fn score_paths(&self, query: &str, paths: &[String]) -> kgpath::Result<Vec<f64>> {
        Ok(paths
            .iter()
            .map(|p| {
                let mut h: u64 = 1469598103934665603;
                for b in query.bytes().chain([0u8]).chain(p.bytes()) {
                    h = (h ^ u64::from(b)).wrapping_mul(1099511628211);
                }
                ((h >> 11) % 10) as f64 / 10.0
            })
            .collect())
    }
}

fn score_one(scorer: &dyn PathScorer, query: &str, text: &str) -> f64 {
    scorer.score_paths(query, &[text.to_string()]).unwrap()[0]
}

/// Every path the search can finish when no extension is ever pruned: each
/// `[EOP]` stop below `max_hop` and each full-length walk, carrying the score
/// of its last step.
pub fn exhaustive_paths(
    g: &KnowledgeGraph,
    query: &str,
    topics: &[String],
    scorer: &dyn PathScorer,
    max_hop: usize,
) -> Vec<ScoredPath> {
    #[allow(clippy::too_many_arguments)]
    fn walk(
        g: &KnowledgeGraph,
        query: &str,
        scorer: &dyn PathScorer,
        max_hop: usize,
        path: Path,
        text: String,
        score: f64,
        out: &mut Vec<ScoredPath>,
    ) {
        if path.hop_count() == max_hop {
            out.push(ScoredPath { path, text, score });
            return;
        }
        let here = path.terminal_entity().to_string();
        let stop = path.terminated();
        let stop_text = g.serialize_path(&stop);
        out.push(ScoredPath {
            score: score_one(scorer, query, &stop_text),
            path: stop,
            text: stop_text,
        });
        for rel in g.relations_of(&here).unwrap() {
            let text = g.serialize_path(&path.extended(rel, None));
            let s = score_one(scorer, query, &text);
            for tail in g.tails(&here, rel).unwrap() {
                walk(
                    g,
                    query,
                    scorer,
                    max_hop,
                    path.extended(rel, Some(tail)),
                    text.clone(),
                    s,
                    out,
                );
            }
        }
    }
    let mut out = Vec::new();
    for t in topics {
        let root = Path::new(t.as_str());
        let text = g.serialize_path(&root);
        walk(g, query, scorer, max_hop, root, text, 1.0, &mut out);
    }
    out.sort_by(reference_order);
    out
}

/// Score descending, serialization ascending, then relations, entity ids
/// and topic.
pub fn reference_order(a: &ScoredPath, b: &ScoredPath) -> Ordering {
    let key = |p: &Path| {
        (
            p.hops
                .iter()
                .map(|h| h.relation.clone())
                .collect::<Vec<_>>(),
            p.hops.iter().map(|h| h.entity.clone()).collect::<Vec<_>>(),
            p.topic.clone(),
        )
    };
    b.score
        .partial_cmp(&a.score)
        .unwrap()
        .then_with(|| a.text.cmp(&b.text))
        .then_with(|| key(&a.path).cmp(&key(&b.path)))
}

/// Every walk of exactly `len` hops from `topic`, revisits allowed.
pub fn all_walks(g: &KnowledgeGraph, topic: &str, len: usize) -> Vec<Path> {
    let mut layer = vec![Path::new(topic)];
    for _ in 0..len {
        let mut next = Vec::new();
        for p in &layer {
            let here = p.terminal_entity().to_string();
            for rel in g.relations_of(&here).unwrap() {
                for tail in g.tails(&here, rel).unwrap() {
                    next.push(p.extended(rel, Some(tail)));
                }
            }
        }
        layer = next;
    }
    layer
}

/// Brute-force positive curation: enumerate walks by increasing length until
/// one reaches an answer, then keep those at or above the mean similarity,
/// one per (topic, signature).
pub fn brute_force_positives(
    g: &KnowledgeGraph,
    m: &dyn SimilarityModel,
    question: &str,
    topics: &[String],
    answers: &BTreeSet<String>,
    max_hop: usize,
) -> Vec<Path> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for topic in topics {
        let mut hits = Vec::new();
        for len in 0..=max_hop {
            hits = all_walks(g, topic, len)
                .into_iter()
                .filter(|p| answers.contains(p.terminal_entity()))
                .collect();
            if !hits.is_empty() {
                break;
            }
        }
        if hits.is_empty() {
            continue;
        }
        hits.sort_by(|a, b| {
            let ka = (
                a.signature(),
                a.hops.iter().map(|h| h.entity.clone()).collect::<Vec<_>>(),
            );
            let kb = (
                b.signature(),
                b.hops.iter().map(|h| h.entity.clone()).collect::<Vec<_>>(),
            );
            ka.cmp(&kb)
        });
        hits.dedup();
        let sims: Vec<f64> = hits
            .iter()
            .map(|p| m.sim(question, &g.serialize_path(p)).unwrap())
            .collect();
        let mean = sims.iter().sum::<f64>() / sims.len() as f64;
        for (p, s) in hits.into_iter().zip(sims) {
            if s >= mean - 1e-12 && seen.insert((p.topic.clone(), p.signature())) {
                out.push(p);
            }
        }
    }
    out
}

/// Sibling relations of the `hop`-th step of `p` ranked by similarity to the
/// true relation (ties by name), first `k`.
pub fn brute_force_hard(
    g: &KnowledgeGraph,
    m: &dyn SimilarityModel,
    p: &Path,
    hop: usize,
    k: usize,
) -> Vec<String> {
    let frontier = if hop == 0 {
        p.topic.clone()
    } else {
        p.hops[hop - 1].entity.clone().unwrap()
    };
    let target = &p.hops[hop].relation;
    let mut ranked: Vec<(f64, String)> = g
        .relations_of(&frontier)
        .unwrap()
        .into_iter()
        .filter(|r| r != target && *r != EOP)
        .map(|r| (m.sim(target, r).unwrap(), r.to_string()))
        .collect();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
    ranked.into_iter().take(k).map(|(_, r)| r).collect()
}

/// Independent tally of values.
pub fn tally<T: Ord + Clone>(items: impl IntoIterator<Item = T>) -> BTreeMap<T, usize> {
    let mut m = BTreeMap::new();
    for i in items {
        *m.entry(i).or_insert(0) += 1;
    }
    m
}
