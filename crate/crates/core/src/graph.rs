//! Knowledge graph storage, adjacency queries, shortest-path enumeration,
//! subgraph extraction and path serialization.
//!
//! The graph is a directed multigraph of `(head, relation, tail)` triples.
//! Every collection is kept in sorted order so that traversal results are
//! reproducible.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::io::BufRead;
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sentinel relation that terminates a path.
pub const EOP: &str = "[EOP]";
pub const SEP: &str = "[SEP]";
pub const QSP: &str = "[QSP]";
pub const PSP: &str = "[PSP]";
pub const CLS: &str = "[CLS]";

/// Marker strings that may not appear inside entity ids, labels or relation ids.
pub const RESERVED_MARKERS: [&str; 5] = [SEP, QSP, PSP, EOP, CLS];

const SEP_JOIN: &str = " [SEP] ";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triple {
    pub fn new(
        head: impl Into<String>,
        relation: impl Into<String>,
        tail: impl Into<String>,
    ) -> Self {
        Triple {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
        }
    }
}

fn check_token(kind: &str, value: &str) -> std::result::Result<(), String> {
    if value.is_empty() {
        return Err(format!("empty {kind}"));
    }
    if let Some(m) = RESERVED_MARKERS.iter().find(|m| value.contains(**m)) {
        return Err(format!("{kind} `{value}` contains reserved marker {m}"));
    }
    Ok(())
}

/// Incremental constructor for [`KnowledgeGraph`].
#[derive(Debug, Default)]
pub struct GraphBuilder {
    triples: BTreeSet<Triple>,
    labels: HashMap<String, String>,
    isolated: BTreeSet<String>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_triple(&mut self, head: &str, relation: &str, tail: &str) -> Result<&mut Self> {
        for (kind, v) in [("head", head), ("relation", relation), ("tail", tail)] {
            check_token(kind, v).map_err(Error::invalid)?;
        }
        self.triples.insert(Triple::new(head, relation, tail));
        Ok(self)
    }

    /// Registers an entity that may have no triples.
    pub fn add_entity(&mut self, id: &str) -> Result<&mut Self> {
        check_token("entity", id).map_err(Error::invalid)?;
        self.isolated.insert(id.to_string());
        Ok(self)
    }

    pub fn set_label(&mut self, id: &str, label: &str) -> Result<&mut Self> {
        check_token("label", label).map_err(Error::invalid)?;
        self.labels.insert(id.to_string(), label.to_string());
        Ok(self)
    }

    pub fn build(self) -> KnowledgeGraph {
        let mut entities: BTreeMap<String, Entity> = BTreeMap::new();
        let mut relations = BTreeSet::new();
        let mut adjacency: BTreeMap<String, BTreeMap<String, BTreeSet<String>>> = BTreeMap::new();
        let ensure = |id: &str, entities: &mut BTreeMap<String, Entity>| {
            if !entities.contains_key(id) {
                let label = self
                    .labels
                    .get(id)
                    .cloned()
                    .unwrap_or_else(|| id.to_string());
                entities.insert(
                    id.to_string(),
                    Entity {
                        id: id.to_string(),
                        label,
                    },
                );
            }
        };
        for id in &self.isolated {
            ensure(id, &mut entities);
        }
        for t in &self.triples {
            ensure(&t.head, &mut entities);
            ensure(&t.tail, &mut entities);
            relations.insert(t.relation.clone());
            adjacency
                .entry(t.head.clone())
                .or_default()
                .entry(t.relation.clone())
                .or_default()
                .insert(t.tail.clone());
        }
        KnowledgeGraph {
            entities,
            relations,
            triples: self.triples,
            adjacency,
        }
    }
}

/// Immutable directed multigraph with an out-adjacency index.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeGraph {
    entities: BTreeMap<String, Entity>,
    relations: BTreeSet<String>,
    triples: BTreeSet<Triple>,
    adjacency: BTreeMap<String, BTreeMap<String, BTreeSet<String>>>,
}

impl KnowledgeGraph {
    pub fn from_triples<'a, I>(triples: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str, &'a str)>,
    {
        let mut b = GraphBuilder::new();
        for (h, r, t) in triples {
            b.add_triple(h, r, t)?;
        }
        Ok(b.build())
    }

    /// Reads tab-separated `head<TAB>relation<TAB>tail` lines. Blank lines and
    /// `#` comments are skipped; duplicates collapse.
    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut b = GraphBuilder::new();
        for (idx, line) in reader.lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|e| Error::Ingest {
                line: lineno,
                reason: e.to_string(),
            })?;
            let trimmed = line.trim_end_matches(['\r', '\n']);
            if trimmed.trim().is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = trimmed.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Ingest {
                    line: lineno,
                    reason: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            }
            let [h, r, t] = [fields[0].trim(), fields[1].trim(), fields[2].trim()];
            for (kind, v) in [("head", h), ("relation", r), ("tail", t)] {
                check_token(kind, v).map_err(|reason| Error::Ingest {
                    line: lineno,
                    reason,
                })?;
            }
            b.add_triple(h, r, t)?;
        }
        Ok(b.build())
    }

    pub fn load(path: impl AsRef<FsPath>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(std::io::BufReader::new(f))
    }

    /// Triple file form of the graph. Isolated entities and labels are not kept.
    pub fn to_triple_file(&self) -> String {
        let mut out = String::new();
        for t in &self.triples {
            out.push_str(&format!("{}\t{}\t{}\n", t.head, t.relation, t.tail));
        }
        out
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_triples(&self) -> usize {
        self.triples.len()
    }

    pub fn adjacency_len(&self) -> usize {
        self.adjacency
            .values()
            .flat_map(|by_rel| by_rel.values())
            .map(BTreeSet::len)
            .sum()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entities.contains_key(id)
    }

    pub fn entity(&self, id: &str) -> Result<&Entity> {
        self.entities
            .get(id)
            .ok_or_else(|| Error::UnknownEntity(id.to_string()))
    }

    pub fn label<'a>(&'a self, id: &'a str) -> &'a str {
        self.entities
            .get(id)
            .map(|e| e.label.as_str())
            .unwrap_or(id)
    }

    pub fn entities(&self) -> impl Iterator<Item = &Entity> {
        self.entities.values()
    }

    pub fn relations(&self) -> &BTreeSet<String> {
        &self.relations
    }

    pub fn triples(&self) -> impl Iterator<Item = &Triple> {
        self.triples.iter()
    }

    pub fn has_triple(&self, head: &str, relation: &str, tail: &str) -> bool {
        self.adjacency
            .get(head)
            .and_then(|m| m.get(relation))
            .is_some_and(|tails| tails.contains(tail))
    }

    /// Relation ids on outgoing triples of `entity`, sorted.
    pub fn relations_of(&self, entity: &str) -> Result<Vec<&str>> {
        self.entity(entity)?;
        Ok(self
            .adjacency
            .get(entity)
            .map(|m| m.keys().map(String::as_str).collect())
            .unwrap_or_default())
    }

    /// Tail entities of `(entity, relation, ·)`, sorted.
    pub fn tails(&self, entity: &str, relation: &str) -> Result<Vec<&str>> {
        self.entity(entity)?;
        Ok(self
            .adjacency
            .get(entity)
            .and_then(|m| m.get(relation))
            .map(|s| s.iter().map(String::as_str).collect())
            .unwrap_or_default())
    }

    pub fn out_degree(&self, entity: &str) -> usize {
        self.adjacency.get(entity).map_or(0, BTreeMap::len)
    }

    /// Forward BFS distances from all `sources`, up to `limit` hops.
    fn bfs_distances(&self, sources: &[&str], limit: usize) -> HashMap<String, usize> {
        let mut dist: HashMap<String, usize> = HashMap::new();
        let mut queue = VecDeque::new();
        for s in sources {
            if dist.insert(s.to_string(), 0).is_none() {
                queue.push_back(s.to_string());
            }
        }
        while let Some(e) = queue.pop_front() {
            let d = dist[&e];
            if d >= limit {
                continue;
            }
            if let Some(by_rel) = self.adjacency.get(&e) {
                for tails in by_rel.values() {
                    for t in tails {
                        if !dist.contains_key(t) {
                            dist.insert(t.clone(), d + 1);
                            queue.push_back(t.clone());
                        }
                    }
                }
            }
        }
        dist
    }

    /// All minimal-length paths from `topic` to any of `answers`, at most
    /// `max_hop` hops long. Sorted by relation signature, then entity ids.
    pub fn shortest_paths(
        &self,
        topic: &str,
        answers: &BTreeSet<String>,
        max_hop: usize,
    ) -> Result<Vec<Path>> {
        self.entity(topic)?;
        if answers.contains(topic) {
            return Ok(vec![Path::new(topic)]);
        }
        let dist = self.bfs_distances(&[topic], max_hop);
        let Some(best) = answers.iter().filter_map(|a| dist.get(a)).min().copied() else {
            return Ok(Vec::new());
        };
        let mut out = Vec::new();
        let mut stack = vec![Path::new(topic)];
        while let Some(p) = stack.pop() {
            let depth = p.hop_count();
            let here = p.terminal_entity().to_string();
            if depth == best {
                if answers.contains(&here) {
                    out.push(p);
                }
                continue;
            }
            if let Some(by_rel) = self.adjacency.get(&here) {
                for (rel, tails) in by_rel {
                    for t in tails {
                        // Stay on BFS layers: shortest paths only step to distance + 1.
                        if dist.get(t) == Some(&(depth + 1)) {
                            stack.push(p.extended(rel, Some(t)));
                        }
                    }
                }
            }
        }
        out.sort_by(|a, b| a.order_key().cmp(&b.order_key()));
        Ok(out)
    }

    /// Induced graph over all triples whose head lies within `hops - 1` forward
    /// steps of some topic. Topics are kept even when isolated.
    pub fn extract_subgraph(
        &self,
        topics: &BTreeSet<String>,
        hops: usize,
    ) -> Result<KnowledgeGraph> {
        if hops == 0 {
            return Err(Error::invalid("hops must be >= 1"));
        }
        if topics.is_empty() {
            return Err(Error::invalid("topic set is empty"));
        }
        for t in topics {
            self.entity(t)?;
        }
        let sources: Vec<&str> = topics.iter().map(String::as_str).collect();
        let dist = self.bfs_distances(&sources, hops);
        let mut b = GraphBuilder::new();
        for t in topics {
            b.add_entity(t)?;
        }
        for t in &self.triples {
            if dist.get(&t.head).is_some_and(|d| *d < hops) {
                b.add_triple(&t.head, &t.relation, &t.tail)?;
            }
        }
        for e in self.entities.values() {
            if e.label != e.id {
                b.labels.insert(e.id.clone(), e.label.clone());
            }
        }
        Ok(b.build())
    }

    /// Checks that every non-terminal hop of `p` is a triple of this graph.
    pub fn validate_path(&self, p: &Path) -> Result<()> {
        self.entity(&p.topic)?;
        let mut here = p.topic.as_str();
        for (i, hop) in p.hops.iter().enumerate() {
            match (&hop.entity, hop.relation == EOP) {
                (None, true) if i + 1 == p.hops.len() => return Ok(()),
                (Some(next), false) if self.has_triple(here, &hop.relation, next) => here = next,
                _ => {
                    return Err(Error::invalid(format!(
                        "hop {i} ({} -{}-> {:?}) is not in the graph",
                        here, hop.relation, hop.entity
                    )))
                }
            }
        }
        Ok(())
    }

    /// Renders `p` with the topic's label.
    pub fn serialize_path(&self, p: &Path) -> String {
        serialize_relations(
            self.label(&p.topic),
            p.hops.iter().map(|h| h.relation.as_str()),
        )
    }
}

/// `label [SEP] r1 [SEP] r2 ...`
pub fn serialize_relations<'a, I>(label: &str, relations: I) -> String
where
    I: IntoIterator<Item = &'a str>,
{
    let mut out = label.to_string();
    for r in relations {
        out.push_str(SEP_JOIN);
        out.push_str(r);
    }
    out
}

/// Inverse of [`serialize_relations`]: returns the topic label and relation ids
/// (including a trailing `[EOP]` if present).
pub fn parse_serialized(text: &str) -> (String, Vec<String>) {
    let mut parts = text.split(SEP_JOIN);
    let label = parts.next().unwrap_or_default().to_string();
    (label, parts.map(str::to_string).collect())
}

/// Relation signature of a serialized path, `[EOP]` excluded.
pub fn signature_of_serialized(text: &str) -> Signature {
    let (_, rels) = parse_serialized(text);
    Signature(rels.into_iter().filter(|r| r != EOP).collect())
}

/// Ordered relation ids of a path, excluding the `[EOP]` terminator. Frequency
/// counting and deduplication work on this topic-free key.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Signature(pub Vec<String>);

impl fmt::Display for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("<empty>");
        }
        f.write_str(&self.0.join(" -> "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Hop {
    pub relation: String,
    /// Tail entity; `None` for the `[EOP]` terminator and for truncated
    /// negative hops whose relation need not exist at the frontier.
    pub entity: Option<String>,
}

/// A walk `topic -r1-> e1 ... -rl-> el`, optionally terminated by `[EOP]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Path {
    pub topic: String,
    pub hops: Vec<Hop>,
}

impl Path {
    pub fn new(topic: impl Into<String>) -> Self {
        Path {
            topic: topic.into(),
            hops: Vec::new(),
        }
    }

    pub fn extended(&self, relation: &str, entity: Option<&str>) -> Path {
        let mut p = self.clone();
        p.hops.push(Hop {
            relation: relation.to_string(),
            entity: entity.map(str::to_string),
        });
        p
    }

    pub fn terminated(&self) -> Path {
        self.extended(EOP, None)
    }

    pub fn is_terminated(&self) -> bool {
        self.hops.last().is_some_and(|h| h.relation == EOP)
    }

    /// Number of hops, not counting a terminal `[EOP]`.
    pub fn hop_count(&self) -> usize {
        self.hops.iter().filter(|h| h.relation != EOP).count()
    }

    /// Last entity reached (the topic for a zero-hop path).
    pub fn terminal_entity(&self) -> &str {
        self.hops
            .iter()
            .rev()
            .find_map(|h| h.entity.as_deref())
            .unwrap_or(&self.topic)
    }

    pub fn relations(&self) -> impl Iterator<Item = &str> {
        self.hops.iter().map(|h| h.relation.as_str())
    }

    pub fn signature(&self) -> Signature {
        Signature(
            self.relations()
                .filter(|r| *r != EOP)
                .map(str::to_string)
                .collect(),
        )
    }

    /// Prefix holding the first `n` hops.
    pub fn prefix(&self, n: usize) -> Path {
        Path {
            topic: self.topic.clone(),
            hops: self.hops[..n.min(self.hops.len())].to_vec(),
        }
    }

    /// Sort key: relation signature first, then entity ids.
    pub fn order_key(&self) -> (Vec<&str>, Vec<Option<&str>>, &str) {
        (
            self.relations().collect(),
            self.hops.iter().map(|h| h.entity.as_deref()).collect(),
            &self.topic,
        )
    }
}
