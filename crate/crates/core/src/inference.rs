//! Scorer-guided beam search over the graph, top-K path selection and answer
//! generation.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{KnowledgeGraph, Path, EOP};
use crate::mining::QueryRecord;
use crate::scorer::PathScorer;
use crate::similarity::SimilarityModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// Relations kept per expanded item.
    pub beam_width: usize,
    /// Paths handed to the generator.
    pub top_k: usize,
    pub max_hop: usize,
    /// Optional limit on items admitted per hop level and topic.
    pub frontier_cap: Option<usize>,
    pub generator: String,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            beam_width: 3,
            top_k: 3,
            max_hop: 2,
            frontier_cap: None,
            generator: "mock".to_string(),
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 || self.top_k == 0 || self.max_hop == 0 {
            return Err(Error::invalid("beam_width, top_k and max_hop must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPath {
    pub path: Path,
    pub text: String,
    pub score: f64,
}

/// Descending score, then ascending serialization, then entity ids.
pub fn rank_order(a: &ScoredPath, b: &ScoredPath) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.text.cmp(&b.text))
        .then_with(|| a.path.order_key().cmp(&b.path.order_key()))
}

struct BeamItem {
    entity: String,
    item: ScoredPath,
}

impl PartialEq for BeamItem {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for BeamItem {}

impl PartialOrd for BeamItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for BeamItem {
    // max-heap: the best-ranked item must compare greatest
    fn cmp(&self, other: &Self) -> Ordering {
        rank_order(&other.item, &self.item)
    }
}

/// Expands paths from every topic. Each popped item either finishes (at
/// `max_hop`) or scores its extensions by every outgoing relation plus
/// `[EOP]` and keeps the best `beam_width`; `[EOP]` finishes the path and any
/// other relation enqueues one item per tail. Returns all finished paths,
/// best first.
pub fn beam_search(
    g: &KnowledgeGraph,
    query: &str,
    topics: &[String],
    scorer: &dyn PathScorer,
    cfg: &InferenceConfig,
) -> Result<Vec<ScoredPath>> {
    cfg.validate()?;
    let mut finished = Vec::new();
    for topic in topics {
        g.entity(topic)?;
        let mut admitted: HashMap<usize, usize> = HashMap::new();
        let mut queue = BinaryHeap::new();
        let root = Path::new(topic.as_str());
        queue.push(BeamItem {
            entity: topic.clone(),
            item: ScoredPath {
                text: g.serialize_path(&root),
                path: root,
                score: 1.0,
            },
        });
        while let Some(BeamItem { entity, item }) = queue.pop() {
            if item.path.hop_count() >= cfg.max_hop {
                finished.push(item);
                continue;
            }
            let mut relations: Vec<&str> = g.relations_of(&entity)?;
            relations.push(EOP);
            let texts: Vec<String> = relations
                .iter()
                .map(|r| g.serialize_path(&item.path.extended(r, None)))
                .collect();
            let scores = scorer.score_paths(query, &texts)?;
            let mut ranked: Vec<(&str, String, f64)> = relations
                .into_iter()
                .zip(texts)
                .zip(scores)
                .map(|((r, t), s)| (r, t, s))
                .collect();
            ranked.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| a.1.cmp(&b.1)));
            ranked.truncate(cfg.beam_width);
            for (rel, text, score) in ranked {
                if rel == EOP {
                    finished.push(ScoredPath {
                        path: item.path.terminated(),
                        text,
                        score,
                    });
                    continue;
                }
                let level = item.path.hop_count() + 1;
                for tail in g.tails(&entity, rel)? {
                    if let Some(cap) = cfg.frontier_cap {
                        let n = admitted.entry(level).or_default();
                        if *n >= cap {
                            break;
                        }
                        *n += 1;
                    }
                    queue.push(BeamItem {
                        entity: tail.to_string(),
                        item: ScoredPath {
                            path: item.path.extended(rel, Some(tail)),
                            text: text.clone(),
                            score,
                        },
                    });
                }
            }
        }
    }
    finished.sort_by(rank_order);
    Ok(finished)
}

/// The `k` best finished paths after collapsing duplicates that share topic,
/// relation signature and terminal entity.
pub fn topk_select(finished: &[ScoredPath], k: usize) -> Result<Vec<ScoredPath>> {
    if finished.is_empty() {
        return Err(Error::invalid("no finished paths to select from"));
    }
    let mut sorted: Vec<&ScoredPath> = finished.iter().collect();
    sorted.sort_by(|a, b| rank_order(a, b));
    let mut seen = HashSet::new();
    Ok(sorted
        .into_iter()
        .filter(|p| {
            seen.insert((
                p.path.topic.clone(),
                p.path.signature(),
                p.path.terminal_entity().to_string(),
            ))
        })
        .take(k)
        .cloned()
        .collect())
}

/// Ranks paths by similarity between the query and the path text; the
/// frozen similarity-only baseline.
pub struct SimilarityScorer<'a> {
    pub model: &'a dyn SimilarityModel,
}

impl PathScorer for SimilarityScorer<'_> {
    fn score_paths(&self, query: &str, paths: &[String]) -> Result<Vec<f64>> {
        paths.iter().map(|p| self.model.sim(query, p)).collect()
    }
}

/// A path rendered with the entities it visits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedPath {
    pub serialized: String,
    pub rendered: String,
    pub terminal: String,
}

impl GroundedPath {
    pub fn new(g: &KnowledgeGraph, p: &Path) -> Self {
        let mut rendered = g.label(&p.topic).to_string();
        for hop in &p.hops {
            if hop.relation == EOP {
                continue;
            }
            rendered.push_str(&format!(" -> {}", hop.relation));
            if let Some(e) = &hop.entity {
                rendered.push_str(&format!(" -> {}", g.label(e)));
            }
        }
        GroundedPath {
            serialized: g.serialize_path(p),
            rendered,
            terminal: g.label(p.terminal_entity()).to_string(),
        }
    }
}

pub const PROMPT_TEMPLATE_V1: &str = include_str!("../assets/prompt_v1.txt");

pub fn render_prompt(template: &str, question: &str, paths: &[GroundedPath]) -> String {
    let listing: Vec<String> = paths
        .iter()
        .enumerate()
        .map(|(i, p)| format!("{}. {}", i + 1, p.rendered))
        .collect();
    template
        .replace("{question}", question)
        .replace("{paths}", &listing.join("\n"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: usize,
    /// Structured view of the paths in the prompt.
    pub paths: Vec<GroundedPath>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub text: String,
    pub latency_secs: f64,
}

pub trait AnswerGenerator: Sync {
    fn id(&self) -> &str;
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse>;
}

/// Answers with the terminal entity of the first path.
#[derive(Debug, Default, Clone, Copy)]
pub struct MockGenerator;

impl AnswerGenerator for MockGenerator {
    fn id(&self) -> &str {
        "mock"
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse> {
        let start = Instant::now();
        let first = req.paths.first().ok_or_else(|| Error::Generator {
            latency_secs: 0.0,
            detail: "no paths in request".into(),
        })?;
        Ok(GenerationResponse {
            text: first.terminal.clone(),
            latency_secs: start.elapsed().as_secs_f64(),
        })
    }
}

/// OpenAI-style chat-completion client.
pub struct HttpChatGenerator {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    timeout: Duration,
}

impl HttpChatGenerator {
    pub fn new(endpoint: &str, model: &str, api_key: Option<String>, timeout: Duration) -> Self {
        HttpChatGenerator {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key,
            timeout,
        }
    }

    /// Reads `KGPATH_LLM_URL`, `KGPATH_LLM_MODEL` and optionally `KGPATH_LLM_KEY`.
    pub fn from_env() -> Result<Self> {
        let var = |k: &str| std::env::var(k).map_err(|_| Error::invalid(format!("{k} is not set")));
        Ok(Self::new(
            &var("KGPATH_LLM_URL")?,
            &var("KGPATH_LLM_MODEL")?,
            std::env::var("KGPATH_LLM_KEY").ok(),
            Duration::from_secs(120),
        ))
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

impl AnswerGenerator for HttpChatGenerator {
    fn id(&self) -> &str {
        &self.model
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse> {
        let start = Instant::now();
        let fail = |detail: String| Error::Generator {
            latency_secs: start.elapsed().as_secs_f64(),
            detail,
        };
        let agent = ureq::AgentBuilder::new().timeout(self.timeout).build();
        let mut call = agent.post(&format!("{}/chat/completions", self.endpoint));
        if let Some(key) = &self.api_key {
            call = call.set("Authorization", &format!("Bearer {key}"));
        }
        let body = serde_json::json!({
            "model": self.model,
            "messages": [{ "role": "user", "content": req.prompt }],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        let resp: ChatResponse = call
            .send_json(body)
            .map_err(|e| fail(e.to_string()))?
            .into_json()
            .map_err(|e| fail(e.to_string()))?;
        let text = resp
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content.trim().to_string())
            .filter(|t| !t.is_empty())
            .ok_or_else(|| fail("empty completion".into()))?;
        Ok(GenerationResponse {
            text,
            latency_secs: start.elapsed().as_secs_f64(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub answer: String,
    pub supporting_paths: Vec<String>,
    pub latency_secs: f64,
}

pub fn generate_answer(
    llm: &dyn AnswerGenerator,
    g: &KnowledgeGraph,
    query: &str,
    paths: &[Path],
    template: &str,
) -> Result<GenerationResult> {
    if paths.is_empty() {
        return Err(Error::invalid("generate_answer needs at least one path"));
    }
    let grounded: Vec<GroundedPath> = paths.iter().map(|p| GroundedPath::new(g, p)).collect();
    let req = GenerationRequest {
        prompt: render_prompt(template, query, &grounded),
        temperature: 0.0,
        max_tokens: 64,
        paths: grounded,
    };
    let resp = llm.generate(&req)?;
    Ok(GenerationResult {
        answer: resp.text,
        supporting_paths: req.paths.into_iter().map(|p| p.serialized).collect(),
        latency_secs: resp.latency_secs,
    })
}

/// Line record of a retrieval run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub qid: String,
    pub paths: Vec<String>,
    pub scores: Vec<f64>,
    /// Entity reached by each path.
    pub terminals: Vec<String>,
    pub answer: String,
    pub rt_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Answered {
    pub generation: GenerationResult,
    pub top_paths: Vec<ScoredPath>,
    pub retrieval_secs: f64,
}

impl Answered {
    pub fn to_record(&self, g: &KnowledgeGraph, qid: &str) -> RetrievalRecord {
        RetrievalRecord {
            qid: qid.to_string(),
            paths: self.top_paths.iter().map(|p| p.text.clone()).collect(),
            scores: self.top_paths.iter().map(|p| p.score).collect(),
            terminals: self
                .top_paths
                .iter()
                .map(|p| g.label(p.path.terminal_entity()).to_string())
                .collect(),
            answer: self.generation.answer.clone(),
            rt_secs: self.retrieval_secs,
        }
    }
}

/// Beam search, top-K selection and generation. Retrieval time covers the
/// first two steps only.
pub fn retrieve_and_answer(
    g: &KnowledgeGraph,
    q: &QueryRecord,
    scorer: &dyn PathScorer,
    llm: &dyn AnswerGenerator,
    cfg: &InferenceConfig,
    template: &str,
) -> Result<Answered> {
    let start = Instant::now();
    let finished = beam_search(g, &q.question, &q.topics, scorer, cfg)?;
    let top = topk_select(&finished, cfg.top_k)?;
    let retrieval_secs = start.elapsed().as_secs_f64();
    let paths: Vec<Path> = top.iter().map(|p| p.path.clone()).collect();
    let generation = generate_answer(llm, g, &q.question, &paths, template)?;
    Ok(Answered {
        generation,
        top_paths: top,
        retrieval_secs,
    })
}
