//! Single-tower query–path scorer.
//!
//! A contextual encoder reads the joint sequence built by
//! [`Tokenizer::build_input_sequence`]. The `[QSP]` and `[PSP]` hidden states
//! then attend over the query and path token states through two separate
//! cross-attention blocks (query and key projections only, raw values), are
//! added back residually, concatenated with the `[CLS]` state and mapped to a
//! score in `(0, 1)` by a one-hidden-layer head.

mod sequence;

use std::path::Path as FsPath;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use sequence::{InputSequence, SpecialTokens, Token, Tokenizer};

use crate::error::{Error, Result};
use crate::tensor::{softmax, Mat, Tape, Var};

pub const TINY_TRANSFORMER: &str = "tiny-transformer";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorerConfig {
    pub backbone: String,
    /// Hidden width `d`.
    pub hidden: usize,
    /// Cross-attention key width `d_k`.
    pub key_dim: usize,
    pub layers: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub vocab_buckets: usize,
    pub special: SpecialTokens,
    pub seed: u64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            backbone: TINY_TRANSFORMER.to_string(),
            hidden: 64,
            key_dim: 64,
            layers: 2,
            ffn: 128,
            max_len: 64,
            vocab_buckets: 4096,
            special: SpecialTokens::default(),
            seed: 0,
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.key_dim == 0 || self.ffn == 0 {
            return Err(Error::invalid("hidden, key_dim and ffn must be >= 1"));
        }
        if self.backbone != TINY_TRANSFORMER {
            return Err(Error::invalid(format!(
                "unknown backbone `{}`",
                self.backbone
            )));
        }
        if self.max_len < 7 {
            return Err(Error::invalid("max_len must be >= 7"));
        }
        if self.vocab_buckets == 0 {
            return Err(Error::invalid("vocab_buckets must be >= 1"));
        }
        self.special.validate()
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer {
            special: self.special,
            buckets: self.vocab_buckets,
        }
    }
}

/// Named parameter tensors, addressed by index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Mat>,
}

impl ParamStore {
    fn add(&mut self, name: &str, m: Mat) -> usize {
        self.names.push(name.to_string());
        self.tensors.push(m);
        self.tensors.len() - 1
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn zeros_like(&self) -> Vec<Mat> {
        self.tensors
            .iter()
            .map(|t| Mat::zeros(t.rows, t.cols))
            .collect()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn uniform(&mut self, rows: usize, cols: usize, std: f64) -> Mat {
        let a = std * 3f64.sqrt();
        Mat::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| self.rng.gen_range(-a..a))
                .collect(),
        )
    }

    fn filled(rows: usize, cols: usize, v: f64) -> Mat {
        Mat::from_vec(rows, cols, vec![v; rows * cols])
    }
}

/// Produces contextual hidden states `L × d` for a token sequence.
pub trait EncoderBackbone {
    fn id(&self) -> &str;
    fn encode(&self, tape: &mut Tape<'_>, ids: &[usize]) -> Var;
}

struct Layer {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Pre-norm transformer encoder with single-head self-attention and learned
/// positions.
pub struct TinyTransformer {
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<Layer>,
    lnf_g: usize,
    lnf_b: usize,
    hidden: usize,
}

impl TinyTransformer {
    fn register(cfg: &ScorerConfig, vocab: usize, ps: &mut ParamStore, init: &mut Init) -> Self {
        let d = cfg.hidden;
        let tok_emb = ps.add("backbone.tok_emb", init.uniform(vocab, d, 1.0));
        let pos_emb = ps.add("backbone.pos_emb", init.uniform(cfg.max_len, d, 0.1));
        let sd = 1.0 / (d as f64).sqrt();
        let layers = (0..cfg.layers)
            .map(|l| {
                let n = |s: &str| format!("backbone.layer{l}.{s}");
                Layer {
                    ln1_g: ps.add(&n("ln1.gain"), Init::filled(1, d, 1.0)),
                    ln1_b: ps.add(&n("ln1.bias"), Init::filled(1, d, 0.0)),
                    wq: ps.add(&n("attn.wq"), init.uniform(d, d, sd)),
                    bq: ps.add(&n("attn.bq"), Init::filled(1, d, 0.0)),
                    wk: ps.add(&n("attn.wk"), init.uniform(d, d, sd)),
                    bk: ps.add(&n("attn.bk"), Init::filled(1, d, 0.0)),
                    wv: ps.add(&n("attn.wv"), init.uniform(d, d, sd)),
                    bv: ps.add(&n("attn.bv"), Init::filled(1, d, 0.0)),
                    wo: ps.add(&n("attn.wo"), init.uniform(d, d, sd)),
                    bo: ps.add(&n("attn.bo"), Init::filled(1, d, 0.0)),
                    ln2_g: ps.add(&n("ln2.gain"), Init::filled(1, d, 1.0)),
                    ln2_b: ps.add(&n("ln2.bias"), Init::filled(1, d, 0.0)),
                    w1: ps.add(&n("ffn.w1"), init.uniform(d, cfg.ffn, sd)),
                    b1: ps.add(&n("ffn.b1"), Init::filled(1, cfg.ffn, 0.0)),
                    w2: ps.add(
                        &n("ffn.w2"),
                        init.uniform(cfg.ffn, d, 1.0 / (cfg.ffn as f64).sqrt()),
                    ),
                    b2: ps.add(&n("ffn.b2"), Init::filled(1, d, 0.0)),
                }
            })
            .collect();
        TinyTransformer {
            tok_emb,
            pos_emb,
            layers,
            lnf_g: ps.add("backbone.lnf.gain", Init::filled(1, d, 1.0)),
            lnf_b: ps.add("backbone.lnf.bias", Init::filled(1, d, 0.0)),
            hidden: d,
        }
    }
}

impl EncoderBackbone for TinyTransformer {
    fn id(&self) -> &str {
        TINY_TRANSFORMER
    }

    fn encode(&self, t: &mut Tape<'_>, ids: &[usize]) -> Var {
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = t.gather(self.tok_emb, ids);
        let pos = t.gather(self.pos_emb, &positions);
        let mut x = t.add(tok, pos);
        let inv = 1.0 / (self.hidden as f64).sqrt();
        let affine = |t: &mut Tape<'_>, x: Var, w: usize, b: usize| {
            let w = t.param(w);
            let b = t.param(b);
            let y = t.matmul(x, w);
            t.add_row(y, b)
        };
        for l in &self.layers {
            let (g, b) = (t.param(l.ln1_g), t.param(l.ln1_b));
            let a = t.layer_norm(x, g, b);
            let q = affine(t, a, l.wq, l.bq);
            let k = affine(t, a, l.wk, l.bk);
            let v = affine(t, a, l.wv, l.bv);
            let s = t.matmul_t(q, k);
            let s = t.scale(s, inv);
            let p = t.softmax_rows(s);
            let ctx = t.matmul(p, v);
            let o = affine(t, ctx, l.wo, l.bo);
            x = t.add(x, o);

            let (g, b) = (t.param(l.ln2_g), t.param(l.ln2_b));
            let f = t.layer_norm(x, g, b);
            let h = affine(t, f, l.w1, l.b1);
            let h = t.gelu(h);
            let h = affine(t, h, l.w2, l.b2);
            x = t.add(x, h);
        }
        let (g, b) = (t.param(self.lnf_g), t.param(self.lnf_b));
        t.layer_norm(x, g, b)
    }
}

/// Query and key projections `d × d_k`; values are the raw rows.
#[derive(Debug, Clone, Copy)]
pub struct CrossAttentionBlock {
    pub w_q: usize,
    pub w_k: usize,
}

impl CrossAttentionBlock {
    fn apply(&self, t: &mut Tape<'_>, probe: Var, span: Var, key_dim: usize) -> (Var, Var) {
        let (wq, wk) = (t.param(self.w_q), t.param(self.w_k));
        let q = t.matmul(probe, wq);
        let k = t.matmul(span, wk);
        let logits = t.matmul_t(q, k);
        let logits = t.scale(logits, 1.0 / (key_dim as f64).sqrt());
        let weights = t.softmax_rows(logits);
        (t.matmul(weights, span), weights)
    }
}

/// `softmax(W_Q(probe) · W_K(K)ᵀ / √d_k) · K` on plain matrices. Returns the
/// attended vector and the attention weights.
pub fn cross_attention(
    w_q: &Mat,
    w_k: &Mat,
    probe: &[f64],
    keys_values: &Mat,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if keys_values.rows == 0 {
        return Err(Error::EmptySpan);
    }
    let q = Mat::row_vec(probe.to_vec()).matmul(w_q);
    let k = keys_values.matmul(w_k);
    let scale = 1.0 / (w_q.cols as f64).sqrt();
    let logits: Vec<f64> = q.matmul_t(&k).data.iter().map(|x| x * scale).collect();
    let weights = softmax(&logits);
    let out = Mat::row_vec(weights.clone()).matmul(keys_values).data;
    Ok((out, weights))
}

/// FFN over `[h_CLS ; h''_QSP ; h''_PSP]` followed by a sigmoid.
#[derive(Debug, Clone, Copy)]
pub struct ScoreHead {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Intermediate values of one forward pass.
pub struct Forward {
    pub score: Var,
    /// Pre-sigmoid value of `score`.
    pub logit: Var,
    pub h_cls: Var,
    pub h_qsp: Var,
    pub h_psp: Var,
    pub query_states: Var,
    pub path_states: Var,
    pub refined_qsp: Var,
    pub refined_psp: Var,
    pub query_weights: Var,
    pub path_weights: Var,
}

pub struct CrossAttentiveScorer {
    pub cfg: ScorerConfig,
    pub params: ParamStore,
    tokenizer: Tokenizer,
    backbone: TinyTransformer,
    pub query_block: CrossAttentionBlock,
    pub path_block: CrossAttentionBlock,
    pub head: ScoreHead,
}

impl CrossAttentiveScorer {
    /// Fresh parameters drawn from `cfg.seed`.
    pub fn new(cfg: ScorerConfig) -> Result<Self> {
        cfg.validate()?;
        let tokenizer = cfg.tokenizer();
        let mut ps = ParamStore::default();
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        };
        let backbone = TinyTransformer::register(&cfg, tokenizer.vocab_size(), &mut ps, &mut init);
        let (d, dk) = (cfg.hidden, cfg.key_dim);
        let sd = 1.0 / (d as f64).sqrt();
        let query_block = CrossAttentionBlock {
            w_q: ps.add("xattn.query.w_q", init.uniform(d, dk, sd)),
            w_k: ps.add("xattn.query.w_k", init.uniform(d, dk, sd)),
        };
        let path_block = CrossAttentionBlock {
            w_q: ps.add("xattn.path.w_q", init.uniform(d, dk, sd)),
            w_k: ps.add("xattn.path.w_k", init.uniform(d, dk, sd)),
        };
        let head = ScoreHead {
            w1: ps.add(
                "head.w1",
                init.uniform(3 * d, d, 1.0 / ((3 * d) as f64).sqrt()),
            ),
            b1: ps.add("head.b1", Init::filled(1, d, 0.0)),
            w2: ps.add("head.w2", init.uniform(d, 1, sd)),
            b2: ps.add("head.b2", Init::filled(1, 1, 0.0)),
        };
        Ok(CrossAttentiveScorer {
            cfg,
            params: ps,
            tokenizer,
            backbone,
            query_block,
            path_block,
            head,
        })
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn backbone_id(&self) -> &str {
        self.backbone.id()
    }

    pub fn build_input_sequence(&self, query: &str, path: &str) -> Result<InputSequence> {
        self.tokenizer
            .build_input_sequence(query, path, self.cfg.max_len)
    }

    pub fn forward<'a>(&'a self, t: &mut Tape<'a>, seq: &InputSequence) -> Forward {
        let hidden = self.backbone.encode(t, &seq.ids);
        let h_cls = t.rows(hidden, &[0]);
        let h_qsp = t.rows(hidden, &[seq.qsp]);
        let h_psp = t.rows(hidden, &[seq.psp]);
        let query_states = t.rows(hidden, &seq.query_positions);
        let path_states = t.rows(hidden, &seq.path_positions);
        let (att_q, query_weights) =
            self.query_block
                .apply(t, h_qsp, query_states, self.cfg.key_dim);
        let (att_p, path_weights) = self
            .path_block
            .apply(t, h_psp, path_states, self.cfg.key_dim);
        let refined_qsp = t.add(h_qsp, att_q);
        let refined_psp = t.add(h_psp, att_p);
        let z = t.concat_cols(&[h_cls, refined_qsp, refined_psp]);
        let (w1, b1, w2, b2) = (
            t.param(self.head.w1),
            t.param(self.head.b1),
            t.param(self.head.w2),
            t.param(self.head.b2),
        );
        let h = t.matmul(z, w1);
        let h = t.add_row(h, b1);
        let h = t.gelu(h);
        let logit = t.matmul(h, w2);
        let logit = t.add_row(logit, b2);
        let score = t.sigmoid(logit);
        Forward {
            score,
            logit,
            h_cls,
            h_qsp,
            h_psp,
            query_states,
            path_states,
            refined_qsp,
            refined_psp,
            query_weights,
            path_weights,
        }
    }

    /// Relevance of serialized `path` to `query`, in `(0, 1)`.
    pub fn score(&self, query: &str, path: &str) -> Result<f64> {
        let seq = self.build_input_sequence(query, path)?;
        let mut t = Tape::new(&self.params.tensors);
        let f = self.forward(&mut t, &seq);
        Ok(t.value(f.score).data[0])
    }

    /// The score before the final sigmoid.
    pub fn logit(&self, query: &str, path: &str) -> Result<f64> {
        let seq = self.build_input_sequence(query, path)?;
        let mut t = Tape::new(&self.params.tensors);
        let f = self.forward(&mut t, &seq);
        Ok(t.value(f.logit).data[0])
    }

    /// Scores each path independently, so results do not depend on batch
    /// composition.
    pub fn score_batch(&self, query: &str, paths: &[String]) -> Result<Vec<f64>> {
        if paths.is_empty() {
            return Err(Error::invalid("score_batch needs at least one path"));
        }
        paths.iter().map(|p| self.score(query, p)).collect()
    }

    /// Adds `d_score · ∂s/∂θ` into `grads` and returns `s`.
    pub fn accumulate_gradient(
        &self,
        query: &str,
        path: &str,
        d_score: f64,
        grads: &mut [Mat],
    ) -> Result<f64> {
        let seq = self.build_input_sequence(query, path)?;
        let mut t = Tape::new(&self.params.tensors);
        let f = self.forward(&mut t, &seq);
        let s = t.value(f.score).data[0];
        t.backward(f.score, Mat::from_vec(1, 1, vec![d_score]), grads);
        Ok(s)
    }

    pub fn param(&self, name: &str) -> Option<&Mat> {
        self.params.id(name).map(|i| &self.params.tensors[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.params.id(name).map(|i| &mut self.params.tensors[i])
    }

    pub fn to_checkpoint(&self, provenance: serde_json::Value) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            backbone: self.backbone_id().to_string(),
            config: self.cfg.clone(),
            params: self
                .params
                .names
                .iter()
                .zip(&self.params.tensors)
                .map(|(n, m)| NamedTensor {
                    name: n.clone(),
                    rows: m.rows,
                    cols: m.cols,
                    data: m.data.clone(),
                })
                .collect(),
            provenance,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint version {}",
                ck.format_version
            )));
        }
        let mut s = Self::new(ck.config.clone())?;
        if s.params.names.len() != ck.params.len() {
            return Err(Error::invalid("checkpoint parameter count mismatch"));
        }
        for (slot, nt) in s.params.tensors.iter_mut().zip(&ck.params) {
            if slot.rows != nt.rows || slot.cols != nt.cols || nt.data.len() != nt.rows * nt.cols {
                return Err(Error::invalid(format!("shape mismatch for {}", nt.name)));
            }
            slot.data.clone_from(&nt.data);
        }
        Ok(s)
    }

    pub fn save(&self, path: &FsPath, provenance: serde_json::Value) -> Result<()> {
        crate::mining::write_json(path, &self.to_checkpoint(provenance))
    }

    pub fn load(path: &FsPath) -> Result<Self> {
        let ck: Checkpoint = crate::mining::read_json(path)?;
        Self::from_checkpoint(&ck)
    }
}

/// Anything that can rank serialized paths for a query.
pub trait PathScorer: Sync {
    fn score_paths(&self, query: &str, paths: &[String]) -> Result<Vec<f64>>;
}

impl PathScorer for CrossAttentiveScorer {
    fn score_paths(&self, query: &str, paths: &[String]) -> Result<Vec<f64>> {
        self.score_batch(query, paths)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub backbone: String,
    pub config: ScorerConfig,
    pub params: Vec<NamedTensor>,
    pub provenance: serde_json::Value,
}
