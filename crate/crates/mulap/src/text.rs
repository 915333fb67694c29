//! Caption tokenization and the text branch of the encoder.
//!
//! Tokenization is word-level: lowercase, split on anything that is not
//! alphanumeric, map through a frequency-built vocabulary. The encoder is
//! a standard post-norm transformer stack over token + learned positional
//! embeddings; it covers the text-only layers that run *before* the
//! co-attentional stack.

use std::collections::HashMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attention::{EncoderLayer, Norm};
use crate::tensor::{Tensor, TensorError};

/// Reserved token ids.
pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;
pub const UNK: usize = 4;
/// Number of reserved ids; regular tokens start here.
pub const RESERVED: usize = 5;

const RESERVED_NAMES: [&str; RESERVED] = ["<pad>", "<cls>", "<sep>", "<mask>", "<unk>"];

#[derive(Debug, Error)]
pub enum TextError {
    #[error("empty caption corpus")]
    EmptyCorpus,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad vocabulary file: {0}")]
    BadVocabFile(String),
}

// ─────────────────────────── Vocabulary ────────────────────────────────

/// Deterministic word-level vocabulary with five reserved ids.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    tokens: Vec<String>, // regular tokens only; id = index + RESERVED
}

/// Lowercase and split a string on non-alphanumeric boundaries.
pub fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

impl Vocabulary {
    /// Build from captions: tokens ranked by frequency (descending), ties
    /// broken lexicographically; at most `max_size - RESERVED` kept.
    pub fn build(corpus: &[String], max_size: usize) -> Result<Vocabulary, TextError> {
        if corpus.is_empty() {
            return Err(TextError::EmptyCorpus);
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for caption in corpus {
            for w in words(caption) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let keep = max_size.saturating_sub(RESERVED);
        ranked.truncate(keep);
        Ok(Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t).collect()))
    }

    fn from_tokens(tokens: Vec<String>) -> Vocabulary {
        let token_to_id =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i + RESERVED)).collect();
        Vocabulary { token_to_id, tokens }
    }

    /// Total size including the reserved ids.
    pub fn size(&self) -> usize {
        RESERVED + self.tokens.len()
    }

    /// Id of a (already normalized) token; UNK when absent.
    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    /// Token text for an id.
    pub fn token(&self, id: usize) -> &str {
        if id < RESERVED {
            RESERVED_NAMES[id]
        } else {
            &self.tokens[id - RESERVED]
        }
    }

    /// Serialize as one regular token per line (line i holds id i+RESERVED).
    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        let mut body = self.tokens.join("\n");
        if !self.tokens.is_empty() {
            body.push('\n');
        }
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary, TextError> {
        let text = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.iter().any(|t| t.is_empty()) {
            return Err(TextError::BadVocabFile("empty token line".into()));
        }
        Ok(Vocabulary::from_tokens(tokens))
    }
}

/// CLS + word ids + SEP, truncated to `max_len` (CLS and SEP always kept).
pub fn tokenize(caption: &str, vocab: &Vocabulary, max_len: usize) -> Vec<usize> {
    debug_assert!(max_len >= 2);
    let ws = words(caption);
    let body = ws.len().min(max_len - 2);
    let mut ids = Vec::with_capacity(body + 2);
    ids.push(CLS);
    for w in &ws[..body] {
        ids.push(vocab.id(w));
    }
    ids.push(SEP);
    ids
}

// ─────────────────────────── Text encoder ──────────────────────────────

/// Embeddings plus the text-only self-attention stack (the layers that run
/// before cross-modal attention).
pub struct TextEncoder {
    pub tok_embed: Tensor, // [vocab, H]
    pub pos_embed: Tensor, // [max_len, H]
    pub embed_ln: Norm,
    pub layers: Vec<EncoderLayer>,
    pub max_len: usize,
}

impl TextEncoder {
    pub fn new(
        vocab_size: usize,
        hidden: usize,
        heads: usize,
        ffn: usize,
        max_len: usize,
        n_layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> TextEncoder {
        TextEncoder {
            tok_embed: Tensor::param_randn(&[vocab_size, hidden], crate::attention::INIT_STD, rng),
            pos_embed: Tensor::param_randn(&[max_len, hidden], crate::attention::INIT_STD, rng),
            embed_ln: Norm::new(hidden),
            layers: (0..n_layers).map(|_| EncoderLayer::new(hidden, heads, ffn, rng)).collect(),
            max_len,
        }
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.tok_embed"), self.tok_embed.clone()));
        out.push((format!("{prefix}.pos_embed"), self.pos_embed.clone()));
        self.embed_ln.params(&format!("{prefix}.embed_ln"), out);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.params(&format!("{prefix}.layer{i}"), out);
        }
    }

    /// Attendable-key mask: every non-PAD position.
    pub fn pad_mask(ids: &[usize]) -> Vec<bool> {
        ids.iter().map(|&id| id != PAD).collect()
    }

    /// Token + positional embedding, layer-normed: `[S, H]`.
    pub fn embed(&self, ids: &[usize]) -> Result<Tensor, TensorError> {
        if ids.len() > self.max_len {
            return Err(TensorError::InvalidArgument {
                op: "encode_text",
                detail: format!("sequence length {} exceeds max {}", ids.len(), self.max_len),
            });
        }
        let tok = self.tok_embed.gather_rows(ids)?;
        let pos = self.pos_embed.narrow_rows(0, ids.len())?;
        self.embed_ln.forward(&tok.add(&pos)?)
    }

    /// Full text-side stack: embeddings then every self-attention layer,
    /// with PAD keys masked out.
    pub fn encode(&self, ids: &[usize]) -> Result<Tensor, TensorError> {
        let mask = Self::pad_mask(ids);
        let mut x = self.embed(ids)?;
        for layer in &self.layers {
            x = layer.forward(&x, &mask)?;
        }
        Ok(x)
    }
}

// ─────────────────────────────── Tests ─────────────────────────────────
