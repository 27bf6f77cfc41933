//! Corpus ingestion, tokenization, vocabulary, embeddings, and batching.
//!
//! Corpus format: JSONL with one example object per line,
//! `{"context": [...], "emotion": "...", "response": "...",
//!   "next_user_utterance": "..."}` where `context` is either an array of
//! utterance strings (user speaks first, speakers alternate) or an array of
//! `{"speaker": "user"|"bot", "text": "..."}` objects. The writer always
//! emits the plain-string form.

use std::collections::HashMap;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::error::{CareError, Result};
use crate::rng::CounterRng;

// ── Examples ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Speaker {
    User,
    Bot,
}

/// One dialogue example: alternating context turns (user first), the user's
/// emotion label, the gold bot response, and optionally the user utterance
/// that followed it.
#[derive(Debug, Clone, PartialEq)]
pub struct DialogueExample {
    pub context: Vec<(Speaker, String)>,
    pub emotion: String,
    pub response: String,
    pub next_user_utterance: Option<String>,
}

impl DialogueExample {
    /// Text of all user-role turns in context order.
    pub fn user_utterances(&self) -> impl Iterator<Item = &str> {
        self.context
            .iter()
            .filter(|(s, _)| *s == Speaker::User)
            .map(|(_, t)| t.as_str())
    }
}

#[derive(Serialize)]
struct ExampleOut<'a> {
    context: Vec<&'a str>,
    emotion: &'a str,
    response: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    next_user_utterance: Option<&'a str>,
}

fn parse_context(value: &Value) -> std::result::Result<Vec<(Speaker, String)>, String> {
    let items = value.as_array().ok_or("context must be an array")?;
    if items.is_empty() {
        return Err("context must be nonempty".into());
    }
    let mut turns = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let expected = if i % 2 == 0 { Speaker::User } else { Speaker::Bot };
        match item {
            Value::String(text) => turns.push((expected, text.clone())),
            Value::Object(obj) => {
                let speaker = match obj.get("speaker").and_then(Value::as_str) {
                    Some("user") => Speaker::User,
                    Some("bot") => Speaker::Bot,
                    other => return Err(format!("turn {i}: invalid speaker {other:?}")),
                };
                if speaker != expected {
                    return Err(format!(
                        "turn {i}: speakers must alternate starting with user"
                    ));
                }
                let text = obj
                    .get("text")
                    .and_then(Value::as_str)
                    .ok_or(format!("turn {i}: missing text"))?;
                turns.push((speaker, text.to_string()));
            }
            _ => return Err(format!("turn {i}: must be a string or object")),
        }
    }
    Ok(turns)
}

/// Parse and validate a JSONL corpus; errors carry the offending line number.
pub fn load_corpus(path: &Path) -> Result<Vec<DialogueExample>> {
    let text = std::fs::read_to_string(path)?;
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| CareError::Parse {
            path: path.display().to_string(),
            line: lineno,
            msg,
        };
        let value: Value =
            serde_json::from_str(line).map_err(|e| err(format!("invalid json: {e}")))?;
        let obj = value.as_object().ok_or_else(|| err("expected an object".into()))?;
        let context = parse_context(obj.get("context").unwrap_or(&Value::Null))
            .map_err(|m| err(m))?;
        let emotion = obj
            .get("emotion")
            .and_then(Value::as_str)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| err("missing or empty emotion".into()))?;
        let response = obj
            .get("response")
            .and_then(Value::as_str)
            .ok_or_else(|| err("missing response".into()))?;
        let next = match obj.get("next_user_utterance") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => return Err(err("next_user_utterance must be a string".into())),
        };
        examples.push(DialogueExample {
            context,
            emotion: emotion.to_string(),
            response: response.to_string(),
            next_user_utterance: next,
        });
    }
    Ok(examples)
}

/// Write the canonical JSONL form (lossless against [`load_corpus`]).
pub fn write_corpus(path: &Path, examples: &[DialogueExample]) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        let line = serde_json::to_string(&ExampleOut {
            context: ex.context.iter().map(|(_, t)| t.as_str()).collect(),
            emotion: &ex.emotion,
            response: &ex.response,
            next_user_utterance: ex.next_user_utterance.as_deref(),
        })?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// One 0-based corpus line index per line.
pub fn load_split_indices(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        out.push(t.parse().map_err(|_| CareError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: format!("invalid index '{t}'"),
        })?);
    }
    Ok(out)
}

pub fn write_split_indices(path: &Path, indices: &[usize]) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for i in indices {
        writeln!(out, "{i}")?;
    }
    Ok(())
}

// ── Tokenizer ────────────────────────────────────────────────────────

/// Lowercasing rule-based tokenizer: alphanumeric runs are tokens, an
/// apostrophe followed by an alphanumeric run forms one token ("i'm" ->
/// ["i", "'m"]), every other non-whitespace character is its own token.
/// Pure character-class rules; no locale dependence.
pub fn tokenize(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    let chars: Vec<char> = lowered.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_alphanumeric() {
            let start = i;
            while i < chars.len() && chars[i].is_alphanumeric() {
                i += 1;
            }
            tokens.push(chars[start..i].iter().collect());
        } else if c == '\'' && i + 1 < chars.len() && chars[i + 1].is_alphanumeric() {
            let start = i;
            i += 1;
            while i < chars.len() && chars[i].is_alphanumeric() {
                i += 1;
            }
            tokens.push(chars[start..i].iter().collect());
        } else {
            tokens.push(c.to_string());
            i += 1;
        }
    }
    tokens
}

// ── Vocabulary ───────────────────────────────────────────────────────

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const USR: usize = 4;
pub const SYS: usize = 5;

pub const RESERVED_TOKENS: [&str; 6] = ["<pad>", "<unk>", "<bos>", "<eos>", "<usr>", "<sys>"];

/// Token table with fixed reserved ids and frequency-ordered content ids.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Frequency-ordered ids after the reserved block; frequency ties break
    /// lexicographically; tokens below `min_freq` are dropped (mapping to
    /// UNK). Counts cover context turns, responses, next utterances, and
    /// emotion labels.
    pub fn build(examples: &[DialogueExample], min_freq: usize) -> Vocab {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut bump = |text: &str| {
            for tok in tokenize(text) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        };
        for ex in examples {
            for (_, turn) in &ex.context {
                bump(turn);
            }
            bump(&ex.response);
            if let Some(next) = &ex.next_user_utterance {
                bump(next);
            }
            bump(&ex.emotion);
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_freq.max(1))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().map(|(t, _)| t));
        Vocab::from_tokens(tokens).expect("reserved prefix is well-formed")
    }

    /// Rebuild from a stored token list (checkpoint manifests).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < RESERVED_TOKENS.len()
            || tokens[..RESERVED_TOKENS.len()]
                .iter()
                .zip(RESERVED_TOKENS)
                .any(|(a, b)| a != b)
        {
            return Err(CareError::Validation(
                "vocab must begin with the reserved token block".into(),
            ));
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// FNV-1a over the token list; used to pair checkpoints with corpora.
    pub fn hash_hex(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tokens {
            for b in t.as_bytes() {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
            h ^= b'\n' as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

// ── Pre-trained embeddings ───────────────────────────────────────────

pub struct LoadedEmbeddings {
    /// Row-major d_vocab x d table.
    pub table: Vec<f64>,
    pub covered: usize,
}

/// Text format: `word v1 ... v_d` per line. Covered vocab words take the
/// file's values; everything else is N(0, 0.02^2) from `rng`.
pub fn load_embeddings(
    path: &Path,
    vocab: &Vocab,
    d: usize,
    rng: &mut CounterRng,
) -> Result<LoadedEmbeddings> {
    let mut table: Vec<f64> = (0..vocab.len() * d).map(|_| rng.normal() * 0.02).collect();
    let text = std::fs::read_to_string(path)?;
    let mut covered = 0usize;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let word = fields.next().unwrap_or_default();
        let values: Vec<&str> = fields.collect();
        if values.len() != d {
            return Err(CareError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: format!("expected {d} values, found {}", values.len()),
            });
        }
        if !vocab.contains(word) {
            continue;
        }
        let row = vocab.id(word);
        for (j, v) in values.iter().enumerate() {
            table[row * d + j] = v.parse().map_err(|_| CareError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: format!("invalid float '{v}'"),
            })?;
        }
        covered += 1;
    }
    Ok(LoadedEmbeddings { table, covered })
}

// ── Sequence encoding ────────────────────────────────────────────────

/// Context ids: BOS, then each turn as a speaker tag plus its tokens.
/// When over budget, oldest turns are dropped first; a single over-long
/// turn keeps its tag and the most recent tokens.
pub fn context_token_ids(
    context: &[(Speaker, String)],
    vocab: &Vocab,
    max_len: usize,
) -> Vec<usize> {
    assert!(max_len >= 4, "context budget too small");
    let chunks: Vec<Vec<usize>> = context
        .iter()
        .map(|(speaker, text)| {
            let tag = match speaker {
                Speaker::User => USR,
                Speaker::Bot => SYS,
            };
            let mut ids = vec![tag];
            ids.extend(vocab.encode(text));
            ids
        })
        .collect();
    let budget = max_len - 1; // room for BOS
    let mut kept: Vec<&Vec<usize>> = Vec::new();
    let mut used = 0;
    for chunk in chunks.iter().rev() {
        if used + chunk.len() > budget {
            break;
        }
        used += chunk.len();
        kept.push(chunk);
    }
    let mut out = vec![BOS];
    if kept.is_empty() {
        // The newest turn alone exceeds the budget: keep its tag + tail.
        let newest = chunks.last().expect("nonempty context");
        out.push(newest[0]);
        let tail = newest.len() - (budget - 1).min(newest.len() - 1);
        out.extend(&newest[tail.max(1)..]);
    } else {
        for chunk in kept.iter().rev() {
            out.extend(chunk.iter());
        }
    }
    out
}

/// Response ids: tokens truncated to `max_len - 1`, then EOS.
pub fn response_token_ids(text: &str, vocab: &Vocab, max_len: usize) -> Vec<usize> {
    assert!(max_len >= 2, "response budget too small");
    let mut ids = vocab.encode(text);
    ids.truncate(max_len - 1);
    ids.push(EOS);
    ids
}

/// Tokenized user turns feeding graph construction.
pub fn prev_user_tokens(example: &DialogueExample) -> Vec<String> {
    example
        .user_utterances()
        .flat_map(|u| tokenize(u))
        .collect()
}

pub fn next_user_tokens(example: &DialogueExample) -> Option<Vec<String>> {
    example.next_user_utterance.as_deref().map(tokenize)
}

// ── Batching ─────────────────────────────────────────────────────────

/// Rectangular id block padded with PAD plus a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedSeqs {
    pub ids: Vec<Vec<usize>>,
    pub valid: Vec<Vec<bool>>,
}

pub fn pad_batch(seqs: &[Vec<usize>]) -> PaddedSeqs {
    let width = seqs.iter().map(Vec::len).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(seqs.len());
    let mut valid = Vec::with_capacity(seqs.len());
    for s in seqs {
        let mut row = s.clone();
        let mut v = vec![true; s.len()];
        row.resize(width, PAD);
        v.resize(width, false);
        ids.push(row);
        valid.push(v);
    }
    PaddedSeqs { ids, valid }
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// Indices into the source example list.
    pub indices: Vec<usize>,
    pub context: PaddedSeqs,
    pub response: PaddedSeqs,
}

/// Pre-encoded example ready for batching.
#[derive(Debug, Clone)]
pub struct EncodedExample {
    pub context_ids: Vec<usize>,
    pub response_ids: Vec<usize>,
}

/// Seeded shuffle, then fixed-size batches padded to each batch's max
/// length. A pure function of (examples, batch_size, seed).
pub fn make_batches(examples: &[EncodedExample], batch_size: usize, seed: u64) -> Vec<Batch> {
    assert!(batch_size >= 1);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    CounterRng::new(seed).shuffle(&mut order);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let ctx: Vec<Vec<usize>> =
                chunk.iter().map(|&i| examples[i].context_ids.clone()).collect();
            let resp: Vec<Vec<usize>> =
                chunk.iter().map(|&i| examples[i].response_ids.clone()).collect();
            Batch {
                indices: chunk.to_vec(),
                context: pad_batch(&ctx),
                response: pad_batch(&resp),
            }
        })
        .collect()
}

/// Sorted unique emotion labels of a corpus; defines the label-id mapping.
pub fn emotion_labels(examples: &[DialogueExample]) -> Vec<String> {
    let mut labels: Vec<String> = examples.iter().map(|e| e.emotion.clone()).collect();
    labels.sort();
    labels.dedup();
    labels
}
