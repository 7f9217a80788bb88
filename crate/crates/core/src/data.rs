//! Training-stream construction: bilingual mixing, fixed-length sequence
//! packing with end-of-text demarcation, chat-template rendering with
//! prompt loss masking, oversampling, and the emitted training-recipe
//! manifest (constants only — training itself is out of scope).

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bpe::TokenId;
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// token streams and mixing

/// An ordered token stream with document boundaries. `boundaries[i]` is the
/// end offset (exclusive) of document i; offsets are strictly increasing and
/// the last equals the stream length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    pub source: String,
    pub tokens: Vec<TokenId>,
    pub boundaries: Vec<usize>,
}

impl TokenStream {
    pub fn from_documents(source: impl Into<String>, docs: Vec<Vec<TokenId>>) -> Self {
        let mut tokens = Vec::new();
        let mut boundaries = Vec::with_capacity(docs.len());
        for doc in docs {
            tokens.extend(doc);
            boundaries.push(tokens.len());
        }
        TokenStream {
            source: source.into(),
            tokens,
            boundaries,
        }
    }

    pub fn num_documents(&self) -> usize {
        self.boundaries.len()
    }

    pub fn document(&self, i: usize) -> &[TokenId] {
        let start = if i == 0 { 0 } else { self.boundaries[i - 1] };
        &self.tokens[start..self.boundaries[i]]
    }

    pub fn documents(&self) -> impl Iterator<Item = &[TokenId]> {
        (0..self.num_documents()).map(|i| self.document(i))
    }

    pub fn validate(&self) -> Result<()> {
        let mut prev = 0usize;
        for (i, &b) in self.boundaries.iter().enumerate() {
            if i > 0 && b <= prev {
                return Err(Error::Format(format!(
                    "document boundaries not strictly increasing at index {i}"
                )));
            }
            prev = b;
        }
        if self.boundaries.last().is_some_and(|&b| b != self.tokens.len()) {
            return Err(Error::Format(
                "last document boundary does not match stream length".to_string(),
            ));
        }
        Ok(())
    }

    /// Shuffles whole documents, deterministically for a given seed.
    pub fn shuffled(&self, seed: u64) -> TokenStream {
        let mut docs: Vec<Vec<TokenId>> = self.documents().map(|d| d.to_vec()).collect();
        docs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        TokenStream::from_documents(self.source.clone(), docs)
    }
}

#[derive(Debug, Clone)]
pub struct MixOutcome {
    pub stream: TokenStream,
    pub tokens_a: u64,
    pub tokens_b: u64,
    /// |tokens_a·r_b − tokens_b·r_a| at the end of the stream, in cross-
    /// multiplied token units; zero means the ratio was hit exactly.
    pub final_deviation: u64,
}

/// Interleaves whole documents from two streams so the cumulative token
/// ratio tracks `ratio` at every prefix: the next document is drawn from
/// stream `a` exactly when taking it keeps `a` at or below its share
/// (cross-multiplied comparison, no division). A zero ratio component
/// passes the other stream through untouched. Streams are shuffled
/// per-stream with `seed` before interleaving.
pub fn mix_streams(
    a: &TokenStream,
    b: &TokenStream,
    ratio: (u64, u64),
    seed: u64,
) -> MixOutcome {
    let (ra, rb) = ratio;
    if rb == 0 {
        return MixOutcome {
            stream: a.clone(),
            tokens_a: a.tokens.len() as u64,
            tokens_b: 0,
            final_deviation: 0,
        };
    }
    if ra == 0 {
        return MixOutcome {
            stream: b.clone(),
            tokens_a: 0,
            tokens_b: b.tokens.len() as u64,
            final_deviation: 0,
        };
    }
    let a = a.shuffled(seed);
    let b = b.shuffled(seed.wrapping_add(1));
    let mut docs: Vec<Vec<TokenId>> = Vec::with_capacity(a.num_documents() + b.num_documents());
    let (mut ia, mut ib) = (0usize, 0usize);
    let (mut ca, mut cb) = (0u64, 0u64);
    while ia < a.num_documents() || ib < b.num_documents() {
        let take_a = if ia >= a.num_documents() {
            false
        } else if ib >= b.num_documents() {
            true
        } else {
            // a is behind (or at) its share of the target ratio
            ca * rb <= cb * ra
        };
        if take_a {
            let doc = a.document(ia);
            ca += doc.len() as u64;
            docs.push(doc.to_vec());
            ia += 1;
        } else {
            let doc = b.document(ib);
            cb += doc.len() as u64;
            docs.push(doc.to_vec());
            ib += 1;
        }
    }
    let source = format!("{}+{}", a.source, b.source);
    MixOutcome {
        stream: TokenStream::from_documents(source, docs),
        tokens_a: ca,
        tokens_b: cb,
        final_deviation: (ca * rb).abs_diff(cb * ra),
    }
}

// ---------------------------------------------------------------------------
// sequence packing

/// One training sequence of exactly `context` tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedSequence {
    pub tokens: Vec<TokenId>,
    /// Positions of document-end separator tokens within this sequence
    /// (real demarcations, not padding).
    pub separators: Vec<usize>,
    /// Offset where padding starts, for the trailing partial sequence.
    pub pad_from: Option<usize>,
}

/// Concatenates documents with `eot_id` appended after each one and cuts
/// the flat stream into consecutive sequences of exactly `context` tokens.
/// Documents may straddle sequence boundaries. The trailing partial
/// sequence is padded with `eot_id` and flagged via `pad_from`.
pub fn pack_sequences(stream: &TokenStream, context: usize, eot_id: TokenId) -> Vec<PackedSequence> {
    assert!(context > 0, "context length must be positive");
    if stream.num_documents() == 0 {
        return Vec::new();
    }
    let mut flat: Vec<TokenId> = Vec::with_capacity(stream.tokens.len() + stream.num_documents());
    let mut sep_offsets: Vec<usize> = Vec::with_capacity(stream.num_documents());
    for doc in stream.documents() {
        flat.extend_from_slice(doc);
        sep_offsets.push(flat.len());
        flat.push(eot_id);
    }
    let mut out = Vec::with_capacity(flat.len().div_ceil(context));
    let mut sep_iter = sep_offsets.iter().peekable();
    for (chunk_idx, chunk) in flat.chunks(context).enumerate() {
        let base = chunk_idx * context;
        let mut separators = Vec::new();
        while let Some(&&s) = sep_iter.peek() {
            if s < base + chunk.len() {
                separators.push(s - base);
                sep_iter.next();
            } else {
                break;
            }
        }
        let mut tokens = chunk.to_vec();
        let pad_from = if tokens.len() < context {
            let start = tokens.len();
            tokens.resize(context, eot_id);
            Some(start)
        } else {
            None
        };
        out.push(PackedSequence {
            tokens,
            separators,
            pad_from,
        });
    }
    out
}

/// Exact inverse of [`pack_sequences`]: reconstructs the original documents
/// from the recorded separator positions, dropping padding.
pub fn unpack_sequences(sequences: &[PackedSequence]) -> Vec<Vec<TokenId>> {
    let mut docs = Vec::new();
    let mut current: Vec<TokenId> = Vec::new();
    for seq in sequences {
        let end = seq.pad_from.unwrap_or(seq.tokens.len());
        let mut pos = 0usize;
        for &sep in &seq.separators {
            current.extend_from_slice(&seq.tokens[pos..sep]);
            docs.push(std::mem::take(&mut current));
            pos = sep + 1; // skip the separator token itself
        }
        current.extend_from_slice(&seq.tokens[pos..end]);
    }
    // a well-formed pack ends on a separator, so `current` is empty here
    if !current.is_empty() {
        docs.push(current);
    }
    docs
}

const PACK_MAGIC: &[u8; 4] = b"PKSQ";

/// Writes fixed-length id arrays to `data` and a line-delimited JSON
/// sidecar of per-sequence separator positions and padding offsets to
/// `index`.
pub fn write_packed<W1: Write, W2: Write>(
    sequences: &[PackedSequence],
    context: usize,
    mut data: W1,
    mut index: W2,
) -> Result<()> {
    data.write_all(PACK_MAGIC)?;
    data.write_all(&(context as u32).to_le_bytes())?;
    data.write_all(&(sequences.len() as u64).to_le_bytes())?;
    for seq in sequences {
        debug_assert_eq!(seq.tokens.len(), context);
        for &id in &seq.tokens {
            data.write_all(&id.to_le_bytes())?;
        }
        let meta = serde_json::json!({
            "separators": seq.separators,
            "pad_from": seq.pad_from,
        });
        writeln!(index, "{meta}")?;
    }
    Ok(())
}

pub fn read_packed<R1: Read, R2: BufRead>(mut data: R1, index: R2) -> Result<Vec<PackedSequence>> {
    let mut magic = [0u8; 4];
    data.read_exact(&mut magic)?;
    if &magic != PACK_MAGIC {
        return Err(Error::Format("bad packed-shard magic".to_string()));
    }
    let mut buf4 = [0u8; 4];
    data.read_exact(&mut buf4)?;
    let context = u32::from_le_bytes(buf4) as usize;
    let mut buf8 = [0u8; 8];
    data.read_exact(&mut buf8)?;
    let count = u64::from_le_bytes(buf8) as usize;

    #[derive(Deserialize)]
    struct Meta {
        separators: Vec<usize>,
        pad_from: Option<usize>,
    }
    let mut metas = Vec::with_capacity(count);
    for line in index.lines() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        metas.push(serde_json::from_str::<Meta>(&line)?);
    }
    if metas.len() != count {
        return Err(Error::Format(format!(
            "sidecar index has {} entries, shard has {} sequences",
            metas.len(),
            count
        )));
    }
    let mut sequences = Vec::with_capacity(count);
    for meta in metas {
        let mut tokens = Vec::with_capacity(context);
        for _ in 0..context {
            data.read_exact(&mut buf4)?;
            tokens.push(u32::from_le_bytes(buf4));
        }
        sequences.push(PackedSequence {
            tokens,
            separators: meta.separators,
            pad_from: meta.pad_from,
        });
    }
    Ok(sequences)
}

// ---------------------------------------------------------------------------
// chat templating and loss masking

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: String,
    pub text: String,
}

/// One instruction-tuning record as read from disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub turns: Vec<Turn>,
    #[serde(default)]
    pub safety: bool,
}

pub fn read_sft_jsonl<R: BufRead>(r: R) -> Result<Vec<SftRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// A rendered example: token ids plus a 0/1 loss mask that is 1 exactly on
/// assistant-response tokens and each turn's end marker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedExample {
    pub tokens: Vec<TokenId>,
    pub mask: Vec<u8>,
    pub safety: bool,
}

/// Anything that can turn plain text into token ids; the byte-level
/// tokenizer implements it, and tests can substitute trivial encoders.
pub trait TextEncoder {
    fn encode_text(&self, text: &str) -> Vec<TokenId>;
}

impl TextEncoder for crate::bpe::Tokenizer {
    fn encode_text(&self, text: &str) -> Vec<TokenId> {
        self.encode(text)
    }
}

/// Chat-template layout held as data: dedicated single-token control ids
/// plus the text fragments rendered around each turn. The default follows
/// the instruct-style layout
/// `<begin><hdr>role</hdr>\n\ncontent<eot>` per turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatTemplate {
    pub begin_of_text: TokenId,
    pub start_header: TokenId,
    pub end_header: TokenId,
    pub end_of_turn: TokenId,
    /// Plain text emitted between the role header and the turn content.
    pub header_suffix: String,
}

impl ChatTemplate {
    /// Control ids allocated contiguously from `first_control_id`.
    pub fn instruct_default(first_control_id: TokenId) -> Self {
        ChatTemplate {
            begin_of_text: first_control_id,
            start_header: first_control_id + 1,
            end_header: first_control_id + 2,
            end_of_turn: first_control_id + 3,
            header_suffix: "\n\n".to_string(),
        }
    }
}

fn check_roles(turns: &[Turn]) -> Result<()> {
    if turns.is_empty() {
        return Err(Error::BadRoleSequence("no turns".to_string()));
    }
    let mut rest = turns;
    if rest[0].role == "system" {
        rest = &rest[1..];
        if rest.is_empty() {
            return Err(Error::BadRoleSequence(
                "system turn with no conversation".to_string(),
            ));
        }
    }
    for (i, turn) in rest.iter().enumerate() {
        let expected = if i % 2 == 0 { "user" } else { "assistant" };
        if turn.role != expected {
            return Err(Error::BadRoleSequence(format!(
                "turn {i}: expected role {expected:?}, got {:?}",
                turn.role
            )));
        }
    }
    Ok(())
}

/// Renders a conversation through the template and computes the loss mask:
/// 1 exactly on assistant content tokens and the end-of-turn marker that
/// closes each assistant turn, 0 everywhere else (headers, prompts,
/// system text, control tokens).
pub fn render_chat<E: TextEncoder>(
    record: &SftRecord,
    template: &ChatTemplate,
    encoder: &E,
) -> Result<RenderedExample> {
    check_roles(&record.turns)?;
    let mut tokens = vec![template.begin_of_text];
    let mut mask = vec![0u8];
    for turn in &record.turns {
        tokens.push(template.start_header);
        mask.push(0);
        for id in encoder.encode_text(&turn.role) {
            tokens.push(id);
            mask.push(0);
        }
        tokens.push(template.end_header);
        mask.push(0);
        for id in encoder.encode_text(&template.header_suffix) {
            tokens.push(id);
            mask.push(0);
        }
        let is_assistant = turn.role == "assistant";
        for id in encoder.encode_text(&turn.text) {
            tokens.push(id);
            mask.push(is_assistant as u8);
        }
        tokens.push(template.end_of_turn);
        mask.push(is_assistant as u8);
    }
    Ok(RenderedExample {
        tokens,
        mask,
        safety: record.safety,
    })
}

/// Right-pads to `len` with `pad_id`; pad positions carry mask 0.
pub fn pad_rendered(example: &mut RenderedExample, len: usize, pad_id: TokenId) {
    while example.tokens.len() < len {
        example.tokens.push(pad_id);
        example.mask.push(0);
    }
}

/// Duplicates every non-safety example to `factor` copies; safety-flagged
/// examples appear exactly once. Output order is a seeded shuffle, so
/// |out| = factor·|non-safety| + |safety|.
pub fn oversample<T: Clone>(
    examples: &[(T, bool)],
    factor: usize,
    seed: u64,
) -> Vec<T> {
    assert!(factor >= 1, "oversampling factor must be at least 1");
    let mut out = Vec::new();
    for (item, safety) in examples {
        let copies = if *safety { 1 } else { factor };
        for _ in 0..copies {
            out.push(item.clone());
        }
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

// ---------------------------------------------------------------------------
// training-recipe manifest

/// The continual-pretraining hyperparameter record, emitted for reference
/// and never consumed by this toolkit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecipeManifest {
    pub entries: BTreeMap<String, String>,
    /// Human-readable notes for keys overridden away from the defaults.
    pub deviations: Vec<String>,
}

impl RecipeManifest {
    pub fn defaults() -> Self {
        let entries = [
            ("adam_beta1", "0.9"),
            ("adam_beta2", "0.95"),
            ("adam_eps", "1e-5"),
            ("batch_tokens", "4194304"),
            ("context_length", "8192"),
            ("grad_clip", "1.0"),
            ("lr_decay", "cosine"),
            ("lr_decay_factor", "10"),
            ("peak_lr", "1.5e-4"),
            ("warmup_fraction", "0.01"),
            ("weight_decay", "0.1"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        RecipeManifest {
            entries,
            deviations: Vec::new(),
        }
    }

    /// Overrides one key, recording the deviation from the default.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let Some(existing) = self.entries.get_mut(key) else {
            let valid: Vec<&String> = self.entries.keys().collect();
            return Err(Error::Format(format!(
                "unknown recipe key {key:?}; valid keys: {valid:?}"
            )));
        };
        if existing != value {
            self.deviations
                .push(format!("{key}={value} (default {existing})"));
            *existing = value.to_string();
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for note in &self.deviations {
            writeln!(w, "# deviation: {note}")?;
        }
        for (k, v) in &self.entries {
            writeln!(w, "{k}={v}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut deviations = Vec::new();
        for line in r.lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(note) = line.strip_prefix("# deviation:") {
                deviations.push(note.trim().to_string());
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("recipe line missing '=': {line:?}")))?;
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(RecipeManifest {
            entries,
            deviations,
        })
    }
}
