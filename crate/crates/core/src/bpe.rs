//! Byte-level BPE: training, vocabulary extension with added-token
//! semantics, fertility evaluation, and the vocab/merges file formats.
//!
//! The byte alphabet (ids 0..=255) guarantees decode(encode(x)) = x for any
//! UTF-8 input. Merges are learned within whitespace-separated words;
//! whitespace itself is emitted as raw byte tokens.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::doc::Document;
use crate::text;
use crate::{Error, Result};

pub type TokenId = u32;

/// Token <-> id bijection with a base/extension partition. The first 256
/// tokens are always the single-byte alphabet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<Vec<u8>>,
    index: HashMap<Vec<u8>, TokenId>,
    base_len: usize,
}

impl Vocabulary {
    /// The 256-entry byte alphabet.
    pub fn byte_alphabet() -> Self {
        let tokens: Vec<Vec<u8>> = (0u16..256).map(|b| vec![b as u8]).collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Vocabulary {
            tokens,
            index,
            base_len: 256,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn base_len(&self) -> usize {
        self.base_len
    }

    pub fn extension_len(&self) -> usize {
        self.tokens.len() - self.base_len
    }

    pub fn id_of(&self, token: &[u8]) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(|t| t.as_slice())
    }

    pub fn contains(&self, token: &[u8]) -> bool {
        self.index.contains_key(token)
    }

    fn push(&mut self, token: Vec<u8>) -> TokenId {
        let id = self.tokens.len() as TokenId;
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    /// Marks everything currently in the vocabulary as base; extension
    /// tokens appended afterwards get strictly greater ids.
    pub fn seal_base(&mut self) {
        self.base_len = self.tokens.len();
    }

    pub fn extension_tokens(&self) -> &[Vec<u8>] {
        &self.tokens[self.base_len..]
    }
}

/// Ordered BPE merge list; applying in order is deterministic.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MergeRules {
    pub merges: Vec<(Vec<u8>, Vec<u8>)>,
}

/// A trained tokenizer: vocabulary, merge ranks, and the longest-first
/// matcher for extension tokens.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub vocab: Vocabulary,
    pub merges: MergeRules,
    ranks: HashMap<(Vec<u8>, Vec<u8>), usize>,
    /// Extension tokens sorted longest first for greedy matching.
    ext_sorted: Vec<(Vec<u8>, TokenId)>,
}

impl Tokenizer {
    pub fn new(vocab: Vocabulary, merges: MergeRules) -> Self {
        let ranks = merges
            .merges
            .iter()
            .enumerate()
            .map(|(i, (a, b))| ((a.clone(), b.clone()), i))
            .collect();
        let mut ext_sorted: Vec<(Vec<u8>, TokenId)> = vocab
            .extension_tokens()
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), (vocab.base_len() + i) as TokenId))
            .collect();
        ext_sorted.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(&b.0)));
        Tokenizer {
            vocab,
            merges,
            ranks,
            ext_sorted,
        }
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for segment in segments(text) {
            match segment {
                Segment::Whitespace(ws) => {
                    out.extend(ws.bytes().map(|b| b as TokenId));
                }
                Segment::Word(w) => self.encode_word(w.as_bytes(), &mut out),
            }
        }
        out
    }

    fn encode_word(&self, bytes: &[u8], out: &mut Vec<TokenId>) {
        // greedy longest-first extension-token matching splits the word;
        // remaining spans go through merge-based BPE
        let mut plain_start = 0;
        let mut i = 0;
        while i < bytes.len() {
            let mut matched = None;
            for (tok, id) in &self.ext_sorted {
                if bytes[i..].starts_with(tok) {
                    matched = Some((tok.len(), *id));
                    break;
                }
            }
            match matched {
                Some((len, id)) => {
                    if plain_start < i {
                        self.bpe_span(&bytes[plain_start..i], out);
                    }
                    out.push(id);
                    i += len;
                    plain_start = i;
                }
                None => i += 1,
            }
        }
        if plain_start < bytes.len() {
            self.bpe_span(&bytes[plain_start..], out);
        }
    }

    fn bpe_span(&self, bytes: &[u8], out: &mut Vec<TokenId>) {
        let mut symbols: Vec<Vec<u8>> = bytes.iter().map(|&b| vec![b]).collect();
        loop {
            let mut best: Option<(usize, usize)> = None; // (rank, position)
            for i in 0..symbols.len().saturating_sub(1) {
                if let Some(&rank) = self
                    .ranks
                    .get(&(symbols[i].clone(), symbols[i + 1].clone()))
                {
                    if best.is_none_or(|(r, _)| rank < r) {
                        best = Some((rank, i));
                    }
                }
            }
            let Some((rank, _)) = best else { break };
            let (left, right) = &self.merges.merges[rank];
            // merge every occurrence of this pair, left to right
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == *left && symbols[i + 1] == *right {
                    let mut tok = symbols[i].clone();
                    tok.extend_from_slice(&symbols[i + 1]);
                    merged.push(tok);
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = merged;
        }
        for sym in symbols {
            let id = self
                .vocab
                .id_of(&sym)
                .expect("merged symbol must be in the vocabulary");
            out.push(id);
        }
    }

    pub fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let tok = self
                .vocab
                .token(id)
                .ok_or(Error::TokenIdOutOfRange(id, self.vocab.len()))?;
            out.extend_from_slice(tok);
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        String::from_utf8(self.decode_bytes(ids)?)
            .map_err(|e| Error::Format(format!("decoded bytes are not UTF-8: {e}")))
    }
}

enum Segment<'a> {
    Whitespace(&'a str),
    Word(&'a str),
}

fn segments(text: &str) -> impl Iterator<Item = Segment<'_>> {
    let mut rest = text;
    std::iter::from_fn(move || {
        if rest.is_empty() {
            return None;
        }
        let first_is_ws = rest.chars().next().unwrap().is_whitespace();
        let end = rest
            .char_indices()
            .find(|(_, c)| c.is_whitespace() != first_is_ws)
            .map(|(i, _)| i)
            .unwrap_or(rest.len());
        let (seg, tail) = rest.split_at(end);
        rest = tail;
        Some(if first_is_ws {
            Segment::Whitespace(seg)
        } else {
            Segment::Word(seg)
        })
    })
}

/// Outcome of BPE training; `reached_target` is false when the corpus ran
/// out of mergeable pairs first.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub vocab: Vocabulary,
    pub merges: MergeRules,
    pub reached_target: bool,
}

/// Standard BPE training: iteratively merge the most frequent adjacent
/// symbol pair until the vocabulary reaches `target_vocab`. Ties break to
/// the lexicographically smallest (left, right) pair.
pub fn train_bpe<'a, I>(corpus: I, target_vocab: usize) -> TrainOutcome
where
    I: IntoIterator<Item = &'a str>,
{
    let mut word_counts: HashMap<&'a str, u64> = HashMap::new();
    for text in corpus {
        for word in text.split_whitespace() {
            *word_counts.entry(word).or_insert(0) += 1;
        }
    }
    let mut words: Vec<(Vec<Vec<u8>>, u64)> = {
        let mut v: Vec<(&str, u64)> = word_counts.into_iter().collect();
        v.sort_unstable(); // deterministic iteration order
        v.into_iter()
            .map(|(w, c)| (w.bytes().map(|b| vec![b]).collect(), c))
            .collect()
    };

    let mut vocab = Vocabulary::byte_alphabet();
    let mut merges = MergeRules::default();

    while vocab.len() < target_vocab {
        let mut pair_counts: HashMap<(&[u8], &[u8]), u64> = HashMap::new();
        for (symbols, count) in &words {
            for pair in symbols.windows(2) {
                *pair_counts
                    .entry((pair[0].as_slice(), pair[1].as_slice()))
                    .or_insert(0) += count;
            }
        }
        let Some(best) = pair_counts
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
            .map(|((a, b), _)| (a.to_vec(), b.to_vec()))
        else {
            break;
        };
        let mut new_token = best.0.clone();
        new_token.extend_from_slice(&best.1);
        for (symbols, _) in &mut words {
            let mut i = 0;
            while i + 1 < symbols.len() {
                if symbols[i] == best.0 && symbols[i + 1] == best.1 {
                    symbols[i] = new_token.clone();
                    symbols.remove(i + 1);
                } else {
                    i += 1;
                }
            }
        }
        vocab.push(new_token);
        merges.merges.push(best);
    }

    let reached_target = vocab.len() >= target_vocab;
    vocab.seal_base();
    TrainOutcome {
        vocab,
        merges,
        reached_target,
    }
}

/// Outcome of extension-token selection.
#[derive(Debug, Clone)]
pub struct SelectionOutcome {
    pub tokens: Vec<Vec<u8>>,
    /// False when fewer novel tokens were available than requested.
    pub fulfilled: bool,
}

/// Picks the `count` highest-frequency tokens of the monolingual tokenizer
/// that are absent from the base vocabulary. Frequency is measured by
/// tokenizing `corpus` with the monolingual tokenizer; ties break to the
/// longer token, then lexicographically.
pub fn select_extension_tokens<'a, I>(
    mono: &Tokenizer,
    corpus: I,
    base: &Vocabulary,
    count: usize,
) -> SelectionOutcome
where
    I: IntoIterator<Item = &'a str>,
{
    let mut freq: HashMap<TokenId, u64> = HashMap::new();
    for text in corpus {
        for id in mono.encode(text) {
            *freq.entry(id).or_insert(0) += 1;
        }
    }
    let mut candidates: Vec<(u64, &[u8])> = mono
        .vocab
        .tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| !base.contains(t))
        .map(|(id, t)| (freq.get(&(id as TokenId)).copied().unwrap_or(0), t.as_slice()))
        .collect();
    candidates.sort_by(|(fa, ta), (fb, tb)| {
        fb.cmp(fa)
            .then_with(|| tb.len().cmp(&ta.len()))
            .then_with(|| ta.cmp(tb))
    });
    let fulfilled = candidates.len() >= count;
    SelectionOutcome {
        tokens: candidates
            .into_iter()
            .take(count)
            .map(|(_, t)| t.to_vec())
            .collect(),
        fulfilled,
    }
}

/// Appends `new_tokens` after the base vocabulary with contiguous new ids.
/// Base ids are unchanged; tokenization of text containing no extension
/// token is identical to the base tokenizer's.
pub fn extend_vocabulary(base: &Vocabulary, new_tokens: &[Vec<u8>]) -> Result<Vocabulary> {
    let mut seen = std::collections::HashSet::new();
    for tok in new_tokens {
        if base.contains(tok) {
            return Err(Error::TokenInBase(String::from_utf8_lossy(tok).into_owned()));
        }
        if !seen.insert(tok.clone()) {
            return Err(Error::DuplicateToken(String::from_utf8_lossy(tok).into_owned()));
        }
    }
    let mut vocab = base.clone();
    vocab.base_len = base.len();
    for tok in new_tokens {
        vocab.push(tok.clone());
    }
    Ok(vocab)
}

/// Fertility report: f = S / W, tokens per whitespace word.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FertilityReport {
    pub corpus_tag: String,
    pub tokens: u64,
    pub words: u64,
    pub fertility: f64,
    pub per_language: HashMap<String, LanguageFertility>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LanguageFertility {
    pub tokens: u64,
    pub words: u64,
    pub fertility: f64,
}

/// Language bucket for the per-language breakdown: script-majority over
/// letters, consistent with the pipeline's classifier.
fn doc_language(doc: &Document) -> &'static str {
    if doc.char_stats.devanagari >= doc.char_stats.latin {
        if doc.char_stats.devanagari == 0 {
            "other"
        } else {
            "hi"
        }
    } else {
        "en"
    }
}

pub fn fertility(tok: &Tokenizer, corpus: &[Document], corpus_tag: &str) -> Result<FertilityReport> {
    let mut total_tokens = 0u64;
    let mut total_words = 0u64;
    let mut per_language: HashMap<String, LanguageFertility> = HashMap::new();
    for doc in corpus {
        let s = tok.encode(&doc.text).len() as u64;
        let w = text::word_count(&doc.text) as u64;
        total_tokens += s;
        total_words += w;
        let lang = per_language.entry(doc_language(doc).to_string()).or_default();
        lang.tokens += s;
        lang.words += w;
    }
    if total_words == 0 {
        return Err(Error::ZeroWords);
    }
    for lang in per_language.values_mut() {
        lang.fertility = if lang.words == 0 {
            0.0
        } else {
            lang.tokens as f64 / lang.words as f64
        };
    }
    Ok(FertilityReport {
        corpus_tag: corpus_tag.to_string(),
        tokens: total_tokens,
        words: total_words,
        fertility: total_tokens as f64 / total_words as f64,
        per_language,
    })
}

/// 100 * (base_f - ext_f) / base_f.
pub fn fertility_reduction(base_f: f64, ext_f: f64) -> f64 {
    assert!(base_f > 0.0);
    100.0 * (base_f - ext_f) / base_f
}

// ---------------------------------------------------------------------------
// file formats

const EXTENSION_MARKER: &str = "#--extension--#";

/// Escapes a token for the vocab/merges files. Backslash, whitespace and
/// control bytes are escaped; everything else (including UTF-8 multibyte
/// runs) passes through, so Devanagari tokens stay readable.
pub fn escape_token(token: &[u8]) -> String {
    let mut out = String::with_capacity(token.len());
    let valid_utf8 = std::str::from_utf8(token).is_ok();
    let mut i = 0;
    while i < token.len() {
        let b = token[i];
        match b {
            b'\\' => out.push_str("\\\\"),
            b'\t' => out.push_str("\\t"),
            b'\n' => out.push_str("\\n"),
            b'\r' => out.push_str("\\r"),
            b' ' => out.push_str("\\s"),
            0x21..=0x7E => out.push(b as char),
            _ if b >= 0x80 && valid_utf8 => out.push(unsafe {
                // safe: whole token checked as UTF-8 above; advance over the
                // full multibyte sequence
                let s = std::str::from_utf8_unchecked(&token[i..]);
                let c = s.chars().next().unwrap();
                i += c.len_utf8() - 1;
                c
            }),
            _ => {
                write!(out, "\\x{b:02x}").unwrap();
            }
        }
        i += 1;
    }
    out
}

pub fn unescape_token(s: &str) -> Result<Vec<u8>> {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'\\' {
            let code = *bytes
                .get(i + 1)
                .ok_or_else(|| Error::Format(format!("dangling escape in {s:?}")))?;
            match code {
                b'\\' => out.push(b'\\'),
                b't' => out.push(b'\t'),
                b'n' => out.push(b'\n'),
                b'r' => out.push(b'\r'),
                b's' => out.push(b' '),
                b'x' => {
                    let hex = s
                        .get(i + 2..i + 4)
                        .ok_or_else(|| Error::Format(format!("short hex escape in {s:?}")))?;
                    out.push(
                        u8::from_str_radix(hex, 16)
                            .map_err(|e| Error::Format(format!("bad hex escape: {e}")))?,
                    );
                    i += 2;
                }
                other => {
                    return Err(Error::Format(format!(
                        "unknown escape \\{} in {s:?}",
                        other as char
                    )))
                }
            }
            i += 2;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    Ok(out)
}

/// Writes "token<TAB>id" lines with an explicit base/extension boundary.
pub fn write_vocab<W: Write>(mut w: W, vocab: &Vocabulary) -> Result<()> {
    for (id, token) in vocab.tokens.iter().enumerate() {
        if id == vocab.base_len {
            writeln!(w, "{EXTENSION_MARKER}")?;
        }
        writeln!(w, "{}\t{}", escape_token(token), id)?;
    }
    if vocab.base_len == vocab.tokens.len() {
        writeln!(w, "{EXTENSION_MARKER}")?;
    }
    Ok(())
}

pub fn read_vocab<R: BufRead>(r: R) -> Result<Vocabulary> {
    let mut tokens = Vec::new();
    let mut base_len = None;
    for line in r.lines() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        if line == EXTENSION_MARKER {
            base_len = Some(tokens.len());
            continue;
        }
        let (tok, id) = line
            .rsplit_once('\t')
            .ok_or_else(|| Error::Format(format!("vocab line missing tab: {line:?}")))?;
        let id: usize = id
            .parse()
            .map_err(|e| Error::Format(format!("bad token id: {e}")))?;
        if id != tokens.len() {
            return Err(Error::Format(format!(
                "non-contiguous token id {id}, expected {}",
                tokens.len()
            )));
        }
        tokens.push(unescape_token(tok)?);
    }
    let base_len = base_len.unwrap_or(tokens.len());
    let index = tokens
        .iter()
        .enumerate()
        .map(|(i, t): (usize, &Vec<u8>)| (t.clone(), i as TokenId))
        .collect();
    Ok(Vocabulary {
        tokens,
        index,
        base_len,
    })
}

/// Ordered "left<SPACE>right" lines (tokens escaped, so the separator
/// space is unambiguous).
pub fn write_merges<W: Write>(mut w: W, merges: &MergeRules) -> Result<()> {
    for (a, b) in &merges.merges {
        writeln!(w, "{} {}", escape_token(a), escape_token(b))?;
    }
    Ok(())
}

pub fn read_merges<R: BufRead>(r: R) -> Result<MergeRules> {
    let mut merges = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (a, b) = line
            .split_once(' ')
            .ok_or_else(|| Error::Format(format!("merges line missing space: {line:?}")))?;
        merges.push((unescape_token(a)?, unescape_token(b)?));
    }
    Ok(MergeRules { merges })
}
