//! Per-document preprocessing: detokenisation, heuristic filtering and
//! cleaning, with an auditable decision trail.
//!
//! Every operation here is deterministic and pure per document; the only
//! corpus-level state is the boilerplate line index, built in a prior
//! read-only pass.

use std::collections::HashMap;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::dedup::{self, DedupParams};
use crate::doc::Document;
use crate::text::{self, CharStats};
use crate::Result;

// ---------------------------------------------------------------------------
// detokenisation

fn is_closing(c: char) -> bool {
    matches!(
        c,
        ')' | ']' | '}' | '\u{0964}' | '\u{0965}' | '.' | ',' | ';' | ':' | '?' | '!' | '\u{2019}' | '\u{201D}'
    )
}

fn is_opening(c: char) -> bool {
    matches!(c, '(' | '[' | '{' | '\u{2018}' | '\u{201C}')
}

/// Reverses pre-tokenisation artifacts: drops spaces before sentence-final
/// punctuation and inside brackets, collapses internal space runs.
/// Idempotent.
pub fn detokenize(text: &str) -> String {
    let lines: Vec<String> = text.split('\n').map(detokenize_line).collect();
    lines.join("\n")
}

fn detokenize_line(line: &str) -> String {
    let mut out = String::with_capacity(line.len());
    let mut pending_space = false;
    for c in line.chars() {
        if c == ' ' || c == '\t' {
            pending_space = true;
            continue;
        }
        if pending_space {
            let after_opening = out.chars().last().is_none_or(is_opening);
            if !is_closing(c) && !after_opening {
                out.push(' ');
            }
            pending_space = false;
        }
        out.push(c);
    }
    out
}

// ---------------------------------------------------------------------------
// filtering

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterRule {
    MinWords,
    LongWord,
    HindiSentences,
    HindiChars,
    SpecialSymbols,
}

impl FilterRule {
    pub const ALL: [FilterRule; 5] = [
        FilterRule::MinWords,
        FilterRule::LongWord,
        FilterRule::HindiSentences,
        FilterRule::HindiChars,
        FilterRule::SpecialSymbols,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FilterRule::MinWords => "min_words",
            FilterRule::LongWord => "long_word",
            FilterRule::HindiSentences => "hindi_sentences",
            FilterRule::HindiChars => "hindi_chars",
            FilterRule::SpecialSymbols => "special_symbols",
        }
    }
}

/// Basis over which the Hindi character ratio is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HindiCharBasis {
    /// Devanagari letters / all letters (default).
    #[default]
    Letters,
    /// Devanagari letters / all non-whitespace characters.
    AllChars,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterThresholds {
    pub min_words: usize,
    pub max_word_chars: usize,
    pub hindi_sentence_frac: f64,
    pub hindi_char_frac: f64,
    pub symbol_frac: f64,
    /// Per-sentence Devanagari-letter ratio above which a sentence counts
    /// as Hindi.
    pub sentence_hindi_frac: f64,
    pub hindi_char_basis: HindiCharBasis,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        FilterThresholds {
            min_words: 20,
            max_word_chars: 100,
            hindi_sentence_frac: 0.5,
            hindi_char_frac: 0.7,
            symbol_frac: 0.2,
            sentence_hindi_frac: 0.5,
            hindi_char_basis: HindiCharBasis::Letters,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub kept: bool,
    pub failed_rules: Vec<FilterRule>,
    pub measurements: HashMap<FilterRule, f64>,
}

/// True iff the fraction of Devanagari letters among all letters in the
/// sentence exceeds `threshold`.
pub fn classify_sentence_hindi(sentence: &str, threshold: f64) -> bool {
    let stats = CharStats::of(sentence);
    let letters = stats.letters();
    if letters == 0 {
        return false;
    }
    stats.devanagari as f64 / letters as f64 > threshold
}

/// Applies the five document-level quality rules. Rules are independent
/// predicates; all measurements are recorded whether or not the rule fired.
pub fn filter_document(doc: &Document, thresholds: &FilterThresholds) -> FilterVerdict {
    let mut failed = Vec::new();
    let mut measurements = HashMap::new();

    let words = doc.word_count;
    measurements.insert(FilterRule::MinWords, words as f64);
    if words < thresholds.min_words {
        failed.push(FilterRule::MinWords);
    }

    let longest = doc
        .text
        .split_whitespace()
        .map(|w| w.chars().count())
        .max()
        .unwrap_or(0);
    measurements.insert(FilterRule::LongWord, longest as f64);
    if longest > thresholds.max_word_chars {
        failed.push(FilterRule::LongWord);
    }

    let sentences = text::split_sentences(&doc.text);
    let hindi_sent_frac = if sentences.is_empty() {
        1.0
    } else {
        let hindi = sentences
            .iter()
            .filter(|s| classify_sentence_hindi(s, thresholds.sentence_hindi_frac))
            .count();
        hindi as f64 / sentences.len() as f64
    };
    measurements.insert(FilterRule::HindiSentences, hindi_sent_frac);
    if hindi_sent_frac < thresholds.hindi_sentence_frac {
        failed.push(FilterRule::HindiSentences);
    }

    let stats = &doc.char_stats;
    let basis = match thresholds.hindi_char_basis {
        HindiCharBasis::Letters => stats.letters(),
        HindiCharBasis::AllChars => stats.non_whitespace(),
    };
    let hindi_char_ratio = if basis == 0 {
        1.0
    } else {
        stats.devanagari as f64 / basis as f64
    };
    measurements.insert(FilterRule::HindiChars, hindi_char_ratio);
    if hindi_char_ratio < thresholds.hindi_char_frac {
        failed.push(FilterRule::HindiChars);
    }

    let non_ws = stats.non_whitespace();
    let symbol_ratio = if non_ws == 0 {
        0.0
    } else {
        (stats.punct_symbols + stats.digits) as f64 / non_ws as f64
    };
    measurements.insert(FilterRule::SpecialSymbols, symbol_ratio);
    if symbol_ratio > thresholds.symbol_frac {
        failed.push(FilterRule::SpecialSymbols);
    }

    FilterVerdict {
        kept: failed.is_empty(),
        failed_rules: failed,
        measurements,
    }
}

// ---------------------------------------------------------------------------
// cleaning

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CleanConfig {
    /// Consecutive n-gram repeats at or above this count collapse to one.
    pub repeat_threshold: usize,
    /// Lines appearing in more than this fraction of same-source documents
    /// are boilerplate.
    pub boilerplate_frac: f64,
    /// Lines shorter than this (in chars) are never treated as boilerplate.
    pub boilerplate_min_chars: usize,
    /// Phrases to redact. Placeholder list; operators supply their own.
    pub blocklist: Vec<String>,
    /// Bracketed phrases removed as citation markers, in addition to
    /// numeric markers like "[12]".
    pub citation_phrases: Vec<String>,
}

impl Default for CleanConfig {
    fn default() -> Self {
        CleanConfig {
            repeat_threshold: 3,
            boilerplate_frac: 0.5,
            boilerplate_min_chars: 15,
            blocklist: Vec::new(),
            citation_phrases: vec![
                "citation needed".to_string(),
                "उद्धरण आवश्यक".to_string(),
            ],
        }
    }
}

/// Corpus-level line-frequency index backing the boilerplate stage.
/// Built in a read-only pass over filtered documents, keyed by source.
#[derive(Debug, Clone, Default)]
pub struct BoilerplateIndex {
    per_source: HashMap<String, SourceLines>,
}

#[derive(Debug, Clone, Default)]
struct SourceLines {
    doc_count: usize,
    line_doc_counts: HashMap<String, usize>,
}

impl BoilerplateIndex {
    pub fn build(docs: &[Document], min_chars: usize) -> Self {
        let mut per_source: HashMap<String, SourceLines> = HashMap::new();
        for doc in docs {
            let entry = per_source.entry(doc.source.clone()).or_default();
            entry.doc_count += 1;
            let mut seen = std::collections::HashSet::new();
            for line in doc.text.split('\n') {
                let line = line.trim();
                if line.chars().count() >= min_chars && seen.insert(line) {
                    *entry.line_doc_counts.entry(line.to_string()).or_insert(0) += 1;
                }
            }
        }
        BoilerplateIndex { per_source }
    }

    fn is_boilerplate(&self, source: &str, line: &str, frac: f64, min_chars: usize) -> bool {
        if line.chars().count() < min_chars {
            return false;
        }
        let Some(src) = self.per_source.get(source) else {
            return false;
        };
        if src.doc_count == 0 {
            return false;
        }
        let count = src.line_doc_counts.get(line).copied().unwrap_or(0);
        count as f64 / src.doc_count as f64 > frac
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditEntry {
    pub id: String,
    pub stage: String,
    pub rule: String,
    pub measurement: f64,
    pub action: String,
}

/// Clean stages with their regexes compiled once.
pub struct Cleaner {
    config: CleanConfig,
    citation_re: Regex,
    blocklist_re: Option<Regex>,
}

impl Cleaner {
    pub fn new(config: CleanConfig) -> Self {
        let mut alts = vec![r"\d+".to_string()];
        for p in &config.citation_phrases {
            alts.push(regex::escape(p));
        }
        let citation_re =
            Regex::new(&format!(r"\[\s*(?:{})\s*\]", alts.join("|"))).expect("static pattern");
        let blocklist_re = if config.blocklist.is_empty() {
            None
        } else {
            let alts: Vec<String> = config.blocklist.iter().map(|p| regex::escape(p)).collect();
            Some(Regex::new(&format!(r"\b(?:{})\b", alts.join("|"))).expect("escaped pattern"))
        };
        Cleaner {
            config,
            citation_re,
            blocklist_re,
        }
    }

    /// Applies the seven clean stages in order. A missing boilerplate index
    /// disables that stage only, recorded in the audit trail.
    pub fn clean_document(
        &self,
        doc: &Document,
        index: Option<&BoilerplateIndex>,
        audit: &mut Vec<AuditEntry>,
    ) -> Document {
        let mut note = |stage: &str, action: &str, measurement: f64| {
            audit.push(AuditEntry {
                id: doc.id.clone(),
                stage: "clean".to_string(),
                rule: stage.to_string(),
                measurement,
                action: action.to_string(),
            });
        };

        let mut t = doc.text.clone();

        if let Some(fixed) = repair_mojibake(&t) {
            note("unicode_fix", "repaired", 1.0);
            t = fixed;
        }

        t = normalize(&t);
        t = strip_markup(&t);
        let after_citation = self.citation_re.replace_all(&t, "").into_owned();
        if after_citation != t {
            note("citation_removal", "removed", 1.0);
        }
        t = after_citation;

        match index {
            Some(idx) => {
                let mut kept_lines = Vec::new();
                let mut dropped = 0usize;
                for line in t.split('\n') {
                    let trimmed = line.trim();
                    if idx.is_boilerplate(
                        &doc.source,
                        trimmed,
                        self.config.boilerplate_frac,
                        self.config.boilerplate_min_chars,
                    ) {
                        dropped += 1;
                    } else {
                        kept_lines.push(line);
                    }
                }
                if dropped > 0 {
                    note("boilerplate_removal", "dropped_lines", dropped as f64);
                }
                t = kept_lines.join("\n");
            }
            None => note("boilerplate_removal", "skipped_no_index", 0.0),
        }

        if let Some(re) = &self.blocklist_re {
            let redacted = re.replace_all(&t, "").into_owned();
            if redacted != t {
                note("bad_word_removal", "redacted", 1.0);
                t = redacted;
            }
        }

        t = t
            .split('\n')
            .map(|line| collapse_repeats(line, self.config.repeat_threshold))
            .filter(|line| !line.is_empty())
            .collect::<Vec<_>>()
            .join("\n");

        let mut cleaned = doc.clone();
        cleaned.text = t;
        cleaned.refresh();
        cleaned
    }
}

/// Repairs UTF-8 text that was decoded as Latin-1 (the common mojibake
/// class). Returns None when the text does not look corrupted or cannot be
/// repaired this way.
fn repair_mojibake(text: &str) -> Option<String> {
    if !text.chars().any(|c| ('\u{80}'..'\u{100}').contains(&c)) {
        return None;
    }
    let mut bytes = Vec::with_capacity(text.len());
    for c in text.chars() {
        let cp = c as u32;
        if cp >= 0x100 {
            return None;
        }
        bytes.push(cp as u8);
    }
    match String::from_utf8(bytes) {
        Ok(s) if s.chars().any(|c| c as u32 >= 0x80) => Some(s),
        _ => None,
    }
}

/// Canonical composition plus Devanagari punctuation normalization:
/// an ASCII '|' ending a Devanagari clause becomes a danda.
fn normalize(text: &str) -> String {
    let composed: String = text.nfc().collect();
    let chars: Vec<char> = composed.chars().collect();
    let mut out = String::with_capacity(composed.len());
    for (i, &c) in chars.iter().enumerate() {
        if c == '|' {
            let prev = chars[..i].iter().rev().find(|p| !p.is_whitespace());
            if prev.is_some_and(|&p| text::is_devanagari(p)) {
                out.push('\u{0964}');
                continue;
            }
        }
        out.push(c);
    }
    out
}

/// Removes markup tags and script/style payloads while preserving
/// inter-tag text. A '<' not followed by a letter, '/', or '!' is literal.
fn strip_markup(input: &str) -> String {
    let chars: Vec<char> = input.chars().collect();
    let mut out = String::with_capacity(input.len());
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '<' && i + 1 < chars.len() {
            let next = chars[i + 1];
            if next == '!' {
                // comment or doctype: skip to '>', honoring '-->' for comments
                if chars[i..].starts_with(&['<', '!', '-', '-']) {
                    i = find_subseq(&chars, i + 4, &['-', '-', '>']).unwrap_or(chars.len());
                } else {
                    i = find_char(&chars, i + 1, '>').map_or(chars.len(), |j| j + 1);
                }
                continue;
            }
            if next.is_ascii_alphabetic() || next == '/' {
                let tag_end = match find_char(&chars, i + 1, '>') {
                    Some(j) => j,
                    None => break, // malformed trailing tag: drop the rest
                };
                let tag: String = chars[i + 1..tag_end].iter().collect();
                let name: String = tag
                    .trim_start_matches('/')
                    .chars()
                    .take_while(|c| c.is_ascii_alphanumeric())
                    .collect::<String>()
                    .to_ascii_lowercase();
                i = tag_end + 1;
                if !tag.starts_with('/') && (name == "script" || name == "style") {
                    let close: Vec<char> = format!("</{name}").chars().collect();
                    match find_subseq_ci(&chars, i, &close) {
                        Some(j) => {
                            i = find_char(&chars, j, '>').map_or(chars.len(), |k| k + 1);
                        }
                        None => break, // unclosed payload: drop the rest
                    }
                }
                continue;
            }
        }
        out.push(c);
        i += 1;
    }
    out
}

fn find_char(chars: &[char], from: usize, target: char) -> Option<usize> {
    chars[from..].iter().position(|&c| c == target).map(|p| from + p)
}

fn find_subseq(chars: &[char], from: usize, needle: &[char]) -> Option<usize> {
    (from..chars.len().saturating_sub(needle.len() - 1))
        .find(|&i| &chars[i..i + needle.len()] == needle)
        .map(|i| i + needle.len())
}

fn find_subseq_ci(chars: &[char], from: usize, needle: &[char]) -> Option<usize> {
    (from..=chars.len().saturating_sub(needle.len()))
        .find(|&i| {
            chars[i..i + needle.len()]
                .iter()
                .zip(needle)
                .all(|(a, b)| a.eq_ignore_ascii_case(b))
        })
        .map(|i| i + needle.len())
}

/// Collapses any word n-gram (n in 1..=4) repeated consecutively at least
/// `r` times to a single occurrence. Also normalizes internal whitespace.
fn collapse_repeats(line: &str, r: usize) -> String {
    let mut words: Vec<&str> = line.split_whitespace().collect();
    for n in 1..=4usize {
        let mut out: Vec<&str> = Vec::with_capacity(words.len());
        let mut i = 0;
        while i < words.len() {
            if i + n <= words.len() {
                let mut reps = 1;
                while i + (reps + 1) * n <= words.len()
                    && words[i..i + n] == words[i + reps * n..i + (reps + 1) * n]
                {
                    reps += 1;
                }
                if reps >= r {
                    out.extend_from_slice(&words[i..i + n]);
                    i += reps * n;
                    continue;
                }
            }
            out.push(words[i]);
            i += 1;
        }
        words = out;
    }
    words.join(" ")
}

// ---------------------------------------------------------------------------
// full pipeline

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub thresholds: FilterThresholds,
    pub clean: CleanConfig,
    pub dedup: DedupParams,
    /// Disables the corpus-level boilerplate pass when false.
    pub build_boilerplate_index: bool,
}

impl PipelineConfig {
    pub fn new() -> Self {
        PipelineConfig {
            thresholds: FilterThresholds::default(),
            clean: CleanConfig::default(),
            dedup: DedupParams::default(),
            build_boilerplate_index: true,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PipelineStats {
    pub input_docs: usize,
    pub kept_docs: usize,
    pub input_chars: usize,
    pub kept_chars: usize,
    pub retention_ratio: f64,
    pub rule_rejections: HashMap<FilterRule, usize>,
    pub dedup_removed: usize,
    pub dropped_irreparable: usize,
}

/// detokenize -> filter -> clean -> re-filter -> dedup, with stats and a
/// full audit trail. Surviving documents keep their input order.
pub fn run_pipeline(
    docs: Vec<Document>,
    config: &PipelineConfig,
) -> Result<(Vec<Document>, PipelineStats, Vec<AuditEntry>)> {
    let mut stats = PipelineStats {
        input_docs: docs.len(),
        input_chars: docs.iter().map(|d| d.text.chars().count()).sum(),
        ..Default::default()
    };
    let mut audit = Vec::new();

    let docs: Vec<Document> = docs
        .into_par_iter()
        .map(|mut d| {
            d.text = detokenize(&d.text);
            d.refresh();
            d
        })
        .collect();

    let verdicts: Vec<FilterVerdict> = docs
        .par_iter()
        .map(|d| filter_document(d, &config.thresholds))
        .collect();
    let mut filtered = Vec::new();
    for (doc, verdict) in docs.into_iter().zip(verdicts) {
        if verdict.kept {
            filtered.push(doc);
        } else {
            for rule in &verdict.failed_rules {
                *stats.rule_rejections.entry(*rule).or_insert(0) += 1;
                audit.push(AuditEntry {
                    id: doc.id.clone(),
                    stage: "filter".to_string(),
                    rule: rule.name().to_string(),
                    measurement: verdict.measurements[rule],
                    action: "rejected".to_string(),
                });
            }
        }
    }

    let index = if config.build_boilerplate_index {
        Some(BoilerplateIndex::build(
            &filtered,
            config.clean.boilerplate_min_chars,
        ))
    } else {
        None
    };
    let cleaner = Cleaner::new(config.clean.clone());

    let mut cleaned = Vec::new();
    for doc in &filtered {
        let out = cleaner.clean_document(doc, index.as_ref(), &mut audit);
        if out.text.contains('\u{FFFD}') {
            stats.dropped_irreparable += 1;
            audit.push(AuditEntry {
                id: doc.id.clone(),
                stage: "clean".to_string(),
                rule: "unicode_fix".to_string(),
                measurement: 0.0,
                action: "dropped_irreparable".to_string(),
            });
            continue;
        }
        // cleaning can shrink a document below the quality bar; re-check so
        // every emitted document passes the filters
        let verdict = filter_document(&out, &config.thresholds);
        if verdict.kept {
            cleaned.push(out);
        } else {
            for rule in &verdict.failed_rules {
                *stats.rule_rejections.entry(*rule).or_insert(0) += 1;
                audit.push(AuditEntry {
                    id: out.id.clone(),
                    stage: "refilter".to_string(),
                    rule: rule.name().to_string(),
                    measurement: verdict.measurements[rule],
                    action: "rejected".to_string(),
                });
            }
        }
    }

    let (deduped, report) = dedup::dedup_corpus(cleaned, &config.dedup)?;
    stats.dedup_removed = report.clusters.iter().map(|c| c.removed_ids.len()).sum();
    for cluster in &report.clusters {
        for removed in &cluster.removed_ids {
            audit.push(AuditEntry {
                id: removed.clone(),
                stage: "dedup".to_string(),
                rule: "near_duplicate".to_string(),
                measurement: cluster.estimated_similarity,
                action: format!("removed_duplicate_of:{}", cluster.kept_id),
            });
        }
    }

    stats.kept_docs = deduped.len();
    stats.kept_chars = deduped.iter().map(|d| d.text.chars().count()).sum();
    stats.retention_ratio = if stats.input_chars == 0 {
        1.0
    } else {
        stats.kept_chars as f64 / stats.input_chars as f64
    };
    Ok((deduped, stats, audit))
}
