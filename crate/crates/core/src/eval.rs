//! Zero-shot multiple-choice scoring by normalized log-likelihood, plus the
//! pairwise judge protocol: prompt rendering and score-tag parsing. The
//! judge model itself is external; only the text in and the integers out
//! are handled here.

use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::bpe::Tokenizer;
use crate::model;
use crate::tensor::{Checkpoint, Scalar};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// multiple-choice scoring

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultipleChoiceItem {
    pub context: String,
    pub candidates: Vec<String>,
    pub gold: usize,
}

impl MultipleChoiceItem {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.len() < 2 {
            return Err(Error::Format(
                "multiple-choice item needs at least 2 candidates".to_string(),
            ));
        }
        if self.gold >= self.candidates.len() {
            return Err(Error::Format(format!(
                "gold index {} out of range ({} candidates)",
                self.gold,
                self.candidates.len()
            )));
        }
        Ok(())
    }
}

pub fn read_mc_jsonl<R: BufRead>(r: R) -> Result<Vec<MultipleChoiceItem>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: MultipleChoiceItem = serde_json::from_str(&line)?;
        item.validate()?;
        out.push(item);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct Loglik {
    /// Sum of token log-probabilities over the continuation only.
    pub sum: f64,
    pub token_count: usize,
}

/// A scoring backend: token-level log-likelihood of a continuation given a
/// context. Implementations must be safe for concurrent read-only use.
pub trait ScoringInterface: Sync {
    fn loglikelihood(&self, context: &str, continuation: &str) -> Result<Loglik>;
}

/// Scores through the reference forward pass with the byte-level
/// tokenizer: continuation tokens are the suffix of encode(context ‖
/// continuation) beyond the pure-context encoding.
pub struct ModelScorer<'a, T: Scalar> {
    pub checkpoint: &'a Checkpoint<T>,
    pub tokenizer: &'a Tokenizer,
}

impl<T: Scalar> ScoringInterface for ModelScorer<'_, T> {
    fn loglikelihood(&self, context: &str, continuation: &str) -> Result<Loglik> {
        let ctx_tokens = self.tokenizer.encode(context);
        let full = format!("{context}{continuation}");
        let all_tokens = self.tokenizer.encode(&full);
        if ctx_tokens.is_empty() {
            return Err(Error::Scoring("empty context after tokenization".to_string()));
        }
        if all_tokens.len() <= ctx_tokens.len() {
            return Err(Error::Scoring("empty continuation".to_string()));
        }
        let logits = model::forward(self.checkpoint, &all_tokens)
            .map_err(|e| Error::Scoring(e.to_string()))?;
        let mut sum = 0.0f64;
        for pos in ctx_tokens.len()..all_tokens.len() {
            // logits at pos-1 predict the token at pos
            let row = logits.row(pos - 1);
            sum += log_softmax_at(row, all_tokens[pos] as usize);
        }
        Ok(Loglik {
            sum,
            token_count: all_tokens.len() - ctx_tokens.len(),
        })
    }
}

fn log_softmax_at<T: Scalar>(row: &[T], index: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v.cast_f64()));
    let log_z = row
        .iter()
        .map(|&v| (v.cast_f64() - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    row[index].cast_f64() - log_z
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Norm {
    None,
    PerByte,
    PerToken,
}

impl Default for Norm {
    fn default() -> Self {
        Norm::PerByte
    }
}

impl std::str::FromStr for Norm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Norm::None),
            "per-byte" => Ok(Norm::PerByte),
            "per-token" => Ok(Norm::PerToken),
            other => Err(Error::Format(format!(
                "unknown normalization {other:?} (expected none | per-byte | per-token)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateScore {
    pub loglik: f64,
    pub byte_len: usize,
    pub token_count: usize,
    pub normalized: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredChoice {
    pub candidates: Vec<CandidateScore>,
    pub chosen: usize,
}

/// Scores every candidate continuation against the item context and picks
/// the argmax of the normalized score; ties break to the lowest index. A
/// backend failure on any candidate fails the whole item — it is reported
/// as unscored, never silently skipped.
pub fn score_candidates<S: ScoringInterface>(
    item: &MultipleChoiceItem,
    model: &S,
    norm: Norm,
) -> Result<ScoredChoice> {
    item.validate()?;
    let mut candidates = Vec::with_capacity(item.candidates.len());
    for cand in &item.candidates {
        let ll = model.loglikelihood(&item.context, cand)?;
        let byte_len = cand.len();
        let normalized = match norm {
            Norm::None => ll.sum,
            Norm::PerByte => ll.sum / byte_len.max(1) as f64,
            Norm::PerToken => ll.sum / ll.token_count.max(1) as f64,
        };
        candidates.push(CandidateScore {
            loglik: ll.sum,
            byte_len,
            token_count: ll.token_count,
            normalized,
        });
    }
    let mut chosen = 0usize;
    for (i, c) in candidates.iter().enumerate().skip(1) {
        if c.normalized > candidates[chosen].normalized {
            chosen = i;
        }
    }
    Ok(ScoredChoice { candidates, chosen })
}

/// Fraction of items whose chosen index equals gold.
pub fn accuracy(scored: &[ScoredChoice], golds: &[usize]) -> Result<f64> {
    if scored.is_empty() {
        return Err(Error::EmptyInput("no scored items".to_string()));
    }
    if scored.len() != golds.len() {
        return Err(Error::Format(format!(
            "{} scored items vs {} golds",
            scored.len(),
            golds.len()
        )));
    }
    let correct = scored
        .iter()
        .zip(golds)
        .filter(|(s, &g)| s.chosen == g)
        .count();
    Ok(correct as f64 / scored.len() as f64)
}

/// Generation settings recorded as metadata alongside judged outputs;
/// generation itself is delegated to the model backend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationDefaults {
    pub temperature: f64,
    pub repetition_penalty: f64,
}

impl Default for GenerationDefaults {
    fn default() -> Self {
        GenerationDefaults {
            temperature: 0.3,
            repetition_penalty: 1.2,
        }
    }
}

// ---------------------------------------------------------------------------
// pairwise judge protocol

pub const JUDGE_INSTRUCTION: &str = "You are a helpful and precise assistant for checking the quality of two Hindi language assistants. Suppose the user speaks only Hindi and Hinglish (Hindi words written in English script), please evaluate both answers with your justification, and provide an integer score ranging from 0 to 10 after your justifications. When evaluating the answers, you should consider the helpfulness, relevance, accuracy, and level of detail of the answers. Do not consider only length as the parameter in level of details, the answer must also be relevant. The score for answer 1 should be wrapped by <score1> and </score1>, and the score for answer 2 should be wrapped by <score2> and </score2>.";

/// Byte-stable judge prompt: the fixed instruction followed by the
/// question and both answers in fixed slots.
pub fn render_judge_prompt(question: &str, answer1: &str, answer2: &str) -> String {
    format!(
        "{JUDGE_INSTRUCTION}\n\n[Question]\n{question}\n\n[Answer 1]\n{answer1}\n\n[Answer 2]\n{answer2}\n"
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub raw: String,
    pub score1: Option<i64>,
    pub score2: Option<i64>,
    /// None on success, otherwise the parse-failure reason.
    pub failure: Option<String>,
}

impl JudgeVerdict {
    pub fn parsed(&self) -> bool {
        self.failure.is_none()
    }
}

fn extract_score(raw: &str, tag: &str) -> std::result::Result<i64, String> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let int_re = regex::Regex::new(r"-?\d+").unwrap();
    let mut values: Vec<i64> = Vec::new();
    let mut rest = raw;
    while let Some(start) = rest.find(&open) {
        let after = &rest[start + open.len()..];
        let Some(end) = after.find(&close) else {
            return Err(format!("unterminated {open}"));
        };
        let inner = &after[..end];
        // first integer inside the tag pair, tolerating justification text
        let Some(m) = int_re.find(inner) else {
            return Err(format!("no integer inside {open}"));
        };
        let value: i64 = m
            .as_str()
            .parse()
            .map_err(|e| format!("bad integer inside {open}: {e}"))?;
        values.push(value);
        rest = &after[end + close.len()..];
    }
    match values.as_slice() {
        [] => Err(format!("missing {open}")),
        [v] => Ok(*v),
        many => {
            if many.iter().all(|&v| v == many[0]) {
                Ok(many[0])
            } else {
                Err(format!("conflicting duplicate {open} values {many:?}"))
            }
        }
    }
}

/// Extracts the two wrapped integer scores and validates them against the
/// [0,10] range. Any ambiguity is a parse failure with a reason; a score is
/// never fabricated.
pub fn parse_judge(raw: &str) -> JudgeVerdict {
    let mut verdict = JudgeVerdict {
        raw: raw.to_string(),
        score1: None,
        score2: None,
        failure: None,
    };
    let s1 = extract_score(raw, "score1");
    let s2 = extract_score(raw, "score2");
    match (s1, s2) {
        (Ok(a), Ok(b)) => {
            if !(0..=10).contains(&a) || !(0..=10).contains(&b) {
                verdict.failure = Some(format!("score out of range [0,10]: ({a}, {b})"));
            } else {
                verdict.score1 = Some(a);
                verdict.score2 = Some(b);
            }
        }
        (Err(e), _) | (_, Err(e)) => verdict.failure = Some(e),
    }
    verdict
}

/// A judged comparison transcript as stored on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeTranscript {
    pub question: String,
    pub answer1: String,
    pub answer2: String,
    pub raw_judgment: String,
}

pub fn read_judge_jsonl<R: BufRead>(r: R) -> Result<Vec<JudgeTranscript>> {
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseSummary {
    pub wins1: usize,
    pub wins2: usize,
    pub ties: usize,
    pub mean1: f64,
    pub mean2: f64,
    pub parsed: usize,
    pub failed: usize,
}

impl PairwiseSummary {
    pub fn to_csv(&self, model_a: &str, model_b: &str) -> String {
        format!(
            "model_a,model_b,wins,ties,losses,mean_a,mean_b\n{model_a},{model_b},{},{},{},{},{}\n",
            self.wins1, self.ties, self.wins2, self.mean1, self.mean2
        )
    }
}

/// Counts strict wins, ties, and mean scores over successfully parsed
/// verdicts; failed parses are tallied but excluded from the statistics.
pub fn aggregate_pairwise(verdicts: &[JudgeVerdict]) -> Result<PairwiseSummary> {
    let mut summary = PairwiseSummary {
        wins1: 0,
        wins2: 0,
        ties: 0,
        mean1: 0.0,
        mean2: 0.0,
        parsed: 0,
        failed: 0,
    };
    let (mut sum1, mut sum2) = (0i64, 0i64);
    for v in verdicts {
        let (Some(a), Some(b)) = (v.score1, v.score2) else {
            summary.failed += 1;
            continue;
        };
        summary.parsed += 1;
        sum1 += a;
        sum2 += b;
        match a.cmp(&b) {
            std::cmp::Ordering::Greater => summary.wins1 += 1,
            std::cmp::Ordering::Less => summary.wins2 += 1,
            std::cmp::Ordering::Equal => summary.ties += 1,
        }
    }
    if summary.parsed == 0 {
        return Err(Error::EmptyInput(
            "no successfully parsed verdicts".to_string(),
        ));
    }
    summary.mean1 = sum1 as f64 / summary.parsed as f64;
    summary.mean2 = sum2 as f64 / summary.parsed as f64;
    Ok(summary)
}
