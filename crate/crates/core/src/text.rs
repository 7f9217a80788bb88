//! Character-class and segmentation helpers shared across the pipeline.
//!
//! "Word" means a maximal whitespace-separated run everywhere in this
//! crate; the tokenizer fertility denominator uses the same notion.

/// Devanagari block, U+0900..=U+097F, plus the extended block.
pub fn is_devanagari(c: char) -> bool {
    matches!(c, '\u{0900}'..='\u{097F}' | '\u{A8E0}'..='\u{A8FF}')
}

/// Devanagari letters and combining vowel signs, excluding punctuation
/// (danda, double danda) and the Devanagari digits.
pub fn is_devanagari_letter(c: char) -> bool {
    is_devanagari(c) && !matches!(c, '\u{0964}' | '\u{0965}' | '\u{0966}'..='\u{096F}') && {
        // vowel signs (matras) and other combining marks count as letters
        // for script-ratio purposes
        c.is_alphabetic() || unicode_is_mark(c)
    }
}

// Mn/Mc marks in the Devanagari block; char::is_alphabetic excludes them
// but they are clearly Hindi text, so the script ratio should see them.
fn unicode_is_mark(c: char) -> bool {
    matches!(c,
        '\u{0900}'..='\u{0903}' | '\u{093A}'..='\u{093C}' | '\u{093E}'..='\u{094F}'
        | '\u{0951}'..='\u{0957}' | '\u{0962}' | '\u{0963}')
}

pub fn is_letter(c: char) -> bool {
    c.is_alphabetic() || (is_devanagari(c) && unicode_is_mark(c))
}

pub fn is_digit(c: char) -> bool {
    c.is_numeric()
}

/// Punctuation and symbols: visible characters that are neither letters
/// nor digits.
pub fn is_punct_or_symbol(c: char) -> bool {
    !c.is_whitespace() && !is_letter(c) && !is_digit(c)
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Sentence segmentation: split on danda (।), double danda, '?', '!', and
/// '.' when followed by whitespace or end of text. Covers Hindi plus
/// embedded English.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        let end_here = match c {
            '\u{0964}' | '\u{0965}' | '?' | '!' => true,
            '.' => match chars.peek() {
                Some(&(_, next)) => next.is_whitespace(),
                None => true,
            },
            _ => false,
        };
        if end_here {
            let sent = text[start..i + c.len_utf8()].trim();
            if !sent.is_empty() {
                out.push(sent);
            }
            start = i + c.len_utf8();
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Per-class character counts over a document. Classes are disjoint:
/// every non-whitespace character lands in exactly one bucket.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CharStats {
    pub devanagari: usize,
    pub latin: usize,
    pub digits: usize,
    pub punct_symbols: usize,
}

impl CharStats {
    pub fn of(text: &str) -> Self {
        let mut s = CharStats::default();
        for c in text.chars() {
            if c.is_whitespace() {
                continue;
            }
            if is_devanagari_letter(c) {
                s.devanagari += 1;
            } else if is_letter(c) {
                s.latin += 1;
            } else if is_digit(c) {
                s.digits += 1;
            } else {
                s.punct_symbols += 1;
            }
        }
        s
    }

    pub fn letters(&self) -> usize {
        self.devanagari + self.latin
    }

    pub fn non_whitespace(&self) -> usize {
        self.devanagari + self.latin + self.digits + self.punct_symbols
    }
}
