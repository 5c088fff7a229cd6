//! Remote supervision: align structured key/value records with article text to
//! produce weakly supervised QA pairs.
//!
//! Matching is exact and case-sensitive on normalized text, anchored at word
//! boundaries. Offsets are byte offsets into the normalized article.

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::doc::{AnswerSpan, Document, Interval, QaPair};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredRecord {
    pub entity_id: String,
    pub fields: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceArticle {
    pub entity_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeakQa {
    pub prompt: String,
    pub answer_text: String,
    pub occurrences: Vec<Interval>,
    pub chosen: usize,
}

impl WeakQa {
    pub fn chosen_occurrence(&self) -> Interval {
        self.occurrences[self.chosen]
    }
}

/// NFC, whitespace runs collapsed to one space, trimmed. Case is preserved.
pub fn normalize(text: &str) -> String {
    let composed: String = text.nfc().collect();
    composed.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn at_boundary(text: &str, start: usize, end: usize) -> bool {
    let before = text[..start].chars().next_back();
    let after = text[end..].chars().next();
    let first = text[start..end].chars().next();
    let last = text[start..end].chars().next_back();
    let left_ok = match (before, first) {
        (Some(b), Some(f)) => !(is_word_char(b) && is_word_char(f)),
        _ => true,
    };
    let right_ok = match (last, after) {
        (Some(l), Some(a)) => !(is_word_char(l) && is_word_char(a)),
        _ => true,
    };
    left_ok && right_ok
}

/// All boundary-aligned occurrences of `needle` in `haystack`, left to right,
/// including overlapping ones.
pub fn find_occurrences(haystack: &str, needle: &str) -> Vec<Interval> {
    let mut out = Vec::new();
    if needle.is_empty() {
        return out;
    }
    let mut from = 0;
    while let Some(pos) = haystack[from..].find(needle) {
        let start = from + pos;
        let end = start + needle.len();
        if at_boundary(haystack, start, end) {
            out.push(Interval::new(start, end));
        }
        let step = haystack[start..].chars().next().map_or(1, char::len_utf8);
        from = start + step;
    }
    out
}

/// One [`WeakQa`] per field whose value is found in the article; unmatched fields are dropped.
pub fn match_record(record: &StructuredRecord, article: &SourceArticle) -> Vec<WeakQa> {
    debug_assert_eq!(record.entity_id, article.entity_id);
    let text = normalize(&article.text);
    record
        .fields
        .iter()
        .filter_map(|(key, value)| {
            let value = normalize(value);
            if key.is_empty() || value.is_empty() {
                return None;
            }
            let occurrences = find_occurrences(&text, &value);
            (!occurrences.is_empty()).then(|| WeakQa {
                prompt: key.clone(),
                answer_text: value,
                occurrences,
                chosen: 0,
            })
        })
        .collect()
}

/// Minimal word range on page 0 whose joined text contains the chosen occurrence.
pub fn weakqa_to_qapair(weak: &WeakQa, doc: &Document, qa_id: impl Into<String>) -> Result<QaPair> {
    let occ = weak.chosen_occurrence();
    let page = doc
        .pages
        .first()
        .ok_or(Error::UnalignableSpan { start: occ.start, end: occ.end })?;
    let offsets = page.word_offsets();
    let first = offsets.iter().position(|w| w.end > occ.start);
    let last = offsets.iter().rposition(|w| w.start < occ.end);
    let range = match (first, last) {
        (Some(a), Some(b)) if a <= b && occ.end <= offsets[b].end && !occ.is_empty() => Interval::new(a, b + 1),
        _ => return Err(Error::UnalignableSpan { start: occ.start, end: occ.end }),
    };
    let gold = AnswerSpan::from_tokens(doc, 0, range, 0.0)?;
    Ok(QaPair {
        qa_id: qa_id.into(),
        doc_id: doc.doc_id.clone(),
        prompt: weak.prompt.clone(),
        gold: vec![gold],
        predicted: Vec::new(),
    })
}

/// Plain-text document for an article plus its aligned QA pairs.
/// QA ids are `{entity_id}#{field_index_among_matches}`.
pub fn generate(record: &StructuredRecord, article: &SourceArticle) -> Result<(Document, Vec<QaPair>)> {
    let doc = Document::from_plain_text(article.entity_id.clone(), &normalize(&article.text));
    let qa = match_record(record, article)
        .iter()
        .enumerate()
        .map(|(i, w)| weakqa_to_qapair(w, &doc, format!("{}#{i}", article.entity_id)))
        .collect::<Result<Vec<_>>>()?;
    Ok((doc, qa))
}
