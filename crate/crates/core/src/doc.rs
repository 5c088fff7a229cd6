//! Document, geometry and QA types shared by every pipeline stage.
//!
//! Boxes live in normalized integer page coordinates `[0, 1000]`. Character
//! ranges are byte offsets into [`Page::plain_text`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

pub const COORD_MAX: u16 = 1000;

/// Half-open `[start, end)` index range, serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Interval {
    pub start: usize,
    pub end: usize,
}

impl Interval {
    pub const fn new(start: usize, end: usize) -> Self {
        Interval { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, other: &Interval) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn overlaps(&self, other: &Interval) -> bool {
        self.start < other.end && other.start < self.end
    }
}

impl From<[usize; 2]> for Interval {
    fn from([start, end]: [usize; 2]) -> Self {
        Interval { start, end }
    }
}

impl From<Interval> for [usize; 2] {
    fn from(r: Interval) -> Self {
        [r.start, r.end]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(from = "[u16; 4]", into = "[u16; 4]")]
pub struct BBox {
    pub x0: u16,
    pub y0: u16,
    pub x1: u16,
    pub y1: u16,
}

impl BBox {
    /// The all-zero box used for special tokens, prompts and plain text.
    pub const SENTINEL: BBox = BBox {
        x0: 0,
        y0: 0,
        x1: 0,
        y1: 0,
    };

    pub fn new(x0: u16, y0: u16, x1: u16, y1: u16) -> Result<Self> {
        let b = BBox { x0, y0, x1, y1 };
        b.check().map_err(|m| Error::field("box", m))?;
        Ok(b)
    }

    pub fn check(&self) -> std::result::Result<(), &'static str> {
        if self.x1 > COORD_MAX || self.y1 > COORD_MAX {
            return Err("BBox out of range");
        }
        if self.x0 > self.x1 || self.y0 > self.y1 {
            return Err("BBox inverted");
        }
        Ok(())
    }

    pub fn is_sentinel(&self) -> bool {
        *self == BBox::SENTINEL
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && other.x1 <= self.x1 && other.y1 <= self.y1
    }

    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }
}

impl From<[u16; 4]> for BBox {
    fn from([x0, y0, x1, y1]: [u16; 4]) -> Self {
        BBox { x0, y0, x1, y1 }
    }
}

impl From<BBox> for [u16; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Word {
    pub text: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub segment_id: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub id: usize,
    pub word_range: Interval,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Page {
    pub width: u32,
    pub height: u32,
    pub words: Vec<Word>,
    pub segments: Vec<Segment>,
}

impl Page {
    /// Words joined by single spaces in reading order.
    pub fn plain_text(&self) -> String {
        let mut out = String::new();
        for (i, w) in self.words.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(&w.text);
        }
        out
    }

    /// Byte range of every word inside [`Page::plain_text`].
    pub fn word_offsets(&self) -> Vec<Interval> {
        let mut offsets = Vec::with_capacity(self.words.len());
        let mut pos = 0;
        for w in &self.words {
            offsets.push(Interval::new(pos, pos + w.text.len()));
            pos += w.text.len() + 1;
        }
        offsets
    }

    /// Space-joined text and byte range of a word range, or `None` when out of bounds.
    pub fn span_text(&self, range: Interval) -> Option<(String, Interval)> {
        if range.is_empty() || range.end > self.words.len() {
            return None;
        }
        let offsets = self.word_offsets();
        let text = self.words[range.start..range.end]
            .iter()
            .map(|w| w.text.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        Some((
            text,
            Interval::new(offsets[range.start].start, offsets[range.end - 1].end),
        ))
    }

    /// Hull of the member words of a segment.
    pub fn segment_box(&self, segment: &Segment) -> BBox {
        self.words[segment.word_range.start..segment.word_range.end]
            .iter()
            .map(|w| w.bbox)
            .reduce(|a, b| a.union(&b))
            .unwrap_or_default()
    }

    fn validate(&self, at: &str, plain: bool) -> std::result::Result<(), (String, String)> {
        for (i, w) in self.words.iter().enumerate() {
            let here = format!("{at}.words[{i}]");
            if w.text.is_empty() {
                return Err(("empty word text".into(), format!("{here}.text")));
            }
            if w.text.contains('\n') {
                return Err(("newline in word text".into(), format!("{here}.text")));
            }
            if let Err(m) = w.bbox.check() {
                return Err((m.into(), format!("{here}.box")));
            }
            if plain && !w.bbox.is_sentinel() {
                return Err(("plain_text word with non-zero box".into(), format!("{here}.box")));
            }
        }
        let mut order: Vec<&Segment> = self.segments.iter().collect();
        order.sort_by_key(|s| s.word_range.start);
        let mut next = 0;
        for s in &order {
            if s.word_range.start != next || s.word_range.is_empty() {
                return Err((
                    format!("segment {} does not continue the word partition at {next}", s.id),
                    format!("{at}.segments"),
                ));
            }
            next = s.word_range.end;
        }
        if next != self.words.len() {
            return Err((
                format!("segments cover {next} of {} words", self.words.len()),
                format!("{at}.segments"),
            ));
        }
        let mut ids: Vec<usize> = self.segments.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(("duplicate segment id".into(), format!("{at}.segments")));
        }
        for s in &self.segments {
            for i in s.word_range.start..s.word_range.end {
                if self.words[i].segment_id != s.id {
                    return Err((
                        format!("word belongs to segment {} but names {}", s.id, self.words[i].segment_id),
                        format!("{at}.words[{i}].segment_id"),
                    ));
                }
            }
        }
        Ok(())
    }
}

pub fn page_plain_text(page: &Page) -> String {
    page.plain_text()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    RealOcr,
    Synthetic,
    PlainText,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub source: Source,
    pub pages: Vec<Page>,
}

impl Document {
    /// Single-page plain-text document: sentinel boxes, one segment, zero-size page.
    pub fn from_plain_text(doc_id: impl Into<String>, text: &str) -> Document {
        let words: Vec<Word> = text
            .split_whitespace()
            .map(|t| Word {
                text: t.to_string(),
                bbox: BBox::SENTINEL,
                segment_id: 0,
            })
            .collect();
        let segments = if words.is_empty() {
            Vec::new()
        } else {
            vec![Segment {
                id: 0,
                word_range: Interval::new(0, words.len()),
            }]
        };
        Document {
            doc_id: doc_id.into(),
            source: Source::PlainText,
            pages: vec![Page {
                width: 0,
                height: 0,
                words,
                segments,
            }],
        }
    }

    /// Checks every type invariant, returning `(message, field path)` on failure.
    pub fn validate(&self) -> std::result::Result<(), (String, String)> {
        if self.doc_id.is_empty() {
            return Err(("empty doc_id".into(), "doc_id".into()));
        }
        let plain = self.source == Source::PlainText;
        for (i, p) in self.pages.iter().enumerate() {
            p.validate(&format!("pages[{i}]"), plain)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerSpan {
    pub page: usize,
    pub token_range: Interval,
    /// Byte range into the page's plain text; derived from the page, not serialized.
    #[serde(skip)]
    pub char_range: Interval,
    pub text: String,
    pub score: f64,
}

impl AnswerSpan {
    pub fn from_tokens(doc: &Document, page: usize, token_range: Interval, score: f64) -> Result<Self> {
        let p = doc
            .pages
            .get(page)
            .ok_or_else(|| Error::field("page", format!("page {page} not in {}", doc.doc_id)))?;
        AnswerSpan::on_page(p, page, token_range, score)
    }

    pub fn on_page(p: &Page, page: usize, token_range: Interval, score: f64) -> Result<Self> {
        let (text, char_range) = p.span_text(token_range).ok_or_else(|| {
            Error::field(
                "token_range",
                format!("[{},{}) invalid on page {page}", token_range.start, token_range.end),
            )
        })?;
        Ok(AnswerSpan {
            page,
            token_range,
            char_range,
            text,
            score,
        })
    }

    /// Re-derives `char_range` and checks `text` against the document.
    pub fn resolve(&mut self, doc: &Document) -> Result<()> {
        let fresh = AnswerSpan::from_tokens(doc, self.page, self.token_range, self.score)?;
        if fresh.text != self.text {
            return Err(Error::field(
                "text",
                format!("{:?} does not match page words {:?}", self.text, fresh.text),
            ));
        }
        self.char_range = fresh.char_range;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaPair {
    pub qa_id: String,
    pub doc_id: String,
    pub prompt: String,
    pub gold: Vec<AnswerSpan>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub predicted: Vec<AnswerSpan>,
}

impl QaPair {
    pub fn resolve(&mut self, doc: &Document) -> Result<()> {
        if doc.doc_id != self.doc_id {
            return Err(Error::field("doc_id", format!("{} is not {}", self.doc_id, doc.doc_id)));
        }
        for s in self.gold.iter_mut().chain(self.predicted.iter_mut()) {
            s.resolve(doc)?;
        }
        Ok(())
    }
}

/// Streams documents from a JSON Lines file, validating each one.
pub fn load_documents(path: &Path) -> Result<impl Iterator<Item = Result<Document>>> {
    Ok(jsonl::open::<Document>(path)?.map(|r| {
        let (line, doc) = r?;
        doc.validate()
            .map_err(|(message, field)| Error::Invalid {
                line,
                message: format!("{message} ({field})"),
            })
            .map(|_| doc)
    }))
}

pub fn read_documents(path: &Path) -> Result<Vec<Document>> {
    load_documents(path)?.collect()
}

/// Reads QA pairs and resolves them against the given documents.
pub fn read_qa(path: &Path, docs: &std::collections::HashMap<String, &Document>) -> Result<Vec<QaPair>> {
    let mut out = Vec::new();
    for r in jsonl::open::<QaPair>(path)? {
        let (line, mut qa) = r?;
        let doc = docs.get(&qa.doc_id).ok_or_else(|| Error::Invalid {
            line,
            message: format!("unknown doc_id {}", qa.doc_id),
        })?;
        qa.resolve(doc).map_err(|e| Error::Invalid {
            line,
            message: e.to_string(),
        })?;
        out.push(qa);
    }
    Ok(out)
}

pub fn index_documents(docs: &[Document]) -> std::collections::HashMap<String, &Document> {
    docs.iter().map(|d| (d.doc_id.clone(), d)).collect()
}
