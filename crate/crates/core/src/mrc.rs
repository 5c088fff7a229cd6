//! Model-ready MRC examples: `[CLS] context [SEP] prompt [SEP]` token streams
//! cut into sliding windows, with per-token boxes and a 7×7 image patch stream.

use serde::{Deserialize, Serialize};

use crate::doc::{BBox, Document, Interval, QaPair, Source};
use crate::error::{Error, Result};
use crate::layout::Canvas;

pub const MAX_SEQ: usize = 512;
pub const STRIDE: usize = 128;
pub const PATCH_GRID: usize = 7;
pub const N_PATCHES: usize = PATCH_GRID * PATCH_GRID;
/// `[CLS]` plus two `[SEP]`.
pub const SPECIAL_TOKENS: usize = 3;

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub char_range: Interval,
}

pub trait Tokenizer {
    /// Tokens in order with non-overlapping byte ranges into `text`.
    fn tokenize(&self, text: &str) -> Vec<Token>;
}

/// One token per whitespace-separated word.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn tokenize(&self, text: &str) -> Vec<Token> {
        let mut out = Vec::new();
        let mut start = None;
        for (i, c) in text.char_indices() {
            match (c.is_whitespace(), start) {
                (true, Some(s)) => {
                    out.push(Token {
                        text: text[s..i].to_string(),
                        char_range: Interval::new(s, i),
                    });
                    start = None;
                }
                (false, None) => start = Some(i),
                _ => {}
            }
        }
        if let Some(s) = start {
            out.push(Token {
                text: text[s..].to_string(),
                char_range: Interval::new(s, text.len()),
            });
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub max_seq: usize,
    pub stride: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            max_seq: MAX_SEQ,
            stride: STRIDE,
        }
    }
}

/// Document position of a context token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DocPos {
    pub page: usize,
    pub word: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrcWindow {
    pub qa_id: String,
    pub window_index: usize,
    pub n_windows: usize,
    /// 0 = plain text, 1 = document.
    pub task_id: u8,
    pub tokens: Vec<String>,
    pub boxes: Vec<BBox>,
    /// `None` for `[CLS]`, `[SEP]` and prompt tokens.
    pub token_doc_map: Vec<Option<DocPos>>,
    /// Offset of this window's first context token in the full context stream.
    pub context_start: usize,
    pub context_len: usize,
    pub image_patches: Vec<f64>,
    /// Gold spans fully inside the window, as context-local token ranges. Empty = no answer.
    pub answers: Vec<Interval>,
}

impl MrcWindow {
    /// Positions of the context tokens, in order.
    pub fn context_map(&self) -> &[Option<DocPos>] {
        &self.token_doc_map[1..1 + self.context_len]
    }

    pub fn context_range(&self) -> Interval {
        Interval::new(self.context_start, self.context_start + self.context_len)
    }

    /// Maps a context-local token range back to `(page, word range)`.
    /// `None` when the range is out of bounds or straddles pages.
    pub fn to_document(&self, local: Interval) -> Option<(usize, Interval)> {
        if local.is_empty() || local.end > self.context_len {
            return None;
        }
        let map = self.context_map();
        let first = map[local.start]?;
        let last = map[local.end - 1]?;
        (first.page == last.page && first.word <= last.word)
            .then(|| (first.page, Interval::new(first.word, last.word + 1)))
    }
}

/// Full context token stream of a document with word lookup tables.
pub struct Context {
    pub tokens: Vec<String>,
    pub boxes: Vec<BBox>,
    pub positions: Vec<DocPos>,
    /// Per page, per word: token range.
    pub word_tokens: Vec<Vec<Interval>>,
}

impl Context {
    pub fn build(doc: &Document, tok: &dyn Tokenizer) -> Context {
        let mut ctx = Context {
            tokens: Vec::new(),
            boxes: Vec::new(),
            positions: Vec::new(),
            word_tokens: Vec::with_capacity(doc.pages.len()),
        };
        for (p, page) in doc.pages.iter().enumerate() {
            let mut per_word = Vec::with_capacity(page.words.len());
            for (w, word) in page.words.iter().enumerate() {
                let start = ctx.tokens.len();
                for t in tok.tokenize(&word.text) {
                    ctx.tokens.push(t.text);
                    ctx.boxes.push(word.bbox);
                    ctx.positions.push(DocPos { page: p, word: w });
                }
                per_word.push(Interval::new(start, ctx.tokens.len()));
            }
            ctx.word_tokens.push(per_word);
        }
        ctx
    }

    /// Token range covering a word range on a page.
    pub fn token_range(&self, page: usize, words: Interval) -> Option<Interval> {
        let table = self.word_tokens.get(page)?;
        if words.is_empty() || words.end > table.len() {
            return None;
        }
        Some(Interval::new(table[words.start].start, table[words.end - 1].end))
    }
}

/// Context budget per window for a prompt of `prompt_tokens`.
pub fn context_budget(prompt_tokens: usize, max_seq: usize) -> Result<usize> {
    match max_seq.checked_sub(SPECIAL_TOKENS + prompt_tokens) {
        Some(b) if b > 0 => Ok(b),
        _ => Err(Error::PromptTooLong {
            prompt_tokens,
            max_seq,
        }),
    }
}

/// Start offsets of the context chunks: every multiple of `stride` below the
/// context length, and a single window for an empty context.
pub fn window_starts(n_context: usize, stride: usize) -> Vec<usize> {
    if n_context == 0 {
        return vec![0];
    }
    (0..n_context).step_by(stride).collect()
}

/// Builds every window of one QA pair. `images` holds one canvas per page.
pub fn build_windows(
    doc: &Document,
    qa: &QaPair,
    tok: &dyn Tokenizer,
    images: Option<&[Canvas]>,
    cfg: WindowConfig,
) -> Result<Vec<MrcWindow>> {
    if cfg.stride == 0 {
        return Err(Error::field("stride", "must be positive"));
    }
    let ctx = Context::build(doc, tok);
    let prompt = tok.tokenize(&qa.prompt);
    let budget = context_budget(prompt.len(), cfg.max_seq)?;
    let task_id = u8::from(doc.source != Source::PlainText);

    let gold: Vec<Interval> = qa
        .gold
        .iter()
        .map(|g| {
            ctx.token_range(g.page, g.token_range)
                .ok_or_else(|| Error::field("gold", format!("{} references missing tokens", qa.qa_id)))
        })
        .collect::<Result<_>>()?;

    let patches: Vec<Vec<f64>> = match images {
        Some(canvases) if task_id == 1 => canvases.iter().map(extract_patches).collect::<Result<_>>()?,
        _ => Vec::new(),
    };

    let starts = window_starts(ctx.tokens.len(), cfg.stride);
    let n_windows = starts.len();
    let mut out = Vec::with_capacity(n_windows);
    for (index, &start) in starts.iter().enumerate() {
        let end = (start + budget).min(ctx.tokens.len());
        let span = Interval::new(start, end);
        let len = end - start;
        let total = len + prompt.len() + SPECIAL_TOKENS;

        let mut tokens = Vec::with_capacity(total);
        let mut boxes = Vec::with_capacity(total);
        let mut map = Vec::with_capacity(total);
        tokens.push(CLS.to_string());
        boxes.push(BBox::SENTINEL);
        map.push(None);
        for i in start..end {
            tokens.push(ctx.tokens[i].clone());
            boxes.push(if task_id == 0 { BBox::SENTINEL } else { ctx.boxes[i] });
            map.push(Some(ctx.positions[i]));
        }
        tokens.push(SEP.to_string());
        boxes.push(BBox::SENTINEL);
        map.push(None);
        for t in &prompt {
            tokens.push(t.text.clone());
            boxes.push(BBox::SENTINEL);
            map.push(None);
        }
        tokens.push(SEP.to_string());
        boxes.push(BBox::SENTINEL);
        map.push(None);

        let page = ctx.positions.get(start).map_or(0, |p| p.page);
        let image_patches = patches.get(page).cloned().unwrap_or_else(|| vec![0.0; N_PATCHES]);

        let answers = gold
            .iter()
            .filter(|g| span.contains(g))
            .map(|g| Interval::new(g.start - start, g.end - start))
            .collect();

        out.push(MrcWindow {
            qa_id: qa.qa_id.clone(),
            window_index: index,
            n_windows,
            task_id,
            tokens,
            boxes,
            token_doc_map: map,
            context_start: start,
            context_len: len,
            image_patches,
            answers,
        });
    }
    Ok(out)
}

/// Mean pixel value in `[0, 1]` over a 7×7 grid, row-major. The last row and
/// column absorb the remainder; cells with no pixels read as blank (1.0).
pub fn extract_patches(canvas: &Canvas) -> Result<Vec<f64>> {
    if canvas.is_empty() {
        return Err(Error::field("canvas", "empty canvas"));
    }
    let bounds = |extent: u32| -> Vec<(u32, u32)> {
        let base = extent / PATCH_GRID as u32;
        (0..PATCH_GRID as u32)
            .map(|i| {
                let lo = i * base;
                let hi = if i + 1 == PATCH_GRID as u32 { extent } else { lo + base };
                (lo, hi)
            })
            .collect()
    };
    let rows = bounds(canvas.height);
    let cols = bounds(canvas.width);
    let mut out = Vec::with_capacity(N_PATCHES);
    for &(y0, y1) in &rows {
        for &(x0, x1) in &cols {
            let mut sum = 0u64;
            for y in y0..y1 {
                let row = y as usize * canvas.width as usize;
                sum += canvas.pixels[row + x0 as usize..row + x1 as usize]
                    .iter()
                    .map(|&p| p as u64)
                    .sum::<u64>();
            }
            let count = (y1 - y0) as u64 * (x1 - x0) as u64;
            out.push(if count == 0 { 1.0 } else { sum as f64 / (count as f64 * 255.0) });
        }
    }
    Ok(out)
}
