//! Filling article text verbatim into word slots harvested from real layouts,
//! and rendering the result onto a grayscale canvas.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::doc::{AnswerSpan, BBox, Document, Interval, Page, QaPair, Segment, Source, Word};
use crate::error::{Error, Result};

pub const WHITE: u8 = 255;
pub const INK: u8 = 0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplatePage {
    pub width: u32,
    pub height: u32,
    /// Word slots in reading order.
    pub slots: Vec<BBox>,
    /// `(slot_range, segment_id)`; the ranges partition `slots`.
    pub segment_map: Vec<(Interval, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutTemplate {
    pub template_id: String,
    pub pages: Vec<TemplatePage>,
    #[serde(default)]
    pub provenance: String,
}

impl LayoutTemplate {
    /// Strips the text from an OCRed document, keeping word geometry and segments.
    pub fn from_document(doc: &Document) -> LayoutTemplate {
        LayoutTemplate {
            template_id: doc.doc_id.clone(),
            pages: doc
                .pages
                .iter()
                .map(|p| TemplatePage {
                    width: p.width,
                    height: p.height,
                    slots: p.words.iter().map(|w| w.bbox).collect(),
                    segment_map: p.segments.iter().map(|s| (s.word_range, s.id)).collect(),
                })
                .collect(),
            provenance: format!("{:?}:{}", doc.source, doc.doc_id),
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        for (i, p) in self.pages.iter().enumerate() {
            if let Some((j, m)) = p.slots.iter().enumerate().find_map(|(j, b)| b.check().err().map(|m| (j, m))) {
                return Err(format!("{m} at pages[{i}].slots[{j}]"));
            }
            let mut ranges: Vec<Interval> = p.segment_map.iter().map(|(r, _)| *r).collect();
            ranges.sort();
            let mut next = 0;
            for r in ranges {
                if r.start != next || r.is_empty() {
                    return Err(format!("segment_map of pages[{i}] does not partition the slots"));
                }
                next = r.end;
            }
            if next != p.slots.len() {
                return Err(format!("segment_map of pages[{i}] covers {next} of {} slots", p.slots.len()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilledDocument {
    pub document: Document,
    pub qa: Vec<QaPair>,
    pub template_id: String,
    /// QA pairs discarded because their gold span overflowed the template.
    pub dropped_qa: usize,
}

/// Places `words` one per slot on the template's first page.
///
/// Gold spans in `qa` index into `words`. Overflow words are dropped along with
/// every QA pair that has any gold token among them.
pub fn fill_layout(doc_id: &str, words: &[String], qa: &[QaPair], template: &LayoutTemplate) -> Result<FilledDocument> {
    let tpage = template
        .pages
        .first()
        .filter(|p| !p.slots.is_empty())
        .ok_or_else(|| Error::EmptyTemplate(template.template_id.clone()))?;
    let kept = words.len().min(tpage.slots.len());

    // Segments clipped to the kept prefix, renumbered in reading order.
    let mut seg_ranges: Vec<Interval> = tpage
        .segment_map
        .iter()
        .map(|(r, _)| Interval::new(r.start, r.end.min(kept)))
        .filter(|r| !r.is_empty())
        .collect();
    seg_ranges.sort();
    let mut page_words = Vec::with_capacity(kept);
    let mut segments = Vec::with_capacity(seg_ranges.len());
    for (id, r) in seg_ranges.iter().enumerate() {
        segments.push(Segment { id, word_range: *r });
        for (text, &bbox) in words[r.start..r.end].iter().zip(&tpage.slots[r.start..r.end]) {
            page_words.push(Word {
                text: text.clone(),
                bbox,
                segment_id: id,
            });
        }
    }
    debug_assert_eq!(page_words.len(), kept);

    let document = Document {
        doc_id: doc_id.to_string(),
        source: Source::Synthetic,
        pages: vec![Page {
            width: tpage.width,
            height: tpage.height,
            words: page_words,
            segments,
        }],
    };

    let mut retained = Vec::new();
    let mut dropped_qa = 0;
    for pair in qa {
        if pair.gold.iter().any(|g| g.page != 0 || g.token_range.end > kept) {
            dropped_qa += 1;
            continue;
        }
        let gold = pair
            .gold
            .iter()
            .map(|g| AnswerSpan::from_tokens(&document, 0, g.token_range, g.score))
            .collect::<Result<Vec<_>>>()?;
        retained.push(QaPair {
            qa_id: pair.qa_id.clone(),
            doc_id: doc_id.to_string(),
            prompt: pair.prompt.clone(),
            gold,
            predicted: Vec::new(),
        });
    }

    Ok(FilledDocument {
        document,
        qa: retained,
        template_id: template.template_id.clone(),
        dropped_qa,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Canvas {
    pub width: u32,
    pub height: u32,
    /// Row-major grayscale, `WHITE` background.
    pub pixels: Vec<u8>,
}

impl Canvas {
    pub fn blank(width: u32, height: u32) -> Canvas {
        Canvas {
            width,
            height,
            pixels: vec![WHITE; width as usize * height as usize],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    /// Binary PGM (P5).
    pub fn write_pgm(&self, out: &mut dyn Write) -> std::io::Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.width, self.height)?;
        out.write_all(&self.pixels)
    }
}

/// Pixel rectangle `[x0, x1) × [y0, y1)` of a normalized box on a `width × height` page.
pub fn denormalize(b: &BBox, width: u32, height: u32) -> [u32; 4] {
    let sx = |v: u16| (v as u64 * width as u64 / 1000) as u32;
    let sy = |v: u16| (v as u64 * height as u64 / 1000) as u32;
    [sx(b.x0), sy(b.y0), sx(b.x1), sy(b.y1)]
}

/// Renders every word of a page as a filled dark rectangle.
pub fn render_page(page: &Page) -> Canvas {
    let mut canvas = Canvas::blank(page.width, page.height);
    let w = page.width as usize;
    for word in &page.words {
        let [x0, y0, x1, y1] = denormalize(&word.bbox, page.width, page.height);
        for y in y0..y1 {
            let row = y as usize * w;
            canvas.pixels[row + x0 as usize..row + x1 as usize].fill(INK);
        }
    }
    canvas
}

pub fn render_canvas(doc: &FilledDocument, page: usize) -> Canvas {
    render_page(&doc.document.pages[page])
}

#[derive(Debug, Serialize)]
pub struct SidecarWord<'a> {
    pub text: &'a str,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub pixel_box: [u32; 4],
}

/// Word-to-box map accompanying a rendered page.
pub fn sidecar(page: &Page) -> Vec<SidecarWord<'_>> {
    page.words
        .iter()
        .map(|w| SidecarWord {
            text: &w.text,
            bbox: w.bbox,
            pixel_box: denormalize(&w.bbox, page.width, page.height),
        })
        .collect()
}
