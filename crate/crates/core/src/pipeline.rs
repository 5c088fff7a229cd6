//! Stage functions shared by the CLI subcommands, and the end-to-end run over
//! a synthetic corpus.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use log::info;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decode::{decode_window, select_answer, stitch_windows, vote_fuse, DocSpan, PerScheme, Scheme, TokenLogits};
use crate::doc::{index_documents, AnswerSpan, Document, QaPair};
use crate::ensemble::item_rng;
use crate::error::{Error, Result};
use crate::jsonl;
use crate::layout::{fill_layout, render_page, sidecar, LayoutTemplate};
use crate::metrics::{evaluate, EvalReport, Metric};
use crate::mrc::{build_windows, MrcWindow, WhitespaceTokenizer, WindowConfig};
use crate::oracle::{gold_to_logits, make_synthetic_corpus, NoiseRegion, NoiseSpec};
use crate::weaksup::{generate, SourceArticle, StructuredRecord};

/// Weak QA generation over record/article pairs joined by `entity_id`.
/// Records without an article are skipped.
pub fn gen_weak(records: &[StructuredRecord], articles: &[SourceArticle]) -> Result<(Vec<Document>, Vec<QaPair>)> {
    let by_id: HashMap<&str, &SourceArticle> = articles.iter().map(|a| (a.entity_id.as_str(), a)).collect();
    let results: Vec<(Document, Vec<QaPair>)> = records
        .par_iter()
        .filter_map(|r| by_id.get(r.entity_id.as_str()).map(|a| generate(r, a)))
        .collect::<Result<_>>()?;
    let mut docs = Vec::with_capacity(results.len());
    let mut qa = Vec::new();
    for (d, q) in results {
        docs.push(d);
        qa.extend(q);
    }
    info!("gen-weak: {} records, {} documents, {} QA pairs", records.len(), docs.len(), qa.len());
    Ok((docs, qa))
}

/// Fills each document's first-page words into template `i % templates.len()`.
pub fn fill_documents(
    docs: &[Document],
    qa: &[QaPair],
    templates: &[LayoutTemplate],
) -> Result<(Vec<Document>, Vec<QaPair>)> {
    if templates.is_empty() {
        return Err(Error::field("templates", "no layout templates"));
    }
    let mut by_doc: HashMap<&str, Vec<QaPair>> = HashMap::new();
    for q in qa {
        by_doc.entry(q.doc_id.as_str()).or_default().push(q.clone());
    }
    let filled: Vec<_> = docs
        .par_iter()
        .enumerate()
        .map(|(i, d)| {
            let words: Vec<String> = d.pages.first().map_or_else(Vec::new, |p| p.words.iter().map(|w| w.text.clone()).collect());
            let pairs = by_doc.get(d.doc_id.as_str()).map_or(&[][..], Vec::as_slice);
            fill_layout(&d.doc_id, &words, pairs, &templates[i % templates.len()])
        })
        .collect::<Result<_>>()?;
    let mut out_docs = Vec::with_capacity(filled.len());
    let mut out_qa = Vec::new();
    let mut dropped = 0;
    for f in filled {
        dropped += f.dropped_qa;
        out_docs.push(f.document);
        out_qa.extend(f.qa);
    }
    info!("fill-layout: {} documents, {} QA kept, {dropped} dropped on overflow", out_docs.len(), out_qa.len());
    Ok((out_docs, out_qa))
}

/// Writes one PGM and one sidecar JSON per page.
pub fn write_images(docs: &[Document], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for d in docs {
        for (p, page) in d.pages.iter().enumerate() {
            let canvas = render_page(page);
            let stem = format!("{}_p{p}", d.doc_id.replace(['/', '\\'], "_"));
            jsonl::write_atomic(&dir.join(format!("{stem}.pgm")), |out| canvas.write_pgm(out))?;
            jsonl::write_atomic(&dir.join(format!("{stem}.json")), |out| {
                serde_json::to_writer(&mut *out, &sidecar(page))?;
                out.write_all(b"\n")
            })?;
        }
    }
    Ok(())
}

/// Windows for every QA pair, in QA order. Non-plain documents get patch
/// features from their rendered pages.
pub fn build_all_windows(docs: &[Document], qa: &[QaPair], cfg: WindowConfig) -> Result<Vec<MrcWindow>> {
    let index = index_documents(docs);
    let canvases: HashMap<&str, Vec<crate::layout::Canvas>> = docs
        .par_iter()
        .filter(|d| d.source != crate::doc::Source::PlainText)
        .map(|d| (d.doc_id.as_str(), d.pages.iter().map(render_page).collect()))
        .collect();
    let windows: Vec<Vec<MrcWindow>> = qa
        .par_iter()
        .map(|q| {
            let doc = index
                .get(&q.doc_id)
                .ok_or_else(|| Error::UnknownReference(format!("doc {}", q.doc_id)))?;
            let images = canvases
                .get(q.doc_id.as_str())
                .filter(|c| c.iter().all(|c| !c.is_empty()))
                .map(Vec::as_slice);
            build_windows(doc, q, &WhitespaceTokenizer, images, cfg)
        })
        .collect::<Result<_>>()?;
    let out: Vec<MrcWindow> = windows.into_iter().flatten().collect();
    info!("build-mrc: {} QA pairs, {} windows", qa.len(), out.len());
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePlan {
    Clean,
    /// Same spec for every window.
    Uniform(NoiseSpec),
    /// One randomly chosen head per question is fully corrupted inside the gold span.
    RotatingHead { seed: u64 },
}

impl NoisePlan {
    pub fn spec_for(&self, qa_id: &str) -> NoiseSpec {
        match *self {
            NoisePlan::Clean => NoiseSpec::clean(),
            NoisePlan::Uniform(spec) => spec,
            NoisePlan::RotatingHead { seed } => NoiseSpec {
                label_noise: 1.0,
                corrupt_scheme: Some(rotating_head(seed, qa_id)),
                region: NoiseRegion::GoldSpans,
                seed,
            },
        }
    }
}

pub fn rotating_head(seed: u64, qa_id: &str) -> Scheme {
    Scheme::ALL[item_rng(seed, qa_id).gen_range(0..3)]
}

pub fn oracle_logits(windows: &[MrcWindow], plan: &NoisePlan) -> Result<Vec<TokenLogits>> {
    windows
        .par_iter()
        .map(|w| gold_to_logits(w, &w.answers, &plan.spec_for(&w.qa_id)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub qa_id: String,
    pub answer: Option<AnswerSpan>,
    /// Free-text answer, set when the answer does not come from document tokens.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_text: Option<String>,
    #[serde(default)]
    pub spans: PerScheme<Vec<DocSpan>>,
    #[serde(default)]
    pub fused: Vec<DocSpan>,
}

impl Prediction {
    pub fn text(&self) -> String {
        self.answer_text
            .clone()
            .or_else(|| self.answer.as_ref().map(|a| a.text.clone()))
            .unwrap_or_default()
    }

    /// Spans this prediction contributes to an ensemble: fused list, else the answer.
    pub fn candidate_spans(&self, doc: &Document) -> Result<Vec<AnswerSpan>> {
        if self.fused.is_empty() {
            return Ok(self.answer.iter().cloned().collect());
        }
        self.fused
            .iter()
            .map(|s| AnswerSpan::from_tokens(doc, s.page, s.token_range, s.score))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeOptions {
    /// Heads to decode; the first one answers when fusion is off.
    pub schemes: Vec<Scheme>,
    pub fuse: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            schemes: Scheme::ALL.to_vec(),
            fuse: true,
        }
    }
}

fn to_answer(doc: &Document, span: Option<DocSpan>) -> Result<Option<AnswerSpan>> {
    span.map(|s| AnswerSpan::from_tokens(doc, s.page, s.token_range, s.score)).transpose()
}

/// Decodes, stitches and fuses per question. Output follows the order in
/// which questions first appear in `windows`.
pub fn decode_all(
    windows: &[MrcWindow],
    logits: &[TokenLogits],
    docs: &[Document],
    qa_docs: &HashMap<String, String>,
    opts: &DecodeOptions,
) -> Result<Vec<Prediction>> {
    let index = index_documents(docs);
    let logit_index: HashMap<(&str, usize), &TokenLogits> =
        logits.iter().map(|l| ((l.qa_id.as_str(), l.window_index), l)).collect();
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&MrcWindow>> = HashMap::new();
    for w in windows {
        let entry = groups.entry(w.qa_id.as_str()).or_default();
        if entry.is_empty() {
            order.push(w.qa_id.as_str());
        }
        entry.push(w);
    }
    order
        .par_iter()
        .map(|qa_id| {
            let group = &groups[qa_id];
            let mut decoded = Vec::with_capacity(group.len());
            for w in group {
                let l = logit_index.get(&(*qa_id, w.window_index)).ok_or_else(|| Error::MissingWindows {
                    qa_id: qa_id.to_string(),
                    missing: vec![w.window_index],
                })?;
                if l.n_tokens() != w.context_len {
                    return Err(Error::Logits(format!(
                        "{qa_id} window {}: {} rows for {} context tokens",
                        w.window_index,
                        l.n_tokens(),
                        w.context_len
                    )));
                }
                let mut d = decode_window(l)?;
                for s in Scheme::ALL {
                    if !opts.schemes.contains(&s) {
                        d.get_mut(s).clear();
                    }
                }
                decoded.push(d);
            }
            let parts: Vec<_> = group.iter().copied().zip(decoded.iter()).collect();
            let spans = stitch_windows(qa_id, &parts)?;
            let doc_id = qa_docs
                .get(*qa_id)
                .ok_or_else(|| Error::UnknownReference(format!("qa {qa_id}")))?;
            let doc = index
                .get(doc_id)
                .ok_or_else(|| Error::UnknownReference(format!("doc {doc_id}")))?;
            let (answer, fused) = if opts.fuse {
                let fused = vote_fuse(&spans);
                (select_answer(&fused), fused)
            } else {
                let first = opts.schemes.first().copied().unwrap_or(Scheme::Bio);
                (select_answer(spans.get(first)), Vec::new())
            };
            Ok(Prediction {
                qa_id: qa_id.to_string(),
                answer: to_answer(doc, answer)?,
                answer_text: None,
                spans,
                fused,
            })
        })
        .collect()
}

pub fn gold_strings(qa: &[QaPair]) -> Vec<(String, Vec<String>)> {
    qa.iter()
        .map(|q| (q.qa_id.clone(), q.gold.iter().map(|g| g.text.clone()).collect()))
        .collect()
}

pub fn evaluate_predictions(predictions: &[Prediction], qa: &[QaPair], metrics: &[Metric]) -> EvalReport {
    let preds: HashMap<String, String> = predictions.iter().map(|p| (p.qa_id.clone(), p.text())).collect();
    evaluate(&preds, &gold_strings(qa), metrics)
}

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub n_docs: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub noise: NoisePlan,
    pub window: WindowConfig,
    pub write_images: bool,
}

impl PipelineOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        PipelineOptions {
            n_docs: 500,
            seed: 0,
            out_dir: out_dir.into(),
            noise: NoisePlan::Clean,
            window: WindowConfig::default(),
            write_images: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub n_docs: usize,
    pub n_questions: usize,
    pub n_windows: usize,
    /// EM of each head's own top-1 answer.
    pub single_scheme_em: PerScheme<f64>,
    pub fused: EvalReport,
}

pub const PIPELINE_FILES: &[&str] = &[
    "records.jsonl",
    "articles.jsonl",
    "templates.jsonl",
    "weak_docs.jsonl",
    "weak_qa.jsonl",
    "docs.jsonl",
    "qa.jsonl",
    "windows.jsonl",
    "logits.jsonl",
    "predictions.jsonl",
    "report.json",
];

/// Synthetic corpus → weak QA → layout fill → windows → oracle logits →
/// decode → evaluation, writing every intermediate file to `out_dir`.
pub fn run_pipeline(opts: &PipelineOptions) -> Result<PipelineSummary> {
    let dir = &opts.out_dir;
    let corpus = make_synthetic_corpus(opts.n_docs, opts.seed);
    jsonl::write_all(&dir.join("records.jsonl"), &corpus.records)?;
    jsonl::write_all(&dir.join("articles.jsonl"), &corpus.articles)?;
    jsonl::write_all(&dir.join("templates.jsonl"), &corpus.templates)?;

    let (weak_docs, weak_qa) = gen_weak(&corpus.records, &corpus.articles)?;
    jsonl::write_all(&dir.join("weak_docs.jsonl"), &weak_docs)?;
    jsonl::write_all(&dir.join("weak_qa.jsonl"), &weak_qa)?;

    let (docs, qa) = fill_documents(&weak_docs, &weak_qa, &corpus.templates)?;
    jsonl::write_all(&dir.join("docs.jsonl"), &docs)?;
    jsonl::write_all(&dir.join("qa.jsonl"), &qa)?;
    if opts.write_images {
        write_images(&docs, &dir.join("images"))?;
    }

    let windows = build_all_windows(&docs, &qa, opts.window)?;
    jsonl::write_all(&dir.join("windows.jsonl"), &windows)?;

    let logits = oracle_logits(&windows, &opts.noise)?;
    jsonl::write_all(&dir.join("logits.jsonl"), &logits)?;

    let qa_docs: HashMap<String, String> = qa.iter().map(|q| (q.qa_id.clone(), q.doc_id.clone())).collect();
    let predictions = decode_all(&windows, &logits, &docs, &qa_docs, &DecodeOptions::default())?;
    jsonl::write_all(&dir.join("predictions.jsonl"), &predictions)?;

    let report = evaluate_predictions(&predictions, &qa, &Metric::ALL);
    jsonl::write_atomic(&dir.join("report.json"), |out| {
        serde_json::to_writer_pretty(&mut *out, &report)?;
        out.write_all(b"\n")
    })?;

    let index = index_documents(&docs);
    let single_scheme_em = PerScheme::try_from_fn(|scheme| -> Result<f64> {
        let singles = predictions
            .iter()
            .map(|p| {
                let doc = index[&qa_docs[&p.qa_id]];
                Ok((p.qa_id.clone(), to_answer(doc, select_answer(p.spans.get(scheme)))?.map(|a| a.text).unwrap_or_default()))
            })
            .collect::<Result<HashMap<_, _>>>()?;
        Ok(evaluate(&singles, &gold_strings(&qa), &[Metric::Em])
            .aggregate(Metric::Em)
            .unwrap_or(0.0))
    })?;

    Ok(PipelineSummary {
        n_docs: docs.len(),
        n_questions: qa.len(),
        n_windows: windows.len(),
        single_scheme_em,
        fused: report,
    })
}
