//! Understanding-to-generation ensemble: generation-side inputs built from
//! understanding spans, perturbed training data for the generator, and
//! multi-model answer fusion.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::doc::{AnswerSpan, Document, Interval, Page, QaPair};
use crate::error::{Error, Result};
use crate::metrics::normalize_loose;
use crate::mrc::{CLS, SEP};

pub const MAX_SPANS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenInput {
    pub question: String,
    /// Span texts, highest understanding score first.
    pub spans: Vec<String>,
    pub context: String,
    /// `[CLS] question [SEP] span_1 [SEP] ... span_k [SEP] context [SEP]`
    pub text: String,
}

pub fn build_gen_input(question: &str, spans: &[AnswerSpan], context: &str) -> Result<GenInput> {
    if spans.is_empty() || spans.len() > MAX_SPANS {
        return Err(Error::SpanCount(spans.len()));
    }
    let mut ordered: Vec<&AnswerSpan> = spans.iter().collect();
    ordered.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then((a.page, a.token_range.start).cmp(&(b.page, b.token_range.start)))
    });
    let spans: Vec<String> = ordered.iter().map(|s| s.text.clone()).collect();
    let mut text = format!("{CLS} {question} {SEP}");
    for s in &spans {
        text.push(' ');
        text.push_str(s);
        text.push(' ');
        text.push_str(SEP);
    }
    text.push(' ');
    text.push_str(context);
    text.push(' ');
    text.push_str(SEP);
    Ok(GenInput {
        question: question.to_string(),
        spans,
        context: context.to_string(),
        text,
    })
}

/// Text-in, text-out generation model.
pub trait GenModel: Sync {
    fn generate(&self, input: &GenInput) -> std::result::Result<String, String>;
}

/// Returns the first span verbatim.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoGenerator;

impl GenModel for EchoGenerator {
    fn generate(&self, input: &GenInput) -> std::result::Result<String, String> {
        input.spans.first().cloned().ok_or_else(|| "no span to echo".to_string())
    }
}

/// Echoes the first span after applying configured OCR-error corrections,
/// in key order, as substring replacements.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DictionaryGenerator {
    pub corrections: BTreeMap<String, String>,
}

impl GenModel for DictionaryGenerator {
    fn generate(&self, input: &GenInput) -> std::result::Result<String, String> {
        let mut out = EchoGenerator.generate(input)?;
        for (wrong, right) in &self.corrections {
            if !wrong.is_empty() {
                out = out.replace(wrong.as_str(), right);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationConfig {
    pub p_keep: f64,
    pub p_shift: f64,
    pub p_segment: f64,
    pub p_entity: f64,
    pub max_shift: usize,
    pub seed: u64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            p_keep: 0.8,
            p_shift: 0.8,
            p_segment: 0.1,
            p_entity: 0.1,
            max_shift: 3,
            seed: 0,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [self.p_keep, self.p_shift, self.p_segment, self.p_entity];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::field("perturbation", "probabilities must lie in [0, 1]"));
        }
        if (self.p_shift + self.p_segment + self.p_entity - 1.0).abs() > 1e-9 {
            return Err(Error::field("perturbation", "p_shift + p_segment + p_entity must equal 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbMode {
    Keep,
    Shift,
    Segment,
    Entity,
}

const SHIFT_ATTEMPTS: usize = 10;

fn shifted(gold: Interval, n_words: usize, max_shift: usize, rng: &mut impl Rng) -> Option<Interval> {
    if max_shift == 0 {
        return None;
    }
    for _ in 0..SHIFT_ATTEMPTS {
        let which = rng.gen_range(0..3u8);
        let mut start = gold.start;
        let mut end = gold.end;
        if which != 1 {
            let d = rng.gen_range(1..=max_shift);
            start = if rng.gen_bool(0.5) { start.saturating_sub(d) } else { start + d };
        }
        if which != 0 {
            let d = rng.gen_range(1..=max_shift);
            end = if rng.gen_bool(0.5) { (end + d).min(n_words) } else { end.saturating_sub(d) };
        }
        let candidate = Interval::new(start, end);
        if start < end && end <= n_words && candidate != gold {
            return Some(candidate);
        }
    }
    None
}

fn segment_range(page: &Page, rng: &mut impl Rng) -> Option<Interval> {
    if page.segments.is_empty() {
        return None;
    }
    Some(page.segments[rng.gen_range(0..page.segments.len())].word_range)
}

/// Perturbs a gold span for generator training. Returns the span actually
/// emitted and the mode that produced it; a failed shift or a page with no
/// segments reports `Keep`.
pub fn perturb_span(
    gold: &AnswerSpan,
    page: &Page,
    others: &[AnswerSpan],
    cfg: &PerturbationConfig,
    rng: &mut impl Rng,
) -> Result<(AnswerSpan, PerturbMode)> {
    let keep = || Ok((gold.clone(), PerturbMode::Keep));
    if rng.gen::<f64>() < cfg.p_keep {
        return keep();
    }
    let u = rng.gen::<f64>();
    let (range, mode) = if u < cfg.p_shift {
        match shifted(gold.token_range, page.words.len(), cfg.max_shift, rng) {
            Some(r) => (r, PerturbMode::Shift),
            None => return keep(),
        }
    } else if u < cfg.p_shift + cfg.p_segment || others.is_empty() {
        match segment_range(page, rng) {
            Some(r) => (r, PerturbMode::Segment),
            None => return keep(),
        }
    } else {
        (others[rng.gen_range(0..others.len())].token_range, PerturbMode::Entity)
    };
    Ok((AnswerSpan::on_page(page, gold.page, range, gold.score)?, mode))
}

/// 64-bit FNV-1a, stable across platforms and runs.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Per-item generator so parallel and serial runs draw identically.
pub fn item_rng(seed: u64, key: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ stable_hash(key))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenTrainRecord {
    pub qa_id: String,
    pub input: String,
    pub target: String,
    pub mode: PerturbMode,
}

/// One record per (QA pair, gold span). Returns the records and the number of
/// QA pairs skipped for lacking gold.
pub fn build_gen_training_set(
    qa: &[QaPair],
    docs: &HashMap<String, &Document>,
    cfg: &PerturbationConfig,
) -> Result<(Vec<GenTrainRecord>, usize)> {
    cfg.validate()?;
    // Gold spans per (doc, page), tagged with their owner for exclusion.
    let mut by_page: HashMap<(&str, usize), Vec<(&str, &AnswerSpan)>> = HashMap::new();
    for pair in qa {
        for g in &pair.gold {
            by_page.entry((&pair.doc_id, g.page)).or_default().push((&pair.qa_id, g));
        }
    }
    let skipped = qa.iter().filter(|p| p.gold.is_empty()).count();
    let per_pair: Vec<Vec<GenTrainRecord>> = qa
        .par_iter()
        .filter(|p| !p.gold.is_empty())
        .map(|pair| {
            let doc = docs
                .get(&pair.doc_id)
                .ok_or_else(|| Error::UnknownReference(format!("doc {}", pair.doc_id)))?;
            let mut rng = item_rng(cfg.seed, &pair.qa_id);
            pair.gold
                .iter()
                .map(|gold| {
                    let page = doc
                        .pages
                        .get(gold.page)
                        .ok_or_else(|| Error::field("gold.page", format!("{} page {}", pair.qa_id, gold.page)))?;
                    let others: Vec<AnswerSpan> = by_page
                        .get(&(pair.doc_id.as_str(), gold.page))
                        .into_iter()
                        .flatten()
                        .filter(|(owner, _)| *owner != pair.qa_id)
                        .map(|(_, s)| (*s).clone())
                        .collect();
                    let (span, mode) = perturb_span(gold, page, &others, cfg, &mut rng)?;
                    let input = build_gen_input(&pair.prompt, std::slice::from_ref(&span), &page.plain_text())?;
                    Ok(GenTrainRecord {
                        qa_id: pair.qa_id.clone(),
                        input: input.text,
                        target: gold.text.clone(),
                        mode,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok((per_pair.into_iter().flatten().collect(), skipped))
}

/// Feeds the top span of each understanding model (deduplicated by text,
/// capped at `max_spans`) to the generator, whose output is the answer.
/// Returns an empty answer when no model produced a span.
pub fn ensemble_infer(
    qa_id: &str,
    question: &str,
    context: &str,
    per_model: &[Vec<AnswerSpan>],
    max_spans: usize,
    gen: &dyn GenModel,
) -> Result<String> {
    let mut tops: Vec<&AnswerSpan> = per_model
        .iter()
        .filter_map(|spans| {
            spans.iter().min_by(|a, b| {
                b.score
                    .total_cmp(&a.score)
                    .then((a.page, a.token_range.start).cmp(&(b.page, b.token_range.start)))
            })
        })
        .collect();
    tops.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut chosen: Vec<AnswerSpan> = Vec::new();
    for s in tops {
        if chosen.len() < max_spans.clamp(1, MAX_SPANS) && !chosen.iter().any(|c| c.text == s.text) {
            chosen.push(s.clone());
        }
    }
    if chosen.is_empty() {
        return Ok(String::new());
    }
    let input = build_gen_input(question, &chosen, context)?;
    gen.generate(&input).map_err(|message| Error::Generation {
        qa_id: qa_id.to_string(),
        message,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub answer: String,
    pub score: f64,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    /// Source tags, most trusted first; used to break vote and score ties.
    #[serde(default)]
    pub priority: Vec<String>,
    #[serde(default = "default_spans")]
    pub max_spans: usize,
}

fn default_spans() -> usize {
    MAX_SPANS
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            priority: Vec::new(),
            max_spans: MAX_SPANS,
        }
    }
}

/// Plurality vote over normalized answers; ties go to the larger summed score,
/// then the highest-priority source. Empty answers do not vote.
pub fn fuse_answers(candidates: &[Candidate], priority: &[String]) -> Option<String> {
    struct Group<'a> {
        votes: usize,
        total: f64,
        rank: usize,
        best: &'a Candidate,
    }
    let rank_of = |src: &str| priority.iter().position(|p| p == src).unwrap_or(priority.len());
    let mut groups: BTreeMap<String, Group> = BTreeMap::new();
    for c in candidates {
        let key = normalize_loose(&c.answer);
        if key.is_empty() {
            continue;
        }
        let g = groups.entry(key).or_insert(Group {
            votes: 0,
            total: 0.0,
            rank: usize::MAX,
            best: c,
        });
        g.votes += 1;
        g.total += c.score;
        g.rank = g.rank.min(rank_of(&c.source));
        if c.score > g.best.score {
            g.best = c;
        }
    }
    groups
        .values()
        .min_by(|a, b| {
            b.votes
                .cmp(&a.votes)
                .then(b.total.total_cmp(&a.total))
                .then(a.rank.cmp(&b.rank))
        })
        .map(|g| g.best.answer.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::doc::{BBox, Segment, Word};

    fn page(n_words: usize, seg_size: usize) -> Page {
        let words = (0..n_words)
            .map(|i| Word {
                text: format!("w{i}"),
                bbox: BBox::SENTINEL,
                segment_id: i / seg_size,
            })
            .collect();
        let segments = (0..n_words.div_ceil(seg_size))
            .map(|s| Segment {
                id: s,
                word_range: Interval::new(s * seg_size, ((s + 1) * seg_size).min(n_words)),
            })
            .collect();
        Page {
            width: 0,
            height: 0,
            words,
            segments,
        }
    }

    fn span(p: &Page, a: usize, b: usize, score: f64) -> AnswerSpan {
        AnswerSpan::on_page(p, 0, Interval::new(a, b), score).unwrap()
    }

    fn cand(a: &str, score: f64, src: &str) -> Candidate {
        Candidate {
            answer: a.into(),
            score,
            source: src.into(),
        }
    }

    #[test]
    fn gen_input_format() {
        let p = Page {
            words: vec![Word {
                text: "Obama".into(),
                bbox: BBox::SENTINEL,
                segment_id: 0,
            }],
            ..Page::default()
        };
        let g = build_gen_input("Who?", &[span(&p, 0, 1, 0.0)], "Obama won").unwrap();
        assert_eq!(g.text, "[CLS] Who? [SEP] Obama [SEP] Obama won [SEP]");
    }

    #[test]
    fn gen_input_orders_by_score() {
        let p = page(6, 2);
        let spans = [span(&p, 0, 1, -0.1), span(&p, 1, 2, -0.3), span(&p, 2, 3, -0.2)];
        let g = build_gen_input("q", &spans, "c").unwrap();
        assert_eq!(g.spans, ["w0", "w2", "w1"]);
        let two = build_gen_input("q", &spans[..2], "c").unwrap();
        assert_eq!(two.text.matches("[SEP]").count(), 4);
    }

    #[test]
    fn gen_input_span_count_checked() {
        let p = page(6, 2);
        assert!(matches!(build_gen_input("q", &[], "c"), Err(Error::SpanCount(0))));
        let four: Vec<AnswerSpan> = (0..4).map(|i| span(&p, i, i + 1, 0.0)).collect();
        assert!(build_gen_input("q", &four, "c").is_err());
    }

    #[test]
    fn keep_probability_one_is_identity() {
        let p = page(20, 5);
        let gold = span(&p, 5, 8, 0.0);
        let cfg = PerturbationConfig {
            p_keep: 1.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (out, mode) = perturb_span(&gold, &p, &[], &cfg, &mut rng).unwrap();
            assert_eq!((out, mode), (gold.clone(), PerturbMode::Keep));
        }
    }

    #[test]
    fn segment_mode_replays_seeded_draw() {
        let p = page(9, 3);
        let gold = span(&p, 4, 6, 0.0);
        let cfg = PerturbationConfig {
            p_keep: 0.0,
            p_shift: 0.0,
            p_segment: 1.0,
            p_entity: 0.0,
            ..Default::default()
        };
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut replay = rng.clone();
            let (out, mode) = perturb_span(&gold, &p, &[], &cfg, &mut rng).unwrap();
            let _keep: f64 = replay.gen();
            let _mode: f64 = replay.gen();
            let idx = replay.gen_range(0..3usize);
            assert_eq!(mode, PerturbMode::Segment);
            assert_eq!(out.token_range, p.segments[idx].word_range);
        }
    }

    #[test]
    fn entity_falls_back_to_segment() {
        let p = page(9, 3);
        let gold = span(&p, 4, 6, 0.0);
        let cfg = PerturbationConfig {
            p_keep: 0.0,
            p_shift: 0.0,
            p_segment: 0.0,
            p_entity: 1.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, mode) = perturb_span(&gold, &p, &[], &cfg, &mut rng).unwrap();
        assert_eq!(mode, PerturbMode::Segment);
        let other = span(&p, 0, 2, 0.0);
        let (out, mode) = perturb_span(&gold, &p, std::slice::from_ref(&other), &cfg, &mut rng).unwrap();
        assert_eq!((out.token_range, mode), (other.token_range, PerturbMode::Entity));
    }

    #[test]
    fn shift_stays_on_page_and_moves() {
        let p = page(12, 4);
        let cfg = PerturbationConfig {
            p_keep: 0.0,
            p_shift: 1.0,
            p_segment: 0.0,
            p_entity: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (a, b) in [(0, 1), (0, 12), (5, 7), (11, 12)] {
            let gold = span(&p, a, b, 0.0);
            for _ in 0..200 {
                let (out, mode) = perturb_span(&gold, &p, &[], &cfg, &mut rng).unwrap();
                assert!(out.token_range.end <= 12 && !out.token_range.is_empty());
                if mode == PerturbMode::Shift {
                    assert_ne!(out.token_range, gold.token_range);
                } else {
                    assert_eq!(out, gold);
                }
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(PerturbationConfig::default().validate().is_ok());
        let bad = PerturbationConfig {
            p_segment: 0.3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn fuse_plurality() {
        let c = [cand("a", -1.0, "x"), cand("a", -1.0, "y"), cand("b", -0.1, "z")];
        assert_eq!(fuse_answers(&c, &[]), Some("a".into()));
    }

    #[test]
    fn fuse_score_tiebreak() {
        assert_eq!(fuse_answers(&[cand("a", -0.5, "x"), cand("b", -0.1, "y")], &[]), Some("b".into()));
    }

    #[test]
    fn fuse_two_two_split_by_summed_score() {
        // a: -0.3 + -0.4 = -0.7; b: -0.2 + -0.6 = -0.8.
        let c = [cand("a", -0.3, "m1"), cand("b", -0.2, "m2"), cand("A ", -0.4, "m3"), cand("b", -0.6, "m4")];
        assert_eq!(fuse_answers(&c, &[]), Some("a".into()));
    }

    #[test]
    fn fuse_priority_breaks_full_tie() {
        let c = [cand("a", -0.5, "gen"), cand("b", -0.5, "nlu")];
        assert_eq!(fuse_answers(&c, &["nlu".into(), "gen".into()]), Some("b".into()));
        assert_eq!(fuse_answers(&[], &[]), None);
    }

    #[test]
    fn echo_ensemble_returns_best_understanding_span() {
        let p = page(10, 5);
        let models = vec![vec![span(&p, 1, 3, -0.4)], vec![span(&p, 4, 6, -0.1), span(&p, 7, 8, -0.9)], vec![]];
        let out = ensemble_infer("q", "who", &p.plain_text(), &models, 3, &EchoGenerator).unwrap();
        assert_eq!(out, "w4 w5");
        assert_eq!(ensemble_infer("q", "who", "", &[vec![], vec![]], 3, &EchoGenerator).unwrap(), "");
    }

    #[test]
    fn dictionary_generator_repairs_ocr_errors() {
        let p = Page {
            words: vec![Word {
                text: "B3ijing".into(),
                bbox: BBox::SENTINEL,
                segment_id: 0,
            }],
            ..Page::default()
        };
        let gen = DictionaryGenerator {
            corrections: [("3".to_string(), "e".to_string())].into(),
        };
        let out = ensemble_infer("q", "where", "ctx", &[vec![span(&p, 0, 1, -0.2)]], 1, &gen).unwrap();
        assert_eq!(out, "Beijing");
    }

    #[test]
    fn stable_hash_known_value() {
        // FNV-1a reference values.
        assert_eq!(stable_hash(""), 0xcbf29ce484222325);
        assert_eq!(stable_hash("a"), 0xaf63dc4c8601ec8c);
    }
}
