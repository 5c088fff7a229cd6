//! Deterministic stand-ins for the neural parts: logits derived from gold
//! spans, an exhaustive reference decoder, and a synthetic corpus with planted
//! key/value answers.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decode::{log_softmax, LabelPath, Scheme, TokenLogits};
use crate::doc::{BBox, Interval};
use crate::ensemble::item_rng;
use crate::error::{Error, Result};
use crate::layout::{LayoutTemplate, TemplatePage};
use crate::mrc::MrcWindow;
use crate::weaksup::{SourceArticle, StructuredRecord};

/// Score given to the correct label; all others get 0.
pub const EMISSION_MARGIN: f64 = 4.0;
pub const BRUTE_FORCE_LIMIT: usize = 10;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseRegion {
    /// Any context token may be corrupted.
    #[default]
    All,
    /// Only tokens inside a gold span.
    GoldSpans,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub label_noise: f64,
    /// Restrict corruption to one head.
    pub corrupt_scheme: Option<Scheme>,
    #[serde(default)]
    pub region: NoiseRegion,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn clean() -> NoiseSpec {
        NoiseSpec::default()
    }
}

/// Emissions favoring the encoding of `spans` under every scheme, with seeded
/// label corruption.
pub fn gold_to_logits(window: &MrcWindow, spans: &[Interval], noise: &NoiseSpec) -> Result<TokenLogits> {
    if !(0.0..=1.0).contains(&noise.label_noise) {
        return Err(Error::field("label_noise", "must lie in [0, 1]"));
    }
    let n = window.context_len;
    let mut rng = item_rng(noise.seed, &format!("{}#{}", window.qa_id, window.window_index));
    let in_gold = |t: usize| spans.iter().any(|s| s.start <= t && t < s.end);
    let mut heads = Vec::with_capacity(3);
    for scheme in Scheme::ALL {
        let labels = scheme.encode(n, spans);
        let k = scheme.n_labels();
        let eligible = noise.label_noise > 0.0 && noise.corrupt_scheme.is_none_or(|c| c == scheme);
        let rows: Vec<Vec<f64>> = labels
            .iter()
            .enumerate()
            .map(|(t, &truth)| {
                let mut target = truth;
                if eligible && (noise.region == NoiseRegion::All || in_gold(t)) && rng.gen::<f64>() < noise.label_noise {
                    let r = rng.gen_range(0..k - 1);
                    target = if r >= truth { r + 1 } else { r };
                }
                let mut row = vec![0.0; k];
                row[target] = EMISSION_MARGIN;
                row
            })
            .collect();
        heads.push(rows);
    }
    let se = heads.pop().unwrap_or_default();
    let bioes = heads.pop().unwrap_or_default();
    let bio = heads.pop().unwrap_or_default();
    Ok(TokenLogits {
        qa_id: window.qa_id.clone(),
        window_index: window.window_index,
        bio,
        bioes,
        se,
    })
}

/// Reverse-lexicographic order: compare from the last label backwards. Among
/// equal-score paths this picks the one the backtracking decoder returns.
fn reverse_lex_less(a: &[usize], b: &[usize]) -> bool {
    a.iter().rev().lt(b.iter().rev())
}

/// Exhaustive search over every valid label sequence.
pub fn brute_force_decode(logits: &[Vec<f64>], scheme: Scheme) -> Result<LabelPath> {
    if logits.len() > BRUTE_FORCE_LIMIT {
        return Err(Error::EnumerationGuard {
            limit: BRUTE_FORCE_LIMIT,
            got: logits.len(),
        });
    }
    if logits.is_empty() {
        return Err(Error::Logits("empty logits matrix".into()));
    }
    let k = scheme.n_labels();
    if logits.iter().any(|r| r.len() != k || r.iter().any(|v| !v.is_finite())) {
        return Err(Error::Logits("matrix shape or values invalid".into()));
    }
    let lp: Vec<Vec<f64>> = logits.iter().map(|r| log_softmax(r)).collect();
    let table = scheme.table();
    let n = lp.len();
    let total = k.pow(n as u32);
    let mut best: Option<LabelPath> = None;
    let mut labels = vec![0; n];
    for code in 0..total {
        let mut c = code;
        for slot in labels.iter_mut() {
            *slot = c % k;
            c /= k;
        }
        if !table.is_valid(&labels) {
            continue;
        }
        let mut score = 0.0;
        for (t, &l) in labels.iter().enumerate() {
            score = if t == 0 { lp[0][l] } else { score + lp[t][l] };
        }
        let better = match &best {
            None => true,
            Some(b) => score > b.score || (score == b.score && reverse_lex_less(&labels, &b.labels)),
        };
        if better {
            best = Some(LabelPath {
                labels: labels.clone(),
                score,
            });
        }
    }
    best.ok_or(Error::NoValidSequence)
}

/// A value inserted into an article, with its byte offset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedValue {
    pub entity_id: String,
    pub key: String,
    pub value: String,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub records: Vec<StructuredRecord>,
    pub articles: Vec<SourceArticle>,
    pub templates: Vec<LayoutTemplate>,
    pub planted: Vec<PlantedValue>,
}

const KEYS: &[&str] = &[
    "birthplace",
    "date of birth",
    "occupation",
    "spouse",
    "employer",
    "nationality",
    "alma mater",
    "headquarters",
    "founder",
    "award",
    "genre",
    "record label",
];

const FILLER: &[&str] = &[
    "the", "of", "and", "in", "was", "a", "to", "is", "for", "with", "as", "by", "on", "from", "at", "his", "her",
    "their", "which", "after", "during", "later", "early", "known", "career", "work", "years", "first", "became",
    "member", "served", "moved", "city", "also", "several", "public", "time", "local", "small", "new",
];

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ren", "ta", "vu", "zor", "el", "an", "bri", "qu", "sel", "dor", "ix", "pa", "nu", "ves", "ol",
    "tri", "gan",
];

pub const TEMPLATE_SLOTS: usize = 960;
pub const MIN_ARTICLE_WORDS: usize = 30;
pub const MAX_ARTICLE_WORDS: usize = 300;
pub const LONG_ARTICLE_WORDS: usize = 900;

fn name_word(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(2..=3);
    let mut w: String = (0..n).map(|_| *SYLLABLES.choose(rng).unwrap()).collect();
    w[..1].make_ascii_uppercase();
    w
}

/// `n_docs` articles with 4 to 8 fields each, about 70% of them planted
/// verbatim as 2 or 3 capitalized words between lowercase filler, plus one
/// layout template per ten articles. Every value word is unique within its
/// article, so each planted value occurs exactly once.
pub fn make_synthetic_corpus(n_docs: usize, seed: u64) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corpus = SyntheticCorpus {
        records: Vec::with_capacity(n_docs),
        articles: Vec::with_capacity(n_docs),
        templates: Vec::new(),
        planted: Vec::new(),
    };
    for i in 0..n_docs {
        let entity_id = format!("ent{i:05}");
        let n_fields = rng.gen_range(4..=8);
        let keys: Vec<&str> = KEYS.choose_multiple(&mut rng, n_fields).copied().collect();
        let mut used: HashSet<String> = HashSet::new();
        let mut fields = Vec::with_capacity(n_fields);
        let mut to_plant = Vec::new();
        for (f, key) in keys.iter().enumerate() {
            let n_words = rng.gen_range(2..=3);
            let mut words = Vec::with_capacity(n_words);
            while words.len() < n_words {
                let w = name_word(&mut rng);
                if used.insert(w.clone()) {
                    words.push(w);
                }
            }
            let value = words.join(" ");
            // Always plant at least the first field.
            if f == 0 || rng.gen_bool(0.7) {
                to_plant.push((key.to_string(), value.clone()));
            }
            fields.push((key.to_string(), value));
        }

        let length = if rng.gen_bool(0.05) {
            rng.gen_range(MAX_ARTICLE_WORDS..=LONG_ARTICLE_WORDS)
        } else {
            rng.gen_range(MIN_ARTICLE_WORDS..=MAX_ARTICLE_WORDS)
        };
        let n_filler = length.saturating_sub(to_plant.len() * 3).max(to_plant.len() + 1);
        let mut slots: Vec<usize> = (0..=n_filler).collect();
        slots.shuffle(&mut rng);
        let mut insert_at: Vec<(usize, usize)> = slots[..to_plant.len()]
            .iter()
            .enumerate()
            .map(|(p, &s)| (s, p))
            .collect();
        insert_at.sort();

        let mut text = String::new();
        let mut next = insert_at.iter().peekable();
        for pos in 0..=n_filler {
            while let Some(&&(slot, p)) = next.peek() {
                if slot != pos {
                    break;
                }
                if !text.is_empty() {
                    text.push(' ');
                }
                let (key, value) = &to_plant[p];
                corpus.planted.push(PlantedValue {
                    entity_id: entity_id.clone(),
                    key: key.clone(),
                    value: value.clone(),
                    offset: text.len(),
                });
                text.push_str(value);
                next.next();
            }
            if pos < n_filler {
                if !text.is_empty() {
                    text.push(' ');
                }
                text.push_str(FILLER.choose(&mut rng).unwrap());
            }
        }

        corpus.records.push(StructuredRecord {
            entity_id: entity_id.clone(),
            fields,
        });
        corpus.articles.push(SourceArticle { entity_id, text });
    }

    for t in 0..n_docs.div_ceil(10).max(1) {
        corpus.templates.push(make_template(&format!("tpl{t:04}"), &mut rng));
    }
    corpus
}

fn make_template(id: &str, rng: &mut ChaCha8Rng) -> LayoutTemplate {
    let cols = 24;
    let rows = TEMPLATE_SLOTS / cols;
    let row_h = 1000 / rows as u16;
    let mut slots = Vec::with_capacity(TEMPLATE_SLOTS);
    let mut segment_map = Vec::new();
    for r in 0..rows {
        let widths: Vec<u16> = (0..cols).map(|_| rng.gen_range(20..=50)).collect();
        let total: u32 = widths.iter().map(|&w| w as u32).sum();
        let mut x = 20u32;
        let y0 = r as u16 * row_h + 2;
        let y1 = y0 + row_h * 3 / 4;
        for w in widths {
            let span = w as u32 * 960 / total;
            let x1 = (x + span).min(1000);
            let pad = (span / 8).max(1);
            slots.push(BBox::from([x as u16, y0, (x1 - pad) as u16, y1]));
            x = x1;
        }
        // Each line splits into two or three segments.
        let base = r * cols;
        let cuts = if rng.gen_bool(0.5) { vec![0, cols / 2, cols] } else { vec![0, cols / 3, 2 * cols / 3, cols] };
        for c in cuts.windows(2) {
            segment_map.push((Interval::new(base + c[0], base + c[1]), segment_map.len()));
        }
    }
    LayoutTemplate {
        template_id: id.to_string(),
        pages: vec![TemplatePage {
            width: 425,
            height: 550,
            slots,
            segment_map,
        }],
        provenance: "synthetic grid".to_string(),
    }
}
