//! Multiple-style span decoding.
//!
//! Each labeling head (BIO, BIOES, SE) is decoded independently with a
//! constrained Viterbi pass over log-softmax emissions. Window-local spans are
//! stitched into document coordinates and the three heads are fused by a
//! 2-of-3 exact-range vote.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::doc::Interval;
use crate::error::{Error, Result};
use crate::mrc::MrcWindow;

pub const O: usize = 0;

pub mod bio {
    pub const B: usize = 1;
    pub const I: usize = 2;
}

pub mod bioes {
    pub const B: usize = 1;
    pub const I: usize = 2;
    pub const E: usize = 3;
    pub const S: usize = 4;
}

pub mod se {
    pub const S: usize = 1;
    pub const E: usize = 2;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Bio,
    Bioes,
    Se,
}

impl Scheme {
    /// Also the tie-break priority order for fusion fallback.
    pub const ALL: [Scheme; 3] = [Scheme::Bio, Scheme::Bioes, Scheme::Se];

    pub fn labels(self) -> &'static [&'static str] {
        match self {
            Scheme::Bio => &["O", "B", "I"],
            Scheme::Bioes => &["O", "B", "I", "E", "S"],
            Scheme::Se => &["O", "S", "E"],
        }
    }

    pub fn n_labels(self) -> usize {
        self.labels().len()
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Bio => "bio",
            Scheme::Bioes => "bioes",
            Scheme::Se => "se",
        }
    }

    pub fn table(self) -> TransitionTable {
        let n = self.n_labels();
        let mut t = TransitionTable {
            n_labels: n,
            allowed: vec![false; n * n],
            start: vec![false; n],
            end: vec![false; n],
        };
        type Edges = &'static [(usize, &'static [usize])];
        let (starts, ends, edges): (&[usize], &[usize], Edges) = match self {
            Scheme::Bio => (
                &[O, bio::B],
                &[O, bio::B, bio::I],
                &[(O, &[O, bio::B]), (bio::B, &[O, bio::B, bio::I]), (bio::I, &[O, bio::B, bio::I])],
            ),
            Scheme::Bioes => (
                &[O, bioes::B, bioes::S],
                &[O, bioes::E, bioes::S],
                &[
                    (O, &[O, bioes::B, bioes::S]),
                    (bioes::B, &[bioes::I, bioes::E]),
                    (bioes::I, &[bioes::I, bioes::E]),
                    (bioes::E, &[O, bioes::B, bioes::S]),
                    (bioes::S, &[O, bioes::B, bioes::S]),
                ],
            ),
            Scheme::Se => (
                &[O, se::S],
                &[O, se::E],
                &[(O, &[O, se::S, se::E]), (se::S, &[O, se::E]), (se::E, &[O, se::S])],
            ),
        };
        for &s in starts {
            t.start[s] = true;
        }
        for &e in ends {
            t.end[e] = true;
        }
        for &(from, tos) in edges {
            for &to in tos {
                t.allowed[from * n + to] = true;
            }
        }
        t
    }

    /// Label sequence for non-overlapping spans. SE cannot express width-1
    /// spans; those are left as `O`.
    pub fn encode(self, n_tokens: usize, spans: &[Interval]) -> Vec<usize> {
        let mut labels = vec![O; n_tokens];
        for s in spans {
            match self {
                Scheme::Bio => {
                    labels[s.start] = bio::B;
                    labels[s.start + 1..s.end].fill(bio::I);
                }
                Scheme::Bioes if s.len() == 1 => labels[s.start] = bioes::S,
                Scheme::Bioes => {
                    labels[s.start] = bioes::B;
                    labels[s.start + 1..s.end - 1].fill(bioes::I);
                    labels[s.end - 1] = bioes::E;
                }
                Scheme::Se if s.len() >= 2 => {
                    labels[s.start] = se::S;
                    labels[s.end - 1] = se::E;
                }
                Scheme::Se => {}
            }
        }
        labels
    }
}

impl std::str::FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "bio" => Ok(Scheme::Bio),
            "bioes" => Ok(Scheme::Bioes),
            "se" => Ok(Scheme::Se),
            other => Err(format!("unknown scheme {other:?}")),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One value per labeling head.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PerScheme<T> {
    pub bio: T,
    pub bioes: T,
    pub se: T,
}

impl<T> PerScheme<T> {
    pub fn get(&self, s: Scheme) -> &T {
        match s {
            Scheme::Bio => &self.bio,
            Scheme::Bioes => &self.bioes,
            Scheme::Se => &self.se,
        }
    }

    pub fn get_mut(&mut self, s: Scheme) -> &mut T {
        match s {
            Scheme::Bio => &mut self.bio,
            Scheme::Bioes => &mut self.bioes,
            Scheme::Se => &mut self.se,
        }
    }

    pub fn from_fn(mut f: impl FnMut(Scheme) -> T) -> Self {
        PerScheme {
            bio: f(Scheme::Bio),
            bioes: f(Scheme::Bioes),
            se: f(Scheme::Se),
        }
    }

    pub fn try_from_fn<E>(mut f: impl FnMut(Scheme) -> std::result::Result<T, E>) -> std::result::Result<Self, E> {
        Ok(PerScheme {
            bio: f(Scheme::Bio)?,
            bioes: f(Scheme::Bioes)?,
            se: f(Scheme::Se)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionTable {
    pub n_labels: usize,
    /// Row-major `from * n_labels + to`.
    pub allowed: Vec<bool>,
    pub start: Vec<bool>,
    pub end: Vec<bool>,
}

impl TransitionTable {
    pub fn allows(&self, from: usize, to: usize) -> bool {
        self.allowed[from * self.n_labels + to]
    }

    pub fn is_valid(&self, labels: &[usize]) -> bool {
        match (labels.first(), labels.last()) {
            (Some(&f), Some(&l)) => {
                self.start[f] && self.end[l] && labels.windows(2).all(|w| self.allows(w[0], w[1]))
            }
            _ => true,
        }
    }
}

/// Per-window emissions for all three heads; rows are context tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogits {
    pub qa_id: String,
    pub window_index: usize,
    pub bio: Vec<Vec<f64>>,
    pub bioes: Vec<Vec<f64>>,
    pub se: Vec<Vec<f64>>,
}

impl TokenLogits {
    pub fn matrix(&self, s: Scheme) -> &[Vec<f64>] {
        match s {
            Scheme::Bio => &self.bio,
            Scheme::Bioes => &self.bioes,
            Scheme::Se => &self.se,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.bio.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_tokens();
        for s in Scheme::ALL {
            check_matrix(self.matrix(s), s)?;
            if self.matrix(s).len() != n {
                return Err(Error::Logits(format!("{} head has {} rows, bio has {n}", s, self.matrix(s).len())));
            }
        }
        Ok(())
    }
}

fn check_matrix(m: &[Vec<f64>], s: Scheme) -> Result<()> {
    for (t, row) in m.iter().enumerate() {
        if row.len() != s.n_labels() {
            return Err(Error::Logits(format!("{s} row {t} has {} columns, expected {}", row.len(), s.n_labels())));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Logits(format!("{s} row {t} has a non-finite value")));
        }
    }
    Ok(())
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelPath {
    pub labels: Vec<usize>,
    /// Sum of log-softmax emissions along the path.
    pub score: f64,
}

/// Score of a fixed label sequence, summed left to right.
pub fn path_score(log_probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (t, &l) in labels.iter().enumerate() {
        total = if t == 0 { log_probs[0][l] } else { total + log_probs[t][l] };
    }
    total
}

/// Constrained Viterbi over raw logits. Ties go to the lower label index at
/// every backtrack step.
pub fn viterbi(logits: &[Vec<f64>], table: &TransitionTable) -> Result<LabelPath> {
    if logits.is_empty() {
        return Err(Error::Logits("empty logits matrix".into()));
    }
    let n = table.n_labels;
    if let Some((t, row)) = logits.iter().enumerate().find(|(_, r)| r.len() != n || r.iter().any(|v| !v.is_finite())) {
        return Err(Error::Logits(format!("row {t} has {} columns or non-finite values", row.len())));
    }
    let lp: Vec<Vec<f64>> = logits.iter().map(|r| log_softmax(r)).collect();
    viterbi_log_probs(&lp, table)
}

/// Viterbi over precomputed log-probabilities.
pub fn viterbi_log_probs(lp: &[Vec<f64>], table: &TransitionTable) -> Result<LabelPath> {
    let n = table.n_labels;
    let len = lp.len();
    let mut delta: Vec<f64> = (0..n)
        .map(|l| if table.start[l] { lp[0][l] } else { f64::NEG_INFINITY })
        .collect();
    let mut back = vec![vec![0usize; n]; len];
    for t in 1..len {
        let mut next = vec![f64::NEG_INFINITY; n];
        for to in 0..n {
            let mut best = f64::NEG_INFINITY;
            let mut arg = usize::MAX;
            for (from, &d) in delta.iter().enumerate() {
                if !table.allows(from, to) || d == f64::NEG_INFINITY {
                    continue;
                }
                let v = d + lp[t][to];
                if arg == usize::MAX || v > best {
                    best = v;
                    arg = from;
                }
            }
            if arg != usize::MAX {
                next[to] = best;
                back[t][to] = arg;
            }
        }
        delta = next;
    }
    let mut last = None;
    for l in 0..n {
        if table.end[l] && delta[l] > f64::NEG_INFINITY && last.is_none_or(|b: usize| delta[l] > delta[b]) {
            last = Some(l);
        }
    }
    let mut cur = last.ok_or(Error::NoValidSequence)?;
    let score = delta[cur];
    let mut labels = vec![0; len];
    for t in (0..len).rev() {
        labels[t] = cur;
        if t > 0 {
            cur = back[t][cur];
        }
    }
    Ok(LabelPath { labels, score })
}

/// Token ranges encoded by a label sequence.
pub fn extract_spans(labels: &[usize], scheme: Scheme) -> Vec<Interval> {
    let mut out = Vec::new();
    let mut open: Option<usize> = None;
    match scheme {
        Scheme::Bio => {
            for (i, &l) in labels.iter().enumerate() {
                match l {
                    bio::B => {
                        if let Some(s) = open {
                            out.push(Interval::new(s, i));
                        }
                        open = Some(i);
                    }
                    bio::I => {}
                    _ => {
                        if let Some(s) = open.take() {
                            out.push(Interval::new(s, i));
                        }
                    }
                }
            }
            if let Some(s) = open {
                out.push(Interval::new(s, labels.len()));
            }
        }
        Scheme::Bioes => {
            for (i, &l) in labels.iter().enumerate() {
                match l {
                    bioes::B => open = Some(i),
                    bioes::I => {}
                    bioes::E => {
                        if let Some(s) = open.take() {
                            out.push(Interval::new(s, i + 1));
                        }
                    }
                    bioes::S => {
                        open = None;
                        out.push(Interval::new(i, i + 1));
                    }
                    _ => open = None,
                }
            }
        }
        Scheme::Se => {
            for (i, &l) in labels.iter().enumerate() {
                match l {
                    se::S => open = Some(i),
                    se::E => {
                        if let Some(s) = open.take() {
                            out.push(Interval::new(s, i + 1));
                        }
                    }
                    _ => {}
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSpan {
    pub range: Interval,
    /// Mean log-probability of the path labels inside the span.
    pub score: f64,
}

/// Decodes one head of one window into scored, window-local spans.
pub fn decode_head(logits: &[Vec<f64>], scheme: Scheme) -> Result<Vec<ScoredSpan>> {
    if logits.is_empty() {
        return Ok(Vec::new());
    }
    check_matrix(logits, scheme)?;
    let lp: Vec<Vec<f64>> = logits.iter().map(|r| log_softmax(r)).collect();
    let path = viterbi_log_probs(&lp, &scheme.table())?;
    Ok(extract_spans(&path.labels, scheme)
        .into_iter()
        .map(|r| {
            let sum: f64 = (r.start..r.end).map(|t| lp[t][path.labels[t]]).sum();
            ScoredSpan {
                range: r,
                score: sum / r.len() as f64,
            }
        })
        .collect())
}

pub type DecodedSpans = PerScheme<Vec<ScoredSpan>>;

pub fn decode_window(logits: &TokenLogits) -> Result<DecodedSpans> {
    logits.validate()?;
    PerScheme::try_from_fn(|s| decode_head(logits.matrix(s), s))
}

/// A span in document word coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DocSpan {
    pub page: usize,
    pub token_range: Interval,
    pub score: f64,
}

impl DocSpan {
    fn key(&self) -> (usize, usize, usize) {
        (self.page, self.token_range.start, self.token_range.end)
    }

    fn overlaps(&self, other: &DocSpan) -> bool {
        self.page == other.page && self.token_range.overlaps(&other.token_range)
    }
}

/// Higher score first, then earlier start, then shorter.
fn preference(a: &DocSpan, b: &DocSpan) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.page.cmp(&b.page))
        .then(a.token_range.start.cmp(&b.token_range.start))
        .then(a.token_range.len().cmp(&b.token_range.len()))
}

/// Merges exact duplicates keeping the max score, then keeps a non-overlapping
/// set greedily by [`preference`]. Output is ordered by position.
pub fn resolve_overlaps(spans: impl IntoIterator<Item = DocSpan>) -> Vec<DocSpan> {
    let mut best: BTreeMap<(usize, usize, usize), DocSpan> = BTreeMap::new();
    for s in spans {
        best.entry(s.key())
            .and_modify(|e| {
                if s.score > e.score {
                    e.score = s.score;
                }
            })
            .or_insert(s);
    }
    let mut ranked: Vec<DocSpan> = best.into_values().collect();
    ranked.sort_by(preference);
    let mut kept: Vec<DocSpan> = Vec::new();
    for s in ranked {
        if !kept.iter().any(|k| k.overlaps(&s)) {
            kept.push(s);
        }
    }
    kept.sort_by_key(DocSpan::key);
    kept
}

/// Maps every window's spans into document coordinates and resolves them per head.
pub fn stitch_windows(qa_id: &str, parts: &[(&MrcWindow, &DecodedSpans)]) -> Result<PerScheme<Vec<DocSpan>>> {
    let expected = parts.first().map_or(1, |(w, _)| w.n_windows);
    let present: BTreeSet<usize> = parts.iter().map(|(w, _)| w.window_index).collect();
    let missing: Vec<usize> = (0..expected).filter(|i| !present.contains(i)).collect();
    if !missing.is_empty() {
        return Err(Error::MissingWindows {
            qa_id: qa_id.to_string(),
            missing,
        });
    }
    Ok(PerScheme::from_fn(|scheme| {
        resolve_overlaps(parts.iter().flat_map(|(window, decoded)| {
            decoded.get(scheme).iter().filter_map(|s| {
                window.to_document(s.range).map(|(page, token_range)| DocSpan {
                    page,
                    token_range,
                    score: s.score,
                })
            })
        }))
    }))
}

/// 2-of-3 exact-range vote. Falls back to the single best span (BIO > BIOES > SE
/// on score ties) when nothing gathers two votes.
pub fn vote_fuse(spans: &PerScheme<Vec<DocSpan>>) -> Vec<DocSpan> {
    let mut votes: BTreeMap<(usize, usize, usize), (BTreeSet<Scheme>, DocSpan)> = BTreeMap::new();
    for scheme in Scheme::ALL {
        for s in spans.get(scheme) {
            let entry = votes.entry(s.key()).or_insert_with(|| (BTreeSet::new(), *s));
            entry.0.insert(scheme);
            if s.score > entry.1.score {
                entry.1.score = s.score;
            }
        }
    }
    let agreed: Vec<DocSpan> = votes.values().filter(|(v, _)| v.len() >= 2).map(|(_, s)| *s).collect();
    if !agreed.is_empty() {
        return agreed;
    }
    let mut best: Option<DocSpan> = None;
    for scheme in Scheme::ALL {
        for s in spans.get(scheme) {
            // Strict improvement keeps the earlier scheme on exact ties.
            if best.is_none_or(|b| s.score > b.score) {
                best = Some(*s);
            }
        }
    }
    best.into_iter().collect()
}

/// Top-1: highest score, ties to the earliest start.
pub fn select_answer(spans: &[DocSpan]) -> Option<DocSpan> {
    spans
        .iter()
        .copied()
        .min_by(|a, b| b.score.total_cmp(&a.score).then(a.key().cmp(&b.key())))
}
