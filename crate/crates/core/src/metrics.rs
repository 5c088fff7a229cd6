//! Answer-string metrics: ANLS, exact match, token F1 and ROUGE-L.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub const ANLS_TAU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Anls,
    Em,
    F1,
    RougeL,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Anls, Metric::Em, Metric::F1, Metric::RougeL];

    pub fn score(self, pred: &str, golds: &[String]) -> f64 {
        match self {
            Metric::Anls => anls(pred, golds, ANLS_TAU),
            Metric::Em => exact_match(pred, golds),
            Metric::F1 => token_f1(pred, golds),
            Metric::RougeL => rouge_l(pred, golds),
        }
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "anls" => Ok(Metric::Anls),
            "em" => Ok(Metric::Em),
            "f1" => Ok(Metric::F1),
            "rougel" | "rouge_l" | "rouge-l" => Ok(Metric::RougeL),
            other => Err(format!("unknown metric {other:?}")),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Anls => "anls",
            Metric::Em => "em",
            Metric::F1 => "f1",
            Metric::RougeL => "rougel",
        })
    }
}

/// Lowercased, whitespace collapsed.
pub fn normalize_loose(s: &str) -> String {
    s.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// [`normalize_loose`] plus leading/trailing punctuation stripped.
pub fn normalize_answer(s: &str) -> String {
    let loose = normalize_loose(s);
    loose
        .trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_string()
}

/// Character-level edit distance.
pub fn levenshtein(a: &[char], b: &[char]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn golds_or_empty(golds: &[String]) -> Vec<&str> {
    if golds.is_empty() {
        vec![""]
    } else {
        golds.iter().map(String::as_str).collect()
    }
}

fn max_over(golds: &[String], f: impl Fn(&str) -> f64) -> f64 {
    golds_or_empty(golds).into_iter().map(f).fold(0.0, f64::max)
}

/// Similarity `1 - NL` for the best gold, zeroed below `tau`. An empty gold
/// list is treated as a single empty answer.
pub fn anls(pred: &str, golds: &[String], tau: f64) -> f64 {
    let p: Vec<char> = normalize_loose(pred).chars().collect();
    let best = max_over(golds, |g| {
        let g: Vec<char> = normalize_loose(g).chars().collect();
        let longest = p.len().max(g.len());
        if longest == 0 {
            return 1.0;
        }
        1.0 - levenshtein(&p, &g) as f64 / longest as f64
    });
    if best >= tau {
        best
    } else {
        0.0
    }
}

pub fn exact_match(pred: &str, golds: &[String]) -> f64 {
    let p = normalize_answer(pred);
    let hit = golds_or_empty(golds).into_iter().any(|g| normalize_answer(g) == p);
    f64::from(u8::from(hit))
}

fn tokens(s: &str) -> Vec<String> {
    normalize_answer(s).split_whitespace().map(str::to_string).collect()
}

pub fn token_f1(pred: &str, golds: &[String]) -> f64 {
    let p = tokens(pred);
    max_over(golds, |g| {
        let g = tokens(g);
        if p.is_empty() || g.is_empty() {
            return f64::from(u8::from(p.is_empty() && g.is_empty()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in &g {
            *counts.entry(t).or_default() += 1;
        }
        let mut common = 0;
        for t in &p {
            if let Some(c) = counts.get_mut(t.as_str()) {
                if *c > 0 {
                    *c -= 1;
                    common += 1;
                }
            }
        }
        f_measure(common, p.len(), g.len())
    })
}

fn f_measure(overlap: usize, n_pred: usize, n_gold: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / n_pred as f64;
    let recall = overlap as f64 / n_gold as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure over whitespace tokens, precision and recall weighted equally.
pub fn rouge_l(pred: &str, golds: &[String]) -> f64 {
    let p = tokens(pred);
    max_over(golds, |g| {
        let g = tokens(g);
        if p.is_empty() || g.is_empty() {
            return f64::from(u8::from(p.is_empty() && g.is_empty()));
        }
        f_measure(lcs_len(&p, &g), p.len(), g.len())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionScore {
    pub qa_id: String,
    pub prediction: String,
    pub answered: bool,
    pub scores: BTreeMap<Metric, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_questions: usize,
    pub n_unanswered: usize,
    /// Means in `[0, 1]`.
    pub aggregates: BTreeMap<Metric, f64>,
    pub questions: Vec<QuestionScore>,
}

impl EvalReport {
    pub fn aggregate(&self, m: Metric) -> Option<f64> {
        self.aggregates.get(&m).copied()
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let metrics: Vec<Metric> = self.aggregates.keys().copied().collect();
        let mut header = vec!["qa_id".to_string(), "prediction".to_string(), "answered".to_string()];
        header.extend(metrics.iter().map(ToString::to_string));
        w.write_record(&header)?;
        for q in &self.questions {
            let mut row = vec![q.qa_id.clone(), q.prediction.clone(), q.answered.to_string()];
            row.extend(q.scores.values().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Scores predictions against golds by `qa_id`. Questions appear in `golds`
/// order; a missing prediction is the empty string.
pub fn evaluate(predictions: &HashMap<String, String>, golds: &[(String, Vec<String>)], metrics: &[Metric]) -> EvalReport {
    let mut sums: BTreeMap<Metric, f64> = BTreeMap::new();
    let mut questions = Vec::with_capacity(golds.len());
    let mut unanswered = 0;
    for (qa_id, gold) in golds {
        let (pred, answered) = match predictions.get(qa_id) {
            Some(p) if !p.is_empty() => (p.as_str(), true),
            _ => ("", false),
        };
        unanswered += usize::from(!answered);
        let scores: BTreeMap<Metric, f64> = metrics.iter().map(|m| (*m, m.score(pred, gold))).collect();
        for (m, v) in &scores {
            *sums.entry(*m).or_insert(0.0) += v;
        }
        questions.push(QuestionScore {
            qa_id: qa_id.clone(),
            prediction: pred.to_string(),
            answered,
            scores,
        });
    }
    let n = golds.len().max(1) as f64;
    EvalReport {
        n_questions: golds.len(),
        n_unanswered: unanswered,
        aggregates: metrics.iter().map(|m| (*m, sums.get(m).copied().unwrap_or(0.0) / n)).collect(),
        questions,
    }
}
