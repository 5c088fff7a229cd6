//! Slow, obviously-correct references and fixtures shared by the test targets.
#![allow(dead_code)]

use std::collections::HashMap;

use rand::Rng;

use docqa::doc::{AnswerSpan, Document, Interval, QaPair};

/// Top-down memoized edit distance.
pub fn ref_levenshtein(a: &[char], b: &[char]) -> usize {
    fn go(a: &[char], b: &[char], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if a[i] == b[j] {
            go(a, b, i + 1, j + 1, memo)
        } else {
            1 + go(a, b, i + 1, j, memo).min(go(a, b, i, j + 1, memo)).min(go(a, b, i + 1, j + 1, memo))
        };
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

pub fn ref_lcs(a: &[String], b: &[String]) -> usize {
    fn go(a: &[String], b: &[String], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() || j == b.len() {
            return 0;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if a[i] == b[j] {
            1 + go(a, b, i + 1, j + 1, memo)
        } else {
            go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo))
        };
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

fn loose(s: &str) -> String {
    let lower = s.to_lowercase();
    let words: Vec<&str> = lower.split_whitespace().collect();
    words.join(" ")
}

fn ref_tokens(s: &str) -> Vec<String> {
    let l = loose(s);
    let trimmed = l.trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace());
    trimmed.split_whitespace().map(String::from).collect()
}

pub fn ref_anls(pred: &str, gold: &str) -> f64 {
    let p: Vec<char> = loose(pred).chars().collect();
    let g: Vec<char> = loose(gold).chars().collect();
    let longest = p.len().max(g.len());
    let sim = if longest == 0 {
        1.0
    } else {
        1.0 - ref_levenshtein(&p, &g) as f64 / longest as f64
    };
    if sim < 0.5 {
        0.0
    } else {
        sim
    }
}

/// Overlap by sorting both sides and merging.
pub fn ref_f1(pred: &str, gold: &str) -> f64 {
    let mut p = ref_tokens(pred);
    let mut g = ref_tokens(gold);
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() { 1.0 } else { 0.0 };
    }
    let (np, ng) = (p.len() as f64, g.len() as f64);
    p.sort();
    g.sort();
    let (mut i, mut j, mut common) = (0, 0, 0usize);
    while i < p.len() && j < g.len() {
        match p[i].cmp(&g[j]) {
            std::cmp::Ordering::Equal => {
                common += 1;
                i += 1;
                j += 1;
            }
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
        }
    }
    if common == 0 {
        return 0.0;
    }
    let (pr, rc) = (common as f64 / np, common as f64 / ng);
    2.0 * pr * rc / (pr + rc)
}

pub fn ref_rouge_l(pred: &str, gold: &str) -> f64 {
    let p = ref_tokens(pred);
    let g = ref_tokens(gold);
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() { 1.0 } else { 0.0 };
    }
    let l = ref_lcs(&p, &g);
    if l == 0 {
        return 0.0;
    }
    let (pr, rc) = (l as f64 / p.len() as f64, l as f64 / g.len() as f64);
    2.0 * pr * rc / (pr + rc)
}

/// Short strings over a tiny alphabet so pairs share characters and tokens.
pub fn random_answer(rng: &mut impl Rng) -> String {
    const WORDS: &[&str] = &["the", "The", "cat", "sat", "mat", "a", "on", "x1", "42", "cat.", "  ", "café", "über"];
    let n = rng.gen_range(0..6);
    let mut out = String::new();
    for i in 0..n {
        if i > 0 {
            out.push(if rng.gen_bool(0.1) { '\t' } else { ' ' });
        }
        out.push_str(WORDS[rng.gen_range(0..WORDS.len())]);
    }
    out
}

/// Plain-text document of `n` distinct tokens `w0 w1 ...`.
pub fn numbered_doc(id: &str, n: usize) -> Document {
    let text: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
    Document::from_plain_text(id, &text.join(" "))
}

pub fn qa_on(doc: &Document, qa_id: &str, prompt: &str, gold: &[Interval]) -> QaPair {
    QaPair {
        qa_id: qa_id.into(),
        doc_id: doc.doc_id.clone(),
        prompt: prompt.into(),
        gold: gold
            .iter()
            .map(|&r| AnswerSpan::from_tokens(doc, 0, r, 0.0).unwrap())
            .collect(),
        predicted: Vec::new(),
    }
}

pub fn random_logits(rng: &mut impl Rng, n: usize, k: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..k).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect()
}

/// Every set of non-overlapping spans over `n` tokens with width at least `min_width`.
pub fn all_span_sets(n: usize, min_width: usize) -> Vec<Vec<Interval>> {
    fn go(pos: usize, n: usize, min_width: usize, cur: &mut Vec<Interval>, out: &mut Vec<Vec<Interval>>) {
        if pos >= n {
            out.push(cur.clone());
            return;
        }
        go(pos + 1, n, min_width, cur, out);
        for end in pos + min_width..=n {
            cur.push(Interval::new(pos, end));
            go(end, n, min_width, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, min_width, &mut Vec::new(), &mut out);
    out
}
