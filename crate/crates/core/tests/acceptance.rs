//! Runs the nine acceptance criteria and prints one PASS/FAIL line for each.

mod common;

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use docqa::decode::{extract_spans, select_answer, viterbi, Scheme};
use docqa::doc::{AnswerSpan, Interval};
use docqa::ensemble::{perturb_span, PerturbMode, PerturbationConfig};
use docqa::metrics::{anls, evaluate, rouge_l, token_f1, Metric, ANLS_TAU};
use docqa::mrc::{build_windows, context_budget, WhitespaceTokenizer, WindowConfig};
use docqa::oracle::{brute_force_decode, make_synthetic_corpus};
use docqa::pipeline::{
    build_all_windows, decode_all, fill_documents, gen_weak, gold_strings, oracle_logits, run_pipeline, DecodeOptions,
    NoisePlan, PipelineOptions, PIPELINE_FILES,
};
use docqa::weaksup::{generate, match_record};

use common::{all_span_sets, numbered_doc, qa_on, random_answer, random_logits, ref_anls, ref_f1, ref_rouge_l};

type Outcome = Result<String, String>;
type Check = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn viterbi_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for s in Scheme::ALL {
        for _ in 0..1000 {
            let n = rng.gen_range(1..=8);
            let logits = random_logits(&mut rng, n, s.n_labels());
            let v = viterbi(&logits, &s.table()).map_err(|e| e.to_string())?;
            let b = brute_force_decode(&logits, s).map_err(|e| e.to_string())?;
            let diff = (v.score - b.score).abs();
            worst = worst.max(diff);
            ensure(diff <= 1e-9, || format!("{s}: viterbi {} vs brute force {}", v.score, b.score))?;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("3000 windows, max |diff| {worst:.1e}, {elapsed:.2?}"))
}

fn round_trip() -> Outcome {
    let mut checked = 0;
    for s in Scheme::ALL {
        let min_width = if s == Scheme::Se { 2 } else { 1 };
        for n in 1..=12 {
            for spans in all_span_sets(n, min_width) {
                let labels = s.encode(n, &spans);
                ensure(s.table().is_valid(&labels), || format!("{s}: invalid encoding of {spans:?}"))?;
                let back = extract_spans(&labels, s);
                ensure(back == spans, || format!("{s}: {spans:?} -> {back:?}"))?;
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} span sets"))
}

fn window_coverage() -> Outcome {
    let n = 1000;
    let doc = numbered_doc("d", n);
    let prompt = (0..9).map(|i| format!("p{i}")).collect::<Vec<_>>().join(" ");
    let qa = qa_on(&doc, "q", &prompt, &[Interval::new(490, 495)]);
    let cfg = WindowConfig {
        max_seq: 512,
        stride: 128,
    };
    let windows = build_windows(&doc, &qa, &WhitespaceTokenizer, None, cfg).map_err(|e| e.to_string())?;
    ensure(windows.len() == 8, || format!("{} windows", windows.len()))?;
    let budget = context_budget(9, 512).map_err(|e| e.to_string())?;
    let mut covered = vec![false; n];
    for w in &windows {
        ensure(w.tokens.len() <= 512, || format!("window {} has {} tokens", w.window_index, w.tokens.len()))?;
        covered[w.context_start..w.context_start + w.context_len].fill(true);
    }
    ensure(covered.iter().all(|&c| c), || "uncovered context tokens".into())?;
    // Nominal ranges [start, start + B) overlap by B - stride; a window cut
    // short by the end of the context overlaps only as far as it reaches.
    let mut overlaps = Vec::new();
    for pair in windows.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let nominal = (a.context_start + budget).saturating_sub(b.context_start);
        ensure(nominal == budget - 128, || format!("nominal overlap {nominal}"))?;
        let actual = (a.context_start + a.context_len).min(b.context_start + b.context_len) - b.context_start;
        ensure(actual == nominal.min(n - b.context_start), || format!("window {} overlap {actual}", b.window_index))?;
        overlaps.push(actual);
    }
    Ok(format!("8 windows, B = {budget}, overlaps {overlaps:?} (B - 128 = {})", budget - 128))
}

fn zero_noise_pipeline() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let summary = run_pipeline(&PipelineOptions::new(dir.path())).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let em = summary.fused.aggregate(Metric::Em).unwrap_or(0.0);
    let an = summary.fused.aggregate(Metric::Anls).unwrap_or(0.0);
    ensure(summary.n_docs == 500, || format!("{} documents", summary.n_docs))?;
    ensure(em == 1.0 && an == 1.0, || format!("EM {em}, ANLS {an}"))?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("{} questions, EM {em}, ANLS {an}, {elapsed:.2?}", summary.n_questions))
}

fn fusion_direction() -> Outcome {
    let corpus = make_synthetic_corpus(400, 21);
    let run = || -> docqa::Result<_> {
        let (weak_docs, weak_qa) = gen_weak(&corpus.records, &corpus.articles)?;
        let (docs, mut qa) = fill_documents(&weak_docs, &weak_qa, &corpus.templates)?;
        qa.truncate(1000);
        let windows = build_all_windows(&docs, &qa, WindowConfig::default())?;
        let logits = oracle_logits(&windows, &NoisePlan::RotatingHead { seed: 21 })?;
        let qa_docs: HashMap<String, String> = qa.iter().map(|q| (q.qa_id.clone(), q.doc_id.clone())).collect();
        let preds = decode_all(&windows, &logits, &docs, &qa_docs, &DecodeOptions::default())?;
        Ok((docs, qa, qa_docs, preds))
    };
    let (docs, qa, qa_docs, preds) = run().map_err(|e| e.to_string())?;
    ensure(qa.len() == 1000, || format!("only {} questions", qa.len()))?;
    let golds = gold_strings(&qa);
    let index = docqa::doc::index_documents(&docs);
    let em_of = |answers: HashMap<String, String>| evaluate(&answers, &golds, &[Metric::Em]).aggregate(Metric::Em).unwrap_or(0.0);
    let fused = em_of(preds.iter().map(|p| (p.qa_id.clone(), p.text())).collect());
    let mut singles = Vec::new();
    for s in Scheme::ALL {
        let answers = preds
            .iter()
            .map(|p| {
                let doc = index[qa_docs[&p.qa_id].as_str()];
                let text = select_answer(p.spans.get(s))
                    .map(|d| AnswerSpan::from_tokens(doc, d.page, d.token_range, d.score).map(|a| a.text))
                    .transpose()
                    .map_err(|e| e.to_string())?
                    .unwrap_or_default();
                Ok((p.qa_id.clone(), text))
            })
            .collect::<Result<HashMap<_, _>, String>>()?;
        singles.push((s, em_of(answers)));
    }
    let worst = singles.iter().map(|(_, e)| *e).fold(f64::INFINITY, f64::min);
    for (s, e) in &singles {
        ensure(fused >= *e, || format!("fused {fused} < {s} {e}"))?;
    }
    ensure(fused > worst, || format!("fused {fused} not above worst {worst}"))?;
    let detail: Vec<String> = singles.iter().map(|(s, e)| format!("{s} {e:.3}")).collect();
    Ok(format!("fused EM {fused:.3} vs {}", detail.join(", ")))
}

fn perturbation_distribution() -> Outcome {
    let doc = numbered_doc("d", 60);
    let page = &doc.pages[0];
    let gold = AnswerSpan::from_tokens(&doc, 0, Interval::new(20, 23), 0.0).map_err(|e| e.to_string())?;
    let other = AnswerSpan::from_tokens(&doc, 0, Interval::new(40, 42), 0.0).map_err(|e| e.to_string())?;
    let cfg = PerturbationConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = 100_000;
    let mut counts: HashMap<PerturbMode, usize> = HashMap::new();
    for _ in 0..n {
        let (_, mode) = perturb_span(&gold, page, std::slice::from_ref(&other), &cfg, &mut rng).map_err(|e| e.to_string())?;
        *counts.entry(mode).or_default() += 1;
    }
    let mut detail = Vec::new();
    for (mode, p) in [
        (PerturbMode::Keep, 0.80),
        (PerturbMode::Shift, 0.16),
        (PerturbMode::Segment, 0.02),
        (PerturbMode::Entity, 0.02),
    ] {
        let f = counts.get(&mode).copied().unwrap_or(0) as f64 / n as f64;
        ensure((f - p).abs() <= 0.005, || format!("{mode:?} frequency {f} vs {p}"))?;
        detail.push(format!("{mode:?} {f:.4}"));
    }
    Ok(detail.join(", "))
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let p = random_answer(&mut rng);
        let g = random_answer(&mut rng);
        let gs = vec![g.clone()];
        for (name, got, want) in [
            ("anls", anls(&p, &gs, ANLS_TAU), ref_anls(&p, &g)),
            ("token_f1", token_f1(&p, &gs), ref_f1(&p, &g)),
            ("rouge_l", rouge_l(&p, &gs), ref_rouge_l(&p, &g)),
        ] {
            ensure((got - want).abs() <= 1e-9, || format!("{name}({p:?}, {g:?}) = {got}, reference {want}"))?;
        }
    }
    let g = |s: &str| vec![s.to_string()];
    let worked = [
        anls("helo", &g("hello"), ANLS_TAU),
        token_f1("a b c", &g("a b")),
        rouge_l("the cat sat", &g("the cat")),
    ];
    ensure(worked.iter().all(|v| (v - 0.8).abs() < 1e-12), || format!("worked examples {worked:?}"))?;
    Ok(format!("1000 pairs within 1e-9, worked examples {worked:?}"))
}

fn weak_supervision_recall() -> Outcome {
    let corpus = make_synthetic_corpus(500, 8);
    let mut by_entity: HashMap<&str, Vec<&docqa::oracle::PlantedValue>> = HashMap::new();
    for p in &corpus.planted {
        by_entity.entry(p.entity_id.as_str()).or_default().push(p);
    }
    let mut hits = 0;
    for (record, article) in corpus.records.iter().zip(&corpus.articles) {
        let matches = match_record(record, article);
        for p in by_entity.get(record.entity_id.as_str()).into_iter().flatten() {
            let m = matches
                .iter()
                .find(|m| m.prompt == p.key)
                .ok_or_else(|| format!("{}: {} not matched", p.entity_id, p.key))?;
            let want = Interval::new(p.offset, p.offset + p.value.len());
            ensure(m.occurrences == [want], || format!("{}: {:?} vs planted {want:?}", p.entity_id, m.occurrences))?;
            hits += 1;
        }
        // Every emitted pair must also align to document words.
        generate(record, article).map_err(|e| e.to_string())?;
    }
    Ok(format!("{hits}/{} planted values matched at their offsets", corpus.planted.len()))
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    for dir in [&a, &b] {
        let mut opts = PipelineOptions::new(dir.path());
        opts.seed = 9;
        opts.n_docs = 200;
        opts.write_images = true;
        run_pipeline(&opts).map_err(|e| e.to_string())?;
    }
    let mut compared = 0;
    let mut names: Vec<String> = PIPELINE_FILES.iter().map(|s| s.to_string()).collect();
    let mut images: Vec<String> = std::fs::read_dir(a.path().join("images"))
        .map_err(|e| e.to_string())?
        .map(|e| format!("images/{}", e.unwrap().file_name().to_string_lossy()))
        .collect();
    images.sort();
    names.extend(images);
    for name in &names {
        let x = std::fs::read(a.path().join(name)).map_err(|e| format!("{name}: {e}"))?;
        let y = std::fs::read(b.path().join(name)).map_err(|e| format!("{name}: {e}"))?;
        ensure(x == y, || format!("{name} differs"))?;
        compared += 1;
    }
    Ok(format!("{compared} files byte-identical"))
}

fn main() {
    let criteria: [Check; 9] = [
        ("viterbi matches brute force", viterbi_equivalence),
        ("encode/decode round trip", round_trip),
        ("window coverage", window_coverage),
        ("zero-noise end to end", zero_noise_pipeline),
        ("fusion direction", fusion_direction),
        ("perturbation distribution", perturbation_distribution),
        ("metric oracles", metric_oracles),
        ("weak supervision recall", weak_supervision_recall),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {} {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
