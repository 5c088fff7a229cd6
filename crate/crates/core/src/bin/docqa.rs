use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use docqa::decode::{Scheme, TokenLogits};
use docqa::doc::{index_documents, read_documents, read_qa, Document};
use docqa::ensemble::{
    build_gen_training_set, ensemble_infer, fuse_answers, Candidate, DictionaryGenerator, EchoGenerator,
    GenModel, MAX_SPANS,
};
use docqa::jsonl;
use docqa::layout::LayoutTemplate;
use docqa::manifest::{expand, Config, StageManifest};
use docqa::metrics::Metric;
use docqa::mrc::{MrcWindow, WindowConfig, MAX_SEQ, STRIDE};
use docqa::oracle::{NoiseRegion, NoiseSpec};
use docqa::pipeline::{
    build_all_windows, decode_all, evaluate_predictions, fill_documents, gen_weak, oracle_logits, run_pipeline,
    write_images, DecodeOptions, NoisePlan, PipelineOptions, Prediction,
};
use docqa::weaksup::{SourceArticle, StructuredRecord};

/// Document QA data tooling: weak supervision, layout synthesis, sliding-window
/// MRC features, constrained decoding, ensembling and evaluation.
#[derive(Parser)]
#[command(name = "docqa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Align structured records with articles into plain-text documents and QA pairs.
    GenWeak {
        records: PathBuf,
        articles: PathBuf,
        out_docs: PathBuf,
        out_qa: PathBuf,
    },
    /// Place document words into layout templates and optionally render page images.
    FillLayout {
        docs: PathBuf,
        qa: PathBuf,
        templates: PathBuf,
        out_docs: PathBuf,
        out_qa: PathBuf,
        /// Directory for PGM pages and sidecar JSON.
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Cut every QA pair into sliding MRC windows.
    BuildMrc {
        docs: PathBuf,
        qa: PathBuf,
        out: PathBuf,
        #[arg(long, default_value_t = MAX_SEQ)]
        max_seq: usize,
        #[arg(long, default_value_t = STRIDE)]
        stride: usize,
    },
    /// Emit gold-derived logits for windows, with optional seeded corruption.
    OracleLogits {
        windows: PathBuf,
        out: PathBuf,
        #[command(flatten)]
        noise: NoiseArgs,
    },
    /// Decode logits into answers.
    Decode {
        windows: PathBuf,
        logits: PathBuf,
        out: PathBuf,
        #[arg(long)]
        docs: PathBuf,
        #[arg(long)]
        qa: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "bio,bioes,se")]
        schemes: Vec<Scheme>,
        /// Vote across heads; otherwise the first listed scheme answers.
        #[arg(long)]
        fuse: bool,
    },
    /// Build perturbed training records for the generator.
    GenTrain {
        qa: PathBuf,
        docs: PathBuf,
        out: PathBuf,
        #[arg(long)]
        p_keep: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// JSON config; its `perturbation` section sets defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Combine several prediction files into one.
    Ensemble {
        #[arg(required = true)]
        predictions: Vec<PathBuf>,
        #[arg(long)]
        docs: PathBuf,
        #[arg(long)]
        qa: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        spans: Option<u8>,
        /// `echo` or `dict:<path>` (JSON object of wrong → right substrings).
        #[arg(long, default_value = "echo")]
        gen_stub: String,
        /// Majority vote over answer strings instead of generation.
        #[arg(long)]
        vote: bool,
        /// Source tags (file stems) most trusted first, for vote ties.
        #[arg(long, value_delimiter = ',')]
        priority: Vec<String>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score predictions against gold answers.
    Eval {
        predictions: PathBuf,
        qa: PathBuf,
        out: PathBuf,
        #[arg(long)]
        docs: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "anls,em,f1,rougel")]
        metrics: Vec<Metric>,
        /// Also write per-question scores as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Expand a staged curriculum into shuffled dataset listings.
    StageManifest {
        config: PathBuf,
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Synthetic corpus through every stage, checking zero-noise exactness.
    Pipeline {
        #[arg(long, default_value_t = 500)]
        n_docs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = PipelineNoise::Clean)]
        noise: PipelineNoise,
        #[arg(long)]
        images: bool,
    },
}

#[derive(Args)]
struct NoiseArgs {
    /// Probability that a token's strongest label is replaced.
    #[arg(long, default_value_t = 0.0)]
    label_noise: f64,
    /// Corrupt only this head.
    #[arg(long)]
    corrupt_scheme: Option<Scheme>,
    #[arg(long, value_enum, default_value_t = Region::All)]
    region: Region,
    /// Corrupt one random head per question, fully, inside the gold span.
    #[arg(long, conflicts_with_all = ["label_noise", "corrupt_scheme", "region"])]
    rotating: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Region {
    All,
    Gold,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PipelineNoise {
    Clean,
    Rotating,
}

impl NoiseArgs {
    fn plan(&self) -> NoisePlan {
        if self.rotating {
            return NoisePlan::RotatingHead { seed: self.seed };
        }
        NoisePlan::Uniform(NoiseSpec {
            label_noise: self.label_noise,
            corrupt_scheme: self.corrupt_scheme,
            region: match self.region {
                Region::All => NoiseRegion::All,
                Region::Gold => NoiseRegion::GoldSpans,
            },
            seed: self.seed,
        })
    }
}

fn load_docs(path: &Path) -> Result<Vec<Document>> {
    read_documents(path).with_context(|| format!("reading {}", path.display()))
}

fn read<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    jsonl::read_all(path).with_context(|| format!("reading {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    jsonl::write_atomic(path, |out| {
        serde_json::to_writer_pretty(&mut *out, value)?;
        out.write_all(b"\n")
    })?;
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    path.map_or_else(|| Ok(Config::default()), |p| Config::load(p).with_context(|| format!("reading {}", p.display())))
}

fn source_tag(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn gen_stub(spec: &str) -> Result<Box<dyn GenModel>> {
    if spec == "echo" {
        return Ok(Box::new(EchoGenerator));
    }
    let path = spec
        .strip_prefix("dict:")
        .ok_or_else(|| anyhow!("--gen-stub must be `echo` or `dict:<path>`, got {spec}"))?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
    let corrections: BTreeMap<String, String> = serde_json::from_str(&text).with_context(|| format!("parsing {path}"))?;
    Ok(Box::new(DictionaryGenerator { corrections }))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenWeak {
            records,
            articles,
            out_docs,
            out_qa,
        } => {
            let records: Vec<StructuredRecord> = read(&records)?;
            let articles: Vec<SourceArticle> = read(&articles)?;
            let (docs, qa) = gen_weak(&records, &articles)?;
            jsonl::write_all(&out_docs, &docs)?;
            jsonl::write_all(&out_qa, &qa)?;
        }
        Command::FillLayout {
            docs,
            qa,
            templates,
            out_docs,
            out_qa,
            images,
        } => {
            let input = load_docs(&docs)?;
            let pairs = read_qa(&qa, &index_documents(&input)).with_context(|| format!("reading {}", qa.display()))?;
            let templates: Vec<LayoutTemplate> = read(&templates)?;
            for t in &templates {
                t.validate().map_err(|m| anyhow!("template {}: {m}", t.template_id))?;
            }
            let (filled, kept) = fill_documents(&input, &pairs, &templates)?;
            jsonl::write_all(&out_docs, &filled)?;
            jsonl::write_all(&out_qa, &kept)?;
            if let Some(dir) = images {
                write_images(&filled, &dir)?;
            }
        }
        Command::BuildMrc {
            docs,
            qa,
            out,
            max_seq,
            stride,
        } => {
            if stride == 0 {
                bail!("--stride must be positive");
            }
            let docs = load_docs(&docs)?;
            let pairs = read_qa(&qa, &index_documents(&docs)).with_context(|| format!("reading {}", qa.display()))?;
            let windows = build_all_windows(&docs, &pairs, WindowConfig { max_seq, stride })?;
            jsonl::write_all(&out, &windows)?;
        }
        Command::OracleLogits { windows, out, noise } => {
            let windows: Vec<MrcWindow> = read(&windows)?;
            let logits = oracle_logits(&windows, &noise.plan())?;
            info!("oracle-logits: {} windows", logits.len());
            jsonl::write_all(&out, &logits)?;
        }
        Command::Decode {
            windows,
            logits,
            out,
            docs,
            qa,
            schemes,
            fuse,
        } => {
            let windows: Vec<MrcWindow> = read(&windows)?;
            let logits: Vec<TokenLogits> = read(&logits)?;
            for l in &logits {
                l.validate().with_context(|| format!("logits for {} window {}", l.qa_id, l.window_index))?;
            }
            let docs = load_docs(&docs)?;
            let pairs = read_qa(&qa, &index_documents(&docs)).with_context(|| format!("reading {}", qa.display()))?;
            let qa_docs: HashMap<String, String> = pairs.iter().map(|q| (q.qa_id.clone(), q.doc_id.clone())).collect();
            let predictions = decode_all(&windows, &logits, &docs, &qa_docs, &DecodeOptions { schemes, fuse })?;
            info!("decode: {} predictions", predictions.len());
            jsonl::write_all(&out, &predictions)?;
        }
        Command::GenTrain {
            qa,
            docs,
            out,
            p_keep,
            seed,
            config,
        } => {
            let mut cfg = load_config(config.as_deref())?.perturbation.unwrap_or_default();
            if let Some(p) = p_keep {
                cfg.p_keep = p;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let docs = load_docs(&docs)?;
            let index = index_documents(&docs);
            let pairs = read_qa(&qa, &index).with_context(|| format!("reading {}", qa.display()))?;
            let by_id: HashMap<String, &Document> = index.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
            let (records, skipped) = build_gen_training_set(&pairs, &by_id, &cfg)?;
            info!("gen-train: {} records, {skipped} QA pairs without gold skipped", records.len());
            jsonl::write_all(&out, &records)?;
        }
        Command::Ensemble {
            predictions,
            docs,
            qa,
            out,
            spans,
            gen_stub: stub,
            vote,
            priority,
            config,
        } => {
            let ens = load_config(config.as_deref())?.ensemble.unwrap_or_default();
            let priority = if priority.is_empty() { ens.priority } else { priority };
            let max_spans = spans.map_or(ens.max_spans, usize::from).clamp(1, MAX_SPANS);
            let docs = load_docs(&docs)?;
            let index = index_documents(&docs);
            let pairs = read_qa(&qa, &index).with_context(|| format!("reading {}", qa.display()))?;
            let sets: Vec<(String, HashMap<String, Prediction>)> = predictions
                .iter()
                .map(|p| {
                    let preds: Vec<Prediction> = read(p)?;
                    Ok((source_tag(p), preds.into_iter().map(|x| (x.qa_id.clone(), x)).collect()))
                })
                .collect::<Result<_>>()?;
            let generator = gen_stub(&stub)?;
            let mut out_preds = Vec::with_capacity(pairs.len());
            for pair in &pairs {
                let doc = index[pair.doc_id.as_str()];
                let answer = if vote {
                    let candidates: Vec<Candidate> = sets
                        .iter()
                        .filter_map(|(tag, set)| {
                            set.get(&pair.qa_id).map(|p| Candidate {
                                answer: p.text(),
                                score: p.answer.as_ref().map_or(f64::NEG_INFINITY, |a| a.score),
                                source: tag.clone(),
                            })
                        })
                        .collect();
                    fuse_answers(&candidates, &priority).unwrap_or_default()
                } else {
                    let per_model = sets
                        .iter()
                        .filter_map(|(_, set)| set.get(&pair.qa_id))
                        .map(|p| p.candidate_spans(doc))
                        .collect::<docqa::Result<Vec<_>>>()?;
                    let context: Vec<String> = doc.pages.iter().map(|p| p.plain_text()).collect();
                    ensemble_infer(&pair.qa_id, &pair.prompt, &context.join(" "), &per_model, max_spans, generator.as_ref())?
                };
                out_preds.push(Prediction {
                    qa_id: pair.qa_id.clone(),
                    answer: None,
                    answer_text: Some(answer),
                    spans: Default::default(),
                    fused: Vec::new(),
                });
            }
            info!("ensemble: {} questions from {} prediction files", out_preds.len(), sets.len());
            jsonl::write_all(&out, &out_preds)?;
        }
        Command::Eval {
            predictions,
            qa,
            out,
            docs,
            metrics,
            csv,
        } => {
            let preds: Vec<Prediction> = read(&predictions)?;
            let pairs = match docs {
                Some(d) => {
                    let docs = load_docs(&d)?;
                    read_qa(&qa, &index_documents(&docs)).with_context(|| format!("reading {}", qa.display()))?
                }
                None => read(&qa)?,
            };
            let report = evaluate_predictions(&preds, &pairs, &metrics);
            for (m, v) in &report.aggregates {
                info!("eval: {m} = {v:.4}");
            }
            write_json(&out, &report)?;
            if let Some(path) = csv {
                let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                report.write_csv(file)?;
            }
        }
        Command::StageManifest { config, out, seed } => {
            let cfg = load_config(Some(&config))?;
            let mut stages = cfg.stages.ok_or_else(|| anyhow!("{}: no `stages` section", config.display()))?;
            // Dataset paths are relative to the config file.
            let base = config.parent().unwrap_or(Path::new("."));
            for d in stages.iter_mut().flat_map(|s| s.datasets.iter_mut()) {
                if d.path.is_relative() {
                    d.path = base.join(&d.path);
                }
            }
            let listings = expand(&StageManifest { stages }, seed)?;
            info!("stage-manifest: {} stages", listings.len());
            write_json(&out, &serde_json::json!({ "seed": seed, "stages": listings }))?;
        }
        Command::Pipeline {
            n_docs,
            seed,
            out_dir,
            noise,
            images,
        } => {
            let mut opts = PipelineOptions::new(out_dir);
            opts.n_docs = n_docs;
            opts.seed = seed;
            opts.write_images = images;
            if noise == PipelineNoise::Rotating {
                opts.noise = NoisePlan::RotatingHead { seed };
            }
            let summary = run_pipeline(&opts)?;
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            serde_json::to_writer_pretty(&mut lock, &serde_json::json!({
                "n_docs": summary.n_docs,
                "n_questions": summary.n_questions,
                "n_windows": summary.n_windows,
                "single_scheme_em": summary.single_scheme_em,
                "fused": summary.fused.aggregates,
            }))?;
            writeln!(lock)?;
            if noise == PipelineNoise::Clean {
                for m in [Metric::Em, Metric::Anls] {
                    let v = summary.fused.aggregate(m).unwrap_or(0.0);
                    if v != 1.0 {
                        bail!("zero-noise {m} is {v}, expected 1");
                    }
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
