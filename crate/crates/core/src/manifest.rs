//! Multi-stage training curricula: ordered stages, each a weighted mixture of
//! datasets, expanded into seeded, shuffled listings.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ensemble::{stable_hash, EnsembleConfig, PerturbationConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub path: PathBuf,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub datasets: Vec<DatasetRef>,
    /// Metadata only; nothing here trains.
    #[serde(default)]
    pub epochs: u32,
    #[serde(default)]
    pub notes: String,
    /// Free-form recipe metadata (learning rate, batch size, warmup...).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub hyperparameters: BTreeMap<String, serde_json::Value>,
    /// Listing length; defaults to the total line count of the datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stages: Vec<Stage>,
}

impl StageManifest {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::field("stages", "at least one stage is required"));
        }
        for s in &self.stages {
            if s.datasets.is_empty() {
                return Err(Error::field(format!("stages.{}", s.name), "no datasets"));
            }
            if s.datasets.iter().any(|d| !d.weight.is_finite() || d.weight < 0.0) {
                return Err(Error::field(format!("stages.{}", s.name), "weights must be non-negative"));
            }
            let sum: f64 = s.datasets.iter().map(|d| d.weight).sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::field(format!("stages.{}", s.name), format!("weights sum to {sum}, not 1")));
            }
        }
        Ok(())
    }
}

/// The single JSON config file accepted by the CLI. Every section is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub perturbation: Option<PerturbationConfig>,
    pub ensemble: Option<EnsembleConfig>,
    pub stages: Option<Vec<Stage>>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            line: source.line(),
            source,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub dataset: PathBuf,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageListing {
    pub name: String,
    pub epochs: u32,
    pub notes: String,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub hyperparameters: BTreeMap<String, serde_json::Value>,
    /// Number of entries drawn from each dataset, in declaration order.
    pub counts: Vec<usize>,
    pub entries: Vec<Entry>,
}

fn count_lines(path: &Path) -> Result<usize> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut n = 0;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        n += usize::from(!line.trim().is_empty());
    }
    Ok(n)
}

/// Largest-remainder apportionment of `total` by `weights`.
pub fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for i in order.into_iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

/// Expands every stage into a shuffled mixture. Each dataset contributes
/// passes over a seeded permutation of its non-blank lines.
pub fn expand(manifest: &StageManifest, seed: u64) -> Result<Vec<StageListing>> {
    manifest.validate()?;
    let mut out = Vec::with_capacity(manifest.stages.len());
    for stage in &manifest.stages {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stable_hash(&stage.name));
        let lines: Vec<usize> = stage.datasets.iter().map(|d| count_lines(&d.path)).collect::<Result<_>>()?;
        let total = stage.size.unwrap_or_else(|| lines.iter().sum());
        let weights: Vec<f64> = stage.datasets.iter().map(|d| d.weight).collect();
        let counts = apportion(total, &weights);
        let mut entries = Vec::with_capacity(total);
        for ((d, &n_lines), &count) in stage.datasets.iter().zip(&lines).zip(&counts) {
            if count > 0 && n_lines == 0 {
                return Err(Error::field(d.path.display().to_string(), "dataset is empty"));
            }
            let mut drawn = 0;
            while drawn < count {
                let mut perm: Vec<usize> = (0..n_lines).collect();
                perm.shuffle(&mut rng);
                for line in perm.into_iter().take(count - drawn) {
                    entries.push(Entry {
                        dataset: d.path.clone(),
                        line,
                    });
                    drawn += 1;
                }
            }
        }
        entries.shuffle(&mut rng);
        out.push(StageListing {
            name: stage.name.clone(),
            epochs: stage.epochs,
            notes: stage.notes.clone(),
            hyperparameters: stage.hyperparameters.clone(),
            counts,
            entries,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn apportion_sums_to_total() {
        assert_eq!(apportion(10, &[0.5, 0.5]), vec![5, 5]);
        assert_eq!(apportion(10, &[1.0 / 3.0; 3]).iter().sum::<usize>(), 10);
        assert_eq!(apportion(7, &[0.7, 0.2, 0.1]), vec![5, 1, 1]);
    }

    #[test]
    fn rejects_bad_weights() {
        let m = StageManifest {
            stages: vec![Stage {
                name: "s".into(),
                datasets: vec![DatasetRef {
                    path: "x".into(),
                    weight: 0.4,
                }],
                epochs: 1,
                notes: String::new(),
                hyperparameters: BTreeMap::new(),
                size: None,
            }],
        };
        assert!(m.validate().is_err());
        assert!(StageManifest { stages: vec![] }.validate().is_err());
    }

    #[test]
    fn expands_three_stages_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut paths = Vec::new();
        for (name, n) in [("a", 4), ("b", 6), ("c", 3)] {
            let p = dir.path().join(format!("{name}.jsonl"));
            let mut f = File::create(&p).unwrap();
            for i in 0..n {
                writeln!(f, "{{\"i\":{i}}}").unwrap();
            }
            paths.push(p);
        }
        let stage = |name: &str, ds: Vec<(usize, f64)>| Stage {
            name: name.into(),
            datasets: ds
                .into_iter()
                .map(|(i, w)| DatasetRef {
                    path: paths[i].clone(),
                    weight: w,
                })
                .collect(),
            epochs: 5,
            notes: String::new(),
            hyperparameters: BTreeMap::new(),
            size: None,
        };
        let m = StageManifest {
            stages: vec![
                stage("weak", vec![(0, 1.0)]),
                stage("open", vec![(0, 0.25), (1, 0.75)]),
                stage("vertical", vec![(2, 1.0)]),
            ],
        };
        let out = expand(&m, 0).unwrap();
        let names: Vec<&str> = out.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["weak", "open", "vertical"]);
        assert_eq!(out[1].counts, vec![3, 7]);
        assert_eq!(out[1].entries.len(), 10);
        assert_eq!(expand(&m, 0).unwrap(), out);
        // Every line of a fully drawn dataset appears once.
        let mut lines: Vec<usize> = out[0].entries.iter().map(|e| e.line).collect();
        lines.sort();
        assert_eq!(lines, vec![0, 1, 2, 3]);
    }
}
