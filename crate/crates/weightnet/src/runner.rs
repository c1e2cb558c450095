//! JSON run configurations and the implementations behind the CLI
//! subcommands. Configs are schema-checked strictly: unknown keys are
//! rejected so a typoed hyperparameter can never pass silently.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis;
use crate::complexity::{self, ComplexityReport, FlopsConvention};
use crate::data::{load_idx, synth_dataset, Dataset, SynthKind};
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::train::{self, TrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    /// Deterministic generated data; train and eval splits draw from the
    /// run seed and run seed + 1.
    Synthetic {
        task: SynthKind,
        train_samples: usize,
        eval_samples: usize,
    },
    /// IDX image/label file pairs.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        eval_images: PathBuf,
        eval_labels: PathBuf,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub out_dir: PathBuf,
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn load_datasets(&self) -> Result<(Dataset, Dataset)> {
        match &self.data {
            DataConfig::Synthetic {
                task,
                train_samples,
                eval_samples,
            } => {
                let train = synth_dataset(*task, *train_samples, self.train.seed)?;
                let eval = synth_dataset(*task, *eval_samples, self.train.seed + 1)?;
                Ok((train, eval))
            }
            DataConfig::Idx {
                train_images,
                train_labels,
                eval_images,
                eval_labels,
            } => Ok((
                load_idx(train_images, train_labels)?,
                load_idx(eval_images, eval_labels)?,
            )),
        }
    }
}

pub struct TrainArtifacts {
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub final_eval: f64,
}

/// Train per config: writes `metrics.jsonl` (one object per epoch) and
/// `checkpoint.wnck` under the output directory.
pub fn cmd_train(cfg: &RunConfig, seed_override: Option<u64>) -> Result<TrainArtifacts> {
    let mut train_cfg = cfg.train.clone();
    if let Some(seed) = seed_override {
        train_cfg.seed = seed;
    }
    let effective = RunConfig {
        train: train_cfg.clone(),
        ..cfg.clone()
    };
    let (train_data, eval_data) = effective.load_datasets()?;
    let mut model = Model::<f32>::build(&cfg.model)?;
    model.init_params(train_cfg.seed);
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Error::io(cfg.out_dir.display().to_string(), e))?;
    let metrics_path = cfg.out_dir.join("metrics.jsonl");
    let mut metrics_file = std::fs::File::create(&metrics_path)
        .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
    let metrics = train::train(&mut model, &train_data, &eval_data, &train_cfg, |m| {
        let line = serde_json::to_string(m).expect("metrics serialize");
        let _ = writeln!(metrics_file, "{line}");
    })?;
    let checkpoint_path = cfg.out_dir.join("checkpoint.wnck");
    train::save_checkpoint(&model, &checkpoint_path)?;
    Ok(TrainArtifacts {
        metrics_path,
        checkpoint_path,
        final_eval: metrics.last().map(|m| m.eval_top1).unwrap_or(0.0),
    })
}

/// Top-1 accuracy of a checkpoint on the config's eval split.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<f64> {
    let (_, eval_data) = cfg.load_datasets()?;
    let mut model = Model::<f32>::build(&cfg.model)?;
    train::load_checkpoint(&mut model, checkpoint)?;
    train::evaluate(&model, &eval_data, cfg.train.batch_size)
}

/// Per-layer parameter/MAC report for the config's model and input
/// geometry; optionally written as CSV.
pub fn cmd_complexity(
    cfg: &RunConfig,
    convention: FlopsConvention,
    out_csv: Option<&Path>,
) -> Result<ComplexityReport> {
    let (h, w) = match &cfg.data {
        DataConfig::Synthetic { .. } => (crate::data::IMAGE_SIDE, crate::data::IMAGE_SIDE),
        DataConfig::Idx {
            train_images,
            train_labels,
            ..
        } => {
            let d = load_idx(train_images, train_labels)?;
            (d.height, d.width)
        }
    };
    let model = Model::<f32>::build(&cfg.model)?;
    let report = complexity::report(&model, h, w)?;
    if let Some(path) = out_csv {
        report.write_csv(path, convention)?;
    }
    Ok(report)
}

pub struct AnalyzeArtifacts {
    pub wnk_paths: Vec<PathBuf>,
    pub pgm_paths: Vec<PathBuf>,
    pub projection_csv: PathBuf,
    pub similarity_csv: PathBuf,
}

/// How many eval samples the analyze command extracts kernels for.
pub const ANALYZE_SAMPLES: usize = 20;
/// How many per-sample similarity heatmaps it renders.
pub const ANALYZE_HEATMAPS: usize = 5;

/// Extract per-sample kernels from one dynamic layer, dump them with a
/// class sidecar, render similarity heatmaps, and write the 2-D projection.
pub fn cmd_analyze(
    cfg: &RunConfig,
    checkpoint: &Path,
    layer: &str,
    out_dir: &Path,
) -> Result<AnalyzeArtifacts> {
    let (_, eval_data) = cfg.load_datasets()?;
    let mut model = Model::<f32>::build(&cfg.model)?;
    train::load_checkpoint(&mut model, checkpoint)?;
    let samples = ANALYZE_SAMPLES.min(eval_data.len());
    let (kernels, labels) = analysis::extract_kernels(&model, &eval_data, layer, samples)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    // Per-sample kernel dumps plus the index,class sidecar.
    let mut wnk_paths = Vec::new();
    let mut sidecar = String::from("index,class\n");
    let mut flat_rows: Vec<Vec<f64>> = Vec::new();
    for b in 0..kernels.batch() {
        let sample = kernels.sample(b)?;
        let shape = sample.shape().to_vec();
        let one = crate::dynconv::GeneratedKernel::new(
            sample.reshape(vec![1, shape[0], shape[1], shape[2], shape[3]])?,
            crate::dynconv::KernelProvenance {
                operator: kernels.provenance.operator.clone(),
                batch_id: kernels.provenance.batch_id,
            },
        )?;
        let path = out_dir.join(format!("kernel_{b:04}.wnk"));
        one.write_wnk(&path)?;
        wnk_paths.push(path);
        sidecar.push_str(&format!("{b},{}\n", labels[b]));
        flat_rows.push(sample.to_vec().iter().map(|&v| v as f64).collect());
    }
    let sidecar_path = out_dir.join("kernels.csv");
    std::fs::write(&sidecar_path, sidecar)
        .map_err(|e| Error::io(sidecar_path.display().to_string(), e))?;

    // Similarity matrices: heatmaps for the first few samples, the scalar
    // summary for all of them.
    let mut pgm_paths = Vec::new();
    let mut similarity = String::from("sample,mean_offdiag_abs\n");
    for b in 0..kernels.batch() {
        let sample = kernels.sample(b)?;
        let sim = analysis::cosine_similarity_matrix(&sample, layer, b.to_string())?;
        similarity.push_str(&format!("{b},{}\n", analysis::mean_offdiag(&sim)));
        if b < ANALYZE_HEATMAPS {
            let path = out_dir.join(format!("sim_sample_{b}.pgm"));
            analysis::heatmap_emit(&sim, &path)?;
            pgm_paths.push(path);
        }
    }
    let similarity_csv = out_dir.join("similarity.csv");
    std::fs::write(&similarity_csv, similarity)
        .map_err(|e| Error::io(similarity_csv.display().to_string(), e))?;

    // 2-D projection of the per-sample kernels.
    let points = analysis::project_weights_2d(&flat_rows)?;
    let mut proj = String::from("index,x,y,class\n");
    for (i, (x, y)) in points.iter().enumerate() {
        proj.push_str(&format!("{i},{x},{y},{}\n", labels[i]));
    }
    let projection_csv = out_dir.join("projection.csv");
    std::fs::write(&projection_csv, proj)
        .map_err(|e| Error::io(projection_csv.display().to_string(), e))?;

    Ok(AnalyzeArtifacts {
        wnk_paths,
        pgm_paths,
        projection_csv,
        similarity_csv,
    })
}

/// Exit-code contract shared by the CLI: misconfiguration and I/O map to 2,
/// numeric aborts to 3.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::NonFinite { .. } => 3,
        _ => 2,
    }
}
