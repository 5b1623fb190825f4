//! Experiment plumbing behind the `mafnet` binary: config loading, dataset
//! splits, training, evaluation, ablation grids and attention export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mafnet::checkpoint::{load_checkpoint, save_checkpoint};
use mafnet::data::{
    generate_synthetic, load_dataset, save_dataset, stratified_split, Dataset, SyntheticSpec,
};
use mafnet::gradsuite::{run_suite, SuiteReport};
use mafnet::model::{AttentionKind, FilmPlacement, FusionKind, MafConfig, MafNet, Modalities};
use mafnet::training::{evaluate, fit, TrainConfig, TrainReport};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] mafnet::Error),
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl CliError {
    /// 2 for bad configuration or input data, 3 for numeric failures at
    /// run time, 1 for a failed gradient check.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(mafnet::Error::Numeric { .. }) => 3,
            CliError::GradCheck(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn default_test_fraction() -> f64 {
    0.15
}

/// Everything one experiment needs. Model and training settings are nested
/// under `model` and `train` with the field names of their config types.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: MafConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Dataset file in the MAFF format.
    pub dataset: PathBuf,
    /// Separate test set; when absent the test split is carved from `dataset`.
    #[serde(default)]
    pub test_dataset: Option<PathBuf>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.test_dataset.is_none() && self.test_fraction <= 0.0 {
            return Err(CliError::Config(
                "test_fraction must be positive when no test_dataset is given".into(),
            ));
        }
        let held_out = self.train.validation_fraction + self.test_fraction_used();
        if !(0.0..1.0).contains(&self.test_fraction) || held_out >= 1.0 {
            return Err(CliError::Config(format!(
                "test_fraction {} with validation_fraction {} leaves no training data",
                self.test_fraction, self.train.validation_fraction
            )));
        }
        for p in std::iter::once(&self.dataset).chain(&self.test_dataset) {
            if !p.is_file() {
                return Err(CliError::Config(format!(
                    "dataset {} does not exist",
                    p.display()
                )));
            }
        }
        if self.output_dir.exists() && !self.output_dir.is_dir() {
            return Err(CliError::Config(format!(
                "output_dir {} is not a directory",
                self.output_dir.display()
            )));
        }
        Ok(())
    }

    fn test_fraction_used(&self) -> f64 {
        if self.test_dataset.is_some() {
            0.0
        } else {
            self.test_fraction
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read(path)?).map_err(|source| CliError::Json {
        path: path.to_owned(),
        source,
    })
}

/// Reads and validates an experiment config, including its paths.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = parse_json(path)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Writes a synthetic dataset; `spec` defaults to the built-in four-class
/// planted-cell spec.
pub fn cmd_gen(spec: Option<&Path>, out: &Path) -> Result<Dataset> {
    let spec: SyntheticSpec = match spec {
        Some(p) => parse_json(p)?,
        None => SyntheticSpec::default(),
    };
    let ds = generate_synthetic(&spec)?;
    save_dataset(&ds, out)?;
    Ok(ds)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn get(&self, s: Split) -> &Dataset {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn check_compatible(ds: &Dataset, model: &MafConfig, path: &Path) -> Result<()> {
    let h = &ds.header;
    let problem = if h.shapes != [model.visual_shape, model.audio_shape] {
        Some(format!(
            "map shapes {:?} differ from model visual_shape/audio_shape {:?}",
            h.shapes,
            [model.visual_shape, model.audio_shape]
        ))
    } else if h.t_max > model.max_clips {
        Some(format!(
            "T_max {} exceeds model max_clips {}",
            h.t_max, model.max_clips
        ))
    } else if h.num_classes != model.num_classes {
        Some(format!(
            "{} classes but model num_classes is {}",
            h.num_classes, model.num_classes
        ))
    } else {
        None
    };
    match problem {
        Some(p) => Err(CliError::Config(format!("{}: {p}", path.display()))),
        None => Ok(()),
    }
}

/// Loads the dataset(s) and applies the seeded stratified split.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Splits> {
    let ds = load_dataset(&cfg.dataset)?;
    check_compatible(&ds, &cfg.model, &cfg.dataset)?;
    let vf = cfg.train.validation_fraction;
    let tf = cfg.test_fraction_used();
    let (tr, va, te) = stratified_split(&ds.labels(), [1.0 - vf - tf, vf, tf], cfg.train.seed)?;
    let test = match &cfg.test_dataset {
        Some(p) => {
            let t = load_dataset(p)?;
            check_compatible(&t, &cfg.model, p)?;
            t
        }
        None => ds.subset(&te),
    };
    Ok(Splits {
        train: ds.subset(&tr),
        val: ds.subset(&va),
        test,
    })
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub test_accuracy: f64,
    pub report_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let splits = prepare(cfg)?;
    fs::create_dir_all(&cfg.output_dir).map_err(|source| CliError::Io {
        path: cfg.output_dir.clone(),
        source,
    })?;
    let mut net = MafNet::new(cfg.model.clone())?;
    let report = fit(&mut net, &splits.train, &splits.val, &cfg.train)?;
    let test_accuracy = evaluate(&net, &splits.test)?;
    let report_path = cfg.output_dir.join("report.csv");
    let checkpoint_path = cfg.output_dir.join("checkpoint.mafc");
    write(&report_path, report.to_csv())?;
    save_checkpoint(&net, &checkpoint_path)?;
    Ok(TrainOutcome {
        report,
        test_accuracy,
        report_path,
        checkpoint_path,
    })
}

fn restore(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<MafNet> {
    let mut net = MafNet::new(cfg.model.clone())?;
    if !checkpoint.is_file() {
        return Err(CliError::Config(format!(
            "checkpoint {} does not exist",
            checkpoint.display()
        )));
    }
    load_checkpoint(&mut net, checkpoint)?;
    Ok(net)
}

pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, split: Split) -> Result<f64> {
    let net = restore(cfg, checkpoint)?;
    let splits = prepare(cfg)?;
    Ok(evaluate(&net, splits.get(split))?)
}

/// Runs the gradient suite. Failing cases are reported through
/// [`gradcheck_verdict`], not as an error here.
pub fn cmd_gradcheck(op_seeds: u64) -> Result<SuiteReport> {
    Ok(run_suite(op_seeds)?)
}

pub fn gradcheck_verdict(report: &SuiteReport) -> Result<()> {
    if report.passed() {
        return Ok(());
    }
    let failed: Vec<&str> = report
        .cases
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name.as_str())
        .collect();
    Err(CliError::GradCheck(failed.join(", ")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Axis {
    Attention,
    Fusion,
    Film,
    Droprate,
}

/// One cell of an ablation grid: a label and the configs it trains.
#[derive(Clone, Debug)]
pub struct Variant {
    pub name: String,
    pub model: MafConfig,
    pub train: TrainConfig,
}

/// Variants along `axis`. The attention and fusion grids run without
/// residual/FiLM blocks so they isolate the axis under study; the FiLM and
/// drop-rate grids start from the configured model.
pub fn variants(base: &ExperimentConfig, axis: Axis) -> Vec<Variant> {
    let plain = MafConfig {
        film: FilmPlacement::None,
        ..base.model.clone()
    };
    let v = |name: &str, model: MafConfig, train: TrainConfig| Variant {
        name: name.to_string(),
        model,
        train,
    };
    match axis {
        Axis::Attention => AttentionKind::ALL
            .iter()
            .map(|&a| {
                v(
                    a.name(),
                    MafConfig {
                        attention: a,
                        ..plain.clone()
                    },
                    base.train.clone(),
                )
            })
            .collect(),
        Axis::Fusion => {
            let unimodal_attention = match plain.attention {
                AttentionKind::None => AttentionKind::None,
                _ => AttentionKind::Temporal,
            };
            let mut out: Vec<Variant> =
                [(Modalities::Visual, "visual"), (Modalities::Audio, "audio")]
                    .iter()
                    .map(|&(m, name)| {
                        let model = MafConfig {
                            modalities: m,
                            fusion: FusionKind::Concat,
                            attention: unimodal_attention,
                            ..plain.clone()
                        };
                        v(name, model, base.train.clone())
                    })
                    .collect();
            out.extend(FusionKind::ALL.iter().map(|&f| {
                v(
                    f.name(),
                    MafConfig {
                        fusion: f,
                        ..plain.clone()
                    },
                    base.train.clone(),
                )
            }));
            out
        }
        Axis::Film => FilmPlacement::ALL
            .iter()
            .map(|&f| {
                v(
                    f.name(),
                    MafConfig {
                        film: f,
                        ..base.model.clone()
                    },
                    base.train.clone(),
                )
            })
            .collect(),
        Axis::Droprate => (0..=10)
            .map(|i| {
                let p = i as f64 / 10.0;
                let train = TrainConfig {
                    drop_rate: p,
                    ..base.train.clone()
                };
                v(&format!("{p:.1}"), base.model.clone(), train)
            })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub test_accuracy: f64,
    pub best_val_accuracy: f64,
    pub epochs: usize,
}

/// Trains every variant (in parallel; cell `i` uses seed `seed + i` for both
/// the model and the training streams) and reports test accuracy.
pub fn cmd_ablate(cfg: &ExperimentConfig, axis: Axis) -> Result<Vec<AblationRow>> {
    let splits = prepare(cfg)?;
    let cells = variants(cfg, axis);
    for c in &cells {
        c.model.validate()?;
        c.train.validate()?;
    }
    cells
        .into_par_iter()
        .enumerate()
        .map(|(i, mut cell)| {
            cell.model.seed = cfg.model.seed.wrapping_add(i as u64);
            cell.train.seed = cfg.train.seed.wrapping_add(i as u64);
            let mut net = MafNet::new(cell.model)?;
            let report = fit(&mut net, &splits.train, &splits.val, &cell.train)?;
            Ok(AblationRow {
                variant: cell.name,
                test_accuracy: evaluate(&net, &splits.test)?,
                best_val_accuracy: report.best_val_accuracy,
                epochs: report.epochs.len(),
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,test_accuracy,best_val_accuracy,epochs\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            r.variant, r.test_accuracy, r.best_val_accuracy, r.epochs
        );
    }
    s
}

/// Attention scores for record `index` of the configured dataset, as CSV
/// `modality,clip,lambda`.
pub fn cmd_export_attention(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    index: usize,
) -> Result<String> {
    let net = restore(cfg, checkpoint)?;
    let ds = load_dataset(&cfg.dataset)?;
    check_compatible(&ds, &cfg.model, &cfg.dataset)?;
    let record = ds.records.get(index).ok_or_else(|| {
        CliError::Config(format!(
            "record index {index} out of range for {} records",
            ds.len()
        ))
    })?;
    let mut s = String::from("modality,clip,lambda\n");
    for row in net.export_attention(record)? {
        let _ = writeln!(s, "{},{},{}", row.modality.name(), row.clip, row.score);
    }
    Ok(s)
}
