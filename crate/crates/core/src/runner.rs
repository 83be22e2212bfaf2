//! Run configuration and the artifact-producing commands behind the CLI.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::data::{prepare, CoordScaler, FingerprintSet, TrainTest, NUM_WAPS, RSSI_UNDETECTED};
use crate::error::{Error, Result};
use crate::experiments::{
    beta_sweep, fraction_sweep, latent_projection, run_knn, score_vib, Arm, Cell, ExperimentResult,
    Projection, RunRow, SweepSettings, DEFAULT_BETA_GRID, DEFAULT_FRACTION_GRID,
};
use crate::knn::DEFAULT_K_GRID;
use crate::model::{VibConfig, VibModel};
use crate::optim::AdamConfig;
use crate::train::{write_epoch_log, Trainer, TrainOptions, TrainOutcome};

/// File name looked up when the data path is a directory.
pub const TRAINING_FILE: &str = "trainingData.csv";
pub const MODEL_FILE: &str = "model.ckpt";
pub const TRAIN_STATE_FILE: &str = "train_state.ckpt";
pub const EPOCH_LOG_FILE: &str = "epoch_log.csv";
pub const TRAIN_RESULTS_FILE: &str = "train_results.csv";
pub const BETA_SWEEP_FILE: &str = "beta_sweep.csv";
pub const FRACTION_SWEEP_FILE: &str = "fraction_sweep.csv";
pub const KNN_RESULTS_FILE: &str = "knn_results.csv";
pub const PROJECTION_FILE: &str = "latent_projection.csv";

/// Every tunable of a run. Serialized as flat `key = value` TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub train_fraction: f64,

    pub input_dim: usize,
    pub encoder_hidden: usize,
    pub latent_dim: usize,
    pub predictor_hidden: usize,
    pub predictor_layers: usize,
    pub dropout_rate: f64,
    pub beta: f64,
    pub train_mc_samples: usize,
    pub eval_mc_samples: usize,
    pub logvar_min: f64,
    pub logvar_max: f64,

    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,

    pub batch_size: usize,
    pub max_epochs: usize,
    pub max_steps: Option<usize>,
    pub patience: usize,
    pub val_fraction: f64,

    pub betas: Vec<f64>,
    pub fractions: Vec<f64>,
    pub seeds_per_cell: usize,
    pub jobs: usize,
    pub knn_grid: Vec<usize>,
    pub knn_val_fraction: f64,
    pub record_wall_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = VibConfig::default();
        let t = TrainOptions::default();
        Self {
            data_path: None,
            output_dir: PathBuf::from("runs"),
            seed: 0,
            train_fraction: 0.8,
            input_dim: m.input_dim,
            encoder_hidden: m.encoder_hidden,
            latent_dim: m.latent_dim,
            predictor_hidden: m.predictor_hidden,
            predictor_layers: m.predictor_layers,
            dropout_rate: m.dropout_rate,
            beta: m.beta,
            train_mc_samples: m.train_mc_samples,
            eval_mc_samples: m.eval_mc_samples,
            logvar_min: m.logvar_min,
            logvar_max: m.logvar_max,
            learning_rate: t.adam.lr,
            adam_beta1: t.adam.beta1,
            adam_beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            max_steps: t.max_steps,
            patience: t.patience,
            val_fraction: t.val_fraction,
            betas: DEFAULT_BETA_GRID.to_vec(),
            fractions: DEFAULT_FRACTION_GRID.to_vec(),
            seeds_per_cell: 3,
            jobs: 1,
            knn_grid: DEFAULT_K_GRID.to_vec(),
            knn_val_fraction: 0.1,
            record_wall_time: false,
        }
    }
}

/// Command-line values layered over a config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub data_path: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub beta: Option<f64>,
    pub latent_dim: Option<usize>,
    pub max_epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub jobs: Option<usize>,
    pub eval_mc_samples: Option<usize>,
    pub fractions: Option<Vec<f64>>,
    pub betas: Option<Vec<f64>>,
}

impl RunConfig {
    /// Defaults, then `file` if given.
    pub fn load(file: Option<&Path>) -> Result<Self> {
        match file {
            None => Ok(Self::default()),
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                Self::parse(&text).map_err(|e| match e {
                    Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
                    e => e,
                })
            }
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        macro_rules! set {
            ($($field:ident => $target:ident),*) => {
                $(if let Some(v) = &o.$field { self.$target = v.clone(); })*
            };
        }
        set!(
            output_dir => output_dir,
            seed => seed,
            beta => beta,
            latent_dim => latent_dim,
            max_epochs => max_epochs,
            batch_size => batch_size,
            jobs => jobs,
            eval_mc_samples => eval_mc_samples,
            fractions => fractions,
            betas => betas
        );
        if o.data_path.is_some() {
            self.data_path = o.data_path.clone();
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable")
    }

    pub fn model(&self) -> VibConfig {
        VibConfig {
            input_dim: self.input_dim,
            encoder_hidden: self.encoder_hidden,
            latent_dim: self.latent_dim,
            predictor_hidden: self.predictor_hidden,
            predictor_layers: self.predictor_layers,
            dropout_rate: self.dropout_rate,
            beta: self.beta,
            train_mc_samples: self.train_mc_samples,
            eval_mc_samples: self.eval_mc_samples,
            logvar_min: self.logvar_min,
            logvar_max: self.logvar_max,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            max_steps: self.max_steps,
            patience: self.patience,
            val_fraction: self.val_fraction,
            adam: AdamConfig {
                lr: self.learning_rate,
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
            seed: self.seed,
        }
    }

    pub fn sweep_settings(&self) -> SweepSettings {
        SweepSettings {
            model: self.model(),
            train: self.train_options(),
            jobs: self.jobs,
            knn_grid: self.knn_grid.clone(),
            knn_val_fraction: self.knn_val_fraction,
            record_wall_time: self.record_wall_time,
        }
    }

    /// Seeds for each sweep cell, consecutive from the run seed.
    pub fn cell_seeds(&self) -> Vec<u64> {
        (0..self.seeds_per_cell as u64).map(|i| self.seed + i).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train_options().validate()?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must be in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.seeds_per_cell == 0 || self.jobs == 0 {
            return Err(Error::Config("seeds_per_cell and jobs must be >= 1".into()));
        }
        Ok(())
    }

    /// The data file: `data_path` itself, or `trainingData.csv` inside it
    /// when it names a directory.
    pub fn data_file(&self) -> Result<PathBuf> {
        let path = self.data_path.as_ref().ok_or_else(|| {
            Error::Config("no data path; pass --data or set VIB_DATA_DIR".into())
        })?;
        Ok(resolve_data_path(path))
    }

    pub fn out(&self, file: &str) -> PathBuf {
        self.output_dir.join(file)
    }
}

pub fn resolve_data_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(TRAINING_FILE)
    } else {
        path.to_path_buf()
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `<stem>.config.toml` next to the artifacts. With `guard`, an
/// existing snapshot that differs in anything but `jobs` is an error, so a
/// resumed sweep cannot mix configurations.
fn write_snapshot(cfg: &RunConfig, stem: &str, guard: bool) -> Result<()> {
    let path = cfg.out(&format!("{stem}.config.toml"));
    let text = cfg.to_toml();
    if guard && path.exists() {
        let old = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let old = RunConfig::parse(&old)?;
        if (RunConfig { jobs: cfg.jobs, ..old }) != *cfg {
            return Err(Error::Mismatch {
                key: path.display().to_string(),
                expected: "the configuration of the existing results".into(),
                found: "a different configuration; use a fresh output directory".into(),
            });
        }
    }
    write_file(&path, text.as_bytes())
}

fn load_split(cfg: &RunConfig) -> Result<TrainTest> {
    let set = FingerprintSet::load_any(&cfg.data_file()?)?;
    prepare(&set, cfg.train_fraction, cfg.seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestReport {
    pub rows: usize,
    /// WAPs detected in at least one row.
    pub active_waps: usize,
    pub mean_detected_per_row: f64,
    pub strongest_rssi: Option<i32>,
    pub weakest_rssi: Option<i32>,
    pub longitude: (f64, f64),
    pub latitude: (f64, f64),
    pub buildings: Vec<i64>,
    pub floors: Vec<i64>,
}

impl IngestReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "rows: {}", self.rows);
        let _ = writeln!(s, "active WAPs: {} of {NUM_WAPS}", self.active_waps);
        let _ = writeln!(s, "mean detected WAPs per row: {:.2}", self.mean_detected_per_row);
        if let (Some(hi), Some(lo)) = (self.strongest_rssi, self.weakest_rssi) {
            let _ = writeln!(s, "RSSI range: {lo} .. {hi} dBm");
        }
        let _ = writeln!(s, "longitude: {} .. {}", self.longitude.0, self.longitude.1);
        let _ = writeln!(s, "latitude: {} .. {}", self.latitude.0, self.latitude.1);
        let _ = writeln!(s, "buildings: {:?}", self.buildings);
        let _ = write!(s, "floors: {:?}", self.floors);
        s
    }
}

/// Validates a CSV and writes the preprocessed cache.
pub fn ingest(data: &Path, cache_out: &Path) -> Result<IngestReport> {
    let records = crate::data::load_csv(data)?;
    if records.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let mut detected_any = vec![false; NUM_WAPS];
    let mut detected_total = 0usize;
    let (mut strongest, mut weakest) = (None::<i32>, None::<i32>);
    for r in &records {
        for (j, &v) in r.rssi.iter().enumerate() {
            if v != RSSI_UNDETECTED {
                detected_any[j] = true;
                detected_total += 1;
                strongest = Some(strongest.map_or(v, |s| s.max(v)));
                weakest = Some(weakest.map_or(v, |s| s.min(v)));
            }
        }
    }
    let range = |f: fn(&crate::data::RawRecord) -> f64| {
        records
            .iter()
            .map(f)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let mut buildings: Vec<i64> = records.iter().map(|r| r.aux.building).collect();
    buildings.sort_unstable();
    buildings.dedup();
    let mut floors: Vec<i64> = records.iter().map(|r| r.aux.floor).collect();
    floors.sort_unstable();
    floors.dedup();

    let set = FingerprintSet::from_records(&records)?;
    if let Some(dir) = cache_out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_file(cache_out, &set.to_container().to_bytes())?;
    Ok(IngestReport {
        rows: records.len(),
        active_waps: detected_any.iter().filter(|&&d| d).count(),
        mean_detected_per_row: detected_total as f64 / records.len() as f64,
        strongest_rssi: strongest,
        weakest_rssi: weakest,
        longitude: range(|r| r.longitude),
        latitude: range(|r| r.latitude),
        buildings,
        floors,
    })
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub outcome: TrainOutcome,
    pub test_rmse: f64,
    pub checkpoint: PathBuf,
    pub epoch_log: PathBuf,
    pub results: PathBuf,
}

/// Trains on the training split, saving a resumable state after every
/// epoch. With `resume`, continues from an existing state file.
pub fn train_command(cfg: &RunConfig, resume: bool) -> Result<TrainReport> {
    cfg.validate()?;
    ensure_dir(&cfg.output_dir)?;
    write_snapshot(cfg, "train", resume)?;
    let data = load_split(cfg)?;
    let state_path = cfg.out(TRAIN_STATE_FILE);
    let mut trainer = if resume && state_path.exists() {
        let t = Trainer::load_state(&state_path)?;
        if t.model.config != cfg.model() || t.options != cfg.train_options() {
            return Err(Error::Mismatch {
                key: state_path.display().to_string(),
                expected: "state saved with the current configuration".into(),
                found: "a different model or training configuration".into(),
            });
        }
        t
    } else {
        Trainer::new(cfg.model(), cfg.train_options(), data.train.len())?
    };
    while !trainer.is_done() {
        trainer.run_epoch(&data.train.x, &data.train.y, &mut |_| Ok(()))?;
        write_file(&state_path, &trainer.to_container().to_bytes())?;
    }
    let log = cfg.out(EPOCH_LOG_FILE);
    write_epoch_log(&log, trainer.log())?;

    let outcome = trainer.finish();
    let metrics = score_vib(&outcome, &data.test, cfg.seed)?;
    let checkpoint = cfg.out(MODEL_FILE);
    write_file(
        &checkpoint,
        &model_container(&outcome.model, cfg, &data.train.scaler).to_bytes(),
    )?;
    let result = ExperimentResult {
        name: "train".into(),
        config_snapshot: cfg.to_toml(),
        rows: vec![RunRow {
            experiment: "train".into(),
            cell: Cell {
                beta: cfg.beta,
                fraction: 1.0,
                seed: cfg.seed,
                arm: Arm::Vib,
            },
            rmse: metrics.rmse,
            recon: metrics.recon,
            kl: metrics.kl,
            wall_seconds: 0.0,
        }],
    };
    let results = cfg.out(TRAIN_RESULTS_FILE);
    write_file(&results, result.to_csv().as_bytes())?;
    Ok(TrainReport {
        outcome,
        test_rmse: metrics.rmse,
        checkpoint,
        epoch_log: log,
        results,
    })
}

/// Model checkpoint plus what is needed to rebuild its test split.
fn model_container(model: &VibModel, cfg: &RunConfig, scaler: &CoordScaler) -> Container {
    let mut c = model.to_container();
    c.push_meta("run.seed", cfg.seed);
    c.push_f64("run.train_fraction", cfg.train_fraction);
    c.push_record("run.scaler", scaler.to_matrix());
    c
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rmse: f64,
    pub rows: usize,
}

/// Re-creates the held-out split a checkpoint was trained against and
/// scores the checkpoint on it.
pub fn evaluate_command(model_path: &Path, data: &Path) -> Result<EvalReport> {
    let c = Container::load(model_path)?;
    let model = VibModel::from_container(&c)?;
    let seed: u64 = c.meta("run.seed")?;
    let train_fraction: f64 = c.meta("run.train_fraction")?;
    let stored = CoordScaler::from_matrix(c.record("run.scaler")?)?;
    let set = FingerprintSet::load_any(&resolve_data_path(data))?;
    let split = prepare(&set, train_fraction, seed)?;
    if split.train.scaler != stored {
        return Err(Error::Mismatch {
            key: "run.scaler".into(),
            expected: format!("{stored:?}"),
            found: format!("{:?} (data differs from the training data)", split.train.scaler),
        });
    }
    let outcome = TrainOutcome {
        model,
        log: Vec::new(),
        best_epoch: 0,
        best_val_rmse: f64::NAN,
        steps: 0,
        stopped_early: false,
    };
    let m = score_vib(&outcome, &split.test, seed)?;
    Ok(EvalReport {
        rmse: m.rmse,
        rows: split.test.len(),
    })
}

pub fn sweep_beta_command(cfg: &RunConfig) -> Result<(ExperimentResult, PathBuf)> {
    cfg.validate()?;
    ensure_dir(&cfg.output_dir)?;
    write_snapshot(cfg, "beta_sweep", true)?;
    let data = load_split(cfg)?;
    let path = cfg.out(BETA_SWEEP_FILE);
    let mut res = beta_sweep(&data, &cfg.betas, &cfg.cell_seeds(), &cfg.sweep_settings(), Some(&path))?;
    res.config_snapshot = cfg.to_toml();
    Ok((res, path))
}

pub fn sweep_fraction_command(cfg: &RunConfig) -> Result<(ExperimentResult, PathBuf)> {
    cfg.validate()?;
    ensure_dir(&cfg.output_dir)?;
    write_snapshot(cfg, "fraction_sweep", true)?;
    let data = load_split(cfg)?;
    let path = cfg.out(FRACTION_SWEEP_FILE);
    let mut res = fraction_sweep(
        &data,
        &cfg.fractions,
        &cfg.cell_seeds(),
        &cfg.sweep_settings(),
        Some(&path),
    )?;
    res.config_snapshot = cfg.to_toml();
    Ok((res, path))
}

/// Projection of every row of the data file through a trained encoder.
pub fn project_latent_command(cfg: &RunConfig, model_path: &Path) -> Result<(Projection, PathBuf)> {
    ensure_dir(&cfg.output_dir)?;
    write_snapshot(cfg, "latent_projection", false)?;
    let model = VibModel::load(model_path)?;
    let set = FingerprintSet::load_any(&cfg.data_file()?)?;
    let proj = latent_projection(&model, &set.x, &set.aux)?;
    let path = cfg.out(PROJECTION_FILE);
    write_file(&path, proj.to_csv().as_bytes())?;
    Ok((proj, path))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnReport {
    pub k: usize,
    pub rmse: f64,
    pub results: PathBuf,
}

pub fn baseline_knn_command(cfg: &RunConfig) -> Result<KnnReport> {
    cfg.validate()?;
    ensure_dir(&cfg.output_dir)?;
    write_snapshot(cfg, "knn", false)?;
    let data = load_split(cfg)?;
    let (m, knn) = run_knn(&data.train, &data.test, &cfg.knn_grid, cfg.knn_val_fraction, cfg.seed)?;
    let result = ExperimentResult {
        name: "baseline_knn".into(),
        config_snapshot: cfg.to_toml(),
        rows: vec![RunRow {
            experiment: "baseline_knn".into(),
            cell: Cell {
                beta: f64::NAN,
                fraction: 1.0,
                seed: cfg.seed,
                arm: Arm::Knn,
            },
            rmse: m.rmse,
            recon: m.recon,
            kl: m.kl,
            wall_seconds: 0.0,
        }],
    };
    let results = cfg.out(KNN_RESULTS_FILE);
    write_file(&results, result.to_csv().as_bytes())?;
    Ok(KnnReport {
        k: knn.k(),
        rmse: m.rmse,
        results,
    })
}
