//! Metrics, the β and labeled-fraction sweeps, and latent projection.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::data::{labeled_fraction, AuxLabel, FingerprintDataset, TrainTest};
use crate::error::{Error, Result};
use crate::knn::KnnRegressor;
use crate::matrix::Matrix;
use crate::model::{VibConfig, VibModel};
use crate::rng::{stream, Stream};
use crate::train::{train, TrainOptions, TrainOutcome};

/// Six decades, 1e-3 down to 1e-8.
pub const DEFAULT_BETA_GRID: [f64; 6] = [1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8];
pub const DEFAULT_FRACTION_GRID: [f64; 5] = [0.05, 0.1, 0.25, 0.5, 1.0];

/// `sqrt(mean((pred - target)^2))` over every entry.
pub fn rmse(pred: &Matrix, target: &Matrix) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::dim("rmse", pred.shape(), target.shape()));
    }
    if pred.is_empty() {
        return Err(Error::Numeric("rmse of an empty matrix".into()));
    }
    let sq: f64 = pred
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok((sq / pred.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    Vib,
    Knn,
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Vib => "vib",
            Arm::Knn => "knn",
        })
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vib" => Ok(Arm::Vib),
            "knn" => Ok(Arm::Knn),
            other => Err(Error::Config(format!("unknown arm {other:?}"))),
        }
    }
}

/// One (config, seed) cell of an experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub beta: f64,
    pub fraction: f64,
    pub seed: u64,
    pub arm: Arm,
}

impl Cell {
    fn key(&self) -> (u64, u64, u64, Arm) {
        (self.beta.to_bits(), self.fraction.to_bits(), self.seed, self.arm)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub experiment: String,
    pub cell: Cell,
    /// NaN when the run diverged.
    pub rmse: f64,
    /// Training loss terms at the selected epoch; NaN for arms without them.
    pub recon: f64,
    pub kl: f64,
    pub wall_seconds: f64,
}

impl RunRow {
    pub const CSV_HEADER: &'static str = "experiment,beta,fraction,seed,arm,rmse,recon,kl,wall_seconds";

    pub fn csv_row(&self) -> String {
        let c = &self.cell;
        format!(
            "{},{:?},{:?},{},{},{:?},{:?},{:?},{:?}",
            self.experiment, c.beta, c.fraction, c.seed, c.arm, self.rmse, self.recon, self.kl, self.wall_seconds
        )
    }

    pub fn diverged(&self) -> bool {
        !self.rmse.is_finite()
    }
}

/// Mean and spread of one (beta, fraction, arm) group over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub beta: f64,
    pub fraction: f64,
    pub arm: Arm,
    pub runs: usize,
    /// Runs that produced a finite RMSE; the statistics use only these.
    pub finite_runs: usize,
    pub mean_rmse: f64,
    /// Sample standard deviation, present only with two or more runs.
    pub std_rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub name: String,
    pub config_snapshot: String,
    pub rows: Vec<RunRow>,
}

impl ExperimentResult {
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut order: Vec<(u64, u64, Arm)> = Vec::new();
        let mut groups: HashMap<(u64, u64, Arm), Vec<f64>> = HashMap::new();
        for r in &self.rows {
            let k = (r.cell.beta.to_bits(), r.cell.fraction.to_bits(), r.cell.arm);
            if !groups.contains_key(&k) {
                order.push(k);
            }
            groups.entry(k).or_default().push(r.rmse);
        }
        order
            .into_iter()
            .map(|k| {
                let all = &groups[&k];
                let finite: Vec<f64> = all.iter().copied().filter(|v| v.is_finite()).collect();
                let n = finite.len();
                let mean = if n == 0 {
                    f64::NAN
                } else {
                    finite.iter().sum::<f64>() / n as f64
                };
                let std = (n >= 2).then(|| {
                    (finite.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
                });
                Aggregate {
                    beta: f64::from_bits(k.0),
                    fraction: f64::from_bits(k.1),
                    arm: k.2,
                    runs: all.len(),
                    finite_runs: n,
                    mean_rmse: mean,
                    std_rmse: std,
                }
            })
            .collect()
    }

    /// β of the VIB group with the lowest mean RMSE.
    pub fn best_beta(&self) -> Option<f64> {
        self.aggregates()
            .into_iter()
            .filter(|a| a.arm == Arm::Vib && a.mean_rmse.is_finite())
            .min_by(|a, b| a.mean_rmse.total_cmp(&b.mean_rmse))
            .map(|a| a.beta)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(RunRow::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Reads a result file. Rows after the last complete line (an interrupted
/// append) are ignored.
pub fn read_result_csv(path: &Path) -> Result<Vec<RunRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(complete.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| csv_error(path, 1, e))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if !complete.is_empty() && header != RunRow::CSV_HEADER {
        return Err(Error::Csv {
            path: path.to_path_buf(),
            line: 1,
            detail: format!("expected header {:?}", RunRow::CSV_HEADER),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| csv_error(path, line, e))?;
        if rec.len() != 9 {
            return Err(Error::Csv {
                path: path.to_path_buf(),
                line,
                detail: format!("expected 9 fields, found {}", rec.len()),
            });
        }
        let bad = |field: &str| Error::Csv {
            path: path.to_path_buf(),
            line,
            detail: format!("invalid {field}"),
        };
        let num = |k: usize, name: &str| rec[k].parse::<f64>().map_err(|_| bad(name));
        rows.push(RunRow {
            experiment: rec[0].to_string(),
            cell: Cell {
                beta: num(1, "beta")?,
                fraction: num(2, "fraction")?,
                seed: rec[3].parse().map_err(|_| bad("seed"))?,
                arm: rec[4].parse().map_err(|_| bad("arm"))?,
            },
            rmse: num(5, "rmse")?,
            recon: num(6, "recon")?,
            kl: num(7, "kl")?,
            wall_seconds: num(8, "wall_seconds")?,
        });
    }
    Ok(rows)
}

fn csv_error(path: &Path, line: u64, e: csv::Error) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        line,
        detail: e.to_string(),
    }
}

/// Metrics of one finished run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunMetrics {
    pub rmse: f64,
    pub recon: f64,
    pub kl: f64,
}

impl RunMetrics {
    fn diverged() -> Self {
        Self {
            rmse: f64::NAN,
            recon: f64::NAN,
            kl: f64::NAN,
        }
    }
}

/// Everything a sweep needs besides the data and the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSettings {
    pub model: VibConfig,
    pub train: TrainOptions,
    pub jobs: usize,
    pub knn_grid: Vec<usize>,
    pub knn_val_fraction: f64,
    /// When false the wall_seconds column is written as 0 so result files
    /// are bit-reproducible.
    pub record_wall_time: bool,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            model: VibConfig::default(),
            train: TrainOptions::default(),
            jobs: 1,
            knn_grid: crate::knn::DEFAULT_K_GRID.to_vec(),
            knn_val_fraction: 0.1,
            record_wall_time: false,
        }
    }
}

/// Trains a fresh VIB on `train_set` and scores it on `test`.
pub fn run_vib(
    train_set: &FingerprintDataset,
    test: &FingerprintDataset,
    model: &VibConfig,
    options: &TrainOptions,
) -> Result<(RunMetrics, TrainOutcome)> {
    let outcome = train(model, options, &train_set.x, &train_set.y, &mut |_| Ok(()))?;
    let metrics = score_vib(&outcome, test, options.seed)?;
    Ok((metrics, outcome))
}

/// Test RMSE of a trained model plus the training loss terms at its selected
/// epoch.
pub fn score_vib(outcome: &TrainOutcome, test: &FingerprintDataset, seed: u64) -> Result<RunMetrics> {
    let pred = outcome.model.infer(&test.x, &mut stream(seed, Stream::Inference))?;
    let rmse = rmse(&pred, &test.y)?;
    let rec = outcome
        .log
        .iter()
        .find(|r| r.epoch == outcome.best_epoch)
        .or(outcome.log.last());
    Ok(RunMetrics {
        rmse,
        recon: rec.map_or(f64::NAN, |r| r.train.recon),
        kl: rec.map_or(f64::NAN, |r| r.train.kl),
    })
}

/// Tuned k-NN on `train_set`, scored on `test`.
pub fn run_knn(
    train_set: &FingerprintDataset,
    test: &FingerprintDataset,
    grid: &[usize],
    val_fraction: f64,
    seed: u64,
) -> Result<(RunMetrics, KnnRegressor)> {
    let (knn, _) = KnnRegressor::tune(&train_set.x, &train_set.y, grid, val_fraction, seed)?;
    let pred = knn.predict(&test.x)?;
    Ok((
        RunMetrics {
            rmse: rmse(&pred, &test.y)?,
            recon: f64::NAN,
            kl: f64::NAN,
        },
        knn,
    ))
}

/// Runs every cell not already present in `results_path`, appending each
/// finished row as it completes, then rewrites the file in canonical cell
/// order. Divergence is recorded as a NaN row; other errors abort.
pub fn run_cells<F>(
    name: &str,
    cells: &[Cell],
    settings: &SweepSettings,
    results_path: Option<&Path>,
    run: F,
) -> Result<ExperimentResult>
where
    F: Fn(&Cell) -> Result<RunMetrics> + Sync,
{
    let mut done: HashMap<(u64, u64, u64, Arm), RunRow> = HashMap::new();
    if let Some(path) = results_path.filter(|p| p.exists()) {
        for row in read_result_csv(path)? {
            if row.experiment == name {
                done.insert(row.cell.key(), row);
            }
        }
    }
    let pending: Vec<Cell> = cells
        .iter()
        .filter(|c| !done.contains_key(&c.key()))
        .copied()
        .collect();

    let mut appender = match results_path {
        Some(path) => {
            let existed = path.exists();
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            if !existed {
                writeln!(f, "{}", RunRow::CSV_HEADER).map_err(|e| Error::io(path, e))?;
            }
            Some((path, f))
        }
        None => None,
    };

    let jobs = settings.jobs.max(1).min(pending.len().max(1));
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<Result<RunRow>>();
    let mut first_error = None;
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            let tx = tx.clone();
            let (next, abort, pending, run) = (&next, &abort, &pending, &run);
            scope.spawn(move || loop {
                if abort.load(Ordering::Relaxed) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(cell) = pending.get(i) else { break };
                let start = Instant::now();
                let metrics = match run(cell) {
                    Ok(m) => m,
                    Err(Error::Diverged { .. }) => RunMetrics::diverged(),
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        break;
                    }
                };
                let wall = if settings.record_wall_time {
                    start.elapsed().as_secs_f64()
                } else {
                    0.0
                };
                let row = RunRow {
                    experiment: name.to_string(),
                    cell: *cell,
                    rmse: metrics.rmse,
                    recon: metrics.recon,
                    kl: metrics.kl,
                    wall_seconds: wall,
                };
                if tx.send(Ok(row)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        // single writer
        for msg in rx {
            match msg {
                Ok(row) => {
                    if let Some((path, f)) = appender.as_mut() {
                        if let Err(e) = writeln!(f, "{}", row.csv_row()).and_then(|_| f.flush()) {
                            first_error.get_or_insert(Error::io(*path, e));
                            abort.store(true, Ordering::Relaxed);
                        }
                    }
                    done.insert(row.cell.key(), row);
                }
                Err(e) => {
                    first_error.get_or_insert(e);
                    abort.store(true, Ordering::Relaxed);
                }
            }
        }
    });
    if let Some(e) = first_error {
        return Err(e);
    }

    let rows: Vec<RunRow> = cells
        .iter()
        .map(|c| done.remove(&c.key()).expect("every cell ran"))
        .collect();
    let result = ExperimentResult {
        name: name.to_string(),
        config_snapshot: String::new(),
        rows,
    };
    if let Some((path, f)) = appender {
        drop(f);
        result.write_csv(path)?;
    }
    Ok(result)
}

/// One fresh VIB per (β, seed), scored on the test split.
pub fn beta_sweep(
    data: &TrainTest,
    betas: &[f64],
    seeds: &[u64],
    settings: &SweepSettings,
    results_path: Option<&Path>,
) -> Result<ExperimentResult> {
    if betas.is_empty() || seeds.is_empty() {
        return Err(Error::Config("beta sweep needs at least one beta and one seed".into()));
    }
    let mut cells = Vec::with_capacity(betas.len() * seeds.len());
    for &beta in betas {
        VibConfig { beta, ..settings.model.clone() }.validate()?;
        for &seed in seeds {
            cells.push(Cell {
                beta,
                fraction: 1.0,
                seed,
                arm: Arm::Vib,
            });
        }
    }
    run_cells("beta_sweep", &cells, settings, results_path, |cell| {
        let model = VibConfig {
            beta: cell.beta,
            ..settings.model.clone()
        };
        let options = TrainOptions {
            seed: cell.seed,
            ..settings.train.clone()
        };
        Ok(run_vib(&data.train, &data.test, &model, &options)?.0)
    })
}

/// Per (fraction, seed): subsample the training split, then train VIB and
/// tuned k-NN on the same rows.
pub fn fraction_sweep(
    data: &TrainTest,
    fractions: &[f64],
    seeds: &[u64],
    settings: &SweepSettings,
    results_path: Option<&Path>,
) -> Result<ExperimentResult> {
    if fractions.is_empty() || seeds.is_empty() {
        return Err(Error::Config("fraction sweep needs at least one fraction and one seed".into()));
    }
    settings.model.validate()?;
    let mut cells = Vec::new();
    for &fraction in fractions {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!("fraction must be in (0, 1], got {fraction}")));
        }
        for &seed in seeds {
            for arm in [Arm::Vib, Arm::Knn] {
                cells.push(Cell {
                    beta: settings.model.beta,
                    fraction,
                    seed,
                    arm,
                });
            }
        }
    }
    run_cells("fraction_sweep", &cells, settings, results_path, |cell| {
        let subset = labeled_fraction(&data.train, cell.fraction, cell.seed)?;
        match cell.arm {
            Arm::Vib => {
                let options = TrainOptions {
                    seed: cell.seed,
                    ..settings.train.clone()
                };
                Ok(run_vib(&subset, &data.test, &settings.model, &options)?.0)
            }
            Arm::Knn => Ok(run_knn(
                &subset,
                &data.test,
                &settings.knn_grid,
                settings.knn_val_fraction,
                cell.seed,
            )?
            .0),
        }
    })
}

/// Latent means projected to two dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// `rows x 2`, mean-centered.
    pub points: Matrix,
    pub aux: Vec<AuxLabel>,
    /// Variance captured by each output axis.
    pub variance: [f64; 2],
    /// True when the covariance was degenerate and the first two latent
    /// dimensions were used instead of principal components.
    pub fallback: bool,
}

impl Projection {
    pub fn header(&self) -> &'static str {
        if self.fallback {
            "z1,z2,building,floor"
        } else {
            "pc1,pc2,building,floor"
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(self.header());
        s.push('\n');
        for (r, a) in self.aux.iter().enumerate() {
            s.push_str(&format!(
                "{:?},{:?},{},{}\n",
                self.points.get(r, 0),
                self.points.get(r, 1),
                a.building,
                a.floor
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// PCA of the encoder means `mu_z` over all rows of `x`.
pub fn latent_projection(model: &VibModel, x: &Matrix, aux: &[AuxLabel]) -> Result<Projection> {
    if aux.len() != x.rows() {
        return Err(Error::dim("latent_projection", x.shape(), (aux.len(), 2)));
    }
    let mu = model.encode(x)?.mu;
    project_2d(&mu, aux)
}

/// Mean-centered PCA to two components. Eigenvectors are ordered by
/// decreasing eigenvalue with the sign fixed so the largest-magnitude
/// loading is positive.
pub fn project_2d(data: &Matrix, aux: &[AuxLabel]) -> Result<Projection> {
    let (n, d) = data.shape();
    if n == 0 {
        return Err(Error::Numeric("projection of an empty set".into()));
    }
    let mean = data.mean_rows();
    let centered = Matrix::from_fn(n, d, |r, c| data.get(r, c) - mean.get(0, c));
    let cov = if n >= 2 {
        centered.matmul_tn(&centered)?.scale(1.0 / (n - 1) as f64)?
    } else {
        Matrix::zeros(d, d)
    };
    let trace: f64 = (0..d).map(|i| cov.get(i, i)).sum();

    let pick = |axes: [Option<Vec<f64>>; 2]| -> Matrix {
        Matrix::from_fn(n, 2, |r, k| match &axes[k] {
            Some(v) => (0..d).map(|c| centered.get(r, c) * v[c]).sum(),
            None => 0.0,
        })
    };
    let unit = |i: usize| (i < d).then(|| (0..d).map(|c| if c == i { 1.0 } else { 0.0 }).collect());

    let scale: f64 = 1.0 + mean.as_slice().iter().map(|m| m * m).sum::<f64>();
    if !trace.is_finite() || trace <= 1e-20 * scale {
        let points = pick([unit(0), unit(1)]);
        let variance = [0, 1].map(|i| if i < d { cov.get(i, i) } else { 0.0 });
        return Ok(Projection {
            points,
            aux: aux.to_vec(),
            variance,
            fallback: true,
        });
    }

    let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, cov.as_slice()));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axis = |k: usize| -> Option<Vec<f64>> {
        let &i = order.get(k)?;
        let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        let lead = v
            .iter()
            .copied()
            .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        Some(v)
    };
    let variance = [0, 1].map(|k| order.get(k).map_or(0.0, |&i| eig.eigenvalues[i].max(0.0)));
    Ok(Projection {
        points: pick([axis(0), axis(1)]),
        aux: aux.to_vec(),
        variance,
        fallback: false,
    })
}
