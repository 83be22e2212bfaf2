//! Acceptance suite: one PASS/FAIL/SKIP line per criterion. Criteria that
//! need the UJIIndoorLoc training file read it from `VIB_DATA_DIR` (a
//! directory holding trainingData.csv, or the file itself) and are skipped
//! when it is absent.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use vibloc::data::{prepare, FingerprintSet};
use vibloc::experiments::{
    beta_sweep, fraction_sweep, rmse, run_knn, run_vib, Arm, SweepSettings, DEFAULT_BETA_GRID,
    DEFAULT_FRACTION_GRID,
};
use vibloc::gradcheck::{grad_check, FnObjective};
use vibloc::layers::{relu, relu_backward, DenseLayer, DropoutLayer};
use vibloc::model::{kl_standard_normal, GaussianLatent, Noise, VibConfig, VibModel};
use vibloc::optim::AdamConfig;
use vibloc::rng::{stream, Stream};
use vibloc::runner::{self, RunConfig};
use vibloc::synthetic::{linear_task, simulated_site, write_uji_csv};
use vibloc::train::{train, TrainOptions};
use vibloc::{Matrix, Result};

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

const GRAD_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-5;
const SEEDS: u64 = 5;

fn toy_config() -> VibConfig {
    VibConfig {
        input_dim: 12,
        encoder_hidden: 8,
        latent_dim: 3,
        predictor_hidden: 8,
        predictor_layers: 3,
        dropout_rate: 0.3,
        beta: 0.5,
        train_mc_samples: 2,
        eval_mc_samples: 4,
        logvar_min: -10.0,
        logvar_max: 10.0,
    }
}

fn uniform(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = stream(seed, Stream::Synthetic);
    Matrix::from_fn(rows, cols, |_, _| rng.random::<f64>() * 2.0 - 1.0)
}

fn dot(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
}

fn gradient_correctness() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    let mut all_pass = true;
    for seed in 0..SEEDS {
        // dense layer: f(W, b, x) = <x W + b, R>
        let mut layer = DenseLayer::init(12, 8, &mut stream(seed, Stream::Init))?;
        layer.bias = uniform(1, 8, seed + 100);
        let r = uniform(5, 8, seed + 200);
        let params = vec![layer.weight.clone(), layer.bias.clone(), uniform(5, 12, seed + 300)];
        let mut f = FnObjective {
            value: |p: &[Matrix]| -> Result<f64> {
                let l = DenseLayer::from_params(p[0].clone(), p[1].clone())?;
                Ok(dot(&l.forward(&p[2])?, &r))
            },
            gradient: |p: &[Matrix]| -> Result<Vec<Matrix>> {
                let l = DenseLayer::from_params(p[0].clone(), p[1].clone())?;
                let g = l.backward(&p[2], &r)?;
                let mut out = g.param_grads;
                out.push(g.input_grad);
                Ok(out)
            },
        };
        let rep = grad_check(&mut f, &params, GRAD_STEP, GRAD_TOL)?;
        worst = worst.max(rep.max_rel_error);
        checked += rep.entries_checked;
        all_pass &= rep.passed;

        // ReLU then dropout with a frozen mask: f(x) = <dropout(relu(x)), R>
        let drop = DropoutLayer::new(0.3)?;
        let mask = drop.sample_mask(6, 8, &mut stream(seed, Stream::Noise));
        let r = uniform(6, 8, seed + 400);
        let x = uniform(6, 8, seed + 500);
        let mut f = FnObjective {
            value: |p: &[Matrix]| -> Result<f64> {
                let mut d = DropoutLayer::new(0.3)?;
                Ok(dot(&d.forward_with_mask(&relu(&p[0]), mask.clone())?, &r))
            },
            gradient: |p: &[Matrix]| -> Result<Vec<Matrix>> {
                let mut d = DropoutLayer::new(0.3)?;
                d.forward_with_mask(&relu(&p[0]), mask.clone())?;
                Ok(vec![relu_backward(&p[0], &d.backward(&r)?)?])
            },
        };
        let rep = grad_check(&mut f, &[x], GRAD_STEP, GRAD_TOL)?;
        worst = worst.max(rep.max_rel_error);
        checked += rep.entries_checked;
        all_pass &= rep.passed;

        // full loss with frozen reparameterization draws and dropout masks
        let cfg = toy_config();
        let mut model = VibModel::new(cfg.clone(), &mut stream(seed, Stream::Init))?;
        // random biases keep pre-activations off the ReLU kink
        for (i, p) in model.params_mut().into_iter().enumerate() {
            if i % 2 == 1 {
                *p = uniform(p.rows(), p.cols(), seed * 31 + i as u64).scale(0.1)?;
            }
        }
        let x = uniform(5, 12, seed + 600).map(|v| v.abs());
        let y = uniform(5, 2, seed + 700).map(|v| v.abs());
        let noise = Noise::sample(&cfg, 5, &mut stream(seed, Stream::Noise));
        let params: Vec<Matrix> = model.params().into_iter().cloned().collect();
        let mut f = FnObjective {
            value: |p: &[Matrix]| -> Result<f64> {
                let mut m = model.clone();
                m.set_params(p)?;
                Ok(m.loss_with_noise(&x, &y, &noise)?.total)
            },
            gradient: |p: &[Matrix]| -> Result<Vec<Matrix>> {
                let mut m = model.clone();
                m.set_params(p)?;
                Ok(m.backward_with_noise(&x, &y, &noise)?.1)
            },
        };
        let rep = grad_check(&mut f, &params, GRAD_STEP, GRAD_TOL)?;
        worst = worst.max(rep.max_rel_error);
        checked += rep.entries_checked;
        all_pass &= rep.passed;
    }
    Ok(verdict(
        all_pass && worst <= GRAD_TOL,
        format!("{SEEDS} seeds, {checked} entries, max relative error {worst:.2e} (tol {GRAD_TOL:e})"),
    ))
}

fn kl_oracle() -> Result<Outcome> {
    let one = |mu: f64, lv: f64| -> Result<f64> {
        Ok(kl_standard_normal(&GaussianLatent {
            mu: Matrix::filled(1, 1, mu),
            logvar: Matrix::filled(1, 1, lv),
        }))
    };
    let mut ok = one(0.0, 0.0)? == 0.0;
    ok &= (one(1.0, 0.0)? - 0.5).abs() <= 1e-10;
    // hand-evaluated values
    let table = [
        (0.0, 1.0, 0.359_140_914_229_522_6),
        (2.0, -1.0, 2.183_939_720_585_721_2),
        (-0.5, 0.5, 0.199_360_635_350_064_1),
    ];
    let mut worst: f64 = 0.0;
    for (mu, lv, expected) in table {
        worst = worst.max((one(mu, lv)? - expected).abs());
    }
    let mut grid = 0;
    for i in -4..=4 {
        for j in -6..=6 {
            let (mu, lv) = (i as f64 * 0.5, j as f64 * 0.5);
            let closed = 0.5 * (mu * mu + lv.exp() - lv - 1.0);
            worst = worst.max((one(mu, lv)? - closed).abs());
            grid += 1;
        }
    }
    ok &= worst <= 1e-10;
    Ok(verdict(ok, format!("{grid}-point grid and hand values, max abs error {worst:.1e}")))
}

fn write_site(dir: &Path, rows: usize, seed: u64) -> Result<PathBuf> {
    let path = dir.join("trainingData.csv");
    write_uji_csv(&path, &simulated_site(rows, seed))?;
    Ok(path)
}

fn loss_decomposition(dir: &Path) -> Result<Outcome> {
    let csv = write_site(dir, 2000, 11)?;
    let set = FingerprintSet::load_any(&csv)?;
    let data = prepare(&set, 0.8, 0)?;
    let opts = TrainOptions {
        max_epochs: 3,
        ..TrainOptions::default()
    };
    let mut batches = 0;
    let mut worst: f64 = 0.0;
    train(&VibConfig::default(), &opts, &data.train.x, &data.train.y, &mut |e| {
        batches += 1;
        let r = e.loss.decomposition_residual();
        worst = worst.max(r);
        if r > 1e-12 {
            return Err(vibloc::Error::Numeric(format!(
                "step {}: total {} != recon {} + beta*kl {}",
                e.step, e.loss.total, e.loss.recon, e.loss.beta_kl
            )));
        }
        Ok(())
    })?;
    Ok(verdict(
        batches > 0,
        format!("{batches} batches at full size, max relative residual {worst:.1e} (tol 1e-12)"),
    ))
}

fn synthetic_recovery() -> Result<Outcome> {
    let start = Instant::now();
    let task = linear_task(8000, 1000, 520, 0.01, 42)?;
    let mut parts = Vec::new();
    let mut ok = true;
    for (beta, bound) in [(VibConfig::default().beta, 0.05), (0.0, 0.02)] {
        let cfg = VibConfig {
            beta,
            ..VibConfig::default()
        };
        let opts = TrainOptions {
            batch_size: 128,
            max_epochs: usize::MAX,
            max_steps: Some(2000),
            patience: usize::MAX,
            adam: AdamConfig::default(),
            ..TrainOptions::default()
        };
        let out = train(&cfg, &opts, &task.train.x, &task.train.y, &mut |_| Ok(()))?;
        let pred = out.model.infer(&task.test.x, &mut stream(0, Stream::Inference))?;
        let clean = rmse(&pred, &task.test_clean)?;
        let noisy = rmse(&pred, &task.test.y)?;
        ok &= out.steps == 2000 && clean <= bound;
        parts.push(format!(
            "beta={beta:e}: rmse {clean:.4} vs map (<= {bound}), {noisy:.4} vs noisy targets"
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 300.0;
    Ok(verdict(ok, format!("{}; {secs:.0}s", parts.join("; "))))
}

fn real_data() -> Option<PathBuf> {
    let p = runner::resolve_data_path(Path::new(&std::env::var_os("VIB_DATA_DIR")?));
    p.is_file().then_some(p)
}

fn skip_without_data() -> Outcome {
    Outcome::Skip("VIB_DATA_DIR does not point at trainingData.csv".into())
}

fn full_settings() -> SweepSettings {
    SweepSettings::default()
}

fn default_config_rmse(data: &vibloc::data::TrainTest) -> Result<Outcome> {
    let (m, out) = run_vib(&data.train, &data.test, &VibConfig::default(), &TrainOptions::default())?;
    Ok(verdict(
        m.rmse <= 0.10,
        format!("test rmse {:.4} (<= 0.10), {} epochs", m.rmse, out.log.len()),
    ))
}

fn baseline_rmse(data: &vibloc::data::TrainTest) -> Result<Outcome> {
    let (knn, reg) = run_knn(&data.train, &data.test, &vibloc::knn::DEFAULT_K_GRID, 0.1, 0)?;
    let mut vib = Vec::new();
    for seed in 0..3 {
        let opts = TrainOptions {
            seed,
            ..TrainOptions::default()
        };
        vib.push(run_vib(&data.train, &data.test, &VibConfig::default(), &opts)?.0.rmse);
    }
    let mean = vib.iter().sum::<f64>() / 3.0;
    Ok(verdict(
        (0.07..=0.12).contains(&knn.rmse) && mean <= knn.rmse,
        format!(
            "k-NN (k={}) rmse {:.4} in [0.07, 0.12]; VIB mean {:.4} over 3 seeds <= k-NN",
            reg.k(),
            knn.rmse,
            mean
        ),
    ))
}

fn beta_ranking(data: &vibloc::data::TrainTest) -> Result<Outcome> {
    let res = beta_sweep(data, &DEFAULT_BETA_GRID, &[0, 1, 2], &full_settings(), None)?;
    let best = res.best_beta();
    let ok = best.is_some_and(|b| [1e-5, 1e-6, 1e-7].iter().any(|&a| (a / b - 1.0).abs() < 1e-9));
    Ok(verdict(ok, format!("argmin beta {best:?} (want 1e-6 or an adjacent decade)")))
}

fn fraction_shape(data: &vibloc::data::TrainTest) -> Result<Outcome> {
    let res = fraction_sweep(data, &DEFAULT_FRACTION_GRID, &[0, 1, 2], &full_settings(), None)?;
    let agg = res.aggregates();
    let mean = |f: f64, arm: Arm| {
        agg.iter()
            .find(|a| a.fraction == f && a.arm == arm)
            .map_or(f64::NAN, |a| a.mean_rmse)
    };
    let more_data = mean(1.0, Arm::Vib) < mean(0.05, Arm::Vib);
    let mut crossover = true;
    for f in DEFAULT_FRACTION_GRID.iter().copied().filter(|&f| f >= 0.25) {
        for seed in 0..3 {
            let get = |arm| {
                res.rows
                    .iter()
                    .find(|r| r.cell.fraction == f && r.cell.seed == seed && r.cell.arm == arm)
                    .map_or(f64::NAN, |r| r.rmse)
            };
            crossover &= get(Arm::Vib) < get(Arm::Knn);
        }
    }
    Ok(verdict(
        more_data && crossover,
        format!(
            "VIB mean rmse {:.4} at 1.0 vs {:.4} at 0.05; VIB beats k-NN at every fraction >= 0.25: {crossover}",
            mean(1.0, Arm::Vib),
            mean(0.05, Arm::Vib)
        ),
    ))
}

fn determinism(dir: &Path) -> Result<Outcome> {
    let csv = write_site(dir, 1200, 5)?;
    let cfg = RunConfig {
        data_path: Some(csv),
        output_dir: dir.join("run"),
        max_epochs: 4,
        batch_size: 128,
        betas: vec![1e-4, 1e-6],
        seeds_per_cell: 2,
        jobs: 2,
        ..RunConfig::default()
    };
    let files = [
        runner::MODEL_FILE,
        runner::TRAIN_STATE_FILE,
        runner::EPOCH_LOG_FILE,
        runner::TRAIN_RESULTS_FILE,
        runner::BETA_SWEEP_FILE,
    ];
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        if cfg.output_dir.exists() {
            std::fs::remove_dir_all(&cfg.output_dir).expect("clear run directory");
        }
        runner::train_command(&cfg, false)?;
        runner::sweep_beta_command(&cfg)?;
        let bytes: Vec<Vec<u8>> = files
            .iter()
            .map(|f| std::fs::read(cfg.out(f)).expect("artifact written"))
            .collect();
        snapshots.push(bytes);
    }
    let identical = snapshots[0] == snapshots[1];
    let total: usize = snapshots[0].iter().map(Vec::len).sum();
    Ok(verdict(
        identical,
        format!("{} artifacts ({total} bytes) compared across two runs", files.len()),
    ))
}

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Result<Outcome> + 'a>);

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let real = real_data().map(|p| {
        let set = FingerprintSet::load_any(&p).and_then(|s| prepare(&s, 0.8, 0));
        (p, set)
    });
    let with_data = |f: fn(&vibloc::data::TrainTest) -> Result<Outcome>| -> Result<Outcome> {
        match &real {
            None => Ok(skip_without_data()),
            Some((_, Err(e))) => Ok(Outcome::Fail(format!("could not load data: {e}"))),
            Some((_, Ok(d))) => f(d),
        }
    };

    let criteria: Vec<Criterion<'_>> = vec![
        ("1 gradient correctness", Box::new(gradient_correctness)),
        ("2 KL oracle", Box::new(kl_oracle)),
        ("3 loss decomposition", Box::new(|| loss_decomposition(dir.path()))),
        ("4 synthetic recovery", Box::new(synthetic_recovery)),
        ("5 VIB test RMSE on UJIIndoorLoc", Box::new(|| with_data(default_config_rmse))),
        ("6 k-NN baseline RMSE and ordering", Box::new(|| with_data(baseline_rmse))),
        ("7 beta sweep ranking", Box::new(|| with_data(beta_ranking))),
        ("8 determinism", Box::new(|| determinism(dir.path()))),
        ("9 fraction sweep shape", Box::new(|| with_data(fraction_shape))),
    ];

    let mut failed = 0;
    for (name, check) in &criteria {
        let start = Instant::now();
        let outcome = check().unwrap_or_else(|e| Outcome::Fail(format!("error: {e}")));
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("[{tag}] criterion {name}: {detail} ({secs:.1}s)");
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
