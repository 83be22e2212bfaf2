//! Synthetic data: a linear regression task with a known map, and a
//! simulated multi-building site written in the UJIIndoorLoc CSV layout.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{AuxLabel, RawRecord, NUM_WAPS, RSSI_UNDETECTED};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::standard_normal;
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub x: Matrix,
    pub y: Matrix,
}

/// `y = x A`, min-max scaled to `[0, 1]` per output with training
/// statistics, plus Gaussian noise of `noise_sigma` in scaled units.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearTask {
    pub a: Matrix,
    pub train: Split,
    pub test: Split,
    /// Noise-free test targets.
    pub test_clean: Matrix,
}

pub fn linear_task(
    n_train: usize,
    n_test: usize,
    input_dim: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<LinearTask> {
    if n_train < 2 || input_dim == 0 {
        return Err(Error::Config("linear task needs >= 2 training rows and >= 1 input".into()));
    }
    let mut rng = stream(seed, Stream::Synthetic);
    let a = standard_normal(input_dim, 2, &mut rng);
    let n = n_train + n_test;
    let x = Matrix::from_fn(n, input_dim, |_, _| rng.random::<f64>());
    let raw = x.matmul(&a)?;
    let idx_train: Vec<usize> = (0..n_train).collect();
    let idx_test: Vec<usize> = (n_train..n).collect();
    let scaler = crate::data::CoordScaler::fit(&raw.select_rows(&idx_train))?;
    let clean = scaler.apply(&raw)?;
    let noise = standard_normal(n, 2, &mut rng);
    let noisy = clean.add(&noise.scale(noise_sigma)?)?;
    Ok(LinearTask {
        a,
        train: Split {
            x: x.select_rows(&idx_train),
            y: noisy.select_rows(&idx_train),
        },
        test: Split {
            x: x.select_rows(&idx_test),
            y: noisy.select_rows(&idx_test),
        },
        test_clean: clean.select_rows(&idx_test),
    })
}

const BUILDINGS: usize = 3;
const FLOORS: usize = 4;
const ORIGIN: (f64, f64) = (-7700.0, 4_864_740.0);
const BUILDING_SIZE: (f64, f64) = (120.0, 90.0);
const BUILDING_GAP: f64 = 40.0;

/// Fingerprints from a log-distance path-loss model over three buildings
/// of four floors, with access points spread across all of them.
pub fn simulated_site(rows: usize, seed: u64) -> Vec<RawRecord> {
    let mut rng = stream(seed, Stream::Synthetic);
    let origin_of = |b: usize| (ORIGIN.0 + b as f64 * (BUILDING_SIZE.0 + BUILDING_GAP), ORIGIN.1);
    let waps: Vec<(f64, f64, usize, usize)> = (0..NUM_WAPS)
        .map(|_| {
            let b = rng.random_range(0..BUILDINGS);
            let (ox, oy) = origin_of(b);
            (
                ox + rng.random::<f64>() * BUILDING_SIZE.0,
                oy + rng.random::<f64>() * BUILDING_SIZE.1,
                b,
                rng.random_range(0..FLOORS),
            )
        })
        .collect();
    (0..rows)
        .map(|_| {
            let building = rng.random_range(0..BUILDINGS);
            let floor = rng.random_range(0..FLOORS);
            let (ox, oy) = origin_of(building);
            let lon = ox + rng.random::<f64>() * BUILDING_SIZE.0;
            let lat = oy + rng.random::<f64>() * BUILDING_SIZE.1;
            let rssi = waps
                .iter()
                .map(|&(wx, wy, wb, wf)| {
                    let d = ((wx - lon).powi(2) + (wy - lat).powi(2)).sqrt().max(1.0);
                    let floors = (wf as f64 - floor as f64).abs();
                    let walls = if wb == building { 0.0 } else { 15.0 };
                    let noise: f64 = rng.sample(StandardNormal);
                    let v = -35.0 - 28.0 * d.log10() - 9.0 * floors - walls + 3.0 * noise;
                    if v < -100.0 {
                        RSSI_UNDETECTED
                    } else {
                        v.round().min(0.0) as i32
                    }
                })
                .collect();
            RawRecord {
                rssi,
                longitude: lon,
                latitude: lat,
                aux: AuxLabel {
                    building: building as i64,
                    floor: floor as i64,
                },
            }
        })
        .collect()
}

/// Writes records with the full UJIIndoorLoc column set.
pub fn write_uji_csv(path: &Path, records: &[RawRecord]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = std::io::BufWriter::new(file);
    let mut header: Vec<String> = (1..=NUM_WAPS).map(|i| format!("WAP{i:03}")).collect();
    header.extend(
        [
            "LONGITUDE",
            "LATITUDE",
            "FLOOR",
            "BUILDINGID",
            "SPACEID",
            "RELATIVEPOSITION",
            "USERID",
            "PHONEID",
            "TIMESTAMP",
        ]
        .map(String::from),
    );
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for (i, r) in records.iter().enumerate() {
        let mut line: Vec<String> = r.rssi.iter().map(|v| v.to_string()).collect();
        line.push(format!("{:?}", r.longitude));
        line.push(format!("{:?}", r.latitude));
        line.push(r.aux.floor.to_string());
        line.push(r.aux.building.to_string());
        line.extend(["101".into(), "2".into(), "1".into(), "1".into()]);
        line.push((1_371_713_733 + i).to_string());
        writeln!(w, "{}", line.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}
