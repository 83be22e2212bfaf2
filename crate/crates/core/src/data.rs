//! UJIIndoorLoc ingestion and preprocessing.
//!
//! RSSI cells range over `[-110, 0]` dB, with `100` marking an access point
//! that was not detected. Undetected readings are treated as the weakest
//! level (-110 dB) and all readings are mapped affinely onto `[0, 1]`.
//! Coordinates are min-max scaled per dimension with statistics fitted on
//! the training split only.

use std::path::Path;

use rand::seq::SliceRandom;

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{stream, Stream};

pub const NUM_WAPS: usize = 520;
pub const RSSI_UNDETECTED: i32 = 100;
pub const RSSI_MIN: i32 = -110;
pub const RSSI_MAX: i32 = 0;

pub const SET_KIND: &str = "fingerprint-set";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AuxLabel {
    pub building: i64,
    pub floor: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub rssi: Vec<i32>,
    pub longitude: f64,
    pub latitude: f64,
    pub aux: AuxLabel,
}

/// Reads a UJIIndoorLoc-format CSV. Columns are located by header name:
/// `WAP001..WAP520`, `LONGITUDE`, `LATITUDE` and optionally `FLOOR` and
/// `BUILDINGID`. Errors carry the 1-based file line.
pub fn load_csv(path: &Path) -> Result<Vec<RawRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(std::io::BufReader::new(file));

    let csv_err = |line: u64, detail: String| Error::Csv {
        path: path.to_path_buf(),
        line,
        detail,
    };
    let headers = reader
        .headers()
        .map_err(|e| csv_err(1, format!("unreadable header: {e}")))?
        .clone();
    let find = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));

    let wap_cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| {
            h.len() > 3
                && h[..3].eq_ignore_ascii_case("WAP")
                && h[3..].bytes().all(|b| b.is_ascii_digit())
        })
        .map(|(i, _)| i)
        .collect();
    if wap_cols.len() != NUM_WAPS {
        return Err(csv_err(
            1,
            format!("expected {NUM_WAPS} WAP columns, header has {}", wap_cols.len()),
        ));
    }
    let lon_col = find("LONGITUDE").ok_or_else(|| csv_err(1, "missing LONGITUDE column".into()))?;
    let lat_col = find("LATITUDE").ok_or_else(|| csv_err(1, "missing LATITUDE column".into()))?;
    let floor_col = find("FLOOR");
    let building_col = find("BUILDINGID");

    let mut records = Vec::new();
    let mut row = csv::StringRecord::new();
    loop {
        let more = reader
            .read_record(&mut row)
            .map_err(|e| csv_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        if !more {
            break;
        }
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != headers.len() {
            return Err(csv_err(
                line,
                format!("expected {} columns, found {}", headers.len(), row.len()),
            ));
        }
        let cell = |col: usize| &row[col];

        let mut rssi = Vec::with_capacity(NUM_WAPS);
        for &col in &wap_cols {
            let v: i32 = cell(col).parse().map_err(|_| {
                csv_err(line, format!("column {}: non-numeric RSSI {:?}", &headers[col], cell(col)))
            })?;
            if v != RSSI_UNDETECTED && !(RSSI_MIN..=RSSI_MAX).contains(&v) {
                return Err(csv_err(
                    line,
                    format!(
                        "column {}: RSSI {v} outside [{RSSI_MIN}, {RSSI_MAX}] and not the undetected marker {RSSI_UNDETECTED}",
                        &headers[col]
                    ),
                ));
            }
            rssi.push(v);
        }
        let float = |col: usize| -> Result<f64> {
            cell(col)
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| csv_err(line, format!("column {}: non-numeric value {:?}", &headers[col], cell(col))))
        };
        let int = |col: Option<usize>| -> Result<i64> {
            match col {
                None => Ok(-1),
                Some(col) => cell(col).parse::<i64>().map_err(|_| {
                    csv_err(line, format!("column {}: non-integer value {:?}", &headers[col], cell(col)))
                }),
            }
        };
        records.push(RawRecord {
            rssi,
            longitude: float(lon_col)?,
            latitude: float(lat_col)?,
            aux: AuxLabel {
                building: int(building_col)?,
                floor: int(floor_col)?,
            },
        });
    }
    Ok(records)
}

/// Maps RSSI readings onto `[0, 1]`, undetected readings to 0.
pub fn preprocess_rssi(records: &[RawRecord]) -> Matrix {
    let width = records.first().map_or(NUM_WAPS, |r| r.rssi.len());
    Matrix::from_fn(records.len(), width, |r, c| normalize_rssi(records[r].rssi[c]))
}

pub fn normalize_rssi(v: i32) -> f64 {
    let v = if v == RSSI_UNDETECTED { RSSI_MIN } else { v };
    f64::from(v - RSSI_MIN) / f64::from(RSSI_MAX - RSSI_MIN)
}

/// Per-dimension min-max scaler for coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordScaler {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl CoordScaler {
    pub fn fit(coords: &Matrix) -> Result<Self> {
        if coords.cols() != 2 {
            return Err(Error::dim("fit_scaler", coords.shape(), (coords.rows(), 2)));
        }
        if coords.rows() == 0 {
            return Err(Error::Config("cannot fit a scaler on zero rows".into()));
        }
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for r in 0..coords.rows() {
            for d in 0..2 {
                min[d] = min[d].min(coords.get(r, d));
                max[d] = max[d].max(coords.get(r, d));
            }
        }
        for d in 0..2 {
            if max[d].is_nan() || max[d] <= min[d] {
                return Err(Error::Config(format!(
                    "coordinate dimension {d} is degenerate (min == max == {})",
                    min[d]
                )));
            }
        }
        Ok(Self { min, max })
    }

    /// Values outside the fitted range map outside `[0, 1]`.
    pub fn apply(&self, coords: &Matrix) -> Result<Matrix> {
        self.check(coords, "apply_scaler")?;
        Ok(Matrix::from_fn(coords.rows(), 2, |r, d| {
            (coords.get(r, d) - self.min[d]) / (self.max[d] - self.min[d])
        }))
    }

    pub fn invert(&self, scaled: &Matrix) -> Result<Matrix> {
        self.check(scaled, "invert_scaler")?;
        Ok(Matrix::from_fn(scaled.rows(), 2, |r, d| {
            scaled.get(r, d) * (self.max[d] - self.min[d]) + self.min[d]
        }))
    }

    fn check(&self, m: &Matrix, op: &'static str) -> Result<()> {
        if m.cols() == 2 {
            Ok(())
        } else {
            Err(Error::dim(op, m.shape(), (m.rows(), 2)))
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_rows(&[self.min, self.max]).expect("finite scaler")
    }

    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        if m.shape() != (2, 2) {
            return Err(Error::dim("scaler", m.shape(), (2, 2)));
        }
        Ok(Self {
            min: [m.get(0, 0), m.get(0, 1)],
            max: [m.get(1, 0), m.get(1, 1)],
        })
    }
}

/// Preprocessed fingerprints with coordinates still in their original units.
#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintSet {
    pub x: Matrix,
    pub coords: Matrix,
    pub aux: Vec<AuxLabel>,
}

impl FingerprintSet {
    pub fn from_records(records: &[RawRecord]) -> Result<Self> {
        let coords = Matrix::from_fn(records.len(), 2, |r, d| {
            if d == 0 {
                records[r].longitude
            } else {
                records[r].latitude
            }
        });
        Ok(Self {
            x: preprocess_rssi(records),
            coords,
            aux: records.iter().map(|r| r.aux).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(SET_KIND);
        c.push_meta("rows", self.len());
        c.push_record("x", self.x.clone());
        c.push_record("coords", self.coords.clone());
        c.push_record("aux", aux_matrix(&self.aux));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(SET_KIND)?;
        let x = c.record("x")?.clone();
        let coords = c.record("coords")?.clone();
        let aux = parse_aux(c.record("aux")?)?;
        if coords.rows() != x.rows() || aux.len() != x.rows() || coords.cols() != 2 {
            return Err(Error::Mismatch {
                key: "rows".into(),
                expected: x.rows().to_string(),
                found: format!("coords {:?}, aux {}", coords.shape(), aux.len()),
            });
        }
        Ok(Self { x, coords, aux })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    /// Reads either a cache file or a CSV, sniffing the cache magic.
    pub fn load_any(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(crate::checkpoint::MAGIC.as_bytes()) {
            Self::from_container(&Container::from_bytes(&bytes)?)
        } else {
            Self::from_records(&load_csv(path)?)
        }
    }
}

fn aux_matrix(aux: &[AuxLabel]) -> Matrix {
    Matrix::from_fn(aux.len(), 2, |r, c| {
        if c == 0 {
            aux[r].building as f64
        } else {
            aux[r].floor as f64
        }
    })
}

fn parse_aux(m: &Matrix) -> Result<Vec<AuxLabel>> {
    if m.cols() != 2 {
        return Err(Error::dim("aux", m.shape(), (m.rows(), 2)));
    }
    Ok((0..m.rows())
        .map(|r| AuxLabel {
            building: m.get(r, 0) as i64,
            floor: m.get(r, 1) as i64,
        })
        .collect())
}

/// Model-ready data: inputs in `[0, 1]`, scaled coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintDataset {
    pub x: Matrix,
    pub y: Matrix,
    pub scaler: CoordScaler,
    pub aux: Vec<AuxLabel>,
}

impl FingerprintDataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(indices),
            y: self.y.select_rows(indices),
            scaler: self.scaler,
            aux: indices.iter().map(|&i| self.aux[i]).collect(),
        }
    }
}

/// Seeded shuffle then split into `(train, test)` index lists.
pub fn split_indices(n: usize, train_frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Config(format!("train fraction must be in (0, 1), got {train_frac}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, Stream::Split));
    let n_train = ((train_frac * n as f64).round() as usize).min(n);
    let test = idx.split_off(n_train);
    Ok((idx, test))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTest {
    pub train: FingerprintDataset,
    pub test: FingerprintDataset,
}

/// Splits a set and scales coordinates with statistics from the training
/// rows only.
pub fn prepare(set: &FingerprintSet, train_frac: f64, seed: u64) -> Result<TrainTest> {
    let (train_idx, test_idx) = split_indices(set.len(), train_frac, seed)?;
    let train_coords = set.coords.select_rows(&train_idx);
    let scaler = CoordScaler::fit(&train_coords)?;
    let build = |idx: &[usize], coords: Matrix| -> Result<FingerprintDataset> {
        Ok(FingerprintDataset {
            x: set.x.select_rows(idx),
            y: scaler.apply(&coords)?,
            scaler,
            aux: idx.iter().map(|&i| set.aux[i]).collect(),
        })
    };
    Ok(TrainTest {
        train: build(&train_idx, train_coords)?,
        test: build(&test_idx, set.coords.select_rows(&test_idx))?,
    })
}

/// Row indices (ascending) of a seeded `ceil(fraction * n)` subsample. For a
/// fixed seed the permutation is shared across fractions, so smaller
/// fractions select subsets of larger ones.
pub fn labeled_fraction_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction must be in (0, 1], got {fraction}")));
    }
    // tolerate representation error such as 0.1 * 16000 = 1600.0000000000002
    let count = ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let count = count.min(n);
    if count == 0 {
        return Err(Error::Config(format!(
            "fraction {fraction} of {n} rows selects no rows"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, Stream::Subsample));
    idx.truncate(count);
    idx.sort_unstable();
    Ok(idx)
}

pub fn labeled_fraction(
    train: &FingerprintDataset,
    fraction: f64,
    seed: u64,
) -> Result<FingerprintDataset> {
    Ok(train.subset(&labeled_fraction_indices(train.len(), fraction, seed)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn header() -> String {
        let mut h: Vec<String> = (1..=NUM_WAPS).map(|i| format!("WAP{i:03}")).collect();
        h.extend(
            ["LONGITUDE", "LATITUDE", "FLOOR", "BUILDINGID", "SPACEID"]
                .iter()
                .map(|s| s.to_string()),
        );
        h.join(",")
    }

    fn row(rssi: &[i32], lon: &str, lat: &str) -> String {
        let mut cells: Vec<String> = (0..NUM_WAPS)
            .map(|i| rssi.get(i).copied().unwrap_or(100).to_string())
            .collect();
        cells.extend([lon.into(), lat.into(), "2".into(), "1".into(), "106".into()]);
        cells.join(",")
    }

    fn write(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn sentinel_and_valid_rows_load() {
        let f = write(&[
            header(),
            row(&[], "-7541.26", "4864921.9"),
            row(&[-40, 0, -110], "-7536.6", "4864934.1"),
        ]);
        let recs = load_csv(f.path()).unwrap();
        assert_eq!(recs.len(), 2);
        assert!(recs[0].rssi.iter().all(|&v| v == 100));
        assert_eq!(&recs[1].rssi[..3], &[-40, 0, -110]);
        assert_eq!(recs[1].aux, AuxLabel { building: 1, floor: 2 });
        assert_eq!(recs[0].longitude, -7541.26);
    }

    #[test]
    fn out_of_range_rssi_names_the_line() {
        let f = write(&[header(), row(&[], "1", "2"), row(&[-3, 5], "1", "2")]);
        match load_csv(f.path()) {
            Err(Error::Csv { line, detail, .. }) => {
                assert_eq!(line, 3);
                assert!(detail.contains("WAP002"), "{detail}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_rows_are_reported() {
        let f = write(&[header(), row(&[], "1", "2"), "1,2,3".into()]);
        assert!(matches!(load_csv(f.path()), Err(Error::Csv { line: 3, .. })));
        let mut bad = row(&[], "1", "2");
        bad = bad.replacen("100", "abc", 1);
        let f = write(&[header(), bad]);
        assert!(matches!(load_csv(f.path()), Err(Error::Csv { line: 2, .. })));
        let f = write(&[header(), row(&[], "east", "2")]);
        assert!(matches!(load_csv(f.path()), Err(Error::Csv { line: 2, .. })));
        let f = write(&["WAP001,LONGITUDE,LATITUDE".into(), "100,1,2".into()]);
        assert!(matches!(load_csv(f.path()), Err(Error::Csv { line: 1, .. })));
        assert!(matches!(
            load_csv(Path::new("/definitely/not/here.csv")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn rssi_normalization() {
        assert_eq!(normalize_rssi(100), 0.0);
        assert_eq!(normalize_rssi(-110), 0.0);
        assert_eq!(normalize_rssi(0), 1.0);
        assert_eq!(normalize_rssi(-55), 0.5);
    }

    #[test]
    fn scaler_endpoints_round_trip_and_extrapolation() {
        let coords = Matrix::from_rows(&[[-7600.0, 4864700.0], [-7300.0, 4865000.0], [-7450.0, 4864800.0]])
            .unwrap();
        let s = CoordScaler::fit(&coords).unwrap();
        let scaled = s.apply(&coords).unwrap();
        assert_eq!(scaled.row(0), &[0.0, 0.0]);
        assert_eq!(scaled.row(1), &[1.0, 1.0]);
        let back = s.invert(&scaled).unwrap();
        for (a, b) in back.as_slice().iter().zip(coords.as_slice()) {
            assert!((a - b).abs() <= 1e-12 * b.abs());
        }
        let below = s.apply(&Matrix::from_rows(&[[-7700.0, 4864600.0]]).unwrap()).unwrap();
        assert!(below.get(0, 0) < 0.0 && below.get(0, 1) < 0.0);
        let flat = Matrix::from_rows(&[[1.0, 2.0], [1.0, 3.0]]).unwrap();
        assert!(CoordScaler::fit(&flat).is_err());
    }

    #[test]
    fn split_is_a_deterministic_partition() {
        let (tr, te) = split_indices(10, 0.8, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        assert_eq!(split_indices(10, 0.8, 3).unwrap(), (tr.clone(), te.clone()));
        let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(split_indices(10, 1.0, 0).is_err());
        assert!(split_indices(10, 0.0, 0).is_err());
    }

    #[test]
    fn labeled_fraction_sizes_and_nesting() {
        assert_eq!(labeled_fraction_indices(50, 1.0, 1).unwrap(), (0..50).collect::<Vec<_>>());
        assert_eq!(labeled_fraction_indices(16000, 0.1, 1).unwrap().len(), 1600);
        assert_eq!(labeled_fraction_indices(7, 0.5, 1).unwrap().len(), 4);
        assert!(labeled_fraction_indices(0, 0.5, 1).is_err());
        assert!(labeled_fraction_indices(10, 0.0, 1).is_err());
        for seed in 0..5 {
            let small = labeled_fraction_indices(1000, 0.05, seed).unwrap();
            let large = labeled_fraction_indices(1000, 0.25, seed).unwrap();
            assert!(small.iter().all(|i| large.binary_search(i).is_ok()));
        }
    }

    #[test]
    fn prepare_fits_scaler_on_training_rows_only() {
        let n = 40;
        let records: Vec<RawRecord> = (0..n)
            .map(|i| RawRecord {
                rssi: vec![if i % 3 == 0 { 100 } else { -(i as i32) }; NUM_WAPS],
                longitude: i as f64 * 2.0,
                latitude: 100.0 - i as f64,
                aux: AuxLabel { building: (i % 3) as i64, floor: (i % 4) as i64 },
            })
            .collect();
        let set = FingerprintSet::from_records(&records).unwrap();
        let tt = prepare(&set, 0.8, 11).unwrap();
        assert_eq!(tt.train.len() + tt.test.len(), n);
        let train_only = CoordScaler::fit(
            &tt.train.scaler.invert(&tt.train.y).unwrap(),
        )
        .unwrap();
        for d in 0..2 {
            assert!((train_only.min[d] - tt.train.scaler.min[d]).abs() < 1e-9);
            assert!((train_only.max[d] - tt.train.scaler.max[d]).abs() < 1e-9);
        }
        assert!(tt.train.y.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(tt.train.x.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(prepare(&set, 0.8, 11).unwrap(), tt);
    }

    #[test]
    fn set_cache_round_trip() {
        let f = write(&[header(), row(&[-40], "1.5", "2.5"), row(&[-80, -1], "3.5", "4.5")]);
        let set = FingerprintSet::load_any(f.path()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cache = dir.path().join("set.bin");
        set.save(&cache).unwrap();
        assert_eq!(FingerprintSet::load_any(&cache).unwrap(), set);
    }
}
