//! Brute-force k-nearest-neighbours coordinate regressor.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{stream, Stream};

/// Candidate neighbourhood sizes tried by [`KnnRegressor::tune`].
pub const DEFAULT_K_GRID: [usize; 5] = [1, 3, 5, 7, 9];

#[derive(Debug, Clone)]
pub struct KnnRegressor {
    k: usize,
    train_x: Matrix,
    train_y: Matrix,
}

impl KnnRegressor {
    pub fn new(k: usize, train_x: Matrix, train_y: Matrix) -> Result<Self> {
        if train_x.rows() == 0 {
            return Err(Error::EmptyTrainingSet);
        }
        if train_x.rows() != train_y.rows() {
            return Err(Error::dim("knn", train_x.shape(), train_y.shape()));
        }
        if k == 0 || k > train_x.rows() {
            return Err(Error::Config(format!(
                "k must be in [1, {}], got {k}",
                train_x.rows()
            )));
        }
        Ok(Self { k, train_x, train_y })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Unweighted mean of the `k` nearest training targets (Euclidean
    /// distance, ties broken by lower training index).
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.predict_many(x, &[self.k])?.remove(0))
    }

    /// Predictions for several `k` at once from a single neighbour search.
    fn predict_many(&self, x: &Matrix, ks: &[usize]) -> Result<Vec<Matrix>> {
        if x.cols() != self.train_x.cols() {
            return Err(Error::dim("knn_predict", x.shape(), self.train_x.shape()));
        }
        let k_max = ks.iter().copied().max().unwrap_or(1).min(self.train_x.rows());
        let out_dim = self.train_y.cols();
        let mut outs: Vec<Matrix> = ks.iter().map(|_| Matrix::zeros(x.rows(), out_dim)).collect();
        let mut dists: Vec<(f64, usize)> = Vec::with_capacity(self.train_x.rows());
        for q in 0..x.rows() {
            let query = x.row(q);
            dists.clear();
            dists.extend((0..self.train_x.rows()).map(|i| (sq_dist(query, self.train_x.row(i)), i)));
            let neighbours = nearest(&mut dists, k_max);
            for (out, &k) in outs.iter_mut().zip(ks) {
                let k = k.min(k_max);
                let row = out.row_mut(q);
                for &(_, i) in &neighbours[..k] {
                    for (o, v) in row.iter_mut().zip(self.train_y.row(i)) {
                        *o += v;
                    }
                }
                row.iter_mut().for_each(|v| *v /= k as f64);
            }
        }
        Ok(outs)
    }

    /// Selects `k` from `candidates` by RMSE on a seeded validation carve of
    /// the training data, then refits on all of it.
    pub fn tune(
        train_x: &Matrix,
        train_y: &Matrix,
        candidates: &[usize],
        val_fraction: f64,
        seed: u64,
    ) -> Result<(Self, Vec<(usize, f64)>)> {
        if train_x.rows() == 0 {
            return Err(Error::EmptyTrainingSet);
        }
        if candidates.is_empty() {
            return Err(Error::Config("k candidate list is empty".into()));
        }
        let n = train_x.rows();
        let (fit_idx, val_idx) = carve(n, val_fraction, seed);
        let fit = KnnRegressor::new(1, train_x.select_rows(&fit_idx), train_y.select_rows(&fit_idx))?;
        let usable: Vec<usize> = candidates
            .iter()
            .copied()
            .filter(|&k| k >= 1 && k <= fit_idx.len())
            .collect();
        if usable.is_empty() {
            return Err(Error::Config(format!(
                "no k candidate fits {} training rows",
                fit_idx.len()
            )));
        }
        let vx = train_x.select_rows(&val_idx);
        let vy = train_y.select_rows(&val_idx);
        let preds = fit.predict_many(&vx, &usable)?;
        let mut scores = Vec::with_capacity(usable.len());
        for (k, p) in usable.iter().zip(&preds) {
            scores.push((*k, crate::experiments::rmse(p, &vy)?));
        }
        let best = scores
            .iter()
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .map(|&(k, _)| k)
            .expect("non-empty");
        Ok((KnnRegressor::new(best, train_x.clone(), train_y.clone())?, scores))
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn by_distance(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

fn nearest(dists: &mut [(f64, usize)], k: usize) -> &[(f64, usize)] {
    if k < dists.len() {
        dists.select_nth_unstable_by(k - 1, by_distance);
    }
    let head = &mut dists[..k];
    head.sort_unstable_by(by_distance);
    head
}

/// Validation carve: at least one row on each side when `n >= 2`.
fn carve(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    if n < 2 {
        return (idx.clone(), idx);
    }
    idx.shuffle(&mut stream(seed, Stream::Validation));
    let n_val = ((val_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let val = idx.split_off(n - n_val);
    (idx, val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hand_data() -> (Matrix, Matrix) {
        let x = Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0], [0.0, 2.0], [3.0, 3.0], [-1.0, -1.0]])
            .unwrap();
        let y = Matrix::from_rows(&[[0.0, 1.0], [1.0, 1.0], [2.0, 0.0], [3.0, 3.0], [4.0, 2.0]])
            .unwrap();
        (x, y)
    }

    #[test]
    fn exact_match_with_k1() {
        let (x, y) = hand_data();
        let knn = KnnRegressor::new(1, x.clone(), y.clone()).unwrap();
        assert_eq!(knn.predict(&x).unwrap(), y);
    }

    #[test]
    fn k_equal_n_gives_global_mean() {
        let (x, y) = hand_data();
        let knn = KnnRegressor::new(5, x, y.clone()).unwrap();
        let q = Matrix::from_rows(&[[10.0, -4.0], [0.3, 0.1]]).unwrap();
        let p = knn.predict(&q).unwrap();
        let mean = y.mean_rows();
        for r in 0..2 {
            for c in 0..2 {
                assert!((p.get(r, c) - mean.get(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_nearest_from_exhaustive_table() {
        let (x, y) = hand_data();
        let knn = KnnRegressor::new(2, x.clone(), y.clone()).unwrap();
        let q = [0.9, 0.4];
        // exhaustive distance table and a stable sort is the oracle
        let mut table: Vec<(f64, usize)> = (0..5)
            .map(|i| {
                let d: f64 = x.row(i).iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                (d, i)
            })
            .collect();
        table.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let (a, b) = (table[0].1, table[1].1);
        assert_eq!((a, b), (1, 0));
        let expected = [(y.get(a, 0) + y.get(b, 0)) / 2.0, (y.get(a, 1) + y.get(b, 1)) / 2.0];
        let p = knn.predict(&Matrix::row_vector(&q).unwrap()).unwrap();
        assert_eq!(p.row(0), &expected);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let x = Matrix::from_rows(&[[1.0], [-1.0], [1.0]]).unwrap();
        let y = Matrix::from_rows(&[[10.0, 0.0], [20.0, 0.0], [30.0, 0.0]]).unwrap();
        let knn = KnnRegressor::new(1, x, y).unwrap();
        let p = knn.predict(&Matrix::from_rows(&[[0.0], [1.0]]).unwrap()).unwrap();
        assert_eq!(p.get(0, 0), 10.0);
        assert_eq!(p.get(1, 0), 10.0);
    }

    #[test]
    fn construction_errors() {
        assert!(matches!(
            KnnRegressor::new(1, Matrix::zeros(0, 3), Matrix::zeros(0, 2)),
            Err(Error::EmptyTrainingSet)
        ));
        let (x, y) = hand_data();
        assert!(KnnRegressor::new(6, x.clone(), y.clone()).is_err());
        assert!(KnnRegressor::new(0, x.clone(), y.clone()).is_err());
        let knn = KnnRegressor::new(1, x, y).unwrap();
        assert!(knn.predict(&Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn tuning_picks_a_candidate_and_refits() {
        let x = Matrix::from_fn(60, 3, |r, c| ((r * 7 + c * 3) % 11) as f64 / 11.0);
        let y = Matrix::from_fn(60, 2, |r, c| x.get(r, c) * 0.5 + x.get(r, 2) * 0.1);
        let (knn, scores) = KnnRegressor::tune(&x, &y, &DEFAULT_K_GRID, 0.2, 4).unwrap();
        assert_eq!(scores.len(), 5);
        assert!(DEFAULT_K_GRID.contains(&knn.k()));
        let best = scores.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
        assert_eq!(scores.iter().find(|s| s.0 == knn.k()).unwrap().1, best);
    }

    proptest! {
        #[test]
        fn prediction_within_neighbour_hull_and_order_invariant(
            pts in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0, 0.0f64..1.0, 0.0f64..1.0), 6..20),
            q in (-5.0f64..5.0, -5.0f64..5.0),
            k in 1usize..5,
        ) {
            let x = Matrix::from_fn(pts.len(), 2, |r, c| if c == 0 { pts[r].0 } else { pts[r].1 });
            let y = Matrix::from_fn(pts.len(), 2, |r, c| if c == 0 { pts[r].2 } else { pts[r].3 });
            let knn = KnnRegressor::new(k, x.clone(), y.clone()).unwrap();
            let query = Matrix::row_vector(&[q.0, q.1]).unwrap();
            let p = knn.predict(&query).unwrap();

            let mut d: Vec<(f64, usize)> = (0..pts.len())
                .map(|i| (sq_dist(query.row(0), x.row(i)), i))
                .collect();
            d.sort_by(by_distance);
            for c in 0..2 {
                let vals: Vec<f64> = d[..k].iter().map(|&(_, i)| y.get(i, c)).collect();
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(p.get(0, c) >= lo - 1e-12 && p.get(0, c) <= hi + 1e-12);
            }

            // reversing the training order changes nothing absent exact ties
            let distinct = d.windows(2).all(|w| w[0].0 != w[1].0);
            if distinct {
                let rev: Vec<usize> = (0..pts.len()).rev().collect();
                let knn_rev = KnnRegressor::new(k, x.select_rows(&rev), y.select_rows(&rev)).unwrap();
                let pr = knn_rev.predict(&query).unwrap();
                for c in 0..2 {
                    prop_assert!((pr.get(0, c) - p.get(0, c)).abs() < 1e-12);
                }
            }
        }
    }
}
