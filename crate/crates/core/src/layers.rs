//! Dense, ReLU and inverted-dropout layers with explicit backward rules.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Gradients produced by one layer's backward pass. `param_grads` is aligned
/// with the layer's parameter list.
#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub input_grad: Matrix,
    pub param_grads: Vec<Matrix>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Affine layer `x W + b` with `W: in_dim x out_dim` and `b: 1 x out_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl DenseLayer {
    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Config(format!(
                "dense layer dims must be >= 1, got {in_dim}x{out_dim}"
            )));
        }
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let dist = Uniform::new(-limit, limit).expect("finite positive limit");
        let weight = Matrix::from_fn(in_dim, out_dim, |_, _| dist.sample(rng));
        Ok(Self {
            weight,
            bias: Matrix::zeros(1, out_dim),
        })
    }

    pub fn from_params(weight: Matrix, bias: Matrix) -> Result<Self> {
        if bias.rows() != 1 || bias.cols() != weight.cols() {
            return Err(Error::dim("dense bias", weight.shape(), bias.shape()));
        }
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim() {
            return Err(Error::dim("dense_forward", x.shape(), self.weight.shape()));
        }
        x.matmul(&self.weight)?.add_row(&self.bias)
    }

    /// Backward pass given the forward input and `dL/d(output)`.
    pub fn backward(&self, x: &Matrix, upstream: &Matrix) -> Result<LayerGrad> {
        let (weight_grad, bias_grad) = self.param_grads(x, upstream)?;
        Ok(LayerGrad {
            input_grad: upstream.matmul_nt(&self.weight)?,
            param_grads: vec![weight_grad, bias_grad],
        })
    }

    /// Parameter gradients only, skipping the input gradient.
    pub fn param_grads(&self, x: &Matrix, upstream: &Matrix) -> Result<(Matrix, Matrix)> {
        if x.rows() != upstream.rows() || upstream.cols() != self.out_dim() {
            return Err(Error::dim("dense_backward", x.shape(), upstream.shape()));
        }
        Ok((x.matmul_tn(upstream)?, upstream.sum_rows()))
    }

    pub fn params(&self) -> [&Matrix; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Matrix; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| v.max(0.0))
}

/// Passes `upstream` where the forward input was strictly positive.
pub fn relu_backward(x: &Matrix, upstream: &Matrix) -> Result<Matrix> {
    if x.shape() != upstream.shape() {
        return Err(Error::dim("relu_backward", x.shape(), upstream.shape()));
    }
    let data = x
        .as_slice()
        .iter()
        .zip(upstream.as_slice())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Matrix::from_vec(x.rows(), x.cols(), data)
}

/// Inverted dropout: kept activations are scaled by `1 / (1 - rate)` during
/// training so evaluation is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutLayer {
    rate: f64,
    last_mode: Option<Mode>,
    last_mask: Option<Matrix>,
}

impl DropoutLayer {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        Ok(Self {
            rate,
            last_mode: None,
            last_mask: None,
        })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn last_mask(&self) -> Option<&Matrix> {
        self.last_mask.as_ref()
    }

    /// Draws a keep-mask with entries in `{0, 1/(1-rate)}`.
    pub fn sample_mask<R: Rng + ?Sized>(&self, rows: usize, cols: usize, rng: &mut R) -> Matrix {
        dropout_mask(self.rate, rows, cols, rng)
    }

    pub fn forward<R: Rng + ?Sized>(&mut self, x: &Matrix, mode: Mode, rng: &mut R) -> Matrix {
        match mode {
            Mode::Eval => {
                self.last_mode = Some(Mode::Eval);
                self.last_mask = None;
                x.clone()
            }
            Mode::Train => {
                let mask = self.sample_mask(x.rows(), x.cols(), rng);
                let out = x.mul(&mask).expect("mask shaped like input");
                self.last_mode = Some(Mode::Train);
                self.last_mask = Some(mask);
                out
            }
        }
    }

    /// Training-mode forward with a caller-supplied mask.
    pub fn forward_with_mask(&mut self, x: &Matrix, mask: Matrix) -> Result<Matrix> {
        let out = x.mul(&mask)?;
        self.last_mode = Some(Mode::Train);
        self.last_mask = Some(mask);
        Ok(out)
    }

    pub fn backward(&self, upstream: &Matrix) -> Result<Matrix> {
        match (self.last_mode, &self.last_mask) {
            (Some(Mode::Eval), _) => Ok(upstream.clone()),
            (Some(Mode::Train), Some(mask)) => upstream.mul(mask),
            _ => Err(Error::State(
                "dropout backward called before a forward pass".into(),
            )),
        }
    }
}

pub(crate) fn dropout_mask<R: Rng + ?Sized>(
    rate: f64,
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> Matrix {
    if rate == 0.0 {
        return Matrix::filled(rows, cols, 1.0);
    }
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    Matrix::from_fn(rows, cols, |_, _| {
        if rng.random::<f64>() < keep {
            scale
        } else {
            0.0
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, FnObjective};
    use crate::rng::{stream, Stream};

    #[test]
    fn glorot_bound_for_first_encoder_layer() {
        let layer = DenseLayer::init(520, 512, &mut stream(7, Stream::Init)).unwrap();
        let bound = (6.0f64 / 1032.0).sqrt();
        assert!((bound - 0.0762).abs() < 1e-4);
        assert!(layer.weight.as_slice().iter().all(|w| w.abs() < bound));
        assert!(layer.bias.as_slice().iter().all(|&b| b == 0.0));
        assert_eq!(layer.weight.shape(), (520, 512));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = DenseLayer::init(8, 4, &mut stream(3, Stream::Init)).unwrap();
        let b = DenseLayer::init(8, 4, &mut stream(3, Stream::Init)).unwrap();
        let c = DenseLayer::init(8, 4, &mut stream(4, Stream::Init)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn single_weight_bound() {
        for seed in 0..20 {
            let layer = DenseLayer::init(1, 1, &mut stream(seed, Stream::Init)).unwrap();
            assert!(layer.weight.as_slice()[0].abs() < 3f64.sqrt());
        }
        assert!(DenseLayer::init(0, 3, &mut stream(0, Stream::Init)).is_err());
    }

    #[test]
    fn dense_forward_examples() {
        let ident = DenseLayer::from_params(Matrix::identity(3), Matrix::zeros(1, 3)).unwrap();
        let x = Matrix::from_fn(4, 3, |r, c| (r * 3 + c) as f64);
        let out = ident.forward(&x).unwrap();
        assert_eq!(out, x);
        assert_eq!(out.rows(), 4);

        let tiny = DenseLayer::from_params(
            Matrix::from_vec(1, 1, vec![2.0]).unwrap(),
            Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
        )
        .unwrap();
        let y = tiny.forward(&Matrix::from_vec(1, 1, vec![3.0]).unwrap()).unwrap();
        assert_eq!(y.as_slice(), &[7.0]);
        assert!(tiny.forward(&Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn relu_forward_and_gate() {
        let x = Matrix::from_rows(&[[-1.0, 0.0, 2.0]]).unwrap();
        assert_eq!(relu(&x).as_slice(), &[0.0, 0.0, 2.0]);
        let pos = Matrix::from_rows(&[[0.5, 3.0]]).unwrap();
        assert_eq!(relu(&pos), pos);
        let g = relu_backward(
            &Matrix::from_rows(&[[-1.0, 2.0]]).unwrap(),
            &Matrix::from_rows(&[[5.0, 5.0]]).unwrap(),
        )
        .unwrap();
        assert_eq!(g.as_slice(), &[0.0, 5.0]);
        let tie = relu_backward(
            &Matrix::from_rows(&[[0.0]]).unwrap(),
            &Matrix::from_rows(&[[1.0]]).unwrap(),
        )
        .unwrap();
        assert_eq!(tie.as_slice(), &[0.0]);
    }

    #[test]
    fn dropout_degenerate_and_eval() {
        let x = Matrix::from_fn(3, 5, |r, c| (r + c) as f64 + 0.5);
        let mut rng = stream(1, Stream::Noise);
        let mut zero = DropoutLayer::new(0.0).unwrap();
        assert_eq!(zero.forward(&x, Mode::Train, &mut rng), x);
        let mut d = DropoutLayer::new(0.3).unwrap();
        assert_eq!(d.forward(&x, Mode::Eval, &mut rng), x);
        assert_eq!(d.backward(&x).unwrap(), x);
        assert!(DropoutLayer::new(1.0).is_err());
        assert!(DropoutLayer::new(-0.1).is_err());
    }

    #[test]
    fn dropout_expectation_is_preserved() {
        let x = Matrix::filled(100, 1000, 1.0);
        let mut d = DropoutLayer::new(0.3).unwrap();
        let out = d.forward(&x, Mode::Train, &mut stream(11, Stream::Noise));
        assert!((out.mean() - 1.0).abs() < 0.01, "mean {}", out.mean());
        let scale = 1.0 / 0.7;
        assert!(out
            .as_slice()
            .iter()
            .all(|&v| v == 0.0 || (v - scale).abs() < 1e-15));
    }

    #[test]
    fn dropout_backward_reuses_mask() {
        let mut d = DropoutLayer::new(0.5).unwrap();
        assert!(matches!(d.backward(&Matrix::zeros(1, 1)), Err(Error::State(_))));
        let x = Matrix::filled(4, 6, 2.0);
        let out = d.forward(&x, Mode::Train, &mut stream(5, Stream::Noise));
        let mask = d.last_mask().unwrap().clone();
        for (o, m) in out.as_slice().iter().zip(mask.as_slice()) {
            assert_eq!(*o == 0.0, *m == 0.0);
        }
        let g = d.backward(&Matrix::filled(4, 6, 1.0)).unwrap();
        assert_eq!(g, mask);
        let mut replay = DropoutLayer::new(0.5).unwrap();
        assert_eq!(replay.forward_with_mask(&x, mask).unwrap(), out);
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        for seed in 0..5 {
            let mut rng = stream(seed, Stream::Init);
            let mut layer = DenseLayer::init(6, 4, &mut rng).unwrap();
            layer.bias = Matrix::from_fn(1, 4, |_, c| 0.1 * c as f64 - 0.15);
            let x = Matrix::from_fn(5, 6, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            // Weighted sum so every output entry gets a distinct upstream gradient.
            let weights = Matrix::from_fn(5, 4, |r, c| 0.3 * r as f64 - 0.7 * c as f64 + 0.2);

            let value = |p: &[Matrix]| -> Result<f64> {
                let l = DenseLayer::from_params(p[0].clone(), p[1].clone())?;
                Ok(l.forward(&p[2])?.mul(&weights)?.sum())
            };
            let gradient = |p: &[Matrix]| -> Result<Vec<Matrix>> {
                let l = DenseLayer::from_params(p[0].clone(), p[1].clone())?;
                let g = l.backward(&p[2], &weights)?;
                Ok(vec![g.param_grads[0].clone(), g.param_grads[1].clone(), g.input_grad])
            };
            let mut f = FnObjective { value, gradient };
            let report =
                grad_check(&mut f, &[layer.weight, layer.bias, x], 1e-5, 1e-4).unwrap();
            assert!(report.passed, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn relu_and_dropout_backward_match_finite_differences() {
        for seed in 0..5 {
            let mut rng = stream(seed, Stream::Noise);
            // keep inputs away from the kink at zero
            let x = Matrix::from_fn(4, 5, |_, _| {
                let v: f64 = rng.random::<f64>() * 2.0 - 1.0;
                if v.abs() < 0.05 { v + 0.2 } else { v }
            });
            let mask = dropout_mask(0.3, 4, 5, &mut rng);
            let weights = Matrix::from_fn(4, 5, |r, c| (r as f64 + 1.0) * 0.5 - c as f64 * 0.1);

            let value = |p: &[Matrix]| -> Result<f64> {
                Ok(relu(&p[0]).mul(&mask)?.mul(&weights)?.sum())
            };
            let gradient = |p: &[Matrix]| -> Result<Vec<Matrix>> {
                let mut d = DropoutLayer::new(0.3)?;
                d.forward_with_mask(&relu(&p[0]), mask.clone())?;
                let g = d.backward(&weights)?;
                Ok(vec![relu_backward(&p[0], &g)?])
            };
            let mut f = FnObjective { value, gradient };
            let report = grad_check(&mut f, &[x], 1e-5, 1e-4).unwrap();
            assert!(report.passed, "seed {seed}: {report:?}");
        }
    }
}
