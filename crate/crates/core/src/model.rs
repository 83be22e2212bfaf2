//! Variational information bottleneck regressor.
//!
//! The encoder maps a fingerprint `x` to a diagonal Gaussian `p(z|x)` with
//! mean `mu` and log-variance `logvar`; a latent code is drawn as
//! `z = mu + exp(logvar / 2) * eps` with `eps ~ N(0, I)`; the predictor maps
//! `z` to coordinates. Training minimizes
//!
//! ```text
//! total = recon + beta * kl
//! recon = mean over batch, MC samples and output dims of (y - y_hat)^2
//! kl    = mean over batch of 1/2 * sum_d (mu^2 + exp(logvar) - logvar - 1)
//! ```
//!
//! which is the negative of the variational objective under a fixed-variance
//! Gaussian output likelihood and a standard normal prior on `z`.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::layers::{dropout_mask, relu, relu_backward, DenseLayer, Mode};
use crate::matrix::Matrix;

/// Number of regression targets (longitude, latitude).
pub const OUTPUT_DIM: usize = 2;

pub const MODEL_KIND: &str = "vib-model";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VibConfig {
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
}

impl Default for VibConfig {
    fn default() -> Self {
        Self {
            input_dim: 520,
            encoder_hidden: 512,
            latent_dim: 5,
            predictor_hidden: 512,
            predictor_layers: 3,
            dropout_rate: 0.3,
            beta: 1e-6,
            train_mc_samples: 1,
            eval_mc_samples: 16,
            logvar_min: -10.0,
            logvar_max: 10.0,
        }
    }
}

impl VibConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("input_dim", self.input_dim),
            ("encoder_hidden", self.encoder_hidden),
            ("latent_dim", self.latent_dim),
            ("predictor_hidden", self.predictor_hidden),
            ("predictor_layers", self.predictor_layers),
            ("train_mc_samples", self.train_mc_samples),
            ("eval_mc_samples", self.eval_mc_samples),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        // beta == 0 is allowed: it is the no-compression ablation.
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.logvar_min >= self.logvar_max
            || !self.logvar_min.is_finite()
            || !self.logvar_max.is_finite()
        {
            return Err(Error::Config(format!(
                "logvar clamp must satisfy lo < hi, got [{}, {}]",
                self.logvar_min, self.logvar_max
            )));
        }
        Ok(())
    }

    fn write_meta(&self, c: &mut Container) {
        c.push_meta("input_dim", self.input_dim);
        c.push_meta("encoder_hidden", self.encoder_hidden);
        c.push_meta("latent_dim", self.latent_dim);
        c.push_meta("predictor_hidden", self.predictor_hidden);
        c.push_meta("predictor_layers", self.predictor_layers);
        c.push_f64("dropout_rate", self.dropout_rate);
        c.push_f64("beta", self.beta);
        c.push_meta("train_mc_samples", self.train_mc_samples);
        c.push_meta("eval_mc_samples", self.eval_mc_samples);
        c.push_f64("logvar_min", self.logvar_min);
        c.push_f64("logvar_max", self.logvar_max);
    }

    fn read_meta(c: &Container) -> Result<Self> {
        Ok(Self {
            input_dim: c.meta("input_dim")?,
            encoder_hidden: c.meta("encoder_hidden")?,
            latent_dim: c.meta("latent_dim")?,
            predictor_hidden: c.meta("predictor_hidden")?,
            predictor_layers: c.meta("predictor_layers")?,
            dropout_rate: c.meta("dropout_rate")?,
            beta: c.meta("beta")?,
            train_mc_samples: c.meta("train_mc_samples")?,
            eval_mc_samples: c.meta("eval_mc_samples")?,
            logvar_min: c.meta("logvar_min")?,
            logvar_max: c.meta("logvar_max")?,
        })
    }
}

/// Diagonal Gaussian posterior, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLatent {
    pub mu: Matrix,
    pub logvar: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub beta_kl: f64,
}

impl LossBreakdown {
    pub fn new(recon: f64, kl: f64, beta: f64) -> Self {
        let beta_kl = beta * kl;
        Self {
            total: recon + beta_kl,
            recon,
            kl,
            beta_kl,
        }
    }

    /// Relative residual of `total - recon - beta_kl`.
    pub fn decomposition_residual(&self) -> f64 {
        let scale = self.total.abs().max(f64::MIN_POSITIVE);
        (self.total - self.recon - self.beta_kl).abs() / scale
    }
}

/// `z = mu + exp(logvar / 2) * eps`.
pub fn reparameterize(lat: &GaussianLatent, eps: &Matrix) -> Result<Matrix> {
    if eps.shape() != lat.mu.shape() {
        return Err(Error::dim("reparameterize", lat.mu.shape(), eps.shape()));
    }
    lat.logvar.scale(0.5)?.exp()?.mul(eps)?.add(&lat.mu)
}

/// Batch-mean `KL(N(mu, exp(logvar)) || N(0, I))`.
pub fn kl_standard_normal(lat: &GaussianLatent) -> f64 {
    let rows = lat.mu.rows();
    if rows == 0 {
        return 0.0;
    }
    let total: f64 = lat
        .mu
        .as_slice()
        .iter()
        .zip(lat.logvar.as_slice())
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - lv - 1.0))
        .sum();
    // each term is >= 0, guard against -0.0 style rounding
    (total / rows as f64).max(0.0)
}

/// Frozen randomness for one loss evaluation: a reparameterization draw and
/// one dropout mask per predictor block, for each Monte Carlo sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    pub eps: Vec<Matrix>,
    pub masks: Vec<Vec<Matrix>>,
}

impl Noise {
    pub fn sample<R: Rng + ?Sized>(config: &VibConfig, batch: usize, rng: &mut R) -> Self {
        let mut eps = Vec::with_capacity(config.train_mc_samples);
        let mut masks = Vec::with_capacity(config.train_mc_samples);
        for _ in 0..config.train_mc_samples {
            eps.push(standard_normal(batch, config.latent_dim, rng));
            masks.push(
                (0..config.predictor_layers)
                    .map(|_| dropout_mask(config.dropout_rate, batch, config.predictor_hidden, rng))
                    .collect(),
            );
        }
        Self { eps, masks }
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VibModel {
    pub config: VibConfig,
    pub encoder: DenseLayer,
    pub mu_head: DenseLayer,
    pub logvar_head: DenseLayer,
    /// Hidden predictor blocks, each followed by ReLU and dropout.
    pub predictor: Vec<DenseLayer>,
    pub output: DenseLayer,
}

struct EncoderTrace {
    hidden_pre: Matrix,
    hidden: Matrix,
    logvar_raw: Matrix,
    latent: GaussianLatent,
}

struct PredictorTrace {
    /// Input of each hidden block's dense layer.
    inputs: Vec<Matrix>,
    /// Pre-activation of each hidden block.
    pre: Vec<Matrix>,
    /// Input of the output layer.
    last: Matrix,
    out: Matrix,
}

impl VibModel {
    pub fn new<R: Rng + ?Sized>(config: VibConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let encoder = DenseLayer::init(config.input_dim, config.encoder_hidden, rng)?;
        let mu_head = DenseLayer::init(config.encoder_hidden, config.latent_dim, rng)?;
        let logvar_head = DenseLayer::init(config.encoder_hidden, config.latent_dim, rng)?;
        let mut predictor = Vec::with_capacity(config.predictor_layers);
        let mut width = config.latent_dim;
        for _ in 0..config.predictor_layers {
            predictor.push(DenseLayer::init(width, config.predictor_hidden, rng)?);
            width = config.predictor_hidden;
        }
        let output = DenseLayer::init(width, OUTPUT_DIM, rng)?;
        Ok(Self {
            config,
            encoder,
            mu_head,
            logvar_head,
            predictor,
            output,
        })
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for layer in ["encoder", "mu_head", "logvar_head"] {
            names.push(format!("{layer}.weight"));
            names.push(format!("{layer}.bias"));
        }
        for i in 0..self.predictor.len() {
            names.push(format!("predictor.{i}.weight"));
            names.push(format!("predictor.{i}.bias"));
        }
        names.push("output.weight".into());
        names.push("output.bias".into());
        names
    }

    fn layers(&self) -> impl Iterator<Item = &DenseLayer> {
        [&self.encoder, &self.mu_head, &self.logvar_head]
            .into_iter()
            .chain(self.predictor.iter())
            .chain(std::iter::once(&self.output))
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.layers().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        let [w, b] = self.encoder.params_mut();
        out.extend([w, b]);
        let [w, b] = self.mu_head.params_mut();
        out.extend([w, b]);
        let [w, b] = self.logvar_head.params_mut();
        out.extend([w, b]);
        for l in &mut self.predictor {
            let [w, b] = l.params_mut();
            out.extend([w, b]);
        }
        let [w, b] = self.output.params_mut();
        out.extend([w, b]);
        out
    }

    /// Replaces every parameter; shapes must match.
    pub fn set_params(&mut self, values: &[Matrix]) -> Result<()> {
        let slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(Error::Numeric(format!(
                "expected {} parameters, got {}",
                slots.len(),
                values.len()
            )));
        }
        for (slot, v) in slots.into_iter().zip(values) {
            if slot.shape() != v.shape() {
                return Err(Error::dim("set_params", slot.shape(), v.shape()));
            }
            *slot = v.clone();
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn encode_trace(&self, x: &Matrix) -> Result<EncoderTrace> {
        if x.cols() != self.config.input_dim {
            return Err(Error::dim(
                "encode",
                x.shape(),
                (x.rows(), self.config.input_dim),
            ));
        }
        let hidden_pre = self.encoder.forward(x)?;
        let hidden = relu(&hidden_pre);
        let mu = self.mu_head.forward(&hidden)?;
        let logvar_raw = self.logvar_head.forward(&hidden)?;
        let (lo, hi) = (self.config.logvar_min, self.config.logvar_max);
        let logvar = logvar_raw.map(|v| v.clamp(lo, hi));
        Ok(EncoderTrace {
            hidden_pre,
            hidden,
            logvar_raw,
            latent: GaussianLatent { mu, logvar },
        })
    }

    /// Posterior parameters for each row of `x`.
    pub fn encode(&self, x: &Matrix) -> Result<GaussianLatent> {
        Ok(self.encode_trace(x)?.latent)
    }

    fn predict_trace(&self, z: &Matrix, masks: Option<&[Matrix]>) -> Result<PredictorTrace> {
        if z.cols() != self.config.latent_dim {
            return Err(Error::dim(
                "predict_from_latent",
                z.shape(),
                (z.rows(), self.config.latent_dim),
            ));
        }
        let mut inputs = Vec::with_capacity(self.predictor.len());
        let mut pre = Vec::with_capacity(self.predictor.len());
        let mut act = z.clone();
        for (i, layer) in self.predictor.iter().enumerate() {
            let p = layer.forward(&act)?;
            let mut a = relu(&p);
            if let Some(masks) = masks {
                a = a.mul(&masks[i])?;
            }
            inputs.push(act);
            pre.push(p);
            act = a;
        }
        let out = self.output.forward(&act)?;
        Ok(PredictorTrace {
            inputs,
            pre,
            last: act,
            out,
        })
    }

    /// Coordinates for each latent row; dropout is active only in `Train`.
    pub fn predict_from_latent<R: Rng + ?Sized>(
        &self,
        z: &Matrix,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Matrix> {
        let masks = match mode {
            Mode::Eval => None,
            Mode::Train => Some(
                (0..self.predictor.len())
                    .map(|_| {
                        dropout_mask(
                            self.config.dropout_rate,
                            z.rows(),
                            self.config.predictor_hidden,
                            rng,
                        )
                    })
                    .collect::<Vec<_>>(),
            ),
        };
        Ok(self.predict_trace(z, masks.as_deref())?.out)
    }

    fn check_batch(&self, x: &Matrix, y: &Matrix, noise: &Noise) -> Result<()> {
        if x.rows() != y.rows() {
            return Err(Error::dim("loss rows", x.shape(), y.shape()));
        }
        if y.cols() != OUTPUT_DIM {
            return Err(Error::dim("loss targets", y.shape(), (y.rows(), OUTPUT_DIM)));
        }
        if x.rows() == 0 {
            return Err(Error::Numeric("loss over an empty batch".into()));
        }
        if noise.eps.is_empty() || noise.eps.len() != noise.masks.len() {
            return Err(Error::Numeric("noise must hold at least one sample".into()));
        }
        for (eps, masks) in noise.eps.iter().zip(&noise.masks) {
            if eps.shape() != (x.rows(), self.config.latent_dim) {
                return Err(Error::dim("noise eps", eps.shape(), (x.rows(), self.config.latent_dim)));
            }
            if masks.len() != self.predictor.len()
                || masks
                    .iter()
                    .any(|m| m.shape() != (x.rows(), self.config.predictor_hidden))
            {
                return Err(Error::Numeric("dropout masks do not match the predictor".into()));
            }
        }
        Ok(())
    }

    /// Monte Carlo loss estimate with fresh noise.
    pub fn loss<R: Rng + ?Sized>(&self, x: &Matrix, y: &Matrix, rng: &mut R) -> Result<LossBreakdown> {
        let noise = Noise::sample(&self.config, x.rows(), rng);
        self.loss_with_noise(x, y, &noise)
    }

    /// Loss with frozen noise; a deterministic function of the parameters.
    pub fn loss_with_noise(&self, x: &Matrix, y: &Matrix, noise: &Noise) -> Result<LossBreakdown> {
        self.check_batch(x, y, noise)?;
        let enc = self.encode_trace(x)?;
        let mut sq = 0.0;
        for (eps, masks) in noise.eps.iter().zip(&noise.masks) {
            let z = reparameterize(&enc.latent, eps)?;
            let pred = self.predict_trace(&z, Some(masks))?;
            sq += squared_error(&pred.out, y);
        }
        let recon = sq / (y.len() * noise.eps.len()) as f64;
        Ok(LossBreakdown::new(recon, kl_standard_normal(&enc.latent), self.config.beta))
    }

    /// Loss and gradients for every parameter with fresh noise.
    pub fn backward<R: Rng + ?Sized>(
        &self,
        x: &Matrix,
        y: &Matrix,
        rng: &mut R,
    ) -> Result<(LossBreakdown, Vec<Matrix>)> {
        let noise = Noise::sample(&self.config, x.rows(), rng);
        self.backward_with_noise(x, y, &noise)
    }

    /// Loss and analytic gradients (aligned with [`VibModel::params`]) under
    /// frozen noise.
    pub fn backward_with_noise(
        &self,
        x: &Matrix,
        y: &Matrix,
        noise: &Noise,
    ) -> Result<(LossBreakdown, Vec<Matrix>)> {
        self.check_batch(x, y, noise)?;
        let cfg = &self.config;
        let batch = x.rows() as f64;
        let samples = noise.eps.len();
        let enc = self.encode_trace(x)?;
        let lat = &enc.latent;
        let sigma = lat.logvar.scale(0.5)?.exp()?;

        let n_pred = self.predictor.len();
        let mut pred_grads: Vec<(Matrix, Matrix)> = self
            .predictor
            .iter()
            .map(|l| (Matrix::zeros(l.in_dim(), l.out_dim()), Matrix::zeros(1, l.out_dim())))
            .collect();
        let mut out_w = Matrix::zeros(self.output.in_dim(), OUTPUT_DIM);
        let mut out_b = Matrix::zeros(1, OUTPUT_DIM);
        let mut g_mu = Matrix::zeros(lat.mu.rows(), lat.mu.cols());
        let mut g_logvar = Matrix::zeros(lat.mu.rows(), lat.mu.cols());

        let mut sq = 0.0;
        // d recon / d y_hat = 2 (y_hat - y) / (B * S * OUTPUT_DIM)
        let out_scale = 2.0 / (y.len() * samples) as f64;
        for (eps, masks) in noise.eps.iter().zip(&noise.masks) {
            let z = sigma.mul(eps)?.add(&lat.mu)?;
            let trace = self.predict_trace(&z, Some(masks))?;
            let diff = trace.out.sub(y)?;
            sq += diff.as_slice().iter().map(|d| d * d).sum::<f64>();

            let upstream = diff.scale(out_scale)?;
            let g = self.output.backward(&trace.last, &upstream)?;
            out_w.add_assign(&g.param_grads[0])?;
            out_b.add_assign(&g.param_grads[1])?;
            let mut g_act = g.input_grad;
            for i in (0..n_pred).rev() {
                let g_relu = g_act.mul(&masks[i])?;
                let g_pre = relu_backward(&trace.pre[i], &g_relu)?;
                let g = self.predictor[i].backward(&trace.inputs[i], &g_pre)?;
                pred_grads[i].0.add_assign(&g.param_grads[0])?;
                pred_grads[i].1.add_assign(&g.param_grads[1])?;
                g_act = g.input_grad;
            }
            // dz/dmu = 1, dz/dlogvar = 1/2 * exp(logvar/2) * eps
            g_mu.add_assign(&g_act)?;
            g_logvar.add_assign(&g_act.mul(&sigma)?.mul(eps)?.scale(0.5)?)?;
        }

        // closed-form KL gradient
        let kl_scale = cfg.beta / batch;
        g_mu.add_assign(&lat.mu.scale(kl_scale)?)?;
        g_logvar.add_assign(&lat.logvar.exp()?.map(|v| 0.5 * kl_scale * (v - 1.0)))?;

        // clamp passes gradient only inside the bounds
        let (lo, hi) = (cfg.logvar_min, cfg.logvar_max);
        let g_logvar_raw = Matrix::from_vec(
            g_logvar.rows(),
            g_logvar.cols(),
            g_logvar
                .as_slice()
                .iter()
                .zip(enc.logvar_raw.as_slice())
                .map(|(&g, &raw)| if (lo..=hi).contains(&raw) { g } else { 0.0 })
                .collect(),
        )?;

        let gm = self.mu_head.backward(&enc.hidden, &g_mu)?;
        let gl = self.logvar_head.backward(&enc.hidden, &g_logvar_raw)?;
        let g_hidden = gm.input_grad.add(&gl.input_grad)?;
        let g_hidden_pre = relu_backward(&enc.hidden_pre, &g_hidden)?;
        let (enc_w, enc_b) = self.encoder.param_grads(x, &g_hidden_pre)?;

        let mut grads = Vec::with_capacity(2 * (4 + n_pred));
        grads.extend([enc_w, enc_b]);
        grads.extend(gm.param_grads);
        grads.extend(gl.param_grads);
        for (w, b) in pred_grads {
            grads.extend([w, b]);
        }
        grads.extend([out_w, out_b]);

        let recon = sq / (y.len() * samples) as f64;
        let loss = LossBreakdown::new(recon, kl_standard_normal(lat), cfg.beta);
        Ok((loss, grads))
    }

    /// Mean prediction over `eval_mc_samples` posterior draws, predictor in
    /// evaluation mode.
    pub fn infer<R: Rng + ?Sized>(&self, x: &Matrix, rng: &mut R) -> Result<Matrix> {
        let eps: Vec<Matrix> = (0..self.config.eval_mc_samples)
            .map(|_| standard_normal(x.rows(), self.config.latent_dim, rng))
            .collect();
        self.infer_with_eps(x, &eps)
    }

    /// [`VibModel::infer`] with caller-supplied reparameterization draws.
    pub fn infer_with_eps(&self, x: &Matrix, eps: &[Matrix]) -> Result<Matrix> {
        if eps.is_empty() {
            return Err(Error::Numeric("inference needs at least one latent sample".into()));
        }
        let lat = self.encode(x)?;
        let mut acc = Matrix::zeros(x.rows(), OUTPUT_DIM);
        for e in eps {
            let z = reparameterize(&lat, e)?;
            acc.add_assign(&self.predict_trace(&z, None)?.out)?;
        }
        acc.scale(1.0 / eps.len() as f64)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(MODEL_KIND);
        self.config.write_meta(&mut c);
        for (name, p) in self.param_names().into_iter().zip(self.params()) {
            c.push_record(&name, p.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(MODEL_KIND)?;
        let config = VibConfig::read_meta(c)?;
        config.validate()?;
        // shapes come from a deterministic skeleton; values from the records
        let mut model = Self::skeleton(config);
        let names = model.param_names();
        for (name, slot) in names.iter().zip(model.params_mut()) {
            let stored = c.record(name)?;
            if stored.shape() != slot.shape() {
                return Err(Error::Mismatch {
                    key: name.clone(),
                    expected: format!("{:?}", slot.shape()),
                    found: format!("{:?}", stored.shape()),
                });
            }
            *slot = stored.clone();
        }
        Ok(model)
    }

    fn skeleton(config: VibConfig) -> Self {
        let dense = |i, o| DenseLayer {
            weight: Matrix::zeros(i, o),
            bias: Matrix::zeros(1, o),
        };
        let mut predictor = Vec::new();
        let mut width = config.latent_dim;
        for _ in 0..config.predictor_layers {
            predictor.push(dense(width, config.predictor_hidden));
            width = config.predictor_hidden;
        }
        Self {
            encoder: dense(config.input_dim, config.encoder_hidden),
            mu_head: dense(config.encoder_hidden, config.latent_dim),
            logvar_head: dense(config.encoder_hidden, config.latent_dim),
            predictor,
            output: dense(width, OUTPUT_DIM),
            config,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    /// Loads a checkpoint and requires its architecture to equal `expected`.
    pub fn load_expecting(path: &Path, expected: &VibConfig) -> Result<Self> {
        let model = Self::load(path)?;
        if &model.config != expected {
            return Err(Error::Mismatch {
                key: "config".into(),
                expected: format!("{expected:?}"),
                found: format!("{:?}", model.config),
            });
        }
        Ok(model)
    }
}

fn squared_error(pred: &Matrix, y: &Matrix) -> f64 {
    pred.as_slice()
        .iter()
        .zip(y.as_slice())
        .map(|(p, t)| (p - t) * (p - t))
        .sum()
}
