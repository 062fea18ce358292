//! Restricted Boltzmann machines with Gaussian, Bernoulli and
//! replicated-softmax visible units, trained by contrastive divergence.
//!
//! Energies, for visible `v`, hidden `h`, biases `a`/`b`, weights `W`:
//!
//! * Bernoulli: `E = -a.v - b.h - v'Wh`
//! * Gaussian (unit variance): `E = |v - a|^2 / 2 - b.h - v'Wh`
//! * Replicated softmax, document length `D = sum(v)`:
//!   `E = -a.v - D b.h - v'Wh`
//!
//! Hidden units are always binary.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numeric::{dot, sigmoid_scalar, softmax_inplace, FeatureMatrix, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VisibleKind {
    Gaussian,
    Bernoulli,
    ReplicatedSoftmax,
}

impl VisibleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VisibleKind::Gaussian => "gaussian",
            VisibleKind::Bernoulli => "bernoulli",
            VisibleKind::ReplicatedSoftmax => "replicated-softmax",
        }
    }
}

impl fmt::Display for VisibleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VisibleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(VisibleKind::Gaussian),
            "bernoulli" => Ok(VisibleKind::Bernoulli),
            "replicated-softmax" => Ok(VisibleKind::ReplicatedSoftmax),
            other => Err(Error::Config(format!(
                "unknown visible unit kind `{other}`"
            ))),
        }
    }
}

/// Parameters `(a, b, W)` of one RBM. `weights` is `n_visible x n_hidden`.
#[derive(Clone, Debug, PartialEq)]
pub struct RbmParams {
    pub visible_bias: Vec<f64>,
    pub hidden_bias: Vec<f64>,
    pub weights: FeatureMatrix,
    pub visible_kind: VisibleKind,
}

/// Hidden activation probabilities and a binary sample drawn from them.
#[derive(Clone, Debug)]
pub struct HiddenSample {
    pub probs: FeatureMatrix,
    pub sample: FeatureMatrix,
}

/// Visible mean (probabilities, Gaussian means or expected counts) and a
/// sample drawn from the matching distribution.
#[derive(Clone, Debug)]
pub struct VisibleSample {
    pub mean: FeatureMatrix,
    pub sample: FeatureMatrix,
}

impl RbmParams {
    pub fn new(
        visible_bias: Vec<f64>,
        hidden_bias: Vec<f64>,
        weights: FeatureMatrix,
        visible_kind: VisibleKind,
    ) -> Result<Self> {
        if visible_bias.len() != weights.rows() || hidden_bias.len() != weights.cols() {
            return Err(Error::shape(
                "rbm params",
                (visible_bias.len(), hidden_bias.len()),
                weights.shape(),
            ));
        }
        let params = Self {
            visible_bias,
            hidden_bias,
            weights,
            visible_kind,
        };
        if !params.is_finite() {
            return Err(Error::NonFinite("rbm parameters".into()));
        }
        Ok(params)
    }

    pub fn zeros(n_visible: usize, n_hidden: usize, visible_kind: VisibleKind) -> Self {
        Self {
            visible_bias: vec![0.0; n_visible],
            hidden_bias: vec![0.0; n_hidden],
            weights: FeatureMatrix::zeros(n_visible, n_hidden),
            visible_kind,
        }
    }

    /// Zero biases, weights drawn from `N(0, weight_std^2)`.
    pub fn init(
        n_visible: usize,
        n_hidden: usize,
        visible_kind: VisibleKind,
        weight_std: f64,
        rng: &mut SeededRng,
    ) -> Self {
        Self {
            visible_bias: vec![0.0; n_visible],
            hidden_bias: vec![0.0; n_hidden],
            weights: FeatureMatrix::gaussian(n_visible, n_hidden, weight_std, rng),
            visible_kind,
        }
    }

    pub fn n_visible(&self) -> usize {
        self.weights.rows()
    }

    pub fn n_hidden(&self) -> usize {
        self.weights.cols()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.is_finite()
            && self.visible_bias.iter().all(|v| v.is_finite())
            && self.hidden_bias.iter().all(|v| v.is_finite())
    }

    /// Energy of one joint configuration.
    pub fn energy(&self, v: &[f64], h: &[f64]) -> Result<f64> {
        if v.len() != self.n_visible() || h.len() != self.n_hidden() {
            return Err(Error::shape(
                "rbm_energy",
                (v.len(), h.len()),
                self.weights.shape(),
            ));
        }
        let mut interaction = 0.0;
        for (i, &vi) in v.iter().enumerate() {
            interaction += vi * dot(self.weights.row(i), h);
        }
        let hidden_term = dot(&self.hidden_bias, h);
        let e = match self.visible_kind {
            VisibleKind::Bernoulli => -dot(&self.visible_bias, v) - hidden_term - interaction,
            VisibleKind::Gaussian => {
                let quad: f64 = v
                    .iter()
                    .zip(&self.visible_bias)
                    .map(|(x, a)| 0.5 * (x - a) * (x - a))
                    .sum();
                quad - hidden_term - interaction
            }
            VisibleKind::ReplicatedSoftmax => {
                let doc_len: f64 = v.iter().sum();
                -dot(&self.visible_bias, v) - doc_len * hidden_term - interaction
            }
        };
        Ok(e)
    }

    /// Free energy `F(v)` with the binary hidden layer summed out, so that
    /// `exp(-F(v)) = sum_h exp(-E(v, h))`.
    pub fn free_energy(&self, v: &[f64]) -> Result<f64> {
        let zeros = vec![0.0; self.n_hidden()];
        let base = self.energy(v, &zeros)?;
        let scale = match self.visible_kind {
            VisibleKind::ReplicatedSoftmax => v.iter().sum(),
            _ => 1.0,
        };
        let mut soft = 0.0;
        for j in 0..self.n_hidden() {
            let x = scale * self.hidden_bias[j]
                + v.iter()
                    .enumerate()
                    .map(|(i, vi)| vi * self.weights.get(i, j))
                    .sum::<f64>();
            // log(1 + e^x) without overflow
            soft += x.max(0.0) + (-x.abs()).exp().ln_1p();
        }
        Ok(base - soft)
    }

    /// `p(h_j = 1 | v)` for every row of `visible`.
    pub fn hidden_probs(&self, visible: &FeatureMatrix) -> Result<FeatureMatrix> {
        if visible.cols() != self.n_visible() {
            return Err(Error::shape(
                "hidden_given_visible",
                visible.shape(),
                self.weights.shape(),
            ));
        }
        let mut pre = visible.matmul(&self.weights)?;
        match self.visible_kind {
            VisibleKind::ReplicatedSoftmax => {
                for r in 0..visible.rows() {
                    let row = visible.row(r);
                    if let Some(c) = row.iter().position(|&x| x < 0.0) {
                        return Err(Error::Domain(format!(
                            "replicated-softmax input has negative count at ({r}, {c})"
                        )));
                    }
                    let doc_len: f64 = row.iter().sum();
                    for (p, b) in pre.row_mut(r).iter_mut().zip(&self.hidden_bias) {
                        *p += doc_len * b;
                    }
                }
            }
            _ => pre.add_row_vector(&self.hidden_bias)?,
        }
        pre.map_inplace(sigmoid_scalar);
        Ok(pre)
    }

    pub fn hidden_given_visible(
        &self,
        visible: &FeatureMatrix,
        rng: &mut SeededRng,
    ) -> Result<HiddenSample> {
        let probs = self.hidden_probs(visible)?;
        let sample = sample_bernoulli(&probs, rng);
        Ok(HiddenSample { probs, sample })
    }

    /// Mean of `p(v | h)`. Replicated-softmax rows need their document
    /// lengths; other kinds ignore `doc_lengths`.
    pub fn visible_mean(
        &self,
        hidden: &FeatureMatrix,
        doc_lengths: Option<&[f64]>,
    ) -> Result<FeatureMatrix> {
        if hidden.cols() != self.n_hidden() {
            return Err(Error::shape(
                "visible_given_hidden",
                hidden.shape(),
                self.weights.shape(),
            ));
        }
        let mut pre = hidden.matmul_nt(&self.weights)?;
        pre.add_row_vector(&self.visible_bias)?;
        match self.visible_kind {
            VisibleKind::Gaussian => {}
            VisibleKind::Bernoulli => pre.map_inplace(sigmoid_scalar),
            VisibleKind::ReplicatedSoftmax => {
                let lengths = doc_lengths.ok_or_else(|| {
                    Error::Usage("replicated-softmax reconstruction needs document lengths".into())
                })?;
                if lengths.len() != hidden.rows() {
                    return Err(Error::shape(
                        "visible_given_hidden",
                        hidden.shape(),
                        (lengths.len(), 1),
                    ));
                }
                for (r, &d) in lengths.iter().enumerate() {
                    let row = pre.row_mut(r);
                    softmax_inplace(row);
                    for p in row.iter_mut() {
                        *p *= d;
                    }
                }
            }
        }
        Ok(pre)
    }

    pub fn visible_given_hidden(
        &self,
        hidden: &FeatureMatrix,
        doc_lengths: Option<&[f64]>,
        rng: &mut SeededRng,
    ) -> Result<VisibleSample> {
        let mean = self.visible_mean(hidden, doc_lengths)?;
        let sample = match self.visible_kind {
            VisibleKind::Gaussian => mean.map(|m| m + rng.normal()),
            VisibleKind::Bernoulli => sample_bernoulli(&mean, rng),
            VisibleKind::ReplicatedSoftmax => {
                let lengths = doc_lengths.unwrap_or_default();
                let mut out = FeatureMatrix::zeros(mean.rows(), mean.cols());
                for (r, &d) in lengths.iter().enumerate() {
                    let draws = d.round().max(0.0) as usize;
                    let counts = if d > 0.0 {
                        let probs: Vec<f64> = mean.row(r).iter().map(|c| c / d).collect();
                        rng.multinomial(&probs, draws)
                    } else {
                        vec![0.0; mean.cols()]
                    };
                    out.row_mut(r).copy_from_slice(&counts);
                }
                out
            }
        };
        Ok(VisibleSample { mean, sample })
    }
}

fn sample_bernoulli(probs: &FeatureMatrix, rng: &mut SeededRng) -> FeatureMatrix {
    probs.map(|p| rng.bernoulli(p))
}

/// Contrastive-divergence hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CdConfig {
    /// Gibbs steps in the negative phase.
    pub k: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Drive the chain with hidden probabilities instead of binary samples,
    /// which makes the whole update deterministic.
    pub mean_field: bool,
    /// Standard deviation of the initial weights.
    pub init_std: f64,
}

impl Default for CdConfig {
    fn default() -> Self {
        Self {
            k: 1,
            learning_rate: 0.01,
            batch_size: 32,
            epochs: 20,
            momentum: 0.5,
            weight_decay: 2e-4,
            mean_field: false,
            init_std: 0.01,
        }
    }
}

impl CdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("CD needs k >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "CD learning rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("CD batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) || !(self.init_std >= 0.0) {
            return Err(Error::Config(
                "weight decay and init std must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Parameters plus momentum buffers for CD training.
#[derive(Clone, Debug)]
pub struct RbmTrainer {
    params: RbmParams,
    cfg: CdConfig,
    vel_weights: Vec<f64>,
    vel_visible: Vec<f64>,
    vel_hidden: Vec<f64>,
}

impl RbmTrainer {
    pub fn new(params: RbmParams, cfg: CdConfig) -> Result<Self> {
        cfg.validate()?;
        let (nv, nh) = params.weights.shape();
        Ok(Self {
            params,
            cfg,
            vel_weights: vec![0.0; nv * nh],
            vel_visible: vec![0.0; nv],
            vel_hidden: vec![0.0; nh],
        })
    }

    pub fn params(&self) -> &RbmParams {
        &self.params
    }

    pub fn into_params(self) -> RbmParams {
        self.params
    }

    /// One CD-k update on `batch`. Returns the mean squared error between
    /// the batch and its one-step reconstruction.
    pub fn step(&mut self, batch: &FeatureMatrix, rng: &mut SeededRng) -> Result<f64> {
        let params = &self.params;
        if batch.cols() != params.n_visible() {
            return Err(Error::shape(
                "cd_k_update",
                batch.shape(),
                params.weights.shape(),
            ));
        }
        let n = batch.rows();
        if n == 0 {
            return Ok(0.0);
        }
        let is_softmax = params.visible_kind == VisibleKind::ReplicatedSoftmax;
        let doc_lengths: Option<Vec<f64>> = is_softmax.then(|| batch.row_sums());
        let lengths = doc_lengths.as_deref();

        let positive = params.hidden_probs(batch)?;
        let mut hidden_state = if self.cfg.mean_field {
            positive.clone()
        } else {
            sample_bernoulli(&positive, rng)
        };
        let mut recon_error = 0.0;
        let mut visible_neg = batch.clone();
        let mut negative = positive.clone();
        for step in 0..self.cfg.k {
            visible_neg = params.visible_mean(&hidden_state, lengths)?;
            if step == 0 {
                recon_error =
                    batch.sub(&visible_neg)?.sum_squares() / (batch.as_slice().len() as f64);
            }
            negative = params.hidden_probs(&visible_neg)?;
            hidden_state = if self.cfg.mean_field || step + 1 == self.cfg.k {
                negative.clone()
            } else {
                sample_bernoulli(&negative, rng)
            };
        }

        let inv_n = 1.0 / n as f64;
        let grad_w = batch
            .matmul_tn(&positive)?
            .sub(&visible_neg.matmul_tn(&negative)?)?
            .scale(inv_n);
        let grad_a: Vec<f64> = batch
            .column_sums()
            .iter()
            .zip(visible_neg.column_sums())
            .map(|(p, q)| (p - q) * inv_n)
            .collect();
        let hidden_diff = positive.sub(&negative)?;
        let grad_b: Vec<f64> = match lengths {
            Some(ds) => {
                let mut acc = vec![0.0; params.n_hidden()];
                for (r, d) in ds.iter().enumerate() {
                    for (a, x) in acc.iter_mut().zip(hidden_diff.row(r)) {
                        *a += d * x;
                    }
                }
                acc.iter().map(|v| v * inv_n).collect()
            }
            None => hidden_diff
                .column_sums()
                .iter()
                .map(|v| v * inv_n)
                .collect(),
        };

        let CdConfig {
            learning_rate: lr,
            momentum,
            weight_decay,
            ..
        } = self.cfg;
        apply_update(
            self.params.weights.as_mut_slice(),
            &mut self.vel_weights,
            grad_w.as_slice(),
            lr,
            momentum,
            weight_decay,
        );
        apply_update(
            &mut self.params.visible_bias,
            &mut self.vel_visible,
            &grad_a,
            lr,
            momentum,
            0.0,
        );
        apply_update(
            &mut self.params.hidden_bias,
            &mut self.vel_hidden,
            &grad_b,
            lr,
            momentum,
            0.0,
        );
        Ok(recon_error)
    }
}

fn apply_update(
    params: &mut [f64],
    velocity: &mut [f64],
    grad: &[f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + lr * (g - weight_decay * *p);
        // keep lr = 0 updates bit-exact (-0.0 + 0.0 would flip the sign bit)
        if *v != 0.0 {
            *p += *v;
        }
    }
}

/// A single CD-k update from zero momentum. Returns the updated parameters
/// and the batch reconstruction error.
pub fn cd_k_update(
    params: &RbmParams,
    batch: &FeatureMatrix,
    cfg: &CdConfig,
    rng: &mut SeededRng,
) -> Result<(RbmParams, f64)> {
    let mut trainer = RbmTrainer::new(params.clone(), cfg.clone())?;
    let err = trainer.step(batch, rng)?;
    if !trainer.params.is_finite() || !err.is_finite() {
        return Err(Error::Divergence {
            phase: "rbm".into(),
            epoch: 0,
        });
    }
    Ok((trainer.into_params(), err))
}

/// Trained parameters and the mean reconstruction error of every epoch.
#[derive(Clone, Debug)]
pub struct RbmTrainOutcome {
    pub params: RbmParams,
    pub epoch_errors: Vec<f64>,
}

/// Runs `cfg.epochs` epochs of shuffled mini-batch CD-k.
pub fn train_rbm(
    params: RbmParams,
    data: &FeatureMatrix,
    cfg: &CdConfig,
    rng: &mut SeededRng,
) -> Result<RbmTrainOutcome> {
    let mut trainer = RbmTrainer::new(params, cfg.clone())?;
    if data.cols() != trainer.params.n_visible() {
        return Err(Error::shape(
            "train_rbm",
            data.shape(),
            trainer.params.weights.shape(),
        ));
    }
    let mut order: Vec<usize> = (0..data.rows()).collect();
    let mut epoch_errors = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.select_rows(chunk);
            total += trainer.step(&batch, rng)?;
            batches += 1;
        }
        let err = total / batches.max(1) as f64;
        if !err.is_finite() || !trainer.params.is_finite() {
            return Err(Error::Divergence {
                phase: "rbm".into(),
                epoch,
            });
        }
        epoch_errors.push(err);
    }
    Ok(RbmTrainOutcome {
        params: trainer.into_params(),
        epoch_errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> RbmParams {
        RbmParams::new(
            vec![0.0, 0.0],
            vec![0.0],
            FeatureMatrix::from_rows(&[vec![0.5], vec![0.5]]).unwrap(),
            VisibleKind::Bernoulli,
        )
        .unwrap()
    }

    #[test]
    fn energy_examples() {
        let zero = RbmParams::zeros(3, 2, VisibleKind::Bernoulli);
        assert_eq!(zero.energy(&[1.0, 0.0, 1.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(toy().energy(&[1.0, 1.0], &[1.0]).unwrap(), -1.0);
    }

    #[test]
    fn energy_is_linear_in_hidden() {
        let mut rng = SeededRng::new(4);
        let p = RbmParams::init(3, 2, VisibleKind::Bernoulli, 0.7, &mut rng);
        let v = [1.0, 0.0, 1.0];
        let h = [0.3, 0.8];
        let base = p.energy(&v, &[0.0, 0.0]).unwrap();
        let once = base - p.energy(&v, &h).unwrap();
        let twice = base - p.energy(&v, &[0.6, 1.6]).unwrap();
        assert!((twice - 2.0 * once).abs() < 1e-12);
    }

    #[test]
    fn energy_rejects_bad_shapes() {
        assert!(matches!(
            toy().energy(&[1.0], &[1.0]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn hidden_probs_examples() {
        let zero = RbmParams::zeros(3, 4, VisibleKind::Gaussian);
        let v = FeatureMatrix::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap();
        assert!(zero
            .hidden_probs(&v)
            .unwrap()
            .as_slice()
            .iter()
            .all(|&p| p == 0.5));

        let mut rs = RbmParams::zeros(3, 2, VisibleKind::ReplicatedSoftmax);
        rs.hidden_bias = vec![1.0, -1.0];
        rs.weights = FeatureMatrix::filled(3, 2, 0.3);
        let empty = FeatureMatrix::zeros(1, 3);
        assert_eq!(rs.hidden_probs(&empty).unwrap().row(0), &[0.5, 0.5]);

        let mut b = RbmParams::zeros(2, 1, VisibleKind::Bernoulli);
        b.hidden_bias = vec![2.0];
        let p = b
            .hidden_probs(&FeatureMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap())
            .unwrap();
        assert!((p.get(0, 0) - 0.880797).abs() < 1e-6);
    }

    #[test]
    fn replicated_softmax_scales_hidden_bias_by_length() {
        let mut rs = RbmParams::zeros(2, 1, VisibleKind::ReplicatedSoftmax);
        rs.hidden_bias = vec![0.25];
        let v = FeatureMatrix::from_rows(&[vec![3.0, 1.0]]).unwrap();
        let p = rs.hidden_probs(&v).unwrap().get(0, 0);
        assert!((p - sigmoid_scalar(1.0)).abs() < 1e-15);
    }

    #[test]
    fn replicated_softmax_rejects_negative_counts() {
        let rs = RbmParams::zeros(2, 1, VisibleKind::ReplicatedSoftmax);
        let v = FeatureMatrix::from_rows(&[vec![1.0, -1.0]]).unwrap();
        assert!(matches!(rs.hidden_probs(&v), Err(Error::Domain(_))));
    }

    #[test]
    fn visible_examples() {
        let mut rng = SeededRng::new(0);
        let h = FeatureMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let g = RbmParams::zeros(3, 2, VisibleKind::Gaussian);
        assert_eq!(g.visible_mean(&h, None).unwrap().row(0), &[0.0; 3]);
        let b = RbmParams::zeros(3, 2, VisibleKind::Bernoulli);
        assert_eq!(b.visible_mean(&h, None).unwrap().row(0), &[0.5; 3]);
        let rs = RbmParams::zeros(5, 2, VisibleKind::ReplicatedSoftmax);
        let out = rs
            .visible_given_hidden(&h, Some(&[10.0]), &mut rng)
            .unwrap();
        for &c in out.mean.row(0) {
            assert!((c - 2.0).abs() < 1e-12);
        }
        assert_eq!(out.sample.row_sums()[0], 10.0);
        assert!(rs.visible_mean(&h, None).is_err());
    }

    #[test]
    fn replicated_softmax_samples_preserve_length() {
        let mut rng = SeededRng::new(8);
        let rs = RbmParams::init(6, 3, VisibleKind::ReplicatedSoftmax, 1.0, &mut rng);
        let h = FeatureMatrix::from_rows(&[vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 1.0]]).unwrap();
        let lengths = [17.0, 3.0];
        let out = rs
            .visible_given_hidden(&h, Some(&lengths), &mut rng)
            .unwrap();
        assert_eq!(out.sample.row_sums(), vec![17.0, 3.0]);
        for (s, d) in out.mean.row_sums().iter().zip(lengths) {
            assert!((s - d).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_params_bitwise() {
        let mut rng = SeededRng::new(12);
        let p = RbmParams::init(5, 3, VisibleKind::Bernoulli, 0.1, &mut rng);
        let batch = sample_bernoulli(&FeatureMatrix::filled(8, 5, 0.5), &mut rng);
        let cfg = CdConfig {
            learning_rate: 0.0,
            ..CdConfig::default()
        };
        let (q, _) = cd_k_update(&p, &batch, &cfg, &mut rng).unwrap();
        let bits = |m: &RbmParams| {
            m.weights
                .as_slice()
                .iter()
                .chain(&m.visible_bias)
                .chain(&m.hidden_bias)
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&p), bits(&q));
    }

    #[test]
    fn cd_update_is_seed_deterministic() {
        let mut rng = SeededRng::new(1);
        let p = RbmParams::init(6, 4, VisibleKind::Gaussian, 0.1, &mut rng);
        let batch = FeatureMatrix::gaussian(10, 6, 1.0, &mut rng);
        let cfg = CdConfig::default();
        let a = cd_k_update(&p, &batch, &cfg, &mut SeededRng::new(77)).unwrap();
        let b = cd_k_update(&p, &batch, &cfg, &mut SeededRng::new(77)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.to_bits(), b.1.to_bits());
    }

    #[test]
    fn mean_field_chain_at_fixed_point_makes_k_irrelevant() {
        // zero weights: the chain lands on its fixed point after one step
        let mut p = RbmParams::zeros(4, 3, VisibleKind::Bernoulli);
        p.visible_bias = vec![0.3, -0.2, 0.1, 0.0];
        p.hidden_bias = vec![-0.5, 0.5, 0.0];
        let batch = FeatureMatrix::from_rows(&[vec![1.0, 0.0, 1.0, 1.0], vec![0.0, 1.0, 0.0, 1.0]])
            .unwrap();
        let one = CdConfig {
            k: 1,
            mean_field: true,
            ..CdConfig::default()
        };
        let three = CdConfig {
            k: 3,
            ..one.clone()
        };
        let a = cd_k_update(&p, &batch, &one, &mut SeededRng::new(0)).unwrap();
        let b = cd_k_update(&p, &batch, &three, &mut SeededRng::new(99)).unwrap();
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn mean_field_k_steps_match_iterated_reconstruction() {
        let mut rng = SeededRng::new(21);
        let p = RbmParams::init(4, 3, VisibleKind::Bernoulli, 0.8, &mut rng);
        let batch = FeatureMatrix::from_rows(&[vec![1.0, 0.0, 1.0, 1.0], vec![0.0, 1.0, 0.0, 0.0]])
            .unwrap();
        let cfg = CdConfig {
            k: 3,
            mean_field: true,
            momentum: 0.0,
            weight_decay: 0.0,
            learning_rate: 0.1,
            ..CdConfig::default()
        };
        let (updated, _) = cd_k_update(&p, &batch, &cfg, &mut rng).unwrap();

        // independent straight-line evaluation of the same chain
        let pos = p.hidden_probs(&batch).unwrap();
        let mut h = pos.clone();
        let mut v = batch.clone();
        for _ in 0..3 {
            v = p.visible_mean(&h, None).unwrap();
            h = p.hidden_probs(&v).unwrap();
        }
        for i in 0..4 {
            for j in 0..3 {
                let mut g = 0.0;
                for r in 0..2 {
                    g += batch.get(r, i) * pos.get(r, j) - v.get(r, i) * h.get(r, j);
                }
                let expected = p.weights.get(i, j) + 0.1 * g / 2.0;
                assert!((updated.weights.get(i, j) - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn cd1_halves_reconstruction_error_on_repeating_patterns() {
        let patterns: Vec<Vec<f64>> = (0..4)
            .map(|p| {
                (0..16)
                    .map(|i| if i / 4 == p { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        let rows: Vec<Vec<f64>> = (0..64).map(|i| patterns[i % 4].clone()).collect();
        let data = FeatureMatrix::from_rows(&rows).unwrap();
        let mut rng = SeededRng::new(2024);
        let init = RbmParams::init(16, 8, VisibleKind::Bernoulli, 0.01, &mut rng);
        let cfg = CdConfig {
            learning_rate: 0.1,
            batch_size: 16,
            epochs: 200,
            momentum: 0.5,
            weight_decay: 0.0,
            ..CdConfig::default()
        };
        let out = train_rbm(init, &data, &cfg, &mut rng).unwrap();
        let first = out.epoch_errors[0];
        let last = *out.epoch_errors.last().unwrap();
        assert!(last < 0.5 * first, "first {first}, last {last}");
    }

    #[test]
    fn training_reports_divergence_epoch() {
        let mut rng = SeededRng::new(3);
        let init = RbmParams::init(3, 2, VisibleKind::Gaussian, 0.1, &mut rng);
        let data = FeatureMatrix::filled(4, 3, 1e200);
        let cfg = CdConfig {
            learning_rate: 1.0,
            momentum: 0.0,
            ..CdConfig::default()
        };
        match train_rbm(init, &data, &cfg, &mut rng) {
            Err(Error::Divergence { epoch, .. }) => assert_eq!(epoch, 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
