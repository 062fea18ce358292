//! Two-pathway autoencoder linked at the code layer.
//!
//! Each modality gets its own encoder and mirrored decoder. Training
//! minimizes, per instance pair,
//!
//! ```text
//! |q_i - rec_i|^2 + |q_t - rec_t|^2 + |code_i - code_t|^2
//! ```
//!
//! averaged over the batch. The same network type serves whole instances
//! and averaged patch representations.

use std::fmt;
use std::str::FromStr;

use log::debug;

use crate::dataset::Modality;
use crate::error::{Error, Result};
use crate::nn::{write_grads, Activation, DenseGrad, Mlp, MomentumSgd};
use crate::numeric::{FeatureMatrix, SeededRng};

/// Default encoder widths; the last entry is the code layer.
pub const DEFAULT_ENCODER_DIMS: [usize; 3] = [1024, 1024, 1024];

/// Which loss terms drive training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorrTerms {
    /// Reconstruction of both modalities plus code-layer correlation.
    Joint,
    /// Reconstruction terms only.
    ReconstructionOnly,
    /// Code-layer correlation only.
    CorrelationOnly,
}

impl CorrTerms {
    fn weights(self) -> (f64, f64) {
        match self {
            CorrTerms::Joint => (1.0, 1.0),
            CorrTerms::ReconstructionOnly => (1.0, 0.0),
            CorrTerms::CorrelationOnly => (0.0, 1.0),
        }
    }
}

impl fmt::Display for CorrTerms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorrTerms::Joint => "joint",
            CorrTerms::ReconstructionOnly => "reconstruction",
            CorrTerms::CorrelationOnly => "correlation",
        })
    }
}

impl FromStr for CorrTerms {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(CorrTerms::Joint),
            "reconstruction" => Ok(CorrTerms::ReconstructionOnly),
            "correlation" => Ok(CorrTerms::CorrelationOnly),
            other => Err(Error::Config(format!(
                "unknown corrnet loss terms `{other}`"
            ))),
        }
    }
}

/// Per-batch loss breakdown. `total` is always the sum of the three parts,
/// whichever terms drive training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrLossReport {
    pub total: f64,
    pub recon_image: f64,
    pub recon_text: f64,
    pub correlation: f64,
}

impl CorrLossReport {
    fn new(recon_image: f64, recon_text: f64, correlation: f64) -> Self {
        Self {
            total: recon_image + recon_text + correlation,
            recon_image,
            recon_text,
            correlation,
        }
    }

    /// The quantity minimized under `terms`.
    pub fn objective(&self, terms: CorrTerms) -> f64 {
        let (wr, wc) = terms.weights();
        wr * (self.recon_image + self.recon_text) + wc * self.correlation
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrNet {
    image_encoder: Mlp,
    image_decoder: Mlp,
    text_encoder: Mlp,
    text_decoder: Mlp,
}

/// Gradients for every sub-network, in parameter order.
#[derive(Clone, Debug)]
pub struct CorrNetGrads {
    pub image_encoder: Vec<DenseGrad>,
    pub image_decoder: Vec<DenseGrad>,
    pub text_encoder: Vec<DenseGrad>,
    pub text_decoder: Vec<DenseGrad>,
}

impl CorrNetGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in [
            &self.image_encoder,
            &self.image_decoder,
            &self.text_encoder,
            &self.text_decoder,
        ] {
            write_grads(g, &mut out);
        }
        out
    }
}

fn mirrored_dims(input: usize, encoder: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let enc: Vec<usize> = std::iter::once(input)
        .chain(encoder.iter().copied())
        .collect();
    let dec: Vec<usize> = enc.iter().rev().copied().collect();
    (enc, dec)
}

impl CorrNet {
    /// Builds both pathways. Square layers start at the identity with zero
    /// bias; the rest get fan-in scaled uniform noise.
    pub fn init(
        image_dim: usize,
        text_dim: usize,
        encoder_dims: &[usize],
        activation: Activation,
        rng: &SeededRng,
    ) -> Result<Self> {
        if encoder_dims.is_empty() {
            return Err(Error::Config(
                "corrnet needs at least one encoder layer".into(),
            ));
        }
        let acts = vec![activation; encoder_dims.len()];
        let (ie, id) = mirrored_dims(image_dim, encoder_dims);
        let (te, td) = mirrored_dims(text_dim, encoder_dims);
        Ok(Self {
            image_encoder: Mlp::init(&ie, &acts, &mut rng.derive(1))?,
            image_decoder: Mlp::init(&id, &acts, &mut rng.derive(2))?,
            text_encoder: Mlp::init(&te, &acts, &mut rng.derive(3))?,
            text_decoder: Mlp::init(&td, &acts, &mut rng.derive(4))?,
        })
    }

    pub fn from_parts(
        image_encoder: Mlp,
        image_decoder: Mlp,
        text_encoder: Mlp,
        text_decoder: Mlp,
    ) -> Result<Self> {
        if image_encoder.output_dim() != text_encoder.output_dim() {
            return Err(Error::Validation(format!(
                "code layers differ: image {} vs text {}",
                image_encoder.output_dim(),
                text_encoder.output_dim()
            )));
        }
        for (enc, dec, what) in [
            (&image_encoder, &image_decoder, "image"),
            (&text_encoder, &text_decoder, "text"),
        ] {
            if dec.input_dim() != enc.output_dim() || dec.output_dim() != enc.input_dim() {
                return Err(Error::Validation(format!(
                    "{what} decoder {:?} does not mirror encoder {:?}",
                    dec.dims(),
                    enc.dims()
                )));
            }
        }
        Ok(Self {
            image_encoder,
            image_decoder,
            text_encoder,
            text_decoder,
        })
    }

    pub fn encoder(&self, modality: Modality) -> &Mlp {
        match modality {
            Modality::Image => &self.image_encoder,
            Modality::Text => &self.text_encoder,
        }
    }

    pub fn decoder(&self, modality: Modality) -> &Mlp {
        match modality {
            Modality::Image => &self.image_decoder,
            Modality::Text => &self.text_decoder,
        }
    }

    pub fn code_dim(&self) -> usize {
        self.image_encoder.output_dim()
    }

    pub fn input_dim(&self, modality: Modality) -> usize {
        self.encoder(modality).input_dim()
    }

    pub fn is_finite(&self) -> bool {
        self.image_encoder.is_finite()
            && self.image_decoder.is_finite()
            && self.text_encoder.is_finite()
            && self.text_decoder.is_finite()
    }

    fn nets(&self) -> [&Mlp; 4] {
        [
            &self.image_encoder,
            &self.image_decoder,
            &self.text_encoder,
            &self.text_decoder,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.nets().iter().map(|n| n.param_count()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for net in self.nets() {
            net.write_params(&mut out);
        }
        out
    }

    pub fn set_params(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.param_count(), "parameter vector length");
        let rest = self.image_encoder.read_params(values);
        let rest = self.image_decoder.read_params(rest);
        let rest = self.text_encoder.read_params(rest);
        self.text_decoder.read_params(rest);
    }

    /// Code-layer activations for one modality.
    pub fn encode(&self, q: &FeatureMatrix, modality: Modality) -> Result<FeatureMatrix> {
        self.encoder(modality).forward(q)
    }

    pub fn decode(&self, code: &FeatureMatrix, modality: Modality) -> Result<FeatureMatrix> {
        self.decoder(modality).forward(code)
    }

    fn check_pair(&self, qi: &FeatureMatrix, qt: &FeatureMatrix) -> Result<()> {
        if qi.rows() != qt.rows() {
            return Err(Error::Pairing {
                image_rows: qi.rows(),
                text_rows: qt.rows(),
            });
        }
        if qi.rows() == 0 {
            return Err(Error::Domain("corrnet loss on an empty batch".into()));
        }
        Ok(())
    }

    pub fn loss(&self, qi: &FeatureMatrix, qt: &FeatureMatrix) -> Result<CorrLossReport> {
        self.check_pair(qi, qt)?;
        let n = qi.rows() as f64;
        let code_i = self.encode(qi, Modality::Image)?;
        let code_t = self.encode(qt, Modality::Text)?;
        let rec_i = self.decode(&code_i, Modality::Image)?;
        let rec_t = self.decode(&code_t, Modality::Text)?;
        Ok(CorrLossReport::new(
            qi.sub(&rec_i)?.sum_squares() / n,
            qt.sub(&rec_t)?.sum_squares() / n,
            code_i.sub(&code_t)?.sum_squares() / n,
        ))
    }

    /// Loss report and the gradient of `report.objective(terms)`.
    pub fn loss_and_grad(
        &self,
        qi: &FeatureMatrix,
        qt: &FeatureMatrix,
        terms: CorrTerms,
    ) -> Result<(CorrLossReport, CorrNetGrads)> {
        self.check_pair(qi, qt)?;
        let n = qi.rows() as f64;
        let (wr, wc) = terms.weights();
        // dropout-free passes never touch the generator
        let mut rng = SeededRng::new(0);

        let enc_i = self.image_encoder.forward_trace(qi, &[], &mut rng)?;
        let enc_t = self.text_encoder.forward_trace(qt, &[], &mut rng)?;
        let code_i = enc_i.output();
        let code_t = enc_t.output();
        let dec_i = self.image_decoder.forward_trace(&code_i, &[], &mut rng)?;
        let dec_t = self.text_decoder.forward_trace(&code_t, &[], &mut rng)?;
        let diff_ri = dec_i.output().sub(qi)?;
        let diff_rt = dec_t.output().sub(qt)?;
        let diff_c = code_i.sub(&code_t)?;
        let report = CorrLossReport::new(
            diff_ri.sum_squares() / n,
            diff_rt.sum_squares() / n,
            diff_c.sum_squares() / n,
        );

        let (g_dec_i, g_code_i_rec) = self
            .image_decoder
            .backward(&dec_i, &diff_ri.scale(2.0 * wr / n))?;
        let (g_dec_t, g_code_t_rec) = self
            .text_decoder
            .backward(&dec_t, &diff_rt.scale(2.0 * wr / n))?;
        let corr_grad = diff_c.scale(2.0 * wc / n);
        let g_code_i = g_code_i_rec.add(&corr_grad)?;
        let g_code_t = g_code_t_rec.sub(&corr_grad)?;
        let (g_enc_i, _) = self.image_encoder.backward(&enc_i, &g_code_i)?;
        let (g_enc_t, _) = self.text_encoder.backward(&enc_t, &g_code_t)?;
        Ok((
            report,
            CorrNetGrads {
                image_encoder: g_enc_i,
                image_decoder: g_dec_i,
                text_encoder: g_enc_t,
                text_decoder: g_dec_t,
            },
        ))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrNetTrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub terms: CorrTerms,
}

impl Default for CorrNetTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            epochs: 50,
            batch_size: 32,
            terms: CorrTerms::Joint,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CorrNetTrainOutcome {
    pub net: CorrNet,
    /// Mean training objective per epoch.
    pub train_loss: Vec<f64>,
    /// Full validation report per epoch (empty without a validation set).
    pub val_loss: Vec<CorrLossReport>,
}

/// Mini-batch SGD with momentum on paired `(qi, qt)` rows.
pub fn corrnet_train(
    mut net: CorrNet,
    qi: &FeatureMatrix,
    qt: &FeatureMatrix,
    validation: Option<(&FeatureMatrix, &FeatureMatrix)>,
    cfg: &CorrNetTrainConfig,
    rng: &mut SeededRng,
) -> Result<CorrNetTrainOutcome> {
    net.check_pair(qi, qt)?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("corrnet batch size must be >= 1".into()));
    }
    let mut opts: Vec<MomentumSgd> = net.nets().iter().map(|n| MomentumSgd::new(n)).collect();
    let mut order: Vec<usize> = (0..qi.rows()).collect();
    let mut train_loss = Vec::with_capacity(cfg.epochs);
    let mut val_loss = Vec::new();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let bi = qi.select_rows(chunk);
            let bt = qt.select_rows(chunk);
            let (report, grads) = net.loss_and_grad(&bi, &bt, cfg.terms)?;
            total += report.objective(cfg.terms);
            batches += 1;
            let CorrNet {
                image_encoder,
                image_decoder,
                text_encoder,
                text_decoder,
            } = &mut net;
            for ((opt, target), g) in opts
                .iter_mut()
                .zip([image_encoder, image_decoder, text_encoder, text_decoder])
                .zip([
                    &grads.image_encoder,
                    &grads.image_decoder,
                    &grads.text_encoder,
                    &grads.text_decoder,
                ])
            {
                opt.step(target, g, cfg.learning_rate, cfg.momentum);
            }
        }
        let mean = total / batches.max(1) as f64;
        if !mean.is_finite() || !net.is_finite() {
            return Err(Error::Divergence {
                phase: "corrnet".into(),
                epoch,
            });
        }
        train_loss.push(mean);
        if let Some((vi, vt)) = validation {
            if vi.rows() > 0 {
                let report = net.loss(vi, vt)?;
                debug!(
                    "corrnet epoch {epoch}: train {mean:.5}, val total {:.5} (corr {:.5})",
                    report.total, report.correlation
                );
                val_loss.push(report);
            }
        }
    }
    Ok(CorrNetTrainOutcome {
        net,
        train_loss,
        val_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_grad, sigmoid};

    fn jittered(net: &CorrNet, scale: f64, rng: &mut SeededRng) -> CorrNet {
        let mut out = net.clone();
        let p: Vec<f64> = net
            .params()
            .iter()
            .map(|v| v + scale * rng.normal())
            .collect();
        out.set_params(&p);
        out
    }

    #[test]
    fn mirrored_shapes() {
        let net = CorrNet::init(7, 5, &[6, 4, 3], Activation::Sigmoid, &SeededRng::new(0)).unwrap();
        assert_eq!(net.encoder(Modality::Image).dims(), vec![7, 6, 4, 3]);
        assert_eq!(net.decoder(Modality::Image).dims(), vec![3, 4, 6, 7]);
        assert_eq!(net.decoder(Modality::Text).dims(), vec![3, 4, 6, 5]);
        assert_eq!(net.code_dim(), 3);
    }

    #[test]
    fn identical_pathways_and_inputs_have_no_correlation_loss() {
        let mut rng = SeededRng::new(1);
        let base = CorrNet::init(4, 4, &[3, 3], Activation::Sigmoid, &SeededRng::new(1)).unwrap();
        let base = jittered(&base, 0.3, &mut rng);
        let net = CorrNet::from_parts(
            base.image_encoder.clone(),
            base.image_decoder.clone(),
            base.image_encoder.clone(),
            base.image_decoder.clone(),
        )
        .unwrap();
        let q = sigmoid(&FeatureMatrix::gaussian(5, 4, 1.0, &mut rng));
        let report = net.loss(&q, &q).unwrap();
        assert_eq!(report.correlation, 0.0);
        assert_eq!(report.recon_image, report.recon_text);
    }

    #[test]
    fn identity_net_reconstructs_exactly() {
        let net =
            CorrNet::init(4, 4, &[4, 4, 4], Activation::Identity, &SeededRng::new(0)).unwrap();
        let mut rng = SeededRng::new(3);
        let qi = FeatureMatrix::gaussian(6, 4, 1.0, &mut rng);
        let qt = FeatureMatrix::gaussian(6, 4, 1.0, &mut rng);
        let r = net.loss(&qi, &qt).unwrap();
        assert_eq!(r.recon_image, 0.0);
        assert_eq!(r.recon_text, 0.0);
        let code = net.encode(&qi, Modality::Image).unwrap();
        assert_eq!(net.decode(&code, Modality::Image).unwrap(), qi);
    }

    #[test]
    fn one_unit_toy_matches_hand_evaluation() {
        // every layer 1 -> 1, weight w, bias c, sigmoid
        let layer = |w: f64, c: f64| crate::nn::DenseLayer {
            weights: FeatureMatrix::new(1, 1, vec![w]).unwrap(),
            bias: vec![c],
            activation: Activation::Sigmoid,
        };
        let mlp = |w: f64, c: f64| Mlp {
            layers: vec![layer(w, c)],
        };
        let net = CorrNet::from_parts(
            mlp(2.0, 0.5),
            mlp(-1.0, 0.25),
            mlp(0.5, -1.0),
            mlp(1.5, 0.0),
        )
        .unwrap();
        let qi = FeatureMatrix::new(2, 1, vec![0.2, 0.9]).unwrap();
        let qt = FeatureMatrix::new(2, 1, vec![0.4, 0.1]).unwrap();
        let r = net.loss(&qi, &qt).unwrap();

        // straight-line evaluation of the same chain
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        let (mut ri, mut rt, mut c) = (0.0, 0.0, 0.0);
        for (a, b) in [(0.2, 0.4), (0.9, 0.1)] {
            let ci = s(2.0 * a + 0.5);
            let ct = s(0.5 * b - 1.0);
            ri += (a - s(-ci + 0.25)).powi(2);
            rt += (b - s(1.5 * ct)).powi(2);
            c += (ci - ct).powi(2);
        }
        assert!((r.recon_image - ri / 2.0).abs() < 1e-15);
        assert!((r.recon_text - rt / 2.0).abs() < 1e-15);
        assert!((r.correlation - c / 2.0).abs() < 1e-15);
        // frozen from an external scripted evaluation
        assert!(
            (r.total - 0.601_988_787_494_810_3).abs() < 1e-12,
            "{}",
            r.total
        );
    }

    #[test]
    fn unpaired_batches_rejected() {
        let net = CorrNet::init(3, 3, &[2], Activation::Sigmoid, &SeededRng::new(0)).unwrap();
        let err = net.loss(&FeatureMatrix::zeros(2, 3), &FeatureMatrix::zeros(3, 3));
        assert!(matches!(err, Err(Error::Pairing { .. })));
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(11);
        let net = CorrNet::init(5, 4, &[5, 5, 3], Activation::Sigmoid, &SeededRng::new(2)).unwrap();
        let net = jittered(&net, 0.4, &mut rng);
        let qi = sigmoid(&FeatureMatrix::gaussian(4, 5, 1.0, &mut rng));
        let qt = sigmoid(&FeatureMatrix::gaussian(4, 4, 1.0, &mut rng));
        for terms in [
            CorrTerms::Joint,
            CorrTerms::ReconstructionOnly,
            CorrTerms::CorrelationOnly,
        ] {
            let (_, grads) = net.loss_and_grad(&qi, &qt, terms).unwrap();
            let analytic = grads.flatten();
            let numeric = finite_diff_grad(
                |p| {
                    let mut n = net.clone();
                    n.set_params(p);
                    n.loss(&qi, &qt).unwrap().objective(terms)
                },
                &net.params(),
                1e-5,
            )
            .unwrap();
            for (a, n) in analytic.iter().zip(&numeric) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
                assert!(rel < 1e-4, "{terms}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn zero_learning_rate_keeps_net() {
        let net = CorrNet::init(3, 2, &[4, 2], Activation::Sigmoid, &SeededRng::new(0)).unwrap();
        let mut rng = SeededRng::new(1);
        let qi = sigmoid(&FeatureMatrix::gaussian(10, 3, 1.0, &mut rng));
        let qt = sigmoid(&FeatureMatrix::gaussian(10, 2, 1.0, &mut rng));
        let cfg = CorrNetTrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            batch_size: 4,
            ..CorrNetTrainConfig::default()
        };
        let out = corrnet_train(net.clone(), &qi, &qt, None, &cfg, &mut rng).unwrap();
        assert_eq!(out.net, net);
        assert_eq!(out.train_loss.len(), 3);
    }

    #[test]
    fn shared_latent_pairs_become_correlated() {
        let mut rng = SeededRng::new(42);
        let latent = FeatureMatrix::gaussian(120, 3, 1.0, &mut rng);
        let to_image = FeatureMatrix::gaussian(3, 8, 1.0, &mut rng);
        let to_text = FeatureMatrix::gaussian(3, 6, 1.0, &mut rng);
        let qi = sigmoid(&latent.matmul(&to_image).unwrap());
        let qt = sigmoid(&latent.matmul(&to_text).unwrap());
        let net = CorrNet::init(8, 6, &[8, 8, 4], Activation::Sigmoid, &SeededRng::new(7)).unwrap();
        let before = net.loss(&qi, &qt).unwrap().correlation;
        let cfg = CorrNetTrainConfig {
            learning_rate: 0.5,
            momentum: 0.9,
            epochs: 100,
            batch_size: 20,
            terms: CorrTerms::Joint,
        };
        let out = corrnet_train(net, &qi, &qt, Some((&qi, &qt)), &cfg, &mut rng).unwrap();
        let after = out.net.loss(&qi, &qt).unwrap().correlation;
        assert!(after < 0.1 * before, "before {before}, after {after}");
        assert_eq!(out.val_loss.len(), 100);
    }
}
