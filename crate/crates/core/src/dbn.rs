//! Greedy layer-wise stacks of RBMs, one per modality.

use log::debug;

use crate::dataset::Modality;
use crate::error::{Error, Result};
use crate::numeric::{FeatureMatrix, SeededRng};
use crate::rbm::{train_rbm, CdConfig, RbmParams, VisibleKind};

/// Default hidden widths for image features.
pub const IMAGE_LAYER_DIMS: [usize; 2] = [2048, 1024];
/// Default hidden widths for text features.
pub const TEXT_LAYER_DIMS: [usize; 2] = [1024, 1024];

/// First-layer visible unit family used for each modality.
pub fn input_kind(modality: Modality) -> VisibleKind {
    match modality {
        Modality::Image => VisibleKind::Gaussian,
        Modality::Text => VisibleKind::ReplicatedSoftmax,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DbnModel {
    layers: Vec<RbmParams>,
    modality: Modality,
}

impl DbnModel {
    pub fn new(layers: Vec<RbmParams>, modality: Modality) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::Config("a DBN needs at least one layer".into()));
        };
        if first.visible_kind != input_kind(modality) {
            return Err(Error::Validation(format!(
                "{modality} DBN must start with {} visible units, found {}",
                input_kind(modality),
                first.visible_kind
            )));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].n_hidden() != pair[1].n_visible() {
                return Err(Error::shape(
                    "dbn layer chain",
                    pair[0].weights.shape(),
                    pair[1].weights.shape(),
                ));
            }
            if pair[1].visible_kind != VisibleKind::Bernoulli {
                return Err(Error::Validation(format!(
                    "DBN layer {} must have bernoulli visible units",
                    i + 1
                )));
            }
        }
        Ok(Self { layers, modality })
    }

    /// Untrained stack: zero biases, Gaussian weights. Layer `i` draws from
    /// its own sub-stream of `rng`.
    pub fn init(
        input_dim: usize,
        hidden_dims: &[usize],
        modality: Modality,
        init_std: f64,
        rng: &SeededRng,
    ) -> Result<Self> {
        if hidden_dims.is_empty() {
            return Err(Error::Config("DBN layer dims must be nonempty".into()));
        }
        let mut layers = Vec::with_capacity(hidden_dims.len());
        let mut visible = input_dim;
        for (i, &hidden) in hidden_dims.iter().enumerate() {
            let kind = if i == 0 {
                input_kind(modality)
            } else {
                VisibleKind::Bernoulli
            };
            let mut layer_rng = rng.derive(i as u64);
            layers.push(RbmParams::init(
                visible,
                hidden,
                kind,
                init_std,
                &mut layer_rng,
            ));
            visible = hidden;
        }
        Self::new(layers, modality)
    }

    pub fn layers(&self) -> &[RbmParams] {
        &self.layers
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_visible()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].n_hidden()
    }

    /// `[input, hidden_1, ..., hidden_n]`.
    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(RbmParams::n_hidden))
            .collect()
    }

    /// Mean-field activations of the top layer.
    pub fn forward(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        self.forward_to(x, self.layers.len())
    }

    /// Mean-field activations after the first `depth` layers.
    pub fn forward_to(&self, x: &FeatureMatrix, depth: usize) -> Result<FeatureMatrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(
                "dbn_forward",
                x.shape(),
                self.layers[0].weights.shape(),
            ));
        }
        let mut act = x.clone();
        for layer in &self.layers[..depth] {
            act = layer.hidden_probs(&act)?;
        }
        Ok(act)
    }
}

/// A trained stack plus per-layer, per-epoch reconstruction errors.
#[derive(Clone, Debug)]
pub struct TrainedDbn {
    pub model: DbnModel,
    pub layer_errors: Vec<Vec<f64>>,
}

/// Greedy pretraining: layer `i` sees the frozen mean-field output of
/// layers `< i` and is trained by CD.
pub fn train_dbn(
    data: &FeatureMatrix,
    modality: Modality,
    hidden_dims: &[usize],
    cfg: &CdConfig,
    rng: &SeededRng,
) -> Result<TrainedDbn> {
    let mut model = DbnModel::init(data.cols(), hidden_dims, modality, cfg.init_std, rng)?;
    let mut layer_errors = Vec::with_capacity(hidden_dims.len());
    let mut input = data.clone();
    for i in 0..model.layers.len() {
        let mut train_rng = rng.derive(1000 + i as u64);
        let outcome = train_rbm(model.layers[i].clone(), &input, cfg, &mut train_rng)
            .map_err(|e| e.in_phase(&format!("{modality} dbn layer {i}")))?;
        if let (Some(first), Some(last)) =
            (outcome.epoch_errors.first(), outcome.epoch_errors.last())
        {
            debug!("{modality} dbn layer {i}: recon error {first:.5} -> {last:.5}");
        }
        model.layers[i] = outcome.params;
        layer_errors.push(outcome.epoch_errors);
        input = model.layers[i].hidden_probs(&input)?;
    }
    Ok(TrainedDbn {
        model,
        layer_errors,
    })
}
