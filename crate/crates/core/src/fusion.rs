//! Multi-grained fusion: patch averaging and the joint RBM that merges the
//! instance-level and patch-level codes of one modality into a separate
//! representation.

use log::debug;

use crate::dataset::Modality;
use crate::error::{Error, Result};
use crate::numeric::{FeatureMatrix, SeededRng};
use crate::rbm::{train_rbm, CdConfig, RbmParams, VisibleKind};

/// At most this many region patches are kept per image.
pub const IMAGE_PATCH_CAP: usize = 10;
/// At most this many tag-group patches per text instance.
pub const TEXT_PATCH_CAP: usize = 4;

pub const DEFAULT_PATHWAY_HIDDEN: usize = 1024;
pub const DEFAULT_FUSION_OUTPUT: usize = 2048;

pub fn patch_cap(modality: Modality) -> usize {
    match modality {
        Modality::Image => IMAGE_PATCH_CAP,
        Modality::Text => TEXT_PATCH_CAP,
    }
}

/// Feature rows of the patches cut from one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGroup {
    pub instance_id: usize,
    pub features: FeatureMatrix,
}

impl PatchGroup {
    pub fn patch_count(&self) -> usize {
        self.features.rows()
    }

    /// Checks `1 <= patch_count <= cap`.
    pub fn validate(&self, modality: Modality, cap: usize) -> Result<()> {
        let n = self.patch_count();
        if n == 0 {
            return Err(Error::Validation(format!(
                "instance {} has an empty {modality} patch group",
                self.instance_id
            )));
        }
        if n > cap {
            return Err(Error::Validation(format!(
                "instance {} has {n} {modality} patches; at most {cap} are allowed",
                self.instance_id
            )));
        }
        Ok(())
    }
}

/// Coordinatewise mean of the rows of `patches`.
pub fn average_fuse(patches: &FeatureMatrix) -> Result<Vec<f64>> {
    if patches.rows() == 0 {
        return Err(Error::Domain("cannot average an empty patch group".into()));
    }
    let n = patches.rows() as f64;
    Ok(patches.column_sums().into_iter().map(|s| s / n).collect())
}

/// Averages consecutive row blocks: `counts[k]` rows belong to instance `k`.
pub fn average_fuse_blocks(rows: &FeatureMatrix, counts: &[usize]) -> Result<FeatureMatrix> {
    let total: usize = counts.iter().sum();
    if total != rows.rows() {
        return Err(Error::Domain(format!(
            "patch counts cover {total} rows but {} were given",
            rows.rows()
        )));
    }
    let mut out = FeatureMatrix::zeros(counts.len(), rows.cols());
    let mut start = 0;
    for (k, &c) in counts.iter().enumerate() {
        let idx: Vec<usize> = (start..start + c).collect();
        let mean = average_fuse(&rows.select_rows(&idx))?;
        out.row_mut(k).copy_from_slice(&mean);
        start += c;
    }
    Ok(out)
}

/// Two pathway RBMs (instance code, patch code) under one top RBM over
/// their concatenated hidden layers. Single-grain ablations keep only one
/// pathway.
#[derive(Clone, Debug, PartialEq)]
pub struct JointFusionRbm {
    origin: Option<RbmParams>,
    patch: Option<RbmParams>,
    top: RbmParams,
}

impl JointFusionRbm {
    pub fn new(
        origin: Option<RbmParams>,
        patch: Option<RbmParams>,
        top: RbmParams,
    ) -> Result<Self> {
        let hidden: usize = origin.iter().chain(&patch).map(RbmParams::n_hidden).sum();
        if origin.is_none() && patch.is_none() {
            return Err(Error::Config(
                "fusion RBM needs at least one pathway".into(),
            ));
        }
        if top.n_visible() != hidden {
            return Err(Error::shape(
                "fusion top layer",
                (hidden, 0),
                top.weights.shape(),
            ));
        }
        Ok(Self { origin, patch, top })
    }

    pub fn origin(&self) -> Option<&RbmParams> {
        self.origin.as_ref()
    }

    pub fn patch(&self) -> Option<&RbmParams> {
        self.patch.as_ref()
    }

    pub fn top(&self) -> &RbmParams {
        &self.top
    }

    pub fn output_dim(&self) -> usize {
        self.top.n_hidden()
    }

    /// Mean-field hidden activations of each present pathway, concatenated
    /// in (origin, patch) order.
    pub fn pathway_hidden(
        &self,
        t_origin: Option<&FeatureMatrix>,
        t_patch: Option<&FeatureMatrix>,
    ) -> Result<FeatureMatrix> {
        let a = pathway_probs(self.origin.as_ref(), t_origin, "instance")?;
        let b = pathway_probs(self.patch.as_ref(), t_patch, "patch")?;
        match (a, b) {
            (Some(a), Some(b)) => {
                if a.rows() != b.rows() {
                    return Err(Error::Pairing {
                        image_rows: a.rows(),
                        text_rows: b.rows(),
                    });
                }
                FeatureMatrix::hstack(&a, &b)
            }
            (Some(a), None) => Ok(a),
            (None, Some(b)) => Ok(b),
            (None, None) => unreachable!("constructor guarantees a pathway"),
        }
    }

    /// Energy of one configuration of the whole fused model: each pathway
    /// RBM over its input and hidden layer, plus the top RBM whose visible
    /// layer is the concatenated pathway hiddens. An absent pathway takes
    /// empty slices.
    pub fn energy(
        &self,
        v_origin: &[f64],
        v_patch: &[f64],
        h_origin: &[f64],
        h_patch: &[f64],
        h_top: &[f64],
    ) -> Result<f64> {
        let mut e = 0.0;
        for (params, v, h, what) in [
            (&self.origin, v_origin, h_origin, "instance"),
            (&self.patch, v_patch, h_patch, "patch"),
        ] {
            match params {
                Some(p) => e += p.energy(v, h)?,
                None if v.is_empty() && h.is_empty() => {}
                None => return Err(Error::Usage(format!("fusion model has no {what} pathway"))),
            }
        }
        let joined: Vec<f64> = h_origin.iter().chain(h_patch).copied().collect();
        Ok(e + self.top.energy(&joined, h_top)?)
    }

    /// Separate representation: mean-field top activations. Never samples.
    pub fn fuse(
        &self,
        t_origin: Option<&FeatureMatrix>,
        t_patch: Option<&FeatureMatrix>,
    ) -> Result<FeatureMatrix> {
        let hidden = self.pathway_hidden(t_origin, t_patch)?;
        self.top.hidden_probs(&hidden)
    }
}

fn pathway_probs(
    params: Option<&RbmParams>,
    input: Option<&FeatureMatrix>,
    what: &str,
) -> Result<Option<FeatureMatrix>> {
    match (params, input) {
        (Some(p), Some(x)) => p.hidden_probs(x).map(Some),
        (None, None) => Ok(None),
        (Some(_), None) => Err(Error::Usage(format!("fusion model expects {what} input"))),
        (None, Some(_)) => Err(Error::Usage(format!(
            "fusion model has no {what} pathway but {what} input was given"
        ))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionDims {
    pub pathway_hidden: usize,
    pub output_dim: usize,
}

impl Default for FusionDims {
    fn default() -> Self {
        Self {
            pathway_hidden: DEFAULT_PATHWAY_HIDDEN,
            output_dim: DEFAULT_FUSION_OUTPUT,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedFusion {
    pub model: JointFusionRbm,
    /// Per-epoch reconstruction errors for origin, patch and top RBMs.
    pub errors: Vec<Vec<f64>>,
}

/// Trains each pathway RBM on its input by CD, then the top RBM on the
/// concatenated pathway activations. Both pathways share one generator
/// sub-stream, so identical inputs give identical pathways.
pub fn train_fusion(
    cfg: &CdConfig,
    t_origin: Option<&FeatureMatrix>,
    t_patch: Option<&FeatureMatrix>,
    dims: &FusionDims,
    rng: &SeededRng,
) -> Result<TrainedFusion> {
    if let (Some(a), Some(b)) = (t_origin, t_patch) {
        if a.rows() != b.rows() {
            return Err(Error::Pairing {
                image_rows: a.rows(),
                text_rows: b.rows(),
            });
        }
    }
    let mut errors = Vec::new();
    let mut train_pathway = |input: Option<&FeatureMatrix>| -> Result<Option<RbmParams>> {
        let Some(x) = input else { return Ok(None) };
        let mut init_rng = rng.derive(1);
        let init = RbmParams::init(
            x.cols(),
            dims.pathway_hidden,
            VisibleKind::Bernoulli,
            cfg.init_std,
            &mut init_rng,
        );
        let mut train_rng = rng.derive(2);
        let out =
            train_rbm(init, x, cfg, &mut train_rng).map_err(|e| e.in_phase("fusion pathway"))?;
        errors.push(out.epoch_errors);
        Ok(Some(out.params))
    };
    let origin = train_pathway(t_origin)?;
    let patch = train_pathway(t_patch)?;
    if origin.is_none() && patch.is_none() {
        return Err(Error::Config("fusion needs instance or patch input".into()));
    }

    let hidden_width: usize = origin.iter().chain(&patch).map(RbmParams::n_hidden).sum();
    let placeholder = RbmParams::zeros(hidden_width, dims.output_dim, VisibleKind::Bernoulli);
    let staged = JointFusionRbm::new(origin, patch, placeholder)?;
    let hidden = staged.pathway_hidden(t_origin, t_patch)?;
    let top_init = RbmParams::init(
        hidden_width,
        dims.output_dim,
        VisibleKind::Bernoulli,
        cfg.init_std,
        &mut rng.derive(3),
    );
    let top = train_rbm(top_init, &hidden, cfg, &mut rng.derive(4))
        .map_err(|e| e.in_phase("fusion top"))?;
    if let Some(last) = top.epoch_errors.last() {
        debug!("fusion top rbm final recon error {last:.5}");
    }
    errors.push(top.epoch_errors);
    Ok(TrainedFusion {
        model: JointFusionRbm {
            top: top.params,
            ..staged
        },
        errors,
    })
}
