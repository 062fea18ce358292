//! Stage-two training: an inter-modality contrastive branch plus an
//! intra-modality classification branch, producing common representations.
//!
//! For a mini-batch with image outputs `F`, text outputs `G` and a binary
//! similarity graph `E`, the contrastive loss averages over every
//! cross-modal pair `(p, q)`:
//!
//! ```text
//! E(p,q) = 1:  |f_p - g_q|^2
//! E(p,q) = 0:  max(0, margin - |f_p - g_q|^2)
//! ```
//!
//! The classification branch puts an n-way softmax on each modality's
//! output and adds `branch_weight * (CE_image + CE_text)`.

use log::{debug, warn};

use crate::dataset::Modality;
use crate::error::{Error, Result};
use crate::nn::{write_grads, Activation, DenseGrad, Mlp, MomentumSgd};
use crate::numeric::{softmax_rows, FeatureMatrix, SeededRng};

/// Predicted probabilities below this are clamped inside the log.
pub const LOG_CLAMP: f64 = 1e-12;

pub const DEFAULT_MAPPING_DIMS: [usize; 3] = [1024, 1024, 1024];

/// Binary cross-modal similarity over one mini-batch: `E(p, q)` for image
/// row `p` and text row `q`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimilarityGraph {
    image_count: usize,
    text_count: usize,
    edges: Vec<bool>,
}

impl SimilarityGraph {
    /// `E(p, q) = 1` iff the labels agree.
    pub fn from_labels(image_labels: &[usize], text_labels: &[usize]) -> Self {
        Self::from_fn(image_labels.len(), text_labels.len(), |p, q| {
            image_labels[p] == text_labels[q]
        })
    }

    /// `E(p, q) = 1` iff the two rows come from the same instance.
    pub fn from_coexistence(image_ids: &[usize], text_ids: &[usize]) -> Self {
        Self::from_fn(image_ids.len(), text_ids.len(), |p, q| {
            image_ids[p] == text_ids[q]
        })
    }

    fn from_fn(image_count: usize, text_count: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut edges = Vec::with_capacity(image_count * text_count);
        for p in 0..image_count {
            for q in 0..text_count {
                edges.push(f(p, q));
            }
        }
        Self {
            image_count,
            text_count,
            edges,
        }
    }

    pub fn image_count(&self) -> usize {
        self.image_count
    }

    pub fn text_count(&self) -> usize {
        self.text_count
    }

    #[inline]
    pub fn is_similar(&self, p: usize, q: usize) -> bool {
        self.edges[p * self.text_count + q]
    }

    /// The graph with the roles of the modalities exchanged.
    pub fn transpose(&self) -> Self {
        Self::from_fn(self.text_count, self.image_count, |q, p| {
            self.is_similar(p, q)
        })
    }

    pub fn positive_count(&self) -> usize {
        self.edges.iter().filter(|&&e| e).count()
    }
}

/// Builds `E` from labels when they are available, otherwise from instance
/// co-existence.
pub fn build_similarity_graph(
    labels: Option<(&[usize], &[usize])>,
    instance_ids: Option<(&[usize], &[usize])>,
) -> Result<SimilarityGraph> {
    match (labels, instance_ids) {
        (Some((li, lt)), _) => Ok(SimilarityGraph::from_labels(li, lt)),
        (None, Some((pi, pt))) => Ok(SimilarityGraph::from_coexistence(pi, pt)),
        (None, None) => Err(Error::Config(
            "similarity graph needs labels or instance pairing".into(),
        )),
    }
}

fn check_contrastive_inputs(
    f: &FeatureMatrix,
    g: &FeatureMatrix,
    e: &SimilarityGraph,
    margin: f64,
) -> Result<()> {
    if !(margin > 0.0) {
        return Err(Error::Config(format!("margin must be > 0, got {margin}")));
    }
    if f.cols() != g.cols() {
        return Err(Error::shape("contrastive_loss", f.shape(), g.shape()));
    }
    if e.image_count != f.rows() || e.text_count != g.rows() {
        return Err(Error::shape(
            "contrastive_loss graph",
            (f.rows(), g.rows()),
            (e.image_count, e.text_count),
        ));
    }
    if f.rows() == 0 || g.rows() == 0 {
        return Err(Error::Domain("contrastive loss on an empty batch".into()));
    }
    Ok(())
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Contrastive loss averaged over all `|F| * |G|` pairs.
pub fn contrastive_loss(
    f: &FeatureMatrix,
    g: &FeatureMatrix,
    e: &SimilarityGraph,
    margin: f64,
) -> Result<f64> {
    check_contrastive_inputs(f, g, e, margin)?;
    let mut total = 0.0;
    for p in 0..f.rows() {
        for q in 0..g.rows() {
            let d = squared_distance(f.row(p), g.row(q));
            total += if e.is_similar(p, q) {
                d
            } else {
                (margin - d).max(0.0)
            };
        }
    }
    Ok(total / (f.rows() * g.rows()) as f64)
}

/// Per-pair derivatives of the pair loss w.r.t. `f` and `g`.
///
/// Similar pair: `(2(f - g), 2(g - f))`. Dissimilar pair:
/// `(2(g - f) J, 2(f - g) J)` with `J = 0` once `margin - |f - g|^2 <= 0`.
pub fn pair_gradient(f: &[f64], g: &[f64], similar: bool, margin: f64) -> (Vec<f64>, Vec<f64>) {
    let sign = if similar {
        1.0
    } else if margin - squared_distance(f, g) <= 0.0 {
        0.0
    } else {
        -1.0
    };
    let df: Vec<f64> = f.iter().zip(g).map(|(a, b)| sign * 2.0 * (a - b)).collect();
    let dg: Vec<f64> = f.iter().zip(g).map(|(a, b)| sign * 2.0 * (b - a)).collect();
    (df, dg)
}

/// Gradients of [`contrastive_loss`] w.r.t. every row of `F` and `G`.
pub fn contrastive_grad(
    f: &FeatureMatrix,
    g: &FeatureMatrix,
    e: &SimilarityGraph,
    margin: f64,
) -> Result<(FeatureMatrix, FeatureMatrix)> {
    check_contrastive_inputs(f, g, e, margin)?;
    let scale = 1.0 / (f.rows() * g.rows()) as f64;
    let mut df = FeatureMatrix::zeros(f.rows(), f.cols());
    let mut dg = FeatureMatrix::zeros(g.rows(), g.cols());
    for p in 0..f.rows() {
        for q in 0..g.rows() {
            let (gp, gq) = pair_gradient(f.row(p), g.row(q), e.is_similar(p, q), margin);
            for (acc, v) in df.row_mut(p).iter_mut().zip(&gp) {
                *acc += v * scale;
            }
            for (acc, v) in dg.row_mut(q).iter_mut().zip(&gq) {
                *acc += v * scale;
            }
        }
    }
    Ok((df, dg))
}

/// Mean over rows of `-sum_i p_i log(max(p_hat_i, LOG_CLAMP))`.
pub fn cross_entropy_loss(predicted: &FeatureMatrix, target: &FeatureMatrix) -> Result<f64> {
    if predicted.shape() != target.shape() {
        return Err(Error::shape(
            "cross_entropy_loss",
            predicted.shape(),
            target.shape(),
        ));
    }
    if predicted.rows() == 0 {
        return Err(Error::Domain("cross entropy on an empty batch".into()));
    }
    for (r, s) in predicted.row_sums().iter().enumerate() {
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!(
                "predicted row {r} sums to {s}, not 1"
            )));
        }
    }
    let mut total = 0.0;
    let mut clamped = 0usize;
    for (pred, tgt) in predicted.row_iter().zip(target.row_iter()) {
        for (&p_hat, &p) in pred.iter().zip(tgt) {
            if p == 0.0 {
                continue;
            }
            if p_hat < LOG_CLAMP {
                clamped += 1;
            }
            total -= p * p_hat.max(LOG_CLAMP).ln();
        }
    }
    if clamped > 0 {
        warn!("cross entropy clamped {clamped} predicted probabilities at {LOG_CLAMP:e}");
    }
    Ok(total / predicted.rows() as f64)
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<FeatureMatrix> {
    let mut out = FeatureMatrix::zeros(labels.len(), classes);
    for (r, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Validation(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        out.set(r, l, 1.0);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageTwoConfig {
    /// Widths of the mapping layers; the last is the common-space width.
    pub mapping_dims: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    /// Number of categories; `None` builds no classification heads.
    pub classes: Option<usize>,
    pub margin: f64,
    pub branch_weight: f64,
    /// Drop rate after every mapping layer but the last.
    pub dropout: f64,
}

impl Default for StageTwoConfig {
    fn default() -> Self {
        Self {
            mapping_dims: DEFAULT_MAPPING_DIMS.to_vec(),
            hidden_activation: Activation::Relu,
            output_activation: Activation::Identity,
            classes: None,
            margin: 1.0,
            branch_weight: 1.0,
            dropout: 0.5,
        }
    }
}

/// Per-modality mappings into the common space plus optional class heads.
#[derive(Clone, Debug, PartialEq)]
pub struct StageTwoModel {
    pub image_map: Mlp,
    pub text_map: Mlp,
    pub image_head: Option<Mlp>,
    pub text_head: Option<Mlp>,
    pub margin: f64,
    pub branch_weight: f64,
    pub dropout: f64,
}

/// Loss parts of one batch. `total = contrastive + branch_weight * (ce_image + ce_text)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageTwoLoss {
    pub total: f64,
    pub contrastive: f64,
    pub ce_image: f64,
    pub ce_text: f64,
}

#[derive(Clone, Debug)]
pub struct StageTwoGrads {
    pub image_map: Vec<DenseGrad>,
    pub text_map: Vec<DenseGrad>,
    pub image_head: Option<Vec<DenseGrad>>,
    pub text_head: Option<Vec<DenseGrad>>,
}

impl StageTwoGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        write_grads(&self.image_map, &mut out);
        write_grads(&self.text_map, &mut out);
        for head in [&self.image_head, &self.text_head].into_iter().flatten() {
            write_grads(head, &mut out);
        }
        out
    }
}

impl StageTwoModel {
    pub fn init(
        image_dim: usize,
        text_dim: usize,
        cfg: &StageTwoConfig,
        rng: &SeededRng,
    ) -> Result<Self> {
        if cfg.mapping_dims.is_empty() {
            return Err(Error::Config(
                "stage-two mapping needs at least one layer".into(),
            ));
        }
        if !(cfg.margin > 0.0) {
            return Err(Error::Config(format!(
                "margin must be > 0, got {}",
                cfg.margin
            )));
        }
        if !(cfg.branch_weight >= 0.0) {
            return Err(Error::Config("branch weight must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::Config("dropout rate must lie in [0, 1)".into()));
        }
        let mut acts = vec![cfg.hidden_activation; cfg.mapping_dims.len()];
        *acts.last_mut().expect("nonempty") = cfg.output_activation;
        let dims = |input: usize| -> Vec<usize> {
            std::iter::once(input)
                .chain(cfg.mapping_dims.iter().copied())
                .collect()
        };
        let common = *cfg.mapping_dims.last().expect("nonempty");
        let head = |stream: u64| -> Result<Option<Mlp>> {
            cfg.classes
                .map(|n| {
                    Mlp::init(
                        &[common, n],
                        &[Activation::Identity],
                        &mut rng.derive(stream),
                    )
                })
                .transpose()
        };
        Ok(Self {
            image_map: Mlp::init(&dims(image_dim), &acts, &mut rng.derive(1))?,
            text_map: Mlp::init(&dims(text_dim), &acts, &mut rng.derive(2))?,
            image_head: head(3)?,
            text_head: head(4)?,
            margin: cfg.margin,
            branch_weight: cfg.branch_weight,
            dropout: cfg.dropout,
        })
    }

    pub fn mapping(&self, modality: Modality) -> &Mlp {
        match modality {
            Modality::Image => &self.image_map,
            Modality::Text => &self.text_map,
        }
    }

    pub fn common_dim(&self) -> usize {
        self.image_map.output_dim()
    }

    pub fn has_heads(&self) -> bool {
        self.image_head.is_some() && self.text_head.is_some()
    }

    pub fn classes(&self) -> Option<usize> {
        self.image_head.as_ref().map(Mlp::output_dim)
    }

    pub fn is_finite(&self) -> bool {
        self.image_map.is_finite()
            && self.text_map.is_finite()
            && self.image_head.as_ref().is_none_or(Mlp::is_finite)
            && self.text_head.as_ref().is_none_or(Mlp::is_finite)
    }

    fn nets(&self) -> Vec<&Mlp> {
        let mut nets = vec![&self.image_map, &self.text_map];
        nets.extend(self.image_head.iter());
        nets.extend(self.text_head.iter());
        nets
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for net in self.nets() {
            net.write_params(&mut out);
        }
        out
    }

    pub fn set_params(&mut self, values: &[f64]) {
        let mut rest = self.image_map.read_params(values);
        rest = self.text_map.read_params(rest);
        if let Some(h) = &mut self.image_head {
            rest = h.read_params(rest);
        }
        if let Some(h) = &mut self.text_head {
            rest = h.read_params(rest);
        }
        assert!(rest.is_empty(), "parameter vector too long");
    }

    /// Common representation `f(S)` or `g(S)`. Deterministic (no dropout).
    pub fn encode(&self, s: &FeatureMatrix, modality: Modality) -> Result<FeatureMatrix> {
        self.mapping(modality).forward(s)
    }

    fn dropout_schedule(&self, enabled: bool) -> Vec<f64> {
        let n = self.image_map.layers.len();
        (0..n)
            .map(|i| {
                if enabled && i + 1 < n {
                    self.dropout
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Loss and gradient of one batch. `dropout_rng = None` disables dropout.
    /// `labels` is required iff the classification branch is active.
    pub fn loss_and_grad(
        &self,
        s_image: &FeatureMatrix,
        s_text: &FeatureMatrix,
        graph: &SimilarityGraph,
        labels: Option<&[usize]>,
        dropout_rng: Option<&mut SeededRng>,
    ) -> Result<(StageTwoLoss, StageTwoGrads)> {
        let mut fallback = SeededRng::new(0);
        let use_dropout = dropout_rng.is_some() && self.dropout > 0.0;
        let rng = dropout_rng.unwrap_or(&mut fallback);
        let schedule = self.dropout_schedule(use_dropout);
        let trace_i = self.image_map.forward_trace(s_image, &schedule, rng)?;
        let trace_t = self.text_map.forward_trace(s_text, &schedule, rng)?;
        let f = trace_i.output();
        let g = trace_t.output();

        let contrastive = contrastive_loss(&f, &g, graph, self.margin)?;
        let (mut df, mut dg) = contrastive_grad(&f, &g, graph, self.margin)?;

        let classify = self.branch_weight > 0.0 && self.has_heads();
        let mut ce = (0.0, 0.0);
        let mut head_grads = (None, None);
        if classify {
            let labels = labels.ok_or_else(|| {
                Error::Config("classification branch is active but no labels were given".into())
            })?;
            let classes = self.classes().expect("heads present");
            let target = one_hot(labels, classes)?;
            let lambda = self.branch_weight;
            let branch =
                |head: &Mlp, m: &FeatureMatrix| -> Result<(f64, Vec<DenseGrad>, FeatureMatrix)> {
                    let trace = head.forward_trace(m, &[], &mut SeededRng::new(0))?;
                    let probs = softmax_rows(&trace.output());
                    let loss = cross_entropy_loss(&probs, &target)?;
                    let grad_logits = probs.sub(&target)?.scale(lambda / m.rows() as f64);
                    let (grads, grad_m) = head.backward(&trace, &grad_logits)?;
                    Ok((loss, grads, grad_m))
                };
            let (ce_i, gi, dm_i) = branch(self.image_head.as_ref().expect("heads"), &f)?;
            let (ce_t, gt, dm_t) = branch(self.text_head.as_ref().expect("heads"), &g)?;
            df = df.add(&dm_i)?;
            dg = dg.add(&dm_t)?;
            ce = (ce_i, ce_t);
            head_grads = (Some(gi), Some(gt));
        } else if self.has_heads() {
            head_grads = (
                self.image_head.as_ref().map(Mlp::zero_grads),
                self.text_head.as_ref().map(Mlp::zero_grads),
            );
        }

        let (g_img, _) = self.image_map.backward(&trace_i, &df)?;
        let (g_txt, _) = self.text_map.backward(&trace_t, &dg)?;
        let weight = if classify { self.branch_weight } else { 0.0 };
        Ok((
            StageTwoLoss {
                total: contrastive + weight * (ce.0 + ce.1),
                contrastive,
                ce_image: ce.0,
                ce_text: ce.1,
            },
            StageTwoGrads {
                image_map: g_img,
                text_map: g_txt,
                image_head: head_grads.0,
                text_head: head_grads.1,
            },
        ))
    }

    /// Batch loss without dropout, for monitoring and gradient checks.
    pub fn loss(
        &self,
        s_image: &FeatureMatrix,
        s_text: &FeatureMatrix,
        graph: &SimilarityGraph,
        labels: Option<&[usize]>,
    ) -> Result<StageTwoLoss> {
        self.loss_and_grad(s_image, s_text, graph, labels, None)
            .map(|(l, _)| l)
    }
}

/// `M = f(S)` for images, `M = g(S)` for text.
pub fn encode_common(
    model: &StageTwoModel,
    s: &FeatureMatrix,
    modality: Modality,
) -> Result<FeatureMatrix> {
    model.encode(s, modality)
}

/// Where the similarity graph of each mini-batch comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimilaritySource {
    Labels,
    CoExistence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageTwoTrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub similarity: SimilaritySource,
}

impl Default for StageTwoTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            momentum: 0.9,
            epochs: 50,
            batch_size: 64,
            similarity: SimilaritySource::Labels,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StageTwoOutcome {
    pub model: StageTwoModel,
    /// Mean total batch loss, one entry per epoch.
    pub loss_history: Vec<f64>,
}

/// Shuffled mini-batch SGD over aligned `(s_image, s_text)` rows.
pub fn multitask_train(
    mut model: StageTwoModel,
    s_image: &FeatureMatrix,
    s_text: &FeatureMatrix,
    labels: Option<&[usize]>,
    cfg: &StageTwoTrainConfig,
    rng: &mut SeededRng,
) -> Result<StageTwoOutcome> {
    if s_image.rows() != s_text.rows() {
        return Err(Error::Pairing {
            image_rows: s_image.rows(),
            text_rows: s_text.rows(),
        });
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("stage-two batch size must be >= 1".into()));
    }
    let classify = model.branch_weight > 0.0 && model.has_heads();
    if (classify || cfg.similarity == SimilaritySource::Labels) && labels.is_none() {
        return Err(Error::Config(
            "labels are required for label-based similarity or a weighted classification branch"
                .into(),
        ));
    }
    if let Some(l) = labels {
        if l.len() != s_image.rows() {
            return Err(Error::Validation(format!(
                "{} labels for {} rows",
                l.len(),
                s_image.rows()
            )));
        }
    }

    let mut opt_image = MomentumSgd::new(&model.image_map);
    let mut opt_text = MomentumSgd::new(&model.text_map);
    let mut opt_heads: Vec<MomentumSgd> = model
        .image_head
        .iter()
        .chain(model.text_head.iter())
        .map(MomentumSgd::new)
        .collect();
    let mut order: Vec<usize> = (0..s_image.rows()).collect();
    let mut loss_history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let bi = s_image.select_rows(chunk);
            let bt = s_text.select_rows(chunk);
            let batch_labels: Option<Vec<usize>> =
                labels.map(|l| chunk.iter().map(|&i| l[i]).collect());
            let graph = match cfg.similarity {
                SimilaritySource::Labels => {
                    let bl = batch_labels.as_deref().expect("checked above");
                    SimilarityGraph::from_labels(bl, bl)
                }
                SimilaritySource::CoExistence => SimilarityGraph::from_coexistence(chunk, chunk),
            };
            let head_labels = if classify {
                batch_labels.as_deref()
            } else {
                None
            };
            let (loss, grads) = model.loss_and_grad(&bi, &bt, &graph, head_labels, Some(rng))?;
            total += loss.total;
            batches += 1;
            opt_image.step(
                &mut model.image_map,
                &grads.image_map,
                cfg.learning_rate,
                cfg.momentum,
            );
            opt_text.step(
                &mut model.text_map,
                &grads.text_map,
                cfg.learning_rate,
                cfg.momentum,
            );
            let heads = model
                .image_head
                .iter_mut()
                .chain(model.text_head.iter_mut());
            let head_grads = grads.image_head.iter().chain(grads.text_head.iter());
            for ((opt, head), g) in opt_heads.iter_mut().zip(heads).zip(head_grads) {
                opt.step(head, g, cfg.learning_rate, cfg.momentum);
            }
        }
        let mean = total / batches.max(1) as f64;
        if !mean.is_finite() || !model.is_finite() {
            return Err(Error::Divergence {
                phase: "multitask".into(),
                epoch,
            });
        }
        debug!("multitask epoch {epoch}: loss {mean:.5}");
        loss_history.push(mean);
    }
    Ok(StageTwoOutcome {
        model,
        loss_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::finite_diff_grad;

    fn fm(rows: &[&[f64]]) -> FeatureMatrix {
        FeatureMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn graph_examples() {
        assert!(SimilarityGraph::from_labels(&[3], &[3]).is_similar(0, 0));
        assert!(!SimilarityGraph::from_labels(&[1], &[2]).is_similar(0, 0));
        let ids = [4, 9, 2];
        let e = SimilarityGraph::from_coexistence(&ids, &ids);
        for p in 0..3 {
            for q in 0..3 {
                assert_eq!(e.is_similar(p, q), p == q);
            }
        }
        assert!(matches!(
            build_similarity_graph(None, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn contrastive_examples() {
        let f = fm(&[&[0.2, 0.4], &[1.0, -1.0]]);
        let pos = SimilarityGraph::from_labels(&[0, 0], &[0, 0]);
        let own = contrastive_loss(
            &f.select_rows(&[0]),
            &f.select_rows(&[0]),
            &pos.transpose(),
            1.0,
        );
        assert!(matches!(own, Err(Error::Shape { .. })));
        let one = SimilarityGraph::from_labels(&[0], &[0]);
        let zero = contrastive_loss(&f.select_rows(&[1]), &f.select_rows(&[1]), &one, 1.0);
        assert_eq!(zero.unwrap(), 0.0);
        // off-diagonal distance 2.6 clears the margin
        let ident = SimilarityGraph::from_labels(&[0, 1], &[0, 1]);
        assert_eq!(contrastive_loss(&f, &f, &ident, 1.0).unwrap(), 0.0);
        assert!((contrastive_loss(&f, &f, &ident, 3.0).unwrap() - 0.2).abs() < 1e-12);

        // negative pair sitting exactly on the margin
        let a = fm(&[&[1.0, 1.0]]);
        let b = fm(&[&[0.0, 0.0]]);
        let neg = SimilarityGraph::from_labels(&[0], &[1]);
        assert_eq!(contrastive_loss(&a, &b, &neg, 2.0).unwrap(), 0.0);

        let f = fm(&[&[1.0, 0.0]]);
        let g = fm(&[&[0.0, 0.0]]);
        assert_eq!(contrastive_loss(&f, &g, &neg, 2.0).unwrap(), 1.0);
        assert!(matches!(
            contrastive_loss(&f, &g, &neg, 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gradient_examples() {
        let f = fm(&[&[0.5, -0.5]]);
        let pos = SimilarityGraph::from_labels(&[1], &[1]);
        let (df, dg) = contrastive_grad(&f, &f, &pos, 1.0).unwrap();
        assert!(df.as_slice().iter().chain(dg.as_slice()).all(|&v| v == 0.0));

        let g = fm(&[&[3.0, 3.0]]);
        let neg = SimilarityGraph::from_labels(&[1], &[2]);
        let (df, dg) = contrastive_grad(&f, &g, &neg, 1.0).unwrap();
        assert!(df.as_slice().iter().chain(dg.as_slice()).all(|&v| v == 0.0));
    }

    fn random_batch(seed: u64) -> (FeatureMatrix, FeatureMatrix, SimilarityGraph) {
        let mut rng = SeededRng::new(seed);
        let f = FeatureMatrix::gaussian(4, 3, 0.6, &mut rng);
        let g = FeatureMatrix::gaussian(3, 3, 0.6, &mut rng);
        let e = SimilarityGraph::from_labels(&[0, 1, 1, 2], &[1, 0, 2]);
        (f, g, e)
    }

    #[test]
    fn contrastive_grad_matches_finite_differences() {
        for seed in 0..5 {
            let (f, g, e) = random_batch(seed);
            let (df, dg) = contrastive_grad(&f, &g, &e, 1.5).unwrap();
            let num_f = finite_diff_grad(
                |x| {
                    let fx = FeatureMatrix::new(4, 3, x.to_vec()).unwrap();
                    contrastive_loss(&fx, &g, &e, 1.5).unwrap()
                },
                f.as_slice(),
                1e-6,
            )
            .unwrap();
            let num_g = finite_diff_grad(
                |x| {
                    let gx = FeatureMatrix::new(3, 3, x.to_vec()).unwrap();
                    contrastive_loss(&f, &gx, &e, 1.5).unwrap()
                },
                g.as_slice(),
                1e-6,
            )
            .unwrap();
            for (a, n) in df
                .as_slice()
                .iter()
                .chain(dg.as_slice())
                .zip(num_f.iter().chain(&num_g))
            {
                assert!((a - n).abs() < 1e-6, "seed {seed}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn contrastive_grad_is_sum_of_pair_closed_forms() {
        let (f, g, e) = random_batch(11);
        let margin = 1.2;
        let (df, dg) = contrastive_grad(&f, &g, &e, margin).unwrap();
        let n = (f.rows() * g.rows()) as f64;
        for p in 0..f.rows() {
            let mut want = vec![0.0; 3];
            for q in 0..g.rows() {
                let d: f64 = (0..3).map(|j| (f.get(p, j) - g.get(q, j)).powi(2)).sum();
                let sign = match (e.is_similar(p, q), margin - d > 0.0) {
                    (true, _) => 1.0,
                    (false, true) => -1.0,
                    (false, false) => 0.0,
                };
                for j in 0..3 {
                    want[j] += sign * 2.0 * (f.get(p, j) - g.get(q, j)) / n;
                }
            }
            for j in 0..3 {
                assert!((df.get(p, j) - want[j]).abs() < 1e-15);
            }
        }
        // the text-side gradient mirrors the image side pairwise
        let total_f: f64 = df.as_slice().iter().sum();
        let total_g: f64 = dg.as_slice().iter().sum();
        assert!((total_f + total_g).abs() < 1e-12);
    }

    #[test]
    fn encode_common_is_deterministic() {
        let model = toy_model(None, Activation::Relu);
        let s = FeatureMatrix::uniform(5, 4, 1.0, &mut SeededRng::new(2));
        let a = encode_common(&model, &s, Modality::Text).unwrap();
        let b = encode_common(&model, &s, Modality::Text).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), (5, 3));
        assert!(encode_common(&model, &s, Modality::Image).is_err());
    }

    #[test]
    fn contrastive_is_symmetric_under_modality_swap() {
        let mut rng = SeededRng::new(3);
        let f = FeatureMatrix::gaussian(4, 3, 0.5, &mut rng);
        let g = FeatureMatrix::gaussian(5, 3, 0.5, &mut rng);
        let e = SimilarityGraph::from_labels(&[0, 1, 2, 0], &[1, 1, 0, 2, 2]);
        let a = contrastive_loss(&f, &g, &e, 1.5).unwrap();
        let b = contrastive_loss(&g, &f, &e.transpose(), 1.5).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_examples() {
        let target = fm(&[&[0.0, 1.0, 0.0, 0.0]]);
        assert_eq!(cross_entropy_loss(&target, &target).unwrap(), 0.0);
        let uniform = FeatureMatrix::filled(1, 4, 0.25);
        let ce = cross_entropy_loss(&uniform, &target).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-12);
        assert!((ce - 1.386294).abs() < 1e-6);

        let pred = fm(&[&[0.1, 0.6, 0.3]]);
        let tgt = fm(&[&[0.0, 0.0, 1.0]]);
        let perm = [2, 0, 1];
        let permute = |m: &FeatureMatrix| {
            FeatureMatrix::row_vector(&perm.iter().map(|&i| m.get(0, i)).collect::<Vec<_>>())
                .unwrap()
        };
        let a = cross_entropy_loss(&pred, &tgt).unwrap();
        let b = cross_entropy_loss(&permute(&pred), &permute(&tgt)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let pred = fm(&[&[1.0, 0.0]]);
        let tgt = fm(&[&[0.0, 1.0]]);
        let ce = cross_entropy_loss(&pred, &tgt).unwrap();
        assert!((ce + LOG_CLAMP.ln()).abs() < 1e-9);
        assert!(cross_entropy_loss(&fm(&[&[0.5, 0.6]]), &tgt).is_err());
    }

    fn toy_model(classes: Option<usize>, hidden: Activation) -> StageTwoModel {
        let cfg = StageTwoConfig {
            mapping_dims: vec![5, 4, 3],
            hidden_activation: hidden,
            output_activation: Activation::Identity,
            classes,
            margin: 1.0,
            branch_weight: 0.7,
            dropout: 0.0,
        };
        let mut m = StageTwoModel::init(6, 4, &cfg, &SeededRng::new(5)).unwrap();
        let mut rng = SeededRng::new(6);
        let p: Vec<f64> = m.params().iter().map(|v| v + 0.3 * rng.normal()).collect();
        m.set_params(&p);
        m
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let model = toy_model(Some(3), Activation::Sigmoid);
        let mut rng = SeededRng::new(9);
        let si = FeatureMatrix::uniform(6, 6, 1.0, &mut rng);
        let st = FeatureMatrix::uniform(6, 4, 1.0, &mut rng);
        let labels = [0, 1, 2, 0, 1, 1];
        let e = SimilarityGraph::from_labels(&labels, &labels);
        let (_, grads) = model
            .loss_and_grad(&si, &st, &e, Some(&labels), None)
            .unwrap();
        let analytic = grads.flatten();
        let numeric = finite_diff_grad(
            |p| {
                let mut m = model.clone();
                m.set_params(p);
                m.loss(&si, &st, &e, Some(&labels)).unwrap().total
            },
            &model.params(),
            1e-5,
        )
        .unwrap();
        assert_eq!(analytic.len(), numeric.len());
        for (a, n) in analytic.iter().zip(&numeric) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            assert!(rel < 1e-4, "{a} vs {n}");
        }
    }

    #[test]
    fn identity_mapping_reproduces_input() {
        let cfg = StageTwoConfig {
            mapping_dims: vec![4, 4, 4],
            hidden_activation: Activation::Identity,
            ..StageTwoConfig::default()
        };
        let model = StageTwoModel::init(4, 4, &cfg, &SeededRng::new(0)).unwrap();
        let mut rng = SeededRng::new(1);
        let s = FeatureMatrix::gaussian(7, 4, 1.0, &mut rng);
        let m1 = model.encode(&s, Modality::Image).unwrap();
        assert_eq!(m1, s);
        assert_eq!(model.encode(&s, Modality::Text).unwrap(), m1);
    }

    #[test]
    fn zero_learning_rate_leaves_model_unchanged() {
        let model = toy_model(Some(3), Activation::Relu);
        let mut rng = SeededRng::new(2);
        let si = FeatureMatrix::uniform(10, 6, 1.0, &mut rng);
        let st = FeatureMatrix::uniform(10, 4, 1.0, &mut rng);
        let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
        let cfg = StageTwoTrainConfig {
            learning_rate: 0.0,
            epochs: 4,
            batch_size: 3,
            ..StageTwoTrainConfig::default()
        };
        let out = multitask_train(model.clone(), &si, &st, Some(&labels), &cfg, &mut rng).unwrap();
        assert_eq!(out.model, model);
        assert_eq!(out.loss_history.len(), 4);
    }

    #[test]
    fn zero_branch_weight_is_pairwise_only() {
        let mut with_heads = toy_model(Some(3), Activation::Relu);
        with_heads.branch_weight = 0.0;
        let mut rng = SeededRng::new(4);
        let si = FeatureMatrix::uniform(12, 6, 1.0, &mut rng);
        let st = FeatureMatrix::uniform(12, 4, 1.0, &mut rng);
        let cfg = StageTwoTrainConfig {
            learning_rate: 0.05,
            epochs: 3,
            batch_size: 4,
            similarity: SimilaritySource::CoExistence,
            ..StageTwoTrainConfig::default()
        };
        // labels are never needed
        let a = multitask_train(
            with_heads.clone(),
            &si,
            &st,
            None,
            &cfg,
            &mut SeededRng::new(8),
        )
        .unwrap();
        let mut headless = with_heads.clone();
        headless.image_head = None;
        headless.text_head = None;
        let b = multitask_train(headless, &si, &st, None, &cfg, &mut SeededRng::new(8)).unwrap();
        assert_eq!(a.model.image_map, b.model.image_map);
        assert_eq!(a.model.text_map, b.model.text_map);
        assert_eq!(a.loss_history, b.loss_history);
        assert_eq!(a.model.image_head, with_heads.image_head);
    }

    #[test]
    fn missing_labels_with_active_branch_is_config_error() {
        let model = toy_model(Some(3), Activation::Relu);
        let si = FeatureMatrix::zeros(4, 6);
        let st = FeatureMatrix::zeros(4, 4);
        let cfg = StageTwoTrainConfig {
            similarity: SimilaritySource::CoExistence,
            ..StageTwoTrainConfig::default()
        };
        let err = multitask_train(model, &si, &st, None, &cfg, &mut SeededRng::new(0));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn training_pulls_pairs_together() {
        let cfg = StageTwoConfig {
            mapping_dims: vec![8, 8, 4],
            classes: Some(2),
            dropout: 0.0,
            ..StageTwoConfig::default()
        };
        let mut rng = SeededRng::new(10);
        let latent: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let mut si = FeatureMatrix::zeros(40, 6);
        let mut st = FeatureMatrix::zeros(40, 5);
        for (r, &c) in latent.iter().enumerate() {
            for j in 0..6 {
                si.set(
                    r,
                    j,
                    if j % 2 == c { 1.0 } else { 0.0 } + 0.1 * rng.normal(),
                );
            }
            for j in 0..5 {
                st.set(r, j, if j < 2 + c { 0.8 } else { 0.1 } + 0.1 * rng.normal());
            }
        }
        let model = StageTwoModel::init(6, 5, &cfg, &SeededRng::new(3)).unwrap();
        let train = StageTwoTrainConfig {
            learning_rate: 0.05,
            epochs: 60,
            batch_size: 10,
            ..StageTwoTrainConfig::default()
        };
        let out = multitask_train(model, &si, &st, Some(&latent), &train, &mut rng).unwrap();
        let first = out.loss_history[0];
        let last = *out.loss_history.last().unwrap();
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    proptest::proptest! {
        #[test]
        fn cross_entropy_is_nonnegative(
            logits in proptest::collection::vec(-5.0f64..5.0, 4),
            class in 0usize..4,
        ) {
            let probs = softmax_rows(&FeatureMatrix::row_vector(&logits).unwrap());
            let target = one_hot(&[class], 4).unwrap();
            proptest::prop_assert!(cross_entropy_loss(&probs, &target).unwrap() >= 0.0);
        }
    }
}
