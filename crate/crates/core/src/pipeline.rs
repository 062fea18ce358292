//! End-to-end runs: stage one (DBNs, CorrNets, fusion), stage two
//! (multi-task mappings) and evaluation, with checkpoints in between.

use std::path::Path;

use log::{info, warn};

use crate::checkpoint::{
    get_corrnet, get_dbn, get_fusion, get_stage_two, put_corrnet, put_dbn, put_fusion,
    put_stage_two, Checkpoint, Stage,
};
use crate::config::{AblationMode, ExperimentConfig, PairingMode};
use crate::corrnet::{corrnet_train, CorrNet, CorrNetTrainConfig};
use crate::dataset::{CrossModalDataset, Modality, Split};
use crate::dbn::{train_dbn, DbnModel};
use crate::error::{Error, Result};
use crate::eval::{
    curve_to_csv, evaluate, EvalInputs, EvalOptions, EvalTask, Items, MetricsReport,
};
use crate::fusion::{average_fuse_blocks, train_fusion, JointFusionRbm};
use crate::io::{column_stats, standardize, write_text};
use crate::multitask::{
    multitask_train, SimilaritySource, StageTwoConfig, StageTwoModel, StageTwoTrainConfig,
};
use crate::nn::Activation;
use crate::numeric::{FeatureMatrix, SeededRng};

const MODALITIES: [Modality; 2] = [Modality::Image, Modality::Text];

fn modality_index(m: Modality) -> u64 {
    match m {
        Modality::Image => 0,
        Modality::Text => 1,
    }
}

/// First/last loss of one training phase.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseSummary {
    pub phase: String,
    pub first: f64,
    pub last: f64,
    pub epochs: usize,
}

impl PhaseSummary {
    fn from_history(phase: impl Into<String>, history: &[f64]) -> Self {
        Self {
            phase: phase.into(),
            first: history.first().copied().unwrap_or(f64::NAN),
            last: history.last().copied().unwrap_or(f64::NAN),
            epochs: history.len(),
        }
    }
}

impl std::fmt::Display for PhaseSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.epochs == 0 {
            write!(f, "{}: not trained (0 epochs)", self.phase)
        } else {
            write!(
                f,
                "{}: {} epochs, loss {:.6} -> {:.6}",
                self.phase, self.epochs, self.first, self.last
            )
        }
    }
}

/// One modality's share of stage one.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityStack {
    pub instance_dbn: Option<DbnModel>,
    pub patch_dbn: Option<DbnModel>,
    pub fusion: JointFusionRbm,
}

/// Everything stage one learns.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Model {
    pub mode: AblationMode,
    pub image: ModalityStack,
    pub text: ModalityStack,
    pub instance_corrnet: Option<CorrNet>,
    pub patch_corrnet: Option<CorrNet>,
}

/// Intermediate representations of a set of rows.
struct Grains {
    origin: Option<FeatureMatrix>,
    patch: Option<FeatureMatrix>,
}

fn patch_rows(
    data: &CrossModalDataset,
    m: Modality,
    rows: &[usize],
) -> Result<(FeatureMatrix, Vec<usize>)> {
    let groups = data
        .patches(m)
        .ok_or_else(|| Error::Config(format!("dataset has no {m} patches")))?;
    let blocks: Vec<&FeatureMatrix> = rows.iter().map(|&i| &groups[i].features).collect();
    let counts = blocks.iter().map(|b| b.rows()).collect();
    Ok((FeatureMatrix::vstack(&blocks)?, counts))
}

fn uses_patches(mode: AblationMode, data: &CrossModalDataset) -> Result<bool> {
    let has = data.image_patches.is_some() && data.text_patches.is_some();
    match (mode.uses_patches(), has) {
        (false, _) => Ok(false),
        (true, true) => Ok(true),
        (true, false) if mode == AblationMode::FineOnly => Err(Error::Config(
            "fine-only mode needs image and text patch files".into(),
        )),
        (true, false) => {
            warn!("dataset has no patches; {mode} mode falls back to whole instances only");
            Ok(false)
        }
    }
}

impl Stage1Model {
    pub fn stack(&self, m: Modality) -> &ModalityStack {
        match m {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        }
    }

    fn dbn_grains(&self, data: &CrossModalDataset, m: Modality, rows: &[usize]) -> Result<Grains> {
        let s = self.stack(m);
        let origin = s
            .instance_dbn
            .as_ref()
            .map(|dbn| dbn.forward(&data.features(m).select_rows(rows)))
            .transpose()?;
        let patch = match &s.patch_dbn {
            Some(dbn) => {
                let (stacked, counts) = patch_rows(data, m, rows)?;
                Some(average_fuse_blocks(&dbn.forward(&stacked)?, &counts)?)
            }
            None => None,
        };
        Ok(Grains { origin, patch })
    }

    /// Separate representations `(S_image, S_text)` of the given rows.
    pub fn encode(
        &self,
        data: &CrossModalDataset,
        rows: &[usize],
    ) -> Result<(FeatureMatrix, FeatureMatrix)> {
        self.check_dataset(data)?;
        let gi = self.dbn_grains(data, Modality::Image, rows)?;
        let gt = self.dbn_grains(data, Modality::Text, rows)?;
        let code = |net: &Option<CorrNet>,
                    q: &Option<FeatureMatrix>,
                    m: Modality|
         -> Result<Option<FeatureMatrix>> {
            match (net, q) {
                (Some(n), Some(q)) => n.encode(q, m).map(Some),
                _ => Ok(None),
            }
        };
        let mut out = Vec::with_capacity(2);
        for (m, g) in [(Modality::Image, &gi), (Modality::Text, &gt)] {
            let t_origin = code(&self.instance_corrnet, &g.origin, m)?;
            let t_patch = code(&self.patch_corrnet, &g.patch, m)?;
            out.push(
                self.stack(m)
                    .fusion
                    .fuse(t_origin.as_ref(), t_patch.as_ref())?,
            );
        }
        let text = out.pop().expect("two");
        Ok((out.pop().expect("two"), text))
    }

    pub fn input_dim(&self, m: Modality) -> usize {
        let s = self.stack(m);
        s.instance_dbn
            .as_ref()
            .or(s.patch_dbn.as_ref())
            .map(DbnModel::input_dim)
            .expect("stage one keeps at least one DBN per modality")
    }

    pub fn output_dim(&self, m: Modality) -> usize {
        self.stack(m).fusion.output_dim()
    }

    pub fn check_dataset(&self, data: &CrossModalDataset) -> Result<()> {
        for m in MODALITIES {
            if self.input_dim(m) != data.features(m).cols() {
                return Err(Error::Compatibility(format!(
                    "checkpoint expects {m} width {} but the dataset has {}",
                    self.input_dim(m),
                    data.features(m).cols()
                )));
            }
            if self.stack(m).patch_dbn.is_some() && data.patches(m).is_none() {
                return Err(Error::Compatibility(format!(
                    "checkpoint uses {m} patches but the dataset has none"
                )));
            }
        }
        Ok(())
    }

    pub fn write(&self, ck: &mut Checkpoint) {
        ck.put_text("stage1.mode", self.mode.as_str());
        for m in MODALITIES {
            let s = self.stack(m);
            if let Some(d) = &s.instance_dbn {
                put_dbn(ck, &format!("stage1.{m}.instance_dbn"), d);
            }
            if let Some(d) = &s.patch_dbn {
                put_dbn(ck, &format!("stage1.{m}.patch_dbn"), d);
            }
            put_fusion(ck, &format!("stage1.{m}.fusion"), &s.fusion);
        }
        if let Some(n) = &self.instance_corrnet {
            put_corrnet(ck, "stage1.instance_corrnet", n);
        }
        if let Some(n) = &self.patch_corrnet {
            put_corrnet(ck, "stage1.patch_corrnet", n);
        }
    }

    pub fn read(ck: &Checkpoint) -> Result<Self> {
        let mode: AblationMode = ck
            .text("stage1.mode")?
            .parse()
            .map_err(|e: Error| Error::Compatibility(e.to_string()))?;
        let optional_dbn = |p: String| -> Result<Option<DbnModel>> {
            if ck.contains(&format!("{p}.modality")) {
                get_dbn(ck, &p).map(Some)
            } else {
                Ok(None)
            }
        };
        let optional_net = |p: &str| -> Result<Option<CorrNet>> {
            if ck.contains(&format!("{p}.image_encoder.dims")) {
                get_corrnet(ck, p).map(Some)
            } else {
                Ok(None)
            }
        };
        let stack = |m: Modality| -> Result<ModalityStack> {
            Ok(ModalityStack {
                instance_dbn: optional_dbn(format!("stage1.{m}.instance_dbn"))?,
                patch_dbn: optional_dbn(format!("stage1.{m}.patch_dbn"))?,
                fusion: get_fusion(ck, &format!("stage1.{m}.fusion"))?,
            })
        };
        let model = Self {
            mode,
            image: stack(Modality::Image)?,
            text: stack(Modality::Text)?,
            instance_corrnet: optional_net("stage1.instance_corrnet")?,
            patch_corrnet: optional_net("stage1.patch_corrnet")?,
        };
        for m in MODALITIES {
            let s = model.stack(m);
            if s.instance_dbn.is_none() && s.patch_dbn.is_none() {
                return Err(Error::Compatibility(format!("checkpoint has no {m} DBN")));
            }
        }
        Ok(model)
    }
}

#[derive(Clone, Debug)]
pub struct Stage1Outcome {
    pub model: Stage1Model,
    pub checkpoint: Checkpoint,
    pub summaries: Vec<PhaseSummary>,
}

fn train_indices(data: &CrossModalDataset) -> Result<Vec<usize>> {
    let train = data.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Validation("the training split is empty".into()));
    }
    Ok(train)
}

/// Trains the first stage on the training split.
pub fn train_stage1(cfg: &ExperimentConfig, data: &CrossModalDataset) -> Result<Stage1Outcome> {
    cfg.validate()?;
    data.validate()?;
    let root = SeededRng::new(cfg.seed);
    let train = train_indices(data)?;
    let val = data.indices(Split::Val);
    let patches = uses_patches(cfg.mode, data)?;
    let instances = cfg.mode.uses_instances();
    let mut summaries = Vec::new();

    let mut instance_dbns = Vec::new();
    let mut patch_dbns = Vec::new();
    for m in MODALITIES {
        let (layers, cd) = match m {
            Modality::Image => (&cfg.image_layers, &cfg.image_dbn),
            Modality::Text => (&cfg.text_layers, &cfg.text_dbn),
        };
        let k = modality_index(m);
        let instance = if instances {
            let x = data.features(m).select_rows(&train);
            let t = train_dbn(&x, m, layers, cd, &root.derive(10 + k))?;
            for (i, e) in t.layer_errors.iter().enumerate() {
                summaries.push(PhaseSummary::from_history(
                    format!("{m} instance dbn layer {i}"),
                    e,
                ));
            }
            Some(t.model)
        } else {
            None
        };
        let patch = if patches {
            let (x, _) = patch_rows(data, m, &train)?;
            let t = train_dbn(&x, m, layers, cd, &root.derive(20 + k))
                .map_err(|e| e.in_phase("patch"))?;
            for (i, e) in t.layer_errors.iter().enumerate() {
                summaries.push(PhaseSummary::from_history(
                    format!("{m} patch dbn layer {i}"),
                    e,
                ));
            }
            Some(t.model)
        } else {
            None
        };
        instance_dbns.push(instance);
        patch_dbns.push(patch);
    }

    let mut partial = Stage1Model {
        mode: cfg.mode,
        image: ModalityStack {
            instance_dbn: instance_dbns[0].take(),
            patch_dbn: patch_dbns[0].take(),
            fusion: placeholder_fusion(),
        },
        text: ModalityStack {
            instance_dbn: instance_dbns[1].take(),
            patch_dbn: patch_dbns[1].take(),
            fusion: placeholder_fusion(),
        },
        instance_corrnet: None,
        patch_corrnet: None,
    };
    let gi = partial.dbn_grains(data, Modality::Image, &train)?;
    let gt = partial.dbn_grains(data, Modality::Text, &train)?;
    let (vi, vt) = if val.is_empty() {
        (None, None)
    } else {
        (
            Some(partial.dbn_grains(data, Modality::Image, &val)?),
            Some(partial.dbn_grains(data, Modality::Text, &val)?),
        )
    };

    let corr_cfg = CorrNetTrainConfig {
        learning_rate: cfg.corrnet.learning_rate,
        momentum: cfg.corrnet.momentum,
        epochs: cfg.corrnet.epochs,
        batch_size: cfg.corrnet.batch_size,
        terms: cfg.mode.corr_terms(),
    };
    let train_corr = |name: &str,
                      qi: &FeatureMatrix,
                      qt: &FeatureMatrix,
                      val: Option<(&FeatureMatrix, &FeatureMatrix)>,
                      stream: u64,
                      summaries: &mut Vec<PhaseSummary>|
     -> Result<CorrNet> {
        let net = CorrNet::init(
            qi.cols(),
            qt.cols(),
            &cfg.corrnet.dims,
            cfg.corrnet.activation,
            &root.derive(stream),
        )?;
        let out = corrnet_train(net, qi, qt, val, &corr_cfg, &mut root.derive(stream + 1))
            .map_err(|e| e.in_phase(name))?;
        summaries.push(PhaseSummary::from_history(name, &out.train_loss));
        if let Some(last) = out.val_loss.last() {
            info!("{name}: validation loss {:.6}", last.total);
        }
        Ok(out.net)
    };
    if let (Some(qi), Some(qt)) = (&gi.origin, &gt.origin) {
        let v = vi
            .as_ref()
            .zip(vt.as_ref())
            .and_then(|(a, b)| a.origin.as_ref().zip(b.origin.as_ref()));
        partial.instance_corrnet = Some(train_corr(
            "instance corrnet",
            qi,
            qt,
            v,
            30,
            &mut summaries,
        )?);
    }
    if let (Some(qi), Some(qt)) = (&gi.patch, &gt.patch) {
        let v = vi
            .as_ref()
            .zip(vt.as_ref())
            .and_then(|(a, b)| a.patch.as_ref().zip(b.patch.as_ref()));
        partial.patch_corrnet = Some(train_corr("patch corrnet", qi, qt, v, 32, &mut summaries)?);
    }

    for (m, g) in [(Modality::Image, &gi), (Modality::Text, &gt)] {
        let t_origin = match (&partial.instance_corrnet, &g.origin) {
            (Some(n), Some(q)) => Some(n.encode(q, m)?),
            _ => None,
        };
        let t_patch = match (&partial.patch_corrnet, &g.patch) {
            (Some(n), Some(q)) => Some(n.encode(q, m)?),
            _ => None,
        };
        let trained = train_fusion(
            &cfg.fusion,
            t_origin.as_ref(),
            t_patch.as_ref(),
            &cfg.fusion_dims,
            &root.derive(40 + modality_index(m)),
        )
        .map_err(|e| e.in_phase(&format!("{m} fusion")))?;
        let parts = ["origin", "patch"]
            .into_iter()
            .zip([t_origin.is_some(), t_patch.is_some()])
            .filter(|(_, present)| *present)
            .map(|(p, _)| p)
            .chain(std::iter::once("top"));
        for (part, errs) in parts.zip(&trained.errors) {
            summaries.push(PhaseSummary::from_history(
                format!("{m} fusion {part}"),
                errs,
            ));
        }
        match m {
            Modality::Image => partial.image.fusion = trained.model,
            Modality::Text => partial.text.fusion = trained.model,
        }
    }

    for s in &summaries {
        info!("{s}");
    }
    let mut checkpoint = Checkpoint::new(Stage::One, cfg.seed, cfg.to_text());
    partial.write(&mut checkpoint);
    Ok(Stage1Outcome {
        model: partial,
        checkpoint,
        summaries,
    })
}

fn placeholder_fusion() -> JointFusionRbm {
    use crate::rbm::{RbmParams, VisibleKind};
    JointFusionRbm::new(
        Some(RbmParams::zeros(1, 1, VisibleKind::Bernoulli)),
        None,
        RbmParams::zeros(1, 1, VisibleKind::Bernoulli),
    )
    .expect("valid placeholder")
}

pub fn run_stage1(cfg: &ExperimentConfig, data: &CrossModalDataset) -> Result<Checkpoint> {
    train_stage1(cfg, data).map(|o| o.checkpoint)
}

/// Which similarity graph stage two will use.
pub fn resolve_pairing(cfg: &ExperimentConfig, has_labels: bool) -> Result<SimilaritySource> {
    match cfg.stage2.pairing {
        PairingMode::Labels if !has_labels => Err(Error::Config(
            "pairing = labels but the dataset has no labels".into(),
        )),
        PairingMode::Labels => Ok(SimilaritySource::Labels),
        PairingMode::CoExistence => Ok(SimilaritySource::CoExistence),
        PairingMode::Auto if has_labels && cfg.stage2.branch_weight > 0.0 => {
            Ok(SimilaritySource::Labels)
        }
        PairingMode::Auto => Ok(SimilaritySource::CoExistence),
    }
}

/// Whether a stage-two run needs labels at all. A run that does not is
/// never given them, so the label file stays closed.
pub fn stage2_needs_labels(cfg: &ExperimentConfig) -> bool {
    cfg.stage2.branch_weight > 0.0 || cfg.stage2.pairing == PairingMode::Labels
}

/// Per-feature z-scoring of stage-two inputs, fitted on the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct InputScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputScaler {
    pub fn fit(s: &FeatureMatrix) -> Self {
        let rows: Vec<usize> = (0..s.rows()).collect();
        let (mean, std) = column_stats(s, &rows);
        Self { mean, std }
    }

    pub fn apply(&self, s: &FeatureMatrix) -> Result<FeatureMatrix> {
        if s.cols() != self.mean.len() {
            return Err(Error::Compatibility(format!(
                "input scaler fitted on width {} applied to width {}",
                self.mean.len(),
                s.cols()
            )));
        }
        Ok(standardize(s, &self.mean, &self.std))
    }

    fn write(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.put_vector(&format!("{prefix}.mean"), &self.mean);
        ck.put_vector(&format!("{prefix}.std"), &self.std);
    }

    fn read(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let scaler = Self {
            mean: ck.vector(&format!("{prefix}.mean"))?,
            std: ck.vector(&format!("{prefix}.std"))?,
        };
        if scaler.mean.len() != scaler.std.len() || scaler.std.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Compatibility(format!("{prefix}: invalid scaler")));
        }
        Ok(scaler)
    }
}

/// A trained stage-two head with the scalers in front of it.
#[derive(Clone, Debug, PartialEq)]
pub struct CommonEncoder {
    pub stage1: Stage1Model,
    pub image_scaler: InputScaler,
    pub text_scaler: InputScaler,
    pub model: StageTwoModel,
}

impl CommonEncoder {
    /// Common representations `(M_image, M_text)` of the given rows.
    pub fn encode(
        &self,
        data: &CrossModalDataset,
        rows: &[usize],
    ) -> Result<(FeatureMatrix, FeatureMatrix)> {
        let (si, st) = self.stage1.encode(data, rows)?;
        Ok((
            self.model
                .encode(&self.image_scaler.apply(&si)?, Modality::Image)?,
            self.model
                .encode(&self.text_scaler.apply(&st)?, Modality::Text)?,
        ))
    }
}

#[derive(Clone, Debug)]
pub struct Stage2Outcome {
    pub encoder: CommonEncoder,
    pub loss_history: Vec<f64>,
    pub checkpoint: Checkpoint,
}

/// Trains the stage-two mappings on top of a stage-one checkpoint.
pub fn train_stage2(
    cfg: &ExperimentConfig,
    data: &CrossModalDataset,
    stage1: &Checkpoint,
) -> Result<Stage2Outcome> {
    cfg.validate()?;
    if stage1.stage != Stage::One {
        return Err(Error::Compatibility(
            "stage two needs a stage-one checkpoint".into(),
        ));
    }
    let s1 = Stage1Model::read(stage1)?;
    s1.check_dataset(data)?;
    let train = train_indices(data)?;
    let (si, st) = s1.encode(data, &train)?;
    let image_scaler = InputScaler::fit(&si);
    let text_scaler = InputScaler::fit(&st);
    let si = image_scaler.apply(&si)?;
    let st = text_scaler.apply(&st)?;
    let similarity = resolve_pairing(cfg, data.labels.is_some())?;
    let classes = data
        .labels
        .as_ref()
        .map(|l| l.iter().max().map_or(1, |&c| c + 1));
    let model_cfg = StageTwoConfig {
        mapping_dims: cfg.stage2.dims.clone(),
        hidden_activation: Activation::Relu,
        output_activation: Activation::Identity,
        classes,
        margin: cfg.stage2.margin,
        branch_weight: cfg.stage2.branch_weight,
        dropout: cfg.stage2.dropout,
    };
    let root = SeededRng::new(cfg.seed);
    let model = StageTwoModel::init(si.cols(), st.cols(), &model_cfg, &root.derive(50))?;
    let train_cfg = StageTwoTrainConfig {
        learning_rate: cfg.stage2.learning_rate,
        momentum: cfg.stage2.momentum,
        epochs: cfg.stage2.epochs,
        batch_size: cfg.stage2.batch_size,
        similarity,
    };
    let labels = data.labels_for(&train);
    info!(
        "stage two: {} training pairs, similarity from {}",
        train.len(),
        match similarity {
            SimilaritySource::Labels => "labels",
            SimilaritySource::CoExistence => "co-existence",
        }
    );
    let out = multitask_train(
        model,
        &si,
        &st,
        labels.as_deref(),
        &train_cfg,
        &mut root.derive(51),
    )?;
    info!(
        "{}",
        PhaseSummary::from_history("multitask", &out.loss_history)
    );

    let mut checkpoint = Checkpoint::new(Stage::Two, cfg.seed, cfg.to_text());
    s1.write(&mut checkpoint);
    image_scaler.write(&mut checkpoint, "stage2.image_scaler");
    text_scaler.write(&mut checkpoint, "stage2.text_scaler");
    put_stage_two(&mut checkpoint, "stage2", &out.model);
    checkpoint.put_vector("stage2.loss_history", &out.loss_history);
    Ok(Stage2Outcome {
        encoder: CommonEncoder {
            stage1: s1,
            image_scaler,
            text_scaler,
            model: out.model,
        },
        loss_history: out.loss_history,
        checkpoint,
    })
}

pub fn run_stage2(
    cfg: &ExperimentConfig,
    data: &CrossModalDataset,
    stage1: &Checkpoint,
) -> Result<Checkpoint> {
    train_stage2(cfg, data, stage1).map(|o| o.checkpoint)
}

/// The encoder and loss history stored in a stage-two checkpoint.
pub fn read_stage2(ck: &Checkpoint) -> Result<(CommonEncoder, Vec<f64>)> {
    if ck.stage != Stage::Two {
        return Err(Error::Compatibility(
            "evaluation needs a stage-two checkpoint".into(),
        ));
    }
    let stage1 = Stage1Model::read(ck)?;
    let model = get_stage_two(ck, "stage2")?;
    let image_scaler = InputScaler::read(ck, "stage2.image_scaler")?;
    let text_scaler = InputScaler::read(ck, "stage2.text_scaler")?;
    for (m, scaler) in [
        (Modality::Image, &image_scaler),
        (Modality::Text, &text_scaler),
    ] {
        let width = stage1.output_dim(m);
        if width != model.mapping(m).input_dim() || width != scaler.mean.len() {
            return Err(Error::Compatibility(format!(
                "stage-two {m} mapping expects width {} but stage one produces {width}",
                model.mapping(m).input_dim()
            )));
        }
    }
    let encoder = CommonEncoder {
        stage1,
        image_scaler,
        text_scaler,
        model,
    };
    Ok((encoder, ck.vector("stage2.loss_history")?))
}

/// Encodes the test split and runs `task`.
pub fn run_eval(
    cfg: &ExperimentConfig,
    data: &CrossModalDataset,
    stage2: &Checkpoint,
    task: EvalTask,
) -> Result<MetricsReport> {
    let (encoder, _) = read_stage2(stage2)?;
    let test = data.indices(Split::Test);
    if test.is_empty() {
        return Err(Error::Validation("the test split is empty".into()));
    }
    let (mi, mt) = encoder.encode(data, &test)?;
    let labels = data.labels_for(&test);
    let inputs = EvalInputs {
        image: Items::new(mi, labels.clone(), test.clone(), Modality::Image)?,
        text: Items::new(mt, labels, test, Modality::Text)?,
    };
    let opts = EvalOptions {
        exclude_own_pair: cfg.exclude_own_pair,
        deterministic: cfg.deterministic,
    };
    evaluate(&inputs, task, &opts, &cfg.scope_grid)
}

/// Writes `metrics.txt` plus `pr_<direction>.csv` and `scope_<direction>.csv`.
pub fn write_eval_outputs(report: &MetricsReport, dir: &Path) -> Result<()> {
    write_text(&dir.join("metrics.txt"), &report.to_text())?;
    for c in &report.pr_curves {
        write_text(
            &dir.join(format!("pr_{}.csv", c.name)),
            &curve_to_csv(&c.points),
        )?;
    }
    for c in &report.scope_curves {
        write_text(
            &dir.join(format!("scope_{}.csv", c.name)),
            &curve_to_csv(&c.points),
        )?;
    }
    Ok(())
}

/// Stage two and evaluation for each margin, sharing one stage-one
/// checkpoint.
pub fn sweep_margin(
    cfg: &ExperimentConfig,
    data: &CrossModalDataset,
    stage1: &Checkpoint,
    margins: &[f64],
    task: EvalTask,
) -> Result<Vec<(f64, MetricsReport)>> {
    margins
        .iter()
        .map(|&margin| {
            let mut c = cfg.clone();
            c.stage2.margin = margin;
            let ck = run_stage2(&c, data, stage1)?;
            Ok((margin, run_eval(&c, data, &ck, task)?))
        })
        .collect()
}

/// Stage one, stage two and evaluation in one call.
pub fn run_all(
    cfg: &ExperimentConfig,
    data: &CrossModalDataset,
    task: EvalTask,
) -> Result<MetricsReport> {
    let s1 = run_stage1(cfg, data)?;
    let s2 = run_stage2(cfg, data, &s1)?;
    run_eval(cfg, data, &s2, task)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, SynthSpec};

    fn tiny_data(seed: u64) -> CrossModalDataset {
        let mut d = generate(&SynthSpec {
            classes: 2,
            per_class: 10,
            image_dim: 6,
            text_dim: 8,
            latent_dim: 3,
            doc_length: 20,
            patch_doc_length: 8,
            seed,
            ..SynthSpec::default()
        })
        .unwrap();
        crate::io::standardize_dataset(&mut d);
        d
    }

    fn tiny_cfg() -> ExperimentConfig {
        let mut c = ExperimentConfig::compact();
        c.image_layers = vec![5, 4];
        c.text_layers = vec![5, 4];
        c.corrnet.dims = vec![4, 3];
        c.fusion_dims = crate::fusion::FusionDims {
            pathway_hidden: 3,
            output_dim: 5,
        };
        c.stage2.dims = vec![6, 4];
        for cd in [&mut c.image_dbn, &mut c.text_dbn, &mut c.fusion] {
            cd.epochs = 2;
            cd.batch_size = 4;
        }
        c.corrnet.epochs = 2;
        c.stage2.epochs = 3;
        c.stage2.batch_size = 4;
        c
    }

    #[test]
    fn fixed_seed_gives_identical_checkpoints() {
        let d = tiny_data(0);
        let c = tiny_cfg();
        let a = run_stage1(&c, &d).unwrap();
        let b = run_stage1(&c, &d).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let a2 = run_stage2(&c, &d, &a).unwrap();
        let b2 = run_stage2(&c, &d, &b).unwrap();
        assert_eq!(a2.to_bytes(), b2.to_bytes());
        let ra = run_eval(&c, &d, &a2, EvalTask::BiModal).unwrap();
        let rb = run_eval(&c, &d, &b2, EvalTask::BiModal).unwrap();
        assert_eq!(ra.to_text(), rb.to_text());
    }

    #[test]
    fn modes_store_only_their_paths() {
        let d = tiny_data(1);
        let mut c = tiny_cfg();
        c.mode = AblationMode::CoarseOnly;
        let ck = run_stage1(&c, &d).unwrap();
        assert!(ck.names().all(|n| !n.contains("patch")));
        assert!(ck.contains("stage1.image.instance_dbn.dims"));
        c.mode = AblationMode::FineOnly;
        let ck = run_stage1(&c, &d).unwrap();
        assert!(ck.names().all(|n| !n.contains("instance")));
        assert!(ck.contains("stage1.text.patch_dbn.dims"));
    }

    #[test]
    fn recorded_dims_follow_the_config() {
        let d = tiny_data(2);
        let c = tiny_cfg();
        let ck = run_stage1(&c, &d).unwrap();
        assert_eq!(ck.text("stage1.image.instance_dbn.dims").unwrap(), "6,5,4");
        assert_eq!(ck.text("stage1.text.patch_dbn.dims").unwrap(), "8,5,4");
        let m = Stage1Model::read(&ck).unwrap();
        assert_eq!(m.input_dim(Modality::Text), 8);
        assert_eq!(m.output_dim(Modality::Image), 5);
    }

    #[test]
    fn loss_history_has_one_entry_per_epoch() {
        let d = tiny_data(3);
        let c = tiny_cfg();
        let s1 = run_stage1(&c, &d).unwrap();
        let out = train_stage2(&c, &d, &s1).unwrap();
        assert_eq!(out.loss_history.len(), c.stage2.epochs);
        let (_, stored) = read_stage2(&out.checkpoint).unwrap();
        assert_eq!(stored, out.loss_history);
    }

    #[test]
    fn zero_learning_rate_keeps_initial_mappings() {
        let d = tiny_data(4);
        let mut c = tiny_cfg();
        let s1 = run_stage1(&c, &d).unwrap();
        c.stage2.learning_rate = 0.0;
        let trained = train_stage2(&c, &d, &s1).unwrap();
        c.stage2.epochs = 0;
        let init = train_stage2(&c, &d, &s1).unwrap();
        assert_eq!(trained.encoder.model, init.encoder.model);
    }

    #[test]
    fn untrained_checkpoint_still_evaluates() {
        let d = tiny_data(5);
        let mut c = tiny_cfg();
        for cd in [&mut c.image_dbn, &mut c.text_dbn, &mut c.fusion] {
            cd.epochs = 0;
        }
        c.corrnet.epochs = 0;
        c.stage2.epochs = 0;
        let r = run_all(&c, &d, EvalTask::AllModal).unwrap();
        let v = r.map_average.unwrap();
        assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn mismatched_dataset_is_incompatible() {
        let c = tiny_cfg();
        let ck = run_stage1(&c, &tiny_data(6)).unwrap();
        let mut other = generate(&SynthSpec {
            classes: 2,
            per_class: 10,
            image_dim: 7,
            text_dim: 8,
            ..SynthSpec::default()
        })
        .unwrap();
        crate::io::standardize_dataset(&mut other);
        assert!(matches!(
            run_stage2(&c, &other, &ck),
            Err(Error::Compatibility(_))
        ));
        assert!(matches!(
            run_eval(&c, &other, &ck, EvalTask::BiModal),
            Err(Error::Compatibility(_))
        ));
    }

    #[test]
    fn missing_patches_fall_back_except_in_fine_only() {
        let mut d = tiny_data(7);
        d.image_patches = None;
        d.text_patches = None;
        let mut c = tiny_cfg();
        assert!(run_stage1(&c, &d).is_ok());
        c.mode = AblationMode::FineOnly;
        assert!(matches!(run_stage1(&c, &d), Err(Error::Config(_))));
    }

    #[test]
    fn auto_pairing_prefers_labels_only_with_a_classifier() {
        let mut c = tiny_cfg();
        assert_eq!(resolve_pairing(&c, true).unwrap(), SimilaritySource::Labels);
        assert_eq!(
            resolve_pairing(&c, false).unwrap(),
            SimilaritySource::CoExistence
        );
        c.stage2.branch_weight = 0.0;
        assert_eq!(
            resolve_pairing(&c, true).unwrap(),
            SimilaritySource::CoExistence
        );
        assert!(!stage2_needs_labels(&c));
        c.stage2.pairing = PairingMode::Labels;
        assert!(resolve_pairing(&c, false).is_err());
        assert!(stage2_needs_labels(&c));
    }

    #[test]
    fn label_free_run_needs_no_labels() {
        let mut d = tiny_data(8);
        d.labels = None;
        let mut c = tiny_cfg();
        c.stage2.branch_weight = 0.0;
        let r = run_all(&c, &d, EvalTask::Retrieval).unwrap();
        assert!(r.map_average.is_none());
        assert_eq!(r.recall_at.len(), 3);
    }

    #[test]
    fn scaler_standardizes_training_rows() {
        let s = FeatureMatrix::new(3, 2, vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0]).unwrap();
        let sc = InputScaler::fit(&s);
        let z = sc.apply(&s).unwrap();
        assert!((z.get(0, 0) + 1.224744871391589).abs() < 1e-12);
        assert_eq!(z.get(1, 1), 0.0);
        assert!(matches!(
            sc.apply(&FeatureMatrix::zeros(1, 3)),
            Err(Error::Compatibility(_))
        ));
    }
}
