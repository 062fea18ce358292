//! Experiment configuration as flat `key = value` text.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::corrnet::{CorrTerms, DEFAULT_ENCODER_DIMS};
use crate::dbn::{IMAGE_LAYER_DIMS, TEXT_LAYER_DIMS};
use crate::error::{Error, Result};
use crate::eval::DEFAULT_SCOPE_GRID;
use crate::fusion::{FusionDims, DEFAULT_FUSION_OUTPUT, DEFAULT_PATHWAY_HIDDEN};
use crate::io::{parse_key_values, read_text};
use crate::multitask::DEFAULT_MAPPING_DIMS;
use crate::nn::Activation;
use crate::rbm::CdConfig;

/// Which parts of the first stage take part in a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationMode {
    /// Instances and patches, both CorrNet terms.
    Full,
    /// Whole instances only.
    CoarseOnly,
    /// Patches only.
    FineOnly,
    /// CorrNets trained on reconstruction terms only.
    IntraOnly,
    /// CorrNets trained on the correlation term only.
    InterOnly,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::Full,
        AblationMode::CoarseOnly,
        AblationMode::FineOnly,
        AblationMode::IntraOnly,
        AblationMode::InterOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::CoarseOnly => "coarse-only",
            AblationMode::FineOnly => "fine-only",
            AblationMode::IntraOnly => "intra-only",
            AblationMode::InterOnly => "inter-only",
        }
    }

    pub fn uses_instances(self) -> bool {
        self != AblationMode::FineOnly
    }

    pub fn uses_patches(self) -> bool {
        self != AblationMode::CoarseOnly
    }

    pub fn corr_terms(self) -> CorrTerms {
        match self {
            AblationMode::IntraOnly => CorrTerms::ReconstructionOnly,
            AblationMode::InterOnly => CorrTerms::CorrelationOnly,
            _ => CorrTerms::Joint,
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Usage(format!(
                    "unknown mode {s:?} (expected full, coarse-only, fine-only, intra-only or inter-only)"
                ))
            })
    }
}

/// How stage two builds its similarity graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairingMode {
    /// Labels when the classification branch is weighted and labels exist,
    /// otherwise co-existence.
    Auto,
    Labels,
    CoExistence,
}

impl PairingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PairingMode::Auto => "auto",
            PairingMode::Labels => "labels",
            PairingMode::CoExistence => "coexistence",
        }
    }
}

impl FromStr for PairingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(PairingMode::Auto),
            "labels" => Ok(PairingMode::Labels),
            "coexistence" => Ok(PairingMode::CoExistence),
            other => Err(Error::Config(format!(
                "unknown pairing {other:?} (expected auto, labels or coexistence)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrNetSettings {
    pub dims: Vec<usize>,
    pub activation: Activation,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for CorrNetSettings {
    fn default() -> Self {
        Self {
            dims: DEFAULT_ENCODER_DIMS.to_vec(),
            activation: Activation::Sigmoid,
            learning_rate: 0.1,
            momentum: 0.9,
            epochs: 50,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageTwoSettings {
    pub dims: Vec<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub margin: f64,
    pub branch_weight: f64,
    pub pairing: PairingMode,
}

impl Default for StageTwoSettings {
    fn default() -> Self {
        Self {
            dims: DEFAULT_MAPPING_DIMS.to_vec(),
            learning_rate: 1e-3,
            momentum: 0.9,
            epochs: 50,
            batch_size: 64,
            dropout: 0.5,
            margin: 1.0,
            branch_weight: 1.0,
            pairing: PairingMode::Auto,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub deterministic: bool,
    pub mode: AblationMode,
    pub image_layers: Vec<usize>,
    pub text_layers: Vec<usize>,
    pub image_dbn: CdConfig,
    pub text_dbn: CdConfig,
    pub corrnet: CorrNetSettings,
    pub fusion_dims: FusionDims,
    pub fusion: CdConfig,
    pub stage2: StageTwoSettings,
    pub exclude_own_pair: bool,
    pub scope_grid: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            deterministic: true,
            mode: AblationMode::Full,
            image_layers: IMAGE_LAYER_DIMS.to_vec(),
            text_layers: TEXT_LAYER_DIMS.to_vec(),
            image_dbn: CdConfig {
                learning_rate: 0.001,
                ..CdConfig::default()
            },
            text_dbn: CdConfig::default(),
            corrnet: CorrNetSettings::default(),
            fusion_dims: FusionDims {
                pathway_hidden: DEFAULT_PATHWAY_HIDDEN,
                output_dim: DEFAULT_FUSION_OUTPUT,
            },
            fusion: CdConfig::default(),
            stage2: StageTwoSettings::default(),
            exclude_own_pair: false,
            scope_grid: DEFAULT_SCOPE_GRID.to_vec(),
        }
    }
}

impl ExperimentConfig {
    /// Small widths and short schedules sized for the synthetic generator.
    /// Trains the whole pipeline in a few seconds.
    pub fn compact() -> Self {
        let cd = |learning_rate: f64, init_std: f64, epochs: usize| CdConfig {
            learning_rate,
            init_std,
            epochs,
            batch_size: 16,
            ..CdConfig::default()
        };
        Self {
            image_layers: vec![64, 64],
            text_layers: vec![64, 64],
            image_dbn: cd(0.001, 0.01, 30),
            // Count inputs give tiny pre-activations under the default
            // init; wider weights keep per-document detail alive.
            text_dbn: cd(0.001, 0.1, 30),
            corrnet: CorrNetSettings {
                dims: vec![64, 64],
                epochs: 20,
                batch_size: 16,
                ..CorrNetSettings::default()
            },
            fusion_dims: FusionDims {
                pathway_hidden: 64,
                output_dim: 64,
            },
            // CorrNet codes vary little; small fusion weights would flatten
            // that variation to a constant.
            fusion: cd(0.05, 0.1, 10),
            stage2: StageTwoSettings {
                dims: vec![64, 64, 32],
                learning_rate: 0.01,
                epochs: 300,
                batch_size: 32,
                dropout: 0.0,
                ..StageTwoSettings::default()
            },
            ..Self::default()
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|t| parse_value::<usize>(key, t.trim()))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(Error::Config(format!(
            "`{key}`: expected true or false, got {other:?}"
        ))),
    }
}

fn join(values: &[usize]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

const CD_FIELDS: [&str; 8] = [
    "cd_k",
    "learning_rate",
    "batch_size",
    "epochs",
    "momentum",
    "weight_decay",
    "mean_field",
    "init_std",
];

fn set_cd(cfg: &mut CdConfig, field: &str, key: &str, value: &str) -> Result<()> {
    match field {
        "cd_k" => cfg.k = parse_value(key, value)?,
        "learning_rate" => cfg.learning_rate = parse_value(key, value)?,
        "batch_size" => cfg.batch_size = parse_value(key, value)?,
        "epochs" => cfg.epochs = parse_value(key, value)?,
        "momentum" => cfg.momentum = parse_value(key, value)?,
        "weight_decay" => cfg.weight_decay = parse_value(key, value)?,
        "mean_field" => cfg.mean_field = parse_bool(key, value)?,
        "init_std" => cfg.init_std = parse_value(key, value)?,
        _ => unreachable!("field list is closed"),
    }
    Ok(())
}

fn cd_lines(out: &mut String, prefix: &str, cfg: &CdConfig) {
    let _ = writeln!(out, "{prefix}_cd_k = {}", cfg.k);
    let _ = writeln!(out, "{prefix}_learning_rate = {}", cfg.learning_rate);
    let _ = writeln!(out, "{prefix}_batch_size = {}", cfg.batch_size);
    let _ = writeln!(out, "{prefix}_epochs = {}", cfg.epochs);
    let _ = writeln!(out, "{prefix}_momentum = {}", cfg.momentum);
    let _ = writeln!(out, "{prefix}_weight_decay = {}", cfg.weight_decay);
    let _ = writeln!(out, "{prefix}_mean_field = {}", cfg.mean_field);
    let _ = writeln!(out, "{prefix}_init_std = {}", cfg.init_std);
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?, path)
    }

    /// Starts from the defaults and applies every key in `text`.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for kv in parse_key_values(text, path)? {
            cfg.set(&kv.key, &kv.value).map_err(|e| match e {
                Error::Config(msg) => Error::Format {
                    path: path.display().to_string(),
                    line: kv.line,
                    message: msg,
                },
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key. Unknown keys are configuration errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        for (prefix, cd) in [
            ("image_dbn", &mut self.image_dbn),
            ("text_dbn", &mut self.text_dbn),
            ("fusion", &mut self.fusion),
        ] {
            if let Some(field) = key.strip_prefix(prefix).and_then(|r| r.strip_prefix('_')) {
                if CD_FIELDS.contains(&field) {
                    return set_cd(cd, field, key, value);
                }
            }
        }
        let s2 = &mut self.stage2;
        let cn = &mut self.corrnet;
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "deterministic" => self.deterministic = parse_bool(key, value)?,
            "mode" => {
                self.mode = value
                    .parse()
                    .map_err(|e: Error| Error::Config(format!("`mode`: {e}")))?
            }
            "image_layers" => self.image_layers = parse_list(key, value)?,
            "text_layers" => self.text_layers = parse_list(key, value)?,
            "corrnet_dims" => cn.dims = parse_list(key, value)?,
            "corrnet_activation" => {
                cn.activation = value
                    .parse()
                    .map_err(|e: Error| Error::Config(format!("`{key}`: {e}")))?
            }
            "corrnet_learning_rate" => cn.learning_rate = parse_value(key, value)?,
            "corrnet_momentum" => cn.momentum = parse_value(key, value)?,
            "corrnet_epochs" => cn.epochs = parse_value(key, value)?,
            "corrnet_batch_size" => cn.batch_size = parse_value(key, value)?,
            "fusion_pathway_hidden" => self.fusion_dims.pathway_hidden = parse_value(key, value)?,
            "fusion_output" => self.fusion_dims.output_dim = parse_value(key, value)?,
            "stage2_dims" => s2.dims = parse_list(key, value)?,
            "stage2_learning_rate" => s2.learning_rate = parse_value(key, value)?,
            "stage2_momentum" => s2.momentum = parse_value(key, value)?,
            "stage2_epochs" => s2.epochs = parse_value(key, value)?,
            "stage2_batch_size" => s2.batch_size = parse_value(key, value)?,
            "stage2_dropout" => s2.dropout = parse_value(key, value)?,
            "margin" => s2.margin = parse_value(key, value)?,
            "branch_weight" => s2.branch_weight = parse_value(key, value)?,
            "pairing" => s2.pairing = value.parse()?,
            "exclude_own_pair" => self.exclude_own_pair = parse_bool(key, value)?,
            "scope_grid" => self.scope_grid = parse_list(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for (name, cd) in [
            ("image_dbn", &self.image_dbn),
            ("text_dbn", &self.text_dbn),
            ("fusion", &self.fusion),
        ] {
            cd.validate()
                .map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        for (name, dims) in [
            ("image_layers", &self.image_layers),
            ("text_layers", &self.text_layers),
            ("corrnet_dims", &self.corrnet.dims),
            ("stage2_dims", &self.stage2.dims),
        ] {
            if dims.is_empty() || dims.contains(&0) {
                return Err(Error::Config(format!("`{name}` needs positive widths")));
            }
        }
        for (name, lr) in [
            ("corrnet_learning_rate", self.corrnet.learning_rate),
            ("stage2_learning_rate", self.stage2.learning_rate),
        ] {
            if !(0.0..=1.0).contains(&lr) {
                return Err(Error::Config(format!(
                    "`{name}` must lie in [0, 1], got {lr}"
                )));
            }
        }
        if self.corrnet.batch_size == 0 || self.stage2.batch_size == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if self.fusion_dims.pathway_hidden == 0 || self.fusion_dims.output_dim == 0 {
            return Err(Error::Config("fusion widths must be >= 1".into()));
        }
        if !(self.stage2.margin > 0.0) {
            return Err(Error::Config(format!(
                "`margin` must be > 0, got {}",
                self.stage2.margin
            )));
        }
        if !(self.stage2.branch_weight >= 0.0) {
            return Err(Error::Config("`branch_weight` must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.stage2.dropout) {
            return Err(Error::Config("`stage2_dropout` must lie in [0, 1)".into()));
        }
        if self.scope_grid.is_empty() || self.scope_grid.contains(&0) {
            return Err(Error::Config("`scope_grid` needs positive cutoffs".into()));
        }
        Ok(())
    }

    /// Every key with its value; [`ExperimentConfig::parse`] reads it back.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "deterministic = {}", self.deterministic);
        let _ = writeln!(out, "mode = {}", self.mode);
        let _ = writeln!(out, "image_layers = {}", join(&self.image_layers));
        let _ = writeln!(out, "text_layers = {}", join(&self.text_layers));
        cd_lines(&mut out, "image_dbn", &self.image_dbn);
        cd_lines(&mut out, "text_dbn", &self.text_dbn);
        let cn = &self.corrnet;
        let _ = writeln!(out, "corrnet_dims = {}", join(&cn.dims));
        let _ = writeln!(out, "corrnet_activation = {}", cn.activation);
        let _ = writeln!(out, "corrnet_learning_rate = {}", cn.learning_rate);
        let _ = writeln!(out, "corrnet_momentum = {}", cn.momentum);
        let _ = writeln!(out, "corrnet_epochs = {}", cn.epochs);
        let _ = writeln!(out, "corrnet_batch_size = {}", cn.batch_size);
        let _ = writeln!(
            out,
            "fusion_pathway_hidden = {}",
            self.fusion_dims.pathway_hidden
        );
        let _ = writeln!(out, "fusion_output = {}", self.fusion_dims.output_dim);
        cd_lines(&mut out, "fusion", &self.fusion);
        let s2 = &self.stage2;
        let _ = writeln!(out, "stage2_dims = {}", join(&s2.dims));
        let _ = writeln!(out, "stage2_learning_rate = {}", s2.learning_rate);
        let _ = writeln!(out, "stage2_momentum = {}", s2.momentum);
        let _ = writeln!(out, "stage2_epochs = {}", s2.epochs);
        let _ = writeln!(out, "stage2_batch_size = {}", s2.batch_size);
        let _ = writeln!(out, "stage2_dropout = {}", s2.dropout);
        let _ = writeln!(out, "margin = {}", s2.margin);
        let _ = writeln!(out, "branch_weight = {}", s2.branch_weight);
        let _ = writeln!(out, "pairing = {}", s2.pairing.as_str());
        let _ = writeln!(out, "exclude_own_pair = {}", self.exclude_own_pair);
        let _ = writeln!(out, "scope_grid = {}", join(&self.scope_grid));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::parse(&cfg.to_text(), Path::new("c")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.image_layers, vec![2048, 1024]);
        assert_eq!(cfg.stage2.dims, vec![1024; 3]);
        assert_eq!(cfg.stage2.margin, 1.0);
    }

    #[test]
    fn shipped_compact_file_matches_preset() {
        let text = include_str!("../../../configs/compact.conf");
        let parsed = ExperimentConfig::parse(text, Path::new("compact.conf")).unwrap();
        assert_eq!(parsed, ExperimentConfig::compact());
        parsed.validate().unwrap();
    }

    #[test]
    fn keys_apply_on_top_of_defaults() {
        let text = "seed = 9\nmode = coarse-only\ntext_dbn_epochs = 3\nfusion_mean_field = true\nmargin = 2.5\n";
        let cfg = ExperimentConfig::parse(text, Path::new("c")).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.mode, AblationMode::CoarseOnly);
        assert_eq!(cfg.text_dbn.epochs, 3);
        assert_eq!(cfg.image_dbn.epochs, CdConfig::default().epochs);
        assert!(cfg.fusion.mean_field);
        assert_eq!(cfg.stage2.margin, 2.5);
    }

    #[test]
    fn unknown_and_invalid_keys_report_lines() {
        let err = ExperimentConfig::parse("seed = 1\nlearning_rate = 0.1\n", Path::new("c"));
        assert!(matches!(err, Err(Error::Format { line: 2, .. })));
        let err = ExperimentConfig::parse("mode = everything\n", Path::new("c"));
        assert!(matches!(err, Err(Error::Format { line: 1, .. })));
        assert!(ExperimentConfig::parse("margin = 0\n", Path::new("c")).is_err());
        assert!(ExperimentConfig::parse("stage2_learning_rate = 1.5\n", Path::new("c")).is_err());
    }

    #[test]
    fn mode_contracts() {
        assert!(!AblationMode::CoarseOnly.uses_patches());
        assert!(!AblationMode::FineOnly.uses_instances());
        assert_eq!(
            AblationMode::IntraOnly.corr_terms(),
            CorrTerms::ReconstructionOnly
        );
        assert_eq!(
            AblationMode::InterOnly.corr_terms(),
            CorrTerms::CorrelationOnly
        );
        for m in AblationMode::ALL {
            assert_eq!(m.as_str().parse::<AblationMode>().unwrap(), m);
        }
    }
}
