//! TOML run configuration.
//!
//! Unknown keys are errors. Validation failures name the offending key and the
//! line it was set on, or the `--set` override that set it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::benchmark::BenchmarkSpec;
use crate::calibration::CalibrationConfig;
use crate::class_stats::Regularization;
use crate::complexity::{DEFAULT_TRIM, MIN_FIT_SAMPLES};
use crate::error::{Error, Result};
use crate::models::{AutoencoderArch, ClassifierArch};
use crate::scoring::{ScoreSign, ScoringOptions, Variant};
use crate::training::{OptimizerKind, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

const TRAIN_FIELDS: [&str; 13] = [
    "batch_size",
    "epochs",
    "optimizer",
    "learning_rate",
    "momentum",
    "weight_decay",
    "adam_betas",
    "adam_eps",
    "lr_drop_epochs",
    "lr_drop_factor",
    "random_flip",
    "random_crop",
    "crop_pad",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    #[default]
    Desk,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub work_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: PathBuf::from("data"),
            work_dir: PathBuf::from("work"),
        }
    }
}

/// Overrides on top of a training preset. Unset fields keep the preset value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    /// Setting only `epochs` rescales the preset's learning-rate drops.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adam_betas: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adam_eps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_drop_epochs: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_drop_factor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub random_flip: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub random_crop: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crop_pad: Option<usize>,
}

impl TrainSection {
    pub fn resolve(&self, preset: TrainConfig) -> TrainConfig {
        let mut c = match self.epochs {
            Some(e) => preset.with_epochs(e),
            None => preset,
        };
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = &self.$f { c.$f = v.clone(); })*};
        }
        set!(
            batch_size,
            optimizer,
            learning_rate,
            momentum,
            weight_decay,
            adam_betas,
            adam_eps,
            lr_drop_epochs,
            lr_drop_factor,
            random_flip,
            random_crop,
            crop_pad
        );
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub channels: Vec<usize>,
    pub preset: Preset,
    pub train: TrainSection,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        ClassifierSection {
            channels: vec![16, 32, 64],
            preset: Preset::Desk,
            train: TrainSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderSection {
    pub channels: Vec<usize>,
    pub bottleneck: usize,
    pub preset: Preset,
    pub train: TrainSection,
}

impl Default for AutoencoderSection {
    fn default() -> Self {
        AutoencoderSection {
            channels: vec![16, 32, 64],
            bottleneck: 64,
            preset: Preset::Desk,
            train: TrainSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringSection {
    pub score_sign: ScoreSign,
    pub clamp_perturbed: bool,
    pub full_graph_gradient: bool,
    pub batch_size: usize,
    pub regularization: Regularization,
    /// Per-side trim of the ID complexity band.
    pub trim: f64,
}

impl Default for ScoringSection {
    fn default() -> Self {
        let o = ScoringOptions::default();
        ScoringSection {
            score_sign: o.score_sign,
            clamp_perturbed: o.clamp_perturbed,
            full_graph_gradient: o.full_graph_gradient,
            batch_size: o.batch_size,
            regularization: Regularization::Auto,
            trim: DEFAULT_TRIM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub variant: Variant,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub data: BenchmarkSpec,
    #[serde(default)]
    pub classifier: ClassifierSection,
    #[serde(default)]
    pub autoencoder: AutoencoderSection,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub scoring: ScoringSection,
}

impl RunConfig {
    pub fn new(variant: Variant) -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            variant,
            seed: 0,
            paths: PathsConfig::default(),
            data: BenchmarkSpec::default(),
            classifier: ClassifierSection::default(),
            autoencoder: AutoencoderSection::default(),
            calibration: CalibrationConfig::default(),
            scoring: ScoringSection::default(),
        }
    }

    /// Loads a config file. Relative paths inside it resolve against its directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig> {
        let src = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = RunConfig::parse(&src, overrides)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), strip_prefix(e))))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.paths.data_dir, &mut cfg.paths.work_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Parses TOML text, applies `key=value` overrides and validates.
    pub fn parse(src: &str, overrides: &[String]) -> Result<RunConfig> {
        let mut table: toml::Table = toml::from_str(src).map_err(|e| Error::Config(e.to_string()))?;
        // Parse once without overrides so errors in the file keep their line numbers.
        toml::from_str::<RunConfig>(src).map_err(|e| Error::Config(e.to_string()))?;
        let mut set_keys = Vec::new();
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set `{o}`: expected key=value")))?;
            let key = key.trim();
            apply_override(&mut table, key, parse_value(value.trim()))?;
            set_keys.push(key.to_string());
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("after --set overrides: {}", e.message())))?;
        if let Err((key, msg)) = cfg.check() {
            let place = if set_keys.iter().any(|k| *k == key || key.starts_with(&format!("{k}."))) {
                "set by --set".to_string()
            } else {
                match locate(src, &key) {
                    Some(line) => format!("line {line}"),
                    None => "default value".to_string(),
                }
            };
            return Err(Error::Config(format!("{key} ({place}): {msg}")));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    fn preset(p: Preset, clf: bool) -> TrainConfig {
        match (p, clf) {
            (Preset::Desk, true) => TrainConfig::classifier_desk(),
            (Preset::Full, true) => TrainConfig::classifier_full(),
            (Preset::Desk, false) => TrainConfig::autoencoder_desk(),
            (Preset::Full, false) => TrainConfig::autoencoder_full(),
        }
    }

    pub fn classifier_train(&self) -> TrainConfig {
        self.classifier.train.resolve(RunConfig::preset(self.classifier.preset, true))
    }

    pub fn autoencoder_train(&self) -> TrainConfig {
        self.autoencoder.train.resolve(RunConfig::preset(self.autoencoder.preset, false))
    }

    pub fn classifier_arch(&self, in_channels: usize, image_size: usize, num_classes: usize) -> ClassifierArch {
        ClassifierArch {
            in_channels,
            image_size,
            channels: self.classifier.channels.clone(),
            num_classes,
            head: self.variant.head(),
        }
    }

    pub fn autoencoder_arch(&self, in_channels: usize, image_size: usize) -> AutoencoderArch {
        AutoencoderArch {
            in_channels,
            image_size,
            channels: self.autoencoder.channels.clone(),
            bottleneck: self.autoencoder.bottleneck,
        }
    }

    pub fn scoring_options(&self) -> ScoringOptions {
        ScoringOptions {
            score_sign: self.scoring.score_sign,
            clamp_perturbed: self.scoring.clamp_perturbed,
            full_graph_gradient: self.scoring.full_graph_gradient,
            batch_size: self.scoring.batch_size,
        }
    }

    /// First semantic violation as `(dotted key, message)`.
    fn check(&self) -> std::result::Result<(), (String, String)> {
        let err = |k: &str, m: &str| Err((k.to_string(), m.to_string()));
        if self.schema_version != SCHEMA_VERSION {
            return err(
                "schema_version",
                &format!("unsupported schema version {} (expected {SCHEMA_VERSION})", self.schema_version),
            );
        }
        if let Err(Error::Config(m)) = self.data.validate() {
            let field = ["image_size", "channels", "num_classes"]
                .into_iter()
                .find(|f| m.starts_with(f))
                .unwrap_or("");
            return err(&format!("data.{field}").trim_end_matches('.').to_string(), &m);
        }
        for (section, channels, train) in [
            ("classifier", &self.classifier.channels, self.classifier_train()),
            ("autoencoder", &self.autoencoder.channels, self.autoencoder_train()),
        ] {
            if channels.is_empty() || channels.contains(&0) {
                return err(&format!("{section}.channels"), "must be a non-empty list of positive widths");
            }
            if self.data.image_size % (1 << channels.len()) != 0 {
                return err(
                    &format!("{section}.channels"),
                    &format!("{} blocks do not evenly downsample image_size {}", channels.len(), self.data.image_size),
                );
            }
            if train.epochs == 0 {
                return err(&format!("{section}.train.epochs"), "must be at least 1");
            }
            if let Err(Error::Config(m)) = train.validate() {
                let field = TRAIN_FIELDS.into_iter().find(|f| m.starts_with(f)).unwrap_or("epochs");
                return err(&format!("{section}.train.{field}"), &m);
            }
        }
        if self.classifier.channels.last() < Some(&2) {
            return err("classifier.channels", "latent width must be at least 2");
        }
        if self.autoencoder.bottleneck == 0 {
            return err("autoencoder.bottleneck", "must be at least 1");
        }
        let c = &self.calibration;
        if c.grid.is_empty() || !c.grid.contains(&0.0) || c.grid.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return err("calibration.grid", "must contain 0 and only finite non-negative values");
        }
        if !(c.target_tpr > 0.0 && c.target_tpr < 1.0) {
            return err("calibration.target_tpr", "must lie in (0, 1)");
        }
        if c.max_pool_per_kind == 0 {
            return err("calibration.max_pool_per_kind", "must be at least 1");
        }
        if self.scoring.batch_size == 0 {
            return err("scoring.batch_size", "must be at least 1");
        }
        if !(0.0..0.5).contains(&self.scoring.trim) {
            return err("scoring.trim", "must lie in [0, 0.5)");
        }
        if let Regularization::Fixed(r) = self.scoring.regularization {
            if !(r.is_finite() && r >= 0.0) {
                return err("scoring.regularization", "fixed regularization must be finite and non-negative");
            }
        }
        if self.data.train_per_class * self.data.num_classes < MIN_FIT_SAMPLES
            || self.data.val_per_class * self.data.num_classes < MIN_FIT_SAMPLES
        {
            return err(
                "data.train_per_class",
                &format!("train and validation splits need at least {MIN_FIT_SAMPLES} images each"),
            );
        }
        Ok(())
    }
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

/// Bare words that are not valid TOML (e.g. `read-ed`) are taken as strings.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("--set `{key}`: malformed key")));
    }
    let mut t = table;
    for p in &parts[..parts.len() - 1] {
        let entry = t
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("--set `{key}`: `{p}` is not a table")))?;
    }
    t.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// 1-based line of a dotted key in TOML source.
fn locate(src: &str, key: &str) -> Option<usize> {
    let doc = toml::de::DeTable::parse(src).ok()?;
    let mut table = doc.get_ref();
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let (_, v) = table.iter().find(|(k, _)| k.get_ref().as_ref() == *p)?;
        if i + 1 == parts.len() {
            return Some(src[..v.span().start].matches('\n').count() + 1);
        }
        match v.get_ref() {
            toml::de::DeValue::Table(t) => table = t,
            _ => return None,
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "schema_version = 1\nvariant = \"read-md\"\n";

    #[test]
    fn minimal_config_uses_defaults() {
        let c = RunConfig::parse(MINIMAL, &[]).unwrap();
        assert_eq!(c, RunConfig::new(Variant::ReadMd));
        assert_eq!(c.classifier_train(), TrainConfig::classifier_desk());
        assert_eq!(c.autoencoder_train(), TrainConfig::autoencoder_desk());
    }

    #[test]
    fn serialized_config_parses_back() {
        let mut c = RunConfig::new(Variant::ReadEd);
        c.classifier.train.epochs = Some(8);
        c.scoring.regularization = Regularization::Fixed(1e-4);
        assert_eq!(RunConfig::parse(&c.to_toml(), &[]).unwrap(), c);
    }

    #[test]
    fn epochs_override_rescales_drops() {
        let src = format!("{MINIMAL}[classifier.train]\nepochs = 20\n");
        let c = RunConfig::parse(&src, &[]).unwrap();
        assert_eq!(c.classifier_train().lr_drop_epochs, vec![10, 15]);
    }

    #[test]
    fn unknown_key_reports_line() {
        let src = format!("{MINIMAL}[scoring]\nlambda = 0.5\n");
        let e = RunConfig::parse(&src, &[]).unwrap_err().to_string();
        assert!(e.contains("line 4") && e.contains("lambda"), "{e}");
    }

    #[test]
    fn semantic_error_reports_line() {
        let src = format!("{MINIMAL}\n[autoencoder.train]\nbatch_size = 16\nmomentum = 1.5\n");
        let e = RunConfig::parse(&src, &[]).unwrap_err().to_string();
        assert!(e.contains("autoencoder.train.momentum (line 6)"), "{e}");
        let src = format!("{MINIMAL}[calibration]\ngrid = [0.01]\n");
        let e = RunConfig::parse(&src, &[]).unwrap_err().to_string();
        assert!(e.contains("calibration.grid (line 4)"), "{e}");
    }

    #[test]
    fn overrides_apply_and_are_blamed() {
        let c = RunConfig::parse(MINIMAL, &["variant=read-ed".into(), "data.num_classes=3".into()]).unwrap();
        assert_eq!(c.variant, Variant::ReadEd);
        assert_eq!(c.data.num_classes, 3);
        let e = RunConfig::parse(MINIMAL, &["scoring.trim=0.7".into()]).unwrap_err().to_string();
        assert!(e.contains("set by --set"), "{e}");
        let e = RunConfig::parse(MINIMAL, &["scoring.bogus=1".into()]).unwrap_err().to_string();
        assert!(e.contains("after --set") && e.contains("bogus"), "{e}");
        assert!(RunConfig::parse(MINIMAL, &["novalue".into()]).is_err());
    }

    #[test]
    fn schema_version_is_checked() {
        let e = RunConfig::parse("schema_version = 2\nvariant = \"read-md\"\n", &[]).unwrap_err();
        assert!(e.to_string().contains("line 1"), "{e}");
    }
}
