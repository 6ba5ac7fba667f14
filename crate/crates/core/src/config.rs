//! Run configuration and its plain-text `key = value` form.
//!
//! Keys mirror the [`RunConfig`] structure with dotted paths, e.g.
//! `generator.embed_dim = 64` or `loss.alpha = 0.01`. List-valued keys take
//! a JSON array. Lines starting with `#` are comments. The special key
//! `preset` (`desk` or `paper`) resets every model section to that preset and
//! must come before the keys that refine it.

use crate::alignment::DEFAULT_RIDGE;
use crate::baseline::{CnnCriticConfig, CnnGeneratorConfig};
use crate::data::SyntheticSpec;
use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::extractor::ExtractorConfig;
use crate::generator::GeneratorConfig;
use crate::losses::{LossConfig, LossVariant};
use crate::metrics::PredictorConfig;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Variant {
    #[serde(rename = "dfgan")]
    Dfgan,
    #[serde(rename = "mcgan")]
    Mcgan,
    #[serde(rename = "mcgan+compare")]
    McganCompare,
    #[serde(rename = "mcgan+onlyAttn")]
    McganOnlyAttn,
    #[serde(rename = "cnng+td")]
    CnngTd,
    #[serde(rename = "cnng+dfd")]
    CnngDfd,
    #[serde(rename = "tg+td")]
    TgTd,
}

impl Variant {
    /// Row order of the model comparison table.
    pub const ALL: [Variant; 7] = [
        Variant::Mcgan,
        Variant::McganCompare,
        Variant::McganOnlyAttn,
        Variant::CnngTd,
        Variant::CnngDfd,
        Variant::TgTd,
        Variant::Dfgan,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Dfgan => "dfgan",
            Variant::Mcgan => "mcgan",
            Variant::McganCompare => "mcgan+compare",
            Variant::McganOnlyAttn => "mcgan+onlyAttn",
            Variant::CnngTd => "cnng+td",
            Variant::CnngDfd => "cnng+dfd",
            Variant::TgTd => "tg+td",
        }
    }

    pub fn uses_mcgan_loss(&self) -> bool {
        matches!(self, Variant::Mcgan | Variant::McganCompare | Variant::McganOnlyAttn)
    }

    pub fn transformer_generator(&self) -> bool {
        matches!(self, Variant::Dfgan | Variant::TgTd)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.as_str()).collect();
                Error::Config(format!("unknown variant `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DataConfig {
    /// `synthetic`, or a path to a dataset manifest.
    pub source: String,
    pub synthetic: SyntheticSpec,
    pub to_gray: bool,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StageTraining {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub variant: Variant,
    pub seed: u64,
    pub epochs_pretrain: usize,
    pub epochs_finetune: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub use_alignment: bool,
    pub loss_variant: LossVariant,
    pub use_pretrain: bool,
    pub freeze_extractor: bool,
    pub ridge_lambda: f64,
    /// Subjects whose fMRI is used for fine-tuning and alignment; empty means all.
    pub train_subjects: Vec<u32>,
    /// Subjects evaluated; empty means all.
    pub eval_subjects: Vec<u32>,
    pub attribute_error_squared: bool,
    pub extractor_training: StageTraining,
    pub predictor_training: StageTraining,
    pub data: DataConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub extractor: ExtractorConfig,
    pub predictor: PredictorConfig,
    pub cnn_generator: CnnGeneratorConfig,
    pub cnn_critic: CnnCriticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let n_id = SyntheticSpec::default().n_identities;
        let (generator, discriminator, extractor, predictor, cnn_generator, cnn_critic) = match preset {
            Preset::Desk => (
                GeneratorConfig::desk(),
                DiscriminatorConfig::desk(n_id),
                ExtractorConfig::desk(n_id),
                PredictorConfig::desk(n_id),
                CnnGeneratorConfig::desk(16),
                CnnCriticConfig::desk(n_id),
            ),
            Preset::Paper => (
                GeneratorConfig::paper(),
                DiscriminatorConfig::paper(n_id),
                ExtractorConfig::paper(n_id),
                PredictorConfig::paper(n_id),
                CnnGeneratorConfig::paper(128),
                CnnCriticConfig::paper(n_id),
            ),
        };
        let image_size = generator.output_size;
        let (epochs_pretrain, epochs_finetune) = match preset {
            Preset::Desk => (40, 25),
            Preset::Paper => (200, 500),
        };
        Self {
            preset,
            variant: Variant::Dfgan,
            seed: 0,
            epochs_pretrain,
            epochs_finetune,
            batch_size: 32,
            optim: OptimConfig {
                lr: 2e-4,
                beta1: 0.9,
                beta2: 0.999,
            },
            loss: LossConfig::default(),
            use_alignment: true,
            loss_variant: LossVariant::Our,
            use_pretrain: true,
            freeze_extractor: true,
            ridge_lambda: DEFAULT_RIDGE,
            train_subjects: Vec::new(),
            eval_subjects: Vec::new(),
            attribute_error_squared: true,
            extractor_training: match preset {
                Preset::Desk => StageTraining {
                    epochs: 20,
                    lr: 2e-3,
                    batch_size: 8,
                },
                Preset::Paper => StageTraining {
                    epochs: 30,
                    lr: 1e-3,
                    batch_size: 32,
                },
            },
            predictor_training: match preset {
                Preset::Desk => StageTraining {
                    epochs: 25,
                    lr: 2e-3,
                    batch_size: 8,
                },
                Preset::Paper => StageTraining {
                    epochs: 30,
                    lr: 1e-3,
                    batch_size: 32,
                },
            },
            data: DataConfig {
                source: "synthetic".into(),
                synthetic: SyntheticSpec {
                    image_size,
                    ..SyntheticSpec::default()
                },
                to_gray: true,
            },
            generator,
            discriminator,
            extractor,
            predictor,
            cnn_generator,
            cnn_critic,
        }
    }

    pub fn condition_dim(&self) -> usize {
        self.extractor.condition_dim
    }

    pub fn image_size(&self) -> usize {
        self.generator.output_size
    }

    /// Copies dataset-dependent sizes (identity count) into every model section.
    pub fn set_identities(&mut self, n_identities: usize) {
        self.discriminator.n_identities = n_identities;
        self.extractor.n_identities = n_identities;
        self.predictor.n_identities = n_identities;
        self.cnn_critic.n_identities = n_identities;
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.extractor_training.batch_size == 0 || self.predictor_training.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        for (name, v) in [
            ("optim.lr", self.optim.lr),
            ("extractor_training.lr", self.extractor_training.lr),
            ("predictor_training.lr", self.predictor_training.lr),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and ≥ 0")));
            }
        }
        if !(0.0..1.0).contains(&self.optim.beta1) || !(0.0..1.0).contains(&self.optim.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.ridge_lambda.is_finite() && self.ridge_lambda >= 0.0) {
            return Err(Error::Config("ridge_lambda must be finite and ≥ 0".into()));
        }
        self.loss.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.extractor.validate()?;
        self.predictor.validate()?;
        self.cnn_generator.validate()?;
        self.cnn_critic.validate()?;
        let cond = self.condition_dim();
        if self.generator.condition_dim != cond || self.cnn_generator.condition_dim != cond {
            return Err(Error::Config(format!(
                "generator condition dims must equal extractor.condition_dim ({cond})"
            )));
        }
        let size = self.image_size();
        for (name, s) in [
            ("discriminator.image_size", self.discriminator.image_size),
            ("extractor.image_size", self.extractor.image_size),
            ("predictor.image_size", self.predictor.image_size),
            ("cnn_generator.output_size", self.cnn_generator.output_size),
            ("cnn_critic.image_size", self.cnn_critic.image_size),
        ] {
            if s != size {
                return Err(Error::Config(format!("{name} is {s} but generator.output_size is {size}")));
            }
        }
        if self.data.source == "synthetic" {
            self.data.synthetic.validate()?;
            if self.data.synthetic.image_size != size {
                return Err(Error::Config(format!(
                    "data.synthetic.image_size is {} but generator.output_size is {size}",
                    self.data.synthetic.image_size
                )));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let mut lines = Vec::new();
        flatten("", &value, &mut lines);
        let mut out = String::new();
        for (k, v) in lines {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Parses `key = value` lines. A `preset` line selects the base
    /// configuration wherever it appears; every other line overrides it.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, val) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: "<config>".into(),
                line: idx as u64 + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            entries.push((idx + 1, key.trim(), val.trim()));
        }
        let mut base = RunConfig::default();
        for &(line, _, val) in entries.iter().filter(|e| e.1 == "preset") {
            base = RunConfig::preset(parse_preset(val, line)?);
        }
        let mut value = serde_json::to_value(base).expect("config serializes");
        for (line, key, val) in entries.into_iter().filter(|e| e.1 != "preset") {
            set_path(&mut value, key, val).map_err(|e| Error::Parse {
                path: "<config>".into(),
                line: line as u64,
                message: e,
            })?;
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::Parse {
                path: path.to_path_buf(),
                line,
                message,
            },
            other => other,
        })
    }

    /// Applies one `key = value` override.
    /// Setting `preset` replaces the whole configuration with that preset.
    pub fn set(&mut self, key: &str, val: &str) -> Result<()> {
        if key.trim() == "preset" {
            *self = RunConfig::preset(parse_preset(val.trim(), 1)?);
            return Ok(());
        }
        Self::from_text(&format!("{}{key} = {val}\n", self.to_text()))
            .map(|c| *self = c)
    }

    /// First 16 hex digits of the SHA-256 of the canonical text form.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        hex::encode(&digest[..8])
    }
}

fn parse_preset(val: &str, line: usize) -> Result<Preset> {
    serde_json::from_value(Value::String(val.to_string()))
        .map_err(|_| Error::Config(format!("line {line}: unknown preset `{val}` (expected desk or paper)")))
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

fn set_path(root: &mut Value, key: &str, raw: &str) -> std::result::Result<(), String> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map: &mut Map<String, Value> = cur.as_object_mut().ok_or_else(|| format!("`{key}` is not a known key"))?;
        let slot = map.get_mut(*part).ok_or_else(|| format!("unknown key `{key}`"))?;
        if i + 1 == parts.len() {
            *slot = parse_like(slot, raw).map_err(|e| format!("`{key}`: {e}"))?;
            return Ok(());
        }
        cur = slot;
    }
    Err(format!("unknown key `{key}`"))
}

fn parse_like(existing: &Value, raw: &str) -> std::result::Result<Value, String> {
    match existing {
        Value::String(_) => Ok(Value::String(raw.to_string())),
        Value::Bool(_) => match raw {
            "true" => Ok(Value::Bool(true)),
            "false" => Ok(Value::Bool(false)),
            _ => Err(format!("expected true or false, got `{raw}`")),
        },
        Value::Number(n) => {
            if n.is_u64() || n.is_i64() {
                if let Ok(v) = raw.parse::<u64>() {
                    return Ok(Value::from(v));
                }
            }
            raw.parse::<f64>()
                .ok()
                .and_then(serde_json::Number::from_f64)
                .map(Value::Number)
                .ok_or_else(|| format!("expected a number, got `{raw}`"))
        }
        Value::Object(_) => Err("is a section, not a value".into()),
        _ => serde_json::from_str(raw).map_err(|e| format!("expected JSON ({e})")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        let paper = RunConfig::preset(Preset::Paper);
        assert_eq!(RunConfig::from_text(&paper.to_text()).unwrap(), paper);
        assert_eq!(paper.epochs_pretrain, 200);
        assert_eq!(paper.epochs_finetune, 500);
        paper.validate().unwrap();
        cfg.validate().unwrap();
    }

    #[test]
    fn overrides_and_errors() {
        let cfg = RunConfig::from_text("# comment\nvariant = mcgan+compare\nloss.alpha = 0.5\ntrain_subjects = [1]\n").unwrap();
        assert_eq!(cfg.variant, Variant::McganCompare);
        assert_eq!(cfg.loss.alpha, 0.5);
        assert_eq!(cfg.train_subjects, vec![1]);
        assert!(RunConfig::from_text("nope = 1").is_err());
        assert!(RunConfig::from_text("variant = gan").is_err());
        assert!(RunConfig::from_text("loss.alpha = x").is_err());
        let err = RunConfig::from_text("seed = 1\nbroken line").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn text_form_is_a_fixed_point() {
        for preset in [Preset::Desk, Preset::Paper] {
            let mut c = RunConfig::preset(preset);
            c.set("seed", "11").unwrap();
            c.set_identities(3);
            let back = RunConfig::from_text(&c.to_text()).unwrap();
            assert_eq!(back.to_text(), c.to_text());
        }
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.set("seed", "5").unwrap();
        assert_eq!(b.seed, 5);
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn variant_names() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
    }
}
