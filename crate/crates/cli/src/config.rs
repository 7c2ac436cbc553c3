//! Experiment configuration files (TOML). Unknown keys anywhere are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use xgap::corpus::{build_vocabulary, Color, CorpusSpec, Shape};
use xgap::model::ModelConfig;
use xgap::tensor::AdamWConfig;
use xgap::train::{LossKind, Scope, TrainSpec};

use crate::error::{CliError, Result};

/// Keys every experiment file must set.
pub const REQUIRED_KEYS: [&str; 3] = ["study", "seeds", "output"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Study {
    OtiVsBaseline,
    OviVsBaseline,
    ZeroShot,
    FeatureMixing,
    SlipParity,
    TemperatureGap,
    Drift,
    MisalignmentProbe,
    Adapters,
    TemplateAblation,
    PatchAblation,
    IntraOti,
    ImageText,
}

impl Study {
    pub const ALL: [Study; 13] = [
        Study::OtiVsBaseline,
        Study::OviVsBaseline,
        Study::ZeroShot,
        Study::FeatureMixing,
        Study::SlipParity,
        Study::TemperatureGap,
        Study::Drift,
        Study::MisalignmentProbe,
        Study::Adapters,
        Study::TemplateAblation,
        Study::PatchAblation,
        Study::IntraOti,
        Study::ImageText,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Study::OtiVsBaseline => "oti-vs-baseline",
            Study::OviVsBaseline => "ovi-vs-baseline",
            Study::ZeroShot => "zero-shot",
            Study::FeatureMixing => "feature-mixing",
            Study::SlipParity => "slip-parity",
            Study::TemperatureGap => "temperature-gap",
            Study::Drift => "drift",
            Study::MisalignmentProbe => "misalignment-probe",
            Study::Adapters => "adapters",
            Study::TemplateAblation => "template-ablation",
            Study::PatchAblation => "patch-ablation",
            Study::IntraOti => "intra-oti",
            Study::ImageText => "image-text",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub shapes: Vec<String>,
    pub colors: Vec<String>,
    pub samples_per_class: usize,
    pub canvas: usize,
    pub noise: f64,
    pub query_fraction: f64,
    pub gallery_fraction: f64,
    pub size_words: bool,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let d = CorpusSpec::default();
        Self {
            shapes: d.shapes.iter().map(|s| s.name().to_string()).collect(),
            colors: d.colors.iter().map(|c| c.name().to_string()).collect(),
            samples_per_class: d.samples_per_class,
            canvas: d.canvas,
            noise: d.noise,
            query_fraction: d.query_fraction,
            gallery_fraction: d.gallery_fraction,
            size_words: d.size_words,
        }
    }
}

impl CorpusSection {
    pub fn spec(&self, seed: u64) -> Result<CorpusSpec> {
        Ok(CorpusSpec {
            shapes: self.shapes.iter().map(|s| Shape::from_name(s)).collect::<xgap::Result<_>>()?,
            colors: self.colors.iter().map(|c| Color::from_name(c)).collect::<xgap::Result<_>>()?,
            samples_per_class: self.samples_per_class,
            canvas: self.canvas,
            seed,
            noise: self.noise,
            query_fraction: self.query_fraction,
            gallery_fraction: self.gallery_fraction,
            size_words: self.size_words,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub text_context_len: usize,
    /// Side of a square image patch in pixels.
    pub patch_size: usize,
    pub init_temperature: f64,
    pub siglip_bias: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::default();
        Self {
            d: d.d,
            width: d.width,
            layers: d.layers,
            heads: d.heads,
            hidden_dim: d.hidden_dim,
            text_context_len: d.text_context_len,
            patch_size: 4,
            init_temperature: d.init_temperature,
            siglip_bias: d.siglip_bias,
        }
    }
}

impl ModelSection {
    pub fn config(&self, canvas: usize, seed: u64) -> Result<ModelConfig> {
        let p = self.patch_size;
        if p == 0 || !canvas.is_multiple_of(p) {
            return Err(CliError::Config(format!("patch_size {p} must divide the canvas size {canvas}")));
        }
        let side = canvas / p;
        let config = ModelConfig {
            d: self.d,
            width: self.width,
            vocab_size: build_vocabulary().len(),
            text_context_len: self.text_context_len,
            num_patches: side * side,
            patch_dim: 3 * p * p,
            layers: self.layers,
            heads: self.heads,
            hidden_dim: self.hidden_dim,
            init_temperature: self.init_temperature,
            siglip_bias: self.siglip_bias,
            seed,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub loss: String,
    pub temperature: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub cosine_decay: bool,
    pub gap_every: usize,
    pub gap_samples: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainSpec::default();
        Self {
            loss: d.loss.name().into(),
            temperature: d.temperature,
            steps: d.steps,
            batch_size: d.batch_size,
            lr: d.optimizer.lr,
            weight_decay: d.optimizer.weight_decay,
            warmup_steps: d.warmup_steps,
            cosine_decay: d.cosine_decay,
            gap_every: d.gap_every,
            gap_samples: d.gap_samples,
        }
    }
}

impl TrainSection {
    pub fn spec(&self, seed: u64) -> Result<TrainSpec> {
        let spec = TrainSpec {
            loss: LossKind::from_name(&self.loss)?,
            temperature: self.temperature,
            steps: self.steps,
            batch_size: self.batch_size,
            optimizer: AdamWConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
                ..AdamWConfig::default()
            },
            warmup_steps: self.warmup_steps,
            cosine_decay: self.cosine_decay,
            seed,
            scope: Scope::All,
            gap_every: self.gap_every,
            gap_samples: self.gap_samples,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionSection {
    /// Pseudo-tokens per OTI query (R).
    pub oti_tokens: usize,
    pub oti_steps: usize,
    pub oti_lr: f64,
    /// Words placed before the pseudo-tokens.
    pub template: String,
    /// Words placed after the pseudo-tokens.
    pub suffix: String,
    /// Pseudo-patches per OVI query (P).
    pub ovi_patches: usize,
    pub ovi_steps: usize,
    pub ovi_lr: f64,
    pub snapshot_every: usize,
}

impl Default for InversionSection {
    fn default() -> Self {
        Self {
            oti_tokens: 1,
            oti_steps: 150,
            oti_lr: AdamWConfig::default().lr,
            template: "a photo of".into(),
            suffix: String::new(),
            ovi_patches: 1,
            ovi_steps: 1000,
            ovi_lr: AdamWConfig::default().lr,
            snapshot_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    /// Prompt prefix for zero-shot classes and the misalignment probe.
    pub prompt_template: String,
    /// Query images per class used for OTI; 0 uses the whole query split.
    pub oti_queries_per_class: usize,
    /// Query captions per class used for OVI; 0 uses the whole query split.
    pub ovi_queries_per_class: usize,
    pub alphas: Vec<f64>,
    pub finetune_temperatures: Vec<f64>,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    /// Loss of the reference model in the SLIP comparison.
    pub compare_loss: String,
    pub drift_token_counts: Vec<usize>,
    pub drift_steps: usize,
    pub drift_queries: usize,
    pub histogram_bins: usize,
    pub templates: Vec<String>,
    pub patch_counts: Vec<usize>,
    pub adapter_steps: usize,
    /// Train-split pairs the adapters are fitted on.
    pub adapter_pairs: usize,
    pub recall_ks: Vec<usize>,
    /// The two classes of the probe corpus, a shape list times a color list.
    /// The model under test is still trained on `[corpus]`.
    pub probe_shapes: Vec<String>,
    pub probe_colors: Vec<String>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            prompt_template: "a photo of a".into(),
            oti_queries_per_class: 0,
            ovi_queries_per_class: 2,
            alphas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            finetune_temperatures: vec![0.01, 1.0],
            finetune_steps: 500,
            finetune_lr: 1e-3,
            compare_loss: "clip".into(),
            drift_token_counts: vec![8, 1],
            drift_steps: 2000,
            drift_queries: 12,
            histogram_bins: 40,
            templates: vec!["a photo of".into(), "an image of".into(), "we see".into(), String::new()],
            patch_counts: vec![1, 2, 4, 8, 16],
            adapter_steps: 1000,
            adapter_pairs: 256,
            recall_ks: vec![1, 5, 10],
            probe_shapes: vec!["square".into(), "circle".into()],
            probe_colors: vec!["red".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub study: Study,
    /// Replicate seeds; every stage seed is derived from these.
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub inversion: InversionSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        let missing: Vec<&str> = REQUIRED_KEYS.iter().copied().filter(|k| !table.contains_key(*k)).collect();
        if !missing.is_empty() {
            return Err(CliError::Config(format!("missing required keys: {}", missing.join(", "))));
        }
        let config: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must list at least one seed".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(CliError::Config("seeds must be distinct".into()));
        }
        if let Some(a) = self.evaluation.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(CliError::Config(format!("alpha {a} outside [0, 1]")));
        }
        self.corpus.spec(0)?.validate()?;
        self.model.config(self.corpus.canvas, 0)?;
        self.train.spec(0)?;
        LossKind::from_name(&self.evaluation.compare_loss)?;
        let probe = self.probe_corpus(0)?;
        if probe.shapes.len() * probe.colors.len() != 2 {
            return Err(CliError::Config("probe_shapes × probe_colors must give exactly 2 classes".into()));
        }
        Ok(())
    }

    /// Two-class corpus for the misalignment probe, drawn like `[corpus]`.
    pub fn probe_corpus(&self, seed: u64) -> Result<CorpusSpec> {
        let section = CorpusSection {
            shapes: self.evaluation.probe_shapes.clone(),
            colors: self.evaluation.probe_colors.clone(),
            ..self.corpus.clone()
        };
        let spec = section.spec(seed)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Canonical TOML rendering; identical configs render identically.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// SHA-256 of the canonical form with `output` cleared, so a study
    /// relocated to another directory keeps its identity.
    pub fn digest(&self) -> String {
        let located = Self {
            output: PathBuf::new(),
            ..self.clone()
        };
        hex(&Sha256::digest(located.canonical().as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> String {
        "study = \"oti-vs-baseline\"\nseeds = [0, 1]\noutput = \"out\"\n".into()
    }

    #[test]
    fn empty_config_names_every_missing_key() {
        let err = ExperimentConfig::parse("").unwrap_err().to_string();
        for k in REQUIRED_KEYS {
            assert!(err.contains(k), "{err}");
        }
        let err = ExperimentConfig::parse("seeds = [1]").unwrap_err().to_string();
        assert!(err.contains("study") && err.contains("output") && !err.contains("seeds,"), "{err}");
    }

    #[test]
    fn defaults_fill_missing_sections() {
        let c = ExperimentConfig::parse(&minimal()).unwrap();
        assert_eq!(c.study, Study::OtiVsBaseline);
        assert_eq!(c.corpus, CorpusSection::default());
        assert_eq!(c.train.spec(3).unwrap().seed, 3);
        let m = c.model.config(16, 0).unwrap();
        assert_eq!((m.num_patches, m.patch_dim), (16, 48));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::parse(&(minimal() + "colour = 1\n")).is_err());
        assert!(ExperimentConfig::parse(&(minimal() + "[train]\nstepz = 3\n")).is_err());
        assert!(ExperimentConfig::parse(&(minimal() + "[optimizer]\nlr = 3\n")).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        for extra in [
            "[train]\nloss = \"triplet\"\n",
            "[train]\ntemperature = 0.0\n",
            "[corpus]\nshapes = [\"hexagon\"]\n",
            "[evaluation]\nprobe_colors = [\"red\", \"blue\"]\n",
            "[model]\npatch_size = 5\n",
            "[evaluation]\nalphas = [1.5]\n",
        ] {
            assert!(ExperimentConfig::parse(&(minimal() + extra)).is_err(), "{extra}");
        }
        assert!(ExperimentConfig::parse(&minimal().replace("[0, 1]", "[]")).is_err());
        assert!(ExperimentConfig::parse(&minimal().replace("[0, 1]", "[1, 1]")).is_err());
        assert!(ExperimentConfig::parse(&minimal().replace("oti-vs-baseline", "nope")).is_err());
    }

    #[test]
    fn canonical_form_round_trips() {
        let c = ExperimentConfig::parse(&(minimal() + "[evaluation]\nalphas = [0.5]\n")).unwrap();
        let back = ExperimentConfig::parse(&c.canonical()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
        let other = ExperimentConfig::parse(&minimal().replace("[0, 1]", "[0, 2]")).unwrap();
        assert_ne!(other.digest(), c.digest());
        let moved = ExperimentConfig { output: "elsewhere".into(), ..c.clone() };
        assert_eq!(moved.digest(), c.digest());
    }
}
