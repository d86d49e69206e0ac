//! Pipeline configuration: one JSON file, every field optional.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toothlabel::crops::{
    CropSides, DEFAULT_OVERSAMPLE_FACTOR, DEFAULT_RATIOS, DEFAULT_SCORE_THRESHOLD,
};
use toothlabel::labeling::DEFAULT_MIN_COUNT;
use toothlabel::metrics::LossConfig;
use toothlabel::phrases::{EndpointConfig, Strategy};
use toothlabel::report::DEFAULT_PRESENCE_PATTERNS;
use toothlabel::study::{StratumCounts, TiePolicy};
use toothlabel_service::ServiceConfig;

use crate::CliError;

/// Default locations for pipeline artifacts. Flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub reports_dir: Option<PathBuf>,
    pub corpus_manifest: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub phrases: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub vocabulary: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub segmentation: Option<PathBuf>,
    pub instances: Option<PathBuf>,
    pub images_dir: Option<PathBuf>,
    pub crops_dir: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub evaluation: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub expert_set: Option<PathBuf>,
    pub study_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionConfig {
    pub strategy: Strategy,
    pub endpoint: EndpointConfig,
    /// Replaces the bundled prompt.
    pub prompt: Option<PathBuf>,
    pub presence_patterns: Vec<String>,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            strategy: Strategy::Rules,
            endpoint: EndpointConfig::default(),
            prompt: None,
            presence_patterns: DEFAULT_PRESENCE_PATTERNS
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabularyConfig {
    pub min_count: u64,
    pub synonyms: Option<PathBuf>,
    pub allowlist: Option<PathBuf>,
}

impl Default for VocabularyConfig {
    fn default() -> Self {
        VocabularyConfig {
            min_count: DEFAULT_MIN_COUNT,
            synonyms: None,
            allowlist: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropConfig {
    pub threshold: f64,
    pub sides: CropSides,
    pub ratios: [f64; 3],
    pub seed: u64,
    pub factor: u32,
}

impl Default for CropConfig {
    fn default() -> Self {
        CropConfig {
            threshold: DEFAULT_SCORE_THRESHOLD,
            sides: CropSides::default(),
            ratios: DEFAULT_RATIOS,
            seed: 0,
            factor: DEFAULT_OVERSAMPLE_FACTOR,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub seed: u64,
    pub per_condition: StratumCounts,
    pub tie_policy: TiePolicy,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub extraction: ExtractionConfig,
    pub vocabulary: VocabularyConfig,
    pub crops: CropConfig,
    pub study: StudyConfig,
    pub loss: LossConfig,
    pub service: Option<ServiceConfig>,
}

fn rebase(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

fn rebase_required(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut config: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let p = &mut config.paths;
        for field in [
            &mut p.reports_dir,
            &mut p.corpus_manifest,
            &mut p.corpus,
            &mut p.phrases,
            &mut p.cache,
            &mut p.vocabulary,
            &mut p.labels,
            &mut p.segmentation,
            &mut p.instances,
            &mut p.images_dir,
            &mut p.crops_dir,
            &mut p.split,
            &mut p.predictions,
            &mut p.evaluation,
            &mut p.annotations,
            &mut p.expert_set,
            &mut p.study_dir,
        ] {
            rebase(base, field);
        }
        rebase(base, &mut config.extraction.prompt);
        rebase(base, &mut config.vocabulary.synonyms);
        rebase(base, &mut config.vocabulary.allowlist);
        if let Some(s) = &mut config.service {
            rebase_required(base, &mut s.dataset);
            rebase_required(base, &mut s.crops_dir);
            rebase_required(base, &mut s.log);
            rebase(base, &mut s.vocabulary);
            rebase(base, &mut s.static_dir);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Validation(m));
        let c = &self.crops;
        if !(0.0..=1.0).contains(&c.threshold) {
            return bad(format!("crops.threshold {} outside [0, 1]", c.threshold));
        }
        if c.sides.less == 0 || c.sides.more == 0 || c.sides.output == 0 {
            return bad("crops.sides must be positive".into());
        }
        if c.factor == 0 {
            return bad("crops.factor must be at least 1".into());
        }
        let sum: f64 = c.ratios.iter().sum();
        if c.ratios.iter().any(|r| r.is_nan() || *r <= 0.0) || (sum - 1.0).abs() > 1e-9 {
            return bad(format!(
                "crops.ratios {:?} must be positive and sum to 1",
                c.ratios
            ));
        }
        if self.extraction.endpoint.max_concurrent == 0 {
            return bad("extraction.endpoint.max_concurrent must be at least 1".into());
        }
        self.loss
            .validate()
            .map_err(|e| CliError::Validation(format!("loss: {e}")))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_rebasing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pipeline.json");
        std::fs::write(
            &path,
            r#"{"paths": {"corpus": "out/corpus.jsonl"}, "crops": {"seed": 7}}"#,
        )
        .unwrap();
        let c = PipelineConfig::load(&path).unwrap();
        assert_eq!(c.paths.corpus, Some(dir.path().join("out/corpus.jsonl")));
        assert_eq!(c.crops.seed, 7);
        assert_eq!(c.crops.factor, 10);
        assert_eq!(c.vocabulary.min_count, 150);
        assert_eq!(c.loss.alpha, 0.5);
    }

    #[test]
    fn rejects_unknown_fields_and_bad_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pipeline.json");
        std::fs::write(&path, r#"{"crops": {"sead": 7}}"#).unwrap();
        assert!(matches!(
            PipelineConfig::load(&path),
            Err(CliError::Validation(_))
        ));
        std::fs::write(&path, r#"{"loss": {"alpha": 2.0}}"#).unwrap();
        assert!(matches!(
            PipelineConfig::load(&path),
            Err(CliError::Validation(_))
        ));
        std::fs::write(&path, r#"{"crops": {"ratios": [0.5, 0.5, 0.5]}}"#).unwrap();
        assert!(matches!(
            PipelineConfig::load(&path),
            Err(CliError::Validation(_))
        ));
    }
}
