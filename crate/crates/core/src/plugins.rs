//! Name-based plugin registry.
//!
//! Real detector/aligner/face/feature models live behind these lookups; the
//! shipped implementations are the deterministic synthetic stubs. A real
//! backend integrates by adding its constructor here and naming it in the
//! config.

use std::sync::Arc;

use thiserror::Error;

use crate::config::RunConfig;
use crate::metrics::FeatureExtractorPlugin;
use crate::reward::{AlignerPlugin, DetectorPlugin, FaceAnalyzerPlugin};
use crate::synthetic::{
    PatternAligner, PatternSimilarity, ProbeFaceAnalyzer, QuadrantDetector, RawPixelFeatures,
    SmoothnessAesthetic, TargetPattern, TokenEmbedder,
};

#[derive(Debug, Error)]
pub enum PluginError {
    #[error("unknown {kind} plugin {name:?} (known: {known})")]
    Unknown {
        kind: &'static str,
        name: String,
        known: String,
    },
}

/// Everything the pipeline needs to score images for one run.
#[derive(Clone)]
pub struct PluginSet {
    pub detector: Arc<dyn DetectorPlugin>,
    pub aligner: Arc<dyn AlignerPlugin>,
    pub face_analyzer: Arc<dyn FaceAnalyzerPlugin>,
    pub embedder: TokenEmbedder,
    pub pattern: TargetPattern,
    pub similarity: PatternSimilarity,
    pub aesthetic: SmoothnessAesthetic,
    pub features: Arc<dyn FeatureExtractorPlugin>,
}

pub fn build_plugins(cfg: &RunConfig) -> Result<PluginSet, PluginError> {
    let embedder = TokenEmbedder::new(cfg.policy.context_dim, &cfg.synthetic);
    let pattern = TargetPattern::new(&cfg.policy, &cfg.synthetic);

    let detector: Arc<dyn DetectorPlugin> = match cfg.reward.detector.as_str() {
        "quadrant" => Arc::new(QuadrantDetector::new(cfg.synthetic.quadrant)),
        other => {
            return Err(PluginError::Unknown {
                kind: "detector",
                name: other.to_string(),
                known: "quadrant".into(),
            })
        }
    };
    let aligner: Arc<dyn AlignerPlugin> = match cfg.reward.aligner.as_str() {
        "pattern" => Arc::new(PatternAligner::new(
            embedder.clone(),
            pattern.clone(),
            &cfg.synthetic,
        )),
        other => {
            return Err(PluginError::Unknown {
                kind: "aligner",
                name: other.to_string(),
                known: "pattern".into(),
            })
        }
    };
    let face_analyzer: Arc<dyn FaceAnalyzerPlugin> = match cfg.reward.face_analyzer.as_str() {
        "probe" => Arc::new(ProbeFaceAnalyzer),
        other => {
            return Err(PluginError::Unknown {
                kind: "face analyzer",
                name: other.to_string(),
                known: "probe".into(),
            })
        }
    };
    let feature_name = cfg
        .eval
        .as_ref()
        .map(|e| e.feature_extractor.clone())
        .unwrap_or_else(|| "raw_pixels".into());
    let features: Arc<dyn FeatureExtractorPlugin> = match feature_name.as_str() {
        "raw_pixels" => Arc::new(RawPixelFeatures),
        other => {
            return Err(PluginError::Unknown {
                kind: "feature extractor",
                name: other.to_string(),
                known: "raw_pixels".into(),
            })
        }
    };
    if let Some(eval) = &cfg.eval {
        if eval.aesthetic != "smoothness" {
            return Err(PluginError::Unknown {
                kind: "aesthetic scorer",
                name: eval.aesthetic.clone(),
                known: "smoothness".into(),
            });
        }
    }
    let similarity = PatternSimilarity::new(embedder.clone(), pattern.clone(), &cfg.synthetic);
    Ok(PluginSet {
        detector,
        aligner,
        face_analyzer,
        embedder,
        pattern,
        similarity,
        aesthetic: SmoothnessAesthetic,
        features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_names_resolve() {
        let cfg = RunConfig::from_toml_str("schema_version = 1\n").unwrap();
        let set = build_plugins(&cfg).unwrap();
        assert_eq!(set.detector.name(), "quadrant");
        assert_eq!(set.aligner.name(), "pattern");
        assert!(set.detector.shareable());
    }

    #[test]
    fn unknown_plugin_names_error() {
        let mut cfg = RunConfig::from_toml_str("schema_version = 1\n").unwrap();
        cfg.reward.detector = "nudenet".into();
        let err = match build_plugins(&cfg) {
            Err(e) => e,
            Ok(_) => panic!("unknown detector accepted"),
        };
        assert!(err.to_string().contains("nudenet"));
    }
}
