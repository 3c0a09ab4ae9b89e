//! Composite content-safety reward.
//!
//! The trainer maximizes `lambda_align * alignment + lambda_nudity * nudity`
//! (plus optional face-anonymity terms). Nudity is expressed as a positive
//! safety reward: 1 minus the weighted, saturated sum of unsafe-class
//! detection scores. The nudity term is computed from the generated image
//! only — never from the prompt text — which is what makes the defense
//! text-agnostic.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;
use crate::policy::PromptContext;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("unknown detection class {0:?} (not in the class-weight table)")]
    UnknownClass(String),
    #[error("class-weight table has no unsafe class")]
    NoUnsafeClass,
    #[error("negative weight {weight} for class {class:?}")]
    NegativeWeight { class: String, weight: f64 },
    #[error("negative reward coefficient {name} = {value}")]
    NegativeLambda { name: &'static str, value: f64 },
    #[error("face reward requested but no face analyzer configured")]
    NoFaceAnalyzer,
    #[error("detector {name} failed on image {image_ref}: {message}")]
    Detector {
        name: String,
        image_ref: String,
        message: String,
    },
    #[error("aligner {name} failed on image {image_ref} (prompt {prompt:?}): {message}")]
    Aligner {
        name: String,
        image_ref: String,
        prompt: String,
        message: String,
    },
    #[error("face analyzer {name} failed on image {image_ref}: {message}")]
    FaceAnalyzer {
        name: String,
        image_ref: String,
        message: String,
    },
}

/// One detector finding; scores are clamped into `[0, 1]` on construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub class_label: String,
    pub score: f64,
}

impl DetectionResult {
    pub fn new(class_label: impl Into<String>, score: f64) -> Self {
        Self {
            class_label: class_label.into(),
            score: score.clamp(0.0, 1.0),
        }
    }
}

/// Per-class importance weight and unsafe flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassWeight {
    pub weight: f64,
    #[serde(rename = "unsafe")]
    pub unsafe_class: bool,
}

/// Registry of detection classes with weights; at least one class must be
/// marked unsafe and all weights are non-negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeightTable {
    classes: BTreeMap<String, ClassWeight>,
}

impl ClassWeightTable {
    pub fn new(classes: BTreeMap<String, ClassWeight>) -> Result<Self, RewardError> {
        for (class, cw) in &classes {
            if cw.weight < 0.0 || !cw.weight.is_finite() {
                return Err(RewardError::NegativeWeight {
                    class: class.clone(),
                    weight: cw.weight,
                });
            }
        }
        if !classes.values().any(|cw| cw.unsafe_class) {
            return Err(RewardError::NoUnsafeClass);
        }
        Ok(Self { classes })
    }

    /// Every listed class unsafe with weight 1.0 (the documented non-paper
    /// default when no override file is given).
    pub fn uniform_unsafe(labels: impl IntoIterator<Item = String>) -> Result<Self, RewardError> {
        let classes = labels
            .into_iter()
            .map(|l| {
                (
                    l,
                    ClassWeight {
                        weight: 1.0,
                        unsafe_class: true,
                    },
                )
            })
            .collect();
        Self::new(classes)
    }

    pub fn get(&self, class: &str) -> Option<&ClassWeight> {
        self.classes.get(class)
    }

    pub fn unsafe_classes(&self) -> BTreeSet<String> {
        self.classes
            .iter()
            .filter(|(_, cw)| cw.unsafe_class)
            .map(|(c, _)| c.clone())
            .collect()
    }

    /// Parses the JSON override file: `{"class": {"weight": w, "unsafe": b}}`.
    pub fn from_json(json: &str) -> Result<Self, RewardError> {
        let classes: BTreeMap<String, ClassWeight> = serde_json::from_str(json)
            .map_err(|e| RewardError::UnknownClass(format!("invalid weight table: {e}")))?;
        Self::new(classes)
    }
}

/// Image detector behind the nudity reward; deterministic for identical
/// input bytes. `shareable` declares whether one instance may serve
/// concurrent workers or must be instantiated per worker.
pub trait DetectorPlugin: Send + Sync {
    fn detect(&self, image: &Image) -> Result<Vec<DetectionResult>, String>;
    fn name(&self) -> &str;
    fn version(&self) -> &str;
    /// Class labels the detector can emit (seeds the default weight table).
    fn classes(&self) -> Vec<String>;
    fn shareable(&self) -> bool {
        true
    }
}

/// Image/text alignment scorer; raw scores are nominally in `[0, 100]`.
pub trait AlignerPlugin: Send + Sync {
    fn align(&self, image: &Image, text: &str) -> Result<f64, String>;
    fn name(&self) -> &str;
    fn version(&self) -> &str;
    fn shareable(&self) -> bool {
        true
    }
}

/// Face attribute extractor for the anonymization rewards. Each accessor
/// returns `None` when no face is present.
pub trait FaceAnalyzerPlugin: Send + Sync {
    fn landmarks(&self, image: &Image) -> Result<Option<Vec<f64>>, String>;
    fn age(&self, image: &Image) -> Result<Option<f64>, String>;
    fn embedding(&self, image: &Image) -> Result<Option<Vec<f64>>, String>;
    fn name(&self) -> &str;
    fn version(&self) -> &str;
    fn shareable(&self) -> bool {
        true
    }
}

/// Weighted, saturated unsafe-class penalty: `min(1, sum w_c * s_c)`.
pub fn nudity_penalty(
    detections: &[DetectionResult],
    weights: &ClassWeightTable,
) -> Result<f64, RewardError> {
    let mut acc = 0.0;
    for det in detections {
        let cw = weights
            .get(&det.class_label)
            .ok_or_else(|| RewardError::UnknownClass(det.class_label.clone()))?;
        if cw.unsafe_class {
            acc += cw.weight * det.score;
        }
    }
    Ok(acc.min(1.0))
}

/// Safety reward `1 - nudity_penalty`; 1 means fully safe.
pub fn nudity_reward(
    detections: &[DetectionResult],
    weights: &ClassWeightTable,
) -> Result<f64, RewardError> {
    Ok(1.0 - nudity_penalty(detections, weights)?)
}

/// Raw aligner score divided by 100, clamped into `[0, 1]`.
pub fn alignment_reward(
    image: &Image,
    context: &PromptContext,
    aligner: &dyn AlignerPlugin,
) -> Result<f64, RewardError> {
    let raw = aligner
        .align(image, &context.text)
        .map_err(|message| RewardError::Aligner {
            name: aligner.name().to_string(),
            image_ref: image.content_ref(),
            prompt: context.text.clone(),
            message,
        })?;
    Ok((raw / 100.0).clamp(0.0, 1.0))
}

fn squash_distance(distance: f64, tau: f64) -> f64 {
    (distance / tau).tanh()
}

/// Divergence-from-reference landmark reward: `tanh(||L - L_ref|| / tau)`,
/// and 1 when no face is detected.
pub fn face_landmark_reward(
    image: &Image,
    reference: &[f64],
    tau: f64,
    analyzer: &dyn FaceAnalyzerPlugin,
) -> Result<f64, RewardError> {
    let found = analyzer
        .landmarks(image)
        .map_err(|message| face_error(analyzer, image, message))?;
    Ok(match found {
        None => 1.0,
        Some(lm) => {
            let dist = lm
                .iter()
                .zip(reference)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            squash_distance(dist, tau)
        }
    })
}

/// Same contract with scalar age distance.
pub fn face_age_reward(
    image: &Image,
    reference_age: f64,
    tau: f64,
    analyzer: &dyn FaceAnalyzerPlugin,
) -> Result<f64, RewardError> {
    let found = analyzer
        .age(image)
        .map_err(|message| face_error(analyzer, image, message))?;
    Ok(match found {
        None => 1.0,
        Some(age) => squash_distance((age - reference_age).abs(), tau),
    })
}

/// Same contract with cosine distance between embeddings.
pub fn face_embedding_reward(
    image: &Image,
    reference: &[f64],
    tau: f64,
    analyzer: &dyn FaceAnalyzerPlugin,
) -> Result<f64, RewardError> {
    let found = analyzer
        .embedding(image)
        .map_err(|message| face_error(analyzer, image, message))?;
    Ok(match found {
        None => 1.0,
        Some(emb) => squash_distance(cosine_distance(&emb, reference), tau),
    })
}

fn face_error(analyzer: &dyn FaceAnalyzerPlugin, image: &Image, message: String) -> RewardError {
    RewardError::FaceAnalyzer {
        name: analyzer.name().to_string(),
        image_ref: image.content_ref(),
        message,
    }
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot / (na * nb)
}

/// Which face attribute a face term compares, with its reference value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FaceRewardKind {
    Landmarks { reference: Vec<f64> },
    Age { reference: f64 },
    Embedding { reference: Vec<f64> },
}

impl FaceRewardKind {
    pub fn term_name(&self) -> &'static str {
        match self {
            FaceRewardKind::Landmarks { .. } => "landmarks",
            FaceRewardKind::Age { .. } => "age",
            FaceRewardKind::Embedding { .. } => "embedding",
        }
    }
}

/// One face-anonymity term in the composite reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceRewardSpec {
    #[serde(flatten)]
    pub kind: FaceRewardKind,
    pub lambda: f64,
    /// Distance scale in the analyzer's native units.
    pub tau: f64,
}

/// Decomposed reward for one generated image. `total` is recomputable from
/// the parts: `lambda_align*alignment + lambda_nudity*nudity + sum(lambda_f*face_f)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub nudity_term: f64,
    pub alignment_term: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub face_terms: BTreeMap<String, f64>,
    pub total: f64,
    pub per_class: BTreeMap<String, f64>,
}

/// Computes composite rewards from the configured plugins. Evaluation is
/// pure given plugin outputs, so batches may be scored concurrently.
#[derive(Clone)]
pub struct RewardEngine {
    lambda_align: f64,
    lambda_nudity: f64,
    weights: ClassWeightTable,
    detector: Arc<dyn DetectorPlugin>,
    aligner: Arc<dyn AlignerPlugin>,
    face_terms: Vec<FaceRewardSpec>,
    face_analyzer: Option<Arc<dyn FaceAnalyzerPlugin>>,
}

impl RewardEngine {
    pub fn new(
        lambda_align: f64,
        lambda_nudity: f64,
        weights: ClassWeightTable,
        detector: Arc<dyn DetectorPlugin>,
        aligner: Arc<dyn AlignerPlugin>,
    ) -> Result<Self, RewardError> {
        if lambda_align < 0.0 {
            return Err(RewardError::NegativeLambda {
                name: "lambda_align",
                value: lambda_align,
            });
        }
        if lambda_nudity < 0.0 {
            return Err(RewardError::NegativeLambda {
                name: "lambda_nudity",
                value: lambda_nudity,
            });
        }
        Ok(Self {
            lambda_align,
            lambda_nudity,
            weights,
            detector,
            aligner,
            face_terms: Vec::new(),
            face_analyzer: None,
        })
    }

    pub fn with_face_terms(
        mut self,
        terms: Vec<FaceRewardSpec>,
        analyzer: Arc<dyn FaceAnalyzerPlugin>,
    ) -> Result<Self, RewardError> {
        for term in &terms {
            if term.lambda < 0.0 {
                return Err(RewardError::NegativeLambda {
                    name: "face lambda",
                    value: term.lambda,
                });
            }
        }
        self.face_terms = terms;
        self.face_analyzer = Some(analyzer);
        Ok(self)
    }

    pub fn weights(&self) -> &ClassWeightTable {
        &self.weights
    }

    pub fn detector(&self) -> &Arc<dyn DetectorPlugin> {
        &self.detector
    }

    pub fn aligner(&self) -> &Arc<dyn AlignerPlugin> {
        &self.aligner
    }

    pub fn lambda_align(&self) -> f64 {
        self.lambda_align
    }

    pub fn lambda_nudity(&self) -> f64 {
        self.lambda_nudity
    }

    /// Upper bound of the composite total.
    pub fn total_bound(&self) -> f64 {
        self.lambda_align
            + self.lambda_nudity
            + self.face_terms.iter().map(|t| t.lambda).sum::<f64>()
    }

    pub fn evaluate(
        &self,
        image: &Image,
        context: &PromptContext,
    ) -> Result<RewardBreakdown, RewardError> {
        let detections = self
            .detector
            .detect(image)
            .map_err(|message| RewardError::Detector {
                name: self.detector.name().to_string(),
                image_ref: image.content_ref(),
                message,
            })?;
        let nudity_term = nudity_reward(&detections, &self.weights)?;
        let alignment_term = alignment_reward(image, context, self.aligner.as_ref())?;

        let mut per_class = BTreeMap::new();
        for det in &detections {
            let cw = self.weights.get(&det.class_label).expect("validated above");
            if cw.unsafe_class {
                *per_class.entry(det.class_label.clone()).or_insert(0.0) +=
                    cw.weight * det.score;
            }
        }

        let mut face_terms = BTreeMap::new();
        let mut total = self.lambda_align * alignment_term + self.lambda_nudity * nudity_term;
        if !self.face_terms.is_empty() {
            let analyzer = self
                .face_analyzer
                .as_ref()
                .ok_or(RewardError::NoFaceAnalyzer)?;
            for spec in &self.face_terms {
                let value = match &spec.kind {
                    FaceRewardKind::Landmarks { reference } => {
                        face_landmark_reward(image, reference, spec.tau, analyzer.as_ref())?
                    }
                    FaceRewardKind::Age { reference } => {
                        face_age_reward(image, *reference, spec.tau, analyzer.as_ref())?
                    }
                    FaceRewardKind::Embedding { reference } => {
                        face_embedding_reward(image, reference, spec.tau, analyzer.as_ref())?
                    }
                };
                face_terms.insert(spec.kind.term_name().to_string(), value);
                total += spec.lambda * value;
            }
        }

        Ok(RewardBreakdown {
            nudity_term,
            alignment_term,
            face_terms,
            total,
            per_class,
        })
    }
}
