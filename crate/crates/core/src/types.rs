//! Shared domain types: grayscale images, 68-point landmark sets, emotion labels
//! and the training configuration.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Number of points in the facial landmark convention used throughout:
/// jaw/cheek 0-16, brows 17-26, nose 27-35, eyes 36-47, mouth 48-67.
pub const NUM_LANDMARKS: usize = 68;

/// Landmark indices of the left eye contour.
pub const LEFT_EYE: std::ops::Range<usize> = 36..42;
/// Landmark indices of the right eye contour.
pub const RIGHT_EYE: std::ops::Range<usize> = 42..48;

/// Single-channel image with real-valued intensities, stored row-major (y, x).
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pixels: Array2<f64>,
}

impl GrayImage {
    /// Wraps a 2-D intensity array. All values must be finite.
    pub fn new(pixels: Array2<f64>) -> Result<Self> {
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(
                "image contains non-finite intensities".into(),
            ));
        }
        Ok(Self { pixels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            pixels: Array2::zeros((height, width)),
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut Array2<f64> {
        &mut self.pixels
    }

    /// Intensity at pixel (x, y).
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[[y, x]]
    }
}

/// Coordinate frame a landmark set lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    /// Pixel coordinates of a source image.
    Image,
    /// The canonical (mean-shape aligned) frame the network operates in.
    Canonical,
}

/// 2-D point in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Ordered set of exactly 68 facial landmark points.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    points: Vec<Point>,
    frame: Frame,
}

impl LandmarkSet {
    /// Builds a landmark set, rejecting point counts other than 68 and
    /// non-finite coordinates.
    pub fn new(points: Vec<Point>, frame: Frame) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(Error::Validation(format!(
                "landmark set must contain {} points, got {}",
                NUM_LANDMARKS,
                points.len()
            )));
        }
        if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::Validation(
                "landmark set contains non-finite coordinates".into(),
            ));
        }
        Ok(Self { points, frame })
    }

    /// Builds a landmark set from 136 interleaved coordinates (x0, y0, x1, y1, ...).
    pub fn from_flat(coords: &[f64], frame: Frame) -> Result<Self> {
        if coords.len() != 2 * NUM_LANDMARKS {
            return Err(Error::Validation(format!(
                "expected {} coordinates, got {}",
                2 * NUM_LANDMARKS,
                coords.len()
            )));
        }
        let points = coords
            .chunks_exact(2)
            .map(|c| Point::new(c[0], c[1]))
            .collect();
        Self::new(points, frame)
    }

    /// Interleaved (x0, y0, ...) copy of the coordinates.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * NUM_LANDMARKS);
        for p in &self.points {
            out.push(p.x);
            out.push(p.y);
        }
        out
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    pub fn with_frame(mut self, frame: Frame) -> Self {
        self.frame = frame;
        self
    }

    /// Centroid of a contiguous index range, e.g. an eye contour.
    pub fn centroid(&self, range: std::ops::Range<usize>) -> Point {
        let n = range.len() as f64;
        let (sx, sy) = self.points[range]
            .iter()
            .fold((0.0, 0.0), |(ax, ay), p| (ax + p.x, ay + p.y));
        Point::new(sx / n, sy / n)
    }
}

/// Emotion label taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EmotionScheme {
    /// neutral, happiness, sadness, surprise, fear, disgust, anger
    Seven,
    /// negative, positive, neutral
    Three,
}

impl EmotionScheme {
    pub fn num_classes(&self) -> usize {
        match self {
            EmotionScheme::Seven => 7,
            EmotionScheme::Three => 3,
        }
    }

    pub fn class_names(&self) -> &'static [&'static str] {
        match self {
            EmotionScheme::Seven => &[
                "neutral",
                "happiness",
                "sadness",
                "surprise",
                "fear",
                "disgust",
                "anger",
            ],
            EmotionScheme::Three => &["negative", "positive", "neutral"],
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "seven" | "7" => Ok(EmotionScheme::Seven),
            "three" | "3" => Ok(EmotionScheme::Three),
            other => Err(Error::Config(format!(
                "unknown emotion scheme {other:?} (expected \"seven\" or \"three\")"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            EmotionScheme::Seven => "seven",
            EmotionScheme::Three => "three",
        }
    }
}

/// Class identifier within a labelling scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EmotionLabel {
    class_id: usize,
    scheme: EmotionScheme,
}

impl EmotionLabel {
    pub fn new(class_id: usize, scheme: EmotionScheme) -> Result<Self> {
        if class_id >= scheme.num_classes() {
            return Err(Error::Validation(format!(
                "class id {} out of range for {:?} scheme",
                class_id, scheme
            )));
        }
        Ok(Self { class_id, scheme })
    }

    pub fn class_id(&self) -> usize {
        self.class_id
    }

    pub fn scheme(&self) -> EmotionScheme {
        self.scheme
    }

    pub fn name(&self) -> &'static str {
        self.scheme.class_names()[self.class_id]
    }
}

/// Raw ground-truth label vocabulary accepted at ingestion time. `Contempt`
/// only exists here; it has no slot in the seven-class scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RawEmotion {
    Neutral,
    Happiness,
    Sadness,
    Surprise,
    Fear,
    Disgust,
    Anger,
    Contempt,
}

/// What to do with contempt-labelled samples when training the seven-class head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ContemptPolicy {
    /// Exclude the sample.
    #[default]
    Drop,
    /// Fold into happiness, mirroring the positive mapping of the three-class scheme.
    AsHappiness,
}

impl ContemptPolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "drop" => Ok(ContemptPolicy::Drop),
            "happiness" => Ok(ContemptPolicy::AsHappiness),
            other => Err(Error::Config(format!(
                "unknown contempt policy {other:?} (expected \"drop\" or \"happiness\")"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ContemptPolicy::Drop => "drop",
            ContemptPolicy::AsHappiness => "happiness",
        }
    }
}

impl RawEmotion {
    pub const ALL: [RawEmotion; 8] = [
        RawEmotion::Neutral,
        RawEmotion::Happiness,
        RawEmotion::Sadness,
        RawEmotion::Surprise,
        RawEmotion::Fear,
        RawEmotion::Disgust,
        RawEmotion::Anger,
        RawEmotion::Contempt,
    ];

    /// Parses an ingestion label, rejecting anything outside the recognized
    /// vocabulary with the offending name.
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "neutral" => Ok(RawEmotion::Neutral),
            "happiness" | "happy" => Ok(RawEmotion::Happiness),
            "sadness" | "sad" => Ok(RawEmotion::Sadness),
            "surprise" => Ok(RawEmotion::Surprise),
            "fear" => Ok(RawEmotion::Fear),
            "disgust" => Ok(RawEmotion::Disgust),
            "anger" | "angry" => Ok(RawEmotion::Anger),
            "contempt" => Ok(RawEmotion::Contempt),
            other => Err(Error::UnknownLabel(other.to_string())),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            RawEmotion::Neutral => "neutral",
            RawEmotion::Happiness => "happiness",
            RawEmotion::Sadness => "sadness",
            RawEmotion::Surprise => "surprise",
            RawEmotion::Fear => "fear",
            RawEmotion::Disgust => "disgust",
            RawEmotion::Anger => "anger",
            RawEmotion::Contempt => "contempt",
        }
    }

    /// Simplified-scheme mapping: fear/sadness/disgust/anger become negative,
    /// happiness/contempt positive, neutral stays neutral. Surprise is
    /// excluded (can carry either valence) and maps to `None`.
    pub fn map_to_three(&self) -> Option<EmotionLabel> {
        let id = match self {
            RawEmotion::Fear | RawEmotion::Sadness | RawEmotion::Disgust | RawEmotion::Anger => 0,
            RawEmotion::Happiness | RawEmotion::Contempt => 1,
            RawEmotion::Neutral => 2,
            RawEmotion::Surprise => return None,
        };
        Some(EmotionLabel::new(id, EmotionScheme::Three).expect("id in range"))
    }

    /// Seven-class mapping. Contempt has no class of its own and is handled
    /// per `policy`.
    pub fn map_to_seven(&self, policy: ContemptPolicy) -> Option<EmotionLabel> {
        let id = match self {
            RawEmotion::Neutral => 0,
            RawEmotion::Happiness => 1,
            RawEmotion::Sadness => 2,
            RawEmotion::Surprise => 3,
            RawEmotion::Fear => 4,
            RawEmotion::Disgust => 5,
            RawEmotion::Anger => 6,
            RawEmotion::Contempt => match policy {
                ContemptPolicy::Drop => return None,
                ContemptPolicy::AsHappiness => 1,
            },
        };
        Some(EmotionLabel::new(id, EmotionScheme::Seven).expect("id in range"))
    }

    pub fn map_to_scheme(
        &self,
        scheme: EmotionScheme,
        policy: ContemptPolicy,
    ) -> Option<EmotionLabel> {
        match scheme {
            EmotionScheme::Seven => self.map_to_seven(policy),
            EmotionScheme::Three => self.map_to_three(),
        }
    }
}

/// Probability vector over 3 or 7 emotion classes.
#[derive(Debug, Clone, PartialEq)]
pub struct EmotionDistribution {
    probs: Vec<f64>,
}

impl EmotionDistribution {
    /// Validates simplex constraints: length 3 or 7, entries >= 0 and finite,
    /// sum within 1e-6 of one.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() != 3 && probs.len() != 7 {
            return Err(Error::Validation(format!(
                "distribution must have length 3 or 7, got {}",
                probs.len()
            )));
        }
        if let Some(v) = probs.iter().find(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "distribution contains non-finite entry {v}"
            )));
        }
        if let Some(v) = probs.iter().find(|&&v| v < 0.0) {
            return Err(Error::Validation(format!(
                "distribution contains negative entry {v}"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!(
                "distribution entries sum to {sum}, expected 1 within 1e-6"
            )));
        }
        Ok(Self { probs })
    }

    /// Numerically stable softmax; the result always satisfies the simplex
    /// invariants.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.len() != 3 && logits.len() != 7 {
            return Err(Error::Validation(format!(
                "logit vector must have length 3 or 7, got {}",
                logits.len()
            )));
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        Self::new(exps.into_iter().map(|e| e / sum).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the most probable class; ties go to the lower index.
    pub fn argmax(&self) -> usize {
        self.probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            })
            .0
    }
}

/// Hyperparameters of a training run. Weight coefficients and learning-rate
/// bounds default to the reference values; everything else is standard
/// plumbing with sensible defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Weight of the landmark distance term.
    pub alpha: f64,
    /// Weight of the emotion cross-entropy term.
    pub beta: f64,
    pub base_lr: f64,
    pub max_lr: f64,
    /// Half-period of the triangular learning-rate cycle, in optimizer
    /// iterations. 0 selects two epochs' worth of iterations at train time.
    pub step_size: usize,
    pub dropout_p: f64,
    pub stages: usize,
    pub emotion_scheme: EmotionScheme,
    pub momentum: f64,
    pub batch_size: usize,
    /// Maximum epochs per stage; early stopping may end a stage sooner.
    pub epochs: usize,
    /// Consecutive non-improving validation rounds tolerated before stopping.
    pub patience: usize,
    /// Minimum validation-loss improvement that resets the patience counter.
    pub min_delta: f64,
    pub contempt_policy: ContemptPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            beta: 0.6,
            base_lr: 0.0001,
            max_lr: 0.05,
            step_size: 0,
            dropout_p: 0.5,
            stages: 2,
            emotion_scheme: EmotionScheme::Seven,
            momentum: 0.9,
            batch_size: 32,
            epochs: 200,
            patience: 5,
            min_delta: 1e-4,
            contempt_policy: ContemptPolicy::Drop,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("alpha and beta must be non-negative".into()));
        }
        if self.alpha + self.beta <= 0.0 {
            return Err(Error::Config("alpha + beta must be positive".into()));
        }
        if self.base_lr >= self.max_lr {
            return Err(Error::Config(format!(
                "base_lr {} must be below max_lr {}",
                self.base_lr, self.max_lr
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p {} must lie in [0, 1)",
                self.dropout_p
            )));
        }
        if self.stages < 1 {
            return Err(Error::Config("stages must be at least 1".into()));
        }
        if self.batch_size < 1 || self.epochs < 1 || self.patience < 1 {
            return Err(Error::Config(
                "batch_size, epochs and patience must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum {} must lie in [0, 1)",
                self.momentum
            )));
        }
        Ok(())
    }
}
