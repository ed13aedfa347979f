//! Gradient-weighted class-activation analysis: per-image localization maps,
//! frontal-subset selection, mean maps, most-activated landmarks, and their
//! overlap with action-unit landmark sets.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};
use crate::interp::{bilinear_resize, bilinear_sample};
use crate::network::{logit_gradient_at_conv, ModelState};
use crate::types::{
    EmotionLabel, EmotionScheme, Frame, GrayImage, LandmarkSet, Point, NUM_LANDMARKS,
};

/// Side of the frame localization maps are upsampled to for landmark
/// sampling and overlays.
pub const MAP_FRAME: usize = 224;

/// Convolution layer the activation map is taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GradCamLayer {
    Conv4a,
    Conv4b,
}

impl GradCamLayer {
    pub fn as_str(&self) -> &'static str {
        match self {
            GradCamLayer::Conv4a => "conv4a",
            GradCamLayer::Conv4b => "conv4b",
        }
    }

    fn conv_index(&self) -> usize {
        match self {
            GradCamLayer::Conv4a => 6,
            GradCamLayer::Conv4b => 7,
        }
    }
}

/// Class-discriminative localization map: non-negative, at the spatial
/// resolution of the chosen convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationMap {
    pub values: Array2<f64>,
    pub layer: GradCamLayer,
    pub class_id: usize,
}

impl LocalizationMap {
    /// Min-max normalization to [0, 1]. A constant map normalizes to zeros.
    pub fn normalized(&self) -> LocalizationMap {
        let lo = self.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self
            .values
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let values = if hi - lo < 1e-15 {
            Array2::zeros(self.values.raw_dim())
        } else {
            self.values.mapv(|v| (v - lo) / (hi - lo))
        };
        LocalizationMap {
            values,
            layer: self.layer,
            class_id: self.class_id,
        }
    }
}

/// Post-ReLU activation maps of one of the last two convolution layers for
/// an image, from an evaluation-mode forward pass of the final stage.
/// Exposed so independent checks can recompute the class score from the
/// activations themselves.
pub fn conv_activations(
    model: &ModelState,
    img: &GrayImage,
    layer: GradCamLayer,
) -> Result<Array3<f64>> {
    let ctxs = model.forward_traced(img)?;
    let last = ctxs.last().expect("model has at least one stage");
    Ok(last.trace.conv_activation(layer.conv_index()).clone())
}

/// Weighted combination of forward activation maps followed by a ReLU. The
/// per-map weights are the spatial means of `grads`.
fn assemble_map(activations: &Array3<f64>, grads: &Array3<f64>) -> Array2<f64> {
    let (k, u, v) = activations.dim();
    let z = (u * v) as f64;
    let mut map = Array2::zeros((u, v));
    for ch in 0..k {
        let alpha = grads.index_axis(Axis(0), ch).sum() / z;
        map.scaled_add(alpha, &activations.index_axis(Axis(0), ch));
    }
    map.mapv_inplace(|x| x.max(0.0));
    map
}

/// Localization map for `class_id` at the chosen layer: gradients of the
/// pre-softmax logit are global-average-pooled into per-map weights, the
/// weighted activation combination passes through a ReLU. No normalization
/// is applied to the raw map.
pub fn gradcam(
    model: &ModelState,
    img: &GrayImage,
    class_id: usize,
    layer: GradCamLayer,
) -> Result<LocalizationMap> {
    if class_id >= model.scheme.num_classes() {
        return Err(Error::Validation(format!(
            "class id {} out of range for the {:?} scheme",
            class_id, model.scheme
        )));
    }
    let ctxs = model.forward_traced(img)?;
    let last = ctxs.last().expect("model has at least one stage");
    let params = model.stages.last().expect("model has at least one stage");
    let activations = last.trace.conv_activation(layer.conv_index());
    let grads = logit_gradient_at_conv(params, &last.trace, class_id, layer.conv_index());
    Ok(LocalizationMap {
        values: assemble_map(activations, &grads),
        layer,
        class_id,
    })
}

/// Near-frontal subset selected by eye-corner proximity to the dataset mean.
#[derive(Debug, Clone)]
pub struct FrontalSubset {
    /// Indices into the slice the subset was selected from.
    pub members: Vec<usize>,
    pub epsilon: f64,
    /// Mean position of landmark 36, the left eye's left corner.
    pub mean_left_corner: Point,
    /// Mean position of landmark 45, the right eye's right corner.
    pub mean_right_corner: Point,
    /// Present when no sample passed the threshold.
    pub warning: Option<String>,
}

/// Keeps the samples whose outer eye corners both lie within `epsilon`
/// pixels of the dataset-mean corner positions.
pub fn select_frontal_subset(shapes: &[LandmarkSet], epsilon: f64) -> Result<FrontalSubset> {
    if shapes.is_empty() {
        return Err(Error::Validation(
            "cannot select a frontal subset from no samples".into(),
        ));
    }
    let n = shapes.len() as f64;
    let mut left = Point::new(0.0, 0.0);
    let mut right = Point::new(0.0, 0.0);
    for s in shapes {
        left.x += s.points()[36].x;
        left.y += s.points()[36].y;
        right.x += s.points()[45].x;
        right.y += s.points()[45].y;
    }
    left = Point::new(left.x / n, left.y / n);
    right = Point::new(right.x / n, right.y / n);

    let members: Vec<usize> = shapes
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            s.points()[36].distance(&left) < epsilon && s.points()[45].distance(&right) < epsilon
        })
        .map(|(i, _)| i)
        .collect();
    let warning = members
        .is_empty()
        .then(|| format!("no sample within {epsilon} px of the mean eye corners"));
    Ok(FrontalSubset {
        members,
        epsilon,
        mean_left_corner: left,
        mean_right_corner: right,
        warning,
    })
}

/// Element-wise mean of localization maps that share layer, class and
/// dimensions. Inputs are expected to be normalized already (see
/// [`LocalizationMap::normalized`]); a single map comes back unchanged.
pub fn mean_localization_map(maps: &[LocalizationMap]) -> Result<LocalizationMap> {
    let first = maps.first().ok_or_else(|| {
        Error::Validation("cannot average an empty list of localization maps".into())
    })?;
    for m in maps {
        if m.layer != first.layer || m.class_id != first.class_id {
            return Err(Error::Validation(
                "localization maps disagree on layer or class".into(),
            ));
        }
        if m.values.dim() != first.values.dim() {
            return Err(Error::Validation(format!(
                "localization map size {:?} does not match {:?}",
                m.values.dim(),
                first.values.dim()
            )));
        }
    }
    let mut sum = Array2::zeros(first.values.raw_dim());
    for m in maps {
        sum += &m.values;
    }
    sum /= maps.len() as f64;
    Ok(LocalizationMap {
        values: sum,
        layer: first.layer,
        class_id: first.class_id,
    })
}

/// Map value at each of the 68 landmarks of `shape`, after upsampling the
/// map to the 224x224 frame.
pub fn sample_activations(map: &LocalizationMap, shape: &LandmarkSet) -> Vec<f64> {
    let up = bilinear_resize(&map.values, MAP_FRAME, MAP_FRAME);
    shape
        .points()
        .iter()
        .map(|p| bilinear_sample(&up, p.x, p.y))
        .collect()
}

/// Indices of the `k` most activated landmarks when the map is sampled at
/// `shape` (expected in the 224x224 frame). Ties break toward the lower
/// landmark index.
pub fn top_k_activated_landmarks(
    map: &LocalizationMap,
    shape: &LandmarkSet,
    k: usize,
) -> Result<BTreeSet<usize>> {
    if k == 0 || k > NUM_LANDMARKS {
        return Err(Error::Validation(format!(
            "k must lie in 1..={NUM_LANDMARKS}, got {k}"
        )));
    }
    let values = sample_activations(map, shape);
    Ok(top_k_of_values(&values, k))
}

fn top_k_of_values(values: &[f64], k: usize) -> BTreeSet<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .expect("activations are finite")
            .then(a.cmp(&b))
    });
    order.into_iter().take(k).collect()
}

/// One action-unit row: the unit id(s), the movement description, and the
/// landmark indices it implicates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuEntry {
    pub action_units: &'static [u32],
    pub description: &'static str,
    pub landmarks: &'static [usize],
}

/// The emotion -> action units -> landmark indices table (EMFACS-style
/// descriptions). Neutral has no entry: it is not an expression.
#[derive(Debug, Clone)]
pub struct AuLandmarkTable {
    rows: Vec<(&'static str, Vec<AuEntry>)>,
}

const LIP_CORNER_SET: &[usize] = &[48, 49, 53, 54, 55, 59, 60, 64];
const UPPER_LID_SET: &[usize] = &[37, 38, 39, 42, 43, 44];
const JAW_DROP_SET: &[usize] = &[55, 56, 57, 58, 59, 60, 61, 62, 63, 64, 65, 66, 67];
const ALL_BROWS: &[usize] = &[17, 18, 19, 20, 21, 22, 23, 24, 25, 26];

impl Default for AuLandmarkTable {
    fn default() -> Self {
        Self::standard()
    }
}

impl AuLandmarkTable {
    pub fn standard() -> Self {
        let e = |action_units: &'static [u32],
                 description: &'static str,
                 landmarks: &'static [usize]| AuEntry {
            action_units,
            description,
            landmarks,
        };
        let rows = vec![
            (
                "happiness",
                vec![
                    e(&[6], "Cheek Raiser", &[1, 2, 14, 15]),
                    e(&[12], "Lip Corner Puller", LIP_CORNER_SET),
                ],
            ),
            (
                "sadness",
                vec![
                    e(&[1], "Inner Brow Raiser", &[17, 18, 19, 20, 21]),
                    e(&[4], "Brow Lowerer", &[22, 23, 24, 25, 26]),
                    e(&[15], "Lip Corner Depressor", LIP_CORNER_SET),
                ],
            ),
            (
                "surprise",
                vec![
                    e(&[1], "Inner Brow Raiser", &[20, 21, 22, 23]),
                    e(&[2], "Outer Brow Raiser", &[17, 18, 19, 24, 25, 26]),
                    e(&[5], "Upper Lid Raiser", UPPER_LID_SET),
                    e(&[26], "Jaw Drop", JAW_DROP_SET),
                ],
            ),
            (
                "fear",
                vec![
                    e(&[1], "Inner Brow Raiser", &[20, 21, 22, 23]),
                    e(&[2], "Outer Brow Raiser", &[17, 18, 19, 24, 25, 26]),
                    e(&[4], "Brow Lowerer", ALL_BROWS),
                    e(&[5, 7], "Upper Lid Raiser, Lid Tightener", UPPER_LID_SET),
                    e(&[20], "Lip Stretcher", LIP_CORNER_SET),
                    e(&[26], "Jaw Drop", JAW_DROP_SET),
                ],
            ),
            (
                "disgust",
                vec![
                    e(&[9], "Nose Wrinkler", &[27, 28, 29, 30, 31, 32, 33, 34, 35]),
                    e(&[15], "Lip Corner Depressor", LIP_CORNER_SET),
                    e(
                        &[16],
                        "Lower Lip Depressor",
                        &[48, 54, 55, 56, 57, 58, 59, 60, 64],
                    ),
                ],
            ),
            (
                "anger",
                vec![
                    e(&[4], "Brow Lowerer", ALL_BROWS),
                    e(&[5, 7], "Upper Lid Raiser, Lid Tightener", UPPER_LID_SET),
                    e(
                        &[23],
                        "Lip Tightener",
                        &[
                            48, 49, 50, 51, 52, 53, 54, 55, 56, 57, 58, 59, 60, 61, 62, 63, 64, 65,
                            66, 67,
                        ],
                    ),
                ],
            ),
        ];
        Self { rows }
    }

    /// The six expressions the table covers, in table order.
    pub fn emotions(&self) -> Vec<&'static str> {
        self.rows.iter().map(|(name, _)| *name).collect()
    }

    pub fn entries(&self, emotion_name: &str) -> Option<&[AuEntry]> {
        self.rows
            .iter()
            .find(|(name, _)| *name == emotion_name)
            .map(|(_, entries)| entries.as_slice())
    }

    /// Deduplicated union of the landmark lists for an emotion. Errors for
    /// labels outside the table (neutral has no action-unit definition).
    pub fn related_landmarks(&self, label: &EmotionLabel) -> Result<BTreeSet<usize>> {
        if label.scheme() != EmotionScheme::Seven {
            return Err(Error::Validation(
                "action-unit landmark sets are defined for seven-scheme labels".into(),
            ));
        }
        let entries = self.entries(label.name()).ok_or_else(|| {
            Error::Validation(format!("no action-unit definition for {:?}", label.name()))
        })?;
        Ok(entries
            .iter()
            .flat_map(|e| e.landmarks.iter().copied())
            .collect())
    }
}

/// Overlap between the most activated landmarks and the action-unit set of
/// the emotion: |topk intersect related| / |related|. `topk` must have exactly the
/// related set's size.
pub fn au_overlap_accuracy(
    topk: &BTreeSet<usize>,
    emotion: &EmotionLabel,
    table: &AuLandmarkTable,
) -> Result<f64> {
    let related = table.related_landmarks(emotion)?;
    if topk.len() != related.len() {
        return Err(Error::Validation(format!(
            "top-k size {} does not match the {} related landmarks of {:?}",
            topk.len(),
            related.len(),
            emotion.name()
        )));
    }
    let hits = topk.intersection(&related).count();
    Ok(hits as f64 / related.len() as f64)
}

// ---------------------------------------------------------------------------
// The per-emotion analysis pipeline
// ---------------------------------------------------------------------------

/// Which shape the mean map is sampled at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceShape {
    /// Mean ground-truth shape of the frontal subset (one shape for all
    /// emotions).
    MeanFrontal,
    /// Sample every image's own map at its own ground truth, then average
    /// the per-landmark activations.
    PerImage,
}

#[derive(Debug, Clone, Copy)]
pub struct OverlapOptions {
    /// Eye-corner threshold of the frontal subset, in pixels. The default is
    /// 5% of the 224-pixel frame.
    pub epsilon: f64,
    pub reference: ReferenceShape,
}

impl Default for OverlapOptions {
    fn default() -> Self {
        Self {
            epsilon: 11.2,
            reference: ReferenceShape::MeanFrontal,
        }
    }
}

/// One (emotion, layer) row of the overlap report.
#[derive(Debug, Clone)]
pub struct OverlapRow {
    pub emotion: &'static str,
    pub layer: GradCamLayer,
    pub k: usize,
    pub overlap: f64,
    pub n_images: usize,
}

/// Everything needed to render one mean-map overlay.
#[derive(Debug, Clone)]
pub struct OverlayData {
    pub emotion: &'static str,
    pub layer: GradCamLayer,
    pub mean_map: LocalizationMap,
    /// Pixel mean of the member images, for display.
    pub mean_image: GrayImage,
    pub top_k: BTreeSet<usize>,
    /// Shape the activations were sampled at.
    pub reference: LandmarkSet,
}

#[derive(Debug, Clone)]
pub struct OverlapReport {
    /// Six emotions per layer, conv4a rows first.
    pub rows: Vec<OverlapRow>,
    pub layer_averages: Vec<(GradCamLayer, f64)>,
    pub overlays: Vec<OverlayData>,
    pub frontal_size: usize,
}

/// Arithmetic mean of per-emotion overlaps, the per-layer summary column of
/// the report.
pub fn per_layer_average(overlaps: &[f64]) -> f64 {
    overlaps.iter().sum::<f64>() / overlaps.len() as f64
}

/// Runs the full analysis: frontal subset on ground-truth eye corners, one
/// normalized localization map per member image (for the image's labelled
/// class), per-emotion mean maps, top-k activated landmarks with k the size
/// of the emotion's action-unit landmark set, and the overlap scores.
pub fn run_overlap_analysis(
    model: &ModelState,
    samples: &[(GrayImage, LandmarkSet, EmotionLabel)],
    opts: &OverlapOptions,
) -> Result<OverlapReport> {
    if model.scheme != EmotionScheme::Seven {
        return Err(Error::Config(
            "activation-overlap analysis needs a seven-class model".into(),
        ));
    }
    if samples.is_empty() {
        return Err(Error::Validation("no samples to analyze".into()));
    }
    let shapes: Vec<LandmarkSet> = samples.iter().map(|(_, s, _)| s.clone()).collect();
    let frontal = select_frontal_subset(&shapes, opts.epsilon)?;
    if frontal.members.is_empty() {
        return Err(Error::Validation(format!(
            "frontal subset is empty at epsilon {}; raise the threshold",
            opts.epsilon
        )));
    }

    // Mean frontal ground-truth shape, the default sampling reference.
    let mean_shape = {
        let mut acc = vec![Point::new(0.0, 0.0); NUM_LANDMARKS];
        for &i in &frontal.members {
            for (a, p) in acc.iter_mut().zip(shapes[i].points()) {
                a.x += p.x;
                a.y += p.y;
            }
        }
        let n = frontal.members.len() as f64;
        LandmarkSet::new(
            acc.into_iter()
                .map(|p| Point::new(p.x / n, p.y / n))
                .collect(),
            Frame::Image,
        )?
    };

    let table = AuLandmarkTable::standard();
    let mut rows = Vec::new();
    let mut overlays = Vec::new();
    let mut layer_averages = Vec::new();

    for layer in [GradCamLayer::Conv4a, GradCamLayer::Conv4b] {
        let mut overlaps = Vec::new();
        for emotion_name in table.emotions() {
            let label = seven_label_by_name(emotion_name)?;
            let members: Vec<usize> = frontal
                .members
                .iter()
                .copied()
                .filter(|&i| samples[i].2 == label)
                .collect();
            if members.is_empty() {
                return Err(Error::Validation(format!(
                    "no frontal samples labelled {emotion_name:?}; the per-emotion mean map is undefined"
                )));
            }

            let mut maps = Vec::with_capacity(members.len());
            for &i in &members {
                maps.push(gradcam(model, &samples[i].0, label.class_id(), layer)?.normalized());
            }
            let mean_map = mean_localization_map(&maps)?;

            let related = table.related_landmarks(&label)?;
            let k = related.len();
            let top_k = match opts.reference {
                ReferenceShape::MeanFrontal => {
                    top_k_activated_landmarks(&mean_map, &mean_shape, k)?
                }
                ReferenceShape::PerImage => {
                    let mut acc = vec![0.0f64; NUM_LANDMARKS];
                    for (&i, map) in members.iter().zip(&maps) {
                        for (a, v) in acc.iter_mut().zip(sample_activations(map, &shapes[i])) {
                            *a += v;
                        }
                    }
                    top_k_of_values(&acc, k)
                }
            };
            let overlap = au_overlap_accuracy(&top_k, &label, &table)?;
            overlaps.push(overlap);
            rows.push(OverlapRow {
                emotion: emotion_name,
                layer,
                k,
                overlap,
                n_images: members.len(),
            });

            let mut mean_pixels = Array2::zeros((
                samples[members[0]].0.height(),
                samples[members[0]].0.width(),
            ));
            for &i in &members {
                mean_pixels += samples[i].0.pixels();
            }
            mean_pixels /= members.len() as f64;
            overlays.push(OverlayData {
                emotion: emotion_name,
                layer,
                mean_map: mean_map.clone(),
                mean_image: GrayImage::new(mean_pixels)?,
                top_k,
                reference: mean_shape.clone(),
            });
        }
        layer_averages.push((layer, per_layer_average(&overlaps)));
    }

    Ok(OverlapReport {
        rows,
        layer_averages,
        overlays,
        frontal_size: frontal.members.len(),
    })
}

fn seven_label_by_name(name: &str) -> Result<EmotionLabel> {
    let id = EmotionScheme::Seven
        .class_names()
        .iter()
        .position(|n| *n == name)
        .ok_or_else(|| Error::Validation(format!("unknown seven-scheme emotion {name:?}")))?;
    EmotionLabel::new(id, EmotionScheme::Seven)
}

// ---------------------------------------------------------------------------
// Overlay rendering
// ---------------------------------------------------------------------------

/// Writes a heat-over-face composite PNG: the image in grayscale, the map
/// blended on top (blue-to-red with opacity growing with activation), and
/// optional landmark markers in green. A zero map reproduces the grayscale
/// image in RGB.
pub fn render_overlay(
    img: &GrayImage,
    map: &LocalizationMap,
    landmarks: Option<&LandmarkSet>,
    path: &Path,
) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let lo = img.pixels().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = img
        .pixels()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let span = if hi - lo < 1e-15 { 1.0 } else { hi - lo };

    let heat = bilinear_resize(&map.normalized().values, h, w);
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let gray = ((img.get(x, y) - lo) / span * 255.0).round() as u8;
            let v = heat[[y, x]].clamp(0.0, 1.0);
            let alpha = 0.6 * v;
            let heat_r = 255.0 * v;
            let heat_b = 255.0 * (1.0 - v);
            let r = ((1.0 - alpha) * gray as f64 + alpha * heat_r).round() as u8;
            let g = ((1.0 - alpha) * gray as f64).round() as u8;
            let b = ((1.0 - alpha) * gray as f64 + alpha * heat_b).round() as u8;
            out.put_pixel(x as u32, y as u32, image::Rgb([r, g, b]));
        }
    }
    if let Some(lms) = landmarks {
        for p in lms.points() {
            let (px, py) = (p.x.round() as i64, p.y.round() as i64);
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let (x, y) = (px + dx, py + dy);
                    if x >= 0 && x < w as i64 && y >= 0 && y < h as i64 {
                        out.put_pixel(x as u32, y as u32, image::Rgb([0, 230, 0]));
                    }
                }
            }
        }
    }
    out.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ArchConfig;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn circle_shape(cx: f64, cy: f64, r: f64) -> LandmarkSet {
        let pts = (0..NUM_LANDMARKS)
            .map(|i| {
                let a = i as f64 / NUM_LANDMARKS as f64 * std::f64::consts::TAU;
                Point::new(cx + r * a.cos(), cy + r * a.sin())
            })
            .collect();
        LandmarkSet::new(pts, Frame::Image).unwrap()
    }

    fn tiny_model(rng: &mut ChaCha8Rng) -> ModelState {
        let arch = ArchConfig::compact(32, [2, 2, 3, 3], 12);
        ModelState::new(
            arch,
            EmotionScheme::Seven,
            1,
            circle_shape(16.0, 16.0, 9.0).with_frame(Frame::Canonical),
            rng,
        )
        .unwrap()
    }

    fn random_image(size: usize, rng: &mut ChaCha8Rng) -> GrayImage {
        GrayImage::new(Array2::from_shape_fn((size, size), |_| rng.random::<f64>())).unwrap()
    }

    #[test]
    fn assemble_map_cases() {
        // Zero gradients give a zero map.
        let a = Array3::from_shape_fn((2, 2, 2), |(k, y, x)| (k + y + x) as f64);
        let zero = Array3::zeros((2, 2, 2));
        assert!(assemble_map(&a, &zero).iter().all(|&v| v == 0.0));

        // A single map with unit gradients: weight 1, so the map is relu(A).
        let a1 = Array3::from_shape_fn((1, 2, 2), |(_, y, x)| (y * 2 + x) as f64);
        let ones = Array3::from_elem((1, 2, 2), 1.0);
        let m = assemble_map(&a1, &ones);
        assert_eq!(m[[1, 1]], 3.0);
        assert_eq!(m[[0, 0]], 0.0);

        // Negative combinations clamp at zero.
        let neg = Array3::from_elem((1, 2, 2), -1.0);
        assert!(assemble_map(&a1, &neg).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradcam_requires_a_valid_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = tiny_model(&mut rng);
        let img = random_image(32, &mut rng);
        assert!(gradcam(&model, &img, 7, GradCamLayer::Conv4a).is_err());
    }

    #[test]
    fn gradcam_is_non_negative_and_layer_sized() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = tiny_model(&mut rng);
        let img = random_image(32, &mut rng);
        for layer in [GradCamLayer::Conv4a, GradCamLayer::Conv4b] {
            let map = gradcam(&model, &img, 3, layer).unwrap();
            // 32 -> 16 -> 8 -> 4 spatial at the conv4 pair.
            assert_eq!(map.values.dim(), (4, 4));
            assert!(map.values.iter().all(|&v| v >= 0.0 && v.is_finite()));
        }
    }

    #[test]
    fn gradcam_zero_head_gives_zero_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = tiny_model(&mut rng);
        model.stages[0].fc2_emotion.weight.fill(0.0);
        model.stages[0].fc2_emotion.bias.fill(0.0);
        let img = random_image(32, &mut rng);
        let map = gradcam(&model, &img, 0, GradCamLayer::Conv4a).unwrap();
        assert!(map.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradcam_invariant_under_compensated_rescaling() {
        // Doubling conv4b (so its post-ReLU maps double) while halving fc1
        // weights leaves the logits unchanged and the weighted pre-ReLU
        // combination at conv4b invariant.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = tiny_model(&mut rng);
        let img = random_image(32, &mut rng);
        let base = gradcam(&model, &img, 2, GradCamLayer::Conv4b).unwrap();

        let mut scaled = model.clone();
        scaled.stages[0].convs[7].weight *= 2.0;
        scaled.stages[0].convs[7].bias *= 2.0;
        scaled.stages[0].fc1.weight *= 0.5;
        let doubled = gradcam(&scaled, &img, 2, GradCamLayer::Conv4b).unwrap();
        for (a, b) in base.values.iter().zip(doubled.values.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-9, max_relative = 1e-9);
        }
    }

    #[test]
    fn frontal_subset_thresholding() {
        let base = circle_shape(100.0, 100.0, 40.0);
        let mut shapes = vec![base.clone(); 5];
        // Displace one sample's corners far beyond epsilon.
        let mut pts: Vec<Point> = base.points().to_vec();
        pts[36].x += 50.0;
        pts[45].x += 50.0;
        shapes.push(LandmarkSet::new(pts, Frame::Image).unwrap());

        let eps = 10.0;
        let subset = select_frontal_subset(&shapes, eps).unwrap();
        assert!(!subset.members.contains(&5));
        assert_eq!(subset.members.len(), 5);
        assert!(subset.warning.is_none());

        // Brute-force filter oracle.
        let n = shapes.len() as f64;
        let ml = Point::new(
            shapes.iter().map(|s| s.points()[36].x).sum::<f64>() / n,
            shapes.iter().map(|s| s.points()[36].y).sum::<f64>() / n,
        );
        let mr = Point::new(
            shapes.iter().map(|s| s.points()[45].x).sum::<f64>() / n,
            shapes.iter().map(|s| s.points()[45].y).sum::<f64>() / n,
        );
        let oracle: Vec<usize> = shapes
            .iter()
            .enumerate()
            .filter(|(_, s)| {
                s.points()[36].distance(&ml) < eps && s.points()[45].distance(&mr) < eps
            })
            .map(|(i, _)| i)
            .collect();
        assert_eq!(subset.members, oracle);

        // All identical: everyone kept for any positive epsilon.
        let same = vec![base.clone(); 4];
        let subset = select_frontal_subset(&same, 0.001).unwrap();
        assert_eq!(subset.members.len(), 4);

        // Empty input errors, empty output warns.
        assert!(select_frontal_subset(&[], 1.0).is_err());
        let spread: Vec<LandmarkSet> = (0..4)
            .map(|i| circle_shape(50.0 + 60.0 * i as f64, 100.0, 30.0))
            .collect();
        let subset = select_frontal_subset(&spread, 1e-9).unwrap();
        assert!(subset.members.is_empty());
        assert!(subset.warning.is_some());
    }

    #[test]
    fn mean_map_matches_direct_summation_and_commutes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mk = |rng: &mut ChaCha8Rng| LocalizationMap {
            values: Array2::from_shape_fn((6, 6), |_| rng.random::<f64>()),
            layer: GradCamLayer::Conv4a,
            class_id: 1,
        };
        let maps: Vec<LocalizationMap> = (0..10).map(|_| mk(&mut rng)).collect();
        let mean = mean_localization_map(&maps).unwrap();

        let mut oracle = Array2::zeros((6, 6));
        for m in &maps {
            oracle += &m.values;
        }
        oracle /= 10.0;
        for (a, b) in mean.values.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-12);
        }

        let mut reversed = maps.clone();
        reversed.reverse();
        let mean_rev = mean_localization_map(&reversed).unwrap();
        for (a, b) in mean.values.iter().zip(mean_rev.values.iter()) {
            assert!((a - b).abs() < 1e-12);
        }

        // Single map unchanged; empty list errors.
        let single = mean_localization_map(&maps[..1]).unwrap();
        assert_eq!(single.values, maps[0].values);
        assert!(mean_localization_map(&[]).is_err());
    }

    #[test]
    fn mean_map_rejects_mismatched_inputs() {
        let a = LocalizationMap {
            values: Array2::zeros((4, 4)),
            layer: GradCamLayer::Conv4a,
            class_id: 1,
        };
        let b = LocalizationMap {
            values: Array2::zeros((4, 4)),
            layer: GradCamLayer::Conv4b,
            class_id: 1,
        };
        assert!(mean_localization_map(&[a.clone(), b]).is_err());
        let c = LocalizationMap {
            values: Array2::zeros((5, 4)),
            layer: GradCamLayer::Conv4a,
            class_id: 1,
        };
        assert!(mean_localization_map(&[a, c]).is_err());
    }

    #[test]
    fn top_k_respects_support_and_tie_breaks() {
        // A shape whose mouth is the only region inside the lit map area.
        let mut pts = Vec::with_capacity(NUM_LANDMARKS);
        for i in 0..NUM_LANDMARKS {
            if (48..68).contains(&i) {
                // Mouth in the lower center of the 224 frame.
                pts.push(Point::new(92.0 + (i - 48) as f64 * 2.0, 190.0));
            } else {
                pts.push(Point::new(30.0 + (i % 16) as f64 * 10.0, 40.0));
            }
        }
        let shape = LandmarkSet::new(pts, Frame::Image).unwrap();

        let mut values = Array2::zeros((28, 28));
        // Rows 22..27 of the 28-cell map cover y in ~[176, 216].
        for y in 22..27 {
            for x in 9..20 {
                values[[y, x]] = 1.0;
            }
        }
        let map = LocalizationMap {
            values,
            layer: GradCamLayer::Conv4a,
            class_id: 1,
        };
        let topk = top_k_activated_landmarks(&map, &shape, 12).unwrap();
        assert_eq!(topk.len(), 12);
        for idx in &topk {
            assert!((48..68).contains(idx), "index {idx} outside the mouth");
        }

        // Constant map: tie-break gives 0..k-1.
        let flat = LocalizationMap {
            values: Array2::from_elem((28, 28), 0.5),
            layer: GradCamLayer::Conv4a,
            class_id: 1,
        };
        let topk = top_k_activated_landmarks(&flat, &shape, 5).unwrap();
        assert_eq!(topk, (0..5).collect());

        // k bounds.
        assert!(top_k_activated_landmarks(&flat, &shape, 0).is_err());
        assert!(top_k_activated_landmarks(&flat, &shape, 69).is_err());
    }

    #[test]
    fn top_k_matches_sort_oracle_and_is_rescale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let shape = circle_shape(112.0, 112.0, 70.0);
        for _ in 0..10 {
            let map = LocalizationMap {
                values: Array2::from_shape_fn((14, 14), |_| rng.random::<f64>()),
                layer: GradCamLayer::Conv4b,
                class_id: 2,
            };
            let k = rng.random_range(1..=68);
            let topk = top_k_activated_landmarks(&map, &shape, k).unwrap();

            // Brute-force: sample, sort with the same tie-break, take k.
            let values = sample_activations(&map, &shape);
            let mut order: Vec<usize> = (0..68).collect();
            order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
            let oracle: BTreeSet<usize> = order.into_iter().take(k).collect();
            assert_eq!(topk, oracle);

            // Strictly monotone rescaling does not change the selection.
            let rescaled = LocalizationMap {
                values: map.values.mapv(|v| 3.0 * v + 0.7),
                ..map.clone()
            };
            let topk2 = top_k_activated_landmarks(&rescaled, &shape, k).unwrap();
            assert_eq!(topk, topk2);
        }
    }

    #[test]
    fn au_table_reproduces_the_reference_rows() {
        let table = AuLandmarkTable::standard();
        assert_eq!(
            table.emotions(),
            vec![
                "happiness",
                "sadness",
                "surprise",
                "fear",
                "disgust",
                "anger"
            ]
        );

        let happy = table.entries("happiness").unwrap();
        assert_eq!(happy[0].action_units, &[6]);
        assert_eq!(happy[0].description, "Cheek Raiser");
        assert_eq!(happy[0].landmarks, &[1, 2, 14, 15]);
        assert_eq!(happy[1].action_units, &[12]);
        assert_eq!(happy[1].landmarks, &[48, 49, 53, 54, 55, 59, 60, 64]);

        let fear = table.entries("fear").unwrap();
        assert_eq!(fear.len(), 6);
        assert_eq!(fear[3].action_units, &[5, 7]);

        // Deduplicated union sizes per emotion.
        let sizes: Vec<usize> = [
            "happiness",
            "sadness",
            "surprise",
            "fear",
            "disgust",
            "anger",
        ]
        .iter()
        .map(|name| {
            let label = seven_label_by_name(name).unwrap();
            table.related_landmarks(&label).unwrap().len()
        })
        .collect();
        assert_eq!(sizes, vec![12, 18, 29, 33, 20, 36]);

        // All indices in range.
        for name in table.emotions() {
            for e in table.entries(name).unwrap() {
                assert!(e.landmarks.iter().all(|&i| i < NUM_LANDMARKS));
            }
        }

        // Neutral has no definition.
        let neutral = EmotionLabel::new(0, EmotionScheme::Seven).unwrap();
        assert!(table.related_landmarks(&neutral).is_err());
    }

    #[test]
    fn overlap_accuracy_bounds_and_rationality() {
        let table = AuLandmarkTable::standard();
        let label = seven_label_by_name("happiness").unwrap();
        let related = table.related_landmarks(&label).unwrap();

        assert_relative_eq!(au_overlap_accuracy(&related, &label, &table).unwrap(), 1.0);

        let disjoint: BTreeSet<usize> = (0..NUM_LANDMARKS)
            .filter(|i| !related.contains(i))
            .take(related.len())
            .collect();
        assert_relative_eq!(au_overlap_accuracy(&disjoint, &label, &table).unwrap(), 0.0);

        // Any top-k yields m / |related| for integer m.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let mut all: Vec<usize> = (0..NUM_LANDMARKS).collect();
            use rand::seq::SliceRandom;
            all.shuffle(&mut rng);
            let topk: BTreeSet<usize> = all.into_iter().take(related.len()).collect();
            let overlap = au_overlap_accuracy(&topk, &label, &table).unwrap();
            let scaled = overlap * related.len() as f64;
            assert!((scaled - scaled.round()).abs() < 1e-9);
            assert!((0.0..=1.0).contains(&overlap));
        }

        // Wrong k is rejected.
        let short: BTreeSet<usize> = (0..3).collect();
        assert!(au_overlap_accuracy(&short, &label, &table).is_err());
    }

    #[test]
    fn overlay_zero_map_is_grayscale_and_peak_is_hottest() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = random_image(64, &mut rng);

        let zero = LocalizationMap {
            values: Array2::zeros((8, 8)),
            layer: GradCamLayer::Conv4a,
            class_id: 0,
        };
        let path = dir.path().join("zero.png");
        render_overlay(&img, &zero, None, &path).unwrap();
        let decoded = image::open(&path).unwrap().to_rgb8();
        assert_eq!(decoded.width(), 64);
        assert_eq!(decoded.height(), 64);
        for p in decoded.pixels() {
            assert_eq!(p.0[0], p.0[1]);
            assert_eq!(p.0[1], p.0[2]);
        }

        // A delta-peaked map puts the most red-dominant pixel at the peak.
        let mut values = Array2::zeros((8, 8));
        values[[2, 5]] = 1.0;
        let peaked = LocalizationMap {
            values,
            layer: GradCamLayer::Conv4a,
            class_id: 0,
        };
        let path = dir.path().join("peak.png");
        render_overlay(&img, &peaked, None, &path).unwrap();
        let decoded = image::open(&path).unwrap().to_rgb8();
        let mut best = (i64::MIN, 0u32, 0u32);
        for (x, y, p) in decoded.enumerate_pixels() {
            let redness = p.0[0] as i64 - p.0[2] as i64;
            if redness > best.0 {
                best = (redness, x, y);
            }
        }
        // Map cell (row 2, col 5) of the 8x8 grid sits near (44, 20) in the
        // 64-pixel frame under half-pixel upsampling.
        assert!(
            (best.1 as i64 - 44).abs() <= 4 && (best.2 as i64 - 20).abs() <= 4,
            "hottest pixel at ({}, {})",
            best.1,
            best.2
        );
    }

    #[test]
    fn normalized_map_spans_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let map = LocalizationMap {
            values: Array2::from_shape_fn((5, 5), |_| rng.random::<f64>() * 7.0 + 1.0),
            layer: GradCamLayer::Conv4a,
            class_id: 0,
        };
        let n = map.normalized();
        let lo = n.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = n.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_relative_eq!(lo, 0.0);
        assert_relative_eq!(hi, 1.0);

        let flat = LocalizationMap {
            values: Array2::from_elem((5, 5), 3.0),
            layer: GradCamLayer::Conv4a,
            class_id: 0,
        };
        assert!(flat.normalized().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn per_layer_average_is_the_arithmetic_mean() {
        let rows = [0.375, 0.455, 0.522, 0.633, 0.214, 0.647];
        assert_relative_eq!(per_layer_average(&rows), 2.846 / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn conv_activation_accessor_matches_map_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = tiny_model(&mut rng);
        let img = random_image(32, &mut rng);
        let a = conv_activations(&model, &img, GradCamLayer::Conv4a).unwrap();
        assert_eq!(a.dim(), (3, 4, 4));
        assert!(a.iter().all(|&v| v >= 0.0));
    }
}
