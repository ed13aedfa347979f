//! Dataset ingestion: the manifest CSV format, crop/grayscale/resize
//! preprocessing with train-set normalization, a deterministic synthetic
//! corpus generator, and evaluation metrics.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::interpupil_distance;
use crate::interp::bilinear_resize;
use crate::training::TrainSample;
use crate::types::{
    ContemptPolicy, EmotionLabel, EmotionScheme, Frame, GrayImage, LandmarkSet, Point, RawEmotion,
    NUM_LANDMARKS,
};

/// Side length every face is resized to during preprocessing.
pub const PREPROCESS_SIZE: usize = 224;

/// Luminance weights used for grayscale conversion (ITU-R 601).
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// One dataset entry: an image path (relative to the manifest), an optional
/// face box, 68 ground-truth landmarks in the original pixel frame, and the
/// raw label.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub path: PathBuf,
    /// (x0, y0, x1, y1) in pixels of the original image.
    pub bbox: Option<[f64; 4]>,
    pub landmarks: LandmarkSet,
    pub label: RawEmotion,
    pub dataset: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Scalar normalization statistics of the training split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    /// No-op normalization.
    pub fn identity() -> Self {
        Self {
            mean: 0.0,
            std: 1.0,
        }
    }
}

/// An in-memory dataset: records, their split assignment, and the train-set
/// normalization statistics once computed. Only the records themselves are
/// persisted in the manifest CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    /// Directory image paths are resolved against.
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
    pub splits: Vec<Split>,
    pub stats: Option<NormStats>,
}

/// Result of loading a manifest: records with no landmark annotation are
/// skipped and counted rather than failing the load.
#[derive(Debug)]
pub struct ManifestLoad {
    pub manifest: DatasetManifest,
    pub rejected_missing_landmarks: usize,
}

const MANIFEST_COLUMNS: usize = 5 + 2 * NUM_LANDMARKS + 2;

fn manifest_header() -> Vec<String> {
    let mut h = vec![
        "path".to_string(),
        "x0".to_string(),
        "y0".to_string(),
        "x1".to_string(),
        "y1".to_string(),
    ];
    for i in 0..NUM_LANDMARKS {
        h.push(format!("lm{i}_x"));
        h.push(format!("lm{i}_y"));
    }
    h.push("label".to_string());
    h.push("dataset".to_string());
    h
}

impl DatasetManifest {
    /// Loads and validates a manifest CSV. Rows without landmarks are
    /// skipped (counted in the result); malformed rows fail with their line
    /// number; records pointing at missing image files fail the whole load.
    pub fn load(path: &Path) -> Result<ManifestLoad> {
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_path(path)
            .map_err(|e| Error::Validation(format!("cannot open manifest {path:?}: {e}")))?;

        let mut records = Vec::new();
        let mut rejected = 0usize;
        for row in reader.records() {
            let row = row.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line() as usize);
                Error::Parse {
                    line,
                    details: e.to_string(),
                }
            })?;
            let line = row.position().map_or(0, |p| p.line() as usize);
            let fail = |details: String| Error::Parse { line, details };

            if row.len() != MANIFEST_COLUMNS {
                return Err(fail(format!(
                    "expected {MANIFEST_COLUMNS} columns, got {}",
                    row.len()
                )));
            }
            let img_path = row.get(0).unwrap_or_default();
            if img_path.is_empty() {
                return Err(fail("empty image path".into()));
            }

            let bbox_fields: Vec<&str> = (1..5).map(|i| row.get(i).unwrap_or_default()).collect();
            let bbox = if bbox_fields.iter().all(|f| f.is_empty()) {
                None
            } else if bbox_fields.iter().all(|f| !f.is_empty()) {
                let mut b = [0.0; 4];
                for (slot, field) in b.iter_mut().zip(&bbox_fields) {
                    *slot = field
                        .parse::<f64>()
                        .map_err(|e| fail(format!("bad bounding box value {field:?}: {e}")))?;
                }
                Some(b)
            } else {
                return Err(fail(
                    "bounding box must be fully present or fully empty".into(),
                ));
            };

            let lm_fields: Vec<&str> = (5..5 + 2 * NUM_LANDMARKS)
                .map(|i| row.get(i).unwrap_or_default())
                .collect();
            if lm_fields.iter().all(|f| f.is_empty()) {
                rejected += 1;
                continue;
            }
            let mut coords = Vec::with_capacity(2 * NUM_LANDMARKS);
            for field in &lm_fields {
                let v = field
                    .parse::<f64>()
                    .map_err(|e| fail(format!("bad landmark value {field:?}: {e}")))?;
                coords.push(v);
            }
            let landmarks =
                LandmarkSet::from_flat(&coords, Frame::Image).map_err(|e| fail(e.to_string()))?;

            let label = RawEmotion::parse(row.get(MANIFEST_COLUMNS - 2).unwrap_or_default())
                .map_err(|e| fail(e.to_string()))?;
            let dataset = row
                .get(MANIFEST_COLUMNS - 1)
                .unwrap_or_default()
                .to_string();

            records.push(SampleRecord {
                path: PathBuf::from(img_path),
                bbox,
                landmarks,
                label,
                dataset,
            });
        }

        if records.is_empty() {
            return Err(Error::Validation(format!(
                "manifest {path:?} contains no usable records"
            )));
        }
        for rec in &records {
            let resolved = root.join(&rec.path);
            if !resolved.exists() {
                return Err(Error::MissingImage(resolved));
            }
        }

        let splits = vec![Split::Train; records.len()];
        Ok(ManifestLoad {
            manifest: DatasetManifest {
                root,
                records,
                splits,
                stats: None,
            },
            rejected_missing_landmarks: rejected,
        })
    }

    /// Writes the records (not splits or stats) as a manifest CSV.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)
            .map_err(|e| Error::Validation(format!("cannot write manifest {path:?}: {e}")))?;
        writer
            .write_record(manifest_header())
            .map_err(|e| Error::Validation(e.to_string()))?;
        for rec in &self.records {
            let mut row: Vec<String> = Vec::with_capacity(MANIFEST_COLUMNS);
            row.push(rec.path.to_string_lossy().into_owned());
            match rec.bbox {
                Some(b) => row.extend(b.iter().map(|v| format!("{v}"))),
                None => row.extend(std::iter::repeat_n(String::new(), 4)),
            }
            for p in rec.landmarks.points() {
                row.push(format!("{}", p.x));
                row.push(format!("{}", p.y));
            }
            row.push(rec.label.as_str().to_string());
            row.push(rec.dataset.clone());
            writer
                .write_record(&row)
                .map_err(|e| Error::Validation(e.to_string()))?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn resolve_path(&self, rec: &SampleRecord) -> PathBuf {
        self.root.join(&rec.path)
    }

    /// Deterministic split assignment: a seeded shuffle, then the first
    /// `val_frac` of records become validation, the next `test_frac` test,
    /// the rest training.
    pub fn assign_splits(&mut self, val_frac: f64, test_frac: f64, seed: u64) -> Result<()> {
        if !(0.0..1.0).contains(&val_frac)
            || !(0.0..1.0).contains(&test_frac)
            || val_frac + test_frac >= 1.0
        {
            return Err(Error::Config(format!(
                "invalid split fractions val={val_frac} test={test_frac}"
            )));
        }
        let n = self.records.len();
        let mut order: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let n_val = (n as f64 * val_frac).round() as usize;
        let n_test = (n as f64 * test_frac).round() as usize;
        for (rank, &idx) in order.iter().enumerate() {
            self.splits[idx] = if rank < n_val {
                Split::Val
            } else if rank < n_val + n_test {
                Split::Test
            } else {
                Split::Train
            };
        }
        Ok(())
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Scalar mean and standard deviation of all training-split pixels after
    /// crop/grayscale/resize, before normalization. Stored on the manifest
    /// and returned.
    pub fn compute_stats(&mut self) -> Result<NormStats> {
        let train = self.indices_of(Split::Train);
        if train.is_empty() {
            return Err(Error::Config(
                "cannot compute normalization stats: no training records".into(),
            ));
        }
        let identity = NormStats::identity();
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        for &i in &train {
            let (img, _) = preprocess(&self.records[i], &identity, &self.root)?;
            for &v in img.pixels() {
                sum += v;
                sum_sq += v * v;
                count += 1;
            }
        }
        let mean = sum / count as f64;
        let var = (sum_sq / count as f64 - mean * mean).max(0.0);
        let std = var.sqrt();
        if std < 1e-12 {
            return Err(Error::Config(
                "training images have zero pixel variance; normalization undefined".into(),
            ));
        }
        let stats = NormStats { mean, std };
        self.stats = Some(stats);
        Ok(stats)
    }
}

/// Crops to the bounding box when present, converts to grayscale with the
/// ITU-R 601 weights, resizes to 224x224 and normalizes with the train-set
/// statistics. Landmarks are mapped by the same crop-and-resize affine
/// transform. Box coordinates are rounded to the pixel grid first.
pub fn preprocess(
    rec: &SampleRecord,
    stats: &NormStats,
    root: &Path,
) -> Result<(GrayImage, LandmarkSet)> {
    let path = root.join(&rec.path);
    let decoded = image::open(&path)?.to_rgb8();
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);

    let (bx0, by0, bx1, by1) = match rec.bbox {
        Some([x0, y0, x1, y1]) => {
            let rx0 = x0.round() as i64;
            let ry0 = y0.round() as i64;
            let rx1 = x1.round() as i64;
            let ry1 = y1.round() as i64;
            if rx0 < 0 || ry0 < 0 || rx1 > w as i64 || ry1 > h as i64 || rx0 >= rx1 || ry0 >= ry1 {
                return Err(Error::Validation(format!(
                    "bounding box [{x0}, {y0}, {x1}, {y1}] lies outside the {w}x{h} image {path:?}"
                )));
            }
            (rx0 as usize, ry0 as usize, rx1 as usize, ry1 as usize)
        }
        None => (0, 0, w, h),
    };
    let (cw, ch) = (bx1 - bx0, by1 - by0);

    let mut gray = Array2::zeros((ch, cw));
    for y in 0..ch {
        for x in 0..cw {
            let p = decoded.get_pixel((bx0 + x) as u32, (by0 + y) as u32);
            gray[[y, x]] = (LUMA_WEIGHTS[0] * p.0[0] as f64
                + LUMA_WEIGHTS[1] * p.0[1] as f64
                + LUMA_WEIGHTS[2] * p.0[2] as f64)
                / 255.0;
        }
    }

    let mut resized = bilinear_resize(&gray, PREPROCESS_SIZE, PREPROCESS_SIZE);
    resized.mapv_inplace(|v| (v - stats.mean) / stats.std);

    let sx = PREPROCESS_SIZE as f64 / cw as f64;
    let sy = PREPROCESS_SIZE as f64 / ch as f64;
    let pts = rec
        .landmarks
        .points()
        .iter()
        .map(|p| Point::new((p.x - bx0 as f64) * sx, (p.y - by0 as f64) * sy))
        .collect();

    Ok((
        GrayImage::new(resized)?,
        LandmarkSet::new(pts, Frame::Image)?,
    ))
}

/// Preprocesses a split into training samples, mapping raw labels into the
/// scheme. Samples whose label maps to nothing (surprise in the three-class
/// scheme, contempt under the drop policy) are skipped; the count of skipped
/// samples is returned alongside.
pub fn build_training_samples(
    manifest: &DatasetManifest,
    split: Split,
    stats: &NormStats,
    scheme: EmotionScheme,
    policy: ContemptPolicy,
) -> Result<(Vec<TrainSample>, usize)> {
    let mut out = Vec::new();
    let mut skipped = 0usize;
    for i in manifest.indices_of(split) {
        let rec = &manifest.records[i];
        match rec.label.map_to_scheme(scheme, policy) {
            Some(label) => {
                let (image, landmarks) = preprocess(rec, stats, &manifest.root)?;
                out.push(TrainSample {
                    image,
                    landmarks,
                    label,
                });
            }
            None => skipped += 1,
        }
    }
    Ok((out, skipped))
}

// ---------------------------------------------------------------------------
// Evaluation metrics
// ---------------------------------------------------------------------------

/// Row-per-ground-truth, column-per-prediction count matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    pub scheme: EmotionScheme,
    counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn counts(&self) -> &[Vec<usize>] {
        &self.counts
    }

    /// CSV with a ground-truth label column and one column per predicted
    /// class.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        let names = self.scheme.class_names();
        writeln!(w, "gt\\pred,{}", names.join(","))?;
        for (name, row) in names.iter().zip(&self.counts) {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            writeln!(w, "{},{}", name, cells.join(","))?;
        }
        Ok(())
    }
}

/// Fraction of exact label matches plus the confusion matrix.
pub fn compute_accuracy(
    preds: &[EmotionLabel],
    gts: &[EmotionLabel],
) -> Result<(f64, ConfusionMatrix)> {
    if preds.len() != gts.len() {
        return Err(Error::Validation(format!(
            "prediction/ground-truth length mismatch: {} vs {}",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Validation(
            "cannot compute accuracy of an empty prediction set".into(),
        ));
    }
    let scheme = gts[0].scheme();
    if preds
        .iter()
        .chain(gts)
        .any(|label| label.scheme() != scheme)
    {
        return Err(Error::Validation(
            "mixed label schemes in accuracy computation".into(),
        ));
    }
    let k = scheme.num_classes();
    let mut counts = vec![vec![0usize; k]; k];
    let mut correct = 0usize;
    for (p, g) in preds.iter().zip(gts) {
        counts[g.class_id()][p.class_id()] += 1;
        if p.class_id() == g.class_id() {
            correct += 1;
        }
    }
    Ok((
        correct as f64 / preds.len() as f64,
        ConfusionMatrix { scheme, counts },
    ))
}

/// Mean per-point Euclidean error normalized by the ground-truth inter-pupil
/// distance.
pub fn normalized_landmark_error(pred: &LandmarkSet, gt: &LandmarkSet) -> Result<f64> {
    let d = interpupil_distance(gt)?;
    let mean_err = pred
        .points()
        .iter()
        .zip(gt.points())
        .map(|(p, q)| p.distance(q))
        .sum::<f64>()
        / NUM_LANDMARKS as f64;
    Ok(mean_err / d)
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

/// All geometry of one rendered face, in pixels of the 224x224 canvas.
#[derive(Debug, Clone)]
struct FaceParams {
    cx: f64,
    cy: f64,
    face_a: f64,
    face_b: f64,
    eye_dx: f64,
    eye_y: f64,
    eye_w: f64,
    /// Eye half-opening.
    aperture: f64,
    /// Whole-brow raise; positive moves brows up.
    brow_lift: f64,
    /// Extra raise of the inner brow ends; negative pulls them down.
    brow_inner: f64,
    /// Positive pulls the nose tip and nostril row up (wrinkle).
    nose_scrunch: f64,
    mouth_y: f64,
    mouth_w: f64,
    /// Mouth-corner lift: positive corners curve upward (smile).
    curvature: f64,
    /// Inner-lip separation; 0 is a closed mouth.
    openness: f64,
    lip_thickness: f64,
}

impl FaceParams {
    fn base(cx: f64, cy: f64) -> Self {
        Self {
            cx,
            cy,
            face_a: 78.0,
            face_b: 92.0,
            eye_dx: 34.0,
            eye_y: cy - 26.0,
            eye_w: 13.0,
            aperture: 7.0,
            brow_lift: 0.0,
            brow_inner: 0.0,
            nose_scrunch: 0.0,
            mouth_y: cy + 52.0,
            mouth_w: 26.0,
            curvature: 0.0,
            openness: 0.0,
            lip_thickness: 5.0,
        }
    }

    /// Deterministic per-class deformation. Each expression moves brows,
    /// eye aperture and mouth shape in its own direction, strongly enough to
    /// survive downscaling.
    fn deform(&mut self, emotion: RawEmotion) {
        match emotion {
            RawEmotion::Neutral | RawEmotion::Contempt => {}
            RawEmotion::Happiness => {
                self.curvature += 16.0;
                self.aperture -= 1.0;
            }
            RawEmotion::Sadness => {
                self.curvature -= 14.0;
                self.brow_inner += 9.0;
            }
            RawEmotion::Surprise => {
                self.aperture += 5.0;
                self.brow_lift += 11.0;
                self.openness += 16.0;
                self.mouth_w -= 5.0;
            }
            RawEmotion::Fear => {
                self.brow_lift += 7.0;
                self.brow_inner += 4.0;
                self.aperture += 4.0;
                self.openness += 7.0;
                self.mouth_w += 7.0;
                self.curvature -= 5.0;
            }
            RawEmotion::Disgust => {
                self.nose_scrunch += 8.0;
                self.curvature -= 9.0;
                self.aperture -= 2.5;
                self.brow_lift -= 4.0;
                self.mouth_y -= 5.0;
            }
            RawEmotion::Anger => {
                self.brow_lift -= 7.0;
                self.brow_inner -= 8.0;
                self.aperture -= 3.0;
                self.curvature -= 6.0;
                self.lip_thickness -= 1.5;
                self.mouth_w += 3.0;
            }
        }
    }

    fn jitter(&mut self, rng: &mut ChaCha8Rng) {
        self.cx += rng.random_range(-5.0..5.0);
        self.cy += rng.random_range(-5.0..5.0);
        self.face_a += rng.random_range(-4.0..4.0);
        self.face_b += rng.random_range(-4.0..4.0);
        self.eye_dx += rng.random_range(-1.5..1.5);
        self.eye_y += rng.random_range(-2.0..2.0);
        self.eye_w += rng.random_range(-1.0..1.0);
        self.aperture = (self.aperture + rng.random_range(-0.8..0.8)).max(1.5);
        self.brow_lift += rng.random_range(-1.5..1.5);
        self.brow_inner += rng.random_range(-1.0..1.0);
        self.mouth_y += rng.random_range(-2.0..2.0);
        self.mouth_w = (self.mouth_w + rng.random_range(-2.0..2.0)).max(12.0);
        self.curvature += rng.random_range(-2.0..2.0);
        self.openness = (self.openness + rng.random_range(-1.0..1.0)).max(0.0);
        self.lip_thickness = (self.lip_thickness + rng.random_range(-0.6..0.6)).max(2.0);
    }

    /// The 68-point ground truth for this face.
    fn landmarks(&self) -> LandmarkSet {
        let mut pts = Vec::with_capacity(NUM_LANDMARKS);

        // Jaw 0-16: lower half of the face ellipse, left ear to right ear.
        for k in 0..17 {
            let phi = std::f64::consts::PI * (1.0 - k as f64 / 16.0);
            pts.push(Point::new(
                self.cx + self.face_a * phi.cos(),
                self.cy + self.face_b * phi.sin(),
            ));
        }

        // Brows 17-26; t runs 0 at the outer end, 1 at the inner end.
        let brow_y = self.cy - 46.0;
        let brow_at = |t: f64, inner_x: f64, outer_x: f64| -> Point {
            let x = outer_x + (inner_x - outer_x) * t;
            let y = brow_y
                - self.brow_lift
                - t * self.brow_inner
                - 3.0 * (std::f64::consts::PI * t).sin();
            Point::new(x, y)
        };
        for j in 0..5 {
            // 17 (outer) .. 21 (inner)
            pts.push(brow_at(
                j as f64 / 4.0,
                self.cx - self.eye_dx + 14.0,
                self.cx - self.eye_dx - 18.0,
            ));
        }
        for j in 0..5 {
            // 22 (inner) .. 26 (outer)
            pts.push(brow_at(
                1.0 - j as f64 / 4.0,
                self.cx + self.eye_dx - 14.0,
                self.cx + self.eye_dx + 18.0,
            ));
        }

        // Nose 27-35: bridge, then nostril row.
        for k in 0..4 {
            let base = self.cy - 20.0 + 9.0 * k as f64;
            pts.push(Point::new(
                self.cx,
                base - self.nose_scrunch * k as f64 / 3.0,
            ));
        }
        let nostril_y = self.cy + 14.0 - self.nose_scrunch;
        for (k, dx) in [-10.0, -5.0, 0.0, 5.0, 10.0].iter().enumerate() {
            let dip = if k == 2 { 2.0 } else { 0.0 };
            pts.push(Point::new(self.cx + dx, nostril_y + dip));
        }

        // Eyes 36-47: six-point contour, corners on the horizontal axis.
        let eye = |ex: f64| {
            let w = self.eye_w;
            let a = self.aperture;
            [
                Point::new(ex - w, self.eye_y),
                Point::new(ex - w / 3.0, self.eye_y - a),
                Point::new(ex + w / 3.0, self.eye_y - a),
                Point::new(ex + w, self.eye_y),
                Point::new(ex + w / 3.0, self.eye_y + a),
                Point::new(ex - w / 3.0, self.eye_y + a),
            ]
        };
        pts.extend(eye(self.cx - self.eye_dx));
        pts.extend(eye(self.cx + self.eye_dx));

        // Mouth 48-67. Outer lip curves share their corners; the corner lift
        // is `curvature` (positive = up = smaller y).
        let (my, mw, c, th, open) = (
            self.mouth_y,
            self.mouth_w,
            self.curvature,
            self.lip_thickness,
            self.openness,
        );
        let upper = |t: f64| my - c * t * t - th * (1.0 - t * t);
        let lower = |t: f64| my - c * t * t + (th + open) * (1.0 - t * t);
        let inner_upper = |t: f64| my - c * t * t - (open / 2.0) * (1.0 - t * t);
        let inner_lower = |t: f64| my - c * t * t + (open / 2.0) * (1.0 - t * t);

        pts.push(Point::new(self.cx - mw, my - c)); // 48
        for t in [-0.6, -0.3, 0.0, 0.3, 0.6] {
            pts.push(Point::new(self.cx + t * mw, upper(t))); // 49-53
        }
        pts.push(Point::new(self.cx + mw, my - c)); // 54
        for t in [0.6, 0.3, 0.0, -0.3, -0.6] {
            pts.push(Point::new(self.cx + t * mw, lower(t))); // 55-59
        }
        pts.push(Point::new(self.cx - 0.85 * mw, inner_upper(-0.85))); // 60
        for t in [-0.4, 0.0, 0.4] {
            pts.push(Point::new(self.cx + t * mw, inner_upper(t))); // 61-63
        }
        pts.push(Point::new(self.cx + 0.85 * mw, inner_lower(0.85))); // 64
        for t in [0.4, 0.0, -0.4] {
            pts.push(Point::new(self.cx + t * mw, inner_lower(t))); // 65-67
        }

        LandmarkSet::new(pts, Frame::Image).expect("68 generated points")
    }

    /// Rasterizes the face into a [0, 1] intensity canvas.
    fn render(&self, size: usize) -> Array2<f64> {
        let mut canvas = Array2::from_elem((size, size), 0.25);
        fill_ellipse(
            &mut canvas,
            self.cx,
            self.cy,
            self.face_a,
            self.face_b,
            0.82,
        );

        let lms = self.landmarks();
        let p = lms.points();

        // Brows: thick strokes through the five brow points.
        stroke_polyline(&mut canvas, &p[17..22], 2.4, 0.12);
        stroke_polyline(&mut canvas, &p[22..27], 2.4, 0.12);

        // Eyes: bright sclera lens, dark pupil.
        for ex in [self.cx - self.eye_dx, self.cx + self.eye_dx] {
            fill_ellipse(&mut canvas, ex, self.eye_y, self.eye_w, self.aperture, 0.95);
            let pupil = self.aperture.min(3.4);
            fill_ellipse(&mut canvas, ex, self.eye_y, pupil, pupil, 0.08);
        }

        // Nose: bridge and nostril row.
        stroke_polyline(&mut canvas, &p[27..31], 1.5, 0.55);
        stroke_polyline(&mut canvas, &p[31..36], 1.5, 0.45);

        // Mouth: fill between the outer lip curves, then the dark opening.
        let (my, mw, c, th, open) = (
            self.mouth_y,
            self.mouth_w,
            self.curvature,
            self.lip_thickness,
            self.openness,
        );
        let x0 = (self.cx - mw).floor() as i64;
        let x1 = (self.cx + mw).ceil() as i64;
        for xi in x0..=x1 {
            let t = (xi as f64 - self.cx) / mw;
            if t.abs() > 1.0 {
                continue;
            }
            let yu = my - c * t * t - th * (1.0 - t * t);
            let yl = my - c * t * t + (th + open) * (1.0 - t * t);
            fill_column(&mut canvas, xi, yu, yl, 0.45);
            if open > 0.5 {
                let iu = my - c * t * t - (open / 2.0) * (1.0 - t * t);
                let il = my - c * t * t + (open / 2.0) * (1.0 - t * t);
                fill_column(&mut canvas, xi, iu, il, 0.08);
            }
        }

        canvas
    }
}

fn fill_ellipse(canvas: &mut Array2<f64>, cx: f64, cy: f64, a: f64, b: f64, value: f64) {
    let (h, w) = canvas.dim();
    let y0 = (cy - b).floor().max(0.0) as usize;
    let y1 = (cy + b).ceil().min(h as f64 - 1.0) as usize;
    let x0 = (cx - a).floor().max(0.0) as usize;
    let x1 = (cx + a).ceil().min(w as f64 - 1.0) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = (x as f64 - cx) / a;
            let dy = (y as f64 - cy) / b;
            if dx * dx + dy * dy <= 1.0 {
                canvas[[y, x]] = value;
            }
        }
    }
}

fn fill_column(canvas: &mut Array2<f64>, x: i64, y0: f64, y1: f64, value: f64) {
    let (h, w) = canvas.dim();
    if x < 0 || x >= w as i64 {
        return;
    }
    let lo = y0.min(y1).floor().max(0.0) as usize;
    let hi = y0.max(y1).ceil().min(h as f64 - 1.0) as usize;
    for y in lo..=hi {
        canvas[[y, x as usize]] = value;
    }
}

fn stroke_polyline(canvas: &mut Array2<f64>, pts: &[Point], radius: f64, value: f64) {
    for pair in pts.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let len = a.distance(&b).max(1e-9);
        let steps = (len / 0.5).ceil() as usize;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = a.x + (b.x - a.x) * t;
            let y = a.y + (b.y - a.y) * t;
            fill_ellipse(canvas, x, y, radius, radius, value);
        }
    }
}

/// Raw label cycle used by the generator for each scheme. The three-class
/// cycle picks one representative per simplified class so the mapped corpus
/// stays uniform.
fn class_cycle(scheme: EmotionScheme) -> &'static [RawEmotion] {
    match scheme {
        EmotionScheme::Seven => &[
            RawEmotion::Neutral,
            RawEmotion::Happiness,
            RawEmotion::Sadness,
            RawEmotion::Surprise,
            RawEmotion::Fear,
            RawEmotion::Disgust,
            RawEmotion::Anger,
        ],
        EmotionScheme::Three => &[
            RawEmotion::Happiness,
            RawEmotion::Anger,
            RawEmotion::Neutral,
        ],
    }
}

/// Generates `n` parametric cartoon faces with exact 68-point ground truth
/// into `dir` (images under `images/`, manifest at `manifest.csv`).
///
/// Classes rotate round-robin so the distribution is uniform within one
/// sample; splits cycle 6:1:1 train/val/test. The whole corpus is a pure
/// function of `(n, seed, scheme)`.
pub fn generate_synthetic_corpus(
    n: usize,
    seed: u64,
    scheme: EmotionScheme,
    dir: &Path,
) -> Result<DatasetManifest> {
    if n < 8 {
        return Err(Error::Config(format!(
            "synthetic corpus needs at least 8 samples, got {n}"
        )));
    }
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir)?;

    let cycle = class_cycle(scheme);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    let mut splits = Vec::with_capacity(n);

    for i in 0..n {
        let emotion = cycle[i % cycle.len()];
        let mut params = FaceParams::base(112.0, 112.0);
        params.deform(emotion);
        params.jitter(&mut rng);

        let canvas = params.render(PREPROCESS_SIZE);
        let rel_path = PathBuf::from("images").join(format!("img_{i:05}.png"));
        let mut png = image::GrayImage::new(PREPROCESS_SIZE as u32, PREPROCESS_SIZE as u32);
        for (y, row) in canvas.rows().into_iter().enumerate() {
            for (x, &v) in row.iter().enumerate() {
                png.put_pixel(
                    x as u32,
                    y as u32,
                    image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8]),
                );
            }
        }
        png.save(dir.join(&rel_path))?;

        records.push(SampleRecord {
            path: rel_path,
            bbox: None,
            landmarks: params.landmarks(),
            label: emotion,
            dataset: "synthetic".to_string(),
        });
        splits.push(match i % 8 {
            6 => Split::Val,
            7 => Split::Test,
            _ => Split::Train,
        });
    }

    let manifest = DatasetManifest {
        root: dir.to_path_buf(),
        records,
        splits,
        stats: None,
    };
    manifest.save(&dir.join("manifest.csv"))?;
    Ok(manifest)
}
