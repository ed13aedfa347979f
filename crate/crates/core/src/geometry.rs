//! Similarity transforms, canonical-shape estimation, landmark heatmaps,
//! image warping and the inter-pupil normalization scalar.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::interp::bilinear_sample;
use crate::types::{Frame, GrayImage, LandmarkSet, Point, LEFT_EYE, NUM_LANDMARKS, RIGHT_EYE};

/// 4-DOF similarity transform p -> scale * R(rotation) * p + translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    /// Radians, counter-clockwise in (x right, y down) coordinates.
    pub rotation: f64,
    pub translation: (f64, f64),
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: 0.0,
            translation: (0.0, 0.0),
        }
    }

    pub fn new(scale: f64, rotation: f64, translation: (f64, f64)) -> Self {
        Self {
            scale,
            rotation,
            translation,
        }
    }

    /// Least-squares similarity transform mapping `src` onto `dst`,
    /// minimizing the summed squared point distances. Solved through the
    /// normal equations of the linear parametrization (a, b, tx, ty) with
    /// a = s cos r, b = s sin r.
    pub fn estimate(src: &LandmarkSet, dst: &LandmarkSet) -> Result<Self> {
        // Degenerate source: all points coincident leaves scale/rotation
        // unconstrained.
        let c = src.centroid(0..NUM_LANDMARKS);
        let spread: f64 = src
            .points()
            .iter()
            .map(|p| (p.x - c.x).powi(2) + (p.y - c.y).powi(2))
            .sum();
        if spread < 1e-12 {
            return Err(Error::Geometry(
                "cannot estimate transform from coincident source points".into(),
            ));
        }

        // Normal equations A^T A x = A^T b over rows
        //   [sx, -sy, 1, 0] . x = dx
        //   [sy,  sx, 0, 1] . x = dy
        let mut ata = [[0.0f64; 4]; 4];
        let mut atb = [0.0f64; 4];
        for (s, d) in src.points().iter().zip(dst.points()) {
            let r1 = [s.x, -s.y, 1.0, 0.0];
            let r2 = [s.y, s.x, 0.0, 1.0];
            for j in 0..4 {
                for k in 0..4 {
                    ata[j][k] += r1[j] * r1[k] + r2[j] * r2[k];
                }
                atb[j] += r1[j] * d.x + r2[j] * d.y;
            }
        }
        let x = solve_4x4(ata, atb)
            .ok_or_else(|| Error::Geometry("singular system in transform estimation".into()))?;
        let (a, b, tx, ty) = (x[0], x[1], x[2], x[3]);
        let scale = a.hypot(b);
        if scale < 1e-12 {
            return Err(Error::Geometry(
                "estimated transform collapses to zero scale".into(),
            ));
        }
        Ok(Self {
            scale,
            rotation: b.atan2(a),
            translation: (tx, ty),
        })
    }

    pub fn apply_point(&self, p: Point) -> Point {
        let (sin, cos) = self.rotation.sin_cos();
        Point::new(
            self.scale * (cos * p.x - sin * p.y) + self.translation.0,
            self.scale * (sin * p.x + cos * p.y) + self.translation.1,
        )
    }

    /// Maps every landmark through the transform. The frame tag is preserved;
    /// callers re-tag when moving between frames.
    pub fn apply(&self, s: &LandmarkSet) -> LandmarkSet {
        let pts = s.points().iter().map(|&p| self.apply_point(p)).collect();
        LandmarkSet::new(pts, s.frame()).expect("transform of a valid set stays valid")
    }

    /// Closed-form inverse; fails on non-positive scale.
    pub fn inverse(&self) -> Result<Self> {
        if self.scale <= 0.0 {
            return Err(Error::Geometry(format!(
                "transform with scale {} is not invertible",
                self.scale
            )));
        }
        let inv_scale = 1.0 / self.scale;
        let (sin, cos) = (-self.rotation).sin_cos();
        let (tx, ty) = self.translation;
        Ok(Self {
            scale: inv_scale,
            rotation: -self.rotation,
            translation: (
                -inv_scale * (cos * tx - sin * ty),
                -inv_scale * (sin * tx + cos * ty),
            ),
        })
    }

    /// Composition: applies `inner` first, then `self`.
    pub fn compose(&self, inner: &Self) -> Self {
        let t = self.apply_point(Point::new(inner.translation.0, inner.translation.1));
        Self {
            scale: self.scale * inner.scale,
            rotation: self.rotation + inner.rotation,
            translation: (t.x, t.y),
        }
    }
}

#[allow(clippy::needless_range_loop)]
fn solve_4x4(a: [[f64; 4]; 4], b: [f64; 4]) -> Option<[f64; 4]> {
    let mut m = [[0.0f64; 5]; 4];
    for i in 0..4 {
        m[i][..4].copy_from_slice(&a[i]);
        m[i][4] = b[i];
    }
    for col in 0..4 {
        let mut pivot = col;
        for row in col + 1..4 {
            if m[row][col].abs() > m[pivot][col].abs() {
                pivot = row;
            }
        }
        m.swap(col, pivot);
        if m[col][col].abs() < 1e-12 {
            return None;
        }
        for row in col + 1..4 {
            let f = m[row][col] / m[col][col];
            for j in col..5 {
                m[row][j] -= f * m[col][j];
            }
        }
    }
    let mut x = [0.0f64; 4];
    for i in (0..4).rev() {
        x[i] = m[i][4];
        for j in i + 1..4 {
            x[i] -= m[i][j] * x[j];
        }
        x[i] /= m[i][i];
    }
    Some(x)
}

/// Warps `img` with `t`, producing an output of the same dimensions. Output
/// pixels are pulled from `t^-1` of their position with bilinear
/// interpolation; samples outside the input are 0.
pub fn warp_image(img: &GrayImage, t: &SimilarityTransform) -> Result<GrayImage> {
    warp_image_to(img, t, img.height(), img.width())
}

/// Same as [`warp_image`] with an explicit output size, used when the network
/// frame is smaller than the source image.
pub fn warp_image_to(
    img: &GrayImage,
    t: &SimilarityTransform,
    out_h: usize,
    out_w: usize,
) -> Result<GrayImage> {
    let inv = t.inverse()?;
    let src = img.pixels();
    let out = Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let p = inv.apply_point(Point::new(x as f64, y as f64));
        bilinear_sample(src, p.x, p.y)
    });
    GrayImage::new(out)
}

/// Image encoding the current landmark estimate: peaks of 1 at landmark
/// positions, decaying as 1/(1+d) with the distance to the nearest landmark,
/// cut off beyond [`HEATMAP_RADIUS`] pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    values: Array2<f64>,
}

/// Cutoff radius of the landmark heatmap, in pixels.
pub const HEATMAP_RADIUS: f64 = 16.0;

impl Heatmap {
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn size(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// Renders the landmark heatmap at `size`x`size` resolution. Pixel (x, y)
/// holds 1/(1 + min_i ||(x, y) - s_i||) when the nearest landmark is within
/// the cutoff radius and 0 elsewhere.
pub fn generate_landmark_heatmap(s: &LandmarkSet, size: usize) -> Heatmap {
    let pts = s.points();
    let cutoff_sq = HEATMAP_RADIUS * HEATMAP_RADIUS;
    let values = Array2::from_shape_fn((size, size), |(y, x)| {
        let (fx, fy) = (x as f64, y as f64);
        let mut best = f64::INFINITY;
        for p in pts {
            let d2 = (fx - p.x).powi(2) + (fy - p.y).powi(2);
            if d2 < best {
                best = d2;
            }
        }
        if best <= cutoff_sq {
            1.0 / (1.0 + best.sqrt())
        } else {
            0.0
        }
    });
    Heatmap { values }
}

/// Distance between the eye centers of a ground-truth shape, each taken as
/// the centroid of that eye's six contour landmarks. The 68-point convention
/// has no explicit pupil points, so the centroids act as pupil proxies.
pub fn interpupil_distance(gt: &LandmarkSet) -> Result<f64> {
    let left = gt.centroid(LEFT_EYE);
    let right = gt.centroid(RIGHT_EYE);
    let d = left.distance(&right);
    if d < 1e-12 {
        return Err(Error::Geometry(
            "coincident eye centers: inter-pupil normalization undefined".into(),
        ));
    }
    Ok(d)
}

/// Mean training shape fixed in the canonical frame. Computed once per
/// training run and frozen afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalShape {
    landmarks: LandmarkSet,
}

/// Fraction of the canonical canvas left as margin on each side when the mean
/// shape is fitted into it.
const CANONICAL_MARGIN: f64 = 0.15;

impl CanonicalShape {
    /// Aligns every ground-truth shape to the first one, averages the aligned
    /// shapes and fits the mean into a `size`x`size` canvas, centered with a
    /// fixed margin.
    pub fn from_training_shapes(shapes: &[LandmarkSet], size: usize) -> Result<Self> {
        if shapes.is_empty() {
            return Err(Error::Config(
                "cannot compute canonical shape from an empty training set".into(),
            ));
        }
        let reference = &shapes[0];
        let mut acc = vec![Point::new(0.0, 0.0); NUM_LANDMARKS];
        for shape in shapes {
            let t = SimilarityTransform::estimate(shape, reference)?;
            for (a, p) in acc.iter_mut().zip(t.apply(shape).points()) {
                a.x += p.x;
                a.y += p.y;
            }
        }
        let n = shapes.len() as f64;
        let mean: Vec<Point> = acc
            .into_iter()
            .map(|p| Point::new(p.x / n, p.y / n))
            .collect();

        // Fit into the canvas: uniform scale, centered bounding box.
        let (min_x, max_x) = mean
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p.x), hi.max(p.x))
            });
        let (min_y, max_y) = mean
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p.y), hi.max(p.y))
            });
        let bw = max_x - min_x;
        let bh = max_y - min_y;
        if bw < 1e-9 || bh < 1e-9 {
            return Err(Error::Geometry("degenerate mean shape".into()));
        }
        let target = size as f64 * (1.0 - 2.0 * CANONICAL_MARGIN);
        let s = (target / bw).min(target / bh);
        let (cx, cy) = ((min_x + max_x) / 2.0, (min_y + max_y) / 2.0);
        let half = size as f64 / 2.0;
        let pts = mean
            .into_iter()
            .map(|p| Point::new((p.x - cx) * s + half, (p.y - cy) * s + half))
            .collect();
        Ok(Self {
            landmarks: LandmarkSet::new(pts, Frame::Canonical)?,
        })
    }

    pub fn from_landmarks(landmarks: LandmarkSet) -> Self {
        Self {
            landmarks: landmarks.with_frame(Frame::Canonical),
        }
    }

    pub fn landmarks(&self) -> &LandmarkSet {
        &self.landmarks
    }
}
