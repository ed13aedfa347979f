//! Bilinear sampling and resizing shared by warping, the connection layer and
//! localization-map handling. Resizing uses the half-pixel convention, so a
//! same-size resize is the identity.

use ndarray::Array2;

/// Bilinear sample at a fractional position; samples outside the array are 0.
pub(crate) fn bilinear_sample(arr: &Array2<f64>, x: f64, y: f64) -> f64 {
    let (h, w) = arr.dim();
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let x0 = x0 as i64;
    let y0 = y0 as i64;

    let at = |xi: i64, yi: i64| -> f64 {
        if xi >= 0 && xi < w as i64 && yi >= 0 && yi < h as i64 {
            arr[[yi as usize, xi as usize]]
        } else {
            0.0
        }
    };

    at(x0, y0) * (1.0 - fx) * (1.0 - fy)
        + at(x0 + 1, y0) * fx * (1.0 - fy)
        + at(x0, y0 + 1) * (1.0 - fx) * fy
        + at(x0 + 1, y0 + 1) * fx * fy
}

/// Source coordinate for an output pixel under half-pixel resizing, clamped
/// into the source extent.
fn src_coord(dst: usize, scale: f64, src_len: usize) -> (usize, usize, f64) {
    let s = (dst as f64 + 0.5) * scale - 0.5;
    let s = s.clamp(0.0, (src_len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - i0 as f64)
}

/// Bilinear resize to (out_h, out_w).
pub(crate) fn bilinear_resize(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    Array2::from_shape_fn((out_h, out_w), |(oy, ox)| {
        let (y0, y1, fy) = src_coord(oy, sy, h);
        let (x0, x1, fx) = src_coord(ox, sx, w);
        src[[y0, x0]] * (1.0 - fx) * (1.0 - fy)
            + src[[y0, x1]] * fx * (1.0 - fy)
            + src[[y1, x0]] * (1.0 - fx) * fy
            + src[[y1, x1]] * fx * fy
    })
}

/// Adjoint of `bilinear_resize`: scatters an output-sized gradient back onto a
/// source-sized grid with the same interpolation weights.
pub(crate) fn bilinear_resize_backward(
    grad_out: &Array2<f64>,
    in_h: usize,
    in_w: usize,
) -> Array2<f64> {
    let (out_h, out_w) = grad_out.dim();
    if (in_h, in_w) == (out_h, out_w) {
        return grad_out.clone();
    }
    let sy = in_h as f64 / out_h as f64;
    let sx = in_w as f64 / out_w as f64;
    let mut grad_in = Array2::zeros((in_h, in_w));
    for oy in 0..out_h {
        let (y0, y1, fy) = src_coord(oy, sy, in_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = src_coord(ox, sx, in_w);
            let g = grad_out[[oy, ox]];
            grad_in[[y0, x0]] += g * (1.0 - fx) * (1.0 - fy);
            grad_in[[y0, x1]] += g * fx * (1.0 - fy);
            grad_in[[y1, x0]] += g * (1.0 - fx) * fy;
            grad_in[[y1, x1]] += g * fx * fy;
        }
    }
    grad_in
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn same_size_resize_is_identity() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(bilinear_resize(&a, 2, 2), a);
    }

    #[test]
    fn constant_map_upsamples_to_constant() {
        let a = Array2::from_elem((7, 7), 3.5);
        let up = bilinear_resize(&a, 29, 29);
        assert!(up.iter().all(|&v| (v - 3.5).abs() < 1e-12));
    }

    #[test]
    fn sample_outside_is_zero() {
        let a = array![[1.0, 1.0], [1.0, 1.0]];
        assert_eq!(bilinear_sample(&a, -2.0, 0.0), 0.0);
        assert_eq!(bilinear_sample(&a, 0.5, 0.5), 1.0);
    }

    #[test]
    fn resize_backward_is_the_adjoint() {
        // <R x, y> == <x, R^T y> for random x, y.
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let x = Array2::from_shape_fn((5, 4), |_| rng.random::<f64>() - 0.5);
        let y = Array2::from_shape_fn((13, 11), |_| rng.random::<f64>() - 0.5);
        let rx = bilinear_resize(&x, 13, 11);
        let rty = bilinear_resize_backward(&y, 5, 4);
        let lhs: f64 = (&rx * &y).sum();
        let rhs: f64 = (&x * &rty).sum();
        assert!((lhs - rhs).abs() < 1e-10, "lhs={lhs} rhs={rhs}");
    }
}
