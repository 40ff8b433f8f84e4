//! Image resampling and pyramid primitives, with the transposed (adjoint)
//! passes the loss gradients need. Everything here is linear in the pixel
//! values, so each adjoint is exact.

use crate::buffers::ImageBuffer;

/// Clamp a continuous sample position to valid pixel-index range and split
/// into (low index, high index, fraction).
#[inline]
fn bilinear_taps(pos: f64, len: usize) -> (usize, usize, f64) {
    let max = (len - 1) as f64;
    let p = pos.clamp(0.0, max);
    let lo = p.floor();
    let hi = (lo + 1.0).min(max);
    (lo as usize, hi as usize, p - lo)
}

/// Bilinear sample at continuous pixel-index coordinates (x, y), where the
/// value of pixel `i` sits at coordinate `i`.
pub fn sample_bilinear(src: &ImageBuffer, x: f64, y: f64) -> [f64; 3] {
    let (x0, x1, fx) = bilinear_taps(x, src.width);
    let (y0, y1, fy) = bilinear_taps(y, src.height);
    let p00 = src.pixel(x0, y0);
    let p10 = src.pixel(x1, y0);
    let p01 = src.pixel(x0, y1);
    let p11 = src.pixel(x1, y1);
    let mut out = [0.0; 3];
    for c in 0..3 {
        let top = p00[c] * (1.0 - fx) + p10[c] * fx;
        let bot = p01[c] * (1.0 - fx) + p11[c] * fx;
        out[c] = top * (1.0 - fy) + bot * fy;
    }
    out
}

/// Resample a continuous source window `[sx, sx + sw) x [sy, sy + sh)`
/// (units: source pixels) onto a `dst_w x dst_h` grid. The window equal to
/// the full image with matching output size is the identity.
pub fn crop_resize(
    src: &ImageBuffer,
    sx: f64,
    sy: f64,
    sw: f64,
    sh: f64,
    dst_w: usize,
    dst_h: usize,
) -> ImageBuffer {
    let mut dst = ImageBuffer::new(dst_w, dst_h);
    let step_x = sw / dst_w as f64;
    let step_y = sh / dst_h as f64;
    for j in 0..dst_h {
        let v = sy + (j as f64 + 0.5) * step_y - 0.5;
        for i in 0..dst_w {
            let u = sx + (i as f64 + 0.5) * step_x - 0.5;
            dst.set_pixel(i, j, sample_bilinear(src, u, v));
        }
    }
    dst
}

/// Whole-image bilinear resize.
pub fn resize_bilinear(src: &ImageBuffer, dst_w: usize, dst_h: usize) -> ImageBuffer {
    crop_resize(
        src,
        0.0,
        0.0,
        src.width as f64,
        src.height as f64,
        dst_w,
        dst_h,
    )
}

/// Adjoint of [`resize_bilinear`]: scatter a gradient on the resized image
/// back onto the source grid.
pub fn resize_bilinear_adjoint(
    grad_dst: &ImageBuffer,
    src_w: usize,
    src_h: usize,
) -> ImageBuffer {
    let mut grad_src = ImageBuffer::new(src_w, src_h);
    let step_x = src_w as f64 / grad_dst.width as f64;
    let step_y = src_h as f64 / grad_dst.height as f64;
    for j in 0..grad_dst.height {
        let v = (j as f64 + 0.5) * step_y - 0.5;
        let (y0, y1, fy) = bilinear_taps(v, src_h);
        for i in 0..grad_dst.width {
            let u = (i as f64 + 0.5) * step_x - 0.5;
            let (x0, x1, fx) = bilinear_taps(u, src_w);
            let g = grad_dst.pixel(i, j);
            for c in 0..3 {
                let idx = |x: usize, y: usize| (y * src_w + x) * 3 + c;
                grad_src.data[idx(x0, y0)] += g[c] * (1.0 - fx) * (1.0 - fy);
                grad_src.data[idx(x1, y0)] += g[c] * fx * (1.0 - fy);
                grad_src.data[idx(x0, y1)] += g[c] * (1.0 - fx) * fy;
                grad_src.data[idx(x1, y1)] += g[c] * fx * fy;
            }
        }
    }
    grad_src
}

const BLUR_TAPS: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

#[inline]
fn clamp_index(i: i64, len: usize) -> usize {
    i.clamp(0, len as i64 - 1) as usize
}

/// Separable 5-tap binomial blur with clamp-to-edge padding.
pub fn blur5(src: &ImageBuffer) -> ImageBuffer {
    let (w, h) = (src.width, src.height);
    let mut tmp = ImageBuffer::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (k, tap) in BLUR_TAPS.iter().enumerate() {
                let sx = clamp_index(x as i64 + k as i64 - 2, w);
                let p = src.pixel(sx, y);
                for c in 0..3 {
                    acc[c] += tap * p[c];
                }
            }
            tmp.set_pixel(x, y, acc);
        }
    }
    let mut out = ImageBuffer::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (k, tap) in BLUR_TAPS.iter().enumerate() {
                let sy = clamp_index(y as i64 + k as i64 - 2, h);
                let p = tmp.pixel(x, sy);
                for c in 0..3 {
                    acc[c] += tap * p[c];
                }
            }
            out.set_pixel(x, y, acc);
        }
    }
    out
}

/// Adjoint of [`blur5`].
pub fn blur5_adjoint(grad_out: &ImageBuffer) -> ImageBuffer {
    let (w, h) = (grad_out.width, grad_out.height);
    // Adjoint of the vertical pass, then of the horizontal pass.
    let mut tmp = ImageBuffer::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let g = grad_out.pixel(x, y);
            for (k, tap) in BLUR_TAPS.iter().enumerate() {
                let sy = clamp_index(y as i64 + k as i64 - 2, h);
                let i = (sy * w + x) * 3;
                for c in 0..3 {
                    tmp.data[i + c] += tap * g[c];
                }
            }
        }
    }
    let mut grad_src = ImageBuffer::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let g = tmp.pixel(x, y);
            for (k, tap) in BLUR_TAPS.iter().enumerate() {
                let sx = clamp_index(x as i64 + k as i64 - 2, w);
                let i = (y * w + sx) * 3;
                for c in 0..3 {
                    grad_src.data[i + c] += tap * g[c];
                }
            }
        }
    }
    grad_src
}

/// Keep the even rows/columns.
pub fn decimate2(src: &ImageBuffer) -> ImageBuffer {
    let w = src.width.div_ceil(2);
    let h = src.height.div_ceil(2);
    let mut out = ImageBuffer::new(w, h);
    for y in 0..h {
        for x in 0..w {
            out.set_pixel(x, y, src.pixel(x * 2, y * 2));
        }
    }
    out
}

/// Adjoint of [`decimate2`].
pub fn decimate2_adjoint(grad_out: &ImageBuffer, src_w: usize, src_h: usize) -> ImageBuffer {
    let mut grad_src = ImageBuffer::new(src_w, src_h);
    for y in 0..grad_out.height {
        for x in 0..grad_out.width {
            grad_src.set_pixel(x * 2, y * 2, grad_out.pixel(x, y));
        }
    }
    grad_src
}

/// One Gaussian-pyramid reduction: blur, then keep every other sample.
pub fn pyramid_down(src: &ImageBuffer) -> ImageBuffer {
    decimate2(&blur5(src))
}

pub fn pyramid_down_adjoint(grad_out: &ImageBuffer, src_w: usize, src_h: usize) -> ImageBuffer {
    blur5_adjoint(&decimate2_adjoint(grad_out, src_w, src_h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, rng: &mut ChaCha8Rng) -> ImageBuffer {
        let mut img = ImageBuffer::new(w, h);
        for v in img.data.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        img
    }

    #[test]
    fn full_window_resize_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = random_image(9, 5, &mut rng);
        let out = crop_resize(&img, 0.0, 0.0, 9.0, 5.0, 9, 5);
        assert_eq!(out, img);
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = ImageBuffer::filled(8, 6, [0.25, 0.5, 0.75]);
        let out = blur5(&img);
        for (a, b) in out.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// <Ax, y> == <x, Aᵀy> for each linear op, on random vectors.
    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_image(10, 7, &mut rng);

        let ax = blur5(&x);
        let y = random_image(10, 7, &mut rng);
        let aty = blur5_adjoint(&y);
        let lhs: f64 = ax.data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&aty.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "blur adjoint: {lhs} vs {rhs}");

        let dx = pyramid_down(&x);
        let y2 = random_image(dx.width, dx.height, &mut rng);
        let aty2 = pyramid_down_adjoint(&y2, 10, 7);
        let lhs2: f64 = dx.data.iter().zip(&y2.data).map(|(a, b)| a * b).sum();
        let rhs2: f64 = x.data.iter().zip(&aty2.data).map(|(a, b)| a * b).sum();
        assert!((lhs2 - rhs2).abs() < 1e-10);

        let rx = resize_bilinear(&x, 4, 3);
        let y3 = random_image(4, 3, &mut rng);
        let aty3 = resize_bilinear_adjoint(&y3, 10, 7);
        let lhs3: f64 = rx.data.iter().zip(&y3.data).map(|(a, b)| a * b).sum();
        let rhs3: f64 = x.data.iter().zip(&aty3.data).map(|(a, b)| a * b).sum();
        assert!((lhs3 - rhs3).abs() < 1e-10);
    }
}
