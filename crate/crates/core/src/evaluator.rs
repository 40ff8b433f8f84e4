//! Image-quality metrics under the subject-bounding-box protocol: PSNR,
//! single-scale SSIM, and a pluggable perceptual distance, tabulated per
//! frame with aggregate means.

use crate::buffers::{ImageBuffer, PixelRect, SilhouetteMask};
use crate::error::{Error, Result};
use crate::losses::PerceptualMetric;
use std::io::Write;
use std::path::Path;

/// PSNR is capped here when the images are identical.
pub const PSNR_CAP: f64 = 99.0;

fn crop(img: &ImageBuffer, bbox: &PixelRect) -> Result<ImageBuffer> {
    let b = bbox.clamped(img.width, img.height);
    if b.width() <= 0 || b.height() <= 0 {
        return Err(Error::InvalidInput("empty bbox".into()));
    }
    let (w, h) = (b.width() as usize, b.height() as usize);
    let mut out = ImageBuffer::new(w, h);
    for y in 0..h {
        for x in 0..w {
            out.set_pixel(x, y, img.pixel(b.x0 as usize + x, b.y0 as usize + y));
        }
    }
    Ok(out)
}

/// Peak signal-to-noise ratio in dB over the bbox, on `[0, 1]` pixels.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer, bbox: &PixelRect) -> Result<f64> {
    a.same_resolution(b)?;
    let ca = crop(a, bbox)?;
    let cb = crop(b, bbox)?;
    let mse = ca.mse(&cb)?;
    if mse == 0.0 {
        Ok(PSNR_CAP)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Separable valid-mode Gaussian filter of one channel plane.
fn filter_valid(plane: &[f64], w: usize, h: usize) -> (Vec<f64>, usize, usize) {
    let win = gaussian_window();
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut horizontal = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                acc += wk * plane[y * w + x + k];
            }
            horizontal[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                acc += wk * horizontal[(y + k) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    (out, ow, oh)
}

/// Single-scale SSIM over the bbox: 11x11 Gaussian window (sigma 1.5),
/// stabilizers `C1 = 0.01^2`, `C2 = 0.03^2`, channel-averaged.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer, bbox: &PixelRect) -> Result<f64> {
    a.same_resolution(b)?;
    let ca = crop(a, bbox)?;
    let cb = crop(b, bbox)?;
    if ca.width < SSIM_WINDOW || ca.height < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "bbox {}x{} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window",
            ca.width, ca.height
        )));
    }
    let (w, h) = (ca.width, ca.height);
    let mut total = 0.0;
    for ch in 0..3 {
        let plane = |img: &ImageBuffer| -> Vec<f64> {
            img.data.iter().skip(ch).step_by(3).copied().collect()
        };
        let pa = plane(&ca);
        let pb = plane(&cb);
        let paa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let pbb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let pab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();

        let (mu_a, ow, oh) = filter_valid(&pa, w, h);
        let (mu_b, _, _) = filter_valid(&pb, w, h);
        let (e_aa, _, _) = filter_valid(&paa, w, h);
        let (e_bb, _, _) = filter_valid(&pbb, w, h);
        let (e_ab, _, _) = filter_valid(&pab, w, h);

        let mut acc = 0.0;
        for i in 0..ow * oh {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
            acc += num / den;
        }
        total += acc / (ow * oh) as f64;
    }
    Ok(total / 3.0)
}

/// Perceptual distance over the bbox through the configured metric handle.
pub fn perceptual(
    a: &ImageBuffer,
    b: &ImageBuffer,
    bbox: &PixelRect,
    metric: &PerceptualMetric,
) -> Result<f64> {
    a.same_resolution(b)?;
    metric.value(&crop(a, bbox)?, &crop(b, bbox)?)
}

/// Tight bbox of the mask dilated by `margin`, clamped to the image.
pub fn subject_bbox(mask: &SilhouetteMask, margin: i64) -> Result<PixelRect> {
    let mut bbox: Option<PixelRect> = None;
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) {
                match &mut bbox {
                    Some(b) => b.include(x as i64, y as i64),
                    None => bbox = Some(PixelRect::single(x as i64, y as i64)),
                }
            }
        }
    }
    let bbox = bbox.ok_or_else(|| Error::InvalidInput("empty mask".into()))?;
    Ok(bbox.dilated(margin).clamped(mask.width, mask.height))
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub bbox: PixelRect,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricReport {
    pub frames: Vec<FrameMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_perceptual: f64,
    /// Which perceptual backend produced the numbers.
    pub perceptual_metric: String,
}

/// Evaluate matched frame triples (rendered, ground truth, subject mask).
pub fn evaluate_frames(
    rendered: &[ImageBuffer],
    truth: &[ImageBuffer],
    masks: &[SilhouetteMask],
    margin: i64,
    metric: &PerceptualMetric,
) -> Result<MetricReport> {
    if rendered.len() != truth.len() || rendered.len() != masks.len() {
        return Err(Error::InvalidInput(format!(
            "frame count mismatch: {} rendered, {} ground truth, {} masks",
            rendered.len(),
            truth.len(),
            masks.len()
        )));
    }
    if rendered.is_empty() {
        return Err(Error::InvalidInput("no frames to evaluate".into()));
    }
    let mut frames = Vec::with_capacity(rendered.len());
    let (mut sp, mut ss, mut sl) = (0.0, 0.0, 0.0);
    for (i, ((r, t), m)) in rendered.iter().zip(truth).zip(masks).enumerate() {
        let bbox = subject_bbox(m, margin)?;
        let p = psnr(r, t, &bbox)?;
        let s = ssim(r, t, &bbox)?;
        let l = perceptual(r, t, &bbox, metric)?;
        sp += p;
        ss += s;
        sl += l;
        frames.push(FrameMetrics {
            frame: i,
            psnr: p,
            ssim: s,
            perceptual: l,
            bbox,
        });
    }
    let n = frames.len() as f64;
    Ok(MetricReport {
        frames,
        mean_psnr: sp / n,
        mean_ssim: ss / n,
        mean_perceptual: sl / n,
        perceptual_metric: metric.name().to_string(),
    })
}

impl MetricReport {
    /// Delimited text table, one row per frame plus the aggregate.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(f, "frame,psnr,ssim,perceptual,bbox_x0,bbox_y0,bbox_x1,bbox_y1")
            .map_err(|e| Error::io(path, e))?;
        for fr in &self.frames {
            writeln!(
                f,
                "{},{:?},{:?},{:?},{},{},{},{}",
                fr.frame,
                fr.psnr,
                fr.ssim,
                fr.perceptual,
                fr.bbox.x0,
                fr.bbox.y0,
                fr.bbox.x1,
                fr.bbox.y1
            )
            .map_err(|e| Error::io(path, e))?;
        }
        writeln!(
            f,
            "mean,{:?},{:?},{:?},,,,",
            self.mean_psnr, self.mean_ssim, self.mean_perceptual
        )
        .map_err(|e| Error::io(path, e))
    }

    /// Machine-readable summary.
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidInput(format!("report serialization: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = ImageBuffer::new(w, h);
        for v in img.data.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        img
    }

    #[test]
    fn psnr_identities() {
        let img = random_image(16, 16, 1);
        let bbox = PixelRect::full(16, 16);
        assert_eq!(psnr(&img, &img.clone(), &bbox).unwrap(), PSNR_CAP);

        // Uniform squared error of 0.01 -> exactly 20 dB.
        let a = ImageBuffer::filled(8, 8, [0.5, 0.5, 0.5]);
        let b = ImageBuffer::filled(8, 8, [0.6, 0.6, 0.6]);
        let p = psnr(&a, &b, &PixelRect::full(8, 8)).unwrap();
        assert!((p - 20.0).abs() < 1e-9, "{p}");
    }

    #[test]
    fn ssim_identities() {
        let img = random_image(24, 24, 2);
        let bbox = PixelRect::full(24, 24);
        let s = ssim(&img, &img.clone(), &bbox).unwrap();
        assert!((s - 1.0).abs() < 1e-12);

        // Negative image: structure inverts, SSIM drops below 1.
        let mut neg = img.clone();
        for v in neg.data.iter_mut() {
            *v = 1.0 - *v;
        }
        assert!(ssim(&img, &neg, &bbox).unwrap() < 1.0);

        // Constant vs constant: stabilizers keep it at exactly 1.
        let c = ImageBuffer::filled(16, 16, [0.5, 0.5, 0.5]);
        let s = ssim(&c, &c.clone(), &PixelRect::full(16, 16)).unwrap();
        assert!((s - 1.0).abs() < 1e-12);

        // Window larger than bbox is an error.
        let err = ssim(&img, &img.clone(), &PixelRect::single(3, 3)).unwrap_err();
        assert!(err.to_string().contains("11x11"));
    }

    #[test]
    fn perceptual_identity_and_name() {
        let img = random_image(16, 16, 3);
        let bbox = PixelRect::full(16, 16);
        let metric = PerceptualMetric::builtin();
        assert_eq!(perceptual(&img, &img.clone(), &bbox, &metric).unwrap(), 0.0);
        assert_eq!(metric.name(), "builtin-pyramid");
    }

    /// All three metrics ignore content outside the bbox.
    #[test]
    fn metrics_invariant_outside_bbox() {
        let a = random_image(32, 32, 4);
        let b = random_image(32, 32, 5);
        let bbox = PixelRect {
            x0: 8,
            y0: 8,
            x1: 23,
            y1: 23,
        };
        let metric = PerceptualMetric::builtin();
        let (p0, s0, l0) = (
            psnr(&a, &b, &bbox).unwrap(),
            ssim(&a, &b, &bbox).unwrap(),
            perceptual(&a, &b, &bbox, &metric).unwrap(),
        );
        let mut a2 = a.clone();
        for y in 0..32 {
            for x in 0..32 {
                let inside = (8..=23).contains(&(x as i64)) && (8..=23).contains(&(y as i64));
                if !inside {
                    a2.set_pixel(x, y, [0.123, 0.9, 0.001]);
                }
            }
        }
        assert_eq!(psnr(&a2, &b, &bbox).unwrap(), p0);
        assert_eq!(ssim(&a2, &b, &bbox).unwrap(), s0);
        assert_eq!(perceptual(&a2, &b, &bbox, &metric).unwrap(), l0);
    }

    #[test]
    fn subject_bbox_margins() {
        let mut mask = SilhouetteMask::new(16, 16);
        mask.set(5, 7, true);
        assert_eq!(
            subject_bbox(&mask, 0).unwrap(),
            PixelRect {
                x0: 5,
                y0: 7,
                x1: 5,
                y1: 7
            }
        );
        assert_eq!(
            subject_bbox(&mask, 2).unwrap(),
            PixelRect {
                x0: 3,
                y0: 5,
                x1: 7,
                y1: 9
            }
        );
        // Clamped at the border.
        let mut corner = SilhouetteMask::new(16, 16);
        corner.set(0, 0, true);
        assert_eq!(
            subject_bbox(&corner, 3).unwrap(),
            PixelRect {
                x0: 0,
                y0: 0,
                x1: 3,
                y1: 3
            }
        );
        assert!(subject_bbox(&SilhouetteMask::new(4, 4), 1).is_err());
    }

    #[test]
    fn report_aggregate_is_mean_of_rows() {
        let frames: Vec<ImageBuffer> = (0..3).map(|i| random_image(24, 24, 10 + i)).collect();
        let truth: Vec<ImageBuffer> = (0..3).map(|i| random_image(24, 24, 20 + i)).collect();
        let masks: Vec<SilhouetteMask> = (0..3)
            .map(|_| {
                let mut m = SilhouetteMask::new(24, 24);
                for y in 2..22 {
                    for x in 2..22 {
                        m.set(x, y, true);
                    }
                }
                m
            })
            .collect();
        let report =
            evaluate_frames(&frames, &truth, &masks, 1, &PerceptualMetric::builtin()).unwrap();
        let mean: f64 = report.frames.iter().map(|f| f.psnr).sum::<f64>() / 3.0;
        assert!((report.mean_psnr - mean).abs() < 1e-12);
        assert_eq!(report.perceptual_metric, "builtin-pyramid");

        // Count mismatch is an error.
        assert!(evaluate_frames(
            &frames,
            &truth[..2],
            &masks,
            1,
            &PerceptualMetric::builtin()
        )
        .is_err());
    }
}
