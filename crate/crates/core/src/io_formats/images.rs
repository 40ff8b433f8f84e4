//! PNG input/output plus a raw f64 container for lossless round-trips.
//!
//! PNG values normalize to linear `[0, 1]` (8-bit: v/255, 16-bit: v/65535);
//! masks binarize at 0.5. Output frames are 16-bit PNGs. The `.avimg` raw
//! container (magic, dims, little-endian f64 data) reproduces buffers
//! exactly.

use crate::buffers::{ImageBuffer, SilhouetteMask};
use crate::error::{Error, Result};
use image::DynamicImage;
use std::path::{Path, PathBuf};

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::parse(path, other.to_string()),
    })
}

fn to_buffer(img: &DynamicImage) -> ImageBuffer {
    // 16-bit sources keep their precision; everything else goes through 8-bit.
    match img {
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => {
            let rgb = img.to_rgb16();
            let mut out = ImageBuffer::new(rgb.width() as usize, rgb.height() as usize);
            for (i, px) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    out.data[i * 3 + c] = px.0[c] as f64 / 65535.0;
                }
            }
            out
        }
        _ => {
            let rgb = img.to_rgb8();
            let mut out = ImageBuffer::new(rgb.width() as usize, rgb.height() as usize);
            for (i, px) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    out.data[i * 3 + c] = px.0[c] as f64 / 255.0;
                }
            }
            out
        }
    }
}

pub fn load_image(path: &Path) -> Result<ImageBuffer> {
    Ok(to_buffer(&open(path)?))
}

/// Grayscale mask binarized at 0.5.
pub fn load_mask(path: &Path) -> Result<SilhouetteMask> {
    let img = open(path)?;
    let buf = to_buffer(&img);
    let data = buf
        .data
        .chunks_exact(3)
        .map(|px| (px[0] + px[1] + px[2]) / 3.0 >= 0.5)
        .collect();
    Ok(SilhouetteMask {
        width: buf.width,
        height: buf.height,
        data,
    })
}

/// Image plus its silhouette mask; both must share one resolution.
pub fn load_image_with_mask(
    image_path: &Path,
    mask_path: &Path,
) -> Result<(ImageBuffer, SilhouetteMask)> {
    let image = load_image(image_path)?;
    let mask = load_mask(mask_path)?;
    if image.width != mask.width || image.height != mask.height {
        return Err(Error::ResolutionMismatch {
            left_width: image.width,
            left_height: image.height,
            right_width: mask.width,
            right_height: mask.height,
        });
    }
    Ok((image, mask))
}

fn quantize16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_image_png16(img: &ImageBuffer, path: &Path) -> Result<()> {
    let mut out = image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::new(
        img.width as u32,
        img.height as u32,
    );
    for (i, px) in out.pixels_mut().enumerate() {
        for c in 0..3 {
            px.0[c] = quantize16(img.data[i * 3 + c]);
        }
    }
    out.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::parse(path, other.to_string()),
    })
}

pub fn save_image_png8(img: &ImageBuffer, path: &Path) -> Result<()> {
    let mut out =
        image::ImageBuffer::<image::Rgb<u8>, Vec<u8>>::new(img.width as u32, img.height as u32);
    for (i, px) in out.pixels_mut().enumerate() {
        for c in 0..3 {
            px.0[c] = quantize8(img.data[i * 3 + c]);
        }
    }
    out.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::parse(path, other.to_string()),
    })
}

pub fn save_mask_png8(mask: &SilhouetteMask, path: &Path) -> Result<()> {
    let mut out =
        image::ImageBuffer::<image::Luma<u8>, Vec<u8>>::new(mask.width as u32, mask.height as u32);
    for (i, px) in out.pixels_mut().enumerate() {
        px.0[0] = if mask.data[i] { 255 } else { 0 };
    }
    out.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::parse(path, other.to_string()),
    })
}

/// Write frames as `000000.png`, `000001.png`, ... (16-bit, lossless)
/// into `out_dir`; returns the number written.
pub fn write_frame_sequence(frames: &[ImageBuffer], out_dir: &Path) -> Result<usize> {
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidInput("no frames".into()))?;
    for f in frames {
        first.same_resolution(f)?;
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (i, frame) in frames.iter().enumerate() {
        save_image_png16(frame, &out_dir.join(format!("{i:06}.png")))?;
    }
    Ok(frames.len())
}

/// Sorted list of image files in a directory (frames, masks, ground truth).
pub fn list_image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png" | "avimg")
            )
        })
        .collect();
    files.sort();
    Ok(files)
}

const RAW_MAGIC: &[u8; 5] = b"AVIMG";

/// Raw f64 image: exact save/load round-trip.
pub fn save_image_raw(img: &ImageBuffer, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(13 + img.data.len() * 8);
    bytes.extend_from_slice(RAW_MAGIC);
    bytes.extend_from_slice(&(img.width as u32).to_le_bytes());
    bytes.extend_from_slice(&(img.height as u32).to_le_bytes());
    for v in &img.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_image_raw(path: &Path) -> Result<ImageBuffer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 13 || &bytes[..5] != RAW_MAGIC {
        return Err(Error::parse(path, "not a raw image file".to_string()));
    }
    let width = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let want = 13 + width * height * 3 * 8;
    if bytes.len() != want {
        return Err(Error::parse(
            path,
            format!("raw image holds {} bytes, header implies {want}", bytes.len()),
        ));
    }
    let data = bytes[13..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(ImageBuffer {
        width,
        height,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::TempDir;

    #[test]
    fn white_image_and_full_mask() {
        let dir = TempDir::new().unwrap();
        let img_path = dir.path().join("i.png");
        let mask_path = dir.path().join("m.png");
        save_image_png8(&ImageBuffer::filled(4, 4, [1.0, 1.0, 1.0]), &img_path).unwrap();
        let mut mask = SilhouetteMask::new(4, 4);
        mask.data.iter_mut().for_each(|b| *b = true);
        save_mask_png8(&mask, &mask_path).unwrap();
        let (img, loaded_mask) = load_image_with_mask(&img_path, &mask_path).unwrap();
        assert!(img.data.iter().all(|&v| v == 1.0));
        assert!(loaded_mask.data.iter().all(|&b| b));
    }

    #[test]
    fn eight_bit_normalization() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("gray.png");
        let img = image::ImageBuffer::<image::Rgb<u8>, Vec<u8>>::from_pixel(
            2,
            2,
            image::Rgb([128, 128, 128]),
        );
        img.save(&path).unwrap();
        let loaded = load_image(&path).unwrap();
        let expected = 128.0 / 255.0;
        assert!((loaded.data[0] - expected).abs() < 1e-12);
        assert!((expected - 0.50196).abs() < 1e-4);
    }

    #[test]
    fn resolution_mismatch_names_both_sizes() {
        let dir = TempDir::new().unwrap();
        let img_path = dir.path().join("i.png");
        let mask_path = dir.path().join("m.png");
        save_image_png8(&ImageBuffer::new(64, 64), &img_path).unwrap();
        save_mask_png8(&SilhouetteMask::new(32, 32), &mask_path).unwrap();
        let err = load_image_with_mask(&img_path, &mask_path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("64x64") && msg.contains("32x32"), "{msg}");
    }

    #[test]
    fn frame_sequence_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frames: Vec<ImageBuffer> = (0..3)
            .map(|_| {
                let mut f = ImageBuffer::new(8, 8);
                for v in f.data.iter_mut() {
                    *v = rng.gen_range(0.0..1.0);
                }
                f
            })
            .collect();
        let dir = TempDir::new().unwrap();
        let count = write_frame_sequence(&frames, dir.path()).unwrap();
        assert_eq!(count, 3);
        for (i, frame) in frames.iter().enumerate() {
            let path = dir.path().join(format!("{i:06}.png"));
            assert!(path.exists());
            let loaded = load_image(&path).unwrap();
            // Pixel data matches up to one 16-bit quantization step.
            for (a, b) in frame.data.iter().zip(&loaded.data) {
                assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
            }
        }
    }

    #[test]
    fn black_frame_and_empty_list() {
        let dir = TempDir::new().unwrap();
        write_frame_sequence(&[ImageBuffer::new(4, 4)], dir.path()).unwrap();
        let loaded = load_image(&dir.path().join("000000.png")).unwrap();
        assert!(loaded.data.iter().all(|&v| v == 0.0));
        let err = write_frame_sequence(&[], dir.path()).unwrap_err();
        assert!(err.to_string().contains("no frames"));
    }

    #[test]
    fn raw_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut img = ImageBuffer::new(5, 7);
        for v in img.data.iter_mut() {
            *v = rng.gen_range(-2.0..2.0); // raw format is not range-limited
        }
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("x.avimg");
        save_image_raw(&img, &path).unwrap();
        let loaded = load_image_raw(&path).unwrap();
        assert_eq!(loaded, img);
    }
}
