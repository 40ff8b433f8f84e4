//! Camera files: one record per line with 18 values —
//! `fx fy cx cy r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz width height`.
//! Rotations are row-major world-to-camera and must be orthonormal.

use crate::cameras::Camera;
use crate::error::{Error, Result};
use crate::math::{Mat3, Vec3};
use std::io::Write;
use std::path::Path;

pub fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cameras = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let values: Vec<f64> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| {
                    Error::parse(path, format!("line {}: bad number `{tok}`", lineno + 1))
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != 18 {
            return Err(Error::parse(
                path,
                format!(
                    "line {}: camera record needs 18 values, got {}",
                    lineno + 1,
                    values.len()
                ),
            ));
        }
        let rotation = Mat3::new(
            values[4], values[5], values[6], values[7], values[8], values[9], values[10],
            values[11], values[12],
        );
        let camera = Camera {
            fx: values[0],
            fy: values[1],
            cx: values[2],
            cy: values[3],
            rotation,
            translation: Vec3::new(values[13], values[14], values[15]),
            width: values[16] as usize,
            height: values[17] as usize,
        };
        if camera.width == 0 || camera.height == 0 {
            return Err(Error::parse(
                path,
                format!("line {}: zero image dimensions", lineno + 1),
            ));
        }
        camera.validate().map_err(|e| {
            Error::parse(path, format!("line {}: {e}", lineno + 1))
        })?;
        cameras.push(camera);
    }
    if cameras.is_empty() {
        return Err(Error::parse(path, "camera file holds no records".to_string()));
    }
    Ok(cameras)
}

pub fn save_cameras(cameras: &[Camera], path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(
        file,
        "# fx fy cx cy r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz width height"
    )
    .map_err(|e| Error::io(path, e))?;
    for cam in cameras {
        let r = &cam.rotation;
        let mut fields: Vec<String> = vec![
            format!("{:?}", cam.fx),
            format!("{:?}", cam.fy),
            format!("{:?}", cam.cx),
            format!("{:?}", cam.cy),
        ];
        for row in 0..3 {
            for col in 0..3 {
                fields.push(format!("{:?}", r[(row, col)]));
            }
        }
        for c in 0..3 {
            fields.push(format!("{:?}", cam.translation[c]));
        }
        fields.push(cam.width.to_string());
        fields.push(cam.height.to_string());
        writeln!(file, "{}", fields.join(" ")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cameras::{build_rig, OrientationBins};
    use tempfile::TempDir;

    fn template() -> Camera {
        Camera {
            fx: 70.0,
            fy: 70.0,
            cx: 32.0,
            cy: 32.0,
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
            width: 64,
            height: 64,
        }
    }

    #[test]
    fn camera_file_round_trip() {
        let rig = build_rig(
            &Vec3::new(0.0, 0.8, 0.0),
            2.0,
            0.5,
            4,
            12.0,
            OrientationBins::default(),
            &template(),
        )
        .unwrap();
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("cams.txt");
        save_cameras(&rig.cameras, &path).unwrap();
        let loaded = load_cameras(&path).unwrap();
        assert_eq!(loaded, rig.cameras);
    }

    #[test]
    fn non_orthonormal_rotation_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("cams.txt");
        std::fs::write(
            &path,
            "70 70 32 32  1 0 0  0 2 0  0 0 1  0 0 0  64 64\n",
        )
        .unwrap();
        assert!(load_cameras(&path).is_err());
    }

    #[test]
    fn wrong_field_count_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("cams.txt");
        std::fs::write(&path, "70 70 32 32 1 0 0\n").unwrap();
        let err = load_cameras(&path).unwrap_err();
        assert!(err.to_string().contains("18"));
    }
}
