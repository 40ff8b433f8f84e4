//! Motion sequences and single-row parameter tables.
//!
//! A motion file holds one row of 72 reals per frame (whitespace or comma
//! separated). `#` starts a comment; a leading `# fps <value>` comment
//! carries the frame rate. Values print in shortest round-trip form, so a
//! save/load cycle is bit-exact.

use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

pub const POSE_ROW_LEN: usize = 72;

#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    /// One 72-value axis-angle row per frame, radians.
    pub frames: Vec<Vec<f64>>,
    /// Frames per second; metadata only.
    pub fps: Option<f64>,
}

impl MotionSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

fn split_row(line: &str) -> impl Iterator<Item = &str> {
    line.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
}

fn parse_row(path: &Path, frame_idx: usize, line: &str, want: usize) -> Result<Vec<f64>> {
    let mut row = Vec::with_capacity(want);
    for tok in split_row(line) {
        let v: f64 = tok.parse().map_err(|_| {
            Error::parse(path, format!("frame {frame_idx}: bad number `{tok}`"))
        })?;
        if !v.is_finite() {
            return Err(Error::parse(
                path,
                format!("frame {frame_idx}: non-finite value"),
            ));
        }
        row.push(v);
    }
    if row.len() != want {
        return Err(Error::parse(
            path,
            format!(
                "frame {frame_idx}: expected {want} values, got {}",
                row.len()
            ),
        ));
    }
    Ok(row)
}

pub fn load_motion_sequence(path: &Path) -> Result<MotionSequence> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut frames = Vec::new();
    let mut fps = None;
    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            let mut parts = comment.split_whitespace();
            if parts.next() == Some("fps") {
                if let Some(v) = parts.next().and_then(|s| s.parse::<f64>().ok()) {
                    fps = Some(v);
                }
            }
            continue;
        }
        let row = parse_row(path, frames.len(), line, POSE_ROW_LEN)?;
        frames.push(row);
    }
    if frames.is_empty() {
        return Err(Error::parse(path, "motion file holds no frames".to_string()));
    }
    Ok(MotionSequence { frames, fps })
}

pub fn save_motion_sequence(motion: &MotionSequence, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    if let Some(fps) = motion.fps {
        writeln!(file, "# fps {fps:?}").map_err(|e| Error::io(path, e))?;
    }
    for frame in &motion.frames {
        let row: Vec<String> = frame.iter().map(|v| format!("{v:?}")).collect();
        writeln!(file, "{}", row.join(" ")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Load a single data row of exactly `want` reals (comments allowed).
fn load_single_row(path: &Path, want: usize) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let line = rows
        .next()
        .ok_or_else(|| Error::parse(path, "file holds no data row".to_string()))?;
    if rows.next().is_some() {
        return Err(Error::parse(path, "expected a single data row".to_string()));
    }
    parse_row(path, 0, line, want)
}

/// One 72-value pose row (the input pose).
pub fn load_pose_row(path: &Path) -> Result<Vec<f64>> {
    load_single_row(path, POSE_ROW_LEN)
}

/// One 10-value shape-coefficient row.
pub fn load_shape_row(path: &Path) -> Result<Vec<f64>> {
    load_single_row(path, 10)
}

/// Write a single row in the same format.
pub fn save_row(values: &[f64], path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let row: Vec<String> = values.iter().map(|v| format!("{v:?}")).collect();
    writeln!(file, "{}", row.join(" ")).map_err(|e| Error::io(path, e))
}
