//! Body-model archives: a directory holding `manifest.txt` plus one flat
//! little-endian binary file per array. The manifest lists
//! `<name> <dtype> <dim0> <dim1> ...` per line, dtype one of
//! f32 | f64 | i32 | i64.
//!
//! Required arrays (N vertices, F faces, J joints):
//!   v_template [N,3] f, faces [F,3] i, shapedirs [N,3,10] f,
//!   posedirs [N,3,9(J-1)] f, J_regressor [J,N] f, weights [N,J] f,
//!   kintree_parents [J] i.
//! `part_labels [N] i` is optional for 24-joint archives, where it can be
//! derived from the skin-weight argmax grouping.

use crate::body_model::{derive_part_labels, SkinnedBodyModel, SHAPE_COEFFS};
use crate::error::{Error, Result};
use crate::math::Vec3;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DType {
    F32,
    F64,
    I32,
    I64,
}

impl DType {
    fn parse(s: &str) -> Option<DType> {
        match s {
            "f32" => Some(DType::F32),
            "f64" => Some(DType::F64),
            "i32" => Some(DType::I32),
            "i64" => Some(DType::I64),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 | DType::I64 => 8,
        }
    }
}

#[derive(Debug)]
enum ArrayData {
    Float(Vec<f64>),
    Int(Vec<i64>),
}

#[derive(Debug)]
struct NamedArray {
    shape: Vec<usize>,
    data: ArrayData,
}

impl NamedArray {
    fn floats(&self, name: &str) -> Result<&[f64]> {
        match &self.data {
            ArrayData::Float(v) => Ok(v),
            ArrayData::Int(_) => Err(Error::InvalidModelData(format!(
                "array `{name}` must be floating point"
            ))),
        }
    }

    fn ints(&self, name: &str) -> Result<&[i64]> {
        match &self.data {
            ArrayData::Int(v) => Ok(v),
            ArrayData::Float(_) => Err(Error::InvalidModelData(format!(
                "array `{name}` must be integer"
            ))),
        }
    }
}

fn read_array(dir: &Path, name: &str, dtype: DType, shape: &[usize]) -> Result<NamedArray> {
    let path = dir.join(format!("{name}.bin"));
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let count: usize = shape.iter().product();
    if bytes.len() != count * dtype.size() {
        return Err(Error::InvalidModelData(format!(
            "array `{name}`: file holds {} bytes, manifest shape {:?} needs {}",
            bytes.len(),
            shape,
            count * dtype.size()
        )));
    }
    let data = match dtype {
        DType::F32 => ArrayData::Float(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        ),
        DType::F64 => ArrayData::Float(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::I32 => ArrayData::Int(
            bytes
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()) as i64)
                .collect(),
        ),
        DType::I64 => ArrayData::Int(
            bytes
                .chunks_exact(8)
                .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    Ok(NamedArray {
        shape: shape.to_vec(),
        data,
    })
}

fn parse_manifest(dir: &Path) -> Result<BTreeMap<String, (DType, Vec<usize>)>> {
    let path = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut entries = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let name = parts
            .next()
            .ok_or_else(|| Error::parse(&path, format!("line {}: empty entry", lineno + 1)))?
            .to_string();
        let dtype = parts
            .next()
            .and_then(DType::parse)
            .ok_or_else(|| Error::parse(&path, format!("line {}: bad dtype", lineno + 1)))?;
        let shape: Vec<usize> = parts
            .map(|p| {
                p.parse::<usize>()
                    .map_err(|_| Error::parse(&path, format!("line {}: bad dim `{p}`", lineno + 1)))
            })
            .collect::<Result<_>>()?;
        if shape.is_empty() {
            return Err(Error::parse(
                &path,
                format!("line {}: array `{name}` has no dimensions", lineno + 1),
            ));
        }
        if entries.insert(name.clone(), (dtype, shape)).is_some() {
            return Err(Error::parse(&path, format!("duplicate array `{name}`")));
        }
    }
    Ok(entries)
}

/// Load and fully validate a body-model archive. Either every invariant of
/// [`SkinnedBodyModel`] holds on the returned model, or this fails.
pub fn load_body_model_archive(dir: &Path) -> Result<SkinnedBodyModel> {
    let manifest = parse_manifest(dir)?;
    let get = |name: &str| -> Result<NamedArray> {
        let (dtype, shape) = manifest
            .get(name)
            .ok_or_else(|| Error::MissingField(name.to_string()))?;
        read_array(dir, name, *dtype, shape)
    };

    let v_template = get("v_template")?;
    if v_template.shape.len() != 2 || v_template.shape[1] != 3 {
        return Err(Error::InvalidModelData(format!(
            "v_template shape {:?}, expected [N,3]",
            v_template.shape
        )));
    }
    let n = v_template.shape[0];
    let parents = get("kintree_parents")?;
    let j = parents.shape.iter().product();
    let expect_shape = |name: &str, arr: &NamedArray, want: &[usize]| -> Result<()> {
        if arr.shape != want {
            return Err(Error::InvalidModelData(format!(
                "{name} shape {:?}, expected {:?}",
                arr.shape, want
            )));
        }
        Ok(())
    };

    let faces_arr = get("faces")?;
    if faces_arr.shape.len() != 2 || faces_arr.shape[1] != 3 {
        return Err(Error::InvalidModelData(format!(
            "faces shape {:?}, expected [F,3]",
            faces_arr.shape
        )));
    }
    let shapedirs = get("shapedirs")?;
    expect_shape("shapedirs", &shapedirs, &[n, 3, SHAPE_COEFFS])?;
    let posedirs = get("posedirs")?;
    expect_shape("posedirs", &posedirs, &[n, 3, 9 * (j - 1)])?;
    let regressor = get("J_regressor")?;
    expect_shape("J_regressor", &regressor, &[j, n])?;
    let weights = get("weights")?;
    expect_shape("weights", &weights, &[n, j])?;

    let template_vertices: Vec<Vec3> = v_template
        .floats("v_template")?
        .chunks_exact(3)
        .map(|c| Vec3::new(c[0], c[1], c[2]))
        .collect();
    let faces: Vec<[u32; 3]> = faces_arr
        .ints("faces")?
        .chunks_exact(3)
        .map(|c| -> Result<[u32; 3]> {
            let cast = |v: i64| -> Result<u32> {
                u32::try_from(v).map_err(|_| {
                    Error::InvalidModelData(format!("face index {v} is not a valid vertex id"))
                })
            };
            Ok([cast(c[0])?, cast(c[1])?, cast(c[2])?])
        })
        .collect::<Result<_>>()?;

    let skin_weights = weights.floats("weights")?.to_vec();
    let part_labels = match manifest.get("part_labels") {
        Some((dtype, shape)) => {
            let arr = read_array(dir, "part_labels", *dtype, shape)?;
            expect_shape("part_labels", &arr, &[n])?;
            arr.ints("part_labels")?
                .iter()
                .map(|&v| {
                    u16::try_from(v).map_err(|_| {
                        Error::InvalidModelData(format!("part label {v} out of range"))
                    })
                })
                .collect::<Result<Vec<u16>>>()?
        }
        None => derive_part_labels(&skin_weights, n, j)?,
    };

    let kinematic_parents: Vec<i32> = parents
        .ints("kintree_parents")?
        .iter()
        .map(|&v| {
            i32::try_from(v)
                .map_err(|_| Error::InvalidModelData(format!("parent index {v} out of range")))
        })
        .collect::<Result<_>>()?;

    let model = SkinnedBodyModel {
        template_vertices,
        faces,
        shape_dirs: shapedirs.floats("shapedirs")?.to_vec(),
        pose_dirs: posedirs.floats("posedirs")?.to_vec(),
        joint_regressor: regressor.floats("J_regressor")?.to_vec(),
        skin_weights,
        part_labels,
        kinematic_parents,
    };
    model.validate()?;
    Ok(model)
}

fn write_floats(dir: &Path, name: &str, data: &[f64]) -> Result<()> {
    let path = dir.join(format!("{name}.bin"));
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

fn write_ints(dir: &Path, name: &str, data: &[i64]) -> Result<()> {
    let path = dir.join(format!("{name}.bin"));
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

/// Write a model as an archive directory (f64/i64 arrays plus manifest).
pub fn write_body_model_archive(model: &SkinnedBodyModel, dir: &Path) -> Result<()> {
    model.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = model.vertex_count();
    let j = model.joint_count();
    let f = model.faces.len();

    let mut v_template = Vec::with_capacity(n * 3);
    for v in &model.template_vertices {
        v_template.extend_from_slice(&[v.x, v.y, v.z]);
    }
    write_floats(dir, "v_template", &v_template)?;
    let faces: Vec<i64> = model
        .faces
        .iter()
        .flat_map(|f| f.iter().map(|&v| v as i64))
        .collect();
    write_ints(dir, "faces", &faces)?;
    write_floats(dir, "shapedirs", &model.shape_dirs)?;
    write_floats(dir, "posedirs", &model.pose_dirs)?;
    write_floats(dir, "J_regressor", &model.joint_regressor)?;
    write_floats(dir, "weights", &model.skin_weights)?;
    let labels: Vec<i64> = model.part_labels.iter().map(|&l| l as i64).collect();
    write_ints(dir, "part_labels", &labels)?;
    let parents: Vec<i64> = model.kinematic_parents.iter().map(|&p| p as i64).collect();
    write_ints(dir, "kintree_parents", &parents)?;

    let path = dir.join("manifest.txt");
    let mut file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    writeln!(file, "# body model archive").map_err(|e| Error::io(&path, e))?;
    let entries = [
        format!("v_template f64 {n} 3"),
        format!("faces i64 {f} 3"),
        format!("shapedirs f64 {n} 3 {SHAPE_COEFFS}"),
        format!("posedirs f64 {n} 3 {}", 9 * (j - 1)),
        format!("J_regressor f64 {j} {n}"),
        format!("weights f64 {n} {j}"),
        format!("part_labels i64 {n}"),
        format!("kintree_parents i64 {j}"),
    ];
    for e in entries {
        writeln!(file, "{e}").map_err(|e2| Error::io(&path, e2))?;
    }
    Ok(())
}
