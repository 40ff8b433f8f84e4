//! Training configuration: a flat `key = value` text file with a fixed key
//! schema. Unknown keys are rejected; floats print in shortest round-trip
//! form so save/load is exact.

use crate::error::{Error, Result};
use crate::losses::SilhouetteMode;
use crate::rasterizer::Connectivity;
use std::fmt::Write as _;
use std::path::Path;

/// One documented config key for `--help` output.
#[derive(Debug, Clone, Copy)]
pub struct ConfigKeyDoc {
    pub key: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
}

/// Full key table; the parser, serializer, and CLI help all derive from it.
pub fn config_schema() -> &'static [ConfigKeyDoc] {
    const SCHEMA: &[ConfigKeyDoc] = &[
        ConfigKeyDoc { key: "seed", default: "42", doc: "RNG seed for sampling, init, and jitter" },
        ConfigKeyDoc { key: "lambda_mse", default: "1.0", doc: "weight of the pixel MSE term inside the reconstruction loss" },
        ConfigKeyDoc { key: "lambda_clip", default: "0.1", doc: "weight of the semantic embedding loss on novel views" },
        ConfigKeyDoc { key: "lambda_sil", default: "0.01", doc: "weight of the soft silhouette loss on novel views" },
        ConfigKeyDoc { key: "p_novel", default: "0.5", doc: "probability an iteration trains a novel view instead of the input view" },
        ConfigKeyDoc { key: "patch_size", default: "224", doc: "square patch resolution for training views and references" },
        ConfigKeyDoc { key: "t_init", default: "15000", doc: "iterations of the mesh-render initialization stage" },
        ConfigKeyDoc { key: "t_train", default: "20000", doc: "iterations of the one-shot training stage" },
        ConfigKeyDoc { key: "part_probs", default: "", doc: "comma list `part:prob`; part 0 is the whole body; empty = 0.5 whole body, rest uniform" },
        ConfigKeyDoc { key: "head_part_id", default: "1", doc: "part id treated as the head by rotation-aware sampling" },
        ConfigKeyDoc { key: "front_ref_for_all_side_parts", default: "false", doc: "use front references for every part on side views, not just the head" },
        ConfigKeyDoc { key: "text_prompt", default: "", doc: "optional text prompt mixed into the semantic reference" },
        ConfigKeyDoc { key: "text_weight", default: "0.5", doc: "weight of the text reference when a prompt is set" },
        ConfigKeyDoc { key: "rig_cameras", default: "12", doc: "number of rig cameras around the subject" },
        ConfigKeyDoc { key: "rig_radius", default: "2.5", doc: "rig circle radius, meters" },
        ConfigKeyDoc { key: "rig_height", default: "0.0", doc: "rig height offset above the subject center, meters" },
        ConfigKeyDoc { key: "bin_front", default: "60.0", doc: "|yaw| below this is a front camera, degrees" },
        ConfigKeyDoc { key: "bin_side", default: "120.0", doc: "|yaw| between bin_front and this is a side camera; beyond is rear" },
        ConfigKeyDoc { key: "field_layers", default: "8", doc: "hidden layers of the radiance MLP" },
        ConfigKeyDoc { key: "field_width", default: "256", doc: "hidden width of the radiance MLP" },
        ConfigKeyDoc { key: "field_skip", default: "4", doc: "hidden layer receiving the encoded-input skip; 0 disables" },
        ConfigKeyDoc { key: "field_freqs", default: "10", doc: "positional-encoding frequency count" },
        ConfigKeyDoc { key: "residual_enabled", default: "false", doc: "learn a non-rigid residual on top of the skeletal warp" },
        ConfigKeyDoc { key: "residual_width", default: "16", doc: "hidden width of the residual MLP" },
        ConfigKeyDoc { key: "residual_freqs", default: "2", doc: "positional-encoding frequencies of the residual MLP" },
        ConfigKeyDoc { key: "samples_per_ray", default: "128", doc: "volume-rendering samples per ray" },
        ConfigKeyDoc { key: "ray_margin", default: "0.15", doc: "dilation of the posed-mesh bounding box for ray bounds, meters" },
        ConfigKeyDoc { key: "background", default: "0.0,0.0,0.0", doc: "render background color, linear RGB" },
        ConfigKeyDoc { key: "train_jitter", default: "true", doc: "stratified ray jitter during training (evaluation always uses midpoints)" },
        ConfigKeyDoc { key: "lr", default: "0.0005", doc: "Adam learning rate" },
        ConfigKeyDoc { key: "lr_warmup", default: "0", doc: "linear learning-rate warmup iterations" },
        ConfigKeyDoc { key: "lr_field_mult", default: "1.0", doc: "learning-rate multiplier for the field parameters" },
        ConfigKeyDoc { key: "lr_residual_mult", default: "1.0", doc: "learning-rate multiplier for the warp residual parameters" },
        ConfigKeyDoc { key: "sil_mode", default: "boundary_band", doc: "silhouette Chamfer domain: literal | boundary_band | hard" },
        ConfigKeyDoc { key: "sil_band", default: "3.0", doc: "band width in pixels for boundary_band mode" },
        ConfigKeyDoc { key: "edge_connectivity", default: "four", doc: "mask edge connectivity: four | eight" },
        ConfigKeyDoc { key: "perceptual", default: "builtin", doc: "perceptual metric: builtin | adapter:<locator>" },
        ConfigKeyDoc { key: "embedder", default: "mock", doc: "semantic embedder: mock | adapter:<locator>; full scale uses an adapter serving CLIP ViT-L/14 at 224" },
        ConfigKeyDoc { key: "embedder_resolution", default: "224", doc: "input resolution the embedder expects" },
        ConfigKeyDoc { key: "embedder_dim", default: "64", doc: "embedding dimension of the mock embedder" },
        ConfigKeyDoc { key: "snapshot_every", default: "0", doc: "write progress renders every N iterations; 0 disables" },
    ];
    SCHEMA
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub lambda_mse: f64,
    pub lambda_clip: f64,
    pub lambda_sil: f64,
    pub p_novel: f64,
    pub patch_size: usize,
    pub t_init: u64,
    pub t_train: u64,
    /// `(part id, probability)`, id 0 meaning the whole body. Empty means
    /// the default split (0.5 whole body, remainder uniform over parts),
    /// resolved once the model's part count is known.
    pub part_probs: Vec<(u16, f64)>,
    pub head_part_id: u16,
    pub front_ref_for_all_side_parts: bool,
    pub text_prompt: String,
    pub text_weight: f64,
    pub rig_cameras: usize,
    pub rig_radius: f64,
    pub rig_height: f64,
    pub bin_front: f64,
    pub bin_side: f64,
    pub field_layers: usize,
    pub field_width: usize,
    pub field_skip: usize,
    pub field_freqs: usize,
    pub residual_enabled: bool,
    pub residual_width: usize,
    pub residual_freqs: usize,
    pub samples_per_ray: usize,
    pub ray_margin: f64,
    pub background: [f64; 3],
    pub train_jitter: bool,
    pub lr: f64,
    pub lr_warmup: u64,
    pub lr_field_mult: f64,
    pub lr_residual_mult: f64,
    pub sil_mode: SilhouetteMode,
    pub sil_band: f64,
    pub edge_connectivity: Connectivity,
    pub perceptual: String,
    pub embedder: String,
    pub embedder_resolution: usize,
    pub embedder_dim: usize,
    pub snapshot_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 42,
            lambda_mse: 1.0,
            lambda_clip: 0.1,
            lambda_sil: 0.01,
            p_novel: 0.5,
            patch_size: 224,
            t_init: 15_000,
            t_train: 20_000,
            part_probs: Vec::new(),
            head_part_id: 1,
            front_ref_for_all_side_parts: false,
            text_prompt: String::new(),
            text_weight: 0.5,
            rig_cameras: 12,
            rig_radius: 2.5,
            rig_height: 0.0,
            bin_front: 60.0,
            bin_side: 120.0,
            field_layers: 8,
            field_width: 256,
            field_skip: 4,
            field_freqs: 10,
            residual_enabled: false,
            residual_width: 16,
            residual_freqs: 2,
            samples_per_ray: 128,
            ray_margin: 0.15,
            background: [0.0, 0.0, 0.0],
            train_jitter: true,
            lr: 5e-4,
            lr_warmup: 0,
            lr_field_mult: 1.0,
            lr_residual_mult: 1.0,
            sil_mode: SilhouetteMode::BoundaryBand,
            sil_band: 3.0,
            edge_connectivity: Connectivity::Four,
            perceptual: "builtin".into(),
            embedder: "mock".into(),
            embedder_resolution: 224,
            embedder_dim: 64,
            snapshot_every: 0,
        }
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::Config(format!("key `{key}`: `{v}` is not a number")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::Config(format!("key `{key}`: `{v}` is not a non-negative integer")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| Error::Config(format!("key `{key}`: `{v}` is not a non-negative integer")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "key `{key}`: `{v}` is not true/false"
        ))),
    }
}

fn parse_part_probs(v: &str) -> Result<Vec<(u16, f64)>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for item in v.split(',') {
        let (id, prob) = item
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("part_probs entry `{item}` is not id:prob")))?;
        let id: u16 = id
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("part_probs id `{id}` is not an integer")))?;
        let prob: f64 = prob
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("part_probs value `{prob}` is not a number")))?;
        if out.iter().any(|(i, _)| *i == id) {
            return Err(Error::Config(format!("part_probs repeats part {id}")));
        }
        out.push((id, prob));
    }
    Ok(out)
}

fn parse_rgb(key: &str, v: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("key `{key}` needs three components")));
    }
    Ok([
        parse_f64(key, parts[0])?,
        parse_f64(key, parts[1])?,
        parse_f64(key, parts[2])?,
    ])
}

impl TrainConfig {
    /// Apply one `key = value` pair.
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_u64(key, value)?,
            "lambda_mse" => self.lambda_mse = parse_f64(key, value)?,
            "lambda_clip" => self.lambda_clip = parse_f64(key, value)?,
            "lambda_sil" => self.lambda_sil = parse_f64(key, value)?,
            "p_novel" => self.p_novel = parse_f64(key, value)?,
            "patch_size" => self.patch_size = parse_usize(key, value)?,
            "t_init" => self.t_init = parse_u64(key, value)?,
            "t_train" => self.t_train = parse_u64(key, value)?,
            "part_probs" => self.part_probs = parse_part_probs(value)?,
            "head_part_id" => {
                self.head_part_id = value
                    .parse()
                    .map_err(|_| Error::Config(format!("bad head_part_id `{value}`")))?
            }
            "front_ref_for_all_side_parts" => {
                self.front_ref_for_all_side_parts = parse_bool(key, value)?
            }
            "text_prompt" => self.text_prompt = value.to_string(),
            "text_weight" => self.text_weight = parse_f64(key, value)?,
            "rig_cameras" => self.rig_cameras = parse_usize(key, value)?,
            "rig_radius" => self.rig_radius = parse_f64(key, value)?,
            "rig_height" => self.rig_height = parse_f64(key, value)?,
            "bin_front" => self.bin_front = parse_f64(key, value)?,
            "bin_side" => self.bin_side = parse_f64(key, value)?,
            "field_layers" => self.field_layers = parse_usize(key, value)?,
            "field_width" => self.field_width = parse_usize(key, value)?,
            "field_skip" => self.field_skip = parse_usize(key, value)?,
            "field_freqs" => self.field_freqs = parse_usize(key, value)?,
            "residual_enabled" => self.residual_enabled = parse_bool(key, value)?,
            "residual_width" => self.residual_width = parse_usize(key, value)?,
            "residual_freqs" => self.residual_freqs = parse_usize(key, value)?,
            "samples_per_ray" => self.samples_per_ray = parse_usize(key, value)?,
            "ray_margin" => self.ray_margin = parse_f64(key, value)?,
            "background" => self.background = parse_rgb(key, value)?,
            "train_jitter" => self.train_jitter = parse_bool(key, value)?,
            "lr" => self.lr = parse_f64(key, value)?,
            "lr_warmup" => self.lr_warmup = parse_u64(key, value)?,
            "lr_field_mult" => self.lr_field_mult = parse_f64(key, value)?,
            "lr_residual_mult" => self.lr_residual_mult = parse_f64(key, value)?,
            "sil_mode" => {
                self.sil_mode = match value {
                    "literal" => SilhouetteMode::Literal,
                    "boundary_band" => SilhouetteMode::BoundaryBand,
                    "hard" => SilhouetteMode::Hard,
                    _ => {
                        return Err(Error::Config(format!(
                            "sil_mode `{value}` is not literal/boundary_band/hard"
                        )))
                    }
                }
            }
            "sil_band" => self.sil_band = parse_f64(key, value)?,
            "edge_connectivity" => {
                self.edge_connectivity = match value {
                    "four" => Connectivity::Four,
                    "eight" => Connectivity::Eight,
                    _ => {
                        return Err(Error::Config(format!(
                            "edge_connectivity `{value}` is not four/eight"
                        )))
                    }
                }
            }
            "perceptual" => self.perceptual = value.to_string(),
            "embedder" => self.embedder = value.to_string(),
            "embedder_resolution" => self.embedder_resolution = parse_usize(key, value)?,
            "embedder_dim" => self.embedder_dim = parse_usize(key, value)?,
            "snapshot_every" => self.snapshot_every = parse_u64(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<TrainConfig> {
        let mut config = TrainConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("duplicate config key `{key}`")));
            }
            config.set(key, value)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    fn value_string(&self, key: &str) -> String {
        match key {
            "seed" => self.seed.to_string(),
            "lambda_mse" => format!("{:?}", self.lambda_mse),
            "lambda_clip" => format!("{:?}", self.lambda_clip),
            "lambda_sil" => format!("{:?}", self.lambda_sil),
            "p_novel" => format!("{:?}", self.p_novel),
            "patch_size" => self.patch_size.to_string(),
            "t_init" => self.t_init.to_string(),
            "t_train" => self.t_train.to_string(),
            "part_probs" => self
                .part_probs
                .iter()
                .map(|(id, p)| format!("{id}:{p:?}"))
                .collect::<Vec<_>>()
                .join(","),
            "head_part_id" => self.head_part_id.to_string(),
            "front_ref_for_all_side_parts" => self.front_ref_for_all_side_parts.to_string(),
            "text_prompt" => self.text_prompt.clone(),
            "text_weight" => format!("{:?}", self.text_weight),
            "rig_cameras" => self.rig_cameras.to_string(),
            "rig_radius" => format!("{:?}", self.rig_radius),
            "rig_height" => format!("{:?}", self.rig_height),
            "bin_front" => format!("{:?}", self.bin_front),
            "bin_side" => format!("{:?}", self.bin_side),
            "field_layers" => self.field_layers.to_string(),
            "field_width" => self.field_width.to_string(),
            "field_skip" => self.field_skip.to_string(),
            "field_freqs" => self.field_freqs.to_string(),
            "residual_enabled" => self.residual_enabled.to_string(),
            "residual_width" => self.residual_width.to_string(),
            "residual_freqs" => self.residual_freqs.to_string(),
            "samples_per_ray" => self.samples_per_ray.to_string(),
            "ray_margin" => format!("{:?}", self.ray_margin),
            "background" => format!(
                "{:?},{:?},{:?}",
                self.background[0], self.background[1], self.background[2]
            ),
            "train_jitter" => self.train_jitter.to_string(),
            "lr" => format!("{:?}", self.lr),
            "lr_warmup" => self.lr_warmup.to_string(),
            "lr_field_mult" => format!("{:?}", self.lr_field_mult),
            "lr_residual_mult" => format!("{:?}", self.lr_residual_mult),
            "sil_mode" => match self.sil_mode {
                SilhouetteMode::Literal => "literal".into(),
                SilhouetteMode::BoundaryBand => "boundary_band".into(),
                SilhouetteMode::Hard => "hard".into(),
            },
            "sil_band" => format!("{:?}", self.sil_band),
            "edge_connectivity" => match self.edge_connectivity {
                Connectivity::Four => "four".into(),
                Connectivity::Eight => "eight".into(),
            },
            "perceptual" => self.perceptual.clone(),
            "embedder" => self.embedder.clone(),
            "embedder_resolution" => self.embedder_resolution.to_string(),
            "embedder_dim" => self.embedder_dim.to_string(),
            "snapshot_every" => self.snapshot_every.to_string(),
            _ => unreachable!("schema and serializer out of sync for `{key}`"),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for entry in config_schema() {
            let _ = writeln!(out, "# {}", entry.doc);
            let _ = writeln!(out, "{} = {}", entry.key, self.value_string(entry.key));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Resolve `part_probs` for a model with `num_parts` parts: the default
    /// split is 0.5 on the whole body and the remainder uniform.
    pub fn resolved_part_probs(&self, num_parts: u16) -> Vec<(u16, f64)> {
        if !self.part_probs.is_empty() {
            return self.part_probs.clone();
        }
        let mut out = vec![(0u16, 0.5)];
        let each = 0.5 / num_parts as f64;
        for p in 1..=num_parts {
            out.push((p, each));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, ok: bool, detail: String| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("{name}: {detail}")))
            }
        };
        for (name, v) in [
            ("lambda_mse", self.lambda_mse),
            ("lambda_clip", self.lambda_clip),
            ("lambda_sil", self.lambda_sil),
            ("text_weight", self.text_weight),
        ] {
            check(name, v.is_finite() && v >= 0.0, format!("{v} must be finite and >= 0"))?;
        }
        check(
            "p_novel",
            (0.0..=1.0).contains(&self.p_novel),
            format!("{} outside [0,1]", self.p_novel),
        )?;
        check("patch_size", self.patch_size > 0, "must be positive".into())?;
        if !self.part_probs.is_empty() {
            let mut sum = 0.0;
            for &(id, p) in &self.part_probs {
                check(
                    "part_probs",
                    p.is_finite() && p >= 0.0,
                    format!("part {id} probability {p}"),
                )?;
                sum += p;
            }
            check(
                "part_probs",
                (sum - 1.0).abs() <= 1e-9,
                format!("probabilities sum to {sum}, expected 1"),
            )?;
        }
        check("rig_cameras", self.rig_cameras >= 4, "need at least 4".into())?;
        check(
            "rig_radius",
            self.rig_radius > 0.0,
            format!("{} must be positive", self.rig_radius),
        )?;
        check(
            "bins",
            0.0 < self.bin_front && self.bin_front <= self.bin_side && self.bin_side <= 180.0,
            format!("front {} / side {}", self.bin_front, self.bin_side),
        )?;
        check("field_layers", self.field_layers >= 1, "need >= 1".into())?;
        check("field_width", self.field_width >= 1, "need >= 1".into())?;
        check(
            "field_skip",
            self.field_skip == 0 || self.field_skip < self.field_layers,
            format!(
                "skip at {} but only {} hidden layers",
                self.field_skip, self.field_layers
            ),
        )?;
        check(
            "samples_per_ray",
            self.samples_per_ray >= 2,
            "need >= 2".into(),
        )?;
        check("lr", self.lr.is_finite() && self.lr > 0.0, format!("{}", self.lr))?;
        check(
            "sil_band",
            self.sil_band.is_finite() && self.sil_band >= 0.0,
            format!("{}", self.sil_band),
        )?;
        check(
            "embedder_resolution",
            self.embedder_resolution > 0,
            "must be positive".into(),
        )?;
        check("embedder_dim", self.embedder_dim > 0, "must be positive".into())?;
        Ok(())
    }
}
