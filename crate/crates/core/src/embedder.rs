//! Visual-semantic embeddings behind a pluggable interface.
//!
//! Two backends: a deterministic in-process mock (color/structure sensitive,
//! differentiable, used by tests and desk-scale training) and an
//! out-of-process adapter speaking a length-prefixed binary protocol over a
//! unix or tcp socket, so pretrained encoder weights never enter this
//! repository.
//!
//! Wire protocol (all integers little-endian):
//! ```text
//! frame    := u64 payload_len, payload
//! request  := u64 request_id, u8 kind, body
//!   kind 1 image:     u32 height, u32 width, h*w*3 f32 RGB row-major
//!   kind 2 text:      UTF-8 bytes
//!   kind 3 image_vjp: u32 h, u32 w, h*w*3 f32 image, u32 d, d f32 cotangent
//!   kind 4 pair:      u32 h, u32 w, h*w*3 f32 A, h*w*3 f32 B
//!   kind 5 pair_vjp:  as pair; response is the gradient w.r.t. A
//! response := u64 request_id, u8 status (0 ok, 1 error), body
//!   ok body:    u32 count, count f32 values
//!   error body: UTF-8 message
//! ```
//! Kinds 1–2 serve embeddings; 3 and 5 are optional gradient extensions an
//! adapter may reject (training needs them only when the corresponding loss
//! is active).

use crate::buffers::ImageBuffer;
use crate::error::{Error, Result};
use crate::imageops::{resize_bilinear, resize_bilinear_adjoint};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::sync::Mutex;

/// Unit-length embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    /// Normalize to unit length; zero vectors are a numeric failure.
    pub fn normalized(values: Vec<f64>) -> Result<Embedding> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(Error::Numeric(format!(
                "embedding norm {norm} cannot be normalized"
            )));
        }
        Ok(Embedding(values.into_iter().map(|v| v / norm).collect()))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &Embedding) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::Dimension(format!(
                "embedding dims {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }
}

/// Cosine distance `1 - a.b` in `[0, 2]`.
pub fn embedding_distance(a: &Embedding, b: &Embedding) -> Result<f64> {
    Ok(1.0 - a.dot(b)?)
}

/// Which encoder to use and how to feed it.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbedderKind {
    Mock,
    External { locator: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderSpec {
    pub kind: EmbedderKind,
    /// Input resolution the encoder expects.
    pub resolution: usize,
    /// Embedding dimension (mock only; adapters report theirs per response).
    pub dim: usize,
}

impl EmbedderSpec {
    pub fn mock(dim: usize) -> EmbedderSpec {
        EmbedderSpec {
            kind: EmbedderKind::Mock,
            resolution: MOCK_RESOLUTION,
            dim,
        }
    }

    /// Parse a config value: `mock` or `adapter:<locator>`.
    pub fn from_config(value: &str, resolution: usize, dim: usize) -> Result<EmbedderSpec> {
        if value == "mock" {
            return Ok(EmbedderSpec::mock(dim));
        }
        if let Some(locator) = value.strip_prefix("adapter:") {
            return Ok(EmbedderSpec {
                kind: EmbedderKind::External {
                    locator: locator.to_string(),
                },
                resolution,
                dim,
            });
        }
        Err(Error::Config(format!(
            "embedder `{value}` is neither `mock` nor `adapter:<locator>`"
        )))
    }
}

/// Embedding backend used by losses and the trainer.
pub trait ImageEmbedder: Sync + Send {
    fn dim(&self) -> usize;
    fn embed_image(&self, image: &ImageBuffer) -> Result<Embedding>;
    fn embed_text(&self, prompt: &str) -> Result<Embedding>;
    /// Whether [`Self::embed_image_vjp`] is available.
    fn supports_vjp(&self) -> bool;
    /// Gradient of `<embed_image(image), cotangent>` w.r.t. the image.
    fn embed_image_vjp(&self, image: &ImageBuffer, cotangent: &[f64]) -> Result<ImageBuffer>;
}

pub fn create_embedder(spec: &EmbedderSpec) -> Result<Box<dyn ImageEmbedder>> {
    match &spec.kind {
        EmbedderKind::Mock => Ok(Box::new(MockEmbedder::new(spec.dim))),
        EmbedderKind::External { locator } => Ok(Box::new(AdapterEmbedder::connect(
            locator,
            spec.resolution,
        )?)),
    }
}

/// One-shot convenience wrappers over [`create_embedder`].
pub fn embed_image(spec: &EmbedderSpec, image: &ImageBuffer) -> Result<Embedding> {
    create_embedder(spec)?.embed_image(image)
}

pub fn embed_text(spec: &EmbedderSpec, prompt: &str) -> Result<Embedding> {
    create_embedder(spec)?.embed_text(prompt)
}

pub const MOCK_RESOLUTION: usize = 16;
const MOCK_CELL: usize = 4;
const MOCK_PROJECTION_SEED: u64 = 0x00ab_caf3_5eed_0001;

/// The documented mock: resize to 16x16, per-4x4-cell channel means and
/// variances plus a constant bias feature, a fixed seeded projection, then
/// normalization. Pure, seed-stable, and differentiable.
pub struct MockEmbedder {
    dim: usize,
    /// `dim x feature_len`, row-major.
    projection: Vec<f64>,
}

const MOCK_CELLS: usize = (MOCK_RESOLUTION / MOCK_CELL) * (MOCK_RESOLUTION / MOCK_CELL);
const MOCK_FEATURES: usize = MOCK_CELLS * 6 + 1;

impl MockEmbedder {
    pub fn new(dim: usize) -> MockEmbedder {
        let mut rng = ChaCha8Rng::seed_from_u64(MOCK_PROJECTION_SEED);
        let scale = 1.0 / (MOCK_FEATURES as f64).sqrt();
        let projection = (0..dim * MOCK_FEATURES)
            .map(|_| rng.gen_range(-scale..scale))
            .collect();
        MockEmbedder { dim, projection }
    }

    fn features(image16: &ImageBuffer) -> Vec<f64> {
        let cells_per_row = MOCK_RESOLUTION / MOCK_CELL;
        let mut features = vec![0.0; MOCK_FEATURES];
        for cy in 0..cells_per_row {
            for cx in 0..cells_per_row {
                let cell = cy * cells_per_row + cx;
                for ch in 0..3 {
                    let mut mean = 0.0;
                    for py in 0..MOCK_CELL {
                        for px in 0..MOCK_CELL {
                            mean +=
                                image16.pixel(cx * MOCK_CELL + px, cy * MOCK_CELL + py)[ch];
                        }
                    }
                    mean /= (MOCK_CELL * MOCK_CELL) as f64;
                    let mut var = 0.0;
                    for py in 0..MOCK_CELL {
                        for px in 0..MOCK_CELL {
                            let d = image16.pixel(cx * MOCK_CELL + px, cy * MOCK_CELL + py)
                                [ch]
                                - mean;
                            var += d * d;
                        }
                    }
                    var /= (MOCK_CELL * MOCK_CELL) as f64;
                    features[cell * 6 + ch] = mean;
                    features[cell * 6 + 3 + ch] = var;
                }
            }
        }
        features[MOCK_FEATURES - 1] = 1.0;
        features
    }

    fn project(&self, features: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|o| {
                let row = &self.projection[o * MOCK_FEATURES..(o + 1) * MOCK_FEATURES];
                row.iter().zip(features).map(|(w, f)| w * f).sum()
            })
            .collect()
    }
}

impl ImageEmbedder for MockEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, image: &ImageBuffer) -> Result<Embedding> {
        let small = resize_bilinear(image, MOCK_RESOLUTION, MOCK_RESOLUTION);
        Embedding::normalized(self.project(&Self::features(&small)))
    }

    fn embed_text(&self, prompt: &str) -> Result<Embedding> {
        if prompt.is_empty() {
            return Err(Error::InvalidInput("empty prompt".into()));
        }
        // Hash-seeded deterministic unit vector.
        let digest = Sha256::digest(prompt.as_bytes());
        let seed = u64::from_le_bytes(digest[..8].try_into().unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Embedding::normalized((0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn supports_vjp(&self) -> bool {
        true
    }

    fn embed_image_vjp(&self, image: &ImageBuffer, cotangent: &[f64]) -> Result<ImageBuffer> {
        if cotangent.len() != self.dim {
            return Err(Error::Dimension(format!(
                "cotangent has {} values, embedder dim is {}",
                cotangent.len(),
                self.dim
            )));
        }
        let small = resize_bilinear(image, MOCK_RESOLUTION, MOCK_RESOLUTION);
        let features = Self::features(&small);
        let z = self.project(&features);
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Numeric("embedding norm underflow".into()));
        }
        let e: Vec<f64> = z.iter().map(|v| v / norm).collect();
        // d z = (I - e e^T) cot / ||z||
        let dot: f64 = e.iter().zip(cotangent).map(|(a, b)| a * b).sum();
        let d_z: Vec<f64> = e
            .iter()
            .zip(cotangent)
            .map(|(ei, ci)| (ci - dot * ei) / norm)
            .collect();
        // d features = P^T d_z
        let mut d_feat = vec![0.0; MOCK_FEATURES];
        for o in 0..self.dim {
            let row = &self.projection[o * MOCK_FEATURES..(o + 1) * MOCK_FEATURES];
            let g = d_z[o];
            for (df, w) in d_feat.iter_mut().zip(row) {
                *df += g * w;
            }
        }
        // Through means/variances back onto the 16x16 grid.
        let cells_per_row = MOCK_RESOLUTION / MOCK_CELL;
        let n = (MOCK_CELL * MOCK_CELL) as f64;
        let mut d_small = ImageBuffer::new(MOCK_RESOLUTION, MOCK_RESOLUTION);
        for cy in 0..cells_per_row {
            for cx in 0..cells_per_row {
                let cell = cy * cells_per_row + cx;
                for ch in 0..3 {
                    let d_mean = d_feat[cell * 6 + ch];
                    let d_var = d_feat[cell * 6 + 3 + ch];
                    let mut mean = 0.0;
                    for py in 0..MOCK_CELL {
                        for px in 0..MOCK_CELL {
                            mean += small.pixel(cx * MOCK_CELL + px, cy * MOCK_CELL + py)[ch];
                        }
                    }
                    mean /= n;
                    for py in 0..MOCK_CELL {
                        for px in 0..MOCK_CELL {
                            let (x, y) = (cx * MOCK_CELL + px, cy * MOCK_CELL + py);
                            let p = small.pixel(x, y)[ch];
                            let idx = (y * MOCK_RESOLUTION + x) * 3 + ch;
                            d_small.data[idx] += d_mean / n + d_var * 2.0 * (p - mean) / n;
                        }
                    }
                }
            }
        }
        Ok(resize_bilinear_adjoint(&d_small, image.width, image.height))
    }
}

/// Client for the external adapter protocol. Calls serialize over one
/// connection; responses match by request id.
pub struct AdapterClient {
    inner: Mutex<AdapterInner>,
    locator: String,
}

struct AdapterInner {
    stream: Box<dyn ReadWrite>,
    next_id: u64,
    pending: std::collections::HashMap<u64, (u8, Vec<u8>)>,
}

trait ReadWrite: Read + Write + Send {}
impl<T: Read + Write + Send> ReadWrite for T {}

const KIND_IMAGE: u8 = 1;
const KIND_TEXT: u8 = 2;
const KIND_IMAGE_VJP: u8 = 3;
const KIND_PAIR: u8 = 4;
const KIND_PAIR_VJP: u8 = 5;

fn push_image_f32(buf: &mut Vec<u8>, image: &ImageBuffer) {
    buf.extend_from_slice(&(image.height as u32).to_le_bytes());
    buf.extend_from_slice(&(image.width as u32).to_le_bytes());
    for v in &image.data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

impl AdapterClient {
    pub fn connect(locator: &str) -> Result<AdapterClient> {
        let stream: Box<dyn ReadWrite> = if let Some(path) = locator.strip_prefix("unix:") {
            Box::new(
                std::os::unix::net::UnixStream::connect(path)
                    .map_err(|e| Error::Adapter(format!("connect {locator}: {e}")))?,
            )
        } else if let Some(addr) = locator.strip_prefix("tcp:") {
            Box::new(
                std::net::TcpStream::connect(addr)
                    .map_err(|e| Error::Adapter(format!("connect {locator}: {e}")))?,
            )
        } else {
            return Err(Error::Adapter(format!(
                "adapter locator `{locator}` must start with unix: or tcp:"
            )));
        };
        Ok(AdapterClient {
            inner: Mutex::new(AdapterInner {
                stream,
                next_id: 1,
                pending: Default::default(),
            }),
            locator: locator.to_string(),
        })
    }

    fn call(&self, kind: u8, body: &[u8]) -> Result<Vec<f64>> {
        let mut inner = self
            .inner
            .lock()
            .map_err(|_| Error::Adapter("adapter client poisoned".into()))?;
        let id = inner.next_id;
        inner.next_id += 1;

        let mut payload = Vec::with_capacity(9 + body.len());
        payload.extend_from_slice(&id.to_le_bytes());
        payload.push(kind);
        payload.extend_from_slice(body);
        let err = |e: std::io::Error| Error::Adapter(format!("adapter {}: {e}", self.locator));
        inner
            .stream
            .write_all(&(payload.len() as u64).to_le_bytes())
            .map_err(err)?;
        inner.stream.write_all(&payload).map_err(err)?;
        inner.stream.flush().map_err(err)?;

        let (status, body) = loop {
            if let Some(resp) = inner.pending.remove(&id) {
                break resp;
            }
            let mut len_bytes = [0u8; 8];
            inner.stream.read_exact(&mut len_bytes).map_err(err)?;
            let len = u64::from_le_bytes(len_bytes) as usize;
            if len < 9 {
                return Err(Error::Adapter("adapter sent a short frame".into()));
            }
            let mut frame = vec![0u8; len];
            inner.stream.read_exact(&mut frame).map_err(err)?;
            let resp_id = u64::from_le_bytes(frame[..8].try_into().unwrap());
            let status = frame[8];
            let body = frame[9..].to_vec();
            if resp_id == id {
                break (status, body);
            }
            inner.pending.insert(resp_id, (status, body));
        };

        if status != 0 {
            return Err(Error::Adapter(format!(
                "adapter {}: {}",
                self.locator,
                String::from_utf8_lossy(&body)
            )));
        }
        if body.len() < 4 {
            return Err(Error::Adapter("adapter response missing count".into()));
        }
        let count = u32::from_le_bytes(body[..4].try_into().unwrap()) as usize;
        if body.len() != 4 + count * 4 {
            return Err(Error::Adapter(format!(
                "adapter response: {} bytes for {count} values",
                body.len()
            )));
        }
        Ok(body[4..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    pub fn image_request(&self, image: &ImageBuffer) -> Result<Vec<f64>> {
        let mut body = Vec::new();
        push_image_f32(&mut body, image);
        self.call(KIND_IMAGE, &body)
    }

    pub fn text_request(&self, prompt: &str) -> Result<Vec<f64>> {
        self.call(KIND_TEXT, prompt.as_bytes())
    }

    pub fn image_vjp_request(&self, image: &ImageBuffer, cotangent: &[f64]) -> Result<Vec<f64>> {
        let mut body = Vec::new();
        push_image_f32(&mut body, image);
        body.extend_from_slice(&(cotangent.len() as u32).to_le_bytes());
        for v in cotangent {
            body.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        self.call(KIND_IMAGE_VJP, &body)
    }

    pub fn pair_request(&self, a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
        a.same_resolution(b)?;
        let mut body = Vec::new();
        push_image_f32(&mut body, a);
        for v in &b.data {
            body.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let values = self.call(KIND_PAIR, &body)?;
        values
            .first()
            .copied()
            .ok_or_else(|| Error::Adapter("empty pair-metric response".into()))
    }

    pub fn pair_vjp_request(&self, a: &ImageBuffer, b: &ImageBuffer) -> Result<Vec<f64>> {
        a.same_resolution(b)?;
        let mut body = Vec::new();
        push_image_f32(&mut body, a);
        for v in &b.data {
            body.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        self.call(KIND_PAIR_VJP, &body)
    }
}

/// Embedder backed by an [`AdapterClient`]; images resize to the adapter's
/// expected resolution before crossing the wire.
pub struct AdapterEmbedder {
    client: AdapterClient,
    resolution: usize,
}

impl AdapterEmbedder {
    pub fn connect(locator: &str, resolution: usize) -> Result<AdapterEmbedder> {
        Ok(AdapterEmbedder {
            client: AdapterClient::connect(locator)?,
            resolution,
        })
    }
}

impl ImageEmbedder for AdapterEmbedder {
    fn dim(&self) -> usize {
        0 // reported per response
    }

    fn embed_image(&self, image: &ImageBuffer) -> Result<Embedding> {
        let resized = resize_bilinear(image, self.resolution, self.resolution);
        Embedding::normalized(self.client.image_request(&resized)?)
    }

    fn embed_text(&self, prompt: &str) -> Result<Embedding> {
        if prompt.is_empty() {
            return Err(Error::InvalidInput("empty prompt".into()));
        }
        Embedding::normalized(self.client.text_request(prompt)?)
    }

    fn supports_vjp(&self) -> bool {
        true
    }

    fn embed_image_vjp(&self, image: &ImageBuffer, cotangent: &[f64]) -> Result<ImageBuffer> {
        let resized = resize_bilinear(image, self.resolution, self.resolution);
        let flat = self.client.image_vjp_request(&resized, cotangent)?;
        if flat.len() != self.resolution * self.resolution * 3 {
            return Err(Error::Adapter(format!(
                "vjp response has {} values, expected {}",
                flat.len(),
                self.resolution * self.resolution * 3
            )));
        }
        let d_resized = ImageBuffer {
            width: self.resolution,
            height: self.resolution,
            data: flat,
        };
        Ok(resize_bilinear_adjoint(&d_resized, image.width, image.height))
    }
}
