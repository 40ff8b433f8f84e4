//! The training objectives: reconstruction (perceptual + MSE), semantic
//! embedding distance, and the soft silhouette constraint, plus the branch
//! combination rule. Every loss exposes the gradient w.r.t. its rendered
//! input so the renderer backward pass can consume it.

use crate::buffers::{AlphaMap, ImageBuffer, SilhouetteMask};
use crate::embedder::{AdapterClient, Embedding, ImageEmbedder};
use crate::error::{Error, Result};
use crate::imageops::{pyramid_down, pyramid_down_adjoint};
use crate::rasterizer::{mask_edge, Connectivity};
use std::collections::BTreeMap;

/// Chamfer-term domain of the silhouette loss.
///
/// `Literal` sums the alpha-weighted distance over every silhouette pixel.
/// `BoundaryBand` (the training default) restricts it to pixels within a
/// band of the mask edge, which keeps interior opacity unpenalized at a
/// perfect fit. `Hard` additionally punishes opacity outside the mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SilhouetteMode {
    Literal,
    BoundaryBand,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossBranch {
    InputView,
    NovelView,
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    ReconMse,
    ReconPerceptual,
    Semantic,
    SilMse,
    SilChamfer,
}

/// Per-iteration loss bookkeeping: raw term values plus the weighted total.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossReport {
    pub branch: LossBranch,
    pub total: f64,
    pub terms: BTreeMap<LossTerm, f64>,
}

/// Charbonnier (smooth-L1) penalty used per pyramid level; smooth so its
/// gradient passes finite-difference audits.
const CHARBONNIER_EPS: f64 = 1e-3;

#[inline]
fn charbonnier(d: f64) -> f64 {
    (d * d + CHARBONNIER_EPS * CHARBONNIER_EPS).sqrt() - CHARBONNIER_EPS
}

#[inline]
fn charbonnier_grad(d: f64) -> f64 {
    d / (d * d + CHARBONNIER_EPS * CHARBONNIER_EPS).sqrt()
}

/// Perceptual-metric handle: the built-in Gaussian-pyramid smooth-L1, an
/// external adapter, or zero (disables the term).
pub enum PerceptualMetric {
    BuiltinPyramid { levels: usize },
    Adapter(AdapterClient),
    Zero,
}

impl PerceptualMetric {
    pub fn builtin() -> Self {
        PerceptualMetric::BuiltinPyramid { levels: 3 }
    }

    /// Parse a config value: `builtin`, `zero`, or `adapter:<locator>`.
    pub fn from_config(value: &str) -> Result<Self> {
        match value {
            "builtin" => Ok(Self::builtin()),
            "zero" => Ok(PerceptualMetric::Zero),
            other => {
                if let Some(locator) = other.strip_prefix("adapter:") {
                    Ok(PerceptualMetric::Adapter(AdapterClient::connect(locator)?))
                } else {
                    Err(Error::Config(format!(
                        "perceptual `{other}` is neither builtin, zero, nor adapter:<locator>"
                    )))
                }
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PerceptualMetric::BuiltinPyramid { .. } => "builtin-pyramid",
            PerceptualMetric::Adapter(_) => "adapter",
            PerceptualMetric::Zero => "zero",
        }
    }

    pub fn supports_vjp(&self) -> bool {
        !matches!(self, PerceptualMetric::Adapter(_))
    }

    pub fn value(&self, a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
        a.same_resolution(b)?;
        match self {
            PerceptualMetric::Zero => Ok(0.0),
            PerceptualMetric::Adapter(client) => client.pair_request(a, b),
            PerceptualMetric::BuiltinPyramid { levels } => {
                let mut total = 0.0;
                let mut la = a.clone();
                let mut lb = b.clone();
                for level in 0..*levels {
                    if level > 0 {
                        la = pyramid_down(&la);
                        lb = pyramid_down(&lb);
                    }
                    let mean: f64 = la
                        .data
                        .iter()
                        .zip(&lb.data)
                        .map(|(x, y)| charbonnier(x - y))
                        .sum::<f64>()
                        / la.data.len() as f64;
                    total += mean;
                }
                Ok(total / *levels as f64)
            }
        }
    }

    /// Value plus gradient w.r.t. the first image.
    pub fn vjp(&self, a: &ImageBuffer, b: &ImageBuffer) -> Result<(f64, ImageBuffer)> {
        a.same_resolution(b)?;
        match self {
            PerceptualMetric::Zero => Ok((0.0, ImageBuffer::new(a.width, a.height))),
            PerceptualMetric::Adapter(client) => {
                let value = client.pair_request(a, b)?;
                let flat = client.pair_vjp_request(a, b)?;
                if flat.len() != a.data.len() {
                    return Err(Error::Adapter(format!(
                        "pair vjp returned {} values, expected {}",
                        flat.len(),
                        a.data.len()
                    )));
                }
                Ok((
                    value,
                    ImageBuffer {
                        width: a.width,
                        height: a.height,
                        data: flat,
                    },
                ))
            }
            PerceptualMetric::BuiltinPyramid { levels } => {
                let mut total = 0.0;
                let mut sizes = Vec::with_capacity(*levels);
                let mut level_grads: Vec<ImageBuffer> = Vec::with_capacity(*levels);
                let mut la = a.clone();
                let mut lb = b.clone();
                for level in 0..*levels {
                    if level > 0 {
                        la = pyramid_down(&la);
                        lb = pyramid_down(&lb);
                    }
                    sizes.push((la.width, la.height));
                    let scale = 1.0 / (la.data.len() as f64 * *levels as f64);
                    let mut g = ImageBuffer::new(la.width, la.height);
                    let mut acc = 0.0;
                    for (i, (x, y)) in la.data.iter().zip(&lb.data).enumerate() {
                        let d = x - y;
                        acc += charbonnier(d);
                        g.data[i] = charbonnier_grad(d) * scale;
                    }
                    total += acc / la.data.len() as f64;
                    level_grads.push(g);
                }
                // Chain each level's gradient back up through the adjoint
                // reductions, coarsest first.
                let mut grad = level_grads.pop().unwrap();
                for level in (0..*levels - 1).rev() {
                    let (w, h) = sizes[level];
                    grad = pyramid_down_adjoint(&grad, w, h);
                    for (g, l) in grad.data.iter_mut().zip(&level_grads[level].data) {
                        *g += l;
                    }
                }
                Ok((total / *levels as f64, grad))
            }
        }
    }
}

/// Reconstruction objective: `perceptual(rendered, target) + lambda_mse * MSE`.
pub fn reconstruction_loss(
    rendered: &ImageBuffer,
    target: &ImageBuffer,
    perceptual: &PerceptualMetric,
    lambda_mse: f64,
) -> Result<(f64, f64)> {
    rendered.same_resolution(target)?;
    let mse = rendered.mse(target)?;
    let p = perceptual.value(rendered, target)?;
    let _ = lambda_mse;
    Ok((mse, p))
}

/// Reconstruction value split plus gradient of
/// `perceptual + lambda_mse * mse` w.r.t. the rendered image.
pub fn reconstruction_vjp(
    rendered: &ImageBuffer,
    target: &ImageBuffer,
    perceptual: &PerceptualMetric,
    lambda_mse: f64,
) -> Result<(f64, f64, ImageBuffer)> {
    rendered.same_resolution(target)?;
    let mse = rendered.mse(target)?;
    let (p, mut grad) = perceptual.vjp(rendered, target)?;
    let n = rendered.data.len() as f64;
    for (g, (r, t)) in grad
        .data
        .iter_mut()
        .zip(rendered.data.iter().zip(&target.data))
    {
        *g += lambda_mse * 2.0 * (r - t) / n;
    }
    Ok((mse, p, grad))
}

/// Semantic loss against a single reference embedding.
pub fn semantic_loss_with(
    embedder: &dyn ImageEmbedder,
    rendered: &ImageBuffer,
    reference: &Embedding,
) -> Result<f64> {
    crate::embedder::embedding_distance(&embedder.embed_image(rendered)?, reference)
}

/// Weighted multi-reference semantic loss; weights should sum to 1.
pub fn semantic_loss_multi(
    embedder: &dyn ImageEmbedder,
    rendered: &ImageBuffer,
    references: &[(Embedding, f64)],
) -> Result<f64> {
    let e = embedder.embed_image(rendered)?;
    let mut total = 0.0;
    for (reference, weight) in references {
        total += weight * crate::embedder::embedding_distance(&e, reference)?;
    }
    Ok(total)
}

/// Multi-reference semantic loss plus gradient w.r.t. the rendered image.
pub fn semantic_vjp_multi(
    embedder: &dyn ImageEmbedder,
    rendered: &ImageBuffer,
    references: &[(Embedding, f64)],
) -> Result<(f64, ImageBuffer)> {
    let e = embedder.embed_image(rendered)?;
    let mut total = 0.0;
    let mut cotangent = vec![0.0; e.dim()];
    for (reference, weight) in references {
        total += weight * crate::embedder::embedding_distance(&e, reference)?;
        for (c, r) in cotangent.iter_mut().zip(&reference.0) {
            *c -= weight * r;
        }
    }
    let grad = embedder.embed_image_vjp(rendered, &cotangent)?;
    Ok((total, grad))
}

/// Exact Euclidean distance (pixels) from every pixel to the nearest seed,
/// via the two-pass parabolic lower-envelope transform on squared distances.
pub fn distance_to_set(width: usize, height: usize, seeds: &[(usize, usize)]) -> Vec<f64> {
    const INF: f64 = 1e18;
    let mut sq = vec![INF; width * height];
    for &(x, y) in seeds {
        sq[y * width + x] = 0.0;
    }

    fn edt_1d(f: &[f64], out: &mut [f64]) {
        let n = f.len();
        let mut v = vec![0usize; n];
        let mut z = vec![0.0f64; n + 1];
        let mut k = 0usize;
        v[0] = 0;
        z[0] = -INF;
        z[1] = INF;
        for q in 1..n {
            let mut s;
            loop {
                let p = v[k];
                s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64))
                    / (2.0 * q as f64 - 2.0 * p as f64);
                if s <= z[k] {
                    if k == 0 {
                        break;
                    }
                    k -= 1;
                } else {
                    break;
                }
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = INF;
        }
        let mut k = 0usize;
        for (q, o) in out.iter_mut().enumerate() {
            while z[k + 1] < q as f64 {
                k += 1;
            }
            let p = v[k];
            let d = q as f64 - p as f64;
            *o = d * d + f[p];
        }
    }

    // Rows, then columns.
    let mut tmp = vec![0.0; width * height];
    let mut line = vec![0.0; width.max(height)];
    for y in 0..height {
        edt_1d(&sq[y * width..(y + 1) * width], &mut line[..width]);
        tmp[y * width..(y + 1) * width].copy_from_slice(&line[..width]);
    }
    let mut col = vec![0.0; height];
    for x in 0..width {
        for y in 0..height {
            col[y] = tmp[y * width + x];
        }
        edt_1d(&col, &mut line[..height]);
        for y in 0..height {
            sq[y * width + x] = line[y];
        }
    }
    sq.into_iter().map(f64::sqrt).collect()
}

/// Soft silhouette constraint on the rendered alpha map, computed only over
/// pixels the body-model silhouette covers (plus, in `Hard` mode, an outside
/// penalty). Returns `(sil_mse, sil_chamfer)`, both normalized by `|S|`.
pub fn silhouette_loss(
    alpha: &AlphaMap,
    mask: &SilhouetteMask,
    mode: SilhouetteMode,
    band: f64,
    connectivity: Connectivity,
) -> Result<(f64, f64)> {
    let (mse, chamfer, _) = silhouette_loss_impl(alpha, mask, mode, band, connectivity, false)?;
    Ok((mse, chamfer))
}

/// Values plus the gradient of `sil_mse + sil_chamfer` w.r.t. alpha.
pub fn silhouette_vjp(
    alpha: &AlphaMap,
    mask: &SilhouetteMask,
    mode: SilhouetteMode,
    band: f64,
    connectivity: Connectivity,
) -> Result<(f64, f64, AlphaMap)> {
    let (mse, chamfer, grad) = silhouette_loss_impl(alpha, mask, mode, band, connectivity, true)?;
    Ok((mse, chamfer, grad.expect("gradient requested")))
}

fn silhouette_loss_impl(
    alpha: &AlphaMap,
    mask: &SilhouetteMask,
    mode: SilhouetteMode,
    band: f64,
    connectivity: Connectivity,
    want_grad: bool,
) -> Result<(f64, f64, Option<AlphaMap>)> {
    if alpha.width != mask.width || alpha.height != mask.height {
        return Err(Error::ResolutionMismatch {
            left_width: alpha.width,
            left_height: alpha.height,
            right_width: mask.width,
            right_height: mask.height,
        });
    }
    let coverage = mask.count();
    if coverage == 0 {
        return Err(Error::InvalidInput("no silhouette".into()));
    }
    let edge = mask_edge(mask, connectivity);
    let dist = distance_to_set(mask.width, mask.height, &edge);
    let norm = coverage as f64;
    let outside = (mask.width * mask.height - coverage) as f64;

    let mut mse = 0.0;
    let mut chamfer = 0.0;
    let mut grad = want_grad.then(|| AlphaMap::new(alpha.width, alpha.height));
    for y in 0..mask.height {
        for x in 0..mask.width {
            let idx = y * mask.width + x;
            let a = alpha.data[idx];
            if mask.data[idx] {
                let d = a - 1.0;
                mse += d * d / norm;
                let in_domain = match mode {
                    SilhouetteMode::Literal | SilhouetteMode::Hard => true,
                    SilhouetteMode::BoundaryBand => dist[idx] <= band,
                };
                let mut g = 2.0 * d / norm;
                if in_domain {
                    chamfer += a * dist[idx] / norm;
                    g += dist[idx] / norm;
                }
                if let Some(gr) = grad.as_mut() {
                    gr.data[idx] = g;
                }
            } else if mode == SilhouetteMode::Hard && outside > 0.0 {
                chamfer += a * dist[idx] / outside;
                if let Some(gr) = grad.as_mut() {
                    gr.data[idx] = dist[idx] / outside;
                }
            }
        }
    }
    Ok((mse, chamfer, grad))
}

/// Combine per-branch terms by the published rule: the input-view branch is
/// pure reconstruction, the novel-view branch is
/// `lambda_clip * semantic + lambda_sil * (sil_mse + sil_chamfer)`.
///
/// A term may be absent only when its weight is zero (ablations); otherwise
/// absence is an error.
#[derive(Debug, Clone, Copy, Default)]
pub struct BranchTerms {
    pub recon_mse: Option<f64>,
    pub recon_perceptual: Option<f64>,
    pub semantic: Option<f64>,
    pub sil_mse: Option<f64>,
    pub sil_chamfer: Option<f64>,
}

pub fn combined_loss(
    branch: LossBranch,
    terms: BranchTerms,
    lambda_mse: f64,
    lambda_clip: f64,
    lambda_sil: f64,
) -> Result<LossReport> {
    let mut map = BTreeMap::new();
    let mut total = 0.0;
    let mut take = |name: LossTerm, value: Option<f64>, weight: f64| -> Result<()> {
        match value {
            Some(v) => {
                map.insert(name, v);
                total += weight * v;
                Ok(())
            }
            None if weight == 0.0 => Ok(()),
            None => Err(Error::InvalidInput(format!(
                "missing loss term {name:?} for branch {branch:?}"
            ))),
        }
    };
    match branch {
        LossBranch::InputView => {
            take(LossTerm::ReconPerceptual, terms.recon_perceptual, 1.0)?;
            take(LossTerm::ReconMse, terms.recon_mse, lambda_mse)?;
        }
        LossBranch::NovelView => {
            take(LossTerm::Semantic, terms.semantic, lambda_clip)?;
            take(LossTerm::SilMse, terms.sil_mse, lambda_sil)?;
            take(LossTerm::SilChamfer, terms.sil_chamfer, lambda_sil)?;
        }
    }
    Ok(LossReport {
        branch,
        total,
        terms: map,
    })
}
