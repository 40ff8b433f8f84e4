//! The canonical appearance volume: a coordinate MLP with frequency
//! positional encoding mapping position to color and density. Hidden
//! activations are softplus (smooth everywhere, so analytic gradients match
//! finite differences tightly); color goes through sigmoid and density
//! through softplus at the output.

use crate::error::{Error, Result};
use crate::math::{sigmoid, softplus, softplus_inverse, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Architecture descriptor: hidden layer count/width, the hidden layer that
/// receives the encoded-input skip (0 = none), and the positional-encoding
/// frequency count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FieldArch {
    pub hidden_layers: usize,
    pub width: usize,
    pub skip_at: usize,
    pub num_freqs: usize,
}

impl FieldArch {
    /// Full-scale default.
    pub fn full() -> Self {
        FieldArch {
            hidden_layers: 8,
            width: 256,
            skip_at: 4,
            num_freqs: 10,
        }
    }

    /// Desk-scale preset used by tests and the capsule pipeline.
    pub fn desk() -> Self {
        FieldArch {
            hidden_layers: 2,
            width: 16,
            skip_at: 0,
            num_freqs: 4,
        }
    }

    pub fn encoded_len(&self) -> usize {
        3 + 6 * self.num_freqs
    }

    /// Input width of hidden layer `i` (0-based).
    fn layer_input(&self, i: usize) -> usize {
        if i == 0 {
            self.encoded_len()
        } else if self.skip_at != 0 && i == self.skip_at {
            self.width + self.encoded_len()
        } else {
            self.width
        }
    }

    pub fn param_count(&self) -> usize {
        let mut count = 0;
        for i in 0..self.hidden_layers {
            count += (self.layer_input(i) + 1) * self.width;
        }
        count + (self.width + 1) * 4
    }

    fn validate(&self) -> Result<()> {
        if self.hidden_layers == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "field architecture needs layers and width, got {self:?}"
            )));
        }
        if self.skip_at != 0 && self.skip_at >= self.hidden_layers {
            return Err(Error::Config(format!(
                "field skip at layer {} but only {} hidden layers",
                self.skip_at, self.hidden_layers
            )));
        }
        Ok(())
    }
}

/// Learnable field: architecture plus a flat parameter vector laid out as
/// `[W0 row-major, b0, W1, b1, ..., W_out, b_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams {
    pub arch: FieldArch,
    pub values: Vec<f64>,
}

/// Color in `[0,1]^3` plus nonnegative density (1/meter).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadianceSample {
    pub color: [f64; 3],
    pub sigma: f64,
}

/// Initial density after softplus, chosen to avoid an empty field at step 0.
pub const INITIAL_DENSITY: f64 = 0.1;

impl FieldParams {
    /// Fan-in-scaled uniform init; the density output bias is set so the
    /// initial field has density ~[`INITIAL_DENSITY`] everywhere.
    pub fn init(arch: FieldArch, seed: u64) -> Result<FieldParams> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(arch.param_count());
        let mut push_layer = |rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize| {
            let scale = (6.0 / fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                values.push(rng.gen_range(-scale..scale));
            }
            for _ in 0..fan_out {
                values.push(0.0);
            }
        };
        for i in 0..arch.hidden_layers {
            push_layer(&mut rng, arch.layer_input(i), arch.width);
        }
        push_layer(&mut rng, arch.width, 4);
        let mut params = FieldParams { arch, values };
        let sigma_bias = params.values.len() - 1;
        params.values[sigma_bias] = softplus_inverse(INITIAL_DENSITY);
        Ok(params)
    }

    pub fn zeros(arch: FieldArch) -> Result<FieldParams> {
        arch.validate()?;
        Ok(FieldParams {
            arch,
            values: vec![0.0; arch.param_count()],
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.values.len() != self.arch.param_count() {
            return Err(Error::Dimension(format!(
                "field has {} parameters, architecture needs {}",
                self.values.len(),
                self.arch.param_count()
            )));
        }
        if !self.values.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite field parameter".into()));
        }
        Ok(())
    }

    /// Offset of layer `i`'s weights in the flat vector; the output layer is
    /// index `hidden_layers`.
    fn layer_offset(&self, layer: usize) -> usize {
        let mut offset = 0;
        for i in 0..layer {
            let fan_in = if i < self.arch.hidden_layers {
                self.arch.layer_input(i)
            } else {
                self.arch.width
            };
            let fan_out = if i < self.arch.hidden_layers {
                self.arch.width
            } else {
                4
            };
            offset += (fan_in + 1) * fan_out;
        }
        offset
    }
}

/// Frequency positional encoding:
/// `[x, sin(2^k pi x), cos(2^k pi x)]` for `k = 0..num_freqs`, per component.
pub fn encode(x: &Vec3, num_freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 + 6 * num_freqs);
    encode_into(x, num_freqs, &mut out);
    out
}

/// [`encode`] into a reused buffer.
pub fn encode_into(x: &Vec3, num_freqs: usize, out: &mut Vec<f64>) {
    out.clear();
    out.extend_from_slice(&[x.x, x.y, x.z]);
    for k in 0..num_freqs {
        let f = (1u64 << k) as f64 * std::f64::consts::PI;
        for c in 0..3 {
            out.push((f * x[c]).sin());
        }
        for c in 0..3 {
            out.push((f * x[c]).cos());
        }
    }
}

/// Accumulate `d(encoded)/dx^T * d_enc` into `d_x`.
fn encode_backward(x: &Vec3, num_freqs: usize, d_enc: &[f64], d_x: &mut Vec3) {
    for c in 0..3 {
        d_x[c] += d_enc[c];
    }
    for k in 0..num_freqs {
        let f = (1u64 << k) as f64 * std::f64::consts::PI;
        let base = 3 + 6 * k;
        for c in 0..3 {
            let arg = f * x[c];
            d_x[c] += d_enc[base + c] * f * arg.cos();
            d_x[c] -= d_enc[base + 3 + c] * f * arg.sin();
        }
    }
}

/// Reusable activations from one forward pass, consumed by the backward pass.
#[derive(Debug, Default, Clone)]
pub struct FieldTrace {
    enc: Vec<f64>,
    /// Pre-activations per hidden layer.
    pre: Vec<Vec<f64>>,
    /// Post-activations per hidden layer.
    act: Vec<Vec<f64>>,
    /// Raw 4-vector before the output activations.
    out: [f64; 4],
    x: Vec3,
}

fn matvec(params: &[f64], offset: usize, fan_in: usize, fan_out: usize, input: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.reserve(fan_out);
    let weights = &params[offset..offset + fan_in * fan_out];
    let biases = &params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
    for o in 0..fan_out {
        let row = &weights[o * fan_in..(o + 1) * fan_in];
        let mut acc = biases[o];
        for (w, v) in row.iter().zip(input) {
            acc += w * v;
        }
        out.push(acc);
    }
}

/// Forward pass storing every activation in `trace`.
pub fn evaluate_with_trace(
    params: &FieldParams,
    x: &Vec3,
    trace: &mut FieldTrace,
) -> Result<RadianceSample> {
    let arch = &params.arch;
    if !(x.x.is_finite() && x.y.is_finite() && x.z.is_finite()) {
        return Err(Error::Numeric(format!("non-finite field input {x:?}")));
    }
    trace.x = *x;
    let mut enc = std::mem::take(&mut trace.enc);
    encode_into(x, arch.num_freqs, &mut enc);
    trace.enc = enc;
    trace.pre.resize(arch.hidden_layers, Vec::new());
    trace.act.resize(arch.hidden_layers, Vec::new());

    let mut skip_input: Vec<f64> = Vec::new();
    for i in 0..arch.hidden_layers {
        let fan_in = arch.layer_input(i);
        let offset = params.layer_offset(i);
        // Borrow juggling: pull the layer's pre buffer out while reading the
        // previous activation.
        let mut pre = std::mem::take(&mut trace.pre[i]);
        {
            let input: &[f64] = if i == 0 {
                &trace.enc
            } else if arch.skip_at != 0 && i == arch.skip_at {
                skip_input.clear();
                skip_input.extend_from_slice(&trace.act[i - 1]);
                skip_input.extend_from_slice(&trace.enc);
                &skip_input
            } else {
                &trace.act[i - 1]
            };
            matvec(&params.values, offset, fan_in, arch.width, input, &mut pre);
        }
        for v in &pre {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "hidden layer {i} produced a non-finite value"
                )));
            }
        }
        let act = std::mem::take(&mut trace.act[i]);
        let mut act = act;
        act.clear();
        act.extend(pre.iter().map(|&v| softplus(v)));
        trace.pre[i] = pre;
        trace.act[i] = act;
    }

    let offset = params.layer_offset(arch.hidden_layers);
    let mut out = Vec::new();
    matvec(
        &params.values,
        offset,
        arch.width,
        4,
        &trace.act[arch.hidden_layers - 1],
        &mut out,
    );
    for v in &out {
        if !v.is_finite() {
            return Err(Error::Numeric(
                "output layer produced a non-finite value".into(),
            ));
        }
    }
    trace.out = [out[0], out[1], out[2], out[3]];
    Ok(RadianceSample {
        color: [sigmoid(out[0]), sigmoid(out[1]), sigmoid(out[2])],
        sigma: softplus(out[3]),
    })
}

/// Forward pass without keeping the trace.
pub fn evaluate(params: &FieldParams, x: &Vec3) -> Result<RadianceSample> {
    let mut trace = FieldTrace::default();
    evaluate_with_trace(params, x, &mut trace)
}

/// Backward pass for one sample: given gradients w.r.t. the activated
/// outputs (color after sigmoid, sigma after softplus), accumulate parameter
/// gradients into `grad` and return the gradient w.r.t. the input position.
pub fn backward(
    params: &FieldParams,
    trace: &FieldTrace,
    d_color: &[f64; 3],
    d_sigma: f64,
    grad: &mut [f64],
) -> Vec3 {
    let arch = &params.arch;
    debug_assert_eq!(grad.len(), params.values.len());

    // Through the output activations.
    let mut d_out = [0.0; 4];
    for c in 0..3 {
        let s = sigmoid(trace.out[c]);
        d_out[c] = d_color[c] * s * (1.0 - s);
    }
    d_out[3] = d_sigma * sigmoid(trace.out[3]);

    // Output layer.
    let offset = params.layer_offset(arch.hidden_layers);
    let last_act = &trace.act[arch.hidden_layers - 1];
    let mut d_act: Vec<f64> = vec![0.0; arch.width];
    {
        let w = &params.values[offset..offset + arch.width * 4];
        for o in 0..4 {
            let row = &w[o * arch.width..(o + 1) * arch.width];
            let g = d_out[o];
            grad[offset + arch.width * 4 + o] += g; // bias
            for (i, (&wi, &ai)) in row.iter().zip(last_act).enumerate() {
                grad[offset + o * arch.width + i] += g * ai;
                d_act[i] += g * wi;
            }
        }
    }

    // Hidden layers, backwards.
    let mut d_enc = vec![0.0; arch.encoded_len()];
    for i in (0..arch.hidden_layers).rev() {
        let fan_in = arch.layer_input(i);
        let offset = params.layer_offset(i);
        // softplus'(pre) = sigmoid(pre)
        let mut d_pre = d_act;
        for (g, &p) in d_pre.iter_mut().zip(&trace.pre[i]) {
            *g *= sigmoid(p);
        }
        let mut d_input = vec![0.0; fan_in];
        let w = &params.values[offset..offset + fan_in * arch.width];
        for o in 0..arch.width {
            let g = d_pre[o];
            if g == 0.0 {
                continue;
            }
            grad[offset + fan_in * arch.width + o] += g; // bias
            let row = &w[o * fan_in..(o + 1) * fan_in];
            let gw = &mut grad[offset + o * fan_in..offset + (o + 1) * fan_in];
            if i == 0 {
                for k in 0..fan_in {
                    gw[k] += g * trace.enc[k];
                    d_input[k] += g * row[k];
                }
            } else if arch.skip_at != 0 && i == arch.skip_at {
                let prev = &trace.act[i - 1];
                for k in 0..arch.width {
                    gw[k] += g * prev[k];
                    d_input[k] += g * row[k];
                }
                for k in arch.width..fan_in {
                    gw[k] += g * trace.enc[k - arch.width];
                    d_input[k] += g * row[k];
                }
            } else {
                let prev = &trace.act[i - 1];
                for k in 0..fan_in {
                    gw[k] += g * prev[k];
                    d_input[k] += g * row[k];
                }
            }
        }
        if i == 0 {
            for (acc, g) in d_enc.iter_mut().zip(&d_input) {
                *acc += g;
            }
            d_act = Vec::new();
        } else if arch.skip_at != 0 && i == arch.skip_at {
            for (acc, g) in d_enc.iter_mut().zip(&d_input[arch.width..]) {
                *acc += g;
            }
            d_act = d_input[..arch.width].to_vec();
        } else {
            d_act = d_input;
        }
    }

    let mut d_x = Vec3::zeros();
    encode_backward(&trace.x, arch.num_freqs, &d_enc, &mut d_x);
    d_x
}

/// A differentiable scalar of the field parameters: `value` recomputes the
/// scalar from scratch, `backward` accumulates its analytic gradient. The
/// two routes stay independent so finite differences of `value` can audit
/// `backward`.
pub trait LossClosure {
    fn value(&self, params: &FieldParams) -> Result<f64>;
    fn backward(&self, params: &FieldParams, grad: &mut [f64]) -> Result<f64>;
}

/// Parameter-shaped gradient of a scalar loss closure.
pub fn gradient(params: &FieldParams, closure: &dyn LossClosure) -> Result<Vec<f64>> {
    params.validate()?;
    let mut grad = vec![0.0; params.values.len()];
    closure.backward(params, &mut grad)?;
    if let Some(idx) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient at parameter {idx}"
        )));
    }
    Ok(grad)
}
