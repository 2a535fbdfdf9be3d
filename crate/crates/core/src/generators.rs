//! View-adaptive generators.
//!
//! Both networks share one architecture: two stride-2 convolutions encode the
//! view's image into 16×16 tokens, the tokens are projected into keys and
//! values, and the flattened world-to-camera matrix is embedded as the single
//! attention query. The attended vector goes through an output projection and
//! a two-layer feed-forward head:
//!
//! - curve head: 256 outputs squashed to a bounded curve bias `0.2·tanh(raw)`;
//! - parameter head: 3 outputs squashed into the power/S-curve prior ranges.
//!
//! Forward passes return a tape; the backward pass consumes it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::img::Image;
use crate::instrument;
use crate::scene::{sigmoid, Camera};
use crate::tonecurve::{PriorParams, LUT_SIZE};

pub const INPUT_SIZE: usize = 64;
pub const CONV1_CH: usize = 16;
pub const CONV2_CH: usize = 32;
pub const TOKEN_GRID: usize = 16;
pub const TOKENS: usize = TOKEN_GRID * TOKEN_GRID;
pub const MODEL_DIM: usize = 64;
pub const QUERY_DIM: usize = 16;
pub const BIAS_BOUND: f64 = 0.2;
const LEAK: f64 = 0.01;

/// Ranges enforced by the parameter head's squashing.
pub const G_RANGE: (f64, f64) = (0.25, 4.0);
pub const A_RANGE: (f64, f64) = (0.01, 0.99);
pub const B_RANGE: (f64, f64) = (0.5, 4.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    CurveBias,
    PriorParams,
}

impl Head {
    fn hidden(self) -> usize {
        match self {
            Head::CurveBias => LUT_SIZE,
            Head::PriorParams => MODEL_DIM,
        }
    }

    pub fn outputs(self) -> usize {
        match self {
            Head::CurveBias => LUT_SIZE,
            Head::PriorParams => 3,
        }
    }
}

/// Dense layer, weights stored `[out][in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn random(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut l = Self::zeros(inputs, outputs);
        l.weight.iter_mut().for_each(|w| *w = rng.gen_range(-bound..bound));
        l.bias.iter_mut().for_each(|b| *b = rng.gen_range(-bound..bound));
        l
    }

    fn forward(&self, x: &[f64], out: &mut [f64]) {
        for o in 0..self.outputs {
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            out[o] = self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    /// Accumulates weight gradients into `grad` and returns dL/dx when asked.
    fn backward(&self, x: &[f64], d_out: &[f64], grad: &mut Linear, d_x: Option<&mut [f64]>) {
        for o in 0..self.outputs {
            let g = d_out[o];
            grad.bias[o] += g;
            if g != 0.0 {
                let row = &mut grad.weight[o * self.inputs..(o + 1) * self.inputs];
                row.iter_mut().zip(x).for_each(|(w, v)| *w += g * v);
            }
        }
        if let Some(d_x) = d_x {
            for (i, dx) in d_x.iter_mut().enumerate() {
                let mut acc = 0.0;
                for o in 0..self.outputs {
                    acc += self.weight[o * self.inputs + i] * d_out[o];
                }
                *dx += acc;
            }
        }
    }
}

/// 3×3 convolution, stride 2, zero padding 1. Weights `[out][ky][kx][in]`,
/// activations height × width × channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; outputs * 9 * inputs],
            bias: vec![0.0; outputs],
        }
    }

    fn random(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / ((9 * inputs) as f64).sqrt();
        let mut c = Self::zeros(inputs, outputs);
        c.weight.iter_mut().for_each(|w| *w = rng.gen_range(-bound..bound));
        c.bias.iter_mut().for_each(|b| *b = rng.gen_range(-bound..bound));
        c
    }

    fn forward(&self, input: &[f64], size: usize) -> Vec<f64> {
        let out_size = size / 2;
        let mut out = vec![0.0; out_size * out_size * self.outputs];
        for oy in 0..out_size {
            for ox in 0..out_size {
                let dst = &mut out[(oy * out_size + ox) * self.outputs..][..self.outputs];
                dst.copy_from_slice(&self.bias);
                for ky in 0..3 {
                    let iy = (2 * oy + ky) as isize - 1;
                    if iy < 0 || iy >= size as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (2 * ox + kx) as isize - 1;
                        if ix < 0 || ix >= size as isize {
                            continue;
                        }
                        let src = &input[(iy as usize * size + ix as usize) * self.inputs..][..self.inputs];
                        for (o, d) in dst.iter_mut().enumerate() {
                            let w = &self.weight[((o * 3 + ky) * 3 + kx) * self.inputs..][..self.inputs];
                            *d += w.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
        }
        out
    }

    fn backward(&self, input: &[f64], size: usize, d_out: &[f64], grad: &mut Conv, mut d_input: Option<&mut [f64]>) {
        let out_size = size / 2;
        for oy in 0..out_size {
            for ox in 0..out_size {
                let g = &d_out[(oy * out_size + ox) * self.outputs..][..self.outputs];
                for (o, gv) in g.iter().enumerate() {
                    grad.bias[o] += gv;
                }
                for ky in 0..3 {
                    let iy = (2 * oy + ky) as isize - 1;
                    if iy < 0 || iy >= size as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (2 * ox + kx) as isize - 1;
                        if ix < 0 || ix >= size as isize {
                            continue;
                        }
                        let base = (iy as usize * size + ix as usize) * self.inputs;
                        let src = &input[base..base + self.inputs];
                        for (o, &gv) in g.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            let off = ((o * 3 + ky) * 3 + kx) * self.inputs;
                            let gw = &mut grad.weight[off..off + self.inputs];
                            gw.iter_mut().zip(src).for_each(|(w, s)| *w += gv * s);
                            if let Some(d_in) = d_input.as_deref_mut() {
                                let w = &self.weight[off..off + self.inputs];
                                d_in[base..base + self.inputs]
                                    .iter_mut()
                                    .zip(w)
                                    .for_each(|(d, w)| *d += gv * w);
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAK * x
    }
}

#[inline]
fn leaky_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAK
    }
}

/// All weights of one generator. Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorWeights {
    pub head: Head,
    pub conv1: Conv,
    pub conv2: Conv,
    pub key_proj: Linear,
    pub value_proj: Linear,
    pub query_embed: Linear,
    pub attn_out: Linear,
    pub ffn1: Linear,
    pub ffn2: Linear,
}

impl GeneratorWeights {
    pub fn zeros(head: Head) -> Self {
        Self {
            head,
            conv1: Conv::zeros(3, CONV1_CH),
            conv2: Conv::zeros(CONV1_CH, CONV2_CH),
            key_proj: Linear::zeros(CONV2_CH, MODEL_DIM),
            value_proj: Linear::zeros(CONV2_CH, MODEL_DIM),
            query_embed: Linear::zeros(QUERY_DIM, MODEL_DIM),
            attn_out: Linear::zeros(MODEL_DIM, MODEL_DIM),
            ffn1: Linear::zeros(MODEL_DIM, head.hidden()),
            ffn2: Linear::zeros(head.hidden(), head.outputs()),
        }
    }

    /// Fan-in scaled uniform trunk, zero output layer.
    pub fn init(head: Head, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            head,
            conv1: Conv::random(3, CONV1_CH, &mut rng),
            conv2: Conv::random(CONV1_CH, CONV2_CH, &mut rng),
            key_proj: Linear::random(CONV2_CH, MODEL_DIM, &mut rng),
            value_proj: Linear::random(CONV2_CH, MODEL_DIM, &mut rng),
            query_embed: Linear::random(QUERY_DIM, MODEL_DIM, &mut rng),
            attn_out: Linear::random(MODEL_DIM, MODEL_DIM, &mut rng),
            ffn1: Linear::random(MODEL_DIM, head.hidden(), &mut rng),
            ffn2: Linear::zeros(head.hidden(), head.outputs()),
        }
    }

    /// Fully random weights including the output layer (tests and audits).
    pub fn random(head: Head, seed: u64, scale: f64) -> Self {
        let mut w = Self::init(head, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        let b = scale / (head.hidden() as f64).sqrt();
        w.ffn2.weight.iter_mut().for_each(|v| *v = rng.gen_range(-b..b));
        w.ffn2.bias.iter_mut().for_each(|v| *v = rng.gen_range(-b..b));
        w
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.head)
    }

    /// Named parameter tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &Vec<f64>)> {
        vec![
            ("conv1.weight", &self.conv1.weight),
            ("conv1.bias", &self.conv1.bias),
            ("conv2.weight", &self.conv2.weight),
            ("conv2.bias", &self.conv2.bias),
            ("key_proj.weight", &self.key_proj.weight),
            ("key_proj.bias", &self.key_proj.bias),
            ("value_proj.weight", &self.value_proj.weight),
            ("value_proj.bias", &self.value_proj.bias),
            ("query_embed.weight", &self.query_embed.weight),
            ("query_embed.bias", &self.query_embed.bias),
            ("attn_out.weight", &self.attn_out.weight),
            ("attn_out.bias", &self.attn_out.bias),
            ("ffn1.weight", &self.ffn1.weight),
            ("ffn1.bias", &self.ffn1.bias),
            ("ffn2.weight", &self.ffn2.weight),
            ("ffn2.bias", &self.ffn2.bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        vec![
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.key_proj.weight,
            &mut self.key_proj.bias,
            &mut self.value_proj.weight,
            &mut self.value_proj.bias,
            &mut self.query_embed.weight,
            &mut self.query_embed.bias,
            &mut self.attn_out.weight,
            &mut self.attn_out.bias,
            &mut self.ffn1.weight,
            &mut self.ffn1.bias,
            &mut self.ffn2.weight,
            &mut self.ffn2.bias,
        ]
    }

    /// Tensor shapes matching `tensors()`.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let conv = |c: &Conv| vec![c.outputs, 3, 3, c.inputs];
        let lin = |l: &Linear| vec![l.outputs, l.inputs];
        vec![
            conv(&self.conv1),
            vec![self.conv1.outputs],
            conv(&self.conv2),
            vec![self.conv2.outputs],
            lin(&self.key_proj),
            vec![self.key_proj.outputs],
            lin(&self.value_proj),
            vec![self.value_proj.outputs],
            lin(&self.query_embed),
            vec![self.query_embed.outputs],
            lin(&self.attn_out),
            vec![self.attn_out.outputs],
            lin(&self.ffn1),
            vec![self.ffn1.outputs],
            lin(&self.ffn2),
            vec![self.ffn2.outputs],
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// Cross-attention of one query over a token set.
#[derive(Clone, Debug)]
pub struct AttentionTape {
    pub tokens: Vec<f64>,
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
    pub query: Vec<f64>,
    pub weights: Vec<f64>,
    pub attended: Vec<f64>,
}

/// Scaled dot-product attention with one query. `tokens` is `n × CONV2_CH`.
pub fn attend(w: &GeneratorWeights, tokens: &[f64], query_input: &[f64]) -> AttentionTape {
    let n = tokens.len() / CONV2_CH;
    let mut keys = vec![0.0; n * MODEL_DIM];
    let mut values = vec![0.0; n * MODEL_DIM];
    for t in 0..n {
        let tok = &tokens[t * CONV2_CH..(t + 1) * CONV2_CH];
        w.key_proj.forward(tok, &mut keys[t * MODEL_DIM..(t + 1) * MODEL_DIM]);
        w.value_proj.forward(tok, &mut values[t * MODEL_DIM..(t + 1) * MODEL_DIM]);
    }
    let mut query = vec![0.0; MODEL_DIM];
    w.query_embed.forward(query_input, &mut query);
    let scale = 1.0 / (MODEL_DIM as f64).sqrt();
    let scores: Vec<f64> = (0..n)
        .map(|t| {
            keys[t * MODEL_DIM..(t + 1) * MODEL_DIM]
                .iter()
                .zip(&query)
                .map(|(k, q)| k * q)
                .sum::<f64>()
                * scale
        })
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let weights: Vec<f64> = exps.iter().map(|e| e / total).collect();
    let mut attended = vec![0.0; MODEL_DIM];
    for t in 0..n {
        let a = weights[t];
        for (d, v) in attended.iter_mut().zip(&values[t * MODEL_DIM..(t + 1) * MODEL_DIM]) {
            *d += a * v;
        }
    }
    AttentionTape {
        tokens: tokens.to_vec(),
        keys,
        values,
        query,
        weights,
        attended,
    }
}

/// Backward through `attend`; accumulates projection gradients, returns dL/dtokens.
pub fn attend_backward(
    w: &GeneratorWeights,
    tape: &AttentionTape,
    query_input: &[f64],
    d_attended: &[f64],
    grad: &mut GeneratorWeights,
) -> Vec<f64> {
    let n = tape.weights.len();
    let scale = 1.0 / (MODEL_DIM as f64).sqrt();
    let mut d_weights = vec![0.0; n];
    for t in 0..n {
        d_weights[t] = tape.values[t * MODEL_DIM..(t + 1) * MODEL_DIM]
            .iter()
            .zip(d_attended)
            .map(|(v, g)| v * g)
            .sum();
    }
    let dot: f64 = tape.weights.iter().zip(&d_weights).map(|(a, d)| a * d).sum();
    let mut d_query = vec![0.0; MODEL_DIM];
    let mut d_tokens = vec![0.0; tape.tokens.len()];
    let mut d_key = vec![0.0; MODEL_DIM];
    let mut d_value = vec![0.0; MODEL_DIM];
    for t in 0..n {
        let a = tape.weights[t];
        let d_score = a * (d_weights[t] - dot) * scale;
        let key = &tape.keys[t * MODEL_DIM..(t + 1) * MODEL_DIM];
        for k in 0..MODEL_DIM {
            d_query[k] += d_score * key[k];
            d_key[k] = d_score * tape.query[k];
            d_value[k] = a * d_attended[k];
        }
        let tok = &tape.tokens[t * CONV2_CH..(t + 1) * CONV2_CH];
        let d_tok = &mut d_tokens[t * CONV2_CH..(t + 1) * CONV2_CH];
        w.key_proj.backward(tok, &d_key, &mut grad.key_proj, Some(&mut *d_tok));
        w.value_proj.backward(tok, &d_value, &mut grad.value_proj, Some(d_tok));
    }
    w.query_embed.backward(query_input, &d_query, &mut grad.query_embed, None);
    d_tokens
}

/// Everything the backward pass needs from one generator forward.
#[derive(Clone, Debug)]
pub struct GeneratorTape {
    pub head: Head,
    input: Vec<f64>,
    camera: Vec<f64>,
    conv1_pre: Vec<f64>,
    conv1_act: Vec<f64>,
    conv2_pre: Vec<f64>,
    pub attention: AttentionTape,
    hidden: Vec<f64>,
    ffn1_pre: Vec<f64>,
    ffn1_act: Vec<f64>,
    pub raw: Vec<f64>,
}

fn trunk_forward(image: &Image, camera: &Camera, w: &GeneratorWeights) -> GeneratorTape {
    instrument::record(instrument::Probe::Generator);
    let resized = image.resize_bilinear(INPUT_SIZE, INPUT_SIZE);
    let input = resized.data;
    let conv1_pre = w.conv1.forward(&input, INPUT_SIZE);
    let conv1_act: Vec<f64> = conv1_pre.iter().map(|&v| leaky(v)).collect();
    let conv2_pre = w.conv2.forward(&conv1_act, INPUT_SIZE / 2);
    let tokens: Vec<f64> = conv2_pre.iter().map(|&v| leaky(v)).collect();
    let cam = camera.flat_matrix().to_vec();
    let attention = attend(w, &tokens, &cam);
    let mut hidden = vec![0.0; MODEL_DIM];
    w.attn_out.forward(&attention.attended, &mut hidden);
    let mut ffn1_pre = vec![0.0; w.ffn1.outputs];
    w.ffn1.forward(&hidden, &mut ffn1_pre);
    let ffn1_act: Vec<f64> = ffn1_pre.iter().map(|&v| leaky(v)).collect();
    let mut raw = vec![0.0; w.ffn2.outputs];
    w.ffn2.forward(&ffn1_act, &mut raw);
    GeneratorTape {
        head: w.head,
        input,
        camera: cam,
        conv1_pre,
        conv1_act,
        conv2_pre,
        attention,
        hidden,
        ffn1_pre,
        ffn1_act,
        raw,
    }
}

fn squash_bias(raw: &[f64]) -> Vec<f64> {
    raw.iter().map(|r| BIAS_BOUND * r.tanh()).collect()
}

fn squash_params(raw: &[f64]) -> PriorParams {
    let (s1, s2, s3) = (sigmoid(raw[0]), sigmoid(raw[1]), sigmoid(raw[2]));
    PriorParams {
        g: G_RANGE.0 * (G_RANGE.1 / G_RANGE.0).powf(s1),
        a: s2.clamp(A_RANGE.0, A_RANGE.1),
        b: B_RANGE.0 * (B_RANGE.1 / B_RANGE.0).powf(s3),
    }
}

/// Curve bias for one view, with tape.
pub fn curve_bias_forward(image: &Image, camera: &Camera, w: &GeneratorWeights) -> Result<(Vec<f64>, GeneratorTape)> {
    if w.head != Head::CurveBias {
        return Err(Error::InvalidArgument("weights carry the parameter head".into()));
    }
    if image.is_empty() {
        return Err(Error::InvalidArgument("generator input image is empty".into()));
    }
    let tape = trunk_forward(image, camera, w);
    Ok((squash_bias(&tape.raw), tape))
}

/// Prior parameters for one view, with tape.
pub fn prior_params_forward(
    image: &Image,
    camera: &Camera,
    w: &GeneratorWeights,
) -> Result<(PriorParams, GeneratorTape)> {
    if w.head != Head::PriorParams {
        return Err(Error::InvalidArgument("weights carry the curve head".into()));
    }
    if image.is_empty() {
        return Err(Error::InvalidArgument("generator input image is empty".into()));
    }
    let tape = trunk_forward(image, camera, w);
    Ok((squash_params(&tape.raw), tape))
}

pub fn gen_curve_bias(image: &Image, camera: &Camera, w: &GeneratorWeights) -> Result<Vec<f64>> {
    Ok(curve_bias_forward(image, camera, w)?.0)
}

pub fn gen_prior_params(image: &Image, camera: &Camera, w: &GeneratorWeights) -> Result<PriorParams> {
    Ok(prior_params_forward(image, camera, w)?.0)
}

/// Weight gradients given dL/d(output): the 256 curve-bias entries or (dG, dA, dB).
pub fn generator_backward(
    w: &GeneratorWeights,
    tape: Option<&GeneratorTape>,
    upstream: &[f64],
) -> Result<GeneratorWeights> {
    let tape = tape.ok_or_else(|| Error::Contract("generator backward called without a forward tape".into()))?;
    if tape.head != w.head || upstream.len() != w.head.outputs() {
        return Err(Error::Contract("generator tape or upstream does not match the weights".into()));
    }
    let mut grad = w.zeros_like();
    let d_raw: Vec<f64> = match w.head {
        Head::CurveBias => tape
            .raw
            .iter()
            .zip(upstream)
            .map(|(r, g)| {
                let t = r.tanh();
                g * BIAS_BOUND * (1.0 - t * t)
            })
            .collect(),
        Head::PriorParams => {
            let p = squash_params(&tape.raw);
            let s: Vec<f64> = tape.raw.iter().map(|&r| sigmoid(r)).collect();
            let ds: Vec<f64> = s.iter().map(|v| v * (1.0 - v)).collect();
            let a_live = if (A_RANGE.0..=A_RANGE.1).contains(&s[1]) { 1.0 } else { 0.0 };
            vec![
                upstream[0] * p.g * (G_RANGE.1 / G_RANGE.0).ln() * ds[0],
                upstream[1] * a_live * ds[1],
                upstream[2] * p.b * (B_RANGE.1 / B_RANGE.0).ln() * ds[2],
            ]
        }
    };

    let mut d_ffn1 = vec![0.0; w.ffn1.outputs];
    w.ffn2.backward(&tape.ffn1_act, &d_raw, &mut grad.ffn2, Some(&mut d_ffn1));
    for (d, pre) in d_ffn1.iter_mut().zip(&tape.ffn1_pre) {
        *d *= leaky_grad(*pre);
    }
    let mut d_hidden = vec![0.0; MODEL_DIM];
    w.ffn1.backward(&tape.hidden, &d_ffn1, &mut grad.ffn1, Some(&mut d_hidden));
    let mut d_attended = vec![0.0; MODEL_DIM];
    w.attn_out
        .backward(&tape.attention.attended, &d_hidden, &mut grad.attn_out, Some(&mut d_attended));
    let mut d_tokens = attend_backward(w, &tape.attention, &tape.camera, &d_attended, &mut grad);
    for (d, pre) in d_tokens.iter_mut().zip(&tape.conv2_pre) {
        *d *= leaky_grad(*pre);
    }
    let mut d_conv1 = vec![0.0; tape.conv1_act.len()];
    w.conv2
        .backward(&tape.conv1_act, INPUT_SIZE / 2, &d_tokens, &mut grad.conv2, Some(&mut d_conv1));
    for (d, pre) in d_conv1.iter_mut().zip(&tape.conv1_pre) {
        *d *= leaky_grad(*pre);
    }
    w.conv1.backward(&tape.input, INPUT_SIZE, &d_conv1, &mut grad.conv1, None);
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn camera() -> Camera {
        Camera::look_at([0.4, -0.3, -3.0], [0.0; 3], [0.0, -1.0, 0.0], 8, 8, 0.9).unwrap()
    }

    fn image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(8, 8, |_, _| [rng.gen(), rng.gen(), rng.gen()])
    }

    #[test]
    fn zero_network_outputs() {
        let bias = gen_curve_bias(&image(1), &camera(), &GeneratorWeights::zeros(Head::CurveBias)).unwrap();
        assert_eq!(bias.len(), LUT_SIZE);
        assert!(bias.iter().all(|&b| b == 0.0));
        let p = gen_prior_params(&image(1), &camera(), &GeneratorWeights::zeros(Head::PriorParams)).unwrap();
        assert!((p.g - 1.0).abs() < 1e-12);
        assert!((p.a - 0.5).abs() < 1e-12);
        assert!((p.b - 0.5 * 8f64.sqrt()).abs() < 1e-12);
        assert!((p.b - 1.414).abs() < 1e-3);
    }

    #[test]
    fn initialized_heads_start_neutral() {
        let bias = gen_curve_bias(&image(2), &camera(), &GeneratorWeights::init(Head::CurveBias, 3)).unwrap();
        assert!(bias.iter().all(|&b| b == 0.0));
        let p = gen_prior_params(&image(2), &camera(), &GeneratorWeights::init(Head::PriorParams, 3)).unwrap();
        assert_eq!(p, PriorParams::neutral());
    }

    #[test]
    fn outputs_respect_bounds() {
        for seed in 0..6 {
            let w = GeneratorWeights::random(Head::CurveBias, seed, 400.0);
            let bias = gen_curve_bias(&image(seed), &camera(), &w).unwrap();
            assert!(bias.iter().all(|b| b.abs() <= BIAS_BOUND));
            let w = GeneratorWeights::random(Head::PriorParams, seed, 400.0);
            let p = gen_prior_params(&image(seed), &camera(), &w).unwrap();
            assert!((G_RANGE.0..=G_RANGE.1).contains(&p.g));
            assert!((A_RANGE.0..=A_RANGE.1).contains(&p.a));
            assert!((B_RANGE.0..=B_RANGE.1).contains(&p.b));
        }
    }

    #[test]
    fn attention_rows_normalized() {
        let w = GeneratorWeights::random(Head::CurveBias, 4, 1.0);
        let (_, tape) = curve_bias_forward(&image(4), &camera(), &w).unwrap();
        let s: f64 = tape.attention.weights.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
        assert_eq!(tape.attention.weights.len(), TOKENS);
    }

    #[test]
    fn deterministic_forward() {
        let w = GeneratorWeights::random(Head::CurveBias, 5, 1.0);
        let a = gen_curve_bias(&image(5), &camera(), &w).unwrap();
        let b = gen_curve_bias(&image(5), &camera(), &w).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let w = GeneratorWeights::random(Head::PriorParams, 6, 1.0);
        let (_, tape) = prior_params_forward(&image(6), &camera(), &w).unwrap();
        let g = generator_backward(&w, Some(&tape), &[0.0; 3]).unwrap();
        assert!(g.tensors().iter().all(|(_, t)| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn missing_tape_is_contract_error() {
        let w = GeneratorWeights::zeros(Head::CurveBias);
        assert!(matches!(generator_backward(&w, None, &[0.0; LUT_SIZE]), Err(Error::Contract(_))));
    }

    #[test]
    fn token_permutation_equivariance() {
        let w = GeneratorWeights::random(Head::CurveBias, 7, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 12;
        let tokens: Vec<f64> = (0..n * CONV2_CH).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let query: Vec<f64> = (0..QUERY_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d_att: Vec<f64> = (0..MODEL_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let perm: Vec<usize> = (0..n).map(|t| (t * 5 + 3) % n).collect();
        let mut permuted = vec![0.0; tokens.len()];
        for (dst, &src) in perm.iter().enumerate() {
            permuted[dst * CONV2_CH..(dst + 1) * CONV2_CH].copy_from_slice(&tokens[src * CONV2_CH..(src + 1) * CONV2_CH]);
        }
        let ta = attend(&w, &tokens, &query);
        let tb = attend(&w, &permuted, &query);
        for k in 0..MODEL_DIM {
            assert!((ta.attended[k] - tb.attended[k]).abs() < 1e-12);
        }
        let mut ga = w.zeros_like();
        let mut gb = w.zeros_like();
        let da = attend_backward(&w, &ta, &query, &d_att, &mut ga);
        let db = attend_backward(&w, &tb, &query, &d_att, &mut gb);
        for (x, y) in ga.key_proj.weight.iter().zip(&gb.key_proj.weight) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in ga.query_embed.weight.iter().zip(&gb.query_embed.weight) {
            assert!((x - y).abs() < 1e-12);
        }
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..CONV2_CH {
                assert!((db[dst * CONV2_CH + c] - da[src * CONV2_CH + c]).abs() < 1e-12);
            }
        }
    }

    fn objective(w: &GeneratorWeights, up: &[f64]) -> f64 {
        let out = match w.head {
            Head::CurveBias => gen_curve_bias(&image(9), &camera(), w).unwrap(),
            Head::PriorParams => {
                let p = gen_prior_params(&image(9), &camera(), w).unwrap();
                vec![p.g, p.a, p.b]
            }
        };
        out.iter().zip(up).map(|(a, b)| a * b).sum()
    }

    fn analytic(w: &GeneratorWeights, up: &[f64]) -> GeneratorWeights {
        let tape = match w.head {
            Head::CurveBias => curve_bias_forward(&image(9), &camera(), w).unwrap().1,
            Head::PriorParams => prior_params_forward(&image(9), &camera(), w).unwrap().1,
        };
        generator_backward(w, Some(&tape), up).unwrap()
    }

    fn check_entry(w: &GeneratorWeights, grad: &GeneratorWeights, up: &[f64], tensor: usize, k: usize) {
        let h = 1e-6;
        let mut plus = w.clone();
        plus.tensors_mut()[tensor][k] += h;
        let mut minus = w.clone();
        minus.tensors_mut()[tensor][k] -= h;
        let fd = (objective(&plus, up) - objective(&minus, up)) / (2.0 * h);
        let an = grad.tensors()[tensor].1[k];
        let name = grad.tensors()[tensor].0;
        assert!((fd - an).abs() <= (1e-3 * fd.abs()).max(1e-8), "{name}[{k}]: fd {fd} analytic {an}");
    }

    #[test]
    fn conv1_weight_gradient() {
        let w = GeneratorWeights::random(Head::CurveBias, 10, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let up: Vec<f64> = (0..LUT_SIZE).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grad = analytic(&w, &up);
        let conv1 = w.tensors().iter().position(|(n, _)| n.starts_with("conv1")).unwrap();
        for k in [0, 7, 100] {
            check_entry(&w, &grad, &up, conv1, k);
        }
    }

    #[test]
    fn full_network_gradient_on_random_weights() {
        for (head, seed) in [(Head::CurveBias, 12), (Head::PriorParams, 13)] {
            let w = GeneratorWeights::random(head, seed, 1.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let up: Vec<f64> = (0..head.outputs()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let grad = analytic(&w, &up);
            let sizes: Vec<usize> = w.tensors().iter().map(|(_, t)| t.len()).collect();
            for _ in 0..24 {
                let tensor = rng.gen_range(0..sizes.len());
                let k = rng.gen_range(0..sizes[tensor]);
                check_entry(&w, &grad, &up, tensor, k);
            }
        }
    }
}
