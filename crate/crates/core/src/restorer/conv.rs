use std::fmt::Debug;
use std::ops::{AddAssign, Range};

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Condition, Restorer};
use crate::error::{Error, Result};
use crate::tomo::Image;

/// Floating-point type the network runs in: `f32` for training and
/// sampling, `f64` for gradient checks.
pub trait Scalar: Float + AddAssign + Send + Sync + Debug + Default + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Shape of the restoration network.
///
/// `dilations.len()` 3x3 convolutions; the first takes the two input
/// channels (state, condition), the last produces one channel that is added
/// to the state. Hidden layers have `width` channels, a SiLU nonlinearity
/// and a per-channel bias projected from the step embedding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub image_size: usize,
    pub width: usize,
    pub dilations: Vec<usize>,
    /// Sinusoidal embedding size (even). The residual flag adds one more input.
    pub embed_dim: usize,
    /// Step count the embedding normalizes by.
    pub max_step: usize,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.image_size == 0 || self.width == 0 {
            return bad("architecture sizes must be positive".into());
        }
        if self.dilations.len() < 2 || self.dilations.contains(&0) {
            return bad(format!("need at least two layers with positive dilation, got {:?}", self.dilations));
        }
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return bad(format!("embedding size {} must be positive and even", self.embed_dim));
        }
        if self.max_step == 0 {
            return bad("max_step must be at least 1".into());
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.dilations.len()
    }

    /// Canonical text form, stored in parameter files.
    pub fn descriptor(&self) -> String {
        let dil: Vec<String> = self.dilations.iter().map(|d| d.to_string()).collect();
        format!(
            "conv-skip;size={};width={};dilations={};embed={};steps={}",
            self.image_size,
            self.width,
            dil.join("-"),
            self.embed_dim,
            self.max_step
        )
    }

    pub fn parse_descriptor(text: &str) -> Result<Self> {
        let bad = || Error::Validation(format!("malformed architecture descriptor `{text}`"));
        let mut parts = text.split(';');
        if parts.next() != Some("conv-skip") {
            return Err(bad());
        }
        let mut fields = std::collections::BTreeMap::new();
        for p in parts {
            let (k, v) = p.split_once('=').ok_or_else(bad)?;
            fields.insert(k, v);
        }
        let num = |k: &str| -> Result<usize> { fields.get(k).ok_or_else(bad)?.parse().map_err(|_| bad()) };
        let dilations = fields
            .get("dilations")
            .ok_or_else(bad)?
            .split('-')
            .map(|d| d.parse().map_err(|_| bad()))
            .collect::<Result<Vec<usize>>>()?;
        let arch = Architecture {
            image_size: num("size")?,
            width: num("width")?,
            dilations,
            embed_dim: num("embed")?,
            max_step: num("steps")?,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Parameter ranges per layer in canonical order: for each layer the
    /// weights `[out][in][3][3]`, the biases `[out]`, then for hidden layers
    /// the embedding projection `[out][embed_dim + 1]`.
    pub fn layouts(&self) -> Vec<LayerLayout> {
        let depth = self.depth();
        let mut offset = 0;
        let mut take = |len: usize| {
            let r = offset..offset + len;
            offset += len;
            r
        };
        (0..depth)
            .map(|l| {
                let in_ch = if l == 0 { 2 } else { self.width };
                let hidden = l + 1 < depth;
                let out_ch = if hidden { self.width } else { 1 };
                LayerLayout {
                    in_ch,
                    out_ch,
                    dilation: self.dilations[l],
                    weight: take(out_ch * in_ch * 9),
                    bias: take(out_ch),
                    embed: hidden.then(|| take(out_ch * (self.embed_dim + 1))),
                }
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layouts().last().map_or(0, |l| l.embed.clone().unwrap_or(l.bias.clone()).end)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerLayout {
    pub in_ch: usize,
    pub out_ch: usize,
    pub dilation: usize,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
    pub embed: Option<Range<usize>>,
}

/// Flat parameter vector of a [`ConvRestorer`].
#[derive(Clone, Debug, PartialEq)]
pub struct RestorerParams<T: Scalar = f32> {
    arch: Architecture,
    values: Vec<T>,
}

impl<T: Scalar> RestorerParams<T> {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let values = vec![T::zero(); arch.param_count()];
        Ok(RestorerParams { arch, values })
    }

    /// He-normal hidden weights, a down-scaled output layer, small
    /// embedding projections and zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layouts = params.arch.layouts();
        let depth = layouts.len();
        let embed_std = 1.0 / ((params.arch.embed_dim + 1) as f64).sqrt();
        for (l, layer) in layouts.iter().enumerate() {
            let mut std = (2.0 / (layer.in_ch * 9) as f64).sqrt();
            if l + 1 == depth {
                std *= 0.1;
            }
            let normal = Normal::new(0.0, std).unwrap();
            for v in &mut params.values[layer.weight.clone()] {
                *v = T::of(normal.sample(&mut rng));
            }
            if let Some(r) = &layer.embed {
                let normal = Normal::new(0.0, 0.5 * embed_std).unwrap();
                for v in &mut params.values[r.clone()] {
                    *v = T::of(normal.sample(&mut rng));
                }
            }
        }
        Ok(params)
    }

    pub fn from_values(arch: Architecture, values: Vec<T>) -> Result<Self> {
        arch.validate()?;
        if values.len() != arch.param_count() {
            return Err(Error::Dimension(format!(
                "{} parameters for an architecture with {}",
                values.len(),
                arch.param_count()
            )));
        }
        Ok(RestorerParams { arch, values })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> RestorerParams<U> {
        RestorerParams { arch: self.arch.clone(), values: self.values.iter().map(|v| U::of(v.as_f64())).collect() }
    }

    pub(crate) fn check_same_shape<U: Scalar>(&self, other: &RestorerParams<U>) -> Result<()> {
        if self.arch != other.arch {
            return Err(Error::Architecture { expected: self.arch.descriptor(), found: other.arch.descriptor() });
        }
        Ok(())
    }
}

/// `embed_dim` sinusoids of `step / max_step` followed by the residual flag.
pub fn step_embedding(step: usize, max_step: usize, embed_dim: usize, residual: bool) -> Vec<f64> {
    let tau = step as f64 / max_step.max(1) as f64;
    let half = embed_dim / 2;
    let freqs: Vec<f64> = (0..half).map(|i| std::f64::consts::FRAC_PI_2 * (1u64 << i) as f64).collect();
    freqs
        .iter()
        .map(|f| (f * tau).sin())
        .chain(freqs.iter().map(|f| (f * tau).cos()))
        .chain(std::iter::once(if residual { 1.0 } else { 0.0 }))
        .collect()
}

/// Intermediate values kept for the backward pass.
struct Tape<T> {
    /// Input of each layer; `inputs[0]` holds the two network input channels.
    inputs: Vec<Vec<T>>,
    /// Pre-activations of each layer.
    pre: Vec<Vec<T>>,
}

/// Small dilated CNN with an identity skip from the state channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvRestorer<T: Scalar = f32> {
    params: RestorerParams<T>,
}

impl<T: Scalar> ConvRestorer<T> {
    pub fn new(params: RestorerParams<T>) -> Self {
        ConvRestorer { params }
    }

    pub fn params(&self) -> &RestorerParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut RestorerParams<T> {
        &mut self.params
    }

    pub fn into_params(self) -> RestorerParams<T> {
        self.params
    }

    pub fn arch(&self) -> &Architecture {
        &self.params.arch
    }

    fn network_input(&self, state: &Image, cond: &Condition) -> Result<Vec<T>> {
        let n = self.arch().image_size;
        if state.width() != n || state.height() != n {
            return Err(Error::Dimension(format!(
                "restorer expects {n}x{n}, got {}x{}",
                state.width(),
                state.height()
            )));
        }
        let mut input: Vec<T> = Vec::with_capacity(2 * n * n);
        input.extend(state.values().iter().map(|&v| T::of(f64::from(v))));
        match cond {
            Condition::Null => input.extend(std::iter::repeat(T::zero()).take(n * n)),
            Condition::Residual(r) => {
                state.check_shape(r, "residual condition")?;
                input.extend(r.values().iter().map(|&v| T::of(f64::from(v))));
            }
        }
        Ok(input)
    }

    fn embedding(&self, step: usize, cond: &Condition) -> Vec<T> {
        let a = self.arch();
        step_embedding(step, a.max_step, a.embed_dim, cond.is_residual()).into_iter().map(T::of).collect()
    }

    fn forward(&self, input: Vec<T>, emb: &[T]) -> Result<(Vec<T>, Tape<T>)> {
        let n = self.arch().image_size;
        let nn = n * n;
        let p = &self.params.values;
        let layouts = self.arch().layouts();
        let depth = layouts.len();
        let mut tape = Tape { inputs: Vec::with_capacity(depth), pre: Vec::with_capacity(depth) };
        let mut current = input;
        for (l, layer) in layouts.iter().enumerate() {
            let mut z = vec![T::zero(); layer.out_ch * nn];
            conv_forward(&current, layer, &p[layer.weight.clone()], n, &mut z);
            for o in 0..layer.out_ch {
                let mut bias = p[layer.bias.start + o];
                if let Some(r) = &layer.embed {
                    let row = &p[r.start + o * emb.len()..r.start + (o + 1) * emb.len()];
                    for (w, e) in row.iter().zip(emb) {
                        bias += *w * *e;
                    }
                }
                for v in &mut z[o * nn..(o + 1) * nn] {
                    *v += bias;
                }
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericLayer { layer: l });
            }
            let next = if l + 1 < depth { z.iter().map(|&v| silu(v)).collect() } else { Vec::new() };
            tape.inputs.push(std::mem::replace(&mut current, next));
            tape.pre.push(z);
        }
        // Identity skip from the state channel.
        let state = &tape.inputs[0][..nn];
        let out = tape.pre[depth - 1].iter().zip(state).map(|(&z, &s)| z + s).collect();
        Ok((out, tape))
    }

    /// Mean squared error of the prediction against `target`.
    pub fn loss(&self, state: &Image, cond: &Condition, step: usize, target: &Image) -> Result<f64> {
        state.check_shape(target, "loss target")?;
        let input = self.network_input(state, cond)?;
        let (out, _) = self.forward(input, &self.embedding(step, cond))?;
        Ok(mse(&out, target))
    }

    /// Mean squared error and its gradient with respect to every parameter,
    /// by reverse-mode accumulation through the network.
    pub fn loss_and_grad(&self, state: &Image, cond: &Condition, step: usize, target: &Image) -> Result<(f64, Vec<T>)> {
        let (_, loss, grad) = self.predict_loss_and_grad(state, cond, step, target)?;
        Ok((loss, grad))
    }

    /// Like [`ConvRestorer::loss_and_grad`], also returning the prediction.
    pub fn predict_loss_and_grad(
        &self,
        state: &Image,
        cond: &Condition,
        step: usize,
        target: &Image,
    ) -> Result<(Image, f64, Vec<T>)> {
        state.check_shape(target, "loss target")?;
        let n = self.arch().image_size;
        let nn = n * n;
        let emb = self.embedding(step, cond);
        let input = self.network_input(state, cond)?;
        let (out, tape) = self.forward(input, &emb)?;
        let loss = mse(&out, target);
        if !loss.is_finite() {
            return Err(Error::NonFinite { stage: "restorer loss".into() });
        }

        let p = &self.params.values;
        let mut grad = vec![T::zero(); p.len()];
        let scale = T::of(2.0 / nn as f64);
        let mut delta: Vec<T> =
            out.iter().zip(target.values()).map(|(&o, &t)| scale * (o - T::of(f64::from(t)))).collect();

        let layouts = self.arch().layouts();
        for (l, layer) in layouts.iter().enumerate().rev() {
            let input = &tape.inputs[l];
            for o in 0..layer.out_ch {
                let sum = delta[o * nn..(o + 1) * nn].iter().fold(T::zero(), |a, &d| a + d);
                grad[layer.bias.start + o] = sum;
                if let Some(r) = &layer.embed {
                    for (j, e) in emb.iter().enumerate() {
                        grad[r.start + o * emb.len() + j] = sum * *e;
                    }
                }
            }
            conv_weight_grad(input, &delta, layer, n, &mut grad[layer.weight.clone()]);
            if l == 0 {
                break;
            }
            let mut d_input = vec![T::zero(); layer.in_ch * nn];
            conv_input_grad(&delta, layer, &p[layer.weight.clone()], n, &mut d_input);
            let pre = &tape.pre[l - 1];
            for (d, &z) in d_input.iter_mut().zip(pre) {
                *d = *d * silu_grad(z);
            }
            delta = d_input;
        }
        let prediction = state.with_values(out.iter().map(|v| v.as_f64() as f32).collect());
        Ok((prediction, loss, grad))
    }
}

impl<T: Scalar> Restorer for ConvRestorer<T> {
    fn restore(&self, state: &Image, cond: &Condition, step: usize) -> Result<Image> {
        let input = self.network_input(state, cond)?;
        let (out, _) = self.forward(input, &self.embedding(step, cond))?;
        Ok(state.with_values(out.into_iter().map(|v| v.as_f64() as f32).collect()))
    }
}

fn mse<T: Scalar>(out: &[T], target: &Image) -> f64 {
    out.iter().zip(target.values()).map(|(&o, &t)| (o.as_f64() - f64::from(t)).powi(2)).sum::<f64>() / out.len() as f64
}

#[inline]
fn sigmoid<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

#[inline]
fn silu<T: Scalar>(z: T) -> T {
    z * sigmoid(z)
}

#[inline]
fn silu_grad<T: Scalar>(z: T) -> T {
    let s = sigmoid(z);
    s * (T::one() + z * (T::one() - s))
}

/// Output positions `[lo, hi)` whose source `pos + shift` is inside `[0, n)`.
#[inline]
fn valid(n: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (n as isize - shift).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

/// Iterates the nine taps of a dilated 3x3 kernel as
/// `(tap index, row shift, column shift)`.
fn taps(dilation: usize) -> impl Iterator<Item = (usize, isize, isize)> {
    let d = dilation as isize;
    (0..9).map(move |k| (k, (k as isize / 3 - 1) * d, (k as isize % 3 - 1) * d))
}

fn conv_forward<T: Scalar>(input: &[T], layer: &LayerLayout, w: &[T], n: usize, out: &mut [T]) {
    let nn = n * n;
    for o in 0..layer.out_ch {
        let dst = &mut out[o * nn..(o + 1) * nn];
        for i in 0..layer.in_ch {
            let src = &input[i * nn..(i + 1) * nn];
            for (k, dy, dx) in taps(layer.dilation) {
                let wv = w[(o * layer.in_ch + i) * 9 + k];
                let (y0, y1) = valid(n, dy);
                let (x0, x1) = valid(n, dx);
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let sx = (x0 as isize + dx) as usize;
                    let d = &mut dst[y * n + x0..y * n + x1];
                    let s = &src[sy * n + sx..sy * n + sx + (x1 - x0)];
                    for (a, &b) in d.iter_mut().zip(s) {
                        *a += wv * b;
                    }
                }
            }
        }
    }
}

/// Dot product with eight independent partial sums so the loop vectorizes.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            lanes[k] += x[k] * y[k];
        }
    }
    let mut acc = lanes.iter().fold(T::zero(), |s, &v| s + v);
    for (&x, &y) in ra.iter().zip(rb) {
        acc += x * y;
    }
    acc
}

fn conv_weight_grad<T: Scalar>(input: &[T], delta: &[T], layer: &LayerLayout, n: usize, gw: &mut [T]) {
    let nn = n * n;
    for o in 0..layer.out_ch {
        let dz = &delta[o * nn..(o + 1) * nn];
        for i in 0..layer.in_ch {
            let src = &input[i * nn..(i + 1) * nn];
            for (k, dy, dx) in taps(layer.dilation) {
                let (y0, y1) = valid(n, dy);
                let (x0, x1) = valid(n, dx);
                let mut acc = T::zero();
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let sx = (x0 as isize + dx) as usize;
                    let d = &dz[y * n + x0..y * n + x1];
                    let s = &src[sy * n + sx..sy * n + sx + (x1 - x0)];
                    acc += dot(d, s);
                }
                gw[(o * layer.in_ch + i) * 9 + k] = acc;
            }
        }
    }
}

fn conv_input_grad<T: Scalar>(delta: &[T], layer: &LayerLayout, w: &[T], n: usize, d_input: &mut [T]) {
    let nn = n * n;
    for i in 0..layer.in_ch {
        let dst = &mut d_input[i * nn..(i + 1) * nn];
        for o in 0..layer.out_ch {
            let dz = &delta[o * nn..(o + 1) * nn];
            for (k, dy, dx) in taps(layer.dilation) {
                let wv = w[(o * layer.in_ch + i) * 9 + k];
                let (y0, y1) = valid(n, dy);
                let (x0, x1) = valid(n, dx);
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let sx = (x0 as isize + dx) as usize;
                    let d = &mut dst[sy * n + sx..sy * n + sx + (x1 - x0)];
                    let s = &dz[y * n + x0..y * n + x1];
                    for (a, &b) in d.iter_mut().zip(s) {
                        *a += wv * b;
                    }
                }
            }
        }
    }
}
