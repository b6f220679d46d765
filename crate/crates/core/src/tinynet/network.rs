use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};

use super::spec::{NetworkSpec, ParamKind, ParamLayout};
use super::tensor::Tensor3;
use crate::error::{Error, Result};
use crate::rng;

/// Backward rules applied by [`Network::backward`]. Only the verification
/// harness ever swaps in a non-exact rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReluBackward {
    #[default]
    Exact,
    /// Passes the upstream gradient through unconditionally.
    Identity,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input of each block (post-ReLU output of the previous block).
    inputs: Vec<Vec<f64>>,
    /// Pooled pre-activation of each block: the tap values.
    pooled: Vec<Vec<f64>>,
    /// Index into the convolution plane stack chosen by each pooled cell.
    argmax: Vec<Vec<u32>>,
    /// Globally pooled rectified features fed to the head.
    features: Vec<f64>,
    pub logits: Vec<f64>,
}

impl Trace {
    pub fn tap(&self, block: usize) -> &[f64] {
        &self.pooled[block]
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// True when both passes share every ReLU sign and pooling choice, i.e.
    /// they lie on the same linear piece of the network.
    pub(crate) fn same_pattern(&self, other: &Trace) -> bool {
        self.argmax == other.argmax
            && self
                .pooled
                .iter()
                .zip(&other.pooled)
                .all(|(a, b)| a.iter().zip(b).all(|(x, y)| (*x > 0.0) == (*y > 0.0)))
    }
}

/// Output of a batched forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<Vec<f64>>,
    /// Flattened activations per tap name, one row per batch element.
    pub taps: BTreeMap<String, Vec<Vec<f64>>>,
}

/// Small convolutional network with a flat parameter vector.
///
/// Parameters are kept at `f32` precision (every value is exactly
/// representable as `f32`) while arithmetic runs in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    layout: ParamLayout,
    params: Vec<f64>,
}

impl Network {
    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        let params = vec![0.0; layout.total];
        Ok(Self {
            spec,
            layout,
            params,
        })
    }

    /// He-normal convolutions, scaled-normal head, zero biases.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        let mut rng = rng::seeded(seed);
        let entries = net.layout.entries.clone();
        for e in entries {
            let (fan_in, gain) = match e.kind {
                ParamKind::ConvWeight => {
                    let block = net.block_of(&e.name);
                    (net.spec.block_input_shape(block).0 * 9, 2.0)
                }
                ParamKind::DenseWeight => (e.len / net.spec.n_outputs, 1.0),
                ParamKind::ConvBias | ParamKind::DenseBias => continue,
            };
            let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("finite std");
            for p in &mut net.params[e.offset..e.offset + e.len] {
                *p = normal.sample(&mut rng);
            }
        }
        net.quantize();
        Ok(net)
    }

    fn block_of(&self, name: &str) -> usize {
        self.layout
            .entries
            .iter()
            .position(|e| e.name == name)
            .map(|i| i / 2)
            .expect("known parameter")
    }

    pub fn from_params(spec: NetworkSpec, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        if params.len() != net.layout.total {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                net.layout.total,
                params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Rounds every parameter to the nearest `f32`.
    pub fn quantize(&mut self) {
        for p in &mut self.params {
            *p = f64::from(*p as f32);
        }
    }

    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .get(name)
            .map(|e| &self.params[e.offset..e.offset + e.len])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let e = self.layout.get(name)?.clone();
        Some(&mut self.params[e.offset..e.offset + e.len])
    }

    /// Copies every block's convolution from `other`; the head is left as is.
    pub fn copy_trunk_from(&mut self, other: &Network) -> Result<()> {
        if self.spec.block_channels != other.spec.block_channels
            || self.spec.input_channels != other.spec.input_channels
            || self.spec.input_height != other.spec.input_height
            || self.spec.input_width != other.spec.input_width
        {
            return Err(Error::Config("trunk architectures differ".into()));
        }
        for e in self.layout.entries.clone() {
            if matches!(e.kind, ParamKind::ConvWeight | ParamKind::ConvBias) {
                let src = other.param(&e.name).expect("same trunk layout");
                self.params[e.offset..e.offset + e.len].copy_from_slice(src);
            }
        }
        Ok(())
    }

    pub fn check_input(&self, input: &Tensor3) -> Result<()> {
        let s = &self.spec;
        if input.shape() != (s.input_channels, s.input_height, s.input_width) {
            return Err(Error::Shape(format!(
                "input shape {:?} does not match network input {}x{}x{}",
                input.shape(),
                s.input_channels,
                s.input_height,
                s.input_width
            )));
        }
        Ok(())
    }

    pub fn trace(&self, input: &Tensor3) -> Result<Trace> {
        self.check_input(input)?;
        Ok(self.trace_unchecked(&input.data))
    }

    fn trace_unchecked(&self, input: &[f64]) -> Trace {
        let n = self.spec.n_blocks();
        let mut inputs = Vec::with_capacity(n);
        let mut pooled = Vec::with_capacity(n);
        let mut argmax = Vec::with_capacity(n);
        let mut x = input.to_vec();
        for b in 0..n {
            let (in_c, h, w) = self.spec.block_input_shape(b);
            let out_c = self.spec.block_channels[b];
            let wname = &self.layout.entries[2 * b];
            let bname = &self.layout.entries[2 * b + 1];
            let weight = &self.params[wname.offset..wname.offset + wname.len];
            let bias = &self.params[bname.offset..bname.offset + bname.len];
            let mut conv = vec![0.0; out_c * h * w];
            conv3x3_forward(&x, in_c, h, w, weight, bias, out_c, &mut conv);
            let (p, idx) = maxpool2x2(&conv, out_c, h, w);
            let next: Vec<f64> = p.iter().map(|&v| v.max(0.0)).collect();
            inputs.push(x);
            pooled.push(p);
            argmax.push(idx);
            x = next;
        }
        let (c, h, w) = self.spec.tap_shape(n - 1);
        let hw = (h * w) as f64;
        let features: Vec<f64> = x.chunks_exact(h * w).map(|pl| pl.iter().sum::<f64>() / hw).collect();
        debug_assert_eq!(features.len(), c);
        let logits = self.head_logits(&features);
        Trace {
            inputs,
            pooled,
            argmax,
            features,
            logits,
        }
    }

    fn head_logits(&self, features: &[f64]) -> Vec<f64> {
        let k = self.spec.n_outputs;
        let f = features.len();
        let wl = &self.layout.entries[self.layout.entries.len() - 2];
        let bl = &self.layout.entries[self.layout.entries.len() - 1];
        let w = &self.params[wl.offset..wl.offset + wl.len];
        let b = &self.params[bl.offset..bl.offset + bl.len];
        (0..k)
            .map(|o| b[o] + w[o * f..(o + 1) * f].iter().zip(features).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }

    pub fn logits(&self, input: &Tensor3) -> Result<Vec<f64>> {
        Ok(self.trace(input)?.logits)
    }

    /// Runs a batch, returning logits and every tap.
    pub fn forward(&self, batch: &[Tensor3]) -> Result<ForwardOutput> {
        let names = self.spec.tap_names();
        let mut taps: BTreeMap<String, Vec<Vec<f64>>> =
            names.iter().map(|n| (n.clone(), Vec::with_capacity(batch.len()))).collect();
        let mut logits = Vec::with_capacity(batch.len());
        for input in batch {
            let t = self.trace(input)?;
            for (b, name) in names.iter().enumerate() {
                taps.get_mut(name).expect("tap").push(t.pooled[b].clone());
            }
            logits.push(t.logits);
        }
        Ok(ForwardOutput { logits, taps })
    }

    /// Flattened activations of one tap for a single input.
    pub fn tap_activation(&self, input: &Tensor3, tap: &str) -> Result<Vec<f64>> {
        let b = self.spec.tap_index(tap)?;
        let mut t = self.trace(input)?;
        Ok(std::mem::take(&mut t.pooled[b]))
    }

    /// Gradient of logit `class_k` with respect to the named tap.
    pub fn grad_wrt_tap(&self, input: &Tensor3, tap: &str, class_k: usize) -> Result<Vec<f64>> {
        let block = self.spec.tap_index(tap)?;
        if class_k >= self.spec.n_outputs {
            return Err(Error::Invalid(format!(
                "class {class_k} out of range for {} outputs",
                self.spec.n_outputs
            )));
        }
        let trace = self.trace(input)?;
        let mut dlogits = vec![0.0; self.spec.n_outputs];
        dlogits[class_k] = 1.0;
        Ok(self.backprop(&trace, &dlogits, None, Some(block), ReluBackward::Exact))
    }

    /// Accumulates the parameter gradient of `sum_k dlogits[k] * logit_k`
    /// into `grads`.
    pub fn backward(&self, trace: &Trace, dlogits: &[f64], grads: &mut [f64], relu: ReluBackward) {
        assert_eq!(grads.len(), self.layout.total, "gradient buffer length");
        self.backprop(trace, dlogits, Some(grads), None, relu);
    }

    /// Walks the graph backwards. When `stop_at` is set, returns the gradient
    /// with respect to that block's tap and stops there.
    fn backprop(
        &self,
        trace: &Trace,
        dlogits: &[f64],
        mut grads: Option<&mut [f64]>,
        stop_at: Option<usize>,
        relu: ReluBackward,
    ) -> Vec<f64> {
        let n = self.spec.n_blocks();
        let entries = &self.layout.entries;
        let f = trace.features.len();
        let wl = &entries[entries.len() - 2];
        let bl = &entries[entries.len() - 1];
        let head_w = &self.params[wl.offset..wl.offset + wl.len];

        if let Some(g) = grads.as_deref_mut() {
            for (o, &d) in dlogits.iter().enumerate() {
                g[bl.offset + o] += d;
                let row = &mut g[wl.offset + o * f..wl.offset + (o + 1) * f];
                for (gw, &x) in row.iter_mut().zip(&trace.features) {
                    *gw += d * x;
                }
            }
        }
        let mut dfeat = vec![0.0; f];
        for (o, &d) in dlogits.iter().enumerate() {
            for (df, &w) in dfeat.iter_mut().zip(&head_w[o * f..(o + 1) * f]) {
                *df += d * w;
            }
        }

        // d(relu output of last block), spread evenly by the average pool
        let (_, th, tw) = self.spec.tap_shape(n - 1);
        let hw = th * tw;
        let mut dact = vec![0.0; f * hw];
        for (c, &d) in dfeat.iter().enumerate() {
            dact[c * hw..(c + 1) * hw].fill(d / hw as f64);
        }

        for b in (0..n).rev() {
            let pooled = &trace.pooled[b];
            let dpooled: Vec<f64> = match relu {
                ReluBackward::Exact => dact
                    .iter()
                    .zip(pooled)
                    .map(|(&d, &p)| if p > 0.0 { d } else { 0.0 })
                    .collect(),
                ReluBackward::Identity => dact,
            };
            if stop_at == Some(b) {
                return dpooled;
            }
            let (in_c, h, w) = self.spec.block_input_shape(b);
            let out_c = self.spec.block_channels[b];
            let mut dconv = vec![0.0; out_c * h * w];
            for (&i, &d) in trace.argmax[b].iter().zip(&dpooled) {
                dconv[i as usize] += d;
            }
            let wentry = &entries[2 * b];
            let bentry = &entries[2 * b + 1];
            if let Some(g) = grads.as_deref_mut() {
                let (gw, rest) = g[wentry.offset..].split_at_mut(wentry.len);
                let gb = &mut rest[..bentry.len];
                conv3x3_param_grads(&trace.inputs[b], in_c, h, w, &dconv, out_c, gw, gb);
            }
            if b == 0 {
                break;
            }
            let weight = &self.params[wentry.offset..wentry.offset + wentry.len];
            let mut dinput = vec![0.0; in_c * h * w];
            conv3x3_input_grad(weight, in_c, h, w, &dconv, out_c, &mut dinput);
            dact = dinput;
        }
        Vec::new()
    }
}

/// Valid (destination, source) ranges for a shift of `d` in `{-1, 0, 1}`.
#[inline]
fn shifted(len: usize, d: isize) -> (usize, usize) {
    let lo = if d < 0 { 1 } else { 0 };
    let hi = if d > 0 { len - 1 } else { len };
    (lo, hi)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3x3_forward(
    input: &[f64],
    in_c: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    out_c: usize,
    out: &mut [f64],
) {
    let hw = h * w;
    for o in 0..out_c {
        let plane = &mut out[o * hw..(o + 1) * hw];
        plane.fill(bias[o]);
        for i in 0..in_c {
            let src = &input[i * hw..(i + 1) * hw];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = shifted(h, dy);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = shifted(w, dx);
                    let wv = weight[((o * in_c + i) * 3 + ky) * 3 + kx];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let s0 = (sy * w) as isize + x0 as isize + dx;
                        let srow = &src[s0 as usize..s0 as usize + (x1 - x0)];
                        let drow = &mut plane[y * w + x0..y * w + x1];
                        for (d, s) in drow.iter_mut().zip(srow) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_param_grads(
    input: &[f64],
    in_c: usize,
    h: usize,
    w: usize,
    dout: &[f64],
    out_c: usize,
    gw: &mut [f64],
    gb: &mut [f64],
) {
    let hw = h * w;
    for o in 0..out_c {
        let dplane = &dout[o * hw..(o + 1) * hw];
        gb[o] += dplane.iter().sum::<f64>();
        for i in 0..in_c {
            let src = &input[i * hw..(i + 1) * hw];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = shifted(h, dy);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = shifted(w, dx);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let s0 = ((sy * w) as isize + x0 as isize + dx) as usize;
                        let srow = &src[s0..s0 + (x1 - x0)];
                        let drow = &dplane[y * w + x0..y * w + x1];
                        acc += drow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    gw[((o * in_c + i) * 3 + ky) * 3 + kx] += acc;
                }
            }
        }
    }
}

fn conv3x3_input_grad(
    weight: &[f64],
    in_c: usize,
    h: usize,
    w: usize,
    dout: &[f64],
    out_c: usize,
    dinput: &mut [f64],
) {
    let hw = h * w;
    for o in 0..out_c {
        let dplane = &dout[o * hw..(o + 1) * hw];
        for i in 0..in_c {
            let dst = &mut dinput[i * hw..(i + 1) * hw];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = shifted(h, dy);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = shifted(w, dx);
                    let wv = weight[((o * in_c + i) * 3 + ky) * 3 + kx];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let s0 = ((sy * w) as isize + x0 as isize + dx) as usize;
                        let drow = &mut dst[s0..s0 + (x1 - x0)];
                        let grow = &dplane[y * w + x0..y * w + x1];
                        for (d, g) in drow.iter_mut().zip(grow) {
                            *d += wv * g;
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 max-pool with stride 2; ties resolve to the first cell in row-major
/// order.
fn maxpool2x2(input: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<u32>) {
    let (ph, pw) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * ph * pw);
    let mut idx = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        let base = ch * h * w;
        for py in 0..ph {
            for px in 0..pw {
                let cand = [
                    base + 2 * py * w + 2 * px,
                    base + 2 * py * w + 2 * px + 1,
                    base + (2 * py + 1) * w + 2 * px,
                    base + (2 * py + 1) * w + 2 * px + 1,
                ];
                let mut best = cand[0];
                for &k in &cand[1..] {
                    if input[k] > input[best] {
                        best = k;
                    }
                }
                out.push(input[best]);
                idx.push(best as u32);
            }
        }
    }
    (out, idx)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
