use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::DiffError;
use crate::rng::RngStream;

const LN_EPS: f64 = 1e-5;

/// Layer sizes of a tanh MLP. With `layer_norm`, the first hidden layer is
/// `dense -> layer norm -> tanh`; the remaining hidden layers are `dense -> tanh`
/// and the output layer is linear.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub layer_norm: bool,
}

impl Topology {
    pub fn new(input_dim: usize, hidden: &[usize], output_dim: usize, layer_norm: bool) -> Self {
        Self { input_dim, hidden: hidden.to_vec(), output_dim, layer_norm }
    }

    /// `(fan_in, fan_out)` of every dense layer, output layer last.
    pub fn dense_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &h in self.hidden.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }

    fn has_ln(&self) -> bool {
        self.layer_norm && !self.hidden.is_empty()
    }

    pub fn param_count(&self) -> usize {
        let dense: usize = self.dense_dims().iter().map(|(i, o)| i * o + o).sum();
        dense + if self.has_ln() { 2 * self.hidden[0] } else { 0 }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        write!(
            f,
            "in={} hidden={} out={} ln={}",
            self.input_dim,
            hidden.join(","),
            self.output_dim,
            u8::from(self.layer_norm)
        )
    }
}

impl FromStr for Topology {
    type Err = DiffError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DiffError::Descriptor(s.to_string());
        let mut topo = Topology::new(0, &[], 0, false);
        for field in s.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(bad)?;
            match k {
                "in" => topo.input_dim = v.parse().map_err(|_| bad())?,
                "out" => topo.output_dim = v.parse().map_err(|_| bad())?,
                "ln" => topo.layer_norm = v == "1",
                "hidden" if v.is_empty() => {}
                "hidden" => {
                    topo.hidden = v.split(',').map(|h| h.parse().map_err(|_| bad())).collect::<Result<_, _>>()?
                }
                _ => return Err(bad()),
            }
        }
        if topo.input_dim == 0 || topo.output_dim == 0 {
            return Err(bad());
        }
        Ok(topo)
    }
}

/// Per-sample activations recorded by [`forward`] for [`backward`].
#[derive(Debug, Clone, Default)]
pub struct Tape {
    input: Vec<f64>,
    /// tanh outputs of each hidden layer
    act: Vec<Vec<f64>>,
    xhat: Vec<f64>,
    inv_std: f64,
    scratch: Vec<f64>,
    pub out: Vec<f64>,
}

/// Xavier-uniform weights, zero biases, unit layer-norm gain. The output layer
/// is scaled by `final_scale` (zero gives a constant-output network).
pub fn init_params(topo: &Topology, final_scale: f64, rng: &mut RngStream) -> Vec<f64> {
    let mut params = Vec::with_capacity(topo.param_count());
    let dims = topo.dense_dims();
    for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let scale = if l + 1 == dims.len() { final_scale } else { 1.0 };
        for _ in 0..fan_in * fan_out {
            params.push(scale * rng.random_range(-bound..bound));
        }
        params.extend(std::iter::repeat_n(0.0, fan_out));
    }
    if topo.has_ln() {
        params.extend(std::iter::repeat_n(1.0, topo.hidden[0]));
        params.extend(std::iter::repeat_n(0.0, topo.hidden[0]));
    }
    params
}

fn ln_offset(topo: &Topology) -> usize {
    topo.dense_dims().iter().map(|(i, o)| i * o + o).sum()
}

/// Forward pass of one sample; the raw output lands in `tape.out`.
pub fn forward(topo: &Topology, params: &[f64], input: &[f64], tape: &mut Tape) -> Result<(), DiffError> {
    if input.len() != topo.input_dim {
        return Err(DiffError::Shape { expected: topo.input_dim, got: input.len() });
    }
    debug_assert_eq!(params.len(), topo.param_count());
    tape.input.clear();
    tape.input.extend_from_slice(input);
    tape.act.resize(topo.hidden.len(), Vec::new());
    let dims = topo.dense_dims();
    let ln_at = ln_offset(topo);
    let mut offset = 0;
    for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let w = &params[offset..offset + fan_in * fan_out];
        let b = &params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        offset += fan_in * fan_out + fan_out;
        let last = l + 1 == dims.len();
        let (prev, dst): (&[f64], &mut Vec<f64>) = if l == 0 {
            (&tape.input, if last { &mut tape.out } else { &mut tape.act[0] })
        } else if last {
            (&tape.act[l - 1], &mut tape.out)
        } else {
            let (lo, hi) = tape.act.split_at_mut(l);
            (&lo[l - 1], &mut hi[0])
        };
        dst.clear();
        dst.extend(w.chunks_exact(fan_in).zip(b).map(|(row, &bias)| {
            bias + row.iter().zip(prev).map(|(a, x)| a * x).sum::<f64>()
        }));
        if last {
            break;
        }
        if l == 0 && topo.has_ln() {
            let n = fan_out as f64;
            let mean = dst.iter().sum::<f64>() / n;
            let var = dst.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            let gain = &params[ln_at..ln_at + fan_out];
            let shift = &params[ln_at + fan_out..ln_at + 2 * fan_out];
            tape.inv_std = inv;
            tape.xhat.clear();
            for (i, z) in dst.iter_mut().enumerate() {
                let xh = (*z - mean) * inv;
                tape.xhat.push(xh);
                *z = (gain[i] * xh + shift[i]).tanh();
            }
        } else {
            for z in dst.iter_mut() {
                *z = z.tanh();
            }
        }
    }
    Ok(())
}

/// Accumulates `d out / d params · dy` into `grad`; optionally writes the input gradient.
pub fn backward(
    topo: &Topology,
    params: &[f64],
    tape: &mut Tape,
    dy: &[f64],
    grad: &mut [f64],
    dx: Option<&mut [f64]>,
) -> Result<(), DiffError> {
    if dy.len() != topo.output_dim {
        return Err(DiffError::Shape { expected: topo.output_dim, got: dy.len() });
    }
    if grad.len() != params.len() {
        return Err(DiffError::Shape { expected: params.len(), got: grad.len() });
    }
    let dims = topo.dense_dims();
    let ln_at = ln_offset(topo);
    let mut offsets = Vec::with_capacity(dims.len());
    let mut off = 0;
    for &(i, o) in &dims {
        offsets.push(off);
        off += i * o + o;
    }
    let mut delta = dy.to_vec();
    let mut dprev = std::mem::take(&mut tape.scratch);
    for l in (0..dims.len()).rev() {
        let (fan_in, fan_out) = dims[l];
        let off = offsets[l];
        let prev: &[f64] = if l == 0 { &tape.input } else { &tape.act[l - 1] };
        {
            let (gw, gb) = grad[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                for (g, &x) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(prev) {
                    *g += d * x;
                }
            }
        }
        let w = &params[off..off + fan_in * fan_out];
        if l == 0 {
            if let Some(dx) = dx {
                dx.iter_mut().for_each(|v| *v = 0.0);
                for (o, &d) in delta.iter().enumerate() {
                    for (v, &a) in dx.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                        *v += d * a;
                    }
                }
            }
            break;
        }
        dprev.clear();
        dprev.resize(fan_in, 0.0);
        for (o, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            for (v, &a) in dprev.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                *v += d * a;
            }
        }
        // through tanh of hidden layer l - 1
        let h = &tape.act[l - 1];
        for (v, &hv) in dprev.iter_mut().zip(h) {
            *v *= 1.0 - hv * hv;
        }
        if l == 1 && topo.has_ln() {
            let n = fan_in as f64;
            let (ggain, gshift) = grad[ln_at..ln_at + 2 * fan_in].split_at_mut(fan_in);
            let gain = &params[ln_at..ln_at + fan_in];
            let mut mean_d = 0.0;
            let mut mean_dx = 0.0;
            for i in 0..fan_in {
                ggain[i] += dprev[i] * tape.xhat[i];
                gshift[i] += dprev[i];
                dprev[i] *= gain[i];
                mean_d += dprev[i];
                mean_dx += dprev[i] * tape.xhat[i];
            }
            mean_d /= n;
            mean_dx /= n;
            for i in 0..fan_in {
                dprev[i] = tape.inv_std * (dprev[i] - mean_d - tape.xhat[i] * mean_dx);
            }
        }
        std::mem::swap(&mut delta, &mut dprev);
    }
    tape.scratch = dprev;
    Ok(())
}
