//! Embedding window -> tanh hidden layers -> vocabulary logits.
//!
//! Parameter layout in `theta`:
//! `[embedding (V+1) x d] [W_1 (h_1 x k*d), b_1] ... [W_out (V x h_L), b_out]`,
//! weight matrices row-major.

use super::PolicySpec;
use crate::rng::RngStream;

struct Layer {
    w: usize,
    b: usize,
    fan_in: usize,
    fan_out: usize,
}

fn layers(spec: &PolicySpec) -> (usize, Vec<Layer>) {
    let embed = (spec.vocab_size + 1) * spec.embed_dim;
    let mut offset = embed;
    let mut fan_in = spec.context_len * spec.embed_dim;
    let mut out = Vec::with_capacity(spec.hidden_sizes.len() + 1);
    for &fan_out in spec.hidden_sizes.iter().chain(std::iter::once(&spec.vocab_size)) {
        let w = offset;
        let b = w + fan_in * fan_out;
        out.push(Layer {
            w,
            b,
            fan_in,
            fan_out,
        });
        offset = b + fan_out;
        fan_in = fan_out;
    }
    (embed, out)
}

pub(super) fn init(spec: &PolicySpec, theta: &mut [f64], scale: f64, rng: &mut RngStream) {
    let (embed, layers) = layers(spec);
    for x in theta[..embed].iter_mut() {
        *x = scale * (2.0 * rng.uniform() - 1.0);
    }
    for l in &layers {
        let s = scale / (l.fan_in as f64).sqrt();
        for x in theta[l.w..l.b].iter_mut() {
            *x = s * (2.0 * rng.uniform() - 1.0);
        }
    }
}

/// Returns logits and the inputs of every layer (index 0 is the embedded
/// window, index i the tanh output of hidden layer i).
pub(super) fn forward(spec: &PolicySpec, theta: &[f64], window: &[u32]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = spec.embed_dim;
    let (_, layers) = layers(spec);
    let mut x = Vec::with_capacity(window.len() * d);
    for &t in window {
        let start = t as usize * d;
        x.extend_from_slice(&theta[start..start + d]);
    }
    let mut acts = vec![x];
    let last = layers.len() - 1;
    for (i, l) in layers.iter().enumerate() {
        let input = acts.last().unwrap();
        let mut z = theta[l.b..l.b + l.fan_out].to_vec();
        for (o, zo) in z.iter_mut().enumerate() {
            let row = &theta[l.w + o * l.fan_in..l.w + (o + 1) * l.fan_in];
            *zo += row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>();
        }
        if i == last {
            return (z, acts);
        }
        acts.push(z.into_iter().map(f64::tanh).collect());
    }
    unreachable!("output layer always present")
}

pub(super) fn backward(
    spec: &PolicySpec,
    theta: &[f64],
    window: &[u32],
    acts: &[Vec<f64>],
    dlogits: &[f64],
    grad: &mut [f64],
) {
    let d = spec.embed_dim;
    let (_, layers) = layers(spec);
    let mut delta = dlogits.to_vec();
    for (i, l) in layers.iter().enumerate().rev() {
        let input = &acts[i];
        for (o, &dz) in delta.iter().enumerate() {
            if dz == 0.0 {
                continue;
            }
            grad[l.b + o] += dz;
            let g = &mut grad[l.w + o * l.fan_in..l.w + (o + 1) * l.fan_in];
            for (gw, a) in g.iter_mut().zip(input) {
                *gw += dz * a;
            }
        }
        let mut dinput = vec![0.0; l.fan_in];
        for (o, &dz) in delta.iter().enumerate() {
            if dz == 0.0 {
                continue;
            }
            let row = &theta[l.w + o * l.fan_in..l.w + (o + 1) * l.fan_in];
            for (di, w) in dinput.iter_mut().zip(row) {
                *di += dz * w;
            }
        }
        if i > 0 {
            // input is tanh output: d tanh = 1 - a^2
            for (di, a) in dinput.iter_mut().zip(input) {
                *di *= 1.0 - a * a;
            }
        }
        delta = dinput;
    }
    for (j, &t) in window.iter().enumerate() {
        let start = t as usize * d;
        for (g, dx) in grad[start..start + d].iter_mut().zip(&delta[j * d..(j + 1) * d]) {
            *g += dx;
        }
    }
}
