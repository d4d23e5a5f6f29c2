use super::PolicySpec;

/// Row index of a context window: the window read as a base-(V+1) number.
fn row(spec: &PolicySpec, window: &[u32]) -> usize {
    let base = spec.vocab_size + 1;
    window.iter().fold(0usize, |acc, &t| acc * base + t as usize)
}

pub(super) fn logits<'a>(spec: &PolicySpec, theta: &'a [f64], window: &[u32]) -> &'a [f64] {
    let v = spec.vocab_size;
    let r = row(spec, window);
    &theta[r * v..(r + 1) * v]
}

pub(super) fn backward(spec: &PolicySpec, window: &[u32], dlogits: &[f64], grad: &mut [f64]) {
    let v = spec.vocab_size;
    let r = row(spec, window);
    for (g, d) in grad[r * v..(r + 1) * v].iter_mut().zip(dlogits) {
        *g += d;
    }
}
