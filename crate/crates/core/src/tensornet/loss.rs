use super::ProbVector;

/// Probabilities are clamped to `[LOG_CLAMP, 1 - LOG_CLAMP]` before taking logs.
pub const LOG_CLAMP: f64 = 1e-7;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP)
}

pub fn cross_entropy(p: &ProbVector, y: usize) -> f64 {
    -clamp_prob(p.as_slice()[y]).ln()
}

/// Gradient of `cross_entropy(softmax(z), y)` with respect to the logits `z`.
pub fn cross_entropy_logit_grad(p: &ProbVector, y: usize) -> Vec<f64> {
    let mut g = p.as_slice().to_vec();
    g[y] -= 1.0;
    g
}

/// Binary cross-entropy `-I log s - (1 - I) log(1 - s)`.
pub fn bce(s: f64, label: bool) -> f64 {
    let s = clamp_prob(s);
    if label {
        -s.ln()
    } else {
        -(1.0 - s).ln()
    }
}

/// Gradient of `bce(sigmoid(a), label)` with respect to the logit `a`.
pub fn bce_logit_grad(s: f64, label: bool) -> f64 {
    s - if label { 1.0 } else { 0.0 }
}
