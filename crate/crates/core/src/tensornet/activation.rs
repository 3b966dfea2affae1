use super::TensorError;

/// A probability vector on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Accepts finite non-negative entries summing to 1 within 1e-6.
    pub fn new(p: Vec<f64>) -> Result<Self, TensorError> {
        if p.is_empty() || p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(TensorError::NonFinite("probability vector".into()));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(TensorError::Shape(format!(
                "probability vector sums to {s}"
            )));
        }
        Ok(Self(p))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn one_hot(n: usize, k: usize) -> Self {
        let mut v = vec![0.0; n];
        v[k] = 1.0;
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate().skip(1) {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

/// Zeroes `grad` wherever the ReLU output `y` was not positive.
pub fn relu_backward_inplace(y: &[f64], grad: &mut [f64]) {
    for (g, &v) in grad.iter_mut().zip(y) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Softmax with max-subtraction.
pub fn softmax(z: &[f64]) -> ProbVector {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    ProbVector(e.into_iter().map(|v| v / s).collect())
}

pub fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}
