//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    cross_entropy, cross_entropy_logit_grad, gap, gap_backward, softmax, visit_child,
    visit_child_mut, zeros_like, Conv1d, Dense, Parameters, ResidualBlock, Tensor,
};

/// A differentiable scalar function of its parameters.
///
/// Inputs that should be checked as well are exposed as parameters of the fragment.
pub trait Fragment: Parameters + Clone {
    fn loss(&self) -> f64;
    /// Analytic gradient, laid out like `self`.
    fn gradient(&self) -> Self;
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so exact zeros compare cleanly.
    pub abs_floor: f64,
    /// Check a random subset of this many coordinates instead of all of them.
    pub max_params: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-3,
            abs_floor: 1e-6,
            max_params: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Name and offset of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn locate(p: &dyn Parameters, flat: usize) -> (String, usize) {
    let mut offset = 0;
    let mut found = None;
    p.visit(&mut |name, t| {
        if found.is_none() && flat < offset + t.len() {
            found = Some((name.to_string(), flat - offset));
        }
        offset += t.len();
    });
    found.expect("index within parameter count")
}

fn nudge(p: &mut dyn Parameters, flat: usize, delta: f64) {
    let mut offset = 0;
    p.visit_mut(&mut |_, t| {
        if flat >= offset && flat < offset + t.len() {
            t.data_mut()[flat - offset] += delta;
        }
        offset += t.len();
    });
}

pub fn gradcheck<F: Fragment>(fragment: &F, cfg: &GradCheckConfig) -> GradReport {
    let analytic = fragment.gradient().flatten();
    let n = analytic.len();
    let coords: Vec<usize> = match cfg.max_params {
        Some(k) if k < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut idx = sample(&mut rng, n, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    };

    let mut work = fragment.clone();
    let mut report = GradReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
        tolerance: cfg.tolerance,
    };
    for &i in &coords {
        nudge(&mut work, i, cfg.step);
        let up = work.loss();
        nudge(&mut work, i, -2.0 * cfg.step);
        let down = work.loss();
        nudge(&mut work, i, cfg.step);
        let numeric = (up - down) / (2.0 * cfg.step);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.abs_floor);
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = Some(locate(fragment, i));
        }
    }
    report
}

fn random_tensor<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("shape")
}

fn randomize_bias<R: Rng + ?Sized>(bias: &mut Tensor, rng: &mut R) {
    bias.data_mut()
        .iter_mut()
        .for_each(|b| *b = rng.random_range(-0.1..0.1));
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `L = r · dense(x)` with the input `x` checked alongside the layer.
#[derive(Debug, Clone)]
pub struct DenseProbe {
    pub layer: Dense,
    pub input: Tensor,
    projection: Vec<f64>,
}

impl DenseProbe {
    pub fn random<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let mut layer = Dense::he_uniform(input, output, rng);
        randomize_bias(&mut layer.bias, rng);
        Self {
            layer,
            input: random_tensor(&[input], rng),
            projection: random_tensor(&[output], rng).into_data(),
        }
    }
}

impl Parameters for DenseProbe {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_child("layer", &self.layer, f);
        f("input", &self.input);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_child_mut("layer", &mut self.layer, f);
        f("input", &mut self.input);
    }
}

impl Fragment for DenseProbe {
    fn loss(&self) -> f64 {
        dot(&self.layer.forward(self.input.data()).expect("shape"), &self.projection)
    }

    fn gradient(&self) -> Self {
        let mut g = zeros_like(self);
        let gx = self
            .layer
            .backward(self.input.data(), &self.projection, &mut g.layer)
            .expect("shape");
        g.input.data_mut().copy_from_slice(&gx);
        g
    }
}

/// `L = <R, conv(x)>` over a random projection `R`.
#[derive(Debug, Clone)]
pub struct ConvProbe {
    pub layer: Conv1d,
    pub input: Tensor,
    projection: Tensor,
}

impl ConvProbe {
    pub fn random<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        len: usize,
        rng: &mut R,
    ) -> Self {
        let mut layer = Conv1d::same(c_in, c_out, kernel, stride, rng).expect("conv");
        randomize_bias(&mut layer.bias, rng);
        let out_len = layer.out_len(len).expect("length");
        Self {
            layer,
            input: random_tensor(&[c_in, len], rng),
            projection: random_tensor(&[c_out, out_len], rng),
        }
    }
}

impl Parameters for ConvProbe {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_child("layer", &self.layer, f);
        f("input", &self.input);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_child_mut("layer", &mut self.layer, f);
        f("input", &mut self.input);
    }
}

impl Fragment for ConvProbe {
    fn loss(&self) -> f64 {
        let y = self.layer.forward(&self.input).expect("shape");
        dot(y.data(), self.projection.data())
    }

    fn gradient(&self) -> Self {
        let mut g = zeros_like(self);
        g.input = self
            .layer
            .backward(&self.input, &self.projection, &mut g.layer)
            .expect("shape");
        g
    }
}

/// `L = <R, block(x)>` for a residual block.
#[derive(Debug, Clone)]
pub struct ResidualProbe {
    pub block: ResidualBlock,
    pub input: Tensor,
    projection: Tensor,
}

impl ResidualProbe {
    pub fn random<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        len: usize,
        rng: &mut R,
    ) -> Self {
        let mut block = ResidualBlock::new(c_in, c_out, kernel, stride, rng).expect("block");
        randomize_bias(&mut block.conv1.bias, rng);
        randomize_bias(&mut block.conv2.bias, rng);
        let input = random_tensor(&[c_in, len], rng);
        let out = block.forward(&input).expect("shape");
        Self {
            block,
            input,
            projection: random_tensor(out.shape(), rng),
        }
    }
}

impl Parameters for ResidualProbe {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_child("block", &self.block, f);
        f("input", &self.input);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_child_mut("block", &mut self.block, f);
        f("input", &mut self.input);
    }
}

impl Fragment for ResidualProbe {
    fn loss(&self) -> f64 {
        let y = self.block.forward(&self.input).expect("shape");
        dot(y.data(), self.projection.data())
    }

    fn gradient(&self) -> Self {
        let mut g = zeros_like(self);
        let cache = self.block.forward_cached(&self.input).expect("shape");
        g.input = self
            .block
            .backward(&self.input, &cache, &self.projection, &mut g.block)
            .expect("shape");
        g
    }
}

/// Classification head: global average pool, dense, softmax, cross-entropy.
#[derive(Debug, Clone)]
pub struct SoftmaxHeadProbe {
    pub head: Dense,
    pub features: Tensor,
    label: usize,
}

impl SoftmaxHeadProbe {
    pub fn random<R: Rng + ?Sized>(channels: usize, len: usize, classes: usize, rng: &mut R) -> Self {
        let mut head = Dense::he_uniform(channels, classes, rng);
        randomize_bias(&mut head.bias, rng);
        Self {
            head,
            features: random_tensor(&[channels, len], rng),
            label: rng.random_range(0..classes),
        }
    }
}

impl Parameters for SoftmaxHeadProbe {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_child("head", &self.head, f);
        f("features", &self.features);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_child_mut("head", &mut self.head, f);
        f("features", &mut self.features);
    }
}

impl Fragment for SoftmaxHeadProbe {
    fn loss(&self) -> f64 {
        let z = self.head.forward(&gap(&self.features)).expect("shape");
        cross_entropy(&softmax(&z), self.label)
    }

    fn gradient(&self) -> Self {
        let mut g = zeros_like(self);
        let pooled = gap(&self.features);
        let p = softmax(&self.head.forward(&pooled).expect("shape"));
        let gz = cross_entropy_logit_grad(&p, self.label);
        let gp = self.head.backward(&pooled, &gz, &mut g.head).expect("shape");
        g.features = gap_backward(&gp, self.features.dim(1));
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_4_to_3() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let r = gradcheck(&DenseProbe::random(4, 3, &mut rng), &GradCheckConfig::default());
            assert!(r.passed(), "{r:?}");
            assert_eq!(r.checked, 4 * 3 + 3 + 4);
        }
    }

    #[test]
    fn conv_2_to_4_k7() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for stride in [1, 2] {
            let p = ConvProbe::random(2, 4, 7, stride, 20, &mut rng);
            let r = gradcheck(&p, &GradCheckConfig::default());
            assert!(r.passed(), "stride {stride}: {r:?}");
        }
    }

    #[test]
    fn residual_and_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = gradcheck(
            &ResidualProbe::random(3, 4, 5, 2, 16, &mut rng),
            &GradCheckConfig::default(),
        );
        assert!(r.passed(), "{r:?}");
        let r = gradcheck(
            &ResidualProbe::random(4, 4, 3, 1, 12, &mut rng),
            &GradCheckConfig::default(),
        );
        assert!(r.passed(), "{r:?}");
        let r = gradcheck(
            &SoftmaxHeadProbe::random(6, 8, 10, &mut rng),
            &GradCheckConfig::default(),
        );
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        #[derive(Clone)]
        struct Broken(Tensor);
        impl Parameters for Broken {
            fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
                f("x", &self.0)
            }
            fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
                f("x", &mut self.0)
            }
        }
        impl Fragment for Broken {
            fn loss(&self) -> f64 {
                self.0.data().iter().map(|v| v * v).sum()
            }
            fn gradient(&self) -> Self {
                // should be 2x
                Broken(Tensor::from_vec(self.0.shape(), self.0.data().to_vec()).unwrap())
            }
        }
        let b = Broken(Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap());
        let r = gradcheck(&b, &GradCheckConfig::default());
        assert!(!r.passed());
        assert!((r.max_rel_err - 0.5).abs() < 1e-6);
    }

    #[test]
    fn subsampling_limits_checked_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ConvProbe::random(4, 8, 5, 1, 32, &mut rng);
        let cfg = GradCheckConfig {
            max_params: Some(25),
            ..GradCheckConfig::default()
        };
        let r = gradcheck(&p, &cfg);
        assert_eq!(r.checked, 25);
        assert!(r.passed());
    }
}
