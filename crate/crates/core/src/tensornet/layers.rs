//! Dense, temporal convolution and residual layers.

use rand::Rng;

use super::{relu_backward_inplace, visit_child, visit_child_mut, Parameters, Tensor, TensorError};

fn he_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, n: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Fully connected layer `y = W x + b` with `W` stored as `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[output, input]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn he_uniform<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::from_vec(&[output, input], he_uniform(rng, input, input * output))
                .expect("shape"),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut d = Self::zeros(n, n);
        for i in 0..n {
            d.weight.data_mut()[i * n + i] = 1.0;
        }
        d
    }

    pub fn input_dim(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn output_dim(&self) -> usize {
        self.weight.dim(0)
    }

    /// Multiply-accumulates per forward pass (bias excluded).
    pub fn macs(&self) -> u64 {
        (self.input_dim() * self.output_dim()) as u64
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, TensorError> {
        if x.len() != self.input_dim() {
            return Err(TensorError::Shape(format!(
                "dense input: expected {}, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        let w = self.weight.data();
        let n_in = self.input_dim();
        Ok(self
            .bias
            .data()
            .iter()
            .enumerate()
            .map(|(o, b)| {
                let row = &w[o * n_in..(o + 1) * n_in];
                b + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>()
            })
            .collect())
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    pub fn backward(
        &self,
        x: &[f64],
        grad_out: &[f64],
        grad: &mut Dense,
    ) -> Result<Vec<f64>, TensorError> {
        let (n_in, n_out) = (self.input_dim(), self.output_dim());
        if x.len() != n_in || grad_out.len() != n_out {
            return Err(TensorError::Shape(format!(
                "dense backward: x {} / grad {} vs layer {n_in}->{n_out}",
                x.len(),
                grad_out.len()
            )));
        }
        let w = self.weight.data();
        let gw = grad.weight.data_mut();
        let mut gx = vec![0.0; n_in];
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &w[o * n_in..(o + 1) * n_in];
            let grow = &mut gw[o * n_in..(o + 1) * n_in];
            for i in 0..n_in {
                grow[i] += g * x[i];
                gx[i] += g * row[i];
            }
        }
        for (b, g) in grad.bias.data_mut().iter_mut().zip(grad_out) {
            *b += g;
        }
        Ok(gx)
    }
}

impl Parameters for Dense {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("weight", &self.weight);
        f("bias", &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("weight", &mut self.weight);
        f("bias", &mut self.bias);
    }
}

/// Temporal convolution over a `[channels, length]` input; kernels stored as `[out, in, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub weight: Tensor,
    pub bias: Tensor,
    stride: usize,
    pad: usize,
}

impl Conv1d {
    pub fn zeros(
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self, TensorError> {
        if kernel == 0 || stride == 0 || input == 0 || output == 0 {
            return Err(TensorError::Shape(
                "conv dimensions and stride must be positive".into(),
            ));
        }
        Ok(Self {
            weight: Tensor::zeros(&[output, input, kernel]),
            bias: Tensor::zeros(&[output]),
            stride,
            pad,
        })
    }

    /// Same-padded convolution (`pad = (k - 1) / 2`); `kernel` must be odd.
    pub fn same<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        if kernel.is_multiple_of(2) {
            return Err(TensorError::Shape(format!(
                "same padding needs an odd kernel, got {kernel}"
            )));
        }
        let mut c = Self::zeros(input, output, kernel, stride, (kernel - 1) / 2)?;
        let n = c.weight.len();
        c.weight.data_mut().copy_from_slice(&he_uniform(rng, input * kernel, n));
        Ok(c)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim(2)
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    pub fn out_len(&self, len: usize) -> Result<usize, TensorError> {
        let k = self.kernel();
        if len < k {
            return Err(TensorError::Shape(format!(
                "conv input length {len} shorter than kernel {k}"
            )));
        }
        Ok((len + 2 * self.pad - k) / self.stride + 1)
    }

    /// `out · in · k · L_out` multiply-accumulates (bias excluded).
    pub fn macs(&self, len: usize) -> Result<u64, TensorError> {
        Ok((self.out_channels() * self.in_channels() * self.kernel() * self.out_len(len)?) as u64)
    }

    /// Output range `t0..t1` for which `t * stride + off` lands inside `0..len`.
    fn valid_range(&self, off: isize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let t0 = if off < 0 { (-off + s - 1) / s } else { 0 };
        let last = len as isize - 1 - off;
        if last < 0 {
            return (0, 0);
        }
        let t1 = (last / s + 1).min(out_len as isize);
        (t0 as usize, t1.max(t0) as usize)
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize), TensorError> {
        if x.shape().len() != 2 || x.dim(0) != self.in_channels() {
            return Err(TensorError::Shape(format!(
                "conv input: expected [{}, L], got {:?}",
                self.in_channels(),
                x.shape()
            )));
        }
        let len = x.dim(1);
        Ok((len, self.out_len(len)?))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        let (len, out_len) = self.check_input(x)?;
        let (c_in, c_out, k) = (self.in_channels(), self.out_channels(), self.kernel());
        let s = self.stride;
        let w = self.weight.data();
        let xd = x.data();
        let mut y = vec![0.0; c_out * out_len];
        for o in 0..c_out {
            let yrow = &mut y[o * out_len..(o + 1) * out_len];
            yrow.fill(self.bias.data()[o]);
            for i in 0..c_in {
                let xrow = &xd[i * len..(i + 1) * len];
                for kk in 0..k {
                    let wv = w[(o * c_in + i) * k + kk];
                    let off = kk as isize - self.pad as isize;
                    let (t0, t1) = self.valid_range(off, len, out_len);
                    if t0 >= t1 {
                        continue;
                    }
                    let start = (t0 as isize * s as isize + off) as usize;
                    if s == 1 {
                        let xs = &xrow[start..start + (t1 - t0)];
                        for (yv, xv) in yrow[t0..t1].iter_mut().zip(xs) {
                            *yv += wv * xv;
                        }
                    } else {
                        for (j, yv) in yrow[t0..t1].iter_mut().enumerate() {
                            *yv += wv * xrow[start + j * s];
                        }
                    }
                }
            }
        }
        Tensor::from_vec(&[c_out, out_len], y)
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    pub fn backward(
        &self,
        x: &Tensor,
        grad_out: &Tensor,
        grad: &mut Conv1d,
    ) -> Result<Tensor, TensorError> {
        let (len, out_len) = self.check_input(x)?;
        let (c_in, c_out, k) = (self.in_channels(), self.out_channels(), self.kernel());
        grad_out.expect_shape(&[c_out, out_len], "conv grad_out")?;
        let s = self.stride;
        let w = self.weight.data();
        let xd = x.data();
        let gy = grad_out.data();
        let mut gx = vec![0.0; c_in * len];
        let gw = grad.weight.data_mut();
        for o in 0..c_out {
            let grow = &gy[o * out_len..(o + 1) * out_len];
            grad.bias.data_mut()[o] += grow.iter().sum::<f64>();
            for i in 0..c_in {
                let xrow = &xd[i * len..(i + 1) * len];
                let gxrow = &mut gx[i * len..(i + 1) * len];
                for kk in 0..k {
                    let widx = (o * c_in + i) * k + kk;
                    let wv = w[widx];
                    let off = kk as isize - self.pad as isize;
                    let (t0, t1) = self.valid_range(off, len, out_len);
                    if t0 >= t1 {
                        continue;
                    }
                    let start = (t0 as isize * s as isize + off) as usize;
                    let g = &grow[t0..t1];
                    if s == 1 {
                        let n = t1 - t0;
                        let xs = &xrow[start..start + n];
                        gw[widx] += g.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                        for (gxv, gv) in gxrow[start..start + n].iter_mut().zip(g) {
                            *gxv += wv * gv;
                        }
                    } else {
                        let mut acc = 0.0;
                        for (j, gv) in g.iter().enumerate() {
                            acc += gv * xrow[start + j * s];
                            gxrow[start + j * s] += wv * gv;
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
        Tensor::from_vec(&[c_in, len], gx)
    }
}

impl Parameters for Conv1d {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("weight", &self.weight);
        f("bias", &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("weight", &mut self.weight);
        f("bias", &mut self.bias);
    }
}

/// Basic residual block: `y = relu(conv2(relu(conv1(x))) + shortcut(x))`.
///
/// The shortcut is the identity when shapes agree, otherwise a strided 1×1 convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    pub shortcut: Option<Conv1d>,
}

/// Activations retained by [`ResidualBlock::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ResidualCache {
    hidden: Tensor,
    output: Tensor,
}

impl ResidualCache {
    pub fn output(&self) -> &Tensor {
        &self.output
    }
}

impl ResidualBlock {
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        let conv1 = Conv1d::same(input, output, kernel, stride, rng)?;
        let conv2 = Conv1d::same(output, output, kernel, 1, rng)?;
        let shortcut = if input != output || stride != 1 {
            Some(Conv1d::same(input, output, 1, stride, rng)?)
        } else {
            None
        };
        Ok(Self {
            conv1,
            conv2,
            shortcut,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels()
    }

    pub fn macs(&self, len: usize) -> Result<u64, TensorError> {
        let mid = self.conv1.out_len(len)?;
        let sc = match &self.shortcut {
            Some(c) => c.macs(len)?,
            None => 0,
        };
        Ok(self.conv1.macs(len)? + self.conv2.macs(mid)? + sc)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        Ok(self.forward_cached(x)?.output)
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<ResidualCache, TensorError> {
        let mut hidden = self.conv1.forward(x)?;
        hidden.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let mut out = self.conv2.forward(&hidden)?;
        match &self.shortcut {
            Some(sc) => {
                let s = sc.forward(x)?;
                out.data_mut()
                    .iter_mut()
                    .zip(s.data())
                    .for_each(|(a, b)| *a += b);
            }
            None => {
                x.expect_shape(out.shape(), "identity shortcut")?;
                out.data_mut()
                    .iter_mut()
                    .zip(x.data())
                    .for_each(|(a, b)| *a += b);
            }
        }
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        Ok(ResidualCache {
            hidden,
            output: out,
        })
    }

    pub fn backward(
        &self,
        x: &Tensor,
        cache: &ResidualCache,
        grad_out: &Tensor,
        grad: &mut ResidualBlock,
    ) -> Result<Tensor, TensorError> {
        grad_out.expect_shape(cache.output.shape(), "residual grad_out")?;
        let mut gz = grad_out.clone();
        relu_backward_inplace(cache.output.data(), gz.data_mut());
        let mut gh = self.conv2.backward(&cache.hidden, &gz, &mut grad.conv2)?;
        relu_backward_inplace(cache.hidden.data(), gh.data_mut());
        let mut gx = self.conv1.backward(x, &gh, &mut grad.conv1)?;
        let g_short = match (&self.shortcut, &mut grad.shortcut) {
            (Some(sc), Some(gsc)) => sc.backward(x, &gz, gsc)?,
            (None, None) => gz,
            _ => return Err(TensorError::Shape("gradient layout differs from block".into())),
        };
        gx.data_mut()
            .iter_mut()
            .zip(g_short.data())
            .for_each(|(a, b)| *a += b);
        Ok(gx)
    }
}

impl Parameters for ResidualBlock {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_child("conv1", &self.conv1, f);
        visit_child("conv2", &self.conv2, f);
        if let Some(sc) = &self.shortcut {
            visit_child("shortcut", sc, f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_child_mut("conv1", &mut self.conv1, f);
        visit_child_mut("conv2", &mut self.conv2, f);
        if let Some(sc) = &mut self.shortcut {
            visit_child_mut("shortcut", sc, f);
        }
    }
}

/// Global average pool over time: `[C, L] -> [C]`.
pub fn gap(x: &Tensor) -> Vec<f64> {
    let len = x.dim(1);
    (0..x.dim(0))
        .map(|c| x.row(c).iter().sum::<f64>() / len as f64)
        .collect()
}

pub fn gap_backward(grad: &[f64], len: usize) -> Tensor {
    let inv = 1.0 / len as f64;
    let data = grad
        .iter()
        .flat_map(|g| std::iter::repeat_n(g * inv, len))
        .collect();
    Tensor::from_vec(&[grad.len(), len], data).expect("gap shape")
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, else `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(n: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    if rate <= 0.0 {
        return vec![1.0; n];
    }
    let keep = 1.0 / (1.0 - rate);
    (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dense_identity_and_bias() {
        let d = Dense::identity(4);
        let x = [1.0, -2.0, 3.5, 0.25];
        assert_eq!(d.forward(&x).unwrap(), x.to_vec());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut d = Dense::he_uniform(4, 3, &mut rng);
        d.bias.data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
        assert_eq!(d.forward(&[0.0; 4]).unwrap(), vec![0.5, -1.0, 2.0]);
        assert!(d.forward(&[0.0; 5]).is_err());
        assert_eq!(Dense::zeros(10, 64).macs(), 640);
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut c = Conv1d::zeros(1, 1, 7, 1, 3).unwrap();
        c.weight.data_mut()[3] = 1.0;
        let x = Tensor::from_vec(&[1, 16], (0..16).map(|v| v as f64).collect()).unwrap();
        assert_eq!(c.forward(&x).unwrap(), x);
    }

    #[test]
    fn conv_output_length() {
        let c = Conv1d::zeros(2, 4, 7, 2, 3).unwrap();
        assert_eq!(c.out_len(128).unwrap(), 64);
        let c = Conv1d::zeros(2, 16, 7, 1, 3).unwrap();
        assert_eq!(c.out_len(128).unwrap(), 128);
        assert_eq!(c.macs(128).unwrap(), 28_672);
        assert!(c.out_len(5).is_err());
        assert!(c.forward(&Tensor::zeros(&[3, 128])).is_err());
    }

    #[test]
    fn conv_matches_direct_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for stride in [1, 2] {
            let c = Conv1d::same(3, 2, 5, stride, &mut rng).unwrap();
            let x = Tensor::from_vec(&[3, 11], (0..33).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
            let y = c.forward(&x).unwrap();
            for o in 0..2 {
                for t in 0..y.dim(1) {
                    let mut acc = c.bias.data()[o];
                    for i in 0..3 {
                        for kk in 0..5 {
                            let pos = (t * stride + kk) as isize - 2;
                            if (0..11).contains(&pos) {
                                acc += c.weight.data()[(o * 3 + i) * 5 + kk] * x.data()[i * 11 + pos as usize];
                            }
                        }
                    }
                    assert!((acc - y.data()[o * y.dim(1) + t]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn residual_block_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = ResidualBlock::new(16, 32, 5, 2, &mut rng).unwrap();
        assert!(b.shortcut.is_some());
        let y = b.forward(&Tensor::zeros(&[16, 128])).unwrap();
        assert_eq!(y.shape(), &[32, 64]);
        let b = ResidualBlock::new(16, 16, 5, 1, &mut rng).unwrap();
        assert!(b.shortcut.is_none());
        assert_eq!(b.num_params(), 2 * (16 * 16 * 5 + 16));
    }

    #[test]
    fn dropout_mask_is_inverted() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = dropout_mask(10_000, 0.2, &mut rng);
        assert!(m.iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-15));
        let mean = m.iter().sum::<f64>() / m.len() as f64;
        assert!((mean - 1.0).abs() < 0.03);
        assert!(dropout_mask(5, 0.0, &mut rng).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn gap_roundtrip_shapes() {
        let x = Tensor::from_vec(&[2, 4], vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 8.0]).unwrap();
        assert_eq!(gap(&x), vec![2.5, 2.0]);
        let g = gap_backward(&[4.0, 8.0], 4);
        assert_eq!(g.data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
    }
}
