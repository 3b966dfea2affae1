use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::{ArchConfig, BackboneError, ExitPair, ExitPoint};
use crate::iqgen::IqMatrix;
use crate::tensornet::{
    cross_entropy, cross_entropy_logit_grad, gap, gap_backward, relu_backward_inplace, softmax,
    visit_child, visit_child_mut, zeros_like, Conv1d, Dense, Fragment, Parameters, ProbVector,
    ResidualBlock, ResidualCache, Tensor,
};
use crate::{FRAME_LEN, NUM_CLASSES};

static NEXT_MODEL_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed)
}

/// `[2, 128]` input tensor: row 0 in-phase, row 1 quadrature.
pub fn frame_tensor(iq: &IqMatrix) -> Result<Tensor, BackboneError> {
    if !iq.is_finite() {
        return Err(BackboneError::MalformedFrame("non-finite sample".into()));
    }
    let data = iq.as_slice().iter().map(|&v| v as f64).collect();
    Ok(Tensor::from_vec(&[2, FRAME_LEN], data)?)
}

/// Shared feature extractor plus the final-exit head.
#[derive(Debug, Clone, PartialEq)]
pub struct Trunk {
    pub stem: Conv1d,
    pub stages: Vec<Vec<ResidualBlock>>,
    pub fe_head: Dense,
}

impl Parameters for Trunk {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_child("stem", &self.stem, f);
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.iter().enumerate() {
                visit_child(&format!("stage{}.block{}", s + 1, b + 1), block, f);
            }
        }
        visit_child("fe_head", &self.fe_head, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_child_mut("stem", &mut self.stem, f);
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for (b, block) in stage.iter_mut().enumerate() {
                visit_child_mut(&format!("stage{}.block{}", s + 1, b + 1), block, f);
            }
        }
        visit_child_mut("fe_head", &mut self.fe_head, f);
    }
}

/// Activations retained for the backward pass through the trunk.
struct TrunkTrace {
    stem_out: Tensor,
    blocks: Vec<ResidualCache>,
}

impl Trunk {
    fn new<R: Rng + ?Sized>(arch: &ArchConfig, rng: &mut R) -> Result<Self, BackboneError> {
        arch.validate()?;
        let stem = Conv1d::same(2, arch.stem_channels, arch.stem_kernel, 1, rng)?;
        let mut c_in = arch.stem_channels;
        let mut stages = Vec::with_capacity(3);
        for (s, &width) in arch.stage_widths.iter().enumerate() {
            let mut blocks = Vec::with_capacity(arch.blocks_per_stage);
            for b in 0..arch.blocks_per_stage {
                let stride = if b == 0 { ArchConfig::stage_stride(s) } else { 1 };
                let mut block = ResidualBlock::new(c_in, width, arch.block_kernel, stride, rng)?;
                // no normalization layers: start each residual branch at zero so the
                // untrained trunk passes signal through shortcuts only
                block.conv2.weight.data_mut().fill(0.0);
                blocks.push(block);
                c_in = width;
            }
            stages.push(blocks);
        }
        let fe_head = Dense::he_uniform(c_in, NUM_CLASSES, rng);
        Ok(Self {
            stem,
            stages,
            fe_head,
        })
    }

    pub(crate) fn stem_forward(&self, x: &Tensor) -> Result<Tensor, BackboneError> {
        let mut y = self.stem.forward(x)?;
        y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        Ok(y)
    }

    /// Runs stages `from..to` (0-based, exclusive end).
    pub(crate) fn run_stages(
        &self,
        mut x: Tensor,
        from: usize,
        to: usize,
    ) -> Result<Tensor, BackboneError> {
        for stage in &self.stages[from..to] {
            for block in stage {
                x = block.forward(&x)?;
            }
        }
        Ok(x)
    }

    pub(crate) fn head(head: &Dense, features: &Tensor) -> Result<ProbVector, BackboneError> {
        Ok(softmax(&head.forward(&gap(features))?))
    }

    fn forward_traced(&self, x: &Tensor) -> Result<TrunkTrace, BackboneError> {
        let stem_out = self.stem_forward(x)?;
        let mut blocks: Vec<ResidualCache> = Vec::new();
        for block in self.stages.iter().flatten() {
            let input = blocks.last().map_or(&stem_out, |c| c.output());
            let cache = block.forward_cached(input)?;
            blocks.push(cache);
        }
        Ok(TrunkTrace { stem_out, blocks })
    }

    /// Cross-entropy of the final exit; accumulates the trunk gradient into `grad`.
    pub(crate) fn fe_loss_and_grad(
        &self,
        x: &Tensor,
        label: usize,
        grad: &mut Trunk,
    ) -> Result<(f64, ProbVector), BackboneError> {
        let trace = self.forward_traced(x)?;
        let feats = trace.blocks.last().map_or(&trace.stem_out, |c| c.output());
        let pooled = gap(feats);
        let p = softmax(&self.fe_head.forward(&pooled)?);
        let loss = cross_entropy(&p, label);
        let gz = cross_entropy_logit_grad(&p, label);
        let gp = self.fe_head.backward(&pooled, &gz, &mut grad.fe_head)?;
        let mut g = gap_backward(&gp, feats.dim(1));

        let blocks: Vec<&ResidualBlock> = self.stages.iter().flatten().collect();
        let mut grad_blocks: Vec<&mut ResidualBlock> = grad.stages.iter_mut().flatten().collect();
        for i in (0..blocks.len()).rev() {
            let input = if i == 0 {
                &trace.stem_out
            } else {
                trace.blocks[i - 1].output()
            };
            g = blocks[i].backward(input, &trace.blocks[i], &g, grad_blocks[i])?;
        }
        relu_backward_inplace(trace.stem_out.data(), g.data_mut());
        self.stem.backward(x, &g, &mut grad.stem)?;
        Ok((loss, p))
    }
}

/// Activation at the exit point, stamped with the model identity and version that
/// produced it.
#[derive(Debug, Clone)]
pub struct ExitCache {
    activation: Tensor,
    model_id: u64,
    version: u64,
}

impl ExitCache {
    pub fn activation(&self) -> &Tensor {
        &self.activation
    }
}

/// Backbone with one early-exit head.
///
/// Every mutable access bumps the version stamp so that exit caches taken before the
/// write are rejected by [`AmcModel::forward_final`].
#[derive(Debug)]
pub struct AmcModel {
    arch: ArchConfig,
    trunk: Trunk,
    ee_head: Dense,
    version: u64,
    id: u64,
}

impl Clone for AmcModel {
    fn clone(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            trunk: self.trunk.clone(),
            ee_head: self.ee_head.clone(),
            version: self.version,
            id: fresh_id(),
        }
    }
}

impl PartialEq for AmcModel {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.trunk == other.trunk && self.ee_head == other.ee_head
    }
}

impl Parameters for AmcModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.trunk.visit(f);
        visit_child("ee_head", &self.ee_head, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.version += 1;
        self.trunk.visit_mut(f);
        visit_child_mut("ee_head", &mut self.ee_head, f);
    }
}

impl AmcModel {
    pub fn new<R: Rng + ?Sized>(arch: ArchConfig, rng: &mut R) -> Result<Self, BackboneError> {
        let trunk = Trunk::new(&arch, rng)?;
        let width = arch.stage_widths[arch.exit_point.stage() - 1];
        let ee_head = Dense::he_uniform(width, NUM_CLASSES, rng);
        Ok(Self {
            arch,
            trunk,
            ee_head,
            version: 0,
            id: fresh_id(),
        })
    }

    /// Same trunk, fresh early-exit head attached at `exit_point`.
    pub fn with_exit_point<R: Rng + ?Sized>(&self, exit_point: ExitPoint, rng: &mut R) -> Self {
        let arch = self.arch.with_exit_point(exit_point);
        let width = arch.stage_widths[exit_point.stage() - 1];
        Self {
            arch,
            trunk: self.trunk.clone(),
            ee_head: Dense::he_uniform(width, NUM_CLASSES, rng),
            version: 0,
            id: fresh_id(),
        }
    }

    pub(crate) fn from_parts(arch: ArchConfig, trunk: Trunk, ee_head: Dense, version: u64) -> Self {
        Self {
            arch,
            trunk,
            ee_head,
            version,
            id: fresh_id(),
        }
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn exit_point(&self) -> ExitPoint {
        self.arch.exit_point
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn trunk(&self) -> &Trunk {
        &self.trunk
    }

    pub fn ee_head(&self) -> &Dense {
        &self.ee_head
    }

    pub fn trunk_mut(&mut self) -> &mut Trunk {
        self.version += 1;
        &mut self.trunk
    }

    pub fn ee_head_mut(&mut self) -> &mut Dense {
        self.version += 1;
        &mut self.ee_head
    }

    pub fn forward_to_exit(&self, iq: &IqMatrix) -> Result<(ExitPair, ExitCache), BackboneError> {
        let x = frame_tensor(iq)?;
        let stem = self.trunk.stem_forward(&x)?;
        let act = self.trunk.run_stages(stem, 0, self.exit_point().stage())?;
        let p_e = Trunk::head(&self.ee_head, &act)?;
        Ok((
            ExitPair::early(p_e),
            ExitCache {
                activation: act,
                model_id: self.id,
                version: self.version,
            },
        ))
    }

    /// Continues an early-exit pass through the remaining stages and the final head.
    pub fn forward_final(&self, cache: &ExitCache) -> Result<ProbVector, BackboneError> {
        if cache.model_id != self.id || cache.version != self.version {
            return Err(BackboneError::StaleCache {
                cached_id: cache.model_id,
                cached_version: cache.version,
                model_id: self.id,
                model_version: self.version,
            });
        }
        let feats = self.trunk.run_stages(
            cache.activation.clone(),
            self.exit_point().stage(),
            self.trunk.stages.len(),
        )?;
        Trunk::head(&self.trunk.fe_head, &feats)
    }

    /// Single pass producing both exits.
    pub fn forward_full(&self, iq: &IqMatrix) -> Result<ExitPair, BackboneError> {
        let x = frame_tensor(iq)?;
        let mut h = self.trunk.stem_forward(&x)?;
        let mut p_e = None;
        for (s, stage) in self.trunk.stages.iter().enumerate() {
            for block in stage {
                h = block.forward(&h)?;
            }
            if s + 1 == self.exit_point().stage() {
                p_e = Some(Trunk::head(&self.ee_head, &h)?);
            }
        }
        let p_f = Trunk::head(&self.trunk.fe_head, &h)?;
        Ok(ExitPair::full(p_e.expect("exit point within stages"), p_f))
    }

    /// Final-exit probabilities only.
    pub fn predict_final(&self, iq: &IqMatrix) -> Result<ProbVector, BackboneError> {
        let x = frame_tensor(iq)?;
        let h = self.trunk.stem_forward(&x)?;
        let h = self.trunk.run_stages(h, 0, self.trunk.stages.len())?;
        Trunk::head(&self.trunk.fe_head, &h)
    }

    /// Pooled exit-point features, the input of the early-exit head.
    pub fn exit_features(&self, iq: &IqMatrix) -> Result<Vec<f64>, BackboneError> {
        let x = frame_tensor(iq)?;
        let h = self.trunk.stem_forward(&x)?;
        Ok(gap(&self.trunk.run_stages(h, 0, self.exit_point().stage())?))
    }
}

/// Final-exit cross-entropy of a (small) model on one frame, for gradient checking.
#[derive(Debug, Clone)]
pub struct BackboneProbe {
    pub trunk: Trunk,
    input: Tensor,
    label: usize,
}

impl BackboneProbe {
    pub fn random<R: Rng + ?Sized>(arch: &ArchConfig, rng: &mut R) -> Result<Self, BackboneError> {
        let mut trunk = Trunk::new(arch, rng)?;
        // random residual branches and biases, otherwise the zero-initialised second
        // convolutions would hide most of the gradient
        trunk.visit_mut(&mut |name, t| {
            if name.ends_with("bias") {
                t.data_mut()
                    .iter_mut()
                    .for_each(|b| *b = rng.random_range(-0.1..0.1));
            } else if name.ends_with("conv2.weight") {
                t.data_mut()
                    .iter_mut()
                    .for_each(|w| *w = rng.random_range(-0.5..0.5));
            }
        });
        let input = (0..2 * FRAME_LEN).map(|_| rng.random_range(-1.0..1.0)).collect();
        Ok(Self {
            trunk,
            input: Tensor::from_vec(&[2, FRAME_LEN], input)?,
            label: rng.random_range(0..NUM_CLASSES),
        })
    }
}

impl Parameters for BackboneProbe {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.trunk.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.trunk.visit_mut(f);
    }
}

impl Fragment for BackboneProbe {
    fn loss(&self) -> f64 {
        let h = self.trunk.stem_forward(&self.input).expect("shape");
        let h = self.trunk.run_stages(h, 0, self.trunk.stages.len()).expect("shape");
        cross_entropy(&Trunk::head(&self.trunk.fe_head, &h).expect("shape"), self.label)
    }

    fn gradient(&self) -> Self {
        let mut g = zeros_like(self);
        self.trunk
            .fe_loss_and_grad(&self.input, self.label, &mut g.trunk)
            .expect("shape");
        g
    }
}
