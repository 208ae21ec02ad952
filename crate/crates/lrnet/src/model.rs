//! The segmentation network: a five-stage encoder of LFEA blocks with
//! low-level feature distribution (LFD) into the deeper stages, RFT-refined
//! skip connections, SBAM decoder fusion, and a single-channel prediction
//! head. Also: parameter/FLOP ledgers and weight-file serialization.
//!
//! Structure summary (default config, window 256):
//!
//! * encoder `stage1..stage5`, output channels 4, 8, 16, 32, 64 at extents
//!   128, 64, 32, 16, 8 (each stage halves);
//! * inputs to stages 3..5 are the previous stage output concatenated with
//!   the stage-1 features max-pooled down to matching extent (LFD);
//! * skips `rft1..rft4` refine `out1..out4`;
//! * decoder fuses top-down: `f4 = sbam4(rft4(out4), out5)`, ...,
//!   `f1 = sbam1(rft1(out1), f2)`;
//! * head: bilinear-upsample `f1` to full extent, pointwise-conv to one
//!   channel; training consumes the logits, inference applies the sigmoid.
//!
//! Every toggle in [`ModelConfig`] swaps one of these pieces for its plain
//! counterpart so ablation variants stay constructible.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv1x1, DsCache, DsConvBlock, EcaCache, EcaLayer};
use crate::tensor::{
    add, bilinear_upsample, bilinear_upsample_backward, concat_channels, lit, max_pool2d,
    max_pool2d_backward, mul, sigmoid, slice_channels, PoolCache, Scalar, Tensor,
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Channel multipliers the scaling study exposes.
pub const ALLOWED_MULTIPLIERS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

/// Architecture hyperparameters. `validate` enforces the invariants; the
/// counting functions are total so degenerate configs (e.g. zero stages)
/// simply count zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Output channels per encoder stage, before the multiplier.
    pub stage_channels: Vec<usize>,
    /// Uniform width multiplier, one of [`ALLOWED_MULTIPLIERS`].
    pub channel_multiplier: f64,
    /// Training/inference tile extent; divisible by 32 so five halvings stay
    /// integral and even.
    pub window: usize,
    pub use_lfea: bool,
    pub use_lfd: bool,
    pub use_rft: bool,
    pub use_sbam: bool,
    /// ECA 1-D kernel size (odd).
    pub eca_k: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stage_channels: vec![4, 8, 16, 32, 64],
            channel_multiplier: 1.0,
            window: 256,
            use_lfea: true,
            use_lfd: true,
            use_rft: true,
            use_sbam: true,
            eca_k: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != 5 {
            return Err(Error::Config(format!(
                "expected 5 encoder stages, got {}",
                self.stage_channels.len()
            )));
        }
        if !self.stage_channels.windows(2).all(|p| p[0] < p[1]) {
            return Err(Error::Config(format!(
                "stage channels must be strictly increasing, got {:?}",
                self.stage_channels
            )));
        }
        if !ALLOWED_MULTIPLIERS.contains(&self.channel_multiplier) {
            return Err(Error::Config(format!(
                "channel multiplier must be one of {ALLOWED_MULTIPLIERS:?}, got {}",
                self.channel_multiplier
            )));
        }
        if self.window == 0 || !self.window.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "window must be a positive multiple of 32, got {}",
                self.window
            )));
        }
        if self.eca_k % 2 != 1 {
            return Err(Error::Config(format!("ECA kernel size must be odd, got {}", self.eca_k)));
        }
        Ok(())
    }

    /// Stage channels after the multiplier (at least 1 each).
    pub fn scaled_channels(&self) -> Vec<usize> {
        self.stage_channels
            .iter()
            .map(|&c| ((c as f64 * self.channel_multiplier).round() as usize).max(1))
            .collect()
    }

    /// Input channel count of a (1-based) encoder stage: the image for stage
    /// 1, the previous stage's output after that, plus the injected stage-1
    /// channels for stages 3 and deeper when LFD is on.
    fn stage_in_channels(&self, scaled: &[usize], level: usize) -> usize {
        match level {
            1 => 1,
            2 => scaled[0],
            l => scaled[l - 2] + if self.use_lfd { scaled[0] } else { 0 },
        }
    }

    /// Exact trainable-scalar count implied by this config: conv kernels,
    /// conv biases, batch-norm gamma/beta, ECA kernels. Running statistics
    /// are buffers, not parameters, and are excluded.
    pub fn count_params(&self) -> u64 {
        let sc = self.scaled_channels();
        let l = sc.len();
        let mut total = 0u64;
        for lvl in 1..=l {
            let c_in = self.stage_in_channels(&sc, lvl);
            let c_out = sc[lvl - 1];
            if self.use_lfea {
                total += 2 * DsConvBlock::<f32>::param_count(c_in, c_out) + self.eca_k as u64;
            } else {
                total += DsConvBlock::<f32>::param_count(c_in, c_out);
            }
        }
        for lvl in 1..l {
            let c_low = sc[lvl - 1] as u64;
            let c_high = sc[lvl] as u64;
            if self.use_rft {
                total += DsConvBlock::<f32>::param_count(sc[lvl - 1], sc[lvl - 1]) + self.eca_k as u64;
            }
            // Fusion projection (1x1 + bias) exists in both variants; SBAM
            // adds the attention conv and a trailing ECA.
            total += c_high * c_low + c_low;
            if self.use_sbam {
                total += c_low * c_low + c_low + self.eca_k as u64;
            }
        }
        if l >= 1 {
            total += sc[0] as u64 + 1; // head: pointwise to 1 channel + bias
        }
        total
    }

    /// FLOPs of one forward pass over a single window-sized tile, using the
    /// 1 MAC = 2 FLOPs convention over convolutions only (pooling,
    /// activations, and elementwise merges excluded).
    pub fn flops_per_window(&self) -> u64 {
        let sc = self.scaled_channels();
        let l = sc.len();
        let mut macs = 0u64;
        let mut ext = self.window as u64; // input extent of the current stage
        let mut out_exts = Vec::with_capacity(l);
        for lvl in 1..=l {
            let c_in = self.stage_in_channels(&sc, lvl) as u64;
            let c_out = sc[lvl - 1] as u64;
            let half = ext / 2;
            // Stride-2 branch: depthwise then pointwise at the halved extent.
            macs += half * half * c_in * 9 + half * half * c_out * c_in;
            if self.use_lfea {
                // Stride-1 branch runs at full extent before its pooling.
                macs += ext * ext * c_in * 9 + ext * ext * c_out * c_in;
                macs += self.eca_k as u64 * c_out;
            }
            ext = half;
            out_exts.push(ext);
        }
        for lvl in 1..l {
            let c_low = sc[lvl - 1] as u64;
            let c_high = sc[lvl] as u64;
            let e_low = out_exts[lvl - 1];
            let e_high = out_exts[lvl];
            if self.use_rft {
                macs += e_low * e_low * c_low * 9 + e_low * e_low * c_low * c_low;
                macs += self.eca_k as u64 * c_low;
            }
            // Projection happens before the upsample, at the high extent.
            macs += e_high * e_high * c_low * c_high;
            if self.use_sbam {
                macs += e_low * e_low * c_low * c_low;
                macs += self.eca_k as u64 * c_low;
            }
        }
        if l >= 1 {
            macs += (self.window * self.window) as u64 * sc[0] as u64;
        }
        2 * macs
    }

    /// FLOPs for an input of the given extents: the tile count at this
    /// window times the per-window cost (tiled inference runs the network
    /// once per tile).
    pub fn count_flops(&self, input_h: usize, input_w: usize) -> u64 {
        if self.stage_channels.is_empty() || self.window == 0 {
            return 0;
        }
        let tiles_h = input_h.div_ceil(self.window) as u64;
        let tiles_w = input_w.div_ceil(self.window) as u64;
        tiles_h * tiles_w * self.flops_per_window()
    }
}

/// FLOPs of a single pointwise convolution (2 FLOPs per MAC).
pub fn pointwise_conv_flops(c_in: usize, c_out: usize, h: usize, w: usize) -> u64 {
    2 * (c_in * c_out * h * w) as u64
}

// ---------------------------------------------------------------------------
// LFEA: two-branch downsampling block with channel attention
// ---------------------------------------------------------------------------

/// Encoder block: branch A is a stride-2 DS-conv block; branch B is a
/// stride-1 DS-conv block followed by 2x2 max pooling; the branches are
/// added elementwise and re-weighted by ECA.
#[derive(Clone, Debug)]
pub struct LfeaModule<T> {
    pub branch_a: DsConvBlock<T>,
    pub branch_b: DsConvBlock<T>,
    pub eca: EcaLayer<T>,
}

#[derive(Clone, Debug)]
pub struct LfeaCache<T> {
    a: DsCache<T>,
    b: DsCache<T>,
    pool: PoolCache,
    eca: EcaCache<T>,
}

impl<T: Scalar> LfeaModule<T> {
    pub fn init(c_in: usize, c_out: usize, eca_k: usize, rng: &mut impl Rng) -> Self {
        LfeaModule {
            branch_a: DsConvBlock::init(c_in, c_out, 2, rng),
            branch_b: DsConvBlock::init(c_in, c_out, 1, rng),
            eca: EcaLayer::new(eca_k),
        }
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, LfeaCache<T>)> {
        let (a, a_cache) = self.branch_a.forward_train(x)?;
        let (b_full, b_cache) = self.branch_b.forward_train(x)?;
        let (b, pool) = max_pool2d(&b_full, 2, 2)?;
        let s = add(&a, &b)?;
        let (y, eca_cache) = self.eca.forward(&s)?;
        Ok((y, LfeaCache { a: a_cache, b: b_cache, pool, eca: eca_cache }))
    }

    pub fn forward_infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let a = self.branch_a.forward_infer(x)?;
        let (b, _) = max_pool2d(&self.branch_b.forward_infer(x)?, 2, 2)?;
        self.eca.forward_infer(&add(&a, &b)?)
    }

    pub fn backward(&mut self, cache: &LfeaCache<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g_sum = self.eca.backward(&cache.eca, grad_out)?;
        let g_in_a = self.branch_a.backward(&cache.a, &g_sum)?;
        let g_b_full = max_pool2d_backward(&cache.pool, &g_sum)?;
        let g_in_b = self.branch_b.backward(&cache.b, &g_b_full)?;
        add(&g_in_a, &g_in_b)
    }
}

/// One encoder stage: the attention block, or a single stride-2 DS-conv
/// block under the `no-lfea` ablation.
#[derive(Clone, Debug)]
pub enum StageBlock<T> {
    Lfea(LfeaModule<T>),
    Plain(DsConvBlock<T>),
}

#[derive(Clone, Debug)]
pub enum StageCache<T> {
    Lfea(LfeaCache<T>),
    Plain(DsCache<T>),
}

impl<T: Scalar> StageBlock<T> {
    fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, StageCache<T>)> {
        match self {
            StageBlock::Lfea(m) => {
                let (y, c) = m.forward_train(x)?;
                Ok((y, StageCache::Lfea(c)))
            }
            StageBlock::Plain(b) => {
                let (y, c) = b.forward_train(x)?;
                Ok((y, StageCache::Plain(c)))
            }
        }
    }

    fn forward_infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            StageBlock::Lfea(m) => m.forward_infer(x),
            StageBlock::Plain(b) => b.forward_infer(x),
        }
    }

    fn backward(&mut self, cache: &StageCache<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        match (self, cache) {
            (StageBlock::Lfea(m), StageCache::Lfea(c)) => m.backward(c, grad_out),
            (StageBlock::Plain(b), StageCache::Plain(c)) => b.backward(c, grad_out),
            _ => Err(Error::Numeric("stage cache does not match stage kind".into())),
        }
    }
}

/// Stage-1 features max-pooled down to the input extent of the given encoder
/// stage (level 3 pools once, level 4 twice, ...).
pub fn lfd_inject<T: Scalar>(stage1_out: &Tensor<T>, level: usize) -> Result<Tensor<T>> {
    if level < 3 {
        return Err(Error::Config(format!("LFD injects into stages 3 and deeper, got {level}")));
    }
    let mut q = stage1_out.clone();
    for _ in 0..level - 2 {
        q = max_pool2d(&q, 2, 2)?.0;
    }
    Ok(q)
}

// ---------------------------------------------------------------------------
// RFT: skip-connection refiner
// ---------------------------------------------------------------------------

/// Skip refiner: one stride-1 DS-conv block (channel-preserving) plus ECA.
#[derive(Clone, Debug)]
pub struct RftModule<T> {
    pub ds: DsConvBlock<T>,
    pub eca: EcaLayer<T>,
}

#[derive(Clone, Debug)]
pub struct RftCache<T> {
    ds: DsCache<T>,
    eca: EcaCache<T>,
}

impl<T: Scalar> RftModule<T> {
    pub fn init(channels: usize, eca_k: usize, rng: &mut impl Rng) -> Self {
        RftModule { ds: DsConvBlock::init(channels, channels, 1, rng), eca: EcaLayer::new(eca_k) }
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, RftCache<T>)> {
        let (h, ds) = self.ds.forward_train(x)?;
        let (y, eca) = self.eca.forward(&h)?;
        Ok((y, RftCache { ds, eca }))
    }

    pub fn forward_infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.eca.forward_infer(&self.ds.forward_infer(x)?)
    }

    pub fn backward(&mut self, cache: &RftCache<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g_h = self.eca.backward(&cache.eca, grad_out)?;
        self.ds.backward(&cache.ds, &g_h)
    }
}

/// A decoder skip: refined, or passed through unchanged under `no-rft`.
#[derive(Clone, Debug)]
pub enum Skip<T> {
    Rft(RftModule<T>),
    Identity,
}

// ---------------------------------------------------------------------------
// SBAM: attention-gated top-down fusion
// ---------------------------------------------------------------------------

/// Decoder fusion: the high-level map is channel-projected and bilinearly
/// upsampled; a sigmoid attention map derived from the low-level features
/// gates it; the gated map is added to the low-level features and the sum is
/// re-weighted by ECA.
#[derive(Clone, Debug)]
pub struct SbamModule<T> {
    /// `C_high -> C_low` projection applied before the upsample.
    pub project: Conv1x1<T>,
    /// `C_low -> C_low` attention conv whose sigmoid gates the high path.
    pub gate: Conv1x1<T>,
    pub eca: EcaLayer<T>,
}

#[derive(Clone, Debug)]
pub struct SbamCache<T> {
    high: Tensor<T>,
    low: Tensor<T>,
    hp_h: usize,
    hp_w: usize,
    upsampled: Tensor<T>,
    gate_act: Tensor<T>,
    eca: EcaCache<T>,
}

fn check_fusion_extents<T: Scalar>(low: &Tensor<T>, high: &Tensor<T>) -> Result<()> {
    if low.h() != 2 * high.h() || low.w() != 2 * high.w() {
        return Err(Error::Data(format!(
            "fusion expects the high-level extent to be exactly half the low-level extent, \
             got low {}x{} vs high {}x{}",
            low.h(),
            low.w(),
            high.h(),
            high.w()
        )));
    }
    Ok(())
}

impl<T: Scalar> SbamModule<T> {
    pub fn init(c_low: usize, c_high: usize, eca_k: usize, rng: &mut impl Rng) -> Self {
        SbamModule {
            project: Conv1x1::init(c_high, c_low, rng),
            gate: Conv1x1::init(c_low, c_low, rng),
            eca: EcaLayer::new(eca_k),
        }
    }

    pub fn forward(&self, low: &Tensor<T>, high: &Tensor<T>) -> Result<(Tensor<T>, SbamCache<T>)> {
        check_fusion_extents(low, high)?;
        let hp = self.project.forward(high)?;
        let hu = bilinear_upsample(&hp, low.h(), low.w())?;
        let a = sigmoid(&self.gate.forward(low)?);
        let s = add(low, &mul(&a, &hu)?)?;
        let (y, eca) = self.eca.forward(&s)?;
        let cache = SbamCache {
            high: high.clone(),
            low: low.clone(),
            hp_h: hp.h(),
            hp_w: hp.w(),
            upsampled: hu,
            gate_act: a,
            eca,
        };
        Ok((y, cache))
    }

    pub fn forward_infer(&self, low: &Tensor<T>, high: &Tensor<T>) -> Result<Tensor<T>> {
        check_fusion_extents(low, high)?;
        let hu = bilinear_upsample(&self.project.forward(high)?, low.h(), low.w())?;
        let a = sigmoid(&self.gate.forward(low)?);
        self.eca.forward_infer(&add(low, &mul(&a, &hu)?)?)
    }

    /// Returns `(grad_low, grad_high)`.
    pub fn backward(
        &mut self,
        cache: &SbamCache<T>,
        grad_out: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let g_sum = self.eca.backward(&cache.eca, grad_out)?;
        // s = low + a * upsampled
        let g_a = mul(&g_sum, &cache.upsampled)?;
        let g_hu = mul(&g_sum, &cache.gate_act)?;
        // Through the sigmoid of the gate conv.
        let mut g_gate_logit = Tensor::zeros(g_a.shape());
        for ((gz, &ga), &a) in
            g_gate_logit.data_mut().iter_mut().zip(g_a.data()).zip(cache.gate_act.data())
        {
            *gz = ga * a * (T::one() - a);
        }
        let g_low_gate = self.gate.backward(&cache.low, &g_gate_logit)?;
        let g_hp = bilinear_upsample_backward(cache.hp_h, cache.hp_w, &g_hu)?;
        let g_high = self.project.backward(&cache.high, &g_hp)?;
        let g_low = add(&g_sum, &g_low_gate)?;
        Ok((g_low, g_high))
    }
}

/// Plain top-down fusion for the `no-sbam` ablation: project the high-level
/// map to the low-level width, upsample, add.
#[derive(Clone, Debug)]
pub struct FpnFusion<T> {
    pub project: Conv1x1<T>,
}

#[derive(Clone, Debug)]
pub struct FpnCache<T> {
    high: Tensor<T>,
    hp_h: usize,
    hp_w: usize,
}

impl<T: Scalar> FpnFusion<T> {
    pub fn init(c_low: usize, c_high: usize, rng: &mut impl Rng) -> Self {
        FpnFusion { project: Conv1x1::init(c_high, c_low, rng) }
    }

    pub fn forward(&self, low: &Tensor<T>, high: &Tensor<T>) -> Result<(Tensor<T>, FpnCache<T>)> {
        check_fusion_extents(low, high)?;
        let hp = self.project.forward(high)?;
        let hu = bilinear_upsample(&hp, low.h(), low.w())?;
        let y = add(low, &hu)?;
        Ok((y, FpnCache { high: high.clone(), hp_h: hp.h(), hp_w: hp.w() }))
    }

    pub fn forward_infer(&self, low: &Tensor<T>, high: &Tensor<T>) -> Result<Tensor<T>> {
        check_fusion_extents(low, high)?;
        let hu = bilinear_upsample(&self.project.forward(high)?, low.h(), low.w())?;
        add(low, &hu)
    }

    pub fn backward(
        &mut self,
        cache: &FpnCache<T>,
        grad_out: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let g_hp = bilinear_upsample_backward(cache.hp_h, cache.hp_w, grad_out)?;
        let g_high = self.project.backward(&cache.high, &g_hp)?;
        Ok((grad_out.clone(), g_high))
    }
}

/// A decoder fusion step: attention-gated, or plain FPN-style under
/// `no-sbam`.
#[derive(Clone, Debug)]
pub enum Fusion<T> {
    Sbam(SbamModule<T>),
    Fpn(FpnFusion<T>),
}

#[derive(Clone, Debug)]
pub enum FusionCache<T> {
    Sbam(SbamCache<T>),
    Fpn(FpnCache<T>),
}

// ---------------------------------------------------------------------------
// The assembled network
// ---------------------------------------------------------------------------

/// The full network. Indexing convention: `stages[i]` is encoder stage
/// `i+1`; `skips[i]` and `fusions[i]` belong to level `i+1` (so `fusions[0]`
/// produces the finest decoder map `f1`).
#[derive(Clone, Debug)]
pub struct LrNet<T> {
    cfg: ModelConfig,
    stages: Vec<StageBlock<T>>,
    skips: Vec<Skip<T>>,
    fusions: Vec<Fusion<T>>,
    head: Conv1x1<T>,
}

/// Everything a training-mode forward records for the backward pass.
pub struct Trace<T> {
    stage: Vec<StageCache<T>>,
    /// LFD pooling caches: `lfd[j]` took `pool^j(out1)` to `pool^(j+1)(out1)`.
    lfd: Vec<PoolCache>,
    skip: Vec<Option<RftCache<T>>>,
    fusion: Vec<FusionCache<T>>,
    /// Head conv input (the upsampled finest decoder map).
    up: Tensor<T>,
    f1_shape: [usize; 4],
}

/// Whether a named tensor is trainable or a tracked buffer (batch-norm
/// running statistics).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    Param,
    Buffer,
}

/// Builds the six named-tensor entries of a DS-conv block under `prefix`.
/// The optional trailing `mut` token selects `&mut` borrows.
macro_rules! ds_entries {
    ($vec:ident, $prefix:expr, $blk:expr $(, $mutp:tt)?) => {{
        let p = $prefix;
        let b = $blk;
        $vec.push((format!("{p}.depthwise"), TensorRole::Param, & $($mutp)? b.depthwise));
        $vec.push((format!("{p}.pointwise"), TensorRole::Param, & $($mutp)? b.pointwise));
        $vec.push((format!("{p}.bn.gamma"), TensorRole::Param, & $($mutp)? b.bn.gamma));
        $vec.push((format!("{p}.bn.beta"), TensorRole::Param, & $($mutp)? b.bn.beta));
        $vec.push((format!("{p}.bn.running_mean"), TensorRole::Buffer, & $($mutp)? b.bn.running_mean));
        $vec.push((format!("{p}.bn.running_var"), TensorRole::Buffer, & $($mutp)? b.bn.running_var));
    }};
}

/// One body for the immutable and mutable named-tensor walks, so the
/// manifest order cannot drift between them. Order: stages 1..5, skips
/// 1..4, fusions 1..4, head.
macro_rules! named_tensors_body {
    ($self:ident, $iter:ident $(, $mutp:tt)?) => {{
        let mut v = Vec::new();
        for (i, st) in $self.stages.$iter().enumerate() {
            let base = format!("stage{}", i + 1);
            match st {
                StageBlock::Lfea(m) => {
                    ds_entries!(v, format!("{base}.lfea.branchA"), & $($mutp)? m.branch_a $(, $mutp)?);
                    ds_entries!(v, format!("{base}.lfea.branchB"), & $($mutp)? m.branch_b $(, $mutp)?);
                    v.push((format!("{base}.lfea.eca.kernel"), TensorRole::Param, & $($mutp)? m.eca.kernel));
                }
                StageBlock::Plain(b) => ds_entries!(v, format!("{base}.ds"), b $(, $mutp)?),
            }
        }
        for (i, sk) in $self.skips.$iter().enumerate() {
            if let Skip::Rft(m) = sk {
                let base = format!("rft{}", i + 1);
                ds_entries!(v, format!("{base}.ds"), & $($mutp)? m.ds $(, $mutp)?);
                v.push((format!("{base}.eca.kernel"), TensorRole::Param, & $($mutp)? m.eca.kernel));
            }
        }
        for (i, fu) in $self.fusions.$iter().enumerate() {
            match fu {
                Fusion::Sbam(m) => {
                    let base = format!("sbam{}", i + 1);
                    v.push((format!("{base}.project.weight"), TensorRole::Param, & $($mutp)? m.project.weight));
                    v.push((format!("{base}.project.bias"), TensorRole::Param, & $($mutp)? m.project.bias));
                    v.push((format!("{base}.gate.weight"), TensorRole::Param, & $($mutp)? m.gate.weight));
                    v.push((format!("{base}.gate.bias"), TensorRole::Param, & $($mutp)? m.gate.bias));
                    v.push((format!("{base}.eca.kernel"), TensorRole::Param, & $($mutp)? m.eca.kernel));
                }
                Fusion::Fpn(m) => {
                    let base = format!("fuse{}", i + 1);
                    v.push((format!("{base}.project.weight"), TensorRole::Param, & $($mutp)? m.project.weight));
                    v.push((format!("{base}.project.bias"), TensorRole::Param, & $($mutp)? m.project.bias));
                }
            }
        }
        v.push(("head.weight".to_string(), TensorRole::Param, & $($mutp)? $self.head.weight));
        v.push(("head.bias".to_string(), TensorRole::Param, & $($mutp)? $self.head.bias));
        v
    }};
}

impl<T: Scalar> LrNet<T> {
    /// Build a freshly initialized network: fan-in-scaled Gaussian conv
    /// kernels drawn from a ChaCha8 stream over `seed` in manifest order,
    /// identity batch norms, zero ECA kernels, zero biases.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let sc = cfg.scaled_channels();
        let l = sc.len();
        let mut stages = Vec::with_capacity(l);
        for lvl in 1..=l {
            let c_in = cfg.stage_in_channels(&sc, lvl);
            let c_out = sc[lvl - 1];
            stages.push(if cfg.use_lfea {
                StageBlock::Lfea(LfeaModule::init(c_in, c_out, cfg.eca_k, rng))
            } else {
                StageBlock::Plain(DsConvBlock::init(c_in, c_out, 2, rng))
            });
        }
        let mut skips = Vec::with_capacity(l - 1);
        for lvl in 1..l {
            skips.push(if cfg.use_rft {
                Skip::Rft(RftModule::init(sc[lvl - 1], cfg.eca_k, rng))
            } else {
                Skip::Identity
            });
        }
        let mut fusions = Vec::with_capacity(l - 1);
        for lvl in 1..l {
            fusions.push(if cfg.use_sbam {
                Fusion::Sbam(SbamModule::init(sc[lvl - 1], sc[lvl], cfg.eca_k, rng))
            } else {
                Fusion::Fpn(FpnFusion::init(sc[lvl - 1], sc[lvl], rng))
            });
        }
        let head = Conv1x1::init(sc[0], 1, rng);
        Ok(LrNet { cfg, stages, skips, fusions, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.c() != 1 {
            return Err(Error::Data(format!("expected a single-channel input, got {}", x.c())));
        }
        let w = self.cfg.window;
        if x.h() != w || x.w() != w {
            return Err(Error::Data(format!(
                "input extent {}x{} does not match the model window {w}; \
                 tile the input with sliding inference first",
                x.h(),
                x.w()
            )));
        }
        Ok(())
    }

    /// Encoder in training mode: stage outputs, stage caches, and the LFD
    /// pooling chain.
    #[allow(clippy::type_complexity)]
    fn encode_train(
        &mut self,
        x: &Tensor<T>,
    ) -> Result<(Vec<Tensor<T>>, Vec<StageCache<T>>, Vec<PoolCache>)> {
        let l = self.stages.len();
        let mut outs: Vec<Tensor<T>> = Vec::with_capacity(l);
        let mut caches = Vec::with_capacity(l);
        let mut lfd = Vec::new();
        let mut pooled: Option<Tensor<T>> = None;
        for lvl in 1..=l {
            let (y, c) = if lvl == 1 {
                self.stages[0].forward_train(x)?
            } else if lvl >= 3 && self.cfg.use_lfd {
                let src = if lvl == 3 { &outs[0] } else { pooled.as_ref().expect("set at lvl-1") };
                let (q, pc) = max_pool2d(src, 2, 2)?;
                lfd.push(pc);
                let xin = concat_channels(&[&outs[lvl - 2], &q])?;
                pooled = Some(q);
                self.stages[lvl - 1].forward_train(&xin)?
            } else {
                self.stages[lvl - 1].forward_train(&outs[lvl - 2])?
            };
            outs.push(y);
            caches.push(c);
        }
        Ok((outs, caches, lfd))
    }

    /// Training-mode forward: returns the logit map (no sigmoid — the loss
    /// is computed in logit space) and the trace for `backward`.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, Trace<T>)> {
        self.check_input(x)?;
        let l = self.stages.len();
        let (outs, stage_caches, lfd) = self.encode_train(x)?;

        let mut skips_out = Vec::with_capacity(l - 1);
        let mut skip_caches = Vec::with_capacity(l - 1);
        for i in 1..l {
            match &mut self.skips[i - 1] {
                Skip::Rft(m) => {
                    let (s, c) = m.forward_train(&outs[i - 1])?;
                    skips_out.push(s);
                    skip_caches.push(Some(c));
                }
                Skip::Identity => {
                    skips_out.push(outs[i - 1].clone());
                    skip_caches.push(None);
                }
            }
        }

        let mut fusion_caches: Vec<Option<FusionCache<T>>> = (1..l).map(|_| None).collect();
        let mut f = outs[l - 1].clone();
        for lvl in (1..l).rev() {
            let (y, c) = match &self.fusions[lvl - 1] {
                Fusion::Sbam(m) => {
                    let (y, c) = m.forward(&skips_out[lvl - 1], &f)?;
                    (y, FusionCache::Sbam(c))
                }
                Fusion::Fpn(m) => {
                    let (y, c) = m.forward(&skips_out[lvl - 1], &f)?;
                    (y, FusionCache::Fpn(c))
                }
            };
            fusion_caches[lvl - 1] = Some(c);
            f = y;
        }

        let f1_shape = f.shape();
        let up = bilinear_upsample(&f, x.h(), x.w())?;
        let logits = self.head.forward(&up)?;
        logits.debug_check_finite("network logits");
        let trace = Trace {
            stage: stage_caches,
            lfd,
            skip: skip_caches,
            fusion: fusion_caches.into_iter().map(|c| c.expect("every level fused")).collect(),
            up,
            f1_shape,
        };
        Ok((logits, trace))
    }

    /// Inference-mode logits: pure, read-only, safe to call concurrently.
    pub fn forward_infer_logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let l = self.stages.len();
        let mut outs: Vec<Tensor<T>> = Vec::with_capacity(l);
        let mut pooled: Option<Tensor<T>> = None;
        for lvl in 1..=l {
            let y = if lvl == 1 {
                self.stages[0].forward_infer(x)?
            } else if lvl >= 3 && self.cfg.use_lfd {
                let src = if lvl == 3 { &outs[0] } else { pooled.as_ref().expect("set at lvl-1") };
                let q = max_pool2d(src, 2, 2)?.0;
                let xin = concat_channels(&[&outs[lvl - 2], &q])?;
                pooled = Some(q);
                self.stages[lvl - 1].forward_infer(&xin)?
            } else {
                self.stages[lvl - 1].forward_infer(&outs[lvl - 2])?
            };
            outs.push(y);
        }
        let mut f = outs.pop().expect("at least one stage");
        for lvl in (1..l).rev() {
            let s = match &self.skips[lvl - 1] {
                Skip::Rft(m) => m.forward_infer(&outs[lvl - 1])?,
                Skip::Identity => outs[lvl - 1].clone(),
            };
            f = match &self.fusions[lvl - 1] {
                Fusion::Sbam(m) => m.forward_infer(&s, &f)?,
                Fusion::Fpn(m) => m.forward_infer(&s, &f)?,
            };
        }
        let up = bilinear_upsample(&f, x.h(), x.w())?;
        self.head.forward(&up)
    }

    /// Inference-mode probability map, values in (0, 1).
    pub fn forward_infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(sigmoid(&self.forward_infer_logits(x)?))
    }

    /// Backward from a logit-space gradient. Accumulates every parameter
    /// gradient in place and returns the gradient with respect to the input.
    pub fn backward(&mut self, trace: &Trace<T>, grad_logits: &Tensor<T>) -> Result<Tensor<T>> {
        let l = self.stages.len();
        let sc = self.cfg.scaled_channels();

        let g_up = self.head.backward(&trace.up, grad_logits)?;
        let [_, _, f1_h, f1_w] = trace.f1_shape;
        let mut g_f = bilinear_upsample_backward(f1_h, f1_w, &g_up)?;

        // Decoder, finest to coarsest; g_f ends as the gradient at out_l.
        let mut g_skips: Vec<Option<Tensor<T>>> = (1..l).map(|_| None).collect();
        for lvl in 1..l {
            let (g_low, g_high) = match (&mut self.fusions[lvl - 1], &trace.fusion[lvl - 1]) {
                (Fusion::Sbam(m), FusionCache::Sbam(c)) => m.backward(c, &g_f)?,
                (Fusion::Fpn(m), FusionCache::Fpn(c)) => m.backward(c, &g_f)?,
                _ => return Err(Error::Numeric("fusion cache does not match fusion kind".into())),
            };
            g_skips[lvl - 1] = Some(g_low);
            g_f = g_high;
        }

        let mut g_out: Vec<Option<Tensor<T>>> = (0..l).map(|_| None).collect();
        g_out[l - 1] = Some(g_f);
        for i in 1..l {
            let g_s = g_skips[i - 1].take().expect("filled by the fusion walk");
            let g = match (&mut self.skips[i - 1], &trace.skip[i - 1]) {
                (Skip::Rft(m), Some(c)) => m.backward(c, &g_s)?,
                (Skip::Identity, None) => g_s,
                _ => return Err(Error::Numeric("skip cache does not match skip kind".into())),
            };
            accumulate(&mut g_out[i - 1], g)?;
        }

        // Encoder stages l..3, splitting off the LFD-injected channels.
        let mut g_pooled: Vec<Option<Tensor<T>>> = (0..l.saturating_sub(2)).map(|_| None).collect();
        for lvl in (3..=l).rev() {
            let g = g_out[lvl - 1].take().expect("all consumers above already accumulated");
            let g_x = self.stages[lvl - 1].backward(&trace.stage[lvl - 1], &g)?;
            if self.cfg.use_lfd {
                let c_prev = sc[lvl - 2];
                let g_prev = slice_channels(&g_x, 0, c_prev)?;
                let g_inj = slice_channels(&g_x, c_prev, sc[0])?;
                accumulate(&mut g_out[lvl - 2], g_prev)?;
                accumulate(&mut g_pooled[lvl - 3], g_inj)?;
            } else {
                accumulate(&mut g_out[lvl - 2], g_x)?;
            }
        }
        // LFD pooling chain back down to out1.
        if self.cfg.use_lfd {
            for j in (1..=l.saturating_sub(2)).rev() {
                let g = g_pooled[j - 1].take().expect("fed by the stage split");
                let back = max_pool2d_backward(&trace.lfd[j - 1], &g)?;
                if j == 1 {
                    accumulate(&mut g_out[0], back)?;
                } else {
                    accumulate(&mut g_pooled[j - 2], back)?;
                }
            }
        }
        if l >= 2 {
            let g = g_out[1].take().expect("complete after stage 3 and the skips");
            let g_x = self.stages[1].backward(&trace.stage[1], &g)?;
            accumulate(&mut g_out[0], g_x)?;
        }
        let g = g_out[0].take().expect("complete after stage 2");
        self.stages[0].backward(&trace.stage[0], &g)
    }

    /// Every named tensor in manifest order.
    pub fn named_tensors(&self) -> Vec<(String, TensorRole, &Tensor<T>)> {
        named_tensors_body!(self, iter)
    }

    /// Mutable variant of [`Self::named_tensors`], same order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, TensorRole, &mut Tensor<T>)> {
        named_tensors_body!(self, iter_mut, mut)
    }

    /// Trainable parameters only, in manifest order — the optimizer's view.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.named_tensors_mut()
            .into_iter()
            .filter(|(_, role, _)| *role == TensorRole::Param)
            .map(|(n, _, t)| (n, t))
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for (_, role, t) in self.named_tensors_mut() {
            if role == TensorRole::Param {
                t.clear_grad();
            }
        }
    }

    /// Snapshot every tensor (parameters and buffers) as 32-bit floats.
    pub fn to_store(&self) -> WeightStore {
        let entries = self
            .named_tensors()
            .into_iter()
            .map(|(name, _, t)| WeightEntry {
                name,
                shape: t.shape(),
                data: t.data().iter().map(|v| v.to_f32().expect("finite weight")).collect(),
            })
            .collect();
        WeightStore { entries }
    }

    /// Load a snapshot. The store must carry exactly this model's tensor
    /// names with matching shapes; the first offender is named in the error.
    pub fn load_store(&mut self, store: &WeightStore) -> Result<()> {
        use std::collections::BTreeMap;
        let mut by_name: BTreeMap<&str, &WeightEntry> =
            store.entries.iter().map(|e| (e.name.as_str(), e)).collect();
        if by_name.len() != store.entries.len() {
            return Err(Error::Data("weight store contains duplicate tensor names".into()));
        }
        let mut targets = self.named_tensors_mut();
        for (name, _, t) in &mut targets {
            let entry = by_name.remove(name.as_str()).ok_or_else(|| {
                Error::Data(format!("weight store is missing tensor '{name}' required by this config"))
            })?;
            if entry.shape != t.shape() {
                return Err(Error::Data(format!(
                    "tensor '{name}' has shape {:?} in the store but this config needs {:?}",
                    entry.shape,
                    t.shape()
                )));
            }
            for (dst, &src) in t.data_mut().iter_mut().zip(&entry.data) {
                *dst = lit::<T>(src as f64);
            }
        }
        if let Some((&name, _)) = by_name.iter().next() {
            return Err(Error::Data(format!(
                "weight store contains tensor '{name}' that this config does not define"
            )));
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    *slot = Some(match slot.take() {
        Some(acc) => add(&acc, &g)?,
        None => g,
    });
    Ok(())
}

// ---------------------------------------------------------------------------
// Weight-file serialization
// ---------------------------------------------------------------------------

pub const WEIGHT_MAGIC: [u8; 4] = *b"LRNW";
pub const WEIGHT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct WeightEntry {
    pub name: String,
    pub shape: [usize; 4],
    pub data: Vec<f32>,
}

/// An ordered set of named tensors — the on-disk form of a model.
///
/// File layout (all integers little-endian): magic `LRNW`, version `u16`,
/// entry count `u32`, then per entry: name length `u16`, UTF-8 name, four
/// `u32` extents, and the row-major `f32` values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    pub entries: Vec<WeightEntry>,
}

impl WeightStore {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut emit = |buf: &[u8]| w.write_all(buf).map_err(|e| Error::io(path, e));
        emit(&WEIGHT_MAGIC)?;
        emit(&WEIGHT_VERSION.to_le_bytes())?;
        emit(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            if e.name.len() > u16::MAX as usize {
                return Err(Error::Data(format!("tensor name too long: '{}...'", &e.name[..32])));
            }
            emit(&(e.name.len() as u16).to_le_bytes())?;
            emit(e.name.as_bytes())?;
            for &ext in &e.shape {
                emit(&(ext as u32).to_le_bytes())?;
            }
            for &v in &e.data {
                emit(&v.to_le_bytes())?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
            .map_err(|msg| Error::Data(format!("{}: {msg}", path.display())))
    }

    fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> std::result::Result<&[u8], String> {
            let end = pos.checked_add(n).filter(|&e| e <= bytes.len());
            match end {
                Some(end) => {
                    let s = &bytes[pos..end];
                    pos = end;
                    Ok(s)
                }
                None => Err("truncated weight file".into()),
            }
        };
        if take(4)? != WEIGHT_MAGIC {
            return Err("not a weight file (bad magic)".into());
        }
        let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
        if version != WEIGHT_VERSION {
            return Err(format!(
                "unsupported weight-file version {version} (this build reads version {WEIGHT_VERSION})"
            ));
        }
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(name_len)?)
                .map_err(|_| "tensor name is not valid UTF-8".to_string())?
                .to_string();
            let mut shape = [0usize; 4];
            for ext in &mut shape {
                *ext = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            }
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .ok_or_else(|| format!("tensor '{name}' has an overflowing shape"))?;
            let raw = take(len * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            entries.push(WeightEntry { name, shape, data });
        }
        if pos != bytes.len() {
            return Err("trailing bytes after the last tensor record".into());
        }
        Ok(WeightStore { entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
        let data = (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    fn small_cfg(window: usize) -> ModelConfig {
        ModelConfig { window, ..ModelConfig::default() }
    }

    #[test]
    fn default_param_count_is_frozen() {
        // Hand ledger: encoder 45+171+667+1771+5515 = 8169, skips
        // 63+155+435+1379 = 2032, fusion 59+211+803+3139 = 4212, head 5.
        assert_eq!(ModelConfig::default().count_params(), 14_418);
    }

    #[test]
    fn param_count_matches_instantiated_model() {
        let mut cfgs = Vec::new();
        for bits in 0..16u32 {
            cfgs.push(ModelConfig {
                use_lfea: bits & 1 == 0,
                use_lfd: bits & 2 == 0,
                use_rft: bits & 4 == 0,
                use_sbam: bits & 8 == 0,
                ..small_cfg(32)
            });
        }
        for m in ALLOWED_MULTIPLIERS {
            cfgs.push(ModelConfig { channel_multiplier: m, ..small_cfg(32) });
        }
        for cfg in cfgs {
            let model = LrNet::<f32>::init(cfg.clone(), 1).unwrap();
            let from_model: u64 = model
                .named_tensors()
                .iter()
                .filter(|(_, role, _)| *role == TensorRole::Param)
                .map(|(_, _, t)| t.len() as u64)
                .sum();
            assert_eq!(cfg.count_params(), from_model, "cfg {cfg:?}");
        }
    }

    #[test]
    fn param_count_is_monotone_in_multiplier() {
        let counts: Vec<u64> = ALLOWED_MULTIPLIERS
            .iter()
            .map(|&m| ModelConfig { channel_multiplier: m, ..Default::default() }.count_params())
            .collect();
        assert!(counts.windows(2).all(|p| p[0] < p[1]), "{counts:?}");
    }

    #[test]
    fn degenerate_empty_config_counts_zero() {
        let cfg = ModelConfig { stage_channels: vec![], ..Default::default() };
        assert_eq!(cfg.count_params(), 0);
        assert_eq!(cfg.count_flops(256, 256), 0);
    }

    #[test]
    fn default_flop_count_is_frozen() {
        // Hand ledger at one 256x256 window: 9,873,664 conv MACs plus 732
        // ECA MACs, times two.
        assert_eq!(ModelConfig::default().count_flops(256, 256), 19_748_792);
    }

    #[test]
    fn pointwise_flops_hand_example() {
        assert_eq!(pointwise_conv_flops(4, 8, 128, 128), 1_048_576);
    }

    #[test]
    fn flop_count_scales_with_tile_count() {
        let cfg = ModelConfig::default();
        let one = cfg.flops_per_window();
        assert_eq!(cfg.count_flops(300, 300), 4 * one);
        assert_eq!(cfg.count_flops(1024, 1024), 16 * one);
        assert_eq!(cfg.count_flops(1, 1), one);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let bad_window = ModelConfig { window: 100, ..Default::default() };
        assert!(bad_window.validate().is_err());
        let bad_mult = ModelConfig { channel_multiplier: 3.0, ..Default::default() };
        assert!(bad_mult.validate().is_err());
        let bad_channels = ModelConfig { stage_channels: vec![4, 4, 16, 32, 64], ..Default::default() };
        assert!(bad_channels.validate().is_err());
        let bad_eca = ModelConfig { eca_k: 4, ..Default::default() };
        assert!(bad_eca.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn scaled_channels_round_and_floor_at_one() {
        let cfg = ModelConfig { channel_multiplier: 0.5, ..Default::default() };
        assert_eq!(cfg.scaled_channels(), vec![2, 4, 8, 16, 32]);
        let cfg = ModelConfig {
            stage_channels: vec![1, 8, 16, 32, 64],
            channel_multiplier: 0.5,
            ..Default::default()
        };
        assert_eq!(cfg.scaled_channels()[0], 1);
    }

    #[test]
    fn lfea_shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = LfeaModule::<f64>::init(4, 8, 3, &mut rng);
        let x = rand_tensor(&mut rng, [1, 4, 8, 8]);
        let (y, _) = m.forward_train(&x).unwrap();
        assert_eq!(y.shape(), [1, 8, 4, 4]);
        assert_eq!(m.forward_infer(&x).unwrap().shape(), [1, 8, 4, 4]);
    }

    #[test]
    fn lfea_zero_weights_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = LfeaModule::<f64>::init(4, 8, 3, &mut rng);
        for t in [&mut m.branch_a.depthwise, &mut m.branch_a.pointwise, &mut m.branch_b.depthwise, &mut m.branch_b.pointwise]
        {
            *t = Tensor::zeros(t.shape());
        }
        let x = rand_tensor(&mut rng, [1, 4, 8, 8]);
        let (y, _) = m.forward_train(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let y = m.forward_infer(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lfea_with_dead_branch_b_halves_branch_a() {
        // Branch B zeroed and the ECA kernel zeroed: the module reduces to
        // sigmoid(0) = 0.5 times branch A, in both modes.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = LfeaModule::<f64>::init(4, 8, 3, &mut rng);
        m.branch_b.depthwise = Tensor::zeros(m.branch_b.depthwise.shape());
        m.branch_b.pointwise = Tensor::zeros(m.branch_b.pointwise.shape());
        let x = rand_tensor(&mut rng, [1, 4, 8, 8]);
        let a_alone = m.branch_a.clone().forward_train(&x).unwrap().0;
        let (y, _) = m.forward_train(&x).unwrap();
        for (got, want) in y.data().iter().zip(a_alone.data()) {
            assert!((got - 0.5 * want).abs() < 1e-12);
        }
        let a_infer = m.branch_a.forward_infer(&x).unwrap();
        let y_infer = m.forward_infer(&x).unwrap();
        for (got, want) in y_infer.data().iter().zip(a_infer.data()) {
            assert!((got - 0.5 * want).abs() < 1e-12);
        }
    }

    #[test]
    fn lfea_rejects_odd_extents() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = LfeaModule::<f64>::init(2, 4, 3, &mut rng);
        let x = rand_tensor(&mut rng, [1, 2, 7, 7]);
        assert!(m.forward_train(&x).is_err());
    }

    #[test]
    fn lfd_inject_extents_and_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, [1, 4, 128, 128]);
        assert_eq!(lfd_inject(&x, 3).unwrap().shape(), [1, 4, 64, 64]);
        let q5 = lfd_inject(&x, 5).unwrap();
        assert_eq!(q5.shape(), [1, 4, 16, 16]);
        // Triple pooling equals one max over each 8x8 window.
        for c in 0..4 {
            for oh in 0..16 {
                for ow in 0..16 {
                    let mut m = f64::NEG_INFINITY;
                    for dh in 0..8 {
                        for dw in 0..8 {
                            m = m.max(x.at(0, c, oh * 8 + dh, ow * 8 + dw));
                        }
                    }
                    assert_eq!(q5.at(0, c, oh, ow), m);
                }
            }
        }
        assert!(lfd_inject(&x, 2).is_err());
    }

    #[test]
    fn rft_preserves_shape_and_zero_weights_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut m = RftModule::<f64>::init(8, 3, &mut rng);
        let x = rand_tensor(&mut rng, [2, 8, 6, 6]);
        let (y, _) = m.forward_train(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        // Zero weights on a module with fresh batch-norm statistics: zero
        // propagates all the way through in both modes.
        let mut m = RftModule::<f64>::init(8, 3, &mut rng);
        m.ds.depthwise = Tensor::zeros(m.ds.depthwise.shape());
        m.ds.pointwise = Tensor::zeros(m.ds.pointwise.shape());
        let y = m.forward_infer(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let (y, _) = m.forward_train(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sbam_output_matches_low_shape_and_validates_extents() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = SbamModule::<f64>::init(4, 8, 3, &mut rng);
        let low = rand_tensor(&mut rng, [1, 4, 8, 8]);
        let high = rand_tensor(&mut rng, [1, 8, 4, 4]);
        let (y, _) = m.forward(&low, &high).unwrap();
        assert_eq!(y.shape(), low.shape());
        let bad_high = rand_tensor(&mut rng, [1, 8, 3, 3]);
        assert!(m.forward(&low, &bad_high).is_err());
    }

    #[test]
    fn sbam_zero_high_path_reduces_to_eca_of_low() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = SbamModule::<f64>::init(4, 8, 3, &mut rng);
        let low = rand_tensor(&mut rng, [1, 4, 8, 8]);
        let high = Tensor::zeros([1, 8, 4, 4]);
        // project bias is zero-initialized, so the high path contributes 0.
        let (y, _) = m.forward(&low, &high).unwrap();
        let want = m.eca.forward_infer(&low).unwrap();
        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sbam_zeroed_gate_applies_half_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut m = SbamModule::<f64>::init(4, 8, 3, &mut rng);
        m.gate.weight = Tensor::zeros(m.gate.weight.shape());
        let low = rand_tensor(&mut rng, [1, 4, 8, 8]);
        let high = rand_tensor(&mut rng, [1, 8, 4, 4]);
        let (y, _) = m.forward(&low, &high).unwrap();
        let hu = bilinear_upsample(&m.project.forward(&high).unwrap(), 8, 8).unwrap();
        let pre = add(&low, &hu.map(|v| 0.5 * v)).unwrap();
        let want = m.eca.forward_infer(&pre).unwrap();
        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_shapes_and_probability_range() {
        let model = LrNet::<f32>::init(small_cfg(64), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data = (0..64 * 64).map(|_| rng.gen_range(0.0f32..1.0)).collect();
        let x = Tensor::from_vec([1, 1, 64, 64], data).unwrap();
        let y = model.forward_infer(&x).unwrap();
        assert_eq!(y.shape(), [1, 1, 64, 64]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn forward_train_emits_logits_at_full_extent() {
        let mut model = LrNet::<f32>::init(small_cfg(32), 13).unwrap();
        let x = Tensor::<f32>::filled([2, 1, 32, 32], 0.3);
        let (logits, _) = model.forward_train(&x).unwrap();
        assert_eq!(logits.shape(), [2, 1, 32, 32]);
    }

    #[test]
    fn wrong_extent_error_mentions_tiling() {
        let model = LrNet::<f32>::init(small_cfg(256), 14).unwrap();
        let x = Tensor::<f32>::zeros([1, 1, 300, 300]);
        let err = model.forward_infer(&x).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("tile"), "unhelpful message: {msg}");
    }

    #[test]
    fn all_parameters_zero_give_exactly_half_probability() {
        let mut model = LrNet::<f32>::init(small_cfg(32), 15).unwrap();
        for (_, role, t) in model.named_tensors_mut() {
            if role == TensorRole::Param {
                *t = Tensor::zeros(t.shape());
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let data = (0..32 * 32).map(|_| rng.gen_range(0.0f32..1.0)).collect();
        let x = Tensor::from_vec([1, 1, 32, 32], data).unwrap();
        let y = model.forward_infer(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5), "zero weights must give sigmoid(0) exactly");
    }

    #[test]
    fn infer_is_deterministic_bit_for_bit() {
        let model = LrNet::<f32>::init(small_cfg(32), 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let data: Vec<f32> = (0..32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect();
        let x = Tensor::from_vec([1, 1, 32, 32], data).unwrap();
        let a = model.forward_infer(&x).unwrap();
        let b = model.forward_infer(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn all_ablation_variants_run_forward() {
        for bits in 0..16u32 {
            let cfg = ModelConfig {
                use_lfea: bits & 1 == 0,
                use_lfd: bits & 2 == 0,
                use_rft: bits & 4 == 0,
                use_sbam: bits & 8 == 0,
                ..small_cfg(32)
            };
            let mut model = LrNet::<f32>::init(cfg, 19).unwrap();
            let x = Tensor::<f32>::filled([1, 1, 32, 32], 0.4);
            let y = model.forward_infer(&x).unwrap();
            assert_eq!(y.shape(), [1, 1, 32, 32]);
            assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
            let (logits, trace) = model.forward_train(&x).unwrap();
            let g = Tensor::<f32>::filled(logits.shape(), 1.0 / 1024.0);
            model.backward(&trace, &g).unwrap();
        }
    }

    #[test]
    fn manifest_has_expected_size_and_names() {
        let model = LrNet::<f32>::init(ModelConfig::default(), 20).unwrap();
        let names: Vec<String> = model.named_tensors().iter().map(|(n, _, _)| n.clone()).collect();
        // 5 stages x 13 + 4 skips x 7 + 4 fusions x 5 + head 2 = 115.
        assert_eq!(names.len(), 115);
        assert_eq!(names[0], "stage1.lfea.branchA.depthwise");
        assert!(names.contains(&"stage3.lfea.branchB.bn.running_var".to_string()));
        assert!(names.contains(&"rft4.eca.kernel".to_string()));
        assert!(names.contains(&"sbam1.gate.bias".to_string()));
        assert_eq!(names.last().unwrap(), "head.bias");
        // The mutable walk agrees entry-for-entry.
        let mut model = model;
        let mut_names: Vec<String> =
            model.named_tensors_mut().iter().map(|(n, _, _)| n.clone()).collect();
        assert_eq!(names, mut_names);
    }

    #[test]
    fn weight_roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.lrnw");
        let model = LrNet::<f32>::init(ModelConfig::default(), 21).unwrap();
        let store = model.to_store();
        store.save(&path).unwrap();
        let loaded = WeightStore::load(&path).unwrap();
        assert_eq!(store, loaded);
        // Loading into a differently seeded model reproduces the original.
        let mut other = LrNet::<f32>::init(ModelConfig::default(), 99).unwrap();
        other.load_store(&loaded).unwrap();
        assert_eq!(other.to_store(), store);
    }

    #[test]
    fn weight_save_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.lrnw"), dir.path().join("b.lrnw"));
        let store = LrNet::<f32>::init(ModelConfig::default(), 22).unwrap().to_store();
        store.save(&p1).unwrap();
        store.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn truncated_weight_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.lrnw");
        LrNet::<f32>::init(ModelConfig::default(), 23).unwrap().to_store().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        let err = WeightStore::load(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn bad_magic_is_not_a_weight_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.lrnw");
        std::fs::write(&path, b"PNG\x00 definitely not weights").unwrap();
        let err = WeightStore::load(&path).unwrap_err();
        assert!(err.to_string().contains("not a weight file"), "{err}");
    }

    #[test]
    fn future_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.lrnw");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&WEIGHT_MAGIC);
        bytes.extend_from_slice(&7u16.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = WeightStore::load(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn loading_against_mismatched_multiplier_names_the_offender() {
        let store = LrNet::<f32>::init(ModelConfig::default(), 24).unwrap().to_store();
        let cfg2 = ModelConfig { channel_multiplier: 2.0, ..Default::default() };
        let mut model2 = LrNet::<f32>::init(cfg2, 24).unwrap();
        let err = model2.load_store(&store).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("shape") && msg.contains("stage1"), "{msg}");
    }

    #[test]
    fn loading_against_mismatched_toggles_reports_name_difference() {
        let store = LrNet::<f32>::init(ModelConfig::default(), 25).unwrap().to_store();
        let cfg = ModelConfig { use_rft: false, ..Default::default() };
        let mut model = LrNet::<f32>::init(cfg, 25).unwrap();
        let err = model.load_store(&store).unwrap_err();
        assert!(err.to_string().contains("rft"), "{err}");
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = LrNet::<f32>::init(ModelConfig::default(), 42).unwrap().to_store();
        let b = LrNet::<f32>::init(ModelConfig::default(), 42).unwrap().to_store();
        let c = LrNet::<f32>::init(ModelConfig::default(), 43).unwrap().to_store();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn train_backward_fills_every_parameter_gradient() {
        let mut model = LrNet::<f64>::init(small_cfg(32), 26).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let data = (0..32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect();
        let x = Tensor::from_vec([1, 1, 32, 32], data).unwrap();
        let (logits, trace) = model.forward_train(&x).unwrap();
        let g = Tensor::filled(logits.shape(), 1.0 / (32.0 * 32.0));
        let g_in = model.backward(&trace, &g).unwrap();
        assert_eq!(g_in.shape(), x.shape());
        for (name, p) in model.named_params_mut() {
            let grad = p.grad().unwrap_or_else(|| panic!("no gradient on {name}"));
            assert!(grad.iter().all(|v| v.is_finite()), "non-finite gradient on {name}");
        }
    }
}
