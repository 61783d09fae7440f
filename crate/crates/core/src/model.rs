//! CP-ResNet style networks built from an [`ArchSpec`].
//!
//! Layout: a two-conv strided stem, then residual stages whose widths double from
//! `base_channels`, a 2×2 max-pool after the first stage, global average pooling and a linear
//! classifier. ρ decides which block convolutions are 3×3 (see [`crate::rf::rho_to_kernels`]);
//! the remaining ones are 1×1. Damping, decomposition and width are orthogonal switches that
//! never change the receptive field.

use crate::damping::{build_damping_matrix, damped_conv2d, damped_conv2d_backward, DampingMatrix, DampingSpec};
use crate::decomposition::{decompose_conv, DecompCache, DecompSpec, DecomposedBlock};
use crate::error::{Error, Result};
use crate::ops::basic::{
    add, global_avg_pool, global_avg_pool_backward, linear, linear_backward, max_pool2d, max_pool2d_backward, relu,
    relu_backward, Linear,
};
use crate::ops::conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvLayer};
use crate::ops::norm::{batchnorm2d, batchnorm2d_backward, BatchNorm2d, BnCache, Mode};
use crate::rf::{max_rf, rho_to_kernels, LayerGeom, RFResult, MAX_RHO};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSpec {
    pub base_channels: usize,
    pub rho: usize,
    pub num_blocks: usize,
    /// Blocks per stage; derived from `num_blocks` when empty.
    pub stages: Vec<usize>,
    pub stem_kernels: [usize; 2],
    pub stem_strides: [usize; 2],
    /// 2×2 max-pool between the first and second stage.
    pub pool_after_first_stage: bool,
    pub in_channels: usize,
    pub num_classes: usize,
    #[serde(skip)]
    pub damping: DampingSpec,
    #[serde(skip)]
    pub decomp: DecompSpec,
    /// Decompose the spatial stem convolutions as well as the residual ones.
    pub decomp_stem: bool,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            base_channels: 128,
            rho: 7,
            num_blocks: 7,
            stages: Vec::new(),
            stem_kernels: [5, 3],
            stem_strides: [2, 2],
            pool_after_first_stage: true,
            in_channels: 2,
            num_classes: 10,
            damping: DampingSpec::default(),
            decomp: DecompSpec::default(),
            decomp_stem: false,
        }
    }
}

/// Default split of `num_blocks` into up to three stages, e.g. 7 → [4, 2, 1].
fn default_stages(num_blocks: usize) -> Vec<usize> {
    let s2 = (2 * num_blocks + 3) / 7;
    let s3 = (num_blocks + 3) / 7;
    let s1 = num_blocks.saturating_sub(s2 + s3).max(1);
    [s1, s2, s3].into_iter().filter(|s| *s > 0).collect()
}

/// Where a convolution sits in the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvPlan {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub in_block: bool,
}

impl ArchSpec {
    pub fn stage_blocks(&self) -> Vec<usize> {
        if self.stages.is_empty() {
            default_stages(self.num_blocks)
        } else {
            self.stages.clone()
        }
    }

    pub fn stage_width(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    fn decomposes(&self, plan: &ConvPlan) -> bool {
        self.decomp.enabled && plan.kernel > 1 && (plan.in_block || self.decomp_stem)
    }

    /// Every violated constraint, not just the first.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.base_channels == 0 {
            errs.push("base_channels must be >= 1".to_string());
        }
        if self.rho > MAX_RHO {
            errs.push(format!("rho = {} is outside 0..={MAX_RHO}", self.rho));
        }
        if self.num_blocks == 0 {
            errs.push("num_blocks must be >= 1".to_string());
        }
        if !self.stages.is_empty() {
            if self.stages.iter().sum::<usize>() != self.num_blocks {
                errs.push(format!("stages {:?} do not sum to num_blocks = {}", self.stages, self.num_blocks));
            }
            if self.stages.contains(&0) {
                errs.push(format!("stages {:?} contain an empty stage", self.stages));
            }
        }
        for (i, k) in self.stem_kernels.iter().enumerate() {
            if k % 2 == 0 {
                errs.push(format!("stem conv {i} kernel {k} must be odd"));
            }
        }
        if self.stem_strides.contains(&0) {
            errs.push(format!("stem strides {:?} must be >= 1", self.stem_strides));
        }
        if self.in_channels == 0 {
            errs.push("in_channels must be >= 1".to_string());
        }
        if self.num_classes < 2 {
            errs.push(format!("num_classes = {} must be >= 2", self.num_classes));
        }
        if let Err(Error::Validation(e)) = self.damping.validate() {
            errs.extend(e);
        }
        if self.decomp.enabled {
            if self.decomp.z == 0 {
                errs.push("decomp.Z must be >= 1".to_string());
            } else if errs.is_empty() {
                for plan in self.conv_plan() {
                    if self.decomposes(&plan) && plan.c_out % self.decomp.z != 0 {
                        errs.push(format!(
                            "layer {}: C_out = {} is not divisible by decomp.Z = {}",
                            plan.name, plan.c_out, self.decomp.z
                        ));
                    }
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    /// The main-path convolutions in forward order (shortcut projections excluded).
    pub fn conv_plan(&self) -> Vec<ConvPlan> {
        let mut out = Vec::new();
        let b = self.base_channels;
        out.push(ConvPlan {
            name: "stem.0".into(),
            c_in: self.in_channels,
            c_out: b,
            kernel: self.stem_kernels[0],
            stride: self.stem_strides[0],
            in_block: false,
        });
        out.push(ConvPlan {
            name: "stem.1".into(),
            c_in: b,
            c_out: b,
            kernel: self.stem_kernels[1],
            stride: self.stem_strides[1],
            in_block: false,
        });
        let kernels = rho_to_kernels(self.rho.min(MAX_RHO), self.num_blocks.max(1)).unwrap_or_default();
        let mut kernels = kernels.into_iter();
        let mut c_in = b;
        for (s, blocks) in self.stage_blocks().into_iter().enumerate() {
            let width = self.stage_width(s);
            for i in 0..blocks {
                let k = kernels.next().unwrap_or([1, 1]);
                for (j, kernel) in k.into_iter().enumerate() {
                    out.push(ConvPlan {
                        name: format!("stage{}.block{i}.conv{}", s + 1, j + 1),
                        c_in: if j == 0 { c_in } else { width },
                        c_out: width,
                        kernel,
                        stride: 1,
                        in_block: true,
                    });
                }
                c_in = width;
            }
        }
        out
    }

    /// Geometry along the main path, including the pooling layer.
    pub fn geometry(&self) -> Vec<LayerGeom> {
        let plan = self.conv_plan();
        let first_stage_convs = 2 + 2 * self.stage_blocks().first().copied().unwrap_or(0);
        let mut out = Vec::new();
        for (i, p) in plan.iter().enumerate() {
            if i == first_stage_convs && self.pool_after_first_stage && self.stage_blocks().len() > 1 {
                out.push(LayerGeom::pool(2));
            }
            out.push(LayerGeom::conv(p.kernel, p.stride));
        }
        out
    }

    pub fn max_rf(&self) -> Result<RFResult> {
        max_rf(&self.geometry())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    ConvWeight,
    LinearWeight,
    Bias,
    BnScale,
    BnShift,
}

impl ParamKind {
    /// Conv and linear weights are prunable; biases and batchnorm affine terms are not.
    pub fn prunable(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::LinearWeight)
    }
}

#[derive(Debug, Clone)]
pub enum ConvOp {
    Plain(ConvLayer),
    Decomposed(DecomposedBlock),
}

#[derive(Debug, Clone)]
enum ConvCache {
    Plain(Tensor),
    Decomposed(DecompCache),
}

/// One convolution slot: plain or decomposed, optionally damped.
#[derive(Debug, Clone)]
pub struct ConvUnit {
    pub name: String,
    pub op: ConvOp,
    /// Shaped for the plain kernel or for the decomposed core. `None` when undamped.
    pub damping: Option<DampingMatrix>,
    cache: Option<ConvCache>,
}

fn accumulate(layer: &mut ConvLayer, g: &ConvGrads) -> Result<()> {
    layer.weight.accumulate_grad(&g.weight)?;
    layer.bias.accumulate_grad(&g.bias)
}

impl ConvUnit {
    fn new(plan: &ConvPlan, spec: &ArchSpec) -> Result<Self> {
        let pad = (plan.kernel - 1) / 2;
        let k = (plan.kernel, plan.kernel);
        let s = (plan.stride, plan.stride);
        let op = if spec.decomposes(plan) {
            ConvOp::Decomposed(decompose_conv(plan.c_in, plan.c_out, k, s, (pad, pad), spec.decomp.z).map_err(
                |e| Error::Config(format!("layer {}: {e}", plan.name)),
            )?)
        } else {
            ConvOp::Plain(ConvLayer::new(plan.c_in, plan.c_out, k, s, (pad, pad)))
        };
        let damping = if spec.damping.enabled && plan.kernel > 1 {
            Some(build_damping_matrix(plan.kernel, plan.kernel, &spec.damping)?)
        } else {
            None
        };
        Ok(Self { name: plan.name.clone(), op, damping, cache: None })
    }

    fn pointwise(name: String, c_in: usize, c_out: usize) -> Self {
        Self { name, op: ConvOp::Plain(ConvLayer::same(c_in, c_out, (1, 1))), damping: None, cache: None }
    }

    pub fn layers(&self) -> Vec<(&'static str, &ConvLayer)> {
        match &self.op {
            ConvOp::Plain(l) => vec![("", l)],
            ConvOp::Decomposed(b) => vec![(".reduce", &b.reduce), (".core", &b.core), (".expand", &b.expand)],
        }
    }

    fn layers_mut(&mut self) -> Vec<(&'static str, &mut ConvLayer)> {
        match &mut self.op {
            ConvOp::Plain(l) => vec![("", l)],
            ConvOp::Decomposed(b) => {
                let DecomposedBlock { reduce, core, expand } = b;
                vec![(".reduce", reduce), (".core", core), (".expand", expand)]
            }
        }
    }

    pub fn kernel(&self) -> (usize, usize) {
        match &self.op {
            ConvOp::Plain(l) => l.kernel(),
            ConvOp::Decomposed(b) => b.core.kernel(),
        }
    }

    pub fn stride(&self) -> (usize, usize) {
        match &self.op {
            ConvOp::Plain(l) => l.stride,
            ConvOp::Decomposed(b) => b.core.stride,
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        match &self.op {
            ConvOp::Plain(l) => {
                let y = match &self.damping {
                    Some(c) => damped_conv2d(x, l, c)?,
                    None => conv2d_forward(x, l)?,
                };
                self.cache = Some(ConvCache::Plain(x.clone()));
                Ok(y)
            }
            ConvOp::Decomposed(b) => {
                let (y, cache) = b.forward(x, self.damping.as_ref())?;
                self.cache = Some(ConvCache::Decomposed(cache));
                Ok(y)
            }
        }
    }

    pub fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        let cache = self.cache.take().ok_or_else(|| Error::State(format!("{}: backward before forward", self.name)))?;
        match (&mut self.op, &cache) {
            (ConvOp::Plain(l), ConvCache::Plain(x)) => {
                let grads = match &self.damping {
                    Some(c) => damped_conv2d_backward(g, Some(x), l, c)?,
                    None => conv2d_backward(g, Some(x), l)?,
                };
                accumulate(l, &grads)?;
                Ok(grads.input)
            }
            (ConvOp::Decomposed(b), ConvCache::Decomposed(c)) => {
                let grads = b.backward(g, c, self.damping.as_ref())?;
                accumulate(&mut b.reduce, &grads.reduce)?;
                accumulate(&mut b.core, &grads.core)?;
                accumulate(&mut b.expand, &grads.expand)?;
                Ok(grads.input)
            }
            _ => Err(Error::State(format!("{}: cache does not match layer type", self.name))),
        }
    }

    fn geometry(&self) -> LayerGeom {
        let (k, s) = (self.kernel(), self.stride());
        LayerGeom { kernel: k, stride: s, kind: crate::rf::GeomKind::Conv }
    }
}

#[derive(Debug, Clone)]
pub struct BnUnit {
    pub name: String,
    pub bn: BatchNorm2d,
    cache: Option<BnCache>,
}

impl BnUnit {
    fn new(name: String, channels: usize) -> Self {
        Self { name, bn: BatchNorm2d::new(channels), cache: None }
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (y, cache) = batchnorm2d(x, &mut self.bn, mode)?;
        self.cache = Some(cache);
        Ok(y)
    }

    fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        let cache = self.cache.take().ok_or_else(|| Error::State(format!("{}: backward before forward", self.name)))?;
        let grads = batchnorm2d_backward(g, &cache, &self.bn)?;
        self.bn.scale.accumulate_grad(&grads.scale)?;
        self.bn.shift.accumulate_grad(&grads.shift)?;
        Ok(grads.input)
    }
}

/// conv → batchnorm → ReLU.
#[derive(Debug, Clone)]
pub struct StemLayer {
    pub conv: ConvUnit,
    pub bn: BnUnit,
    out: Option<Tensor>,
}

impl StemLayer {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.conv.forward(x)?;
        let h = self.bn.forward(&h, mode)?;
        let y = relu(&h);
        self.out = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        let y = self.out.take().ok_or_else(|| Error::State("stem: backward before forward".into()))?;
        let g = relu_backward(g, &y)?;
        let g = self.bn.backward(&g)?;
        self.conv.backward(&g)
    }
}

/// `relu(bn2(conv2(relu(bn1(conv1(x))))) + shortcut(x))`, the shortcut being a 1×1
/// projection with batchnorm when the width changes.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: ConvUnit,
    pub bn1: BnUnit,
    pub conv2: ConvUnit,
    pub bn2: BnUnit,
    pub shortcut: Option<(ConvUnit, BnUnit)>,
    mid: Option<Tensor>,
    out: Option<Tensor>,
}

impl ResidualBlock {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.conv1.forward(x)?;
        let h = relu(&self.bn1.forward(&h, mode)?);
        self.mid = Some(h.clone());
        let h = self.conv2.forward(&h)?;
        let h = self.bn2.forward(&h, mode)?;
        let s = match &mut self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(x)?;
                bn.forward(&s, mode)?
            }
            None => x.clone(),
        };
        let y = relu(&add(&h, &s)?);
        self.out = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        let y = self.out.take().ok_or_else(|| Error::State("block: backward before forward".into()))?;
        let mid = self.mid.take().ok_or_else(|| Error::State("block: backward before forward".into()))?;
        let g = relu_backward(g, &y)?;
        let gh = self.bn2.backward(&g)?;
        let gh = self.conv2.backward(&gh)?;
        let gh = relu_backward(&gh, &mid)?;
        let gh = self.bn1.backward(&gh)?;
        let gx = self.conv1.backward(&gh)?;
        let gs = match &mut self.shortcut {
            Some((conv, bn)) => {
                let gs = bn.backward(&g)?;
                conv.backward(&gs)?
            }
            None => g,
        };
        add(&gx, &gs)
    }
}

#[derive(Debug, Clone)]
struct PoolCache {
    argmax: Vec<usize>,
    input_shape: Vec<usize>,
}

/// A built network. Forward passes record what the next backward pass needs.
#[derive(Debug, Clone)]
pub struct Network {
    spec: ArchSpec,
    pub stem: Vec<StemLayer>,
    pub stages: Vec<Vec<ResidualBlock>>,
    pub head: Linear,
    pool_cache: Option<PoolCache>,
    feature_shape: Option<Vec<usize>>,
    pooled: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRow {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub params: usize,
    pub nonzero: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSummary {
    pub total_params: usize,
    /// Total minus exact zeros in prunable weights; biases and batchnorm terms always count.
    pub nonzero_params: usize,
    pub prunable_params: usize,
    pub rf: RFResult,
    pub layers: Vec<LayerRow>,
}

impl ModelSummary {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,kind,shape,params,nonzero\n");
        for r in &self.layers {
            let shape: Vec<String> = r.shape.iter().map(|d| d.to_string()).collect();
            s.push_str(&format!("{},{:?},{},{},{}\n", r.name, r.kind, shape.join("x"), r.params, r.nonzero));
        }
        s.push_str(&format!("total,,,{},{}\n", self.total_params, self.nonzero_params));
        s
    }
}

pub fn build(spec: &ArchSpec) -> Result<Network> {
    spec.validate()?;
    let plan = spec.conv_plan();
    let stem = plan[..2]
        .iter()
        .map(|p| {
            Ok(StemLayer {
                conv: ConvUnit::new(p, spec)?,
                bn: BnUnit::new(format!("{}.bn", p.name), p.c_out),
                out: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut stages = Vec::new();
    let mut it = plan[2..].chunks_exact(2);
    let mut c_in = spec.base_channels;
    for (s, blocks) in spec.stage_blocks().into_iter().enumerate() {
        let width = spec.stage_width(s);
        let mut stage = Vec::new();
        for i in 0..blocks {
            let pair = it.next().ok_or_else(|| Error::State("conv plan shorter than stage layout".into()))?;
            let prefix = format!("stage{}.block{i}", s + 1);
            let shortcut = (c_in != width).then(|| {
                (
                    ConvUnit::pointwise(format!("{prefix}.shortcut"), c_in, width),
                    BnUnit::new(format!("{prefix}.shortcut.bn"), width),
                )
            });
            stage.push(ResidualBlock {
                conv1: ConvUnit::new(&pair[0], spec)?,
                bn1: BnUnit::new(format!("{prefix}.bn1"), width),
                conv2: ConvUnit::new(&pair[1], spec)?,
                bn2: BnUnit::new(format!("{prefix}.bn2"), width),
                shortcut,
                mid: None,
                out: None,
            });
            c_in = width;
        }
        stages.push(stage);
    }
    Ok(Network {
        spec: spec.clone(),
        stem,
        stages,
        head: Linear::new(c_in, spec.num_classes),
        pool_cache: None,
        feature_shape: None,
        pooled: None,
    })
}

/// Builds and initializes in one step.
pub fn build_initialized(spec: &ArchSpec, seed: u64) -> Result<Network> {
    let mut net = build(spec)?;
    init_weights(&mut net, seed);
    Ok(net)
}

/// Fan-in scaled normal weights (`sqrt(2/fan_in)` for convs, `sqrt(1/fan_in)` for the
/// classifier), zero biases, unit batchnorm scale and zero shift. Fully determined by `seed`.
pub fn init_weights(net: &mut Network, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    net.visit_conv_layers_mut(&mut |_, l| l.init(&mut rng));
    net.visit_bn_mut(&mut |_, bn| bn.reset());
    let fan_in = net.head.in_features() as f32;
    let std = (1.0 / fan_in).sqrt();
    for w in net.head.weight.data_mut() {
        let z: f32 = StandardNormal.sample(&mut rng);
        *w = z * std;
    }
    net.head.bias.data_mut().fill(0.0);
}

impl Network {
    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    fn pool_enabled(&self) -> bool {
        self.spec.pool_after_first_stage && self.stages.len() > 1
    }

    /// Stem and residual stages; output is the last feature map `[N, C, T', F']`.
    pub fn forward_features(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.spec.in_channels {
            return Err(Error::dim(format!(
                "network expects {} input channels, got input shape {:?}",
                self.spec.in_channels,
                x.shape()
            )));
        }
        let mut h = x.clone();
        for l in &mut self.stem {
            h = l.forward(&h, mode)?;
        }
        let pool = self.pool_enabled();
        for (s, stage) in self.stages.iter_mut().enumerate() {
            if s == 1 && pool {
                let (p, argmax) = max_pool2d(&h, 2)?;
                self.pool_cache = Some(PoolCache { argmax, input_shape: h.shape().to_vec() });
                h = p;
            }
            for block in stage.iter_mut() {
                h = block.forward(&h, mode)?;
            }
        }
        Ok(h)
    }

    pub fn backward_features(&mut self, g: &Tensor) -> Result<Tensor> {
        let pool = self.pool_enabled();
        let mut g = g.clone();
        for (s, stage) in self.stages.iter_mut().enumerate().rev() {
            for block in stage.iter_mut().rev() {
                g = block.backward(&g)?;
            }
            if s == 1 && pool {
                let c = self.pool_cache.take().ok_or_else(|| Error::State("pool: backward before forward".into()))?;
                g = max_pool2d_backward(&g, &c.argmax, &c.input_shape)?;
            }
        }
        for l in self.stem.iter_mut().rev() {
            g = l.backward(&g)?;
        }
        Ok(g)
    }

    /// Logits `[N, num_classes]`.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.forward_features(x, mode)?;
        self.feature_shape = Some(h.shape().to_vec());
        let pooled = global_avg_pool(&h)?;
        let logits = linear(&pooled, &self.head)?;
        self.pooled = Some(pooled);
        Ok(logits)
    }

    /// Backpropagates a logit gradient, accumulating parameter gradients; returns the input
    /// gradient.
    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<Tensor> {
        let pooled = self.pooled.take().ok_or_else(|| Error::State("network: backward before forward".into()))?;
        let shape = self.feature_shape.take().ok_or_else(|| Error::State("network: backward before forward".into()))?;
        let grads = linear_backward(grad_logits, &pooled, &self.head)?;
        self.head.weight.accumulate_grad(&grads.weight)?;
        self.head.bias.accumulate_grad(&grads.bias)?;
        let g = global_avg_pool_backward(&grads.input, &shape)?;
        self.backward_features(&g)
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |_, _, t| t.zero_grad());
    }

    fn conv_units(&self) -> Vec<&ConvUnit> {
        let mut out: Vec<&ConvUnit> = self.stem.iter().map(|l| &l.conv).collect();
        for b in self.stages.iter().flatten() {
            out.push(&b.conv1);
            out.push(&b.conv2);
            if let Some((c, _)) = &b.shortcut {
                out.push(c);
            }
        }
        out
    }

    fn conv_units_mut(&mut self) -> Vec<&mut ConvUnit> {
        let mut out: Vec<&mut ConvUnit> = self.stem.iter_mut().map(|l| &mut l.conv).collect();
        for b in self.stages.iter_mut().flatten() {
            out.push(&mut b.conv1);
            out.push(&mut b.conv2);
            if let Some((c, _)) = &mut b.shortcut {
                out.push(c);
            }
        }
        out
    }

    fn bn_units_mut(&mut self) -> Vec<&mut BnUnit> {
        let mut out: Vec<&mut BnUnit> = self.stem.iter_mut().map(|l| &mut l.bn).collect();
        for b in self.stages.iter_mut().flatten() {
            out.push(&mut b.bn1);
            out.push(&mut b.bn2);
            if let Some((_, bn)) = &mut b.shortcut {
                out.push(bn);
            }
        }
        out
    }

    fn bn_units(&self) -> Vec<&BnUnit> {
        let mut out: Vec<&BnUnit> = self.stem.iter().map(|l| &l.bn).collect();
        for b in self.stages.iter().flatten() {
            out.push(&b.bn1);
            out.push(&b.bn2);
            if let Some((_, bn)) = &b.shortcut {
                out.push(bn);
            }
        }
        out
    }

    fn visit_conv_layers_mut(&mut self, f: &mut dyn FnMut(String, &mut ConvLayer)) {
        for unit in self.conv_units_mut() {
            let name = unit.name.clone();
            for (suffix, l) in unit.layers_mut() {
                f(format!("{name}{suffix}"), l);
            }
        }
    }

    fn visit_bn_mut(&mut self, f: &mut dyn FnMut(&str, &mut BatchNorm2d)) {
        for unit in self.bn_units_mut() {
            f(&unit.name, &mut unit.bn);
        }
    }

    /// Every trainable tensor with a stable, unique name, in a fixed order.
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        for unit in self.conv_units() {
            for (suffix, l) in unit.layers() {
                f(&format!("{}{suffix}.weight", unit.name), ParamKind::ConvWeight, &l.weight);
                f(&format!("{}{suffix}.bias", unit.name), ParamKind::Bias, &l.bias);
            }
        }
        for unit in self.bn_units() {
            f(&format!("{}.scale", unit.name), ParamKind::BnScale, &unit.bn.scale);
            f(&format!("{}.shift", unit.name), ParamKind::BnShift, &unit.bn.shift);
        }
        f("head.weight", ParamKind::LinearWeight, &self.head.weight);
        f("head.bias", ParamKind::Bias, &self.head.bias);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        for unit in self.conv_units_mut() {
            let name = unit.name.clone();
            for (suffix, l) in unit.layers_mut() {
                f(&format!("{name}{suffix}.weight"), ParamKind::ConvWeight, &mut l.weight);
                f(&format!("{name}{suffix}.bias"), ParamKind::Bias, &mut l.bias);
            }
        }
        for unit in self.bn_units_mut() {
            let name = unit.name.clone();
            f(&format!("{name}.scale"), ParamKind::BnScale, &mut unit.bn.scale);
            f(&format!("{name}.shift"), ParamKind::BnShift, &mut unit.bn.shift);
        }
        f("head.weight", ParamKind::LinearWeight, &mut self.head.weight);
        f("head.bias", ParamKind::Bias, &mut self.head.bias);
    }

    /// Non-trainable state (batchnorm running statistics).
    pub fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for unit in self.bn_units() {
            f(&format!("{}.running_mean", unit.name), &unit.bn.running_mean);
            f(&format!("{}.running_var", unit.name), &unit.bn.running_var);
        }
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for unit in self.bn_units_mut() {
            let name = unit.name.clone();
            f(&format!("{name}.running_mean"), &mut unit.bn.running_mean);
            f(&format!("{name}.running_var"), &mut unit.bn.running_var);
        }
    }

    /// Main-path geometry read off the built layers.
    pub fn geometry(&self) -> Vec<LayerGeom> {
        let mut out: Vec<LayerGeom> = self.stem.iter().map(|l| l.conv.geometry()).collect();
        for (s, stage) in self.stages.iter().enumerate() {
            if s == 1 && self.pool_enabled() {
                out.push(LayerGeom::pool(2));
            }
            for b in stage {
                out.push(b.conv1.geometry());
                out.push(b.conv2.geometry());
            }
        }
        out
    }

    /// Damping matrices by conv unit name (for inspection).
    pub fn damping_matrices(&self) -> Vec<(String, Option<DampingMatrix>)> {
        self.conv_units().into_iter().map(|u| (u.name.clone(), u.damping.clone())).collect()
    }

    pub fn summarize(&self) -> Result<ModelSummary> {
        summarize(self)
    }
}

/// Exact counts by tensor enumeration.
pub fn summarize(net: &Network) -> Result<ModelSummary> {
    let mut layers = Vec::new();
    net.visit_params(&mut |name, kind, t| {
        let nonzero = if kind.prunable() { t.count_nonzero() } else { t.numel() };
        layers.push(LayerRow { name: name.to_string(), kind, shape: t.shape().to_vec(), params: t.numel(), nonzero });
    });
    let total_params = layers.iter().map(|r| r.params).sum();
    let nonzero_params = layers.iter().map(|r| r.nonzero).sum();
    let prunable_params = layers.iter().filter(|r| r.kind.prunable()).map(|r| r.params).sum();
    Ok(ModelSummary { total_params, nonzero_params, prunable_params, rf: max_rf(&net.geometry())?, layers })
}

/// Parameter count of the spec without allocating weights.
pub fn count_params(spec: &ArchSpec) -> Result<usize> {
    Ok(summarize(&build(spec)?)?.total_params)
}
