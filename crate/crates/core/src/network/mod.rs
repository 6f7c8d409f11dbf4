//! The three-stream segmentation network.
//!
//! * spatial stream: three stride-2 conv blocks, stride 8;
//! * context stream: pre-activation ResNet backbone, mid (stride 8) and high
//!   (stride 32) features, each refined by context-aware attention (CAA);
//! * boundary stream: residual block + global-gated convolution (GGC) +
//!   transposed-conv head predicting a boundary map;
//! * fusion: concatenation, channel reweighting, class projection, softmax.
//!
//! All tensors are `[batch, channels, height, width]`.

mod ctx;
mod params;

use tbnet_tensor::{Graph, Tensor, TensorError, Var};

pub use ctx::{update_running_stats, Ctx, Mode, BN_EPS, BN_MOMENTUM, HEAD_INIT_STD};
pub use params::{load_backbone_weights, Init, ParamStore, BACKBONE_PREFIX};

use crate::config::{validate_config, AblationFlags, BoundaryFusion, TrainConfig};
use crate::error::{Error, Result};
use crate::grid::Grid;

/// A feature map and its downsampling factor relative to the input.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub var: Var,
    pub stride: usize,
}

impl FeatureMap {
    pub fn new(var: Var, stride: usize) -> Self {
        Self { var, stride }
    }

    pub fn depth(&self) -> usize {
        self.var.shape()[1]
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.var.shape()[2], self.var.shape()[3])
    }
}

#[derive(Clone, Debug)]
pub struct NetworkOutput {
    /// `[n, C, H, W]` class scores before the softmax.
    pub seg_logits: Var,
    /// `[n, C, H, W]`, summing to one over the class axis.
    pub seg_probs: Var,
    /// `[n, 1, H, W]` in `[0, 1]`; absent when the boundary stream is disabled.
    pub boundary_prob: Option<Var>,
    /// `[n, 1, H, W]` boundary scores before the sigmoid.
    pub boundary_logits: Option<Var>,
}

/// Full-width filter counts; every one is divided by the configured divisor.
const SPATIAL_WIDTHS: [usize; 3] = [64, 128, 256];
const STEM_WIDTH: usize = 64;
const STAGE_WIDTHS: [usize; 4] = [64, 128, 256, 512];
const BOTTLENECK_EXPANSION: usize = 4;
const GGC_WIDTH: usize = 512;
const HEAD_WIDTHS: [usize; 2] = [128, 64];
const FUSION_WIDTH: usize = 256;
const BOUNDARY_PROJ_WIDTH: usize = 128;
const CAA_REDUCTION: usize = 8;
const SE_REDUCTION: usize = 4;

fn check_input(image: &Var, multiple: usize) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = image.dims4()?;
    if c != 1 {
        return Err(Error::Shape(format!("expected a one-channel image, got {c} channels")));
    }
    if h == 0 || w == 0 || h % multiple != 0 || w % multiple != 0 {
        return Err(Error::Shape(format!(
            "input height and width must be divisible by {multiple}, got {h}x{w}"
        )));
    }
    Ok((n, h, w))
}

/// Three `[3×3 conv stride 2 → batch norm → ReLU]` blocks.
pub fn spatial_stream(ctx: &Ctx, cfg: &TrainConfig, image: &Var) -> Result<FeatureMap> {
    check_input(image, 8)?;
    let mut x = image.clone();
    for (i, &w) in SPATIAL_WIDTHS.iter().enumerate() {
        let name = format!("spatial/block{}", i + 1);
        x = ctx.conv(&format!("{name}/conv"), &x, cfg.width(w), 3, 2, false)?;
        x = ctx.bn_relu(&format!("{name}/bn"), &x)?;
    }
    Ok(FeatureMap::new(x, 8))
}

/// Pre-activation bottleneck unit.
fn bottleneck(ctx: &Ctx, name: &str, x: &Var, base: usize, stride: usize) -> Result<Var> {
    let out = base * BOTTLENECK_EXPANSION;
    let preact = ctx.bn_relu(&format!("{name}/preact"), x)?;
    let shortcut = if x.shape()[1] != out || stride != 1 {
        ctx.conv(&format!("{name}/shortcut"), &preact, out, 1, stride, false)?
    } else {
        x.clone()
    };
    let mut r = ctx.conv(&format!("{name}/conv1"), &preact, base, 1, 1, false)?;
    r = ctx.bn_relu(&format!("{name}/bn1"), &r)?;
    r = ctx.conv(&format!("{name}/conv2"), &r, base, 3, stride, false)?;
    r = ctx.bn_relu(&format!("{name}/bn2"), &r)?;
    r = ctx.conv(&format!("{name}/conv3"), &r, out, 1, 1, true)?;
    Ok(ctx.graph().add(&shortcut, &r)?)
}

/// Backbone features after stage 2 (stride 8) and stage 4 (stride 32), each
/// passed through batch norm, ReLU and a 1×1 projection to the context depth.
pub fn backbone_features(ctx: &Ctx, cfg: &TrainConfig, image: &Var) -> Result<(FeatureMap, FeatureMap)> {
    check_input(image, 32)?;
    let g = ctx.graph();
    let p = "context/backbone";
    let mut x = ctx.conv(&format!("{p}/stem/conv"), image, cfg.width(STEM_WIDTH), 7, 2, true)?;
    x = g.max_pool2d(&x, 3, 2, 1)?;
    let mut mid = None;
    for (s, (&units, &base)) in cfg.backbone_blocks.iter().zip(&STAGE_WIDTHS).enumerate() {
        for u in 0..units {
            let stride = if s > 0 && u == 0 { 2 } else { 1 };
            let name = format!("{p}/stage{}/unit{}", s + 1, u + 1);
            x = bottleneck(ctx, &name, &x, cfg.width(base), stride)?;
        }
        if s == 1 {
            mid = Some(x.clone());
        }
    }
    let depth = cfg.width(cfg.context_depth);
    let project = |name: &str, f: &Var, stride| -> Result<FeatureMap> {
        let y = ctx.bn_relu(&format!("context/{name}/bn"), f)?;
        let y = ctx.conv(&format!("context/{name}/proj"), &y, depth, 1, 1, true)?;
        Ok(FeatureMap::new(y, stride))
    };
    let mid = project("mid", &mid.expect("four stages"), 8)?;
    let high = project("high", &x, 32)?;
    Ok((mid, high))
}

/// Context-aware attention: `γ·(V·σ(QᵀK)ᵀ) + f`, where `Q`, `K` (depth D/8)
/// and `V` (depth D) are 1×1 projections flattened over the `L = h·w`
/// positions. `γ` starts at zero, so a fresh module is the identity.
pub fn caa(ctx: &Ctx, name: &str, f: &FeatureMap, max_len: usize) -> Result<FeatureMap> {
    let g = ctx.graph();
    let (n, d, h, w) = f.var.dims4()?;
    let len = h * w;
    if len > max_len {
        return Err(TensorError::AttentionSize { len, cap: max_len }.into());
    }
    let dr = (d / CAA_REDUCTION).max(1);
    let q = ctx.conv(&format!("{name}/query"), &f.var, dr, 1, 1, true)?;
    let k = ctx.conv(&format!("{name}/key"), &f.var, dr, 1, 1, true)?;
    let v = ctx.conv(&format!("{name}/value"), &f.var, d, 1, 1, true)?;
    let q = g.reshape(&q, &[n, dr, len])?;
    let k = g.reshape(&k, &[n, dr, len])?;
    let v = g.reshape(&v, &[n, d, len])?;
    // a[i][j] = σ(q_i · k_j)
    let a = g.sigmoid(&g.batch_matmul(&q, &k, true, false)?);
    // o[:, i] = Σ_j a[i][j] v_j
    let o = g.reshape(&g.batch_matmul(&v, &a, false, true)?, &[n, d, h, w])?;
    let gamma = ctx.param(&format!("{name}/gamma"), &[1], Init::Zeros)?;
    let out = g.add(&g.scale_by(&o, &gamma)?, &f.var)?;
    Ok(FeatureMap::new(out, f.stride))
}

/// Backbone features refined by two independent attention modules (unless disabled).
pub fn context_stream(
    ctx: &Ctx,
    cfg: &TrainConfig,
    flags: &AblationFlags,
    image: &Var,
) -> Result<(FeatureMap, FeatureMap)> {
    let (mid, high) = backbone_features(ctx, cfg, image)?;
    if !flags.use_caa {
        return Ok((mid, high));
    }
    Ok((
        caa(ctx, "context/caa_mid", &mid, cfg.max_attention_len)?,
        caa(ctx, "context/caa_high", &high, cfg.max_attention_len)?,
    ))
}

/// Global-gated convolution: `f1·g + f1` with gate
/// `g = σ(BN(conv1×1(conv3×3(ReLU(conv3×3(BN(f1 ‖ f2)))))))` of f1's depth.
pub fn ggc(ctx: &Ctx, name: &str, f1: &FeatureMap, f2: &FeatureMap, width: usize) -> Result<FeatureMap> {
    if f1.hw() != f2.hw() || f1.var.shape()[0] != f2.var.shape()[0] {
        return Err(Error::Shape(format!(
            "gated convolution inputs differ in size: {:?} vs {:?}",
            f1.var.shape(),
            f2.var.shape()
        )));
    }
    let g = ctx.graph();
    let x = g.concat(&[&f1.var, &f2.var])?;
    let x = ctx.bn(&format!("{name}/bn_in"), &x)?;
    let x = ctx.relu(&ctx.conv(&format!("{name}/conv1"), &x, width, 3, 1, true)?);
    let x = ctx.conv(&format!("{name}/conv2"), &x, width, 3, 1, true)?;
    let x = ctx.conv(&format!("{name}/gate_proj"), &x, f1.depth(), 1, 1, true)?;
    let gate = g.sigmoid(&ctx.bn(&format!("{name}/bn_out"), &x)?);
    let out = g.add(&g.mul(&f1.var, &gate)?, &f1.var)?;
    Ok(FeatureMap::new(out, f1.stride))
}

pub struct BoundaryOutput {
    /// Gated features at the mid-level stride.
    pub feat: FeatureMap,
    /// Head output before the final resize (stride 2).
    pub map: FeatureMap,
    /// `[n, 1, H, W]` boundary scores at input resolution.
    pub logits: Var,
    /// Sigmoid of `logits`.
    pub prob: Var,
}

pub fn boundary_stream(
    ctx: &Ctx,
    cfg: &TrainConfig,
    ctx_mid: &FeatureMap,
    ctx_high: &FeatureMap,
    input_hw: (usize, usize),
) -> Result<BoundaryOutput> {
    let g = ctx.graph();
    let (h, w) = ctx_mid.hw();
    let high = FeatureMap::new(g.resize_bilinear(&ctx_high.var, h, w)?, ctx_mid.stride);
    let d = ctx_mid.depth();
    let r = ctx.relu(&ctx.conv("boundary/res/conv1", &ctx_mid.var, d, 3, 1, true)?);
    let r = ctx.conv("boundary/res/conv2", &r, d, 3, 1, true)?;
    let res = FeatureMap::new(g.add(&r, &ctx_mid.var)?, ctx_mid.stride);
    let feat = ggc(ctx, "boundary/ggc", &res, &high, cfg.width(GGC_WIDTH))?;
    let mut x = feat.var.clone();
    let mut stride = feat.stride;
    for (i, &wd) in HEAD_WIDTHS.iter().enumerate() {
        let name = format!("boundary/head/up{}", i + 1);
        x = ctx.up_conv(&format!("{name}/deconv"), &x, cfg.width(wd))?;
        x = ctx.bn_relu(&format!("{name}/bn"), &x)?;
        stride /= 2;
    }
    let z = ctx.head_conv("boundary/head/out", &x, 1)?;
    let logits = g.resize_bilinear(&z, input_hw.0, input_hw.1)?;
    Ok(BoundaryOutput {
        feat,
        map: FeatureMap::new(g.sigmoid(&z), stride),
        prob: g.sigmoid(&logits),
        logits,
    })
}

/// Fuses the stream outputs into class probabilities at input resolution.
/// Returns `(logits, probabilities)`.
pub fn fuse(
    ctx: &Ctx,
    cfg: &TrainConfig,
    spatial: &FeatureMap,
    context: &FeatureMap,
    boundary: Option<&FeatureMap>,
    input_hw: (usize, usize),
) -> Result<(Var, Var)> {
    let g = ctx.graph();
    let (h, w) = spatial.hw();
    let c = g.resize_bilinear(&context.var, h, w)?;
    let x = g.concat(&[&spatial.var, &c])?;
    let x = ctx.bn("fusion/bn", &x)?;
    let mut x = ctx.conv("fusion/conv", &x, cfg.width(FUSION_WIDTH), 3, 1, true)?;
    if let Some(b) = boundary {
        let b = g.resize_bilinear(&b.var, h, w)?;
        let b = ctx.conv("fusion/boundary_proj", &b, cfg.width(BOUNDARY_PROJ_WIDTH), 1, 1, true)?;
        x = g.concat(&[&x, &b])?;
    }
    let d = x.shape()[1];
    let s = g.global_avg_pool(&x)?;
    let s = ctx.relu(&ctx.conv("fusion/se/squeeze", &s, (d / SE_REDUCTION).max(1), 1, 1, true)?);
    let s = g.sigmoid(&ctx.conv("fusion/se/excite", &s, d, 1, 1, true)?);
    let x = g.add(&g.channel_scale(&x, &s)?, &x)?;
    let logits = ctx.head_conv("fusion/classifier", &x, cfg.num_classes)?;
    let logits = g.resize_bilinear(&logits, input_hw.0, input_hw.1)?;
    let probs = g.softmax_channels(&logits)?;
    Ok((logits, probs))
}

/// The complete forward pass on a `[n, 1, H, W]` image batch.
pub fn forward(ctx: &Ctx, cfg: &TrainConfig, flags: &AblationFlags, image: &Var) -> Result<NetworkOutput> {
    let (_, h, w) = check_input(image, 32)?;
    let spatial = spatial_stream(ctx, cfg, image)?;
    let (mid, high) = context_stream(ctx, cfg, flags, image)?;
    let (boundary_src, boundary_prob, boundary_logits) = if flags.use_boundary_stream {
        let b = boundary_stream(ctx, cfg, &mid, &high, (h, w))?;
        let src = match cfg.boundary_fusion {
            BoundaryFusion::Features => b.feat,
            BoundaryFusion::Map => b.map,
        };
        (Some(src), Some(b.prob), Some(b.logits))
    } else {
        (None, None, None)
    };
    let (seg_logits, seg_probs) = fuse(ctx, cfg, &spatial, &mid, boundary_src.as_ref(), (h, w))?;
    Ok(NetworkOutput {
        seg_logits,
        seg_probs,
        boundary_prob,
        boundary_logits,
    })
}

/// A validated architecture: configuration plus ablation switches.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub cfg: TrainConfig,
    pub flags: AblationFlags,
}

impl Network {
    pub fn new(cfg: TrainConfig, flags: AblationFlags) -> Result<Self> {
        let v = validate_config(&cfg);
        if !v.is_empty() {
            return Err(Error::Config(v));
        }
        Ok(Self { cfg, flags })
    }

    /// Freshly initialised parameters, drawn from `seed`.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let g = Graph::inference();
        let ctx = Ctx::building(&g, seed);
        let x = g.constant(Tensor::zeros(&[1, 1, 32, 32]));
        forward(&ctx, &self.cfg, &self.flags, &x)?;
        Ok(ctx.into_store().expect("building context"))
    }

    pub fn forward(&self, ctx: &Ctx, image: &Var) -> Result<NetworkOutput> {
        forward(ctx, &self.cfg, &self.flags, image)
    }

    /// Eval-mode forward without recording a tape.
    pub fn infer(&self, store: &ParamStore, images: &Tensor) -> Result<NetworkOutput> {
        let g = Graph::inference();
        let ctx = Ctx::new(&g, store, Mode::Eval);
        forward(&ctx, &self.cfg, &self.flags, &g.constant(images.clone()))
    }
}

/// Stacks gray-scale images into `[n, 1, h, w]`, bilinearly resizing each to `size`.
pub fn images_to_tensor(images: &[&Grid<f64>], size: (usize, usize)) -> Result<Tensor> {
    let (h, w) = size;
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        let t = Tensor::new(vec![1, 1, img.height(), img.width()], img.data().to_vec())?;
        let t = if img.dims() == size {
            t
        } else {
            tbnet_tensor::resize::resize_bilinear(&t, h, w)?
        };
        data.extend_from_slice(t.data());
    }
    Ok(Tensor::new(vec![images.len(), 1, h, w], data)?)
}
