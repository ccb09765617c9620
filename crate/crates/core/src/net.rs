//! The dual-path network: the LPL texture path over the context ROI, the
//! CGL path (residual U-Net, CRF refinement, mask classifier) over the
//! bounding-box ROI, and the fused classifier on their concatenated
//! features.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::crf::{mean_field, segmentation_loss, CrfConfig, SoftMask, PROB_EPS};
use crate::error::{Error, Result};
use crate::nn::{
    dropout, sconv_block, unet_conv_block, unet_down, unet_up, Activation, BoundParams, Conv, Dense, NetworkParams,
    ParamBuilder, ParamSpec, ResidualBlock,
};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// What the CGL classifier consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CglInput {
    /// Foreground probability map only.
    Mask,
    /// Foreground probability times the bounding-box image.
    Gated,
    /// Both of the above as two channels.
    Both,
}

impl CglInput {
    pub fn channels(self) -> usize {
        match self {
            CglInput::Mask | CglInput::Gated => 1,
            CglInput::Both => 2,
        }
    }
}

impl FromStr for CglInput {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask" => Ok(CglInput::Mask),
            "gated" => Ok(CglInput::Gated),
            "both" => Ok(CglInput::Both),
            _ => Err(Error::config(format!("cgl_input must be mask|gated|both, got `{s}`"))),
        }
    }
}

impl fmt::Display for CglInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CglInput::Mask => "mask",
            CglInput::Gated => "gated",
            CglInput::Both => "both",
        })
    }
}

/// Resolution at which CRF inference runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrfResolution {
    /// Decoder output resolution; the refined field is then resized.
    Bbox,
    /// After resizing the unary field to the mask size.
    Mask,
}

impl FromStr for CrfResolution {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bbox" => Ok(CrfResolution::Bbox),
            "mask" => Ok(CrfResolution::Mask),
            _ => Err(Error::config(format!("crf_resolution must be bbox|mask, got `{s}`"))),
        }
    }
}

impl fmt::Display for CrfResolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CrfResolution::Bbox => "bbox",
            CrfResolution::Mask => "mask",
        })
    }
}

/// Largest field the dense CRF is allowed to run on.
pub const MAX_CRF_PIXELS: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub preset: String,
    pub context_size: usize,
    pub bbox_size: usize,
    pub mask_size: usize,
    pub in_channels: usize,
    pub lpl_widths: [usize; 3],
    pub lpl_middle_blocks: usize,
    pub lpl_kernel: usize,
    pub cgl_widths: [usize; 4],
    pub cgl_kernel: usize,
    pub head_widths: [usize; 3],
    pub head_kernel: usize,
    pub dense_units: usize,
    pub dropout: f64,
    pub cgl_input: CglInput,
    pub crf_resolution: CrfResolution,
}

impl NetConfig {
    pub const PRESETS: [&'static str; 3] = ["paper", "desk", "toy"];

    /// Full-size dimensions.
    pub fn paper() -> Self {
        NetConfig {
            preset: "paper".into(),
            context_size: 224,
            bbox_size: 40,
            mask_size: 224,
            in_channels: 3,
            lpl_widths: [128, 256, 728],
            lpl_middle_blocks: 8,
            lpl_kernel: 3,
            cgl_widths: [16, 32, 64, 128],
            cgl_kernel: 3,
            head_widths: [32, 64, 128],
            head_kernel: 7,
            dense_units: 2048,
            dropout: 0.5,
            cgl_input: CglInput::Mask,
            crf_resolution: CrfResolution::Bbox,
        }
    }

    /// Reduced scale for desk training: small ROIs, widths divided by 16.
    pub fn desk() -> Self {
        NetConfig {
            preset: "desk".into(),
            context_size: 32,
            bbox_size: 16,
            mask_size: 32,
            lpl_widths: [8, 16, 45],
            cgl_widths: [4, 8, 16, 32],
            head_widths: [2, 4, 8],
            dense_units: 128,
            ..Self::paper()
        }
    }

    /// Minimal network for exhaustive finite-difference checks.
    pub fn toy() -> Self {
        NetConfig {
            preset: "toy".into(),
            context_size: 16,
            bbox_size: 8,
            mask_size: 8,
            in_channels: 3,
            lpl_widths: [2, 3, 4],
            lpl_middle_blocks: 1,
            lpl_kernel: 3,
            cgl_widths: [2, 2, 3, 3],
            cgl_kernel: 3,
            head_widths: [2, 2, 2],
            head_kernel: 3,
            dense_units: 5,
            dropout: 0.5,
            cgl_input: CglInput::Mask,
            crf_resolution: CrfResolution::Bbox,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            "toy" => Ok(Self::toy()),
            _ => Err(Error::config(format!("unknown network preset `{name}` (expected paper|desk|toy)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in
            [("context_size", self.context_size), ("bbox_size", self.bbox_size), ("mask_size", self.mask_size)]
        {
            if v == 0 || v % 8 != 0 {
                problems.push(format!("{name} = {v} must be a positive multiple of 8"));
            }
        }
        for (name, k) in
            [("lpl_kernel", self.lpl_kernel), ("cgl_kernel", self.cgl_kernel), ("head_kernel", self.head_kernel)]
        {
            if k % 2 == 0 {
                problems.push(format!("{name} = {k} must be odd"));
            }
        }
        let widths = self.lpl_widths.iter().chain(&self.cgl_widths).chain(&self.head_widths);
        if widths.chain([&self.dense_units, &self.in_channels]).any(|&w| w == 0) {
            problems.push("channel widths, dense_units and in_channels must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout = {} must be in [0, 1)", self.dropout));
        }
        if self.crf_size() * self.crf_size() > MAX_CRF_PIXELS {
            problems.push(format!("dense CRF at {0}×{0} exceeds the {MAX_CRF_PIXELS}-pixel limit", self.crf_size()));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }

    /// Side length of the field the CRF runs on.
    pub fn crf_size(&self) -> usize {
        match self.crf_resolution {
            CrfResolution::Bbox => self.bbox_size,
            CrfResolution::Mask => self.mask_size,
        }
    }
}

/// Which parts of the network to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Parts {
    pub lpl: bool,
    pub segmentation: bool,
    pub cgl: bool,
    pub fused: bool,
}

impl Parts {
    pub const ALL: Parts = Parts { lpl: true, segmentation: true, cgl: true, fused: true };
    pub const LPL: Parts = Parts { lpl: true, segmentation: false, cgl: false, fused: false };
    pub const SEGMENTATION: Parts = Parts { lpl: false, segmentation: true, cgl: false, fused: false };
    pub const CGL: Parts = Parts { lpl: false, segmentation: true, cgl: true, fused: false };

    fn closed(self) -> Parts {
        let cgl = self.cgl || self.fused;
        Parts { lpl: self.lpl || self.fused, segmentation: self.segmentation || cgl, cgl, fused: self.fused }
    }
}

/// Zeroes one path's features before fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ablation {
    #[default]
    None,
    ZeroLpl,
    ZeroCgl,
}

/// Network inputs for a mini-batch.
#[derive(Debug, Clone)]
pub struct Batch<T: Scalar> {
    /// `B×C×S×S` context ROIs.
    pub context: Tensor<T>,
    /// `B×1×b×b` bounding-box ROIs.
    pub bbox: Tensor<T>,
    /// `B×1×M×M` reference masks.
    pub mask: Tensor<T>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Reference labels at CRF resolution: the mask itself, or a
    /// center-aligned nearest downsampling of it.
    pub fn seg_labels(&self, cfg: &NetConfig) -> Result<Tensor<T>> {
        resize_nearest_tensor(&self.mask, cfg.crf_size())
    }

    /// Intensities that drive the bilateral CRF kernel.
    pub fn crf_image(&self, cfg: &NetConfig) -> Result<Tensor<T>> {
        resize_nearest_tensor(&self.bbox, cfg.crf_size())
    }

    fn check(&self, cfg: &NetConfig) -> Result<()> {
        let b = self.len();
        let want = [
            ("context", &self.context, [b, cfg.in_channels, cfg.context_size, cfg.context_size]),
            ("bbox", &self.bbox, [b, 1, cfg.bbox_size, cfg.bbox_size]),
            ("mask", &self.mask, [b, 1, cfg.mask_size, cfg.mask_size]),
        ];
        for (name, t, shape) in want {
            if t.shape() != shape {
                return Err(Error::shape(format!("batch {name} is {:?}, network expects {shape:?}", t.shape())));
            }
        }
        if self.labels.iter().any(|&l| l > 1) {
            return Err(Error::Contract("class labels must be 0 or 1".into()));
        }
        Ok(())
    }
}

/// Center-aligned nearest resize of a `B×C×H×W` tensor to `size×size`.
pub fn resize_nearest_tensor<T: Scalar>(t: &Tensor<T>, size: usize) -> Result<Tensor<T>> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("resize expects B×C×H×W, got {s:?}")));
    }
    if s[2] == size && s[3] == size {
        return Ok(t.clone());
    }
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let src = |i: usize, n: usize| ((2 * i + 1) * n / (2 * size)).min(n - 1);
    let mut out = Vec::with_capacity(planes * size * size);
    for p in 0..planes {
        let plane = &t.data()[p * h * w..(p + 1) * h * w];
        for y in 0..size {
            let sy = src(y, h);
            for x in 0..size {
                out.push(plane[sy * w + src(x, w)]);
            }
        }
    }
    Tensor::new(&[s[0], s[1], size, size], out)
}

/// Recorded outputs of one forward pass.
pub struct Forward<'t, T: Scalar> {
    pub lpl_probs: Option<Var<'t, T>>,
    pub lpl_features: Option<Var<'t, T>>,
    /// `B×2×h×w` U-Net probabilities at CRF resolution.
    pub unet_probs: Option<Var<'t, T>>,
    /// `B×2×h×w` CRF-refined probabilities.
    pub crf_probs: Option<Var<'t, T>>,
    /// `B×2×M×M` refined probabilities at mask resolution.
    pub soft_mask: Option<Var<'t, T>>,
    pub cgl_probs: Option<Var<'t, T>>,
    pub cgl_features: Option<Var<'t, T>>,
    pub fused_probs: Option<Var<'t, T>>,
}

/// Detached values of a complete forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutputs<T: Scalar> {
    pub class_probs: Tensor<T>,
    pub lpl_probs: Tensor<T>,
    pub cgl_probs: Tensor<T>,
    pub soft_mask: SoftMask<T>,
    pub lpl_features: Tensor<T>,
    pub cgl_features: Tensor<T>,
}

/// Architecture description; parameters live in [`NetworkParams`].
#[derive(Debug, Clone)]
pub struct DualCoreNet {
    cfg: NetConfig,
    spec: ParamSpec,
    lpl_blocks: Vec<ResidualBlock>,
    lpl_dense: Dense,
    lpl_head: Dense,
    encoder: Vec<ResidualBlock>,
    decoder: Vec<ResidualBlock>,
    unet_out: Conv,
    head_blocks: Vec<ResidualBlock>,
    cgl_dense: Dense,
    cgl_head: Dense,
    fusion: Dense,
}

impl DualCoreNet {
    pub fn new(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut spec = ParamSpec::new();

        let mut b = ParamBuilder::new(&mut spec, "lpl");
        let [w1, w2, w3] = cfg.lpl_widths;
        let k = cfg.lpl_kernel;
        let mut lpl_blocks = vec![
            sconv_block(&mut b, "block1", cfg.in_channels, w1, k, true),
            sconv_block(&mut b, "block2", w1, w2, k, true),
            sconv_block(&mut b, "block3", w2, w3, k, true),
        ];
        for i in 0..cfg.lpl_middle_blocks {
            lpl_blocks.push(sconv_block(&mut b, &format!("middle{}", i + 1), w3, w3, k, false));
        }
        let lpl_dense = Dense::declare(&mut b, "dense", w3, cfg.dense_units, Activation::Relu);
        let lpl_head = Dense::declare(&mut b, "head", cfg.dense_units, 2, Activation::Identity);

        let mut b = ParamBuilder::new(&mut spec, "cgl.unet");
        let c = cfg.cgl_widths;
        let k = cfg.cgl_kernel;
        let encoder = vec![
            unet_conv_block(&mut b, "down1", 1, c[0], k),
            unet_conv_block(&mut b, "down2", c[0], c[1], k),
            unet_conv_block(&mut b, "down3", c[1], c[2], k),
            unet_conv_block(&mut b, "bottleneck", c[2], c[3], k),
        ];
        let decoder = vec![
            unet_conv_block(&mut b, "up1", c[3] + c[2], c[2], k),
            unet_conv_block(&mut b, "up2", c[2] + c[1], c[1], k),
            unet_conv_block(&mut b, "up3", c[1] + c[0], c[0], k),
        ];
        let unet_out = Conv::declare(&mut b, "out", c[0], 2, 1, 1);

        let mut b = ParamBuilder::new(&mut spec, "cgl.head");
        let h = cfg.head_widths;
        let k = cfg.head_kernel;
        let head_blocks = vec![
            sconv_block(&mut b, "block1", cfg.cgl_input.channels(), h[0], k, true),
            sconv_block(&mut b, "block2", h[0], h[1], k, true),
            sconv_block(&mut b, "block3", h[1], h[2], k, true),
        ];
        let cgl_dense = Dense::declare(&mut b, "dense", h[2], cfg.dense_units, Activation::Relu);
        let cgl_head = Dense::declare(&mut b, "out", cfg.dense_units, 2, Activation::Identity);

        let mut b = ParamBuilder::new(&mut spec, "fusion");
        let fusion = Dense::declare(&mut b, "out", 2 * cfg.dense_units, 2, Activation::Identity);

        Ok(DualCoreNet {
            cfg,
            spec,
            lpl_blocks,
            lpl_dense,
            lpl_head,
            encoder,
            decoder,
            unet_out,
            head_blocks,
            cgl_dense,
            cgl_head,
            fusion,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn spec(&self) -> &ParamSpec {
        &self.spec
    }

    pub fn init_params<T: Scalar>(&self, rng: &mut Rng) -> NetworkParams<T> {
        NetworkParams::init(&self.spec, rng)
    }

    /// LPL path: `(B×2 probabilities, B×D features)`.
    pub fn lpl_forward<'t, T: Scalar>(
        &self,
        context: Var<'t, T>,
        p: &BoundParams<'t, T>,
        rng: Option<&mut Rng>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let mut x = context;
        for block in &self.lpl_blocks {
            x = block.forward(x, p)?;
        }
        let mut f = self.lpl_dense.forward(x.mean_axes(&[2, 3])?, p)?;
        if let Some(rng) = rng {
            f = dropout(f, self.cfg.dropout, rng)?;
        }
        let probs = self.lpl_head.forward(f, p)?.softmax(1)?;
        Ok((probs, f))
    }

    /// Residual U-Net: `B×2×b×b` per-pixel probabilities.
    pub fn unet_forward<'t, T: Scalar>(&self, bbox: Var<'t, T>, p: &BoundParams<'t, T>) -> Result<Var<'t, T>> {
        let (s1, d1) = unet_down(bbox, &self.encoder[0], p)?;
        let (s2, d2) = unet_down(d1, &self.encoder[1], p)?;
        let (s3, d3) = unet_down(d2, &self.encoder[2], p)?;
        let bottom = self.encoder[3].forward(d3, p)?;
        let u = unet_up(bottom, s3, &self.decoder[0], p)?;
        let u = unet_up(u, s2, &self.decoder[1], p)?;
        let u = unet_up(u, s1, &self.decoder[2], p)?;
        self.unet_out.forward(u, p)?.softmax(1)
    }

    /// U-Net, CRF refinement and resize: `(unet, crf, soft mask)`
    /// probabilities, the first two at CRF resolution.
    pub fn segment<'t, T: Scalar>(
        &self,
        bbox: Var<'t, T>,
        crf_image: &Tensor<T>,
        crf: &CrfConfig,
        p: &BoundParams<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>, Var<'t, T>)> {
        let n = self.cfg.crf_size();
        let mut unet = self.unet_forward(bbox, p)?;
        if self.cfg.crf_resolution == CrfResolution::Mask {
            unet = unet.resize_nearest(n, n)?;
        }
        let refined = mean_field(unet, crf_image, &crf.scaled_for(n))?;
        let m = self.cfg.mask_size;
        let soft = if n == m { refined } else { refined.resize_nearest(m, m)? };
        Ok((unet, refined, soft))
    }

    /// CGL classifier over the soft mask.
    pub fn cgl_classify<'t, T: Scalar>(
        &self,
        soft_mask: Var<'t, T>,
        bbox: Var<'t, T>,
        p: &BoundParams<'t, T>,
        rng: Option<&mut Rng>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let s = soft_mask.shape();
        let m = self.cfg.mask_size;
        let fg = soft_mask
            .gather((0..s[0]).flat_map(|n| ((2 * n + 1) * m * m)..((2 * n + 2) * m * m)).collect(), &[s[0], 1, m, m])?;
        let image = || -> Result<Var<'t, T>> {
            let img = bbox.resize_nearest(m, m)?;
            fg.mul(img)
        };
        let input = match self.cfg.cgl_input {
            CglInput::Mask => fg,
            CglInput::Gated => image()?,
            CglInput::Both => fg.tape().concat(&[fg, image()?], 1)?,
        };
        let mut x = input;
        for block in &self.head_blocks {
            x = block.forward(x, p)?;
        }
        let mut f = self.cgl_dense.forward(x.mean_axes(&[2, 3])?, p)?;
        if let Some(rng) = rng {
            f = dropout(f, self.cfg.dropout, rng)?;
        }
        let probs = self.cgl_head.forward(f, p)?.softmax(1)?;
        Ok((probs, f))
    }

    /// Fused classifier over concatenated path features.
    pub fn fuse<'t, T: Scalar>(
        &self,
        lpl_features: Var<'t, T>,
        cgl_features: Var<'t, T>,
        ablation: Ablation,
        p: &BoundParams<'t, T>,
    ) -> Result<Var<'t, T>> {
        let tape = lpl_features.tape();
        let zero = |v: Var<'t, T>| v.mul(tape.constant(Tensor::scalar(T::zero())));
        let (l, c) = match ablation {
            Ablation::None => (lpl_features, cgl_features),
            Ablation::ZeroLpl => (zero(lpl_features)?, cgl_features),
            Ablation::ZeroCgl => (lpl_features, zero(cgl_features)?),
        };
        self.fusion.forward(tape.concat(&[l, c], 1)?, p)?.softmax(1)
    }

    /// Evaluates the requested parts on `tape`. Dropout is active iff `rng`
    /// is given.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        batch: &Batch<T>,
        p: &BoundParams<'t, T>,
        crf: &CrfConfig,
        parts: Parts,
        ablation: Ablation,
        mut rng: Option<&mut Rng>,
    ) -> Result<Forward<'t, T>> {
        batch.check(&self.cfg)?;
        let parts = parts.closed();
        let mut out = Forward {
            lpl_probs: None,
            lpl_features: None,
            unet_probs: None,
            crf_probs: None,
            soft_mask: None,
            cgl_probs: None,
            cgl_features: None,
            fused_probs: None,
        };
        if parts.lpl {
            let (probs, f) = self.lpl_forward(tape.constant(batch.context.clone()), p, rng.as_deref_mut())?;
            out.lpl_probs = Some(probs);
            out.lpl_features = Some(f);
        }
        if parts.segmentation {
            let bbox = tape.constant(batch.bbox.clone());
            let (unet, refined, soft) = self.segment(bbox, &batch.crf_image(&self.cfg)?, crf, p)?;
            out.unet_probs = Some(unet);
            out.crf_probs = Some(refined);
            out.soft_mask = Some(soft);
            if parts.cgl {
                let (probs, f) = self.cgl_classify(soft, bbox, p, rng)?;
                out.cgl_probs = Some(probs);
                out.cgl_features = Some(f);
            }
        }
        if parts.fused {
            let (l, c) = (out.lpl_features.expect("lpl evaluated"), out.cgl_features.expect("cgl evaluated"));
            out.fused_probs = Some(self.fuse(l, c, ablation, p)?);
        }
        Ok(out)
    }

    /// Deterministic evaluation of every output.
    pub fn infer<T: Scalar>(
        &self,
        params: &NetworkParams<T>,
        batch: &Batch<T>,
        crf: &CrfConfig,
        ablation: Ablation,
    ) -> Result<ForwardOutputs<T>> {
        let tape = Tape::new();
        let p = params.bind(&tape, |_| false);
        let f = self.forward(&tape, batch, &p, crf, Parts::ALL, ablation, None)?;
        let v = |x: Option<Var<'_, T>>| (*x.expect("all parts evaluated").value()).clone();
        Ok(ForwardOutputs {
            class_probs: v(f.fused_probs),
            lpl_probs: v(f.lpl_probs),
            cgl_probs: v(f.cgl_probs),
            soft_mask: SoftMask::from_nchw(&v(f.soft_mask))?,
            lpl_features: v(f.lpl_features),
            cgl_features: v(f.cgl_features),
        })
    }

    /// Symbolic `(stage, N×C×H×W)` trace of both paths for batch 1.
    pub fn shape_trace(&self) -> Result<Vec<(String, [usize; 4])>> {
        let cfg = &self.cfg;
        let mut trace = Vec::new();
        let mut s = [1, cfg.in_channels, cfg.context_size, cfg.context_size];
        trace.push(("lpl.input".to_string(), s));
        for (i, block) in self.lpl_blocks.iter().enumerate() {
            s = block.out_shape(s)?;
            let name = if i < 3 { format!("lpl.block{}", i + 1) } else { format!("lpl.middle{}", i - 2) };
            trace.push((name, s));
        }
        trace.push(("lpl.features".into(), [1, self.lpl_dense.outputs, 1, 1]));
        trace.push(("lpl.probs".into(), [1, self.lpl_head.outputs, 1, 1]));

        let mut s = [1, 1, cfg.bbox_size, cfg.bbox_size];
        trace.push(("cgl.input".into(), s));
        let mut skips = Vec::new();
        for (i, block) in self.encoder.iter().enumerate() {
            if i > 0 {
                s = maxpool_shape(s)?;
            }
            s = block.out_shape(s)?;
            trace.push((format!("cgl.encoder{}", i + 1), s));
            skips.push(s);
        }
        for (i, block) in self.decoder.iter().enumerate() {
            let skip = skips[2 - i];
            let up = [s[0], s[1] + skip[1], s[2] * 2, s[3] * 2];
            if up[2..] != skip[2..] {
                return Err(Error::shape(format!("decoder {up:?} does not meet skip {skip:?}")));
            }
            s = block.out_shape(up)?;
            trace.push((format!("cgl.decoder{}", i + 1), s));
        }
        s = self.unet_out.out_shape(s)?;
        trace.push(("cgl.unary".into(), s));
        trace.push(("cgl.soft_mask".into(), [1, 2, cfg.mask_size, cfg.mask_size]));
        let mut s = [1, cfg.cgl_input.channels(), cfg.mask_size, cfg.mask_size];
        for (i, block) in self.head_blocks.iter().enumerate() {
            s = block.out_shape(s)?;
            trace.push((format!("cgl.head{}", i + 1), s));
        }
        trace.push(("cgl.features".into(), [1, self.cgl_dense.outputs, 1, 1]));
        trace.push(("cgl.probs".into(), [1, self.cgl_head.outputs, 1, 1]));
        trace.push(("fusion.input".into(), [1, self.fusion.inputs, 1, 1]));
        trace.push(("fusion.probs".into(), [1, self.fusion.outputs, 1, 1]));
        Ok(trace)
    }
}

fn maxpool_shape(s: [usize; 4]) -> Result<[usize; 4]> {
    if !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
        return Err(Error::shape(format!("cannot pool {}x{} by 2", s[2], s[3])));
    }
    Ok([s[0], s[1], s[2] / 2, s[3] / 2])
}

/// Mean over the batch of `−ln p(true class)`, probabilities clamped to
/// `[ε, 1 − ε]`. Serves as the LPL, CGL and joint classification loss.
pub fn class_loss<'t, T: Scalar>(probs: Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    let s = probs.shape();
    if s.len() != 2 || s[1] != 2 || s[0] != labels.len() {
        return Err(Error::shape(format!("class loss: probs {s:?} for {} labels", labels.len())));
    }
    let mut onehot = vec![T::zero(); 2 * labels.len()];
    for (i, &l) in labels.iter().enumerate() {
        if l > 1 {
            return Err(Error::Contract(format!("class label {l} is not 0 or 1")));
        }
        onehot[2 * i + l] = T::one();
    }
    let onehot = probs.tape().constant(Tensor::new(&s, onehot)?);
    Ok(onehot.mul(probs.ln_clamped(PROB_EPS, 1.0 - PROB_EPS))?.sum_all().scale(-1.0 / labels.len() as f64))
}

/// Segmentation loss of a forward pass that evaluated the CGL segmentation
/// stage.
pub fn forward_segmentation_loss<'t, T: Scalar>(
    net: &DualCoreNet,
    f: &Forward<'t, T>,
    batch: &Batch<T>,
    crf: &CrfConfig,
    lambda: f64,
    beta: f64,
) -> Result<Var<'t, T>> {
    let cfg = net.config();
    let (unet, refined) = match (f.unet_probs, f.crf_probs) {
        (Some(u), Some(c)) => (u, c),
        _ => return Err(Error::Contract("segmentation stage was not evaluated".into())),
    };
    segmentation_loss(
        unet,
        refined,
        &batch.seg_labels(cfg)?,
        &batch.crf_image(cfg)?,
        &crf.scaled_for(cfg.crf_size()),
        lambda,
        beta,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_batch(cfg: &NetConfig, n: usize, seed: u64) -> Batch<f64> {
        let mut rng = Rng::new(seed);
        let mut gen = |shape: &[usize]| {
            let k: usize = shape.iter().product();
            Tensor::new(shape, (0..k).map(|_| rng.uniform()).collect()).unwrap()
        };
        let context = gen(&[n, cfg.in_channels, cfg.context_size, cfg.context_size]);
        let bbox = gen(&[n, 1, cfg.bbox_size, cfg.bbox_size]);
        let mask = gen(&[n, 1, cfg.mask_size, cfg.mask_size]).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        Batch {
            context,
            bbox,
            mask,
            labels: (0..n).map(|i| i % 2).collect(),
            ids: (0..n).map(|i| i.to_string()).collect(),
        }
    }

    #[test]
    fn desk_trace_matches_real_forward() {
        let net = DualCoreNet::new(NetConfig::desk()).unwrap();
        let trace = net.shape_trace().unwrap();
        let get = |k: &str| trace.iter().find(|(n, _)| n == k).unwrap().1;
        assert_eq!(get("lpl.block1"), [1, 8, 16, 16]);
        assert_eq!(get("lpl.middle8"), [1, 45, 4, 4]);
        assert_eq!(get("cgl.encoder4"), [1, 32, 2, 2]);
        assert_eq!(get("cgl.decoder3"), [1, 4, 16, 16]);

        let params = net.init_params::<f64>(&mut Rng::new(1));
        let batch = toy_batch(net.config(), 2, 3);
        let out = net.infer(&params, &batch, &CrfConfig::default(), Ablation::None).unwrap();
        assert_eq!(out.class_probs.shape(), [2, 2]);
        assert_eq!(out.soft_mask.tensor().shape(), [2, 32, 32, 2]);
        assert_eq!(out.lpl_features.shape(), [2, 128]);
    }

    #[test]
    fn class_loss_examples() {
        let tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::from_f64(&[2, 2], &[0.5, 0.5, 0.5, 0.5]).unwrap());
        let l = class_loss(p, &[0, 1]).unwrap().value().item();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let sure = tape.constant(Tensor::from_f64(&[1, 2], &[0.0, 1.0]).unwrap());
        assert!(class_loss(sure, &[1]).unwrap().value().item() < 1e-6);
        assert!(class_loss(sure, &[2]).is_err());
    }

    #[test]
    fn infer_is_deterministic_and_normalized() {
        let net = DualCoreNet::new(NetConfig::toy()).unwrap();
        let params = net.init_params::<f64>(&mut Rng::new(4));
        let batch = toy_batch(net.config(), 3, 5);
        let a = net.infer(&params, &batch, &CrfConfig::default(), Ablation::None).unwrap();
        let b = net.infer(&params, &batch, &CrfConfig::default(), Ablation::None).unwrap();
        assert!(a.class_probs.bit_eq(&b.class_probs) && a.soft_mask.tensor().bit_eq(b.soft_mask.tensor()));
        for row in a.class_probs.data().chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_wrong_input_size() {
        let net = DualCoreNet::new(NetConfig::toy()).unwrap();
        let params = net.init_params::<f64>(&mut Rng::new(4));
        let mut batch = toy_batch(net.config(), 1, 5);
        batch.context = Tensor::zeros(&[1, 3, 24, 24]);
        assert!(matches!(net.infer(&params, &batch, &CrfConfig::default(), Ablation::None), Err(Error::Shape(_))));
    }

    #[test]
    fn validate_reports_every_problem() {
        let mut cfg = NetConfig::desk();
        cfg.bbox_size = 12;
        cfg.head_kernel = 4;
        let Err(Error::Config(msg)) = cfg.validate() else { panic!() };
        assert!(msg.contains("bbox_size") && msg.contains("head_kernel"));
    }

    #[test]
    fn resize_nearest_center_aligned() {
        let t = Tensor::<f64>::from_f64(&[1, 1, 4, 4], &(0..16).map(f64::from).collect::<Vec<_>>()).unwrap();
        let r = resize_nearest_tensor(&t, 2).unwrap();
        assert_eq!(r.data(), [5.0, 7.0, 13.0, 15.0]);
    }
}
