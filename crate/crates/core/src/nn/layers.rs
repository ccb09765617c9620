//! Layer blocks: convolutions, separable convolutions, residual wrappers,
//! U-Net down/up blocks and dense heads.
//!
//! Blocks are plain descriptions holding [`ParamId`]s; they are applied to
//! [`BoundParams`] so the same architecture can run on any tape.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::nn::params::{BoundParams, ParamBuilder, ParamId};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    pub fn apply<'t, T: Scalar>(self, x: Var<'t, T>) -> Var<'t, T> {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.relu(),
        }
    }
}

/// Depthwise (`C×1×K×K`) then pointwise (`O×C×1×1`) convolution.
pub fn depthwise_separable_conv<'t, T: Scalar>(
    input: Var<'t, T>,
    depth_kernel: Var<'t, T>,
    point_kernel: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let (s, p) = (input.shape(), point_kernel.shape());
    if p.len() != 4 || p[1] != s[1] || p[2] != 1 || p[3] != 1 {
        return Err(Error::shape(format!("pointwise kernel {p:?} does not match {} input channels", s[1])));
    }
    input.depthwise_conv2d(depth_kernel)?.conv2d(point_kernel, 1, Padding::Same)
}

/// Convolution with bias: `O×I×K×K` weights.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv {
    pub fn declare(
        b: &mut ParamBuilder<'_>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let mut s = b.scope(name);
        Conv {
            weight: s.he("weight", &[out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel),
            bias: s.zeros("bias", &[out_ch, 1, 1]),
            in_ch,
            out_ch,
            kernel,
            stride,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, x: Var<'t, T>, p: &BoundParams<'t, T>) -> Result<Var<'t, T>> {
        x.conv2d(p.var(self.weight), self.stride, Padding::Same)?.add(p.var(self.bias))
    }

    pub fn out_shape(&self, s: [usize; 4]) -> Result<[usize; 4]> {
        if s[1] != self.in_ch {
            return Err(Error::shape(format!("conv expects {} channels, got {}", self.in_ch, s[1])));
        }
        Ok([s[0], self.out_ch, (s[2] - 1) / self.stride + 1, (s[3] - 1) / self.stride + 1])
    }
}

/// Separable convolution with pointwise bias.
#[derive(Debug, Clone)]
pub struct SepConv {
    pub depth: ParamId,
    pub point: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl SepConv {
    pub fn declare(b: &mut ParamBuilder<'_>, name: &str, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self::declare_inner(b, name, in_ch, out_ch, kernel, false)
    }

    /// Same, with the pointwise kernel starting at zero so the layer
    /// initially outputs zeros.
    pub fn declare_zeroed(b: &mut ParamBuilder<'_>, name: &str, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self::declare_inner(b, name, in_ch, out_ch, kernel, true)
    }

    fn declare_inner(
        b: &mut ParamBuilder<'_>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        zero_point: bool,
    ) -> Self {
        let mut s = b.scope(name);
        let depth = s.he("depth", &[in_ch, 1, kernel, kernel], kernel * kernel);
        let point = if zero_point {
            s.zeros("point", &[out_ch, in_ch, 1, 1])
        } else {
            s.he("point", &[out_ch, in_ch, 1, 1], in_ch)
        };
        SepConv { depth, point, bias: s.zeros("bias", &[out_ch, 1, 1]), in_ch, out_ch, kernel }
    }

    pub fn forward<'t, T: Scalar>(&self, x: Var<'t, T>, p: &BoundParams<'t, T>) -> Result<Var<'t, T>> {
        depthwise_separable_conv(x, p.var(self.depth), p.var(self.point))?.add(p.var(self.bias))
    }

    pub fn out_shape(&self, s: [usize; 4]) -> Result<[usize; 4]> {
        if s[1] != self.in_ch {
            return Err(Error::shape(format!("sep-conv expects {} channels, got {}", self.in_ch, s[1])));
        }
        Ok([s[0], self.out_ch, s[2], s[3]])
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv),
    SepConv(SepConv),
    Act(Activation),
    MaxPool(usize),
}

impl Layer {
    pub fn forward<'t, T: Scalar>(&self, x: Var<'t, T>, p: &BoundParams<'t, T>) -> Result<Var<'t, T>> {
        match self {
            Layer::Conv(c) => c.forward(x, p),
            Layer::SepConv(c) => c.forward(x, p),
            Layer::Act(a) => Ok(a.apply(x)),
            Layer::MaxPool(f) => x.maxpool2d(*f),
        }
    }

    pub fn out_shape(&self, s: [usize; 4]) -> Result<[usize; 4]> {
        match self {
            Layer::Conv(c) => c.out_shape(s),
            Layer::SepConv(c) => c.out_shape(s),
            Layer::Act(_) => Ok(s),
            Layer::MaxPool(f) => {
                if !s[2].is_multiple_of(*f) || !s[3].is_multiple_of(*f) {
                    return Err(Error::shape(format!("pool {f} on {}x{}", s[2], s[3])));
                }
                Ok([s[0], s[1], s[2] / f, s[3] / f])
            }
        }
    }
}

/// `H(x) = F(x) + W∗x`: the inner stack learns the residual `F`, the
/// optional 1×1 projection `W` matches dimensions.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub inner: Vec<Layer>,
    pub projection: Option<Conv>,
    /// Applied to the projected shortcut before the sum.
    pub projection_activation: Activation,
    /// Applied after the sum.
    pub post: Activation,
}

impl ResidualBlock {
    pub fn forward<'t, T: Scalar>(&self, x: Var<'t, T>, p: &BoundParams<'t, T>) -> Result<Var<'t, T>> {
        let mut h = x;
        for layer in &self.inner {
            h = layer.forward(h, p)?;
        }
        let shortcut = match &self.projection {
            Some(proj) => self.projection_activation.apply(proj.forward(x, p)?),
            None => x,
        };
        if h.shape() != shortcut.shape() {
            return Err(Error::shape(format!(
                "residual branch {:?} cannot be added to shortcut {:?}",
                h.shape(),
                shortcut.shape()
            )));
        }
        Ok(self.post.apply(h.add(shortcut)?))
    }

    pub fn out_shape(&self, s: [usize; 4]) -> Result<[usize; 4]> {
        let mut h = s;
        for layer in &self.inner {
            h = layer.out_shape(h)?;
        }
        let shortcut = match &self.projection {
            Some(proj) => proj.out_shape(s)?,
            None => s,
        };
        if h != shortcut {
            return Err(Error::shape(format!("unprojectable residual: {h:?} vs shortcut {shortcut:?}")));
        }
        Ok(h)
    }
}

/// Separable-conv residual block: `[sconv → ReLU → sconv (→ maxpool 2)]`
/// with a ReLU after the sum. Pooling blocks, and blocks that change the
/// channel count, get a strided 1×1 projection shortcut. The second
/// pointwise kernel starts at zero, so a fresh block reduces to its
/// shortcut and deep stacks do not blow up activations at initialization.
pub fn sconv_block(
    b: &mut ParamBuilder<'_>,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    pool: bool,
) -> ResidualBlock {
    let mut s = b.scope(name);
    let mut inner = vec![
        Layer::SepConv(SepConv::declare(&mut s, "sconv1", in_ch, out_ch, kernel)),
        Layer::Act(Activation::Relu),
        Layer::SepConv(SepConv::declare_zeroed(&mut s, "sconv2", out_ch, out_ch, kernel)),
    ];
    if pool {
        inner.push(Layer::MaxPool(2));
    }
    let projection =
        (pool || in_ch != out_ch).then(|| Conv::declare(&mut s, "proj", in_ch, out_ch, 1, if pool { 2 } else { 1 }));
    ResidualBlock { inner, projection, projection_activation: Activation::Identity, post: Activation::Relu }
}

/// U-Net residual conv block: `σ(conv(σ(conv x))) + σ(W∗x)`, with the
/// shortcut projection present only when channel counts differ.
pub fn unet_conv_block(
    b: &mut ParamBuilder<'_>,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
) -> ResidualBlock {
    let mut s = b.scope(name);
    let inner = vec![
        Layer::Conv(Conv::declare(&mut s, "conv1", in_ch, out_ch, kernel, 1)),
        Layer::Act(Activation::Relu),
        Layer::Conv(Conv::declare(&mut s, "conv2", out_ch, out_ch, kernel, 1)),
        Layer::Act(Activation::Relu),
    ];
    let projection = (in_ch != out_ch).then(|| Conv::declare(&mut s, "proj", in_ch, out_ch, 1, 1));
    ResidualBlock { inner, projection, projection_activation: Activation::Relu, post: Activation::Identity }
}

/// Encoder stage: returns the block output at input resolution (the skip)
/// and its 2× max-pooled version.
pub fn unet_down<'t, T: Scalar>(
    x: Var<'t, T>,
    block: &ResidualBlock,
    p: &BoundParams<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let s = x.shape();
    if !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
        return Err(Error::shape(format!("unet_down needs even spatial extents, got {}x{}", s[2], s[3])));
    }
    let skip = block.forward(x, p)?;
    let down = skip.maxpool2d(2)?;
    Ok((skip, down))
}

/// Decoder stage: upsample by 2, concatenate the skip on channels, then a
/// residual conv block.
pub fn unet_up<'t, T: Scalar>(
    down: Var<'t, T>,
    skip: Var<'t, T>,
    block: &ResidualBlock,
    p: &BoundParams<'t, T>,
) -> Result<Var<'t, T>> {
    let up = down.upsample2d(2)?;
    let (us, ss) = (up.shape(), skip.shape());
    if us[2..] != ss[2..] {
        return Err(Error::shape(format!("upsampled {}x{} does not match skip {}x{}", us[2], us[3], ss[2], ss[3])));
    }
    let cat = down.tape().concat(&[up, skip], 1)?;
    block.forward(cat, p)
}

/// Fully connected layer: `act(x·W + b)` with `W: in×out`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl Dense {
    pub fn declare(
        b: &mut ParamBuilder<'_>,
        name: &str,
        inputs: usize,
        outputs: usize,
        activation: Activation,
    ) -> Self {
        let mut s = b.scope(name);
        Dense {
            weight: s.he("weight", &[inputs, outputs], inputs),
            bias: s.zeros("bias", &[1, outputs]),
            inputs,
            outputs,
            activation,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, x: Var<'t, T>, p: &BoundParams<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        if s.len() != 2 || s[1] != self.inputs {
            return Err(Error::shape(format!("dense expects (batch, {}), got {s:?}", self.inputs)));
        }
        Ok(self.activation.apply(x.matmul(p.var(self.weight))?.add(p.var(self.bias))?))
    }
}

/// Inverted dropout: keeps each unit with probability `1 − rate` and scales
/// kept units by `1 / (1 − rate)`.
pub fn dropout<'t, T: Scalar>(x: Var<'t, T>, rate: f64, rng: &mut Rng) -> Result<Var<'t, T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let scale = T::c(1.0 / keep);
    let shape = x.shape();
    let n: usize = shape.iter().product();
    let mask: Vec<T> = (0..n).map(|_| if rng.uniform() < keep { scale } else { T::zero() }).collect();
    let mask = x.tape().constant(Tensor::new(&shape, mask)?);
    x.mul(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::gradcheck::{finite_diff_grad, max_relative_error};
    use crate::nn::params::{NetworkParams, ParamSpec};

    fn zero_params(spec: &ParamSpec) -> NetworkParams<f64> {
        let mut p = NetworkParams::<f64>::init(spec, &mut Rng::new(1));
        for (_, t) in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        p
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = Rng::new(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_inner_identity_shortcut_is_identity() {
        let mut spec = ParamSpec::new();
        let mut b = ParamBuilder::new(&mut spec, "r");
        let conv = Conv::declare(&mut b, "c", 3, 3, 3, 1);
        let block = ResidualBlock {
            inner: vec![Layer::Conv(conv)],
            projection: None,
            projection_activation: Activation::Identity,
            post: Activation::Identity,
        };
        let p = zero_params(&spec);
        let tape = Tape::new();
        let bound = p.bind(&tape, |_| true);
        let x = tape.constant(random(&[2, 3, 5, 5], 4));
        let y = block.forward(x, &bound).unwrap();
        assert!(y.value().bit_eq(&x.value()));
    }

    #[test]
    fn sconv_block_shapes_and_projection_rule() {
        let mut spec = ParamSpec::new();
        let mut b = ParamBuilder::new(&mut spec, "lpl");
        let down = sconv_block(&mut b, "block3", 256, 728, 3, true);
        let mid = sconv_block(&mut b, "block4", 728, 728, 3, false);
        assert!(down.projection.as_ref().is_some_and(|c| c.stride == 2 && c.kernel == 1));
        assert!(mid.projection.is_none());
        assert_eq!(down.out_shape([1, 256, 56, 56]).unwrap(), [1, 728, 28, 28]);
        assert_eq!(mid.out_shape([1, 728, 28, 28]).unwrap(), [1, 728, 28, 28]);
        let names: Vec<_> = spec.decls().iter().map(|d| d.name.clone()).collect();
        assert_eq!(
            &names[..7],
            [
                "lpl.block3.sconv1.depth",
                "lpl.block3.sconv1.point",
                "lpl.block3.sconv1.bias",
                "lpl.block3.sconv2.depth",
                "lpl.block3.sconv2.point",
                "lpl.block3.sconv2.bias",
                "lpl.block3.proj.weight"
            ]
        );
    }

    #[test]
    fn zeroed_non_pooling_sconv_block_passes_nonnegative_input() {
        let mut spec = ParamSpec::new();
        let block = sconv_block(&mut ParamBuilder::new(&mut spec, "b"), "blk", 4, 4, 3, false);
        let p = zero_params(&spec);
        let tape = Tape::new();
        let bound = p.bind(&tape, |_| true);
        let x = tape.constant(random(&[1, 4, 6, 6], 2).map(f64::abs));
        assert!(block.forward(x, &bound).unwrap().value().bit_eq(&x.value()));
    }

    #[test]
    fn residual_gradient_is_inner_plus_one() {
        // F(x) = ReLU-free conv, identity shortcut: d/dx sum(F(x) + x) = dF + 1
        let mut spec = ParamSpec::new();
        let mut b = ParamBuilder::new(&mut spec, "r");
        let conv = Conv::declare(&mut b, "c", 2, 2, 3, 1);
        let block = ResidualBlock {
            inner: vec![Layer::Conv(conv.clone())],
            projection: None,
            projection_activation: Activation::Identity,
            post: Activation::Identity,
        };
        let params = NetworkParams::<f64>::init(&spec, &mut Rng::new(8));
        let x0 = random(&[1, 2, 4, 4], 9);
        let run = |x: &Tensor<f64>, residual: bool| -> (f64, Option<Tensor<f64>>) {
            let tape = Tape::new();
            let bound = params.bind(&tape, |_| false);
            let xv = tape.param(x.clone());
            let out = if residual { block.forward(xv, &bound).unwrap() } else { conv.forward(xv, &bound).unwrap() };
            let loss = out.sum_all();
            let g = tape.backward(loss).unwrap();
            (loss.value().item(), g.get(xv).cloned())
        };
        let (_, g_res) = run(&x0, true);
        let (_, g_inner) = run(&x0, false);
        let g_res = g_res.unwrap();
        let expected = g_inner.unwrap().map(|v| v + 1.0);
        assert!(max_relative_error(&g_res, &expected, 1e-9) < 1e-12);
        let numeric = finite_diff_grad(|x| run(x, true).0, &x0, 1e-5);
        assert!(max_relative_error(&g_res, &numeric, 1e-6) < 1e-6);
    }

    #[test]
    fn unet_blocks_trace_and_errors() {
        let mut spec = ParamSpec::new();
        let mut b = ParamBuilder::new(&mut spec, "u");
        let enc = unet_conv_block(&mut b, "enc", 1, 2, 3);
        let dec = unet_conv_block(&mut b, "dec", 4, 2, 3);
        let p = NetworkParams::<f64>::init(&spec, &mut Rng::new(3));
        let tape = Tape::new();
        let bound = p.bind(&tape, |_| true);
        let x = tape.constant(random(&[1, 1, 8, 8], 1));
        let (skip, down) = unet_down(x, &enc, &bound).unwrap();
        assert_eq!(skip.shape(), vec![1, 2, 8, 8]);
        assert_eq!(down.shape(), vec![1, 2, 4, 4]);
        let up = unet_up(down, skip, &dec, &bound).unwrap();
        assert_eq!(up.shape(), vec![1, 2, 8, 8]);

        let odd = tape.constant(random(&[1, 1, 7, 8], 1));
        assert!(matches!(unet_down(odd, &enc, &bound), Err(Error::Shape(_))));
        let wrong_skip = tape.constant(random(&[1, 2, 6, 6], 1));
        assert!(matches!(unet_up(down, wrong_skip, &dec, &bound), Err(Error::Shape(_))));
    }

    #[test]
    fn unet_up_with_zero_everything_is_zero() {
        let mut spec = ParamSpec::new();
        let dec = unet_conv_block(&mut ParamBuilder::new(&mut spec, "u"), "dec", 6, 2, 3);
        let p = zero_params(&spec);
        let tape = Tape::new();
        let bound = p.bind(&tape, |_| true);
        let down = tape.constant(Tensor::zeros(&[1, 4, 2, 2]));
        let skip = tape.constant(random(&[1, 2, 4, 4], 5));
        let out = unet_up(down, skip, &dec, &bound).unwrap();
        assert!(out.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_examples() {
        let mut spec = ParamSpec::new();
        let mut b = ParamBuilder::new(&mut spec, "d");
        let relu = Dense::declare(&mut b, "a", 4, 4, Activation::Relu);
        let ident = Dense::declare(&mut b, "b", 4, 4, Activation::Identity);
        let head = Dense::declare(&mut b, "head", 2048, 2, Activation::Identity);
        let mut p = zero_params(&spec);
        *p.tensor_mut(ident.weight) = Tensor::eye(4);
        let tape = Tape::new();
        let bound = p.bind(&tape, |_| true);
        let x = tape.constant(random(&[3, 4], 6));
        assert!(relu.forward(x, &bound).unwrap().value().data().iter().all(|&v| v == 0.0));
        assert!(ident.forward(x, &bound).unwrap().value().bit_eq(&x.value()));
        let wide = tape.constant(random(&[5, 2048], 6));
        assert_eq!(head.forward(wide, &bound).unwrap().shape(), vec![5, 2]);
        assert!(matches!(head.forward(x, &bound), Err(Error::Shape(_))));
    }

    #[test]
    fn dropout_is_inverted_and_seeded() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1, 1000]));
        let a = dropout(x, 0.5, &mut Rng::new(3)).unwrap().value();
        let b = dropout(x, 0.5, &mut Rng::new(3)).unwrap().value();
        assert!(a.bit_eq(&b));
        assert!(a.data().iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = a.data().iter().filter(|&&v| v > 0.0).count();
        assert!((400..600).contains(&kept));
    }
}
