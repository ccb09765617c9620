//! Property suites behind `dcn verify`: reverse-mode gradients against
//! central differences, mean-field inference against a dense all-pairs
//! loop, and the metrics against their oracles. Each check reports one
//! `PASS|FAIL <module>.<property> <detail>` line.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::crf::{
    mean_field, mean_field_infer, mean_field_observed, segmentation_loss, CrfConfig, UnaryField, PROB_EPS,
};
use crate::error::{Error, Result};
use crate::gradcheck::relative_error;
use crate::kernels::Padding;
use crate::metrics::{dice, mann_whitney_auc, roc_auc};
use crate::net::{class_loss, forward_segmentation_loss, Ablation, Batch, DualCoreNet, NetConfig, Parts};
use crate::nn::layers::{
    depthwise_separable_conv, dropout, sconv_block, unet_conv_block, unet_down, unet_up, Activation, Conv, Dense,
    SepConv,
};
use crate::nn::{BoundParams, NetworkParams, ParamBuilder, ParamSpec};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Largest accepted relative error between analytic and numeric gradients.
pub const GRAD_TOLERANCE: f64 = 1e-3;
const FD_EPSILON: f64 = 1e-6;
/// Gradients below this magnitude are compared absolutely.
const GRAD_FLOOR: f64 = 1e-5;
pub const CRF_TOLERANCE: f64 = 1e-6;
pub const NORMALIZATION_TOLERANCE: f64 = 1e-5;
pub const AUC_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Grad,
    Crf,
    Metrics,
    All,
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grad" => Ok(Suite::Grad),
            "crf" => Ok(Suite::Crf),
            "metrics" => Ok(Suite::Metrics),
            "all" => Ok(Suite::All),
            _ => Err(Error::config(format!("unknown suite `{s}` (expected grad|crf|metrics|all)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    /// `<module>.<property>`.
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Check { name: name.into(), pass, detail: detail.into() }
    }

    fn from_result(name: &str, r: Result<Check>) -> Check {
        r.unwrap_or_else(|e| Check::new(name, false, format!("error: {e}")))
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Vec<Check> {
    match suite {
        Suite::Grad => grad_suite(seed),
        Suite::Crf => crf_suite(seed),
        Suite::Metrics => metrics_suite(seed),
        Suite::All => [grad_suite(seed), crf_suite(seed), metrics_suite(seed)].concat(),
    }
}

fn random_tensor(shape: &[usize], rng: &mut Rng, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal() * scale).collect()).expect("shape")
}

/// Normal samples pushed at least `margin` away from zero.
fn away_from_zero(shape: &[usize], rng: &mut Rng, margin: f64) -> Tensor<f64> {
    random_tensor(shape, rng, 1.0).map(|v| v + margin.copysign(v))
}

/// Distinct values on a `spacing` grid in shuffled order, so every
/// max-pool window has a unique maximum with that margin.
fn distinct_values(shape: &[usize], rng: &mut Rng, spacing: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * spacing).collect();
    rng.shuffle(&mut v);
    Tensor::new(shape, v).expect("shape")
}

/// Coordinates to probe: all of them, or `k` drawn without replacement.
fn probe_coords(n: usize, sample: Option<usize>, rng: &mut Rng) -> Vec<usize> {
    let mut all: Vec<usize> = (0..n).collect();
    match sample {
        Some(k) if k < n => {
            rng.shuffle(&mut all);
            all.truncate(k);
            all.sort_unstable();
            all
        }
        _ => all,
    }
}

/// Same rule as [`crate::gradcheck::finite_diff_grad`] for one coordinate.
fn central_difference(x: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    let up = f(x + FD_EPSILON);
    let down = f(x - FD_EPSILON);
    (up - down) / (2.0 * FD_EPSILON)
}

/// Pins a closure to the higher-ranked signature [`grad_check`] expects.
fn model<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape<f64>, &BoundParams<'t, f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    f
}

type Model<'a> = dyn for<'t> Fn(&'t Tape<f64>, &BoundParams<'t, f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> + 'a;

/// Gradient check of `⟨f(params, inputs), w⟩` for a fixed random `w`, over
/// every parameter and input tensor. `sample` limits the coordinates probed
/// per tensor.
fn grad_check(
    name: &str,
    params: &NetworkParams<f64>,
    inputs: &[Tensor<f64>],
    f: &Model<'_>,
    sample: Option<usize>,
    rng: &mut Rng,
) -> Result<Check> {
    let project =
        |params: &NetworkParams<f64>, inputs: &[Tensor<f64>], w: Option<&Tensor<f64>>| -> Result<(f64, Tensor<f64>)> {
            let tape = Tape::new();
            let bound = params.bind(&tape, |_| true);
            let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
            let out = f(&tape, &bound, &vars)?;
            let value = (*out.value()).clone();
            let loss = match w {
                Some(w) => out.mul(tape.constant(w.clone()))?.sum_all(),
                None => out.sum_all(),
            };
            Ok((loss.value().item(), value))
        };
    let (_, out) = project(params, inputs, None)?;
    let w = random_tensor(out.shape(), rng, 1.0);

    let tape = Tape::new();
    let bound = params.bind(&tape, |_| true);
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &bound, &vars)?.mul(tape.constant(w.clone()))?.sum_all();
    let mut grads = tape.backward(loss)?;
    let param_grads = bound.gradients(&mut grads);
    let input_grads: Vec<Option<Tensor<f64>>> = vars.iter().map(|&v| grads.take(v)).collect();

    let mut worst = (0.0f64, String::new());
    let mut probes = 0usize;
    let mut record = |what: String, analytic: f64, numeric: f64| {
        let e = relative_error(analytic, numeric, GRAD_FLOOR);
        if e > worst.0 || worst.1.is_empty() {
            worst = (e, what);
        }
    };
    let names = params.names().to_vec();
    for (pi, pname) in names.iter().enumerate() {
        let g = param_grads[pi].clone().unwrap_or_else(|| Tensor::zeros(params.get(pname).expect("named").shape()));
        for c in probe_coords(g.numel(), sample, rng) {
            let mut probe = params.clone();
            let numeric = central_difference(params.get(pname).expect("named").data()[c], |v| {
                probe.get_mut(pname).expect("named").data_mut()[c] = v;
                project(&probe, inputs, Some(&w)).map(|r| r.0).unwrap_or(f64::NAN)
            });
            record(format!("{pname}[{c}]"), g.data()[c], numeric);
            probes += 1;
        }
    }
    for (ii, input) in inputs.iter().enumerate() {
        let g = input_grads[ii].clone().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for c in probe_coords(input.numel(), sample, rng) {
            let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
            let numeric = central_difference(input.data()[c], |v| {
                probe[ii].data_mut()[c] = v;
                project(params, &probe, Some(&w)).map(|r| r.0).unwrap_or(f64::NAN)
            });
            record(format!("input{ii}[{c}]"), g.data()[c], numeric);
            probes += 1;
        }
    }
    let pass = worst.0 < GRAD_TOLERANCE;
    Ok(Check::new(name, pass, format!("max_rel_err={:.3e} at {} over {probes} coords", worst.0, worst.1)))
}

fn no_params() -> NetworkParams<f64> {
    NetworkParams::from_named(Vec::new()).expect("empty")
}

/// Randomizes zero-initialized tensors (biases, zero-start kernels) so
/// every path through a block carries gradient.
fn perturbed_params(spec: &ParamSpec, rng: &mut Rng) -> NetworkParams<f64> {
    let mut params = NetworkParams::init(spec, rng);
    for name in params.names().to_vec() {
        let t = params.get_mut(&name).expect("named");
        if t.data().iter().all(|&v| v == 0.0) {
            let fresh = random_tensor(t.shape(), rng, 0.1);
            *t = fresh;
        }
    }
    params
}

/// Finite-difference checks on every layer type at desk scale, and on the
/// whole desk network with sampled coordinates.
pub fn grad_suite(seed: u64) -> Vec<Check> {
    let mut out = Vec::new();
    let root = Rng::new(seed);
    let mut k = 0u64;
    let mut next_rng = || {
        k += 1;
        root.derive(&[0x67, k])
    };
    let none = no_params();
    let desk = NetConfig::desk();

    type Op = for<'t> fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>;
    let ops: Vec<(&str, Vec<Vec<usize>>, Op, u8)> = vec![
        ("tensor_core.grad.relu", vec![vec![2, 3, 4, 4]], |_, x| Ok(x[0].relu()), 1),
        ("tensor_core.grad.sigmoid", vec![vec![2, 5]], |_, x| Ok(x[0].sigmoid()), 0),
        ("tensor_core.grad.exp", vec![vec![2, 5]], |_, x| Ok(x[0].exp()), 0),
        ("tensor_core.grad.softmax", vec![vec![3, 4]], |_, x| x[0].softmax(1), 0),
        ("tensor_core.grad.matmul", vec![vec![3, 4], vec![4, 5]], |_, x| x[0].matmul(x[1]), 0),
        ("tensor_core.grad.bmm", vec![vec![2, 3, 4], vec![2, 4, 2]], |_, x| x[0].bmm(x[1]), 0),
        ("tensor_core.grad.broadcast_add_mul", vec![vec![3, 4], vec![1, 4]], |_, x| x[0].add(x[1])?.mul(x[0]), 0),
        ("tensor_core.grad.div", vec![vec![3, 4], vec![3, 4]], |_, x| x[0].div(x[1].exp()), 0),
        (
            "tensor_core.grad.conv2d_same",
            vec![vec![2, 3, 8, 8], vec![4, 3, 3, 3]],
            |_, x| x[0].conv2d(x[1], 1, Padding::Same),
            0,
        ),
        (
            "tensor_core.grad.conv2d_stride2",
            vec![vec![1, 2, 8, 8], vec![3, 2, 1, 1]],
            |_, x| x[0].conv2d(x[1], 2, Padding::Same),
            0,
        ),
        (
            "tensor_core.grad.conv2d_valid",
            vec![vec![1, 2, 7, 7], vec![2, 2, 3, 3]],
            |_, x| x[0].conv2d(x[1], 1, Padding::Valid),
            0,
        ),
        (
            "tensor_core.grad.depthwise_conv2d",
            vec![vec![2, 3, 8, 8], vec![3, 1, 7, 7]],
            |_, x| x[0].depthwise_conv2d(x[1]),
            0,
        ),
        ("tensor_core.grad.maxpool2d", vec![vec![2, 3, 8, 8]], |_, x| x[0].maxpool2d(2), 2),
        ("tensor_core.grad.upsample2d", vec![vec![2, 3, 4, 4]], |_, x| x[0].upsample2d(2), 0),
        ("tensor_core.grad.resize_nearest", vec![vec![1, 2, 6, 6]], |_, x| x[0].resize_nearest(8, 4), 0),
        ("tensor_core.grad.concat", vec![vec![2, 3, 4, 4], vec![2, 1, 4, 4]], |t, x| t.concat(&[x[0], x[1]], 1), 0),
        (
            "tensor_core.grad.mean_sum_max_axes",
            vec![vec![2, 3, 4, 4]],
            |_, x| x[0].mean_axes(&[2, 3])?.add(x[0].max_axes(&[2, 3])?),
            2,
        ),
        (
            "tensor_core.grad.ln_clamped",
            vec![vec![3, 4]],
            |_, x| Ok(x[0].sigmoid().ln_clamped(PROB_EPS, 1.0 - PROB_EPS)),
            0,
        ),
        (
            "nn_layers.grad.depthwise_separable_conv",
            vec![vec![2, 8, 16, 16], vec![8, 1, 3, 3], vec![16, 8, 1, 1]],
            |_, x| depthwise_separable_conv(x[0], x[1], x[2]),
            0,
        ),
    ];
    for (name, shapes, op, kind) in ops {
        let mut rng = next_rng();
        let inputs: Vec<Tensor<f64>> = shapes
            .iter()
            .map(|s| match kind {
                1 => away_from_zero(s, &mut rng, 1e-2),
                2 => distinct_values(s, &mut rng, 2e-2),
                _ => random_tensor(s, &mut rng, 0.5),
            })
            .collect();
        let f = model(move |t, _, x| op(t, x));
        let sample = if inputs.iter().map(Tensor::numel).sum::<usize>() > 600 { Some(150) } else { None };
        out.push(Check::from_result(name, grad_check(name, &none, &inputs, &f, sample, &mut rng)));
    }

    // Parameterized layers at desk widths.
    {
        let mut spec = ParamSpec::new();
        let mut b = ParamBuilder::new(&mut spec, "t");
        let conv = Conv::declare(&mut b, "conv", 4, 8, 3, 1);
        let mut rng = next_rng();
        let params = perturbed_params(&spec, &mut rng);
        let x = vec![random_tensor(&[2, 4, 16, 16], &mut rng, 1.0)];
        let f = model(|_, p, x| conv.forward(x[0], p));
        out.push(Check::from_result(
            "nn_layers.grad.conv",
            grad_check("nn_layers.grad.conv", &params, &x, &f, Some(120), &mut rng),
        ));
    }
    {
        let mut spec = ParamSpec::new();
        let mut b = ParamBuilder::new(&mut spec, "t");
        let sep = SepConv::declare(&mut b, "sconv", 8, 16, desk.lpl_kernel);
        let mut rng = next_rng();
        let params = perturbed_params(&spec, &mut rng);
        let x = vec![random_tensor(&[2, 8, 16, 16], &mut rng, 1.0)];
        let f = model(|_, p, x| sep.forward(x[0], p));
        out.push(Check::from_result(
            "nn_layers.grad.sepconv",
            grad_check("nn_layers.grad.sepconv", &params, &x, &f, Some(120), &mut rng),
        ));
    }
    {
        let mut spec = ParamSpec::new();
        let mut b = ParamBuilder::new(&mut spec, "t");
        let block = sconv_block(&mut b, "block", 8, 16, desk.lpl_kernel, true);
        let mut rng = next_rng();
        let params = perturbed_params(&spec, &mut rng);
        let x = vec![random_tensor(&[2, 8, 16, 16], &mut rng, 1.0)];
        let f = model(|_, p, x| block.forward(x[0], p));
        let name = "nn_layers.grad.residual_sconv_block";
        out.push(Check::from_result(name, grad_check(name, &params, &x, &f, Some(80), &mut rng)));
    }
    {
        let mut spec = ParamSpec::new();
        let mut b = ParamBuilder::new(&mut spec, "t");
        let c = desk.cgl_widths;
        let down = unet_conv_block(&mut b, "down", 1, c[0], desk.cgl_kernel);
        let mid = unet_conv_block(&mut b, "mid", c[0], c[1], desk.cgl_kernel);
        let up = unet_conv_block(&mut b, "up", c[1] + c[0], c[0], desk.cgl_kernel);
        let mut rng = next_rng();
        let params = perturbed_params(&spec, &mut rng);
        let x = vec![random_tensor(&[2, 1, 16, 16], &mut rng, 1.0)];
        let f = model(|_, p, x| {
            let (skip, pooled) = unet_down(x[0], &down, p)?;
            unet_up(mid.forward(pooled, p)?, skip, &up, p)
        });
        let name = "nn_layers.grad.unet_down_up";
        out.push(Check::from_result(name, grad_check(name, &params, &x, &f, Some(80), &mut rng)));
    }
    {
        let mut spec = ParamSpec::new();
        let mut b = ParamBuilder::new(&mut spec, "t");
        let dense = Dense::declare(&mut b, "dense", 45, desk.dense_units, Activation::Relu);
        let mut rng = next_rng();
        let params = perturbed_params(&spec, &mut rng);
        let x = vec![random_tensor(&[3, 45], &mut rng, 1.0)];
        let f = model(|_, p, x| dropout(dense.forward(x[0], p)?, desk.dropout, &mut Rng::new(11)));
        let name = "nn_layers.grad.dense_dropout";
        out.push(Check::from_result(name, grad_check(name, &params, &x, &f, Some(150), &mut rng)));
    }
    {
        let mut rng = next_rng();
        let (h, w) = (8, 8);
        let image = random_tensor(&[2, 1, h, w], &mut rng, 1.0).map(|v| 0.5 + 0.2 * v);
        let labels =
            Tensor::new(&[2, 1, h, w], (0..2 * h * w).map(|i| f64::from(u8::from((i / w) % h >= 4))).collect())
                .expect("shape");
        let crf = CrfConfig::default().scaled_for(w);
        let x = vec![random_tensor(&[2, 2, h, w], &mut rng, 1.0)];
        let f = model(|_, _, x| {
            let unet = x[0].softmax(1)?;
            let refined = mean_field(unet, &image, &crf)?;
            segmentation_loss(unet, refined, &labels, &image, &crf, 0.67, 0.01)
        });
        let name = "crf_inference.grad.mean_field_segmentation_loss";
        out.push(Check::from_result(name, grad_check(name, &none, &x, &f, None, &mut rng)));
    }
    {
        let mut rng = next_rng();
        let x = vec![random_tensor(&[4, 2], &mut rng, 1.0)];
        let f = model(|_, _, x| class_loss(x[0].softmax(1)?, &[0, 1, 1, 0]));
        out.push(Check::from_result(
            "dualcorenet.grad.class_loss",
            grad_check("dualcorenet.grad.class_loss", &none, &x, &f, None, &mut rng),
        ));
    }
    out.push(Check::from_result(
        "dualcorenet.grad.full_desk_network",
        full_network_check(&desk, &mut next_rng(), Some(2)),
    ));
    out
}

/// Gradient check of the summed classification and segmentation losses of
/// the whole network with respect to every parameter tensor.
pub fn full_network_check(cfg: &NetConfig, rng: &mut Rng, per_tensor: Option<usize>) -> Result<Check> {
    let name = format!("dualcorenet.grad.full_{}_network", cfg.preset);
    let net = DualCoreNet::new(cfg.clone())?;
    let params = perturbed_params(net.spec(), rng);
    let batch = random_batch(cfg, 2, rng)?;
    let crf = CrfConfig::default();
    let f = model(|tape, p, _| {
        let f = net.forward(tape, &batch, p, &crf, Parts::ALL, Ablation::None, None)?;
        let missing = || Error::Contract("missing output".into());
        class_loss(f.fused_probs.ok_or_else(missing)?, &batch.labels)?
            .add(class_loss(f.lpl_probs.ok_or_else(missing)?, &batch.labels)?)?
            .add(class_loss(f.cgl_probs.ok_or_else(missing)?, &batch.labels)?)?
            .add(forward_segmentation_loss(&net, &f, &batch, &crf, 0.67, 0.01)?)
    });
    grad_check(&name, &params, &[], &f, per_tensor, rng)
}

/// Random network inputs with a blob-shaped mask and labels `0, 1, 0, …`.
pub fn random_batch(cfg: &NetConfig, n: usize, rng: &mut Rng) -> Result<Batch<f64>> {
    let (c, b, m) = (cfg.context_size, cfg.bbox_size, cfg.mask_size);
    let img = |size: usize, ch: usize, rng: &mut Rng| {
        Tensor::new(&[n, ch, size, size], (0..n * ch * size * size).map(|_| rng.uniform()).collect())
    };
    let mut mask = Vec::with_capacity(n * m * m);
    for _ in 0..n {
        let (cy, cx, r) = (rng.uniform_range(0.3, 0.7), rng.uniform_range(0.3, 0.7), rng.uniform_range(0.2, 0.35));
        for y in 0..m {
            for x in 0..m {
                let (dy, dx) = ((y as f64 + 0.5) / m as f64 - cy, (x as f64 + 0.5) / m as f64 - cx);
                mask.push(f64::from(u8::from(dy * dy + dx * dx <= r * r)));
            }
        }
    }
    Ok(Batch {
        context: img(c, cfg.in_channels, rng)?,
        bbox: img(b, 1, rng)?,
        mask: Tensor::new(&[n, 1, m, m], mask)?,
        labels: (0..n).map(|i| i % 2).collect(),
        ids: (0..n).map(|i| format!("random-{i}")).collect(),
    })
}

/// Dense all-pairs mean-field loop, written independently of the tape
/// implementation. `unary` is `B×H×W×2`.
pub fn dense_mean_field_oracle(
    unary: &[f64],
    image: &[f64],
    b: usize,
    h: usize,
    w: usize,
    cfg: &CrfConfig,
) -> Vec<f64> {
    let n = h * w;
    let ln_u: Vec<f64> = unary.iter().map(|&u| u.clamp(PROB_EPS, 1.0 - PROB_EPS).ln()).collect();
    let mut q = unary.to_vec();
    let gauss = |d2: f64, theta: f64| (-d2 / (2.0 * theta * theta)).exp();
    for _ in 0..cfg.iterations {
        let mut next = vec![0.0; q.len()];
        for s in 0..b {
            let base = s * n;
            for i in 0..n {
                let mut msg = [0.0; 2];
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let (dy, dx) = ((i / w) as f64 - (j / w) as f64, (i % w) as f64 - (j % w) as f64);
                    let d2 = dy * dy + dx * dx;
                    let di = image[base + i] - image[base + j];
                    let k = cfg.w_spatial * gauss(d2, cfg.spatial_theta)
                        + cfg.w_bilateral
                            * gauss(d2, cfg.bilateral_theta_spatial)
                            * gauss(di * di, cfg.bilateral_theta_intensity);
                    for (l, m) in msg.iter_mut().enumerate() {
                        *m += k * q[2 * (base + j) + l];
                    }
                }
                let logits: Vec<f64> = (0..2)
                    .map(|l| {
                        ln_u[2 * (base + i) + l] - (0..2).map(|l2| cfg.compatibility[l][l2] * msg[l2]).sum::<f64>()
                    })
                    .collect();
                let mx = logits[0].max(logits[1]);
                let e: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
                let z = e[0] + e[1];
                next[2 * (base + i)] = e[0] / z;
                next[2 * (base + i) + 1] = e[1] / z;
            }
        }
        q = next;
    }
    q
}

fn random_unary(b: usize, h: usize, w: usize, rng: &mut Rng) -> Tensor<f64> {
    let mut data = Vec::with_capacity(b * h * w * 2);
    for _ in 0..b * h * w {
        let p = rng.uniform_range(0.02, 0.98);
        data.extend([1.0 - p, p]);
    }
    Tensor::new(&[b, h, w, 2], data).expect("shape")
}

fn random_crf(rng: &mut Rng) -> CrfConfig {
    CrfConfig {
        iterations: 1 + rng.below(5),
        spatial_theta: rng.uniform_range(0.5, 4.0),
        bilateral_theta_spatial: rng.uniform_range(1.0, 10.0),
        bilateral_theta_intensity: rng.uniform_range(0.05, 0.5),
        w_spatial: rng.uniform_range(0.0, 2.0),
        w_bilateral: rng.uniform_range(0.0, 2.0),
        compatibility: [
            [rng.uniform_range(0.0, 0.3), rng.uniform_range(0.5, 1.5)],
            [rng.uniform_range(0.5, 1.5), rng.uniform_range(0.0, 0.3)],
        ],
        reference_size: 40.0,
    }
}

pub fn crf_suite(seed: u64) -> Vec<Check> {
    let root = Rng::new(seed).derive(&[0xc7f]);
    let mut out = Vec::new();

    let name = "crf_inference.dense_oracle_equivalence";
    out.push(Check::from_result(
        name,
        (|| {
            let mut rng = root.derive(&[1]);
            let mut worst = 0.0f64;
            let trials = 40;
            for _ in 0..trials {
                let (b, h, w) = (1 + rng.below(2), 1 + rng.below(12), 1 + rng.below(12));
                let cfg = random_crf(&mut rng);
                let unary = random_unary(b, h, w, &mut rng);
                let image = Tensor::new(&[b, h, w], (0..b * h * w).map(|_| rng.uniform()).collect())?;
                let got = mean_field_infer(&UnaryField::new(unary.clone())?, &image, &cfg)?;
                let want = dense_mean_field_oracle(unary.data(), image.data(), b, h, w, &cfg);
                for (&g, &o) in got.tensor().data().iter().zip(&want) {
                    worst = worst.max(relative_error(g, o, 1e-12));
                }
            }
            Ok(Check::new(
                name,
                worst < CRF_TOLERANCE,
                format!("max_rel_err={worst:.3e} over {trials} fields up to 12x12"),
            ))
        })(),
    ));

    let name = "crf_inference.normalized_every_iteration";
    out.push(Check::from_result(
        name,
        (|| {
            let mut rng = root.derive(&[2]);
            let mut worst = 0.0f64;
            let mut steps = 0;
            for trial in 0..20 {
                let (h, w) = (2 + rng.below(11), 2 + rng.below(11));
                let cfg = CrfConfig { iterations: 5, ..random_crf(&mut rng) };
                let unary = random_unary(1, h, w, &mut rng);
                let image: Vec<f64> = (0..h * w).map(|_| rng.uniform()).collect();
                let mut observe64 = |_: usize, q: &Tensor<f64>| {
                    steps += 1;
                    let (qd, n) = (q.data(), h * w);
                    for i in 0..n {
                        worst = worst.max((qd[i] + qd[n + i] - 1.0).abs());
                    }
                };
                if trial % 2 == 0 {
                    let tape = Tape::new();
                    let u = tape.constant(UnaryField::new(unary)?.to_nchw());
                    mean_field_observed(u, &Tensor::new(&[1, h, w], image)?, &cfg, &mut observe64)?;
                } else {
                    let tape = Tape::<f32>::new();
                    let u = tape.constant(UnaryField::new(unary.cast::<f32>())?.to_nchw());
                    let img = Tensor::<f64>::new(&[1, h, w], image)?.cast::<f32>();
                    mean_field_observed(u, &img, &cfg, |it, q: &Tensor<f32>| observe64(it, &q.cast::<f64>()))?;
                }
            }
            Ok(Check::new(
                name,
                worst <= NORMALIZATION_TOLERANCE,
                format!("max |sum-1|={worst:.3e} over {steps} iterations (f32 and f64)"),
            ))
        })(),
    ));

    let name = "crf_inference.zero_weights_identity";
    out.push(Check::from_result(
        name,
        (|| {
            let mut rng = root.derive(&[3]);
            let cfg = CrfConfig { w_spatial: 0.0, w_bilateral: 0.0, ..CrfConfig::default() };
            let mut all = true;
            for _ in 0..10 {
                let (h, w) = (1 + rng.below(12), 1 + rng.below(12));
                let unary = UnaryField::new(random_unary(2, h, w, &mut rng))?;
                let image = Tensor::new(&[2, h, w], (0..2 * h * w).map(|_| rng.uniform()).collect())?;
                let q = mean_field_infer(&unary, &image, &cfg)?;
                all &= q.tensor().bit_eq(unary.tensor());
            }
            Ok(Check::new(name, all, "10 fields returned bitwise unchanged".to_string()))
        })(),
    ));

    let name = "crf_inference.smooths_toward_neighbours";
    out.push(Check::from_result(
        name,
        (|| {
            // A single dissenting pixel in a confident uniform region is pulled
            // toward the region's label.
            let (h, w) = (6, 6);
            let mut data = Vec::new();
            for i in 0..h * w {
                let p = if i == 14 { 0.6 } else { 0.05 };
                data.extend([1.0 - p, p]);
            }
            let unary = UnaryField::new(Tensor::new(&[1, h, w, 2], data)?)?;
            let image = Tensor::full(&[1, h, w], 0.5);
            let q = mean_field_infer(&unary, &image, &CrfConfig::default().scaled_for(w))?;
            let p = q.foreground(0).data()[14];
            Ok(Check::new(name, p < 0.5, format!("outlier foreground 0.6 -> {p:.4}")))
        })(),
    ));
    out
}

pub fn metrics_suite(seed: u64) -> Vec<Check> {
    let mut rng = Rng::new(seed).derive(&[0xa0c]);
    let mut out = Vec::new();

    let name = "metrics.auc_trapezoid_equals_mann_whitney";
    out.push(Check::from_result(
        name,
        (|| {
            let mut worst = 0.0f64;
            for trial in 0..200 {
                let n = 2 + rng.below(999);
                let mut labels: Vec<usize> = (0..n).map(|_| usize::from(rng.uniform() < 0.5)).collect();
                labels[0] = 0;
                labels[1] = 1;
                // Every third instance uses coarse scores to exercise ties.
                let levels = if trial % 3 == 0 { 1 + rng.below(20) } else { 0 };
                let scores: Vec<f64> = labels
                    .iter()
                    .map(|&l| {
                        let s = rng.normal() + l as f64 * 0.7;
                        if levels > 0 {
                            (s * levels as f64).round() / levels as f64
                        } else {
                            s
                        }
                    })
                    .collect();
                let a = roc_auc(&scores, &labels)?.auc;
                let b = mann_whitney_auc(&scores, &labels)?;
                worst = worst.max((a - b).abs());
            }
            Ok(Check::new(name, worst <= AUC_TOLERANCE, format!("max |diff|={worst:.3e} over 200 instances")))
        })(),
    ));

    let name = "metrics.auc_fixtures";
    out.push(Check::from_result(
        name,
        (|| {
            let cases: [(&[f64], &[usize], f64); 4] = [
                (&[0.9, 0.8, 0.3, 0.2], &[1, 0, 1, 0], 0.75),
                (&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1], 1.0),
                (&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1], 0.0),
                (&[0.5, 0.5, 0.5, 0.5], &[0, 1, 0, 1], 0.5),
            ];
            let mut bad = Vec::new();
            for (scores, labels, want) in cases {
                let got = roc_auc(scores, labels)?.auc;
                if (got - want).abs() > 1e-12 {
                    bad.push(format!("{scores:?}: {got} != {want}"));
                }
            }
            let single = roc_auc(&[0.1, 0.2], &[1, 1]).is_err();
            if !single {
                bad.push("single-class AUC did not error".into());
            }
            Ok(Check::new(name, bad.is_empty(), if bad.is_empty() { "5 fixtures".into() } else { bad.join("; ") }))
        })(),
    ));

    let name = "metrics.dice_fixtures";
    out.push(Check::from_result(
        name,
        (|| {
            let mask = |on: &[usize]| {
                let mut t = Tensor::<f64>::zeros(&[4, 4]);
                for &i in on {
                    t.data_mut()[i] = 1.0;
                }
                t
            };
            let a = mask(&[0, 1, 4, 5]);
            let cases = [
                ("identical", dice(&a, &a)?, 1.0),
                ("disjoint", dice(&a, &mask(&[15]))?, 0.0),
                ("half_overlap", dice(&a, &mask(&[1, 2, 5, 6]))?, 0.5),
                ("both_empty", dice(&mask(&[]), &mask(&[]))?, 1.0),
                ("one_empty", dice(&a, &mask(&[]))?, 0.0),
                ("subset", dice(&a, &mask(&[0, 1]))?, 2.0 * 2.0 / 6.0),
            ];
            let bad: Vec<String> =
                cases.iter().filter(|c| c.1 != c.2).map(|c| format!("{}: {} != {}", c.0, c.1, c.2)).collect();
            let soft_rejected =
                dice(&Tensor::<f64>::full(&[2, 2], 0.5), &mask(&[]).reshape(&[16])?.reshape(&[4, 4])?).is_err();
            let pass = bad.is_empty() && soft_rejected;
            Ok(Check::new(
                name,
                pass,
                if pass {
                    "6 fixtures, soft input rejected".into()
                } else {
                    format!("{bad:?} soft_rejected={soft_rejected}")
                },
            ))
        })(),
    ));

    let name = "metrics.dice_symmetric";
    out.push(Check::from_result(
        name,
        (|| {
            let mut ok = true;
            for _ in 0..50 {
                let n = 1 + rng.below(64);
                let p = rng.uniform();
                let a = Tensor::new(&[n], (0..n).map(|_| f64::from(u8::from(rng.uniform() < p))).collect())?;
                let b = Tensor::new(&[n], (0..n).map(|_| f64::from(u8::from(rng.uniform() < p))).collect())?;
                let (ab, ba) = (dice(&a, &b)?, dice(&b, &a)?);
                ok &= ab == ba && (0.0..=1.0).contains(&ab);
            }
            Ok(Check::new(name, ok, "50 random pairs".to_string()))
        })(),
    ));
    out
}
