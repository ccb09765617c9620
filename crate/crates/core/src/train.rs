//! Adam, the phased training schedule, resumable checkpoints and split
//! evaluation.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::crf::{CrfConfig, SoftMask};
use crate::data::{make_batch, RoiSample, SplitGuard};
use crate::error::{Error, Result};
use crate::metrics::{binarize, dice, roc_auc, MetricReport};
use crate::net::{class_loss, forward_segmentation_loss, Ablation, Batch, DualCoreNet, Forward, Parts};
use crate::nn::params::{read_named, write_named};
use crate::nn::NetworkParams;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments for every parameter, in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &NetworkParams<T>, cfg: AdamConfig) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamState { cfg, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One bias-corrected Adam update. Parameters whose gradient is `None`
    /// are frozen and left untouched along with their moments.
    pub fn update(&mut self, params: &mut NetworkParams<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients and {} moment tensors for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        for ((name, _), g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(Error::NonFinite { name: name.to_string(), detail: "gradient".into() });
                }
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powf(self.step as f64);
        let c2 = 1.0 - beta2.powf(self.step as f64);
        let (b1, b2, one) = (T::c(beta1), T::c(beta2), T::one());
        let (lr_t, c1_t, c2_t, eps_t) = (T::c(lr), T::c(c1), T::c(c2), T::c(eps));
        for (i, ((name, p), g)) in params.tensors_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / c1_t;
                let v_hat = *v / c2_t;
                *p -= lr_t * m_hat / (v_hat.sqrt() + eps_t);
            }
            if !p.all_finite() {
                return Err(Error::NonFinite {
                    name: name.to_string(),
                    detail: format!("after Adam step {}", self.step),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PhaseKind {
    /// LPL classification loss.
    Lpl,
    /// Weighted segmentation loss on the U-Net and CRF outputs.
    CglSeg,
    /// CGL classification loss on the soft mask.
    CglCls,
    /// Fused classification loss, plus optional auxiliary terms.
    Joint,
}

impl PhaseKind {
    pub const ALL: [PhaseKind; 4] = [PhaseKind::Lpl, PhaseKind::CglSeg, PhaseKind::CglCls, PhaseKind::Joint];

    pub fn name(self) -> &'static str {
        match self {
            PhaseKind::Lpl => "lpl",
            PhaseKind::CglSeg => "cgl_seg",
            PhaseKind::CglCls => "cgl_cls",
            PhaseKind::Joint => "joint",
        }
    }

    /// Parameter prefixes unfrozen by default.
    pub fn default_trainable(self) -> Vec<String> {
        let p: &[&str] = match self {
            PhaseKind::Lpl => &["lpl"],
            PhaseKind::CglSeg => &["cgl.unet"],
            PhaseKind::CglCls => &["cgl.head"],
            PhaseKind::Joint => &["lpl", "cgl.head", "fusion"],
        };
        p.iter().map(|s| s.to_string()).collect()
    }

    /// Whether the epoch metric is a Dice score (else accuracy).
    pub fn is_segmentation(self) -> bool {
        self == PhaseKind::CglSeg
    }
}

impl FromStr for PhaseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PhaseKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown phase `{s}` (expected lpl|cgl_seg|cgl_cls|joint)")))
    }
}

impl fmt::Display for PhaseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    pub kind: PhaseKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Parameter-name prefixes (dotted-path aware) that receive updates.
    pub trainable: Vec<String>,
}

impl Phase {
    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable
            .iter()
            .any(|p| name == p || (name.starts_with(p.as_str()) && name.as_bytes().get(p.len()) == Some(&b'.')))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub phases: Vec<Phase>,
    pub adam: AdamConfig,
    /// Weight of the CRF term in the segmentation loss.
    pub lambda: f64,
    /// Weight of the pairwise regularizer in the segmentation loss.
    pub beta: f64,
    /// Auxiliary loss weights during the joint phase.
    pub joint_lpl_weight: f64,
    pub joint_cgl_weight: f64,
    pub joint_seg_weight: f64,
}

impl TrainPlan {
    pub fn validate(&self, net: &DualCoreNet) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::config("training plan has no phases"));
        }
        let mut problems = Vec::new();
        for ph in &self.phases {
            if ph.batch_size == 0 {
                problems.push(format!("phase {}: batch size must be >= 1", ph.kind));
            }
            if !(ph.lr > 0.0 && ph.lr.is_finite()) {
                problems.push(format!("phase {}: learning rate must be > 0", ph.kind));
            }
            for prefix in &ph.trainable {
                let probe = Phase { trainable: vec![prefix.clone()], ..ph.clone() };
                if !net.spec().decls().iter().any(|d| probe.is_trainable(&d.name)) {
                    problems.push(format!("phase {}: trainable prefix `{prefix}` matches no parameter", ph.kind));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            problems.push(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }
}

/// Per-epoch record: mean loss and train Dice (segmentation) or accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub phase: PhaseKind,
    pub epoch: usize,
    pub loss: f64,
    pub metric: f64,
}

impl EpochRecord {
    /// `phase\tepoch\tloss\tmetric` line of `history.tsv`.
    pub fn tsv(&self) -> String {
        format!("{}\t{}\t{:.6}\t{:.6}", self.phase, self.epoch, self.loss, self.metric)
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T: Scalar> {
    pub params: NetworkParams<T>,
    pub adam: AdamState<T>,
    /// Index of the current phase in the plan.
    pub phase: usize,
    /// Next epoch within the current phase.
    pub epoch: usize,
    /// Best metric of the current phase, rounded to f32.
    pub best: Option<f64>,
}

impl<T: Scalar> TrainState<T> {
    pub fn fresh(params: NetworkParams<T>, adam: AdamConfig) -> Self {
        let adam = AdamState::new(&params, adam);
        TrainState { params, adam, phase: 0, epoch: 0, best: None }
    }
}

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";
const PROGRESS: &str = "train.progress";

fn u64_limbs(v: u64) -> [f64; 4] {
    [0, 16, 32, 48].map(|s| ((v >> s) & 0xffff) as f64)
}

fn limbs_u64(l: &[f64]) -> u64 {
    l.iter().zip([0, 16, 32, 48]).map(|(&x, s)| (x as u64) << s).sum()
}

/// Writes parameters, Adam moments and progress to one `DCNCKPT1` file.
pub fn save_train_state<T: Scalar>(path: &Path, st: &TrainState<T>) -> Result<()> {
    let names: Vec<String> = st.params.names().to_vec();
    let mut entries: Vec<(String, &Tensor<T>)> = st.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
    entries.extend(names.iter().zip(&st.adam.m).map(|(n, t)| (format!("{ADAM_M}{n}"), t)));
    entries.extend(names.iter().zip(&st.adam.v).map(|(n, t)| (format!("{ADAM_V}{n}"), t)));
    let mut progress = Vec::new();
    for v in [st.adam.step, st.phase as u64, st.epoch as u64] {
        progress.extend(u64_limbs(v));
    }
    progress.push(if st.best.is_some() { 1.0 } else { 0.0 });
    progress.push(st.best.unwrap_or(0.0));
    let progress = Tensor::<T>::from_f64(&[progress.len()], &progress)?;
    entries.push((PROGRESS.to_string(), &progress));

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_named(&mut w, entries.iter().map(|(n, t)| (n.as_str(), *t)).collect::<Vec<_>>().into_iter())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Splits a checkpoint into model parameters and, when present, the
/// optimizer/progress state. Adam hyperparameters are not stored; the
/// returned state carries the defaults and callers resuming a plan set
/// them from it.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(NetworkParams<T>, Option<TrainState<T>>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let entries = read_named::<T, _>(&mut BufReader::new(file), path)?;
    let mut model = Vec::new();
    let (mut m, mut v, mut progress) = (Vec::new(), Vec::new(), None);
    for (name, t) in entries {
        if let Some(rest) = name.strip_prefix(ADAM_M) {
            m.push((rest.to_string(), t));
        } else if let Some(rest) = name.strip_prefix(ADAM_V) {
            v.push((rest.to_string(), t));
        } else if name == PROGRESS {
            progress = Some(t);
        } else {
            model.push((name, t));
        }
    }
    let params = NetworkParams::from_named(model)?;
    let Some(progress) = progress else { return Ok((params, None)) };
    let names = params.names();
    let aligned =
        |xs: &[(String, Tensor<T>)]| xs.len() == names.len() && xs.iter().zip(names).all(|((a, _), b)| a == b);
    if !aligned(&m) || !aligned(&v) || progress.numel() != 14 {
        return Err(Error::format(path, "optimizer state does not match the stored parameters"));
    }
    let p: Vec<f64> = progress.data().iter().map(|x| x.as_f64()).collect();
    let adam = AdamState {
        cfg: AdamConfig::default(),
        step: limbs_u64(&p[0..4]),
        m: m.into_iter().map(|(_, t)| t).collect(),
        v: v.into_iter().map(|(_, t)| t).collect(),
    };
    let state = TrainState {
        params: params.clone(),
        adam,
        phase: limbs_u64(&p[4..8]) as usize,
        epoch: limbs_u64(&p[8..12]) as usize,
        best: (p[12] == 1.0).then_some(p[13]),
    };
    Ok((params, Some(state)))
}

/// Notifications from [`Trainer::run`].
#[derive(Debug, Clone, PartialEq)]
pub enum TrainEvent {
    /// An epoch finished; the state now points past it.
    Epoch(EpochRecord),
    /// The epoch just recorded is the phase's best so far.
    Best(PhaseKind),
    /// A phase finished.
    PhaseEnd(PhaseKind),
}

pub struct Trainer<'a> {
    pub net: &'a DualCoreNet,
    pub crf: &'a CrfConfig,
    pub plan: &'a TrainPlan,
    pub seed: u64,
    /// Dice binarization threshold.
    pub threshold: f64,
}

/// Loss and metric contributions of one batch.
struct BatchResult {
    loss: f64,
    metric_sum: f64,
}

impl<'a> Trainer<'a> {
    fn phase_parts(&self, kind: PhaseKind) -> Parts {
        match kind {
            PhaseKind::Lpl => Parts::LPL,
            PhaseKind::CglSeg => Parts::SEGMENTATION,
            PhaseKind::CglCls => Parts::CGL,
            PhaseKind::Joint => Parts::ALL,
        }
    }

    fn phase_loss<'t, T: Scalar>(&self, kind: PhaseKind, f: &Forward<'t, T>, batch: &Batch<T>) -> Result<Var<'t, T>> {
        let plan = self.plan;
        let need = |v: Option<Var<'t, T>>| v.ok_or_else(|| Error::Contract("missing forward output".into()));
        match kind {
            PhaseKind::Lpl => class_loss(need(f.lpl_probs)?, &batch.labels),
            PhaseKind::CglSeg => forward_segmentation_loss(self.net, f, batch, self.crf, plan.lambda, plan.beta),
            PhaseKind::CglCls => class_loss(need(f.cgl_probs)?, &batch.labels),
            PhaseKind::Joint => {
                let mut loss = class_loss(need(f.fused_probs)?, &batch.labels)?;
                if plan.joint_lpl_weight != 0.0 {
                    loss = loss.add(class_loss(need(f.lpl_probs)?, &batch.labels)?.scale(plan.joint_lpl_weight))?;
                }
                if plan.joint_cgl_weight != 0.0 {
                    loss = loss.add(class_loss(need(f.cgl_probs)?, &batch.labels)?.scale(plan.joint_cgl_weight))?;
                }
                if plan.joint_seg_weight != 0.0 {
                    let seg = forward_segmentation_loss(self.net, f, batch, self.crf, plan.lambda, plan.beta)?;
                    loss = loss.add(seg.scale(plan.joint_seg_weight))?;
                }
                Ok(loss)
            }
        }
    }

    fn train_batch<T: Scalar>(
        &self,
        phase: &Phase,
        batch: &Batch<T>,
        st: &mut TrainState<T>,
        rng: &mut Rng,
    ) -> Result<BatchResult> {
        let tape = Tape::new();
        let bound = st.params.bind(&tape, |n| phase.is_trainable(n));
        let parts = self.phase_parts(phase.kind);
        let f = self.net.forward(&tape, batch, &bound, self.crf, parts, Ablation::None, Some(rng))?;
        let loss = self.phase_loss(phase.kind, &f, batch)?;
        let loss_value = loss.value().item().as_f64();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite {
                name: "loss".into(),
                detail: format!("phase {} batch [{}]: {loss_value}", phase.kind, batch.ids.join(", ")),
            });
        }
        let metric_sum = if phase.kind.is_segmentation() {
            let soft = SoftMask::from_nchw(&f.soft_mask.expect("segmentation evaluated").value())?;
            soft_mask_dice(&soft, &batch.mask, self.threshold)?.iter().sum()
        } else {
            let probs = match phase.kind {
                PhaseKind::Lpl => f.lpl_probs,
                PhaseKind::CglCls => f.cgl_probs,
                _ => f.fused_probs,
            };
            correct(&probs.expect("classifier evaluated").value(), &batch.labels) as f64
        };
        let mut grads = tape.backward(loss)?;
        let grads = bound.gradients(&mut grads);
        st.adam.update(&mut st.params, &grads, phase.lr)?;
        Ok(BatchResult { loss: loss_value * batch.len() as f64, metric_sum })
    }

    /// Trains from `st` until the plan completes or `max_epochs` more
    /// epochs have run. Returns true when the plan is complete.
    pub fn run<T: Scalar>(
        &self,
        guard: &SplitGuard<RoiSample<T>>,
        st: &mut TrainState<T>,
        max_epochs: Option<usize>,
        on_event: &mut dyn FnMut(&TrainEvent, &TrainState<T>) -> Result<()>,
    ) -> Result<bool> {
        self.plan.validate(self.net)?;
        let was_locked = guard.is_locked();
        guard.lock();
        let res = self.run_locked(guard.train(), st, max_epochs, on_event);
        if !was_locked {
            guard.unlock();
        }
        res
    }

    fn run_locked<T: Scalar>(
        &self,
        train: &[RoiSample<T>],
        st: &mut TrainState<T>,
        max_epochs: Option<usize>,
        on_event: &mut dyn FnMut(&TrainEvent, &TrainState<T>) -> Result<()>,
    ) -> Result<bool> {
        if train.is_empty() {
            return Err(Error::Contract("training split is empty".into()));
        }
        let root = Rng::new(self.seed);
        let mut budget = max_epochs.unwrap_or(usize::MAX);
        while st.phase < self.plan.phases.len() {
            let phase = &self.plan.phases[st.phase];
            while st.epoch < phase.epochs {
                if budget == 0 {
                    return Ok(false);
                }
                budget -= 1;
                let epoch_rng = root.derive(&[st.phase as u64, st.epoch as u64]);
                let mut order: Vec<usize> = (0..train.len()).collect();
                epoch_rng.derive(&[0]).shuffle(&mut order);
                let mut dropout_rng = epoch_rng.derive(&[1]);
                let (mut loss, mut metric) = (0.0, 0.0);
                for chunk in order.chunks(phase.batch_size) {
                    let samples: Vec<&RoiSample<T>> = chunk.iter().map(|&i| &train[i]).collect();
                    let batch = make_batch(&samples, self.net.config())?;
                    let r = self.train_batch(phase, &batch, st, &mut dropout_rng)?;
                    loss += r.loss;
                    metric += r.metric_sum;
                }
                let n = train.len() as f64;
                let record = EpochRecord { phase: phase.kind, epoch: st.epoch, loss: loss / n, metric: metric / n };
                st.epoch += 1;
                let rounded = f64::from(record.metric as f32);
                let is_best = st.best.is_none_or(|b| rounded > b);
                if is_best {
                    st.best = Some(rounded);
                }
                on_event(&TrainEvent::Epoch(record), st)?;
                if is_best {
                    on_event(&TrainEvent::Best(phase.kind), st)?;
                }
            }
            let kind = phase.kind;
            st.phase += 1;
            st.epoch = 0;
            st.best = None;
            st.adam = AdamState::new(&st.params, self.plan.adam);
            on_event(&TrainEvent::PhaseEnd(kind), st)?;
        }
        Ok(true)
    }
}

fn correct<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> usize {
    probs.data().chunks_exact(2).zip(labels).filter(|(p, &l)| usize::from(p[1] > p[0]) == l).count()
}

/// Dice of each binarized soft mask against `B×1×M×M` reference masks.
pub fn soft_mask_dice<T: Scalar>(soft: &SoftMask<T>, masks: &Tensor<T>, threshold: f64) -> Result<Vec<f64>> {
    binarize(soft, threshold)
        .iter()
        .enumerate()
        .map(|(n, pred)| dice(pred, &masks.index_axis0(n).reshape(pred.shape())?))
        .collect()
}

/// Per-sample Dice and the fused, LPL-only and CGL-only ROC curves.
/// Curves are omitted when the samples hold a single class.
pub fn evaluate<T: Scalar>(
    net: &DualCoreNet,
    params: &NetworkParams<T>,
    crf: &CrfConfig,
    samples: &[RoiSample<T>],
    batch_size: usize,
    threshold: f64,
) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    let mut scores: [Vec<f64>; 3] = Default::default();
    let mut labels = Vec::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&RoiSample<T>> = chunk.iter().collect();
        let batch = make_batch(&refs, net.config())?;
        let out = net.infer(params, &batch, crf, Ablation::None)?;
        for (id, d) in batch.ids.iter().zip(soft_mask_dice(&out.soft_mask, &batch.mask, threshold)?) {
            report.dice.push((id.clone(), d));
        }
        for (acc, probs) in scores.iter_mut().zip([&out.class_probs, &out.lpl_probs, &out.cgl_probs]) {
            acc.extend(probs.data().chunks_exact(2).map(|p| p[1].as_f64()));
        }
        labels.extend_from_slice(&batch.labels);
    }
    if labels.contains(&0) && labels.contains(&1) {
        for (name, s) in ["fused", "lpl", "cgl"].into_iter().zip(&scores) {
            report.rocs.push((name.to_string(), roc_auc(s, &labels)?));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetConfig;
    use crate::nn::{Init, ParamSpec};

    fn scalar_params(v: f64) -> NetworkParams<f64> {
        NetworkParams::from_named(vec![("p".into(), Tensor::scalar(v))]).unwrap()
    }

    #[test]
    fn first_step_is_about_lr() {
        let mut p = scalar_params(0.0);
        let mut st = AdamState::new(&p, AdamConfig::default());
        st.update(&mut p, &[Some(Tensor::scalar(1.0))], 0.01).unwrap();
        assert!((p.get("p").unwrap().item() + 0.01).abs() < 1e-8);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_and_frozen() {
        let mut p = scalar_params(0.5);
        let mut st = AdamState::new(&p, AdamConfig::default());
        st.update(&mut p, &[Some(Tensor::scalar(0.0))], 0.1).unwrap();
        assert_eq!(p.get("p").unwrap().item(), 0.5);
        st.update(&mut p, &[None], 0.1).unwrap();
        assert_eq!(p.get("p").unwrap().item(), 0.5);
        assert_eq!(st.step, 2);
    }

    #[test]
    fn minimizes_square() {
        let mut p = scalar_params(1.0);
        let mut st = AdamState::new(&p, AdamConfig::default());
        for _ in 0..200 {
            let x = p.get("p").unwrap().item();
            st.update(&mut p, &[Some(Tensor::scalar(2.0 * x))], 0.1).unwrap();
        }
        assert!(p.get("p").unwrap().item().abs() < 0.05);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = scalar_params(1.0);
        let mut st = AdamState::new(&p, AdamConfig::default());
        let err = st.update(&mut p, &[Some(Tensor::scalar(f64::NAN))], 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref name, .. } if name == "p"));
    }

    #[test]
    fn prefix_matching_respects_path_boundaries() {
        let ph =
            Phase { kind: PhaseKind::Joint, epochs: 1, batch_size: 1, lr: 1.0, trainable: vec!["cgl.head".into()] };
        assert!(ph.is_trainable("cgl.head.block1.sconv1.depth"));
        assert!(!ph.is_trainable("cgl.headx.w"));
        assert!(!ph.is_trainable("cgl.unet.down1.conv1.weight"));
    }

    #[test]
    fn train_state_round_trip() {
        let mut spec = ParamSpec::new();
        spec.declare("a.w", &[3, 2], Init::He { fan_in: 3 });
        spec.declare("b", &[2], Init::Zeros);
        let params = NetworkParams::<f32>::init(&spec, &mut Rng::new(1));
        let mut st = TrainState::fresh(params, AdamConfig::default());
        let g: Vec<_> = st.params.iter().map(|(_, t)| Some(t.map(|v| v * 0.5 + 0.1))).collect();
        st.adam.update(&mut st.params, &g, 0.01).unwrap();
        st.phase = 2;
        st.epoch = 70_000;
        st.best = Some(f64::from(0.8125f32));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        save_train_state(&path, &st).unwrap();
        let (params, back) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(back.as_ref(), Some(&st));
        assert_eq!(params, st.params);
    }

    #[test]
    fn plan_validation_lists_bad_prefixes() {
        let net = DualCoreNet::new(NetConfig::toy()).unwrap();
        let plan = TrainPlan {
            phases: vec![Phase {
                kind: PhaseKind::Lpl,
                epochs: 1,
                batch_size: 0,
                lr: 1e-3,
                trainable: vec!["nope".into()],
            }],
            adam: AdamConfig::default(),
            lambda: 0.67,
            beta: 0.01,
            joint_lpl_weight: 0.0,
            joint_cgl_weight: 0.0,
            joint_seg_weight: 0.0,
        };
        let Err(Error::Config(msg)) = plan.validate(&net) else { panic!() };
        assert!(msg.contains("nope") && msg.contains("batch size"));
    }
}
