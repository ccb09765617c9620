//! INI run configuration. Sections `[network]`, `[crf]`, `[training]`,
//! `[data]` and `[run]`; every key is optional and overrides a default.
//! All problems in a file are reported together.

use std::collections::BTreeMap;
use std::fmt::{Display, Write as _};
use std::path::Path;
use std::str::FromStr;

use ini::Ini;

use crate::crf::CrfConfig;
use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::net::{DualCoreNet, NetConfig};
use crate::scalar::Precision;
use crate::train::{AdamConfig, Phase, PhaseKind, TrainPlan};

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Fraction of images in the training split.
    pub split_ratio: f64,
    /// Train on all four flips of every training sample.
    pub augment: bool,
    /// Soft-mask binarization threshold.
    pub threshold: f64,
    pub synth: SynthSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { split_ratio: 0.8, augment: true, threshold: 0.5, synth: SynthSpec::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub eval_batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { seed: 1, precision: Precision::F32, eval_batch_size: 8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub network: NetConfig,
    pub crf: CrfConfig,
    pub training: TrainPlan,
    pub data: DataConfig,
    pub run: RunConfig,
}

pub fn default_plan() -> TrainPlan {
    let phase =
        |kind: PhaseKind, epochs, lr| Phase { kind, epochs, batch_size: 4, lr, trainable: kind.default_trainable() };
    TrainPlan {
        phases: vec![
            phase(PhaseKind::Lpl, 10, 1e-3),
            phase(PhaseKind::CglSeg, 15, 1e-3),
            phase(PhaseKind::CglCls, 15, 1e-3),
            phase(PhaseKind::Joint, 3, 1e-4),
        ],
        adam: AdamConfig::default(),
        lambda: 0.67,
        beta: 0.01,
        joint_lpl_weight: 0.0,
        joint_cgl_weight: 0.0,
        joint_seg_weight: 0.0,
    }
}

impl Default for Config {
    fn default() -> Self {
        Config {
            network: NetConfig::desk(),
            crf: CrfConfig::default(),
            training: default_plan(),
            data: DataConfig::default(),
            run: RunConfig::default(),
        }
    }
}

const SECTIONS: [&str; 5] = ["network", "crf", "training", "data", "run"];

/// Keys of one section, consumed as they are read; leftovers are unknown.
struct Section<'e> {
    name: &'static str,
    keys: BTreeMap<String, String>,
    errors: &'e mut Vec<String>,
}

impl Section<'_> {
    fn take(&mut self, key: &str) -> Option<String> {
        self.keys.remove(key)
    }

    fn read<V: FromStr>(&mut self, key: &str, into: &mut V)
    where
        V::Err: Display,
    {
        if let Some(raw) = self.take(key) {
            match raw.parse() {
                Ok(v) => *into = v,
                Err(e) => self.errors.push(format!("[{}] {key} = {raw}: {e}", self.name)),
            }
        }
    }

    fn read_list<V: FromStr>(&mut self, key: &str) -> Option<Vec<V>>
    where
        V::Err: Display,
    {
        let raw = self.take(key)?;
        let parsed: std::result::Result<Vec<V>, String> =
            raw.split(',').map(|s| s.trim().parse::<V>().map_err(|e| e.to_string())).collect();
        match parsed {
            Ok(v) => Some(v),
            Err(e) => {
                self.errors.push(format!("[{}] {key} = {raw}: {e}", self.name));
                None
            }
        }
    }

    fn read_array<V: FromStr + Copy, const N: usize>(&mut self, key: &str, into: &mut [V; N])
    where
        V::Err: Display,
    {
        if let Some(v) = self.read_list::<V>(key) {
            match <[V; N]>::try_from(v) {
                Ok(a) => *into = a,
                Err(v) => self.errors.push(format!("[{}] {key}: expected {N} values, got {}", self.name, v.len())),
            }
        }
    }

    fn finish(self) {
        for key in self.keys.keys() {
            self.errors.push(format!("[{}] unknown key `{key}`", self.name));
        }
    }
}

struct Bool(bool);

impl FromStr for Bool {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "true" | "yes" | "1" => Ok(Bool(true)),
            "false" | "no" | "0" => Ok(Bool(false)),
            _ => Err("expected true or false".into()),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Config::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Parses and fully validates a configuration.
    pub fn parse(text: &str) -> Result<Config> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::config(format!("malformed config: {e}")))?;
        let mut errors = Vec::new();
        let mut sections: BTreeMap<&'static str, BTreeMap<String, String>> = BTreeMap::new();
        for (name, props) in ini.iter() {
            let Some(name) = name else {
                for (k, _) in props.iter() {
                    errors.push(format!("key `{k}` outside any section"));
                }
                continue;
            };
            let Some(&known) = SECTIONS.iter().find(|s| **s == name) else {
                errors.push(format!("unknown section [{name}]"));
                continue;
            };
            let keys = sections.entry(known).or_default();
            for (k, v) in props.iter() {
                if keys.insert(k.to_string(), v.trim().to_string()).is_some() {
                    errors.push(format!("[{known}] duplicate key `{k}`"));
                }
            }
        }
        let mut section = |name: &str| sections.remove(name).unwrap_or_default();

        let mut cfg = Config::default();

        let keys = section("network");
        let mut s = Section { name: "network", keys, errors: &mut errors };
        if let Some(preset) = s.take("preset") {
            match NetConfig::preset(&preset) {
                Ok(n) => cfg.network = n,
                Err(e) => s.errors.push(format!("[network] preset: {e}")),
            }
        }
        let n = &mut cfg.network;
        s.read("context_size", &mut n.context_size);
        s.read("bbox_size", &mut n.bbox_size);
        s.read("mask_size", &mut n.mask_size);
        s.read("in_channels", &mut n.in_channels);
        s.read_array("lpl_widths", &mut n.lpl_widths);
        s.read("lpl_middle_blocks", &mut n.lpl_middle_blocks);
        s.read("lpl_kernel", &mut n.lpl_kernel);
        s.read_array("cgl_widths", &mut n.cgl_widths);
        s.read("cgl_kernel", &mut n.cgl_kernel);
        s.read_array("head_widths", &mut n.head_widths);
        s.read("head_kernel", &mut n.head_kernel);
        s.read("dense_units", &mut n.dense_units);
        s.read("dropout", &mut n.dropout);
        s.read("cgl_input", &mut n.cgl_input);
        s.read("crf_resolution", &mut n.crf_resolution);
        s.finish();

        let keys = section("crf");
        let mut s = Section { name: "crf", keys, errors: &mut errors };
        let c = &mut cfg.crf;
        s.read("iterations", &mut c.iterations);
        s.read("spatial_theta", &mut c.spatial_theta);
        s.read("bilateral_theta_spatial", &mut c.bilateral_theta_spatial);
        s.read("bilateral_theta_intensity", &mut c.bilateral_theta_intensity);
        s.read("w_spatial", &mut c.w_spatial);
        s.read("w_bilateral", &mut c.w_bilateral);
        let mut mu = [0.0; 4];
        let before = s.errors.len();
        if s.keys.contains_key("compatibility") {
            s.read_array("compatibility", &mut mu);
            if s.errors.len() == before {
                c.compatibility = [[mu[0], mu[1]], [mu[2], mu[3]]];
            }
        }
        s.read("reference_size", &mut c.reference_size);
        s.finish();

        let keys = section("training");
        let mut s = Section { name: "training", keys, errors: &mut errors };
        let t = &mut cfg.training;
        s.read("lambda", &mut t.lambda);
        s.read("beta", &mut t.beta);
        s.read("adam_beta1", &mut t.adam.beta1);
        s.read("adam_beta2", &mut t.adam.beta2);
        s.read("adam_eps", &mut t.adam.eps);
        s.read("joint_lpl_weight", &mut t.joint_lpl_weight);
        s.read("joint_cgl_weight", &mut t.joint_cgl_weight);
        s.read("joint_seg_weight", &mut t.joint_seg_weight);
        let mut batch_size = None;
        if let Some(raw) = s.take("batch_size") {
            match raw.parse::<usize>() {
                Ok(b) => batch_size = Some(b),
                Err(e) => s.errors.push(format!("[training] batch_size = {raw}: {e}")),
            }
        }
        let mut phases: Vec<Phase> = default_plan().phases;
        for ph in &mut phases {
            if let Some(b) = batch_size {
                ph.batch_size = b;
            }
            let k = ph.kind.name();
            s.read(&format!("{k}_epochs"), &mut ph.epochs);
            s.read(&format!("{k}_lr"), &mut ph.lr);
            s.read(&format!("{k}_batch_size"), &mut ph.batch_size);
            if let Some(list) = s.read_list::<String>(&format!("{k}_trainable")) {
                ph.trainable = list;
            }
        }
        if let Some(order) = s.read_list::<PhaseKind>("phases") {
            t.phases =
                order.iter().map(|k| phases.iter().find(|p| p.kind == *k).expect("every kind").clone()).collect();
        } else {
            t.phases = phases;
        }
        s.finish();

        let keys = section("data");
        let mut s = Section { name: "data", keys, errors: &mut errors };
        let d = &mut cfg.data;
        s.read("split_ratio", &mut d.split_ratio);
        let mut augment = Bool(d.augment);
        s.read("augment", &mut augment);
        d.augment = augment.0;
        s.read("threshold", &mut d.threshold);
        s.read("synth_size", &mut d.synth.size);
        let mut pair = [d.synth.radius.0, d.synth.radius.1];
        s.read_array("synth_radius", &mut pair);
        d.synth.radius = (pair[0], pair[1]);
        s.read("synth_contrast", &mut d.synth.contrast);
        s.read("synth_noise", &mut d.synth.noise);
        s.read("synth_edge", &mut d.synth.edge);
        let mut pair = [d.synth.spike_amplitude.0, d.synth.spike_amplitude.1];
        s.read_array("synth_spike_amplitude", &mut pair);
        d.synth.spike_amplitude = (pair[0], pair[1]);
        s.finish();

        let keys = section("run");
        let mut s = Section { name: "run", keys, errors: &mut errors };
        s.read("seed", &mut cfg.run.seed);
        s.read("precision", &mut cfg.run.precision);
        s.read("eval_batch_size", &mut cfg.run.eval_batch_size);
        s.finish();

        if errors.is_empty() {
            errors.extend(cfg.check());
        }
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::config(format!("{} problem(s):\n  {}", errors.len(), errors.join("\n  "))))
        }
    }

    /// Cross-field validation; empty when the configuration is usable.
    pub fn check(&self) -> Vec<String> {
        let mut errors = Vec::new();
        let mut push = |e: Error| errors.push(e.to_string());
        match self.network.validate().and_then(|_| DualCoreNet::new(self.network.clone())) {
            Ok(net) => {
                if let Err(e) = self.training.validate(&net) {
                    push(e);
                }
            }
            Err(e) => push(e),
        }
        if let Err(e) = self.crf.validate() {
            push(e);
        }
        let d = &self.data;
        if !(d.split_ratio > 0.0 && d.split_ratio < 1.0) {
            errors.push(format!("[data] split_ratio {} must be in (0, 1)", d.split_ratio));
        }
        if !(d.threshold > 0.0 && d.threshold <= 1.0) {
            errors.push(format!("[data] threshold {} must be in (0, 1]", d.threshold));
        }
        if d.synth.size < 16
            || d.synth.radius.0 <= 0.0
            || d.synth.radius.0 > d.synth.radius.1
            || d.synth.radius.1 >= 0.5
        {
            errors.push("[data] synth_size must be >= 16 and 0 < synth_radius min <= max < 0.5".into());
        }
        if self.run.eval_batch_size == 0 {
            errors.push("[run] eval_batch_size must be >= 1".into());
        }
        let a = &self.training.adam;
        if !(a.beta1 > 0.0 && a.beta1 < 1.0 && a.beta2 > 0.0 && a.beta2 < 1.0 && a.eps > 0.0) {
            errors.push("[training] adam betas must be in (0, 1) and adam_eps > 0".into());
        }
        errors
    }

    /// Soft warnings from the CRF settings.
    pub fn warnings(&self) -> Vec<String> {
        self.crf.validate().unwrap_or_default()
    }

    /// Every setting as INI text; [`Config::parse`] of the result gives back
    /// `self`.
    pub fn to_ini(&self) -> String {
        fn list<V: Display>(v: &[V]) -> String {
            v.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
        }
        let mut o = String::new();
        let n = &self.network;
        let _ = writeln!(o, "[network]");
        let _ = writeln!(o, "preset = {}", n.preset);
        let _ = writeln!(o, "context_size = {}", n.context_size);
        let _ = writeln!(o, "bbox_size = {}", n.bbox_size);
        let _ = writeln!(o, "mask_size = {}", n.mask_size);
        let _ = writeln!(o, "in_channels = {}", n.in_channels);
        let _ = writeln!(o, "lpl_widths = {}", list(&n.lpl_widths));
        let _ = writeln!(o, "lpl_middle_blocks = {}", n.lpl_middle_blocks);
        let _ = writeln!(o, "lpl_kernel = {}", n.lpl_kernel);
        let _ = writeln!(o, "cgl_widths = {}", list(&n.cgl_widths));
        let _ = writeln!(o, "cgl_kernel = {}", n.cgl_kernel);
        let _ = writeln!(o, "head_widths = {}", list(&n.head_widths));
        let _ = writeln!(o, "head_kernel = {}", n.head_kernel);
        let _ = writeln!(o, "dense_units = {}", n.dense_units);
        let _ = writeln!(o, "dropout = {:?}", n.dropout);
        let _ = writeln!(o, "cgl_input = {}", n.cgl_input);
        let _ = writeln!(o, "crf_resolution = {}", n.crf_resolution);

        let c = &self.crf;
        let _ = writeln!(o, "\n[crf]");
        let _ = writeln!(o, "iterations = {}", c.iterations);
        let _ = writeln!(o, "spatial_theta = {:?}", c.spatial_theta);
        let _ = writeln!(o, "bilateral_theta_spatial = {:?}", c.bilateral_theta_spatial);
        let _ = writeln!(o, "bilateral_theta_intensity = {:?}", c.bilateral_theta_intensity);
        let _ = writeln!(o, "w_spatial = {:?}", c.w_spatial);
        let _ = writeln!(o, "w_bilateral = {:?}", c.w_bilateral);
        let mu = c.compatibility;
        let _ = writeln!(o, "compatibility = {:?}, {:?}, {:?}, {:?}", mu[0][0], mu[0][1], mu[1][0], mu[1][1]);
        let _ = writeln!(o, "reference_size = {:?}", c.reference_size);

        let t = &self.training;
        let _ = writeln!(o, "\n[training]");
        let _ = writeln!(o, "phases = {}", list(&t.phases.iter().map(|p| p.kind).collect::<Vec<_>>()));
        let _ = writeln!(o, "lambda = {:?}", t.lambda);
        let _ = writeln!(o, "beta = {:?}", t.beta);
        let _ = writeln!(o, "adam_beta1 = {:?}", t.adam.beta1);
        let _ = writeln!(o, "adam_beta2 = {:?}", t.adam.beta2);
        let _ = writeln!(o, "adam_eps = {:?}", t.adam.eps);
        let _ = writeln!(o, "joint_lpl_weight = {:?}", t.joint_lpl_weight);
        let _ = writeln!(o, "joint_cgl_weight = {:?}", t.joint_cgl_weight);
        let _ = writeln!(o, "joint_seg_weight = {:?}", t.joint_seg_weight);
        for p in &t.phases {
            let k = p.kind.name();
            let _ = writeln!(o, "{k}_epochs = {}", p.epochs);
            let _ = writeln!(o, "{k}_lr = {:?}", p.lr);
            let _ = writeln!(o, "{k}_batch_size = {}", p.batch_size);
            let _ = writeln!(o, "{k}_trainable = {}", p.trainable.join(", "));
        }

        let d = &self.data;
        let _ = writeln!(o, "\n[data]");
        let _ = writeln!(o, "split_ratio = {:?}", d.split_ratio);
        let _ = writeln!(o, "augment = {}", d.augment);
        let _ = writeln!(o, "threshold = {:?}", d.threshold);
        let _ = writeln!(o, "synth_size = {}", d.synth.size);
        let _ = writeln!(o, "synth_radius = {:?}, {:?}", d.synth.radius.0, d.synth.radius.1);
        let _ = writeln!(o, "synth_contrast = {:?}", d.synth.contrast);
        let _ = writeln!(o, "synth_noise = {:?}", d.synth.noise);
        let _ = writeln!(o, "synth_edge = {:?}", d.synth.edge);
        let _ = writeln!(o, "synth_spike_amplitude = {:?}, {:?}", d.synth.spike_amplitude.0, d.synth.spike_amplitude.1);

        let _ = writeln!(o, "\n[run]");
        let _ = writeln!(o, "seed = {}", self.run.seed);
        let _ = writeln!(o, "precision = {}", self.run.precision);
        let _ = writeln!(o, "eval_batch_size = {}", self.run.eval_batch_size);
        o
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_defaults() {
        assert_eq!(Config::parse("").unwrap(), Config::default());
        assert_eq!(Config::parse("# nothing\n[training]\n").unwrap().training.lambda, 0.67);
    }

    #[test]
    fn overrides_apply_after_preset() {
        let c = Config::parse("[network]\npreset = toy\ndense_units = 7\n[crf]\nw_bilateral = 0\n[training]\nbatch_size = 2\ncgl_seg_epochs = 9\nphases = cgl_seg\n")
            .unwrap();
        assert_eq!(c.network.preset, "toy");
        assert_eq!(c.network.dense_units, 7);
        assert_eq!(c.crf.w_bilateral, 0.0);
        assert_eq!(c.training.phases.len(), 1);
        assert_eq!(
            (c.training.phases[0].kind, c.training.phases[0].epochs, c.training.phases[0].batch_size),
            (PhaseKind::CglSeg, 9, 2)
        );
    }

    #[test]
    fn all_problems_reported_together() {
        let err = Config::parse("[network]\nbogus = 1\ndropout = lots\n[crf]\niterations = -1\n[extra]\nx = 1\n")
            .unwrap_err();
        let msg = err.to_string();
        assert!(err.is_usage());
        for needle in
            ["unknown key `bogus`", "dropout = lots", "iterations = -1", "unknown section [extra]", "4 problem(s)"]
        {
            assert!(msg.contains(needle), "{needle} missing from {msg}");
        }
    }

    #[test]
    fn semantic_errors_are_config_errors() {
        let err = Config::parse("[network]\nbbox_size = 12\n").unwrap_err();
        assert!(err.is_usage() && err.to_string().contains("multiple of 8"));
        assert!(Config::parse("[data]\nsplit_ratio = 1.5\n").unwrap_err().is_usage());
        assert!(Config::parse("[training]\nlpl_trainable = nothing\n")
            .unwrap_err()
            .to_string()
            .contains("matches no parameter"));
    }

    #[test]
    fn ini_round_trip() {
        let mut c = Config::default();
        c.crf.bilateral_theta_intensity = 0.1 + 0.2;
        c.training.phases.remove(0);
        c.data.augment = false;
        c.run.precision = Precision::F64;
        assert_eq!(Config::parse(&c.to_ini()).unwrap(), c);
    }
}
