//! Named parameter collections, He initialisation, and the `DCNCKPT1`
//! checkpoint container.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{read_exact, read_u32, Tensor};

const CKPT_MAGIC: &[u8; 8] = b"DCNCKPT1";

/// Index of a declared parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal(0, sqrt(2 / fan_in)).
    He {
        fan_in: usize,
    },
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Ordered declarations of every learnable tensor of an architecture.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSpec {
    decls: Vec<ParamDecl>,
}

impl ParamSpec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn declare(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        let name = name.into();
        assert!(self.decls.iter().all(|d| d.name != name), "duplicate parameter name {name}");
        self.decls.push(ParamDecl { name, shape: shape.to_vec(), init });
        ParamId(self.decls.len() - 1)
    }

    pub fn decls(&self) -> &[ParamDecl] {
        &self.decls
    }

    pub fn len(&self) -> usize {
        self.decls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decls.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.decls.iter().map(|d| d.shape.iter().product::<usize>()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.decls.iter().position(|d| d.name == name).map(ParamId)
    }
}

/// Scoped helper that prefixes parameter names.
pub struct ParamBuilder<'a> {
    spec: &'a mut ParamSpec,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(spec: &'a mut ParamSpec, prefix: &str) -> Self {
        ParamBuilder { spec, prefix: prefix.to_string() }
    }

    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = self.path(name);
        ParamBuilder { spec: self.spec, prefix }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn he(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let path = self.path(name);
        self.spec.declare(path, shape, Init::He { fan_in })
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let path = self.path(name);
        self.spec.declare(path, shape, Init::Zeros)
    }
}

/// Learnable tensors keyed by unique dotted names, in declaration order.
#[derive(Clone, PartialEq)]
pub struct NetworkParams<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> std::fmt::Debug for NetworkParams<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NetworkParams").field("count", &self.names.len()).finish()
    }
}

impl<T: Scalar> NetworkParams<T> {
    pub fn from_named(entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        let mut names = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        for (i, (name, t)) in entries.into_iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate parameter name {name}")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(NetworkParams { names, tensors, index })
    }

    /// He-normal weights, zero biases; deterministic in the seed.
    pub fn init(spec: &ParamSpec, rng: &mut Rng) -> Self {
        let entries = spec
            .decls()
            .iter()
            .map(|d| {
                let n: usize = d.shape.iter().product();
                let data = match d.init {
                    Init::Zeros => vec![T::zero(); n],
                    Init::He { fan_in } => {
                        let std = (2.0 / fan_in as f64).sqrt();
                        (0..n).map(|_| T::c(rng.normal() * std)).collect()
                    }
                };
                (d.name.clone(), Tensor::new(&d.shape, data).expect("declared shape"))
            })
            .collect();
        Self::from_named(entries).expect("spec names are unique")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Verifies names, order and shapes against `spec`, listing every
    /// mismatch.
    pub fn check_against(&self, spec: &ParamSpec) -> Result<()> {
        let mut problems = Vec::new();
        for d in spec.decls() {
            match self.get(&d.name) {
                None => problems.push(format!("  missing tensor `{}` {:?}", d.name, d.shape)),
                Some(t) if t.shape() != d.shape.as_slice() => {
                    problems.push(format!("  `{}`: checkpoint {:?}, architecture {:?}", d.name, t.shape(), d.shape))
                }
                Some(_) => {}
            }
        }
        for name in &self.names {
            if spec.id(name).is_none() {
                problems.push(format!("  unexpected tensor `{name}`"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::ParamMismatch(problems))
        }
    }

    /// Records every parameter on `tape`; those for which `trainable`
    /// returns false become constants and receive no gradient.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: impl Fn(&str) -> bool) -> BoundParams<'t, T> {
        let vars = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(name, t)| if trainable(name) { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        BoundParams { vars }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        write_named(w, self.names.iter().map(String::as_str).zip(&self.tensors))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_named(read_named(&mut BufReader::new(file), path)?)
    }
}

/// Parameters recorded on a tape for one forward/backward pass.
pub struct BoundParams<'t, T: Scalar> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> BoundParams<'t, T> {
    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    /// Gradient per parameter, in declaration order (`None` for constants).
    pub fn gradients(&self, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

/// Writes the `DCNCKPT1` container: header, u32 count, then per entry a u32
/// name length, UTF-8 name bytes and a `DCT1` tensor.
pub fn write_named<'a, T: Scalar, W: Write>(
    w: &mut W,
    entries: impl ExactSizeIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> std::io::Result<()> {
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        t.write_dct(w)?;
    }
    Ok(())
}

pub fn read_named<T: Scalar, R: Read>(r: &mut R, path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic, path)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::format(path, "not a DCNCKPT1 checkpoint (bad header)"));
    }
    let count = read_u32(r, path)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = read_u32(r, path)? as usize;
        if len > 4096 {
            return Err(Error::format(path, format!("implausible name length {len}")));
        }
        let mut name = vec![0u8; len];
        read_exact(r, &mut name, path)?;
        let name = String::from_utf8(name).map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
        let t = Tensor::read_dct(r, path)?;
        out.push((name, t));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ParamSpec {
        let mut s = ParamSpec::new();
        let mut b = ParamBuilder::new(&mut s, "net");
        b.scope("conv").he("weight", &[100, 100], 100);
        b.scope("conv").zeros("bias", &[100, 1, 1]);
        s
    }

    #[test]
    fn names_enumerate_in_declaration_order() {
        let s = spec();
        let names: Vec<_> = s.decls().iter().map(|d| d.name.as_str()).collect();
        assert_eq!(names, ["net.conv.weight", "net.conv.bias"]);
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let s = spec();
        let a = NetworkParams::<f32>::init(&s, &mut Rng::new(42));
        let b = NetworkParams::<f32>::init(&s, &mut Rng::new(42));
        let c = NetworkParams::<f32>::init(&s, &mut Rng::new(1));
        let z = NetworkParams::<f32>::init(&s, &mut Rng::new(0));
        assert!(a.iter().zip(b.iter()).all(|((_, x), (_, y))| x.bit_eq(y)));
        assert!(!c.get("net.conv.weight").unwrap().bit_eq(z.get("net.conv.weight").unwrap()));
        assert!(a.get("net.conv.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn he_variance_matches_fan_in() {
        let s = spec();
        let p = NetworkParams::<f64>::init(&s, &mut Rng::new(3));
        let w = p.get("net.conv.weight").unwrap().data();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        let target = 2.0 / 100.0;
        assert!((var - target).abs() / target < 0.1, "variance {var} vs {target}");
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch_report() {
        let s = spec();
        let p = NetworkParams::<f32>::init(&s, &mut Rng::new(5));
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let back =
            NetworkParams::from_named(read_named::<f32, _>(&mut buf.as_slice(), Path::new("m")).unwrap()).unwrap();
        assert!(back.iter().zip(p.iter()).all(|((n1, a), (n2, b))| n1 == n2 && a.bit_eq(b)));
        back.check_against(&s).unwrap();

        let mut other = ParamSpec::new();
        other.declare("net.conv.weight", &[100, 50], Init::Zeros);
        other.declare("net.extra", &[1], Init::Zeros);
        let Err(Error::ParamMismatch(lines)) = back.check_against(&other) else { panic!() };
        let text = lines.join("\n");
        assert!(text.contains("net.conv.weight") && text.contains("net.extra") && text.contains("net.conv.bias"));

        buf[0] = b'X';
        assert!(read_named::<f32, _>(&mut buf.as_slice(), Path::new("m")).is_err());
    }
}
