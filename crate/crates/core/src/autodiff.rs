//! Minimal reverse-mode differentiation over a fixed operator set.
//!
//! The tape records every primitive application in order; [`Tape::backward`]
//! replays it in reverse, accumulating adjoints in tape order so gradients
//! are bit-reproducible. The operator set is deliberately closed: it is
//! exactly what the equivariant layers need, which keeps the
//! finite-difference audit in [`grad_check`] exhaustive.
//!
//! Tensors are dense row-major `f64` arrays with explicit shapes. The layer
//! code uses three layouts: scalar features `[C]` / `[T, C]`, vector
//! features `[C, 3]` / `[T, C, 3]`, and weight matrices `[Co, Ci]` or
//! `[Co, Ci, Kw]`.

use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg} (shape {shape:?})")]
    BadShape {
        op: &'static str,
        msg: &'static str,
        shape: Vec<usize>,
    },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("duplicate parameter name: {0}")]
    DuplicateParameter(String),
    #[error("tensor data length {got} does not match shape {shape:?} ({want})")]
    DataLength {
        shape: Vec<usize>,
        want: usize,
        got: usize,
    },
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AdError> {
        let want: usize = shape.iter().product();
        if data.len() != want {
            return Err(AdError::DataLength { shape, want, got: data.len() });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(x: f64) -> Tensor {
        Tensor { shape: vec![], data: vec![x] }
    }

    pub fn filled(shape: &[usize], x: f64) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![x; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Stack 3-vectors into a `[N, 3]` tensor.
    pub fn from_vec3s(vs: &[crate::geom::Vec3]) -> Tensor {
        let mut data = Vec::with_capacity(vs.len() * 3);
        for v in vs {
            data.extend_from_slice(&[v.x, v.y, v.z]);
        }
        Tensor { shape: vec![vs.len(), 3], data }
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameter store. Slot indices are stable once assigned, so the
/// optimizer, checkpoints and gradients all address parameters by slot.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct ParamSet {
    params: Vec<Parameter>,
    #[serde(skip)]
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<usize, AdError> {
        if self.by_name.contains_key(name) {
            return Err(AdError::DuplicateParameter(name.to_string()));
        }
        let slot = self.params.len();
        self.by_name.insert(name.to_string(), slot);
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            trainable: true,
        });
        Ok(slot)
    }

    /// Rebuild the name index after deserialization.
    pub fn reindex(&mut self) {
        self.by_name = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, slot: usize) -> &Parameter {
        &self.params[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Parameter {
        &mut self.params[slot]
    }

    pub fn value(&self, slot: usize) -> &Tensor {
        &self.params[slot].value
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Parameter> {
        self.params.iter()
    }

    /// Total number of trainable coordinates.
    pub fn trainable_len(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }
}

/// Per-slot gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    by_slot: Vec<Option<Tensor>>,
}

impl Gradients {
    fn empty(n: usize) -> Gradients {
        Gradients { by_slot: vec![None; n] }
    }

    pub fn get(&self, slot: usize) -> Option<&Tensor> {
        self.by_slot.get(slot).and_then(|g| g.as_ref())
    }

    pub fn slots(&self) -> usize {
        self.by_slot.len()
    }

    /// Accumulate another gradient set (fixed order: caller iterates shards
    /// in a deterministic sequence).
    pub fn accumulate(&mut self, other: &Gradients) {
        if other.by_slot.len() > self.by_slot.len() {
            self.by_slot.resize(other.by_slot.len(), None);
        }
        for (slot, g) in other.by_slot.iter().enumerate() {
            if let Some(g) = g {
                match &mut self.by_slot[slot] {
                    Some(acc) => {
                        for (a, b) in acc.data.iter_mut().zip(g.data.iter()) {
                            *a += b;
                        }
                    }
                    none => *none = Some(g.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.by_slot.iter_mut().flatten() {
            for x in g.data.iter_mut() {
                *x *= k;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(u32);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(usize),
    Add(ValueId, ValueId),
    AddSuffix(ValueId, ValueId),
    Scale(ValueId, f64),
    Shift(ValueId),
    Mul(ValueId, ValueId),
    MulPrefix(ValueId, ValueId),
    Recip(ValueId),
    Sqrt(ValueId),
    Sin(ValueId),
    Cos(ValueId),
    Matmul(ValueId, ValueId),
    ChannelMixV(ValueId, ValueId),
    ChannelMixS(ValueId, ValueId),
    Conv1d {
        kernel: ValueId,
        input: ValueId,
        stride: usize,
        pad: usize,
        comps: usize,
    },
    UpsampleT(ValueId, usize),
    Repeat0(ValueId, usize),
    MeanAxis0(ValueId),
    SumAxis0(ValueId),
    MeanLast(ValueId),
    SumLast(ValueId),
    MeanAll(ValueId),
    SumAll(ValueId),
    VectorNorm(ValueId),
    Inner(ValueId, ValueId),
    GramUpper(ValueId, usize),
    Concat { parts: Vec<ValueId>, axis: usize },
    Slice { src: ValueId, axis: usize, start: usize, len: usize },
    SelectGeV { x: ValueId, y: ValueId, gate: ValueId },
    SelectGeS { x: ValueId, y: ValueId, gate: ValueId },
    Reshape(ValueId),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

type OpResult = Result<ValueId, AdError>;

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AdError {
    AdError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0 as usize].value
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        self.nodes[id.0 as usize].value.shape()
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0 as usize].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> ValueId {
        let id = ValueId(self.nodes.len() as u32);
        self.nodes.push(Node { value, op, needs_grad });
        id
    }

    /// Constant input; no gradient flows into it.
    pub fn leaf(&mut self, value: Tensor) -> ValueId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable parameter occupying `slot` in the owning [`ParamSet`].
    pub fn param(&mut self, slot: usize, value: Tensor) -> ValueId {
        self.push(value, Op::Param(slot), true)
    }

    // -- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: ValueId, b: ValueId) -> OpResult {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor { shape: self.shape(a).to_vec(), data };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    /// Add `b` broadcast over the leading axes of `a` (`b.shape` must be a
    /// suffix of `a.shape`).
    pub fn add_suffix(&mut self, a: ValueId, b: ValueId) -> OpResult {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || &sa[sa.len() - sb.len()..] != sb {
            return Err(mismatch("add_suffix", sa, sb));
        }
        let period = self.value(b).numel().max(1);
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + self.value(b).data()[i % period])
            .collect();
        let value = Tensor { shape: sa.to_vec(), data };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::AddSuffix(a, b), needs))
    }

    pub fn scale(&mut self, a: ValueId, k: f64) -> ValueId {
        let data = self.value(a).data().iter().map(|x| x * k).collect();
        let value = Tensor { shape: self.shape(a).to_vec(), data };
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, k), needs)
    }

    pub fn shift(&mut self, a: ValueId, k: f64) -> ValueId {
        let data = self.value(a).data().iter().map(|x| x + k).collect();
        let value = Tensor { shape: self.shape(a).to_vec(), data };
        let needs = self.needs(a);
        self.push(value, Op::Shift(a), needs)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> OpResult {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> OpResult {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor { shape: self.shape(a).to_vec(), data };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    /// Multiply `a` by `g` broadcast over the trailing axes of `a`
    /// (`g.shape` must be a prefix of `a.shape`).
    pub fn mul_prefix(&mut self, a: ValueId, g: ValueId) -> OpResult {
        let (sa, sg) = (self.shape(a), self.shape(g));
        if sg.len() > sa.len() || &sa[..sg.len()] != sg {
            return Err(mismatch("mul_prefix", sa, sg));
        }
        let block = self.value(a).numel() / self.value(g).numel().max(1);
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * self.value(g).data()[i / block])
            .collect();
        let value = Tensor { shape: sa.to_vec(), data };
        let needs = self.needs(a) || self.needs(g);
        Ok(self.push(value, Op::MulPrefix(a, g), needs))
    }

    pub fn recip(&mut self, a: ValueId) -> ValueId {
        let data = self.value(a).data().iter().map(|x| 1.0 / x).collect();
        let value = Tensor { shape: self.shape(a).to_vec(), data };
        let needs = self.needs(a);
        self.push(value, Op::Recip(a), needs)
    }

    pub fn sqrt(&mut self, a: ValueId) -> ValueId {
        let data = self.value(a).data().iter().map(|x| x.sqrt()).collect();
        let value = Tensor { shape: self.shape(a).to_vec(), data };
        let needs = self.needs(a);
        self.push(value, Op::Sqrt(a), needs)
    }

    pub fn sin(&mut self, a: ValueId) -> ValueId {
        let data = self.value(a).data().iter().map(|x| x.sin()).collect();
        let value = Tensor { shape: self.shape(a).to_vec(), data };
        let needs = self.needs(a);
        self.push(value, Op::Sin(a), needs)
    }

    pub fn cos(&mut self, a: ValueId) -> ValueId {
        let data = self.value(a).data().iter().map(|x| x.cos()).collect();
        let value = Tensor { shape: self.shape(a).to_vec(), data };
        let needs = self.needs(a);
        self.push(value, Op::Cos(a), needs)
    }

    // -- linear maps ------------------------------------------------------

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> OpResult {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..m {
            for l in 0..k {
                let av = da[i * k + l];
                if av == 0.0 {
                    continue;
                }
                let brow = &db[l * n..(l + 1) * n];
                let orow = &mut data[i * n..(i + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let value = Tensor { shape: vec![m, n], data };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Matmul(a, b), needs))
    }

    /// Channel mix of vector features: `out[.., o, d] = Σᵢ W[o, i]·V[.., i, d]`.
    /// `V` is `[Ci, 3]` or `[T, Ci, 3]`; spatial components never mix.
    pub fn channel_mix_v(&mut self, w: ValueId, v: ValueId) -> OpResult {
        let (sw, sv) = (self.shape(w), self.shape(v));
        let ok = sw.len() == 2
            && (sv.len() == 2 || sv.len() == 3)
            && *sv.last().unwrap() == 3
            && sv[sv.len() - 2] == sw[1];
        if !ok {
            return Err(mismatch("channel_mix_v", sw, sv));
        }
        let (co, ci) = (sw[0], sw[1]);
        let t = if sv.len() == 3 { sv[0] } else { 1 };
        let mut data = vec![0.0; t * co * 3];
        let (dw, dv) = (self.value(w).data(), self.value(v).data());
        for ti in 0..t {
            let vin = &dv[ti * ci * 3..(ti + 1) * ci * 3];
            let vout = &mut data[ti * co * 3..(ti + 1) * co * 3];
            for o in 0..co {
                let wrow = &dw[o * ci..(o + 1) * ci];
                let mut acc = [0.0; 3];
                for (i, wv) in wrow.iter().enumerate() {
                    acc[0] += wv * vin[i * 3];
                    acc[1] += wv * vin[i * 3 + 1];
                    acc[2] += wv * vin[i * 3 + 2];
                }
                vout[o * 3..o * 3 + 3].copy_from_slice(&acc);
            }
        }
        let shape = if sv.len() == 3 { vec![t, co, 3] } else { vec![co, 3] };
        let value = Tensor { shape, data };
        let needs = self.needs(w) || self.needs(v);
        Ok(self.push(value, Op::ChannelMixV(w, v), needs))
    }

    /// Channel mix of scalar features: `X` is `[Ci]` or `[T, Ci]`.
    pub fn channel_mix_s(&mut self, w: ValueId, x: ValueId) -> OpResult {
        let (sw, sx) = (self.shape(w), self.shape(x));
        let ok = sw.len() == 2 && !sx.is_empty() && sx.len() <= 2 && *sx.last().unwrap() == sw[1];
        if !ok {
            return Err(mismatch("channel_mix_s", sw, sx));
        }
        let (co, ci) = (sw[0], sw[1]);
        let t = if sx.len() == 2 { sx[0] } else { 1 };
        let mut data = vec![0.0; t * co];
        let (dw, dx) = (self.value(w).data(), self.value(x).data());
        for ti in 0..t {
            let xin = &dx[ti * ci..(ti + 1) * ci];
            let xout = &mut data[ti * co..(ti + 1) * co];
            for (o, out) in xout.iter_mut().enumerate() {
                let wrow = &dw[o * ci..(o + 1) * ci];
                *out = wrow.iter().zip(xin).map(|(a, b)| a * b).sum();
            }
        }
        let shape = if sx.len() == 2 { vec![t, co] } else { vec![co] };
        let value = Tensor { shape, data };
        let needs = self.needs(w) || self.needs(x);
        Ok(self.push(value, Op::ChannelMixS(w, x), needs))
    }

    /// 1D convolution over the leading time axis with zero padding. The
    /// kernel is `[Co, Ci, Kw]`; the input is `[T, Ci]` (scalar features) or
    /// `[T, Ci, 3]` (vector features, components convolved independently).
    pub fn conv1d(&mut self, kernel: ValueId, input: ValueId, stride: usize, pad: usize) -> OpResult {
        let (sk, si) = (self.shape(kernel), self.shape(input));
        let comps = match si.len() {
            2 => 1,
            3 if si[2] == 3 => 3,
            _ => return Err(mismatch("conv1d", sk, si)),
        };
        if sk.len() != 3 || sk[1] != si[1] {
            return Err(mismatch("conv1d", sk, si));
        }
        let (co, ci, kw) = (sk[0], sk[1], sk[2]);
        let t_in = si[0];
        if t_in + 2 * pad < kw || stride == 0 {
            return Err(AdError::BadShape {
                op: "conv1d",
                msg: "temporal length shorter than kernel with chosen padding",
                shape: si.to_vec(),
            });
        }
        let t_out = (t_in + 2 * pad - kw) / stride + 1;
        let mut data = vec![0.0; t_out * co * comps];
        let (dk, di) = (self.value(kernel).data(), self.value(input).data());
        for to in 0..t_out {
            for o in 0..co {
                let mut acc = [0.0; 3];
                for k in 0..kw {
                    let tx = (to * stride + k) as isize - pad as isize;
                    if tx < 0 || tx as usize >= t_in {
                        continue;
                    }
                    let tx = tx as usize;
                    let krow = &dk[(o * ci) * kw + k..];
                    for i in 0..ci {
                        let kv = krow[i * kw];
                        let base = (tx * ci + i) * comps;
                        for d in 0..comps {
                            acc[d] += kv * di[base + d];
                        }
                    }
                }
                let base = (to * co + o) * comps;
                data[base..base + comps].copy_from_slice(&acc[..comps]);
            }
        }
        let shape = if comps == 3 { vec![t_out, co, 3] } else { vec![t_out, co] };
        let value = Tensor { shape, data };
        let needs = self.needs(kernel) || self.needs(input);
        Ok(self.push(value, Op::Conv1d { kernel, input, stride, pad, comps }, needs))
    }

    /// Nearest-neighbour upsampling along the time axis: each timestep is
    /// repeated `factor` times.
    pub fn upsample_t(&mut self, a: ValueId, factor: usize) -> OpResult {
        let sa = self.shape(a);
        if sa.is_empty() || factor == 0 {
            return Err(AdError::BadShape {
                op: "upsample_t",
                msg: "needs a leading time axis and factor ≥ 1",
                shape: sa.to_vec(),
            });
        }
        let t = sa[0];
        let inner: usize = sa[1..].iter().product();
        let mut data = Vec::with_capacity(t * factor * inner);
        let din = self.value(a).data();
        for ti in 0..t {
            for _ in 0..factor {
                data.extend_from_slice(&din[ti * inner..(ti + 1) * inner]);
            }
        }
        let mut shape = sa.to_vec();
        shape[0] = t * factor;
        let value = Tensor { shape, data };
        let needs = self.needs(a);
        Ok(self.push(value, Op::UpsampleT(a, factor), needs))
    }

    /// Prepend a new leading axis of extent `n` by repetition.
    pub fn repeat0(&mut self, a: ValueId, n: usize) -> OpResult {
        if n == 0 {
            return Err(AdError::BadShape {
                op: "repeat0",
                msg: "repeat count must be ≥ 1",
                shape: self.shape(a).to_vec(),
            });
        }
        let inner = self.value(a).numel();
        let mut data = Vec::with_capacity(n * inner);
        for _ in 0..n {
            data.extend_from_slice(self.value(a).data());
        }
        let mut shape = vec![n];
        shape.extend_from_slice(self.shape(a));
        let value = Tensor { shape, data };
        let needs = self.needs(a);
        Ok(self.push(value, Op::Repeat0(a, n), needs))
    }

    // -- reductions -------------------------------------------------------

    fn reduce_axis0(&mut self, a: ValueId, mean: bool) -> OpResult {
        let sa = self.shape(a);
        if sa.is_empty() {
            return Err(AdError::BadShape {
                op: "reduce_axis0",
                msg: "needs at least one axis",
                shape: sa.to_vec(),
            });
        }
        let n = sa[0];
        let inner: usize = sa[1..].iter().product();
        let mut data = vec![0.0; inner];
        let din = self.value(a).data();
        for i in 0..n {
            for (o, x) in data.iter_mut().zip(&din[i * inner..(i + 1) * inner]) {
                *o += x;
            }
        }
        if mean {
            let inv = 1.0 / n as f64;
            for o in data.iter_mut() {
                *o *= inv;
            }
        }
        let value = Tensor { shape: sa[1..].to_vec(), data };
        let needs = self.needs(a);
        let op = if mean { Op::MeanAxis0(a) } else { Op::SumAxis0(a) };
        Ok(self.push(value, op, needs))
    }

    pub fn mean_axis0(&mut self, a: ValueId) -> OpResult {
        self.reduce_axis0(a, true)
    }

    pub fn sum_axis0(&mut self, a: ValueId) -> OpResult {
        self.reduce_axis0(a, false)
    }

    fn reduce_last(&mut self, a: ValueId, mean: bool) -> OpResult {
        let sa = self.shape(a);
        if sa.is_empty() {
            return Err(AdError::BadShape {
                op: "reduce_last",
                msg: "needs at least one axis",
                shape: sa.to_vec(),
            });
        }
        let c = *sa.last().unwrap();
        let outer: usize = sa[..sa.len() - 1].iter().product();
        let din = self.value(a).data();
        let mut data = vec![0.0; outer];
        for (i, o) in data.iter_mut().enumerate() {
            *o = din[i * c..(i + 1) * c].iter().sum();
            if mean {
                *o /= c as f64;
            }
        }
        let value = Tensor { shape: sa[..sa.len() - 1].to_vec(), data };
        let needs = self.needs(a);
        let op = if mean { Op::MeanLast(a) } else { Op::SumLast(a) };
        Ok(self.push(value, op, needs))
    }

    pub fn mean_last(&mut self, a: ValueId) -> OpResult {
        self.reduce_last(a, true)
    }

    pub fn sum_last(&mut self, a: ValueId) -> OpResult {
        self.reduce_last(a, false)
    }

    pub fn mean_all(&mut self, a: ValueId) -> ValueId {
        let n = self.value(a).numel();
        let v = self.value(a).data().iter().sum::<f64>() / n as f64;
        let needs = self.needs(a);
        self.push(Tensor::scalar(v), Op::MeanAll(a), needs)
    }

    pub fn sum_all(&mut self, a: ValueId) -> ValueId {
        let v = self.value(a).data().iter().sum::<f64>();
        let needs = self.needs(a);
        self.push(Tensor::scalar(v), Op::SumAll(a), needs)
    }

    // -- geometric --------------------------------------------------------

    /// Per-channel Euclidean norm of vector features `[.., C, 3] → [.., C]`.
    pub fn vector_norm(&mut self, a: ValueId) -> OpResult {
        let sa = self.shape(a);
        if sa.len() < 2 || *sa.last().unwrap() != 3 {
            return Err(AdError::BadShape {
                op: "vector_norm",
                msg: "expects trailing component axis of 3",
                shape: sa.to_vec(),
            });
        }
        let outer = self.value(a).numel() / 3;
        let din = self.value(a).data();
        let mut data = vec![0.0; outer];
        for (i, o) in data.iter_mut().enumerate() {
            let v = &din[i * 3..i * 3 + 3];
            *o = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        }
        let value = Tensor { shape: sa[..sa.len() - 1].to_vec(), data };
        let needs = self.needs(a);
        Ok(self.push(value, Op::VectorNorm(a), needs))
    }

    /// Per-channel inner product `[.., C, 3] × [.., C, 3] → [.., C]`.
    pub fn inner(&mut self, a: ValueId, b: ValueId) -> OpResult {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb || sa.len() < 2 || *sa.last().unwrap() != 3 {
            return Err(mismatch("inner", sa, sb));
        }
        let outer = self.value(a).numel() / 3;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![0.0; outer];
        for (i, o) in data.iter_mut().enumerate() {
            let (u, v) = (&da[i * 3..i * 3 + 3], &db[i * 3..i * 3 + 3]);
            *o = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
        }
        let value = Tensor { shape: sa[..sa.len() - 1].to_vec(), data };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Inner(a, b), needs))
    }

    /// Upper-triangular Gram entries `⟨vᵢ, vⱼ⟩`, `i ≤ j`, over the first
    /// `min(C, cap)` channels of a `[C, 3]` feature. Exactly invariant under
    /// rotation of the inputs.
    pub fn gram_upper(&mut self, a: ValueId, cap: usize) -> OpResult {
        let sa = self.shape(a);
        if sa.len() != 2 || sa[1] != 3 {
            return Err(AdError::BadShape {
                op: "gram_upper",
                msg: "expects a [C, 3] feature",
                shape: sa.to_vec(),
            });
        }
        let m = sa[0].min(cap);
        let din = self.value(a).data();
        let mut data = Vec::with_capacity(m * (m + 1) / 2);
        for i in 0..m {
            let u = &din[i * 3..i * 3 + 3];
            for j in i..m {
                let v = &din[j * 3..j * 3 + 3];
                data.push(u[0] * v[0] + u[1] * v[1] + u[2] * v[2]);
            }
        }
        let value = Tensor { shape: vec![m * (m + 1) / 2], data };
        let needs = self.needs(a);
        Ok(self.push(value, Op::GramUpper(a, cap), needs))
    }

    // -- structural -------------------------------------------------------

    pub fn concat(&mut self, parts: &[ValueId], axis: usize) -> OpResult {
        if parts.is_empty() {
            return Err(AdError::BadShape {
                op: "concat",
                msg: "needs at least one part",
                shape: vec![],
            });
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(AdError::BadShape { op: "concat", msg: "axis out of range", shape: first });
        }
        let mut total = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != first.len()
                || sp
                    .iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(mismatch("concat", &first, sp));
            }
            total += sp[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut shape = first.clone();
        shape[axis] = total;
        let mut data = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for &p in parts {
            let d = self.shape(p)[axis];
            let src = self.value(p).data();
            for o in 0..outer {
                let dst = &mut data[(o * total + offset) * inner..(o * total + offset + d) * inner];
                dst.copy_from_slice(&src[o * d * inner..(o + 1) * d * inner]);
            }
            offset += d;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let value = Tensor { shape, data };
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), axis }, needs))
    }

    pub fn slice(&mut self, src: ValueId, axis: usize, start: usize, len: usize) -> OpResult {
        let ss = self.shape(src).to_vec();
        if axis >= ss.len() || start + len > ss[axis] || len == 0 {
            return Err(AdError::BadShape { op: "slice", msg: "range out of bounds", shape: ss });
        }
        let outer: usize = ss[..axis].iter().product();
        let inner: usize = ss[axis + 1..].iter().product();
        let d = ss[axis];
        let srcdata = self.value(src).data();
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let from = &srcdata[(o * d + start) * inner..(o * d + start + len) * inner];
            data[o * len * inner..(o + 1) * len * inner].copy_from_slice(from);
        }
        let mut shape = ss.clone();
        shape[axis] = len;
        let needs = self.needs(src);
        let value = Tensor { shape, data };
        Ok(self.push(value, Op::Slice { src, axis, start, len }, needs))
    }

    /// Clamp-gated select on vector channels: `out[.., c, :] = x[.., c, :]`
    /// where `gate[.., c] ≥ 0`, else `y[.., c, :]`. The gradient follows the
    /// selected branch; the gate itself receives no gradient, and exactly 0
    /// takes the `x` branch.
    pub fn select_ge_v(&mut self, x: ValueId, y: ValueId, gate: ValueId) -> OpResult {
        let (sx, sy, sg) = (self.shape(x), self.shape(y), self.shape(gate));
        if sx != sy || sx.len() < 2 || *sx.last().unwrap() != 3 || sg != &sx[..sx.len() - 1] {
            return Err(mismatch("select_ge_v", sx, sg));
        }
        let (dx, dy, dg) = (self.value(x).data(), self.value(y).data(), self.value(gate).data());
        let mut data = vec![0.0; dx.len()];
        for (c, &g) in dg.iter().enumerate() {
            let src = if g >= 0.0 { dx } else { dy };
            data[c * 3..c * 3 + 3].copy_from_slice(&src[c * 3..c * 3 + 3]);
        }
        let value = Tensor { shape: sx.to_vec(), data };
        let needs = self.needs(x) || self.needs(y);
        Ok(self.push(value, Op::SelectGeV { x, y, gate }, needs))
    }

    /// Clamp-gated select on scalars: all three inputs share one shape.
    pub fn select_ge_s(&mut self, x: ValueId, y: ValueId, gate: ValueId) -> OpResult {
        let (sx, sy, sg) = (self.shape(x), self.shape(y), self.shape(gate));
        if sx != sy || sx != sg {
            return Err(mismatch("select_ge_s", sx, sg));
        }
        let (dx, dy, dg) = (self.value(x).data(), self.value(y).data(), self.value(gate).data());
        let data = dg
            .iter()
            .enumerate()
            .map(|(i, &g)| if g >= 0.0 { dx[i] } else { dy[i] })
            .collect();
        let value = Tensor { shape: sx.to_vec(), data };
        let needs = self.needs(x) || self.needs(y);
        Ok(self.push(value, Op::SelectGeS { x, y, gate }, needs))
    }

    /// View the same data under a new shape (row-major, size-preserving).
    pub fn reshape(&mut self, a: ValueId, shape: &[usize]) -> OpResult {
        let want: usize = shape.iter().product();
        if want != self.value(a).numel() {
            return Err(mismatch("reshape", self.shape(a), shape));
        }
        let value = Tensor { shape: shape.to_vec(), data: self.value(a).data().to_vec() };
        let needs = self.needs(a);
        Ok(self.push(value, Op::Reshape(a), needs))
    }

    /// ReLU on scalar features via the gated select.
    pub fn relu(&mut self, x: ValueId) -> OpResult {
        let zero = self.leaf(Tensor::zeros(self.shape(x)));
        self.select_ge_s(x, zero, x)
    }

    // -- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar output. Adjoints accumulate in reverse
    /// tape order.
    pub fn backward(&self, output: ValueId) -> Result<Gradients, AdError> {
        if self.value(output).numel() != 1 {
            return Err(AdError::NonScalarOutput(self.shape(output).to_vec()));
        }
        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        adj[output.0 as usize] = Some(vec![1.0]);

        let mut max_slot = 0usize;
        for node in &self.nodes {
            if let Op::Param(slot) = node.op {
                max_slot = max_slot.max(slot + 1);
            }
        }
        let mut grads = Gradients::empty(max_slot);

        for idx in (0..n).rev() {
            let g = match adj[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(slot) => {
                    let t = Tensor { shape: node.value.shape.clone(), data: g };
                    match &mut grads.by_slot[*slot] {
                        Some(acc) => {
                            for (a, b) in acc.data.iter_mut().zip(t.data.iter()) {
                                *a += b;
                            }
                        }
                        none => *none = Some(t),
                    }
                    continue;
                }
                Op::Add(a, b) => {
                    self.accum(&mut adj, *a, &g, |gi, _| gi);
                    self.accum(&mut adj, *b, &g, |gi, _| gi);
                }
                Op::AddSuffix(a, b) => {
                    self.accum(&mut adj, *a, &g, |gi, _| gi);
                    if self.needs(*b) {
                        let period = self.value(*b).numel();
                        let da = self.ensure(&mut adj, *b);
                        for (i, gv) in g.iter().enumerate() {
                            da[i % period] += gv;
                        }
                    }
                }
                Op::Scale(a, k) => {
                    let k = *k;
                    self.accum(&mut adj, *a, &g, move |gi, _| gi * k);
                }
                Op::Shift(a) => {
                    self.accum(&mut adj, *a, &g, |gi, _| gi);
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let db = self.value(*b).data();
                        let da = self.ensure(&mut adj, *a);
                        for i in 0..g.len() {
                            da[i] += g[i] * db[i];
                        }
                    }
                    if self.needs(*b) {
                        let dav = self.value(*a).data();
                        let db = self.ensure(&mut adj, *b);
                        for i in 0..g.len() {
                            db[i] += g[i] * dav[i];
                        }
                    }
                }
                Op::MulPrefix(a, gk) => {
                    let block = self.value(*a).numel() / self.value(*gk).numel().max(1);
                    if self.needs(*a) {
                        let dg = self.value(*gk).data();
                        let da = self.ensure(&mut adj, *a);
                        for i in 0..g.len() {
                            da[i] += g[i] * dg[i / block];
                        }
                    }
                    if self.needs(*gk) {
                        let dav = self.value(*a).data();
                        let dgk = self.ensure(&mut adj, *gk);
                        for i in 0..g.len() {
                            dgk[i / block] += g[i] * dav[i];
                        }
                    }
                }
                Op::Recip(a) => {
                    if self.needs(*a) {
                        let x = self.value(*a).data();
                        let da = self.ensure(&mut adj, *a);
                        for i in 0..g.len() {
                            da[i] -= g[i] / (x[i] * x[i]);
                        }
                    }
                }
                Op::Sqrt(a) => {
                    if self.needs(*a) {
                        let y = self.nodes[idx].value.data();
                        let da = self.ensure(&mut adj, *a);
                        for i in 0..g.len() {
                            da[i] += g[i] * 0.5 / y[i];
                        }
                    }
                }
                Op::Sin(a) => {
                    if self.needs(*a) {
                        let x = self.value(*a).data();
                        let da = self.ensure(&mut adj, *a);
                        for i in 0..g.len() {
                            da[i] += g[i] * x[i].cos();
                        }
                    }
                }
                Op::Cos(a) => {
                    if self.needs(*a) {
                        let x = self.value(*a).data();
                        let da = self.ensure(&mut adj, *a);
                        for i in 0..g.len() {
                            da[i] -= g[i] * x[i].sin();
                        }
                    }
                }
                Op::Matmul(a, b) => {
                    let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let nn = self.shape(*b)[1];
                    if self.needs(*a) {
                        // dA = g · Bᵀ
                        let db = self.value(*b).data();
                        let da = self.ensure(&mut adj, *a);
                        for i in 0..m {
                            for l in 0..k {
                                let mut acc = 0.0;
                                for j in 0..nn {
                                    acc += g[i * nn + j] * db[l * nn + j];
                                }
                                da[i * k + l] += acc;
                            }
                        }
                    }
                    if self.needs(*b) {
                        // dB = Aᵀ · g
                        let dav = self.value(*a).data();
                        let db = self.ensure(&mut adj, *b);
                        for l in 0..k {
                            for j in 0..nn {
                                let mut acc = 0.0;
                                for i in 0..m {
                                    acc += dav[i * k + l] * g[i * nn + j];
                                }
                                db[l * nn + j] += acc;
                            }
                        }
                    }
                }
                Op::ChannelMixV(w, v) => {
                    let (co, ci) = (self.shape(*w)[0], self.shape(*w)[1]);
                    let t = self.value(*v).numel() / (ci * 3);
                    if self.needs(*w) {
                        let dv = self.value(*v).data();
                        let dw = self.ensure(&mut adj, *w);
                        for ti in 0..t {
                            let gin = &g[ti * co * 3..(ti + 1) * co * 3];
                            let vin = &dv[ti * ci * 3..(ti + 1) * ci * 3];
                            for o in 0..co {
                                let go = &gin[o * 3..o * 3 + 3];
                                for i in 0..ci {
                                    let vi = &vin[i * 3..i * 3 + 3];
                                    dw[o * ci + i] += go[0] * vi[0] + go[1] * vi[1] + go[2] * vi[2];
                                }
                            }
                        }
                    }
                    if self.needs(*v) {
                        let dwv = self.value(*w).data();
                        let dv = self.ensure(&mut adj, *v);
                        for ti in 0..t {
                            let gin = &g[ti * co * 3..(ti + 1) * co * 3];
                            let vout = &mut dv[ti * ci * 3..(ti + 1) * ci * 3];
                            for o in 0..co {
                                let go = &gin[o * 3..o * 3 + 3];
                                let wrow = &dwv[o * ci..(o + 1) * ci];
                                for (i, wv) in wrow.iter().enumerate() {
                                    vout[i * 3] += wv * go[0];
                                    vout[i * 3 + 1] += wv * go[1];
                                    vout[i * 3 + 2] += wv * go[2];
                                }
                            }
                        }
                    }
                }
                Op::ChannelMixS(w, x) => {
                    let (co, ci) = (self.shape(*w)[0], self.shape(*w)[1]);
                    let t = self.value(*x).numel() / ci;
                    if self.needs(*w) {
                        let dx = self.value(*x).data();
                        let dw = self.ensure(&mut adj, *w);
                        for ti in 0..t {
                            let gin = &g[ti * co..(ti + 1) * co];
                            let xin = &dx[ti * ci..(ti + 1) * ci];
                            for (o, go) in gin.iter().enumerate() {
                                for (i, xv) in xin.iter().enumerate() {
                                    dw[o * ci + i] += go * xv;
                                }
                            }
                        }
                    }
                    if self.needs(*x) {
                        let dwv = self.value(*w).data();
                        let dx = self.ensure(&mut adj, *x);
                        for ti in 0..t {
                            let gin = &g[ti * co..(ti + 1) * co];
                            let xout = &mut dx[ti * ci..(ti + 1) * ci];
                            for (o, go) in gin.iter().enumerate() {
                                let wrow = &dwv[o * ci..(o + 1) * ci];
                                for (i, wv) in wrow.iter().enumerate() {
                                    xout[i] += wv * go;
                                }
                            }
                        }
                    }
                }
                Op::Conv1d { kernel, input, stride, pad, comps } => {
                    let (co, ci, kw) = (
                        self.shape(*kernel)[0],
                        self.shape(*kernel)[1],
                        self.shape(*kernel)[2],
                    );
                    let t_in = self.shape(*input)[0];
                    let t_out = (t_in + 2 * pad - kw) / stride + 1;
                    let comps = *comps;
                    if self.needs(*kernel) {
                        let di = self.value(*input).data();
                        let dk = self.ensure(&mut adj, *kernel);
                        for to in 0..t_out {
                            for k in 0..kw {
                                let tx = (to * stride + k) as isize - *pad as isize;
                                if tx < 0 || tx as usize >= t_in {
                                    continue;
                                }
                                let tx = tx as usize;
                                for o in 0..co {
                                    let go = &g[(to * co + o) * comps..(to * co + o + 1) * comps];
                                    for i in 0..ci {
                                        let xi = &di[(tx * ci + i) * comps..(tx * ci + i + 1) * comps];
                                        let mut acc = 0.0;
                                        for d in 0..comps {
                                            acc += go[d] * xi[d];
                                        }
                                        dk[(o * ci + i) * kw + k] += acc;
                                    }
                                }
                            }
                        }
                    }
                    if self.needs(*input) {
                        let dkv = self.value(*kernel).data();
                        let di = self.ensure(&mut adj, *input);
                        for to in 0..t_out {
                            for k in 0..kw {
                                let tx = (to * stride + k) as isize - *pad as isize;
                                if tx < 0 || tx as usize >= t_in {
                                    continue;
                                }
                                let tx = tx as usize;
                                for o in 0..co {
                                    let go = &g[(to * co + o) * comps..(to * co + o + 1) * comps];
                                    for i in 0..ci {
                                        let kv = dkv[(o * ci + i) * kw + k];
                                        let xi = &mut di
                                            [(tx * ci + i) * comps..(tx * ci + i + 1) * comps];
                                        for d in 0..comps {
                                            xi[d] += kv * go[d];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::UpsampleT(a, factor) => {
                    if self.needs(*a) {
                        let inner: usize = self.shape(*a)[1..].iter().product();
                        let t = self.shape(*a)[0];
                        let da = self.ensure(&mut adj, *a);
                        for ti in 0..t {
                            for f in 0..*factor {
                                let src = &g[(ti * factor + f) * inner..(ti * factor + f + 1) * inner];
                                for (o, x) in da[ti * inner..(ti + 1) * inner].iter_mut().zip(src) {
                                    *o += x;
                                }
                            }
                        }
                    }
                }
                Op::Repeat0(a, n) => {
                    if self.needs(*a) {
                        let inner = self.value(*a).numel();
                        let da = self.ensure(&mut adj, *a);
                        for r in 0..*n {
                            for (o, x) in da.iter_mut().zip(&g[r * inner..(r + 1) * inner]) {
                                *o += x;
                            }
                        }
                    }
                }
                Op::MeanAxis0(a) | Op::SumAxis0(a) => {
                    if self.needs(*a) {
                        let n0 = self.shape(*a)[0];
                        let inner: usize = self.shape(*a)[1..].iter().product();
                        let k = if matches!(node.op, Op::MeanAxis0(_)) {
                            1.0 / n0 as f64
                        } else {
                            1.0
                        };
                        let da = self.ensure(&mut adj, *a);
                        for i in 0..n0 {
                            for (o, x) in da[i * inner..(i + 1) * inner].iter_mut().zip(&g) {
                                *o += x * k;
                            }
                        }
                    }
                }
                Op::MeanLast(a) | Op::SumLast(a) => {
                    if self.needs(*a) {
                        let c = *self.shape(*a).last().unwrap();
                        let k = if matches!(node.op, Op::MeanLast(_)) {
                            1.0 / c as f64
                        } else {
                            1.0
                        };
                        let da = self.ensure(&mut adj, *a);
                        for (i, gv) in g.iter().enumerate() {
                            for o in da[i * c..(i + 1) * c].iter_mut() {
                                *o += gv * k;
                            }
                        }
                    }
                }
                Op::MeanAll(a) | Op::SumAll(a) => {
                    if self.needs(*a) {
                        let n0 = self.value(*a).numel();
                        let k = if matches!(node.op, Op::MeanAll(_)) {
                            g[0] / n0 as f64
                        } else {
                            g[0]
                        };
                        let da = self.ensure(&mut adj, *a);
                        for o in da.iter_mut() {
                            *o += k;
                        }
                    }
                }
                Op::VectorNorm(a) => {
                    if self.needs(*a) {
                        let x = self.value(*a).data();
                        let y = node.value.data();
                        let da = self.ensure(&mut adj, *a);
                        for (c, gv) in g.iter().enumerate() {
                            let n0 = y[c];
                            if n0 > 0.0 {
                                let inv = gv / n0;
                                for d in 0..3 {
                                    da[c * 3 + d] += inv * x[c * 3 + d];
                                }
                            }
                        }
                    }
                }
                Op::Inner(a, b) => {
                    if self.needs(*a) {
                        let db = self.value(*b).data();
                        let da = self.ensure(&mut adj, *a);
                        for (c, gv) in g.iter().enumerate() {
                            for d in 0..3 {
                                da[c * 3 + d] += gv * db[c * 3 + d];
                            }
                        }
                    }
                    if self.needs(*b) {
                        let dav = self.value(*a).data();
                        let db = self.ensure(&mut adj, *b);
                        for (c, gv) in g.iter().enumerate() {
                            for d in 0..3 {
                                db[c * 3 + d] += gv * dav[c * 3 + d];
                            }
                        }
                    }
                }
                Op::GramUpper(a, cap) => {
                    if self.needs(*a) {
                        let m = self.shape(*a)[0].min(*cap);
                        let x = self.value(*a).data();
                        let da = self.ensure(&mut adj, *a);
                        let mut idx2 = 0;
                        for i in 0..m {
                            for j in i..m {
                                let gv = g[idx2];
                                idx2 += 1;
                                for d in 0..3 {
                                    da[i * 3 + d] += gv * x[j * 3 + d];
                                    da[j * 3 + d] += gv * x[i * 3 + d];
                                }
                            }
                        }
                    }
                }
                Op::Concat { parts, axis } => {
                    let shape = node.value.shape.clone();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let total = shape[*axis];
                    let mut offset = 0;
                    for &p in parts {
                        let d = self.shape(p)[*axis];
                        if self.needs(p) {
                            let dp = self.ensure(&mut adj, p);
                            for o in 0..outer {
                                let src =
                                    &g[(o * total + offset) * inner..(o * total + offset + d) * inner];
                                for (x, y) in dp[o * d * inner..(o + 1) * d * inner]
                                    .iter_mut()
                                    .zip(src)
                                {
                                    *x += y;
                                }
                            }
                        }
                        offset += d;
                    }
                }
                Op::Slice { src, axis, start, len } => {
                    if self.needs(*src) {
                        let ss = self.shape(*src).to_vec();
                        let outer: usize = ss[..*axis].iter().product();
                        let inner: usize = ss[*axis + 1..].iter().product();
                        let d = ss[*axis];
                        let dsrc = self.ensure(&mut adj, *src);
                        for o in 0..outer {
                            let dst =
                                &mut dsrc[(o * d + start) * inner..(o * d + start + len) * inner];
                            for (x, y) in dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner])
                            {
                                *x += y;
                            }
                        }
                    }
                }
                Op::SelectGeV { x, y, gate } => {
                    let dg = self.value(*gate).data().to_vec();
                    if self.needs(*x) {
                        let dx = self.ensure(&mut adj, *x);
                        for (c, &gv) in dg.iter().enumerate() {
                            if gv >= 0.0 {
                                for d in 0..3 {
                                    dx[c * 3 + d] += g[c * 3 + d];
                                }
                            }
                        }
                    }
                    if self.needs(*y) {
                        let dy = self.ensure(&mut adj, *y);
                        for (c, &gv) in dg.iter().enumerate() {
                            if gv < 0.0 {
                                for d in 0..3 {
                                    dy[c * 3 + d] += g[c * 3 + d];
                                }
                            }
                        }
                    }
                }
                Op::Reshape(a) => {
                    self.accum(&mut adj, *a, &g, |gi, _| gi);
                }
                Op::SelectGeS { x, y, gate } => {
                    let dg = self.value(*gate).data().to_vec();
                    if self.needs(*x) {
                        let dx = self.ensure(&mut adj, *x);
                        for (i, &gv) in dg.iter().enumerate() {
                            if gv >= 0.0 {
                                dx[i] += g[i];
                            }
                        }
                    }
                    if self.needs(*y) {
                        let dy = self.ensure(&mut adj, *y);
                        for (i, &gv) in dg.iter().enumerate() {
                            if gv < 0.0 {
                                dy[i] += g[i];
                            }
                        }
                    }
                }
            }
        }
        Ok(grads)
    }

    fn ensure<'a>(&self, adj: &'a mut [Option<Vec<f64>>], id: ValueId) -> &'a mut Vec<f64> {
        let slot = &mut adj[id.0 as usize];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.value(id).numel()]);
        }
        slot.as_mut().unwrap()
    }

    fn accum(&self, adj: &mut [Option<Vec<f64>>], id: ValueId, g: &[f64], f: impl Fn(f64, usize) -> f64) {
        if !self.needs(id) {
            return;
        }
        let da = self.ensure(adj, id);
        for (i, gv) in g.iter().enumerate() {
            da[i] += f(*gv, i);
        }
    }
}

// ---------------------------------------------------------------------------
// Finite-difference audit
// ---------------------------------------------------------------------------

/// Maximum relative error between analytic gradients and central finite
/// differences over every trainable coordinate:
/// `|analytic − (f(x+ε) − f(x−ε)) / 2ε| / (|analytic| + 1e-8)`.
pub fn grad_check<F>(f: &F, params: &ParamSet, eps: f64) -> Result<f64, AdError>
where
    F: Fn(&ParamSet) -> Result<(f64, Gradients), AdError>,
{
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(slot, p)| (0..p.value.numel()).map(move |i| (slot, i)))
        .collect();
    grad_check_coords(f, params, eps, &coords)
}

/// Same audit restricted to a chosen coordinate subset (used to spot-check
/// large networks).
pub fn grad_check_coords<F>(
    f: &F,
    params: &ParamSet,
    eps: f64,
    coords: &[(usize, usize)],
) -> Result<f64, AdError>
where
    F: Fn(&ParamSet) -> Result<(f64, Gradients), AdError>,
{
    let (_, grads) = f(params)?;
    let mut max_rel: f64 = 0.0;
    let mut work = params.clone();
    for &(slot, i) in coords {
        let orig = work.value(slot).data()[i];
        work.get_mut(slot).value.data_mut()[i] = orig + eps;
        let (fp, _) = f(&work)?;
        work.get_mut(slot).value.data_mut()[i] = orig - eps;
        let (fm, _) = f(&work)?;
        work.get_mut(slot).value.data_mut()[i] = orig;
        let fd = (fp - fm) / (2.0 * eps);
        let analytic = grads
            .get(slot)
            .map(|g| g.data()[i])
            .unwrap_or(0.0);
        let rel = (analytic - fd).abs() / (analytic.abs() + 1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
