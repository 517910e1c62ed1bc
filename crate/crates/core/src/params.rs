//! Named parameter storage and per-pass binding to gradient-tracking leaves.
//!
//! Model structs keep only [`ParamId`]s. A forward pass binds the store,
//! turning every entry into a fresh leaf tensor; after `backward` the leaves
//! hold the gradients in store order.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng as _;
use rand_distr::{StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::format::NamedTensor;
use crate::rng::Rng;
use crate::tensor::{BatchNormStats, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable weight.
    Weight,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Uniform(f64),
    Normal(f64),
}

#[derive(Debug, Clone)]
pub struct ParamEntry<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub data: Vec<S>,
}

impl<S> ParamEntry<S> {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered parameter store. In shape-only mode no values are allocated,
/// which allows counting parameters of configurations too large to build.
#[derive(Debug, Clone)]
pub struct ParamStore<S> {
    entries: Vec<ParamEntry<S>>,
    index: HashMap<String, usize>,
    shape_only: bool,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
            shape_only: false,
        }
    }

    pub fn shape_only() -> Self {
        ParamStore {
            shape_only: true,
            ..Self::new()
        }
    }

    pub fn is_shape_only(&self) -> bool {
        self.shape_only
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], kind: ParamKind, init: Init, rng: &mut Rng) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let n: usize = shape.iter().product();
        let data = if self.shape_only {
            Vec::new()
        } else {
            match init {
                Init::Zeros => vec![S::zero(); n],
                Init::Ones => vec![S::one(); n],
                Init::Const(v) => vec![S::of(v); n],
                Init::Uniform(bound) => {
                    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                    (0..n).map(|_| S::of(rng.sample(dist))).collect()
                }
                Init::Normal(std) => (0..n)
                    .map(|_| S::of(std * rng.sample::<f64, _>(StandardNormal)))
                    .collect(),
            }
        };
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id.0);
        self.entries.push(ParamEntry {
            name,
            shape: shape.to_vec(),
            kind,
            data,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<S>] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<S> {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry<S> {
        &mut self.entries[id.0]
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [ParamEntry<S>] {
        &mut self.entries
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    /// Overwrite values in place.
    pub fn set(&mut self, id: ParamId, data: Vec<S>) {
        let e = &mut self.entries[id.0];
        assert_eq!(e.numel(), data.len(), "{}", e.name);
        e.data = data;
    }

    /// Number of trainable scalars.
    pub fn weight_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Weight)
            .map(ParamEntry::numel)
            .sum()
    }

    /// Bind every entry to a leaf tensor. `track(entry)` decides which leaves
    /// record gradients; buffers never do.
    pub fn bind(&self, track: impl Fn(&ParamEntry<S>) -> bool) -> Bound<S> {
        assert!(!self.shape_only, "cannot bind a shape-only store");
        let tensors = self
            .entries
            .iter()
            .map(|e| {
                let t = Tensor::new(&e.shape, e.data.clone()).expect("valid parameter shape");
                if e.kind == ParamKind::Weight && track(e) {
                    t.with_grad()
                } else {
                    t
                }
            })
            .collect();
        Bound { tensors }
    }

    /// Bind without gradient tracking.
    pub fn bind_frozen(&self) -> Bound<S> {
        self.bind(|_| false)
    }

    pub fn to_named(&self) -> Vec<NamedTensor<S>> {
        self.entries
            .iter()
            .map(|e| NamedTensor {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data: e.data.clone(),
            })
            .collect()
    }

    /// Replace all values from a tensor list with identical names and shapes.
    pub fn load_named(&mut self, tensors: Vec<NamedTensor<S>>) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(Error::Format(format!(
                "parameter count mismatch: file has {} tensors, model expects {}",
                tensors.len(),
                self.entries.len()
            )));
        }
        for (e, t) in self.entries.iter().zip(&tensors) {
            if e.name != t.name || e.shape != t.shape {
                return Err(Error::Format(format!(
                    "parameter mismatch: file has {} {:?}, model expects {} {:?}",
                    t.name, t.shape, e.name, e.shape
                )));
            }
        }
        for (e, t) in self.entries.iter_mut().zip(tensors) {
            e.data = t.data;
        }
        Ok(())
    }

    /// Convert every value to another precision.
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    kind: e.kind,
                    data: e.data.iter().map(|v| T::of(v.f64())).collect(),
                })
                .collect(),
            index: self.index.clone(),
            shape_only: self.shape_only,
        }
    }
}

/// Leaf tensors for one forward pass, indexed by [`ParamId`].
pub struct Bound<S: Scalar> {
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> Bound<S> {
    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    /// Substitute caller-owned tensors for some entries.
    pub fn with_overrides(mut self, ids: &[ParamId], tensors: &[Tensor<S>]) -> Self {
        for (id, t) in ids.iter().zip(tensors) {
            assert_eq!(self.tensors[id.0].shape(), t.shape());
            self.tensors[id.0] = t.clone();
        }
        self
    }

    /// Gradients accumulated on each leaf, in store order.
    pub fn grads(&self) -> Vec<Option<Vec<S>>> {
        self.tensors.iter().map(|t| t.grad().map(|g| g.clone())).collect()
    }
}

/// A sub-module invocation recorded while tracing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEvent {
    /// `f`, `m` or `c`.
    pub symbol: char,
    pub layer: usize,
    /// Which of the four sub-modules of the layer: 0 = FFN_a, 1 = MHSA,
    /// 2 = CNN, 3 = FFN_b.
    pub slot: u8,
}

/// Per-pass execution state: train/eval flag, the dropout stream, optional
/// sub-module tracing and pending batch-norm statistics.
pub struct Ctx {
    pub training: bool,
    rng: RefCell<Rng>,
    trace: RefCell<Option<Vec<TraceEvent>>>,
    bn_updates: RefCell<Vec<(ParamId, ParamId, BatchNormStats)>>,
}

impl Ctx {
    pub fn new(training: bool, rng: Rng) -> Self {
        Ctx {
            training,
            rng: RefCell::new(rng),
            trace: RefCell::new(None),
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    /// Evaluation context; the rng is never consumed.
    pub fn eval() -> Self {
        use rand::SeedableRng;
        Self::new(false, Rng::seed_from_u64(0))
    }

    pub fn with_trace(self) -> Self {
        *self.trace.borrow_mut() = Some(Vec::new());
        self
    }

    pub fn take_trace(&self) -> Vec<TraceEvent> {
        self.trace.borrow_mut().as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub(crate) fn record(&self, symbol: char, layer: usize, slot: u8) {
        if let Some(t) = self.trace.borrow_mut().as_mut() {
            t.push(TraceEvent { symbol, layer, slot });
        }
    }

    pub(crate) fn rng(&self) -> std::cell::RefMut<'_, Rng> {
        self.rng.borrow_mut()
    }

    pub(crate) fn push_bn_update(&self, mean: ParamId, var: ParamId, stats: BatchNormStats) {
        self.bn_updates.borrow_mut().push((mean, var, stats));
    }

    pub fn take_bn_updates(&self) -> Vec<(ParamId, ParamId, BatchNormStats)> {
        std::mem::take(&mut self.bn_updates.borrow_mut())
    }

    pub fn into_rng(self) -> Rng {
        self.rng.into_inner()
    }
}

/// Shift every weight by `U(-scale, scale)` and draw running variances
/// from `U(0.5, 1.5)`, so that no sub-module starts at an identity or zero
/// map. Used to make structural checks non-trivial.
pub fn perturb<S: Scalar>(store: &mut ParamStore<S>, seed: u64, scale: f64) {
    use rand::Rng as _;
    let mut rng = crate::rng::RngStreams::new(seed).stream("perturb");
    for e in store.entries_mut() {
        if e.kind == ParamKind::Buffer {
            if e.name.ends_with("running_var") {
                e.data.iter_mut().for_each(|v| *v = S::of(rng.random_range(0.5..1.5)));
            }
            continue;
        }
        e.data.iter_mut().for_each(|v| *v += S::of(rng.random_range(-scale..scale)));
    }
}

/// Fold batch statistics into running averages: `r <- (1 - m)·r + m·batch`.
pub fn apply_bn_updates<S: Scalar>(store: &mut ParamStore<S>, updates: &[(ParamId, ParamId, BatchNormStats)], momentum: f64) {
    for (mean_id, var_id, stats) in updates {
        for (id, batch) in [(*mean_id, &stats.mean), (*var_id, &stats.var)] {
            let e = store.entry_mut(id);
            for (r, &b) in e.data.iter_mut().zip(batch) {
                *r = S::of((1.0 - momentum) * r.f64() + momentum * b);
            }
        }
    }
}
