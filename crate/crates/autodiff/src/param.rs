use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::float::Float;
use crate::tensor::Tensor;

static NEXT_PARAM_ID: AtomicUsize = AtomicUsize::new(0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

struct ParamInner<F: Float> {
    id: ParamId,
    name: String,
    trainable: bool,
    value: RwLock<ArrayD<F>>,
}

/// A named, mutable weight. Each call to [`Param::tensor`] snapshots the current value as a graph leaf.
pub struct Param<F: Float> {
    inner: Arc<ParamInner<F>>,
}

impl<F: Float> Clone for Param<F> {
    fn clone(&self) -> Self {
        Param {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<F: Float> std::fmt::Debug for Param<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Param")
            .field("name", &self.inner.name)
            .field("shape", &self.shape())
            .field("trainable", &self.inner.trainable)
            .finish()
    }
}

impl<F: Float> Param<F> {
    pub fn new(name: impl Into<String>, value: ArrayD<F>, trainable: bool) -> Self {
        Param {
            inner: Arc::new(ParamInner {
                id: ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)),
                name: name.into(),
                trainable,
                value: RwLock::new(value.as_standard_layout().into_owned()),
            }),
        }
    }

    pub fn id(&self) -> ParamId {
        self.inner.id
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    pub fn trainable(&self) -> bool {
        self.inner.trainable
    }

    pub fn tensor(&self) -> Tensor<F> {
        let v = self.inner.value.read().expect("param lock poisoned").clone();
        Tensor::param_leaf(v, self.inner.id, self.inner.trainable)
    }

    pub fn value(&self) -> ArrayD<F> {
        self.inner.value.read().expect("param lock poisoned").clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&ArrayD<F>) -> R) -> R {
        f(&self.inner.value.read().expect("param lock poisoned"))
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|v| v.shape().to_vec())
    }

    pub fn numel(&self) -> usize {
        self.with_value(|v| v.len())
    }

    /// Replaces the value; the shape must not change.
    pub fn set(&self, value: ArrayD<F>) -> Result<()> {
        let mut guard = self.inner.value.write().expect("param lock poisoned");
        if guard.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "{}: expected {:?}, got {:?}",
                self.inner.name,
                guard.shape(),
                value.shape()
            )));
        }
        *guard = value.as_standard_layout().into_owned();
        Ok(())
    }

    pub fn update(&self, f: impl FnOnce(&mut ArrayD<F>)) {
        let mut guard = self.inner.value.write().expect("param lock poisoned");
        f(&mut guard);
    }
}

/// How a freshly registered parameter is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-b, b]`.
    Uniform(f64),
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, the usual default for conv and linear layers.
    FanIn(usize),
}

/// Ordered registry of named parameters.
pub struct ParamStore<F: Float> {
    params: Mutex<Vec<Param<F>>>,
    index: Mutex<BTreeMap<String, usize>>,
}

impl<F: Float> Default for ParamStore<F> {
    fn default() -> Self {
        ParamStore {
            params: Mutex::new(Vec::new()),
            index: Mutex::new(BTreeMap::new()),
        }
    }
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&self, p: Param<F>) -> Result<()> {
        let mut index = self.index.lock().expect("store lock poisoned");
        if index.contains_key(p.name()) {
            return Err(Error::DuplicateParam(p.name().to_string()));
        }
        let mut params = self.params.lock().expect("store lock poisoned");
        index.insert(p.name().to_string(), params.len());
        params.push(p);
        Ok(())
    }

    /// All parameters in registration order.
    pub fn params(&self) -> Vec<Param<F>> {
        self.params.lock().expect("store lock poisoned").clone()
    }

    pub fn trainable_params(&self) -> Vec<Param<F>> {
        self.params().into_iter().filter(|p| p.trainable()).collect()
    }

    pub fn get(&self, name: &str) -> Option<Param<F>> {
        let index = self.index.lock().expect("store lock poisoned");
        let i = *index.get(name)?;
        Some(self.params.lock().expect("store lock poisoned")[i].clone())
    }

    pub fn len(&self) -> usize {
        self.params.lock().expect("store lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_elements(&self) -> usize {
        self.params().iter().map(Param::numel).sum()
    }

    pub fn num_trainable_elements(&self) -> usize {
        self.trainable_params().iter().map(Param::numel).sum()
    }

    /// Snapshot of every value keyed by name.
    pub fn to_named(&self) -> BTreeMap<String, ArrayD<F>> {
        self.params().into_iter().map(|p| (p.name().to_string(), p.value())).collect()
    }

    /// Overwrites parameters from `tensors`.
    ///
    /// Every parameter must be present with the right shape; nothing is written unless all of them are.
    /// On failure the error lists every missing, unexpected or mis-shaped tensor.
    pub fn load_named(&self, tensors: &BTreeMap<String, ArrayD<F>>) -> std::result::Result<(), Vec<String>> {
        let params = self.params();
        let mut problems = Vec::new();
        for p in &params {
            match tensors.get(p.name()) {
                None => problems.push(format!("missing `{}` {:?}", p.name(), p.shape())),
                Some(t) if t.shape() != p.shape().as_slice() => problems.push(format!(
                    "`{}`: expected {:?}, found {:?}",
                    p.name(),
                    p.shape(),
                    t.shape()
                )),
                Some(_) => {}
            }
        }
        for name in tensors.keys() {
            if self.get(name).is_none() {
                problems.push(format!("unexpected `{name}`"));
            }
        }
        if !problems.is_empty() {
            return Err(problems);
        }
        for p in &params {
            p.set(tensors[p.name()].clone()).expect("shape checked above");
        }
        Ok(())
    }
}

/// Hands out parameters under a dotted name prefix, drawing initial values from one seeded stream.
#[derive(Clone)]
pub struct Builder<F: Float> {
    store: Arc<ParamStore<F>>,
    rng: Arc<Mutex<ChaCha8Rng>>,
    prefix: String,
    trainable: bool,
}

impl<F: Float> Builder<F> {
    pub fn new(store: Arc<ParamStore<F>>, seed: u64, trainable: bool) -> Self {
        Builder {
            store,
            rng: Arc::new(Mutex::new(ChaCha8Rng::seed_from_u64(seed))),
            prefix: String::new(),
            trainable,
        }
    }

    /// A child builder whose names are prefixed with `name.`.
    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Builder {
            store: Arc::clone(&self.store),
            rng: Arc::clone(&self.rng),
            prefix,
            trainable: self.trainable,
        }
    }

    pub fn store(&self) -> &Arc<ParamStore<F>> {
        &self.store
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Param<F>> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        let value = match init {
            Init::Zeros => ArrayD::zeros(IxDyn(shape)),
            Init::Ones => ArrayD::from_elem(IxDyn(shape), F::one()),
            Init::Uniform(b) => self.uniform(shape, b),
            Init::FanIn(fan_in) => self.uniform(shape, 1.0 / (fan_in.max(1) as f64).sqrt()),
        };
        let p = Param::new(full, value, self.trainable);
        self.store.insert(p.clone())?;
        Ok(p)
    }

    fn uniform(&self, shape: &[usize], bound: f64) -> ArrayD<F> {
        let mut rng = self.rng.lock().expect("rng lock poisoned");
        let n: usize = shape.iter().product();
        let data: Vec<F> = (0..n).map(|_| F::cast(rng.random_range(-bound..=bound))).collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).expect("length matches shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with_two() -> (Arc<ParamStore<f32>>, Builder<f32>) {
        let store = Arc::new(ParamStore::new());
        let b = Builder::new(Arc::clone(&store), 1, true);
        b.pp("layer").param("weight", &[2, 3], Init::FanIn(3)).unwrap();
        b.pp("layer").param("bias", &[2], Init::Zeros).unwrap();
        (store, b)
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let (a, _) = store_with_two();
        let (b, _) = store_with_two();
        assert_eq!(a.to_named(), b.to_named());
        let w = a.get("layer.weight").unwrap().value();
        let bound = 1.0 / 3f32.sqrt();
        assert!(w.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let (_, b) = store_with_two();
        assert!(matches!(
            b.pp("layer").param("bias", &[2], Init::Zeros),
            Err(Error::DuplicateParam(_))
        ));
    }

    #[test]
    fn load_reports_every_problem_and_writes_nothing() {
        let (store, _) = store_with_two();
        let before = store.to_named();
        let mut incoming = BTreeMap::new();
        incoming.insert("layer.weight".to_string(), ArrayD::<f32>::zeros(IxDyn(&[3, 2])));
        incoming.insert("stray".to_string(), ArrayD::<f32>::zeros(IxDyn(&[1])));
        let problems = store.load_named(&incoming).unwrap_err();
        assert_eq!(problems.len(), 3, "{problems:?}");
        assert_eq!(store.to_named(), before);
    }

    #[test]
    fn frozen_params_do_not_require_grad() {
        let store = Arc::new(ParamStore::<f32>::new());
        let b = Builder::new(Arc::clone(&store), 0, false);
        let p = b.param("w", &[1], Init::Ones).unwrap();
        assert!(!p.tensor().requires_grad());
        assert_eq!(store.num_trainable_elements(), 0);
        assert_eq!(store.num_elements(), 1);
    }
}
