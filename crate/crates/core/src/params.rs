//! Deterministic parameter store.
//!
//! All learnable tensors live in one [`ParamStore`], keyed by dotted path
//! (`"generator.decoder.block0.conv.weight"`). Initialization is a pure
//! function of `(store seed, parameter name, shape, init)` — creation order
//! never matters — so two runs with the same seed produce bit-identical
//! models. The CPU backend's built-in RNG is not seedable, so every buffer
//! is filled by a ChaCha20 stream and uploaded with [`Tensor::from_vec`].
//!
//! Frozen subtrees (e.g. a fixed feature extractor) hand out *detached*
//! tensors: gradients still flow through them to upstream inputs, but the
//! weights themselves never receive gradients and never reach the optimizer.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// How to fill a newly created parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// All zeros.
    Zeros,
    /// All ones.
    Ones,
    /// A constant value.
    Const(f64),
    /// Uniform in `[lo, hi)`.
    Uniform { lo: f64, hi: f64 },
    /// Uniform in `[-b, b)` with `b = 1/sqrt(fan_in)`, fan_in taken as the
    /// product of all dimensions after the first (matches the usual default
    /// for conv and linear weights).
    FanIn,
}

/// Ordered store of named parameters with deterministic initialization.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    trainable: BTreeMap<String, bool>,
    seed: u64,
    device: Device,
}

impl ParamStore {
    /// Creates an empty store. All tensors are `f64` on the given device.
    pub fn new(seed: u64, device: &Device) -> Self {
        ParamStore {
            vars: BTreeMap::new(),
            trainable: BTreeMap::new(),
            seed,
            device: device.clone(),
        }
    }

    /// The device parameters live on.
    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Root scope with trainable defaults.
    pub fn root(&mut self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
            trainable: true,
        }
    }

    /// Creates (or returns the existing) parameter under `name`.
    fn get_or_init(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        trainable: bool,
    ) -> Result<Tensor> {
        if let Some(var) = self.vars.get(name) {
            if var.dims() != shape {
                return Err(Error::dim(format!(
                    "parameter {name} exists with shape {:?}, requested {shape:?}",
                    var.dims()
                )));
            }
            let t = var.as_tensor().clone();
            let frozen = !self.trainable.get(name).copied().unwrap_or(true);
            return Ok(if frozen { t.detach() } else { t });
        }
        let data = fill(self.seed, name, shape, init);
        let tensor = Tensor::from_vec(data, shape, &self.device)?;
        let var = Var::from_tensor(&tensor)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        self.trainable.insert(name.to_string(), trainable);
        Ok(if trainable { out } else { out.detach() })
    }

    /// All trainable `(name, var)` pairs in deterministic (sorted) order.
    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(n, _)| self.trainable.get(*n).copied().unwrap_or(true))
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect()
    }

    /// Trainable `(name, var)` pairs whose name starts with `prefix`.
    pub fn trainable_vars_under(&self, prefix: &str) -> Vec<(String, Var)> {
        self.trainable_vars()
            .into_iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .collect()
    }

    /// Whether the named parameter receives gradients.
    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.get(name).copied().unwrap_or(false)
    }

    /// Number of parameters (scalar count) under `prefix`.
    pub fn count_under(&self, prefix: &str) -> usize {
        self.vars
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// All parameter names in sorted order.
    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    /// Snapshot of every parameter as a plain tensor, sorted by name.
    pub fn export(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites existing parameters from `values` in place.
    ///
    /// Every store parameter must be present with a matching shape; extra
    /// entries in `values` are rejected. Module structs holding these tensors
    /// observe the new values because storage is shared.
    pub fn import(&mut self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for name in values.keys() {
            if !self.vars.contains_key(name) {
                return Err(Error::Mismatch(format!(
                    "checkpoint contains unknown parameter {name}"
                )));
            }
        }
        for (name, var) in &self.vars {
            let incoming = values.get(name).ok_or_else(|| {
                Error::Mismatch(format!("checkpoint is missing parameter {name}"))
            })?;
            if incoming.dims() != var.dims() {
                return Err(Error::Mismatch(format!(
                    "parameter {name}: checkpoint shape {:?} vs model shape {:?}",
                    incoming.dims(),
                    var.dims()
                )));
            }
            // Deep copy: `set` refuses tensors sharing the var's storage,
            // which re-imported exports would otherwise do.
            var.set(&incoming.to_dtype(DType::F64)?.copy()?)?;
        }
        Ok(())
    }

    /// Hex SHA-256 over all `(name, little-endian f64 bytes)` under `prefix`,
    /// in sorted order. Used to assert frozen subtrees never drift.
    pub fn checksum_under(&self, prefix: &str) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in self.vars.iter().filter(|(n, _)| n.starts_with(prefix)) {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            let flat: Vec<f64> = var.as_tensor().flatten_all()?.to_vec1()?;
            for v in flat {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex(&hasher.finalize()))
    }

    /// Stable hex digest of the architecture: every `(name, shape, trainable)`
    /// triple in sorted order. Two stores agree iff they hold the same
    /// parameters with the same shapes and the same frozen/trainable split.
    pub fn arch_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, var) in &self.vars {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for d in var.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            hasher.update([u8::from(self.trainable.get(name).copied().unwrap_or(true))]);
        }
        hex(&hasher.finalize())
    }
}

/// Prefixed, trainability-scoped view into a [`ParamStore`].
///
/// Module constructors take a `&mut Scope` and register their parameters
/// under relative names; nesting builds the dotted path.
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
    trainable: bool,
}

impl Scope<'_> {
    /// Child scope `self.prefix + "." + name`.
    pub fn sub(&mut self, name: &str) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope {
            store: self.store,
            prefix,
            trainable: self.trainable,
        }
    }

    /// Child scope whose parameters are frozen (detached, never optimized).
    pub fn frozen(&mut self, name: &str) -> Scope<'_> {
        let mut s = self.sub(name);
        s.trainable = false;
        s
    }

    /// Registers (or fetches) a parameter and returns its tensor.
    ///
    /// Trainable scopes return the gradient-tracked tensor; frozen scopes
    /// return a detached view sharing the same storage.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.get_or_init(&full, shape, init, self.trainable)
    }

    /// The device parameters are created on.
    pub fn device(&self) -> Device {
        self.store.device.clone()
    }
}

/// Fills a buffer deterministically from `(seed, name, init)`.
fn fill(seed: u64, name: &str, shape: &[usize], init: Init) -> Vec<f64> {
    let n: usize = shape.iter().product();
    match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Const(c) => vec![c; n],
        Init::Uniform { lo, hi } => {
            let mut rng = rng_for(seed, name);
            (0..n).map(|_| lo + rng.gen::<f64>() * (hi - lo)).collect()
        }
        Init::FanIn => {
            let fan_in: usize = shape.iter().skip(1).product::<usize>().max(1);
            let b = 1.0 / (fan_in as f64).sqrt();
            let mut rng = rng_for(seed, name);
            (0..n).map(|_| -b + rng.gen::<f64>() * 2.0 * b).collect()
        }
    }
}

/// Per-parameter RNG: ChaCha20 keyed by SHA-256(seed, name).
fn rng_for(seed: u64, name: &str) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha20Rng::from_seed(key)
}

/// Lowercase hex of a byte slice.
pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cpu() -> Device {
        Device::Cpu
    }

    #[test]
    fn init_is_deterministic_and_order_independent() {
        let mut a = ParamStore::new(7, &cpu());
        let mut b = ParamStore::new(7, &cpu());
        {
            let mut ra = a.root();
            ra.param("x", &[4, 3], Init::FanIn).unwrap();
            ra.param("y", &[2], Init::Uniform { lo: -1.0, hi: 1.0 }).unwrap();
        }
        {
            // Reversed creation order must not change values.
            let mut rb = b.root();
            rb.param("y", &[2], Init::Uniform { lo: -1.0, hi: 1.0 }).unwrap();
            rb.param("x", &[4, 3], Init::FanIn).unwrap();
        }
        for name in ["x", "y"] {
            let va: Vec<f64> = a.export()[name].flatten_all().unwrap().to_vec1().unwrap();
            let vb: Vec<f64> = b.export()[name].flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(va, vb, "parameter {name} differs across creation orders");
        }
    }

    #[test]
    fn different_seeds_and_names_decorrelate() {
        let mut a = ParamStore::new(1, &cpu());
        let mut b = ParamStore::new(2, &cpu());
        let ta = a.root().param("w", &[16], Init::FanIn).unwrap();
        let tb = b.root().param("w", &[16], Init::FanIn).unwrap();
        let va: Vec<f64> = ta.to_vec1().unwrap();
        let vb: Vec<f64> = tb.to_vec1().unwrap();
        assert_ne!(va, vb, "same name, different seed must differ");

        let mut c = ParamStore::new(1, &cpu());
        let t1 = c.root().param("w1", &[16], Init::FanIn).unwrap();
        let t2 = c.root().param("w2", &[16], Init::FanIn).unwrap();
        let v1: Vec<f64> = t1.to_vec1().unwrap();
        let v2: Vec<f64> = t2.to_vec1().unwrap();
        assert_ne!(v1, v2, "same seed, different name must differ");
    }

    #[test]
    fn frozen_scope_hands_out_detached_tensors() {
        let mut ps = ParamStore::new(3, &cpu());
        let mut root = ps.root();
        let mut fr = root.frozen("vgg");
        let w = fr.param("w", &[4], Init::Ones).unwrap();
        drop(fr);
        drop(root);
        // A frozen parameter never reaches the optimizer.
        assert!(ps.trainable_vars().is_empty());
        assert!(!ps.is_trainable("vgg.w"));
        // And the handed-out tensor carries no variable tracking.
        let loss = w.sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert!(grads.get(&w).is_none());
    }

    #[test]
    fn trainable_param_receives_gradients() {
        let mut ps = ParamStore::new(3, &cpu());
        let w = ps.root().param("w", &[4], Init::Ones).unwrap();
        let loss = (&w * &w).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let g = grads.get(&w).expect("trainable parameter must have a gradient");
        let gv: Vec<f64> = g.to_vec1().unwrap();
        assert_eq!(gv, vec![2.0; 4]);
    }

    #[test]
    fn import_rejects_shape_and_name_mismatches() {
        let mut ps = ParamStore::new(0, &cpu());
        ps.root().param("w", &[2, 2], Init::Zeros).unwrap();

        let mut wrong_shape = BTreeMap::new();
        wrong_shape.insert(
            "w".to_string(),
            Tensor::zeros(&[3, 3], DType::F64, &cpu()).unwrap(),
        );
        assert!(ps.import(&wrong_shape).is_err());

        let mut unknown = BTreeMap::new();
        unknown.insert(
            "w".to_string(),
            Tensor::zeros(&[2, 2], DType::F64, &cpu()).unwrap(),
        );
        unknown.insert(
            "ghost".to_string(),
            Tensor::zeros(&[1], DType::F64, &cpu()).unwrap(),
        );
        assert!(ps.import(&unknown).is_err());
    }

    #[test]
    fn import_updates_previously_handed_out_tensors() {
        let mut ps = ParamStore::new(0, &cpu());
        let w = ps.root().param("w", &[2], Init::Zeros).unwrap();
        let mut values = BTreeMap::new();
        values.insert(
            "w".to_string(),
            Tensor::from_vec(vec![5.0f64, 6.0], &[2], &cpu()).unwrap(),
        );
        ps.import(&values).unwrap();
        let v: Vec<f64> = w.to_vec1().unwrap();
        assert_eq!(v, vec![5.0, 6.0], "module-held tensors must see imported values");
    }

    #[test]
    fn checksum_tracks_content_and_arch_hash_tracks_structure() {
        let mut a = ParamStore::new(11, &cpu());
        a.root().param("m.w", &[3], Init::FanIn).unwrap();
        let before = a.checksum_under("m").unwrap();
        let arch = a.arch_hash();

        let mut values = BTreeMap::new();
        values.insert(
            "m.w".to_string(),
            Tensor::from_vec(vec![0.1f64, 0.2, 0.3], &[3], &cpu()).unwrap(),
        );
        a.import(&values).unwrap();
        assert_ne!(before, a.checksum_under("m").unwrap(), "content change must move checksum");
        assert_eq!(arch, a.arch_hash(), "content change must not move arch hash");
    }
}
