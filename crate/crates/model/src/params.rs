//! Named parameter trees: deterministic initialization, counting, flat
//! binary checkpoints with a JSON index.

use crate::{ModelError, ModelResult};
use ndarray::{ArrayD, IxDyn};
use niles_autodiff::{DType, Tensor};
use niles_solver::seeds::rng_from;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Ordered name -> tensor map holding every trainable array.
#[derive(Clone)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
    dtype: DType,
}

impl Params {
    pub fn new(dtype: DType) -> Params {
        Params {
            map: BTreeMap::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn insert(&mut self, name: &str, data: ArrayD<f64>) {
        assert!(
            !self.map.contains_key(name),
            "duplicate parameter `{name}`"
        );
        self.map.insert(name.to_string(), Tensor::leaf(data, self.dtype));
    }

    pub fn get(&self, name: &str) -> ModelResult<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    /// Panicking accessor for internal layers whose names are statically
    /// paired with the builder.
    pub fn p(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    /// Replace a parameter value (optimizer update); reuses the tree dtype.
    pub fn set(&mut self, name: &str, data: ArrayD<f64>) {
        let t = Tensor::leaf(data, self.dtype);
        let slot = self
            .map
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"));
        *slot = t;
    }

    /// Install an existing tensor handle (gradient-check probes).
    pub fn set_tensor(&mut self, name: &str, t: Tensor) {
        let slot = self
            .map
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"));
        *slot = t;
    }

    /// Total scalar count over the tree.
    pub fn count(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|t| t.is_finite())
    }
}

/// Sequential initializer: the RNG is consumed in builder-call order, so
/// initialization is a pure function of (architecture, seed).
pub struct ParamBuilder {
    pub params: Params,
    rng: ChaCha12Rng,
}

impl ParamBuilder {
    pub fn new(seed: u64, dtype: DType) -> ParamBuilder {
        ParamBuilder {
            params: Params::new(dtype),
            rng: rng_from(seed),
        }
    }

    fn normal(&mut self, shape: &[usize], std: f64) -> ArrayD<f64> {
        let mut a = ArrayD::zeros(IxDyn(shape));
        for v in a.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut self.rng);
            *v = n * std;
        }
        a
    }

    /// Variance-scaled linear layer `name.w` (in, out) and `name.b` (out,).
    /// `zero_out` zeroes the weights (residual-branch output projections).
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, zero_out: bool) {
        let w = if zero_out {
            ArrayD::zeros(IxDyn(&[fan_in, fan_out]))
        } else {
            self.normal(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
        };
        self.params.insert(&format!("{name}.w"), w);
        self.params
            .insert(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[fan_out])));
    }

    /// Layer norm gain (ones) and bias (zeros).
    pub fn layer_norm(&mut self, name: &str, width: usize) {
        self.params
            .insert(&format!("{name}.g"), ArrayD::from_elem(IxDyn(&[width]), 1.0));
        self.params
            .insert(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[width])));
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.params.insert(name, ArrayD::zeros(IxDyn(shape)));
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) {
        self.params
            .insert(name, ArrayD::from_elem(IxDyn(shape), value));
    }

    pub fn gaussian(&mut self, name: &str, shape: &[usize], std: f64) {
        let a = self.normal(shape, std);
        self.params.insert(name, a);
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorIndexEntry {
    shape: Vec<usize>,
    /// offset in f64 elements into the flat binary blob
    offset: usize,
    dtype: String,
}

/// Write a named tensor map as `<stem>.bin` (flat little-endian f64) plus
/// `<stem>.json` (name -> shape/offset/dtype).
pub fn write_tensor_map(stem: &Path, tensors: &BTreeMap<String, ArrayD<f64>>) -> ModelResult<()> {
    let mut index: BTreeMap<String, TensorIndexEntry> = BTreeMap::new();
    let mut blob: Vec<f64> = Vec::new();
    for (name, t) in tensors {
        index.insert(
            name.clone(),
            TensorIndexEntry {
                shape: t.shape().to_vec(),
                offset: blob.len(),
                dtype: "f64".into(),
            },
        );
        blob.extend(t.iter());
    }
    let mut file = std::fs::File::create(stem.with_extension("bin"))?;
    niles_solver::io::write_f64_slice(&mut file, &blob)?;
    std::fs::write(
        stem.with_extension("json"),
        serde_json::to_string_pretty(&index)?,
    )?;
    Ok(())
}

pub fn read_tensor_map(stem: &Path) -> ModelResult<BTreeMap<String, ArrayD<f64>>> {
    let index: BTreeMap<String, TensorIndexEntry> =
        serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
    let bytes = std::fs::read(stem.with_extension("bin"))?;
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut out = BTreeMap::new();
    for (name, e) in index {
        let n: usize = e.shape.iter().product();
        if e.offset + n > flat.len() {
            return Err(ModelError::Checkpoint(format!(
                "tensor `{name}` overruns the blob"
            )));
        }
        let a = ArrayD::from_shape_vec(IxDyn(&e.shape), flat[e.offset..e.offset + n].to_vec())
            .map_err(|err| ModelError::Checkpoint(err.to_string()))?;
        out.insert(name, a);
    }
    Ok(out)
}

impl Params {
    pub fn to_map(&self) -> BTreeMap<String, ArrayD<f64>> {
        self.map
            .iter()
            .map(|(k, v)| (k.clone(), v.to_array()))
            .collect()
    }

    pub fn from_map(map: BTreeMap<String, ArrayD<f64>>, dtype: DType) -> Params {
        let mut p = Params::new(dtype);
        for (k, v) in map {
            p.insert(&k, v);
        }
        p
    }

    /// Overwrite values from a map (shapes must match the existing tree).
    pub fn load_values(&mut self, map: &BTreeMap<String, ArrayD<f64>>) -> ModelResult<()> {
        for (name, v) in map {
            let cur = self.get(name)?;
            if cur.shape() != v.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "parameter `{name}` shape {:?} != checkpoint {:?}",
                    cur.shape(),
                    v.shape()
                )));
            }
            self.set(name, v.clone());
        }
        Ok(())
    }
}
