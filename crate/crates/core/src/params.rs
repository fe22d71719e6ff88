//! Named parameter container shared by the encoder, heads and optimizer.

use std::collections::BTreeMap;
use std::hash::Hasher;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

/// Prefix of every shared encoder parameter.
pub const SHARED_PREFIX: &str = "shared/";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Entries whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.tensors.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Hash over names, shapes and the exact bit patterns of every value.
    pub fn fingerprint(&self) -> u64 {
        self.tensors
            .iter()
            .map(|(k, v)| (k.as_str(), fingerprint_tensor(v)))
            .fold(Fnv::default(), |mut h, (k, t)| {
                h.write(k.as_bytes());
                h.write_u64(t);
                h
            })
            .finish()
    }

    /// Per-tensor fingerprints, for reporting which entries changed.
    pub fn fingerprints(&self) -> BTreeMap<String, u64> {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), fingerprint_tensor(v)))
            .collect()
    }

    /// Every entry rounded through `f32`.
    pub fn round_to_f32(&self) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.round_to_f32()))
                .collect(),
        }
    }
}

impl FromIterator<(String, Tensor)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamStore {
            tensors: iter.into_iter().collect(),
        }
    }
}

fn fingerprint_tensor(t: &Tensor) -> u64 {
    let mut h = Fnv::default();
    for &d in t.shape() {
        h.write_u64(d as u64);
    }
    for v in t.data() {
        h.write_u64(v.to_bits());
    }
    h.finish()
}

struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Hasher for Fnv {
    fn finish(&self) -> u64 {
        self.0
    }
    fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 = (self.0 ^ *b as u64).wrapping_mul(0x0000_0100_0000_01B3);
        }
    }
}

/// Normal(0, std) truncated to two standard deviations.
pub fn truncated_normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

/// Whether weight decay applies to a parameter: biases and normalization
/// parameters are excluded.
pub fn decays(name: &str) -> bool {
    let last = name.rsplit('/').next().unwrap_or(name);
    !(last == "bias" || last == "gamma" || last == "beta" || name.contains("/norm/"))
}
