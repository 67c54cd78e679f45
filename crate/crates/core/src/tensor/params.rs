use super::{Graph, NodeId, Tensor};
use crate::error::{contract, Result};

/// Named, ordered collection of parameter tensors owned by one network.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Flattened copy of every parameter, in order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// 64-bit FNV-1a hash over the exact parameter bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tensors {
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Replaces every tensor, keeping names. Shapes must match.
    pub fn assign(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(contract!(
                "expected {} tensors, got {}",
                self.tensors.len(),
                tensors.len()
            ));
        }
        for (i, (old, new)) in self.tensors.iter().zip(&tensors).enumerate() {
            if old.shape() != new.shape() {
                return Err(contract!(
                    "parameter {} shape {:?} != {:?}",
                    self.names[i],
                    old.shape(),
                    new.shape()
                ));
            }
        }
        self.tensors = tensors;
        Ok(())
    }

    /// Prefixes names, used when bundling several networks into one checkpoint.
    pub fn prefixed(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.iter()
            .map(|(n, t)| (format!("{prefix}.{n}"), t.clone()))
            .collect()
    }

    /// Rebuilds tensors from `(name, tensor)` entries with the given prefix,
    /// checking names and shapes against `self`.
    pub fn load_prefixed(&mut self, prefix: &str, entries: &[(String, Tensor)]) -> Result<()> {
        let mut out = Vec::with_capacity(self.len());
        for name in &self.names {
            let key = format!("{prefix}.{name}");
            let found = entries
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| contract!("checkpoint lacks tensor {key}"))?;
            out.push(found.1.clone());
        }
        self.assign(out)
    }
}

/// Graph node ids of a bound [`ParamSet`], index-aligned with it.
#[derive(Debug, Clone)]
pub struct Bound {
    ids: Vec<NodeId>,
}

impl Bound {
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn get(&self, i: usize) -> NodeId {
        self.ids[i]
    }
}

impl Graph {
    /// Adds every tensor of `params` as a leaf. With `trainable = false` the
    /// leaves are constants and backward skips them.
    pub fn bind(&mut self, params: &ParamSet, trainable: bool) -> Bound {
        let ids = params
            .tensors()
            .iter()
            .map(|t| {
                if trainable {
                    self.param(t.clone())
                } else {
                    self.constant(t.clone())
                }
            })
            .collect();
        Bound { ids }
    }
}

/// Euclidean norm over a list of gradient tensors.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}
