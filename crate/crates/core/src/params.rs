//! Named parameter storage.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Parameters in a fixed insertion order, addressable by stable names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
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

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Records every parameter as a tape leaf. Parameters rejected by
    /// `trainable` become constants and receive no gradient.
    pub fn bind(&self, tape: &mut Tape, trainable: &dyn Fn(&str) -> bool) -> Vec<Var> {
        self.iter()
            .map(|(name, t)| {
                if trainable(name) {
                    let mut t = t.clone();
                    t.set_requires_grad(true);
                    tape.leaf(&t)
                } else {
                    tape.leaf(t)
                }
            })
            .collect()
    }

    /// Adds `scale * grad` from the tape into each tensor's accumulator.
    pub fn accumulate_from(&mut self, tape: &Tape, vars: &[Var], scale: f64) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(vars) {
            if let Some(g) = tape.grad(v) {
                t.accumulate_grad(g, scale)?;
            }
        }
        Ok(())
    }

    /// Order-sensitive FNV-1a digest over names, shapes and value bits.
    pub fn checksum(&self, filter: &dyn Fn(&str) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, t) in self.iter().filter(|(n, _)| filter(n)) {
            feed(name.as_bytes());
            for &d in t.shape() {
                feed(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn to_records(&self) -> Vec<TensorRecord> {
        self.iter()
            .map(|(n, t)| TensorRecord::new(n, t.shape(), t.data()))
            .collect()
    }

    pub fn from_records(records: Vec<TensorRecord>) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for r in records {
            let (name, t) = r.into_tensor()?;
            store.insert(name, t)?;
        }
        Ok(store)
    }
}

/// Serialized tensor: little-endian f64 bytes in base64, so round trips are
/// bit-exact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: String,
}

impl TensorRecord {
    pub fn new(name: &str, shape: &[usize], data: &[f64]) -> TensorRecord {
        use base64::Engine;
        let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        TensorRecord {
            name: name.to_owned(),
            shape: shape.to_vec(),
            data: base64::engine::general_purpose::STANDARD.encode(bytes),
        }
    }

    pub fn decode_data(&self) -> Result<Vec<f64>> {
        use base64::Engine;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&self.data)
            .map_err(|e| Error::Data(format!("tensor {}: {e}", self.name)))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Data(format!("tensor {}: truncated payload", self.name)));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    pub fn into_tensor(self) -> Result<(String, Tensor)> {
        let data = self.decode_data()?;
        let t = Tensor::new(self.shape, data)?;
        Ok((self.name, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_round_trip_is_bit_exact() {
        let vals = vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -3.5];
        let r = TensorRecord::new("w", &[5], &vals);
        let back = r.decode_data().unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&vals));
    }

    #[test]
    fn checksum_tracks_values_and_filter() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::vector(vec![1.0, 2.0])).unwrap();
        s.insert("b", Tensor::vector(vec![3.0])).unwrap();
        let all = s.checksum(&|_| true);
        let only_a = s.checksum(&|n| n == "a");
        s.get_mut("b").unwrap().data_mut()[0] = 4.0;
        assert_ne!(s.checksum(&|_| true), all);
        assert_eq!(s.checksum(&|n| n == "a"), only_a);
        assert!(s.insert("a", Tensor::scalar(0.0)).is_err());
    }
}
