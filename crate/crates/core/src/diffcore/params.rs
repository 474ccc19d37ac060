use std::ops::Index;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tape::{Mat, Var};

pub const CHECKPOINT_SCHEMA: u32 = 1;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable matrices, in insertion order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "Checkpoint", into = "Checkpoint")]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Mat> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn values(&self) -> impl Iterator<Item = &Mat> {
        self.values.iter()
    }

    pub(crate) fn value_at_mut(&mut self, i: usize) -> &mut Mat {
        &mut self.values[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Mat::zeros(v.dim())).collect(),
        }
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.values.iter().flat_map(|v| v.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Dimension(format!(
                "flat vector has {} entries, store holds {}",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut offset = 0;
        for v in &mut self.values {
            let n = v.len();
            for (dst, src) in v.iter_mut().zip(&flat[offset..offset + n]) {
                *dst = *src;
            }
            offset += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn same_shape(&self, other: &ParamStore) -> bool {
        self.values.len() == other.values.len()
            && self.values.iter().zip(&other.values).all(|(a, b)| a.dim() == b.dim())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    schema: u32,
    params: Vec<NamedArray>,
}

#[derive(Serialize, Deserialize)]
struct NamedArray {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

impl TryFrom<Checkpoint> for ParamStore {
    type Error = Error;

    fn try_from(c: Checkpoint) -> Result<Self> {
        if c.schema != CHECKPOINT_SCHEMA {
            return Err(Error::Schema(format!("unsupported checkpoint schema {}", c.schema)));
        }
        let mut store = ParamStore::new();
        for p in c.params {
            let m = Array2::from_shape_vec((p.shape[0], p.shape[1]), p.data)
                .map_err(|e| Error::Schema(format!("parameter {}: {e}", p.name)))?;
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Schema(format!("parameter {} has non-finite entries", p.name)));
            }
            store.add(p.name, m);
        }
        Ok(store)
    }
}

impl From<ParamStore> for Checkpoint {
    fn from(s: ParamStore) -> Self {
        Checkpoint {
            schema: CHECKPOINT_SCHEMA,
            params: s
                .names
                .into_iter()
                .zip(s.values)
                .map(|(name, v)| NamedArray {
                    name,
                    shape: [v.nrows(), v.ncols()],
                    data: v.as_standard_layout().iter().copied().collect(),
                })
                .collect(),
        }
    }
}

/// Parameters of a store bound as leaves on a tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub(crate) fn new(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn flat_view_round_trip() {
        let mut s = ParamStore::new();
        s.add("a", arr2(&[[1.0, 2.0], [3.0, 4.0]]));
        s.add("b", arr2(&[[5.0, 6.0, 7.0]]));
        let flat = s.to_flat();
        assert_eq!(flat, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let mut t = s.zeros_like();
        t.set_flat(&flat).unwrap();
        assert_eq!(t, s);
        assert!(t.set_flat(&flat[1..]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_lossless() {
        let mut s = ParamStore::new();
        s.add("w", arr2(&[[0.1 + 0.2, std::f64::consts::PI], [-1e-300, 1.0 / 3.0]]));
        let text = s.to_json().unwrap();
        assert!(text.contains("\"schema\":1"));
        let back = ParamStore::from_json(&text).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn checkpoint_rejects_bad_shape() {
        let text = r#"{"schema":1,"params":[{"name":"w","shape":[2,2],"data":[1.0]}]}"#;
        assert!(ParamStore::from_json(text).is_err());
        let text = r#"{"schema":9,"params":[]}"#;
        assert!(ParamStore::from_json(text).is_err());
    }
}
