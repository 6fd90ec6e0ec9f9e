//! Named parameter storage with a frozen/tunable partition.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::real::Real;
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which part of the model owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Component {
    Tokenizer,
    PosEmbed,
    Block(usize),
    FinalNorm,
    Side,
    Head,
}

impl Component {
    pub fn is_backbone(self) -> bool {
        matches!(
            self,
            Component::Tokenizer | Component::PosEmbed | Component::Block(_) | Component::FinalNorm
        )
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Matrix<T>,
    pub component: Component,
    pub frozen: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix<T>, component: Component) -> ParamId {
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry { name: name.into(), value, component, frozen: true });
        id
    }

    /// Uniform init in `±1/√fan_in`.
    pub fn insert_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        component: Component,
        rng: &mut RngStream,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value = Matrix::from_fn(rows, cols, |_, _| T::lit(rng.uniform(-bound, bound)));
        self.insert(name, value, component)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.entries[id.0].value
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    /// Marks exactly the parameters selected by `tunable` as trainable.
    pub fn set_tunable_where(&mut self, tunable: impl Fn(&ParamEntry<T>) -> bool) {
        for e in &mut self.entries {
            e.frozen = !tunable(e);
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn tunable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, e)| !e.frozen).map(|(id, _)| id).collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn count_elements(&self, pred: impl Fn(&ParamEntry<T>) -> bool) -> usize {
        self.entries.iter().filter(|e| pred(e)).map(|e| e.value.len()).sum()
    }

    pub fn tunable_count(&self) -> usize {
        self.count_elements(|e| !e.frozen)
    }

    /// Overwrites values by name; every record must name an existing
    /// parameter of the same shape.
    pub fn load_values(&mut self, records: Vec<(String, Matrix<T>)>) -> Result<()> {
        for (name, value) in records {
            let id = self
                .find(&name)
                .ok_or_else(|| Error::Format(format!("unknown parameter `{name}`")))?;
            let current = &mut self.entries[id.0].value;
            if current.shape() != value.shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, file holds {:?}",
                    current.shape(),
                    value.shape()
                )));
            }
            *current = value;
        }
        Ok(())
    }

    /// Stable digest of every value bit, used to check frozen parameters
    /// survive training untouched.
    pub fn fingerprint(&self, pred: impl Fn(&ParamEntry<T>) -> bool) -> u64 {
        // FNV-1a over names and raw little-endian bytes
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        let mut buf = Vec::new();
        for e in self.entries.iter().filter(|e| pred(e)) {
            mix(e.name.as_bytes());
            buf.clear();
            for &v in e.value.as_slice() {
                v.to_le_bytes_vec(&mut buf);
            }
            mix(&buf);
        }
        h
    }
}
