use std::collections::BTreeMap;

use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    /// Row 0 is the padding vector: kept at zero and never updated.
    pub pad_row: bool,
}

/// Named learnable tensors. Insertion order is the canonical order used by
/// checkpoints and gradient checks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Parameter {
            name: name.into(),
            value,
            pad_row: false,
        });
        ParamId(self.params.len() - 1)
    }

    /// Adds a `[rows × width]` table whose first row is forced to zero.
    pub fn add_embedding(&mut self, name: impl Into<String>, mut value: Tensor) -> ParamId {
        let width = value.shape()[1];
        value.data_mut()[..width].fill(0.0);
        self.params.push(Parameter {
            name: name.into(),
            value,
            pad_row: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar weights.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Gradient for one parameter: dense, or row-sparse for embedding lookups.
#[derive(Clone, Debug, PartialEq)]
pub enum GradBuf {
    Dense(Vec<f64>),
    Rows {
        width: usize,
        rows: BTreeMap<usize, Vec<f64>>,
    },
}

impl GradBuf {
    fn add(&mut self, other: &GradBuf) {
        match (self, other) {
            (GradBuf::Dense(a), GradBuf::Dense(b)) => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
            (GradBuf::Rows { rows: a, .. }, GradBuf::Rows { rows: b, .. }) => {
                for (r, g) in b {
                    match a.get_mut(r) {
                        Some(dst) => {
                            for (x, y) in dst.iter_mut().zip(g) {
                                *x += y;
                            }
                        }
                        None => {
                            a.insert(*r, g.clone());
                        }
                    }
                }
            }
            (GradBuf::Dense(a), GradBuf::Rows { width, rows }) => {
                for (r, g) in rows {
                    for (x, y) in a[r * width..(r + 1) * width].iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            (this @ GradBuf::Rows { .. }, GradBuf::Dense(b)) => {
                let len = b.len();
                let mut dense = this.to_dense(len);
                for (x, y) in dense.iter_mut().zip(b) {
                    *x += y;
                }
                *this = GradBuf::Dense(dense);
            }
        }
    }

    pub fn to_dense(&self, len: usize) -> Vec<f64> {
        match self {
            GradBuf::Dense(v) => v.clone(),
            GradBuf::Rows { width, rows } => {
                let mut out = vec![0.0; len];
                for (r, g) in rows {
                    out[r * width..(r + 1) * width].copy_from_slice(g);
                }
                out
            }
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            GradBuf::Dense(v) => v.iter().all(|x| x.is_finite()),
            GradBuf::Rows { rows, .. } => rows.values().flatten().all(|x| x.is_finite()),
        }
    }
}

/// Parameter gradients collected from one or more backward passes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    bufs: Vec<Option<GradBuf>>,
}

impl Gradients {
    pub fn new(num_params: usize) -> Self {
        Gradients {
            bufs: vec![None; num_params],
        }
    }

    fn slot(&mut self, id: ParamId) -> &mut Option<GradBuf> {
        if self.bufs.len() <= id.0 {
            self.bufs.resize(id.0 + 1, None);
        }
        &mut self.bufs[id.0]
    }

    pub fn add_dense(&mut self, id: ParamId, g: &[f64]) {
        match self.slot(id) {
            Some(buf) => buf.add(&GradBuf::Dense(g.to_vec())),
            slot @ None => *slot = Some(GradBuf::Dense(g.to_vec())),
        }
    }

    pub(crate) fn add_dense_owned(&mut self, id: ParamId, g: Vec<f64>) {
        match self.slot(id) {
            Some(buf) => buf.add(&GradBuf::Dense(g)),
            slot @ None => *slot = Some(GradBuf::Dense(g)),
        }
    }

    pub fn add_row(&mut self, id: ParamId, row: usize, g: &[f64]) {
        let width = g.len();
        let slot = self.slot(id);
        if slot.is_none() {
            *slot = Some(GradBuf::Rows {
                width,
                rows: BTreeMap::new(),
            });
        }
        match slot.as_mut().unwrap() {
            GradBuf::Rows { rows, .. } => {
                let dst = rows.entry(row).or_insert_with(|| vec![0.0; width]);
                for (x, y) in dst.iter_mut().zip(g) {
                    *x += y;
                }
            }
            GradBuf::Dense(d) => {
                for (x, y) in d[row * width..(row + 1) * width].iter_mut().zip(g) {
                    *x += y;
                }
            }
        }
    }

    /// Adds `other` into `self`, parameter by parameter.
    pub fn merge(&mut self, other: &Gradients) {
        for (i, buf) in other.bufs.iter().enumerate() {
            if let Some(b) = buf {
                match self.slot(ParamId(i)) {
                    Some(dst) => dst.add(b),
                    slot @ None => *slot = Some(b.clone()),
                }
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&GradBuf> {
        self.bufs.get(id.0).and_then(|b| b.as_ref())
    }

    /// Dense copy of the gradient for `id` (zeros when untouched).
    pub fn dense(&self, id: ParamId, len: usize) -> Vec<f64> {
        match self.get(id) {
            Some(b) => b.to_dense(len),
            None => vec![0.0; len],
        }
    }

    pub fn remove(&mut self, id: ParamId) {
        if let Some(slot) = self.bufs.get_mut(id.0) {
            *slot = None;
        }
    }

    /// First parameter whose gradient holds a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<ParamId> {
        self.bufs
            .iter()
            .position(|b| b.as_ref().is_some_and(|b| !b.is_finite()))
            .map(ParamId)
    }
}
