use super::matrix::Matrix;

/// A named trainable tensor tagged with the group it belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: &'static str,
    pub value: Matrix,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: &'static str, value: Matrix) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.data().len()).sum()
    }

    /// All parameter values flattened in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for p in &self.params {
            out.extend_from_slice(p.value.data());
        }
        out
    }

    /// Overwrites all values from a flat payload produced by [`flatten`](Self::flatten).
    pub fn load_flat(&mut self, flat: &[f64]) -> bool {
        if flat.len() != self.num_scalars() {
            return false;
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.value.data().len();
            p.value.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        true
    }
}

/// Gradients aligned with a [`ParamStore`]; `None` means no gradient flowed.
#[derive(Clone, Debug)]
pub struct Grads {
    grads: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn new(n: usize) -> Self {
        Self { grads: vec![None; n] }
    }

    pub fn for_store(store: &ParamStore) -> Self {
        Self::new(store.len())
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Matrix) {
        match &mut self.grads[id.0] {
            Some(existing) => existing.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn accumulate_owned(&mut self, id: ParamId, g: Matrix) {
        match &mut self.grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }

    pub fn merge(&mut self, other: Grads) {
        for (i, g) in other.grads.into_iter().enumerate() {
            if let Some(g) = g {
                self.accumulate_owned(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, f: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_in_place(f);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().map(|g| g.sq_norm()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.is_finite())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
