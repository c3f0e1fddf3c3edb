use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor plus its gradient slot and optimizer moments.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub value: Tensor,
    pub(crate) grad: Option<Vec<f64>>,
    pub(crate) first_moment: Vec<f64>,
    pub(crate) second_moment: Vec<f64>,
    pub(crate) step: u64,
    pub(crate) frozen: bool,
}

impl Parameter {
    fn new(value: Tensor) -> Self {
        let n = value.len();
        Parameter {
            value,
            grad: None,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step: 0,
            frozen: false,
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: Tensor) -> ParamId {
        self.params.push(Parameter::new(value));
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&[f64]> {
        self.params[id.0].grad.as_deref()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Frozen parameters enter the tape as constants and never receive gradients.
    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => p.grad = Some(g.to_vec()),
        }
    }

    /// Gives every trainable parameter a gradient slot, zero when not yet reached.
    pub(crate) fn ensure_grads(&mut self) {
        for p in &mut self.params {
            if !p.frozen && p.grad.is_none() {
                p.grad = Some(vec![0.0; p.value.len()]);
            }
        }
    }

    pub fn num_values(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|id| self.params[id.0].value.len()).sum()
    }
}
