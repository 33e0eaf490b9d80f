use std::cell::RefCell;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Float, Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

/// Named parameter tensors owned by a model.
///
/// Names are dotted paths (`encoder.block0.attn.q.w`); freezing works on
/// name prefixes so whole components can be held fixed during training.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.into(),
            value,
            frozen: false,
        });
        id
    }

    pub fn randn<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: &[usize], std: Float, rng: &mut R) -> ParamId {
        self.add(name, Tensor::randn(shape, std, rng))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total scalar count, optionally restricted to a name prefix.
    pub fn count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = frozen;
            n += 1;
        }
        n
    }

    /// Replaces values by name; every stored tensor must be present with a matching shape.
    pub fn load_values(&mut self, values: Vec<(String, Tensor)>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.params.len(),
                values.len()
            )));
        }
        for (name, value) in values {
            let id = self
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
            let slot = &mut self.params[id.0].value;
            if slot.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {:?} vs {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value;
        }
        Ok(())
    }
}

/// Binds a parameter store onto a tape for one forward/backward pass.
///
/// Parameters are recorded lazily on first use, so a forward that touches
/// only part of a model records only that part.
pub struct Session<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    bound: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t, 's> Session<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Session {
            tape,
            store,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let p = &self.store.params[id.0];
        let v = if p.frozen {
            self.tape.constant(p.value.clone())
        } else {
            self.tape.var(p.value.clone())
        };
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    /// Collects parameter gradients after a backward pass.
    pub fn param_grads(&self, grads: &Gradients) -> ParamGrads {
        let bound = self.bound.borrow();
        ParamGrads {
            grads: bound
                .iter()
                .map(|b| b.and_then(|v| grads.get(v).cloned()))
                .collect(),
        }
    }
}

/// Per-parameter gradients; `None` where a parameter received no gradient.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn empty(n: usize) -> Self {
        ParamGrads {
            grads: vec![None; n],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Elementwise sum; used to combine per-sample gradients in a fixed order.
    pub fn accumulate(&mut self, other: ParamGrads) {
        for (mine, theirs) in self.grads.iter_mut().zip(other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(a), Some(b)) => {
                    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                        *x += y;
                    }
                }
                (None, Some(b)) => *mine = Some(b),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: Float) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn is_nonzero(&self, id: ParamId) -> bool {
        self.get(id).is_some_and(|g| g.data().iter().any(|&v| v != 0.0))
    }

    pub fn check_finite(&self) -> Result<()> {
        for g in self.grads.iter().flatten() {
            g.check_finite("gradient")?;
        }
        Ok(())
    }
}
