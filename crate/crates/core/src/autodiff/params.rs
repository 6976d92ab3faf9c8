use std::cell::RefCell;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;

/// Which optimizer phase a parameter belongs to.
///
/// `Model` covers encoder, decoder, decoder scale and flow; `Relevance` is the set encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Model,
    Relevance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Owned, named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        value: Tensor,
    ) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, group, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| self.entries[id.0].group == group)
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Records parameters onto `tape`; only groups accepted by `trainable` become gradient leaves.
    pub fn bind<'t, 's>(
        &'s self,
        tape: &'t Tape,
        trainable: fn(ParamGroup) -> bool,
    ) -> Binding<'t, 's> {
        Binding {
            tape,
            store: self,
            trainable,
            vars: RefCell::new(vec![None; self.entries.len()]),
        }
    }

    /// Binding with every parameter differentiable.
    pub fn bind_all<'t, 's>(&'s self, tape: &'t Tape) -> Binding<'t, 's> {
        self.bind(tape, |_| true)
    }

    /// Binding with every parameter constant (inference).
    pub fn bind_frozen<'t, 's>(&'s self, tape: &'t Tape) -> Binding<'t, 's> {
        self.bind(tape, |_| false)
    }
}

/// Lazily places parameters on a tape, so unused ones cost nothing.
pub struct Binding<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    trainable: fn(ParamGroup) -> bool,
    vars: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t> Binding<'t, '_> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        if let Some(v) = self.vars.borrow()[id.0] {
            return v;
        }
        let entry = &self.store.entries[id.0];
        let v = if (self.trainable)(entry.group) {
            self.tape.leaf(entry.value.clone())
        } else {
            self.tape.constant(entry.value.clone())
        };
        self.vars.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Gradient per bound trainable parameter; parameters not reached get zeros.
    pub fn collect(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        let vars = self.vars.borrow();
        let mut out = Vec::new();
        for (i, v) in vars.iter().enumerate() {
            let Some(v) = v else { continue };
            if v.requires_grad() {
                out.push((ParamId(i), grads.wrt(*v)));
            }
        }
        out
    }
}
