use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::precision::quantize_in_place;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adjoint of one recorded primitive: given the gradient of its output and a
/// flag per input saying whether that input needs a gradient, returns one
/// entry per input.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Record {
    op: &'static str,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    leaf: bool,
    numel: usize,
}

#[derive(Default)]
struct TapeInner {
    records: RefCell<Vec<Record>>,
    leaf_grads: RefCell<HashMap<usize, Vec<f64>>>,
}

/// Wengert list of executed primitives. Records are appended during the
/// forward pass, so their order is already topological.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<TapeInner>,
}

/// A tensor value recorded on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackwardStats {
    /// Records whose adjoint was evaluated (or leaves that received a gradient).
    pub visited: usize,
    pub recorded: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let id = self.push(Record {
            op: "leaf",
            inputs: Vec::new(),
            backward: None,
            requires_grad,
            leaf: true,
            numel: value.numel(),
        });
        Var {
            tape: self.clone(),
            id,
            value,
            requires_grad,
        }
    }

    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.inner.records.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Names of recorded ops in execution order.
    pub fn ops(&self) -> Vec<&'static str> {
        self.inner.records.borrow().iter().map(|r| r.op).collect()
    }

    fn push(&self, rec: Record) -> usize {
        let mut records = self.inner.records.borrow_mut();
        records.push(rec);
        records.len() - 1
    }

    pub(crate) fn record<F>(&self, op: &'static str, inputs: &[&Var], value: Tensor, backward: F) -> Var
    where
        F: Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + 'static,
    {
        let requires_grad = inputs.iter().any(|v| v.requires_grad);
        let id = self.push(Record {
            op,
            inputs: inputs.iter().map(|v| v.id).collect(),
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
            requires_grad,
            leaf: false,
            numel: value.numel(),
        });
        Var {
            tape: self.clone(),
            id,
            value,
            requires_grad,
        }
    }

    /// Reverse sweep from a scalar loss. Leaf gradients accumulate across
    /// calls until [`Tape::zero_grad`].
    pub fn backward(&self, loss: &Var) -> Result<BackwardStats> {
        if !loss.tape.same(self) {
            return Err(Error::Autodiff("loss belongs to a different tape".into()));
        }
        if loss.value.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.value.shape()
            )));
        }
        let records = self.inner.records.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        let mut visited = 0;
        let mut leaf_grads = self.inner.leaf_grads.borrow_mut();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let rec = &records[id];
            if !rec.requires_grad {
                continue;
            }
            visited += 1;
            if rec.leaf {
                accumulate(leaf_grads.entry(id).or_insert_with(|| vec![0.0; rec.numel]), &g);
                continue;
            }
            let Some(bw) = rec.backward.as_ref() else { continue };
            let needs: Vec<bool> = rec.inputs.iter().map(|&i| records[i].requires_grad).collect();
            let input_grads = bw(&g, &needs);
            debug_assert_eq!(input_grads.len(), rec.inputs.len(), "adjoint arity of {}", rec.op);
            for ((&input, gi), need) in rec.inputs.iter().zip(input_grads).zip(needs) {
                let (Some(gi), true) = (gi, need) else { continue };
                debug_assert_eq!(gi.len(), records[input].numel, "adjoint size of {}", rec.op);
                match &mut grads[input] {
                    Some(acc) => accumulate(acc, &gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        for g in leaf_grads.values_mut() {
            quantize_in_place(g);
        }
        Ok(BackwardStats {
            visited,
            recorded: records.len(),
        })
    }

    /// Accumulated gradient of a leaf, if it received one.
    pub fn grad(&self, var: &Var) -> Option<Tensor> {
        let grads = self.inner.leaf_grads.borrow();
        grads
            .get(&var.id)
            .map(|g| Tensor::from_parts(var.value.shape().to_vec(), g.clone()))
    }

    pub fn zero_grad(&self) {
        self.inner.leaf_grads.borrow_mut().clear();
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

fn accumulate(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn item(&self) -> Result<f64> {
        self.value.item()
    }

    pub(crate) fn check_same_tape(&self, other: &Var) -> Result<()> {
        if self.tape.same(&other.tape) {
            Ok(())
        } else {
            Err(Error::Autodiff("operands recorded on different tapes".into()))
        }
    }
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_scalar_backward_rejected() {
        let tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(tape.backward(&x).is_err());
    }

    #[test]
    fn constants_never_receive_gradients() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[3], 2.0));
        let loss = x.sum();
        tape.backward(&loss).unwrap();
        assert!(tape.grad(&x).is_none());
    }

    #[test]
    fn each_record_visited_once() {
        let tape = Tape::new();
        let x = tape.param(Tensor::full(&[4], 1.5));
        // x feeds three consumers; the shared node must still be swept once.
        let a = x.mul(&x).unwrap();
        let b = a.add(&x).unwrap();
        let loss = b.sum();
        let stats = tape.backward(&loss).unwrap();
        assert_eq!(stats.visited, stats.recorded);
        let g = tape.grad(&x).unwrap();
        assert!(g.data().iter().all(|&v| v == 2.0 * 1.5 + 1.0));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::new();
        let x = tape.param(Tensor::full(&[2], 1.0));
        let loss = x.sum();
        tape.backward(&loss).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&x).unwrap().data(), &[2.0, 2.0]);
        tape.zero_grad();
        assert!(tape.grad(&x).is_none());
    }

    #[test]
    fn mixing_tapes_is_an_error() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.param(Tensor::zeros(&[2]));
        let b = t2.param(Tensor::zeros(&[2]));
        assert!(a.add(&b).is_err());
    }
}
