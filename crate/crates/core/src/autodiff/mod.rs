//! Tape-based reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and, when at least one operand requires
//! a gradient, appends an entry holding its backward rule. [`Tape::backward`]
//! replays the entries in reverse and returns per-variable gradients;
//! [`Tape::backward_into`] additionally accumulates the gradients of bound
//! parameters into a [`ParamStore`].

mod ops;
mod spatial;

pub use ops::LOG_FLOOR;
pub(crate) use spatial::resize_bilinear_forward;

use crate::error::{arg_err, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward rule receives: the gradient flowing into the op output,
/// the op's input values, its output value and which inputs need a gradient.
pub struct BackwardCtx<'a, S> {
    pub grad: &'a Tensor<S>,
    pub inputs: Vec<&'a Tensor<S>>,
    pub output: &'a Tensor<S>,
    pub needs: Vec<bool>,
}

type BackwardFn<S> = Box<dyn Fn(&BackwardCtx<'_, S>) -> Vec<Option<Tensor<S>>> + Send>;

struct Entry<S> {
    output: usize,
    inputs: Vec<usize>,
    backward: BackwardFn<S>,
}

pub struct Tape<S: Scalar = f32> {
    values: Vec<Tensor<S>>,
    grad_flags: Vec<bool>,
    entries: Vec<Entry<S>>,
    bindings: Vec<(ParamId, Var)>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { values: Vec::new(), grad_flags: Vec::new(), entries: Vec::new(), bindings: Vec::new() }
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.values.push(value);
        self.grad_flags.push(requires_grad);
        Var(self.values.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::get`].
    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    /// Binds a parameter as a differentiable leaf. Binding the same
    /// parameter twice returns the same variable.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.bindings.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), !p.frozen);
        self.bindings.push((id, v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.grad_flags[v.0]
    }

    /// Number of recorded backward entries.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Records an operation. If no input requires a gradient the output is
    /// stored as a constant and no entry is added.
    pub fn record<F>(&mut self, inputs: &[Var], output: Tensor<S>, backward: F) -> Var
    where
        F: Fn(&BackwardCtx<'_, S>) -> Vec<Option<Tensor<S>>> + Send + 'static,
    {
        let needs_grad = inputs.iter().any(|v| self.grad_flags[v.0]);
        let out = self.leaf(output, needs_grad);
        if needs_grad {
            self.entries.push(Entry {
                output: out.0,
                inputs: inputs.iter().map(|v| v.0).collect(),
                backward: Box::new(backward),
            });
        }
        out
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let lv = &self.values[loss.0];
        if !lv.is_scalar() {
            return Err(arg_err!("backward needs a scalar loss, got shape {:?}", lv.shape()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), S::one()));
        let mut visited = Vec::new();

        for (ei, entry) in self.entries.iter().enumerate().rev() {
            let Some(g) = grads[entry.output].take() else { continue };
            visited.push(ei);
            let ctx = BackwardCtx {
                grad: &g,
                inputs: entry.inputs.iter().map(|&i| &self.values[i]).collect(),
                output: &self.values[entry.output],
                needs: entry.inputs.iter().map(|&i| self.grad_flags[i]).collect(),
            };
            let input_grads = (entry.backward)(&ctx);
            debug_assert_eq!(input_grads.len(), entry.inputs.len());
            for (&i, ig) in entry.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.grad_flags[i] {
                    continue;
                }
                debug_assert_eq!(ig.shape(), self.values[i].shape());
                match &mut grads[i] {
                    Some(acc) => acc.data_mut().iter_mut().zip(ig.data()).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }

        Ok(Gradients { grads, bindings: self.bindings.clone(), visited })
    }

    /// Reverse pass that adds each bound parameter's gradient into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<S>) -> Result<Gradients<S>> {
        let grads = self.backward(loss)?;
        grads.accumulate_into(store);
        Ok(grads)
    }
}

pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    bindings: Vec<(ParamId, Var)>,
    visited: Vec<usize>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Indices of the tape entries whose backward rule ran, in run order.
    pub fn visited(&self) -> &[usize] {
        &self.visited
    }

    pub fn accumulate_into(&self, store: &mut ParamStore<S>) {
        for &(id, v) in &self.bindings {
            if let Some(g) = self.get(v) {
                store.get_mut(id).accumulate_grad(g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_derivative_six_at_three() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::zeros([2]));
        let y = tape.relu(x);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn constants_add_no_entries() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::ones([3]));
        let b = tape.constant(Tensor::ones([3]));
        let c = tape.add(a, b).unwrap();
        let _ = tape.exp(c);
        assert_eq!(tape.len(), 0);
        let x = tape.input(Tensor::ones([3]));
        let _ = tape.mul(x, c).unwrap();
        assert_eq!(tape.len(), 1);
    }

    #[test]
    fn entries_are_replayed_in_reverse() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::scalar(0.5));
        let a = tape.exp(x);
        let b = tape.mul_scalar(a, 2.0);
        let c = tape.log(b);
        let d = tape.mul(c, x).unwrap();
        let g = tape.backward(d).unwrap();
        assert_eq!(g.visited(), &[3, 2, 1, 0]);
    }

    #[test]
    fn disconnected_parameter_stays_zero() {
        let mut store = ParamStore::<f64>::new();
        let used = store.add("used", Tensor::scalar(2.0));
        let unused = store.add("unused", Tensor::scalar(5.0));
        let mut tape = Tape::new();
        let u = tape.param(&store, used);
        let _ = tape.param(&store, unused);
        let y = tape.mul(u, u).unwrap();
        tape.backward_into(y, &mut store).unwrap();
        assert_eq!(store.get(used).grad.item(), 4.0);
        assert_eq!(store.get(unused).grad.item(), 0.0);
    }
}
