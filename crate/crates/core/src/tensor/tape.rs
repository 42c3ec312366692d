use std::sync::atomic::{AtomicU64, Ordering};

use super::{matmul_into, Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Vector-Jacobian product of one recorded operation.
///
/// `needs[i]` tells whether input `i` wants a gradient; entries returned for
/// inputs that do not are ignored.
pub trait Backward<T: Scalar> {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    inputs: Vec<usize>,
    backward: Option<Box<dyn Backward<T>>>,
    grad: Option<Vec<T>>,
}

/// Linear record of operations, replayed in reverse by [`Tape::backward`].
///
/// A tape is single-threaded; operations may still parallelise internally.
pub struct Tape<T: Scalar = f64> {
    id: u64,
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf value.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Node {
            value,
            requires_grad,
            inputs: Vec::new(),
            backward: None,
            grad: None,
        })
    }

    /// A leaf that participates in differentiation.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that does not.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::contract("variable is detached from this tape"));
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable is detached from this tape");
        &self.nodes[v.index].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        if v.tape != self.id {
            return None;
        }
        let node = &self.nodes[v.index];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad is co-shaped"))
    }

    /// Records the result of an operation. The backward rule is only kept
    /// when some input participates in differentiation.
    pub fn record(&mut self, inputs: &[Var], output: Tensor<T>, backward: impl Backward<T> + 'static) -> Result<Var> {
        let mut idx = Vec::with_capacity(inputs.len());
        for &v in inputs {
            idx.push(self.check(v)?);
        }
        let requires_grad = idx.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(Node {
            value: output,
            requires_grad,
            inputs: idx,
            backward: requires_grad.then(|| Box::new(backward) as Box<dyn Backward<T>>),
            grad: None,
        }))
    }

    /// Clears all gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    /// Back-propagates from a scalar `loss`, populating gradients of every
    /// node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.check(loss)?;
        if self.backward_done {
            return Err(Error::contract(
                "backward already ran on this tape; call reset_grads first",
            ));
        }
        if !self.nodes[root].value.is_scalar() {
            return Err(Error::contract(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        if !self.nodes[root].requires_grad {
            return Err(Error::contract("loss does not depend on any differentiable leaf"));
        }
        self.backward_done = true;
        self.nodes[root].grad = Some(vec![T::one()]);
        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            let (Some(grad_out), Some(rule)) = (node.grad.as_ref(), node.backward.as_ref()) else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&j| self.nodes[j].requires_grad).collect();
            let grads = rule.backward(&inputs, &node.value, grad_out, &needs);
            let input_ids = node.inputs.clone();
            for ((j, g), need) in input_ids.into_iter().zip(grads).zip(needs) {
                let (Some(g), true) = (g, need) else { continue };
                match &mut self.nodes[j].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn binary_shapes(&self, a: Var, b: Var) -> Result<()> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.nodes[ia].value.expect_same_shape(&self.nodes[ib].value)
    }

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (&self.nodes[a.index].value, &self.nodes[b.index].value);
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape(), data).expect("co-shaped")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes(a, b)?;
        let out = self.zip_values(a, b, |p, q| p + q);
        self.record(&[a, b], out, AddBack)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes(a, b)?;
        let out = self.zip_values(a, b, |p, q| p - q);
        self.record(&[a, b], out, SubBack)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes(a, b)?;
        let out = self.zip_values(a, b, |p, q| p * q);
        self.record(&[a, b], out, MulBack)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.nodes[self.check(a)?].value.map(|v| v * s);
        self.record(&[a], out, ScaleBack(s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.nodes[self.check(a)?].value.map(|v| v + s);
        self.record(&[a], out, ScaleBack(T::one()))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.nodes[self.check(a)?].value.map(|v| v.max(T::zero()));
        self.record(&[a], out, ReluBack)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.nodes[self.check(a)?].value.sum();
        self.record(&[a], Tensor::scalar(total), BroadcastBack(T::one()))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[self.check(a)?].value;
        let inv = T::one() / T::from_usize(t.len()).expect("len fits");
        let out = Tensor::scalar(t.sum() * inv);
        self.record(&[a], out, BroadcastBack(inv))
    }

    /// `a (M x K) . b (K x N)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (x, y) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (m, k, k2, n) = match (x.shape(), y.shape()) {
            (&[m, k], &[k2, n]) => (m, k, k2, n),
            (sa, sb) => {
                return Err(Error::dim(format!(
                    "matmul needs rank-2 operands, got {sa:?} and {sb:?}"
                )))
            }
        };
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(m, k, n, x.data(), false, y.data(), false, &mut out, false);
        let out = Tensor::new(&[m, n], out)?;
        self.record(&[a, b], out, MatMulBack { m, k, n })
    }
}

struct AddBack;
impl<T: Scalar> Backward<T> for AddBack {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.to_vec()), Some(g.to_vec())]
    }
}

struct SubBack;
impl<T: Scalar> Backward<T> for SubBack {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())]
    }
}

struct MulBack;
impl<T: Scalar> Backward<T> for MulBack {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let prod = |o: &Tensor<T>| g.iter().zip(o.data()).map(|(&a, &b)| a * b).collect();
        vec![needs[0].then(|| prod(x[1])), needs[1].then(|| prod(x[0]))]
    }
}

struct ScaleBack<T>(T);
impl<T: Scalar> Backward<T> for ScaleBack<T> {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.iter().map(|&v| v * self.0).collect())]
    }
}

struct ReluBack;
impl<T: Scalar> Backward<T> for ReluBack {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let gx = g
            .iter()
            .zip(x[0].data())
            .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
            .collect();
        vec![Some(gx)]
    }
}

/// Gradient of a scalar reduction: `g * factor` broadcast over the input.
struct BroadcastBack<T>(T);
impl<T: Scalar> Backward<T> for BroadcastBack<T> {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![g[0] * self.0; x[0].len()])]
    }
}

struct MatMulBack {
    m: usize,
    k: usize,
    n: usize,
}
impl<T: Scalar> Backward<T> for MatMulBack {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let Self { m, k, n } = *self;
        let ga = needs[0].then(|| {
            let mut out = vec![T::zero(); m * k];
            matmul_into(m, n, k, g, false, x[1].data(), true, &mut out, false);
            out
        });
        let gb = needs[1].then(|| {
            let mut out = vec![T::zero(); k * n];
            matmul_into(k, m, n, x[0].data(), true, g, false, &mut out, false);
            out
        });
        vec![ga, gb]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn relu_and_add_forward() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(a).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let x = tape.constant(t(&[2], &[1.0, 2.0]));
        let y = tape.constant(t(&[2], &[3.0, 4.0]));
        let s = tape.add(x, y).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0, 6.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2]") && err.contains("[3]"), "{err}");
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[0.3, -2.0, 5.0]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_values_and_gradient() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.param(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let p = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(p).data(), &[11.0]);
        tape.backward(p).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[3.0, 4.0]);

        let c = tape.constant(t(&[3, 1], &[1.0, 1.0, 1.0]));
        assert!(matches!(tape.matmul(a, c), Err(Error::Dimension(_))));
    }

    #[test]
    fn backward_contract_errors() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));

        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
        tape.reset_grads();
        tape.backward(s).unwrap();

        let mut other = Tape::<f64>::new();
        let y = other.param(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));

        let c = tape.constant(Tensor::scalar(3.0));
        assert!(matches!(tape.backward(c), Err(Error::Contract(_))));
    }

    #[test]
    fn gradient_of_sum_of_losses_is_sum_of_gradients() {
        let x0 = t(&[3], &[0.5, -1.5, 2.0]);
        let grad_of = |which: u8| {
            let mut tape = Tape::new();
            let x = tape.param(x0.clone());
            let sq = tape.mul(x, x).unwrap();
            let l1 = tape.sum(sq).unwrap();
            let r = tape.relu(x).unwrap();
            let l2 = tape.sum(r).unwrap();
            let loss = match which {
                1 => l1,
                2 => l2,
                _ => tape.add(l1, l2).unwrap(),
            };
            tape.backward(loss).unwrap();
            tape.grad(x).unwrap()
        };
        let (g1, g2, g) = (grad_of(1), grad_of(2), grad_of(0));
        for i in 0..3 {
            assert_eq!(g.data()[i], g1.data()[i] + g2.data()[i]);
        }
    }
}
