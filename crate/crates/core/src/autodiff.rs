//! Define-by-run reverse-mode differentiation.
//!
//! Every forward pass records onto a fresh [`Tape`]. An operator computes its
//! output eagerly and hands the tape a [`Backward`] rule that maps the output
//! gradient to gradients of its inputs. [`Tape::backward`] replays the rules
//! in reverse recording order, summing contributions for values consumed more
//! than once, and deposits the results into the [`ParamSet`] gradient buffers.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A named learnable tensor and its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T: Scalar> {
    name: String,
    value: Arc<Tensor<T>>,
    grad: Tensor<T>,
    /// Rank used when serializing: 4 for kernels, 1 for biases.
    rank: u8,
    pub trainable: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shared_value(&self) -> Arc<Tensor<T>> {
        Arc::clone(&self.value)
    }

    /// Mutable access to the value. Clones the buffer if a tape still holds it.
    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.value)
    }

    pub fn grad(&self) -> &Tensor<T> {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut Tensor<T> {
        &mut self.grad
    }

    /// Value and gradient borrowed together for an in-place update.
    pub fn value_and_grad_mut(&mut self) -> (&mut Tensor<T>, &Tensor<T>) {
        (Arc::make_mut(&mut self.value), &self.grad)
    }

    pub fn rank(&self) -> u8 {
        self.rank
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    /// Logical dims (trailing unit axes dropped according to `rank`).
    pub fn logical_dims(&self) -> Vec<usize> {
        self.value.shape().dims()[..self.rank as usize].to_vec()
    }

    pub fn set_value(&mut self, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.shape() {
            return Err(Error::shape(format!(
                "parameter {} expects {}, got {}",
                self.name,
                self.shape(),
                value.shape()
            )));
        }
        self.value = Arc::new(value);
        Ok(())
    }
}

/// Ordered collection of parameters with unique names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T: Scalar> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, rank: u8) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Parameter(format!("duplicate parameter name {name}")));
        }
        if !(1..=4).contains(&rank) {
            return Err(Error::Parameter(format!("parameter {name}: rank {rank} out of range")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.clone(),
            value: Arc::new(value),
            grad,
            rank,
            trainable: true,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: usize,
}

/// Reverse rule for one recorded operation.
pub trait Backward<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Gradients for each input given the gradient of the output. Entries for
    /// inputs with `needs[i] == false` may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

struct Node<T: Scalar> {
    value: Arc<Tensor<T>>,
    inputs: Vec<usize>,
    rule: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

static NEXT_TAPE: AtomicU32 = AtomicU32::new(0);

pub struct Tape<T: Scalar> {
    id: u32,
    nodes: Vec<Node<T>>,
    recording: bool,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A tape that records backward rules.
    pub fn new() -> Self {
        Self::with_recording(true)
    }

    /// A tape that keeps forward values only; `backward` is rejected.
    pub fn inference() -> Self {
        Self::with_recording(false)
    }

    fn with_recording(recording: bool) -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            recording,
            consumed: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Arc<Tensor<T>>, requires_grad: bool, param: Option<ParamId>) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            rule: None,
            requires_grad: requires_grad && self.recording,
            param,
        });
        Var { tape: self.id, index }
    }

    /// A fixed input; no gradient flows to it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(Arc::new(value), false, None)
    }

    /// A leaf whose gradient is retained in the returned [`Gradients`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(Arc::new(value), true, None)
    }

    /// Places a parameter on the tape without copying its buffer.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> Var {
        let p = params.get(id);
        self.leaf(p.shared_value(), p.trainable, Some(id))
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Contract("variable belongs to a different tape".into()));
        }
        Ok(v.index)
    }

    /// Panics if `v` was recorded on another tape.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.index].value
    }

    pub fn get(&self, v: Var) -> Result<&Tensor<T>> {
        let i = self.check(v)?;
        Ok(&self.nodes[i].value)
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    /// Records an operation's output together with its reverse rule.
    pub fn push(&mut self, inputs: &[Var], output: Tensor<T>, rule: Box<dyn Backward<T>>) -> Result<Var> {
        let mut idx = Vec::with_capacity(inputs.len());
        for &v in inputs {
            idx.push(self.check(v)?);
        }
        if cfg!(debug_assertions) && !output.is_finite() {
            return Err(Error::NonFinite { op: rule.name() });
        }
        let requires_grad = self.recording && idx.iter().any(|&i| self.nodes[i].requires_grad);
        let index = self.nodes.len();
        self.nodes.push(Node {
            value: Arc::new(output),
            inputs: idx,
            rule: requires_grad.then_some(rule),
            requires_grad,
            param: None,
        });
        Ok(Var { tape: self.id, index })
    }

    /// Replays the tape from `loss`, adding ∂loss/∂p into each reachable
    /// trainable parameter's gradient buffer.
    pub fn backward(&mut self, loss: Var, params: &mut ParamSet<T>) -> Result<Gradients<T>> {
        self.backward_impl(loss, Some(params))
    }

    /// Like [`Tape::backward`] for graphs without parameters.
    pub fn backward_vars(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.backward_impl(loss, None)
    }

    fn backward_impl(&mut self, loss: Var, mut params: Option<&mut ParamSet<T>>) -> Result<Gradients<T>> {
        let root = self.check(loss)?;
        if !self.recording {
            return Err(Error::Contract("backward on an inference tape".into()));
        }
        if self.consumed {
            return Err(Error::Contract("backward already ran on this tape; record a new pass".into()));
        }
        if self.nodes[root].value.shape() != Shape::scalar() {
            return Err(Error::Contract(format!(
                "loss must be a scalar, got shape {}",
                self.nodes[root].value.shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::scalar(T::one()));

        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            let Some(rule) = node.rule.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|&j| &*self.nodes[j].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&j| self.nodes[j].requires_grad).collect();
            let contributions = rule.backward(&inputs, &node.value, &g, &needs)?;
            if contributions.len() != node.inputs.len() {
                return Err(Error::Contract(format!(
                    "{} returned {} gradients for {} inputs",
                    rule.name(),
                    contributions.len(),
                    node.inputs.len()
                )));
            }
            for ((&j, contrib), need) in node.inputs.iter().zip(contributions).zip(needs) {
                let (Some(c), true) = (contrib, need) else {
                    continue;
                };
                if c.shape() != self.nodes[j].value.shape() {
                    return Err(Error::Contract(format!(
                        "{} produced gradient {} for input {}",
                        rule.name(),
                        c.shape(),
                        self.nodes[j].value.shape()
                    )));
                }
                match &mut grads[j] {
                    Some(acc) => acc.add_assign(&c),
                    slot => *slot = Some(c),
                }
            }
        }

        if let Some(params) = params.as_deref_mut() {
            for (node, g) in self.nodes.iter().zip(&grads) {
                if let (Some(pid), Some(g)) = (node.param, g) {
                    let p = params.get_mut(pid);
                    if p.grad.shape() != g.shape() {
                        return Err(Error::Contract(format!("gradient shape drift for {}", p.name)));
                    }
                    p.grad.add_assign(g);
                }
            }
        }

        Ok(Gradients { tape: self.id, grads })
    }
}

/// Gradients of leaf values after a backward replay.
pub struct Gradients<T: Scalar> {
    tape: u32,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` for values unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }
}

fn same_shape(op: &str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{op}: shapes {a} and {b} differ")));
    }
    Ok(())
}

struct AddRule;

impl<T: Scalar> Backward<T> for AddRule {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(needs.iter().map(|&n| n.then(|| g.clone())).collect())
    }
}

/// Element-wise sum of two equally shaped values.
pub fn add<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let (x, y) = (tape.get(a)?, tape.get(b)?);
    same_shape("add", x.shape(), y.shape())?;
    let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
    let out = Tensor::from_vec(x.shape(), data)?;
    tape.push(&[a, b], out, Box::new(AddRule))
}

struct MulRule;

impl<T: Scalar> Backward<T> for MulRule {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let prod = |other: &Tensor<T>| {
            let data = g.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
            Tensor::from_vec(g.shape(), data)
        };
        Ok(vec![
            if needs[0] { Some(prod(inputs[1])?) } else { None },
            if needs[1] { Some(prod(inputs[0])?) } else { None },
        ])
    }
}

/// Element-wise (Hadamard) product.
pub fn mul<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let (x, y) = (tape.get(a)?, tape.get(b)?);
    same_shape("mul", x.shape(), y.shape())?;
    let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
    let out = Tensor::from_vec(x.shape(), data)?;
    tape.push(&[a, b], out, Box::new(MulRule))
}

struct ScaleRule<T>(T);

impl<T: Scalar> Backward<T> for ScaleRule<T> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(g.map(|v| v * self.0))])
    }
}

pub fn scale<T: Scalar>(tape: &mut Tape<T>, a: Var, factor: T) -> Result<Var> {
    let out = tape.get(a)?.map(|v| v * factor);
    tape.push(&[a], out, Box::new(ScaleRule(factor)))
}

struct SumRule;

impl<T: Scalar> Backward<T> for SumRule {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let v = g.data()[0];
        Ok(vec![Some(Tensor::from_vec(inputs[0].shape(), vec![v; inputs[0].len()])?)])
    }
}

/// Sum of all elements as a (1,1,1,1) scalar.
pub fn sum<T: Scalar>(tape: &mut Tape<T>, a: Var) -> Result<Var> {
    let out = Tensor::scalar(tape.get(a)?.sum());
    tape.push(&[a], out, Box::new(SumRule))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gaussian_init;

    fn t4(data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(Shape::new(1, 1, 1, data.len()).unwrap(), data.to_vec()).unwrap()
    }

    #[test]
    fn linear_form_gradient_is_the_input() {
        let mut params = ParamSet::new();
        let w = params.add("w", t4(&[0.5, -1.0, 2.0]), 4).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(t4(&[3.0, 4.0, -5.0]));
        let wv = tape.param(&params, w);
        let prod = mul(&mut tape, wv, x).unwrap();
        let loss = sum(&mut tape, prod).unwrap();
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params.get(w).grad().data(), &[3.0, 4.0, -5.0]);
    }

    #[test]
    fn unused_parameter_keeps_zero_grad() {
        let mut params = ParamSet::new();
        let used = params.add("used", t4(&[1.0, 2.0]), 4).unwrap();
        let unused = params.add("unused", t4(&[7.0, 8.0]), 4).unwrap();
        let mut tape = Tape::new();
        let u = tape.param(&params, used);
        let _ = tape.param(&params, unused);
        let loss = sum(&mut tape, u).unwrap();
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params.get(used).grad().data(), &[1.0, 1.0]);
        assert_eq!(params.get(unused).grad().data(), &[0.0, 0.0]);
    }

    #[test]
    fn consumers_accumulate_additively() {
        // loss = sum(x*x) + sum(3x): grad = 2x + 3, exact on integer data.
        let mut tape = Tape::new();
        let x = tape.variable(t4(&[1.0, -2.0, 5.0]));
        let sq = mul(&mut tape, x, x).unwrap();
        let f = sum(&mut tape, sq).unwrap();
        let lin = scale(&mut tape, x, 3.0).unwrap();
        let g = sum(&mut tape, lin).unwrap();
        let loss = add(&mut tape, f, g).unwrap();
        let grads = tape.backward_vars(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[5.0, -1.0, 13.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.variable(t4(&[1.0, 2.0]));
        let y = scale(&mut tape, x, 2.0).unwrap();
        assert!(matches!(tape.backward_vars(y), Err(Error::Contract(_))));
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.variable(t4(&[1.0, 2.0]));
        let s = sum(&mut tape, x).unwrap();
        tape.backward_vars(s).unwrap();
        assert!(matches!(tape.backward_vars(s), Err(Error::Contract(_))));
    }

    #[test]
    fn inference_tape_rejects_backward() {
        let mut tape = Tape::<f32>::inference();
        let x = tape.variable(Tensor::scalar(1.0));
        let s = sum(&mut tape, x).unwrap();
        assert!(!tape.requires_grad(s));
        assert!(tape.backward_vars(s).is_err());
    }

    #[test]
    fn foreign_variable_is_rejected() {
        let mut a = Tape::<f64>::new();
        let mut b = Tape::<f64>::new();
        let x = a.variable(t4(&[1.0]));
        assert!(matches!(sum(&mut b, x), Err(Error::Contract(_))));
        let y = b.variable(t4(&[1.0]));
        let s = sum(&mut b, y).unwrap();
        assert!(matches!(a.backward_vars(s), Err(Error::Contract(_))));
    }

    #[test]
    fn duplicate_parameter_names_are_rejected() {
        let mut params = ParamSet::<f32>::new();
        params.add("w", Tensor::scalar(1.0), 1).unwrap();
        assert!(params.add("w", Tensor::scalar(2.0), 1).is_err());
    }

    #[test]
    fn non_finite_outputs_fail_loudly() {
        let mut tape = Tape::new();
        let x = tape.variable(t4(&[f64::MAX, 1.0]));
        let r = scale(&mut tape, x, 10.0);
        if cfg!(debug_assertions) {
            assert!(matches!(r, Err(Error::NonFinite { op: "scale" })));
        }
    }

    #[test]
    fn frozen_parameter_receives_no_gradient() {
        let mut params = ParamSet::new();
        let w = params.add("w", gaussian_init::<f64>(Shape::new(1, 1, 2, 2).unwrap(), 1.0, 3).unwrap(), 4).unwrap();
        params.get_mut(w).trainable = false;
        let mut tape = Tape::new();
        let x = tape.variable(t4(&[1.0, 2.0, 3.0, 4.0]).reshape(Shape::new(1, 1, 2, 2).unwrap()).unwrap());
        let wv = tape.param(&params, w);
        let p = mul(&mut tape, x, wv).unwrap();
        let loss = sum(&mut tape, p).unwrap();
        let grads = tape.backward(loss, &mut params).unwrap();
        assert_eq!(params.get(w).grad().data(), &[0.0; 4]);
        assert_eq!(grads.get(x).unwrap().data(), params.get(w).value().data());
    }
}
