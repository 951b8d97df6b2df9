//! Small parameter containers shared by the attention heads and the model.
//!
//! Every container offers three views that must stay in field order:
//! construction, `visit`/`visit_mut` (flat enumeration for the optimizer and
//! checkpoints), and `bind` (placing leaves on a tape for one forward pass).

use crate::error::Result;
use crate::tensor::{Scalar, Tape, Tensor, Value};
use rand::Rng;

/// Records parameter leaves on a tape in visitation order.
pub struct Binder<'t, S: Scalar> {
    pub tape: &'t mut Tape<S>,
    train: bool,
    values: Vec<Value>,
}

impl<'t, S: Scalar> Binder<'t, S> {
    pub fn new(tape: &'t mut Tape<S>, train: bool) -> Self {
        Binder { tape, train, values: Vec::new() }
    }

    pub fn leaf(&mut self, t: &Tensor<S>) -> Value {
        let v = self.tape.leaf(t.clone(), self.train);
        self.values.push(v);
        v
    }

    /// Parameter leaves in the same order `visit` enumerates them.
    pub fn into_values(self) -> Vec<Value> {
        self.values
    }
}

fn kaiming_uniform<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<S> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, bound, rng)
}

// ---------------------------------------------------------------------------

/// One conv layer: weight [Cout,Cin,k,k], bias [Cout], pad = (k-1)/2.
#[derive(Clone, Debug)]
pub struct ConvParams<S: Scalar> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
    pub stride: usize,
}

impl<S: Scalar> ConvParams<S> {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut impl Rng) -> Self {
        ConvParams {
            w: kaiming_uniform(&[cout, cin, k, k], cin * k * k, rng),
            b: Tensor::zeros(&[cout]),
            stride,
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        f(&format!("{prefix}.w"), &self.w);
        f(&format!("{prefix}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }

    pub fn bind(&self, b: &mut Binder<S>) -> BoundConv {
        BoundConv {
            w: b.leaf(&self.w),
            b: b.leaf(&self.b),
            stride: self.stride,
            pad: (self.w.shape()[2] - 1) / 2,
        }
    }
}

#[derive(Clone, Copy)]
pub struct BoundConv {
    pub w: Value,
    pub b: Value,
    pub stride: usize,
    pub pad: usize,
}

impl BoundConv {
    pub fn apply<S: Scalar>(&self, tape: &mut Tape<S>, x: Value) -> Result<Value> {
        tape.conv2d(x, self.w, Some(self.b), self.stride, self.pad)
    }
}

// ---------------------------------------------------------------------------

/// Single linear layer on token grids: x[n,in] · w[in,out] + b.
#[derive(Clone, Debug)]
pub struct LinearParams<S: Scalar> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

impl<S: Scalar> LinearParams<S> {
    pub fn new(din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        LinearParams {
            w: kaiming_uniform(&[din, dout], din, rng),
            b: Tensor::zeros(&[dout]),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        f(&format!("{prefix}.w"), &self.w);
        f(&format!("{prefix}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }

    pub fn bind(&self, b: &mut Binder<S>) -> BoundLinear {
        BoundLinear { w: b.leaf(&self.w), b: b.leaf(&self.b) }
    }
}

#[derive(Clone, Copy)]
pub struct BoundLinear {
    pub w: Value,
    pub b: Value,
}

impl BoundLinear {
    pub fn apply<S: Scalar>(&self, tape: &mut Tape<S>, x: Value) -> Result<Value> {
        let y = tape.matmul(x, self.w)?;
        tape.add_bias(y, self.b)
    }
}

// ---------------------------------------------------------------------------

/// Two-layer perceptron on token grids [n,in] -> [n,out], relu on the hidden.
#[derive(Clone, Debug)]
pub struct MlpParams<S: Scalar> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

impl<S: Scalar> MlpParams<S> {
    pub fn new(din: usize, hidden: usize, dout: usize, rng: &mut impl Rng) -> Self {
        MlpParams {
            w1: kaiming_uniform(&[din, hidden], din, rng),
            b1: Tensor::zeros(&[hidden]),
            w2: kaiming_uniform(&[hidden, dout], hidden, rng),
            b2: Tensor::zeros(&[dout]),
        }
    }

    /// Zero the final layer so the MLP output starts exactly at 0.
    pub fn zero_final(mut self) -> Self {
        self.w2 = Tensor::zeros(self.w2.shape());
        self.b2 = Tensor::zeros(self.b2.shape());
        self
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        f(&format!("{prefix}.w1"), &self.w1);
        f(&format!("{prefix}.b1"), &self.b1);
        f(&format!("{prefix}.w2"), &self.w2);
        f(&format!("{prefix}.b2"), &self.b2);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        f(&format!("{prefix}.w1"), &mut self.w1);
        f(&format!("{prefix}.b1"), &mut self.b1);
        f(&format!("{prefix}.w2"), &mut self.w2);
        f(&format!("{prefix}.b2"), &mut self.b2);
    }

    pub fn bind(&self, b: &mut Binder<S>) -> BoundMlp {
        BoundMlp {
            w1: b.leaf(&self.w1),
            b1: b.leaf(&self.b1),
            w2: b.leaf(&self.w2),
            b2: b.leaf(&self.b2),
        }
    }
}

#[derive(Clone, Copy)]
pub struct BoundMlp {
    pub w1: Value,
    pub b1: Value,
    pub w2: Value,
    pub b2: Value,
}

impl BoundMlp {
    pub fn apply<S: Scalar>(&self, tape: &mut Tape<S>, x: Value) -> Result<Value> {
        let h = tape.matmul(x, self.w1)?;
        let h = tape.add_bias(h, self.b1)?;
        let h = tape.relu(h);
        let o = tape.matmul(h, self.w2)?;
        tape.add_bias(o, self.b2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_final_forces_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = MlpParams::<f32>::new(4, 8, 2, &mut rng).zero_final();
        let mut tape = Tape::new();
        let mut b = Binder::new(&mut tape, false);
        let bound = mlp.bind(&mut b);
        let x = tape.leaf(Tensor::rand_uniform(&[5, 4], 1.0, &mut rng), false);
        let y = bound.apply(&mut tape, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bind_order_matches_visit_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = ConvParams::<f32>::new(3, 8, 3, 1, &mut rng);
        let mlp = MlpParams::<f32>::new(4, 8, 2, &mut rng);
        let mut names = Vec::new();
        conv.visit("conv", &mut |n, _| names.push(n.to_string()));
        mlp.visit("mlp", &mut |n, _| names.push(n.to_string()));

        let mut tape = Tape::<f32>::new();
        let mut b = Binder::new(&mut tape, true);
        conv.bind(&mut b);
        mlp.bind(&mut b);
        let values = b.into_values();
        assert_eq!(values.len(), names.len());

        let mut tensors = Vec::new();
        conv.visit("conv", &mut |_, t| tensors.push(t.clone()));
        mlp.visit("mlp", &mut |_, t| tensors.push(t.clone()));
        for (v, t) in values.iter().zip(&tensors) {
            assert_eq!(tape.value(*v).data(), t.data());
        }
    }
}
