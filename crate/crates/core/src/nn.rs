//! Layers shared by the generative model and the inference networks.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
    Softplus,
}

impl Nonlinearity {
    pub fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Nonlinearity::Identity => x,
            Nonlinearity::Relu => x.relu(),
            Nonlinearity::Tanh => x.tanh(),
            Nonlinearity::Sigmoid => x.sigmoid(),
            Nonlinearity::Softplus => x.softplus(),
        }
    }
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`, stored as `[fan_in, fan_out]`.
pub fn glorot(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::new(
        vec![fan_in, fan_out],
        (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..=limit))
            .collect(),
    )
}

/// `x W + b` with `W: [inputs, outputs]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: String,
    pub b: String,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(name: &str, inputs: usize, outputs: usize) -> Self {
        Linear {
            w: format!("{name}.w"),
            b: format!("{name}.b"),
            inputs,
            outputs,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        store.insert(&self.w, glorot(rng, self.inputs, self.outputs));
        store.insert(&self.b, Tensor::zeros(&[self.outputs]));
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        x.matmul(p.get(&self.w)) + p.get(&self.b)
    }
}

/// Two-layer perceptron `nl2(W2 nl1(W1 x + b1) + b2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
    pub nl1: Nonlinearity,
    pub nl2: Nonlinearity,
}

impl Mlp {
    pub fn new(
        name: &str,
        inputs: usize,
        hidden: usize,
        outputs: usize,
        nl1: Nonlinearity,
        nl2: Nonlinearity,
    ) -> Self {
        Mlp {
            l1: Linear::new(&format!("{name}.l1"), inputs, hidden),
            l2: Linear::new(&format!("{name}.l2"), hidden, outputs),
            nl1,
            nl2,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        self.l1.init(store, rng);
        self.l2.init(store, rng);
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        let h = self.nl1.apply(self.l1.forward(p, x));
        self.nl2.apply(self.l2.forward(p, h))
    }
}

/// Single-layer LSTM cell with fused gate weights `[inputs + hidden, 4 hidden]`
/// in gate order input, forget, output, candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lstm {
    pub gates: Linear,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(name: &str, inputs: usize, hidden: usize) -> Self {
        Lstm {
            gates: Linear::new(name, inputs + hidden, 4 * hidden),
            hidden,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        self.gates.init(store, rng);
    }

    pub fn zero_state<'t>(&self, tape: &'t Tape, batch: usize) -> (Var<'t>, Var<'t>) {
        let z = tape.constant(Tensor::zeros(&[batch, self.hidden]));
        (z, z)
    }

    /// One step; returns the new `(h, c)`.
    pub fn step<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        h: Var<'t>,
        c: Var<'t>,
    ) -> (Var<'t>, Var<'t>) {
        let n = self.hidden;
        let z = self.gates.forward(p, x.tape().concat(&[x, h]));
        let i = z.slice(0, n).sigmoid();
        let f = z.slice(n, 2 * n).sigmoid();
        let o = z.slice(2 * n, 3 * n).sigmoid();
        let g = z.slice(3 * n, 4 * n).tanh();
        let c = f * c + i * g;
        let h = o * c.tanh();
        (h, c)
    }

    /// Runs over `xs` in the given order, returning hidden states in that order.
    pub fn run<'t>(&self, p: &Bound<'t>, xs: &[Var<'t>]) -> Vec<Var<'t>> {
        let Some(first) = xs.first() else {
            return Vec::new();
        };
        let (mut h, mut c) = self.zero_state(first.tape(), first.shape()[0]);
        let mut out = Vec::with_capacity(xs.len());
        for &x in xs {
            (h, c) = self.step(p, x, h, c);
            out.push(h);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn glorot_respects_limit() {
        let mut rng = stream(0, Stream::Init);
        let w = glorot(&mut rng, 10, 20);
        let limit = (6.0f64 / 30.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= limit));
        assert_eq!(w.shape(), &[10, 20]);
    }

    #[test]
    fn zero_weight_lstm_stays_at_zero() {
        // i = f = o = sigmoid(0) = 1/2, g = tanh(0) = 0, so c = 0 and h = 0.
        let lstm = Lstm::new("rnn", 3, 4);
        let mut store = ParamStore::new();
        store.insert("rnn.w", Tensor::zeros(&[7, 16]));
        store.insert("rnn.b", Tensor::zeros(&[16]));
        let tape = Tape::new();
        let p = store.bind(&tape);
        let xs: Vec<_> = (0..5)
            .map(|t| tape.constant(Tensor::full(&[2, 3], t as f64 - 2.0)))
            .collect();
        for h in lstm.run(&p, &xs) {
            assert_eq!(h.value(), Tensor::zeros(&[2, 4]));
        }
    }

    #[test]
    fn lstm_first_step_matches_hand_evaluation() {
        let lstm = Lstm::new("rnn", 1, 1);
        let mut store = ParamStore::new();
        // rows: x, h; cols: i, f, o, g
        store.insert("rnn.w", Tensor::from_rows(&[vec![0.5, -0.3, 0.8, 1.2], vec![0.1, 0.2, 0.3, 0.4]]));
        store.insert("rnn.b", Tensor::vector(vec![0.1, 0.0, -0.1, 0.2]));
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = 0.7;
        let h = lstm.run(&p, &[tape.constant(Tensor::new(vec![1, 1], vec![x]))])[0].item();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let i = sig(0.5 * x + 0.1);
        let o = sig(0.8 * x - 0.1);
        let g = (1.2 * x + 0.2f64).tanh();
        let c = i * g;
        assert!((h - o * c.tanh()).abs() < 1e-15);
    }
}
