use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Matrix, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Affine layer `x·W + b`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Dense {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input_dim: usize, output_dim: usize, rng: &mut R) -> Self {
        let weight = store.add_fan_in(format!("{name}.weight"), input_dim, output_dim, rng);
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, output_dim));
        Dense { weight, bias, input_dim, output_dim }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let xw = tape.matmul(x, w);
        tape.add_row(xw, b)
    }
}

/// Layer widths of a multilayer perceptron, input first and output last.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec(pub Vec<usize>);

impl LayerSpec {
    pub fn new(input: usize, hidden: &[usize], output: usize) -> Self {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        LayerSpec(sizes)
    }

    pub fn input_dim(&self) -> usize {
        self.0[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.0.last().expect("layer spec is never empty")
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Dense>,
    hidden_activation: Activation,
    final_activation: Activation,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        spec: &LayerSpec,
        hidden_activation: Activation,
        final_activation: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(spec.0.len() >= 2, "an MLP needs at least input and output widths");
        let layers = spec
            .0
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers, hidden_activation, final_activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output_dim)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn final_activation(&self) -> Activation {
        self.final_activation
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h);
            let act = if i == last { self.final_activation } else { self.hidden_activation };
            h = act.apply(tape, h);
        }
        h
    }

    /// Plain forward pass without gradient bookkeeping.
    pub fn apply(&self, store: &ParamStore, input: &Matrix) -> Result<Matrix> {
        if input.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "mlp_forward",
                detail: format!("input has {} columns, network expects {}", input.cols(), self.input_dim()),
            });
        }
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let y = self.forward(&mut tape, store, x);
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn zero_weights_output_the_bias() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &LayerSpec::new(3, &[], 2), Activation::Tanh, Activation::Identity, &mut rng());
        let layer = &mlp.layers()[0];
        store.value_mut(layer.weight).data_mut().fill(0.0);
        store.value_mut(layer.bias).data_mut().copy_from_slice(&[0.7, -1.25]);
        let out = mlp.apply(&store, &Matrix::from_rows(&[vec![1.0, 2.0, 3.0]])).unwrap();
        assert_eq!(out.data(), &[0.7, -1.25]);
    }

    #[test]
    fn relu_final_clamps_negative_preactivation() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &LayerSpec::new(1, &[], 1), Activation::Tanh, Activation::Relu, &mut rng());
        let layer = &mlp.layers()[0];
        store.value_mut(layer.weight).data_mut()[0] = 1.0;
        store.value_mut(layer.bias).data_mut()[0] = -3.2;
        let out = mlp.apply(&store, &Matrix::from_rows(&[vec![0.0]])).unwrap();
        assert_eq!(out.data(), &[0.0]);
    }

    #[test]
    fn single_linear_layer_matches_hand_product() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &LayerSpec::new(2, &[], 2), Activation::Tanh, Activation::Identity, &mut rng());
        let layer = &mlp.layers()[0];
        // x·W with W = [[1, 2], [3, 4]] and x = [5, 6] gives [23, 34].
        store.value_mut(layer.weight).data_mut().copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        let out = mlp.apply(&store, &Matrix::from_rows(&[vec![5.0, 6.0]])).unwrap();
        assert_eq!(out.data(), &[23.0, 34.0]);
    }

    #[test]
    fn wrong_input_width_is_a_shape_error() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &LayerSpec::new(2, &[4], 1), Activation::Tanh, Activation::Identity, &mut rng());
        assert!(matches!(mlp.apply(&store, &Matrix::zeros(1, 3)), Err(Error::ShapeMismatch { .. })));
    }
}
