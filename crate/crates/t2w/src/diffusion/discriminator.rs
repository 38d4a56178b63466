//! Weight-space critic: four fully-connected layers with ReLU, scalar
//! sigmoid output. Operates on the padded, normalized state vectors.

use crate::graph::{Activation, Graph, GraphError, NodeId};
use crate::matrix::DenseMatrix;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscConfig {
    pub input_dim: usize,
    /// Three hidden widths; with input and scalar output this is 4 layers.
    pub hidden: Vec<usize>,
}

impl DiscConfig {
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, 1));
        dims
    }

    pub fn param_shapes(&self) -> Vec<(String, (usize, usize))> {
        let mut shapes = Vec::new();
        for (l, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
            shapes.push((format!("disc.{l}.w"), (fan_in, fan_out)));
            shapes.push((format!("disc.{l}.b"), (1, fan_out)));
        }
        shapes
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub config: DiscConfig,
    pub params: Vec<DenseMatrix>,
}

impl Discriminator {
    pub fn init(config: DiscConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .param_shapes()
            .iter()
            .map(|(name, (rows, cols))| {
                if name.ends_with(".b") {
                    DenseMatrix::zeros(*rows, *cols)
                } else {
                    let std = (2.0 / *rows as f64).sqrt();
                    DenseMatrix::from_vec_unchecked(
                        *rows,
                        *cols,
                        (0..rows * cols)
                            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                            .collect(),
                    )
                }
            })
            .collect();
        Self { config, params }
    }

    pub fn param_names(&self) -> Vec<String> {
        self.config.param_shapes().into_iter().map(|(n, _)| n).collect()
    }

    /// Probability that `x` is a real weight vector. Plain forward pass.
    pub fn prob(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.config.input_dim);
        let mut activ = x.to_vec();
        let layers = self.config.layer_dims().len();
        for l in 0..layers {
            let w = &self.params[2 * l];
            let b = &self.params[2 * l + 1];
            let mut next = b.values().to_vec();
            for (i, &a) in activ.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let row = w.row(i);
                for (n, r) in next.iter_mut().zip(row) {
                    *n += a * r;
                }
            }
            if l + 1 < layers {
                for v in next.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            activ = next;
        }
        1.0 / (1.0 + (-activ[0]).exp())
    }
}

/// Declares the discriminator parameter inputs on a graph.
pub fn declare_disc_inputs(graph: &mut Graph, config: &DiscConfig) {
    for (name, (rows, cols)) in config.param_shapes() {
        graph.input(&name, rows, cols);
    }
}

/// Appends the critic over a batch input (BxD), returning the clamped
/// probability column (Bx1).
pub fn append_disc_forward(
    graph: &mut Graph,
    config: &DiscConfig,
    x: NodeId,
) -> Result<NodeId, GraphError> {
    let layers = config.layer_dims().len();
    let mut h = x;
    for l in 0..layers {
        let w = graph.input_id(&format!("disc.{l}.w")).expect("disc params declared");
        let b = graph.input_id(&format!("disc.{l}.b")).expect("disc params declared");
        let lin = graph.matmul(h, w)?;
        h = graph.add(lin, b)?;
        if l + 1 < layers {
            h = graph.activation(h, Activation::Relu);
        }
    }
    let p = graph.sigmoid(h);
    Ok(graph.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP))
}

pub fn bind_disc_params(graph: &mut Graph, disc: &Discriminator) -> Result<(), GraphError> {
    for (name, value) in disc.param_names().iter().zip(&disc.params) {
        graph.set_input_from(name, value)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_disc() -> Discriminator {
        Discriminator::init(DiscConfig { input_dim: 6, hidden: vec![8, 8, 4] }, 3)
    }

    #[test]
    fn output_is_probability() {
        let d = tiny_disc();
        for scale in [-5.0, 0.0, 0.5, 10.0] {
            let p = d.prob(&vec![scale; 6]);
            assert!(p > 0.0 && p < 1.0, "p = {p}");
        }
    }

    #[test]
    fn zero_weights_give_one_half() {
        let mut d = tiny_disc();
        for p in d.params.iter_mut() {
            p.values_mut().fill(0.0);
        }
        assert_eq!(d.prob(&vec![1.0; 6]), 0.5);
    }

    #[test]
    fn graph_forward_matches_plain_forward() {
        let d = tiny_disc();
        let mut graph = Graph::new();
        declare_disc_inputs(&mut graph, &d.config);
        let x = graph.input("x", 1, 6);
        let p = append_disc_forward(&mut graph, &d.config, x).unwrap();
        bind_disc_params(&mut graph, &d).unwrap();
        let input = vec![0.3, -0.2, 0.7, 0.1, -0.9, 0.4];
        graph.set_input("x", DenseMatrix::row_vector(input.clone())).unwrap();
        let from_graph = graph.evaluate(p).unwrap().values()[0];
        let direct = d.prob(&input).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        assert!((from_graph - direct).abs() < 1e-12);
    }
}
