use rand::Rng;
use serde::{Deserialize, Serialize};

use super::array::{gemm, Array};
use super::graph::{Graph, Var};
use super::NumError;

/// Dense feed-forward network: tanh on hidden layers, identity on the output.
///
/// Tensors are stored as `[w0, b0, w1, b1, ...]` with weights shaped
/// `in x out` and biases `1 x out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    layer_sizes: Vec<usize>,
    tensors: Vec<Array>,
}

impl MlpParams {
    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn new<R: Rng + ?Sized>(layer_sizes: &[usize], rng: &mut R) -> Self {
        assert!(layer_sizes.len() >= 2, "an MLP needs input and output widths");
        let mut tensors = Vec::with_capacity(2 * (layer_sizes.len() - 1));
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..=limit))
                .collect();
            tensors.push(Array::matrix(fan_in, fan_out, data));
            tensors.push(Array::zeros(&[1, fan_out]));
        }
        Self {
            layer_sizes: layer_sizes.to_vec(),
            tensors,
        }
    }

    pub fn zeros(layer_sizes: &[usize]) -> Self {
        assert!(layer_sizes.len() >= 2, "an MLP needs input and output widths");
        let mut tensors = Vec::new();
        for w in layer_sizes.windows(2) {
            tensors.push(Array::zeros(&[w[0], w[1]]));
            tensors.push(Array::zeros(&[1, w[1]]));
        }
        Self {
            layer_sizes: layer_sizes.to_vec(),
            tensors,
        }
    }

    /// Rebuilds from tensors, checking that consecutive shapes line up.
    pub fn from_tensors(layer_sizes: &[usize], tensors: Vec<Array>) -> Result<Self, NumError> {
        if tensors.len() != 2 * layer_sizes.len().saturating_sub(1) {
            return Err(NumError::Shape(format!(
                "{} tensors for {} layers",
                tensors.len(),
                layer_sizes.len()
            )));
        }
        for (l, w) in layer_sizes.windows(2).enumerate() {
            if tensors[2 * l].shape() != [w[0], w[1]] || tensors[2 * l + 1].shape() != [1, w[1]] {
                return Err(NumError::Dimension {
                    layer: l,
                    expected: w[0],
                    got: tensors[2 * l].rows(),
                });
            }
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            tensors,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn tensors(&self) -> &[Array] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array] {
        &mut self.tensors
    }

    pub fn weight(&self, layer: usize) -> &Array {
        &self.tensors[2 * layer]
    }

    pub fn bias(&self, layer: usize) -> &Array {
        &self.tensors[2 * layer + 1]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Array {
        &mut self.tensors[2 * layer]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut Array {
        &mut self.tensors[2 * layer + 1]
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Array::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Array::is_finite)
    }

    /// Flattened parameter values in tensor order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Inverse of [`MlpParams::flatten`].
    pub fn from_flat(layer_sizes: &[usize], values: &[f64]) -> Result<Self, NumError> {
        let mut out = Self::zeros(layer_sizes);
        if values.len() != out.num_params() {
            return Err(NumError::Shape(format!(
                "expected {} parameters, got {}",
                out.num_params(),
                values.len()
            )));
        }
        let mut off = 0;
        for t in out.tensors.iter_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(out)
    }

    /// Adds every tensor to `g`, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    /// Checks that `cols` matches the input width.
    pub fn check_input(&self, cols: usize) -> Result<(), NumError> {
        if cols != self.input_dim() {
            return Err(NumError::Dimension {
                layer: 0,
                expected: self.input_dim(),
                got: cols,
            });
        }
        Ok(())
    }

    /// Forward pass without recording a tape.
    pub fn forward(&self, input: &Array) -> Result<Array, NumError> {
        mlp_forward(self, input)
    }
}

/// Forward pass of `params` on a batch of row inputs.
pub fn mlp_forward(params: &MlpParams, input: &Array) -> Result<Array, NumError> {
    params.check_input(input.cols())?;
    let rows = input.rows();
    let mut h = input.data().to_vec();
    let layers = params.num_layers();
    for l in 0..layers {
        let (w, b) = (params.weight(l), params.bias(l));
        let (fan_in, fan_out) = (w.rows(), w.cols());
        if h.len() != rows * fan_in {
            return Err(NumError::Dimension {
                layer: l,
                expected: fan_in,
                got: h.len() / rows.max(1),
            });
        }
        let mut out = vec![0.0; rows * fan_out];
        gemm(&h, rows, fan_in, false, w.data(), fan_in, fan_out, false, &mut out);
        for r in 0..rows {
            for (x, bias) in out[r * fan_out..(r + 1) * fan_out].iter_mut().zip(b.data()) {
                *x += bias;
                if l + 1 < layers {
                    *x = x.tanh();
                }
            }
        }
        h = out;
    }
    Ok(Array::matrix(rows, params.output_dim(), h))
}

/// Records an MLP forward pass on `g` using bound tensor nodes `vars`.
pub fn mlp_graph(g: &mut Graph, vars: &[Var], x: Var) -> Var {
    let layers = vars.len() / 2;
    let mut h = x;
    for l in 0..layers {
        let z = g.matmul(h, vars[2 * l]);
        h = g.add_row(z, vars[2 * l + 1]);
        if l + 1 < layers {
            h = g.tanh(h);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_net_gives_zero() {
        let p = MlpParams::zeros(&[3, 5, 2]);
        let x = Array::matrix(2, 3, vec![1., -2., 3., 0.5, 0.1, -9.]);
        let y = p.forward(&x).unwrap();
        assert_eq!(y.data(), &[0.0; 4]);
    }

    #[test]
    fn identity_linear_layer() {
        let p = MlpParams::from_tensors(&[3, 3], vec![Array::identity(3), Array::zeros(&[1, 3])])
            .unwrap();
        let x = Array::matrix(2, 3, vec![1., -2., 3., 0.5, 0.1, -9.]);
        assert_eq!(p.forward(&x).unwrap(), x);
    }

    #[test]
    fn wrong_input_width_names_layer() {
        let p = MlpParams::zeros(&[3, 4, 2]);
        let err = p.forward(&Array::zeros(&[1, 5])).unwrap_err();
        assert!(matches!(
            err,
            NumError::Dimension {
                layer: 0,
                expected: 3,
                got: 5
            }
        ));
    }

    #[test]
    fn hand_unrolled_4_8_2() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = MlpParams::new(&[4, 8, 2], &mut rng);
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        let x = [0.3, -1.1, 0.8, 2.0];
        let y = p.forward(&Array::row_vector(x.to_vec())).unwrap();

        let (w0, b0, w1, b1) = (p.weight(0), p.bias(0), p.weight(1), p.bias(1));
        let mut hidden = [0.0; 8];
        for (j, h) in hidden.iter_mut().enumerate() {
            let mut acc = b0.data()[j];
            for (i, xi) in x.iter().enumerate() {
                acc += xi * w0.get(i, j);
            }
            *h = acc.tanh();
        }
        for k in 0..2 {
            let mut acc = b1.data()[k];
            for (j, h) in hidden.iter().enumerate() {
                acc += h * w1.get(j, k);
            }
            assert!((acc - y.data()[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_forward_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = MlpParams::new(&[3, 6, 6, 2], &mut rng);
        let x = Array::matrix(4, 3, (0..12).map(|i| i as f64 * 0.1 - 0.5).collect());
        let mut g = Graph::new();
        let vars = p.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = mlp_graph(&mut g, &vars, xv);
        assert_eq!(g.value(out), &p.forward(&x).unwrap());
    }

    #[test]
    fn flatten_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = MlpParams::new(&[2, 3, 1], &mut rng);
        let q = MlpParams::from_flat(p.layer_sizes(), &p.flatten()).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.num_params(), 2 * 3 + 3 + 3 + 1);
    }
}
