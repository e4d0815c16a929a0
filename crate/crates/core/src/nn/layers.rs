use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::tensor::{ParamId, ParamStore, Tensor};

/// Train mode uses batch statistics and updates running buffers; eval mode
/// reads the running buffers only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Fully connected layer `y = x·Wᵀ + b`.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    /// Weights and biases drawn from `U(−1/√in_dim, 1/√in_dim)`.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Contract(format!("linear layer {name} needs positive dims")));
        }
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w: Vec<f64> = (0..in_dim * out_dim).map(|_| rng.gen_range(-bound..bound)).collect();
        let b: Vec<f64> = (0..out_dim).map(|_| rng.gen_range(-bound..bound)).collect();
        let weight = store.insert(
            format!("{name}.weight"),
            Tensor::matrix(out_dim, in_dim, w)?.with_requires_grad(true),
        )?;
        let bias = store.insert(format!("{name}.bias"), Tensor::vector(b)?.with_requires_grad(true))?;
        Ok(LinearLayer {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let xt = g.value(x);
        if !xt.is_matrix() || xt.cols() != self.in_dim {
            return Err(Error::dim("forward_linear", self.in_dim, format!("{:?}", xt.shape())));
        }
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }

    pub fn parameter_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// Batch normalization with statistics shared across the whole batch and a
/// per-class affine transform `γ[label] ⊙ x̂ + β[label]`.
#[derive(Clone, Debug)]
pub struct ConditionalBatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub classes: usize,
    pub dim: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl ConditionalBatchNorm {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, classes: usize, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Contract(format!("batch norm {name} needs a positive dim")));
        }
        // a zero-class table is legal: the layer then rejects every label
        let rows = classes.max(1);
        let gamma = store.insert(
            format!("{name}.gamma"),
            Tensor::full(&[rows, dim], 1.0).with_requires_grad(true),
        )?;
        let beta = store.insert(
            format!("{name}.beta"),
            Tensor::zeros(&[rows, dim]).with_requires_grad(true),
        )?;
        let running_mean = store.insert(format!("{name}.running_mean"), Tensor::zeros(&[dim]))?;
        let running_var = store.insert(format!("{name}.running_var"), Tensor::full(&[dim], 1.0))?;
        Ok(ConditionalBatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
            classes,
            dim,
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &mut ParamStore, x: Var, labels: &[usize], mode: Mode) -> Result<Var> {
        let xt = g.value(x);
        if !xt.is_matrix() || xt.cols() != self.dim {
            return Err(Error::dim("forward_cbn", self.dim, format!("{:?}", xt.shape())));
        }
        if labels.len() != xt.rows() {
            return Err(Error::dim("forward_cbn labels", xt.rows(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::LabelRange {
                label: bad,
                classes: self.classes,
            });
        }
        let normalized = match mode {
            Mode::Train => {
                let n = xt.rows() as f64;
                let (xhat, mean, var) = g.standardize_batch(x, self.eps)?;
                let m = self.momentum;
                let rm = store.get_mut(self.running_mean).data_mut();
                rm.iter_mut().zip(&mean).for_each(|(r, v)| *r = (1.0 - m) * *r + m * v);
                let rv = store.get_mut(self.running_var).data_mut();
                let unbiased = n / (n - 1.0);
                rv.iter_mut()
                    .zip(&var)
                    .for_each(|(r, v)| *r = (1.0 - m) * *r + m * v * unbiased);
                xhat
            }
            Mode::Eval => {
                let mean = store.get(self.running_mean).data().to_vec();
                let var = store.get(self.running_var).data().to_vec();
                g.standardize_fixed(x, &mean, &var, self.eps)?
            }
        };
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.cond_affine(normalized, gamma, beta, labels)
    }

    /// Learnable entries only; running statistics are buffers.
    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }

    pub fn buffers(&self) -> Vec<ParamId> {
        vec![self.running_mean, self.running_var]
    }

    pub fn parameter_count(&self) -> usize {
        2 * self.classes * self.dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::grad_check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(store: &mut ParamStore, id: ParamId, data: &[f64]) {
        store.get_mut(id).data_mut().copy_from_slice(data);
    }

    #[test]
    fn identity_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let layer = LinearLayer::new(&mut store, "l", 2, 2, &mut rng).unwrap();
        set(&mut store, layer.weight, &[1.0, 0.0, 0.0, 1.0]);
        set(&mut store, layer.bias, &[0.0, 0.0]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let y = layer.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn constant_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let layer = LinearLayer::new(&mut store, "l", 2, 1, &mut rng).unwrap();
        set(&mut store, layer.weight, &[0.0, 0.0]);
        set(&mut store, layer.bias, &[3.0]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 2, vec![5.0, -7.0, 0.25, 9.0]).unwrap());
        let y = layer.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 3.0]);
    }

    #[test]
    fn linear_rejects_wrong_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let layer = LinearLayer::new(&mut store, "l", 3, 2, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(layer.forward(&mut g, &store, x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn weight_gradient_of_output_sum_is_input_column_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let layer = LinearLayer::new(&mut store, "l", 2, 3, &mut rng).unwrap();
        let input = Tensor::matrix(4, 2, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let y = layer.forward(&mut g, &store, x).unwrap();
        let loss = g.sum(y);
        g.backward_into(loss, &mut store).unwrap();
        let col_sums: Vec<f64> = (0..2).map(|j| (0..4).map(|i| input.row(i)[j]).sum()).collect();
        let gw = store.get(layer.weight).grad().unwrap();
        for o in 0..3 {
            for j in 0..2 {
                assert!((gw[o * 2 + j] - col_sums[j]).abs() < 1e-12);
            }
        }
        let err = grad_check_params(
            &mut store,
            &layer.params(),
            |s| {
                let mut g = Graph::new();
                let x = g.constant(input.clone());
                let y = layer.forward(&mut g, s, x)?;
                let loss = g.sum(y);
                Ok((g, loss))
            },
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "rel err {err}");
    }

    fn cbn_setup(classes: usize, dim: usize) -> (ParamStore, ConditionalBatchNorm) {
        let mut store = ParamStore::new();
        let cbn = ConditionalBatchNorm::new(&mut store, "cbn", classes, dim).unwrap();
        (store, cbn)
    }

    #[test]
    fn cbn_identity_on_standardized_input() {
        let (mut store, cbn) = cbn_setup(2, 2);
        // columns with zero mean and unit biased variance
        let data = vec![1.0, -1.0, -1.0, 1.0, 1.0, 1.0, -1.0, -1.0];
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(4, 2, data.clone()).unwrap());
        let y = cbn.forward(&mut g, &mut store, x, &[0, 1, 0, 1], Mode::Train).unwrap();
        let scale = 1.0 / (1.0 + cbn.eps).sqrt();
        for (a, b) in g.value(y).data().iter().zip(&data) {
            assert!((a - b * scale).abs() < 1e-15);
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn cbn_zero_gamma_outputs_beta() {
        let (mut store, cbn) = cbn_setup(3, 2);
        store.get_mut(cbn.gamma).data_mut().fill(0.0);
        set(&mut store, cbn.beta, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(3, 2, vec![0.3, -2.0, 1.5, 0.1, -0.7, 4.0]).unwrap());
        let y = cbn.forward(&mut g, &mut store, x, &[2, 0, 1], Mode::Train).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 6.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn cbn_errors() {
        let (mut store, cbn) = cbn_setup(2, 2);
        let mut g = Graph::new();
        let one = g.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(
            cbn.forward(&mut g, &mut store, one, &[0], Mode::Train),
            Err(Error::BatchSize { .. })
        ));
        // a single row is fine in eval mode
        assert!(cbn.forward(&mut g, &mut store, one, &[0], Mode::Eval).is_ok());
        let two = g.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            cbn.forward(&mut g, &mut store, two, &[0, 2], Mode::Train),
            Err(Error::LabelRange { label: 2, .. })
        ));
    }

    #[test]
    fn cbn_running_stats_track_batches_and_stay_positive() {
        let (mut store, cbn) = cbn_setup(1, 1);
        for _ in 0..200 {
            let mut g = Graph::new();
            let x = g.constant(Tensor::matrix(2, 1, vec![3.0, 3.0]).unwrap());
            cbn.forward(&mut g, &mut store, x, &[0, 0], Mode::Train).unwrap();
        }
        assert!((store.get(cbn.running_mean).item() - 3.0).abs() < 1e-6);
        assert!(store.get(cbn.running_var).item() > 0.0);
    }

    #[test]
    fn cbn_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..10 {
            let (mut store, cbn) = cbn_setup(3, 4);
            for id in cbn.params() {
                store
                    .get_mut(id)
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v += rng.gen_range(-0.5..0.5));
            }
            let labels: Vec<usize> = (0..6).map(|i| (i + trial) % 3).collect();
            let input = Tensor::matrix(6, 4, (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .unwrap()
                .with_requires_grad(true);
            let weights: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x_id = store.insert("x", input).unwrap();
            let mut ids = cbn.params();
            ids.push(x_id);
            let err = grad_check_params(
                &mut store,
                &ids,
                |s| {
                    let mut g = Graph::new();
                    let x = g.param(s, x_id);
                    let y = cbn.forward(&mut g, s, x, &labels, Mode::Train)?;
                    let loss = g.weighted_sum(y, weights.clone())?;
                    Ok((g, loss))
                },
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "trial {trial}: rel err {err}");
        }
    }
}
