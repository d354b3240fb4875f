use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::AlgoError;
use crate::types::{Layout, ParamSet};

/// Fully connected action-value network over a flat parameter vector.
///
/// Parameters are stored layer by layer: the weight matrix in row-major
/// `[out][in]` order followed by the bias vector (when the layout has one).
#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    params: ParamSet,
}

/// Activations kept from a forward pass for backpropagation.
pub(crate) struct Trace {
    /// `acts[0]` is the input; `acts[l + 1]` the output of layer `l`
    /// (post-activation for hidden layers).
    acts: Vec<Vec<f64>>,
}

impl Trace {
    pub(crate) fn output(&self) -> &[f64] {
        self.acts.last().unwrap()
    }
}

impl QNetwork {
    /// Uniform fan-in scaled initialization: every weight and bias of a layer
    /// with `n` inputs is drawn from `U(-1/sqrt(n), 1/sqrt(n))`.
    pub fn init(layout: Layout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = Vec::with_capacity(layout.param_count());
        for w in layout.sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = fan_in * fan_out + if layout.bias { fan_out } else { 0 };
            theta.extend((0..n).map(|_| rng.gen_range(-bound..bound)));
        }
        Self {
            params: ParamSet::new(theta, 0, layout).expect("init matches layout"),
        }
    }

    pub fn zeros(layout: Layout) -> Self {
        Self {
            params: ParamSet::zeros(layout),
        }
    }

    pub fn from_params(params: ParamSet) -> Self {
        Self { params }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    pub fn layout(&self) -> &Layout {
        self.params.layout()
    }

    pub fn version(&self) -> u64 {
        self.params.version()
    }

    pub fn n_actions(&self) -> usize {
        self.layout().outputs()
    }

    pub fn forward(&self, state: &[f32]) -> Result<Vec<f64>, AlgoError> {
        self.check_input(state)?;
        let out = self.trace(state).acts.pop().unwrap();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(AlgoError::NonFinite("network output"));
        }
        Ok(out)
    }

    pub(crate) fn check_input(&self, state: &[f32]) -> Result<(), AlgoError> {
        if state.len() != self.layout().inputs() {
            return Err(AlgoError::DimensionMismatch {
                expected: self.layout().inputs(),
                found: state.len(),
            });
        }
        Ok(())
    }

    pub(crate) fn trace(&self, state: &[f32]) -> Trace {
        let layout = self.layout();
        let theta = self.params.theta();
        let n_layers = layout.n_layers();
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
        acts.push(state.iter().map(|&v| v as f64).collect());
        let mut off = 0;
        for (l, w) in layout.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &theta[off..off + n_in * n_out];
            off += n_in * n_out;
            let bias = if layout.bias {
                let b = &theta[off..off + n_out];
                off += n_out;
                Some(b)
            } else {
                None
            };
            let input = &acts[l];
            let mut out = Vec::with_capacity(n_out);
            for j in 0..n_out {
                let row = &weights[j * n_in..(j + 1) * n_in];
                let mut z = bias.map_or(0.0, |b| b[j]);
                for (wi, xi) in row.iter().zip(input) {
                    z += wi * xi;
                }
                if l + 1 < n_layers && z < 0.0 {
                    z = 0.0;
                }
                out.push(z);
            }
            acts.push(out);
        }
        Trace { acts }
    }

    /// Accumulates `d(output) -> d(theta)` into `grad` given the gradient of
    /// some scalar with respect to the network output.
    pub(crate) fn backward(&self, trace: &Trace, d_out: &[f64], grad: &mut [f64]) {
        let layout = self.layout();
        let theta = self.params.theta();
        let n_layers = layout.n_layers();

        // offsets of each layer's weight block
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for w in layout.sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + if layout.bias { w[1] } else { 0 };
        }

        let mut delta = d_out.to_vec();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (layout.sizes[l], layout.sizes[l + 1]);
            let w_off = offsets[l];
            let input = &trace.acts[l];
            for j in 0..n_out {
                let dj = delta[j];
                if dj == 0.0 {
                    continue;
                }
                let g = &mut grad[w_off + j * n_in..w_off + (j + 1) * n_in];
                for (gi, xi) in g.iter_mut().zip(input) {
                    *gi += dj * xi;
                }
            }
            if layout.bias {
                let b_off = w_off + n_in * n_out;
                for j in 0..n_out {
                    grad[b_off + j] += delta[j];
                }
            }
            if l == 0 {
                break;
            }
            // propagate through the weights and the ReLU of layer l - 1
            let weights = &theta[w_off..w_off + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for j in 0..n_out {
                let dj = delta[j];
                if dj == 0.0 {
                    continue;
                }
                let row = &weights[j * n_in..(j + 1) * n_in];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += dj * w;
                }
            }
            for (p, a) in prev.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }

    /// Gradient of the output `action` with respect to every parameter.
    pub fn action_gradient(&self, state: &[f32], action: usize) -> Result<Vec<f64>, AlgoError> {
        self.check_input(state)?;
        if action >= self.n_actions() {
            return Err(AlgoError::ActionOutOfRange {
                action,
                n_actions: self.n_actions(),
            });
        }
        let trace = self.trace(state);
        let mut d_out = vec![0.0; self.n_actions()];
        d_out[action] = 1.0;
        let mut grad = vec![0.0; self.params.theta().len()];
        self.backward(&trace, &d_out, &mut grad);
        Ok(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_network_outputs_zero() {
        let net = QNetwork::zeros(Layout::mlp(4, &[8], 3));
        assert_eq!(net.forward(&[0.3, -1.0, 2.0, 0.5]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn single_layer_selects_weight_column() {
        // W is [out][in]; with a one-hot input e_k the output is column k.
        let layout = Layout::new(vec![3, 2], false);
        let theta = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let net = QNetwork::from_params(ParamSet::new(theta, 0, layout).unwrap());
        assert_eq!(net.forward(&[0.0, 1.0, 0.0]).unwrap(), vec![2.0, 5.0]);
        assert_eq!(net.forward(&[0.0, 0.0, 1.0]).unwrap(), vec![3.0, 6.0]);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let net = QNetwork::zeros(Layout::mlp(4, &[8], 2));
        assert!(matches!(
            net.forward(&[0.0; 3]),
            Err(AlgoError::DimensionMismatch {
                expected: 4,
                found: 3
            })
        ));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let layout = Layout::mlp(4, &[16], 2);
        let a = QNetwork::init(layout.clone(), 9);
        let b = QNetwork::init(layout.clone(), 9);
        let c = QNetwork::init(layout, 10);
        assert_eq!(a, b);
        assert_ne!(a, c);
        // first layer bound 1/sqrt(4)
        assert!(a.params().theta()[..4 * 16].iter().all(|v| v.abs() <= 0.5));
    }
}
