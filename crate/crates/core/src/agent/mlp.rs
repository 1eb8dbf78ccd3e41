//! Small fully connected networks with hand-written backpropagation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::AgentError;

/// Most weight layers a network may have.
pub const MAX_LAYERS: usize = 3;
/// Widest allowed hidden layer.
pub const MAX_HIDDEN_WIDTH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out x in`
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Per-layer outputs recorded by [`Mlp::forward_trace`]; `outputs[0]` is the input.
#[derive(Debug, Clone)]
pub struct Trace {
    outputs: Vec<DVector<f64>>,
}

impl Trace {
    pub fn output(&self) -> &DVector<f64> {
        self.outputs.last().expect("trace holds the input at least")
    }
}

/// Batched counterpart of [`Trace`]; each entry is `width x batch`.
#[derive(Debug, Clone)]
pub struct BatchTrace {
    outputs: Vec<DMatrix<f64>>,
}

impl BatchTrace {
    pub fn output(&self) -> &DMatrix<f64> {
        self.outputs.last().expect("trace holds the input at least")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        MlpGrads {
            weights: net.layers.iter().map(|l| DMatrix::zeros(l.weights.nrows(), l.weights.ncols())).collect(),
            biases: net.layers.iter().map(|l| DVector::zeros(l.bias.len())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    /// Same ordering as [`Mlp::params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b.as_slice());
        }
        out
    }
}

fn check_sizes(sizes: &[usize]) -> Result<(), AgentError> {
    let layers = sizes.len().saturating_sub(1);
    if layers == 0 || layers > MAX_LAYERS || sizes.iter().any(|&s| s == 0) {
        return Err(AgentError::InvalidArchitecture(format!("layer sizes {sizes:?}")));
    }
    if sizes[1..sizes.len() - 1].iter().any(|&w| w > MAX_HIDDEN_WIDTH) {
        return Err(AgentError::InvalidArchitecture(format!(
            "hidden width above {MAX_HIDDEN_WIDTH} in {sizes:?}"
        )));
    }
    Ok(())
}

fn activation_for(i: usize, n: usize, hidden: Activation, output: Activation) -> Activation {
    if i + 1 == n {
        output
    } else {
        hidden
    }
}

impl Mlp {
    /// All weights and biases zero.
    pub fn zeros(sizes: &[usize], hidden: Activation, output: Activation) -> Result<Self, AgentError> {
        check_sizes(sizes)?;
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| Layer {
                weights: DMatrix::zeros(sizes[i + 1], sizes[i]),
                bias: DVector::zeros(sizes[i + 1]),
                activation: activation_for(i, n, hidden, output),
            })
            .collect();
        Ok(Mlp { layers })
    }

    /// Fan-in uniform initialization; the last layer starts near zero so the
    /// initial output sits at `activation(0)`.
    pub fn random<R: Rng>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self, AgentError> {
        let mut net = Self::zeros(sizes, hidden, output)?;
        let n = net.layers.len();
        for (i, layer) in net.layers.iter_mut().enumerate() {
            let bound = if i + 1 == n { 3e-3 } else { 1.0 / (layer.weights.ncols() as f64).sqrt() };
            for w in layer.weights.iter_mut() {
                *w = rng.random_range(-bound..bound);
            }
            for b in layer.bias.iter_mut() {
                *b = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self, AgentError> {
        let mut sizes = vec![layers.first().map(|l| l.weights.ncols()).unwrap_or(0)];
        for l in &layers {
            if l.weights.ncols() != *sizes.last().unwrap() || l.bias.len() != l.weights.nrows() {
                return Err(AgentError::InvalidArchitecture("inconsistent layer shapes".into()));
            }
            sizes.push(l.weights.nrows());
        }
        check_sizes(&sizes)?;
        Ok(Mlp { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weights.nrows()
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim()).chain(self.layers.iter().map(|l| l.weights.nrows())).collect()
    }

    pub fn forward(&self, input: &[f64]) -> Result<DVector<f64>, AgentError> {
        Ok(self.forward_trace(input)?.outputs.pop().unwrap())
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<Trace, AgentError> {
        if input.len() != self.input_dim() {
            return Err(AgentError::DimensionMismatch { expected: self.input_dim(), got: input.len() });
        }
        let mut outputs = Vec::with_capacity(self.layers.len() + 1);
        outputs.push(DVector::from_column_slice(input));
        for layer in &self.layers {
            let z = &layer.weights * outputs.last().unwrap() + &layer.bias;
            outputs.push(z.map(|v| layer.activation.apply(v)));
        }
        Ok(Trace { outputs })
    }

    /// Backpropagates `grad_output` (d objective / d network output) through a
    /// recorded forward pass. Returns parameter gradients and d objective / d input.
    pub fn backward(&self, trace: &Trace, grad_output: &DVector<f64>) -> Result<(MlpGrads, DVector<f64>), AgentError> {
        if grad_output.len() != self.output_dim() {
            return Err(AgentError::DimensionMismatch { expected: self.output_dim(), got: grad_output.len() });
        }
        let n = self.layers.len();
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        let mut upstream = grad_output.clone();
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            let y = &trace.outputs[i + 1];
            let dz = upstream.zip_map(y, |g, yv| g * layer.activation.derivative_from_output(yv));
            weights.push(&dz * trace.outputs[i].transpose());
            upstream = layer.weights.transpose() * &dz;
            biases.push(dz);
        }
        weights.reverse();
        biases.reverse();
        Ok((MlpGrads { weights, biases }, upstream))
    }

    /// Forward pass over a batch stored column-wise (`input_dim x batch`).
    pub fn forward_batch(&self, inputs: DMatrix<f64>) -> Result<BatchTrace, AgentError> {
        if inputs.nrows() != self.input_dim() {
            return Err(AgentError::DimensionMismatch { expected: self.input_dim(), got: inputs.nrows() });
        }
        let mut outputs = Vec::with_capacity(self.layers.len() + 1);
        outputs.push(inputs);
        for layer in &self.layers {
            let mut z = &layer.weights * outputs.last().unwrap();
            for mut col in z.column_iter_mut() {
                col += &layer.bias;
            }
            z.apply(|v| *v = layer.activation.apply(*v));
            outputs.push(z);
        }
        Ok(BatchTrace { outputs })
    }

    /// Batched [`Mlp::backward`]; parameter gradients are summed over the batch.
    pub fn backward_batch(
        &self,
        trace: &BatchTrace,
        grad_output: &DMatrix<f64>,
    ) -> Result<(MlpGrads, DMatrix<f64>), AgentError> {
        if grad_output.nrows() != self.output_dim() || grad_output.ncols() != trace.outputs[0].ncols() {
            return Err(AgentError::DimensionMismatch { expected: self.output_dim(), got: grad_output.nrows() });
        }
        let n = self.layers.len();
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        let mut upstream = grad_output.clone();
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            let y = &trace.outputs[i + 1];
            let dz = upstream.zip_map(y, |g, yv| g * layer.activation.derivative_from_output(yv));
            weights.push(&dz * trace.outputs[i].transpose());
            biases.push(dz.column_sum());
            upstream = layer.weights.transpose() * &dz;
        }
        weights.reverse();
        biases.reverse();
        Ok((MlpGrads { weights, biases }, upstream))
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Flattened parameters: per layer, weights (column-major) then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<(), AgentError> {
        if params.len() != self.num_params() {
            return Err(AgentError::DimensionMismatch { expected: self.num_params(), got: params.len() });
        }
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.as_mut_slice().copy_from_slice(&params[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.as_mut_slice().copy_from_slice(&params[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    /// `self <- (1 - tau) * self + tau * source`, parameter by parameter.
    pub fn soft_update_from(&mut self, source: &Mlp, tau: f64) {
        for (t, s) in self.layers.iter_mut().zip(&source.layers) {
            t.weights.zip_apply(&s.weights, |a, b| *a = (1.0 - tau) * *a + tau * b);
            t.bias.zip_apply(&s.bias, |a, b| *a = (1.0 - tau) * *a + tau * b);
        }
    }
}

/// Adam optimizer over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, n: usize) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// One descent step on `params` along `grads`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn architecture_limits() {
        assert!(Mlp::zeros(&[2, 64, 64, 1], Activation::Tanh, Activation::Sigmoid).is_ok());
        assert!(Mlp::zeros(&[2, 65, 1], Activation::Tanh, Activation::Sigmoid).is_err());
        assert!(Mlp::zeros(&[2, 8, 8, 8, 1], Activation::Tanh, Activation::Sigmoid).is_err());
        assert!(Mlp::zeros(&[2], Activation::Tanh, Activation::Sigmoid).is_err());
    }

    #[test]
    fn zero_network_outputs_activation_of_zero() {
        let net = Mlp::zeros(&[2, 64, 64, 1], Activation::Tanh, Activation::Sigmoid).unwrap();
        assert_eq!(net.forward(&[0.3, -1.0]).unwrap()[0], 0.5);
        let lin = Mlp::zeros(&[3, 4, 1], Activation::Tanh, Activation::Identity).unwrap();
        assert_eq!(lin.forward(&[0.0, 0.0, 0.0]).unwrap()[0], 0.0);
    }

    #[test]
    fn single_layer_is_affine_map() {
        let layer = Layer {
            weights: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]),
            bias: DVector::from_vec(vec![0.5, -0.5]),
            activation: Activation::Identity,
        };
        let net = Mlp::from_layers(vec![layer]).unwrap();
        let y = net.forward(&[1.0, 1.0]).unwrap();
        assert_eq!(y.as_slice(), &[3.5, 6.5]);
        assert!(matches!(net.forward(&[1.0]), Err(AgentError::DimensionMismatch { .. })));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let mut net = Mlp::random(&[2, 8, 8, 1], Activation::Tanh, Activation::Sigmoid, &mut rng).unwrap();
            // Scale the output layer up so its gradients are not tiny.
            let mut p = net.params();
            for v in p.iter_mut() {
                *v *= 3.0;
            }
            net.set_params(&p).unwrap();
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let trace = net.forward_trace(&x).unwrap();
            let (g, gin) = net.backward(&trace, &DVector::from_element(1, 1.0)).unwrap();
            let g = g.flatten();
            let h = 1e-6;
            for i in 0..p.len() {
                let mut q = p.clone();
                q[i] += h;
                net.set_params(&q).unwrap();
                let fp = net.forward(&x).unwrap()[0];
                q[i] -= 2.0 * h;
                net.set_params(&q).unwrap();
                let fm = net.forward(&x).unwrap()[0];
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-5 * fd.abs().max(1e-4), "param {i}: {fd} vs {}", g[i]);
            }
            net.set_params(&p).unwrap();
            for k in 0..2 {
                let mut xp = x;
                xp[k] += h;
                let mut xm = x;
                xm[k] -= h;
                let fd = (net.forward(&xp).unwrap()[0] - net.forward(&xm).unwrap()[0]) / (2.0 * h);
                assert!((fd - gin[k]).abs() <= 1e-5 * fd.abs().max(1e-4));
            }
        }
    }

    #[test]
    fn batched_passes_agree_with_single_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Mlp::random(&[3, 6, 5, 1], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let xs = DMatrix::from_fn(3, 7, |_, _| rng.random_range(-1.0..1.0));
        let gout = DMatrix::from_fn(1, 7, |_, _| rng.random_range(-1.0..1.0));
        let bt = net.forward_batch(xs.clone()).unwrap();
        let (bg, bin) = net.backward_batch(&bt, &gout).unwrap();
        let mut sum = MlpGrads::zeros_like(&net);
        for c in 0..7 {
            let x: Vec<f64> = xs.column(c).iter().copied().collect();
            let t = net.forward_trace(&x).unwrap();
            assert!((t.output()[0] - bt.output()[(0, c)]).abs() < 1e-14);
            let (g, gin) = net.backward(&t, &DVector::from_element(1, gout[(0, c)])).unwrap();
            sum.add_assign(&g);
            assert!((gin - bin.column(c)).norm() < 1e-14);
        }
        for (a, b) in sum.flatten().iter().zip(bg.flatten()) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn params_round_trip_and_soft_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Mlp::random(&[3, 5, 1], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let mut b = Mlp::random(&[3, 5, 1], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let mut c = a.clone();
        c.set_params(&a.params()).unwrap();
        assert_eq!(a, c);
        let before = b.params();
        b.soft_update_from(&a, 0.25);
        for ((x, y), z) in b.params().iter().zip(&before).zip(a.params()) {
            assert_eq!(*x, 0.75 * y + 0.25 * z);
        }
        b.soft_update_from(&a, 1.0);
        assert_eq!(b, a);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut opt = Adam::new(0.05, 2);
        let mut p = vec![3.0, -2.0];
        for _ in 0..2000 {
            let g = vec![2.0 * (p[0] - 1.0), 2.0 * (p[1] + 0.5)];
            opt.step(&mut p, &g);
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3);
    }
}
