use super::heads::{Head, HeadOutput};
use super::mlp::{self, Tape, Topology};
use super::DiffError;
use crate::rng::RngStream;

/// A parameter vector, the MLP it drives, and how its output is read.
#[derive(Debug, Clone, PartialEq)]
pub struct Approximator {
    topo: Topology,
    head: Head,
    pub params: Vec<f64>,
}

impl Approximator {
    /// Builds an MLP `input_dim -> hidden -> head`. `final_scale` shrinks the
    /// output layer at initialization (zero makes the output constant).
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        layer_norm: bool,
        head: Head,
        final_scale: f64,
        rng: &mut RngStream,
    ) -> Self {
        let topo = Topology::new(input_dim, hidden, head.raw_dim(), layer_norm);
        let params = mlp::init_params(&topo, final_scale, rng);
        Self { topo, head, params }
    }

    pub fn from_parts(topo: Topology, head: Head, params: Vec<f64>) -> Result<Self, DiffError> {
        if topo.output_dim != head.raw_dim() {
            return Err(DiffError::Shape { expected: head.raw_dim(), got: topo.output_dim });
        }
        if params.len() != topo.param_count() {
            return Err(DiffError::Shape { expected: topo.param_count(), got: params.len() });
        }
        Ok(Self { topo, head, params })
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.topo.input_dim
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Head-interpreted output for one input.
    pub fn forward(&self, input: &[f64]) -> Result<HeadOutput, DiffError> {
        let mut tape = Tape::default();
        self.forward_raw(input, &mut tape)?;
        Ok(self.head.interpret(&tape.out))
    }

    /// Raw output (pre-head) into `tape.out`, recording activations for a backward pass.
    pub fn forward_raw(&self, input: &[f64], tape: &mut Tape) -> Result<(), DiffError> {
        mlp::forward(&self.topo, &self.params, input, tape)
    }

    /// Accumulates the parameter gradient for upstream gradient `dy` on the raw output
    /// of the forward pass recorded in `tape`.
    pub fn backward_raw(
        &self,
        tape: &mut Tape,
        dy: &[f64],
        grad: &mut [f64],
        dx: Option<&mut [f64]>,
    ) -> Result<(), DiffError> {
        mlp::backward(&self.topo, &self.params, tape, dy, grad, dx)
    }

    /// `(d(dy · raw)/d params, d(dy · raw)/d input)` at `input`.
    pub fn backward(&self, input: &[f64], dy: &[f64]) -> Result<(Vec<f64>, Vec<f64>), DiffError> {
        let mut tape = Tape::default();
        self.forward_raw(input, &mut tape)?;
        let mut grad = vec![0.0; self.params.len()];
        let mut dx = vec![0.0; input.len()];
        self.backward_raw(&mut tape, dy, &mut grad, Some(&mut dx))?;
        Ok((grad, dx))
    }

    /// Sets the output layer's weights and biases to zero.
    pub fn zero_final_layer(&mut self) {
        let dims = self.topo.dense_dims();
        let before: usize = dims[..dims.len() - 1].iter().map(|(i, o)| i * o + o).sum();
        let (i, o) = dims[dims.len() - 1];
        self.params[before..before + i * o + o].iter_mut().for_each(|p| *p = 0.0);
    }
}

/// A frozen copy of an approximator, refreshed only by [`TargetCopy::sync`].
#[derive(Debug, Clone, PartialEq)]
pub struct TargetCopy {
    net: Approximator,
}

impl TargetCopy {
    pub fn of(source: &Approximator) -> Self {
        Self { net: source.clone() }
    }

    pub fn sync(&mut self, source: &Approximator) {
        self.net.params.copy_from_slice(&source.params);
    }

    pub fn net(&self) -> &Approximator {
        &self.net
    }

    pub fn params(&self) -> &[f64] {
        &self.net.params
    }
}

#[cfg(test)]
mod tests {
    use super::super::heads::{softmax, Support};
    use super::super::gradcheck::{grad_check, probe_coords};
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn zero_final_layer_outputs() {
        let mut r = rng::stream(0, 0);
        let mut sig = Approximator::new(3, &[8, 8], true, Head::Sigmoid, 1.0, &mut r);
        sig.zero_final_layer();
        let mut cat = Approximator::new(3, &[8], true, Head::Categorical(Support::new(0.0, 1.0, 7)), 1.0, &mut r);
        cat.zero_final_layer();
        let mut pol = Approximator::new(3, &[8], true, Head::Gmm { components: 5, act_dim: 2, std_floor: 1e-3 }, 1.0, &mut r);
        pol.zero_final_layer();
        for _ in 0..5 {
            let x: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
            assert_eq!(sig.forward(&x).unwrap(), HeadOutput::Sigmoid(0.5));
            match cat.forward(&x).unwrap() {
                HeadOutput::Categorical(p) => p.iter().for_each(|&q| assert!((q - 1.0 / 7.0).abs() < 1e-15)),
                _ => unreachable!(),
            }
            match pol.forward(&x).unwrap() {
                HeadOutput::Gmm(g) => g.weights().iter().for_each(|&w| assert!((w - 0.2).abs() < 1e-15)),
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn forward_is_deterministic_and_shape_checked() {
        let mut r = rng::stream(1, 0);
        let a = Approximator::new(4, &[16, 16], true, Head::Sigmoid, 1.0, &mut r);
        let x = [0.1, 0.2, -0.3, 0.4];
        assert_eq!(a.forward(&x).unwrap(), a.forward(&x).unwrap());
        assert!(matches!(a.forward(&x[..3]), Err(DiffError::Shape { .. })));
        let (g, dx) = a.backward(&x, &[1.0]).unwrap();
        assert_eq!(g.len(), a.param_count());
        assert_eq!(dx.len(), 4);
    }

    #[test]
    fn categorical_probabilities_normalized() {
        let mut r = rng::stream(2, 0);
        let a = Approximator::new(2, &[16], true, Head::Categorical(Support::new(0.0, 100.0, 51)), 10.0, &mut r);
        for _ in 0..200 {
            let x: Vec<f64> = (0..2).map(|_| r.random_range(-50.0..50.0)).collect();
            if let HeadOutput::Categorical(p) = a.forward(&x).unwrap() {
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(p.iter().all(|&q| q >= 0.0));
            }
        }
    }

    #[test]
    fn sigmoid_strictly_inside_unit_interval() {
        let mut r = rng::stream(3, 0);
        let a = Approximator::new(2, &[8], false, Head::Sigmoid, 1.0, &mut r);
        for _ in 0..100 {
            let x: Vec<f64> = (0..2).map(|_| r.random_range(-5.0..5.0)).collect();
            if let HeadOutput::Sigmoid(v) = a.forward(&x).unwrap() {
                assert!(v > 0.0 && v < 1.0);
            }
        }
    }

    /// Central finite differences of a weighted sum of raw outputs, on random small nets.
    #[test]
    fn backward_matches_finite_differences() {
        let mut r = rng::stream(4, 0);
        for (hidden, ln) in [(vec![6, 5], true), (vec![7], false), (vec![4, 4, 3], true), (vec![], false)] {
            let a = Approximator::new(3, &hidden, ln, Head::Categorical(Support::new(0.0, 1.0, 4)), 1.0, &mut r);
            let x: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
            let loss = |net: &Approximator| {
                let mut tape = Tape::default();
                net.forward_raw(&x, &mut tape).unwrap();
                let v: f64 = tape.out.iter().zip(&w).map(|(o, c)| o * c).sum();
                let (g, _) = net.backward(&x, &w).unwrap();
                (v, g)
            };
            let coords = probe_coords(a.param_count(), 40, &mut r);
            let err = grad_check(&a, loss, &coords, 1e-5);
            assert!(err < 1e-4, "hidden {hidden:?}: {err}");

            // input gradient
            let (_, dx) = a.backward(&x, &w).unwrap();
            for i in 0..3 {
                let f = |xi: f64| {
                    let mut xx = x.clone();
                    xx[i] = xi;
                    let mut tape = Tape::default();
                    a.forward_raw(&xx, &mut tape).unwrap();
                    tape.out.iter().zip(&w).map(|(o, c)| o * c).sum::<f64>()
                };
                let fd = (f(x[i] + 1e-5) - f(x[i] - 1e-5)) / 2e-5;
                assert!((fd - dx[i]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn constant_head_has_zero_input_gradient() {
        let mut r = rng::stream(5, 0);
        let mut a = Approximator::new(3, &[5], true, Head::Sigmoid, 1.0, &mut r);
        a.zero_final_layer();
        let (_, dx) = a.backward(&[0.3, 0.1, -0.2], &[1.0]).unwrap();
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_is_linear_in_upstream() {
        let mut r = rng::stream(6, 0);
        let a = Approximator::new(3, &[5, 5], true, Head::Categorical(Support::new(0.0, 1.0, 3)), 1.0, &mut r);
        let x = [0.5, -0.5, 0.25];
        let dy = softmax(&[0.1, 0.2, 0.3]);
        let dy2: Vec<f64> = dy.iter().map(|v| 2.0 * v).collect();
        let (g1, _) = a.backward(&x, &dy).unwrap();
        let (g2, _) = a.backward(&x, &dy2).unwrap();
        for (u, v) in g1.iter().zip(&g2) {
            assert!((2.0 * u - v).abs() <= 1e-12 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn target_copy_tracks_only_on_sync() {
        let mut r = rng::stream(7, 0);
        let mut a = Approximator::new(2, &[4], false, Head::Sigmoid, 1.0, &mut r);
        let mut t = TargetCopy::of(&a);
        assert_eq!(t.params(), a.params.as_slice());
        a.params[0] += 1.0;
        assert_ne!(t.params(), a.params.as_slice());
        t.sync(&a);
        assert_eq!(t.params(), a.params.as_slice());
    }
}
