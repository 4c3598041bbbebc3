use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayViewD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A named tensor with a gradient buffer and a trainable flag.
///
/// Frozen parameters silently drop gradient contributions, so after any
/// backward pass their `grad` is exactly zero.
#[derive(Debug, Clone)]
pub struct Parameter {
    name: String,
    value: ArrayD<f64>,
    grad: ArrayD<f64>,
    trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: ArrayD<f64>, trainable: bool) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self {
            name: name.into(),
            value,
            grad,
            trainable,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize], trainable: bool) -> Self {
        Self::new(name, ArrayD::zeros(IxDyn(shape)), trainable)
    }

    /// Uniform init on `(-limit, limit)`.
    pub fn uniform(
        name: impl Into<String>,
        shape: &[usize],
        limit: f64,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
        Self::new(name, ArrayD::from_shape_vec(IxDyn(shape), data).unwrap(), trainable)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
        if !trainable {
            self.grad.fill(0.0);
        }
    }

    pub fn value(&self) -> &ArrayD<f64> {
        &self.value
    }

    /// Direct mutable access for the optimizer / EMA / checkpoint loader.
    pub fn value_mut(&mut self) -> &mut ArrayD<f64> {
        &mut self.value
    }

    pub fn grad(&self) -> &ArrayD<f64> {
        &self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Accumulates `delta` into the gradient; a no-op for frozen parameters.
    pub fn accum_grad(&mut self, delta: ArrayViewD<f64>) {
        if !self.trainable {
            return;
        }
        debug_assert_eq!(self.grad.shape(), delta.shape());
        self.grad += &delta;
    }

    /// Adds `scale * delta` into the gradient; a no-op for frozen parameters.
    pub fn accum_grad_scaled(&mut self, delta: ArrayViewD<f64>, scale: f64) {
        if !self.trainable {
            return;
        }
        debug_assert_eq!(self.grad.shape(), delta.shape());
        self.grad.zip_mut_with(&delta, |g, &d| *g += scale * d);
    }

    pub fn as2(&self) -> ArrayView2<'_, f64> {
        self.value.view().into_dimensionality().expect("2-d parameter")
    }

    pub fn as1(&self) -> ArrayView1<'_, f64> {
        self.value.view().into_dimensionality().expect("1-d parameter")
    }
}
