use super::rng::RngStream;
use super::tape::{Conv2dOpts, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named, ordered trainable tensors of one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
}

/// Tape handles for every parameter of a store, in store order.
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<f32>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f32> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Puts every parameter on the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<f32>) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.param(t.clone())).collect())
    }

    /// Puts every parameter on the tape as a constant (frozen model).
    pub fn bind_frozen(&self, tape: &mut Tape<f32>) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.constant(t.clone())).collect())
    }

    pub fn to_named(&self, prefix: &str) -> Vec<(String, Tensor<f32>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| (format!("{prefix}{n}"), t.clone()))
            .collect()
    }

    /// Overwrites every parameter from `named` (keys carry `prefix`); shapes must match.
    pub fn load_named(&mut self, prefix: &str, named: &[(String, Tensor<f32>)]) -> Result<()> {
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let key = format!("{prefix}{name}");
            let found = named
                .iter()
                .find(|(k, _)| *k == key)
                .ok_or_else(|| Error::Format(format!("missing tensor {key}")))?;
            if found.1.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "tensor {key} has shape {:?}, expected {:?}",
                    found.1.shape(),
                    slot.shape()
                )));
            }
            *slot = found.1.clone();
        }
        Ok(())
    }
}

fn scaled_normal(rng: &mut RngStream, shape: &[usize], std: f64) -> Tensor<f32> {
    Tensor::from_fn(shape.to_vec(), |_| (rng.normal() * std) as f32)
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut RngStream) -> Self {
        let w = store.add(format!("{name}.w"), scaled_normal(rng, &[input, output], (1.0 / input as f64).sqrt()));
        let b = store.add(format!("{name}.b"), Tensor::zeros([output]));
        Self { w, b }
    }

    /// Weights and bias start at zero, so the layer initially emits zeros.
    pub fn zeroed(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros([input, output]));
        let b = store.add(format!("{name}.b"), Tensor::zeros([output]));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape<f32>, p: &Bound, x: Var) -> Result<Var> {
        tape.affine(x, p.get(self.w), p.get(self.b))
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    w: ParamId,
    b: ParamId,
    opts: Conv2dOpts,
}

impl Conv {
    /// 2-D convolution with a `kh x kw` kernel.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        rng: &mut RngStream,
    ) -> Self {
        let fan_in = (cin * kernel.0 * kernel.1) as f64;
        let w = store.add(
            format!("{name}.w"),
            scaled_normal(rng, &[cout, cin, kernel.0, kernel.1], (1.0 / fan_in).sqrt()),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros([cout]));
        Self { w, b, opts: Conv2dOpts { stride, pad } }
    }

    /// Square `k x k` kernel with "same" padding.
    pub fn same(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, rng: &mut RngStream) -> Self {
        Self::new(store, name, cin, cout, (k, k), (1, 1), (k / 2, k / 2), rng)
    }

    /// Square `k x k` kernel, stride 2, halving each spatial dimension.
    pub fn down(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, rng: &mut RngStream) -> Self {
        Self::new(store, name, cin, cout, (k, k), (2, 2), (k / 2, k / 2), rng)
    }

    pub fn forward(&self, tape: &mut Tape<f32>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, p.get(self.w), self.opts)?;
        tape.add_bias(y, p.get(self.b))
    }
}

/// `x + conv(silu(conv(silu(x))))`; the second convolution starts scaled down so a
/// fresh block is close to the identity.
#[derive(Clone, Debug)]
pub struct ResBlock {
    c1: Conv,
    c2: Conv,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, kernel: (usize, usize), rng: &mut RngStream) -> Self {
        let pad = (kernel.0 / 2, kernel.1 / 2);
        let c1 = Conv::new(store, &format!("{name}.c1"), channels, channels, kernel, (1, 1), pad, rng);
        let c2 = Conv::new(store, &format!("{name}.c2"), channels, channels, kernel, (1, 1), pad, rng);
        for v in store.get_mut(c2.w).data_mut() {
            *v *= 0.1;
        }
        Self { c1, c2 }
    }

    pub fn forward(&self, tape: &mut Tape<f32>, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.silu(x);
        let h = self.c1.forward(tape, p, h)?;
        let h = tape.silu(h);
        let h = self.c2.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

/// Sinusoidal embedding of integer steps: `[sin(t w_k), cos(t w_k)]` with
/// geometrically spaced frequencies, giving `[B, dim]`.
pub fn timestep_embedding(steps: &[usize], dim: usize) -> Tensor<f32> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        for k in 0..dim {
            let j = k % half.max(1);
            let freq = (-(10_000f64.ln()) * j as f64 / half.max(1) as f64).exp();
            let arg = t as f64 * freq;
            data.push(if k < half { arg.sin() } else { arg.cos() } as f32);
        }
    }
    Tensor::new([steps.len(), dim], data).expect("embedding shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_round_trip_checks_shapes() {
        let mut rng = RngStream::new(1);
        let mut a = ParamStore::new();
        Linear::new(&mut a, "fc", 3, 2, &mut rng);
        let named = a.to_named("m.");
        let mut b = ParamStore::new();
        Linear::zeroed(&mut b, "fc", 3, 2);
        b.load_named("m.", &named).unwrap();
        assert_eq!(a, b);

        let mut c = ParamStore::new();
        Linear::zeroed(&mut c, "fc", 2, 2);
        assert!(c.load_named("m.", &named).is_err());
    }

    #[test]
    fn zeroed_linear_emits_zeros() {
        let mut store = ParamStore::new();
        let fc = Linear::zeroed(&mut store, "fc", 4, 3);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::full([2, 4], 3.0));
        let y = fc.forward(&mut tape, &p, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_distinguishes_steps() {
        let e = timestep_embedding(&[1, 2, 50], 16);
        assert_eq!(e.shape(), &[3, 16]);
        assert_ne!(e.data()[..16], e.data()[16..32]);
    }
}
