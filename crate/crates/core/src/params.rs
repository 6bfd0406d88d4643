//! Named parameter sets, binding into a [`Graph`], and the Adam optimizer.

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Conv2dOpts, Gradients, Graph, Var};
use crate::tensor::{Real, Tensor};

/// Ordered, named tensors. Order is part of the serialized form.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Appends a tensor and returns its slot index.
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensor(&self, idx: usize) -> &Tensor<T> {
        &self.tensors[idx]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.tensors[idx]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces every tensor with the same-named tensor from `other`,
    /// checking names and shapes.
    pub fn load_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = other
                .get(name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if src.shape() != t.shape() {
                return Err(Error::WeightShape {
                    name: name.clone(),
                    expected: t.shape().to_vec(),
                    found: src.shape().to_vec(),
                });
            }
            *t = src.clone();
        }
        Ok(())
    }

    /// Adds every tensor to `g`, trainable or constant.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
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

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            buf.clear();
            for v in t.data() {
                v.write_bytes(false, &mut buf);
            }
            h.update(&buf);
        }
        hex(&h.finalize())
    }

    /// Appends every tensor of `other` under `"{prefix}/{name}"`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet<T>) {
        for (name, t) in other.iter() {
            self.push(format!("{prefix}/{name}"), t.clone());
        }
    }

    /// Tensors named `"{prefix}/..."`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> ParamSet<T> {
        let head = format!("{prefix}/");
        let mut out = ParamSet::new();
        for (name, t) in self.iter() {
            if let Some(rest) = name.strip_prefix(&head) {
                out.push(rest, t.clone());
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// He-normal initialization for a conv or linear weight with `fan_in` inputs.
pub fn he_normal<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// A convolution whose weight and bias live in a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: usize,
    pub bias: Option<usize>,
    pub opts: Conv2dOpts,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        opts: Conv2dOpts,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let mut w = he_normal::<T, R>(&[cout, cin, kernel, kernel], fan_in, rng);
        if gain != 1.0 {
            let g = T::lit(gain);
            w.data_mut().iter_mut().for_each(|x| *x *= g);
        }
        let weight = params.push(format!("{name}.weight"), w);
        let bias = bias.then(|| params.push(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self { weight, bias, opts }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        g.conv2d(x, p[self.weight], self.bias.map(|b| p[b]), self.opts)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearLayer {
    pub weight: usize,
    pub bias: usize,
}

impl LinearLayer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        let weight = params.push(format!("{name}.weight"), he_normal::<T, R>(&[cout, cin], cin, rng));
        let bias = params.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { weight, bias }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        g.linear(x, p[self.weight], Some(p[self.bias]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// Betas (0.5, 0.999), the usual choice for adversarial training.
    pub fn gan(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state for one [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Adam<T = f32> {
    pub config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamSet<T>, config: AdamConfig) -> Self {
        Self {
            config,
            m: params.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect(),
            v: params.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update at learning rate `lr`. `vars` are the bindings
    /// of `params` in the graph the gradients came from; parameters
    /// without a gradient are left untouched.
    pub fn update(&mut self, params: &mut ParamSet<T>, vars: &[Var], grads: &Gradients<T>, lr: f64) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let step_size = T::lit(lr * bc2.sqrt() / bc1);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let eps = T::lit(c.eps * bc2.sqrt());
        for (i, var) in vars.iter().enumerate() {
            let Some(g) = grads.get(*var) else {
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, gi), mi), vi) in params.tensors[i]
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + one_b1 * *gi;
                *vi = b2 * *vi + one_b2 * *gi * *gi;
                *p -= step_size * *mi / (vi.sqrt() + eps);
            }
        }
    }
}
