//! Named parameter storage, initialisers and the Adam optimiser.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::ConvGeometry;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Parameters keyed by stable dotted names (`enc.0.res.1.conv1.w`).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Registers every tensor as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound { vars: self.tensors.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone()))).collect() }
    }

    /// Collects leaf gradients for every bound parameter (zeros where unused).
    pub fn gradients(&self, bound: &Bound, grads: &mut Gradients<T>) -> ParamSet<T> {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let g = bound.vars.get(k).and_then(|var| grads.take(*var)).unwrap_or_else(|| Tensor::zeros(v.shape()));
                (k.clone(), g)
            })
            .collect();
        ParamSet { tensors }
    }

    /// Replaces all tensors with those of `other`, requiring identical names and shapes.
    pub fn load_from(&mut self, other: ParamSet<T>) -> Result<()> {
        let missing: Vec<&String> = self.tensors.keys().filter(|k| !other.tensors.contains_key(*k)).collect();
        let extra: Vec<&String> = other.tensors.keys().filter(|k| !self.tensors.contains_key(*k)).collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::Checkpoint(format!("tensor name mismatch: missing {missing:?}, unexpected {extra:?}")));
        }
        for (k, v) in &other.tensors {
            let want = self.tensors[k].shape();
            if v.shape() != want {
                return Err(Error::Checkpoint(format!("tensor {k}: shape {:?} but model expects {want:?}", v.shape())));
            }
        }
        self.tensors = other.tensors;
        Ok(())
    }

    pub fn add_scaled(&mut self, other: &ParamSet<T>, factor: T) {
        for (k, v) in self.tensors.iter_mut() {
            let o = &other.tensors[k];
            for (a, &b) in v.data_mut().iter_mut().zip(o.data()) {
                *a += b * factor;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for v in self.tensors.values_mut() {
            v.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }
}

/// Tape variables for a bound [`ParamSet`].
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter {name} is not bound"))
    }
}

/// Normal(0, std) truncated to ±2 std by rejection.
pub fn truncated_normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            data.push(T::from_f64(z * std));
        }
    }
    Tensor::new(shape.to_vec(), data)
}

pub const INIT_STD: f64 = 0.02;

/// Adds `w` (and `b`) for a conv with the given kernel to `params`.
pub fn init_conv<T: Scalar>(
    params: &mut ParamSet<T>,
    prefix: &str,
    cin: usize,
    cout: usize,
    kernel: [usize; 3],
    zero: bool,
    rng: &mut impl Rng,
) {
    let shape = [cout, cin, kernel[0], kernel[1], kernel[2]];
    let w = if zero { Tensor::zeros(&shape) } else { truncated_normal(&shape, INIT_STD, rng) };
    params.insert(format!("{prefix}.w"), w);
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[cout]));
}

pub fn init_norm<T: Scalar>(params: &mut ParamSet<T>, prefix: &str, c: usize) {
    params.insert(format!("{prefix}.gamma"), Tensor::full(&[c], T::one()));
    params.insert(format!("{prefix}.beta"), Tensor::zeros(&[c]));
}

/// Applies the conv registered under `prefix`.
pub fn conv(tape: &mut Tape<impl Scalar>, p: &Bound, prefix: &str, x: Var, geom: ConvGeometry) -> Var {
    tape.conv3d(x, p.var(&format!("{prefix}.w")), Some(p.var(&format!("{prefix}.b"))), geom)
}

pub fn norm(tape: &mut Tape<impl Scalar>, p: &Bound, prefix: &str, x: Var, groups: usize) -> Var {
    tape.group_norm(x, p.var(&format!("{prefix}.gamma")), p.var(&format!("{prefix}.beta")), groups)
}

/// Largest of {8, 4, 2, 1} dividing `c`.
pub fn norm_groups(c: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| c.is_multiple_of(*g) && *g <= c).unwrap_or(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        Self { config, step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let step_size = T::from_f64(c.learning_rate / bc1);
        let bc2_sqrt = T::from_f64(bc2.sqrt());
        let eps = T::from_f64(c.eps);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).expect("gradient for every parameter");
            let m = self.m.get_mut(name).expect("adam first moment");
            let m = m.data_mut();
            let v = self.v.get_mut(name).expect("adam second moment").data_mut();
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                *w -= step_size * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn truncated_normal_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t: Tensor<f64> = truncated_normal(&[1000], 0.02, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let std = (t.data().iter().map(|v| v * v).sum::<f64>() / 1000.0).sqrt();
        assert!(std > 0.014 && std < 0.02, "{std}");
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut p = ParamSet::<f64>::new();
        p.insert("x", Tensor::new(vec![2], vec![3.0, -2.0]));
        let mut opt = Adam::new(AdamConfig { learning_rate: 0.1, ..Default::default() }, &p);
        for _ in 0..500 {
            let mut g = p.clone();
            g.scale(2.0);
            opt.update(&mut p, &g);
        }
        assert!(p.get("x").unwrap().data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn load_from_reports_names() {
        let mut a = ParamSet::<f32>::new();
        a.insert("w", Tensor::zeros(&[2]));
        let mut b = ParamSet::<f32>::new();
        b.insert("w_renamed", Tensor::zeros(&[2]));
        let err = a.load_from(b).unwrap_err().to_string();
        assert!(err.contains("w_renamed") && err.contains("\"w\""), "{err}");
    }
}
