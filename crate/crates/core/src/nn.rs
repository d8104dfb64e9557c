//! Parameter storage, the two layer types every network here is built from,
//! and Adam.

use std::ops::Index;

use rand::Rng;

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Replaces every tensor with the entry named `prefix + name` from `lookup`.
    pub fn load_from(
        &mut self,
        prefix: &str,
        lookup: impl Fn(&str) -> Option<Tensor>,
    ) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let key = format!("{prefix}{name}");
            let loaded =
                lookup(&key).ok_or_else(|| Error::Contract(format!("missing tensor {key}")))?;
            if loaded.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "{key}: stored {:?}, expected {:?}",
                    loaded.shape(),
                    t.shape()
                )));
            }
            *t = loaded;
        }
        Ok(())
    }

    /// Puts every tensor on the tape. Frozen stores become constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Tape handles for one [`ParamStore`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    /// Gradient per parameter, zero where none reached it.
    pub fn grads(&self, g: &Graph, grads: &Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.shape(v)))
            })
            .collect()
    }
}

/// Std of a variance-preserving init for a layer followed by a leaky
/// rectifier with negative slope `slope`.
pub fn he_std(fan_in: usize, slope: f64) -> f64 {
    (2.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt()
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    stride: usize,
    pad: (usize, usize),
}

impl Conv {
    /// `k = (kh, kw)`; padding keeps the spatial size at stride 1.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: (usize, usize),
        stride: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            Tensor::randn(&[cout, cin, k.0, k.1], std, rng),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Conv {
            w,
            b,
            stride,
            pad: (k.0 / 2, k.1 / 2),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p[self.w], Some(p[self.b]), self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::randn(&[dout, din], std, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[dout]));
        Dense { w, b }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.linear(x, p[self.w], p[self.b])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip, if any.
    pub clip: Option<f64>,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: None,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        let scale = match self.clip {
            Some(max) => {
                let norm = grads
                    .iter()
                    .flat_map(|g| g.data())
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in store
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi * scale;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    /// Moment tensors and step count, for checkpointing.
    pub fn state(&self) -> (&[Tensor], &[Tensor], u64) {
        (&self.m, &self.v, self.step)
    }

    pub fn restore(&mut self, m: Vec<Tensor>, v: Vec<Tensor>, step: u64) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::Contract(
                "optimizer state does not match parameters".into(),
            ));
        }
        for (new, old) in m.iter().zip(&self.m).chain(v.iter().zip(&self.v)) {
            if new.shape() != old.shape() {
                return Err(Error::Shape("optimizer moment shape mismatch".into()));
            }
        }
        self.m = m;
        self.v = v;
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(&store, 0.1);
        for _ in 0..500 {
            let mut g = Graph::new();
            let p = store.bind(&mut g, true);
            let sq = g.square(p[id]);
            let loss = g.sum(sq);
            let grads = g.backward(loss);
            let gs = p.grads(&g, &grads);
            opt.step(&mut store, &gs);
        }
        assert!(store.get(id).max_abs() < 1e-2);
    }

    #[test]
    fn frozen_store_gets_no_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(2.0));
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let sq = g.square(p[id]);
        let grads = g.backward(sq);
        assert!(grads.get(p[id]).is_none());
    }
}
