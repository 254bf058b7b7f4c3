use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<R: Real> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<R>,
}

impl<R: Real> Param<R> {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Named parameter tensors of one model.
///
/// Every mutable access bumps a generation counter so activation caches taken
/// before the change can be recognised as stale.
#[derive(Debug)]
pub struct ParamStore<R: Real> {
    params: Vec<Param<R>>,
    id: u64,
    generation: u64,
}

impl<R: Real> Clone for ParamStore<R> {
    fn clone(&self) -> Self {
        Self {
            params: self.params.clone(),
            id: fresh_id(),
            generation: 0,
        }
    }
}

impl<R: Real> PartialEq for ParamStore<R> {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
    }
}

/// Handle to one parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

impl<R: Real> Default for ParamStore<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            id: fresh_id(),
            generation: 0,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<R>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.params.push(Param {
            name: name.into(),
            shape,
            data,
        });
        self.generation += 1;
        ParamId(self.params.len() - 1)
    }

    /// Uniform `(-bound, bound)` weights with `bound = 1 / sqrt(fan_in)`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let n = shape.iter().product();
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..n)
            .map(|_| R::of(rng.random_range(-bound..bound)))
            .collect();
        self.add(name, shape, data)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![R::zero(); n])
    }

    pub fn get(&self, id: ParamId) -> &Param<R> {
        &self.params[id.0]
    }

    pub fn data(&self, id: ParamId) -> &[R] {
        &self.params[id.0].data
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<R>> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Mutable access to every tensor.
    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Param<R>> {
        self.generation += 1;
        self.params.iter_mut()
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [R] {
        self.generation += 1;
        &mut self.params[id.0].data
    }

    /// Identity of the current parameter values.
    pub fn stamp(&self) -> (u64, u64) {
        (self.id, self.generation)
    }

    pub fn zero_grads(&self) -> Gradients<R> {
        Gradients {
            grads: self.params.iter().map(|p| vec![R::zero(); p.len()]).collect(),
        }
    }

    /// Copies values from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &[Param<R>]) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.params.len(),
                other.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(other) {
            if dst.name != src.name || dst.shape != src.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match {} {:?}",
                    src.name, src.shape, dst.name, dst.shape
                )));
            }
            dst.data.clone_from(&src.data);
        }
        self.generation += 1;
        Ok(())
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| S::of(v.f64())).collect(),
                })
                .collect(),
            id: fresh_id(),
            generation: 0,
        }
    }

    pub fn params(&self) -> &[Param<R>] {
        &self.params
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<R: Real> {
    pub grads: Vec<Vec<R>>,
}

impl<R: Real> Gradients<R> {
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: R) {
        for g in &mut self.grads {
            for x in g {
                *x *= s;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.grads.iter().flatten().all(|v| *v == R::zero())
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|v| v.f64() * v.f64())
            .sum::<f64>()
            .sqrt()
    }
}
