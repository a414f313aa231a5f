//! Small CPU network engine: NHWC activations, im2col convolutions on top of the ndarray
//! GEMM, and hand-written backward passes.
//!
//! Layers never own their weights. They hold [`ParamId`]s into a [`ParamStore`], which
//! keeps values and accumulated gradients side by side so the optimizer and the
//! checkpoint code can treat every model uniformly.

mod adam;
mod layers;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{ArrayD, IxDyn, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand_distr::{Distribution, StandardNormal};

pub use adam::{Adam, AdamConfig};
pub use layers::{
    concat_channels, depth_to_space2, sigmoid, sigmoid_backward, silu, silu_backward, split_channels, space_to_depth2,
    upsample_nearest2, upsample_nearest2_backward, Conv2d, ConvCache, Linear, LinearCache,
    timestep_embedding, ResBlock, ResBlockCache,
};

use crate::rng::Rng;

/// Scalar type the engine runs on. `f32` for training, `f64` for gradient checks.
pub trait Elem:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Elem for f32 {}
impl Elem for f64 {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<F> {
    pub name: String,
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    entries: Vec<ParamEntry<F>>,
}

impl<F: Elem> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<F>) -> ParamId {
        let grad = ArrayD::zeros(value.raw_dim());
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.entries.len() - 1)
    }

    /// He-normal initialised tensor with the given fan-in.
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        gain: f64,
        rng: &mut Rng,
    ) -> ParamId {
        let std = gain * (2.0 / fan_in as f64).sqrt();
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || {
            let z: f64 = StandardNormal.sample(rng);
            F::of(z * std)
        });
        self.add(name, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, ArrayD::zeros(IxDyn(shape)))
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<F> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &ArrayD<F> {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.entries[id.0].grad
    }

    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&ArrayD<F>, &mut ArrayD<F>) {
        let e = &mut self.entries[id.0];
        (&e.value, &mut e.grad)
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<F>] {
        &mut self.entries
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(F::zero());
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// All parameter values flattened in registration order.
    pub fn flat_values(&self) -> Vec<F> {
        self.entries
            .iter()
            .flat_map(|e| e.value.iter().cloned())
            .collect()
    }

    pub fn flat_grads(&self) -> Vec<F> {
        self.entries
            .iter()
            .flat_map(|e| e.grad.iter().cloned())
            .collect()
    }

    pub fn set_flat_values(&mut self, values: &[F]) {
        assert_eq!(values.len(), self.num_scalars(), "flat parameter length");
        let mut off = 0;
        for e in &mut self.entries {
            for v in e.value.iter_mut() {
                *v = values[off];
                off += 1;
            }
        }
    }

    /// Replaces all values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<F>) -> crate::Result<()> {
        if other.entries.len() != self.entries.len() {
            return Err(crate::Error::param(format!(
                "parameter count mismatch: {} vs {}",
                other.entries.len(),
                self.entries.len()
            )));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(crate::Error::param(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                )));
            }
            dst.value.assign(&src.value);
        }
        Ok(())
    }
}

pub(crate) fn param_store_to_bytes(store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(store.entries.len() as u32).to_le_bytes());
    for e in &store.entries {
        let name = e.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(e.value.ndim() as u32).to_le_bytes());
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in e.value.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub(crate) fn param_store_from_bytes(bytes: &[u8]) -> Option<(ParamStore<f32>, usize)> {
    struct Cursor<'a>(&'a [u8], usize);
    impl Cursor<'_> {
        fn take(&mut self, n: usize) -> Option<&[u8]> {
            let s = self.0.get(self.1..self.1 + n)?;
            self.1 += n;
            Some(s)
        }
        fn u32(&mut self) -> Option<u32> {
            Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
        }
        fn u64(&mut self) -> Option<u64> {
            Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
        }
    }
    let mut c = Cursor(bytes, 0);
    let n = c.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec()).ok()?;
        let ndim = c.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Option<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let raw = c.take(count * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        store.add(name, ArrayD::from_shape_vec(IxDyn(&shape), data).ok()?);
    }
    Some((store, c.1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn store_bytes_round_trip() {
        let mut rng = rng_from_seed(3);
        let mut s = ParamStore::<f32>::new();
        s.add_normal("a.w", &[3, 4], 3, 1.0, &mut rng);
        s.add_zeros("a.b", &[4]);
        let bytes = param_store_to_bytes(&s);
        let (back, used) = param_store_from_bytes(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back.flat_values(), s.flat_values());
        assert_eq!(back.entries()[0].name, "a.w");
        assert!(param_store_from_bytes(&bytes[..bytes.len() - 1]).is_none());
    }
}
