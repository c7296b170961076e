use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{contract, Result};
use crate::numerics::NumArray;

/// Supplies the standard-normal draws used by reparameterized sampling.
pub trait NoiseSource {
    fn standard_normal(&mut self, shape: &[usize]) -> Result<NumArray>;
}

impl<T: NoiseSource + ?Sized> NoiseSource for &mut T {
    fn standard_normal(&mut self, shape: &[usize]) -> Result<NumArray> {
        (**self).standard_normal(shape)
    }
}

/// Fresh draws from an rng.
#[derive(Debug, Clone)]
pub struct RngNoise<R>(pub R);

impl<R: Rng> NoiseSource for RngNoise<R> {
    fn standard_normal(&mut self, shape: &[usize]) -> Result<NumArray> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.0.sample(StandardNormal)).collect();
        NumArray::new(shape.to_vec(), data)
    }
}

/// Records every draw of an inner source so it can be replayed.
#[derive(Debug)]
pub struct RecordingNoise<S> {
    inner: S,
    draws: Vec<NumArray>,
}

impl<S> RecordingNoise<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            draws: Vec::new(),
        }
    }

    pub fn into_frozen(self) -> FrozenNoise {
        FrozenNoise::new(self.draws)
    }
}

impl<S: NoiseSource> NoiseSource for RecordingNoise<S> {
    fn standard_normal(&mut self, shape: &[usize]) -> Result<NumArray> {
        let draw = self.inner.standard_normal(shape)?;
        self.draws.push(draw.clone());
        Ok(draw)
    }
}

/// Replays a fixed sequence of draws. Used to hold noise constant while
/// probing a stochastic objective with finite differences.
#[derive(Debug, Clone)]
pub struct FrozenNoise {
    draws: Vec<NumArray>,
    next: usize,
}

impl FrozenNoise {
    pub fn new(draws: Vec<NumArray>) -> Self {
        Self { draws, next: 0 }
    }

    pub fn rewind(&mut self) {
        self.next = 0;
    }

    pub fn draws(&self) -> &[NumArray] {
        &self.draws
    }

    pub fn draws_mut(&mut self) -> &mut [NumArray] {
        &mut self.draws
    }
}

impl NoiseSource for FrozenNoise {
    fn standard_normal(&mut self, shape: &[usize]) -> Result<NumArray> {
        let draw = self
            .draws
            .get(self.next)
            .ok_or_else(|| contract!("frozen noise exhausted after {} draws", self.next))?;
        if draw.shape() != shape {
            return Err(contract!(
                "frozen draw {} has shape {:?}, requested {shape:?}",
                self.next,
                draw.shape()
            ));
        }
        self.next += 1;
        Ok(draw.clone())
    }
}
