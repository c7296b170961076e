use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::numerics::NumArray;

/// Named weight matrices and bias vectors, kept in insertion order so the
/// flattened layout is stable.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    names: Vec<String>,
    arrays: Vec<NumArray>,
    index: BTreeMap<String, usize>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: NumArray) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(contract!("duplicate parameter {name}"));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.arrays.push(value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NumArray> {
        self.index.get(name).map(|&i| &self.arrays[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut NumArray> {
        self.index.get(name).map(|&i| &mut self.arrays[i])
    }

    pub(crate) fn position(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| contract!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &NumArray)> {
        self.names.iter().map(String::as_str).zip(&self.arrays)
    }

    pub(crate) fn arrays(&self) -> &[NumArray] {
        &self.arrays
    }

    pub(crate) fn arrays_mut(&mut self) -> &mut [NumArray] {
        &mut self.arrays
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Number of named entries.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar values.
    pub fn num_values(&self) -> usize {
        self.arrays.iter().map(NumArray::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for a in &self.arrays {
            out.extend_from_slice(a.data());
        }
        out
    }

    /// Overwrites every entry from a flat vector laid out like [`Self::flatten`].
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_values() {
            return Err(contract!(
                "flat vector has {} values, parameters need {}",
                flat.len(),
                self.num_values()
            ));
        }
        let mut offset = 0;
        for a in &mut self.arrays {
            let n = a.len();
            a.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Name of the first entry holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.iter().find(|(_, a)| !a.all_finite()).map(|(n, _)| n)
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite() {
            Some(name) => Err(Error::Numeric(alloc::format!(
                "parameter {name} has non-finite entries"
            ))),
            None => Ok(()),
        }
    }

    /// Sum of squared entries over all parameters.
    pub fn squared_norm(&self) -> f64 {
        self.arrays
            .iter()
            .flat_map(|a| a.data())
            .map(|v| v * v)
            .sum()
    }
}
