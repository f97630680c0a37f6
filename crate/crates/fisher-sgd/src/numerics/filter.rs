use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Third-order cascaded exponential moving average of a vector stream.
///
/// Each stage is an EMA of the previous one with the same constant `c`.
/// All stages are initialized to the first observed vector so that the
/// filtered norm does not exhibit a spurious rise from a zero start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadedFilterState {
    c: f64,
    m1: Vec<f64>,
    m2: Vec<f64>,
    m3: Vec<f64>,
    update_count: u64,
}

impl CascadedFilterState {
    /// `c` is the filter constant in (0, 1].
    pub fn new(dim: usize, c: f64) -> Self {
        assert!(c > 0.0 && c <= 1.0, "filter constant must be in (0,1]");
        CascadedFilterState {
            c,
            m1: vec![0.0; dim],
            m2: vec![0.0; dim],
            m3: vec![0.0; dim],
            update_count: 0,
        }
    }

    pub fn update(&self, v: &[f64]) -> Result<CascadedFilterState> {
        if v.len() != self.m1.len() {
            return Err(Error::DimensionMismatch {
                expected: self.m1.len(),
                got: v.len(),
            });
        }
        let mut next = self.clone();
        if self.update_count == 0 {
            next.m1.copy_from_slice(v);
            next.m2.copy_from_slice(v);
            next.m3.copy_from_slice(v);
        } else {
            let c = self.c;
            for i in 0..v.len() {
                next.m1[i] = (1.0 - c) * self.m1[i] + c * v[i];
                next.m2[i] = (1.0 - c) * self.m2[i] + c * next.m1[i];
                next.m3[i] = (1.0 - c) * self.m3[i] + c * next.m2[i];
            }
        }
        next.update_count += 1;
        Ok(next)
    }

    /// Euclidean norm of the final stage.
    pub fn output_norm(&self) -> f64 {
        self.m3.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn update_count(&self) -> u64 {
        self.update_count
    }
}
