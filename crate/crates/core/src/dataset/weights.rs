use crate::error::{Error, Result};

/// Per-class loss multipliers derived from train-split counts.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    pub counts: Vec<usize>,
}

impl ClassWeights {
    pub fn uniform(classes: usize) -> Self {
        ClassWeights { weights: vec![1.0; classes], counts: vec![1; classes] }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Classes below the mean count get `n_max / n̄`; the others get `n_max / n_i`.
pub fn compute_class_weights(counts: &[usize]) -> Result<ClassWeights> {
    if counts.is_empty() {
        return Err(Error::contract("class weights need at least one class"));
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::contract(format!("class {c} has no training samples")));
    }
    let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
    let max = *counts.iter().max().expect("non-empty") as f64;
    let weights = counts
        .iter()
        .map(|&n| {
            let n = n as f64;
            if n < mean {
                max / mean
            } else {
                max / n
            }
        })
        .collect();
    Ok(ClassWeights { weights, counts: counts.to_vec() })
}
