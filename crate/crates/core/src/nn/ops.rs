//! Slice-level versions of the primitive ops, for callers outside a graph.

use super::graph::{leaky, log_sum_exp};

pub fn leaky_relu(x: &[f64], slope: f64) -> Vec<f64> {
    x.iter().map(|&v| leaky(v, slope)).collect()
}

/// Derivative of [`leaky_relu`]; at exactly 0 the slope is taken as 1.
pub fn leaky_relu_grad(x: &[f64], slope: f64) -> Vec<f64> {
    x.iter().map(|&v| if v >= 0.0 { 1.0 } else { slope }).collect()
}

/// `-log softmax(scores)[positive]`, max-shifted.
pub fn softmax_nll(scores: &[f64], positive: usize) -> f64 {
    assert!(positive < scores.len(), "positive index out of range");
    log_sum_exp(scores) - scores[positive]
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let mut out = scores.to_vec();
    super::graph::softmax_in_place(&mut out);
    out
}
