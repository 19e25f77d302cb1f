use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Tape, Tensor, Var};

impl<S: Real> Tape<S> {
    /// `mean_i w[y_i] · (−log softmax(logits_i)[y_i])` for `logits [B, C]`,
    /// stabilized by subtracting each row's maximum.
    pub fn weighted_cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[1] != weights.len() {
            return Err(Error::shape(format!(
                "cross entropy: logits {s:?}, {} labels, {} class weights",
                labels.len(),
                weights.len()
            )));
        }
        let (b, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::contract(format!("label {bad} out of range for {c} classes")));
        }
        let z = self.value(logits).data();
        let mut grad = vec![0.0f64; b * c];
        let mut loss = 0.0f64;
        for (i, &y) in labels.iter().enumerate() {
            let row = &z[i * c..(i + 1) * c];
            let mx = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v.f64() - mx).exp()).sum();
            let lse = mx + sum.ln();
            let w = weights[y] / b as f64;
            loss += w * (lse - row[y].f64());
            for (j, g) in grad[i * c..(i + 1) * c].iter_mut().enumerate() {
                *g = w * ((row[j].f64() - lse).exp() - if j == y { 1.0 } else { 0.0 });
            }
        }
        Ok(self.push(
            Tensor::scalar(S::lit(loss)),
            &[logits],
            Box::new(move |ctx| {
                let g0 = ctx.grad[0].f64();
                vec![Some(grad.iter().map(|&g| S::lit(g * g0)).collect())]
            }),
        ))
    }
}
