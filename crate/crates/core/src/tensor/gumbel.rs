use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GumbelMode {
    /// Relaxed sample used directly as weights.
    #[default]
    Soft,
    /// One-hot forward value with the relaxed sample's gradient.
    StraightThrough,
}

/// Gumbel(0, 1) noise, `-ln(-ln u)` with `u` uniform on `(0, 1)`.
pub fn gumbel_noise(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| -(-rng.open01().ln()).ln()).collect();
    Tensor::new(shape.to_vec(), data).expect("sized from shape")
}

/// Relaxed categorical sample per row of `logits [n, G]`, drawing fresh noise.
pub fn gumbel_softmax(
    g: &mut Graph,
    logits: Var,
    temperature: f64,
    mode: GumbelMode,
    rng: &mut Rng,
) -> Result<Var> {
    let noise = gumbel_noise(g.shape(logits), rng);
    gumbel_softmax_with_noise(g, logits, &noise, temperature, mode)
}

/// `softmax((logits + noise) / temperature)` over the last axis, with the
/// noise held fixed.
pub fn gumbel_softmax_with_noise(
    g: &mut Graph,
    logits: Var,
    noise: &Tensor,
    temperature: f64,
    mode: GumbelMode,
) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature must be > 0, got {temperature}")));
    }
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[1] < 2 {
        return Err(Error::invalid(format!(
            "gumbel softmax needs [n, G] logits with G >= 2, got {shape:?}"
        )));
    }
    if noise.shape() != shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "gumbel_softmax",
            lhs: shape,
            rhs: noise.shape().to_vec(),
        });
    }
    let n = g.input(noise.clone());
    let perturbed = g.add(logits, n)?;
    let scaled = g.mul_scalar(perturbed, 1.0 / temperature);
    let soft = g.softmax(scaled, 1)?;
    match mode {
        GumbelMode::Soft => Ok(soft),
        GumbelMode::StraightThrough => {
            let cols = shape[1];
            let sv = g.value(soft).data();
            let mut hard = vec![0.0; sv.len()];
            for (r, row) in sv.chunks_exact(cols).enumerate() {
                hard[r * cols + argmax(row)] = 1.0;
            }
            let hard = g.input(Tensor::new(shape, hard)?);
            let soft_const = g.detach(soft);
            let delta = g.sub(hard, soft_const)?;
            g.add(soft, delta)
        }
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_are_probability_vectors() {
        let mut rng = Rng::new(11);
        let mut g = Graph::new();
        let logits = g.leaf(gumbel_noise(&[6, 5], &mut rng));
        let y = gumbel_softmax(&mut g, logits, 0.7, GumbelMode::Soft, &mut rng).unwrap();
        for row in g.value(y).data().chunks_exact(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn low_temperature_approaches_one_hot() {
        let mut rng = Rng::new(5);
        let noise = gumbel_noise(&[4, 3], &mut rng);
        let logits = Tensor::new(vec![4, 3], (0..12).map(|i| (i % 5) as f64 * 0.3).collect()).unwrap();
        let mut g = Graph::new();
        let l = g.input(logits.clone());
        let y = gumbel_softmax_with_noise(&mut g, l, &noise, 1e-4, GumbelMode::Soft).unwrap();
        for r in 0..4 {
            let perturbed: Vec<f64> = (0..3)
                .map(|c| logits.get2(r, c) + noise.get2(r, c))
                .collect();
            let k = argmax(&perturbed);
            assert!((g.value(y).get2(r, k) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn straight_through_is_one_hot_with_soft_gradient() {
        let mut rng = Rng::new(9);
        let noise = gumbel_noise(&[2, 3], &mut rng);
        let mut g = Graph::new();
        let l = g.leaf(Tensor::new(vec![2, 3], vec![0.1, 0.5, -0.2, 1.0, 0.0, 0.3]).unwrap());
        let y = gumbel_softmax_with_noise(&mut g, l, &noise, 1.0, GumbelMode::StraightThrough).unwrap();
        for row in g.value(y).data().chunks_exact(3) {
            assert_eq!(row.iter().filter(|v| **v == 1.0).count(), 1);
        }
        let w = g.input(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let p = g.mul(y, w).unwrap();
        let loss = g.sum(p);
        g.backward(loss).unwrap();
        assert!(g.grad(l).unwrap().iter().any(|v| v.abs() > 1e-6));
    }

    #[test]
    fn nonpositive_temperature_rejected() {
        let mut g = Graph::new();
        let l = g.input(Tensor::zeros(&[1, 2]));
        let noise = Tensor::zeros(&[1, 2]);
        assert!(gumbel_softmax_with_noise(&mut g, l, &noise, 0.0, GumbelMode::Soft).is_err());
        assert!(gumbel_softmax_with_noise(&mut g, l, &noise, -1.0, GumbelMode::Soft).is_err());
    }
}
