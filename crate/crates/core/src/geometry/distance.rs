use serde::{Deserialize, Serialize};

use super::assignment;
use super::{sq_dist, Point};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChamferForm {
    /// Unsquared nearest-neighbor distances.
    L1,
    /// Squared nearest-neighbor distances.
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MmdMetric {
    Chamfer,
    Emd,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    /// `permutation[i]` is the target index matched to source point `i`.
    pub permutation: Vec<usize>,
    pub cost: f64,
}

fn check_rows(g: &Graph, a: Var, b: Var, op: &'static str) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    let ok = match (sa.len(), sb.len()) {
        (2, 2) => sa[1] == sb[1],
        (3, 3) => sa[0] == sb[0] && sa[2] == sb[2],
        _ => false,
    };
    if !ok {
        return Err(Error::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    let rows = |s: &[usize]| s[s.len() - 2];
    if rows(sa) == 0 || rows(sb) == 0 {
        return Err(Error::invalid(format!("{op} on an empty point set")));
    }
    Ok(())
}

/// Chamfer distance between `[n, d]` and `[m, d]` sets, or batched
/// `[B, n, d]` and `[B, m, d]` (averaged over the batch).
pub fn chamfer(g: &mut Graph, p: Var, q: Var, form: ChamferForm) -> Result<Var> {
    check_rows(g, p, q, "chamfer")?;
    let rank = g.shape(p).len();
    let d = g.pairwise_sq_dist(p, q)?;
    let mut to_q = g.min_axis(d, rank - 1)?;
    let mut to_p = g.min_axis(d, rank - 2)?;
    if form == ChamferForm::L1 {
        to_q = g.sqrt(to_q);
        to_p = g.sqrt(to_p);
    }
    let a = g.mean(to_q);
    let b = g.mean(to_p);
    g.add(a, b)
}

/// Plain-value chamfer distance.
pub fn chamfer_value(p: &[Point], q: &[Point], form: ChamferForm) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::invalid("chamfer on an empty point set"));
    }
    let nearest = |x: &Point, set: &[Point]| {
        let m = set.iter().map(|y| sq_dist(x, y)).fold(f64::INFINITY, f64::min);
        match form {
            ChamferForm::L2 => m,
            ChamferForm::L1 => m.sqrt(),
        }
    };
    let a: f64 = p.iter().map(|x| nearest(x, q)).sum::<f64>() / p.len() as f64;
    let b: f64 = q.iter().map(|y| nearest(y, p)).sum::<f64>() / q.len() as f64;
    Ok(a + b)
}

/// Optimal bijection between equal-size sets under Euclidean cost.
/// `warm` carries assignment potentials between calls on similar inputs.
pub fn emd_value(p: &[Point], q: &[Point], warm: Option<&mut Vec<f64>>) -> Result<Matching> {
    if p.len() != q.len() {
        return Err(Error::invalid(format!(
            "emd needs equal-size sets, got {} and {}",
            p.len(),
            q.len()
        )));
    }
    if p.is_empty() {
        return Err(Error::invalid("emd on an empty point set"));
    }
    let n = p.len();
    let mut cost = Vec::with_capacity(n * n);
    for a in p {
        cost.extend(q.iter().map(|b| sq_dist(a, b).sqrt()));
    }
    let sol = match warm {
        Some(w) => {
            let sol = assignment::solve(&cost, n, Some(w.as_slice()));
            w.clone_from(&sol.col_potential);
            sol
        }
        None => assignment::solve(&cost, n, None),
    };
    let total = sol
        .row_to_col
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .sum();
    Ok(Matching {
        permutation: sol.row_to_col,
        cost: total,
    })
}

/// Earth mover's distance as a differentiable sum of matched distances; the
/// matching itself is held fixed for the gradient.
pub fn emd(g: &mut Graph, p: Var, q: Var, warm: Option<&mut Vec<f64>>) -> Result<(Var, Matching)> {
    check_rows(g, p, q, "emd")?;
    if g.shape(p).len() != 2 || g.shape(p)[1] != 3 {
        return Err(Error::ShapeMismatch {
            op: "emd",
            lhs: g.shape(p).to_vec(),
            rhs: g.shape(q).to_vec(),
        });
    }
    let matching = emd_value(&g.value(p).to_points(), &g.value(q).to_points(), warm)?;
    let matched = g.gather(q, &matching.permutation)?;
    let diff = g.sub(p, matched)?;
    let sq = g.square(diff)?;
    let sq = g.sum_axis(sq, 1)?;
    let dist = g.sqrt(sq);
    Ok((g.sum(dist), matching))
}

/// `(1/|reference|) Σ_X min_Y D(X, Y)` over `Y` in `generated`.
pub fn mmd(generated: &[Vec<Point>], reference: &[Vec<Point>], metric: MmdMetric) -> Result<f64> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::invalid("mmd needs non-empty cloud sets"));
    }
    let mut total = 0.0;
    for x in reference {
        let mut best = f64::INFINITY;
        for y in generated {
            let d = match metric {
                MmdMetric::Chamfer => chamfer_value(x, y, ChamferForm::L2)?,
                MmdMetric::Emd => emd_value(x, y, None)?.cost,
            };
            best = best.min(d);
        }
        total += best;
    }
    Ok(total / reference.len() as f64)
}
