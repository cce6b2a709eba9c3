//! Non-learned point-cloud kernels: sampling, grouping and set distances.

pub mod assignment;
mod distance;

pub use distance::{chamfer, chamfer_value, emd, emd_value, mmd, ChamferForm, Matching, MmdMetric};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

pub type Point = [f64; 3];

pub(crate) fn sq_dist(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub label: Option<usize>,
    pub id: String,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        Self::with_meta(points, None, String::new())
    }

    pub fn with_meta(points: Vec<Point>, label: Option<usize>, id: String) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("point cloud needs at least one point"));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points, label, id })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    /// Centers on the centroid and scales the farthest point to unit norm.
    pub fn normalize(&mut self) {
        let c = self.centroid();
        for p in &mut self.points {
            for k in 0..3 {
                p[k] -= c[k];
            }
        }
        let r = self
            .points
            .iter()
            .map(|p| sq_dist(p, &[0.0; 3]))
            .fold(0.0, f64::max)
            .sqrt();
        if r > 0.0 {
            for p in &mut self.points {
                for v in p.iter_mut() {
                    *v /= r;
                }
            }
        }
    }

    pub fn normalized(&self) -> Self {
        let mut c = self.clone();
        c.normalize();
        c
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_points(&self.points)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CenterSource {
    Fps,
    Dcs,
    Composition,
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CenterSet {
    pub centers: Vec<Point>,
    pub source: CenterSource,
}

/// Farthest point sampling: starts at `seed_index`, then repeatedly takes the
/// point farthest from everything selected so far (lowest index on ties).
pub fn fps(points: &[Point], k: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("fps needs 1 <= k <= N, got k={k}, N={n}")));
    }
    if seed_index >= n {
        return Err(Error::invalid(format!("fps seed index {seed_index} >= N={n}")));
    }
    let mut selected = Vec::with_capacity(k);
    selected.push(seed_index);
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[seed_index])).collect();
    while selected.len() < k {
        let mut best = 0;
        for i in 1..n {
            if nearest[i] > nearest[best] {
                best = i;
            }
        }
        selected.push(best);
        for (i, p) in points.iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(p, &points[best]));
        }
    }
    Ok(selected)
}

/// `Ĉ_j = Σ_i p_i w_ij`, divided by `Σ_i w_ij` when `normalize_columns`.
/// `points [N, 3]`, `weights [N, G]` → `[G, 3]`.
pub fn weighted_centers(g: &mut Graph, points: Var, weights: Var, normalize_columns: bool) -> Result<Var> {
    let (sp, sw) = (g.shape(points).to_vec(), g.shape(weights).to_vec());
    if sp.len() != 2 || sw.len() != 2 || sp[0] != sw[0] || sp[1] != 3 {
        return Err(Error::ShapeMismatch {
            op: "weighted_centers",
            lhs: sp,
            rhs: sw,
        });
    }
    let wt = g.transpose(weights)?;
    let sums = g.matmul(wt, points)?;
    if !normalize_columns {
        return Ok(sums);
    }
    let mass = g.sum_axis(weights, 0)?;
    if let Some(j) = g.value(mass).data().iter().position(|&m| m <= 0.0) {
        return Err(Error::ZeroColumnMass(j));
    }
    let mass = g.reshape(mass, &[sw[1], 1])?;
    g.div(sums, mass)
}

/// Fixed-size neighborhoods around each center.
#[derive(Clone, Debug, PartialEq)]
pub struct Patches {
    /// `G * k` point indices, patch-major, nearest first.
    pub indices: Vec<usize>,
    pub k: usize,
    /// `[G, k, 3]` coordinates relative to their center.
    pub relative: Tensor,
}

impl Patches {
    pub fn count(&self) -> usize {
        self.indices.len() / self.k
    }
}

/// The `k` nearest points to each center (ties by lowest index), in order.
pub fn knn_indices(points: &[Point], centers: &[Point], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > points.len() {
        return Err(Error::invalid(format!(
            "knn needs 1 <= k <= N, got k={k}, N={}",
            points.len()
        )));
    }
    let mut out = Vec::with_capacity(centers.len() * k);
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(points.len());
    for c in centers {
        order.clear();
        order.extend(points.iter().enumerate().map(|(i, p)| (sq_dist(p, c), i)));
        order.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).expect("finite"));
        let head = &mut order[..k];
        head.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        out.extend(head.iter().map(|&(_, i)| i));
    }
    Ok(out)
}

pub fn knn_group(cloud: &PointCloud, centers: &CenterSet, k: usize) -> Result<Patches> {
    let indices = knn_indices(&cloud.points, &centers.centers, k)?;
    let mut rel = Vec::with_capacity(indices.len() * 3);
    for (slot, &i) in indices.iter().enumerate() {
        let c = &centers.centers[slot / k];
        let p = &cloud.points[i];
        rel.extend([p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
    }
    let relative = Tensor::new(vec![centers.centers.len(), k, 3], rel)?;
    Ok(Patches { indices, k, relative })
}

/// Differentiable patch coordinates `points[idx] - center` as `[G, k, 3]`.
pub fn relative_patches(g: &mut Graph, points: Var, centers: Var, indices: &[usize], k: usize) -> Result<Var> {
    let groups = g.shape(centers)[0];
    if indices.len() != groups * k {
        return Err(Error::invalid(format!(
            "{} patch indices for {groups} centers of size {k}",
            indices.len()
        )));
    }
    let gathered = g.gather(points, indices)?;
    let gathered = g.reshape(gathered, &[groups, k, 3])?;
    let c = g.reshape(centers, &[groups, 1, 3])?;
    g.sub(gathered, c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SphereMethod {
    #[default]
    Fibonacci,
    UniformRandom,
}

/// `n` points on the unit sphere. The Fibonacci lattice ignores `seed`.
pub fn sphere_samples(n: usize, method: SphereMethod, seed: u64) -> Result<Vec<Point>> {
    if n == 0 {
        return Err(Error::invalid("sphere sample count must be >= 1"));
    }
    let golden_angle = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let mut rng = Rng::new(seed);
    let raw = (0..n).map(|i| match method {
        SphereMethod::Fibonacci => {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden_angle * i as f64;
            [r * phi.cos(), r * phi.sin(), z]
        }
        SphereMethod::UniformRandom => loop {
            let v = [rng.normal(), rng.normal(), rng.normal()];
            if sq_dist(&v, &[0.0; 3]) > 1e-12 {
                break v;
            }
        },
    });
    Ok(raw
        .map(|p| {
            let r = sq_dist(&p, &[0.0; 3]).sqrt();
            p.map(|v| v / r)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: &[Point]) -> PointCloud {
        PointCloud::new(points.to_vec()).unwrap()
    }

    #[test]
    fn normalize_centers_and_scales() {
        let mut c = cloud(&[[1.0, 2.0, 3.0], [3.0, 2.0, 3.0], [2.0, 5.0, 3.0]]);
        c.normalize();
        let m = c.centroid();
        assert!(m.iter().all(|v| v.abs() < 1e-9));
        let r = c.points.iter().map(|p| sq_dist(p, &[0.0; 3]).sqrt()).fold(0.0, f64::max);
        assert!((r - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(PointCloud::new(vec![]).is_err());
        assert!(PointCloud::new(vec![[0.0, f64::NAN, 0.0]]).is_err());
    }

    #[test]
    fn fps_small_cases() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [10.0, 10.0, 10.0]];
        assert_eq!(fps(&pts, 1, 2).unwrap(), vec![2]);
        assert_eq!(fps(&pts, 2, 0).unwrap(), vec![0, 3]);
        let mut all = fps(&pts, 4, 1).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(fps(&pts, 5, 0).is_err());
    }

    #[test]
    fn weighted_centers_hard_and_uniform() {
        let (a, b, c) = ([0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.0, 4.0]);
        let mut g = Graph::new();
        let p = g.input(Tensor::from_points(&[a, b, c]));
        let w = g.input(Tensor::new(vec![3, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap());
        let centers = weighted_centers(&mut g, p, w, true).unwrap();
        assert_eq!(g.value(centers).data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 4.0]);

        let u = g.input(Tensor::full(&[3, 4], 0.25));
        let centers = weighted_centers(&mut g, p, u, true).unwrap();
        for row in g.value(centers).data().chunks_exact(3) {
            let expect = [2.0 / 3.0, 0.0, 4.0 / 3.0];
            assert!(row.iter().zip(expect).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    #[test]
    fn weighted_centers_soft_map_by_hand() {
        // w = [[0.5,0.5],[0.25,0.75],[1,0]]
        let pts = [[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]];
        let mut g = Graph::new();
        let p = g.input(Tensor::from_points(&pts));
        let w = g.input(Tensor::new(vec![3, 2], vec![0.5, 0.5, 0.25, 0.75, 1.0, 0.0]).unwrap());
        let c = weighted_centers(&mut g, p, w, true).unwrap();
        // column 0 mass 1.75: (0.5, 0.5, 3) / 1.75 ; column 1 mass 1.25: (0.5, 1.5, 0) / 1.25
        let expect = [0.5 / 1.75, 0.5 / 1.75, 3.0 / 1.75, 0.4, 1.2, 0.0];
        for (x, y) in g.value(c).data().iter().zip(expect) {
            assert!((x - y).abs() < 1e-12);
        }
        let raw = weighted_centers(&mut g, p, w, false).unwrap();
        let expect = [0.5, 0.5, 3.0, 0.5, 1.5, 0.0];
        for (x, y) in g.value(raw).data().iter().zip(expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_column_names_the_column() {
        let mut g = Graph::new();
        let p = g.input(Tensor::from_points(&[[0.0; 3], [1.0; 3]]));
        let w = g.input(Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.5, 0.0, 0.5]).unwrap());
        assert!(matches!(weighted_centers(&mut g, p, w, true), Err(Error::ZeroColumnMass(1))));
        assert!(weighted_centers(&mut g, p, w, false).is_ok());
    }

    #[test]
    fn knn_group_self_centers_are_zero() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 3.0, 0.0]]);
        let centers = CenterSet {
            centers: c.points.clone(),
            source: CenterSource::Fps,
        };
        let p = knn_group(&c, &centers, 1).unwrap();
        assert_eq!(p.indices, vec![0, 1, 2]);
        assert!(p.relative.data().iter().all(|v| *v == 0.0));
        assert!(knn_group(&c, &centers, 4).is_err());
    }

    #[test]
    fn knn_group_single_nearest() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let centers = CenterSet {
            centers: vec![[0.9, 0.1, 0.0]],
            source: CenterSource::Dcs,
        };
        let p = knn_group(&c, &centers, 1).unwrap();
        assert_eq!(p.indices, vec![1]);
        let r = p.relative.data();
        assert!((r[0] - 0.1).abs() < 1e-15 && (r[1] + 0.1).abs() < 1e-15 && r[2] == 0.0);
    }

    #[test]
    fn sphere_samples_unit_norm_and_deterministic() {
        for method in [SphereMethod::Fibonacci, SphereMethod::UniformRandom] {
            for p in sphere_samples(100, method, 4).unwrap() {
                assert!((sq_dist(&p, &[0.0; 3]).sqrt() - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(
            sphere_samples(64, SphereMethod::Fibonacci, 1).unwrap(),
            sphere_samples(64, SphereMethod::Fibonacci, 2).unwrap()
        );
        assert!(sphere_samples(0, SphereMethod::Fibonacci, 0).is_err());
    }

    #[test]
    fn fibonacci_256_is_well_separated() {
        let s = sphere_samples(256, SphereMethod::Fibonacci, 0).unwrap();
        let mut min_angle = f64::INFINITY;
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                let dot: f64 = (0..3).map(|k| s[i][k] * s[j][k]).sum();
                min_angle = min_angle.min(dot.clamp(-1.0, 1.0).acos());
            }
        }
        assert!(min_angle > 0.1, "min angle {min_angle}");
    }
}
