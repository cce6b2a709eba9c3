use serde::{Deserialize, Serialize};

use super::SamplerConfig;
use crate::error::{Error, Result};
use crate::geometry::{chamfer, knn_group, weighted_centers, CenterSet, CenterSource, ChamferForm, Patches, Point, PointCloud};
use crate::rng::Rng;
use crate::tensor::{gumbel_noise, gumbel_softmax_with_noise, BatchNorm, Graph, Linear, Mode, ParamStore, Tensor, Var};

/// Row-stochastic `[N, G]` soft assignment of points to groups.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    pub matrix: Tensor,
    pub temperature: f64,
    /// True for a Gumbel-relaxed sample, false for the plain softmax.
    pub relaxed: bool,
}

impl ProbabilityMap {
    pub fn new(matrix: Tensor, temperature: f64, relaxed: bool) -> Result<Self> {
        if matrix.rank() != 2 {
            return Err(Error::invalid(format!("probability map must be [N, G], got {:?}", matrix.shape())));
        }
        let cols = matrix.shape()[1];
        for (i, row) in matrix.data().chunks_exact(cols).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid(format!("probability map row {i} is not a distribution")));
            }
        }
        Ok(Self {
            matrix,
            temperature,
            relaxed,
        })
    }

    pub fn groups(&self) -> usize {
        self.matrix.shape()[1]
    }

    /// Per-row `(argmax, max)`; ties go to the lowest group.
    pub fn argmax(&self) -> Vec<(usize, f64)> {
        self.matrix
            .data()
            .chunks_exact(self.groups())
            .map(|row| {
                let j = crate::tensor::argmax_row(row);
                (j, row[j])
            })
            .collect()
    }
}

/// Per-point MLP with a row softmax: `3 -> hidden ... -> G`, batch norm and
/// ReLU between layers.
#[derive(Clone, Debug)]
pub struct CompositionNet {
    pub hidden: Vec<(Linear, BatchNorm)>,
    pub out: Linear,
    pub groups: usize,
}

impl CompositionNet {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &SamplerConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut hidden = Vec::new();
        let mut width = 3;
        for layer in 0..cfg.depth - 1 {
            let lin = Linear::new(store, &format!("{name}.fc{layer}"), width, cfg.hidden, rng)?;
            let bn = BatchNorm::new(store, &format!("{name}.bn{layer}"), cfg.hidden)?;
            hidden.push((lin, bn));
            width = cfg.hidden;
        }
        let out = Linear::new(store, &format!("{name}.out"), width, cfg.groups, rng)?;
        Ok(Self {
            hidden,
            out,
            groups: cfg.groups,
        })
    }

    /// Unnormalized group scores `[n, G]` for points `[n, 3]`.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != 3 {
            return Err(Error::ShapeMismatch {
                op: "composition_net",
                lhs: s.to_vec(),
                rhs: vec![s.first().copied().unwrap_or(0), 3],
            });
        }
        let mut h = x;
        for (lin, bn) in &self.hidden {
            h = lin.forward(g, store, h)?;
            h = bn.forward(g, store, h, mode)?;
            h = g.relu(h);
        }
        self.out.forward(g, store, h)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let l = self.logits(g, store, x, mode)?;
        g.softmax(l, 1)
    }

    pub fn probability_map(&self, store: &ParamStore, points: &[Point], mode: Mode) -> Result<ProbabilityMap> {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_points(points));
        let q = self.forward(&mut g, store, x, mode)?;
        ProbabilityMap::new(g.value(q).clone(), 1.0, false)
    }
}

/// Chamfer ℓ2 between the composition points `weighted_centers(decoded, q)`
/// and the cloud.
pub fn stage2_loss(g: &mut Graph, cloud: Var, decoded: Var, q: Var, normalize_columns: bool) -> Result<Var> {
    let centers = weighted_centers(g, decoded, q, normalize_columns)?;
    chamfer(g, centers, cloud, ChamferForm::L2)
}

/// Graph handles produced by one differentiable sampling pass.
#[derive(Clone, Copy, Debug)]
pub struct DcsVars {
    pub logits: Var,
    /// Relaxed (or plain, when noise-free) probability map `[N, G]`.
    pub weights: Var,
    pub centers: Var,
}

/// Runs the composition net once over all `clouds` (shared batch
/// statistics), then samples weights per cloud and takes weighted centers.
///
/// `noise` holds one Gumbel tensor per cloud; `None` uses the plain
/// temperature softmax.
pub fn dcs_forward(
    g: &mut Graph,
    store: &ParamStore,
    net: &CompositionNet,
    cfg: &SamplerConfig,
    clouds: &[Var],
    temperature: f64,
    noise: Option<&[Tensor]>,
    mode: Mode,
) -> Result<Vec<DcsVars>> {
    if clouds.is_empty() {
        return Err(Error::invalid("dcs sampling needs at least one cloud"));
    }
    if let Some(n) = noise {
        if n.len() != clouds.len() {
            return Err(Error::invalid(format!("{} noise tensors for {} clouds", n.len(), clouds.len())));
        }
    }
    let sizes: Vec<usize> = clouds.iter().map(|&c| g.shape(c)[0]).collect();
    let all = if clouds.len() == 1 { clouds[0] } else { g.concat(clouds, 0)? };
    let logits = net.logits(g, store, all, mode)?;
    let mut out = Vec::with_capacity(clouds.len());
    let mut start = 0;
    for (b, (&cloud, &n)) in clouds.iter().zip(&sizes).enumerate() {
        let l = if clouds.len() == 1 { logits } else { g.narrow(logits, 0, start, n)? };
        start += n;
        let weights = match noise {
            Some(noise) => gumbel_softmax_with_noise(g, l, &noise[b], temperature, cfg.gumbel_mode)?,
            None => {
                if !(temperature > 0.0) {
                    return Err(Error::invalid(format!("temperature must be > 0, got {temperature}")));
                }
                let scaled = g.mul_scalar(l, 1.0 / temperature);
                g.softmax(scaled, 1)?
            }
        };
        let centers = weighted_centers(g, cloud, weights, cfg.normalize_columns)?;
        out.push(DcsVars {
            logits: l,
            weights,
            centers,
        });
    }
    Ok(out)
}

/// Centers, probability map and patches for one cloud.
#[derive(Clone, Debug)]
pub struct DcsSample {
    pub centers: CenterSet,
    pub probabilities: ProbabilityMap,
    pub patches: Patches,
}

/// Value-level sampling with the composition net in eval mode. `noise_seed`
/// selects a Gumbel-relaxed sample; `None` gives the deterministic softmax.
pub fn dcs_sample(
    store: &ParamStore,
    net: &CompositionNet,
    cfg: &SamplerConfig,
    cloud: &PointCloud,
    noise_seed: Option<u64>,
) -> Result<DcsSample> {
    if cloud.len() < cfg.group_size {
        return Err(Error::invalid(format!(
            "cloud has {} points, fewer than the group size {}",
            cloud.len(),
            cfg.group_size
        )));
    }
    let mut g = Graph::new();
    let x = g.input(cloud.to_tensor());
    let noise = noise_seed.map(|s| vec![gumbel_noise(&[cloud.len(), cfg.groups], &mut Rng::new(s))]);
    let v = dcs_forward(&mut g, store, net, cfg, &[x], cfg.temperature, noise.as_deref(), Mode::Eval)?[0];
    let centers = CenterSet {
        centers: g.value(v.centers).to_points(),
        source: CenterSource::Dcs,
    };
    let patches = knn_group(cloud, &centers, cfg.group_size)?;
    Ok(DcsSample {
        centers,
        probabilities: ProbabilityMap::new(g.value(v.weights).clone(), cfg.temperature, noise_seed.is_some())?,
        patches,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GlobalLoss {
    L1,
    #[default]
    L2,
    L1L2,
    /// Batch-level: mean over clouds of the smallest ℓ2 chamfer to any
    /// center set in the batch.
    Mmd,
}

/// Center reconstruction loss averaged over a batch of `(centers, cloud)`
/// pairs.
pub fn global_recon_loss(g: &mut Graph, centers: &[Var], clouds: &[Var], mode: GlobalLoss) -> Result<Var> {
    if centers.is_empty() || centers.len() != clouds.len() {
        return Err(Error::invalid(format!(
            "{} center sets for {} clouds",
            centers.len(),
            clouds.len()
        )));
    }
    let b = clouds.len() as f64;
    let mut terms = Vec::with_capacity(clouds.len());
    for (i, &cloud) in clouds.iter().enumerate() {
        let t = match mode {
            GlobalLoss::L1 => chamfer(g, centers[i], cloud, ChamferForm::L1)?,
            GlobalLoss::L2 => chamfer(g, centers[i], cloud, ChamferForm::L2)?,
            GlobalLoss::L1L2 => {
                let a = chamfer(g, centers[i], cloud, ChamferForm::L1)?;
                let c = chamfer(g, centers[i], cloud, ChamferForm::L2)?;
                g.add(a, c)?
            }
            GlobalLoss::Mmd => {
                let mut ds = Vec::with_capacity(centers.len());
                for &c in centers {
                    let d = chamfer(g, c, cloud, ChamferForm::L2)?;
                    ds.push(g.reshape(d, &[1])?);
                }
                let ds = g.concat(&ds, 0)?;
                g.min_axis(ds, 0)?
            }
        };
        terms.push(g.reshape(t, &[1])?);
    }
    let all = g.concat(&terms, 0)?;
    let s = g.sum(all);
    Ok(g.mul_scalar(s, 1.0 / b))
}

/// KL divergence of the column-mass distribution `(1/N) Σ_i q_ij` from the
/// uniform distribution over groups.
pub fn uniform_prior_penalty(g: &mut Graph, q: Var) -> Result<Var> {
    let s = g.shape(q).to_vec();
    if s.len() != 2 {
        return Err(Error::invalid(format!("probability map must be [N, G], got {s:?}")));
    }
    let mass = g.mean_axis(q, 0)?;
    let scaled = g.mul_scalar(mass, s[1] as f64);
    // the offset keeps 0 * ln 0 at 0 instead of NaN
    let scaled = g.add_scalar(scaled, 1e-300);
    let log = g.log(scaled);
    let t = g.mul(mass, log)?;
    Ok(g.sum(t))
}

/// One line per point: `x,y,z,argmax,max,p_0,...,p_{G-1}`.
pub fn heatmap_rows(points: &[Point], map: &ProbabilityMap) -> Result<Vec<String>> {
    let groups = map.groups();
    if map.matrix.shape()[0] != points.len() {
        return Err(Error::invalid(format!(
            "{} points for a probability map of {} rows",
            points.len(),
            map.matrix.shape()[0]
        )));
    }
    Ok(points
        .iter()
        .zip(map.matrix.data().chunks_exact(groups))
        .zip(map.argmax())
        .map(|((p, row), (j, m))| {
            let mut line = format!("{},{},{},{j},{m}", p[0], p[1], p[2]);
            for v in row {
                line.push(',');
                line.push_str(&v.to_string());
            }
            line
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::chamfer_value;

    fn cfg(groups: usize, depth: usize) -> SamplerConfig {
        SamplerConfig {
            groups,
            group_size: 2,
            depth,
            hidden: 8,
            ..SamplerConfig::default()
        }
    }

    fn cloud(n: usize, seed: u64) -> Vec<Point> {
        let mut rng = Rng::new(seed);
        (0..n).map(|_| [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)]).collect()
    }

    #[test]
    fn rows_are_distributions_for_every_depth() {
        for depth in 1..=3 {
            let mut store = ParamStore::new();
            let net = CompositionNet::new(&mut store, "u", &cfg(5, depth), &mut Rng::new(1)).unwrap();
            let pts = cloud(10, 2);
            for mode in [Mode::Train, Mode::Eval] {
                let q = net.probability_map(&store, &pts, mode).unwrap();
                assert_eq!(q.matrix.shape(), &[10, 5]);
            }
        }
        let mut store = ParamStore::new();
        assert!(CompositionNet::new(&mut store, "u", &cfg(5, 4), &mut Rng::new(1)).is_err());
    }

    #[test]
    fn row_permutation_commutes() {
        let mut store = ParamStore::new();
        let net = CompositionNet::new(&mut store, "u", &cfg(4, 2), &mut Rng::new(1)).unwrap();
        let pts = cloud(8, 3);
        let q = net.probability_map(&store, &pts, Mode::Train).unwrap();
        let perm = [3, 1, 7, 0, 2, 6, 5, 4];
        let permuted: Vec<Point> = perm.iter().map(|&i| pts[i]).collect();
        let qp = net.probability_map(&store, &permuted, Mode::Train).unwrap();
        for (r, &i) in perm.iter().enumerate() {
            for j in 0..4 {
                assert!((qp.matrix.get2(r, j) - q.matrix.get2(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_output_layer_gives_uniform_rows() {
        let mut store = ParamStore::new();
        let net = CompositionNet::new(&mut store, "u", &cfg(4, 2), &mut Rng::new(1)).unwrap();
        net.out.zero_init(&mut store);
        let q = net.probability_map(&store, &cloud(6, 1), Mode::Eval).unwrap();
        assert!(q.matrix.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn stage2_singletons_and_uniform() {
        let pts = cloud(4, 5);
        let mut g = Graph::new();
        let c = g.input(Tensor::from_points(&pts));
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 5] = 1.0;
        }
        let q = g.input(Tensor::new(vec![4, 4], eye).unwrap());
        let l = stage2_loss(&mut g, c, c, q, true).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let u = g.input(Tensor::full(&[4, 3], 1.0 / 3.0));
        let l = stage2_loss(&mut g, c, c, u, true).unwrap();
        let centroid = PointCloud::new(pts.clone()).unwrap().centroid();
        let want = chamfer_value(&[centroid; 3], &pts, ChamferForm::L2).unwrap();
        assert!((g.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn stage2_reaches_composition_parameters() {
        let mut store = ParamStore::new();
        let net = CompositionNet::new(&mut store, "u", &cfg(3, 2), &mut Rng::new(1)).unwrap();
        let sphere = cloud(12, 8);
        let target = cloud(10, 9);
        let mut g = Graph::new();
        let s = g.input(Tensor::from_points(&sphere));
        let t = g.input(Tensor::from_points(&target));
        let q = net.forward(&mut g, &store, s, Mode::Train).unwrap();
        let l = stage2_loss(&mut g, t, s, q, true).unwrap();
        g.backward(l).unwrap();
        store.absorb(&mut g);
        assert!(store.grad_norm("u.") > 0.0);
    }

    #[test]
    fn dcs_sample_shapes_and_bounds() {
        let mut c = cfg(4, 2);
        c.group_size = 3;
        let mut store = ParamStore::new();
        let net = CompositionNet::new(&mut store, "u", &c, &mut Rng::new(1)).unwrap();
        let pc = PointCloud::new(cloud(20, 4)).unwrap();
        let s = dcs_sample(&store, &net, &c, &pc, Some(7)).unwrap();
        assert_eq!(s.centers.centers.len(), 4);
        assert_eq!(s.patches.relative.shape(), &[4, 3, 3]);
        assert!(s.probabilities.relaxed);
        for ctr in &s.centers.centers {
            for k in 0..3 {
                let lo = pc.points.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
                let hi = pc.points.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
                assert!(ctr[k] >= lo - 1e-12 && ctr[k] <= hi + 1e-12);
            }
        }
        let small = PointCloud::new(cloud(2, 1)).unwrap();
        assert!(dcs_sample(&store, &net, &c, &small, None).is_err());
    }

    #[test]
    fn cold_temperature_gives_hard_centroids() {
        let mut c = cfg(3, 1);
        c.group_size = 1;
        let mut store = ParamStore::new();
        let net = CompositionNet::new(&mut store, "u", &c, &mut Rng::new(2)).unwrap();
        let pts = cloud(12, 6);
        let noise = gumbel_noise(&[12, 3], &mut Rng::new(3));
        let mut g = Graph::new();
        let x = g.input(Tensor::from_points(&pts));
        let v = dcs_forward(&mut g, &store, &net, &c, &[x], 1e-4, Some(&[noise.clone()]), Mode::Eval).unwrap()[0];
        let logits = g.value(v.logits).clone();
        let mut sums = vec![[0.0; 3]; 3];
        let mut counts = vec![0.0; 3];
        for i in 0..12 {
            let row: Vec<f64> = (0..3).map(|j| logits.get2(i, j) + noise.get2(i, j)).collect();
            let j = crate::tensor::argmax_row(&row);
            counts[j] += 1.0;
            for k in 0..3 {
                sums[j][k] += pts[i][k];
            }
        }
        let got = g.value(v.centers).to_points();
        for j in 0..3 {
            if counts[j] > 0.0 {
                for k in 0..3 {
                    assert!((got[j][k] - sums[j][k] / counts[j]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn global_loss_modes() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]];
        let ctr = [[0.5, 0.0, 0.0], [0.0, 1.0, 0.5]];
        let mut g = Graph::new();
        let p = g.input(Tensor::from_points(&pts));
        let c = g.input(Tensor::from_points(&ctr));
        let value = |g: &mut Graph, m| {
            let v = global_recon_loss(g, &[c], &[p], m).unwrap();
            g.value(v).item()
        };
        let l2 = value(&mut g, GlobalLoss::L2);
        let l1 = value(&mut g, GlobalLoss::L1);
        assert!((l2 - chamfer_value(&ctr, &pts, ChamferForm::L2).unwrap()).abs() < 1e-12);
        assert!((l1 - chamfer_value(&ctr, &pts, ChamferForm::L1).unwrap()).abs() < 1e-12);
        assert!((value(&mut g, GlobalLoss::L1L2) - (l1 + l2)).abs() < 1e-12);
        assert!((value(&mut g, GlobalLoss::Mmd) - l2).abs() < 1e-12);

        let subset = g.input(Tensor::from_points(&pts[..2]));
        let v = global_recon_loss(&mut g, &[subset], &[p], GlobalLoss::L2).unwrap();
        // only the cloud-to-centers term remains: two points at squared distance 1
        assert!((g.value(v).item() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mmd_mode_takes_best_center_set() {
        let a = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let b = [[0.0, 3.0, 0.0], [0.0, 4.0, 0.0]];
        let mut g = Graph::new();
        let ca = g.input(Tensor::from_points(&a));
        let cb = g.input(Tensor::from_points(&b));
        let v = global_recon_loss(&mut g, &[cb, ca], &[ca, cb], GlobalLoss::Mmd).unwrap();
        assert_eq!(g.value(v).item(), 0.0);
    }

    #[test]
    fn prior_penalty_values() {
        let mut g = Graph::new();
        let eval = |g: &mut Graph, rows: Vec<f64>, cols: usize| {
            let n = rows.len() / cols;
            let q = g.input(Tensor::new(vec![n, cols], rows).unwrap());
            let p = uniform_prior_penalty(g, q).unwrap();
            g.value(p).item()
        };
        assert!(eval(&mut g, vec![0.5, 0.5, 0.5, 0.5], 2).abs() < 1e-15);
        assert!((eval(&mut g, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0], 3) - 3f64.ln()).abs() < 1e-12);
        let v = eval(&mut g, vec![1.0, 0.0, 0.5, 0.5], 2);
        let want = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((v - want).abs() < 1e-12);
        assert!((v - 0.13081).abs() < 1e-5);
    }

    #[test]
    fn heatmap_one_row_per_point() {
        let q = ProbabilityMap::new(Tensor::new(vec![2, 2], vec![0.25, 0.75, 0.5, 0.5]).unwrap(), 1.0, false).unwrap();
        let rows = heatmap_rows(&[[0.0, 1.0, 2.0], [1.5, 0.0, 0.0]], &q).unwrap();
        assert_eq!(rows, vec!["0,1,2,1,0.75,0.25,0.75", "1.5,0,0,0,0.5,0.5,0.5"]);
        assert!(heatmap_rows(&[[0.0; 3]], &q).is_err());
    }
}
