use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::geometry::{self, chamfer, emd, sq_dist, ChamferForm, Point};
use crate::rng::Rng;
use crate::tensor::{Graph, Linear, ParamStore, Tensor, Var};

/// Fixed-width summary of one cloud produced by [`EdgeEncoder`].
#[derive(Clone, Debug, PartialEq)]
pub struct LatentEmbedding {
    pub vector: Vec<f64>,
}

/// Points on the unit sphere, optionally paired with their decoded images in
/// cloud space.
#[derive(Clone, Debug, PartialEq)]
pub struct SphereSamples {
    pub samples: Vec<Point>,
    pub decoded: Option<Vec<Point>>,
}

impl SphereSamples {
    pub fn new(samples: Vec<Point>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("sphere needs at least one sample"));
        }
        if let Some(i) = samples.iter().position(|p| (sq_dist(p, &[0.0; 3]).sqrt() - 1.0).abs() > 1e-12) {
            return Err(Error::invalid(format!("sphere sample {i} is not unit norm")));
        }
        Ok(Self { samples, decoded: None })
    }

    pub fn with_decoded(mut self, decoded: Vec<Point>) -> Result<Self> {
        if decoded.len() != self.samples.len() {
            return Err(Error::invalid(format!(
                "{} decoded points for {} sphere samples",
                decoded.len(),
                self.samples.len()
            )));
        }
        self.decoded = Some(decoded);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Edge list of the k-nearest-neighbor graph over the distinct positions of
/// a cloud. Neighbors exclude the point's own position.
#[derive(Clone, Debug)]
pub struct Neighborhood {
    pub points: Vec<Point>,
    pub k: usize,
    /// `points.len() * k` entries: the source point of each edge.
    pub sources: Vec<usize>,
    /// Matching neighbor of each edge, nearest first.
    pub targets: Vec<usize>,
}

impl Neighborhood {
    pub fn build(points: &[Point], k: usize) -> Result<Self> {
        let mut seen = HashSet::new();
        let unique: Vec<Point> = points
            .iter()
            .filter(|p| seen.insert(p.map(f64::to_bits)))
            .copied()
            .collect();
        if unique.len() < k + 1 {
            return Err(Error::invalid(format!(
                "edge convolution needs at least {} distinct points, got {}",
                k + 1,
                unique.len()
            )));
        }
        let mut sources = Vec::with_capacity(unique.len() * k);
        let mut targets = Vec::with_capacity(unique.len() * k);
        let mut order: Vec<(f64, usize)> = Vec::with_capacity(unique.len());
        for (i, p) in unique.iter().enumerate() {
            order.clear();
            order.extend(
                unique
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(j, q)| (sq_dist(p, q), j)),
            );
            order.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).expect("finite"));
            order[..k].sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            sources.extend(std::iter::repeat(i).take(k));
            targets.extend(order[..k].iter().map(|&(_, j)| j));
        }
        Ok(Self {
            points: unique,
            k,
            sources,
            targets,
        })
    }
}

/// One edge-convolution layer, a per-point lift to the latent width, and
/// max-pooling over points.
///
/// Edge features are `relu(W [p_i; p_j - p_i] + b)`, max-reduced over the
/// neighbors `j` of each point `i`.
#[derive(Clone, Debug)]
pub struct EdgeEncoder {
    pub edge: Linear,
    pub lift: Linear,
    pub k: usize,
    pub latent_dim: usize,
}

impl EdgeEncoder {
    pub fn new(store: &mut ParamStore, name: &str, k: usize, hidden: usize, latent_dim: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            edge: Linear::new(store, &format!("{name}.edge"), 6, hidden, rng)?,
            lift: Linear::new(store, &format!("{name}.lift"), hidden, latent_dim, rng)?,
            k,
            latent_dim,
        })
    }

    /// `points` holds the neighborhood's distinct positions `[U, 3]`;
    /// returns the latent `[L]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, points: Var, nbh: &Neighborhood) -> Result<Var> {
        let u = nbh.points.len();
        if g.shape(points) != [u, 3] {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: g.shape(points).to_vec(),
                rhs: vec![u, 3],
            });
        }
        let src = g.gather(points, &nbh.sources)?;
        let dst = g.gather(points, &nbh.targets)?;
        let rel = g.sub(dst, src)?;
        let edges = g.concat(&[src, rel], 1)?;
        let h = self.edge.forward(g, store, edges)?;
        let h = g.relu(h);
        let h = g.reshape(h, &[u, nbh.k, self.edge.out_dim])?;
        let per_point = g.max_axis(h, 1)?;
        let lifted = self.lift.forward(g, store, per_point)?;
        g.max_axis(lifted, 0)
    }

    pub fn encode(&self, store: &ParamStore, points: &[Point]) -> Result<LatentEmbedding> {
        let nbh = Neighborhood::build(points, self.k)?;
        let mut g = Graph::new();
        let p = g.input(Tensor::from_points(&nbh.points));
        let l = self.forward(&mut g, store, p, &nbh)?;
        Ok(LatentEmbedding {
            vector: g.value(l).data().to_vec(),
        })
    }
}

/// MLP `F([latent; s])` mapping sphere samples into cloud space.
#[derive(Clone, Debug)]
pub struct SphereDecoder {
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
    pub latent_dim: usize,
}

impl SphereDecoder {
    pub fn new(store: &mut ParamStore, name: &str, latent_dim: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), latent_dim + 3, hidden, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, hidden, rng)?,
            fc3: Linear::new(store, &format!("{name}.fc3"), hidden, 3, rng)?,
            latent_dim,
        })
    }

    /// Decodes `samples [M, 3]` under each latent row of `latents [B, L]`,
    /// giving `[B, M, 3]`.
    ///
    /// The first layer is split into its latent and sample blocks so the
    /// latent half is computed once per cloud instead of once per sample.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, latents: Var, samples: Var) -> Result<Var> {
        let (sl, ss) = (g.shape(latents).to_vec(), g.shape(samples).to_vec());
        if sl.len() != 2 || sl[1] != self.latent_dim || ss.len() != 2 || ss[1] != 3 || ss[0] == 0 {
            return Err(Error::ShapeMismatch {
                op: "decode",
                lhs: sl,
                rhs: ss,
            });
        }
        let (b, m, hidden) = (sl[0], ss[0], self.fc1.out_dim);
        let w1 = g.param(store, self.fc1.weight);
        let b1 = g.param(store, self.fc1.bias);
        let w_latent = g.narrow(w1, 0, 0, self.latent_dim)?;
        let w_sample = g.narrow(w1, 0, self.latent_dim, 3)?;
        let from_latent = g.matmul(latents, w_latent)?;
        let from_latent = g.reshape(from_latent, &[b, 1, hidden])?;
        let from_sample = g.linear(samples, w_sample, Some(b1))?;
        let h = g.add(from_latent, from_sample)?;
        let h = g.relu(h);
        let h = g.reshape(h, &[b * m, hidden])?;
        let h = self.fc2.forward(g, store, h)?;
        let h = g.relu(h);
        let out = self.fc3.forward(g, store, h)?;
        g.reshape(out, &[b, m, 3])
    }

    pub fn decode(&self, store: &ParamStore, latent: &LatentEmbedding, samples: &[Point]) -> Result<Vec<Point>> {
        if latent.vector.len() != self.latent_dim {
            return Err(Error::invalid(format!(
                "latent width {} does not match decoder width {}",
                latent.vector.len(),
                self.latent_dim
            )));
        }
        let mut g = Graph::new();
        let l = g.input(Tensor::new(vec![1, self.latent_dim], latent.vector.clone())?);
        let s = g.input(Tensor::from_points(samples));
        let out = self.forward(&mut g, store, l, s)?;
        let out = g.reshape(out, &[samples.len(), 3])?;
        Ok(g.value(out).to_points())
    }
}

/// `chamfer_l2(decoded, cloud) + emd_weight * emd(decoded, cloud)`.
pub fn stage1_loss(
    g: &mut Graph,
    cloud: Var,
    decoded: Var,
    emd_weight: f64,
    warm: Option<&mut Vec<f64>>,
) -> Result<Var> {
    let cd = chamfer(g, decoded, cloud, ChamferForm::L2)?;
    if emd_weight == 0.0 {
        return Ok(cd);
    }
    if g.shape(cloud) != g.shape(decoded) {
        return Err(Error::invalid(format!(
            "emd term needs as many decoded points as cloud points, got {:?} and {:?}",
            g.shape(decoded),
            g.shape(cloud)
        )));
    }
    let (e, _) = emd(g, decoded, cloud, warm)?;
    let e = g.mul_scalar(e, emd_weight);
    g.add(cd, e)
}

/// For each cloud point, the sphere sample whose decoded image is nearest
/// (lowest sample index on ties).
pub fn forward_map(cloud: &[Point], sphere: &SphereSamples) -> Result<Vec<Point>> {
    let decoded = sphere
        .decoded
        .as_ref()
        .ok_or_else(|| Error::invalid("forward map needs decoded sphere points"))?;
    let idx = geometry::knn_indices(decoded, cloud, 1)?;
    Ok(idx.into_iter().map(|i| sphere.samples[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{chamfer_value, emd_value, sphere_samples, SphereMethod};

    fn random_cloud(n: usize, seed: u64) -> Vec<Point> {
        let mut rng = Rng::new(seed);
        (0..n).map(|_| [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)]).collect()
    }

    fn encoder(store: &mut ParamStore) -> EdgeEncoder {
        EdgeEncoder::new(store, "enc", 4, 8, 6, &mut Rng::new(3)).unwrap()
    }

    #[test]
    fn latent_ignores_order_and_duplicates() {
        let mut store = ParamStore::new();
        let enc = encoder(&mut store);
        let pts = random_cloud(20, 1);
        let base = enc.encode(&store, &pts).unwrap();
        let mut shuffled = pts.clone();
        Rng::new(9).shuffle(&mut shuffled);
        let perm = enc.encode(&store, &shuffled).unwrap();
        for (a, b) in base.vector.iter().zip(&perm.vector) {
            assert!((a - b).abs() < 1e-9);
        }
        let doubled: Vec<Point> = pts.iter().chain(&pts).copied().collect();
        assert_eq!(enc.encode(&store, &doubled).unwrap(), base);
    }

    #[test]
    fn encoder_rejects_tiny_clouds() {
        let mut store = ParamStore::new();
        let enc = encoder(&mut store);
        assert!(enc.encode(&store, &random_cloud(4, 2)).is_err());
        assert!(enc.encode(&store, &random_cloud(5, 2)).is_ok());
    }

    #[test]
    fn neighborhood_matches_sorted_scan() {
        let pts = random_cloud(12, 4);
        let nbh = Neighborhood::build(&pts, 3).unwrap();
        for i in 0..pts.len() {
            let mut all: Vec<(f64, usize)> = (0..pts.len())
                .filter(|&j| j != i)
                .map(|j| (sq_dist(&pts[i], &pts[j]), j))
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want: Vec<usize> = all[..3].iter().map(|x| x.1).collect();
            assert_eq!(&nbh.targets[i * 3..i * 3 + 3], want.as_slice());
        }
    }

    #[test]
    fn decode_shape_and_determinism() {
        let mut store = ParamStore::new();
        let dec = SphereDecoder::new(&mut store, "dec", 5, 16, &mut Rng::new(1)).unwrap();
        let latent = LatentEmbedding {
            vector: vec![0.1, -0.2, 0.3, 0.0, 1.0],
        };
        let s = sphere_samples(7, SphereMethod::Fibonacci, 0).unwrap();
        let a = dec.decode(&store, &latent, &s).unwrap();
        assert_eq!(a.len(), 7);
        assert_eq!(a, dec.decode(&store, &latent, &s).unwrap());
        let short = LatentEmbedding { vector: vec![0.0; 4] };
        assert!(dec.decode(&store, &short, &s).is_err());
    }

    #[test]
    fn split_first_layer_equals_concatenated_input() {
        let mut store = ParamStore::new();
        let dec = SphereDecoder::new(&mut store, "dec", 4, 8, &mut Rng::new(2)).unwrap();
        let latent = [0.5, -1.0, 0.25, 2.0];
        let s = sphere_samples(5, SphereMethod::Fibonacci, 0).unwrap();
        let got = dec
            .decode(&store, &LatentEmbedding { vector: latent.to_vec() }, &s)
            .unwrap();
        let mut g = Graph::new();
        let rows: Vec<f64> = s.iter().flat_map(|p| latent.iter().chain(p.iter()).copied()).collect();
        let x = g.input(Tensor::new(vec![5, 7], rows).unwrap());
        let h = dec.fc1.forward(&mut g, &store, x).unwrap();
        let h = g.relu(h);
        let h = dec.fc2.forward(&mut g, &store, h).unwrap();
        let h = g.relu(h);
        let out = dec.fc3.forward(&mut g, &store, h).unwrap();
        for (a, b) in got.iter().flatten().zip(g.value(out).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stage1_loss_cases() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let dec = [[0.1, 0.0, 0.0], [1.0, 0.2, 0.0], [0.0, 1.0, 0.3], [0.5, 0.5, 0.5]];
        let mut g = Graph::new();
        let c = g.input(Tensor::from_points(&pts));
        let d = g.input(Tensor::from_points(&dec));
        let same = stage1_loss(&mut g, c, c, 1.0, None).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        let l = stage1_loss(&mut g, c, d, 1.0, None).unwrap();
        let want = chamfer_value(&dec, &pts, ChamferForm::L2).unwrap() + emd_value(&dec, &pts, None).unwrap().cost;
        assert!((g.value(l).item() - want).abs() < 1e-12);
        let cd_only = stage1_loss(&mut g, c, d, 0.0, None).unwrap();
        assert_eq!(g.value(cd_only).item(), chamfer_value(&dec, &pts, ChamferForm::L2).unwrap());
        let d3 = g.input(Tensor::from_points(&dec[..3]));
        assert!(stage1_loss(&mut g, c, d3, 1.0, None).is_err());
        assert!(stage1_loss(&mut g, c, d3, 0.0, None).is_ok());
    }

    #[test]
    fn forward_map_cases() {
        let s = sphere_samples(6, SphereMethod::Fibonacci, 0).unwrap();
        let sphere = SphereSamples::new(s.clone()).unwrap();
        assert!(forward_map(&s, &sphere).is_err());
        let ident = sphere.clone().with_decoded(s.clone()).unwrap();
        assert_eq!(forward_map(&s, &ident).unwrap(), s);

        let decoded = random_cloud(6, 11);
        let cloud = random_cloud(9, 12);
        let mapped = forward_map(&cloud, &sphere.with_decoded(decoded.clone()).unwrap()).unwrap();
        assert_eq!(mapped.len(), 9);
        for (p, m) in cloud.iter().zip(&mapped) {
            let mut best = 0;
            for j in 1..6 {
                if sq_dist(p, &decoded[j]) < sq_dist(p, &decoded[best]) {
                    best = j;
                }
            }
            assert_eq!(*m, s[best]);
        }
    }
}
