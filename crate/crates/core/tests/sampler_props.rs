use dcs_core::backbone::{mask_counts, mask_indices};
use dcs_core::geometry::Point;
use dcs_core::gradcheck::{relative_error, DEFAULT_STEP};
use dcs_core::rng::Rng;
use dcs_core::sampler::{dcs_forward, stage2_loss, CompositionNet, SamplerConfig};
use dcs_core::tensor::{gumbel_noise, gumbel_softmax_with_noise, Graph, GumbelMode, Mode, ParamStore, Tensor, Var};
use proptest::prelude::*;

fn cloud(n: usize, rng: &mut Rng) -> Vec<Point> {
    (0..n).map(|_| [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)]).collect()
}

fn net(groups: usize, seed: u64) -> (ParamStore, CompositionNet, SamplerConfig) {
    let cfg = SamplerConfig {
        groups,
        group_size: 2,
        hidden: 8,
        ..SamplerConfig::default()
    };
    let mut store = ParamStore::new();
    let net = CompositionNet::new(&mut store, "dcs", &cfg, &mut Rng::new(seed)).unwrap();
    (store, net, cfg)
}

fn centers(store: &ParamStore, net: &CompositionNet, cfg: &SamplerConfig, pts: &[Point], noise: &Tensor) -> Vec<Point> {
    let mut g = Graph::new();
    let x = g.input(Tensor::from_points(pts));
    let v = dcs_forward(&mut g, store, net, cfg, &[x], 0.7, Some(std::slice::from_ref(noise)), Mode::Eval).unwrap();
    g.value(v[0].centers).to_points()
}

fn entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dcs_centers_follow_row_permutations(seed in any::<u64>(), n in 4usize..24, groups in 2usize..6) {
        let mut rng = Rng::new(seed);
        let pts = cloud(n, &mut rng);
        let noise = gumbel_noise(&[n, groups], &mut rng);
        let (store, net, cfg) = net(groups, seed);
        let base = centers(&store, &net, &cfg, &pts, &noise);
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let pts2: Vec<Point> = order.iter().map(|&i| pts[i]).collect();
        let noise2 = Tensor::new(
            vec![n, groups],
            order.iter().flat_map(|&i| noise.data()[i * groups..(i + 1) * groups].to_vec()).collect(),
        ).unwrap();
        let moved = centers(&store, &net, &cfg, &pts2, &noise2);
        for (a, b) in base.iter().zip(&moved) {
            for k in 0..3 {
                prop_assert!((a[k] - b[k]).abs() < 1e-9);
            }
        }
        for c in &base {
            for k in 0..3 {
                let lo = pts.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
                let hi = pts.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(c[k] >= lo - 1e-12 && c[k] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn colder_temperature_never_raises_entropy(seed in any::<u64>(), n in 1usize..6, groups in 2usize..8) {
        let mut rng = Rng::new(seed);
        let logits = Tensor::new(vec![n, groups], (0..n * groups).map(|_| rng.normal()).collect()).unwrap();
        let noise = gumbel_noise(&[n, groups], &mut rng);
        let mut prev: Option<Vec<f64>> = None;
        for tau in [2.0, 1.0, 0.5, 0.1] {
            let mut g = Graph::new();
            let l = g.input(logits.clone());
            let y = gumbel_softmax_with_noise(&mut g, l, &noise, tau, GumbelMode::Soft).unwrap();
            let h: Vec<f64> = g.value(y).data().chunks_exact(groups).map(entropy).collect();
            if let Some(p) = &prev {
                for (a, b) in h.iter().zip(p) {
                    prop_assert!(*a <= b + 1e-12);
                }
            }
            prev = Some(h);
        }
    }

    #[test]
    fn masking_is_seeded_and_floored(seed in any::<u64>(), groups in 2usize..64, ratio in 0.05f64..0.95) {
        prop_assume!(mask_counts(groups, ratio).is_ok());
        let a = mask_indices(groups, ratio, &mut Rng::new(seed)).unwrap();
        let b = mask_indices(groups, ratio, &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.masked.len(), (ratio * groups as f64).floor() as usize);
        prop_assert_eq!(a.masked.len() + a.visible.len(), groups);
    }
}

fn probe_loss(store: &ParamStore, net: &CompositionNet, pts: &[Point], decoded: &[Point]) -> (f64, Graph, Var) {
    let mut g = Graph::new();
    let c = g.input(Tensor::from_points(pts));
    let d = g.input(Tensor::from_points(decoded));
    let q = net.forward(&mut g, store, d, Mode::Train).unwrap();
    let loss = stage2_loss(&mut g, c, d, q, true).unwrap();
    (g.value(loss).item(), g, loss)
}

#[test]
fn composition_loss_gradient_on_three_weight_probe() {
    let mut rng = Rng::new(11);
    let (mut store, net, _) = net(4, 2);
    let pts = cloud(12, &mut rng);
    let decoded: Vec<Point> = pts.iter().map(|p| [p[0] * 0.9, p[1] + 0.05, p[2] * 1.1]).collect();
    let probe = [(net.out.weight, 0), (net.out.bias, 1), (net.hidden[0].0.weight, 2)];

    let (_, mut g, loss) = probe_loss(&store, &net, &pts, &decoded);
    g.backward(loss).unwrap();
    store.zero_grad();
    store.absorb(&mut g);
    let analytic: Vec<f64> = probe.iter().map(|&(id, k)| store.get(id).grad().unwrap()[k]).collect();

    let mut numeric = Vec::new();
    for &(id, k) in &probe {
        let x0 = store.get(id).tensor.data()[k];
        store.get_mut(id).tensor.data_mut()[k] = x0 + DEFAULT_STEP;
        let up = probe_loss(&store, &net, &pts, &decoded).0;
        store.get_mut(id).tensor.data_mut()[k] = x0 - DEFAULT_STEP;
        let down = probe_loss(&store, &net, &pts, &decoded).0;
        store.get_mut(id).tensor.data_mut()[k] = x0;
        numeric.push((up - down) / (2.0 * DEFAULT_STEP));
    }
    assert!(relative_error(&analytic, &numeric) < 1e-3, "{analytic:?} vs {numeric:?}");
    assert!(analytic.iter().any(|a| a.abs() > 0.0));
}
