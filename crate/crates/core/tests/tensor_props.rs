use dcs_core::gradcheck::{gradients, relative_error, Instance, DEFAULT_STEP};
use dcs_core::rng::Rng;
use dcs_core::tensor::{AdamW, Graph, Linear, ParamKind, ParamStore, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn shaped() -> impl Strategy<Value = Tensor> {
    (1usize..5, 2usize..6).prop_flat_map(|(r, c)| matrix(r, c))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(x in shaped()) {
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let s = g.softmax(v, 1).unwrap();
        let cols = x.shape()[1];
        for row in g.value(s).data().chunks_exact(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_is_non_negative(x in shaped()) {
        let mut g = Graph::new();
        let v = g.input(x);
        let r = g.relu(v);
        prop_assert!(g.value(r).data().iter().all(|&a| a >= 0.0));
    }

    #[test]
    fn composite_gradient_matches_finite_differences(x in matrix(3, 4), w in matrix(4, 3)) {
        let mut store = ParamStore::new();
        let xi = store.add("x", x, ParamKind::Weight).unwrap();
        let wi = store.add("w", w, ParamKind::Weight).unwrap();
        let inst = Instance {
            store,
            build: Box::new(move |g, s| {
                let (xv, wv) = (g.param(s, xi), g.param(s, wi));
                let h = g.matmul(xv, wv)?;
                let p = g.softmax(h, 1)?;
                let sq = g.square(h)?;
                let e = g.mul(p, sq)?;
                let m = g.mean_axis(e, 0)?;
                let xt = g.transpose(xv)?;
                let r = g.relu(xt);
                let rs = g.sum(r);
                let out = g.sum(m);
                g.add(out, rs)
            }),
        };
        let (a, n) = gradients(&inst, DEFAULT_STEP).unwrap();
        prop_assert!(relative_error(&a, &n) < 1e-4);
    }

    #[test]
    fn gradient_behind_detach_is_zero(x in shaped()) {
        let mut g = Graph::new();
        let v = g.leaf(x);
        let d = g.detach(v);
        let sq = g.square(d).unwrap();
        let kept = g.mul_scalar(v, 0.0);
        let both = g.add(sq, kept).unwrap();
        let loss = g.sum(both);
        g.backward(loss).unwrap();
        prop_assert!(g.grad(v).unwrap().iter().all(|&a| a == 0.0));
    }

    #[test]
    fn same_seed_gives_identical_loss_sequences(seed in any::<u64>()) {
        let run = || {
            let mut store = ParamStore::new();
            let mut rng = Rng::new(seed);
            let lin = Linear::new(&mut store, "fc", 3, 2, &mut rng).unwrap();
            let x = Tensor::new(vec![4, 3], (0..12).map(|_| rng.normal()).collect()).unwrap();
            let mut opt = AdamW::new(1e-2, 1e-2);
            (0..5)
                .map(|_| {
                    let mut g = Graph::new();
                    let xv = g.input(x.clone());
                    let y = lin.forward(&mut g, &store, xv).unwrap();
                    let y = g.square(y).unwrap();
                    let loss = g.mean(y);
                    let value = g.value(loss).item();
                    g.backward(loss).unwrap();
                    store.zero_grad();
                    store.absorb(&mut g);
                    opt.step(&mut store).unwrap();
                    value.to_bits()
                })
                .collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn frozen_parameters_survive_a_thousand_steps() {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(5);
    let a = Linear::new(&mut store, "a", 3, 3, &mut rng).unwrap();
    let b = Linear::new(&mut store, "b", 3, 1, &mut rng).unwrap();
    store.set_trainable("a.", false);
    let frozen = store.hash_prefix("a.");
    let moving = store.hash_prefix("b.");
    let x = Tensor::new(vec![5, 3], (0..15).map(|_| rng.normal()).collect()).unwrap();
    let mut opt = AdamW::new(1e-3, 0.05);
    for _ in 0..1000 {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let h = a.forward(&mut g, &store, xv).unwrap();
        let y = b.forward(&mut g, &store, h).unwrap();
        let y = g.square(y).unwrap();
        let loss = g.mean(y);
        g.backward(loss).unwrap();
        store.zero_grad();
        store.absorb(&mut g);
        opt.step(&mut store).unwrap();
    }
    assert_eq!(store.hash_prefix("a."), frozen);
    assert_ne!(store.hash_prefix("b."), moving);
}
