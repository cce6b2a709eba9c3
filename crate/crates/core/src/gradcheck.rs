//! Central finite-difference checks of every differentiable operation.
//!
//! Each case registers its inputs and weights as trainable entries of a
//! [`ParamStore`] and builds a scalar from them. Non-scalar outputs are
//! reduced against a fixed random projection so every output entry
//! contributes to the checked gradient.

use std::time::{Duration, Instant};

use crate::backbone::{BackboneConfig, Block, PatchEmbed};
use crate::error::{Error, Result};
use crate::geometry::{chamfer, emd, weighted_centers, ChamferForm};
use crate::rng::Rng;
use crate::sampler::{CompositionNet, EdgeEncoder, Neighborhood, SamplerConfig, SphereDecoder};
use crate::tensor::{
    dropout, gumbel_noise, gumbel_softmax_with_noise, BatchNorm, GumbelMode, Graph, LayerNorm, Linear, Mode, ParamId,
    ParamKind, ParamStore, Tensor, Var,
};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_INSTANCES: usize = 20;

/// Builds a scalar (or any tensor, projected to a scalar) from the store.
type Build<'a> = Box<dyn Fn(&mut Graph, &ParamStore) -> Result<Var> + 'a>;

/// One random instance: the store holding its inputs and weights, and the
/// forward pass over them.
pub struct Instance<'a> {
    pub store: ParamStore,
    pub build: Build<'a>,
}

/// Relative error `|a - n| / max(|a|, |n|)` between analytic and numeric
/// gradients over all trainable entries; 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    if shape.is_empty() || shape.iter().product::<usize>() == 1 {
        return Ok(out);
    }
    let mut rng = Rng::new(seed);
    let n = shape.iter().product();
    let w = g.input(Tensor::new(shape, (0..n).map(|_| rng.normal()).collect())?);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn eval(inst: &Instance<'_>, store: &ParamStore) -> Result<f64> {
    let mut g = Graph::new();
    let out = (inst.build)(&mut g, store)?;
    let s = project(&mut g, out, 0x9e37)?;
    Ok(g.value(s).item())
}

/// Analytic and numeric gradients of one instance, flattened over its
/// trainable entries in store order.
pub fn gradients(inst: &Instance<'_>, step: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let out = (inst.build)(&mut g, &inst.store)?;
    let s = project(&mut g, out, 0x9e37)?;
    g.backward(s)?;
    let mut store = inst.store.clone();
    store.zero_grad();
    store.absorb(&mut g);
    let trainable: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let mut analytic = Vec::new();
    for &id in &trainable {
        let p = store.get(id);
        match p.grad() {
            Some(gr) => analytic.extend_from_slice(gr),
            None => analytic.extend(std::iter::repeat(0.0).take(p.tensor.numel())),
        }
    }
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut probe = inst.store.clone();
    for &id in &trainable {
        for j in 0..probe.get(id).tensor.numel() {
            let x = probe.get(id).tensor.data()[j];
            probe.get_mut(id).tensor.data_mut()[j] = x + step;
            let up = eval(inst, &probe)?;
            probe.get_mut(id).tensor.data_mut()[j] = x - step;
            let down = eval(inst, &probe)?;
            probe.get_mut(id).tensor.data_mut()[j] = x;
            numeric.push((up - down) / (2.0 * step));
        }
    }
    Ok((analytic, numeric))
}

/// Worst-case result of one operation over its instances.
#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub op: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub ops: Vec<OpReport>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.ops.iter().all(|o| o.passed)
    }
}

/// Factory for the `i`-th random instance of an operation.
pub type Case = fn(&mut Rng) -> Result<Instance<'static>>;

fn input(store: &mut ParamStore, name: &str, t: Tensor) -> Result<ParamId> {
    store.add(name, t, ParamKind::Weight)
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).expect("sized from shape")
}

fn positive(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(0.5, 2.0)).collect()).expect("sized from shape")
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// Single-input case over a random tensor of the given shape.
fn unary(
    shape: &[usize],
    rng: &mut Rng,
    pos: bool,
    f: impl Fn(&mut Graph, Var) -> Result<Var> + 'static,
) -> Result<Instance<'static>> {
    let mut store = ParamStore::new();
    let t = if pos { positive(rng, shape) } else { randn(shape, rng) };
    let x = input(&mut store, "x", t)?;
    Ok(Instance {
        store,
        build: Box::new(move |g, s| {
            let v = g.param(s, x);
            f(g, v)
        }),
    })
}

/// Two-input case; `b` broadcasts against `a` when `b_shape` is shorter or
/// has unit axes.
fn binary(
    a_shape: &[usize],
    b_shape: &[usize],
    rng: &mut Rng,
    pos_b: bool,
    f: impl Fn(&mut Graph, Var, Var) -> Result<Var> + 'static,
) -> Result<Instance<'static>> {
    let mut store = ParamStore::new();
    let a = input(&mut store, "a", randn(a_shape, rng))?;
    let bt = if pos_b { positive(rng, b_shape) } else { randn(b_shape, rng) };
    let b = input(&mut store, "b", bt)?;
    Ok(Instance {
        store,
        build: Box::new(move |g, s| {
            let (va, vb) = (g.param(s, a), g.param(s, b));
            f(g, va, vb)
        }),
    })
}

fn small_shape(rng: &mut Rng) -> Vec<usize> {
    vec![dim(rng, 2, 4), dim(rng, 2, 5)]
}

fn case_add(rng: &mut Rng) -> Result<Instance<'static>> {
    let s = small_shape(rng);
    binary(&[dim(rng, 2, 3), s[0], s[1]], &[s[0], 1], rng, false, |g, a, b| g.add(a, b))
}

fn case_sub(rng: &mut Rng) -> Result<Instance<'static>> {
    let s = small_shape(rng);
    binary(&s, &[s[1]], rng, false, |g, a, b| g.sub(a, b))
}

fn case_mul(rng: &mut Rng) -> Result<Instance<'static>> {
    let s = small_shape(rng);
    binary(&s, &[1, s[1]], rng, false, |g, a, b| g.mul(a, b))
}

fn case_div(rng: &mut Rng) -> Result<Instance<'static>> {
    let s = small_shape(rng);
    binary(&s, &[s[0], 1], rng, true, |g, a, b| g.div(a, b))
}

fn case_scalar_ops(rng: &mut Rng) -> Result<Instance<'static>> {
    let c = rng.normal();
    unary(&small_shape(rng), rng, false, move |g, x| {
        let y = g.mul_scalar(x, c);
        let y = g.add_scalar(y, 0.3);
        Ok(g.neg(y))
    })
}

fn case_relu(rng: &mut Rng) -> Result<Instance<'static>> {
    unary(&small_shape(rng), rng, false, |g, x| Ok(g.relu(x)))
}

fn case_log(rng: &mut Rng) -> Result<Instance<'static>> {
    unary(&small_shape(rng), rng, true, |g, x| Ok(g.log(x)))
}

fn case_exp(rng: &mut Rng) -> Result<Instance<'static>> {
    unary(&small_shape(rng), rng, false, |g, x| Ok(g.exp(x)))
}

fn case_sqrt(rng: &mut Rng) -> Result<Instance<'static>> {
    unary(&small_shape(rng), rng, true, |g, x| Ok(g.sqrt(x)))
}

fn case_square(rng: &mut Rng) -> Result<Instance<'static>> {
    unary(&small_shape(rng), rng, false, |g, x| g.square(x))
}

fn case_matmul(rng: &mut Rng) -> Result<Instance<'static>> {
    let (m, k, n) = (dim(rng, 1, 4), dim(rng, 1, 5), dim(rng, 1, 4));
    if rng.below(2) == 0 {
        binary(&[m, k], &[k, n], rng, false, |g, a, b| g.matmul(a, b))
    } else {
        let b = dim(rng, 2, 3);
        binary(&[b, m, k], &[b, k, n], rng, false, |g, a, b| g.matmul(a, b))
    }
}

fn case_permute(rng: &mut Rng) -> Result<Instance<'static>> {
    let shape = [dim(rng, 1, 3), dim(rng, 2, 3), dim(rng, 1, 4)];
    unary(&shape, rng, false, |g, x| {
        let y = g.permute(x, &[2, 0, 1])?;
        let y = g.reshape(y, &[g.shape(y).iter().product::<usize>()])?;
        let m = flatten_leading(g, x)?;
        let z = g.transpose(m)?;
        let z = g.reshape(z, &[g.shape(z).iter().product::<usize>()])?;
        g.concat(&[y, z], 0)
    })
}

fn flatten_leading(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    g.reshape(x, &[s[0] * s[1], s[2]])
}

fn case_linear(rng: &mut Rng) -> Result<Instance<'static>> {
    let mut store = ParamStore::new();
    let (n, i, o) = (dim(rng, 1, 4), dim(rng, 1, 5), dim(rng, 1, 4));
    let lin = Linear::new(&mut store, "fc", i, o, rng)?;
    let x = input(&mut store, "x", randn(&[n, i], rng))?;
    Ok(Instance {
        store,
        build: Box::new(move |g, s| {
            let v = g.param(s, x);
            lin.forward(g, s, v)
        }),
    })
}

fn case_layer_norm(rng: &mut Rng) -> Result<Instance<'static>> {
    let mut store = ParamStore::new();
    let (n, d) = (dim(rng, 1, 4), dim(rng, 2, 6));
    let ln = LayerNorm::new(&mut store, "ln", d)?;
    perturb_all(&mut store, rng);
    let x = input(&mut store, "x", randn(&[n, d], rng))?;
    Ok(Instance {
        store,
        build: Box::new(move |g, s| {
            let v = g.param(s, x);
            ln.forward(g, s, v)
        }),
    })
}

fn case_batch_norm(rng: &mut Rng) -> Result<Instance<'static>> {
    let mut store = ParamStore::new();
    let (n, d) = (dim(rng, 2, 5), dim(rng, 1, 4));
    let bn = BatchNorm::new(&mut store, "bn", d)?;
    perturb_all(&mut store, rng);
    let x = input(&mut store, "x", randn(&[n, d], rng))?;
    Ok(Instance {
        store,
        build: Box::new(move |g, s| {
            let v = g.param(s, x);
            bn.forward(g, s, v, Mode::Train)
        }),
    })
}

/// Moves trainable weights off their constant initial values.
fn perturb_all(store: &mut ParamStore, rng: &mut Rng) {
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        for v in store.get_mut(id).tensor.data_mut() {
            *v += 0.3 * rng.normal();
        }
    }
}

fn case_softmax(rng: &mut Rng) -> Result<Instance<'static>> {
    let axis = rng.below(2);
    unary(&small_shape(rng), rng, false, move |g, x| g.softmax(x, axis))
}

fn case_log_softmax(rng: &mut Rng) -> Result<Instance<'static>> {
    let axis = rng.below(2);
    unary(&small_shape(rng), rng, false, move |g, x| g.log_softmax(x, axis))
}

fn case_reductions(rng: &mut Rng) -> Result<Instance<'static>> {
    let shape = [dim(rng, 1, 3), dim(rng, 2, 4), dim(rng, 1, 3)];
    let axis = rng.below(3);
    unary(&shape, rng, false, move |g, x| {
        let a = g.sum_axis(x, axis)?;
        let b = g.mean_axis(x, axis)?;
        let a = g.mul(a, b)?;
        let s = g.sum(a);
        let m = g.mean(x);
        let m = g.mul(m, s)?;
        let m = g.reshape(m, &[1])?;
        let a = g.reshape(a, &[g.shape(a).iter().product::<usize>()])?;
        g.concat(&[a, m], 0)
    })
}

fn case_min_max(rng: &mut Rng) -> Result<Instance<'static>> {
    let shape = [dim(rng, 2, 4), dim(rng, 2, 5)];
    let axis = rng.below(2);
    unary(&shape, rng, false, move |g, x| {
        let lo = g.min_axis(x, axis)?;
        let hi = g.max_axis(x, 1 - axis)?;
        let lo = g.reshape(lo, &[g.shape(lo)[0]])?;
        let hi = g.reshape(hi, &[g.shape(hi)[0]])?;
        g.concat(&[lo, hi], 0)
    })
}

fn case_indexing(rng: &mut Rng) -> Result<Instance<'static>> {
    let (n, d) = (dim(rng, 3, 6), dim(rng, 1, 3));
    let idx: Vec<usize> = (0..dim(rng, 1, 8)).map(|_| rng.below(n)).collect();
    let start = rng.below(n - 1);
    binary(&[n, d], &[2, d], rng, false, move |g, a, b| {
        let ga = g.gather(a, &idx)?;
        let na = g.narrow(a, 0, start, 2)?;
        let nb = g.add(na, b)?;
        let c = g.concat(&[ga, nb], 0)?;
        let rows = g.shape(c)[0];
        let c = g.reshape(c, &[rows * d])?;
        g.reshape(c, &[rows, d])
    })
}

fn case_broadcast_to(rng: &mut Rng) -> Result<Instance<'static>> {
    let (a, b) = (dim(rng, 1, 3), dim(rng, 1, 4));
    let reps = dim(rng, 2, 3);
    unary(&[a, 1, b], rng, false, move |g, x| g.broadcast_to(x, &[reps, a, 3, b]))
}

fn case_pairwise(rng: &mut Rng) -> Result<Instance<'static>> {
    let d = dim(rng, 1, 4);
    if rng.below(2) == 0 {
        binary(&[dim(rng, 1, 5), d], &[dim(rng, 1, 5), d], rng, false, |g, a, b| {
            g.pairwise_sq_dist(a, b)
        })
    } else {
        let bt = dim(rng, 2, 3);
        binary(&[bt, dim(rng, 1, 4), d], &[bt, dim(rng, 1, 4), d], rng, false, |g, a, b| {
            g.pairwise_sq_dist(a, b)
        })
    }
}

fn case_dropout(rng: &mut Rng) -> Result<Instance<'static>> {
    let seed = rng.next_u64();
    unary(&small_shape(rng), rng, false, move |g, x| dropout(g, x, 0.4, &mut Rng::new(seed)))
}

fn case_chamfer(rng: &mut Rng, form: ChamferForm) -> Result<Instance<'static>> {
    let batched = rng.below(2) == 1;
    let (n, m) = (dim(rng, 2, 8), dim(rng, 2, 8));
    let (a, b) = if batched {
        let bt = dim(rng, 2, 3);
        (vec![bt, n, 3], vec![bt, m, 3])
    } else {
        (vec![n, 3], vec![m, 3])
    };
    binary(&a, &b, rng, false, move |g, p, q| chamfer(g, p, q, form))
}

fn case_chamfer_l1(rng: &mut Rng) -> Result<Instance<'static>> {
    case_chamfer(rng, ChamferForm::L1)
}

fn case_chamfer_l2(rng: &mut Rng) -> Result<Instance<'static>> {
    case_chamfer(rng, ChamferForm::L2)
}

fn case_emd(rng: &mut Rng) -> Result<Instance<'static>> {
    let n = dim(rng, 2, 8);
    binary(&[n, 3], &[n, 3], rng, false, |g, p, q| Ok(emd(g, p, q, None)?.0))
}

fn case_weighted_centers(rng: &mut Rng) -> Result<Instance<'static>> {
    let (n, groups) = (dim(rng, 2, 8), dim(rng, 1, 4));
    let normalize = rng.below(2) == 0;
    binary(&[n, 3], &[n, groups], rng, true, move |g, p, w| weighted_centers(g, p, w, normalize))
}

fn case_gumbel(rng: &mut Rng) -> Result<Instance<'static>> {
    let (n, groups) = (dim(rng, 1, 5), dim(rng, 2, 6));
    let noise = gumbel_noise(&[n, groups], rng);
    let tau = rng.uniform(0.5, 2.0);
    unary(&[n, groups], rng, false, move |g, x| {
        gumbel_softmax_with_noise(g, x, &noise, tau, GumbelMode::Soft)
    })
}

fn case_patch_embed(rng: &mut Rng) -> Result<Instance<'static>> {
    let mut store = ParamStore::new();
    let (p, k) = (dim(rng, 1, 3), dim(rng, 2, 5));
    let embed = PatchEmbed::new(&mut store, "patch", dim(rng, 2, 5), dim(rng, 2, 5), rng)?;
    let x = input(&mut store, "x", randn(&[p, k, 3], rng))?;
    Ok(Instance {
        store,
        build: Box::new(move |g, s| {
            let v = g.param(s, x);
            embed.forward(g, s, v)
        }),
    })
}

fn random_points(n: usize, rng: &mut Rng) -> Vec<[f64; 3]> {
    (0..n).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect()
}

fn case_encode(rng: &mut Rng) -> Result<Instance<'static>> {
    let mut store = ParamStore::new();
    let k = dim(rng, 2, 3);
    let pts = random_points(dim(rng, k + 2, 7), rng);
    let nbh = Neighborhood::build(&pts, k)?;
    let enc = EdgeEncoder::new(&mut store, "enc", k, dim(rng, 2, 4), dim(rng, 2, 4), rng)?;
    let x = input(&mut store, "x", Tensor::from_points(&nbh.points))?;
    Ok(Instance {
        store,
        build: Box::new(move |g, s| {
            let v = g.param(s, x);
            enc.forward(g, s, v, &nbh)
        }),
    })
}

fn case_decode(rng: &mut Rng) -> Result<Instance<'static>> {
    let mut store = ParamStore::new();
    let latent = dim(rng, 1, 4);
    let dec = SphereDecoder::new(&mut store, "dec", latent, dim(rng, 2, 5), rng)?;
    let l = input(&mut store, "latent", randn(&[dim(rng, 1, 2), latent], rng))?;
    let sphere = input(&mut store, "s", randn(&[dim(rng, 1, 4), 3], rng))?;
    Ok(Instance {
        store,
        build: Box::new(move |g, s| {
            let (lv, sv) = (g.param(s, l), g.param(s, sphere));
            dec.forward(g, s, lv, sv)
        }),
    })
}

fn case_composition(rng: &mut Rng) -> Result<Instance<'static>> {
    let mut store = ParamStore::new();
    let cfg = SamplerConfig {
        depth: dim(rng, 1, 3),
        hidden: dim(rng, 2, 5),
        groups: dim(rng, 2, 4),
        ..SamplerConfig::default()
    };
    let net = CompositionNet::new(&mut store, "dcs", &cfg, rng)?;
    perturb_all(&mut store, rng);
    let x = input(&mut store, "x", randn(&[dim(rng, 2, 6), 3], rng))?;
    Ok(Instance {
        store,
        build: Box::new(move |g, s| {
            let v = g.param(s, x);
            net.forward(g, s, v, Mode::Train)
        }),
    })
}

fn case_attention_block(rng: &mut Rng) -> Result<Instance<'static>> {
    let mut store = ParamStore::new();
    let cfg = BackboneConfig {
        embed_dim: 4,
        heads: 2,
        mlp_ratio: 2,
        ..BackboneConfig::default()
    };
    let block = Block::new(&mut store, "blk", &cfg, rng)?;
    perturb_all(&mut store, rng);
    let x = input(&mut store, "x", randn(&[dim(rng, 1, 2), dim(rng, 2, 3), 4], rng))?;
    Ok(Instance {
        store,
        build: Box::new(move |g, s| {
            let v = g.param(s, x);
            block.forward(g, s, v)
        }),
    })
}

/// Every checked operation, by name.
pub fn cases() -> Vec<(&'static str, Case)> {
    vec![
        ("add", case_add),
        ("sub", case_sub),
        ("mul", case_mul),
        ("div", case_div),
        ("scalar_ops", case_scalar_ops),
        ("relu", case_relu),
        ("log", case_log),
        ("exp", case_exp),
        ("sqrt", case_sqrt),
        ("square", case_square),
        ("matmul", case_matmul),
        ("permute_transpose", case_permute),
        ("linear", case_linear),
        ("layer_norm", case_layer_norm),
        ("batch_norm", case_batch_norm),
        ("softmax", case_softmax),
        ("log_softmax", case_log_softmax),
        ("reductions", case_reductions),
        ("min_max_axis", case_min_max),
        ("gather_narrow_concat", case_indexing),
        ("broadcast_to", case_broadcast_to),
        ("pairwise_sq_dist", case_pairwise),
        ("dropout", case_dropout),
        ("chamfer_l1", case_chamfer_l1),
        ("chamfer_l2", case_chamfer_l2),
        ("emd", case_emd),
        ("weighted_centers", case_weighted_centers),
        ("gumbel_softmax", case_gumbel),
        ("patch_embed", case_patch_embed),
        ("encode", case_encode),
        ("decode", case_decode),
        ("composition_net", case_composition),
        ("attention_block", case_attention_block),
    ]
}

/// Checks one operation on `instances` random instances.
pub fn check_op(name: &str, case: Case, instances: usize, step: f64, tolerance: f64, seed: u64) -> Result<OpReport> {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let inst = case(&mut rng).map_err(|e| Error::Pipeline(format!("gradcheck {name} instance {i}: {e}")))?;
        let (a, n) = gradients(&inst, step)?;
        worst = worst.max(relative_error(&a, &n));
    }
    Ok(OpReport {
        op: name.to_string(),
        instances,
        max_rel_error: worst,
        passed: worst < tolerance,
    })
}

/// Runs every case.
pub fn run_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let ops = cases()
        .into_iter()
        .enumerate()
        .map(|(i, (name, case))| {
            check_op(
                name,
                case,
                instances,
                DEFAULT_STEP,
                DEFAULT_TOLERANCE,
                Rng::new(seed).fork(i as u64).next_u64(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport {
        ops,
        elapsed: start.elapsed(),
    })
}
