use super::{
    canonical_sphere, freeze_snapshot, mean_of, verify_frozen, LossLog, Model, StageOptions, StageRun, STAGE1_STREAM,
    STAGE2_STREAM, STAGE3_STREAM,
};
use crate::backbone::{local_recon_loss, mask_indices, BACKBONE_PREFIX};
use crate::error::{Error, Result};
use crate::geometry::{chamfer, chamfer_value, emd, fps, knn_indices, relative_patches, ChamferForm, Point, PointCloud};
use crate::io::{Checkpoint, Dataset, RunConfig, Stage, TrainPlan};
use crate::rng::Rng;
use crate::sampler::{
    dcs_forward, global_recon_loss, stage2_loss, uniform_prior_penalty, Neighborhood, COMPOSITION_PREFIX,
    DECODER_PREFIX, ENCODER_PREFIX,
};
use crate::tensor::{gumbel_noise, AdamW, Graph, Mode, Tensor, Var};

pub(crate) type Aux = Vec<(String, Vec<f64>)>;

/// Shared epoch loop: schedule, optimizer, resume, per-epoch rounding of
/// parameters to checkpoint precision, and the final checkpoint.
#[allow(clippy::too_many_arguments)]
pub(crate) fn train_loop(
    stage: Stage,
    model: &mut Model,
    plan: &TrainPlan,
    opts: &StageOptions,
    seed_rng: &Rng,
    terms: &[&str],
    aux: &mut Aux,
    mut epoch_fn: impl FnMut(&mut Model, &mut AdamW, usize, &mut Rng, &mut Aux) -> Result<Vec<f64>>,
) -> Result<(LossLog, Checkpoint)> {
    let mut opt = AdamW::new(plan.schedule.base_lr, plan.weight_decay);
    let mut start = 1;
    if let Some(ck) = &opts.resume {
        if ck.stage != stage {
            return Err(Error::Pipeline(format!(
                "cannot resume {} from a {} checkpoint",
                stage.name(),
                ck.stage.name()
            )));
        }
        ck.apply(&mut model.store)?;
        let (done, _) = ck
            .restore_training(&model.store, &mut opt)?
            .ok_or_else(|| Error::Pipeline("resume checkpoint has no training state".into()))?;
        start = done as usize + 1;
        aux.clone_from(&ck.state.as_ref().expect("checked above").aux);
    }
    model.store.snap_to_f32();
    let last = opts.stop_after.unwrap_or(plan.epochs).min(plan.epochs);
    let mut log = LossLog::new(terms);
    for epoch in start..=last {
        opt.lr = plan.schedule.lr_at(epoch)?;
        let mut rng = seed_rng.fork(epoch as u64);
        let values = epoch_fn(model, &mut opt, epoch, &mut rng, aux)?;
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Pipeline(format!("{} epoch {epoch}: non-finite loss {bad}", stage.name())));
        }
        model.store.snap_to_f32();
        log.push(epoch, opt.lr, values);
    }
    let mut ck = Checkpoint::capture(stage, &model.store).with_state(&model.store, &opt, seed_rng, last as u64);
    ck.state.as_mut().expect("just set").aux = aux.clone();
    Ok((log, ck))
}

pub(crate) fn backward_step(g: &mut Graph, model: &mut Model, opt: &mut AdamW, loss: Var) -> Result<()> {
    g.backward(loss)?;
    model.store.zero_grad();
    model.store.absorb(g);
    opt.step(&mut model.store)
}

fn require_train(data: &Dataset) -> Result<&[PointCloud]> {
    if data.train.is_empty() {
        return Err(Error::Pipeline("training split is empty".into()));
    }
    Ok(&data.train)
}

fn sphere_for(cfg: &RunConfig) -> Result<Tensor> {
    Ok(Tensor::from_points(&canonical_sphere(cfg.data.points)?))
}

/// Trains the sphere encoder and decoder on chamfer plus matching loss.
pub fn run_stage1(cfg: &RunConfig, data: &Dataset, seed: u64, opts: &StageOptions) -> Result<StageRun> {
    let clouds = require_train(data)?;
    let plan = cfg.stage1.plan()?;
    let mut model = Model::new(cfg, seed, None)?;
    model.store.set_trainable_only(&[ENCODER_PREFIX, DECODER_PREFIX]);
    let frozen = freeze_snapshot(&model.store, &[COMPOSITION_PREFIX, BACKBONE_PREFIX]);
    let nbhs = clouds
        .iter()
        .map(|c| Neighborhood::build(&c.points, cfg.sampler.edge_k))
        .collect::<Result<Vec<_>>>()?;
    let sphere = sphere_for(cfg)?;
    let w = cfg.loss.emd_weight;
    let latent = cfg.sampler.latent_dim;
    let mut aux: Aux = Vec::new();
    let seed_rng = Rng::new(seed).fork(STAGE1_STREAM);
    let (log, checkpoint) = train_loop(
        Stage::Stage1,
        &mut model,
        &plan,
        opts,
        &seed_rng,
        &["loss", "chamfer", "emd"],
        &mut aux,
        |model, opt, _epoch, rng, aux| {
            if aux.len() != clouds.len() {
                *aux = (0..clouds.len()).map(|i| (format!("emd_warm.{i}"), Vec::new())).collect();
            }
            let mut order: Vec<usize> = (0..clouds.len()).collect();
            rng.shuffle(&mut order);
            let (mut sum_cd, mut sum_emd) = (0.0, 0.0);
            for chunk in order.chunks(plan.batch_size) {
                let mut g = Graph::new();
                let mut lat = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let p = g.input(Tensor::from_points(&nbhs[i].points));
                    let l = model.sampler.encoder.forward(&mut g, &model.store, p, &nbhs[i])?;
                    lat.push(g.reshape(l, &[1, latent])?);
                }
                let lat = if lat.len() == 1 { lat[0] } else { g.concat(&lat, 0)? };
                let s = g.input(sphere.clone());
                let decoded = model.sampler.decoder.forward(&mut g, &model.store, lat, s)?;
                let m = sphere.shape()[0];
                let mut losses = Vec::with_capacity(chunk.len());
                for (b, &i) in chunk.iter().enumerate() {
                    let d = g.narrow(decoded, 0, b, 1)?;
                    let d = g.reshape(d, &[m, 3])?;
                    let c = g.input(clouds[i].to_tensor());
                    let cd = chamfer(&mut g, d, c, ChamferForm::L2)?;
                    sum_cd += g.value(cd).item();
                    let total = if w != 0.0 {
                        let (e, _) = emd(&mut g, d, c, Some(&mut aux[i].1))?;
                        sum_emd += g.value(e).item();
                        let e = g.mul_scalar(e, w);
                        g.add(cd, e)?
                    } else {
                        cd
                    };
                    losses.push(total);
                }
                let loss = mean_of(&mut g, &losses)?;
                backward_step(&mut g, model, opt, loss)?;
            }
            let n = clouds.len() as f64;
            Ok(vec![(sum_cd + w * sum_emd) / n, sum_cd / n, sum_emd / n])
        },
    )?;
    let frozen = verify_frozen(&model.store, frozen)?;
    Ok(StageRun {
        checkpoint,
        log,
        frozen,
    })
}

/// Decoded canonical sphere of each cloud under the stage-1 networks.
pub(crate) fn decode_clouds(model: &Model, cfg: &RunConfig, clouds: &[PointCloud]) -> Result<Vec<Vec<Point>>> {
    let sphere = canonical_sphere(cfg.data.points)?;
    clouds
        .iter()
        .map(|c| {
            let l = model.sampler.encoder.encode(&model.store, &c.points)?;
            model.sampler.decoder.decode(&model.store, &l, &sphere)
        })
        .collect()
}

/// Trains the composition net on decoded sphere points with the stage-1
/// networks frozen.
pub fn run_stage2(
    cfg: &RunConfig,
    data: &Dataset,
    stage1: &Checkpoint,
    seed: u64,
    opts: &StageOptions,
) -> Result<StageRun> {
    let clouds = require_train(data)?;
    let plan = cfg.stage2.plan()?;
    let mut model = Model::from_checkpoint(cfg, seed, None, stage1, Stage::Stage1)?;
    model.store.set_trainable_only(&[COMPOSITION_PREFIX]);
    let frozen = freeze_snapshot(&model.store, &[ENCODER_PREFIX, DECODER_PREFIX, BACKBONE_PREFIX]);
    let decoded: Vec<Tensor> = decode_clouds(&model, cfg, clouds)?
        .iter()
        .map(|d| Tensor::from_points(d))
        .collect();
    let sphere = sphere_for(cfg)?;
    let prior_w = cfg.sampler.prior_weight;
    let normalize = cfg.sampler.normalize_columns;
    let seed_rng = Rng::new(seed).fork(STAGE2_STREAM);
    let (log, checkpoint) = train_loop(
        Stage::Stage2,
        &mut model,
        &plan,
        opts,
        &seed_rng,
        &["loss", "chamfer", "prior"],
        &mut Vec::new(),
        |model, opt, _epoch, rng, _| {
            let mut order: Vec<usize> = (0..clouds.len()).collect();
            rng.shuffle(&mut order);
            let (mut sum_cd, mut sum_prior, mut batches) = (0.0, 0.0, 0usize);
            for chunk in order.chunks(plan.batch_size) {
                let mut g = Graph::new();
                let s = g.input(sphere.clone());
                let q = model.sampler.composition.forward(&mut g, &model.store, s, Mode::Train)?;
                let mut losses = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let d = g.input(decoded[i].clone());
                    let c = g.input(clouds[i].to_tensor());
                    let l = stage2_loss(&mut g, c, d, q, normalize)?;
                    sum_cd += g.value(l).item();
                    losses.push(l);
                }
                let mut loss = mean_of(&mut g, &losses)?;
                let prior = uniform_prior_penalty(&mut g, q)?;
                sum_prior += g.value(prior).item();
                batches += 1;
                if prior_w != 0.0 {
                    let p = g.mul_scalar(prior, prior_w);
                    loss = g.add(loss, p)?;
                }
                backward_step(&mut g, model, opt, loss)?;
            }
            let cd = sum_cd / clouds.len() as f64;
            let prior = sum_prior / batches as f64;
            Ok(vec![cd + prior_w * prior, cd, prior])
        },
    )?;
    let frozen = verify_frozen(&model.store, frozen)?;
    Ok(StageRun {
        checkpoint,
        log,
        frozen,
    })
}

/// Mean center-set chamfer of learned composition points against FPS
/// centers of the same size.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterQuality {
    pub learned: f64,
    pub fps: f64,
    /// Per cloud `(learned, fps)`.
    pub per_cloud: Vec<(f64, f64)>,
}

/// Composition points of each cloud (decoded sphere weighted by the
/// eval-mode probability map) compared with FPS centers.
pub fn stage2_center_quality(cfg: &RunConfig, model: &Model, clouds: &[PointCloud]) -> Result<CenterQuality> {
    if clouds.is_empty() {
        return Err(Error::Pipeline("no clouds to evaluate".into()));
    }
    let sphere = canonical_sphere(cfg.data.points)?;
    let q = model
        .sampler
        .composition
        .probability_map(&model.store, &sphere, Mode::Eval)?;
    let decoded = decode_clouds(model, cfg, clouds)?;
    let mut per_cloud = Vec::with_capacity(clouds.len());
    for (cloud, dec) in clouds.iter().zip(&decoded) {
        let mut g = Graph::new();
        let d = g.input(Tensor::from_points(dec));
        let w = g.input(q.matrix.clone());
        let centers = crate::geometry::weighted_centers(&mut g, d, w, cfg.sampler.normalize_columns)?;
        let learned = chamfer_value(&g.value(centers).to_points(), &cloud.points, ChamferForm::L2)?;
        let idx = fps(&cloud.points, cfg.sampler.groups, 0)?;
        let f: Vec<Point> = idx.iter().map(|&i| cloud.points[i]).collect();
        per_cloud.push((learned, chamfer_value(&f, &cloud.points, ChamferForm::L2)?));
    }
    let n = per_cloud.len() as f64;
    Ok(CenterQuality {
        learned: per_cloud.iter().map(|p| p.0).sum::<f64>() / n,
        fps: per_cloud.iter().map(|p| p.1).sum::<f64>() / n,
        per_cloud,
    })
}

/// Graph handles of one stage-3 forward pass.
struct JointPass {
    local: Var,
    global: Var,
    prior: Var,
}

/// Differentiable sampling, patching, masking and both reconstruction
/// losses for a batch of clouds.
fn joint_forward(
    g: &mut Graph,
    model: &Model,
    cfg: &RunConfig,
    clouds: &[&PointCloud],
    temperature: f64,
    rng: &mut Rng,
) -> Result<JointPass> {
    let (groups, k) = (cfg.sampler.groups, cfg.sampler.group_size);
    let vars: Vec<Var> = clouds.iter().map(|c| g.input(c.to_tensor())).collect();
    let noise: Vec<Tensor> = clouds
        .iter()
        .map(|c| gumbel_noise(&[c.len(), groups], rng))
        .collect();
    let dcs = dcs_forward(
        g,
        &model.store,
        &model.sampler.composition,
        &cfg.sampler,
        &vars,
        temperature,
        Some(&noise),
        Mode::Train,
    )?;
    let mut patches = Vec::with_capacity(clouds.len());
    let mut centers = Vec::with_capacity(clouds.len());
    let mut priors = Vec::with_capacity(clouds.len());
    for ((cloud, &var), d) in clouds.iter().zip(&vars).zip(&dcs) {
        let idx = knn_indices(&cloud.points, &g.value(d.centers).to_points(), k)?;
        let rel = relative_patches(g, var, d.centers, &idx, k)?;
        patches.push(g.reshape(rel, &[1, groups, k, 3])?);
        centers.push(g.reshape(d.centers, &[1, groups, 3])?);
        priors.push(uniform_prior_penalty(g, d.weights)?);
    }
    let patches = g.concat(&patches, 0)?;
    let centers_b = g.concat(&centers, 0)?;
    let masks = (0..clouds.len())
        .map(|_| mask_indices(groups, cfg.backbone.mask_ratio, rng))
        .collect::<Result<Vec<_>>>()?;
    let rec = model.mae.reconstruct(g, &model.store, patches, centers_b, &masks)?;
    let local = local_recon_loss(g, rec.predicted, rec.target)?;
    let center_sets: Vec<Var> = dcs.iter().map(|d| d.centers).collect();
    let global = global_recon_loss(g, &center_sets, &vars, cfg.loss.global_loss)?;
    let prior = mean_of(g, &priors)?;
    Ok(JointPass { local, global, prior })
}

/// Joint training of the composition net and the masked autoencoder; the
/// stage-1 networks stay frozen.
pub fn run_stage3(
    cfg: &RunConfig,
    data: &Dataset,
    stage2: &Checkpoint,
    seed: u64,
    opts: &StageOptions,
) -> Result<StageRun> {
    let clouds = require_train(data)?;
    let plan = cfg.stage3.plan()?;
    let mut model = Model::from_checkpoint(cfg, seed, None, stage2, Stage::Stage2)?;
    model.store.set_trainable_only(&[COMPOSITION_PREFIX, BACKBONE_PREFIX]);
    let frozen = freeze_snapshot(&model.store, &[ENCODER_PREFIX, DECODER_PREFIX]);
    let (wl, wg, wp) = (cfg.loss.local_weight, cfg.loss.global_weight, cfg.sampler.prior_weight);
    let seed_rng = Rng::new(seed).fork(STAGE3_STREAM);
    let (log, checkpoint) = train_loop(
        Stage::Stage3,
        &mut model,
        &plan,
        opts,
        &seed_rng,
        &["loss", "local", "global"],
        &mut Vec::new(),
        |model, opt, epoch, rng, _| {
            let mut order: Vec<usize> = (0..clouds.len()).collect();
            rng.shuffle(&mut order);
            let temperature = cfg.sampler.temperature_at(epoch);
            let (mut sum_local, mut sum_global, mut sum_total) = (0.0, 0.0, 0.0);
            for chunk in order.chunks(plan.batch_size) {
                let batch: Vec<&PointCloud> = chunk.iter().map(|&i| &clouds[i]).collect();
                let mut g = Graph::new();
                let pass = joint_forward(&mut g, model, cfg, &batch, temperature, rng)?;
                let l = g.mul_scalar(pass.local, wl);
                let gl = g.mul_scalar(pass.global, wg);
                let mut loss = g.add(l, gl)?;
                if wp != 0.0 {
                    let p = g.mul_scalar(pass.prior, wp);
                    loss = g.add(loss, p)?;
                }
                let b = chunk.len() as f64;
                sum_local += b * g.value(pass.local).item();
                sum_global += b * g.value(pass.global).item();
                sum_total += b * g.value(loss).item();
                backward_step(&mut g, model, opt, loss)?;
            }
            let n = clouds.len() as f64;
            Ok(vec![sum_total / n, sum_local / n, sum_global / n])
        },
    )?;
    let frozen = verify_frozen(&model.store, frozen)?;
    Ok(StageRun {
        checkpoint,
        log,
        frozen,
    })
}

/// Gradient norm of the center reconstruction loss with respect to the
/// composition net, for one batch at fixed noise. With `detach` the centers
/// are cut from the graph before the loss.
pub fn global_grad_norm(cfg: &RunConfig, model: &Model, clouds: &[PointCloud], detach: bool, seed: u64) -> Result<f64> {
    if clouds.is_empty() {
        return Err(Error::Pipeline("no clouds for the gradient probe".into()));
    }
    let mut store = model.store.clone();
    store.set_trainable_only(&[COMPOSITION_PREFIX]);
    let mut rng = Rng::new(seed);
    let mut g = Graph::new();
    let vars: Vec<Var> = clouds.iter().map(|c| g.input(c.to_tensor())).collect();
    let noise: Vec<Tensor> = clouds
        .iter()
        .map(|c| gumbel_noise(&[c.len(), cfg.sampler.groups], &mut rng))
        .collect();
    let dcs = dcs_forward(
        &mut g,
        &store,
        &model.sampler.composition,
        &cfg.sampler,
        &vars,
        cfg.sampler.temperature,
        Some(&noise),
        Mode::Train,
    )?;
    let centers: Vec<Var> = dcs
        .iter()
        .map(|d| if detach { g.detach(d.centers) } else { d.centers })
        .collect();
    let loss = global_recon_loss(&mut g, &centers, &vars, cfg.loss.global_loss)?;
    g.backward(loss)?;
    store.zero_grad();
    store.absorb(&mut g);
    Ok(store.grad_norm(COMPOSITION_PREFIX))
}
