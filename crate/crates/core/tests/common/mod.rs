//! Shared test oracles.
#![allow(dead_code)]

use csilocal::model::{Block, BlockKind, BoundaryDims, CsiDims, Mode, Model, ModelConfig, ModelPart, PartKind};
use csilocal::optim::Adam;
use csilocal::pipeline::PipelineConfig;
use csilocal::protocol::{minibatch_indices, FleetConfig, TrainConfig};
use csilocal::Real;
use csilocal::tensor::{Graph, Tensor, Var};
use csilocal::Result;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Uniform values kept at least `gap` away from each listed kink.
pub fn away_from(shape: &[usize], lo: f64, hi: f64, kinks: &[f64], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let v = rng.random_range(lo..hi);
        if kinks.iter().all(|k| (v - k).abs() > gap) {
            break v;
        }
    })
}

/// Norms below this are treated as zero gradients. Central differences
/// carry about `ε/h` ≈ 2e-11 of roundoff per coordinate, so 48 of them
/// stay two orders under `GRAD_FLOOR · FD_TOL`.
pub const GRAD_FLOOR: f64 = 1e-4;

/// `‖a − n‖ / max(‖a‖, ‖n‖, GRAD_FLOOR)`.
pub fn rel(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm(a).max(norm(n)).max(GRAD_FLOOR)
}

/// Largest fraction of probed coordinates allowed to straddle a kink; one
/// is always allowed so tiny bias vectors stay checkable.
pub const MAX_SKIPPED: f64 = 0.25;

/// Central differences at `coords`, `None` where a probe changes the
/// activation pattern and the difference would straddle a kink.
pub fn smooth_fd(
    mut f: impl FnMut(&Tensor<f64>) -> (f64, Vec<i8>),
    theta: &Tensor<f64>,
    coords: &[usize],
) -> Vec<Option<f64>> {
    let (_, base) = f(theta);
    let mut probe = theta.clone();
    coords
        .iter()
        .map(|&i| {
            let x = theta.data()[i];
            probe.data_mut()[i] = x + FD_STEP;
            let (up, pu) = f(&probe);
            probe.data_mut()[i] = x - FD_STEP;
            let (down, pd) = f(&probe);
            probe.data_mut()[i] = x;
            (pu == base && pd == base).then(|| (up - down) / (2.0 * FD_STEP))
        })
        .collect()
}

/// Relative error over the smooth coordinates.
pub fn rel_smooth(analytic: &[f64], numeric: &[Option<f64>]) -> f64 {
    let kept: Vec<(f64, f64)> = analytic.iter().zip(numeric).filter_map(|(a, n)| n.map(|n| (*a, n))).collect();
    let skipped = numeric.len() - kept.len();
    assert!(
        !kept.is_empty() && skipped as f64 <= (MAX_SKIPPED * numeric.len() as f64).max(1.0),
        "{skipped} of {} probes cross a kink",
        numeric.len()
    );
    let (a, n): (Vec<f64>, Vec<f64>) = kept.into_iter().unzip();
    rel(&a, &n)
}

fn pick_coords(numel: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if numel <= max {
        (0..numel).collect()
    } else {
        let mut v = sample(rng, numel, max).into_vec();
        v.sort_unstable();
        v
    }
}

/// Analytic-vs-central-difference relative error for each input of a
/// scalar function built on a graph.
pub fn gradcheck(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    max_coords: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let eval = |values: &[Tensor<f64>]| -> (f64, Vec<i8>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars).unwrap();
        (g.value(out).data()[0], g.activation_pattern())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let grads = g.backward(out).unwrap();

    (0..inputs.len())
        .map(|i| {
            let coords = pick_coords(inputs[i].numel(), max_coords, rng);
            let numeric = smooth_fd(
                |probe| {
                    let mut vals = inputs.to_vec();
                    vals[i] = probe.clone();
                    eval(&vals)
                },
                &inputs[i],
                &coords,
            );
            let analytic: Vec<f64> = match grads.get(vars[i]) {
                Some(t) => coords.iter().map(|&c| t.data()[c]).collect(),
                None => vec![0.0; coords.len()],
            };
            rel_smooth(&analytic, &numeric)
        })
        .collect()
}

/// Gradient check of a single block against an NMSE loss to a random
/// target. Returns the worst relative error over the block input and every
/// parameter tensor.
pub fn block_gradcheck(kind: BlockKind, input_shape: &[usize], mode: Mode, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut block = Block::<f64>::init(kind, &mut r);
    for s in &mut block.stats {
        s.mean.iter_mut().for_each(|m| *m = r.random_range(-0.5..0.5));
        s.var.iter_mut().for_each(|v| *v = r.random_range(0.5..2.0));
    }
    // perturb away from the zero-initialized biases and unit scales
    for t in &mut block.params {
        t.data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.3..0.3));
    }
    let part = ModelPart {
        kind: PartKind::Tail,
        input_shape: input_shape[1..].to_vec(),
        blocks: vec![block],
        bn_momentum: 0.1,
    };
    let x = uniform(input_shape, -1.0, 1.0, &mut r);
    let out_shape = {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let f = part.forward(&mut g, xv, mode).unwrap();
        g.shape(f.output).to_vec()
    };
    let target = uniform(&out_shape, 0.2, 1.0, &mut r);
    let loss = |p: &ModelPart<f64>, x: &Tensor<f64>| -> (f64, Vec<i8>) {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let f = p.forward(&mut g, xv, mode).unwrap();
        let t = g.constant(target.clone());
        let l = g.nmse(f.output, t).unwrap();
        (g.value(l).data()[0], g.activation_pattern())
    };

    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let f = part.forward(&mut g, xv, mode).unwrap();
    let t = g.constant(target.clone());
    let l = g.nmse(f.output, t).unwrap();
    let mut grads = g.backward(l).unwrap();
    let dx = grads.take(xv).unwrap();
    let dparams = part.collect_grads(&mut grads, &f);

    let coords = pick_coords(x.numel(), 48, &mut r);
    let numeric = smooth_fd(|probe| loss(&part, probe), &x, &coords);
    let analytic: Vec<f64> = coords.iter().map(|&c| dx.data()[c]).collect();
    let mut worst = rel_smooth(&analytic, &numeric);

    for (ti, grad) in dparams.iter().enumerate() {
        let theta = part.params().nth(ti).unwrap().clone();
        let coords = pick_coords(theta.numel(), 48, &mut r);
        let numeric = smooth_fd(
            |probe| {
                let mut p = part.clone();
                *p.params_mut().nth(ti).unwrap() = probe.clone();
                loss(&p, &x)
            },
            &theta,
            &coords,
        );
        let analytic: Vec<f64> = coords.iter().map(|&c| grad.data()[c]).collect();
        worst = worst.max(rel_smooth(&analytic, &numeric));
    }
    worst
}

/// Relative errors for every parameter tensor of the composed model
/// trained on an NMSE loss.
pub fn model_gradcheck(cfg: &ModelConfig, batch: usize, mode: Mode, seed: u64, max_coords: usize) -> Vec<(String, f64)> {
    let mut r = rng(seed);
    let mut model = Model::<f64>::init(cfg, seed).unwrap();
    for part in [&mut model.encoder, &mut model.tail, &mut model.head] {
        for b in &mut part.blocks {
            for s in &mut b.stats {
                s.mean.iter_mut().for_each(|m| *m = r.random_range(-0.2..0.2));
                s.var.iter_mut().for_each(|v| *v = r.random_range(0.5..1.5));
            }
        }
    }
    let shape = [batch, 2, cfg.dims.n_t, cfg.dims.n_c];
    let x = uniform(&shape, 0.0, 1.0, &mut r);
    let loss_of = |m: &Model<f64>| -> (f64, Vec<i8>) {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let t = g.constant(x.clone());
        let f = m.forward(&mut g, xv, mode).unwrap();
        let l = g.nmse(f.output(), t).unwrap();
        (g.value(l).data()[0], g.activation_pattern())
    };

    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let t = g.constant(x.clone());
    let f = model.forward(&mut g, xv, mode).unwrap();
    let l = g.nmse(f.output(), t).unwrap();
    let mut grads = g.backward(l).unwrap();
    let analytic = [
        ("encoder", model.encoder.collect_grads(&mut grads, &f.encoder)),
        ("tail", model.tail.collect_grads(&mut grads, &f.tail)),
        ("head", model.head.collect_grads(&mut grads, &f.head)),
    ];

    let mut out = Vec::new();
    for (part_name, part_grads) in analytic {
        let kind = match part_name {
            "encoder" => PartKind::Encoder,
            "tail" => PartKind::Tail,
            _ => PartKind::Head,
        };
        let names: Vec<String> = model.part(kind).named_params().into_iter().map(|(n, _)| n).collect();
        for (ti, grad) in part_grads.iter().enumerate() {
            let theta = model.part(kind).params().nth(ti).unwrap().clone();
            let coords = pick_coords(theta.numel(), max_coords, &mut r);
            let numeric = smooth_fd(
                |probe| {
                    let mut m = model.clone();
                    *m.part_mut(kind).params_mut().nth(ti).unwrap() = probe.clone();
                    loss_of(&m)
                },
                &theta,
                &coords,
            );
            let a: Vec<f64> = coords.iter().map(|&c| grad.data()[c]).collect();
            out.push((format!("{part_name}.{}", names[ti]), rel_smooth(&a, &numeric)));
        }
    }
    out
}

/// Dependency checker written against the schedule's meaning rather than
/// its construction: replays time steps and requires every slot's inputs
/// to be complete at an earlier step, every stage to do one thing per
/// step, and every (stage, micro-batch, direction) to run exactly once.
pub fn check_schedule_independently(s: &csilocal::pipeline::PipelineSchedule) -> std::result::Result<(), String> {
    use csilocal::pipeline::Direction::{Backward, Forward};
    use std::collections::{BTreeMap, HashSet};
    let mut by_time: BTreeMap<usize, Vec<_>> = BTreeMap::new();
    for slot in &s.slots {
        by_time.entry(slot.time).or_default().push(*slot);
    }
    let mut done = HashSet::new();
    for (t, slots) in by_time {
        let mut stages = HashSet::new();
        for slot in &slots {
            if !stages.insert(slot.stage) {
                return Err(format!("stage {} busy twice at {t}", slot.stage));
            }
            let needs: Vec<_> = match slot.direction {
                Forward if slot.stage == 1 => vec![],
                Forward => vec![(Forward, slot.stage - 1, slot.micro_batch)],
                // fill-drain: every forward on the last stage first
                Backward if slot.stage == s.stages => (1..=s.micro_batches).map(|m| (Forward, s.stages, m)).collect(),
                Backward => vec![(Backward, slot.stage + 1, slot.micro_batch)],
            };
            if let Some(missing) = needs.iter().find(|n| !done.contains(*n)) {
                return Err(format!("{slot:?} runs before {missing:?}"));
            }
        }
        for slot in slots {
            if !done.insert((slot.direction, slot.stage, slot.micro_batch)) {
                return Err(format!("{slot:?} repeated"));
            }
        }
    }
    if done.len() != 2 * s.stages * s.micro_batches {
        return Err(format!("{} of {} slots present", done.len(), 2 * s.stages * s.micro_batches));
    }
    Ok(())
}

/// Worst relative error of pipelined tail outputs, input gradients and
/// parameter gradients against one monolithic graph, batch norm in eval
/// mode.
pub fn pipeline_vs_monolithic(p: usize, q: usize, seed: u64) -> f64 {
    use csilocal::model::{BoundaryDims, CsiDims};
    use csilocal::pipeline::{execute_pipeline, make_schedule, partition_tail, split_microbatches};
    let cfg = ModelConfig::new(CsiDims::new(8, 8).unwrap(), BoundaryDims { c1: 16, c2: 16 });
    let mut r = rng(seed);
    let model = Model::<f32>::init(&cfg, seed).unwrap();
    let tail = model.tail;
    let rows = 12;
    let x: Tensor<f32> = uniform(&[rows, 16], -1.0, 1.0, &mut r).cast();
    let dy: Tensor<f32> = uniform(&[rows, 16], -0.1, 0.1, &mut r).cast();

    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let f = tail.forward(&mut g, xv, Mode::Eval).unwrap();
    let mut grads = g.backward_from(f.output, dy.clone()).unwrap();
    let expected = tail.collect_grads(&mut grads, &f);
    let dx = grads.take(xv).unwrap();

    let schedule = make_schedule(p, q);
    check_schedule_independently(&schedule).unwrap();
    let (out, pg) = execute_pipeline(
        &tail,
        &partition_tail(&tail, p).unwrap(),
        &split_microbatches(rows, q).unwrap(),
        &schedule,
        &x,
        &dy,
        Mode::Eval,
    )
    .unwrap();
    let wide = |t: &Tensor<f32>| t.data().iter().map(|&v| v as f64).collect::<Vec<f64>>();
    let mut worst = rel(&wide(&out), &wide(g.value(f.output)));
    worst = worst.max(rel(&wide(&pg.input), &wide(&dx)));
    for (a, b) in pg.params.iter().zip(&expected) {
        worst = worst.max(rel(&wide(a), &wide(b)));
    }
    worst
}

/// Centralized Adam on the composed model with the UE's mini-batches.
pub fn centralized(cfg: &TrainConfig, data: &Tensor<f32>, iterations: usize) -> Model<f32> {
    let mut model = Model::<f32>::init(&cfg.model, cfg.fleet.seed).unwrap();
    let mut opts: Vec<Adam> = [&model.encoder, &model.tail, &model.head]
        .iter()
        .map(|p| Adam::new(p.params(), cfg.optimizer).unwrap())
        .collect();
    for it in 1..=iterations {
        let idx = minibatch_indices(cfg.fleet.seed, 0, it, data.rows(), cfg.fleet.batch);
        let batch = data.gather_rows(&idx).unwrap();
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let t = g.constant(batch);
        let f = model.forward(&mut g, x, cfg.batch_norm).unwrap();
        let l = g.nmse(f.output(), t).unwrap();
        let mut grads = g.backward(l).unwrap();
        let ge = model.encoder.collect_grads(&mut grads, &f.encoder);
        let gt = model.tail.collect_grads(&mut grads, &f.tail);
        let gh = model.head.collect_grads(&mut grads, &f.head);
        opts[0].step(model.encoder.params_mut(), &ge).unwrap();
        opts[1].step(model.tail.params_mut(), &gt).unwrap();
        opts[2].step(model.head.params_mut(), &gh).unwrap();
    }
    model
}

pub fn all_params(m: &Model<f32>) -> Vec<Tensor<f32>> {
    m.encoder.params().chain(m.tail.params()).chain(m.head.params()).cloned().collect()
}

/// 8×8 CSI, `c1 = c2 = 16`, learning rate 1e-3.
pub fn train_config(ues: usize, m: usize, b: usize, pipeline: PipelineConfig, mode: Mode) -> TrainConfig {
    let fleet = FleetConfig {
        ues,
        samples_per_ue: m,
        batch: b,
        iterations: 1,
        seed: 3,
    };
    let model = ModelConfig::new(CsiDims::new(8, 8).unwrap(), BoundaryDims { c1: 16, c2: 16 });
    let mut cfg = TrainConfig::new(fleet, model);
    cfg.optimizer.eta = 1e-3;
    cfg.pipeline = pipeline;
    cfg.batch_norm = mode;
    cfg
}

pub fn shard<T: Real>(rows: usize, seed: u64) -> Tensor<T> {
    let mut r = rng(seed);
    uniform(&[rows, 2, 8, 8], 0.05, 0.95, &mut r).cast()
}

pub fn max_rel<T: Real>(a: &[Tensor<T>], b: &[Tensor<T>]) -> f64 {
    let wide = |t: &Tensor<T>| t.data().iter().map(|v| v.wide()).collect::<Vec<f64>>();
    a.iter().zip(b).map(|(x, y)| rel(&wide(x), &wide(y))).fold(0.0, f64::max)
}
