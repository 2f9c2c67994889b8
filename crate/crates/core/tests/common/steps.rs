use dgl_lab::autodiff::{sgd_step, ParamGroup, Tape, Var};
use dgl_lab::model::{FusionSpec, MultimodalModel};
use dgl_lab::train::{self, accumulate_grads, Batch, Mode, TrainConfig};

use super::{bits, max_abs_diff, random_batch, rng, small_model};

pub fn cfg(mode: Mode, alpha: f64) -> TrainConfig {
    TrainConfig {
        mode,
        alpha,
        lr: 0.05,
        momentum: 0.9,
        weight_decay: 1e-3,
        epochs: 1,
        batch_size: 8,
        ..TrainConfig::default()
    }
}

pub fn batch(model: &MultimodalModel, seed: u64, n: usize) -> Batch {
    let (inputs, labels) = random_batch(&mut rng(seed), model, n);
    Batch { inputs, labels }
}

pub fn grads(groups: &[ParamGroup]) -> Vec<Vec<f64>> {
    groups
        .iter()
        .flat_map(|g| &g.params)
        .map(|p| p.value.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.value.numel()]))
        .collect()
}

pub fn group_grads(model: &MultimodalModel, g: usize) -> Vec<Vec<f64>> {
    grads(&model.groups()[g..=g])
}

pub fn values(groups: &[ParamGroup]) -> Vec<Vec<f64>> {
    groups.iter().flat_map(|g| &g.params).map(|p| p.value.data().to_vec()).collect()
}

pub fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| max_abs_diff(x, y)).fold(0.0, f64::max)
}

/// Gradients of `scale * loss(paths)` for an arbitrary combination of losses.
pub fn loss_grads(
    model: &MultimodalModel,
    b: &Batch,
    f: impl Fn(&MultimodalModel, &mut Tape, &[Var]) -> dgl_lab::Result<Var>,
) -> MultimodalModel {
    let mut m = model.clone();
    m.clear_grads();
    let mut tape = Tape::new();
    let reps = m.encode(&mut tape, &b.inputs).unwrap();
    let loss = f(&m, &mut tape, &reps).unwrap();
    tape.backward_into(loss, m.groups_mut()).unwrap();
    m
}

/// `alpha * sum_k L^{m_k}` over the modality-dropout logits.
pub fn uni_sum(alpha: f64, labels: &[usize]) -> impl Fn(&MultimodalModel, &mut Tape, &[Var]) -> dgl_lab::Result<Var> + '_ {
    move |m, tape, reps| {
        let mut total = None;
        for k in 0..m.num_modalities() {
            let logits = m.logits_unimodal(tape, reps, k)?;
            let l = tape.softmax_cross_entropy(logits, labels)?;
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
        }
        Ok(tape.scale(total.unwrap(), alpha))
    }
}

pub fn detached(labels: &[usize]) -> impl Fn(&MultimodalModel, &mut Tape, &[Var]) -> dgl_lab::Result<Var> + '_ {
    move |m, tape, reps| {
        let logits = m.logits_detached(tape, reps)?;
        tape.softmax_cross_entropy(logits, labels)
    }
}

pub fn full(labels: &[usize]) -> impl Fn(&MultimodalModel, &mut Tape, &[Var]) -> dgl_lab::Result<Var> + '_ {
    move |m, tape, reps| {
        let logits = m.logits_full(tape, reps)?;
        tape.softmax_cross_entropy(logits, labels)
    }
}

/// One dgl step composed from two independent half-steps.
pub fn composed_dgl_step(model: &MultimodalModel, b: &Batch, c: &TrainConfig) -> MultimodalModel {
    let m = model.num_modalities();
    let opt = c.sgd(c.lr);
    let mut enc = loss_grads(model, b, uni_sum(c.alpha, &b.labels));
    sgd_step(&mut enc.groups_mut()[..m], &opt).unwrap();
    let mut head = loss_grads(model, b, detached(&b.labels));
    sgd_step(&mut head.groups_mut()[m..], &opt).unwrap();

    let mut out = model.clone();
    out.groups_mut()[..m].clone_from_slice(&enc.groups()[..m]);
    out.groups_mut()[m..].clone_from_slice(&head.groups()[m..]);
    out.clear_grads();
    out
}


/// Largest parameter difference between `step_dgl` and the composed
/// half-steps over `seeds`, three consecutive steps each, both fusions.
pub fn decoupling_max_diff(seeds: std::ops::Range<u64>) -> f64 {
    let mut worst = 0.0f64;
    for fusion in [FusionSpec::concat(), FusionSpec::mlp(5)] {
        for seed in seeds.clone() {
            let mut model = small_model(seed, fusion.clone());
            let c = cfg(Mode::Dgl, 1.0 + (seed % 4) as f64);
            for s in 0..3 {
                let b = batch(&model, 100 * seed + s, 6);
                let expected = composed_dgl_step(&model, &b, &c);
                train::step_dgl(&mut model, &b, &c).unwrap();
                worst = worst.max(max_diff(&values(model.groups()), &values(expected.groups())));
                model = expected;
            }
        }
    }
    worst
}

/// Whether `steps` alpha = 0 updates in `mode` leave every encoder bitwise unchanged.
pub fn alpha_zero_keeps_encoders(mode: Mode, steps: u64) -> bool {
    let mut model = small_model(5, FusionSpec::mlp(4));
    let before: Vec<_> = (0..2).map(|k| model.groups()[k].clone()).collect();
    let c = cfg(mode, 0.0);
    for s in 0..steps {
        let b = batch(&model, s, 7);
        train::step(&mut model, &b, &c).unwrap();
    }
    before.iter().enumerate().all(|(k, g)| {
        g.params.iter().zip(&model.groups()[k].params).all(|(p, q)| bits(&p.value) == bits(&q.value))
    })
}

/// Worst relative deviation of dgl encoder gradients from exact linearity in alpha.
pub fn alpha_linearity_deviation(seeds: std::ops::Range<u64>) -> f64 {
    let mut worst = 0.0f64;
    for seed in seeds {
        let model = small_model(seed, FusionSpec::concat());
        let b = batch(&model, seed + 3, 6);
        let mut base = model.clone();
        accumulate_grads(&mut base, &b, &cfg(Mode::Dgl, 1.0)).unwrap();
        for c in [0.5, 2.0, 4.0] {
            let mut scaled = model.clone();
            accumulate_grads(&mut scaled, &b, &cfg(Mode::Dgl, c)).unwrap();
            for k in 0..2 {
                let expect: Vec<Vec<f64>> = group_grads(&base, k)
                    .iter()
                    .map(|g| g.iter().map(|x| c * x).collect())
                    .collect();
                let scale = expect.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
                worst = worst.max(max_diff(&group_grads(&scaled, k), &expect) / scale);
            }
        }
    }
    worst
}
