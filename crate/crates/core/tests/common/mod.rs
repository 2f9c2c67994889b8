#![allow(dead_code)]

pub mod steps;

use dgl_lab::analysis::{close, finite_difference_oracle, DEFAULT_STEP};
use dgl_lab::autodiff::{Tape, Tensor, Var};
use dgl_lab::model::{EncoderSpec, FusionSpec, ModelSpec, MultimodalModel};
use dgl_lab::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ABS_TOL: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), uniform(rng, n, -2.0, 2.0)).unwrap()
}

/// Values bounded away from zero, so relu has no kink within the FD step.
pub fn rand_tensor_off_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let mut t = rand_tensor(rng, shape);
    for v in t.data_mut() {
        if v.abs() < 1e-2 {
            *v = if *v < 0.0 { -0.5 } else { 0.5 };
        }
    }
    t
}

/// Worst-case gradient discrepancy of a graph against central differences.
#[derive(Debug, Default, Clone, Copy)]
pub struct OracleReport {
    pub checked: usize,
    pub failures: usize,
    /// Largest `|a - b| / max(abs_tol, rel_tol * max(|a|, |b|))` seen.
    pub worst_ratio: f64,
}

impl OracleReport {
    pub fn merge(&mut self, other: OracleReport) {
        self.checked += other.checked;
        self.failures += other.failures;
        self.worst_ratio = self.worst_ratio.max(other.worst_ratio);
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }

    pub fn record(&mut self, autodiff: f64, oracle: f64) {
        self.checked += 1;
        let scale = ABS_TOL.max(REL_TOL * autodiff.abs().max(oracle.abs()));
        self.worst_ratio = self.worst_ratio.max((autodiff - oracle).abs() / scale);
        if !close(autodiff, oracle, ABS_TOL, REL_TOL) {
            self.failures += 1;
        }
    }
}

/// Reduces a node to a scalar by a fixed random weighting, so every output
/// element contributes to the checked gradient.
fn reduce(tape: &mut Tape, out: Var, weights: &[f64]) -> Result<Var> {
    if tape.shape(out).is_empty() {
        return Ok(out);
    }
    let w = tape.constant(tape.shape(out).to_vec(), weights.to_vec())?;
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Checks the gradient of `build(inputs)` with respect to every input against
/// central differences. `build` receives the input vars in order.
pub fn check_graph<F>(inputs: &[Tensor], weight_seed: u64, build: F) -> Result<OracleReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| tape.input(&t.clone().with_requires_grad(true)))
            .collect();
        let out = build(&mut tape, &vars)?;
        let n: usize = tape.shape(out).iter().product();
        let weights = uniform(&mut rng(weight_seed), n, 0.5, 1.5);
        let loss = reduce(&mut tape, out, &weights)?;
        Ok((tape, vars, loss))
    };

    let (mut tape, vars, loss) = eval(inputs)?;
    tape.backward(loss)?;
    let mut report = OracleReport::default();
    for (i, (&v, t)) in vars.iter().zip(inputs).enumerate() {
        let analytic = tape
            .grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        let numeric = finite_difference_oracle(
            |x| {
                let mut values = inputs.to_vec();
                values[i] = Tensor::new(t.shape().to_vec(), x.to_vec())?;
                let (tape, _, loss) = eval(&values)?;
                tape.scalar(loss)
            },
            t.data(),
            DEFAULT_STEP,
        )?;
        for (a, b) in analytic.iter().zip(&numeric) {
            report.record(*a, *b);
        }
    }
    Ok(report)
}

pub fn small_spec(fusion: FusionSpec, dims: &[usize], out: usize, classes: usize) -> ModelSpec {
    ModelSpec {
        encoders: dims
            .iter()
            .map(|&d| EncoderSpec {
                input_dim: d,
                hidden_dims: vec![4],
                output_dim: out,
            })
            .collect(),
        fusion,
        num_classes: classes,
    }
}

pub fn small_model(seed: u64, fusion: FusionSpec) -> MultimodalModel {
    MultimodalModel::new(small_spec(fusion, &[3, 2], 3, 3), &mut rng(seed)).unwrap()
}

pub fn random_batch(rng: &mut impl Rng, model: &MultimodalModel, n: usize) -> (Vec<Tensor>, Vec<usize>) {
    let inputs = model
        .spec()
        .encoders
        .iter()
        .map(|e| rand_tensor(rng, &[n, e.input_dim]))
        .collect();
    let labels = (0..n).map(|_| rng.random_range(0..model.num_classes())).collect();
    (inputs, labels)
}

pub fn multi_loss(model: &MultimodalModel, inputs: &[Tensor], labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let logits = model.forward_full(&mut tape, inputs)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    tape.scalar(loss)
}

/// Parameter gradients of the multimodal loss against central differences on
/// every parameter coordinate.
pub fn check_model_gradients(model: &MultimodalModel, inputs: &[Tensor], labels: &[usize]) -> Result<OracleReport> {
    let mut m = model.clone();
    m.clear_grads();
    let mut tape = Tape::new();
    let logits = m.forward_full(&mut tape, inputs)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    tape.backward_into(loss, m.groups_mut())?;

    let mut report = OracleReport::default();
    for g in 0..m.groups().len() {
        for p in 0..m.groups()[g].params.len() {
            let param = &m.groups()[g].params[p];
            let analytic = param
                .value
                .grad()
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; param.value.numel()]);
            let numeric = finite_difference_oracle(
                |x| {
                    let mut probe = model.clone();
                    probe.groups_mut()[g].params[p].value.data_mut().copy_from_slice(x);
                    multi_loss(&probe, inputs, labels)
                },
                param.value.data(),
                DEFAULT_STEP,
            )?;
            for (a, b) in analytic.iter().zip(&numeric) {
                report.record(*a, *b);
            }
        }
    }
    Ok(report)
}

pub fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub const OP_NAMES: [&str; 11] = [
    "matmul",
    "transpose",
    "add_bias",
    "add",
    "mul",
    "scale",
    "sum",
    "concat",
    "relu",
    "softmax_cross_entropy",
    "detach",
];

/// One random instance of primitive `op`, checked against central differences.
pub fn check_op(op: &str, seed: u64) -> Result<OracleReport> {
    let mut r = rng(seed);
    let n = r.random_range(1..5);
    let p = r.random_range(1..5);
    let q = r.random_range(1..5);
    match op {
        "matmul" => {
            let ins = [rand_tensor(&mut r, &[n, p]), rand_tensor(&mut r, &[p, q])];
            check_graph(&ins, seed, |t, v| t.matmul(v[0], v[1]))
        }
        "transpose" => {
            let ins = [rand_tensor(&mut r, &[n, p])];
            check_graph(&ins, seed, |t, v| t.transpose(v[0]))
        }
        "add_bias" => {
            let ins = [rand_tensor(&mut r, &[n, p]), rand_tensor(&mut r, &[p])];
            check_graph(&ins, seed, |t, v| t.add_bias(v[0], v[1]))
        }
        "add" => {
            let ins = [rand_tensor(&mut r, &[n, p]), rand_tensor(&mut r, &[n, p])];
            check_graph(&ins, seed, |t, v| t.add(v[0], v[1]))
        }
        "mul" => {
            let ins = [rand_tensor(&mut r, &[n, p]), rand_tensor(&mut r, &[n, p])];
            check_graph(&ins, seed, |t, v| t.mul(v[0], v[1]))
        }
        "scale" => {
            let c = r.random_range(-3.0..3.0);
            let ins = [rand_tensor(&mut r, &[n, p])];
            check_graph(&ins, seed, move |t, v| Ok(t.scale(v[0], c)))
        }
        "sum" => {
            let ins = [rand_tensor(&mut r, &[n, p])];
            check_graph(&ins, seed, |t, v| Ok(t.sum(v[0])))
        }
        "concat" => {
            let ins = [
                rand_tensor(&mut r, &[n, p]),
                rand_tensor(&mut r, &[n, q]),
                rand_tensor(&mut r, &[n, 1]),
            ];
            check_graph(&ins, seed, |t, v| t.concat(v))
        }
        "relu" => {
            let ins = [rand_tensor_off_zero(&mut r, &[n, p])];
            check_graph(&ins, seed, |t, v| Ok(t.relu(v[0])))
        }
        "softmax_cross_entropy" => {
            let k = p + 1;
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
            let ins = [rand_tensor(&mut r, &[n, k])];
            check_graph(&ins, seed, move |t, v| t.softmax_cross_entropy(v[0], &labels))
        }
        "detach" => {
            // x * detach(x): the detached factor is a constant, so the
            // reference function is x * x0 with x0 frozen at the base point.
            let x0 = rand_tensor(&mut r, &[n, p]);
            let weights = uniform(&mut rng(seed), n * p, 0.5, 1.5);
            let mut tape = Tape::new();
            let x = tape.input(&x0.clone().with_requires_grad(true));
            let d = tape.detach(x);
            let prod = tape.mul(x, d)?;
            let w = tape.constant(vec![n, p], weights.clone())?;
            let weighted = tape.mul(prod, w)?;
            let loss = tape.sum(weighted);
            tape.backward(loss)?;
            let analytic = tape.grad(x).expect("x reaches the loss").to_vec();
            let frozen = x0.data().to_vec();
            let numeric = finite_difference_oracle(
                |x| Ok(x.iter().zip(&frozen).zip(&weights).map(|((a, b), w)| a * b * w).sum()),
                x0.data(),
                DEFAULT_STEP,
            )?;
            let mut report = OracleReport::default();
            for (a, b) in analytic.iter().zip(&numeric) {
                report.record(*a, *b);
            }
            Ok(report)
        }
        other => panic!("unknown op {other}"),
    }
}

/// A random concat head: `K` classes, two blocks of widths `dims`.
pub struct RandomHead {
    pub weight: Tensor,
    pub bias: Tensor,
    pub dims: Vec<usize>,
    pub classes: usize,
}

pub fn random_head(r: &mut impl Rng) -> RandomHead {
    let classes = r.random_range(2..7);
    let dims = vec![r.random_range(1..5), r.random_range(1..5)];
    let width: usize = dims.iter().sum();
    RandomHead {
        weight: Tensor::new(vec![classes, width], uniform(r, classes * width, -1.0, 1.0)).unwrap(),
        bias: Tensor::new(vec![classes], uniform(r, classes, -0.5, 0.5)).unwrap(),
        dims,
        classes,
    }
}

/// Largest deviation between the closed-form unimodal gradient and the
/// target-row term `(dL/dl_y) W_y` read from the tape.
pub fn uni_closed_form_vs_tape(seed: u64) -> f64 {
    use dgl_lab::analysis::ConcatHead;
    let mut r = rng(seed);
    let h = random_head(&mut r);
    let head = ConcatHead::new(&h.weight, &h.bias, &h.dims).unwrap();
    let y = r.random_range(0..h.classes);
    let z1 = uniform(&mut r, h.dims[0], -2.0, 2.0);

    let w1: Vec<f64> = (0..h.classes).flat_map(|c| head.row_block(c, 0).to_vec()).collect();
    let mut tape = Tape::new();
    let z = tape.input(&Tensor::new(vec![1, h.dims[0]], z1.clone()).unwrap().with_requires_grad(true));
    let w = tape.constant(vec![h.classes, h.dims[0]], w1).unwrap();
    let b = tape.input(&h.bias);
    let wt = tape.transpose(w).unwrap();
    let a = tape.matmul(z, wt).unwrap();
    let logits = tape.add_bias(a, b).unwrap();
    let loss = tape.softmax_cross_entropy(logits, &[y]).unwrap();
    tape.backward(loss).unwrap();
    let dl_dy = tape.grad(logits).unwrap()[y];
    let autodiff: Vec<f64> = head.row_block(y, 0).iter().map(|w| dl_dy * w).collect();
    let closed = head.g_uni(&z1, y, 0).unwrap();
    max_abs_diff(&autodiff, &closed)
}

/// Whether the multimodal expression at `z^{m2} = 0` is bitwise the unimodal one.
pub fn multi_equals_uni_at_zero_partner(seed: u64) -> bool {
    use dgl_lab::analysis::ConcatHead;
    let mut r = rng(seed);
    let h = random_head(&mut r);
    let head = ConcatHead::new(&h.weight, &h.bias, &h.dims).unwrap();
    let y = r.random_range(0..h.classes);
    let z1 = uniform(&mut r, h.dims[0], -2.0, 2.0);
    let z2 = vec![0.0; h.dims[1]];
    let multi = head.g_multi(&[&z1, &z2], y, 0).unwrap();
    let uni = head.g_uni(&z1, y, 0).unwrap();
    let factors = head.suppression_factors(&[&z1, &z2], y, 0).unwrap();
    multi.iter().map(|v| v.to_bits()).eq(uni.iter().map(|v| v.to_bits())) && factors.iter().all(|&s| s == 1.0)
}

/// Model with concat fusion whose classifier rows other than `y` are zero in
/// modality `k`'s block, so the full gradient reduces to the target-row term.
/// Returns the largest deviation between the tape and the closed form.
pub fn chain_vs_multi_closed_form(seed: u64) -> f64 {
    use dgl_lab::analysis::{full_chain_gradient, ConcatHead, GradPath};
    let mut r = rng(seed);
    let classes = r.random_range(2..5);
    let dims = [r.random_range(1..4), r.random_range(1..4)];
    let spec = small_spec(FusionSpec::concat(), &[3, 2], 1, classes);
    let spec = dgl_lab::model::ModelSpec {
        encoders: spec
            .encoders
            .into_iter()
            .zip(dims)
            .map(|(e, d)| dgl_lab::model::EncoderSpec { output_dim: d, ..e })
            .collect(),
        ..spec
    };
    let mut model = MultimodalModel::new(spec, &mut r).unwrap();
    let k = r.random_range(0..2);
    let y = r.random_range(0..classes);
    let width = dims[0] + dims[1];
    let block = model.spec().block(k);
    {
        let g = model.classifier_group();
        let w = model.groups_mut()[g].params[0].value.data_mut();
        for v in w.iter_mut() {
            *v *= 3.0;
        }
        for c in (0..classes).filter(|&c| c != y) {
            for j in block.clone() {
                w[c * width + j] = 0.0;
            }
        }
    }
    let n = 4;
    let (inputs, _) = random_batch(&mut r, &model, n);
    let labels = vec![y; n];
    let chain = full_chain_gradient(&model, &inputs, &labels, k, GradPath::Multi).unwrap();
    let reps = model.representations(&inputs).unwrap();
    let head = ConcatHead::from_model(&model).unwrap();
    let mut worst = 0.0f64;
    for i in 0..n {
        let z: Vec<&[f64]> = reps.iter().map(|t| t.row(i)).collect();
        let closed = head.g_multi(&z, y, k).unwrap();
        worst = worst.max(max_abs_diff(chain.row(i), &closed));
    }
    worst
}

#[derive(Debug, Clone, Copy)]
pub struct InequalityScan {
    pub instances: usize,
    pub violations: usize,
    pub min_margin: f64,
}

/// Draws random heads and representations until `count` instances satisfy
/// the premise (every off-target factor below one, unimodal target
/// probability strictly inside (0, 1)), then checks `|g_uni| > |g_multi| > 0`
/// with `margin > tol` on each.
pub fn scan_inequality(count: usize, seed: u64, tol: f64) -> InequalityScan {
    use dgl_lab::analysis::ConcatHead;
    let mut r = rng(seed);
    let mut scan = InequalityScan { instances: 0, violations: 0, min_margin: f64::INFINITY };
    while scan.instances < count {
        let h = random_head(&mut r);
        let head = ConcatHead::new(&h.weight, &h.bias, &h.dims).unwrap();
        let y = r.random_range(0..h.classes);
        let z1 = uniform(&mut r, h.dims[0], -2.0, 2.0);
        let z2 = uniform(&mut r, h.dims[1], -2.0, 2.0);
        let z = [z1.as_slice(), z2.as_slice()];
        let s = head.suppression_factors(&z, y, 0).unwrap();
        let p = head.p_uni(&z1, y, 0);
        let premise = s.iter().enumerate().all(|(c, &f)| c == y || f < 1.0) && p > 0.0 && p < 1.0;
        if !premise {
            continue;
        }
        scan.instances += 1;
        let norm = |v: Vec<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let gu = norm(head.g_uni(&z1, y, 0).unwrap());
        let gm = norm(head.g_multi(&z, y, 0).unwrap());
        let margin = gu - gm;
        scan.min_margin = scan.min_margin.min(margin);
        if !(margin > tol && gm > 0.0) {
            scan.violations += 1;
        }
    }
    scan
}
