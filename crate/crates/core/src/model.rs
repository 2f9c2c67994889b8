//! Multimodal classifier: one MLP encoder per modality, a fusion module
//! (column concatenation or a shared one-hidden-layer MLP) and a linear head.
//!
//! Every forward mode records onto a caller-supplied [`Tape`] so training
//! code can mix full, detached and modality-dropout paths in one graph.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamGroup, ParamKey, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
}

impl EncoderSpec {
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in self.hidden_dims.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    Concat,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionSpec {
    pub kind: FusionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp_hidden: Option<usize>,
}

impl FusionSpec {
    pub fn concat() -> Self {
        Self {
            kind: FusionKind::Concat,
            mlp_hidden: None,
        }
    }

    pub fn mlp(hidden: usize) -> Self {
        Self {
            kind: FusionKind::Mlp,
            mlp_hidden: Some(hidden),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub encoders: Vec<EncoderSpec>,
    pub fusion: FusionSpec,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.encoders.len() < 2 {
            return Err(Error::config(format!(
                "a multimodal model needs at least 2 modalities, got {}",
                self.encoders.len()
            )));
        }
        for (k, e) in self.encoders.iter().enumerate() {
            if e.input_dim == 0 || e.output_dim == 0 || e.hidden_dims.contains(&0) {
                return Err(Error::config(format!("encoder-{} has a zero dimension", k + 1)));
            }
        }
        match (self.fusion.kind, self.fusion.mlp_hidden) {
            (FusionKind::Concat, None) => {}
            (FusionKind::Mlp, Some(h)) if h > 0 => {}
            (FusionKind::Concat, Some(_)) => {
                return Err(Error::config("mlp_hidden is only valid for mlp fusion"))
            }
            (FusionKind::Mlp, _) => return Err(Error::config("mlp fusion needs mlp_hidden > 0")),
        }
        if self.num_classes < 2 {
            return Err(Error::config("need at least 2 classes"));
        }
        Ok(())
    }

    pub fn num_modalities(&self) -> usize {
        self.encoders.len()
    }

    /// Width of the concatenated representation, `sum d_k`.
    pub fn concat_dim(&self) -> usize {
        self.encoders.iter().map(|e| e.output_dim).sum()
    }

    pub fn fused_dim(&self) -> usize {
        match self.fusion.kind {
            FusionKind::Concat => self.concat_dim(),
            FusionKind::Mlp => self.fusion.mlp_hidden.unwrap_or(0),
        }
    }

    /// Column range of modality `k` inside the concatenated representation.
    pub fn block(&self, k: usize) -> std::ops::Range<usize> {
        let start: usize = self.encoders[..k].iter().map(|e| e.output_dim).sum();
        start..start + self.encoders[k].output_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalModel {
    spec: ModelSpec,
    groups: Vec<ParamGroup>,
}

fn uniform_tensor(rng: &mut impl Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape matches generated data")
}

/// `(tensor name, shape, fan_in)`.
type TensorLayout = (String, Vec<usize>, usize);

/// Group names and tensor layouts for every parameter, in storage order.
fn layout(spec: &ModelSpec) -> Vec<(String, Vec<TensorLayout>)> {
    let mut groups = Vec::with_capacity(spec.num_modalities() + 2);
    for (k, enc) in spec.encoders.iter().enumerate() {
        let mut tensors = Vec::new();
        for (l, (fan_in, fan_out)) in enc.layer_dims().into_iter().enumerate() {
            tensors.push((format!("w{l}"), vec![fan_in, fan_out], fan_in));
            tensors.push((format!("b{l}"), vec![fan_out], fan_in));
        }
        groups.push((format!("encoder-{}", k + 1), tensors));
    }
    let mut fusion = Vec::new();
    if let Some(h) = spec.fusion.mlp_hidden {
        let fan_in = spec.concat_dim();
        fusion.push(("w".to_string(), vec![fan_in, h], fan_in));
        fusion.push(("b".to_string(), vec![h], fan_in));
    }
    groups.push(("fusion".to_string(), fusion));
    let fused = spec.fused_dim();
    groups.push((
        "classifier".to_string(),
        vec![
            ("w".to_string(), vec![spec.num_classes, fused], fused),
            ("b".to_string(), vec![spec.num_classes], fused),
        ],
    ));
    groups
}

impl MultimodalModel {
    /// Initializes every affine layer with `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// for both weights and biases.
    pub fn new(spec: ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let groups = layout(&spec)
            .into_iter()
            .map(|(name, tensors)| {
                let mut g = ParamGroup::new(name);
                for (tname, shape, fan_in) in tensors {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    g.push(tname, uniform_tensor(rng, shape, bound));
                }
                g
            })
            .collect();
        Ok(Self { spec, groups })
    }

    /// Rebuilds a model from explicit groups, checking names and shapes
    /// against the layout `new` would produce.
    pub fn from_groups(spec: ModelSpec, groups: Vec<ParamGroup>) -> Result<Self> {
        spec.validate()?;
        let expected = layout(&spec);
        if expected.len() != groups.len() {
            return Err(Error::Schema(format!(
                "expected {} parameter groups, found {}",
                expected.len(),
                groups.len()
            )));
        }
        for ((gname, tensors), g) in expected.iter().zip(&groups) {
            if *gname != g.name || tensors.len() != g.params.len() {
                return Err(Error::Schema(format!(
                    "group {} does not match architecture (expected {gname} with {} tensors)",
                    g.name,
                    tensors.len()
                )));
            }
            for ((tname, shape, _), p) in tensors.iter().zip(&g.params) {
                if *tname != p.name || shape.as_slice() != p.value.shape() {
                    return Err(Error::Schema(format!(
                        "{}/{} has shape {:?}, expected {gname}/{tname} {shape:?}",
                        g.name,
                        p.name,
                        p.value.shape(),
                    )));
                }
            }
        }
        Ok(Self { spec, groups })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn num_modalities(&self) -> usize {
        self.spec.num_modalities()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [ParamGroup] {
        &mut self.groups
    }

    pub fn encoder_group(&self, k: usize) -> usize {
        k
    }

    pub fn fusion_group(&self) -> usize {
        self.num_modalities()
    }

    pub fn classifier_group(&self) -> usize {
        self.num_modalities() + 1
    }

    /// Classifier weight `W [K x fused_dim]`.
    pub fn classifier_weight(&self) -> &Tensor {
        &self.groups[self.classifier_group()].params[0].value
    }

    pub fn classifier_bias(&self) -> &Tensor {
        &self.groups[self.classifier_group()].params[1].value
    }

    pub fn clear_grads(&mut self) {
        self.groups.iter_mut().for_each(ParamGroup::clear_grads);
    }

    fn bind(&self, tape: &mut Tape, group: usize, index: usize) -> Var {
        tape.param(ParamKey { group, index }, &self.groups[group].params[index].value)
    }

    fn check_modality(&self, k: usize) -> Result<()> {
        if k >= self.num_modalities() {
            return Err(Error::usage(format!(
                "modality index {} out of range for {} modalities",
                k + 1,
                self.num_modalities()
            )));
        }
        Ok(())
    }

    /// Representation `z^{m_k}` of one modality's batch `[n x input_dim_k]`.
    pub fn encode_one(&self, tape: &mut Tape, k: usize, input: &Tensor) -> Result<Var> {
        self.check_modality(k)?;
        let enc = &self.spec.encoders[k];
        if input.shape().len() != 2 || input.cols() != enc.input_dim {
            return Err(Error::data(format!(
                "modality {} expects [n x {}] inputs, got {:?}",
                k + 1,
                enc.input_dim,
                input.shape()
            )));
        }
        let layers = enc.layer_dims().len();
        let mut h = tape.input(input);
        for l in 0..layers {
            let w = self.bind(tape, k, 2 * l);
            let b = self.bind(tape, k, 2 * l + 1);
            let a = tape.matmul(h, w)?;
            h = tape.add_bias(a, b)?;
            if l + 1 < layers {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn encode(&self, tape: &mut Tape, inputs: &[Tensor]) -> Result<Vec<Var>> {
        self.check_inputs(inputs)?;
        inputs
            .iter()
            .enumerate()
            .map(|(k, x)| self.encode_one(tape, k, x))
            .collect()
    }

    fn check_inputs(&self, inputs: &[Tensor]) -> Result<usize> {
        if inputs.len() != self.num_modalities() {
            return Err(Error::data(format!(
                "expected {} modality inputs, got {}",
                self.num_modalities(),
                inputs.len()
            )));
        }
        let n = inputs[0].rows();
        if inputs.iter().any(|x| x.rows() != n) {
            return Err(Error::data("modalities disagree on batch size"));
        }
        Ok(n)
    }

    /// Fuses representations; modalities with `keep[k] == false` enter as exact zeros.
    pub fn fuse(&self, tape: &mut Tape, reps: &[Var], keep: &[bool]) -> Result<Var> {
        if reps.len() != self.num_modalities() || keep.len() != self.num_modalities() {
            return Err(Error::usage(format!(
                "fuse expects {} representations and mask entries",
                self.num_modalities()
            )));
        }
        let parts: Vec<Option<Var>> = reps
            .iter()
            .zip(keep)
            .map(|(&z, &k)| k.then_some(z))
            .collect();
        self.fuse_parts(tape, &parts)
    }

    fn fuse_parts(&self, tape: &mut Tape, parts: &[Option<Var>]) -> Result<Var> {
        let Some(present) = parts.iter().flatten().next() else {
            return Err(Error::usage("every modality is dropped"));
        };
        let n = tape.shape(*present)[0];
        let mut cols = Vec::with_capacity(parts.len());
        for (k, part) in parts.iter().enumerate() {
            let d = self.spec.encoders[k].output_dim;
            let v = match part {
                Some(z) => {
                    if tape.shape(*z) != [n, d] {
                        return Err(Error::Dimension {
                            op: "fuse",
                            left: vec![n, d],
                            right: tape.shape(*z).to_vec(),
                        });
                    }
                    *z
                }
                None => tape.zeros(vec![n, d]),
            };
            cols.push(v);
        }
        let stacked = tape.concat(&cols)?;
        match self.spec.fusion.kind {
            FusionKind::Concat => Ok(stacked),
            FusionKind::Mlp => {
                let g = self.fusion_group();
                let w = self.bind(tape, g, 0);
                let b = self.bind(tape, g, 1);
                let a = tape.matmul(stacked, w)?;
                let a = tape.add_bias(a, b)?;
                Ok(tape.relu(a))
            }
        }
    }

    /// `logits = z W^T + b`.
    pub fn classify(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let fused = self.spec.fused_dim();
        if tape.shape(z).len() != 2 || tape.shape(z)[1] != fused {
            return Err(Error::data(format!(
                "classifier expects [n x {fused}], got {:?}",
                tape.shape(z)
            )));
        }
        let g = self.classifier_group();
        let w = self.bind(tape, g, 0);
        let b = self.bind(tape, g, 1);
        let wt = tape.transpose(w)?;
        let a = tape.matmul(z, wt)?;
        tape.add_bias(a, b)
    }

    pub fn logits_full(&self, tape: &mut Tape, reps: &[Var]) -> Result<Var> {
        let keep = vec![true; reps.len()];
        let z = self.fuse(tape, reps, &keep)?;
        self.classify(tape, z)
    }

    /// Logits from detached copies of `reps`: identical values, no path back to encoders.
    pub fn logits_detached(&self, tape: &mut Tape, reps: &[Var]) -> Result<Var> {
        let detached: Vec<Var> = reps.iter().map(|&z| tape.detach(z)).collect();
        self.logits_full(tape, &detached)
    }

    /// Logits with every modality except `k` dropped at the fusion input.
    pub fn logits_unimodal(&self, tape: &mut Tape, reps: &[Var], k: usize) -> Result<Var> {
        self.check_modality(k)?;
        let keep: Vec<bool> = (0..self.num_modalities()).map(|j| j == k).collect();
        let z = self.fuse(tape, reps, &keep)?;
        self.classify(tape, z)
    }

    pub fn forward_full(&self, tape: &mut Tape, inputs: &[Tensor]) -> Result<Var> {
        let reps = self.encode(tape, inputs)?;
        self.logits_full(tape, &reps)
    }

    pub fn forward_detached(&self, tape: &mut Tape, inputs: &[Tensor]) -> Result<Var> {
        let reps = self.encode(tape, inputs)?;
        self.logits_detached(tape, &reps)
    }

    /// Forward values of every representation `z^{m_k}`, without keeping a graph.
    pub fn representations(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let reps = self.encode(&mut tape, inputs)?;
        Ok(reps.into_iter().map(|z| tape.to_tensor(z)).collect())
    }

    /// Unimodal logits for modality `k` (zero-based); only encoder `k` runs.
    pub fn forward_unimodal(&self, tape: &mut Tape, inputs: &[Tensor], k: usize) -> Result<Var> {
        self.check_modality(k)?;
        self.check_inputs(inputs)?;
        let z = self.encode_one(tape, k, &inputs[k])?;
        let mut parts = vec![None; self.num_modalities()];
        parts[k] = Some(z);
        let fused = self.fuse_parts(tape, &parts)?;
        self.classify(tape, fused)
    }
}
