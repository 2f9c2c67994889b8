//! Model checkpoints: a flat text file mapping `group/tensor` to shape and values.
//!
//! ```text
//! DGLCKPT 1
//! epoch 12
//! step 564
//! model {"encoders":[...],"fusion":{"kind":"concat"},"num_classes":6}
//! tensor encoder-1/w0 20 32
//! <row-major values, comma-separated>
//! ...
//! end
//! ```
//!
//! Values use shortest round-trip formatting, so loading is bit-exact.
//! Momentum buffers are not stored.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::{ParamGroup, Tensor};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, MultimodalModel};

const MAGIC: &str = "DGLCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub step: usize,
    pub model: MultimodalModel,
}

pub fn save(path: &Path, model: &MultimodalModel, epoch: usize, step: usize) -> Result<()> {
    let spec = serde_json::to_string(model.spec()).map_err(|e| Error::data(e.to_string()))?;
    let mut out = String::new();
    writeln!(out, "{MAGIC} {VERSION}").unwrap();
    writeln!(out, "epoch {epoch}").unwrap();
    writeln!(out, "step {step}").unwrap();
    writeln!(out, "model {spec}").unwrap();
    for g in model.groups() {
        for p in &g.params {
            let shape: Vec<String> = p.value.shape().iter().map(usize::to_string).collect();
            writeln!(out, "tensor {}/{} {}", g.name, p.name, shape.join(" ")).unwrap();
            let values: Vec<String> = p.value.data().iter().map(f64::to_string).collect();
            writeln!(out, "{}", values.join(",")).unwrap();
        }
    }
    out.push_str("end\n");
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| err(0, format!("unexpected end of file, expected {what}")))
    };

    let (ln, header) = next("header")?;
    if header != format!("{MAGIC} {VERSION}") {
        return Err(err(ln, format!("expected '{MAGIC} {VERSION}'")));
    }
    let mut field = |key: &str| -> Result<(usize, String)> {
        let (ln, line) = next(key)?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .map(|r| (ln, r.to_string()))
            .ok_or_else(|| err(ln, format!("expected '{key} ...'")))
    };
    let (ln, epoch) = field("epoch")?;
    let epoch = epoch.parse().map_err(|_| err(ln, "invalid epoch".into()))?;
    let (ln, step) = field("step")?;
    let step = step.parse().map_err(|_| err(ln, "invalid step".into()))?;
    let (ln, spec) = field("model")?;
    let spec: ModelSpec =
        serde_json::from_str(&spec).map_err(|e| err(ln, format!("bad model spec: {e}")))?;

    let mut groups: Vec<ParamGroup> = Vec::new();
    loop {
        let (ln, line) = next("tensor or end")?;
        if line == "end" {
            break;
        }
        let rest = line
            .strip_prefix("tensor ")
            .ok_or_else(|| err(ln, "expected 'tensor ...' or 'end'".into()))?;
        let mut parts = rest.split_whitespace();
        let key = parts.next().ok_or_else(|| err(ln, "missing tensor key".into()))?;
        let (group, name) = key
            .split_once('/')
            .ok_or_else(|| err(ln, format!("key {key:?} is not group/name")))?;
        let shape = parts
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| err(ln, "invalid shape".into()))?;
        let (vln, values) = next("tensor values")?;
        let data = if values.is_empty() {
            Vec::new()
        } else {
            values
                .split(',')
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| err(vln, "invalid tensor value".into()))?
        };
        let tensor = Tensor::new(shape, data).map_err(|e| err(vln, e.to_string()))?;
        if groups.last().is_none_or(|g| g.name != group) {
            groups.push(ParamGroup::new(group));
        }
        groups.last_mut().expect("just pushed").push(name, tensor);
    }
    // groups without tensors (concat fusion) are absent from the file
    let mut full = Vec::new();
    let template_names: Vec<String> = (0..spec.num_modalities())
        .map(|k| format!("encoder-{}", k + 1))
        .chain(["fusion".to_string(), "classifier".to_string()])
        .collect();
    let mut stored = groups.into_iter().peekable();
    for name in template_names {
        match stored.peek() {
            Some(g) if g.name == name => full.push(stored.next().expect("peeked")),
            _ => full.push(ParamGroup::new(name)),
        }
    }
    if let Some(extra) = stored.next() {
        return Err(Error::Schema(format!("unexpected parameter group {}", extra.name)));
    }
    let model = MultimodalModel::from_groups(spec, full)?;
    Ok(Checkpoint { epoch, step, model })
}
