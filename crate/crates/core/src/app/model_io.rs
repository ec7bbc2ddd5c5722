//! Plain-text model file.
//!
//! ```text
//! gprloc-model v1
//! k <kernels>
//! kernel_size <n>
//! pixel_to_meter <m per column>
//! gate_threshold <r>
//! bias <m>
//! weights <w_1> ... <w_k>
//! loss <m>
//! iterations <n>
//! ridge_used <true|false>
//! kernel <identity | line <deg> | log <sigma> | random>
//! <n rows of n weights>
//! ...
//! ```

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::regmodel::{FilterBank, Kernel, KernelKind, LearnedModel, LinearHead};

pub const MODEL_HEADER: &str = "gprloc-model v1";

pub fn model_to_string(m: &LearnedModel) -> String {
    let h = &m.head;
    let n = m.bank.kernel_size();
    let mut s = String::new();
    let join = |v: &mut dyn Iterator<Item = f64>| v.map(|x| format!("{x}")).collect::<Vec<_>>().join(" ");
    writeln!(s, "{MODEL_HEADER}").unwrap();
    writeln!(s, "k {}", m.bank.len()).unwrap();
    writeln!(s, "kernel_size {n}").unwrap();
    writeln!(s, "pixel_to_meter {}", h.pixel_to_meter).unwrap();
    writeln!(s, "gate_threshold {}", m.gate_threshold).unwrap();
    writeln!(s, "bias {}", h.bias).unwrap();
    writeln!(s, "weights {}", join(&mut h.weights.iter().copied())).unwrap();
    writeln!(s, "loss {}", h.loss).unwrap();
    writeln!(s, "iterations {}", h.iterations).unwrap();
    writeln!(s, "ridge_used {}", h.ridge_used).unwrap();
    for k in &m.bank.kernels {
        let kind = match k.kind {
            KernelKind::Identity => "identity".to_string(),
            KernelKind::Line { degrees } => format!("line {degrees}"),
            KernelKind::LaplacianOfGaussian { sigma } => format!("log {sigma}"),
            KernelKind::RandomSparse => "random".to_string(),
        };
        writeln!(s, "kernel {kind}").unwrap();
        for r in 0..n {
            writeln!(s, "{}", join(&mut k.weights.row(r).iter().copied())).unwrap();
        }
    }
    s
}

struct Lines<'a> {
    it: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<(usize, &'a str)> {
        self.it
            .next()
            .map(|(i, l)| (i + 1, l.trim()))
            .ok_or_else(|| Error::Data("model file: unexpected end".into()))
    }

    fn field(&mut self, key: &str) -> Result<&'a str> {
        let (n, line) = self.next()?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => Ok(v.trim()),
            _ => Err(Error::Data(format!("model file line {n}: expected `{key}`"))),
        }
    }
}

fn parse<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Data(format!("model file: bad {what} `{s}`")))
}

fn floats(s: &str, what: &str) -> Result<Vec<f64>> {
    let v: Vec<f64> = s.split_whitespace().map(|x| parse(x, what)).collect::<Result<_>>()?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Data(format!("model file: non-finite {what}")));
    }
    Ok(v)
}

pub fn model_from_str(text: &str) -> Result<LearnedModel> {
    let mut l = Lines { it: text.lines().enumerate() };
    if l.next()?.1 != MODEL_HEADER {
        return Err(Error::Data(format!("model file: first line must be `{MODEL_HEADER}`")));
    }
    let k: usize = parse(l.field("k")?, "k")?;
    let n: usize = parse(l.field("kernel_size")?, "kernel_size")?;
    let pixel_to_meter: f64 = parse(l.field("pixel_to_meter")?, "pixel_to_meter")?;
    let gate_threshold: f64 = parse(l.field("gate_threshold")?, "gate_threshold")?;
    let bias: f64 = parse(l.field("bias")?, "bias")?;
    let weights = floats(l.field("weights")?, "weights")?;
    let loss: f64 = parse(l.field("loss")?, "loss")?;
    let iterations: usize = parse(l.field("iterations")?, "iterations")?;
    let ridge_used: bool = parse(l.field("ridge_used")?, "ridge_used")?;
    if weights.len() != k {
        return Err(Error::LengthMismatch { expected: k, got: weights.len() });
    }
    if !(pixel_to_meter > 0.0 && bias.is_finite()) {
        return Err(Error::Data("model file: pixel_to_meter must be positive and bias finite".into()));
    }
    let mut kernels = Vec::with_capacity(k);
    for _ in 0..k {
        let spec = l.field("kernel")?;
        let mut parts = spec.split_whitespace();
        let kind = match (parts.next(), parts.next()) {
            (Some("identity"), None) => KernelKind::Identity,
            (Some("line"), Some(d)) => KernelKind::Line { degrees: parse(d, "degrees")? },
            (Some("log"), Some(s)) => KernelKind::LaplacianOfGaussian { sigma: parse(s, "sigma")? },
            (Some("random"), None) => KernelKind::RandomSparse,
            _ => return Err(Error::Data(format!("model file: unknown kernel `{spec}`"))),
        };
        let mut vals = Vec::with_capacity(n * n);
        for _ in 0..n {
            let row = floats(l.next()?.1, "kernel weight")?;
            if row.len() != n {
                return Err(Error::LengthMismatch { expected: n, got: row.len() });
            }
            vals.extend(row);
        }
        kernels.push(Kernel { kind, weights: DMatrix::from_row_slice(n, n, &vals) });
    }
    let bank = FilterBank::from_kernels(kernels)?;
    Ok(LearnedModel {
        bank,
        head: LinearHead { weights, bias, pixel_to_meter, loss, iterations, ridge_used },
        gate_threshold,
    })
}

pub fn save_model(path: &Path, m: &LearnedModel) -> Result<()> {
    std::fs::write(path, model_to_string(m))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<LearnedModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    model_from_str(&text)
}
