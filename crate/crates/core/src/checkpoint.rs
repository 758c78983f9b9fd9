//! Model checkpoints as a flat JSON map from key to float array.
//!
//! Keys:
//! - `psi.layer{l}.phi{q}.{p}.{c|wb|ws}` and `psi.layer{l}.knots{p}`
//! - `heads.{t}.layer{l}.phi{q}.{p}.{c|wb|ws}` and `heads.{t}.layer{l}.knots{p}`,
//!   with `t` 1-based
//! - `meta.n_covariates`, `meta.psi_widths`, `meta.head_widths`,
//!   `meta.treatments`, `meta.grid_size`, `meta.degree`
//!
//! Any other keys (for example a fitted scaler) are carried through
//! untouched.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kan::{KanLayer, KaniteModel};
use crate::spline::BSplineBasis;

pub type Document = BTreeMap<String, Vec<f64>>;

fn encode_layer(doc: &mut Document, prefix: &str, layer: &KanLayer) {
    let nb = layer.num_basis();
    for (p, basis) in layer.bases().iter().enumerate() {
        doc.insert(format!("{prefix}.knots{p}"), basis.knots().to_vec());
    }
    for q in 0..layer.n_out() {
        for p in 0..layer.n_in() {
            let e = q * layer.n_in() + p;
            let key = format!("{prefix}.phi{q}.{p}");
            doc.insert(format!("{key}.c"), layer.coefficients[e * nb..(e + 1) * nb].to_vec());
            doc.insert(format!("{key}.wb"), vec![layer.residual_weights[e]]);
            doc.insert(format!("{key}.ws"), vec![layer.spline_weights[e]]);
        }
    }
}

fn take<'a>(doc: &'a Document, key: &str) -> Result<&'a Vec<f64>> {
    doc.get(key)
        .ok_or_else(|| Error::Schema(format!("checkpoint is missing `{key}`")))
}

fn take_scalar(doc: &Document, key: &str) -> Result<f64> {
    match take(doc, key)?.as_slice() {
        [v] => Ok(*v),
        other => Err(Error::Schema(format!("`{key}` should hold one value, found {}", other.len()))),
    }
}

fn as_count(v: f64, key: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < 1e9 {
        Ok(v as usize)
    } else {
        Err(Error::Schema(format!("`{key}` holds {v}, expected a count")))
    }
}

fn take_counts(doc: &Document, key: &str) -> Result<Vec<usize>> {
    take(doc, key)?.iter().map(|&v| as_count(v, key)).collect()
}

fn decode_layer(doc: &Document, prefix: &str, n_in: usize, n_out: usize, degree: usize) -> Result<KanLayer> {
    let bases = (0..n_in)
        .map(|p| BSplineBasis::new(take(doc, &format!("{prefix}.knots{p}"))?.clone(), degree))
        .collect::<Result<Vec<_>>>()?;
    let mut coefficients = Vec::new();
    let mut residual = Vec::with_capacity(n_in * n_out);
    let mut spline = Vec::with_capacity(n_in * n_out);
    for q in 0..n_out {
        for p in 0..n_in {
            let key = format!("{prefix}.phi{q}.{p}");
            coefficients.extend_from_slice(take(doc, &format!("{key}.c"))?);
            residual.push(take_scalar(doc, &format!("{key}.wb"))?);
            spline.push(take_scalar(doc, &format!("{key}.ws"))?);
        }
    }
    KanLayer::from_parts(n_out, bases, coefficients, residual, spline)
        .map_err(|e| Error::Schema(format!("{prefix}: {e}")))
}

/// Flattens a model into checkpoint entries.
pub fn encode(model: &KaniteModel) -> Document {
    let arch = model.architecture();
    let mut doc = Document::new();
    let counts = |v: &[usize]| v.iter().map(|&w| w as f64).collect::<Vec<_>>();
    doc.insert("meta.n_covariates".into(), vec![arch.n_covariates as f64]);
    doc.insert("meta.psi_widths".into(), counts(&arch.psi_widths));
    doc.insert("meta.head_widths".into(), counts(&arch.head_widths));
    doc.insert("meta.treatments".into(), vec![arch.treatments as f64]);
    doc.insert("meta.grid_size".into(), vec![arch.grid_size as f64]);
    doc.insert("meta.degree".into(), vec![arch.degree as f64]);
    for (l, layer) in model.psi.layers.iter().enumerate() {
        encode_layer(&mut doc, &format!("psi.layer{l}"), layer);
    }
    for (t, head) in model.heads.iter().enumerate() {
        for (l, layer) in head.layers.iter().enumerate() {
            encode_layer(&mut doc, &format!("heads.{}.layer{l}", t + 1), layer);
        }
    }
    doc
}

/// Rebuilds a model from checkpoint entries.
pub fn decode(doc: &Document) -> Result<KaniteModel> {
    let n0 = as_count(take_scalar(doc, "meta.n_covariates")?, "meta.n_covariates")?;
    let psi_widths = take_counts(doc, "meta.psi_widths")?;
    let head_widths = take_counts(doc, "meta.head_widths")?;
    let k = as_count(take_scalar(doc, "meta.treatments")?, "meta.treatments")?;
    let degree = as_count(take_scalar(doc, "meta.degree")?, "meta.degree")?;

    let mut prev = n0;
    let mut psi = Vec::with_capacity(psi_widths.len());
    for (l, &w) in psi_widths.iter().enumerate() {
        psi.push(decode_layer(doc, &format!("psi.layer{l}"), prev, w, degree)?);
        prev = w;
    }
    let d = prev;
    let mut heads = Vec::with_capacity(k);
    for t in 1..=k {
        let mut prev = d;
        let mut layers = Vec::new();
        for (l, &w) in head_widths.iter().chain(std::iter::once(&1)).enumerate() {
            layers.push(decode_layer(doc, &format!("heads.{t}.layer{l}"), prev, w, degree)?);
            prev = w;
        }
        heads.push(layers);
    }
    let model = KaniteModel::from_layers(psi, heads).map_err(|e| Error::Schema(e.to_string()))?;
    let g = as_count(take_scalar(doc, "meta.grid_size")?, "meta.grid_size")?;
    if model.grid_size != g {
        return Err(Error::Schema(format!("meta.grid_size is {g} but knots imply {}", model.grid_size)));
    }
    Ok(model)
}

/// Writes `model` plus any `extra` entries to `path`.
pub fn save(path: impl AsRef<Path>, model: &KaniteModel, extra: &Document) -> Result<()> {
    let mut doc = encode(model);
    doc.extend(extra.iter().map(|(k, v)| (k.clone(), v.clone())));
    fs::write(path, serde_json::to_string(&doc)?)?;
    Ok(())
}

/// Reads a checkpoint, returning the model and the full document.
pub fn load(path: impl AsRef<Path>) -> Result<(KaniteModel, Document)> {
    let doc: Document = serde_json::from_str(&fs::read_to_string(path)?)?;
    Ok((decode(&doc)?, doc))
}
