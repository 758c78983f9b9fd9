use std::collections::HashMap;
use std::path::Path;

use super::ObservationalDataset;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

fn numbered(headers: &HashMap<String, usize>, prefix: &str) -> Result<Vec<usize>> {
    let mut cols = Vec::new();
    while let Some(&c) = headers.get(&format!("{prefix}{}", cols.len())) {
        cols.push(c);
    }
    let stray = headers.keys().find(|h| {
        h.strip_prefix(prefix)
            .and_then(|rest| rest.parse::<usize>().ok())
            .is_some_and(|i| i >= cols.len())
    });
    if let Some(h) = stray {
        return Err(Error::Schema(format!(
            "column `{h}` present but `{prefix}{}` is missing",
            cols.len()
        )));
    }
    Ok(cols)
}

/// Reads a dataset with header `x0..x{n0-1},t,y[,mu0..mu{K-1}]`.
///
/// `K` is the number of `mu` columns when present, otherwise the largest
/// treatment id.
pub fn load_csv(path: impl AsRef<Path>) -> Result<ObservationalDataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let names: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let headers: HashMap<String, usize> = names.iter().enumerate().map(|(i, h)| (h.clone(), i)).collect();
    if headers.len() != names.len() {
        return Err(Error::Schema("duplicate column names".into()));
    }
    let xs = numbered(&headers, "x")?;
    let mus = numbered(&headers, "mu")?;
    if xs.is_empty() {
        return Err(Error::Schema("missing covariate column `x0`".into()));
    }
    let tc = *headers.get("t").ok_or_else(|| Error::Schema("missing column `t`".into()))?;
    let yc = *headers.get("y").ok_or_else(|| Error::Schema("missing column `y`".into()))?;
    if let Some(extra) = names.iter().find(|h| {
        !(h.as_str() == "t" || h.as_str() == "y" || xs.contains(&headers[*h]) || mus.contains(&headers[*h]))
    }) {
        return Err(Error::Schema(format!("unexpected column `{extra}`")));
    }

    let mut x = Vec::new();
    let mut t = Vec::new();
    let mut y = Vec::new();
    let mut mu = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        let cell = |c: usize| -> Result<f64> {
            let raw = record.get(c).unwrap_or("");
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Cell {
                    row,
                    column: names[c].clone(),
                    message: format!("`{raw}` is not a finite number"),
                })
        };
        for &c in &xs {
            x.push(cell(c)?);
        }
        let tv = cell(tc)?;
        if tv < 1.0 || tv.fract() != 0.0 {
            return Err(Error::Cell {
                row,
                column: "t".into(),
                message: format!("treatment `{tv}` must be a positive integer"),
            });
        }
        t.push(tv as usize - 1);
        y.push(cell(yc)?);
        for &c in &mus {
            mu.push(cell(c)?);
        }
    }
    let n = t.len();
    if n == 0 {
        return Err(Error::Schema(format!("{} has no data rows", path.display())));
    }
    let k = if mus.is_empty() {
        t.iter().max().map_or(0, |m| m + 1)
    } else {
        mus.len()
    };
    if let Some(&bad) = t.iter().find(|&&v| v >= k) {
        return Err(Error::Schema(format!(
            "treatment {} exceeds the {k} potential-outcome columns",
            bad + 1
        )));
    }
    if k < 2 || t.iter().all(|&v| v == t[0]) {
        return Err(Error::Schema("every row has the same treatment".into()));
    }
    let x = Tensor::new(vec![n, xs.len()], x)?;
    let mu = if mus.is_empty() { None } else { Some(Tensor::new(vec![n, k], mu)?) };
    ObservationalDataset::new(x, t, y, mu, k)
}

/// Writes `ds` in the format read by [`load_csv`]; values round-trip
/// exactly.
pub fn write_csv(ds: &ObservationalDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..ds.n0()).map(|j| format!("x{j}")).collect();
    header.push("t".into());
    header.push("y".into());
    if ds.mu.is_some() {
        header.extend((0..ds.k()).map(|j| format!("mu{j}")));
    }
    w.write_record(&header)?;
    for r in 0..ds.n() {
        let mut rec: Vec<String> = ds.x.row(r).iter().map(f64::to_string).collect();
        rec.push((ds.t[r] + 1).to_string());
        rec.push(ds.y[r].to_string());
        if let Some(mu) = &ds.mu {
            rec.extend(mu.row(r).iter().map(f64::to_string));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
