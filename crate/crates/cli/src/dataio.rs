//! Dataset CSV reading and writing.
//!
//! One row per observation:
//! `y_1..y_m, x_1..x_p, vech(sigma_e), sigma_ue (row-major, p x m), vech(sigma_u)`
//! with vech stacking the lower triangle column by column. A header row is
//! required; columns are positional, names are free-form.

use anyhow::{bail, Context, Result};
use nalgebra::{DMatrix, DVector};
use std::path::Path;

use eiv::model::{tri, unvech, vech, vech_pairs};
use eiv::{Dataset, ModelDims};

pub fn expected_columns(dims: ModelDims) -> usize {
    let (m, p) = (dims.m, dims.p);
    m + p + tri(m) + p * m + tri(p)
}

/// Load and validate a dataset. Errors carry the 1-based file line number
/// (the header is line 1).
pub fn load_dataset(path: &Path, m: usize, p: usize) -> Result<Dataset> {
    let dims = ModelDims::new(m, p).map_err(|e| anyhow::anyhow!(e.to_string()))?;
    let want = expected_columns(dims);
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))?;

    let header_len = reader.headers()?.len();
    if header_len != want {
        bail!(
            "{}: header has {header_len} columns, expected {want} for m={m}, p={p}",
            path.display()
        );
    }

    let mut z = Vec::new();
    let mut sigma_e = Vec::new();
    let mut sigma_ue = Vec::new();
    let mut sigma_u = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2;
        let record = record.with_context(|| format!("line {line}: malformed CSV record"))?;
        if record.len() != want {
            bail!("line {line}: {} columns, expected {want}", record.len());
        }
        let vals: Vec<f64> = record
            .iter()
            .enumerate()
            .map(|(c, field)| {
                field
                    .parse::<f64>()
                    .with_context(|| format!("line {line}, column {}: not a number: {field:?}", c + 1))
            })
            .collect::<Result<_>>()?;
        if vals.iter().any(|v| !v.is_finite()) {
            bail!("line {line}: non-finite value");
        }

        let mut pos = 0usize;
        let zi = DVector::from_iterator(m + p, vals[pos..pos + m + p].iter().cloned());
        pos += m + p;
        let se = unvech(&vals[pos..pos + tri(m)], m);
        pos += tri(m);
        let sue = DMatrix::from_row_iterator(p, m, vals[pos..pos + p * m].iter().cloned());
        pos += p * m;
        let su = unvech(&vals[pos..pos + tri(p)], p);

        // Joint error scale must be positive semidefinite; report the line.
        let mut joint = DMatrix::zeros(m + p, m + p);
        joint.view_mut((0, 0), (m, m)).copy_from(&se);
        joint.view_mut((m, 0), (p, m)).copy_from(&sue);
        joint.view_mut((0, m), (m, p)).copy_from(&sue.transpose());
        joint.view_mut((m, m), (p, p)).copy_from(&su);
        let min_eig = joint
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -1e-10 * joint.amax().max(1.0) {
            bail!("line {line}: error scale block is not positive semidefinite (min eigenvalue {min_eig:.3e})");
        }

        z.push(zi);
        sigma_e.push(se);
        sigma_ue.push(sue);
        sigma_u.push(su);
    }
    if z.is_empty() {
        bail!("{}: no data rows", path.display());
    }
    Dataset::new(dims, z, sigma_e, sigma_ue, sigma_u).map_err(|e| anyhow::anyhow!(e.to_string()))
}

/// Write a dataset in the same layout `load_dataset` reads.
pub fn write_dataset(data: &Dataset, path: &Path) -> Result<()> {
    let dims = data.dims();
    let (m, p) = (dims.m, dims.p);
    let mut wtr = csv::Writer::from_path(path)
        .with_context(|| format!("cannot create {}", path.display()))?;

    let mut header: Vec<String> = Vec::new();
    header.extend((1..=m).map(|i| format!("y{i}")));
    header.extend((1..=p).map(|i| format!("x{i}")));
    header.extend(vech_pairs(m).map(|(r, c)| format!("se_{}{}", r + 1, c + 1)));
    for r in 1..=p {
        for c in 1..=m {
            header.push(format!("sue_{r}{c}"));
        }
    }
    header.extend(vech_pairs(p).map(|(r, c)| format!("su_{}{}", r + 1, c + 1)));
    wtr.write_record(&header)?;

    for i in 0..data.n() {
        let mut row: Vec<String> = Vec::new();
        row.extend(data.z[i].iter().map(|v| format!("{v}")));
        row.extend(vech(&data.sigma_e[i]).iter().map(|v| format!("{v}")));
        for r in 0..p {
            for c in 0..m {
                row.push(format!("{}", data.sigma_ue[i][(r, c)]));
            }
        }
        row.extend(vech(&data.sigma_u[i]).iter().map(|v| format!("{v}")));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}
