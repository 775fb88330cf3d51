//! CSV and JSON writers. Floats are written in shortest round-trip form so
//! repeated runs give byte-identical files.

use std::fs::File;
use std::io::{self, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use fortet_core::{PotentialPair, QuadratureGrid, TraceRow};
use serde::Serialize;

pub fn num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else if v == 0.0 || (1e-4..1e15).contains(&v.abs()) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn parse_num(s: &str) -> Result<f64> {
    s.trim().parse::<f64>().with_context(|| format!("bad number {s:?}"))
}

/// Writes to `path`, or stdout when `None`.
fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    })
}

pub fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let mut w = sink(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["n", "sup_change", "normalization_residual", "hilbert_step", "case1_candidate"])?;
    for r in rows {
        w.write_record([
            r.n.to_string(),
            num(r.sup_change),
            num(r.normalization_residual),
            num(r.hilbert_step),
            r.case1_candidate.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn coord_headers(dim: usize) -> Vec<String> {
    if dim == 1 {
        vec!["x".into()]
    } else {
        (0..dim).map(|a| format!("x{a}")).collect()
    }
}

/// Long table: `side, node, x.., omega, value, log_value`; `side` is `phi`
/// (first grid) or `psi` (second grid).
pub fn write_potentials(
    path: &Path,
    grids: [&QuadratureGrid; 2],
    omegas: [&[f64]; 2],
    pot: &PotentialPair,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    let mut header = vec!["side".to_string(), "node".to_string()];
    header.extend(coord_headers(grids[0].dim()));
    header.extend(["omega", "value", "log_value"].map(String::from));
    w.write_record(&header)?;
    for (k, (name, logs)) in [("phi", &pot.log_phi), ("psi", &pot.log_psi)].into_iter().enumerate() {
        for (i, &l) in logs.iter().enumerate() {
            let mut rec = vec![name.to_string(), i.to_string()];
            rec.extend(grids[k].node(i).iter().map(|&c| num(c)));
            rec.extend([num(omegas[k][i]), num(l.exp()), num(l)]);
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct StoredPotentials {
    pub pair: PotentialPair,
    pub omega1: Vec<f64>,
    pub omega2: Vec<f64>,
}

pub fn read_potentials(path: &Path) -> Result<StoredPotentials> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = r.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("{}: missing column {name:?}", path.display()))
    };
    let (side, node, omega, log_value) = (col("side")?, col("node")?, col("omega")?, col("log_value")?);
    let mut out = StoredPotentials {
        pair: PotentialPair { log_phi: Vec::new(), log_psi: Vec::new() },
        omega1: Vec::new(),
        omega2: Vec::new(),
    };
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let (logs, omegas) = match &rec[side] {
            "phi" => (&mut out.pair.log_phi, &mut out.omega1),
            "psi" => (&mut out.pair.log_psi, &mut out.omega2),
            other => bail!("{}: row {}: unknown side {other:?}", path.display(), line + 2),
        };
        let i: usize = rec[node].parse().with_context(|| format!("{}: row {}", path.display(), line + 2))?;
        if i != logs.len() {
            bail!("{}: row {}: nodes must be listed in order", path.display(), line + 2);
        }
        logs.push(parse_num(&rec[log_value])?);
        omegas.push(parse_num(&rec[omega])?);
    }
    if out.pair.log_phi.is_empty() || out.pair.log_psi.is_empty() {
        bail!("{}: no potentials found", path.display());
    }
    Ok(out)
}

pub struct InterpolationRow<'a> {
    pub t: f64,
    pub node: usize,
    pub coords: &'a [f64],
    pub rho: f64,
    pub mass: f64,
    pub renorm_factor: f64,
}

pub fn write_interpolation(path: Option<&Path>, dim: usize, rows: &[InterpolationRow<'_>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink(path)?);
    let mut header = vec!["t".to_string(), "node".to_string()];
    header.extend(coord_headers(dim));
    header.extend(["rho", "mass", "renorm_factor"].map(String::from));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![num(r.t), r.node.to_string()];
        rec.extend(r.coords.iter().map(|&c| num(c)));
        rec.extend([num(r.rho), num(r.mass), num(r.renorm_factor)]);
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip() {
        for v in [0.0, 1.5, -2.25e-300, 1e20, 0.1, f64::INFINITY, f64::NEG_INFINITY] {
            assert_eq!(parse_num(&num(v)).unwrap(), v);
        }
        assert!(parse_num(&num(f64::NAN)).unwrap().is_nan());
        assert_eq!(num(1e-10), "1e-10");
        assert_eq!(num(0.25), "0.25");
    }
}
