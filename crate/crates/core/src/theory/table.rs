use std::fmt;
use std::io::Write;

use serde::{Serialize, Serializer};

use super::{p_stall_nr_ss, p_stall_sr_ss, reset_period_kstar, startup_window, TheoryInputs};
use crate::error::{Error, Result};
use crate::minifloat::FpFormat;

/// An integer table entry, or the reason it has no value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableCell {
    Value(u64),
    Unreachable,
}

impl fmt::Display for TableCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TableCell::Value(v) => write!(f, "{v}"),
            TableCell::Unreachable => f.write_str("unreachable"),
        }
    }
}

impl Serialize for TableCell {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TableCell::Value(v) => s.serialize_u64(*v),
            TableCell::Unreachable => s.serialize_str("unreachable"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictorRow {
    pub format: String,
    pub beta2: f64,
    pub eps: f64,
    pub rhohat: f64,
    pub p_nr: f64,
    pub p_sr: f64,
    pub p_init: f64,
    /// `(P0, window)` pairs.
    pub jstar: Vec<(f64, TableCell)>,
    /// `(s0, period)` pairs.
    pub kstar: Vec<(f64, TableCell)>,
}

/// One row per format. `p_inits` pairs with `formats`.
pub fn predictor_table(
    formats: &[FpFormat],
    p_inits: &[f64],
    beta2: f64,
    p0s: &[f64],
    s0s: &[f64],
) -> Result<Vec<PredictorRow>> {
    if formats.is_empty() {
        return Err(Error::usage("no formats given"));
    }
    if formats.len() != p_inits.len() {
        return Err(Error::Shape {
            expected: formats.len(),
            got: p_inits.len(),
        });
    }
    formats
        .iter()
        .zip(p_inits)
        .map(|(f, &p_init)| {
            let base = TheoryInputs::new(beta2, *f).with_p_init(p_init);
            base.validate()?;
            let rho = base.rhohat();
            let jstar = p0s
                .iter()
                .map(|&p0| match startup_window(p0, &base) {
                    Ok(j) => Ok((p0, TableCell::Value(j))),
                    Err(Error::ThresholdUnreachable { .. }) => Ok((p0, TableCell::Unreachable)),
                    Err(e) => Err(e),
                })
                .collect::<Result<Vec<_>>>()?;
            let kstar = s0s
                .iter()
                .map(|&s0| match reset_period_kstar(&base.with_s0(s0)) {
                    Ok(k) => Ok((s0, TableCell::Value(k))),
                    Err(Error::Domain(_)) => Ok((s0, TableCell::Unreachable)),
                    Err(e) => Err(e),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PredictorRow {
                format: f.name(),
                beta2,
                eps: f.epsilon(),
                rhohat: rho,
                p_nr: p_stall_nr_ss(rho),
                p_sr: p_stall_sr_ss(rho),
                p_init,
                jstar,
                kstar,
            })
        })
        .collect()
}

/// Writes rows as CSV with one `jstar@P0` and one `kstar@s0` column per value.
pub fn write_predictor_csv<W: Write>(rows: &[PredictorRow], out: W) -> Result<()> {
    let io = |e: csv::Error| Error::io("csv write", e);
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["format", "beta2", "eps", "rhohat", "p_nr", "p_sr", "p_init"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    if let Some(first) = rows.first() {
        header.extend(first.jstar.iter().map(|(p, _)| format!("jstar@{p}")));
        header.extend(first.kstar.iter().map(|(s, _)| format!("kstar@{s}")));
    }
    w.write_record(&header).map_err(io)?;
    for r in rows {
        let mut rec = vec![
            r.format.clone(),
            r.beta2.to_string(),
            r.eps.to_string(),
            format!("{:.6}", r.rhohat),
            format!("{:.6}", r.p_nr),
            format!("{:.6}", r.p_sr),
            r.p_init.to_string(),
        ];
        rec.extend(r.jstar.iter().map(|(_, c)| c.to_string()));
        rec.extend(r.kstar.iter().map(|(_, c)| c.to_string()));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io("csv flush", e))?;
    Ok(())
}
