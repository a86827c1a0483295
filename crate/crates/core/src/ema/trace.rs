use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-step stalled fractions of one state tensor.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StallTrace {
    pub tensor_id: String,
    pub stalled_fraction: Vec<f64>,
    /// Cycle clock at each step, counted before a reset on that step.
    pub cycle_k: Vec<u64>,
    /// Whether the state was reset at the end of each step.
    pub reset: Vec<bool>,
}

impl StallTrace {
    pub fn new(tensor_id: impl Into<String>) -> Self {
        StallTrace {
            tensor_id: tensor_id.into(),
            ..Default::default()
        }
    }

    pub fn push(&mut self, fraction: f64, cycle_k: u64, reset: bool) {
        self.stalled_fraction.push(fraction);
        self.cycle_k.push(cycle_k);
        self.reset.push(reset);
    }

    pub fn len(&self) -> usize {
        self.stalled_fraction.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stalled_fraction.is_empty()
    }

    /// 1-based step numbers at which a reset happened.
    pub fn reset_steps(&self) -> Vec<usize> {
        self.reset
            .iter()
            .enumerate()
            .filter(|(_, &r)| r)
            .map(|(i, _)| i + 1)
            .collect()
    }
}

/// Writes `step,tensor_id,stalled_fraction,cycle_k,reset_flag` rows.
pub fn write_traces_csv<W: Write>(traces: &[StallTrace], out: W) -> Result<()> {
    let err = |e: csv::Error| Error::io("csv write", e);
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "step",
        "tensor_id",
        "stalled_fraction",
        "cycle_k",
        "reset_flag",
    ])
    .map_err(err)?;
    for t in traces {
        for i in 0..t.len() {
            w.write_record([
                (i + 1).to_string(),
                t.tensor_id.clone(),
                t.stalled_fraction[i].to_string(),
                t.cycle_k[i].to_string(),
                u8::from(t.reset[i]).to_string(),
            ])
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::io("csv flush", e))?;
    Ok(())
}
