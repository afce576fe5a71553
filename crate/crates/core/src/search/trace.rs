use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;

/// One optimisation step of a rate search.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_cls: f64,
    pub loss_flops: f64,
    pub loss_latency: f64,
    pub loss_power: f64,
    /// Operations of the schedule given by the hard masks.
    pub flops: u64,
    /// Operations implied by the expected rates.
    pub flops_expected: f64,
    /// Surrogate latency and power of the hard schedule, when a cost model is in use.
    pub latency: Option<f64>,
    pub power: Option<f64>,
    /// Expected effective rate per block.
    pub alphas: Vec<f64>,
    /// Tokens leaving each block under the hard masks.
    pub kept: Vec<usize>,
    pub wall_ms: f64,
}

/// Per-step record of a search run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SearchTrace {
    pub rows: Vec<TraceRow>,
}

impl SearchTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// CSV with one row per step. Wall-clock time is left out so the file is
    /// reproducible under a fixed seed.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "step,epoch,lr,loss_cls,loss_flops,loss_latency,loss_power,flops,flops_expected,latency,power,alpha,kept\n",
        );
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for r in &self.rows {
            let alphas: Vec<String> = r.alphas.iter().map(|a| a.to_string()).collect();
            let kept: Vec<String> = r.kept.iter().map(|k| k.to_string()).collect();
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.step,
                r.epoch,
                r.lr,
                r.loss_cls,
                r.loss_flops,
                r.loss_latency,
                r.loss_power,
                r.flops,
                r.flops_expected,
                opt(r.latency),
                opt(r.power),
                alphas.join(";"),
                kept.join(";")
            )
            .expect("writing to a String");
        }
        s
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}
