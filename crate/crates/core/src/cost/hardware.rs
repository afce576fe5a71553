use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::schedule::{BlockCounts, CompressionSchedule};
use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::vit::ModelConfig;

/// One accelerator design point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HwConfig {
    pub tiles_row: f64,
    pub tiles_col: f64,
    pub meshes_row: f64,
    pub meshes_col: f64,
    pub bus_bits: f64,
    pub banks: f64,
    pub spad_mb: f64,
    pub acc_kb: f64,
}

/// Names of the design dimensions, in canonical order.
pub const HW_DIMS: [&str; 8] = [
    "tiles_row",
    "tiles_col",
    "meshes_row",
    "meshes_col",
    "bus_bits",
    "banks",
    "spad_mb",
    "acc_kb",
];

impl HwConfig {
    pub fn get(&self, dim: usize) -> f64 {
        [
            self.tiles_row,
            self.tiles_col,
            self.meshes_row,
            self.meshes_col,
            self.bus_bits,
            self.banks,
            self.spad_mb,
            self.acc_kb,
        ][dim]
    }

    pub fn from_values(v: [f64; 8]) -> Self {
        Self {
            tiles_row: v[0],
            tiles_col: v[1],
            meshes_row: v[2],
            meshes_col: v[3],
            bus_bits: v[4],
            banks: v[5],
            spad_mb: v[6],
            acc_kb: v[7],
        }
    }

    /// Processing elements: tiles × meshes in both directions.
    pub fn pes(&self) -> f64 {
        self.tiles_row * self.tiles_col * self.meshes_row * self.meshes_col
    }
}

/// Candidate values per design dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HwSpace {
    pub domains: BTreeMap<String, Vec<f64>>,
}

impl HwSpace {
    pub fn domain(&self, dim: usize) -> &[f64] {
        &self.domains[HW_DIMS[dim]]
    }

    pub fn validate(&self) -> Result<()> {
        for name in HW_DIMS {
            match self.domains.get(name) {
                Some(d) if !d.is_empty() && d.iter().all(|v| v.is_finite() && *v > 0.0) => {}
                _ => return Err(Error::Config(format!("hardware domain {name} missing or invalid"))),
            }
        }
        Ok(())
    }

    pub fn contains(&self, hw: &HwConfig) -> bool {
        (0..HW_DIMS.len()).all(|d| self.domain(d).contains(&hw.get(d)))
    }

    pub fn config(&self, indices: &[usize; 8]) -> HwConfig {
        let mut v = [0.0; 8];
        for d in 0..8 {
            v[d] = self.domain(d)[indices[d]];
        }
        HwConfig::from_values(v)
    }

    /// Space restricted to the given candidate configs' values.
    pub fn from_configs(configs: &[HwConfig]) -> Self {
        let mut domains = BTreeMap::new();
        for (d, name) in HW_DIMS.iter().enumerate() {
            let mut vals: Vec<f64> = Vec::new();
            for c in configs {
                if !vals.contains(&c.get(d)) {
                    vals.push(c.get(d));
                }
            }
            domains.insert(name.to_string(), vals);
        }
        Self { domains }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyCoefficients {
    pub k_compute: f64,
    pub k_mem: f64,
    pub k_softmax: f64,
    pub k_vector: f64,
    pub k_block: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerCoefficients {
    pub p_pe: f64,
    pub p_spad_mb: f64,
    pub p_acc_kb: f64,
    pub p_bus_bit: f64,
    pub e_mac: f64,
    pub e_mem: f64,
}

/// Contents of the cost-model coefficient file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostCoefficients {
    pub latency_ms: LatencyCoefficients,
    pub power_mw: PowerCoefficients,
    pub domains: BTreeMap<String, Vec<f64>>,
    pub anchor: HwConfig,
}

const DEFAULT_COEFFICIENTS: &str = include_str!("../../assets/cost_model.json");

impl Default for CostCoefficients {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_COEFFICIENTS).expect("bundled cost model parses")
    }
}

impl CostCoefficients {
    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        c.space().validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn space(&self) -> HwSpace {
        HwSpace {
            domains: self.domains.clone(),
        }
    }
}

/// Hardware metric constrained by a loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HwMetric {
    Latency,
    Power,
}

/// Per-block hardware cost `F′` of a token-count profile.
pub trait HwCostModel: Sync {
    fn block_costs(&self, counts: &[BlockCounts], hw: &HwConfig, metric: HwMetric) -> Vec<f64>;

    fn total(&self, schedule: &CompressionSchedule, hw: &HwConfig, metric: HwMetric) -> f64 {
        self.block_costs(&schedule.counts(), hw, metric).iter().sum()
    }
}

/// Analytic accelerator surrogate. Per block with `n_in` tokens entering and
/// `n_out` leaving, width `C` and `H` heads:
///
/// - `macs = 4 n_in C² + 2 n_in² C + 8 n_out C²`
/// - `bytes = 6 n_in C + 2 n_in² H + 10 n_out C + 12 C²`
/// - scratchpad spill `max(1, (3 n_in C + n_in² H) / spad_bytes)`,
///   accumulator passes `max(1, 4 n_out C / acc_bytes)`
/// - latency `k_c macs/PEs + k_m bytes·spill·passes/(bus/8 · min(banks,4)/4)
///   + k_s n_in² H + k_v (n_in C + 5 n_out C) + k_b`
/// - power: static `p_pe PEs + p_spad MB + p_acc KB + p_bus bits` plus
///   per block `e_mac macs + e_mem bytes·spill`.
#[derive(Clone, Debug)]
pub struct SyntheticCostModel {
    pub coefficients: CostCoefficients,
    pub embed_dim: usize,
    pub heads: usize,
}

impl SyntheticCostModel {
    pub fn new(coefficients: CostCoefficients, model: &ModelConfig) -> Self {
        Self {
            coefficients,
            embed_dim: model.embed_dim,
            heads: model.heads,
        }
    }

    fn terms(&self, n_in: f64, n_out: f64, hw: &HwConfig) -> (f64, f64, f64, f64) {
        let c = self.embed_dim as f64;
        let h = self.heads as f64;
        let macs = 4.0 * n_in * c * c + 2.0 * n_in * n_in * c + 8.0 * n_out * c * c;
        let bytes = 6.0 * n_in * c + 2.0 * n_in * n_in * h + 10.0 * n_out * c + 12.0 * c * c;
        let working = 3.0 * n_in * c + n_in * n_in * h;
        let spill = (working / (hw.spad_mb * 1_048_576.0)).max(1.0);
        let passes = (n_out * c * 4.0 / (hw.acc_kb * 1024.0)).max(1.0);
        (macs, bytes, spill, passes)
    }

    pub fn block_latency(&self, n_in: usize, n_out: usize, hw: &HwConfig) -> f64 {
        let k = &self.coefficients.latency_ms;
        let (ni, no) = (n_in as f64, n_out as f64);
        let (macs, bytes, spill, passes) = self.terms(ni, no, hw);
        let c = self.embed_dim as f64;
        let h = self.heads as f64;
        let bank_eff = hw.banks.min(4.0) / 4.0;
        k.k_compute * macs / hw.pes()
            + k.k_mem * bytes * spill * passes / (hw.bus_bits / 8.0 * bank_eff)
            + k.k_softmax * ni * ni * h
            + k.k_vector * (ni * c + 5.0 * no * c)
            + k.k_block
    }

    pub fn block_dynamic_power(&self, n_in: usize, n_out: usize, hw: &HwConfig) -> f64 {
        let p = &self.coefficients.power_mw;
        let (macs, bytes, spill, _) = self.terms(n_in as f64, n_out as f64, hw);
        p.e_mac * macs + p.e_mem * bytes * spill
    }

    pub fn static_power(&self, hw: &HwConfig) -> f64 {
        let p = &self.coefficients.power_mw;
        p.p_pe * hw.pes() + p.p_spad_mb * hw.spad_mb + p.p_acc_kb * hw.acc_kb + p.p_bus_bit * hw.bus_bits
    }

    pub fn latency(&self, schedule: &CompressionSchedule, hw: &HwConfig) -> f64 {
        self.total(schedule, hw, HwMetric::Latency)
    }

    pub fn power(&self, schedule: &CompressionSchedule, hw: &HwConfig) -> f64 {
        self.total(schedule, hw, HwMetric::Power)
    }
}

impl HwCostModel for SyntheticCostModel {
    fn block_costs(&self, counts: &[BlockCounts], hw: &HwConfig, metric: HwMetric) -> Vec<f64> {
        let share = self.static_power(hw) / counts.len().max(1) as f64;
        counts
            .iter()
            .map(|k| match metric {
                HwMetric::Latency => self.block_latency(k.tokens_in, k.tokens_out, hw),
                HwMetric::Power => share + self.block_dynamic_power(k.tokens_in, k.tokens_out, hw),
            })
            .collect()
    }
}

/// `log cosh((E − T)/unit)`, overflow-safe.
pub fn hw_loss(tape: &mut Tape, e: Var, target: f64, unit: f64) -> Result<Var> {
    if unit <= 0.0 {
        return Err(Error::Config(format!("hardware unit must be positive, got {unit}")));
    }
    let d = tape.add_scalar(e, -target)?;
    let d = tape.scale(d, 1.0 / unit)?;
    tape.log_cosh(d)
}

/// `x + SG(1 − x)`: value one, gradient that of `x`.
fn unit_factor(tape: &mut Tape, x: Var) -> Result<Var> {
    let sg = tape.constant(Tensor::full(tape.value(x).shape(), 1.0 - tape.item(x)))?;
    tape.add(x, sg)
}

/// Hardware cost differentiable in the effective rates with the hardware
/// fixed: `Σ_l (κ_l + SG(1 − κ_l)) F′_l`, where `κ_l = 1 − α^l` is the keep
/// ratio. The value is `Σ_l F′_l`; `dE/dα^l = −F′_l`.
pub fn expected_hw_alpha(tape: &mut Tape, effective: &[Var], block_costs: &[f64]) -> Result<Var> {
    if effective.len() != block_costs.len() {
        return Err(Error::shape(
            "expected_hw_alpha",
            format!("{} rates vs {} block costs", effective.len(), block_costs.len()),
        ));
    }
    let mut total: Option<Var> = None;
    for (&a, &f) in effective.iter().zip(block_costs) {
        let neg = tape.scale(a, -1.0)?;
        let keep = tape.add_scalar(neg, 1.0)?;
        let factor = unit_factor(tape, keep)?;
        let term = tape.scale(factor, f)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Config("no blocks".into()))
}

/// Learnable logits per hardware dimension and the Gumbel temperature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HwSearchParam {
    pub logits: Vec<Vec<f64>>,
    pub tau: f64,
}

impl HwSearchParam {
    pub fn uniform(space: &HwSpace, tau: f64) -> Self {
        Self {
            logits: (0..HW_DIMS.len()).map(|d| vec![0.0; space.domain(d).len()]).collect(),
            tau,
        }
    }

    /// Most probable value in every dimension.
    pub fn argmax(&self, space: &HwSpace) -> HwConfig {
        let mut idx = [0usize; 8];
        for (d, l) in self.logits.iter().enumerate() {
            idx[d] = crate::token_ops::argmax(l);
        }
        space.config(&idx)
    }
}

/// One Gumbel-softmax draw over the hardware dimensions.
pub struct HwSelection {
    /// `Σ_h (β_h + SG(1 − β_h))`: value `H`, gradient that of every `β_h`.
    pub factor: Var,
    /// Logit vars, one per dimension.
    pub logits: Vec<Var>,
    pub config: HwConfig,
}

/// Draws `y_h = softmax((π_h + g)/τ)` with Gumbel noise `g` per dimension,
/// selects `argmax y_h` and weights it by `β_h = y_h[argmax]`.
pub fn gumbel_select<R: Rng>(
    tape: &mut Tape,
    param: &HwSearchParam,
    space: &HwSpace,
    rng: &mut R,
) -> Result<HwSelection> {
    if param.tau <= 0.0 {
        return Err(Error::Config(format!("Gumbel temperature must be positive, got {}", param.tau)));
    }
    let mut idx = [0usize; 8];
    let mut factor: Option<Var> = None;
    let mut logit_vars = Vec::with_capacity(HW_DIMS.len());
    for (d, logits) in param.logits.iter().enumerate() {
        if logits.len() != space.domain(d).len() {
            return Err(Error::shape(
                "gumbel_select",
                format!("{} logits vs {} options for {}", logits.len(), space.domain(d).len(), HW_DIMS[d]),
            ));
        }
        let lv = tape.param(Tensor::vector(logits.clone()))?;
        let noise: Vec<f64> = (0..logits.len())
            .map(|_| {
                let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                -(-u.ln()).ln()
            })
            .collect();
        let g = tape.constant(Tensor::vector(noise))?;
        let z = tape.add(lv, g)?;
        let z = tape.scale(z, 1.0 / param.tau)?;
        let y = tape.row_softmax(z)?;
        let sel = crate::token_ops::argmax(tape.value(y).data());
        idx[d] = sel;
        let b = tape.gather(y, &[sel])?;
        let b = tape.reshape(b, vec![])?;
        let f = unit_factor(tape, b)?;
        factor = Some(match factor {
            Some(s) => tape.add(s, f)?,
            None => f,
        });
        logit_vars.push(lv);
    }
    Ok(HwSelection {
        factor: factor.ok_or_else(|| Error::Config("no hardware dimensions".into()))?,
        logits: logit_vars,
        config: space.config(&idx),
    })
}

/// Hardware cost differentiable in the hardware logits with the schedule
/// fixed: `Σ_h Σ_l (β_h + SG(1 − β_h)) F′_l` at a Gumbel-softmax draw, with
/// value `H Σ_l F′_l`. `cost(config)` returns `Σ_l F′_l` for the schedule.
pub fn expected_hw_beta<R: Rng>(
    tape: &mut Tape,
    param: &HwSearchParam,
    space: &HwSpace,
    cost: &dyn Fn(&HwConfig) -> f64,
    rng: &mut R,
) -> Result<(Var, HwSelection)> {
    let sel = gumbel_select(tape, param, space, rng)?;
    let e = tape.scale(sel.factor, cost(&sel.config))?;
    Ok((e, sel))
}
