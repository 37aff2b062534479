//! Cycle-approximate model of the unlearning engine: a patch-level stream
//! GEMM -> FIMD -> Dampening with double-buffered IPs, plus energy accounting
//! from a per-component power table.
//!
//! Stage latencies and core costs are calibration inputs, not measured RTL
//! timings. The shipped defaults reproduce the reported IP speedups at
//! [`REPRESENTATIVE_ELEMENTS`] elements.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cau::MacLedger;
use crate::error::{Error, Result};

/// Layer size, in elements, at which the default calibration is matched.
pub const REPRESENTATIVE_ELEMENTS: u64 = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IpConfig {
    pub stage_latencies: Vec<u64>,
    pub elements_per_cycle: u64,
    /// Cost of the same operation per element on the scalar core.
    pub core_cycles_per_element: f64,
}

impl IpConfig {
    /// Pipeline fill: one pass through every stage.
    pub fn fill(&self) -> u64 {
        self.stage_latencies.iter().sum()
    }

    /// Cycles to stream `elements` through the IP. Empty patches bypass it.
    pub fn patch_latency(&self, elements: u64) -> u64 {
        if elements == 0 {
            0
        } else {
            self.fill() + elements.div_ceil(self.elements_per_cycle.max(1))
        }
    }

    fn validate(&self, name: &str, stages: usize) -> Result<()> {
        if self.stage_latencies.len() != stages {
            return Err(Error::Config(format!(
                "{name} needs {stages} stage latencies, got {}",
                self.stage_latencies.len()
            )));
        }
        if self.stage_latencies.iter().any(|&s| s == 0) {
            return Err(Error::Config(format!("{name} stage latencies must be at least 1")));
        }
        if self.elements_per_cycle == 0 {
            return Err(Error::Config(format!("{name} elements_per_cycle must be at least 1")));
        }
        if !(self.core_cycles_per_element > 0.0 && self.core_cycles_per_element.is_finite()) {
            return Err(Error::Config(format!("{name} core_cycles_per_element must be positive")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// GEMM tile edge; a patch carries up to `patch_dim^2` elements.
    pub patch_dim: u64,
    pub gemm_cycles_per_patch: u64,
    pub gemm_macs_per_cycle: u64,
    /// Load, Square, Accumulate, Store.
    pub fimd: IpConfig,
    /// Load, Compare, Beta, Multiply, Store.
    pub dampening: IpConfig,
    pub clock_hz: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            patch_dim: 64,
            gemm_cycles_per_patch: 4352,
            gemm_macs_per_cycle: 256,
            fimd: IpConfig { stage_latencies: vec![2, 1, 2, 2], elements_per_cycle: 1, core_cycles_per_element: 11.72 },
            dampening: IpConfig {
                stage_latencies: vec![2, 1, 3, 1, 2],
                elements_per_cycle: 1,
                core_cycles_per_element: 7.92,
            },
            clock_hz: 50e6,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_dim == 0 {
            return Err(Error::Config("patch_dim must be at least 1".into()));
        }
        if self.gemm_cycles_per_patch == 0 || self.gemm_macs_per_cycle == 0 {
            return Err(Error::Config("GEMM cycles and throughput must be at least 1".into()));
        }
        if !(self.clock_hz > 0.0 && self.clock_hz.is_finite()) {
            return Err(Error::Config("clock_hz must be positive".into()));
        }
        self.fimd.validate("fimd", 4)?;
        self.dampening.validate("dampening", 5)
    }

    pub fn patch_elements(&self) -> u64 {
        self.patch_dim * self.patch_dim
    }

    /// MACs one GEMM patch window covers.
    pub fn macs_per_patch(&self) -> u64 {
        self.gemm_cycles_per_patch * self.gemm_macs_per_cycle
    }

    pub fn ip(&self, kind: IpKind) -> &IpConfig {
        match kind {
            IpKind::Fimd => &self.fimd,
            IpKind::Dampening => &self.dampening,
        }
    }

    /// True when both IPs finish a full patch within the GEMM window.
    pub fn hidden(&self) -> bool {
        let e = self.patch_elements();
        self.fimd.patch_latency(e) <= self.gemm_cycles_per_patch
            && self.dampening.patch_latency(e) <= self.gemm_cycles_per_patch
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IpKind {
    Fimd,
    Dampening,
}

/// Core cycles over pipelined-IP cycles for the same element count.
pub fn speedup_vs_core(elements: u64, cfg: &PipelineConfig, kind: IpKind) -> f64 {
    let ip = cfg.ip(kind);
    let e = elements.max(1);
    ip.core_cycles_per_element * e as f64 / ip.patch_latency(e) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Forward,
    #[default]
    Gradient,
    Checkpoint,
}

/// One workload record: `patches` GEMM tiles carrying `elements` gradient
/// values in total, split as evenly as possible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerWorkload {
    pub layer: usize,
    #[serde(default)]
    pub phase: Phase,
    pub patches: u64,
    pub elements: u64,
}

/// Per-patch timestamps for each stage (0 GEMM, 1 FIMD, 2 Dampening).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Timeline {
    pub start: Vec<[u64; 3]>,
    pub complete: Vec<[u64; 3]>,
    pub depart: Vec<[u64; 3]>,
    pub elements: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageStats {
    pub name: String,
    pub busy: u64,
    /// Cycles holding a finished patch with no room downstream.
    pub stall: u64,
    pub elements: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub cycles: u64,
    pub seconds: f64,
    pub components_mj: BTreeMap<String, f64>,
    pub total_mj: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub total_cycles: u64,
    pub patches: u64,
    pub stages: Vec<StageStats>,
    pub patches_per_cycle: f64,
    /// Gap between the last two patch departures.
    pub steady_interval: Option<u64>,
    pub hidden: bool,
    pub fimd_patch_latency: u64,
    pub dampening_patch_latency: u64,
    pub energy: Option<EnergyReport>,
    pub energy_ratio_vs_baseline: Option<f64>,
    pub calibrated_defaults: bool,
}

impl SimReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "cycles {} over {} patches", self.total_cycles, self.patches);
        let _ = writeln!(out, "patches/cycle {:.6}", self.patches_per_cycle);
        match self.steady_interval {
            Some(i) => {
                let _ = writeln!(out, "steady interval {i} cycles");
            }
            None => out.push_str("steady interval n/a\n"),
        }
        let _ = writeln!(
            out,
            "ip latency fimd {} dampening {} hidden {}",
            self.fimd_patch_latency, self.dampening_patch_latency, self.hidden
        );
        for s in &self.stages {
            let _ = writeln!(out, "{:<10} busy {:>12} stall {:>12} elements {:>12}", s.name, s.busy, s.stall, s.elements);
        }
        if let Some(e) = &self.energy {
            let _ = writeln!(out, "energy {:.6} mJ over {:.6} s", e.total_mj, e.seconds);
        }
        if let Some(r) = self.energy_ratio_vs_baseline {
            let _ = writeln!(out, "energy vs no-IP baseline {r:.2}%");
        }
        if self.calibrated_defaults {
            out.push_str("(calibrated default stage model)\n");
        }
        out
    }
}

fn patch_elements(workload: &[LayerWorkload], cfg: &PipelineConfig) -> Result<Vec<u64>> {
    if workload.is_empty() {
        return Err(Error::EmptyInput("empty workload".into()));
    }
    let cap = cfg.patch_elements();
    let mut out = Vec::new();
    for r in workload {
        if r.patches == 0 {
            return Err(Error::Config(format!("zero-size patch count for layer {}", r.layer)));
        }
        if r.elements > r.patches.saturating_mul(cap) {
            return Err(Error::Config(format!(
                "layer {} puts {} elements into {} patches of {cap}",
                r.layer, r.elements, r.patches
            )));
        }
        let (base, extra) = (r.elements / r.patches, r.elements % r.patches);
        out.extend((0..r.patches).map(|i| base + u64::from(i < extra)));
    }
    Ok(out)
}

struct Slot {
    patch: usize,
    started: bool,
    done: bool,
}

/// Event-driven run of the three-stage stream. GEMM holds one patch; each IP
/// holds one patch in service and one waiting. Events at the same cycle are
/// resolved downstream first.
pub fn simulate_timeline(workload: &[LayerWorkload], cfg: &PipelineConfig) -> Result<Timeline> {
    cfg.validate()?;
    let elements = patch_elements(workload, cfg)?;
    let k = elements.len();
    let latency = |stage: usize, p: usize| match stage {
        0 => cfg.gemm_cycles_per_patch,
        1 => cfg.fimd.patch_latency(elements[p]),
        _ => cfg.dampening.patch_latency(elements[p]),
    };
    let capacity = [1usize, 2, 2];
    let mut held: [VecDeque<Slot>; 3] = Default::default();
    let mut tl = Timeline {
        start: vec![[0; 3]; k],
        complete: vec![[0; 3]; k],
        depart: vec![[0; 3]; k],
        elements: elements.clone(),
    };
    // (time, downstream-first order, stage, patch)
    let mut events: BinaryHeap<Reverse<(u64, usize, usize, usize)>> = BinaryHeap::new();
    let mut next = 0usize;
    let mut finished = 0usize;
    let mut now = 0u64;

    loop {
        let mut changed = true;
        while changed {
            changed = false;
            for s in (0..3).rev() {
                if held[s].front().is_some_and(|f| f.done) {
                    let p = held[s].front().map(|f| f.patch).unwrap_or(0);
                    if s == 2 {
                        held[s].pop_front();
                        tl.depart[p][s] = now;
                        finished += 1;
                        changed = true;
                    } else if held[s + 1].len() < capacity[s + 1] {
                        held[s].pop_front();
                        tl.depart[p][s] = now;
                        held[s + 1].push_back(Slot { patch: p, started: false, done: false });
                        changed = true;
                    }
                }
                if let Some(front) = held[s].front_mut() {
                    if !front.started {
                        front.started = true;
                        tl.start[front.patch][s] = now;
                        events.push(Reverse((now + latency(s, front.patch), 2 - s, s, front.patch)));
                        changed = true;
                    }
                }
            }
            if held[0].is_empty() && next < k {
                held[0].push_back(Slot { patch: next, started: false, done: false });
                next += 1;
                changed = true;
            }
        }
        if finished == k {
            break;
        }
        let Some(Reverse((t, _, _, _))) = events.peek().copied() else {
            return Err(Error::Consistency("pipeline deadlocked".into()));
        };
        now = t;
        while let Some(Reverse((t, _, s, p))) = events.peek().copied() {
            if t != now {
                break;
            }
            events.pop();
            tl.complete[p][s] = t;
            if let Some(slot) = held[s].iter_mut().find(|x| x.patch == p) {
                slot.done = true;
            }
        }
    }
    Ok(tl)
}

fn idle_report(cfg: &PipelineConfig) -> SimReport {
    let full = cfg.patch_elements();
    SimReport {
        total_cycles: 0,
        patches: 0,
        stages: ["gemm", "fimd", "dampening"]
            .iter()
            .map(|n| StageStats { name: n.to_string(), busy: 0, stall: 0, elements: 0 })
            .collect(),
        patches_per_cycle: 0.0,
        steady_interval: None,
        hidden: cfg.hidden(),
        fimd_patch_latency: cfg.fimd.patch_latency(full),
        dampening_patch_latency: cfg.dampening.patch_latency(full),
        energy: None,
        energy_ratio_vs_baseline: None,
        calibrated_defaults: *cfg == PipelineConfig::default(),
    }
}

pub fn simulate_stream(workload: &[LayerWorkload], cfg: &PipelineConfig) -> Result<SimReport> {
    let tl = simulate_timeline(workload, cfg)?;
    let k = tl.elements.len();
    let total_cycles = tl.depart[k - 1][2];
    let names = ["gemm", "fimd", "dampening"];
    let stages = (0..3)
        .map(|s| StageStats {
            name: names[s].to_string(),
            busy: (0..k).map(|p| tl.complete[p][s] - tl.start[p][s]).sum(),
            stall: (0..k).map(|p| tl.depart[p][s] - tl.complete[p][s]).sum(),
            elements: tl.elements.iter().sum(),
        })
        .collect();
    let steady_interval = (k >= 2).then(|| tl.depart[k - 1][2] - tl.depart[k - 2][2]);
    let full = cfg.patch_elements();
    Ok(SimReport {
        total_cycles,
        patches: k as u64,
        stages,
        patches_per_cycle: if total_cycles == 0 { 0.0 } else { k as f64 / total_cycles as f64 },
        steady_interval,
        hidden: cfg.hidden(),
        fimd_patch_latency: cfg.fimd.patch_latency(full),
        dampening_patch_latency: cfg.dampening.patch_latency(full),
        energy: None,
        energy_ratio_vs_baseline: None,
        calibrated_defaults: *cfg == PipelineConfig::default(),
    })
}

/// Power per component in mW.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PowerTable {
    pub total: f64,
    pub core: f64,
    pub sram: f64,
    pub dma: f64,
    pub peripherals: f64,
    pub ddr: f64,
    pub interconnect: f64,
    pub unlearning_engine: f64,
    pub vta: f64,
    pub specialized_ips: f64,
}

impl Default for PowerTable {
    fn default() -> Self {
        PowerTable {
            total: 185.89,
            core: 11.2,
            sram: 1.71,
            dma: 4.07,
            peripherals: 5.68,
            ddr: 88.62,
            interconnect: 33.9,
            unlearning_engine: 40.71,
            vta: 39.9,
            specialized_ips: 0.81,
        }
    }
}

/// Leaf components of the processor with the specialized IPs.
pub const FICABU_COMPONENTS: [&str; 8] =
    ["core", "sram", "dma", "peripherals", "ddr", "interconnect", "vta", "specialized_ips"];
/// Leaf components of the same processor without them.
pub const BASELINE_COMPONENTS: [&str; 7] = ["core", "sram", "dma", "peripherals", "ddr", "interconnect", "vta"];

impl PowerTable {
    pub fn get(&self, name: &str) -> Result<f64> {
        Ok(match name {
            "total" => self.total,
            "core" => self.core,
            "sram" => self.sram,
            "dma" => self.dma,
            "peripherals" => self.peripherals,
            "ddr" => self.ddr,
            "interconnect" => self.interconnect,
            "unlearning_engine" => self.unlearning_engine,
            "vta" => self.vta,
            "specialized_ips" => self.specialized_ips,
            other => return Err(Error::Missing(format!("no power entry for component {other:?}"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        for name in FICABU_COMPONENTS.iter().chain(&["total", "unlearning_engine"]) {
            let v = self.get(name)?;
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("power of {name} must be non-negative")));
            }
        }
        if !(self.specialized_ips <= self.unlearning_engine && self.unlearning_engine <= self.total) {
            return Err(Error::Config("power table needs specialized_ips <= unlearning_engine <= total".into()));
        }
        Ok(())
    }
}

/// `E_c = P_c * cycles / clock_hz` for each active component, in mJ.
pub fn estimate_energy(cycles: u64, clock_hz: f64, power: &PowerTable, active: &[&str]) -> Result<EnergyReport> {
    if !(clock_hz > 0.0) {
        return Err(Error::Config("clock_hz must be positive".into()));
    }
    let seconds = cycles as f64 / clock_hz;
    let mut components_mj = BTreeMap::new();
    for &name in active {
        components_mj.insert(name.to_string(), power.get(name)? * seconds);
    }
    let total_mj = components_mj.values().sum();
    Ok(EnergyReport { cycles, seconds, components_mj, total_mj })
}

/// Converts a MAC ledger into a patch workload: the forward and checkpoint
/// passes occupy GEMM only; every gradient pass streams its per-sample
/// gradient values through both IPs.
pub fn workload_from_ledger(ledger: &MacLedger, cfg: &PipelineConfig) -> Vec<LayerWorkload> {
    let per_patch = cfg.macs_per_patch().max(1);
    let cap = cfg.patch_elements().max(1);
    let mut out = Vec::new();
    if ledger.forward_pass > 0 {
        out.push(LayerWorkload {
            layer: 0,
            phase: Phase::Forward,
            patches: ledger.forward_pass.div_ceil(per_patch),
            elements: 0,
        });
    }
    for e in &ledger.layers {
        let patches = e.gradient.div_ceil(per_patch).max(e.gradient_elements.div_ceil(cap));
        if patches > 0 {
            out.push(LayerWorkload { layer: e.layer, phase: Phase::Gradient, patches, elements: e.gradient_elements });
        }
        if e.checkpoint > 0 {
            out.push(LayerWorkload {
                layer: e.layer,
                phase: Phase::Checkpoint,
                patches: e.checkpoint.div_ceil(per_patch),
                elements: 0,
            });
        }
    }
    out
}

/// Cycles of the same workload on a processor without the IPs: GEMM tiles
/// back to back, then Fisher and dampening arithmetic on the scalar core.
pub fn baseline_cycles(workload: &[LayerWorkload], cfg: &PipelineConfig) -> u64 {
    let gemm: u64 = workload.iter().map(|r| r.patches * cfg.gemm_cycles_per_patch).sum();
    let elements: u64 = workload.iter().map(|r| r.elements).sum();
    let core = elements as f64 * (cfg.fimd.core_cycles_per_element + cfg.dampening.core_cycles_per_element);
    gemm + core.ceil() as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub cycles: u64,
    pub energy: EnergyReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemReport {
    pub ficabu: SimReport,
    pub baseline: BaselineReport,
    pub workload: Vec<LayerWorkload>,
    pub baseline_workload: Vec<LayerWorkload>,
}

/// Simulates an unlearning run on the IP-equipped processor and the SSD
/// reference run on the processor without IPs, and relates their energy.
pub fn simulate_system(
    ours: &MacLedger,
    ssd: &MacLedger,
    cfg: &PipelineConfig,
    power: &PowerTable,
) -> Result<SystemReport> {
    power.validate()?;
    let workload = workload_from_ledger(ours, cfg);
    let baseline_workload = workload_from_ledger(ssd, cfg);
    cfg.validate()?;
    let mut ficabu = if workload.is_empty() { idle_report(cfg) } else { simulate_stream(&workload, cfg)? };
    let energy = estimate_energy(ficabu.total_cycles, cfg.clock_hz, power, &FICABU_COMPONENTS)?;
    let cycles = baseline_cycles(&baseline_workload, cfg);
    let base_energy = estimate_energy(cycles, cfg.clock_hz, power, &BASELINE_COMPONENTS)?;
    ficabu.energy_ratio_vs_baseline =
        (base_energy.total_mj > 0.0).then(|| 100.0 * energy.total_mj / base_energy.total_mj);
    ficabu.energy = Some(energy);
    Ok(SystemReport {
        ficabu,
        baseline: BaselineReport { cycles, energy: base_energy },
        workload,
        baseline_workload,
    })
}
