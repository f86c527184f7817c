//! Latency tables, the affine latency model and wall-clock measurement.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SprintError};
use crate::model::{SublayerKind, SublayerStack};

/// Per-type latency saved by removing one sublayer, plus the fixed cost of
/// embedding, generator and framework overhead.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyTable {
    #[serde(rename = "t_mha_ms")]
    pub t_mha: f64,
    #[serde(rename = "t_mlp_ms")]
    pub t_mlp: f64,
    #[serde(rename = "overhead_ms")]
    pub overhead: f64,
}

/// Ratio-only reference for generation on Llama-3 8B: removing an attention
/// sublayer saves a bit over three times what removing an MLP sublayer does.
/// The absolute scale is arbitrary; selection only depends on the ratio.
pub const LLAMA3_8B_GEN_JSON: &str = include_str!("../reference/llama3-8b-gen.json");

impl LatencyTable {
    pub fn new(t_mha: f64, t_mlp: f64, overhead: f64) -> Result<Self> {
        let t = LatencyTable { t_mha, t_mlp, overhead };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_mha.is_finite() && self.t_mha > 0.0) || !(self.t_mlp.is_finite() && self.t_mlp > 0.0) {
            return Err(SprintError::Config(format!(
                "sublayer latencies must be positive and finite (t_mha {}, t_mlp {})",
                self.t_mha, self.t_mlp
            )));
        }
        if !(self.overhead.is_finite() && self.overhead >= 0.0) {
            return Err(SprintError::Config(format!("overhead {} must be finite and >= 0", self.overhead)));
        }
        Ok(())
    }

    pub fn t_for(&self, kind: SublayerKind) -> f64 {
        match kind {
            SublayerKind::Mha => self.t_mha,
            SublayerKind::Mlp => self.t_mlp,
        }
    }

    /// Multiplies every entry by `k`.
    pub fn scaled(&self, k: f64) -> LatencyTable {
        LatencyTable { t_mha: self.t_mha * k, t_mlp: self.t_mlp * k, overhead: self.overhead * k }
    }

    pub fn llama3_8b_generation() -> LatencyTable {
        serde_json::from_str(LLAMA3_8B_GEN_JSON).expect("bundled reference table parses")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<LatencyTable> {
        let t: LatencyTable = serde_json::from_slice(&fs::read(path)?)?;
        t.validate()?;
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// Latency of `model` under this table.
    pub fn latency_of(&self, model: &SublayerStack) -> f64 {
        let (n1, n2) = model.live_counts();
        model_latency(n1, n2, self)
    }
}

/// `n₁·t_mha + n₂·t_mlp + overhead`.
pub fn model_latency(n1: usize, n2: usize, table: &LatencyTable) -> f64 {
    n1 as f64 * table.t_mha + n2 as f64 * table.t_mlp + table.overhead
}

/// Cost of one iteration of an exhaustive pruner that re-evaluates the whole
/// remaining model once per live sublayer: `(n₁+n₂−1)(n₁·t_mha + n₂·t_mlp)`.
/// The fixed overhead is not included.
pub fn estimate_exhaustive_pruner_step(n1: usize, n2: usize, table: &LatencyTable) -> f64 {
    let live = (n1 + n2) as f64;
    (live - 1.0) * (n1 as f64 * table.t_mha + n2 as f64 * table.t_mlp)
}

/// One observed exhaustive-pruner iteration: live counts and measured time.
#[derive(Clone, Copy, Debug)]
pub struct StepObservation {
    pub n1: usize,
    pub n2: usize,
    pub time: f64,
}

/// Recovers `(t_mha, t_mlp)` from two exhaustive-pruner iterations by solving
/// the 2x2 linear system `n₁·t_mha + n₂·t_mlp = time / (n₁+n₂−1)`.
pub fn solve_step_latencies(a: StepObservation, b: StepObservation) -> Result<(f64, f64)> {
    let row = |o: StepObservation| -> Result<(f64, f64, f64)> {
        if o.n1 + o.n2 < 2 {
            return Err(SprintError::Config("each observation needs at least two live sublayers".into()));
        }
        Ok((o.n1 as f64, o.n2 as f64, o.time / (o.n1 + o.n2 - 1) as f64))
    };
    let (a1, a2, ra) = row(a)?;
    let (b1, b2, rb) = row(b)?;
    let det = a1 * b2 - a2 * b1;
    if det == 0.0 {
        return Err(SprintError::Config("observations do not determine both latencies".into()));
    }
    Ok(((ra * b2 - a2 * rb) / det, (a1 * rb - ra * b1) / det))
}

/// Source of forward-pass timings.
pub trait Clock {
    /// Milliseconds for one forward pass of `model` over `workload`.
    fn time_forward(&mut self, model: &SublayerStack, workload: &[Vec<u32>]) -> Result<f64>;
}

/// Wall-clock timing with [`Instant`].
#[derive(Debug, Default)]
pub struct MonotonicClock;

impl Clock for MonotonicClock {
    fn time_forward(&mut self, model: &SublayerStack, workload: &[Vec<u32>]) -> Result<f64> {
        let start = Instant::now();
        let out = model.forward(workload, &BTreeSet::new())?;
        let elapsed = start.elapsed();
        std::hint::black_box(out);
        Ok(elapsed.as_secs_f64() * 1e3)
    }
}

/// Deterministic clock charging fixed costs per live sublayer.
#[derive(Clone, Debug)]
pub struct SimulatedClock {
    pub costs: LatencyTable,
}

impl Clock for SimulatedClock {
    fn time_forward(&mut self, model: &SublayerStack, _workload: &[Vec<u32>]) -> Result<f64> {
        Ok(self.costs.latency_of(model))
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Measures `t_mha`, `t_mlp` and the overhead by timing the model as given
/// and with half of its live sublayers of one type skipped.
pub fn measure_latency_table(
    model: &SublayerStack,
    workload: &[Vec<u32>],
    trials: usize,
    clock: &mut dyn Clock,
) -> Result<LatencyTable> {
    if trials < 3 {
        return Err(SprintError::Config(format!("need at least 3 timing trials, got {trials}")));
    }
    let (n1, n2) = model.live_counts();
    if n1 < 2 || n2 < 2 {
        return Err(SprintError::Config(format!(
            "latency measurement needs >= 2 live sublayers of each type, have {n1} MHA and {n2} MLP"
        )));
    }
    model.check_tokens(workload)?;

    let without = |kind: SublayerKind, k: usize| -> SublayerStack {
        let mut m = model.clone();
        let victims: Vec<usize> =
            model.sublayers.iter().rev().filter(|l| !l.pruned && l.kind == kind).take(k).map(|l| l.index).collect();
        for s in victims {
            m.sublayer_mut(s).pruned = true;
        }
        m
    };
    let k_mha = n1 / 2;
    let k_mlp = n2 / 2;
    let no_mha = without(SublayerKind::Mha, k_mha);
    let no_mlp = without(SublayerKind::Mlp, k_mlp);

    let mut full = Vec::with_capacity(trials);
    let mut less_mha = Vec::with_capacity(trials);
    let mut less_mlp = Vec::with_capacity(trials);
    // interleave so slow drift affects all three variants alike
    for _ in 0..trials {
        full.push(clock.time_forward(model, workload)?);
        less_mha.push(clock.time_forward(&no_mha, workload)?);
        less_mlp.push(clock.time_forward(&no_mlp, workload)?);
    }
    let full = median(full);
    let t_mha = (full - median(less_mha)) / k_mha as f64;
    let t_mlp = (full - median(less_mlp)) / k_mlp as f64;
    if !(t_mha > 0.0 && t_mlp > 0.0) {
        return Err(SprintError::Measurement(format!(
            "derived non-positive sublayer latency (t_mha {t_mha:.4} ms, t_mlp {t_mlp:.4} ms); \
             rerun with more trials or a larger workload"
        )));
    }
    let overhead = (full - n1 as f64 * t_mha - n2 as f64 * t_mlp).max(0.0);
    LatencyTable::new(t_mha, t_mlp, overhead)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_toy_model, ModelConfig};

    fn toy() -> SublayerStack {
        let cfg = ModelConfig { d_model: 8, n_heads: 2, d_ff: 16, n_layers: 4, vocab_size: 16, max_seq_len: 8, norm_eps: 1e-6 };
        build_toy_model(&cfg, 0).unwrap()
    }

    #[test]
    fn simulated_clock_recovers_costs_exactly() {
        let model = toy();
        let mut clock = SimulatedClock { costs: LatencyTable::new(3.0, 1.0, 0.5).unwrap() };
        let workload = vec![vec![1, 2, 3]];
        let t = measure_latency_table(&model, &workload, 5, &mut clock).unwrap();
        assert_eq!(t, LatencyTable::new(3.0, 1.0, 0.5).unwrap());
        let again = measure_latency_table(&model, &workload, 5, &mut clock).unwrap();
        assert_eq!(t, again);
    }

    struct FlatClock;
    impl Clock for FlatClock {
        fn time_forward(&mut self, _: &SublayerStack, _: &[Vec<u32>]) -> Result<f64> {
            Ok(10.0)
        }
    }

    #[test]
    fn noise_floor_is_measurement_error() {
        let r = measure_latency_table(&toy(), &[vec![1]], 3, &mut FlatClock);
        assert!(matches!(r, Err(SprintError::Measurement(_))));
        assert!(matches!(measure_latency_table(&toy(), &[vec![1]], 2, &mut FlatClock), Err(SprintError::Config(_))));
    }

    #[test]
    fn model_latency_is_affine() {
        let t = LatencyTable::new(0.7, 1.3, 2.0).unwrap();
        assert_eq!(model_latency(0, 0, &t), 2.0);
        for n1 in 0..5 {
            for n2 in 0..5 {
                let step = model_latency(n1 + 1, n2, &t) - model_latency(n1, n2, &t);
                assert!((step - 0.7).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exhaustive_step_edge() {
        let t = LatencyTable::new(0.7, 1.3, 2.0).unwrap();
        assert_eq!(estimate_exhaustive_pruner_step(1, 0, &t), 0.0);
    }

    #[test]
    fn table_validation_and_json_keys() {
        assert!(LatencyTable::new(0.0, 1.0, 0.0).is_err());
        assert!(LatencyTable::new(1.0, 1.0, -1.0).is_err());
        let json = serde_json::to_value(LatencyTable::new(1.0, 2.0, 3.0).unwrap()).unwrap();
        assert_eq!(json["t_mha_ms"], 1.0);
        assert_eq!(json["t_mlp_ms"], 2.0);
        assert_eq!(json["overhead_ms"], 3.0);
    }

    #[test]
    fn bundled_generation_table_favors_attention() {
        let t = LatencyTable::llama3_8b_generation();
        assert!(t.t_mha > 3.0 * t.t_mlp);
    }
}
