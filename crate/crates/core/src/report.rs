//! Run reports, pruning-pattern rendering, fidelity evaluation and SVG plots.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibration::{load_calibration, synth_calibration, CalibrationSet};
use crate::engine::{PruneConfig, PruneRecord};
use crate::error::{Result, SprintError};
use crate::latency::LatencyTable;
use crate::model::{ModelConfig, SublayerKind, SublayerStack};
use crate::scoring::sensitivity;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// How the calibration set of a run was obtained, so it can be rebuilt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum CalibrationSpec {
    File { path: PathBuf, n_seqs: usize, seq_len: usize, seed: u64 },
    Synth { n_seqs: usize, seq_len: usize, seed: u64 },
}

impl CalibrationSpec {
    pub fn load(&self, vocab_size: usize) -> Result<CalibrationSet> {
        let set = match self {
            CalibrationSpec::File { path, n_seqs, seq_len, seed } => load_calibration(path, *n_seqs, *seq_len, *seed)?,
            CalibrationSpec::Synth { n_seqs, seq_len, seed } => synth_calibration(vocab_size, *n_seqs, *seq_len, *seed)?,
        };
        set.check_vocab(vocab_size)?;
        Ok(set)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n_pruned_mha: usize,
    pub n_pruned_mlp: usize,
    pub latency_before: f64,
    pub latency_after: f64,
    /// `latency_before / latency_after`; absent when nothing is left to time.
    pub speedup: Option<f64>,
    /// Relative error of the final residual stream on the calibration set.
    pub final_zeta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub calibration: CalibrationSpec,
    pub config: PruneConfig,
    pub latency_table: LatencyTable,
    pub records: Vec<PruneRecord>,
    pub summary: Summary,
    pub pattern: String,
}

impl Report {
    pub fn build(
        original: &SublayerStack,
        pruned: &SublayerStack,
        calib: &CalibrationSet,
        calibration: CalibrationSpec,
        config: &PruneConfig,
        table: &LatencyTable,
        records: Vec<PruneRecord>,
    ) -> Result<Report> {
        let mut n_pruned_mha = 0;
        let mut n_pruned_mlp = 0;
        for l in pruned.sublayers.iter().filter(|l| l.pruned) {
            match l.kind {
                SublayerKind::Mha => n_pruned_mha += 1,
                SublayerKind::Mlp => n_pruned_mlp += 1,
            }
        }
        let latency_before = table.latency_of(original);
        let latency_after = table.latency_of(pruned);
        let final_zeta = sensitivity(&original.final_hidden(&calib.sequences)?, &pruned.final_hidden(&calib.sequences)?)?;
        let summary = Summary {
            n_pruned_mha,
            n_pruned_mlp,
            latency_before,
            latency_after,
            speedup: (latency_after > 0.0).then(|| latency_before / latency_after),
            final_zeta,
        };
        Ok(Report {
            schema_version: REPORT_SCHEMA_VERSION,
            model: original.config.clone(),
            calibration,
            config: config.clone(),
            latency_table: *table,
            records,
            summary,
            pattern: render_pattern(pruned),
        })
    }

    /// Checks the summary against the pattern and the records.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != REPORT_SCHEMA_VERSION {
            return Err(SprintError::Format(format!("unsupported report schema {}", self.schema_version)));
        }
        let (mha, mlp) = pattern_pruned_counts(&self.pattern)?;
        if (mha, mlp) != (self.summary.n_pruned_mha, self.summary.n_pruned_mlp) {
            return Err(SprintError::Format("summary counts disagree with the pattern".into()));
        }
        if self.records.len() != mha + mlp {
            return Err(SprintError::Format("record count disagrees with the pattern".into()));
        }
        if let Some(x) = self.summary.speedup.filter(|x| !(*x >= 1.0)) {
            return Err(SprintError::Format(format!("speedup {x} below 1")));
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.iteration != i + 1 {
                return Err(SprintError::Format(format!("record {} out of order", r.iteration)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Report> {
        let r: Report = serde_json::from_slice(&fs::read(path)?)?;
        r.validate()?;
        Ok(r)
    }
}

/// One character per sublayer: `A` live attention, `M` live MLP, `·` pruned.
/// Layers are separated by spaces.
pub fn render_pattern(model: &SublayerStack) -> String {
    let mut out = String::with_capacity(model.n_sublayers() * 2);
    for (i, l) in model.sublayers.iter().enumerate() {
        if i > 0 && i % 2 == 0 {
            out.push(' ');
        }
        out.push(match (l.pruned, l.kind) {
            (true, _) => '·',
            (false, SublayerKind::Mha) => 'A',
            (false, SublayerKind::Mlp) => 'M',
        });
    }
    out
}

/// Counts pruned attention and MLP positions in a rendered pattern.
pub fn pattern_pruned_counts(pattern: &str) -> Result<(usize, usize)> {
    let mut mha = 0;
    let mut mlp = 0;
    for (i, c) in pattern.chars().filter(|&c| c != ' ').enumerate() {
        let expected = if i % 2 == 0 { 'A' } else { 'M' };
        match c {
            '·' if i % 2 == 0 => mha += 1,
            '·' => mlp += 1,
            c if c == expected => {}
            _ => return Err(SprintError::Format(format!("bad pattern character {c:?} at position {}", i + 1))),
        }
    }
    Ok((mha, mlp))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    pub rel_error: f64,
    pub nll_original: f64,
    pub nll_pruned: f64,
    /// `exp(nll_pruned) / exp(nll_original)`.
    pub ppl_ratio: f64,
}

/// Compares `pruned` against `original` on held-out sequences.
pub fn eval_fidelity(original: &SublayerStack, pruned: &SublayerStack, holdout: &[Vec<u32>]) -> Result<Fidelity> {
    if original.config != pruned.config {
        return Err(SprintError::Config("models do not share a configuration".into()));
    }
    let h_orig = original.final_hidden(holdout)?;
    let h_pruned = pruned.final_hidden(holdout)?;
    let rel_error = sensitivity(&h_orig, &h_pruned)?;
    let nll_original = mean_nll(original, &h_orig, holdout)?;
    let nll_pruned = mean_nll(pruned, &h_pruned, holdout)?;
    Ok(Fidelity { rel_error, nll_original, nll_pruned, ppl_ratio: (nll_pruned - nll_original).exp() })
}

/// Mean next-token negative log-likelihood within each sequence.
fn mean_nll(model: &SublayerStack, hidden: &crate::matrix::ActivationMatrix, tokens: &[Vec<u32>]) -> Result<f64> {
    let logits = model.generate(hidden)?;
    let vocab = logits.rows();
    let mut total = 0.0;
    let mut count = 0usize;
    let mut col = 0;
    for seq in tokens {
        for (pos, &next) in seq.iter().enumerate().skip(1) {
            let c = col + pos - 1;
            let max = (0..vocab).map(|v| logits.get(v, c)).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..vocab).map(|v| (logits.get(v, c) - max).exp()).sum::<f64>().ln();
            total += lse - logits.get(next as usize, c);
            count += 1;
        }
        col += seq.len();
    }
    if count == 0 {
        return Err(SprintError::Data("holdout needs sequences of length >= 2".into()));
    }
    Ok(total / count as f64)
}

const MHA_COLOR: &str = "#4c72b0";
const MLP_COLOR: &str = "#dd8452";
const PRUNED_COLOR: &str = "#d9d9d9";

/// SVG with the pruning pattern on top and latency per iteration below.
pub fn plot_svg(report: &Report) -> String {
    let cells: Vec<char> = report.pattern.chars().filter(|&c| c != ' ').collect();
    let s_total = cells.len().max(1);
    let width = 640.0_f64;
    let margin = 48.0;
    let plot_w = width - 2.0 * margin;
    let cell_w = plot_w / s_total as f64;
    let strip_h = 28.0;
    let chart_top = margin + strip_h + 40.0;
    let chart_h = 220.0;
    let height = chart_top + chart_h + margin;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{margin}" y="{:.1}">pattern: {} MHA, {} MLP pruned, speedup {}</text>"#,
        margin - 10.0,
        report.summary.n_pruned_mha,
        report.summary.n_pruned_mlp,
        report.summary.speedup.map_or("n/a".to_string(), |x| format!("{x:.3}x"))
    );
    for (i, &c) in cells.iter().enumerate() {
        let fill = match c {
            'A' => MHA_COLOR,
            'M' => MLP_COLOR,
            _ => PRUNED_COLOR,
        };
        let x = margin + i as f64 * cell_w;
        let _ = writeln!(
            svg,
            r#"<rect x="{x:.2}" y="{margin}" width="{:.2}" height="{strip_h}" fill="{fill}" stroke="white"><title>{} {}</title></rect>"#,
            cell_w,
            i + 1,
            c
        );
    }

    let mut lat = vec![report.summary.latency_before];
    lat.extend(report.records.iter().map(|r| r.latency_after));
    let y_max = lat.iter().copied().fold(report.config.tau_ms, f64::max).max(f64::MIN_POSITIVE);
    let y_of = |v: f64| chart_top + chart_h * (1.0 - v / y_max);
    let bar_w = plot_w / lat.len() as f64;
    let _ = writeln!(
        svg,
        r#"<line x1="{margin}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#,
        chart_top + chart_h,
        margin + plot_w,
        chart_top + chart_h
    );
    for (i, &v) in lat.iter().enumerate() {
        let fill = match i.checked_sub(1).map(|k| report.records[k].kind) {
            None => "#8c8c8c",
            Some(SublayerKind::Mha) => MHA_COLOR,
            Some(SublayerKind::Mlp) => MLP_COLOR,
        };
        let x = margin + i as f64 * bar_w + 0.1 * bar_w;
        let y = y_of(v);
        let _ = writeln!(
            svg,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{fill}"><title>iteration {i}: {v:.4} ms</title></rect>"#,
            0.8 * bar_w,
            chart_top + chart_h - y
        );
    }
    let ty = y_of(report.config.tau_ms);
    let _ = writeln!(
        svg,
        r#"<line x1="{margin}" y1="{ty:.2}" x2="{:.2}" y2="{ty:.2}" stroke="crimson" stroke-dasharray="4 3"/>"#,
        margin + plot_w
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" fill="crimson" text-anchor="end">tau {:.4} ms</text>"#,
        margin + plot_w,
        ty - 4.0,
        report.config.tau_ms
    );
    let _ = writeln!(
        svg,
        r#"<text x="{margin}" y="{:.2}">latency (ms) after each iteration</text>"#,
        chart_top + chart_h + 18.0
    );
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::run;
    use crate::model::build_toy_model;

    fn cfg(n_layers: usize) -> ModelConfig {
        ModelConfig { d_model: 8, n_heads: 2, d_ff: 16, n_layers, vocab_size: 32, max_seq_len: 16, norm_eps: 1e-6 }
    }

    #[test]
    fn pattern_rendering() {
        let mut m = build_toy_model(&cfg(4), 0).unwrap();
        assert_eq!(render_pattern(&m), "AM AM AM AM");
        m.prune(5).unwrap();
        m.prune(7).unwrap();
        assert_eq!(render_pattern(&m), "AM AM ·M ·M");
        assert_eq!(pattern_pruned_counts("AM AM ·M ·M").unwrap(), (2, 0));
        assert_eq!(pattern_pruned_counts("A· ··").unwrap(), (1, 2));
        assert!(pattern_pruned_counts("MA").is_err());
    }

    #[test]
    fn identical_models_have_perfect_fidelity() {
        let m = build_toy_model(&cfg(2), 1).unwrap();
        let hold = synth_calibration(32, 2, 6, 9).unwrap();
        let f = eval_fidelity(&m, &m, &hold.sequences).unwrap();
        assert_eq!(f.rel_error, 0.0);
        assert_eq!(f.ppl_ratio, 1.0);
        assert!(f.nll_original > 0.0);
    }

    #[test]
    fn fully_pruned_model_loses_most_of_the_stream() {
        let m = build_toy_model(&cfg(3), 2).unwrap();
        let mut p = m.clone();
        for s in 1..=6 {
            p.prune(s).unwrap();
        }
        let hold = synth_calibration(32, 2, 6, 3).unwrap();
        let f = eval_fidelity(&m, &p, &hold.sequences).unwrap();
        assert!(f.rel_error > 0.5, "{}", f.rel_error);
        let other = build_toy_model(&cfg(2), 2).unwrap();
        assert!(eval_fidelity(&m, &other, &hold.sequences).is_err());
    }

    #[test]
    fn nll_matches_uniform_logits() {
        let mut m = build_toy_model(&cfg(1), 3).unwrap();
        m.lm_head = crate::matrix::Matrix::zeros(8, 32);
        let h = m.final_hidden(&[vec![1, 2, 3]]).unwrap();
        let nll = mean_nll(&m, &h, &[vec![1, 2, 3]]).unwrap();
        assert!((nll - 32f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn report_round_trip_and_plot() {
        let m = build_toy_model(&cfg(3), 4).unwrap();
        let spec = CalibrationSpec::Synth { n_seqs: 2, seq_len: 8, seed: 5 };
        let calib = spec.load(32).unwrap();
        let table = LatencyTable::new(3.0, 1.0, 0.5).unwrap();
        let config = PruneConfig::new(table.latency_of(&m) * 0.6);
        let out = run(m.clone(), &calib, &config, &table).unwrap();
        let report = Report::build(&m, &out.model, &calib, spec, &config, &table, out.records).unwrap();
        report.validate().unwrap();
        assert!(report.summary.speedup.unwrap() >= 1.0);
        assert!(report.summary.latency_after <= config.tau_ms);
        let back: Report = serde_json::from_str(&report.to_json().unwrap()).unwrap();
        assert_eq!(back, report);
        let svg = plot_svg(&report);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<title>").count(), 6 + report.records.len() + 1);
    }
}
