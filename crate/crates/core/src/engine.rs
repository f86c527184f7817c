//! The greedy pruning loop.
//!
//! Each iteration:
//!
//! 1. refreshes the untuned pseudo-sensitivity `ζ̃` of every live sublayer
//!    whose cached value went stale, resuming forward passes from the
//!    nearest activation checkpoint, and keeps the `β` sublayers with the
//!    smallest pseudo-importance `ζ̃ / t` as candidates;
//! 2. retunes the evaluation site of each candidate and picks the one with
//!    the smallest importance `ζ / t`;
//! 3. removes it, installs the tuned projection computed while scoring it,
//!    invalidates cached scores at or above the removed index and refreshes
//!    the checkpoints above it.
//!
//! The loop stops once the analytic latency is within the budget `τ`. All
//! ties resolve to the lowest sublayer index.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationSet;
use crate::checkpoint::{CheckpointStore, ValidityLedger, Validity};
use crate::error::{Result, SprintError};
use crate::latency::LatencyTable;
use crate::model::{SublayerKind, SublayerStack};
use crate::scoring::{
    evaluation_site, importance, pseudo_sensitivity, tuned_sensitivity, Site, SiteReferences, TunedEvaluation,
};
use crate::tuning::{Ridge, TunedProjection};

pub const DEFAULT_ALPHA: usize = 8;
pub const DEFAULT_BETA: usize = 5;

/// Which model the site references come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// The original dense model, captured once before pruning.
    #[default]
    Dense,
    /// The current pruned model, recaptured after every prune. Every cached
    /// score goes stale on each iteration in this mode.
    Current,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub tau_ms: f64,
    pub alpha: usize,
    pub beta: usize,
    pub rows_percent: f64,
    pub ridge: Ridge,
    pub seed: u64,
    #[serde(default)]
    pub reference: ReferenceMode,
    /// Record per-iteration wall time. Off by default so records are
    /// reproducible byte for byte.
    #[serde(default)]
    pub record_timings: bool,
    /// Keep checkpoints on disk instead of in memory.
    #[serde(skip)]
    pub spill_dir: Option<PathBuf>,
}

impl PruneConfig {
    pub fn new(tau_ms: f64) -> PruneConfig {
        PruneConfig {
            tau_ms,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            rows_percent: 100.0,
            ridge: Ridge::Auto,
            seed: 0,
            reference: ReferenceMode::Dense,
            record_timings: false,
            spill_dir: None,
        }
    }

    pub fn validate(&self, table: &LatencyTable) -> Result<()> {
        table.validate()?;
        if self.alpha < 1 {
            return Err(SprintError::Config("alpha must be >= 1".into()));
        }
        if self.beta < 1 {
            return Err(SprintError::Config("beta must be >= 1".into()));
        }
        if !(self.rows_percent > 0.0 && self.rows_percent <= 100.0) {
            return Err(SprintError::Config(format!("rows percent {} outside (0, 100]", self.rows_percent)));
        }
        if !self.tau_ms.is_finite() {
            return Err(SprintError::Config("tau must be finite".into()));
        }
        if self.tau_ms < table.overhead {
            return Err(SprintError::Unsatisfiable { tau_ms: self.tau_ms, overhead_ms: table.overhead });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub s: usize,
    pub zeta_tilde: f64,
    pub eta_tilde: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluatedScore {
    pub s: usize,
    pub site: Site,
    pub zeta: f64,
    pub eta: f64,
}

/// One iteration of the loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneRecord {
    pub iteration: usize,
    pub candidates: Vec<CandidateScore>,
    pub evaluated: Vec<EvaluatedScore>,
    pub target: usize,
    pub kind: SublayerKind,
    pub site: Site,
    pub latency_after: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

/// Pseudo-sensitivity of one live sublayer as seen in one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub s: usize,
    pub site: Site,
    pub zeta_tilde: f64,
    pub eta_tilde: f64,
    /// Taken from the cache instead of recomputed.
    pub reused: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationScores {
    pub iteration: usize,
    pub scores: Vec<ScoreEntry>,
}

#[derive(Clone, Debug)]
struct CachedScore {
    site: Site,
    zeta_tilde: f64,
    tuned: Option<TunedEvaluation>,
}

/// The chosen target of one iteration, with the projection to install.
#[derive(Clone, Debug)]
pub struct Selection {
    pub target: usize,
    pub site: Site,
    pub tuned: Option<TunedProjection>,
    pub evaluated: Vec<EvaluatedScore>,
}

/// Mutable state of one pruning run.
pub struct Pruner<'a> {
    model: SublayerStack,
    calib: &'a CalibrationSet,
    table: LatencyTable,
    config: PruneConfig,
    segments: Vec<usize>,
    refs: SiteReferences,
    store: CheckpointStore,
    ledger: ValidityLedger,
    cache: BTreeMap<usize, CachedScore>,
    iteration: usize,
    score_log: Vec<IterationScores>,
}

impl<'a> Pruner<'a> {
    pub fn new(
        model: SublayerStack,
        calib: &'a CalibrationSet,
        table: LatencyTable,
        config: PruneConfig,
    ) -> Result<Pruner<'a>> {
        config.validate(&table)?;
        calib.check_vocab(model.config.vocab_size)?;
        let segments = model.check_tokens(&calib.sequences)?;
        let refs = SiteReferences::capture(&model, &calib.sequences)?;
        let alpha = config.alpha.min(model.n_sublayers());
        let store = CheckpointStore::build(&model, &calib.sequences, alpha, config.spill_dir.as_deref())?;
        let ledger = ValidityLedger::new(&model);
        Ok(Pruner {
            model,
            calib,
            table,
            config,
            segments,
            refs,
            store,
            ledger,
            cache: BTreeMap::new(),
            iteration: 0,
            score_log: Vec::new(),
        })
    }

    pub fn model(&self) -> &SublayerStack {
        &self.model
    }

    pub fn into_model(self) -> SublayerStack {
        self.model
    }

    pub fn latency(&self) -> f64 {
        self.table.latency_of(&self.model)
    }

    pub fn checkpoints(&self) -> &CheckpointStore {
        &self.store
    }

    pub fn ledger(&self) -> &ValidityLedger {
        &self.ledger
    }

    pub fn score_log(&self) -> &[IterationScores] {
        &self.score_log
    }

    pub fn is_done(&self) -> bool {
        self.latency() <= self.config.tau_ms || self.model.live_indices().is_empty()
    }

    /// Recomputes stale pseudo-sensitivities and returns the `β` live
    /// sublayers with the smallest pseudo-importance.
    pub fn fast_candidate_selection(&mut self) -> Result<Vec<CandidateScore>> {
        let live = self.model.live_indices();
        if live.is_empty() {
            return Err(SprintError::Config("no live sublayers left to prune".into()));
        }
        let stale: Vec<usize> = live.iter().copied().filter(|&s| self.ledger.status(s) != Validity::Valid).collect();
        let mut recomputed = Vec::new();
        if let Some(&first) = stale.first() {
            // one upward sweep of the current stream, branching at each stale index
            let start = self.store.nearest_at_or_below(first);
            let mut x = self.store.load(start)?;
            let mut at = start;
            for &s in &stale {
                x = self.model.advance(x, at, s - 1, &Default::default(), &self.segments)?;
                at = s;
                let (zeta_tilde, site) = pseudo_sensitivity(&self.model, s, &x, &self.refs, &self.segments)?;
                self.cache.insert(s, CachedScore { site, zeta_tilde, tuned: None });
                self.ledger.mark_valid(s, site.position(self.model.n_sublayers()));
                recomputed.push(s);
            }
        }

        let mut scores = Vec::with_capacity(live.len());
        for &s in &live {
            let cached = &self.cache[&s];
            let t = self.table.t_for(self.model.sublayer(s).kind);
            scores.push(ScoreEntry {
                s,
                site: cached.site,
                zeta_tilde: cached.zeta_tilde,
                eta_tilde: importance(cached.zeta_tilde, t)?,
                reused: !recomputed.contains(&s),
            });
        }
        debug!("iteration {}: recomputed {} of {} pseudo-sensitivities", self.iteration + 1, recomputed.len(), live.len());

        let mut ranked: Vec<CandidateScore> =
            scores.iter().map(|e| CandidateScore { s: e.s, zeta_tilde: e.zeta_tilde, eta_tilde: e.eta_tilde }).collect();
        ranked.sort_by(|a, b| a.eta_tilde.total_cmp(&b.eta_tilde).then(a.s.cmp(&b.s)));
        ranked.truncate(self.config.beta);
        self.score_log.push(IterationScores { iteration: self.iteration + 1, scores });
        Ok(ranked)
    }

    /// Scores every candidate after retuning its site and returns the one
    /// with the smallest importance, along with its tuned projection.
    pub fn tunability_aware_target_selection(&mut self, candidates: &[CandidateScore]) -> Result<Selection> {
        if candidates.is_empty() {
            return Err(SprintError::Config("empty candidate set".into()));
        }
        let pending: Vec<usize> = candidates
            .iter()
            .map(|c| c.s)
            .filter(|s| self.cache.get(s).is_none_or(|c| c.tuned.is_none()))
            .collect();
        let fresh: Vec<(usize, TunedEvaluation)> = {
            let this = &*self;
            pending
                .par_iter()
                .map(|&s| {
                    let x = this.store.stream_entering(&this.model, s)?;
                    let ev = tuned_sensitivity(
                        &this.model,
                        s,
                        &x,
                        &this.refs,
                        &this.segments,
                        this.config.rows_percent,
                        this.config.ridge,
                    )?;
                    Ok((s, ev))
                })
                .collect::<Result<_>>()?
        };
        for (s, ev) in fresh {
            if let Some(c) = self.cache.get_mut(&s) {
                c.tuned = Some(ev);
            }
        }

        let mut evaluated = Vec::with_capacity(candidates.len());
        for c in candidates {
            let ev = self.cache[&c.s].tuned.as_ref().expect("evaluated above");
            let t = self.table.t_for(self.model.sublayer(c.s).kind);
            evaluated.push(EvaluatedScore { s: c.s, site: ev.site, zeta: ev.zeta, eta: importance(ev.zeta, t)? });
        }
        if evaluated.iter().all(|e| e.site == Site::Final) {
            warn!("no candidate has a live MLP above it; selecting on untuned final-stream sensitivity");
        }
        let best = evaluated
            .iter()
            .min_by(|a, b| a.eta.total_cmp(&b.eta).then(a.s.cmp(&b.s)))
            .expect("nonempty");
        let cached = self.cache[&best.s].tuned.as_ref().expect("evaluated above");
        Ok(Selection { target: best.s, site: best.site, tuned: cached.tuned.clone(), evaluated })
    }

    /// Removes the target, installs its saved tuned projection and brings
    /// the caches up to date.
    pub fn prune_step(&mut self, selection: &Selection) -> Result<()> {
        let target = selection.target;
        if self.model.is_pruned(target) {
            return Err(SprintError::Config(format!("sublayer {target} is already pruned")));
        }
        self.model.prune(target)?;
        if let Some(tp) = &selection.tuned {
            self.model.set_out_proj(tp.site, tp.weights.clone())?;
        }
        self.ledger.invalidate_after_prune(target);
        self.cache.remove(&target);
        if self.config.reference == ReferenceMode::Current {
            self.refs = SiteReferences::capture(&self.model, &self.calib.sequences)?;
            self.ledger.mark_all_stale();
        }
        self.store.refresh_after_prune(&self.model, target)
    }

    /// Runs one full iteration.
    pub fn step(&mut self) -> Result<PruneRecord> {
        let started = Instant::now();
        let candidates = self.fast_candidate_selection()?;
        let selection = self.tunability_aware_target_selection(&candidates)?;
        self.prune_step(&selection)?;
        self.iteration += 1;
        let record = PruneRecord {
            iteration: self.iteration,
            candidates,
            evaluated: selection.evaluated,
            target: selection.target,
            kind: self.model.sublayer(selection.target).kind,
            site: selection.site,
            latency_after: self.latency(),
            wall_time_s: self.config.record_timings.then(|| started.elapsed().as_secs_f64()),
        };
        debug!(
            "iteration {}: pruned {} ({:?}) at site {:?}, latency {:.4} ms",
            record.iteration, record.target, record.kind, record.site, record.latency_after
        );
        Ok(record)
    }
}

#[derive(Debug)]
pub struct PruneOutcome {
    pub model: SublayerStack,
    pub records: Vec<PruneRecord>,
    pub scores: Vec<IterationScores>,
}

/// Prunes until the analytic latency is at most `config.tau_ms`.
pub fn run(
    model: SublayerStack,
    calib: &CalibrationSet,
    config: &PruneConfig,
    table: &LatencyTable,
) -> Result<PruneOutcome> {
    config.validate(table)?;
    let mut pruner = Pruner::new(model, calib, *table, config.clone())?;
    let mut records = Vec::new();
    while !pruner.is_done() {
        records.push(pruner.step()?);
    }
    let scores = pruner.score_log.clone();
    Ok(PruneOutcome { model: pruner.into_model(), records, scores })
}

/// Re-applies a recorded trajectory to the input model, re-solving each
/// tuned projection from scratch. Fails if a recorded site or sensitivity
/// does not match the recomputation.
pub fn replay(
    model: &SublayerStack,
    calib: &CalibrationSet,
    config: &PruneConfig,
    records: &[PruneRecord],
) -> Result<SublayerStack> {
    calib.check_vocab(model.config.vocab_size)?;
    let segments = model.check_tokens(&calib.sequences)?;
    let mut current = model.clone();
    let mut refs = SiteReferences::capture(model, &calib.sequences)?;
    for rec in records {
        let s = rec.target;
        if s == 0 || s > current.n_sublayers() || current.is_pruned(s) {
            return Err(SprintError::Data(format!("record {} targets unavailable sublayer {s}", rec.iteration)));
        }
        let site = evaluation_site(&current, s);
        if site != rec.site {
            return Err(SprintError::Data(format!(
                "record {}: site {:?} differs from recomputed {:?}",
                rec.iteration, rec.site, site
            )));
        }
        let x = current.advance(current.embed(&calib.sequences)?, 1, s - 1, &Default::default(), &segments)?;
        let ev = tuned_sensitivity(&current, s, &x, &refs, &segments, config.rows_percent, config.ridge)?;
        if let Some(recorded) = rec.evaluated.iter().find(|e| e.s == s) {
            if recorded.zeta != ev.zeta {
                return Err(SprintError::Data(format!(
                    "record {}: sensitivity {} does not reproduce (got {})",
                    rec.iteration, recorded.zeta, ev.zeta
                )));
            }
        }
        current.prune(s)?;
        if let Some(tp) = ev.tuned {
            current.set_out_proj(tp.site, tp.weights)?;
        }
        if config.reference == ReferenceMode::Current {
            refs = SiteReferences::capture(&current, &calib.sequences)?;
        }
    }
    Ok(current)
}
