//! Shared fixtures and a no-cache reference pruner.
//!
//! The reference recomputes every stream from the embedding on every
//! iteration and derives site inputs from full traced forwards with the
//! candidate skipped, so it shares no checkpoint, ledger or cache code with
//! the engine.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sprint_core::calibration::{synth_calibration, CalibrationSet};
use sprint_core::latency::LatencyTable;
use sprint_core::model::{build_toy_model, vary_sublayer_gains, ModelConfig, SublayerKind, SublayerStack};
use sprint_core::scoring::{sensitivity, Site};
use sprint_core::tuning::{in_compression_tune, Ridge, TunedProjection};
use sprint_core::Matrix;

pub fn toy_config(n_layers: usize) -> ModelConfig {
    ModelConfig { d_model: 32, n_heads: 4, d_ff: 64, n_layers, vocab_size: 64, max_seq_len: 64, norm_eps: 1e-6 }
}

pub fn toy(n_layers: usize, seed: u64) -> SublayerStack {
    build_toy_model(&toy_config(n_layers), seed).unwrap()
}

/// 4 x 32 = 128 tokens, enough for `n >= d_ff`.
pub fn calib(seed: u64) -> CalibrationSet {
    synth_calibration(64, 4, 32, seed).unwrap()
}

/// Toy model with unequal sublayer output gains.
pub fn toy_with_gains(n_layers: usize, seed: u64) -> SublayerStack {
    let mut model = toy(n_layers, seed);
    vary_sublayer_gains(&mut model, seed ^ 0x9a17);
    model
}

pub fn attention_heavy_table() -> LatencyTable {
    LatencyTable::new(3.2, 1.0, 0.0).unwrap()
}

/// Every residual stream of `model`, `0` being the embedding.
pub fn all_streams(model: &SublayerStack, calib: &CalibrationSet, skip: Option<usize>) -> BTreeMap<usize, Matrix> {
    let segs = calib.segments();
    let x0 = model.embed(&calib.sequences).unwrap();
    let skip: BTreeSet<usize> = skip.into_iter().collect();
    let mut out = model.forward_from(&x0, 1, model.n_sublayers(), &skip, &segs).unwrap();
    out.insert(0, x0);
    out
}

pub fn site_of(model: &SublayerStack, s: usize) -> Site {
    (s + 1..=model.n_sublayers())
        .find(|&d| d % 2 == 0 && !model.is_pruned(d))
        .map_or(Site::Final, Site::Mlp)
}

pub struct RefTuned {
    pub site: Site,
    pub zeta: f64,
    pub tuned: Option<TunedProjection>,
}

#[derive(Clone, Debug)]
pub struct RefIteration {
    /// `(s, ζ̃, η̃)` for every live sublayer, ranked by `η̃` then index.
    pub ranked: Vec<(usize, f64, f64)>,
    /// `(s, ζ, η)` for every candidate, in candidate order.
    pub evaluated: Vec<(usize, f64, f64)>,
    pub target: usize,
}

/// Dense-model streams used as site references.
pub struct DenseRefs(pub BTreeMap<usize, Matrix>);

impl DenseRefs {
    pub fn new(original: &SublayerStack, calib: &CalibrationSet) -> DenseRefs {
        DenseRefs(all_streams(original, calib, None))
    }

    pub fn at(&self, site: Site, n_sublayers: usize) -> &Matrix {
        match site {
            Site::Mlp(d) => &self.0[&d],
            Site::Final => &self.0[&n_sublayers],
        }
    }
}

pub fn ref_pseudo(model: &SublayerStack, calib: &CalibrationSet, refs: &DenseRefs, s: usize) -> f64 {
    let s_total = model.n_sublayers();
    let skipped = all_streams(model, calib, Some(s));
    let site = site_of(model, s);
    sensitivity(refs.at(site, s_total), &skipped[&site.position(s_total).min(s_total)]).unwrap()
}

pub fn ref_tuned(
    model: &SublayerStack,
    calib: &CalibrationSet,
    refs: &DenseRefs,
    s: usize,
    rows_percent: f64,
    ridge: Ridge,
) -> RefTuned {
    let s_total = model.n_sublayers();
    let skipped = all_streams(model, calib, Some(s));
    let site = site_of(model, s);
    match site {
        Site::Mlp(d) => {
            let x_ref = refs.at(site, s_total);
            let out = in_compression_tune(model, d, &skipped[&(d - 1)], x_ref, &calib.segments(), rows_percent, ridge)
                .unwrap();
            RefTuned { site, zeta: sensitivity(x_ref, &out.x_tuned).unwrap(), tuned: Some(out.tuned) }
        }
        Site::Final => RefTuned { site, zeta: sensitivity(refs.at(site, s_total), &skipped[&s_total]).unwrap(), tuned: None },
    }
}

/// Exhaustive pseudo-importance ranking of all live sublayers.
pub fn ref_ranking(model: &SublayerStack, calib: &CalibrationSet, refs: &DenseRefs, table: &LatencyTable) -> Vec<(usize, f64, f64)> {
    let mut ranked: Vec<(usize, f64, f64)> = model
        .live_indices()
        .into_iter()
        .map(|s| {
            let z = ref_pseudo(model, calib, refs, s);
            (s, z, z / table.t_for(model.sublayer(s).kind))
        })
        .collect();
    ranked.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)));
    ranked
}

/// One reference iteration on `model`: rank, filter to `beta`, evaluate, pick.
pub fn ref_iteration(
    model: &SublayerStack,
    calib: &CalibrationSet,
    refs: &DenseRefs,
    table: &LatencyTable,
    beta: usize,
    rows_percent: f64,
    ridge: Ridge,
) -> (RefIteration, Option<TunedProjection>) {
    let ranked = ref_ranking(model, calib, refs, table);
    let mut evaluated = Vec::new();
    let mut best: Option<(usize, f64, Option<TunedProjection>)> = None;
    for &(s, _, _) in ranked.iter().take(beta) {
        let ev = ref_tuned(model, calib, refs, s, rows_percent, ridge);
        let eta = ev.zeta / table.t_for(model.sublayer(s).kind);
        evaluated.push((s, ev.zeta, eta));
        let better = match &best {
            None => true,
            Some((bs, be, _)) => eta < *be || (eta == *be && s < *bs),
        };
        if better {
            best = Some((s, eta, ev.tuned));
        }
    }
    let (target, _, tuned) = best.unwrap();
    (RefIteration { ranked, evaluated, target }, tuned)
}

/// Full no-cache pruning run.
pub fn reference_run(
    original: &SublayerStack,
    calib: &CalibrationSet,
    table: &LatencyTable,
    tau: f64,
    beta: usize,
    rows_percent: f64,
    ridge: Ridge,
) -> (SublayerStack, Vec<RefIteration>) {
    let refs = DenseRefs::new(original, calib);
    let mut model = original.clone();
    let mut iters = Vec::new();
    while table.latency_of(&model) > tau {
        let (it, tuned) = ref_iteration(&model, calib, &refs, table, beta, rows_percent, ridge);
        model.prune(it.target).unwrap();
        if let Some(tp) = tuned {
            model.set_out_proj(tp.site, tp.weights).unwrap();
        }
        iters.push(it);
    }
    (model, iters)
}

/// Removes uniformly random live sublayers, untuned, until the latency fits.
pub fn random_prune(original: &SublayerStack, table: &LatencyTable, tau: f64, seed: u64) -> SublayerStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = original.live_indices();
    order.shuffle(&mut rng);
    let mut model = original.clone();
    for s in order {
        if table.latency_of(&model) <= tau {
            break;
        }
        model.prune(s).unwrap();
    }
    model
}

pub fn count_pruned(model: &SublayerStack) -> (usize, usize) {
    let mha = model.sublayers.iter().filter(|l| l.pruned && l.kind == SublayerKind::Mha).count();
    let mlp = model.sublayers.iter().filter(|l| l.pruned && l.kind == SublayerKind::Mlp).count();
    (mha, mlp)
}
