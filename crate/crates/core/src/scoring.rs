//! Sensitivities, pseudo-sensitivities and latency-normalized importances.
//!
//! Removing sublayer `s` is judged at its evaluation site: the closest live
//! MLP sublayer `d > s`. The pseudo-sensitivity compares the site output of
//! the candidate-skipped stream against the dense model; the sensitivity does
//! the same after retuning the site's output projection. When no live MLP
//! lies above `s`, the site is the final residual stream and no tuning
//! happens.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SprintError};
use crate::matrix::ActivationMatrix;
use crate::model::{sublayer_apply, SublayerKind, SublayerStack};
use crate::tuning::{in_compression_tune, Ridge, TunedProjection};

/// Where a candidate's removal is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    /// Output of this MLP sublayer, which is also the tuning site.
    Mlp(usize),
    /// Final residual stream, used when no live MLP lies above.
    Final,
}

impl Site {
    /// Sublayer index of the site; `S + 1` stands for the final stream.
    pub fn position(self, n_sublayers: usize) -> usize {
        match self {
            Site::Mlp(d) => d,
            Site::Final => n_sublayers + 1,
        }
    }

    pub fn mlp(self) -> Option<usize> {
        match self {
            Site::Mlp(d) => Some(d),
            Site::Final => None,
        }
    }
}

/// Smallest live MLP index strictly above `s`.
pub fn closest_upper_mlp(model: &SublayerStack, s: usize) -> Option<usize> {
    (s + 1..=model.n_sublayers()).find(|&d| {
        let l = model.sublayer(d);
        l.kind == SublayerKind::Mlp && !l.pruned
    })
}

pub fn evaluation_site(model: &SublayerStack, s: usize) -> Site {
    closest_upper_mlp(model, s).map_or(Site::Final, Site::Mlp)
}

/// `‖X_ref − X̂_t‖_F / ‖X_ref‖_F`.
pub fn sensitivity(x_ref: &ActivationMatrix, x_hat_t: &ActivationMatrix) -> Result<f64> {
    let norm = x_ref.frobenius_norm();
    if norm == 0.0 {
        return Err(SprintError::DegenerateReference);
    }
    Ok(x_ref.frobenius_distance(x_hat_t)? / norm)
}

/// `ζ / t`.
pub fn importance(zeta: f64, t_s: f64) -> Result<f64> {
    if !(t_s > 0.0) {
        return Err(SprintError::Config(format!("sublayer latency must be positive, got {t_s}")));
    }
    Ok(zeta / t_s)
}

/// Dense-model site outputs `X⁽ᵈ⁺¹⁾` for every MLP `d`, plus the final stream.
#[derive(Clone, Debug)]
pub struct SiteReferences {
    by_site: BTreeMap<usize, ActivationMatrix>,
    final_stream: ActivationMatrix,
}

impl SiteReferences {
    /// Runs `model` once over `tokens` and keeps the outputs of its MLP
    /// sublayers. Pruned MLPs get the pass-through stream.
    pub fn capture(model: &SublayerStack, tokens: &[Vec<u32>]) -> Result<SiteReferences> {
        let s_total = model.n_sublayers();
        let trace: BTreeSet<usize> = (1..=s_total).filter(|s| s % 2 == 0).chain([s_total]).collect();
        let mut out = model.forward(tokens, &trace)?;
        let final_stream = out.captured[&s_total].clone();
        out.captured.retain(|k, _| k % 2 == 0);
        Ok(SiteReferences { by_site: out.captured, final_stream })
    }

    pub fn at(&self, site: Site) -> &ActivationMatrix {
        match site {
            Site::Mlp(d) => &self.by_site[&d],
            Site::Final => &self.final_stream,
        }
    }
}

/// Candidate-skipped stream entering the site (or the final stream for
/// [`Site::Final`]), given the current stream `x_entering` entering `s`.
pub fn candidate_branch(
    model: &SublayerStack,
    s: usize,
    site: Site,
    x_entering: &ActivationMatrix,
    segments: &[usize],
) -> Result<ActivationMatrix> {
    let end = match site {
        Site::Mlp(d) => d - 1,
        Site::Final => model.n_sublayers(),
    };
    model.advance(x_entering.clone(), s + 1, end, &BTreeSet::new(), segments)
}

/// Untuned sensitivity `ζ̃` of removing `s`.
pub fn pseudo_sensitivity(
    model: &SublayerStack,
    s: usize,
    x_entering: &ActivationMatrix,
    refs: &SiteReferences,
    segments: &[usize],
) -> Result<(f64, Site)> {
    let site = evaluation_site(model, s);
    let branch = candidate_branch(model, s, site, x_entering, segments)?;
    let out = match site {
        Site::Mlp(d) => sublayer_apply(&model.config, model.sublayer(d), &branch, segments)?.1,
        Site::Final => branch,
    };
    Ok((sensitivity(refs.at(site), &out)?, site))
}

/// Tunability-aware sensitivity of one candidate.
#[derive(Clone, Debug)]
pub struct TunedEvaluation {
    pub site: Site,
    pub zeta: f64,
    /// Absent when the site is [`Site::Final`].
    pub tuned: Option<TunedProjection>,
}

/// Sensitivity `ζ` of removing `s` after retuning its site.
pub fn tuned_sensitivity(
    model: &SublayerStack,
    s: usize,
    x_entering: &ActivationMatrix,
    refs: &SiteReferences,
    segments: &[usize],
    rows_percent: f64,
    ridge: Ridge,
) -> Result<TunedEvaluation> {
    let site = evaluation_site(model, s);
    let branch = candidate_branch(model, s, site, x_entering, segments)?;
    match site {
        Site::Mlp(d) => {
            let x_ref = refs.at(site);
            let outcome = in_compression_tune(model, d, &branch, x_ref, segments, rows_percent, ridge)?;
            Ok(TunedEvaluation { site, zeta: sensitivity(x_ref, &outcome.x_tuned)?, tuned: Some(outcome.tuned) })
        }
        Site::Final => Ok(TunedEvaluation { site, zeta: sensitivity(refs.at(site), &branch)?, tuned: None }),
    }
}
