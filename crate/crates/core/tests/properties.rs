use std::collections::BTreeSet;

use proptest::collection::vec;
use proptest::prelude::*;

use sprint_core::calibration::{sample_windows, synth_calibration};
use sprint_core::checkpoint::{place_checkpoints, CheckpointStore, Validity, ValidityLedger};
use sprint_core::latency::{model_latency, LatencyTable};
use sprint_core::model::{build_toy_model, read_model, write_model, ModelConfig, SublayerStack};
use sprint_core::report::{pattern_pruned_counts, render_pattern};
use sprint_core::scoring::{evaluation_site, Site};
use sprint_core::tuning::{row_scores, select_tuned_rows, solve_rows_lstsq, tuned_row_count, Ridge, TuneJob};
use sprint_core::Matrix;

fn small_config(n_layers: usize) -> ModelConfig {
    ModelConfig { d_model: 8, n_heads: 2, d_ff: 16, n_layers, vocab_size: 32, max_seq_len: 16, norm_eps: 1e-6 }
}

fn pruned_model(n_layers: usize, seed: u64, mask: &[bool]) -> SublayerStack {
    let mut m = build_toy_model(&small_config(n_layers), seed).unwrap();
    for (i, &p) in mask.iter().enumerate().take(m.n_sublayers()) {
        if p {
            m.prune(i + 1).unwrap();
        }
    }
    m
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    vec(-2.0f64..2.0, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn tune_job() -> impl Strategy<Value = TuneJob> {
    (1usize..6, 1usize..8, 0usize..8).prop_flat_map(|(d, f, extra)| {
        let n = f + extra;
        (matrix(d, f), matrix(f, n), matrix(d, n), matrix(d, n), 1.0f64..=100.0).prop_map(
            |(w_orig, z_hat, x_hat, x_ref, rows_percent)| TuneJob { site: 2, w_orig, z_hat, x_hat, x_ref, rows_percent },
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn checkpoint_positions_are_uniform(s in 1usize..80, a in 1usize..80) {
        let alpha = a.min(s);
        let pos = place_checkpoints(s, alpha).unwrap();
        prop_assert_eq!(pos[0], 1);
        prop_assert!(pos.len() <= alpha);
        prop_assert!(pos.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(*pos.last().unwrap() <= s);
        if alpha == s {
            prop_assert_eq!(pos, (1..=s).collect::<Vec<_>>());
        }
    }

    #[test]
    fn latency_is_affine_in_counts(n1 in 0usize..100, n2 in 0usize..100, a in 0.01f64..10.0, b in 0.01f64..10.0, o in 0.0f64..5.0) {
        let t = LatencyTable::new(a, b, o).unwrap();
        let l = model_latency(n1, n2, &t);
        prop_assert!((model_latency(n1 + 1, n2, &t) - l - a).abs() < 1e-9);
        prop_assert!((model_latency(n1, n2 + 1, &t) - l - b).abs() < 1e-9);
        prop_assert!(l >= o);
    }

    #[test]
    fn row_selection_keeps_the_top_scores(job in tune_job()) {
        let rows = select_tuned_rows(&job.w_orig, &job.z_hat, job.rows_percent).unwrap();
        let d = job.w_orig.rows();
        prop_assert_eq!(rows.len(), tuned_row_count(d, job.rows_percent));
        prop_assert!(rows.windows(2).all(|w| w[0] < w[1]));
        let scores = row_scores(&job.w_orig, &job.z_hat).unwrap();
        let kept: BTreeSet<usize> = rows.iter().copied().collect();
        for i in 0..d {
            for j in 0..d {
                if kept.contains(&i) && !kept.contains(&j) {
                    prop_assert!(scores[i] > scores[j] || (scores[i] == scores[j] && i < j));
                }
            }
        }
    }

    #[test]
    fn solving_never_increases_the_error(job in tune_job(), ridge_scale in prop_oneof![Just(None), Just(Some(0.0)), (0.0f64..10.0).prop_map(Some)]) {
        let ridge = ridge_scale.map_or(Ridge::Auto, Ridge::Fixed);
        let rows = select_tuned_rows(&job.w_orig, &job.z_hat, job.rows_percent).unwrap();
        let tuned = solve_rows_lstsq(&job, &rows, ridge).unwrap();
        if ridge == Ridge::Fixed(0.0) {
            prop_assert!(tuned.residual_error <= tuned.pre_error + 1e-9);
        }
        for i in 0..job.w_orig.rows() {
            if !rows.contains(&i) {
                prop_assert_eq!(tuned.weights.row(i), job.w_orig.row(i));
            }
        }
    }

    #[test]
    fn huge_ridge_keeps_the_original_weights(job in tune_job()) {
        let all: Vec<usize> = (0..job.w_orig.rows()).collect();
        let tuned = solve_rows_lstsq(&job, &all, Ridge::Fixed(1e12)).unwrap();
        prop_assert!(tuned.weights.max_abs_diff(&job.w_orig).unwrap() < 1e-6);
    }

    #[test]
    fn site_is_the_closest_live_mlp_above(mask in vec(any::<bool>(), 8), s in 1usize..=8) {
        let m = pruned_model(4, 0, &mask);
        let expected = (s + 1..=8).find(|&d| d % 2 == 0 && !mask[d - 1]);
        let site = evaluation_site(&m, s);
        match expected {
            Some(d) => prop_assert_eq!(site, Site::Mlp(d)),
            None => prop_assert_eq!(site, Site::Final),
        }
    }

    #[test]
    fn ledger_invalidation_follows_the_site_rule(
        mask in vec(any::<bool>(), 8),
        marks in vec(any::<bool>(), 8),
        p_pick in 0usize..8,
    ) {
        let mut m = pruned_model(4, 0, &mask);
        let live = m.live_indices();
        prop_assume!(!live.is_empty());
        let p = live[p_pick % live.len()];
        let mut ledger = ValidityLedger::new(&m);
        for &s in &live {
            if marks[s - 1] {
                ledger.mark_valid(s, evaluation_site(&m, s).position(8));
            }
        }
        let before: Vec<(usize, Validity, Option<usize>)> = (1..=8).map(|s| (s, ledger.status(s), ledger.site(s))).collect();
        m.prune(p).unwrap();
        ledger.invalidate_after_prune(p);
        for (s, status, site) in before {
            let expected = if s == p || status == Validity::Removed {
                Validity::Removed
            } else if status == Validity::Valid && site.unwrap() < p {
                Validity::Valid
            } else {
                Validity::Stale
            };
            prop_assert_eq!(ledger.status(s), expected, "s={} p={}", s, p);
        }
    }

    #[test]
    fn pattern_counts_match_the_model(mask in vec(any::<bool>(), 12)) {
        let m = pruned_model(6, 1, &mask);
        let pattern = render_pattern(&m);
        prop_assert_eq!(pattern.chars().filter(|&c| c != ' ').count(), 12);
        let (mha, mlp) = pattern_pruned_counts(&pattern).unwrap();
        let pruned: Vec<usize> = m.pruned_indices();
        prop_assert_eq!(mha, pruned.iter().filter(|s| *s % 2 == 1).count());
        prop_assert_eq!(mlp, pruned.iter().filter(|s| *s % 2 == 0).count());
    }

    #[test]
    fn model_files_round_trip(mask in vec(any::<bool>(), 6), seed in 0u64..1000) {
        let m = pruned_model(3, seed, &mask);
        let mut bytes = Vec::new();
        write_model(&m, &mut bytes).unwrap();
        let back = read_model(bytes.as_slice()).unwrap();
        prop_assert_eq!(&back, &m);
        let mut again = Vec::new();
        write_model(&back, &mut again).unwrap();
        prop_assert_eq!(bytes, again);
    }

    #[test]
    fn calibration_windows_are_distinct_and_aligned(len in 1usize..200, seq_len in 1usize..16, n in 1usize..8, seed in 0u64..100) {
        let ids: Vec<u32> = (0..len as u32).collect();
        match sample_windows(&ids, n, seq_len, seed) {
            Ok(set) => {
                prop_assert_eq!(set.n_seqs(), n);
                let starts: Vec<u32> = set.sequences.iter().map(|s| s[0]).collect();
                prop_assert!(starts.windows(2).all(|w| w[0] < w[1]));
                for s in &set.sequences {
                    prop_assert_eq!(s.len(), seq_len);
                    prop_assert_eq!(s[0] as usize % seq_len, 0);
                }
            }
            Err(_) => prop_assert!(len / seq_len < n),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn checkpoint_resume_matches_a_fresh_forward(
        alpha in 1usize..=8,
        prunes in vec(1usize..=8, 0..5),
        spill in any::<bool>(),
    ) {
        let mut m = build_toy_model(&small_config(4), 2).unwrap();
        let calib = synth_calibration(32, 2, 8, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut store = CheckpointStore::build(&m, &calib.sequences, alpha, spill.then(|| dir.path())).unwrap();
        for p in prunes {
            if m.is_pruned(p) {
                continue;
            }
            m.prune(p).unwrap();
            store.refresh_after_prune(&m, p).unwrap();
        }
        let segs = calib.segments();
        let x0 = m.embed(&calib.sequences).unwrap();
        for s in 1..=8 {
            let fresh = m.advance(x0.clone(), 1, s - 1, &BTreeSet::new(), &segs).unwrap();
            prop_assert_eq!(store.stream_entering(&m, s).unwrap(), fresh);
        }
    }
}
