//! Activation checkpoints of the pruned model and the validity ledger that
//! decides which cached sensitivities survive a prune.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SprintError};
use crate::matrix::{ActivationMatrix, Matrix};
use crate::model::SublayerStack;

/// Uniform checkpoint positions `1 + ⌊(k−1)·S/α⌋` for `k = 1..=α`.
pub fn place_checkpoints(n_sublayers: usize, alpha: usize) -> Result<Vec<usize>> {
    if alpha < 1 || alpha > n_sublayers {
        return Err(SprintError::Config(format!("alpha must lie in 1..={n_sublayers}, got {alpha}")));
    }
    let mut positions: Vec<usize> = (0..alpha).map(|k| 1 + k * n_sublayers / alpha).collect();
    positions.dedup();
    Ok(positions)
}

#[derive(Debug)]
enum Slot {
    Resident(ActivationMatrix),
    Spilled { path: PathBuf, rows: usize, cols: usize },
}

/// Residual-stream snapshots of the current (pruned) model. The slot at
/// position `p` holds the stream entering sublayer `p`.
#[derive(Debug)]
pub struct CheckpointStore {
    positions: Vec<usize>,
    slots: BTreeMap<usize, Slot>,
    segments: Vec<usize>,
    spill_dir: Option<PathBuf>,
}

impl CheckpointStore {
    /// Places `alpha` checkpoints and fills them with one forward pass.
    pub fn build(
        model: &SublayerStack,
        tokens: &[Vec<u32>],
        alpha: usize,
        spill_dir: Option<&Path>,
    ) -> Result<CheckpointStore> {
        let positions = place_checkpoints(model.n_sublayers(), alpha)?;
        let segments = model.check_tokens(tokens)?;
        if let Some(dir) = spill_dir {
            fs::create_dir_all(dir)?;
        }
        let mut store = CheckpointStore {
            positions,
            slots: BTreeMap::new(),
            segments,
            spill_dir: spill_dir.map(Path::to_path_buf),
        };
        store.write_slot(1, model.embed(tokens)?)?;
        store.refresh(model, 1)?;
        Ok(store)
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn segments(&self) -> &[usize] {
        &self.segments
    }

    /// Number of activation matrices held in memory.
    pub fn resident(&self) -> usize {
        self.slots.values().filter(|s| matches!(s, Slot::Resident(_))).count()
    }

    pub fn load(&self, position: usize) -> Result<ActivationMatrix> {
        match self.slots.get(&position) {
            Some(Slot::Resident(m)) => Ok(m.clone()),
            Some(Slot::Spilled { path, rows, cols }) => {
                let bytes = fs::read(path)?;
                let data = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
                Matrix::from_vec(*rows, *cols, data)
            }
            None => Err(SprintError::Config(format!("no checkpoint at position {position}"))),
        }
    }

    fn write_slot(&mut self, position: usize, m: ActivationMatrix) -> Result<()> {
        let slot = match &self.spill_dir {
            Some(dir) => {
                let path = dir.join(format!("checkpoint-{position:05}.f64"));
                let bytes: Vec<u8> = m.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                fs::write(&path, bytes)?;
                Slot::Spilled { path, rows: m.rows(), cols: m.cols() }
            }
            None => Slot::Resident(m),
        };
        self.slots.insert(position, slot);
        Ok(())
    }

    /// Greatest checkpoint position `<= s`.
    pub fn nearest_at_or_below(&self, s: usize) -> usize {
        *self.positions.iter().rev().find(|&&p| p <= s).expect("position 1 is always present")
    }

    /// Current-model stream entering sublayer `s`, resumed from the nearest
    /// checkpoint below.
    pub fn stream_entering(&self, model: &SublayerStack, s: usize) -> Result<ActivationMatrix> {
        let p = self.nearest_at_or_below(s);
        let x = self.load(p)?;
        model.advance(x, p, s - 1, &Default::default(), &self.segments)
    }

    /// Recomputes every slot above `from_position` by resuming the forward
    /// pass from that slot. Slots at or below it are left untouched.
    pub fn refresh(&mut self, model: &SublayerStack, from_position: usize) -> Result<()> {
        if !self.positions.contains(&from_position) {
            return Err(SprintError::Config(format!("{from_position} is not a checkpoint position")));
        }
        let mut x = self.load(from_position)?;
        let mut at = from_position;
        let later: Vec<usize> = self.positions.iter().copied().filter(|&p| p > from_position).collect();
        for p in later {
            x = model.advance(x, at, p - 1, &Default::default(), &self.segments)?;
            self.write_slot(p, x.clone())?;
            at = p;
        }
        Ok(())
    }

    /// Refreshes from the greatest checkpoint not above the pruned index.
    pub fn refresh_after_prune(&mut self, model: &SublayerStack, pruned: usize) -> Result<()> {
        self.refresh(model, self.nearest_at_or_below(pruned))
    }
}

impl Drop for CheckpointStore {
    fn drop(&mut self) {
        for slot in self.slots.values() {
            if let Slot::Spilled { path, .. } = slot {
                let _ = fs::remove_file(path);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Validity {
    Valid,
    Stale,
    Removed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct LedgerEntry {
    status: Validity,
    /// Site position recorded with the cached value.
    site: Option<usize>,
}

/// Tracks which cached sensitivities are still exact for the current model.
#[derive(Clone, Debug)]
pub struct ValidityLedger {
    entries: BTreeMap<usize, LedgerEntry>,
}

impl ValidityLedger {
    /// Live sublayers start stale, pruned ones removed.
    pub fn new(model: &SublayerStack) -> ValidityLedger {
        let entries = model
            .sublayers
            .iter()
            .map(|l| {
                let status = if l.pruned { Validity::Removed } else { Validity::Stale };
                (l.index, LedgerEntry { status, site: None })
            })
            .collect();
        ValidityLedger { entries }
    }

    pub fn status(&self, s: usize) -> Validity {
        self.entries.get(&s).map_or(Validity::Removed, |e| e.status)
    }

    pub fn site(&self, s: usize) -> Option<usize> {
        self.entries.get(&s).and_then(|e| e.site)
    }

    /// Records a freshly computed value for `s` evaluated at `site`.
    pub fn mark_valid(&mut self, s: usize, site: usize) {
        self.entries.insert(s, LedgerEntry { status: Validity::Valid, site: Some(site) });
    }

    pub fn mark_all_stale(&mut self) {
        for e in self.entries.values_mut() {
            if e.status != Validity::Removed {
                e.status = Validity::Stale;
            }
        }
    }

    /// After pruning `p`: records whose site is at or above `p` go stale,
    /// `p` itself is removed, everything else stays valid.
    pub fn invalidate_after_prune(&mut self, p: usize) {
        for (&s, e) in self.entries.iter_mut() {
            if s == p {
                e.status = Validity::Removed;
            } else if e.status == Validity::Valid && e.site.is_none_or(|d| d >= p) {
                e.status = Validity::Stale;
            }
        }
    }

    pub fn with_status(&self, status: Validity) -> Vec<usize> {
        self.entries.iter().filter(|(_, e)| e.status == status).map(|(&s, _)| s).collect()
    }
}
