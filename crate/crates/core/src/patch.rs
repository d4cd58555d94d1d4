//! Patch grouping and patch interaction.
//!
//! A [`PatchPlan`] is a padded index layout: the serialized sequence cut
//! into equal patches of `s` points. When `s` does not divide `n`, the last
//! patch is filled by borrowing the tail of the previous patch, so it is
//! simply the last `s` entries of the sequence. Borrowed slots are flagged
//! so that results are scattered back from first occurrences only.
//!
//! Interaction strategies only change the sequence fed to the grouping:
//! dilation reads the sequence column-wise with `d` columns, shift-patch
//! rotates it left by `s / 2`, and shift/shuffle order pick a different
//! serialization pattern per block.

use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::serialize::SerializedOrder;
use crate::sfc::CurvePattern;

/// Padded, grouped index layout for one attention block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchPlan {
    patch_size: usize,
    padded: Vec<usize>,
    borrowed: Vec<bool>,
}

impl PatchPlan {
    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    /// Original point indices, `num_patches * patch_size` of them.
    pub fn padded(&self) -> &[usize] {
        &self.padded
    }

    pub fn borrow_mask(&self) -> &[bool] {
        &self.borrowed
    }

    pub fn num_patches(&self) -> usize {
        self.padded.len() / self.patch_size
    }

    pub fn patch(&self, p: usize) -> &[usize] {
        &self.padded[p * self.patch_size..(p + 1) * self.patch_size]
    }

    pub fn patch_borrowed(&self, p: usize) -> &[bool] {
        &self.borrowed[p * self.patch_size..(p + 1) * self.patch_size]
    }

    pub fn patches(&self) -> impl Iterator<Item = &[usize]> {
        self.padded.chunks(self.patch_size)
    }

    /// Number of distinct points covered (non-borrowed slots).
    pub fn point_count(&self) -> usize {
        self.borrowed.iter().filter(|b| !**b).count()
    }

    /// Slot of the non-borrowed occurrence of every original index.
    pub fn home_slots(&self) -> Vec<usize> {
        let mut home = vec![usize::MAX; self.point_count()];
        for (slot, (&idx, &b)) in self.padded.iter().zip(&self.borrowed).enumerate() {
            if !b {
                home[idx] = slot;
            }
        }
        home
    }

    /// Checks coverage and divisibility for a cloud of `n` points.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.patch_size == 0 || !self.padded.len().is_multiple_of(self.patch_size) {
            return Err(Error::Structure("padded length is not a multiple of the patch size".into()));
        }
        if self.padded.len() != self.borrowed.len() {
            return Err(Error::Structure("borrow mask length mismatch".into()));
        }
        let mut seen = vec![0usize; n];
        for (&idx, &b) in self.padded.iter().zip(&self.borrowed) {
            if idx >= n {
                return Err(Error::Structure(format!("index {idx} out of range for {n} points")));
            }
            if !b {
                seen[idx] += 1;
            }
        }
        if let Some(i) = seen.iter().position(|&c| c != 1) {
            return Err(Error::Structure(format!(
                "point {i} has {} non-borrowed occurrences",
                seen[i]
            )));
        }
        Ok(())
    }

    /// Text form: one line per patch, indices separated by spaces, borrowed
    /// entries suffixed with `*`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for p in 0..self.num_patches() {
            for (j, (&idx, &b)) in self.patch(p).iter().zip(self.patch_borrowed(p)).enumerate() {
                if j > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{idx}");
                if b {
                    out.push('*');
                }
            }
            out.push('\n');
        }
        out
    }
}

/// How points from different patches get to interact across blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InteractionKind {
    /// Cycle through the configured patterns block by block.
    ShiftOrder,
    /// Like `ShiftOrder`, over a seeded permutation of the patterns.
    ShuffleOrder { seed: u64 },
    /// Odd blocks group every `dilation`-th serialized point.
    ShiftDilation { dilation: usize },
    /// Odd blocks shift patch boundaries by half a patch.
    ShiftPatch,
}

impl InteractionKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            InteractionKind::ShiftDilation { dilation: 0 } => {
                Err(Error::param("dilation must be at least 1"))
            }
            _ => Ok(()),
        }
    }
}

/// How the final patch is completed when `s` does not divide `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PaddingRule {
    /// Final patch is the last `s` entries of the sequence.
    #[default]
    BorrowBackward,
    /// Final patch repeats its last entry. Only used to compare against.
    RepeatLast,
}

fn check_patch_size(s: usize) -> Result<()> {
    if s == 0 {
        return Err(Error::param("patch size must be at least 1"));
    }
    Ok(())
}

/// Groups an explicit sequence of original indices.
pub fn group_sequence(seq: &[usize], s: usize, rule: PaddingRule) -> Result<PatchPlan> {
    check_patch_size(s)?;
    let n = seq.len();
    if n == 0 {
        return Err(Error::param("cannot group an empty sequence"));
    }
    let rem = n % s;
    let mut padded = Vec::with_capacity(n + s);
    let mut borrowed = Vec::with_capacity(n + s);
    if rem == 0 {
        padded.extend_from_slice(seq);
        borrowed.resize(n, false);
    } else {
        let full = n - rem;
        padded.extend_from_slice(&seq[..full]);
        borrowed.resize(full, false);
        let pad = s - rem;
        let tail = &seq[full..];
        match rule {
            PaddingRule::BorrowBackward => {
                if n >= s {
                    padded.extend_from_slice(&seq[n - s..full]);
                } else {
                    // Nothing to borrow from: left-pad with the first entry.
                    padded.extend(std::iter::repeat_n(seq[0], pad));
                }
                borrowed.extend(std::iter::repeat_n(true, pad));
                padded.extend_from_slice(tail);
                borrowed.extend(std::iter::repeat_n(false, rem));
            }
            PaddingRule::RepeatLast => {
                padded.extend_from_slice(tail);
                borrowed.extend(std::iter::repeat_n(false, rem));
                padded.extend(std::iter::repeat_n(seq[n - 1], pad));
                borrowed.extend(std::iter::repeat_n(true, pad));
            }
        }
    }
    Ok(PatchPlan {
        patch_size: s,
        padded,
        borrowed,
    })
}

/// Plain grouping of the serialized order.
pub fn pad_and_group(order: &SerializedOrder, s: usize) -> Result<PatchPlan> {
    group_sequence(&order.order, s, PaddingRule::BorrowBackward)
}

/// Serialized positions reordered by `(i mod d, i div d)`.
pub fn dilation_permutation(n: usize, d: usize) -> Vec<usize> {
    let mut pos: Vec<usize> = (0..n).collect();
    pos.sort_by_key(|&i| (i % d, i / d));
    pos
}

/// Groups points spaced `d` apart along the serialized order.
pub fn dilated_plan(order: &SerializedOrder, s: usize, d: usize) -> Result<PatchPlan> {
    if d == 0 {
        return Err(Error::param("dilation must be at least 1"));
    }
    let seq: Vec<usize> = dilation_permutation(order.len(), d)
        .into_iter()
        .map(|i| order.order[i])
        .collect();
    group_sequence(&seq, s, PaddingRule::BorrowBackward)
}

/// Groups after rotating the serialized order left by `s / 2`.
pub fn shifted_patch_plan(order: &SerializedOrder, s: usize) -> Result<PatchPlan> {
    if s < 2 {
        return Err(Error::param("shift-patch needs a patch size of at least 2"));
    }
    let mut seq = order.order.clone();
    let n = seq.len();
    seq.rotate_left((s / 2) % n.max(1));
    group_sequence(&seq, s, PaddingRule::BorrowBackward)
}

/// Per-forward-pass assignment of serialization patterns to blocks.
///
/// `slots` is a permutation of pattern indices; block `i` uses
/// `slots[i mod P]`. Shift order keeps the identity permutation, shuffle
/// order draws a fresh one from the seeded generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternSchedule {
    slots: Vec<usize>,
}

impl PatternSchedule {
    pub fn identity(num_patterns: usize) -> Self {
        PatternSchedule {
            slots: (0..num_patterns).collect(),
        }
    }

    /// Draws the schedule for one pass. Only shuffle order consumes
    /// randomness.
    pub fn draw(kind: &InteractionKind, num_patterns: usize, rng: &mut SeededRng) -> Self {
        let mut sched = PatternSchedule::identity(num_patterns);
        if let InteractionKind::ShuffleOrder { .. } = kind {
            sched.slots.shuffle(rng);
        }
        sched
    }

    pub fn slots(&self) -> &[usize] {
        &self.slots
    }

    pub fn pattern_index(&self, block_index: usize) -> usize {
        self.slots[block_index % self.slots.len()]
    }
}

/// Generator for the successive shuffle-order permutations of a run.
/// Non-shuffle kinds get a fixed stream that is never consumed.
pub fn shuffle_stream(kind: &InteractionKind) -> SeededRng {
    match kind {
        InteractionKind::ShuffleOrder { seed } => crate::rng::seeded(*seed),
        _ => crate::rng::seeded(0),
    }
}

/// Pattern used by block `block_index` under the given schedule.
pub fn select_pattern(
    block_index: usize,
    patterns: &[CurvePattern],
    schedule: &PatternSchedule,
) -> Result<CurvePattern> {
    if patterns.is_empty() {
        return Err(Error::param("pattern list is empty"));
    }
    if schedule.slots.len() != patterns.len() {
        return Err(Error::param("schedule does not match the pattern count"));
    }
    Ok(patterns[schedule.pattern_index(block_index)])
}

/// Plan for one block: dilation and shift-patch act on odd blocks only and
/// fall back to plain grouping on even blocks (and, for shift-patch, when
/// `s < 2`).
pub fn build_plan(
    order: &SerializedOrder,
    kind: &InteractionKind,
    block_index: usize,
    s: usize,
) -> Result<PatchPlan> {
    let odd = block_index % 2 == 1;
    match *kind {
        InteractionKind::ShiftDilation { dilation } if odd => dilated_plan(order, s, dilation),
        InteractionKind::ShiftPatch if odd && s >= 2 => shifted_patch_plan(order, s),
        _ => pad_and_group(order, s),
    }
}
