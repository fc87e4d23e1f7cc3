//! Stage schedules for smooth multi-stage quantization.
//!
//! A schedule is a strictly decreasing ladder of levelwise widths ending at
//! L = 1 (pure ternary). Two builders:
//!
//! * `build_schedule(l0, stride, total)` — arithmetic descent `l0, l0 -
//!   stride, ...`, with 1 appended when the descent skips it.
//! * `build_bitwise_schedule(l0, total)` — the halving baseline `l0, l0/2,
//!   ..., 1`.
//!
//! Epoch split: the final (ternary) stage gets half the budget rounded up —
//! it must re-settle the model in its terminal representation — and the
//! remainder spreads evenly across the earlier stages, leftovers going to
//! the latest of them (the stages closest to the final representation do
//! the most smoothing work). When the budget is too tight for that split,
//! earlier stages drop to one epoch each and the final stage takes the rest.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stage {
    /// Levelwise width: activations quantize to `{-l, ..., l}`.
    pub l: u32,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub stages: Vec<Stage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// Arithmetic descent by `stride`.
    Levelwise,
    /// Halving descent (the bitwise baseline).
    Bitwise,
}

impl Schedule {
    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.epochs).sum()
    }

    pub fn levels(&self) -> Vec<u32> {
        self.stages.iter().map(|s| s.l).collect()
    }
}

/// Split `total` epochs over `levels.len()` stages per the policy above.
fn allocate(levels: Vec<u32>, total: usize) -> Result<Schedule> {
    let m = levels.len();
    if total < m {
        return Err(Error::Invalid {
            op: "schedule::allocate",
            detail: format!("{total} epochs cannot cover {m} stages at one epoch each"),
        });
    }
    if m == 1 {
        return Ok(Schedule {
            stages: vec![Stage { l: levels[0], epochs: total }],
        });
    }
    let final_epochs = total.div_ceil(2).min(total - (m - 1));
    let rem = total - final_epochs;
    let base = rem / (m - 1);
    let left = rem % (m - 1);
    let stages = levels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let epochs = if i == m - 1 {
                final_epochs
            } else if i >= (m - 1) - left {
                base + 1
            } else {
                base
            };
            Stage { l, epochs }
        })
        .collect();
    Ok(Schedule { stages })
}

/// Levelwise descent `l0, l0 - stride, ...`, ending at 1.
pub fn build_schedule(l0: u32, stride: u32, total_epochs: usize) -> Result<Schedule> {
    if l0 == 0 {
        return Err(Error::Invalid {
            op: "build_schedule",
            detail: "starting level must be at least 1".to_string(),
        });
    }
    if stride == 0 {
        return Err(Error::Invalid {
            op: "build_schedule",
            detail: "stride must be at least 1".to_string(),
        });
    }
    let mut levels = Vec::new();
    let mut l = l0;
    while l > 1 {
        levels.push(l);
        l = l.saturating_sub(stride);
    }
    levels.push(1);
    allocate(levels, total_epochs)
}

/// Halving descent `l0, l0/2, ..., 1` (integer division) — the bitwise
/// baseline schedule.
pub fn build_bitwise_schedule(l0: u32, total_epochs: usize) -> Result<Schedule> {
    if l0 == 0 {
        return Err(Error::Invalid {
            op: "build_bitwise_schedule",
            detail: "starting level must be at least 1".to_string(),
        });
    }
    let mut levels = Vec::new();
    let mut l = l0;
    while l >= 1 {
        levels.push(l);
        if l == 1 {
            break;
        }
        l /= 2;
    }
    allocate(levels, total_epochs)
}
