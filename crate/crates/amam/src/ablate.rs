//! Head-count × fusion-mode sweep plus the ME/AA on-off matrix, each cell a
//! toy training run.

use std::fmt::Write;

use amam_core::train::{toy_train_with, TrainOptions};
use amam_core::{AmamConfig, FusionMode, Result};
use rayon::prelude::*;

use crate::format::csv_num;

/// Heads and fusion mode used for the on-off rows.
pub const ONOFF_HEADS: usize = 4;
pub const ONOFF_FUSION: FusionMode = FusionMode::Adaptive;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub heads: usize,
    pub fusion: FusionMode,
    pub me: bool,
    pub aa: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Row {
    pub cell: Cell,
    pub final_loss: f64,
}

/// Every `(heads, fusion)` pair with ME and AA on, then the four on-off
/// combinations.
pub fn grid(heads: &[usize], fusion: &[FusionMode]) -> Vec<Cell> {
    let mut cells: Vec<Cell> = heads
        .iter()
        .flat_map(|&h| {
            fusion.iter().map(move |&f| Cell {
                heads: h,
                fusion: f,
                me: true,
                aa: true,
            })
        })
        .collect();
    for (me, aa) in [(false, false), (true, false), (false, true), (true, true)] {
        cells.push(Cell {
            heads: ONOFF_HEADS,
            fusion: ONOFF_FUSION,
            me,
            aa,
        });
    }
    cells
}

pub fn cell_config(base: &AmamConfig, cell: Cell, seed: u64) -> AmamConfig {
    AmamConfig {
        heads: cell.heads,
        fusion_mode: cell.fusion,
        enabled_me: cell.me,
        enabled_aa: cell.aa,
        seed,
        ..base.clone()
    }
}

/// Rejects head counts that do not divide every level width.
pub fn validate_heads(base: &AmamConfig, heads: &[usize]) -> Result<()> {
    for &h in heads {
        AmamConfig {
            heads: h,
            ..base.clone()
        }
        .validate()?;
    }
    Ok(())
}

fn final_loss(trace: &[amam_core::train::StepRecord]) -> f64 {
    trace.last().map_or(f64::NAN, |r| r.loss)
}

/// Trains every cell (in parallel) and returns rows in grid order.
pub fn run(
    base: &AmamConfig,
    cells: &[Cell],
    steps: usize,
    seed: u64,
    opts: &TrainOptions,
) -> Result<Vec<Row>> {
    cells
        .par_iter()
        .map(|&cell| {
            let cfg = cell_config(base, cell, seed);
            let trace = toy_train_with(&cfg.levels, Some(&cfg), steps, seed, opts)?;
            Ok(Row {
                cell,
                final_loss: final_loss(&trace),
            })
        })
        .collect()
}

/// Final loss of the backbone + head alone.
pub fn baseline(base: &AmamConfig, steps: usize, seed: u64, opts: &TrainOptions) -> Result<f64> {
    Ok(final_loss(&toy_train_with(
        &base.levels,
        None,
        steps,
        seed,
        opts,
    )?))
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

pub fn to_csv(rows: &[Row]) -> String {
    let mut s = String::from("heads,fusion,me,aa,final_loss\n");
    for r in rows {
        let c = r.cell;
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            c.heads,
            c.fusion,
            on_off(c.me),
            on_off(c.aa),
            csv_num(r.final_loss)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_size() {
        let cells = grid(&[1, 2, 4, 8, 16], &FusionMode::ALL);
        assert_eq!(cells.len(), 24);
        assert_eq!(
            cells[0],
            Cell {
                heads: 1,
                fusion: FusionMode::Adaptive,
                me: true,
                aa: true
            }
        );
        assert_eq!(
            cells[20],
            Cell {
                heads: 4,
                fusion: FusionMode::Adaptive,
                me: false,
                aa: false
            }
        );
    }

    #[test]
    fn heads_must_divide_levels() {
        let base = AmamConfig::default();
        assert!(validate_heads(&base, &[1, 2, 4, 8, 16]).is_ok());
        assert!(validate_heads(&base, &[3]).is_err());
        assert!(validate_heads(&base, &[0]).is_err());
    }
}
