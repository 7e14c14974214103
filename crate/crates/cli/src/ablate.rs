//! Ablation grids: every cell trains from the same data and seed.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use dn4dgs::Scalar;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::run::{train, Source};

/// (NSS, TAM, DSAM) toggles of the design grid.
pub const DESIGN_ROWS: [(bool, bool, bool); 7] = [
    (false, false, false),
    (true, false, false),
    (false, true, false),
    (true, true, false),
    (false, true, true),
    (true, false, true),
    (true, true, true),
];
pub const K_GRID: [usize; 3] = [4, 16, 32];
pub const DT_GRID: [f64; 3] = [0.5, 1.0, 2.0];
pub const YDIM_GRID: [usize; 5] = [0, 4, 16, 32, 64];
/// First-stage length as a fraction of the total iterations.
pub const STAGE1_FRACTIONS: [f64; 5] = [0.0, 0.2, 0.3, 0.4, 0.5];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grid {
    Design,
    K,
    Dt,
    YDim,
    Stage1,
}

impl Grid {
    pub const ALL: [Grid; 5] = [Grid::Design, Grid::K, Grid::Dt, Grid::YDim, Grid::Stage1];

    pub fn name(self) -> &'static str {
        match self {
            Grid::Design => "design",
            Grid::K => "k",
            Grid::Dt => "dt",
            Grid::YDim => "ydim",
            Grid::Stage1 => "stage1",
        }
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Grid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Grid::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| format!("unknown grid {s:?}; expected design, k, dt, ydim, stage1 or all"))
    }
}

/// Parses a comma-separated grid list; `all` selects every grid.
pub fn parse_grids(s: &str) -> CliResult<Vec<Grid>> {
    if s == "all" {
        return Ok(Grid::ALL.to_vec());
    }
    s.split(',')
        .map(|g| g.trim().parse().map_err(CliError::Config))
        .collect()
}

#[derive(Clone, Debug)]
pub struct Cell {
    pub grid: Grid,
    pub cfg: RunConfig,
}

impl Cell {
    pub fn name(&self, index: usize) -> String {
        format!("{}_{index:02}", self.grid)
    }
}

/// Expands `grids` around `base`. Grids other than `Design` vary one knob of `base`.
pub fn cells(base: &RunConfig, grids: &[Grid]) -> Vec<Cell> {
    let mut out = Vec::new();
    for &grid in grids {
        let mut push = |f: &dyn Fn(&mut RunConfig)| {
            let mut cfg = base.clone();
            f(&mut cfg);
            out.push(Cell { grid, cfg });
        };
        match grid {
            Grid::Design => {
                for (nss, tam, dsam) in DESIGN_ROWS {
                    push(&|c| {
                        c.model.nss = nss;
                        c.model.tam.enabled = tam;
                        c.model.dsam.enabled = dsam;
                    });
                }
            }
            Grid::K => K_GRID.iter().for_each(|&k| push(&|c| c.model.dsam.k = k)),
            Grid::Dt => DT_GRID.iter().for_each(|&m| push(&|c| c.model.tam.dt_multiplier = m)),
            Grid::YDim => YDIM_GRID.iter().for_each(|&d| push(&|c| c.model.tam.embed_dim = d)),
            Grid::Stage1 => STAGE1_FRACTIONS.iter().for_each(|&f| {
                push(&|c| {
                    let total = c.train.schedule.total_iters;
                    c.train.schedule.stage1_iters = (f * total as f64).round() as usize;
                })
            }),
        }
    }
    out
}

pub const ABLATION_HEADER: &str = "grid,nss,tam,dsam,k,y_dim,dt,stage1_iters,psnr,ssim";

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub grid: Grid,
    pub nss: bool,
    pub tam: bool,
    pub dsam: bool,
    pub k: usize,
    pub y_dim: usize,
    pub dt: f64,
    pub stage1_iters: usize,
    pub psnr: f64,
    pub ssim: f64,
}

impl AblationRow {
    pub fn csv(&self) -> String {
        let on = |b: bool| if b { "on" } else { "off" };
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.grid,
            on(self.nss),
            on(self.tam),
            on(self.dsam),
            self.k,
            self.y_dim,
            self.dt,
            self.stage1_iters,
            self.psnr,
            self.ssim
        )
    }
}

/// Trains every cell into its own run directory under `out` and returns one row per cell.
pub fn run_cells<T: Scalar>(
    cells: &[Cell],
    source: &Source<T>,
    out: &Path,
    mut on_row: impl FnMut(&AblationRow),
) -> CliResult<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (i, cell) in cells.iter().enumerate() {
        let summary = train(&cell.cfg, source, &out.join(cell.name(i)))?;
        let m = &cell.cfg.model;
        let row = AblationRow {
            grid: cell.grid,
            nss: m.nss,
            tam: m.tam.enabled,
            dsam: m.dsam.enabled,
            k: m.dsam.k,
            y_dim: m.tam.embed_dim,
            dt: m.tam.dt_multiplier,
            stage1_iters: cell.cfg.train.schedule.stage1_iters,
            psnr: summary.holdout_psnr,
            ssim: summary.holdout_ssim,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_sizes() {
        let base = RunConfig::default();
        let all = cells(&base, &Grid::ALL);
        assert_eq!(all.len(), 7 + 3 + 3 + 5 + 5);
        let design: Vec<_> = cells(&base, &[Grid::Design])
            .iter()
            .map(|c| (c.cfg.model.nss, c.cfg.model.tam.enabled, c.cfg.model.dsam.enabled))
            .collect();
        assert_eq!(design, DESIGN_ROWS);
        let s1: Vec<_> = cells(&base, &[Grid::Stage1])
            .iter()
            .map(|c| c.cfg.train.schedule.stage1_iters)
            .collect();
        assert_eq!(s1, [0, 600, 900, 1200, 1500]);
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grids("all").unwrap(), Grid::ALL);
        assert_eq!(parse_grids("k, dt").unwrap(), [Grid::K, Grid::Dt]);
        assert!(matches!(parse_grids("table9"), Err(CliError::Config(_))));
    }
}
