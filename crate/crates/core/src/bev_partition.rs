//! Six-sector partition of the BEV raster around the ego vehicle.
//!
//! Sectors are 60° wedges measured clockwise from the vehicle's forward
//! direction. Sector `k` covers angles `[offset + 60k, offset + 60(k+1))`; with
//! the default offset of −30° sector 0 is centred on the forward axis. A cell
//! is assigned by the angle of its centre, tested against the wedge boundary
//! rays with exact-sign cross products rather than by computing the angle.

use std::fmt;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const NUM_VIEWS: usize = 6;
const SECTOR_DEG: f64 = 60.0;

/// Index of a camera view sector, `0..6`, clockwise from the front.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ViewIndex(u8);

impl ViewIndex {
    pub const FRONT: ViewIndex = ViewIndex(0);
    pub const FRONT_RIGHT: ViewIndex = ViewIndex(1);
    pub const BACK_RIGHT: ViewIndex = ViewIndex(2);
    pub const BACK: ViewIndex = ViewIndex(3);
    pub const BACK_LEFT: ViewIndex = ViewIndex(4);
    pub const FRONT_LEFT: ViewIndex = ViewIndex(5);

    pub fn new(v: usize) -> Result<Self> {
        if v < NUM_VIEWS {
            Ok(ViewIndex(v as u8))
        } else {
            Err(Error::InputDomain(format!("view index {v} outside 0..6")))
        }
    }

    pub fn all() -> impl Iterator<Item = ViewIndex> {
        (0..NUM_VIEWS as u8).map(ViewIndex)
    }

    pub fn get(self) -> usize {
        self.0 as usize
    }

    /// nuScenes camera channel covering this sector.
    pub fn camera_name(self) -> &'static str {
        [
            "CAM_FRONT",
            "CAM_FRONT_RIGHT",
            "CAM_BACK_RIGHT",
            "CAM_BACK",
            "CAM_BACK_LEFT",
            "CAM_FRONT_LEFT",
        ][self.get()]
    }
}

impl fmt::Display for ViewIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Raster direction that points to the front of the vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ForwardAxis {
    #[default]
    DecreasingRow,
    IncreasingRow,
    DecreasingCol,
    IncreasingCol,
}

impl ForwardAxis {
    /// Unit forward vector as (row, col).
    fn forward(self) -> (f64, f64) {
        match self {
            ForwardAxis::DecreasingRow => (-1.0, 0.0),
            ForwardAxis::IncreasingRow => (1.0, 0.0),
            ForwardAxis::DecreasingCol => (0.0, -1.0),
            ForwardAxis::IncreasingCol => (0.0, 1.0),
        }
    }

    /// Forward rotated 90° clockwise on screen (rows grow downwards).
    fn right(self) -> (f64, f64) {
        let (fr, fc) = self.forward();
        (fc, -fr)
    }
}

impl std::str::FromStr for ForwardAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "-row" | "decreasing_row" => Ok(ForwardAxis::DecreasingRow),
            "+row" | "increasing_row" => Ok(ForwardAxis::IncreasingRow),
            "-col" | "decreasing_col" => Ok(ForwardAxis::DecreasingCol),
            "+col" | "increasing_col" => Ok(ForwardAxis::IncreasingCol),
            other => Err(Error::Config(format!("unknown forward axis `{other}`"))),
        }
    }
}

impl fmt::Display for ForwardAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ForwardAxis::DecreasingRow => "-row",
            ForwardAxis::IncreasingRow => "+row",
            ForwardAxis::DecreasingCol => "-col",
            ForwardAxis::IncreasingCol => "+col",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    /// Fractional cell coordinates of the ego vehicle.
    pub ego_row: f64,
    pub ego_col: f64,
    pub forward_axis: ForwardAxis,
    pub sector_offset_deg: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::centered(180, 180)
    }
}

impl GridSpec {
    /// `height×width` grid with the ego vehicle at the raster centre.
    pub fn centered(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            ego_row: (height as f64 - 1.0) / 2.0,
            ego_col: (width as f64 - 1.0) / 2.0,
            forward_axis: ForwardAxis::default(),
            sector_offset_deg: -30.0,
        }
    }

    pub fn num_cells(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "grid must be non-empty, got {}×{}",
                self.height, self.width
            )));
        }
        let inside = |v: f64, n: usize| v.is_finite() && v >= -0.5 && v <= n as f64 - 0.5;
        if !inside(self.ego_row, self.height) || !inside(self.ego_col, self.width) {
            return Err(Error::Config(format!(
                "ego ({}, {}) outside {}×{} raster",
                self.ego_row, self.ego_col, self.height, self.width
            )));
        }
        if !(-60.0..60.0).contains(&self.sector_offset_deg) {
            return Err(Error::Config(format!(
                "sector offset {}° outside [-60, 60)",
                self.sector_offset_deg
            )));
        }
        Ok(())
    }
}

/// Boundary rays of the six wedges in (right, forward) local coordinates.
struct SectorGeometry {
    forward: (f64, f64),
    right: (f64, f64),
    boundaries: [(f64, f64); NUM_VIEWS + 1],
}

impl SectorGeometry {
    fn new(grid: &GridSpec) -> Self {
        let mut boundaries = [(0.0, 0.0); NUM_VIEWS + 1];
        for (k, b) in boundaries.iter_mut().enumerate() {
            let beta = (grid.sector_offset_deg + SECTOR_DEG * k as f64).to_radians();
            *b = (beta.sin(), beta.cos());
        }
        Self {
            forward: grid.forward_axis.forward(),
            right: grid.forward_axis.right(),
            boundaries,
        }
    }

    /// Sector of the raster displacement `(drow, dcol)` from the ego position.
    fn classify(&self, drow: f64, dcol: f64) -> ViewIndex {
        let x = drow * self.right.0 + dcol * self.right.1;
        let y = drow * self.forward.0 + dcol * self.forward.1;
        if x == 0.0 && y == 0.0 {
            return ViewIndex::FRONT;
        }
        // cw(b, p) > 0 when p lies clockwise of the ray b (within 180°).
        let cw = |b: (f64, f64)| b.1 * x - b.0 * y;
        for k in 0..NUM_VIEWS {
            if cw(self.boundaries[k]) >= 0.0 && cw(self.boundaries[k + 1]) < 0.0 {
                return ViewIndex(k as u8);
            }
        }
        // Unreachable for consistent boundary rays: adjacent wedges share a ray.
        ViewIndex::FRONT
    }
}

/// Sector containing the raster displacement `(drow, dcol)` measured from the
/// ego position.
pub fn sector_of_offset(grid: &GridSpec, drow: f64, dcol: f64) -> ViewIndex {
    SectorGeometry::new(grid).classify(drow, dcol)
}

pub fn sector_of_cell(row: usize, col: usize, grid: &GridSpec) -> Result<ViewIndex> {
    grid.validate()?;
    if row >= grid.height || col >= grid.width {
        return Err(Error::InputDomain(format!(
            "cell ({row}, {col}) outside {}×{} raster",
            grid.height, grid.width
        )));
    }
    Ok(sector_of_offset(
        grid,
        row as f64 - grid.ego_row,
        col as f64 - grid.ego_col,
    ))
}

/// Per-cell view index over the whole raster.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewClassificationMap {
    grid: GridSpec,
    cells: Array2<u8>,
}

impl ViewClassificationMap {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn cells(&self) -> &Array2<u8> {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> ViewIndex {
        ViewIndex(self.cells[[row, col]])
    }

    /// View index per cell in row-major (flattened) order.
    pub fn flat(&self) -> impl Iterator<Item = ViewIndex> + '_ {
        self.cells.iter().map(|&v| ViewIndex(v))
    }

    /// Number of cells per sector.
    pub fn histogram(&self) -> [usize; NUM_VIEWS] {
        let mut h = [0; NUM_VIEWS];
        for &v in &self.cells {
            h[v as usize] += 1;
        }
        h
    }

    /// Rebuilds a map from stored labels, validating each one.
    pub fn from_cells(grid: GridSpec, cells: Array2<u8>) -> Result<Self> {
        grid.validate()?;
        if cells.dim() != (grid.height, grid.width) {
            return Err(Error::Shape(format!(
                "view map {:?} for a {}×{} grid",
                cells.dim(),
                grid.height,
                grid.width
            )));
        }
        if let Some(bad) = cells.iter().find(|&&v| v as usize >= NUM_VIEWS) {
            return Err(Error::InputDomain(format!("view label {bad} outside 0..6")));
        }
        Ok(Self { grid, cells })
    }
}

pub fn build_view_map(grid: &GridSpec) -> Result<ViewClassificationMap> {
    grid.validate()?;
    let geometry = SectorGeometry::new(grid);
    let cells = Array2::from_shape_fn((grid.height, grid.width), |(r, c)| {
        geometry
            .classify(r as f64 - grid.ego_row, c as f64 - grid.ego_col)
            .0
    });
    Ok(ViewClassificationMap { grid: *grid, cells })
}

/// Cells belonging to sector `view`.
pub fn view_mask(map: &ViewClassificationMap, view: usize) -> Result<Array2<bool>> {
    let view = ViewIndex::new(view)?;
    Ok(map.cells.mapv(|v| v == view.0))
}
