//! Fixed sinusoidal encoding of view indices and its fusion with BEV features.

use ndarray::{Array1, Array2};

use crate::bev_partition::{GridSpec, ViewClassificationMap, ViewIndex, NUM_VIEWS};
use crate::error::{Error, Result};

const BASE: f64 = 10_000.0;

/// `d_pos`-dimensional encoding of view `v`: `e[2i] = sin(v·ωᵢ)`,
/// `e[2i+1] = cos(v·ωᵢ)` with `ωᵢ = 10000^(−2i/d_pos)`.
pub fn sinusoidal_encode(view: usize, d_pos: usize) -> Result<Array1<f64>> {
    ViewIndex::new(view)?;
    check_dim(d_pos)?;
    let v = view as f64;
    let mut e = Array1::zeros(d_pos);
    for i in 0..d_pos / 2 {
        let omega = BASE.powf(-((2 * i) as f64) / d_pos as f64);
        e[2 * i] = (v * omega).sin();
        e[2 * i + 1] = (v * omega).cos();
    }
    Ok(e)
}

fn check_dim(d_pos: usize) -> Result<()> {
    if d_pos == 0 || d_pos % 2 != 0 {
        return Err(Error::Config(format!(
            "positional dimension must be even and positive, got {d_pos}"
        )));
    }
    Ok(())
}

/// `C×(H·W)` feature grid over a BEV raster, cells in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct BevFeatureMap {
    grid: GridSpec,
    values: Array2<f64>,
}

impl BevFeatureMap {
    pub fn new(grid: GridSpec, values: Array2<f64>) -> Result<Self> {
        grid.validate()?;
        if values.ncols() != grid.num_cells() || values.nrows() == 0 {
            return Err(Error::Shape(format!(
                "feature map {:?} does not cover a {}×{} grid",
                values.dim(),
                grid.height,
                grid.width
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(
                "bev features",
                format!("non-finite value at flat index {i}"),
            ));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: GridSpec, channels: usize) -> Result<Self> {
        Self::new(grid, Array2::zeros((channels, grid.num_cells())))
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.values.nrows()
    }

    /// The flattened `C×(H·W)` view.
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    /// One row per cell (`(H·W)×C`), the layout attention consumes.
    pub fn cell_tokens(&self) -> Array2<f64> {
        self.values.t().as_standard_layout().into_owned()
    }
}

/// Encoded view index of every cell, `d_pos×(H·W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEncodingMap {
    grid: GridSpec,
    values: Array2<f64>,
}

impl PositionalEncodingMap {
    pub fn d_pos(&self) -> usize {
        self.values.nrows()
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Shape as `(d_pos, H, W)`.
    pub fn shape3(&self) -> (usize, usize, usize) {
        (self.d_pos(), self.grid.height, self.grid.width)
    }

    /// Encoding at `(row, col)`.
    pub fn column(&self, row: usize, col: usize) -> Array1<f64> {
        self.values.column(row * self.grid.width + col).to_owned()
    }
}

pub fn build_positional_map(
    view_map: &ViewClassificationMap,
    d_pos: usize,
) -> Result<PositionalEncodingMap> {
    check_dim(d_pos)?;
    let table: Vec<Array1<f64>> = (0..NUM_VIEWS)
        .map(|v| sinusoidal_encode(v, d_pos))
        .collect::<Result<_>>()?;
    let grid = *view_map.grid();
    let mut values = Array2::zeros((d_pos, grid.num_cells()));
    for (cell, view) in view_map.flat().enumerate() {
        values.column_mut(cell).assign(&table[view.get()]);
    }
    Ok(PositionalEncodingMap { grid, values })
}

/// Elementwise sum of features and positional encodings.
pub fn apply_positional_encoding(
    features: &BevFeatureMap,
    pos: &PositionalEncodingMap,
) -> Result<BevFeatureMap> {
    if features.channels() != pos.d_pos() {
        return Err(Error::Shape(format!(
            "{} feature channels vs positional dimension {}",
            features.channels(),
            pos.d_pos()
        )));
    }
    if features.grid != pos.grid {
        return Err(Error::Shape(format!(
            "feature grid {}×{} vs positional grid {}×{}",
            features.grid.height, features.grid.width, pos.grid.height, pos.grid.width
        )));
    }
    Ok(BevFeatureMap {
        grid: features.grid,
        values: &features.values + &pos.values,
    })
}
