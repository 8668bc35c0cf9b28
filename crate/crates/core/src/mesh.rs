//! Spatial domain: grid geometry, D8 flow topology, drainage ordering and
//! gauged sub-catchment partitions.
//!
//! Every per-cell field in the crate is stored in *compact* form, one value
//! per active cell, indexed by the position of that cell in
//! [`Mesh::cells`]. Grid (row-major, `nrows * ncols`) storage only appears at
//! the raster boundary.
//!
//! D8 codes: `1=N, 2=NE, 3=E, 4=SE, 5=S, 6=SW, 7=W, 8=NW`, `0` = outlet. A
//! cell whose direction leaves the grid or points at an inactive cell is an
//! outlet as well.

use std::collections::VecDeque;
use std::fmt;

use thiserror::Error;

/// Row/column neighbour offsets for D8 codes 1..=8.
const D8_OFFSETS: [(isize, isize); 8] = [
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
    (-1, -1),
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("flow directions form a loop through cell {0}")]
    CycleDetected(CellCoord),
    #[error("shape mismatch: expected {expected} cells, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("invalid D8 code {code} at cell {cell}")]
    InvalidCode { cell: CellCoord, code: i64 },
    #[error("gauge cell {0} is outside the grid or inactive")]
    GaugeOffGrid(CellCoord),
    #[error("the mesh has no active cell")]
    Empty,
    #[error("maximal drainage area {area} is shared by several outlets")]
    AmbiguousMainOutlet { area: usize },
    #[error("gauge weights must sum to one (sum = {0})")]
    InvalidWeights(f64),
    #[error("gauge {name}: observed series has {actual} steps, expected {expected}")]
    SeriesLength {
        name: String,
        expected: usize,
        actual: usize,
    },
}

/// A `(row, col)` position on the grid, row 0 at the top (north).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellCoord {
    pub row: usize,
    pub col: usize,
}

impl CellCoord {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

impl fmt::Display for CellCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.row, self.col)
    }
}

/// Georeferencing of a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridGeometry {
    pub nrows: usize,
    pub ncols: usize,
    pub xllcorner: f64,
    pub yllcorner: f64,
    pub cellsize: f64,
}

impl GridGeometry {
    pub fn new(nrows: usize, ncols: usize, cellsize: f64) -> Self {
        Self {
            nrows,
            ncols,
            xllcorner: 0.0,
            yllcorner: 0.0,
            cellsize,
        }
    }

    pub fn len(&self) -> usize {
        self.nrows * self.ncols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flat(&self, cell: CellCoord) -> Option<usize> {
        (cell.row < self.nrows && cell.col < self.ncols).then(|| cell.row * self.ncols + cell.col)
    }

    pub fn coord(&self, flat: usize) -> CellCoord {
        CellCoord::new(flat / self.ncols, flat % self.ncols)
    }

    /// Neighbour reached by following D8 `code` from `cell`, if it is on the grid.
    pub fn neighbour(&self, cell: CellCoord, code: u8) -> Option<CellCoord> {
        if !(1..=8).contains(&code) {
            return None;
        }
        let (dr, dc) = D8_OFFSETS[(code - 1) as usize];
        let r = cell.row as isize + dr;
        let c = cell.col as isize + dc;
        if r < 0 || c < 0 || r >= self.nrows as isize || c >= self.ncols as isize {
            return None;
        }
        Some(CellCoord::new(r as usize, c as usize))
    }
}

/// Immutable flow topology over the active cells of a grid.
#[derive(Debug, Clone)]
pub struct Mesh {
    geometry: GridGeometry,
    dx: f64,
    flowdir: Vec<u8>,
    cells: Vec<usize>,
    index: Vec<Option<usize>>,
    downstream: Vec<Option<usize>>,
    upstream: Vec<Vec<usize>>,
    order: Vec<usize>,
    drainage_area: Vec<usize>,
}

impl Mesh {
    /// Builds the topology from grid-shaped D8 codes and an activity mask.
    ///
    /// Codes on inactive cells are ignored. Fails on loops, bad codes, or when
    /// the maximal drainage area is attained by more than one cell.
    pub fn build(
        geometry: GridGeometry,
        flowdir: &[i64],
        active: &[bool],
        dx: f64,
    ) -> Result<Self, MeshError> {
        let n = geometry.len();
        for len in [flowdir.len(), active.len()] {
            if len != n {
                return Err(MeshError::ShapeMismatch {
                    expected: n,
                    actual: len,
                });
            }
        }

        let cells: Vec<usize> = (0..n).filter(|&i| active[i]).collect();
        if cells.is_empty() {
            return Err(MeshError::Empty);
        }
        let mut index = vec![None; n];
        for (k, &flat) in cells.iter().enumerate() {
            index[flat] = Some(k);
        }

        let mut codes = vec![0u8; n];
        let mut downstream = vec![None; cells.len()];
        for (k, &flat) in cells.iter().enumerate() {
            let code = flowdir[flat];
            let coord = geometry.coord(flat);
            if !(0..=8).contains(&code) {
                return Err(MeshError::InvalidCode { cell: coord, code });
            }
            codes[flat] = code as u8;
            downstream[k] = geometry
                .neighbour(coord, code as u8)
                .and_then(|nb| index[nb.row * geometry.ncols + nb.col]);
        }

        let mut upstream = vec![Vec::new(); cells.len()];
        for (k, d) in downstream.iter().enumerate() {
            if let Some(d) = *d {
                upstream[d].push(k);
            }
        }

        // Kahn's algorithm: headwater cells first.
        let mut pending: Vec<usize> = upstream.iter().map(Vec::len).collect();
        let mut queue: VecDeque<usize> = (0..cells.len()).filter(|&k| pending[k] == 0).collect();
        let mut order = Vec::with_capacity(cells.len());
        while let Some(k) = queue.pop_front() {
            order.push(k);
            if let Some(d) = downstream[k] {
                pending[d] -= 1;
                if pending[d] == 0 {
                    queue.push_back(d);
                }
            }
        }
        if order.len() != cells.len() {
            let stuck = (0..cells.len()).find(|&k| pending[k] > 0).unwrap();
            return Err(MeshError::CycleDetected(geometry.coord(cells[stuck])));
        }

        let mut drainage_area = vec![1usize; cells.len()];
        for &k in &order {
            if let Some(d) = downstream[k] {
                drainage_area[d] += drainage_area[k];
            }
        }

        let max_area = *drainage_area.iter().max().unwrap();
        if drainage_area.iter().filter(|&&a| a == max_area).count() > 1 {
            return Err(MeshError::AmbiguousMainOutlet { area: max_area });
        }

        Ok(Self {
            geometry,
            dx,
            flowdir: codes,
            cells,
            index,
            downstream,
            upstream,
            order,
            drainage_area,
        })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn nrows(&self) -> usize {
        self.geometry.nrows
    }

    pub fn ncols(&self) -> usize {
        self.geometry.ncols
    }

    /// Cell size in metres.
    pub fn dx(&self) -> f64 {
        self.dx
    }

    /// Number of active cells.
    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    /// Grid (flat) position of every active cell.
    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn is_active(&self, cell: CellCoord) -> bool {
        self.compact_index(cell).is_some()
    }

    /// Compact index of an active cell.
    pub fn compact_index(&self, cell: CellCoord) -> Option<usize> {
        self.geometry.flat(cell).and_then(|f| self.index[f])
    }

    pub fn coord(&self, k: usize) -> CellCoord {
        self.geometry.coord(self.cells[k])
    }

    /// Stored D8 code of a grid cell (0 for outlets and inactive cells).
    pub fn flowdir(&self, cell: CellCoord) -> u8 {
        self.geometry.flat(cell).map_or(0, |f| self.flowdir[f])
    }

    pub fn downstream(&self, k: usize) -> Option<usize> {
        self.downstream[k]
    }

    pub fn upstream(&self, k: usize) -> &[usize] {
        &self.upstream[k]
    }

    /// Topological order: every cell appears after all cells draining into it.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Accumulated upstream cell count, the cell itself included.
    pub fn drainage_area(&self) -> &[usize] {
        &self.drainage_area
    }

    pub fn is_outlet(&self, k: usize) -> bool {
        self.downstream[k].is_none()
    }

    pub fn outlets(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_cells()).filter(|&k| self.is_outlet(k))
    }

    /// The unique cell with the highest drainage area.
    pub fn main_outlet(&self) -> usize {
        let mut best = 0;
        for k in 1..self.n_cells() {
            if self.drainage_area[k] > self.drainage_area[best] {
                best = k;
            }
        }
        best
    }

    /// Scatters a compact field onto the grid, filling inactive cells.
    pub fn to_grid(&self, field: &[f64], fill: f64) -> Vec<f64> {
        let mut grid = vec![fill; self.geometry.len()];
        for (k, &flat) in self.cells.iter().enumerate() {
            grid[flat] = field[k];
        }
        grid
    }

    /// Gathers the active cells of a grid-shaped field.
    pub fn from_grid(&self, grid: &[f64]) -> Result<Vec<f64>, MeshError> {
        if grid.len() != self.geometry.len() {
            return Err(MeshError::ShapeMismatch {
                expected: self.geometry.len(),
                actual: grid.len(),
            });
        }
        Ok(self.cells.iter().map(|&f| grid[f]).collect())
    }

    /// Upstream masks (compact) of the given gauge cells.
    ///
    /// The mask of a gauge holds every cell whose flow path passes through it,
    /// the gauge cell included.
    pub fn delineate(&self, gauges: &[CellCoord]) -> Result<Vec<Vec<bool>>, MeshError> {
        gauges
            .iter()
            .map(|&g| {
                let start = self.compact_index(g).ok_or(MeshError::GaugeOffGrid(g))?;
                let mut mask = vec![false; self.n_cells()];
                let mut stack = vec![start];
                mask[start] = true;
                while let Some(k) = stack.pop() {
                    for &u in &self.upstream[k] {
                        if !mask[u] {
                            mask[u] = true;
                            stack.push(u);
                        }
                    }
                }
                Ok(mask)
            })
            .collect()
    }
}

/// Cells not covered by any gauged upstream mask.
pub fn ungauged_mask(masks: &[Vec<bool>], n_cells: usize) -> Vec<bool> {
    (0..n_cells).map(|k| !masks.iter().any(|m| m[k])).collect()
}

/// Missing-value sentinel in observed discharge series.
pub const MISSING: f64 = -99.0;

pub fn is_missing(v: f64) -> bool {
    v.is_nan() || v == MISSING
}

#[derive(Debug, Clone)]
pub struct Gauge {
    pub name: String,
    pub cell: CellCoord,
    /// Observed discharge (m³/s), one value per simulation step.
    pub observed: Vec<f64>,
    pub weight: f64,
}

/// Gauges with their compact cell index and upstream mask.
#[derive(Debug, Clone)]
pub struct GaugeSet {
    gauges: Vec<Gauge>,
    cells: Vec<usize>,
    masks: Vec<Vec<bool>>,
}

impl GaugeSet {
    /// Validates gauges against the mesh and delineates their catchments.
    ///
    /// `nt`, when given, is the required length of every observed series.
    pub fn new(mesh: &Mesh, gauges: Vec<Gauge>, nt: Option<usize>) -> Result<Self, MeshError> {
        let coords: Vec<CellCoord> = gauges.iter().map(|g| g.cell).collect();
        let masks = mesh.delineate(&coords)?;
        let cells = coords
            .iter()
            .map(|&c| mesh.compact_index(c).unwrap())
            .collect();
        if gauges.len() > 1 {
            let sum: f64 = gauges.iter().map(|g| g.weight).sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(MeshError::InvalidWeights(sum));
            }
        }
        if let Some(nt) = nt {
            for g in &gauges {
                if g.observed.len() != nt {
                    return Err(MeshError::SeriesLength {
                        name: g.name.clone(),
                        expected: nt,
                        actual: g.observed.len(),
                    });
                }
            }
        }
        Ok(Self {
            gauges,
            cells,
            masks,
        })
    }

    /// Gauges with equal weights `1 / N_G`.
    pub fn equally_weighted(
        mesh: &Mesh,
        mut gauges: Vec<Gauge>,
        nt: Option<usize>,
    ) -> Result<Self, MeshError> {
        let w = 1.0 / gauges.len().max(1) as f64;
        for g in &mut gauges {
            g.weight = w;
        }
        Self::new(mesh, gauges, nt)
    }

    pub fn len(&self) -> usize {
        self.gauges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gauges.is_empty()
    }

    pub fn gauges(&self) -> &[Gauge] {
        &self.gauges
    }

    /// Compact cell index of each gauge.
    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn masks(&self) -> &[Vec<bool>] {
        &self.masks
    }

    pub fn weights(&self) -> Vec<f64> {
        self.gauges.iter().map(|g| g.weight).collect()
    }

    pub fn ungauged(&self) -> Vec<bool> {
        let n = self.masks.first().map_or(0, Vec::len);
        ungauged_mask(&self.masks, n)
    }

    /// Union of all gauged upstream masks.
    pub fn gauged(&self) -> Vec<bool> {
        self.ungauged().into_iter().map(|u| !u).collect()
    }
}
