//! Gridded rainfall and potential evapotranspiration series.
//!
//! File layout (whitespace separated, `#` comments):
//!
//! ```text
//! nrows 10
//! ncols 10
//! dt 3600
//! nt 200
//! variable rain sparse
//! step 17
//! <nrows lines of ncols values>
//! variable pet dense
//! step 0
//! ...
//! ```
//!
//! A dense variable lists every step `0..nt` in order. A sparse variable
//! lists only non-zero steps; omitted steps are all-zero. Values on inactive
//! cells are read and discarded.

use std::fs;
use std::path::Path;

use super::{fmt_f64, IoError};
use crate::mesh::Mesh;

/// Per-step grids over the active cells, dense or with all-zero steps elided.
#[derive(Debug, Clone, PartialEq)]
pub enum Storage {
    Dense(Vec<Vec<f64>>),
    Sparse {
        steps: Vec<usize>,
        grids: Vec<Vec<f64>>,
    },
}

impl Storage {
    fn stored(&self) -> usize {
        match self {
            Storage::Dense(g) => g.len(),
            Storage::Sparse { grids, .. } => grids.len(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForcingSet {
    dt: f64,
    nt: usize,
    t0: usize,
    n_cells: usize,
    rain: Storage,
    pet: Storage,
    zeros: Vec<f64>,
}

impl PartialEq for ForcingSet {
    fn eq(&self, other: &Self) -> bool {
        self.dt == other.dt
            && self.nt == other.nt
            && self.n_cells == other.n_cells
            && (0..self.nt).all(|t| self.rain(t) == other.rain(t) && self.pet(t) == other.pet(t))
    }
}

fn check_storage(
    variable: &'static str,
    storage: &Storage,
    nt: usize,
    n_cells: usize,
) -> Result<(), IoError> {
    let grids: Vec<(usize, &Vec<f64>)> = match storage {
        Storage::Dense(g) => {
            if g.len() != nt {
                return Err(IoError::MissingTimestep {
                    variable,
                    step: g.len().min(nt),
                });
            }
            g.iter().enumerate().collect()
        }
        Storage::Sparse { steps, grids } => {
            if steps.len() != grids.len()
                || steps.windows(2).any(|w| w[0] >= w[1])
                || steps.last().is_some_and(|&s| s >= nt)
            {
                return Err(IoError::Config(format!(
                    "{variable}: sparse steps must be increasing and below nt"
                )));
            }
            steps.iter().copied().zip(grids).collect()
        }
    };
    for (step, g) in grids {
        if g.len() != n_cells {
            return Err(IoError::ShapeMismatch {
                what: format!("{variable} step {step}"),
                expected: format!("{n_cells} cells"),
                actual: format!("{} cells", g.len()),
            });
        }
        if let Some(&value) = g.iter().find(|v| !(**v >= 0.0)) {
            return Err(IoError::NegativeForcing {
                variable,
                step,
                value,
            });
        }
    }
    Ok(())
}

fn sparsify(storage: &Storage) -> Storage {
    match storage {
        Storage::Sparse { .. } => storage.clone(),
        Storage::Dense(grids) => {
            let (steps, grids) = grids
                .iter()
                .enumerate()
                .filter(|(_, g)| g.iter().any(|&v| v != 0.0))
                .map(|(t, g)| (t, g.clone()))
                .unzip();
            Storage::Sparse { steps, grids }
        }
    }
}

impl ForcingSet {
    /// Validated forcing set; rain and PET are mm per step over active cells.
    pub fn new(dt: f64, nt: usize, n_cells: usize, rain: Storage, pet: Storage) -> Result<Self, IoError> {
        if !(dt > 0.0) {
            return Err(IoError::Config(format!("dt must be positive, got {dt}")));
        }
        check_storage("rain", &rain, nt, n_cells)?;
        check_storage("pet", &pet, nt, n_cells)?;
        Ok(Self {
            dt,
            nt,
            t0: 0,
            n_cells,
            rain,
            pet,
            zeros: vec![0.0; n_cells],
        })
    }

    pub fn dense(dt: f64, rain: Vec<Vec<f64>>, pet: Vec<Vec<f64>>) -> Result<Self, IoError> {
        let nt = rain.len();
        let n_cells = rain.first().map_or(0, Vec::len);
        Self::new(dt, nt, n_cells, Storage::Dense(rain), Storage::Dense(pet))
    }

    /// Timestep in seconds.
    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    /// Index of the first step in the source series.
    pub fn t0(&self) -> usize {
        self.t0
    }

    pub fn with_t0(mut self, t0: usize) -> Self {
        self.t0 = t0;
        self
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    fn at<'a>(&'a self, storage: &'a Storage, t: usize) -> &'a [f64] {
        match storage {
            Storage::Dense(g) => &g[t],
            Storage::Sparse { steps, grids } => match steps.binary_search(&t) {
                Ok(i) => &grids[i],
                Err(_) => &self.zeros,
            },
        }
    }

    /// Rainfall (mm per step) at step `t`.
    pub fn rain(&self, t: usize) -> &[f64] {
        self.at(&self.rain, t)
    }

    /// Potential evapotranspiration (mm per step) at step `t`.
    pub fn pet(&self, t: usize) -> &[f64] {
        self.at(&self.pet, t)
    }

    pub fn rain_storage(&self) -> &Storage {
        &self.rain
    }

    pub fn pet_storage(&self) -> &Storage {
        &self.pet
    }

    /// Number of rainfall grids actually held in memory.
    pub fn stored_rain_grids(&self) -> usize {
        self.rain.stored()
    }

    /// Same values with all-zero rainfall steps elided.
    pub fn to_sparse(&self) -> Self {
        Self {
            rain: sparsify(&self.rain),
            ..self.clone()
        }
    }

    pub fn to_dense(&self) -> Self {
        let densify = |s: &Storage| Storage::Dense((0..self.nt).map(|t| self.at(s, t).to_vec()).collect());
        Self {
            rain: densify(&self.rain),
            pet: densify(&self.pet),
            ..self.clone()
        }
    }

    /// Restricts the series to steps `start..end`.
    pub fn window(&self, start: usize, end: usize) -> Self {
        let dense = |s: &Storage| Storage::Dense((start..end).map(|t| self.at(s, t).to_vec()).collect());
        Self {
            nt: end - start,
            t0: self.t0 + start,
            rain: dense(&self.rain),
            pet: dense(&self.pet),
            ..self.clone()
        }
    }
}

struct Tokens<'a> {
    path: &'a Path,
    lines: std::iter::Peekable<Box<dyn Iterator<Item = (usize, Vec<&'a str>)> + 'a>>,
}

impl<'a> Tokens<'a> {
    fn new(text: &'a str, path: &'a Path) -> Self {
        let it: Box<dyn Iterator<Item = (usize, Vec<&'a str>)>> = Box::new(
            text.lines()
                .enumerate()
                .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").split_whitespace().collect::<Vec<_>>()))
                .filter(|(_, t)| !t.is_empty()),
        );
        Self {
            path,
            lines: it.peekable(),
        }
    }

    fn keyed(&mut self, key: &str) -> Result<(usize, Vec<&'a str>), IoError> {
        match self.lines.next() {
            Some((n, toks)) if toks[0] == key => Ok((n, toks[1..].to_vec())),
            Some((n, toks)) => Err(IoError::parse(self.path, n, format!("expected `{key}`, found `{}`", toks[0]))),
            None => Err(IoError::parse(self.path, 0, format!("unexpected end of file, expected `{key}`"))),
        }
    }

    fn value<T: std::str::FromStr>(&mut self, key: &str) -> Result<T, IoError> {
        let (n, rest) = self.keyed(key)?;
        rest.first()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| IoError::parse(self.path, n, format!("bad value for `{key}`")))
    }

    fn row(&mut self, ncols: usize) -> Result<Vec<f64>, IoError> {
        let (n, toks) = self
            .lines
            .next()
            .ok_or_else(|| IoError::parse(self.path, 0, "unexpected end of grid"))?;
        if toks.len() != ncols {
            return Err(IoError::parse(self.path, n, format!("expected {ncols} values, found {}", toks.len())));
        }
        toks.iter()
            .map(|t| t.parse::<f64>().map_err(|_| IoError::parse(self.path, n, format!("bad value `{t}`"))))
            .collect()
    }

    fn peek_key(&mut self) -> Option<&'a str> {
        self.lines.peek().map(|(_, t)| t[0])
    }
}

/// Reads and validates a forcing file against the mesh.
pub fn load_forcings(path: impl AsRef<Path>, mesh: &Mesh) -> Result<ForcingSet, IoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    parse_forcings(&text, path, mesh)
}

fn parse_forcings(text: &str, path: &Path, mesh: &Mesh) -> Result<ForcingSet, IoError> {
    let mut tok = Tokens::new(text, path);
    let nrows: usize = tok.value("nrows")?;
    let ncols: usize = tok.value("ncols")?;
    if (nrows, ncols) != (mesh.nrows(), mesh.ncols()) {
        return Err(IoError::ShapeMismatch {
            what: path.display().to_string(),
            expected: format!("{}x{}", mesh.nrows(), mesh.ncols()),
            actual: format!("{nrows}x{ncols}"),
        });
    }
    let dt: f64 = tok.value("dt")?;
    let nt: usize = tok.value("nt")?;

    let mut rain = None;
    let mut pet = None;
    while tok.peek_key().is_some() {
        let (n, args) = tok.keyed("variable")?;
        let (name, mode) = match args.as_slice() {
            [name, mode] => (*name, *mode),
            _ => return Err(IoError::parse(path, n, "expected `variable <rain|pet> <dense|sparse>`")),
        };
        let variable: &'static str = match name {
            "rain" => "rain",
            "pet" => "pet",
            other => return Err(IoError::parse(path, n, format!("unknown variable `{other}`"))),
        };
        let mut steps = Vec::new();
        let mut grids = Vec::new();
        while tok.peek_key() == Some("step") {
            let step: usize = tok.value("step")?;
            let mut grid = Vec::with_capacity(nrows * ncols);
            for _ in 0..nrows {
                grid.extend(tok.row(ncols)?);
            }
            let compact = mesh.from_grid(&grid).expect("grid shape checked");
            steps.push(step);
            grids.push(compact);
        }
        let storage = match mode {
            "dense" => {
                if let Some(step) = (0..nt).find(|&t| steps.get(t) != Some(&t)) {
                    return Err(IoError::MissingTimestep { variable, step });
                }
                if steps.len() > nt {
                    return Err(IoError::parse(path, n, format!("{variable}: more than nt steps")));
                }
                Storage::Dense(grids)
            }
            "sparse" => Storage::Sparse { steps, grids },
            other => return Err(IoError::parse(path, n, format!("unknown storage `{other}`"))),
        };
        match variable {
            "rain" => rain = Some(storage),
            _ => pet = Some(storage),
        }
    }
    let rain = rain.ok_or_else(|| IoError::parse(path, 0, "missing rain variable"))?;
    let pet = pet.ok_or_else(|| IoError::parse(path, 0, "missing pet variable"))?;
    ForcingSet::new(dt, nt, mesh.n_cells(), rain, pet)
}

pub fn write_forcings(path: impl AsRef<Path>, mesh: &Mesh, forcing: &ForcingSet) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut out = format!(
        "nrows {}\nncols {}\ndt {}\nnt {}\n",
        mesh.nrows(),
        mesh.ncols(),
        fmt_f64(forcing.dt),
        forcing.nt
    );
    for (name, storage) in [("rain", &forcing.rain), ("pet", &forcing.pet)] {
        let (mode, items): (&str, Vec<(usize, &Vec<f64>)>) = match storage {
            Storage::Dense(g) => ("dense", g.iter().enumerate().collect()),
            Storage::Sparse { steps, grids } => ("sparse", steps.iter().copied().zip(grids).collect()),
        };
        out.push_str(&format!("variable {name} {mode}\n"));
        for (step, grid) in items {
            out.push_str(&format!("step {step}\n"));
            let full = mesh.to_grid(grid, 0.0);
            for row in full.chunks(mesh.ncols()) {
                let line: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
        }
    }
    fs::write(path, out).map_err(|e| IoError::io(path, e))
}
