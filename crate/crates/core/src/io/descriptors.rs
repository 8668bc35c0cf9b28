use std::path::Path;

use log::warn;

use super::{read_raster, IoError};
use crate::mesh::Mesh;

/// Physical descriptor layers over the active cells, raw and min-max scaled.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorStack {
    pub names: Vec<String>,
    pub units: Vec<String>,
    /// `raw[d][cell]`
    pub raw: Vec<Vec<f64>>,
    /// `normalized[d][cell]`, each layer spanning `[0, 1]`
    pub normalized: Vec<Vec<f64>>,
    /// Layers that were constant over the domain and mapped to zero.
    pub constant_layers: Vec<usize>,
}

impl DescriptorStack {
    /// Stack with raw values only; call [`normalize_descriptors`] before use.
    pub fn from_raw(names: Vec<String>, raw: Vec<Vec<f64>>) -> Self {
        let units = vec![String::new(); names.len()];
        Self {
            names,
            units,
            normalized: raw.clone(),
            raw,
            constant_layers: Vec::new(),
        }
    }

    pub fn n_descriptors(&self) -> usize {
        self.raw.len()
    }

    pub fn n_cells(&self) -> usize {
        self.raw.first().map_or(0, Vec::len)
    }
}

/// Min-max scales every layer over the active cells.
///
/// Constant layers map to all zeros and are reported with a warning.
pub fn normalize_descriptors(mut stack: DescriptorStack) -> DescriptorStack {
    stack.constant_layers.clear();
    stack.normalized = stack
        .raw
        .iter()
        .enumerate()
        .map(|(d, layer)| {
            let lo = layer.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = layer.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                let span = hi - lo;
                layer.iter().map(|&v| (v - lo) / span).collect()
            } else {
                warn!(
                    "descriptor `{}` is constant over the domain; normalized to 0",
                    stack.names.get(d).map_or("?", String::as_str)
                );
                stack.constant_layers.push(d);
                vec![0.0; layer.len()]
            }
        })
        .collect();
    stack
}

/// Reads one raster per descriptor and normalizes the stack.
///
/// Nodata on an active cell is an error.
pub fn load_descriptors<P: AsRef<Path>>(
    paths: &[(String, P)],
    mesh: &Mesh,
) -> Result<DescriptorStack, IoError> {
    let mut names = Vec::new();
    let mut raw = Vec::new();
    for (name, path) in paths {
        let r = read_raster(path)?;
        if (r.geometry.nrows, r.geometry.ncols) != (mesh.nrows(), mesh.ncols()) {
            return Err(IoError::ShapeMismatch {
                what: format!("descriptor `{name}`"),
                expected: format!("{}x{}", mesh.nrows(), mesh.ncols()),
                actual: format!("{}x{}", r.geometry.nrows, r.geometry.ncols),
            });
        }
        if let Some(&flat) = mesh.cells().iter().find(|&&f| r.is_nodata(f)) {
            return Err(IoError::Config(format!(
                "descriptor `{name}` has nodata on active cell {}",
                mesh.geometry().coord(flat)
            )));
        }
        names.push(name.clone());
        raw.push(mesh.from_grid(&r.values).expect("shape checked"));
    }
    Ok(normalize_descriptors(DescriptorStack::from_raw(names, raw)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(layer: Vec<f64>) -> DescriptorStack {
        normalize_descriptors(DescriptorStack::from_raw(vec!["d".into()], vec![layer]))
    }

    #[test]
    fn affine_map() {
        assert_eq!(one(vec![2.0, 4.0, 6.0]).normalized[0], vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn constant_layer_maps_to_zero() {
        let s = one(vec![5.0, 5.0]);
        assert_eq!(s.normalized[0], vec![0.0, 0.0]);
        assert_eq!(s.constant_layers, vec![0]);
        assert_eq!(s.raw[0], vec![5.0, 5.0]);
    }

    #[test]
    fn outlier_layer() {
        assert_eq!(one(vec![0.0, 0.0, 100.0]).normalized[0], vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn idempotent_on_normalized_layers() {
        let s = one(vec![3.0, -1.0, 7.5, 2.0]);
        let again = one(s.normalized[0].clone());
        assert_eq!(again.normalized[0], s.normalized[0]);
    }
}
