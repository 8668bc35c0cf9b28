//! Plain-text grid rasters: a six-line header (`ncols`, `nrows`,
//! `xllcorner`, `yllcorner`, `cellsize`, `nodata_value`) followed by
//! row-major whitespace-separated values, north row first.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{fmt_f64, IoError};
use crate::mesh::GridGeometry;

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub geometry: GridGeometry,
    pub nodata: f64,
    pub values: Vec<f64>,
}

impl Raster {
    pub fn new(geometry: GridGeometry, nodata: f64, values: Vec<f64>) -> Self {
        Self {
            geometry,
            nodata,
            values,
        }
    }

    pub fn is_nodata(&self, flat: usize) -> bool {
        let v = self.values[flat];
        v == self.nodata || v.is_nan()
    }

    /// `true` on cells holding data.
    pub fn data_mask(&self) -> Vec<bool> {
        (0..self.values.len()).map(|i| !self.is_nodata(i)).collect()
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, IoError> {
        let mut lines = text.lines().enumerate();
        let mut header = [None::<f64>; 6];
        const KEYS: [&str; 6] = [
            "ncols",
            "nrows",
            "xllcorner",
            "yllcorner",
            "cellsize",
            "nodata_value",
        ];
        for _ in 0..6 {
            let (lineno, line) = lines
                .next()
                .ok_or_else(|| IoError::parse(path, 0, "truncated header"))?;
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or("").to_ascii_lowercase();
            let slot = KEYS
                .iter()
                .position(|k| *k == key)
                .ok_or_else(|| IoError::parse(path, lineno + 1, format!("unknown header key `{key}`")))?;
            let value = parts
                .next()
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| IoError::parse(path, lineno + 1, "bad header value"))?;
            header[slot] = Some(value);
        }
        let get = |i: usize| {
            header[i].ok_or_else(|| IoError::parse(path, 0, format!("missing header `{}`", KEYS[i])))
        };
        let ncols = get(0)? as usize;
        let nrows = get(1)? as usize;
        let geometry = GridGeometry {
            nrows,
            ncols,
            xllcorner: get(2)?,
            yllcorner: get(3)?,
            cellsize: get(4)?,
        };
        let nodata = get(5)?;

        let mut values = Vec::with_capacity(nrows * ncols);
        for (lineno, line) in lines {
            for tok in line.split_whitespace() {
                let v = tok
                    .parse::<f64>()
                    .map_err(|_| IoError::parse(path, lineno + 1, format!("bad value `{tok}`")))?;
                values.push(v);
            }
        }
        if values.len() != nrows * ncols {
            return Err(IoError::ShapeMismatch {
                what: path.display().to_string(),
                expected: format!("{} values", nrows * ncols),
                actual: format!("{} values", values.len()),
            });
        }
        Ok(Self {
            geometry,
            nodata,
            values,
        })
    }

    pub fn to_text(&self) -> String {
        let g = &self.geometry;
        let mut out = String::new();
        out.push_str(&format!("ncols {}\n", g.ncols));
        out.push_str(&format!("nrows {}\n", g.nrows));
        out.push_str(&format!("xllcorner {}\n", fmt_f64(g.xllcorner)));
        out.push_str(&format!("yllcorner {}\n", fmt_f64(g.yllcorner)));
        out.push_str(&format!("cellsize {}\n", fmt_f64(g.cellsize)));
        out.push_str(&format!("nodata_value {}\n", fmt_f64(self.nodata)));
        for row in self.values.chunks(g.ncols.max(1)) {
            let line: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<Raster, IoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    Raster::parse(&text, path)
}

pub fn write_raster(path: impl AsRef<Path>, raster: &Raster) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| IoError::io(path, e))?;
    f.write_all(raster.to_text().as_bytes())
        .map_err(|e| IoError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_header_case_insensitively() {
        let text = "NCOLS 3\nNROWS 2\nXLLCORNER 0\nYLLCORNER 10\nCELLSIZE 1000\nNODATA_VALUE -9999\n1 2 3\n4 -9999 6\n";
        let r = Raster::parse(text, Path::new("t.asc")).unwrap();
        assert_eq!(r.geometry.ncols, 3);
        assert_eq!(r.geometry.nrows, 2);
        assert_eq!(r.geometry.cellsize, 1000.0);
        assert_eq!(r.data_mask(), vec![true, true, true, true, false, true]);
    }

    #[test]
    fn short_body_is_a_shape_error() {
        let text = "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\nnodata_value -1\n1 2 3\n";
        assert!(matches!(
            Raster::parse(text, Path::new("t.asc")),
            Err(IoError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn text_round_trip_is_exact() {
        let values = vec![0.1, 1.0 / 3.0, -2.5e-17, 123456789.123456789, f64::MIN_POSITIVE, 7.0];
        let r = Raster::new(GridGeometry::new(2, 3, 250.0), -9999.0, values);
        let back = Raster::parse(&r.to_text(), Path::new("x")).unwrap();
        assert_eq!(back, r);
    }
}
