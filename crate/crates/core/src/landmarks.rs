//! Landmark files: CSV with an `x,y,z` header, world coordinates in mm.

use std::path::Path;

use crate::error::{Error, Result};
use crate::optimizer::csv_error;
use crate::volume::LandmarkSet;

pub fn load_landmarks(path: impl AsRef<Path>) -> Result<LandmarkSet> {
    let path = path.as_ref();
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header = r.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != ["x", "y", "z"] {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            reason: format!("expected header x,y,z, found {:?}", header.iter().collect::<Vec<_>>()),
        });
    }
    let mut points = Vec::new();
    for (line, rec) in r.deserialize::<[f64; 3]>().enumerate() {
        let p = rec.map_err(|e| csv_error(path, e))?;
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                reason: format!("non-finite coordinate on data row {}", line + 1),
            });
        }
        points.push(p);
    }
    Ok(LandmarkSet::new(points))
}

pub fn save_landmarks(lm: &LandmarkSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["x", "y", "z"]).map_err(|e| csv_error(path, e))?;
    for p in &lm.points {
        w.write_record(p.map(|v| format!("{v:.6}"))).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
