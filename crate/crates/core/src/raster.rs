//! Grids, point rasterization, spectral indices, land-cover encoding, and
//! unit extraction from aligned rasters.
//!
//! Pixel data is stored channel-major then row-major. NaN marks nodata
//! everywhere.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::dataset::SpatialDataset;
use crate::error::{config_err, contract_err, data_err, dim_err, Error, Result};
use crate::rng;

const GRID_MAGIC: &[u8; 4] = b"GRD1";
const GRID_HEADER: usize = 4 + 3 * 4 + 3 * 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub origin_x: f64,
    pub origin_y: f64,
    pub resolution: f64,
    pub data: Vec<f64>,
}

/// Placement of a grid in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub rows: usize,
    pub cols: usize,
    pub origin_x: f64,
    pub origin_y: f64,
    pub resolution: f64,
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(dim_err!("grid must have at least one row and column"));
        }
        if !(self.resolution > 0.0) || !self.resolution.is_finite() {
            return Err(dim_err!("grid resolution must be positive, got {}", self.resolution));
        }
        if !self.origin_x.is_finite() || !self.origin_y.is_finite() {
            return Err(dim_err!("grid origin must be finite"));
        }
        Ok(())
    }

    /// World coordinates of the centre of `(row, col)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin_x + (col as f64 + 0.5) * self.resolution,
            self.origin_y + (row as f64 + 0.5) * self.resolution,
        )
    }

    /// Pixel containing `(x, y)`: `floor((coord - origin) / resolution)`.
    pub fn pixel_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = ((x - self.origin_x) / self.resolution).floor();
        let r = ((y - self.origin_y) / self.resolution).floor();
        if r >= 0.0 && c >= 0.0 && (r as usize) < self.rows && (c as usize) < self.cols {
            Some((r as usize, c as usize))
        } else {
            None
        }
    }
}

impl Grid {
    pub fn new(geom: Geometry, channels: usize, data: Vec<f64>) -> Result<Self> {
        geom.validate()?;
        if channels == 0 {
            return Err(dim_err!("grid needs at least one channel"));
        }
        let want = geom.rows * geom.cols * channels;
        if data.len() != want {
            return Err(dim_err!("grid data holds {} values, expected {want}", data.len()));
        }
        Ok(Self {
            rows: geom.rows,
            cols: geom.cols,
            channels,
            origin_x: geom.origin_x,
            origin_y: geom.origin_y,
            resolution: geom.resolution,
            data,
        })
    }

    pub fn filled(geom: Geometry, channels: usize, value: f64) -> Result<Self> {
        Self::new(geom, channels, vec![value; geom.rows * geom.cols * channels])
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            rows: self.rows,
            cols: self.cols,
            origin_x: self.origin_x,
            origin_y: self.origin_y,
            resolution: self.resolution,
        }
    }

    pub fn index(&self, channel: usize, row: usize, col: usize) -> usize {
        (channel * self.rows + row) * self.cols + col
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.data[self.index(channel, row, col)]
    }

    pub fn set(&mut self, channel: usize, row: usize, col: usize, v: f64) {
        let i = self.index(channel, row, col);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let k = self.rows * self.cols;
        &self.data[c * k..(c + 1) * k]
    }

    pub fn same_geometry(&self, other: &Grid) -> bool {
        self.geometry() == other.geometry()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.bytes(GRID_MAGIC);
        w.dim(self.rows)?;
        w.dim(self.cols)?;
        w.dim(self.channels)?;
        w.f64(self.origin_x);
        w.f64(self.origin_y);
        w.f64(self.resolution);
        w.f64s(&self.data);
        Ok(w.into_inner())
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(GRID_MAGIC)?;
        let rows = r.dim("rows")?;
        let cols = r.dim("cols")?;
        let channels = r.dim("channels")?;
        let origin_x = r.f64()?;
        let origin_y = r.f64()?;
        let resolution = r.f64()?;
        let n = rows
            .checked_mul(cols)
            .and_then(|v| v.checked_mul(channels))
            .filter(|v| v.checked_mul(8).is_some())
            .ok_or_else(|| r.error("grid dimensions overflow"))?;
        if r.remaining() < n * 8 {
            return Err(r.error(format!(
                "truncated payload: {} bytes for {n} values",
                r.remaining()
            )));
        }
        let data = r.f64s(n)?;
        r.finish()?;
        let geom = Geometry {
            rows,
            cols,
            origin_x,
            origin_y,
            resolution,
        };
        if geom.validate().is_err() {
            return Err(Error::Format {
                offset: (GRID_HEADER - 8) as u64,
                message: format!("invalid grid placement (resolution {resolution})"),
            });
        }
        Self::new(geom, channels, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// `(NIR − R) / (NIR + R)` per pixel; NaN where the sum is zero.
pub fn ndvi(nir: &Grid, red: &Grid) -> Result<Grid> {
    if !nir.same_geometry(red) || nir.channels != 1 || red.channels != 1 {
        return Err(dim_err!("NDVI needs two single-channel grids with matching geometry"));
    }
    let data = nir
        .data
        .iter()
        .zip(&red.data)
        .map(|(n, r)| {
            let s = n + r;
            if s == 0.0 {
                f64::NAN
            } else {
                (n - r) / s
            }
        })
        .collect();
    Grid::new(nir.geometry(), 1, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub value: f64,
}

/// Reads a point CSV with header `x,y,value`.
pub fn read_points_csv(text: &str) -> Result<Vec<Point>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| data_err!("point CSV: {e}"))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["x", "y", "value"] {
        return Err(data_err!("point CSV header must be x,y,value"));
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.deserialize::<Point>().enumerate() {
        let p = rec.map_err(|e| data_err!("point CSV record {}: {e}", line + 1))?;
        if !(p.x.is_finite() && p.y.is_finite() && p.value.is_finite()) {
            return Err(data_err!("point CSV record {} is not finite", line + 1));
        }
        out.push(p);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rasterized {
    pub grid: Grid,
    /// Points per pixel, row-major.
    pub counts: Vec<usize>,
    pub dropped: usize,
}

/// Per-pixel mean of the points falling inside each pixel.
pub fn rasterize_points(points: &[Point], geom: Geometry) -> Result<Rasterized> {
    geom.validate()?;
    let k = geom.rows * geom.cols;
    let mut sum = vec![0.0; k];
    let mut counts = vec![0usize; k];
    let mut dropped = 0;
    for p in points {
        match geom.pixel_of(p.x, p.y) {
            Some((r, c)) => {
                sum[r * geom.cols + c] += p.value;
                counts[r * geom.cols + c] += 1;
            }
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        log::warn!("rasterize: dropped {dropped} point(s) outside the grid extent");
    }
    let data = sum
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
        .collect();
    Ok(Rasterized {
        grid: Grid::new(geom, 1, data)?,
        counts,
        dropped,
    })
}

/// Land-cover class codes in channel order.
pub const NLCD_CODES: [u16; 15] = [11, 21, 22, 23, 24, 31, 41, 42, 43, 52, 71, 81, 82, 90, 95];

pub fn nlcd_channel(code: f64) -> Option<usize> {
    NLCD_CODES.iter().position(|&c| f64::from(c) == code)
}

/// One channel per class code. Unknown codes give an all-zero vector and are
/// counted; nodata pixels stay NaN in every channel.
pub fn onehot_landcover(classes: &Grid) -> Result<(Grid, usize)> {
    if classes.channels != 1 {
        return Err(dim_err!("land cover grid must have one channel"));
    }
    let k = classes.rows * classes.cols;
    let mut data = vec![0.0; k * NLCD_CODES.len()];
    let mut unknown = 0;
    for (p, &code) in classes.data.iter().enumerate() {
        if code.is_nan() {
            for c in 0..NLCD_CODES.len() {
                data[c * k + p] = f64::NAN;
            }
            continue;
        }
        match nlcd_channel(code) {
            Some(c) => data[c * k + p] = 1.0,
            None => unknown += 1,
        }
    }
    if unknown > 0 {
        log::warn!("land cover: {unknown} pixel(s) with unknown class codes");
    }
    Ok((Grid::new(classes.geometry(), NLCD_CODES.len(), data)?, unknown))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Units whose patch leaves the grid are dropped.
    #[default]
    Exclude,
    /// Out-of-grid patch cells read as zero.
    ZeroFill,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub seed: u64,
    pub ratios: [f64; 3],
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            ratios: [0.6, 0.2, 0.2],
        }
    }
}

/// Grid paths per role plus extraction settings.
///
/// Grids with a single row are treated as line graphs: coordinates are the
/// pixel-centre `x` only and patches are one row of `d_s` cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Treatment grids keyed `1..=M`.
    pub treatment: BTreeMap<String, PathBuf>,
    pub confounder: PathBuf,
    pub outcome: PathBuf,
    pub d_s: usize,
    #[serde(default)]
    pub boundary: Boundary,
    #[serde(default)]
    pub split: SplitSpec,
}

impl Manifest {
    /// Treatment paths in index order.
    pub fn treatment_paths(&self) -> Result<Vec<&PathBuf>> {
        let mut keyed = Vec::with_capacity(self.treatment.len());
        for (k, p) in &self.treatment {
            let i: usize = k.parse().map_err(|_| config_err!("treatment key `{k}` is not an index"))?;
            keyed.push((i, p));
        }
        keyed.sort_by_key(|(i, _)| *i);
        if keyed.is_empty() || keyed.iter().enumerate().any(|(j, (i, _))| *i != j + 1) {
            return Err(config_err!("treatment keys must be 1..=M"));
        }
        Ok(keyed.into_iter().map(|(_, p)| p).collect())
    }

    pub fn validate(&self) -> Result<()> {
        self.treatment_paths()?;
        if self.d_s == 0 || self.d_s % 2 == 0 {
            return Err(config_err!("d_s must be odd, got {}", self.d_s));
        }
        check_ratios(&self.split.ratios)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let m: Manifest = serde_path_to_error::deserialize(de)
            .map_err(|e| config_err!("manifest key `{}`: {}", e.path(), e.inner().message()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err!("manifest: {e}"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut m = Self::from_toml(&fs::read_to_string(path)?)?;
        if let Some(dir) = path.parent() {
            m.resolve(dir);
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    fn resolve(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        self.treatment.values_mut().for_each(fix);
        fix(&mut self.confounder);
        fix(&mut self.outcome);
    }
}

/// Loads the grids named by `manifest` and extracts units.
pub fn extract_units(manifest: &Manifest) -> Result<SpatialDataset> {
    manifest.validate()?;
    let paths = manifest.treatment_paths()?;
    let treatments = paths.iter().map(|p| Grid::load(p)).collect::<Result<Vec<_>>>()?;
    let names = paths
        .iter()
        .map(|p| p.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned()))
        .collect();
    let confounder = Grid::load(&manifest.confounder)?;
    let outcome = Grid::load(&manifest.outcome)?;
    extract_units_from(&treatments, &confounder, &outcome, manifest.d_s, manifest.boundary, names)
}

/// One unit per non-NaN outcome pixel whose patch is usable under
/// `boundary`. Patch centres are zeroed.
pub fn extract_units_from(
    treatments: &[Grid],
    confounder: &Grid,
    outcome: &Grid,
    d_s: usize,
    boundary: Boundary,
    names: Vec<String>,
) -> Result<SpatialDataset> {
    if d_s == 0 || d_s % 2 == 0 {
        return Err(config_err!("d_s must be odd, got {d_s}"));
    }
    if treatments.is_empty() {
        return Err(dim_err!("need at least one treatment grid"));
    }
    if names.len() != treatments.len() {
        return Err(dim_err!("{} names for {} treatment grids", names.len(), treatments.len()));
    }
    for g in treatments.iter().chain([confounder]) {
        if !g.same_geometry(outcome) {
            return Err(data_err!("grids are not aligned with the outcome grid"));
        }
    }
    if treatments.iter().any(|g| g.channels != 1) || outcome.channels != 1 {
        return Err(dim_err!("treatment and outcome grids must have one channel"));
    }
    let geom = outcome.geometry();
    let line = geom.rows == 1;
    let half = (d_s / 2) as isize;
    let (pr, pc) = if line { (1, d_s) } else { (d_s, d_s) };
    let row_half = if line { 0 } else { half };
    let m = treatments.len();
    let mut ds = SpatialDataset {
        coord_dim: if line { 1 } else { 2 },
        coords: Vec::new(),
        m,
        t: Vec::new(),
        patch_rows: pr,
        patch_cols: pc,
        patches: vec![Vec::new(); m],
        x_dim: confounder.channels,
        x: Vec::new(),
        y: Vec::new(),
        treatment_names: names,
        cells: Some(Vec::new()),
    };
    let mut skipped_nan = 0usize;
    let mut patch = vec![0.0; pr * pc];
    for r in 0..geom.rows {
        'unit: for c in 0..geom.cols {
            let yv = outcome.get(0, r, c);
            if yv.is_nan() {
                continue;
            }
            let inside = r as isize >= row_half
                && (r as isize) + row_half < geom.rows as isize
                && c as isize >= half
                && (c as isize) + half < geom.cols as isize;
            if !inside && boundary == Boundary::Exclude {
                continue;
            }
            let x: Vec<f64> = (0..confounder.channels).map(|k| confounder.get(k, r, c)).collect();
            let t: Vec<f64> = treatments.iter().map(|g| g.get(0, r, c)).collect();
            if x.iter().chain(&t).any(|v| v.is_nan()) {
                skipped_nan += 1;
                continue;
            }
            let mut unit_patches = Vec::with_capacity(m);
            for g in treatments {
                for dr in 0..pr {
                    for dc in 0..pc {
                        let rr = r as isize + dr as isize - row_half;
                        let cc = c as isize + dc as isize - half;
                        let v = if rr < 0 || cc < 0 || rr >= geom.rows as isize || cc >= geom.cols as isize {
                            0.0
                        } else {
                            g.get(0, rr as usize, cc as usize)
                        };
                        if v.is_nan() {
                            skipped_nan += 1;
                            continue 'unit;
                        }
                        patch[dr * pc + dc] = v;
                    }
                }
                patch[(pr / 2) * pc + pc / 2] = 0.0;
                unit_patches.push(patch.clone());
            }
            let (px, py) = geom.pixel_center(r, c);
            ds.coords.push(px);
            if !line {
                ds.coords.push(py);
            }
            ds.t.extend_from_slice(&t);
            for (k, p) in unit_patches.into_iter().enumerate() {
                ds.patches[k].extend_from_slice(&p);
            }
            ds.x.extend_from_slice(&x);
            ds.y.push(Some(yv));
            if let Some(cells) = ds.cells.as_mut() {
                cells.push((r, c));
            }
        }
    }
    if skipped_nan > 0 {
        log::warn!("extract: skipped {skipped_nan} unit(s) with nodata inputs");
    }
    if ds.n() == 0 {
        return Err(data_err!("no eligible units for d_s = {d_s}"));
    }
    ds.validate()?;
    Ok(ds)
}

fn check_ratios(r: &[f64; 3]) -> Result<()> {
    if r.iter().any(|v| !(*v > 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(config_err!("split ratios must be positive and sum to 1, got {r:?}"));
    }
    Ok(())
}

/// Partition sizes: validation and test get rounded shares, train the rest.
pub fn split_sizes(n: usize, ratios: &[f64; 3]) -> Result<[usize; 3]> {
    check_ratios(ratios)?;
    if n < 3 {
        return Err(data_err!("cannot split {n} units into three partitions"));
    }
    let val = ((n as f64 * ratios[1]).round() as usize).max(1);
    let test = ((n as f64 * ratios[2]).round() as usize).max(1);
    if val + test >= n {
        return Err(data_err!("split of {n} units leaves no training units"));
    }
    Ok([n - val - test, val, test])
}

/// Seeded random partition of unit indices; each part is sorted.
pub fn split_indices(n: usize, ratios: &[f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    let [a, b, _] = split_sizes(n, ratios)?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, "split"));
    let mut parts = [idx[..a].to_vec(), idx[a..a + b].to_vec(), idx[a + b..].to_vec()];
    parts.iter_mut().for_each(|p| p.sort_unstable());
    Ok(parts)
}

pub fn split_dataset(
    ds: &SpatialDataset,
    ratios: &[f64; 3],
    seed: u64,
) -> Result<(SpatialDataset, SpatialDataset, SpatialDataset)> {
    let [a, b, c] = split_indices(ds.n(), ratios, seed)?;
    Ok((ds.subset(&a), ds.subset(&b), ds.subset(&c)))
}

/// Writes a dataset's grids and manifest into `dir`.
pub fn write_grids(dir: &Path, treatments: &[Grid], confounder: &Grid, outcome: &Grid, manifest: &Manifest) -> Result<()> {
    if treatments.len() != manifest.treatment.len() {
        return Err(contract_err!("manifest lists {} treatments, got {}", manifest.treatment.len(), treatments.len()));
    }
    fs::create_dir_all(dir)?;
    for (g, p) in treatments.iter().zip(manifest.treatment_paths()?) {
        g.save(&dir.join(p))?;
    }
    confounder.save(&dir.join(&manifest.confounder))?;
    outcome.save(&dir.join(&manifest.outcome))?;
    manifest.save(&dir.join("manifest.toml"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(rows: usize, cols: usize) -> Geometry {
        Geometry {
            rows,
            cols,
            origin_x: 0.0,
            origin_y: 0.0,
            resolution: 1.0,
        }
    }

    #[test]
    fn byte_layout() {
        let g = Grid::new(geom(2, 2), 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = g.to_bytes().unwrap();
        assert_eq!(b.len(), GRID_HEADER + 32);
        assert_eq!(&b[..4], b"GRD1");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[GRID_HEADER..GRID_HEADER + 8], &1.0f64.to_le_bytes());
        assert_eq!(&b[GRID_HEADER + 24..], &4.0f64.to_le_bytes());
        assert_eq!(Grid::from_bytes(&b).unwrap(), g);
    }

    #[test]
    fn bad_files() {
        let g = Grid::new(geom(2, 2), 1, vec![1.0; 4]).unwrap();
        let mut b = g.to_bytes().unwrap();
        assert!(matches!(Grid::from_bytes(&b[..b.len() - 3]), Err(Error::Format { .. })));
        b[0] = b'X';
        assert!(matches!(Grid::from_bytes(&b), Err(Error::Format { offset: 0, .. })));
        let mut huge = Writer::new();
        huge.bytes(GRID_MAGIC);
        for _ in 0..3 {
            huge.u32(u32::MAX);
        }
        huge.f64s(&[0.0, 0.0, 1.0]);
        assert!(matches!(Grid::from_bytes(&huge.into_inner()), Err(Error::Format { .. })));
    }

    #[test]
    fn ndvi_values() {
        let nir = Grid::new(geom(1, 3), 1, vec![0.8, 0.5, 0.0]).unwrap();
        let red = Grid::new(geom(1, 3), 1, vec![0.2, 0.5, 0.0]).unwrap();
        let v = ndvi(&nir, &red).unwrap();
        assert_eq!(v.data[0], (0.8 - 0.2) / (0.8 + 0.2));
        assert!((v.data[0] - 0.6).abs() < 1e-15);
        assert_eq!(v.data[1], 0.0);
        assert!(v.data[2].is_nan());
    }

    #[test]
    fn rasterize_rules() {
        let pts = [
            Point { x: 0.2, y: 0.2, value: 10.0 },
            Point { x: 0.7, y: 0.9, value: 20.0 },
            Point { x: 1.0, y: 0.0, value: 5.0 },
            Point { x: -0.1, y: 0.0, value: 1.0 },
        ];
        let r = rasterize_points(&pts, geom(2, 2)).unwrap();
        assert_eq!(r.grid.data[0], 15.0);
        assert_eq!(r.grid.data[1], 5.0);
        assert!(r.grid.data[2].is_nan() && r.grid.data[3].is_nan());
        assert_eq!(r.dropped, 1);
        assert_eq!(r.counts.iter().sum::<usize>(), 3);
    }

    #[test]
    fn point_csv() {
        let p = read_points_csv("x,y,value\n1.5,2,3\n0,0,-1\n").unwrap();
        assert_eq!(p, vec![Point { x: 1.5, y: 2.0, value: 3.0 }, Point { x: 0.0, y: 0.0, value: -1.0 }]);
        assert!(read_points_csv("a,b,c\n1,2,3\n").is_err());
    }

    #[test]
    fn landcover_order() {
        let g = Grid::new(geom(1, 4), 1, vec![11.0, 95.0, 99.0, 41.0]).unwrap();
        let (oh, unknown) = onehot_landcover(&g).unwrap();
        assert_eq!(unknown, 1);
        assert_eq!(oh.channels, 15);
        assert_eq!(oh.get(0, 0, 0), 1.0);
        assert_eq!(oh.get(14, 0, 1), 1.0);
        assert!((0..15).all(|c| oh.get(c, 0, 2) == 0.0));
        assert_eq!(oh.get(6, 0, 3), 1.0);
    }

    #[test]
    fn split_size_rules() {
        let r = [0.6, 0.2, 0.2];
        assert_eq!(split_sizes(10, &r).unwrap(), [6, 2, 2]);
        assert_eq!(split_sizes(11, &r).unwrap(), [7, 2, 2]);
        assert_eq!(split_sizes(1000, &r).unwrap(), [600, 200, 200]);
        assert!(split_sizes(2, &r).is_err());
        assert_eq!(split_indices(50, &r, 3).unwrap(), split_indices(50, &r, 3).unwrap());
    }

    #[test]
    fn extraction_geometry() {
        let g = geom(7, 7);
        let t = Grid::new(g, 1, (0..49).map(f64::from).collect()).unwrap();
        let x = Grid::filled(g, 2, 1.0).unwrap();
        let y = Grid::filled(g, 1, 0.5).unwrap();
        let ds = extract_units_from(&[t.clone()], &x, &y, 5, Boundary::Exclude, vec!["t".into()]).unwrap();
        assert_eq!(ds.n(), 9);
        assert_eq!(ds.cells.as_ref().unwrap()[0], (2, 2));
        assert_eq!(ds.coord(0), &[2.5, 2.5]);
        let p = ds.patch(0, 0);
        assert_eq!(p[ds.patch_center()], 0.0);
        assert_eq!(p[0], 0.0);
        assert_eq!(p[24], t.get(0, 4, 4));
        assert_eq!(p[1], 1.0);
        assert!(extract_units_from(&[t], &x, &y, 9, Boundary::Exclude, vec!["t".into()]).is_err());
    }

    #[test]
    fn manifest_roundtrip() {
        let text = "confounder = \"x.grd\"\noutcome = \"y.grd\"\nd_s = 25\n\n[treatment]\n1 = \"t.grd\"\n\n[split]\nseed = 4\nratios = [0.6, 0.2, 0.2]\n";
        let m = Manifest::from_toml(text).unwrap();
        assert_eq!(m.d_s, 25);
        assert_eq!(m.boundary, Boundary::Exclude);
        assert_eq!(Manifest::from_toml(&m.to_toml().unwrap()).unwrap(), m);
        let err = Manifest::from_toml(&text.replace("d_s = 25", "d_s = 24")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = Manifest::from_toml(&format!("{text}bogus = 1\n")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
