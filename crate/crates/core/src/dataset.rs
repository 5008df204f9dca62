use crate::error::{data_err, dim_err, Result};

/// Units with treatments, neighbourhood patches, confounders and outcomes,
/// stored column-wise.
///
/// `patches[m]` holds one `patch_rows × patch_cols` window of treatment `m`
/// per unit, row-major, with the unit's own pixel zeroed.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialDataset {
    pub coord_dim: usize,
    pub coords: Vec<f64>,
    pub m: usize,
    pub t: Vec<f64>,
    pub patch_rows: usize,
    pub patch_cols: usize,
    pub patches: Vec<Vec<f64>>,
    pub x_dim: usize,
    pub x: Vec<f64>,
    pub y: Vec<Option<f64>>,
    pub treatment_names: Vec<String>,
    /// Source pixel `(row, col)` of each unit when extracted from a grid.
    pub cells: Option<Vec<(usize, usize)>>,
}

impl SpatialDataset {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn patch_len(&self) -> usize {
        self.patch_rows * self.patch_cols
    }

    /// Index of the own-unit pixel inside a patch.
    pub fn patch_center(&self) -> usize {
        (self.patch_rows / 2) * self.patch_cols + self.patch_cols / 2
    }

    pub fn coord(&self, i: usize) -> &[f64] {
        &self.coords[i * self.coord_dim..(i + 1) * self.coord_dim]
    }

    pub fn treatment(&self, i: usize, m: usize) -> f64 {
        self.t[i * self.m + m]
    }

    /// Column of treatment `m` over all units.
    pub fn treatment_column(&self, m: usize) -> Vec<f64> {
        (0..self.n()).map(|i| self.treatment(i, m)).collect()
    }

    pub fn patch(&self, m: usize, i: usize) -> &[f64] {
        let k = self.patch_len();
        &self.patches[m][i * k..(i + 1) * k]
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.x_dim..(i + 1) * self.x_dim]
    }

    pub fn observed(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.y[i].is_some()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if n == 0 {
            return Err(data_err!("dataset has no units"));
        }
        let checks = [
            ("coords", self.coords.len(), n * self.coord_dim),
            ("t", self.t.len(), n * self.m),
            ("x", self.x.len(), n * self.x_dim),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(dim_err!("{name} holds {got} values, expected {want}"));
            }
        }
        if self.m == 0 || self.coord_dim == 0 || self.patch_len() == 0 {
            return Err(dim_err!("dataset needs M, coordinate dimension and patch size >= 1"));
        }
        if self.patches.len() != self.m || self.patches.iter().any(|p| p.len() != n * self.patch_len()) {
            return Err(dim_err!("expected {} patch blocks of {} values", self.m, n * self.patch_len()));
        }
        if self.treatment_names.len() != self.m {
            return Err(dim_err!("{} treatment names for M = {}", self.treatment_names.len(), self.m));
        }
        if let Some(c) = &self.cells {
            if c.len() != n {
                return Err(dim_err!("{} cell indices for {n} units", c.len()));
            }
        }
        Ok(())
    }

    /// New dataset holding `idx` in the given order.
    pub fn subset(&self, idx: &[usize]) -> SpatialDataset {
        let k = self.patch_len();
        let pick = |src: &[f64], w: usize| -> Vec<f64> {
            idx.iter().flat_map(|&i| src[i * w..(i + 1) * w].iter().copied()).collect()
        };
        SpatialDataset {
            coord_dim: self.coord_dim,
            coords: pick(&self.coords, self.coord_dim),
            m: self.m,
            t: pick(&self.t, self.m),
            patch_rows: self.patch_rows,
            patch_cols: self.patch_cols,
            patches: self.patches.iter().map(|p| pick(p, k)).collect(),
            x_dim: self.x_dim,
            x: pick(&self.x, self.x_dim),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            treatment_names: self.treatment_names.clone(),
            cells: self.cells.as_ref().map(|c| idx.iter().map(|&i| c[i]).collect()),
        }
    }
}
