//! Scalar and vector samples on a regular periodic grid over the unit box,
//! with wrapped indexing, multilinear interpolation and CSV I/O.

use nalgebra::DVector;

use crate::{Error, Result};

/// `resolution` nodes per axis over [0,1)^dim; values stored row-major over
/// node multi-indices, `comps` components per node (1 for scalars).
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    resolution: usize,
    dim: usize,
    comps: usize,
    values: Vec<f64>,
}

impl GridField {
    pub fn zeros(resolution: usize, dim: usize, comps: usize) -> Self {
        GridField {
            resolution,
            dim,
            comps,
            values: vec![0.0; resolution.pow(dim as u32) * comps],
        }
    }

    /// Samples a function of the node coordinate into a scalar field.
    pub fn sample_scalar(
        resolution: usize,
        dim: usize,
        mut f: impl FnMut(&DVector<f64>) -> f64,
    ) -> Self {
        let mut field = GridField::zeros(resolution, dim, 1);
        for node in 0..field.node_count() {
            let x = field.coord(node);
            field.values[node] = f(&x);
        }
        field
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn comps(&self) -> usize {
        self.comps
    }

    pub fn node_count(&self) -> usize {
        self.resolution.pow(self.dim as u32)
    }

    /// Grid spacing 1/N.
    pub fn spacing(&self) -> f64 {
        1.0 / self.resolution as f64
    }

    /// Volume of one cell.
    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Flat index of a (wrapped) multi-index.
    pub fn flat(&self, idx: &[i64]) -> usize {
        let n = self.resolution as i64;
        let mut acc = 0usize;
        for &i in idx {
            acc = acc * self.resolution + (i.rem_euclid(n)) as usize;
        }
        acc
    }

    pub fn multi_index(&self, mut node: usize) -> Vec<i64> {
        let mut idx = vec![0i64; self.dim];
        for a in (0..self.dim).rev() {
            idx[a] = (node % self.resolution) as i64;
            node /= self.resolution;
        }
        idx
    }

    /// Coordinate of a node.
    pub fn coord(&self, node: usize) -> DVector<f64> {
        let idx = self.multi_index(node);
        DVector::from_fn(self.dim, |a, _| idx[a] as f64 * self.spacing())
    }

    pub fn get(&self, node: usize, comp: usize) -> f64 {
        self.values[node * self.comps + comp]
    }

    pub fn set(&mut self, node: usize, comp: usize, v: f64) {
        self.values[node * self.comps + comp] = v;
    }

    /// Neighbor of `node` shifted by `offset` along `axis`, with wrap.
    pub fn neighbor(&self, node: usize, axis: usize, offset: i64) -> usize {
        let mut idx = self.multi_index(node);
        idx[axis] += offset;
        self.flat(&idx)
    }

    /// Periodic multilinear interpolation of component `comp` at `x`
    /// (coordinates in units of the box, any real values).
    pub fn interp(&self, x: &DVector<f64>, comp: usize) -> f64 {
        let n = self.resolution as f64;
        let d = self.dim;
        let mut base = vec![0i64; d];
        let mut frac = vec![0.0; d];
        for a in 0..d {
            let s = x[a] * n;
            let f = s.floor();
            base[a] = f as i64;
            frac[a] = s - f;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut idx = base.clone();
            let mut w = 1.0;
            for a in 0..d {
                if corner & (1 << a) != 0 {
                    idx[a] += 1;
                    w *= frac[a];
                } else {
                    w *= 1.0 - frac[a];
                }
            }
            acc += w * self.get(self.flat(&idx), comp);
        }
        acc
    }

    /// Total of value × cell volume (the mass, for densities).
    pub fn integral(&self, comp: usize) -> f64 {
        let cell = self.cell_volume();
        (0..self.node_count()).map(|i| self.get(i, comp)).sum::<f64>() * cell
    }

    /// Diagnostic resampling of a deformed particle cloud onto this grid's
    /// nodes: each particle's mass parcel is split among its 2^d
    /// neighboring nodes with periodic multilinear weights, and the
    /// accumulated mass is divided back by the cell volume. Conserves total
    /// mass; smears features at the grid scale, so it is for inspection
    /// only, not for error measurement.
    pub fn scatter_density(
        resolution: usize,
        dim: usize,
        positions: &[DVector<f64>],
        masses: &[f64],
    ) -> Self {
        let mut grid = GridField::zeros(resolution, dim, 1);
        let n = resolution as f64;
        for (pos, &mass) in positions.iter().zip(masses) {
            let mut base = vec![0i64; dim];
            let mut frac = vec![0.0; dim];
            for a in 0..dim {
                let s = pos[a] * n;
                let f = s.floor();
                base[a] = f as i64;
                frac[a] = s - f;
            }
            for corner in 0..(1usize << dim) {
                let mut idx = base.clone();
                let mut w = 1.0;
                for a in 0..dim {
                    if corner & (1 << a) != 0 {
                        idx[a] += 1;
                        w *= frac[a];
                    } else {
                        w *= 1.0 - frac[a];
                    }
                }
                let node = grid.flat(&idx);
                grid.values[node] += w * mass;
            }
        }
        let cell = grid.cell_volume();
        for v in grid.values.iter_mut() {
            *v /= cell;
        }
        grid
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Row-major CSV with a one-line header.
    pub fn to_csv(&self) -> String {
        let mut out = format!("N={},d={},domain=torus\n", self.resolution, self.dim);
        for node in 0..self.node_count() {
            for c in 0..self.comps {
                if c > 0 {
                    out.push(',');
                }
                out.push_str(&format!("{}", self.get(node, c)));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidInput("empty grid file".into()))?;
        let mut resolution = None;
        let mut dim = None;
        for part in header.split(',') {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidInput(format!("bad header field {part:?}")))?;
            match key.trim() {
                "N" => resolution = Some(value.trim().parse::<usize>().map_err(|e| {
                    Error::InvalidInput(format!("bad N: {e}"))
                })?),
                "d" => dim = Some(value.trim().parse::<usize>().map_err(|e| {
                    Error::InvalidInput(format!("bad d: {e}"))
                })?),
                "domain" => {}
                other => return Err(Error::InvalidInput(format!("unknown header key {other:?}"))),
            }
        }
        let resolution =
            resolution.ok_or_else(|| Error::InvalidInput("header missing N".into()))?;
        let dim = dim.ok_or_else(|| Error::InvalidInput("header missing d".into()))?;
        let mut rows = Vec::new();
        let mut comps = None;
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidInput(format!("bad value: {e}")))?;
            match comps {
                None => comps = Some(row.len()),
                Some(c) if c != row.len() => {
                    return Err(Error::InvalidInput("ragged grid rows".into()))
                }
                _ => {}
            }
            rows.push(row);
        }
        let comps = comps.ok_or_else(|| Error::InvalidInput("grid file has no values".into()))?;
        if rows.len() != resolution.pow(dim as u32) {
            return Err(Error::InvalidInput(format!(
                "expected {} nodes, found {}",
                resolution.pow(dim as u32),
                rows.len()
            )));
        }
        Ok(GridField {
            resolution,
            dim,
            comps,
            values: rows.into_iter().flatten().collect(),
        })
    }
}
