//! Pillar feature encoder: grid discretization, 9-dim point augmentation,
//! the simplified PointNet (linear + batch norm + ReLU + max over points)
//! and scatter back to a dense pseudo-image.

use std::collections::{BTreeMap, HashSet};

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::geometry::{LidarPoint, PointCloud};
use crate::rng::{derive_seed, mix64, SeededRng};
use crate::tensor::PseudoImage;

/// Width of an augmented point vector.
pub const POINT_DIM: usize = 9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PillarError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("omega must be at least 1")]
    ZeroOmega,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("pillar index ({row}, {col}) outside {height}x{width} grid")]
    IndexOutOfRange { row: usize, col: usize, height: usize, width: usize },
    #[error("duplicate pillar index ({0}, {1})")]
    DuplicateIndex(usize, usize),
    #[error("batch-norm variance must be positive (channel {0})")]
    Variance(usize),
}

/// Detection rectangle, height span and pillar size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PillarGrid {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    pub l_x: f64,
    pub l_y: f64,
    pub l_z: f64,
    width: usize,
    height: usize,
}

impl Default for PillarGrid {
    /// 80.64 m x 71.68 m centered on the sensor, 0.56 m pillars, z in [-3, 1].
    fn default() -> Self {
        Self::new((-40.32, 40.32), (-35.84, 35.84), (-3.0, 1.0), 0.56, 0.56, 4.0)
            .expect("default grid is valid")
    }
}

impl PillarGrid {
    pub fn new(
        x_range: (f64, f64),
        y_range: (f64, f64),
        z_range: (f64, f64),
        l_x: f64,
        l_y: f64,
        l_z: f64,
    ) -> Result<Self, PillarError> {
        let cells = |lo: f64, hi: f64, step: f64, axis: &str| -> Result<usize, PillarError> {
            if !(step > 0.0 && hi > lo) {
                return Err(PillarError::Grid(format!("{axis}: empty range or non-positive pillar size")));
            }
            let n = (hi - lo) / step;
            let rounded = n.round();
            if (n - rounded).abs() * step > 1e-6 || rounded < 1.0 {
                return Err(PillarError::Grid(format!(
                    "{axis}: span {} is not a multiple of pillar size {step}",
                    hi - lo
                )));
            }
            Ok(rounded as usize)
        };
        let width = cells(x_range.0, x_range.1, l_x, "x")?;
        let height = cells(y_range.0, y_range.1, l_y, "y")?;
        if !(z_range.1 > z_range.0 && l_z > 0.0) {
            return Err(PillarError::Grid("z: empty range".into()));
        }
        Ok(Self { x_range, y_range, z_range, l_x, l_y, l_z, width, height })
    }

    /// Number of columns (x direction).
    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of rows (y direction).
    pub fn height(&self) -> usize {
        self.height
    }

    /// Grid cell containing the point, or `None` when it falls outside the
    /// detection rectangle or the height span (upper bounds exclusive).
    pub fn cell_of(&self, x: f64, y: f64, z: f64) -> Option<(usize, usize)> {
        if !(x >= self.x_range.0 && x < self.x_range.1) {
            return None;
        }
        if !(y >= self.y_range.0 && y < self.y_range.1) {
            return None;
        }
        if !(z >= self.z_range.0 && z < self.z_range.1) {
            return None;
        }
        let col = (((x - self.x_range.0) / self.l_x) as usize).min(self.width - 1);
        let row = (((y - self.y_range.0) / self.l_y) as usize).min(self.height - 1);
        Some((row, col))
    }

    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        [
            self.x_range.0 + (col as f64 + 0.5) * self.l_x,
            self.y_range.0 + (row as f64 + 0.5) * self.l_y,
        ]
    }
}

/// One non-empty grid cell with exactly `omega` augmented rows; rows past
/// `count` are zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Pillar {
    pub row: usize,
    pub col: usize,
    pub points: Vec<[f64; POINT_DIM]>,
    pub count: usize,
}

/// `(x, y, z, r, x - mean_x, y - mean_y, z - mean_z, x - center_x, y - center_y)`.
pub fn augment_point(p: &LidarPoint, mean: [f64; 3], center_xy: [f64; 2]) -> [f64; POINT_DIM] {
    [
        p.x,
        p.y,
        p.z,
        p.r,
        p.x - mean[0],
        p.y - mean[1],
        p.z - mean[2],
        p.x - center_xy[0],
        p.y - center_xy[1],
    ]
}

fn content_key(p: &LidarPoint) -> (u64, [u64; 4]) {
    let bits = [p.x.to_bits(), p.y.to_bits(), p.z.to_bits(), p.r.to_bits()];
    let h = bits.iter().fold(0x5EED_u64, |acc, &b| mix64(acc ^ b));
    (h, bits)
}

/// Bins the cloud into pillars, sorted by `(row, col)`.
///
/// Cells holding more than `omega` points are down-sampled uniformly at
/// random. Candidates are first ordered by a content hash, and each cell's
/// draw uses its own sub-stream of `seed`, so the result does not depend on
/// input order or on any other cell.
pub fn pillarize(cloud: &PointCloud, grid: &PillarGrid, omega: usize, seed: u64) -> Result<Vec<Pillar>, PillarError> {
    if omega == 0 {
        return Err(PillarError::ZeroOmega);
    }
    let mut cells: BTreeMap<(usize, usize), Vec<LidarPoint>> = BTreeMap::new();
    for p in &cloud.points {
        if let Some(cell) = grid.cell_of(p.x, p.y, p.z) {
            cells.entry(cell).or_default().push(*p);
        }
    }
    let mut out = Vec::with_capacity(cells.len());
    for ((row, col), mut pts) in cells {
        pts.sort_by_key(content_key);
        if pts.len() > omega {
            let cell_index = (row * grid.width() + col) as u64;
            let mut rng = SeededRng::new(derive_seed(seed, "pillar", cell_index));
            // partial Fisher-Yates
            for i in 0..omega {
                let j = i + rng.index(pts.len() - i);
                pts.swap(i, j);
            }
            pts.truncate(omega);
        }
        let n = pts.len() as f64;
        let mut mean = [0.0; 3];
        for p in &pts {
            mean[0] += p.x / n;
            mean[1] += p.y / n;
            mean[2] += p.z / n;
        }
        let center = grid.cell_center(row, col);
        let mut rows: Vec<[f64; POINT_DIM]> = pts.iter().map(|p| augment_point(p, mean, center)).collect();
        let count = rows.len();
        rows.resize(omega, [0.0; POINT_DIM]);
        out.push(Pillar { row, col, points: rows, count });
    }
    Ok(out)
}

/// Linear layer plus inference-mode batch norm statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct SPointNetWeights {
    /// `C x D`
    pub linear: Array2<f64>,
    pub bias: Array1<f64>,
    pub bn_scale: Array1<f64>,
    pub bn_shift: Array1<f64>,
    pub bn_mean: Array1<f64>,
    pub bn_var: Array1<f64>,
}

impl SPointNetWeights {
    /// Uniform `+-1/sqrt(D)` linear weights and bias from a SeededRng
    /// stream; batch norm fixed to mean 0, variance 1, unit scale, zero shift.
    pub fn seeded(channels: usize, seed: u64) -> Self {
        let mut rng = SeededRng::new(derive_seed(seed, "spointnet", 0));
        let bound = 1.0 / (POINT_DIM as f64).sqrt();
        let linear = Array2::from_shape_fn((channels, POINT_DIM), |_| rng.uniform(-bound, bound));
        let bias = Array1::from_shape_fn(channels, |_| rng.uniform(-bound, bound));
        Self {
            linear,
            bias,
            bn_scale: Array1::ones(channels),
            bn_shift: Array1::zeros(channels),
            bn_mean: Array1::zeros(channels),
            bn_var: Array1::ones(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.linear.nrows()
    }

    fn validate(&self) -> Result<(), PillarError> {
        let c = self.linear.nrows();
        if self.linear.ncols() != POINT_DIM {
            return Err(PillarError::Dimension(format!(
                "linear layer has {} input columns, expected {POINT_DIM}",
                self.linear.ncols()
            )));
        }
        for (name, v) in [
            ("bias", &self.bias),
            ("bn_scale", &self.bn_scale),
            ("bn_shift", &self.bn_shift),
            ("bn_mean", &self.bn_mean),
            ("bn_var", &self.bn_var),
        ] {
            if v.len() != c {
                return Err(PillarError::Dimension(format!("{name} has length {}, expected {c}", v.len())));
            }
        }
        if let Some(k) = self.bn_var.iter().position(|&v| !(v > 0.0)) {
            return Err(PillarError::Variance(k));
        }
        Ok(())
    }

    #[inline]
    fn activate(&self, ch: usize, pre: f64) -> f64 {
        let bn = self.bn_scale[ch] * (pre - self.bn_mean[ch]) / self.bn_var[ch].sqrt() + self.bn_shift[ch];
        bn.max(0.0)
    }
}

/// Per-pillar linear + BN + ReLU on every row, then max over the `omega`
/// rows. Padding rows take part in the max; their activation is
/// `ReLU(BN(bias))`. Returns a `C x Q` matrix.
pub fn spointnet_forward(pillars: &[Pillar], weights: &SPointNetWeights) -> Result<Array2<f32>, PillarError> {
    weights.validate()?;
    let c = weights.channels();
    let mut out = Array2::<f32>::zeros((c, pillars.len()));
    for (q, pillar) in pillars.iter().enumerate() {
        if pillar.count > pillar.points.len() {
            return Err(PillarError::Dimension(format!(
                "pillar count {} exceeds its {} rows",
                pillar.count,
                pillar.points.len()
            )));
        }
        let padded = pillar.count < pillar.points.len();
        for ch in 0..c {
            let w = weights.linear.row(ch);
            let mut best = if padded { weights.activate(ch, weights.bias[ch]) } else { f64::NEG_INFINITY };
            for row in &pillar.points[..pillar.count] {
                let mut pre = weights.bias[ch];
                for d in 0..POINT_DIM {
                    pre += w[d] * row[d];
                }
                best = best.max(weights.activate(ch, pre));
            }
            out[[ch, q]] = best as f32;
        }
    }
    Ok(out)
}

/// Writes column `q` of `features` to its grid cell; everything else is 0.
pub fn scatter(features: &Array2<f32>, indices: &[(usize, usize)], grid: &PillarGrid) -> Result<PseudoImage, PillarError> {
    if features.ncols() != indices.len() {
        return Err(PillarError::Dimension(format!(
            "{} feature columns for {} pillar indices",
            features.ncols(),
            indices.len()
        )));
    }
    let (h, w) = (grid.height(), grid.width());
    let mut img = PseudoImage::zeros(features.nrows(), h, w);
    let mut seen = HashSet::with_capacity(indices.len());
    for (q, &(row, col)) in indices.iter().enumerate() {
        if row >= h || col >= w {
            return Err(PillarError::IndexOutOfRange { row, col, height: h, width: w });
        }
        if !seen.insert((row, col)) {
            return Err(PillarError::DuplicateIndex(row, col));
        }
        for ch in 0..features.nrows() {
            img.data[[ch, row, col]] = features[[ch, q]];
        }
    }
    Ok(img)
}

/// The full point-cloud-to-pseudo-image encoder of one agent.
#[derive(Debug, Clone)]
pub struct PillarEncoder {
    pub grid: PillarGrid,
    pub omega: usize,
    pub weights: SPointNetWeights,
}

impl PillarEncoder {
    pub fn new(grid: PillarGrid, omega: usize, weights: SPointNetWeights) -> Self {
        Self { grid, omega, weights }
    }

    pub fn encode(&self, cloud: &PointCloud, seed: u64) -> Result<PseudoImage, PillarError> {
        let pillars = pillarize(cloud, &self.grid, self.omega, seed)?;
        let feats = spointnet_forward(&pillars, &self.weights)?;
        let idx: Vec<(usize, usize)> = pillars.iter().map(|p| (p.row, p.col)).collect();
        scatter(&feats, &idx, &self.grid)
    }
}
