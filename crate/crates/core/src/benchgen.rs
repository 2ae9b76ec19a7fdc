//! Semi-synthetic cost surfaces from gridded cost observations: fill
//! missing cells, smooth, spline, and resample with noise per run.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::params::{ControllerParams, UM_PER_PX};
use crate::search::BoxSearch;
use crate::sim::PlantSpec;
use crate::velocity::cost_from_speed;
use crate::{seed, Error, Result};

pub const COST_FLOOR: f64 = 1e-3;
pub const DEFAULT_OBSERVED_CELLS: usize = 56;
pub const DEFAULT_SURFACE_NOISE: f64 = 0.1;

pub fn default_wavelength_axis() -> Vec<f64> {
    (0..13).map(|i| 200.0 + 50.0 * i as f64).collect()
}

pub fn default_duty_axis() -> Vec<f64> {
    (0..7).map(|j| 20.0 + 5.0 * j as f64).collect()
}

/// Cost observations on a wavelength (px) × duty (%) lattice. Cells are
/// stored wavelength-major: index `i * ny + j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridData {
    pub wavelength_px: Vec<f64>,
    pub duty_pct: Vec<f64>,
    pub cells: Vec<Option<f64>>,
}

/// A grid without missing cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompleteGrid {
    pub wavelength_px: Vec<f64>,
    pub duty_pct: Vec<f64>,
    pub values: Vec<f64>,
}

fn check_axis(name: &str, axis: &[f64]) -> Result<()> {
    if axis.len() < 2 {
        return Err(Error::Domain(format!("{name} axis needs at least two points")));
    }
    if axis.iter().any(|v| !v.is_finite()) || axis.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Domain(format!("{name} axis must be finite and strictly increasing")));
    }
    Ok(())
}

impl GridData {
    pub fn new(wavelength_px: Vec<f64>, duty_pct: Vec<f64>, cells: Vec<Option<f64>>) -> Result<Self> {
        let g = Self {
            wavelength_px,
            duty_pct,
            cells,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn nx(&self) -> usize {
        self.wavelength_px.len()
    }

    pub fn ny(&self) -> usize {
        self.duty_pct.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.cells[i * self.ny() + j]
    }

    pub fn observed(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    pub fn validate(&self) -> Result<()> {
        check_axis("wavelength", &self.wavelength_px)?;
        check_axis("duty", &self.duty_pct)?;
        if self.cells.len() != self.nx() * self.ny() {
            return Err(Error::Domain("cell count does not match the axes".into()));
        }
        if self.cells.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Domain("grid contains non-finite costs".into()));
        }
        if 2 * self.observed() < self.cells.len() {
            return Err(Error::InsufficientData(format!(
                "only {} of {} cells observed, need at least half",
                self.observed(),
                self.cells.len()
            )));
        }
        Ok(())
    }

    pub fn transpose(&self) -> Self {
        let (nx, ny) = (self.nx(), self.ny());
        Self {
            wavelength_px: self.duty_pct.clone(),
            duty_pct: self.wavelength_px.clone(),
            cells: (0..ny * nx).map(|k| self.cells[(k % nx) * ny + k / nx]).collect(),
        }
    }

    /// CSV with one row per observed cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("wavelength_px,duty_pct,cost\n");
        for (i, wl) in self.wavelength_px.iter().enumerate() {
            for (j, d) in self.duty_pct.iter().enumerate() {
                if let Some(c) = self.get(i, j) {
                    writeln!(out, "{wl},{d},{c}").unwrap();
                }
            }
        }
        out
    }

    /// Reads observed cells onto the given axes; absent cells are missing.
    pub fn from_csv(text: &str, wavelength_px: Vec<f64>, duty_pct: Vec<f64>) -> Result<Self> {
        check_axis("wavelength", &wavelength_px)?;
        check_axis("duty", &duty_pct)?;
        let ny = duty_pct.len();
        let mut cells = vec![None; wavelength_px.len() * ny];
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
        match lines.next() {
            Some((_, h)) if h.split(',').map(str::trim).eq(["wavelength_px", "duty_pct", "cost"]) => {}
            _ => return Err(Error::Parse("expected header 'wavelength_px,duty_pct,cost'".into())),
        }
        let find = |axis: &[f64], v: f64| axis.iter().position(|a| (a - v).abs() <= 1e-9 * a.abs().max(1.0));
        for (n, line) in lines {
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 3 {
                return Err(Error::Parse(format!("line {}: expected three columns", n + 1)));
            }
            let nums: Vec<f64> = cols
                .iter()
                .map(|c| c.parse::<f64>().map_err(|e| Error::Parse(format!("line {}: {e}", n + 1))))
                .collect::<Result<_>>()?;
            let (Some(i), Some(j)) = (find(&wavelength_px, nums[0]), find(&duty_pct, nums[1])) else {
                return Err(Error::Parse(format!("line {}: ({}, {}) is not a grid node", n + 1, nums[0], nums[1])));
            };
            if cells[i * ny + j].replace(nums[2]).is_some() {
                return Err(Error::Parse(format!("line {}: duplicate cell", n + 1)));
            }
        }
        Self::new(wavelength_px, duty_pct, cells)
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        hash_axes(&mut h, &self.wavelength_px, &self.duty_pct);
        for c in &self.cells {
            match c {
                Some(v) => {
                    h.update([1u8]);
                    h.update(v.to_le_bytes());
                }
                None => h.update([0u8]),
            }
        }
        hex::encode(h.finalize())
    }
}

fn hash_axes(h: &mut Sha256, a: &[f64], b: &[f64]) {
    for axis in [a, b] {
        h.update((axis.len() as u64).to_le_bytes());
        for v in axis {
            h.update(v.to_le_bytes());
        }
    }
}

impl CompleteGrid {
    pub fn nx(&self) -> usize {
        self.wavelength_px.len()
    }

    pub fn ny(&self) -> usize {
        self.duty_pct.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.ny() + j]
    }

    pub fn transpose(&self) -> Self {
        let (nx, ny) = (self.nx(), self.ny());
        Self {
            wavelength_px: self.duty_pct.clone(),
            duty_pct: self.wavelength_px.clone(),
            values: (0..ny * nx).map(|k| self.values[(k % nx) * ny + k / nx]).collect(),
        }
    }

    /// Cell indices `(i, j)` sorted by increasing value.
    pub fn lowest_cells(&self, k: usize) -> Vec<(usize, usize)> {
        let mut idx: Vec<usize> = (0..self.values.len()).collect();
        idx.sort_by(|&a, &b| self.values[a].total_cmp(&self.values[b]));
        idx.into_iter().take(k).map(|n| (n / self.ny(), n % self.ny())).collect()
    }

    /// Grid node nearest to `theta` in normalised axis units.
    pub fn containing_cell(&self, theta: &ControllerParams) -> (usize, usize) {
        let nearest = |axis: &[f64], v: f64| {
            axis.iter()
                .enumerate()
                .min_by(|a, b| (a.1 - v).abs().total_cmp(&(b.1 - v).abs()))
                .map(|(i, _)| i)
                .unwrap()
        };
        (
            nearest(&self.wavelength_px, theta.wavelength_px()),
            nearest(&self.duty_pct, theta.duty_cycle_pct),
        )
    }
}

/// Fills missing cells. Each missing cell takes the mean of the available
/// two-sided linear interpolations along its row and column; cells with
/// none take the mean of the nearest observed cells along both axes.
pub fn fill_missing(g: &GridData) -> Result<CompleteGrid> {
    g.validate()?;
    let (nx, ny) = (g.nx(), g.ny());
    let mut values = Vec::with_capacity(nx * ny);
    for i in 0..nx {
        for j in 0..ny {
            if let Some(v) = g.get(i, j) {
                values.push(v);
                continue;
            }
            let row: Vec<Option<f64>> = (0..nx).map(|k| g.get(k, j)).collect();
            let col: Vec<Option<f64>> = (0..ny).map(|k| g.get(i, k)).collect();
            let lines = [(&row, &g.wavelength_px, i), (&col, &g.duty_pct, j)];
            let interp: Vec<f64> = lines
                .iter()
                .filter_map(|(line, axis, at)| interpolate(line, axis, *at))
                .collect();
            let v = if !interp.is_empty() {
                mean(&interp)
            } else {
                let near: Vec<(usize, f64)> = lines.iter().flat_map(|(line, _, at)| nearest(line, *at)).collect();
                let Some(dmin) = near.iter().map(|n| n.0).min() else {
                    return Err(Error::Fill(format!(
                        "cell ({}, {}) has no observed cell in its row or column",
                        g.wavelength_px[i], g.duty_pct[j]
                    )));
                };
                let ties: Vec<f64> = near.iter().filter(|n| n.0 == dmin).map(|n| n.1).collect();
                mean(&ties)
            };
            values.push(v);
        }
    }
    Ok(CompleteGrid {
        wavelength_px: g.wavelength_px.clone(),
        duty_pct: g.duty_pct.clone(),
        values,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn interpolate(line: &[Option<f64>], axis: &[f64], at: usize) -> Option<f64> {
    let lo = (0..at).rev().find_map(|k| line[k].map(|v| (k, v)))?;
    let hi = (at + 1..line.len()).find_map(|k| line[k].map(|v| (k, v)))?;
    let w = (axis[at] - axis[lo.0]) / (axis[hi.0] - axis[lo.0]);
    Some(lo.1 + w * (hi.1 - lo.1))
}

/// Nearest observed cells by index distance (both sides on a tie).
fn nearest(line: &[Option<f64>], at: usize) -> Vec<(usize, f64)> {
    let lo = (0..at).rev().find_map(|k| line[k].map(|v| (at - k, v)));
    let hi = (at + 1..line.len()).find_map(|k| line[k].map(|v| (k - at, v)));
    lo.into_iter().chain(hi).collect()
}

/// 3×3 mean filter; border windows shrink to the in-grid cells.
pub fn smooth(g: &CompleteGrid) -> CompleteGrid {
    let (nx, ny) = (g.nx(), g.ny());
    let mut values = Vec::with_capacity(nx * ny);
    for i in 0..nx {
        for j in 0..ny {
            let (mut sum, mut n) = (0.0, 0usize);
            for a in i.saturating_sub(1)..=(i + 1).min(nx - 1) {
                for b in j.saturating_sub(1)..=(j + 1).min(ny - 1) {
                    sum += g.get(a, b);
                    n += 1;
                }
            }
            values.push(sum / n as f64);
        }
    }
    CompleteGrid {
        wavelength_px: g.wavelength_px.clone(),
        duty_pct: g.duty_pct.clone(),
        values,
    }
}

/// Second derivatives of the natural cubic spline through `(x, y)`.
fn natural_second_derivatives(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut m = vec![0.0; n];
    if n < 3 {
        return m;
    }
    // Thomas algorithm on the interior equations.
    let k = n - 2;
    let mut diag = vec![0.0; k];
    let mut rhs = vec![0.0; k];
    let mut upper = vec![0.0; k];
    for r in 0..k {
        let i = r + 1;
        let h0 = x[i] - x[i - 1];
        let h1 = x[i + 1] - x[i];
        diag[r] = 2.0 * (h0 + h1);
        upper[r] = h1;
        rhs[r] = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
    }
    for r in 1..k {
        let lower = x[r + 1] - x[r];
        let w = lower / diag[r - 1];
        diag[r] -= w * upper[r - 1];
        rhs[r] -= w * rhs[r - 1];
    }
    m[k] = rhs[k - 1] / diag[k - 1];
    for r in (0..k - 1).rev() {
        m[r + 1] = (rhs[r] - upper[r] * m[r + 2]) / diag[r];
    }
    m
}

fn spline_eval(x: &[f64], y: &[f64], m: &[f64], v: f64) -> f64 {
    let n = x.len();
    let s = match x.partition_point(|&a| a <= v) {
        0 => 0,
        p => (p - 1).min(n - 2),
    };
    let h = x[s + 1] - x[s];
    let a = (x[s + 1] - v) / h;
    let b = (v - x[s]) / h;
    a * y[s] + b * y[s + 1] + ((a * a * a - a) * m[s] + (b * b * b - b) * m[s + 1]) * h * h / 6.0
}

/// Natural bicubic spline over a complete grid (tensor product of 1-D
/// natural splines).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BicubicSpline {
    grid: CompleteGrid,
    /// Per duty column: second derivatives along wavelength.
    col_m: Vec<Vec<f64>>,
    /// Maps duty-direction node values to their second derivatives.
    duty_op: Vec<Vec<f64>>,
}

impl BicubicSpline {
    pub fn new(grid: CompleteGrid) -> Self {
        let (nx, ny) = (grid.nx(), grid.ny());
        let col_m = (0..ny)
            .map(|j| {
                let y: Vec<f64> = (0..nx).map(|i| grid.get(i, j)).collect();
                natural_second_derivatives(&grid.wavelength_px, &y)
            })
            .collect();
        let duty_op = (0..ny)
            .map(|j| {
                let e: Vec<f64> = (0..ny).map(|k| if k == j { 1.0 } else { 0.0 }).collect();
                natural_second_derivatives(&grid.duty_pct, &e)
            })
            .collect();
        Self { grid, col_m, duty_op }
    }

    pub fn grid(&self) -> &CompleteGrid {
        &self.grid
    }

    /// Evaluates at wavelength (px) and duty (%), clamped to the grid.
    pub fn eval(&self, wavelength_px: f64, duty_pct: f64) -> f64 {
        let g = &self.grid;
        let (nx, ny) = (g.nx(), g.ny());
        let wl = wavelength_px.clamp(g.wavelength_px[0], g.wavelength_px[nx - 1]);
        let d = duty_pct.clamp(g.duty_pct[0], g.duty_pct[ny - 1]);
        let mut col = vec![0.0; nx];
        let along: Vec<f64> = (0..ny)
            .map(|j| {
                for (i, c) in col.iter_mut().enumerate() {
                    *c = g.get(i, j);
                }
                spline_eval(&g.wavelength_px, &col, &self.col_m[j], wl)
            })
            .collect();
        let mut m = vec![0.0; ny];
        for (j, op) in self.duty_op.iter().enumerate() {
            for (mk, o) in m.iter_mut().zip(op) {
                *mk += o * along[j];
            }
        }
        spline_eval(&g.duty_pct, &along, &m, d)
    }
}

/// Continuous cost function over the controller box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostSurface {
    spline: BicubicSpline,
    pub floor: f64,
    pub theta_opt: ControllerParams,
    pub j_opt: f64,
    pub seed: u64,
    pub noise_std: f64,
    pub source_hash: String,
    pub surface_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceManifest {
    pub wavelength_px: Vec<f64>,
    pub duty_pct: Vec<f64>,
    pub seed: u64,
    pub noise_std: f64,
    pub theta_opt: ControllerParams,
    pub j_opt: f64,
    pub floor: f64,
    pub source_hash: String,
    pub surface_hash: String,
}

impl CostSurface {
    /// Surface cost at a controller inside the box.
    pub fn eval(&self, theta: &ControllerParams) -> Result<f64> {
        if !theta.in_box() {
            return Err(Error::Domain(format!("controller {theta} outside the box")));
        }
        Ok(self.eval_unclamped(theta))
    }

    fn eval_unclamped(&self, theta: &ControllerParams) -> f64 {
        self.spline.eval(theta.wavelength_px(), theta.duty_cycle_pct).max(self.floor)
    }

    pub fn eval_unit(&self, u: [f64; 2]) -> f64 {
        self.eval_unclamped(&ControllerParams::from_unit(u))
    }

    /// Noisy node values the spline interpolates.
    pub fn nodes(&self) -> &CompleteGrid {
        self.spline.grid()
    }

    pub fn manifest(&self) -> SurfaceManifest {
        let g = self.nodes();
        SurfaceManifest {
            wavelength_px: g.wavelength_px.clone(),
            duty_pct: g.duty_pct.clone(),
            seed: self.seed,
            noise_std: self.noise_std,
            theta_opt: self.theta_opt,
            j_opt: self.j_opt,
            floor: self.floor,
            source_hash: self.source_hash.clone(),
            surface_hash: self.surface_hash.clone(),
        }
    }
}

/// Adds seeded Gaussian noise to a smoothed grid, splines it, and locates
/// its minimum.
pub fn build_surface(smoothed: &CompleteGrid, noise_std: f64, seed: u64) -> Result<CostSurface> {
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::Domain(format!("noise std must be non-negative, got {noise_std}")));
    }
    let lo = (smoothed.wavelength_px[0] * UM_PER_PX, smoothed.duty_pct[0]);
    let hi = (smoothed.wavelength_px[smoothed.nx() - 1] * UM_PER_PX, smoothed.duty_pct[smoothed.ny() - 1]);
    let covers = ControllerParams::new(lo.0, lo.1).is_ok_and(|p| p.to_unit() == [0.0, 0.0])
        && ControllerParams::new(hi.0, hi.1).is_ok_and(|p| (p.to_unit()[0] - 1.0).abs() < 1e-9 && p.to_unit()[1] == 1.0);
    if !covers {
        return Err(Error::Domain("grid axes must span the controller box".into()));
    }
    let mut source = Sha256::new();
    hash_axes(&mut source, &smoothed.wavelength_px, &smoothed.duty_pct);
    for v in &smoothed.values {
        source.update(v.to_le_bytes());
    }
    let source_hash = hex::encode(source.finalize());

    let mut rng = seed::rng(seed, &[seed::stream::SURFACE]);
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::Domain(e.to_string()))?;
    let values: Vec<f64> = smoothed
        .values
        .iter()
        .map(|v| if noise_std > 0.0 { v + noise.sample(&mut rng) } else { *v })
        .collect();
    let mut h = Sha256::new();
    hash_axes(&mut h, &smoothed.wavelength_px, &smoothed.duty_pct);
    for v in &values {
        h.update(v.to_le_bytes());
    }
    let surface_hash = hex::encode(h.finalize());

    let mut surface = CostSurface {
        spline: BicubicSpline::new(CompleteGrid {
            values,
            ..smoothed.clone()
        }),
        floor: COST_FLOOR,
        theta_opt: ControllerParams::from_unit([0.0, 0.0]),
        j_opt: f64::NAN,
        seed,
        noise_std,
        source_hash,
        surface_hash,
    };
    let (u, j) = BoxSearch::fine().minimize(|u| surface.eval_unit(u));
    surface.theta_opt = ControllerParams::from_unit(u);
    surface.j_opt = j;
    if j <= COST_FLOOR {
        return Err(Error::DegenerateSurface(format!("seed {seed}: optimum sits on the cost floor")));
    }
    Ok(surface)
}

/// Builds a surface, moving on to later attempts of the seed path when a
/// resample is degenerate. Returns the surface and the excluded seeds.
pub fn build_surface_resampling(
    smoothed: &CompleteGrid,
    noise_std: f64,
    seed: u64,
    max_attempts: usize,
) -> Result<(CostSurface, Vec<u64>)> {
    let mut excluded = Vec::new();
    for attempt in 0..max_attempts.max(1) as u64 {
        let s = if attempt == 0 { seed } else { seed::derive(seed, &[attempt]) };
        match build_surface(smoothed, noise_std, s) {
            Ok(surface) => return Ok((surface, excluded)),
            Err(Error::DegenerateSurface(_)) => excluded.push(s),
            Err(e) => return Err(e),
        }
    }
    Err(Error::DegenerateSurface(format!(
        "no usable surface after {} attempts from seed {seed}",
        max_attempts.max(1)
    )))
}

/// Relative excess cost of `theta_star` over the surface optimum.
pub fn normalized_regret(surface: &CostSurface, theta_star: &ControllerParams) -> Result<f64> {
    Ok((surface.eval(theta_star)? - surface.j_opt) / surface.j_opt)
}

/// Grid of plant costs with a seeded subset of cells observed. Every row
/// and column keeps at least two observations.
pub fn plant_source_grid(plant: &PlantSpec, v_star: f64, observed: usize, mask_seed: u64) -> Result<GridData> {
    let wl = default_wavelength_axis();
    let duty = default_duty_axis();
    let (nx, ny) = (wl.len(), duty.len());
    if observed > nx * ny || 2 * observed < nx * ny || observed < 2 * nx.max(ny) {
        return Err(Error::Domain(format!("cannot observe {observed} of {} cells", nx * ny)));
    }
    let mut full = Vec::with_capacity(nx * ny);
    for &w in &wl {
        for &d in &duty {
            let theta = ControllerParams::new(w * UM_PER_PX, d)?;
            full.push(cost_from_speed(plant.speed(&theta)?, v_star));
        }
    }
    let mut rng = seed::rng(mask_seed, &[seed::stream::MASK]);
    let mut order: Vec<usize> = (0..nx * ny).collect();
    for _ in 0..10_000 {
        order.shuffle(&mut rng);
        let keep = &order[..observed];
        let rows_ok = (0..nx).all(|i| keep.iter().filter(|&&k| k / ny == i).count() >= 2);
        let cols_ok = (0..ny).all(|j| keep.iter().filter(|&&k| k % ny == j).count() >= 2);
        if rows_ok && cols_ok {
            let mut cells = vec![None; nx * ny];
            for &k in keep {
                cells[k] = Some(full[k]);
            }
            return GridData::new(wl, duty, cells);
        }
    }
    Err(Error::Fill("could not draw a mask covering every row and column".into()))
}
