//! Finite-volume solver for `-div(exp(y) grad u) = h` on the unit square
//! with `u` prescribed on the left/right edges and zero normal flux on the
//! top/bottom edges, plus the sensor and noise models used to build
//! observations from its solutions.

use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::tensor::Tensor;

/// Solved pressure. Columns `0` and `W-1` hold the Dirichlet data exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct PressureField {
    pub values: Tensor,
    pub grid: Grid,
}

/// Symmetric positive definite system for the unknown (non-Dirichlet) nodes,
/// stored as a lower band. Unknown `(row, col)` with `1 <= col <= W-2` maps to
/// index `row * (W-2) + col - 1`.
#[derive(Clone, Debug)]
pub struct DarcySystem {
    pub n: usize,
    pub bandwidth: usize,
    /// `band[r * (bandwidth + 1) + k] = A[r][r - k]`.
    band: Vec<f64>,
    pub rhs: Vec<f64>,
    grid: Grid,
}

impl DarcySystem {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (r, c) = if r >= c { (r, c) } else { (c, r) };
        let k = r - c;
        if k > self.bandwidth {
            0.0
        } else {
            self.band[r * (self.bandwidth + 1) + k]
        }
    }

    fn add(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r >= c && r - c <= self.bandwidth);
        self.band[r * (self.bandwidth + 1) + (r - c)] += v;
    }

    /// Dense copy, row-major `n x n`.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.n];
        for r in 0..self.n {
            for c in 0..self.n {
                out[r * self.n + c] = self.get(r, c);
            }
        }
        out
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let b = self.bandwidth;
        let mut y = vec![0.0; self.n];
        for r in 0..self.n {
            for k in 0..=b.min(r) {
                let a = self.band[r * (b + 1) + k];
                if a == 0.0 {
                    continue;
                }
                let c = r - k;
                y[r] += a * x[c];
                if k > 0 {
                    y[c] += a * x[r];
                }
            }
        }
        y
    }

    /// Banded Cholesky solve with one step of iterative refinement.
    pub fn solve(&self) -> Result<Vec<f64>> {
        let (n, b) = (self.n, self.bandwidth);
        let w = b + 1;
        let mut l = self.band.clone();
        for j in 0..n {
            let mut d = l[j * w];
            for k in 1..=b.min(j) {
                d -= l[j * w + k].powi(2);
            }
            if d <= 0.0 || !d.is_finite() {
                return Err(Error::Numerical(format!(
                    "Darcy system is not positive definite at unknown {j} (pivot {d:e})"
                )));
            }
            let d = d.sqrt();
            l[j * w] = d;
            for i in j + 1..(j + w).min(n) {
                // L[i][j] = (A[i][j] - Σ_k L[i][k] L[j][k]) / L[j][j]
                let mut s = l[i * w + (i - j)];
                let lo = i.saturating_sub(b);
                for k in lo..j {
                    s -= l[i * w + (i - k)] * l[j * w + (j - k)];
                }
                l[i * w + (i - j)] = s / d;
            }
        }
        let chol_solve = |rhs: &[f64]| -> Vec<f64> {
            let mut y = rhs.to_vec();
            for i in 0..n {
                let lo = i.saturating_sub(b);
                let mut s = y[i];
                for k in lo..i {
                    s -= l[i * w + (i - k)] * y[k];
                }
                y[i] = s / l[i * w];
            }
            for i in (0..n).rev() {
                let mut s = y[i];
                for r in i + 1..(i + w).min(n) {
                    s -= l[r * w + (r - i)] * y[r];
                }
                y[i] = s / l[i * w];
            }
            y
        };
        let mut x = chol_solve(&self.rhs);
        let resid: Vec<f64> = self
            .rhs
            .iter()
            .zip(self.apply(&x))
            .map(|(b, ax)| b - ax)
            .collect();
        let corr = chol_solve(&resid);
        for (xi, ci) in x.iter_mut().zip(corr) {
            *xi += ci;
        }
        let rel = self.relative_residual(&x);
        if !(rel < 1e-10) {
            let diag_min = (0..n).map(|r| self.get(r, r)).fold(f64::INFINITY, f64::min);
            let diag_max = (0..n).map(|r| self.get(r, r)).fold(0.0, f64::max);
            return Err(Error::Numerical(format!(
                "Darcy solve residual {rel:e} exceeds 1e-10 (diagonal range {diag_min:e}..{diag_max:e})"
            )));
        }
        Ok(x)
    }

    pub fn relative_residual(&self, x: &[f64]) -> f64 {
        let ax = self.apply(x);
        let r: f64 = self
            .rhs
            .iter()
            .zip(&ax)
            .map(|(b, a)| (b - a).powi(2))
            .sum::<f64>()
            .sqrt();
        let nb: f64 = self.rhs.iter().map(|b| b * b).sum::<f64>().sqrt();
        if nb == 0.0 {
            r
        } else {
            r / nb
        }
    }
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Half-height of the control volume at boundary rows.
fn row_height(grid: &Grid, row: usize) -> f64 {
    if row == 0 || row + 1 == grid.height {
        0.5 * grid.dy()
    } else {
        grid.dy()
    }
}

fn check_field(log_perm: &Tensor, grid: &Grid) -> Result<()> {
    if log_perm.shape() != [grid.height, grid.width] {
        return Err(Error::shape(
            "darcy",
            format!(
                "log-permeability {:?} on a {}x{} grid",
                log_perm.shape(),
                grid.height,
                grid.width
            ),
        ));
    }
    if !log_perm.is_finite() {
        return Err(Error::invalid("log-permeability must be finite"));
    }
    Ok(())
}

/// Vertex-centred five-point discretization. Interface conductivities are
/// harmonic means of `exp(y)` at the two nodes.
pub fn assemble_system(
    log_perm: &Tensor,
    grid: &Grid,
    source: impl Fn(f64, f64) -> f64,
    left: f64,
    right: f64,
) -> Result<DarcySystem> {
    check_field(log_perm, grid)?;
    let (h, w) = (grid.height, grid.width);
    let inner = w - 2;
    let n = h * inner;
    let mut sys = DarcySystem {
        n,
        bandwidth: inner,
        band: vec![0.0; n * (inner + 1)],
        rhs: vec![0.0; n],
        grid: *grid,
    };
    let k: Vec<f64> = log_perm.data().iter().map(|y| y.exp()).collect();
    let (dx, dy) = (grid.dx(), grid.dy());
    let idx = |r: usize, c: usize| r * inner + c - 1;
    for r in 0..h {
        let hy = row_height(grid, r);
        for c in 1..w - 1 {
            let p = idx(r, c);
            let kp = k[r * w + c];
            let (s1, s2) = grid.coords(r, c);
            sys.rhs[p] += source(s1, s2) * dx * hy;
            // east / west faces
            for nc in [c - 1, c + 1] {
                let coef = harmonic(kp, k[r * w + nc]) * hy / dx;
                sys.add(p, p, coef);
                if nc == 0 {
                    sys.rhs[p] += coef * left;
                } else if nc == w - 1 {
                    sys.rhs[p] += coef * right;
                } else if nc < c {
                    sys.add(p, idx(r, nc), -coef);
                }
            }
            // north / south faces
            if r + 1 < h {
                let coef = harmonic(kp, k[(r + 1) * w + c]) * dx / dy;
                sys.add(p, p, coef);
                sys.add(idx(r + 1, c), idx(r + 1, c), coef);
                sys.add(idx(r + 1, c), p, -coef);
            }
        }
    }
    Ok(sys)
}

/// Solves with homogeneous Dirichlet data.
pub fn solve_darcy(
    log_perm: &Tensor,
    grid: &Grid,
    source: impl Fn(f64, f64) -> f64,
) -> Result<PressureField> {
    solve_darcy_dirichlet(log_perm, grid, source, 0.0, 0.0)
}

pub fn solve_darcy_dirichlet(
    log_perm: &Tensor,
    grid: &Grid,
    source: impl Fn(f64, f64) -> f64,
    left: f64,
    right: f64,
) -> Result<PressureField> {
    let sys = assemble_system(log_perm, grid, source, left, right)?;
    let x = sys.solve()?;
    let (h, w) = (grid.height, grid.width);
    let mut u = vec![0.0; h * w];
    for r in 0..h {
        u[r * w] = left;
        u[r * w + w - 1] = right;
        u[r * w + 1..r * w + w - 1].copy_from_slice(&x[r * (w - 2)..(r + 1) * (w - 2)]);
    }
    Ok(PressureField {
        values: Tensor::new(vec![h, w], u)?,
        grid: sys.grid,
    })
}

/// Net discrete flux leaving through the left and right edges.
pub fn boundary_outflow(log_perm: &Tensor, pressure: &PressureField) -> Result<f64> {
    let grid = &pressure.grid;
    check_field(log_perm, grid)?;
    let (h, w) = (grid.height, grid.width);
    let y = log_perm.data();
    let u = pressure.values.data();
    let mut total = 0.0;
    for r in 0..h {
        let hy = row_height(grid, r);
        for (b, i) in [(0, 1), (w - 1, w - 2)] {
            let coef = harmonic(y[r * w + b].exp(), y[r * w + i].exp()) * hy / grid.dx();
            total += coef * (u[r * w + i] - u[r * w + b]);
        }
    }
    Ok(total)
}

/// Bilinear point evaluation at fixed sensor locations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationOperator {
    /// `(s1, s2)` pairs in the closed unit square.
    pub locations: Vec<(f64, f64)>,
}

impl ObservationOperator {
    pub fn new(locations: Vec<(f64, f64)>) -> Result<Self> {
        if let Some(&(a, b)) = locations
            .iter()
            .find(|(a, b)| !(0.0..=1.0).contains(a) || !(0.0..=1.0).contains(b))
        {
            return Err(Error::invalid(format!(
                "sensor ({a}, {b}) lies outside the unit square"
            )));
        }
        if locations.is_empty() {
            return Err(Error::invalid("at least one sensor is required"));
        }
        Ok(Self { locations })
    }

    /// Tensor-product lattice `start + step * i`, `i < per_axis`, in both
    /// coordinates; s2 varies slowest.
    pub fn lattice(per_axis: usize, start: f64, step: f64) -> Result<Self> {
        let coords: Vec<f64> = (0..per_axis).map(|i| start + step * i as f64).collect();
        let locs = coords
            .iter()
            .flat_map(|&s2| coords.iter().map(move |&s1| (s1, s2)))
            .collect();
        Self::new(locs)
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    /// Four `(node, weight)` pairs per sensor.
    pub fn stencil(&self, grid: &Grid) -> Vec<[(usize, f64); 4]> {
        let (h, w) = (grid.height, grid.width);
        self.locations
            .iter()
            .map(|&(s1, s2)| {
                let fx = s1 * (w - 1) as f64;
                let fy = s2 * (h - 1) as f64;
                let c0 = (fx.floor() as usize).min(w - 2);
                let r0 = (fy.floor() as usize).min(h - 2);
                let tx = fx - c0 as f64;
                let ty = fy - r0 as f64;
                [
                    (r0 * w + c0, (1.0 - tx) * (1.0 - ty)),
                    (r0 * w + c0 + 1, tx * (1.0 - ty)),
                    ((r0 + 1) * w + c0, (1.0 - tx) * ty),
                    ((r0 + 1) * w + c0 + 1, tx * ty),
                ]
            })
            .collect()
    }

    /// `[H*W, m]` interpolation matrix; a row of nodal values times this
    /// matrix gives the sensor readings.
    pub fn matrix(&self, grid: &Grid) -> Tensor {
        let m = self.len();
        let mut data = vec![0.0; grid.n_nodes() * m];
        for (s, st) in self.stencil(grid).iter().enumerate() {
            for &(node, wgt) in st {
                data[node * m + s] += wgt;
            }
        }
        Tensor::from_parts(vec![grid.n_nodes(), m], data)
    }

    pub fn apply(&self, field: &Tensor, grid: &Grid) -> Result<Vec<f64>> {
        if field.len() != grid.n_nodes() {
            return Err(Error::shape(
                "observe",
                format!(
                    "field {:?} on {}x{} grid",
                    field.shape(),
                    grid.height,
                    grid.width
                ),
            ));
        }
        let d = field.data();
        Ok(self
            .stencil(grid)
            .iter()
            .map(|st| st.iter().map(|&(p, wgt)| wgt * d[p]).sum())
            .collect())
    }
}

pub fn observe(pressure: &PressureField, op: &ObservationOperator) -> Result<Vec<f64>> {
    op.apply(&pressure.values, &pressure.grid)
}

/// Independent Gaussian noise with per-sensor standard deviations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub level: f64,
    pub per_sensor_std: Vec<f64>,
    pub floor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSet {
    pub operator: ObservationOperator,
    pub values: Vec<f64>,
    pub noise: NoiseModel,
}

impl ObservationSet {
    pub fn new(operator: ObservationOperator, values: Vec<f64>, noise: NoiseModel) -> Result<Self> {
        if values.len() != operator.len() || noise.per_sensor_std.len() != operator.len() {
            return Err(Error::shape(
                "ObservationSet",
                format!(
                    "{} sensors, {} values, {} noise scales",
                    operator.len(),
                    values.len(),
                    noise.per_sensor_std.len()
                ),
            ));
        }
        if noise.per_sensor_std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("noise standard deviations must be positive"));
        }
        Ok(Self {
            operator,
            values,
            noise,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// CSV with header `s1,s2,value,sigma`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "s1,s2,value,sigma")?;
        for ((loc, v), s) in self
            .operator
            .locations
            .iter()
            .zip(&self.values)
            .zip(&self.noise.per_sensor_std)
        {
            writeln!(w, "{:?},{:?},{:?},{:?}", loc.0, loc.1, v, s)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the CSV written by [`write_csv`](Self::write_csv). The noise
    /// level is not stored in the file and is passed back in.
    pub fn read_csv(path: &Path, level: f64) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("s1,s2,value,sigma") {
            return Err(Error::Format(format!(
                "{}: unexpected observation header",
                path.display()
            )));
        }
        let (mut locs, mut vals, mut sig) = (Vec::new(), Vec::new(), Vec::new());
        for (ln, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<f64> = line
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), ln + 2)))?;
            if f.len() != 4 {
                return Err(Error::Format(format!(
                    "{}:{}: expected 4 columns",
                    path.display(),
                    ln + 2
                )));
            }
            locs.push((f[0], f[1]));
            vals.push(f[2]);
            sig.push(f[3]);
        }
        let floor = sig.iter().copied().fold(f64::INFINITY, f64::min);
        Self::new(
            ObservationOperator::new(locs)?,
            vals,
            NoiseModel {
                level,
                per_sensor_std: sig,
                floor,
            },
        )
    }
}

/// Perturbs clean readings with `σ_i = max(level·|clean_i|, level·mean|clean|/10)`.
pub fn add_noise<R: Rng>(
    op: &ObservationOperator,
    clean: &[f64],
    level: f64,
    rng: &mut R,
) -> Result<ObservationSet> {
    if !(level > 0.0) {
        return Err(Error::invalid(format!(
            "noise level must be positive, got {level}"
        )));
    }
    if clean.len() != op.len() {
        return Err(Error::shape(
            "add_noise",
            format!("{} readings for {} sensors", clean.len(), op.len()),
        ));
    }
    let mean_abs = clean.iter().map(|c| c.abs()).sum::<f64>() / clean.len() as f64;
    if mean_abs == 0.0 {
        return Err(Error::invalid(
            "all-zero readings leave the relative noise scale undefined",
        ));
    }
    let floor = level * mean_abs * 0.1;
    let sigma: Vec<f64> = clean.iter().map(|c| (level * c.abs()).max(floor)).collect();
    let values = clean
        .iter()
        .zip(&sigma)
        .map(|(c, s)| {
            let z: f64 = rng.sample(StandardNormal);
            c + s * z
        })
        .collect();
    ObservationSet::new(
        op.clone(),
        values,
        NoiseModel {
            level,
            per_sensor_std: sigma,
            floor,
        },
    )
}

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Gaussian log-likelihood of `predicted` under the observation noise.
pub fn log_likelihood(obs: &ObservationSet, predicted: &[f64]) -> Result<f64> {
    if predicted.len() != obs.len() {
        return Err(Error::shape(
            "log_likelihood",
            format!("{} predictions for {} readings", predicted.len(), obs.len()),
        ));
    }
    let mut total = 0.0;
    for ((d, p), s) in obs
        .values
        .iter()
        .zip(predicted)
        .zip(&obs.noise.per_sensor_std)
    {
        if !(*s > 0.0) {
            return Err(Error::invalid(format!(
                "noise standard deviation {s} is not positive"
            )));
        }
        let r = (d - p) / s;
        total += -0.5 * r * r - s.ln() - HALF_LN_2PI;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::rng_from_seed;

    fn flat(grid: &Grid, v: f64) -> Tensor {
        Tensor::full(&[grid.height, grid.width], v)
    }

    #[test]
    fn constant_coefficient_quadratic_is_exact() {
        for n in [5, 16, 33] {
            let grid = Grid::square(n).unwrap();
            let u = solve_darcy(&flat(&grid, 0.0), &grid, |_, _| 3.0).unwrap();
            for (p, &(s1, _)) in grid.points().iter().enumerate() {
                assert!((u.values.data()[p] - 1.5 * s1 * (1.0 - s1)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn dirichlet_columns_are_exactly_zero() {
        let grid = Grid::new(7, 9).unwrap();
        let y = Tensor::new(
            vec![7, 9],
            (0..63)
                .map(|p| ((p * 37) % 11) as f64 * 0.1 - 0.5)
                .collect(),
        )
        .unwrap();
        let u = solve_darcy(&y, &grid, |_, _| 3.0).unwrap();
        for r in 0..7 {
            assert_eq!(u.values.data()[r * 9], 0.0);
            assert_eq!(u.values.data()[r * 9 + 8], 0.0);
        }
    }

    #[test]
    fn observation_at_node_and_cell_centre() {
        let grid = Grid::square(5).unwrap();
        let field = Tensor::new(vec![5, 5], (0..25).map(|p| p as f64).collect()).unwrap();
        let op = ObservationOperator::new(vec![(0.25, 0.5), (0.125, 0.125), (1.0, 1.0)]).unwrap();
        let v = op.apply(&field, &grid).unwrap();
        assert_eq!(v[0], 11.0);
        assert_eq!(v[1], (0.0 + 1.0 + 5.0 + 6.0) / 4.0);
        assert_eq!(v[2], 24.0);
        let c = op.apply(&flat(&grid, 2.5), &grid).unwrap();
        assert!(c.iter().all(|&x| (x - 2.5).abs() < 1e-15));
        assert!(ObservationOperator::new(vec![(1.2, 0.0)]).is_err());
    }

    #[test]
    fn noise_scale_definition_and_determinism() {
        let op = ObservationOperator::new(vec![(0.5, 0.5), (0.2, 0.2)]).unwrap();
        let clean = [2.0, 0.0];
        let a = add_noise(&op, &clean, 0.05, &mut rng_from_seed(3)).unwrap();
        assert!((a.noise.per_sensor_std[0] - 0.1).abs() < 1e-15);
        assert!((a.noise.per_sensor_std[1] - 0.05 * 1.0 * 0.1).abs() < 1e-15);
        let b = add_noise(&op, &clean, 0.05, &mut rng_from_seed(3)).unwrap();
        assert_eq!(a, b);
        assert!(add_noise(&op, &[0.0, 0.0], 0.05, &mut rng_from_seed(3)).is_err());
        assert!(add_noise(&op, &clean, 0.0, &mut rng_from_seed(3)).is_err());
    }

    fn obs_with(values: Vec<f64>, sigma: Vec<f64>) -> ObservationSet {
        let op = ObservationOperator::new(vec![(0.5, 0.5); values.len()]).unwrap();
        ObservationSet {
            operator: op,
            values,
            noise: NoiseModel {
                level: 0.05,
                per_sensor_std: sigma,
                floor: 0.0,
            },
        }
    }

    #[test]
    fn likelihood_values() {
        let o = obs_with(vec![0.3, -1.0, 2.0], vec![1.0; 3]);
        let ll = log_likelihood(&o, &[0.3, -1.0, 2.0]).unwrap();
        assert!((ll + 1.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);

        let single = obs_with(vec![1.0], vec![1.0]);
        assert!((log_likelihood(&single, &[0.0]).unwrap() + 1.418_938_533_204_672_7).abs() < 1e-12);

        let doubled = obs_with(vec![0.3, -1.0, 2.0], vec![2.0; 3]);
        let ll2 = log_likelihood(&doubled, &[0.3, -1.0, 2.0]).unwrap();
        assert!((ll - ll2 - 3.0 * 2f64.ln()).abs() < 1e-12);

        let bad = obs_with(vec![1.0], vec![0.0]);
        assert!(log_likelihood(&bad, &[1.0]).is_err());
        assert!(log_likelihood(&single, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn observation_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let op = ObservationOperator::lattice(3, 0.1, 0.3).unwrap();
        let o = add_noise(
            &op,
            &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            0.05,
            &mut rng_from_seed(1),
        )
        .unwrap();
        let p = dir.path().join("obs.csv");
        o.write_csv(&p).unwrap();
        let back = ObservationSet::read_csv(&p, 0.05).unwrap();
        assert_eq!(back.values, o.values);
        assert_eq!(back.noise.per_sensor_std, o.noise.per_sensor_std);
        assert_eq!(back.operator, o.operator);
    }
}
