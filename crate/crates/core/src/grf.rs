//! Gaussian random fields with exponential covariance, sampled through a
//! truncated Karhunen-Loeve expansion, and the prior dataset built from them.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::random::{derive_seed, rng_from_seed, standard_normals};
use crate::tensor::Tensor;

/// Exponential covariance `variance * exp(-|((x1-y1)/l1, (x2-y2)/l2)|)`
/// around a constant mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpec {
    pub variance: f64,
    pub l1: f64,
    pub l2: f64,
    pub mean: f64,
}

impl CovarianceSpec {
    pub fn new(variance: f64, l1: f64, l2: f64, mean: f64) -> Result<Self> {
        if !(variance > 0.0 && l1 > 0.0 && l2 > 0.0 && mean.is_finite()) {
            return Err(Error::invalid(format!(
                "covariance needs positive variance and length scales, got σ²={variance}, l=({l1}, {l2})"
            )));
        }
        Ok(Self {
            variance,
            l1,
            l2,
            mean,
        })
    }

    pub fn isotropic(variance: f64, length_scale: f64, mean: f64) -> Result<Self> {
        Self::new(variance, length_scale, length_scale, mean)
    }

    pub fn kernel(&self, a: (f64, f64), b: (f64, f64)) -> f64 {
        let d1 = (a.0 - b.0) / self.l1;
        let d2 = (a.1 - b.1) / self.l2;
        self.variance * (-(d1 * d1 + d2 * d2).sqrt()).exp()
    }
}

/// Pointwise kernel evaluation at every pair of grid nodes.
pub fn assemble_covariance_matrix(grid: &Grid, spec: &CovarianceSpec) -> DMatrix<f64> {
    let pts = grid.points();
    let n = pts.len();
    let mut c = DMatrix::zeros(n, n);
    for p in 0..n {
        c[(p, p)] = spec.variance;
        for q in 0..p {
            let v = spec.kernel(pts[p], pts[q]);
            c[(p, q)] = v;
            c[(q, p)] = v;
        }
    }
    c
}

/// Leading eigenpairs of a covariance matrix.
///
/// Modes are unit vectors under the plain nodal dot product, so a sample
/// `m + Σ sqrt(λ_k) mode_k ξ_k` has covariance `Σ λ_k mode_k mode_kᵀ`.
#[derive(Clone, Debug)]
pub struct KlBasis {
    /// Descending, strictly positive.
    pub eigenvalues: Vec<f64>,
    /// `n x d_KL`, column `k` pairs with `eigenvalues[k]`.
    pub modes: DMatrix<f64>,
    pub energy_fraction: f64,
    /// Sum of all (clipped) eigenvalues of the full matrix.
    pub total_energy: f64,
}

impl KlBasis {
    pub fn n_modes(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.modes.nrows()
    }

    /// Mode `k` laid out on `grid`.
    pub fn eigenfunction(&self, k: usize, grid: &Grid) -> Result<Tensor> {
        if grid.n_nodes() != self.n_nodes() {
            return Err(Error::shape("eigenfunction", "grid does not match basis"));
        }
        Tensor::new(
            vec![grid.height, grid.width],
            self.modes.column(k).iter().copied().collect(),
        )
    }

    pub fn retained_energy(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    /// Pointwise variance `Σ λ_k mode_k(s)²` of the truncated field.
    pub fn pointwise_variance(&self) -> Vec<f64> {
        (0..self.n_nodes())
            .map(|p| {
                self.eigenvalues
                    .iter()
                    .enumerate()
                    .map(|(k, l)| l * self.modes[(p, k)].powi(2))
                    .sum()
            })
            .collect()
    }
}

/// Eigendecomposition truncated to the fewest modes whose eigenvalues sum to
/// at least `energy_fraction` of the trace.
pub fn truncated_kle(cov: &DMatrix<f64>, energy_fraction: f64) -> Result<KlBasis> {
    if !(energy_fraction > 0.0 && energy_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "energy fraction {energy_fraction} not in (0, 1]"
        )));
    }
    let n = cov.nrows();
    if n == 0 || cov.ncols() != n {
        return Err(Error::invalid(
            "covariance must be a non-empty square matrix",
        ));
    }
    let scale = cov.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for p in 0..n {
        for q in 0..p {
            if (cov[(p, q)] - cov[(q, p)]).abs() > 1e-12 * scale.max(1.0) {
                return Err(Error::invalid(format!(
                    "covariance is not symmetric at ({p}, {q})"
                )));
            }
        }
    }

    let eig = SymmetricEigen::new(cov.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let lambda_max = eig.eigenvalues[order[0]];
    if lambda_max <= 0.0 {
        return Err(Error::Numerical(
            "covariance has no positive eigenvalue".into(),
        ));
    }
    let tol = 1e-10 * lambda_max;
    let mut values = Vec::with_capacity(n);
    for &k in &order {
        let l = eig.eigenvalues[k];
        if l < -tol {
            return Err(Error::Numerical(format!(
                "covariance has eigenvalue {l:e}, below the clipping tolerance {:e}",
                -tol
            )));
        }
        values.push(l.max(0.0));
    }

    let total: f64 = values.iter().sum();
    let target = energy_fraction * total;
    let mut acc = 0.0;
    let mut keep = n;
    for (k, &l) in values.iter().enumerate() {
        acc += l;
        if acc >= target {
            keep = k + 1;
            break;
        }
    }

    let mut modes = DMatrix::zeros(n, keep);
    for (c, &k) in order.iter().take(keep).enumerate() {
        let col = eig.eigenvectors.column(k);
        // sign convention: largest-magnitude entry positive
        let pivot = col
            .iter()
            .fold(0.0f64, |m, &v| if v.abs() > m.abs() { v } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        let norm = col.norm();
        for r in 0..n {
            modes[(r, c)] = sign * col[r] / norm;
        }
    }
    values.truncate(keep);
    Ok(KlBasis {
        eigenvalues: values,
        modes,
        energy_fraction,
        total_energy: total,
    })
}

/// One log-permeability image and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSample {
    /// `H x W`.
    pub values: Tensor,
    pub length_scale: f64,
    pub seed: u64,
}

/// `m + Σ_k sqrt(λ_k) mode_k ξ_k` for given coefficients.
pub fn field_from_coefficients(
    basis: &KlBasis,
    spec: &CovarianceSpec,
    grid: &Grid,
    xi: &[f64],
) -> Result<Tensor> {
    if xi.len() != basis.n_modes() || grid.n_nodes() != basis.n_nodes() {
        return Err(Error::shape(
            "field_from_coefficients",
            format!(
                "{} coefficients for {} modes on {} nodes",
                xi.len(),
                basis.n_modes(),
                basis.n_nodes()
            ),
        ));
    }
    let mut data = vec![spec.mean; grid.n_nodes()];
    for (k, (&l, &x)) in basis.eigenvalues.iter().zip(xi).enumerate() {
        let a = l.sqrt() * x;
        for (p, v) in data.iter_mut().enumerate() {
            *v += a * basis.modes[(p, k)];
        }
    }
    Tensor::new(vec![grid.height, grid.width], data)
}

/// Draws one field with i.i.d. standard normal coefficients from a stream
/// seeded by `seed`.
pub fn sample_field(
    basis: &KlBasis,
    spec: &CovarianceSpec,
    grid: &Grid,
    seed: u64,
) -> Result<FieldSample> {
    let mut rng = rng_from_seed(seed);
    let xi = standard_normals(&mut rng, basis.n_modes());
    Ok(FieldSample {
        values: field_from_coefficients(basis, spec, grid, &xi)?,
        length_scale: spec.l1,
        seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorDataConfig {
    pub variance: f64,
    pub mean: f64,
    pub length_scales: Vec<f64>,
    pub per_scale: usize,
    pub energy_fraction: f64,
    pub base_seed: u64,
}

/// Concatenates `per_scale` draws for each isotropic length scale. Sample
/// `k` (global index) uses seed `derive_seed(base_seed, k)`.
pub fn generate_prior_dataset(grid: &Grid, cfg: &PriorDataConfig) -> Result<Vec<FieldSample>> {
    if cfg.length_scales.is_empty() || cfg.per_scale == 0 {
        return Err(Error::invalid(
            "need at least one length scale and one sample per scale",
        ));
    }
    let mut out = Vec::with_capacity(cfg.length_scales.len() * cfg.per_scale);
    for &l in &cfg.length_scales {
        let spec = CovarianceSpec::isotropic(cfg.variance, l, cfg.mean)?;
        let basis = truncated_kle(
            &assemble_covariance_matrix(grid, &spec),
            cfg.energy_fraction,
        )?;
        for _ in 0..cfg.per_scale {
            let seed = derive_seed(cfg.base_seed, out.len() as u64);
            out.push(sample_field(&basis, &spec, grid, seed)?);
        }
    }
    Ok(out)
}

/// Binary dataset file: `H: u32, W: u32, count: u64`, then per sample
/// `length_scale: f64, seed: u64, H*W f64` payload; all little-endian.
pub fn write_dataset(path: &Path, grid: &Grid, samples: &[FieldSample]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&(grid.height as u32).to_le_bytes())?;
    w.write_all(&(grid.width as u32).to_le_bytes())?;
    w.write_all(&(samples.len() as u64).to_le_bytes())?;
    for s in samples {
        if s.values.shape() != [grid.height, grid.width] {
            return Err(Error::shape(
                "write_dataset",
                format!("sample shape {:?}", s.values.shape()),
            ));
        }
        w.write_all(&s.length_scale.to_le_bytes())?;
        w.write_all(&s.seed.to_le_bytes())?;
        for v in s.values.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(Grid, Vec<FieldSample>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = bytes.as_slice();
    let take = |cur: &mut &[u8], n: usize| -> Result<Vec<u8>> {
        if cur.len() < n {
            return Err(Error::Format("dataset file is truncated".into()));
        }
        let (head, tail) = cur.split_at(n);
        *cur = tail;
        Ok(head.to_vec())
    };
    let h = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()) as usize;
    let grid = Grid::new(h, w).map_err(|e| Error::Format(e.to_string()))?;
    let record = 16 + 8 * h * w;
    if cur.len() != count.saturating_mul(record) {
        return Err(Error::Format(format!(
            "dataset declares {count} samples but holds {} payload bytes",
            cur.len()
        )));
    }
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let ls = f64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap());
        let seed = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap());
        let raw = take(&mut cur, 8 * h * w)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        samples.push(FieldSample {
            values: Tensor::new(vec![h, w], data).map_err(|e| Error::Format(e.to_string()))?,
            length_scale: ls,
            seed,
        });
    }
    Ok((grid, samples))
}

/// CSV manifest with columns `index,length_scale,seed`.
pub fn write_manifest(path: &Path, samples: &[FieldSample]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "index,length_scale,seed")?;
    for (i, s) in samples.iter().enumerate() {
        writeln!(w, "{i},{},{}", s.length_scale, s.seed)?;
    }
    w.flush()?;
    Ok(())
}
