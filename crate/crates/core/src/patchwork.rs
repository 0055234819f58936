//! Patch geometry: planning a stride lattice over a gather, cutting patches,
//! per-patch missing-sample masks, the known-sample merge, and reassembly
//! with uniform overlap averaging.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seisdata::{AcquisitionMeta, Gather, SampleMask};

/// Deterministic mapping between a gather and its K square patches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    /// Patch side N.
    pub n: usize,
    pub stride_t: usize,
    pub stride_x: usize,
    /// Top-left corners `(row, col)`, row-major over the lattice.
    pub origins: Vec<(usize, usize)>,
    pub gather_shape: (usize, usize),
}

/// Enumerates every lattice origin `(i * stride_t, j * stride_x)` whose
/// patch fits inside a gather of `shape`.
pub fn plan_patches(shape: (usize, usize), n: usize, stride_t: usize, stride_x: usize) -> Result<PatchGrid> {
    let (n_t, n_x) = shape;
    if n == 0 || stride_t == 0 || stride_x == 0 {
        return Err(Error::Param("patch size and strides must be positive".into()));
    }
    if n > n_t || n > n_x {
        return Err(Error::Param(format!("patch side {n} exceeds gather {n_t}x{n_x}")));
    }
    let rows = (n_t - n) / stride_t + 1;
    let cols = (n_x - n) / stride_x + 1;
    let origins = (0..rows)
        .flat_map(|i| (0..cols).map(move |j| (i * stride_t, j * stride_x)))
        .collect();
    Ok(PatchGrid {
        n,
        stride_t,
        stride_x,
        origins,
        gather_shape: shape,
    })
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Number of patches covering each gather sample.
    pub fn coverage(&self) -> Array2<u32> {
        let mut cov = Array2::zeros(self.gather_shape);
        for &(r, c) in &self.origins {
            cov.slice_mut(s![r..r + self.n, c..c + self.n]).mapv_inplace(|v| v + 1);
        }
        cov
    }

    /// Count of gather samples not covered by any patch.
    pub fn uncovered(&self) -> usize {
        let (n_t, n_x) = self.gather_shape;
        let covered_t = self.origins.iter().map(|o| o.0 + self.n).max().unwrap_or(0);
        let covered_x = self.origins.iter().map(|o| o.1 + self.n).max().unwrap_or(0);
        // Patches abut or overlap whenever stride <= N; otherwise count directly.
        if self.stride_t <= self.n && self.stride_x <= self.n {
            n_t * n_x - covered_t * covered_x
        } else {
            self.coverage().iter().filter(|&&c| c == 0).count()
        }
    }

    fn check_shape(&self, shape: (usize, usize)) -> Result<()> {
        if shape != self.gather_shape {
            return Err(Error::Shape(format!(
                "grid planned for {:?}, got {:?}",
                self.gather_shape, shape
            )));
        }
        Ok(())
    }
}

/// One N x N window of a gather.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub values: Array2<f32>,
    pub origin: (usize, usize),
}

/// Binary N x N mask; 1 marks a missing sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchMask {
    pub values: Array2<u8>,
}

impl PatchMask {
    pub fn complement(&self) -> PatchMask {
        PatchMask {
            values: self.values.mapv(|v| 1 - v),
        }
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|&v| v as usize).sum()
    }
}

pub fn extract(g: &Gather, grid: &PatchGrid) -> Result<Vec<Patch>> {
    grid.check_shape(g.shape())?;
    let n = grid.n;
    Ok(grid
        .origins
        .iter()
        .map(|&(r, c)| Patch {
            values: g.samples().slice(s![r..r + n, c..c + n]).to_owned(),
            origin: (r, c),
        })
        .collect())
}

/// Reassembles patches into a gather; each sample is the mean of all
/// patches covering it. Returns the gather and the number of uncovered
/// samples (left at zero).
///
/// Accumulation runs in f64 in patch order, so averaging identical f32
/// values reproduces them exactly.
pub fn assemble(patches: &[Patch], grid: &PatchGrid, meta: AcquisitionMeta) -> Result<(Gather, usize)> {
    if patches.len() != grid.len() {
        return Err(Error::Shape(format!(
            "{} patches for a grid of {} origins",
            patches.len(),
            grid.len()
        )));
    }
    let n = grid.n;
    let mut sum = Array2::<f64>::zeros(grid.gather_shape);
    let mut count = Array2::<u32>::zeros(grid.gather_shape);
    for (p, &(r, c)) in patches.iter().zip(&grid.origins) {
        if p.values.dim() != (n, n) {
            return Err(Error::Shape(format!("patch {:?} is not {n}x{n}", p.values.dim())));
        }
        let mut acc = sum.slice_mut(s![r..r + n, c..c + n]);
        acc.zip_mut_with(&p.values, |a, &v| *a += v as f64);
        count.slice_mut(s![r..r + n, c..c + n]).mapv_inplace(|v| v + 1);
    }
    let mut uncovered = 0;
    let mut out = Array2::<f32>::zeros(grid.gather_shape);
    ndarray::Zip::from(&mut out).and(&sum).and(&count).for_each(|o, &s, &k| {
        if k == 0 {
            uncovered += 1;
        } else {
            *o = (s / k as f64) as f32;
        }
    });
    Ok((Gather::new(out, meta)?, uncovered))
}

/// Mask of patch `k`: 1 where the gather sample under the patch is missing.
pub fn build_mask(mask: &SampleMask, grid: &PatchGrid, k: usize) -> Result<PatchMask> {
    grid.check_shape(mask.shape())?;
    let &(r, c) = grid
        .origins
        .get(k)
        .ok_or_else(|| Error::Param(format!("patch index {k} out of range {}", grid.len())))?;
    let n = grid.n;
    Ok(PatchMask {
        values: mask.values().slice(s![r..r + n, c..c + n]).to_owned(),
    })
}

fn check_merge_shapes(a: &Patch, b: &Patch, m: &PatchMask, gain: f32) -> Result<()> {
    if a.values.dim() != b.values.dim() || a.values.dim() != m.values.dim() {
        return Err(Error::Shape("patch and mask shapes differ".into()));
    }
    if gain == 0.0 || !gain.is_finite() {
        return Err(Error::Param(format!("gain must be finite and non-zero, got {gain}")));
    }
    Ok(())
}

/// `(known * (1 - M) + estimate * M) / G` with `known` in gained units.
///
/// Known samples cost one division each and nothing else.
pub fn merge_known(known: &Patch, estimate: &Patch, m: &PatchMask, gain: f32) -> Result<Patch> {
    check_merge_shapes(known, estimate, m, gain)?;
    let mut values = known.values.clone();
    ndarray::Zip::from(&mut values)
        .and(&estimate.values)
        .and(&m.values)
        .for_each(|v, &e, &mk| *v = if mk == 1 { e / gain } else { *v / gain });
    Ok(Patch {
        values,
        origin: known.origin,
    })
}

/// Same merge with the known samples supplied before gain: they are copied
/// through untouched, so the gain cancels exactly.
pub fn merge_known_ungained(known: &Patch, estimate: &Patch, m: &PatchMask, gain: f32) -> Result<Patch> {
    check_merge_shapes(known, estimate, m, gain)?;
    let mut values = known.values.clone();
    ndarray::Zip::from(&mut values)
        .and(&estimate.values)
        .and(&m.values)
        .for_each(|v, &e, &mk| {
            if mk == 1 {
                *v = e / gain;
            }
        });
    Ok(Patch {
        values,
        origin: known.origin,
    })
}
