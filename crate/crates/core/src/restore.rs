//! Deployment: corrupted gather -> gain -> patches -> U-net -> merge ->
//! reassembled gather.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::evalkit::{snr, Db};
use crate::neuralnet::{Tensor, Unet};
use crate::patchwork::{assemble, build_mask, extract, merge_known_ungained, Patch, PatchGrid};
use crate::seisdata::{Gather, SampleMask};
use crate::trainer::Task;

/// Patches per inference call.
pub const INFER_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy)]
pub struct RestoreJob<'a> {
    pub model: &'a Unet<f32>,
    pub task: Task,
    pub grid: &'a PatchGrid,
    pub gain: f32,
    pub input: &'a Gather,
    pub mask: Option<&'a SampleMask>,
}

/// Runs the network over every patch; estimates stay in gained units.
fn estimate_patches(model: &Unet<f32>, patches: &[Patch], gain: f32) -> Result<Vec<Patch>> {
    let n = model.spec().n;
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(INFER_CHUNK) {
        let mut data = Vec::with_capacity(chunk.len() * n * n);
        for p in chunk {
            data.extend(p.values.iter().map(|&v| v * gain));
        }
        let x = Tensor::from_channel_major(chunk.len(), 1, n, n, data)?;
        let y = model.infer(&x)?.y;
        for (i, p) in chunk.iter().enumerate() {
            let plane = y.plane(i, 0);
            out.push(Patch {
                values: ndarray::Array2::from_shape_vec((n, n), plane.to_vec()).expect("plane is n*n"),
                origin: p.origin,
            });
        }
    }
    Ok(out)
}

/// Restores one gather.
///
/// Interpolation keeps every known sample of the input exactly and fills
/// missing samples with the network estimate; denoise and joint return the
/// de-gained estimate everywhere. Overlaps are averaged.
pub fn restore_gather(job: &RestoreJob<'_>) -> Result<Gather> {
    let grid = job.grid;
    if job.model.spec().n != grid.n {
        return Err(Error::Shape(format!(
            "checkpoint patch side {} differs from grid patch side {}",
            job.model.spec().n,
            grid.n
        )));
    }
    if job.input.shape() != grid.gather_shape {
        return Err(Error::Shape(format!(
            "gather {:?} does not match grid {:?}",
            job.input.shape(),
            grid.gather_shape
        )));
    }
    if !(job.gain.is_finite() && job.gain != 0.0) {
        return Err(Error::Param(format!("gain must be finite and non-zero, got {}", job.gain)));
    }
    let known = extract(job.input, grid)?;
    let mut estimates = estimate_patches(job.model, &known, job.gain)?;
    if job.task == Task::Interpolate {
        let mask = job
            .mask
            .ok_or_else(|| Error::Config("interpolation requires a missing-sample mask".into()))?;
        for (k, (kp, est)) in known.iter().zip(estimates.iter_mut()).enumerate() {
            let pm = build_mask(mask, grid, k)?;
            *est = merge_known_ungained(kp, est, &pm, job.gain)?;
        }
    } else {
        for est in &mut estimates {
            est.values.mapv_inplace(|v| v / job.gain);
        }
    }
    let (out, uncovered) = assemble(&estimates, grid, job.input.meta)?;
    if uncovered > 0 && job.task == Task::Interpolate {
        // Samples outside every patch stay as given.
        let cov = grid.coverage();
        let mut s = out.into_samples();
        ndarray::Zip::from(&mut s)
            .and(&cov)
            .and(job.input.samples())
            .for_each(|o, &c, &i| {
                if c == 0 {
                    *o = i;
                }
            });
        return Gather::new(s, job.input.meta);
    }
    Ok(out)
}

/// Per-gather outcome of [`restore_dataset`].
#[derive(Debug, Clone)]
pub struct RestoreRecord {
    pub index: usize,
    pub restored: Gather,
    /// S/N against the clean gather when one was supplied.
    pub snr: Option<Db>,
    pub runtime: Duration,
}

/// Restores each job in order; `clean[i]` (if present) scores job `i`.
pub fn restore_dataset(jobs: &[(usize, RestoreJob<'_>)], clean: &[Option<&Gather>]) -> Result<Vec<RestoreRecord>> {
    let mut out = Vec::with_capacity(jobs.len());
    for (i, (index, job)) in jobs.iter().enumerate() {
        let start = Instant::now();
        let restored = restore_gather(job)?;
        let runtime = start.elapsed();
        let score = match clean.get(i).copied().flatten() {
            Some(c) => Some(snr(c, &restored)?),
            None => None,
        };
        out.push(RestoreRecord {
            index: *index,
            restored,
            snr: score,
            runtime,
        });
    }
    Ok(out)
}

/// `gather,snr_db` table; gathers without a reference are left blank.
pub fn metrics_csv(records: &[RestoreRecord]) -> String {
    let mut s = String::from("gather,snr_db\n");
    for r in records {
        let v = r.snr.map(|d| d.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{}", r.index, v);
    }
    s
}
