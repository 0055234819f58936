//! Metrics, f-k spectra, alias energy and report emission.

use std::fmt::{self, Write as _};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::seisdata::Gather;

/// A decibel value, or the explicit flag for a zero-error comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Db {
    Finite(f64),
    PosInf,
}

impl Db {
    pub fn value(self) -> f64 {
        match self {
            Db::Finite(v) => v,
            Db::PosInf => f64::INFINITY,
        }
    }

    pub fn is_infinite(self) -> bool {
        self == Db::PosInf
    }
}

impl fmt::Display for Db {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Db::Finite(v) => write!(f, "{v}"),
            Db::PosInf => f.write_str("+inf"),
        }
    }
}

impl Serialize for Db {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Db::Finite(v) => s.serialize_f64(*v),
            Db::PosInf => s.serialize_str("+inf"),
        }
    }
}

fn check_same(a: &Gather, b: &Gather) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `10 log10(||I||^2 / ||I - Î||^2)`.
pub fn snr(clean: &Gather, restored: &Gather) -> Result<Db> {
    check_same(clean, restored)?;
    let mut sig = 0.0f64;
    let mut err = 0.0f64;
    for (&a, &b) in clean.samples().iter().zip(restored.samples()) {
        sig += (a as f64).powi(2);
        err += (a as f64 - b as f64).powi(2);
    }
    if sig == 0.0 {
        return Err(Error::Param("S/N is undefined for an all-zero reference".into()));
    }
    Ok(if err == 0.0 {
        Db::PosInf
    } else {
        Db::Finite(10.0 * (sig / err).log10())
    })
}

/// `10 log10(s_max / var(I - Î))`, with `s_max` unsquared.
pub fn psnr(clean: &Gather, restored: &Gather, s_max: f64) -> Result<Db> {
    check_same(clean, restored)?;
    if !(s_max > 0.0 && s_max.is_finite()) {
        return Err(Error::Param(format!("s_max must be positive, got {s_max}")));
    }
    let n = clean.samples().len() as f64;
    let errs: Vec<f64> = clean
        .samples()
        .iter()
        .zip(restored.samples())
        .map(|(&a, &b)| a as f64 - b as f64)
        .collect();
    let mean = errs.iter().sum::<f64>() / n;
    let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    Ok(if var == 0.0 {
        Db::PosInf
    } else {
        Db::Finite(10.0 * (s_max / var).log10())
    })
}

/// 2D DFT of a real array (rows then columns), unshifted.
pub fn dft2(x: &Array2<f64>) -> Array2<Complex<f64>> {
    let (n_r, n_c) = x.dim();
    let mut planner = FftPlanner::<f64>::new();
    let mut data: Array2<Complex<f64>> = x.mapv(|v| Complex::new(v, 0.0));
    if n_c > 0 {
        let fft = planner.plan_fft_forward(n_c);
        for mut row in data.rows_mut() {
            let mut buf: Vec<_> = row.to_vec();
            fft.process(&mut buf);
            row.iter_mut().zip(buf).for_each(|(o, v)| *o = v);
        }
    }
    if n_r > 0 {
        let fft = planner.plan_fft_forward(n_r);
        for mut col in data.columns_mut() {
            let mut buf: Vec<_> = col.to_vec();
            fft.process(&mut buf);
            col.iter_mut().zip(buf).for_each(|(o, v)| *o = v);
        }
    }
    data
}

/// Moves the zero-frequency bin to index `n / 2` on both axes.
pub fn fftshift<T: Clone>(a: &Array2<T>) -> Array2<T> {
    let (n_r, n_c) = a.dim();
    Array2::from_shape_fn((n_r, n_c), |(i, j)| {
        a[[(i + n_r.div_ceil(2)) % n_r, (j + n_c.div_ceil(2)) % n_c]].clone()
    })
}

/// `|2D DFT(g)|` with zero frequency centred: rows are temporal frequency,
/// columns wavenumber.
pub fn spectrum_mag(g: &Gather) -> Array2<f64> {
    let x = g.samples().mapv(|v| v as f64);
    fftshift(&dft2(&x).mapv(|c| c.norm()))
}

/// Fraction of spectral energy at wavenumbers outside `[-n_x/4, n_x/4)`
/// (the half-band a 2x decimation folds into), within the temporal band
/// `|f| <= 3 f0`.
pub fn alias_energy_ratio(g: &Gather, f0: f64) -> f64 {
    let spec = spectrum_mag(g);
    let (n_t, n_x) = spec.dim();
    let dt = g.meta.dt;
    let (c_t, c_x) = ((n_t / 2) as i64, (n_x / 2) as i64);
    let mut total = 0.0;
    let mut outer = 0.0;
    for ((i, j), &m) in spec.indexed_iter() {
        let f = (i as i64 - c_t) as f64 / (n_t as f64 * dt);
        if f.abs() > 3.0 * f0 {
            continue;
        }
        let k4 = 4 * (j as i64 - c_x);
        let e = m * m;
        total += e;
        if k4 < -(n_x as i64) || k4 >= n_x as i64 {
            outer += e;
        }
    }
    if total == 0.0 {
        0.0
    } else {
        outer / total
    }
}

/// One scored gather.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub name: String,
    pub snr: Db,
    pub psnr: Option<Db>,
}

/// Scores of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub label: String,
    pub rows: Vec<MetricRow>,
    pub provenance: serde_json::Value,
}

impl MetricReport {
    /// Mean S/N; `+inf` if any row is flagged infinite, `None` if empty.
    pub fn mean_snr(&self) -> Option<Db> {
        if self.rows.is_empty() {
            return None;
        }
        if self.rows.iter().any(|r| r.snr.is_infinite()) {
            return Some(Db::PosInf);
        }
        Some(Db::Finite(
            self.rows.iter().map(|r| r.snr.value()).sum::<f64>() / self.rows.len() as f64,
        ))
    }
}

/// Two-way result table: one corruption parameter per row, the other per
/// column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub row_label: String,
    pub col_label: String,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub cells: Vec<Vec<Option<f64>>>,
}

impl ResultTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\\{}", self.row_label, self.col_label);
        for c in &self.cols {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
        for (r, row) in self.rows.iter().zip(&self.cells) {
            s.push_str(r);
            for v in row {
                s.push(',');
                if let Some(v) = v {
                    let _ = write!(s, "{v}");
                }
            }
            s.push('\n');
        }
        s
    }
}

pub fn metrics_csv(reports: &[MetricReport]) -> String {
    let mut s = String::from("report,gather,snr_db,psnr_db\n");
    for rep in reports {
        for r in &rep.rows {
            let psnr = r.psnr.map(|d| d.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{}", rep.label, r.name, r.snr, psnr);
        }
    }
    s
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `metrics.csv` and `summary.json` into `out_dir`.
pub fn emit_report(reports: &[MetricReport], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv = out_dir.join("metrics.csv");
    write(&csv, metrics_csv(reports))?;
    let summary: Vec<_> = reports
        .iter()
        .map(|r| {
            serde_json::json!({
                "label": r.label,
                "gathers": r.rows.len(),
                "mean_snr_db": r.mean_snr(),
                "provenance": r.provenance,
            })
        })
        .collect();
    let json = out_dir.join("summary.json");
    write(&json, serde_json::to_vec_pretty(&summary)?)?;
    Ok(vec![csv, json])
}

/// Display scaling recorded next to every PNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScale {
    pub vmin: f64,
    pub vmax: f64,
    pub colormap: String,
    pub bits: u8,
}

fn quantize(v: f64, vmin: f64, vmax: f64) -> u8 {
    let u = ((v - vmin) / (vmax - vmin)).clamp(0.0, 1.0);
    (u * 255.0).round() as u8
}

fn encode_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
    w.write_image_data(data).map_err(|e| Error::Image(e.to_string()))?;
    w.finish().map_err(|e| Error::Image(e.to_string()))
}

fn write_sidecar(path: &Path, scale: &ImageScale) -> Result<()> {
    write(&path.with_extension("json"), serde_json::to_vec_pretty(scale)?)
}

/// Grayscale PNG of a 2D array (rows top to bottom), with a sidecar JSON.
/// `None` limits use a symmetric range around zero.
pub fn write_gray_png(a: &Array2<f64>, path: &Path, limits: Option<(f64, f64)>) -> Result<ImageScale> {
    let (vmin, vmax) = limits.unwrap_or_else(|| {
        let m = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let m = if m > 0.0 { m } else { 1.0 };
        (-m, m)
    });
    if !(vmax > vmin) {
        return Err(Error::Param(format!("empty display range [{vmin}, {vmax}]")));
    }
    let data: Vec<u8> = a.iter().map(|&v| quantize(v, vmin, vmax)).collect();
    encode_png(path, a.ncols(), a.nrows(), png::ColorType::Grayscale, &data)?;
    let scale = ImageScale {
        vmin,
        vmax,
        colormap: "gray".into(),
        bits: 8,
    };
    write_sidecar(path, &scale)?;
    Ok(scale)
}

/// 99th percentile of `|a|`.
pub fn abs_percentile_99(a: &Array2<f64>) -> f64 {
    let mut v: Vec<f64> = a.iter().map(|x| x.abs()).collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|x, y| x.total_cmp(y));
    let idx = ((v.len() - 1) as f64 * 0.99).round() as usize;
    v[idx]
}

/// Blue-white-red PNG clipped symmetrically at the 99th percentile of `|a|`.
pub fn write_diverging_png(a: &Array2<f64>, path: &Path) -> Result<ImageScale> {
    let mut c = abs_percentile_99(a);
    if c <= 0.0 {
        c = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    }
    if c <= 0.0 {
        c = 1.0;
    }
    let mut data = Vec::with_capacity(a.len() * 3);
    for &v in a {
        let u = (v / c).clamp(-1.0, 1.0);
        let fade = (255.0 * (1.0 - u.abs())).round() as u8;
        let px = if u < 0.0 { [fade, fade, 255] } else { [255, fade, fade] };
        data.extend_from_slice(&px);
    }
    encode_png(path, a.ncols(), a.nrows(), png::ColorType::Rgb, &data)?;
    let scale = ImageScale {
        vmin: -c,
        vmax: c,
        colormap: "blue-white-red".into(),
        bits: 8,
    };
    write_sidecar(path, &scale)?;
    Ok(scale)
}

/// Decoded PNG: width, height, channels, pixel bytes.
pub fn read_png(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let dec = png::Decoder::new(BufReader::new(file));
    let mut reader = dec.read_info().map_err(|e| Error::Image(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Image("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Image(e.to_string()))?;
    buf.truncate(info.buffer_size());
    Ok((
        info.width as usize,
        info.height as usize,
        info.color_type.samples(),
        buf,
    ))
}

/// Gather, spectrum and (optional) error panels for one comparison.
pub fn write_panels(name: &str, clean: Option<&Gather>, other: &Gather, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let img = out_dir.join(format!("{name}.png"));
    let lim = clean.map(|c| {
        let m = c.max_abs() as f64;
        let m = if m > 0.0 { m } else { 1.0 };
        (-m, m)
    });
    write_gray_png(&other.samples().mapv(|v| v as f64), &img, lim)?;
    written.push(img);
    let spec = spectrum_mag(other);
    let max = spec.iter().fold(0.0f64, |m, &v| m.max(v));
    let sp = out_dir.join(format!("{name}_spectrum.png"));
    write_gray_png(&spec, &sp, Some((0.0, if max > 0.0 { max } else { 1.0 })))?;
    written.push(sp);
    if let Some(c) = clean {
        check_same(c, other)?;
        let diff = ndarray::Zip::from(other.samples())
            .and(c.samples())
            .map_collect(|&a, &b| a as f64 - b as f64);
        let ep = out_dir.join(format!("{name}_error.png"));
        write_diverging_png(&diff, &ep)?;
        written.push(ep);
    }
    Ok(written)
}
