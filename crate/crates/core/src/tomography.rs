//! Parallel-beam projection geometry, Radon transform, back-projection and
//! filtered back-projection.
//!
//! Conventions, all in pixel units:
//!
//! - images are square `N x N`; pixel `(i, j)` (row, column) sits at
//!   `x = j - c`, `y = i - c` with `c = (N - 1) / 2`;
//! - detector bin `k` of `D = N` sits at `r = k - c`;
//! - the ray for angle `θ` and bin `k` is the line `x cos θ + y sin θ = r`,
//!   sampled at unit steps `s` along `(-sin θ, cos θ)` and read with bilinear
//!   interpolation, so each sinogram entry approximates a line integral;
//! - only pixels whose centre lies inside the inscribed circle of radius
//!   `N / 2` are seen by the projector.
//!
//! [`backproject`] is the exact transpose of [`radon`] under these
//! conventions.

use std::f64::consts::{PI, SQRT_2};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::filter::RowFilter;
use crate::numerics::fft::next_pow2;
use crate::numerics::{LinearMap, Tensor};

/// Angle sampling of a (possibly limited-angle) parallel-beam scan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub num_detectors: usize,
    /// Radians in `[0, π)`, ascending.
    pub angles: Vec<f64>,
    /// Width of the missing wedge in degrees.
    pub theta_miss: f64,
    /// Degrees between consecutive views.
    pub angle_step: f64,
}

impl Geometry {
    /// Views at `0, step, 2 step, ...` up to `180 - theta_miss` degrees
    /// inclusive, never reaching 180.
    pub fn limited(num_detectors: usize, angle_step: f64, theta_miss: f64) -> Result<Self> {
        if !(angle_step > 0.0 && angle_step < 180.0) {
            return Err(Error::InvalidArgument(format!("angle step {angle_step} outside (0, 180)")));
        }
        if !(0.0..180.0).contains(&theta_miss) {
            return Err(Error::InvalidArgument(format!("missing wedge {theta_miss} outside [0, 180)")));
        }
        let last = 180.0 - theta_miss;
        let mut angles = Vec::new();
        for k in 0.. {
            let deg = k as f64 * angle_step;
            if deg > last + 1e-9 || deg >= 180.0 - 1e-9 {
                break;
            }
            angles.push(deg.to_radians());
        }
        let g = Self {
            num_detectors,
            angles,
            theta_miss,
            angle_step,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn full(num_detectors: usize, angle_step: f64) -> Result<Self> {
        Self::limited(num_detectors, angle_step, 0.0)
    }

    pub fn num_angles(&self) -> usize {
        self.angles.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_detectors < 2 {
            return Err(Error::GeometryMismatch(format!(
                "need at least 2 detectors, got {}",
                self.num_detectors
            )));
        }
        if self.angles.is_empty() {
            return Err(Error::GeometryMismatch("no projection angles".into()));
        }
        let ok_range = self.angles.iter().all(|a| (0.0..PI).contains(a));
        let ascending = self.angles.windows(2).all(|w| w[0] < w[1]);
        if !ok_range || !ascending {
            return Err(Error::GeometryMismatch("angles must be ascending within [0, π)".into()));
        }
        Ok(())
    }

    /// True when both geometries describe the same scan.
    pub fn matches(&self, other: &Geometry) -> bool {
        self.num_detectors == other.num_detectors
            && self.angles.len() == other.angles.len()
            && self.angles.iter().zip(&other.angles).all(|(a, b)| (a - b).abs() < 1e-12)
    }

    pub fn ensure_matches(&self, other: &Geometry) -> Result<()> {
        if self.matches(other) {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(format!(
                "{} views x {} detectors (wedge {}°) vs {} views x {} detectors (wedge {}°)",
                self.num_angles(),
                self.num_detectors,
                self.theta_miss,
                other.num_angles(),
                other.num_detectors,
                other.theta_miss
            )))
        }
    }

    /// FBP weight per view: the angular spacing in radians.
    pub fn angular_weight(&self) -> f64 {
        self.angle_step.to_radians()
    }
}

/// A square image, `pixels: [N, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pixels: Tensor,
}

impl Image {
    pub fn new(pixels: Tensor) -> Result<Self> {
        if pixels.ndim() != 2 {
            return shape_err(format!("image must be [H, W], got {:?}", pixels.shape()));
        }
        Ok(Self { pixels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            pixels: Tensor::zeros(&[height, width]),
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut Tensor {
        &mut self.pixels
    }

    pub fn into_tensor(self) -> Tensor {
        self.pixels
    }
}

/// Projection data, `values: [A, D]`, one row per view of `geometry`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    geometry: Geometry,
    values: Tensor,
}

impl Sinogram {
    pub fn new(geometry: Geometry, values: Tensor) -> Result<Self> {
        geometry.validate()?;
        let want = [geometry.num_angles(), geometry.num_detectors];
        if values.shape() != want {
            return shape_err(format!("sinogram must be {want:?}, got {:?}", values.shape()));
        }
        Ok(Self { geometry, values })
    }

    pub fn zeros(geometry: Geometry) -> Result<Self> {
        let values = Tensor::zeros(&[geometry.num_angles(), geometry.num_detectors]);
        Self::new(geometry, values)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Tensor {
        &mut self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    /// Keeps the rows whose angles appear in `geometry`.
    pub fn restrict(&self, geometry: &Geometry) -> Result<Sinogram> {
        if geometry.num_detectors != self.geometry.num_detectors {
            return Err(Error::GeometryMismatch("detector counts differ".into()));
        }
        let d = geometry.num_detectors;
        let mut out = Vec::with_capacity(geometry.num_angles() * d);
        for &a in &geometry.angles {
            let row = self
                .geometry
                .angles
                .iter()
                .position(|&b| (a - b).abs() < 1e-12)
                .ok_or_else(|| Error::GeometryMismatch(format!("angle {a} not present")))?;
            out.extend_from_slice(&self.values.data()[row * d..(row + 1) * d]);
        }
        Sinogram::new(geometry.clone(), Tensor::new(vec![geometry.num_angles(), d], out)?)
    }
}

/// Ramp-filter apodization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    #[default]
    None,
    Hann,
}

/// Discrete Ram-Lak kernel at integer offset `n` (unit detector spacing).
pub fn ram_lak(n: i64) -> f64 {
    if n == 0 {
        0.25
    } else if n % 2 == 0 {
        0.0
    } else {
        -1.0 / (PI * n as f64).powi(2)
    }
}

/// Row filter implementing the ramp for rows of `width` detectors.
///
/// The response is the transform of the Ram-Lak kernel truncated to the
/// zero-padded length, so filtering a single row equals linear convolution
/// with that kernel.
pub fn ramp_row_filter(width: usize, window: Window) -> Result<RowFilter> {
    let padded = next_pow2(2 * width.max(1));
    let kernel: Vec<f64> = (0..padded)
        .map(|i| {
            let n = if i <= padded / 2 { i as i64 } else { i as i64 - padded as i64 };
            ram_lak(n)
        })
        .collect();
    let spectrum = crate::numerics::fft_1d(&kernel)?;
    let base = spectrum
        .iter()
        .enumerate()
        .map(|(f, z)| {
            let fold = f.min(padded - f) as f64;
            let w = match window {
                Window::None => 1.0,
                Window::Hann => 0.5 * (1.0 + (2.0 * PI * fold / padded as f64).cos()),
            };
            z.re * w
        })
        .collect();
    RowFilter::new(width, base)
}

fn check_image(image: &Image, geom: &Geometry) -> Result<usize> {
    geom.validate()?;
    let n = image.height();
    if image.width() != n {
        return shape_err(format!("image must be square, got {}x{}", n, image.width()));
    }
    if geom.num_detectors != n {
        return Err(Error::GeometryMismatch(format!(
            "{} detectors for a {n}x{n} image",
            geom.num_detectors
        )));
    }
    Ok(n)
}

/// Precomputed per-image-size quantities shared by every ray.
struct RayGrid {
    n: usize,
    samples: usize,
    inside: Vec<bool>,
}

impl RayGrid {
    fn new(n: usize) -> Self {
        let c = (n as f64 - 1.0) / 2.0;
        let r2 = (n as f64 / 2.0).powi(2);
        let inside = (0..n * n)
            .map(|p| {
                let (i, j) = ((p / n) as f64 - c, (p % n) as f64 - c);
                i * i + j * j <= r2
            })
            .collect();
        // enough samples to cross the support circle plus one pixel of
        // interpolation margin; same parity as n so θ = 0 hits pixel centres
        let mut samples = n + 4;
        if (samples - n) % 2 == 1 {
            samples += 1;
        }
        Self { n, samples, inside }
    }

    /// Calls `f(pixel, weight)` for every bilinear tap along one ray.
    fn for_each_tap(&self, theta: f64, k: usize, mut f: impl FnMut(usize, f64)) {
        let n = self.n;
        let c = (n as f64 - 1.0) / 2.0;
        let r = k as f64 - c;
        let (sin, cos) = theta.sin_cos();
        let half = (self.samples as f64 - 1.0) / 2.0;
        for m in 0..self.samples {
            let s = m as f64 - half;
            let px = r * cos - s * sin + c;
            let py = r * sin + s * cos + c;
            let (j0, i0) = (px.floor(), py.floor());
            let (fx, fy) = (px - j0, py - i0);
            let (j0, i0) = (j0 as i64, i0 as i64);
            let taps = [
                (i0, j0, (1.0 - fy) * (1.0 - fx)),
                (i0, j0 + 1, (1.0 - fy) * fx),
                (i0 + 1, j0, fy * (1.0 - fx)),
                (i0 + 1, j0 + 1, fy * fx),
            ];
            for (i, j, w) in taps {
                if w == 0.0 || i < 0 || j < 0 || i >= n as i64 || j >= n as i64 {
                    continue;
                }
                let p = i as usize * n + j as usize;
                if self.inside[p] {
                    f(p, w);
                }
            }
        }
    }
}

fn project_into(grid: &RayGrid, angles: &[f64], image: &[f64], out: &mut [f64]) {
    let d = grid.n;
    for (a, &theta) in angles.iter().enumerate() {
        for k in 0..d {
            let mut acc = 0.0;
            grid.for_each_tap(theta, k, |p, w| acc += w * image[p]);
            out[a * d + k] = acc;
        }
    }
}

fn backproject_into(grid: &RayGrid, angles: &[f64], sino: &[f64], out: &mut [f64]) {
    let d = grid.n;
    out.fill(0.0);
    for (a, &theta) in angles.iter().enumerate() {
        for k in 0..d {
            let v = sino[a * d + k];
            if v != 0.0 {
                grid.for_each_tap(theta, k, |p, w| out[p] += w * v);
            }
        }
    }
}

/// Forward projection `A x`.
pub fn radon(image: &Image, geom: &Geometry) -> Result<Sinogram> {
    let n = check_image(image, geom)?;
    let grid = RayGrid::new(n);
    let mut out = vec![0.0; geom.num_angles() * n];
    project_into(&grid, &geom.angles, image.pixels().data(), &mut out);
    Sinogram::new(geom.clone(), Tensor::new(vec![geom.num_angles(), n], out)?)
}

/// Unfiltered back-projection `Aᵀ s`.
pub fn backproject(sino: &Sinogram) -> Result<Image> {
    let geom = sino.geometry();
    let n = geom.num_detectors;
    let grid = RayGrid::new(n);
    let mut out = vec![0.0; n * n];
    backproject_into(&grid, &geom.angles, sino.values().data(), &mut out);
    Image::new(Tensor::new(vec![n, n], out)?)
}

pub fn ramp_filter(sino: &Sinogram, window: Window) -> Result<Sinogram> {
    let filter = ramp_row_filter(sino.geometry().num_detectors, window)?;
    let filtered = filter.apply(sino.values().data(), filter.base())?;
    Sinogram::new(
        sino.geometry().clone(),
        Tensor::new(sino.values().shape().to_vec(), filtered)?,
    )
}

/// Filtered back-projection with the plain ramp.
pub fn fbp(sino: &Sinogram) -> Result<Image> {
    fbp_windowed(sino, Window::None)
}

/// Ramp filter, back-project, then weight each view by the angular step.
pub fn fbp_windowed(sino: &Sinogram, window: Window) -> Result<Image> {
    let bp = backproject(&ramp_filter(sino, window)?)?;
    let w = sino.geometry().angular_weight();
    Image::new(bp.into_tensor().scale(w))
}

/// The projector as an explicit sparse matrix, for repeated application
/// inside training loops. Rows are sinogram entries, columns are pixels.
pub struct RadonOperator {
    geometry: Geometry,
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl std::fmt::Debug for RadonOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RadonOperator")
            .field("n", &self.n)
            .field("views", &self.geometry.num_angles())
            .field("nnz", &self.vals.len())
            .finish()
    }
}

impl RadonOperator {
    pub fn new(geometry: &Geometry) -> Result<Self> {
        geometry.validate()?;
        let n = geometry.num_detectors;
        let grid = RayGrid::new(n);
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        let mut taps: Vec<(usize, f64)> = Vec::new();
        for &theta in &geometry.angles {
            for k in 0..n {
                taps.clear();
                grid.for_each_tap(theta, k, |p, w| taps.push((p, w)));
                taps.sort_by_key(|t| t.0);
                let mut last = usize::MAX;
                for &(p, w) in &taps {
                    if p == last {
                        *vals.last_mut().expect("merged tap") += w;
                    } else {
                        cols.push(p as u32);
                        vals.push(w);
                        last = p;
                    }
                }
                row_ptr.push(cols.len());
            }
        }
        Ok(Self {
            geometry: geometry.clone(),
            n,
            row_ptr,
            cols,
            vals,
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn image_size(&self) -> usize {
        self.n
    }

    pub fn forward(&self, image: &[f64], out: &mut [f64]) {
        for (row, o) in out.iter_mut().enumerate() {
            let (lo, hi) = (self.row_ptr[row], self.row_ptr[row + 1]);
            *o = self.cols[lo..hi]
                .iter()
                .zip(&self.vals[lo..hi])
                .map(|(&c, &w)| w * image[c as usize])
                .sum();
        }
    }

    pub fn transpose(&self, sino: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (row, &v) in sino.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let (lo, hi) = (self.row_ptr[row], self.row_ptr[row + 1]);
            for (&c, &w) in self.cols[lo..hi].iter().zip(&self.vals[lo..hi]) {
                out[c as usize] += w * v;
            }
        }
    }

    pub fn project(&self, image: &Image) -> Result<Sinogram> {
        check_image(image, &self.geometry)?;
        let mut out = vec![0.0; self.geometry.num_angles() * self.n];
        self.forward(image.pixels().data(), &mut out);
        Sinogram::new(
            self.geometry.clone(),
            Tensor::new(vec![self.geometry.num_angles(), self.n], out)?,
        )
    }
}

impl LinearMap for RadonOperator {
    fn name(&self) -> &str {
        "radon"
    }

    fn in_shape(&self) -> Vec<usize> {
        vec![self.n, self.n]
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.geometry.num_angles(), self.n]
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.forward(x, out)
    }

    fn apply_transpose(&self, y: &[f64], out: &mut [f64]) {
        self.transpose(y, out)
    }
}

/// `Aᵀ` of a shared [`RadonOperator`] as a graph map.
#[derive(Debug, Clone)]
pub struct BackProjector(pub Arc<RadonOperator>);

impl LinearMap for BackProjector {
    fn name(&self) -> &str {
        "backproject"
    }

    fn in_shape(&self) -> Vec<usize> {
        self.0.out_shape()
    }

    fn out_shape(&self) -> Vec<usize> {
        self.0.in_shape()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.0.transpose(x, out)
    }

    fn apply_transpose(&self, y: &[f64], out: &mut [f64]) {
        self.0.forward(y, out)
    }
}

/// Anti-aliased indicator of a centred disk of radius `radius` pixels.
pub fn disk_phantom(n: usize, radius: f64, density: f64) -> Image {
    const SS: usize = 8;
    let c = (n as f64 - 1.0) / 2.0;
    let t = Tensor::from_fn(&[n, n], |p| {
        let (i, j) = ((p / n) as f64 - c, (p % n) as f64 - c);
        if (i * i + j * j).sqrt() > radius + SQRT_2 {
            return 0.0;
        }
        let mut hits = 0;
        for a in 0..SS {
            for b in 0..SS {
                let y = i + (a as f64 + 0.5) / SS as f64 - 0.5;
                let x = j + (b as f64 + 0.5) / SS as f64 - 0.5;
                if x * x + y * y <= radius * radius {
                    hits += 1;
                }
            }
        }
        density * hits as f64 / (SS * SS) as f64
    });
    Image { pixels: t }
}
