//! Training-time view generation: random square crops, flips, and
//! thin-plate-spline warps. Two independently sampled views of one image
//! feed the contrastive loss; the same geometric transform is always applied
//! to every channel of an image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct AugmentConfig {
    /// Square crop side as a fraction of the shorter image side.
    pub crop_min: f64,
    pub crop_max: f64,
    pub flip_h: f64,
    pub flip_v: f64,
    /// Control grid is tps_grid x tps_grid points over the unit square.
    pub tps_grid: usize,
    /// Maximum normalized control-point displacement; 0 disables TPS.
    pub tps_sigma: f64,
    /// Views are resized to out_size x out_size.
    pub out_size: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_min: 0.8,
            crop_max: 1.0,
            flip_h: 0.5,
            flip_v: 0.5,
            tps_grid: 4,
            tps_sigma: 0.05,
            out_size: 128,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.crop_min > 0.0 && self.crop_min <= self.crop_max && self.crop_max <= 1.0) {
            return Err(Error::config(format!(
                "crop fractions must satisfy 0 < min <= max <= 1, got {}..{}",
                self.crop_min, self.crop_max
            )));
        }
        if self.tps_sigma < 0.0 {
            return Err(Error::config("tps_sigma must be >= 0"));
        }
        if self.tps_grid < 2 {
            return Err(Error::config("tps_grid must be >= 2"));
        }
        if self.out_size == 0 {
            return Err(Error::config("out_size must be >= 1"));
        }
        Ok(())
    }
}

/// Per-sample augmentation seed: hash(global_seed, image_id, epoch).
pub fn sample_seed(global_seed: u64, image_id: &str, epoch: usize) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    eat(&global_seed.to_le_bytes());
    eat(image_id.as_bytes());
    eat(&(epoch as u64).to_le_bytes());
    h
}

/// Radial kernel of the thin-plate spline: U(r) = r^2 log(r^2), U(0) = 0.
fn tps_kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

/// A fitted thin-plate-spline map from output to input coordinates,
/// interpolating per-control-point displacements over a regular grid on the
/// unit square.
pub struct TpsWarp {
    points: Vec<(f64, f64)>,
    /// Kernel weights and affine part per output dimension (x, y).
    weights: [Vec<f64>; 2],
    affine: [[f64; 3]; 2],
}

/// Control points of a g x g grid over the unit square, row-major.
pub fn tps_grid_points(g: usize) -> Vec<(f64, f64)> {
    let mut pts = Vec::with_capacity(g * g);
    for row in 0..g {
        for col in 0..g {
            pts.push((
                col as f64 / (g - 1) as f64,
                row as f64 / (g - 1) as f64,
            ));
        }
    }
    pts
}

impl TpsWarp {
    /// Solve the TPS interpolation system for f(p_i) = p_i + d_i.
    pub fn fit(grid: usize, displacements: &[(f64, f64)]) -> Result<Self> {
        if grid < 2 {
            return Err(Error::Solver("TPS grid must be at least 2x2".into()));
        }
        let points = tps_grid_points(grid);
        let n = points.len();
        if displacements.len() != n {
            return Err(Error::Dimension {
                op: "tps_warp",
                lhs: vec![displacements.len()],
                rhs: vec![n],
            });
        }
        for d in displacements {
            if !d.0.is_finite() || !d.1.is_finite() {
                return Err(Error::NonFinite { op: "tps_warp" });
            }
        }
        let m = n + 3;
        // [K P; P^T 0] with K_ij = U(|p_i - p_j|^2), P_i = (1, x_i, y_i)
        let mut a = vec![0.0f64; m * m];
        for i in 0..n {
            for j in 0..n {
                let dx = points[i].0 - points[j].0;
                let dy = points[i].1 - points[j].1;
                a[i * m + j] = tps_kernel(dx * dx + dy * dy);
            }
            a[i * m + n] = 1.0;
            a[i * m + n + 1] = points[i].0;
            a[i * m + n + 2] = points[i].1;
            a[(n) * m + i] = 1.0;
            a[(n + 1) * m + i] = points[i].0;
            a[(n + 2) * m + i] = points[i].1;
        }
        let mut rhs = vec![0.0f64; m * 2];
        for i in 0..n {
            rhs[i * 2] = points[i].0 + displacements[i].0;
            rhs[i * 2 + 1] = points[i].1 + displacements[i].1;
        }
        let sol = solve_dense(&mut a, &mut rhs, m, 2)?;
        let mut weights = [vec![0.0; n], vec![0.0; n]];
        for i in 0..n {
            weights[0][i] = sol[i * 2];
            weights[1][i] = sol[i * 2 + 1];
        }
        let affine = [
            [sol[n * 2], sol[(n + 1) * 2], sol[(n + 2) * 2]],
            [sol[n * 2 + 1], sol[(n + 1) * 2 + 1], sol[(n + 2) * 2 + 1]],
        ];
        Ok(TpsWarp {
            points,
            weights,
            affine,
        })
    }

    /// Map a normalized output coordinate through the warp.
    pub fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let mut out = [0.0f64; 2];
        for dim in 0..2 {
            let mut v = self.affine[dim][0] + self.affine[dim][1] * x + self.affine[dim][2] * y;
            for (i, p) in self.points.iter().enumerate() {
                let dx = x - p.0;
                let dy = y - p.1;
                v += self.weights[dim][i] * tps_kernel(dx * dx + dy * dy);
            }
            out[dim] = v;
        }
        (out[0], out[1])
    }
}

/// Gaussian elimination with partial pivoting; `a` is m x m, `rhs` holds
/// `cols` stacked columns (row-major m x cols). Returns the solution.
fn solve_dense(a: &mut [f64], rhs: &mut [f64], m: usize, cols: usize) -> Result<Vec<f64>> {
    for col in 0..m {
        let mut pivot = col;
        let mut best = a[col * m + col].abs();
        for row in col + 1..m {
            let v = a[row * m + col].abs();
            if v > best {
                best = v;
                pivot = row;
            }
        }
        if best < 1e-12 {
            return Err(Error::Solver("singular TPS system".into()));
        }
        if pivot != col {
            for j in 0..m {
                a.swap(col * m + j, pivot * m + j);
            }
            for j in 0..cols {
                rhs.swap(col * cols + j, pivot * cols + j);
            }
        }
        let diag = a[col * m + col];
        for row in col + 1..m {
            let factor = a[row * m + col] / diag;
            if factor == 0.0 {
                continue;
            }
            for j in col..m {
                a[row * m + j] -= factor * a[col * m + j];
            }
            for j in 0..cols {
                rhs[row * cols + j] -= factor * rhs[col * cols + j];
            }
        }
    }
    let mut sol = vec![0.0f64; m * cols];
    for row in (0..m).rev() {
        for j in 0..cols {
            let mut acc = rhs[row * cols + j];
            for k in row + 1..m {
                acc -= a[row * m + k] * sol[k * cols + j];
            }
            sol[row * cols + j] = acc / a[row * m + row];
        }
    }
    Ok(sol)
}

/// Bilinear sample of channel plane `data` (h x w) at pixel coordinates,
/// zero fill outside the frame.
fn bilinear_at<T: Scalar>(data: &[T], h: usize, w: usize, x: f64, y: f64) -> T {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let fetch = |xi: i64, yi: i64| -> f64 {
        if xi < 0 || yi < 0 || xi >= w as i64 || yi >= h as i64 {
            0.0
        } else {
            data[yi as usize * w + xi as usize].to_f64()
        }
    };
    let (x0i, y0i) = (x0 as i64, y0 as i64);
    let v = fetch(x0i, y0i) * (1.0 - fx) * (1.0 - fy)
        + fetch(x0i + 1, y0i) * fx * (1.0 - fy)
        + fetch(x0i, y0i + 1) * (1.0 - fx) * fy
        + fetch(x0i + 1, y0i + 1) * fx * fy;
    T::from_f64(v)
}

/// Warp all channels of a [C,H,W] tensor by one TPS deformation field:
/// each output pixel's normalized coordinate is mapped through the warp and
/// the input is sampled bilinearly with zero fill.
pub fn tps_warp<T: Scalar>(
    img: &Tensor<T>,
    grid: usize,
    displacements: &[(f64, f64)],
    out_size: (usize, usize),
) -> Result<Tensor<T>> {
    if img.shape().len() != 3 {
        return Err(Error::contract(format!(
            "tps_warp expects [C,H,W], got {:?}",
            img.shape()
        )));
    }
    let warp = TpsWarp::fit(grid, displacements)?;
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let (oh, ow) = out_size;
    // precompute the field once; all channels share it
    let mut field = Vec::with_capacity(oh * ow);
    for row in 0..oh {
        let qy = (row as f64 + 0.5) / oh as f64;
        for col in 0..ow {
            let qx = (col as f64 + 0.5) / ow as f64;
            let (sx, sy) = warp.map(qx, qy);
            field.push((sx * w as f64 - 0.5, sy * h as f64 - 0.5));
        }
    }
    let mut out = vec![T::ZERO; c * oh * ow];
    for ch in 0..c {
        let plane = &img.data()[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (d, &(sx, sy)) in dst.iter_mut().zip(&field) {
            *d = bilinear_at(plane, h, w, sx, sy);
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Resize a [C,H,W] tensor bilinearly.
pub fn resize_bilinear<T: Scalar>(img: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if h == oh && w == ow {
        return Ok(img.clone());
    }
    let mut out = vec![T::ZERO; c * oh * ow];
    for ch in 0..c {
        let plane = &img.data()[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for row in 0..oh {
            let sy = (row as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
            for col in 0..ow {
                let sx = (col as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
                // clamp into the frame so resize never invents fill zeros
                let sx = sx.clamp(0.0, (w - 1) as f64);
                let sy = sy.clamp(0.0, (h - 1) as f64);
                dst[row * ow + col] = bilinear_at(plane, h, w, sx, sy);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

fn crop<T: Scalar>(img: &Tensor<T>, top: usize, left: usize, size: usize) -> Tensor<T> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    debug_assert!(top + size <= h && left + size <= w);
    Tensor::from_fn(&[c, size, size], |i| {
        let ch = i / (size * size);
        let r = (i / size) % size;
        let col = i % size;
        img.data()[(ch * h + top + r) * w + left + col]
    })
}

fn flip_horizontal<T: Scalar>(img: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    Tensor::from_fn(&[c, h, w], |i| {
        let ch = i / (h * w);
        let r = (i / w) % h;
        let col = i % w;
        img.data()[(ch * h + r) * w + (w - 1 - col)]
    })
}

fn flip_vertical<T: Scalar>(img: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    Tensor::from_fn(&[c, h, w], |i| {
        let ch = i / (h * w);
        let r = (i / w) % h;
        let col = i % w;
        img.data()[(ch * h + (h - 1 - r)) * w + col]
    })
}

fn one_view<T: Scalar>(img: &Tensor<T>, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let short = h.min(w);
    let fraction = if cfg.crop_min == cfg.crop_max {
        cfg.crop_min
    } else {
        rng.gen_range(cfg.crop_min..cfg.crop_max)
    };
    let size = ((short as f64 * fraction).round() as usize).max(1);
    if size > short {
        return Err(Error::contract(format!(
            "crop window {size} exceeds image side {short}"
        )));
    }
    let top = if h > size { rng.gen_range(0..=h - size) } else { 0 };
    let left = if w > size { rng.gen_range(0..=w - size) } else { 0 };
    let mut view = crop(img, top, left, size);
    view = resize_bilinear(&view, cfg.out_size, cfg.out_size)?;
    if rng.gen_range(0.0..1.0) < cfg.flip_h {
        view = flip_horizontal(&view);
    }
    if rng.gen_range(0.0..1.0) < cfg.flip_v {
        view = flip_vertical(&view);
    }
    if cfg.tps_sigma > 0.0 {
        let n = cfg.tps_grid * cfg.tps_grid;
        let displacements: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                (
                    rng.gen_range(-cfg.tps_sigma..=cfg.tps_sigma),
                    rng.gen_range(-cfg.tps_sigma..=cfg.tps_sigma),
                )
            })
            .collect();
        view = tps_warp(&view, cfg.tps_grid, &displacements, (cfg.out_size, cfg.out_size))?;
    }
    Ok(view)
}

/// Two independently sampled augmentations of one image, deterministic in
/// the seed. Both views keep the image's channel set.
pub fn make_view_pair<T: Scalar>(
    img: &Tensor<T>,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    cfg.validate()?;
    if img.shape().len() != 3 || img.shape()[1] < 2 || img.shape()[2] < 2 {
        return Err(Error::contract(format!(
            "augment needs a [C,H,W] image at least 2x2, got {:?}",
            img.shape()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = one_view(img, cfg, &mut rng)?;
    let b = one_view(img, cfg, &mut rng)?;
    Ok((a, b))
}

/// One augmented view (the supervised-only path needs a single view).
pub fn make_view<T: Scalar>(img: &Tensor<T>, cfg: &AugmentConfig, seed: u64) -> Result<Tensor<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    one_view(img, cfg, &mut rng)
}
