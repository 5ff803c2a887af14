//! Dataset ingestion and synthesis.
//!
//! Ground-truth images are square, grayscale, scaled to [0, 1]. Measurements
//! are simulated once per (operator, noise, seed) and regenerate identically
//! from the same key. The synthetic generator produces smooth piecewise
//! structures placed uniformly at random, so the ensemble is invariant under
//! cyclic shifts (the assumption the equivariance loss exploits).

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{ReiError, Result};
use crate::noise::{sample_noise, NoiseParams, Purpose, RngStream, StreamKey};
use crate::operators::ForwardOperator;
use crate::tensor::Tensor;
use crate::trainer::{TaskKind, TrainItem};

#[derive(Clone, Debug)]
pub struct Dataset {
    /// Ground-truth [side, side] images in [0, 1].
    pub images: Vec<Tensor>,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub side: usize,
}

impl Dataset {
    pub fn split(images: Vec<Tensor>, train: usize, test: usize) -> Result<Dataset> {
        if images.len() < train + test {
            return Err(ReiError::Dataset(format!(
                "need {} images for the requested split, have {}",
                train + test,
                images.len()
            )));
        }
        let side = images[0].shape()[0];
        Ok(Dataset {
            train_idx: (0..train).collect(),
            test_idx: (train..train + test).collect(),
            images,
            side,
        })
    }

    /// Lifts a flat image into the channel layout the task expects.
    pub fn lift(task: TaskKind, img: &Tensor) -> Tensor {
        let (h, w) = (img.shape()[0], img.shape()[1]);
        match task {
            TaskKind::Inpaint | TaskKind::Ct => img.reshaped(vec![1, h, w]).unwrap(),
            TaskKind::Mri => {
                // Real image, zero imaginary channel.
                let mut data = img.data().to_vec();
                data.extend(std::iter::repeat(0.0).take(h * w));
                Tensor::from_vec(vec![2, h, w], data).unwrap()
            }
        }
    }

    /// Simulates measurements for the given indices. Item i's noise is keyed
    /// by (seed, item i), independent of the order of generation.
    pub fn materialize(
        &self,
        task: TaskKind,
        idx: &[usize],
        op: &dyn ForwardOperator,
        noise: &NoiseParams,
        seed: u64,
    ) -> Result<Vec<TrainItem>> {
        let stream = RngStream::new(seed);
        idx.iter()
            .map(|&i| {
                let x = Self::lift(task, &self.images[i]);
                let u = op.apply(&x)?;
                let mut rng = stream.rng(StreamKey::new(Purpose::MeasNoise, 0, i as u64));
                let y = sample_noise(noise, &u, &mut rng)?;
                Ok(TrainItem {
                    y,
                    x: Some(x),
                    u: Some(u),
                })
            })
            .collect()
    }
}

/// Smooth random images: Gaussian bumps, soft-edged rectangles and a gentle
/// global gradient, normalised to [0, 1].
pub fn synthetic_dataset(count: usize, side: usize, seed: u64) -> Dataset {
    let stream = RngStream::new(seed);
    let images = (0..count)
        .map(|i| {
            let mut rng = stream.rng(StreamKey::new(Purpose::Data, 0, i as u64));
            synthetic_image(side, &mut rng)
        })
        .collect();
    Dataset {
        train_idx: Vec::new(),
        test_idx: Vec::new(),
        images,
        side,
    }
}

fn synthetic_image(side: usize, rng: &mut ChaCha12Rng) -> Tensor {
    let s = side as f64;
    let nb = rng.gen_range(2..5);
    let bumps: Vec<(f64, f64, f64, f64)> = (0..nb)
        .map(|_| {
            (
                rng.gen_range(0.0..s),
                rng.gen_range(0.0..s),
                rng.gen_range(s / 12.0..s / 4.0),
                rng.gen_range(0.4..1.0),
            )
        })
        .collect();
    let nr = rng.gen_range(1..3);
    let rects: Vec<(f64, f64, f64, f64, f64)> = (0..nr)
        .map(|_| {
            (
                rng.gen_range(0.0..s),
                rng.gen_range(0.0..s),
                rng.gen_range(s / 8.0..s / 3.0),
                rng.gen_range(s / 8.0..s / 3.0),
                rng.gen_range(0.3..0.8),
            )
        })
        .collect();
    let (gx, gy) = (rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2));
    let soft = |d: f64| 1.0 / (1.0 + (d * 2.0).exp());
    let mut data = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let (yf, xf) = (y as f64, x as f64);
            let mut v = 0.25 + gx * (xf / s - 0.5) + gy * (yf / s - 0.5);
            for &(by, bx, w, a) in &bumps {
                // Wrap-around distance keeps the ensemble shift-invariant.
                let dy = (yf - by).abs().min(s - (yf - by).abs());
                let dx = (xf - bx).abs().min(s - (xf - bx).abs());
                v += a * (-(dy * dy + dx * dx) / (2.0 * w * w)).exp();
            }
            for &(ry, rx, hh, ww, a) in &rects {
                let dy = (yf - ry).abs().min(s - (yf - ry).abs());
                let dx = (xf - rx).abs().min(s - (xf - rx).abs());
                v += a * soft(dy - hh / 2.0) * soft(dx - ww / 2.0) * 4.0 * 0.25;
            }
            data[y * side + x] = v;
        }
    }
    // Normalise to [0, 1].
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &data {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = (hi - lo).max(1e-12);
    for v in data.iter_mut() {
        *v = (*v - lo) / range;
    }
    Tensor::from_vec(vec![side, side], data).unwrap()
}

/// The classic head phantom: ten ellipses with signed intensities, scaled to
/// [0, 1]. Supersampled and softened by a one-pixel Gaussian so that the
/// phantom is band-limited to the grid; hairline features of the analytic
/// table are narrower than a pixel at desk-scale resolutions and would say
/// more about aliasing than about any operator under test.
pub fn shepp_logan(side: usize) -> Tensor {
    // (intensity, a, b, x0, y0, phi_degrees) in the [-1, 1]^2 square.
    const E: [(f64, f64, f64, f64, f64, f64); 10] = [
        (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
        (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
        (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
        (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
        (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
        (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
        (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
        (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
        (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
        (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
    ];
    let s = side as f64;
    let mut data = vec![0.0; side * side];
    // 4x4 supersampling softens the one-pixel ellipse boundaries, which would
    // otherwise dominate the energy at desk-scale resolutions.
    const SS: usize = 4;
    for py in 0..side {
        for px in 0..side {
            let mut v = 0.0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let fx = px as f64 + (sx as f64 + 0.5) / SS as f64 - 0.5;
                    let fy = py as f64 + (sy as f64 + 0.5) / SS as f64 - 0.5;
                    let x = (fx - (s - 1.0) / 2.0) / (s / 2.0);
                    let y = -((fy - (s - 1.0) / 2.0) / (s / 2.0));
                    for &(a, ea, eb, x0, y0, phi) in &E {
                        let th = phi.to_radians();
                        let (ct, st) = (th.cos(), th.sin());
                        let xr = (x - x0) * ct + (y - y0) * st;
                        let yr = -(x - x0) * st + (y - y0) * ct;
                        if (xr / ea).powi(2) + (yr / eb).powi(2) <= 1.0 {
                            v += a;
                        }
                    }
                }
            }
            data[py * side + px] = v / (SS * SS) as f64;
        }
    }
    let soft = gaussian_soften(&Tensor::from_vec(vec![side, side], data).unwrap(), 1.0);
    let hi = soft.data().iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    soft.map(|v| v.max(0.0) / hi)
}

/// Separable Gaussian soften with edge clamping.
fn gaussian_soften(img: &Tensor, sigma: f64) -> Tensor {
    let n = img.shape()[0];
    let w = img.shape()[1];
    let r = (3.0 * sigma).ceil() as isize;
    let kern: Vec<f64> = (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let ksum: f64 = kern.iter().sum();
    let pass = |src: &[f64], rows: usize, cols: usize, horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; rows * cols];
        for y in 0..rows as isize {
            for x in 0..cols as isize {
                let mut acc = 0.0;
                for (ki, kv) in kern.iter().enumerate() {
                    let off = ki as isize - r;
                    let (sy, sx) = if horizontal {
                        (y, (x + off).clamp(0, cols as isize - 1))
                    } else {
                        ((y + off).clamp(0, rows as isize - 1), x)
                    };
                    acc += kv * src[(sy * cols as isize + sx) as usize];
                }
                out[(y * cols as isize + x) as usize] = acc / ksum;
            }
        }
        out
    };
    let h = pass(img.data(), n, w, true);
    Tensor::from_vec(vec![n, w], pass(&h, n, w, false)).unwrap()
}

/// Loads a directory of grayscale images (PNG/PGM) or raw little-endian f64
/// tensors with a JSON sidecar; center-crops to square and resizes to `side`.
pub fn load_dataset(path: &Path, side: usize) -> Result<Vec<Tensor>> {
    let mut files: Vec<_> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png" | "pgm" | "pnm" | "f64")
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(ReiError::Dataset(format!(
            "no loadable images under {}",
            path.display()
        )));
    }
    files.iter().map(|f| load_image(f, side)).collect()
}

fn load_image(path: &Path, side: usize) -> Result<Tensor> {
    let raw = if path.extension().and_then(|e| e.to_str()) == Some("f64") {
        load_raw_f64(path)?
    } else {
        let img = image::open(path)
            .map_err(|e| ReiError::Dataset(format!("{}: {e}", path.display())))?
            .to_luma16();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data: Vec<f64> = img.into_raw().iter().map(|&v| v as f64 / 65535.0).collect();
        Tensor::from_vec(vec![h, w], data)?
    };
    let cropped = center_crop_square(&raw);
    let resized = bilinear_resize(&cropped, side, side);
    // Scale to [0, 1] regardless of source range. A near-degenerate range is
    // interpolation dust on a constant image; rescaling it would blow the
    // dust up to full contrast.
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in resized.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi - lo < 1e-9 * hi.abs().max(1.0) {
        return Ok(resized.map(|_| lo.clamp(0.0, 1.0)));
    }
    Ok(resized.map(|v| (v - lo) / (hi - lo)))
}

fn load_raw_f64(path: &Path) -> Result<Tensor> {
    #[derive(serde::Deserialize)]
    struct Sidecar {
        shape: Vec<usize>,
        dtype: String,
    }
    let sidecar_path = path.with_extension("json");
    let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(&sidecar_path)?)?;
    if sidecar.dtype != "f64le" {
        return Err(ReiError::Dataset(format!("unsupported dtype {}", sidecar.dtype)));
    }
    let bytes = fs::read(path)?;
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(sidecar.shape, data)
}

pub fn center_crop_square(x: &Tensor) -> Tensor {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let side = h.min(w);
    let (oy, ox) = ((h - side) / 2, (w - side) / 2);
    Tensor::from_fn(&[side, side], |i| {
        let (y, xx) = (i / side, i % side);
        x.data()[(y + oy) * w + (xx + ox)]
    })
}

/// Bilinear resampling with half-pixel centre alignment.
pub fn bilinear_resize(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let (sy, sx) = (h as f64 / oh as f64, w as f64 / ow as f64);
    Tensor::from_fn(&[oh, ow], |i| {
        let (yo, xo) = ((i / ow) as f64, (i % ow) as f64);
        let fy = ((yo + 0.5) * sy - 0.5).clamp(0.0, h as f64 - 1.0);
        let fx = ((xo + 0.5) * sx - 0.5).clamp(0.0, w as f64 - 1.0);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (ay, ax) = (fy - y0 as f64, fx - x0 as f64);
        let v00 = x.data()[y0 * w + x0];
        let v01 = x.data()[y0 * w + x1];
        let v10 = x.data()[y1 * w + x0];
        let v11 = x.data()[y1 * w + x1];
        v00 * (1.0 - ay) * (1.0 - ax) + v01 * (1.0 - ay) * ax + v10 * ay * (1.0 - ax)
            + v11 * ay * ax
    })
}

/// 8-bit binary PGM, values clamped to [0, 1].
pub fn write_pgm(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out)?;
    Ok(())
}
