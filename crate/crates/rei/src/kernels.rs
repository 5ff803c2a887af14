//! Raw numeric kernels shared by the tape ops and the value-level model path.
//!
//! All convolutions are 3x3 with zero padding 1 ("same" size). Layouts are
//! row-major: images [c, h, w], weights [cout, cin, 3, 3].

/// out[co,y,x] = bias[co] + sum_{ci,ky,kx} w[co,ci,ky,kx] * x[ci,y+ky-1,x+kx-1]
pub fn conv3x3_forward(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    wgt: &[f64],
    cout: usize,
    bias: &[f64],
    out: &mut [f64],
) {
    debug_assert_eq!(x.len(), cin * h * w);
    debug_assert_eq!(wgt.len(), cout * cin * 9);
    debug_assert_eq!(bias.len(), cout);
    debug_assert_eq!(out.len(), cout * h * w);
    let plane = h * w;
    for co in 0..cout {
        let o = &mut out[co * plane..(co + 1) * plane];
        o.fill(bias[co]);
        for ci in 0..cin {
            let xin = &x[ci * plane..(ci + 1) * plane];
            let wbase = (co * cin + ci) * 9;
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let wv = wgt[wbase + ky * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    // y + ky - 1 and x + kx - 1 must stay in bounds.
                    let (y0, y1) = (1usize.saturating_sub(ky), (h + 1 - ky).min(h));
                    let (x0, x1) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let orow = &mut o[y * w + x0..y * w + x1];
                        let xrow = &xin[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                        for (ov, xv) in orow.iter_mut().zip(xrow) {
                            *ov += wv * xv;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates d x for the convolution above; exact adjoint of the forward loop.
pub fn conv3x3_grad_input(
    dout: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    wgt: &[f64],
    cout: usize,
    dx: &mut [f64],
) {
    let plane = h * w;
    for co in 0..cout {
        let d = &dout[co * plane..(co + 1) * plane];
        for ci in 0..cin {
            let dxin = &mut dx[ci * plane..(ci + 1) * plane];
            let wbase = (co * cin + ci) * 9;
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let wv = wgt[wbase + ky * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (y0, y1) = (1usize.saturating_sub(ky), (h + 1 - ky).min(h));
                    let (x0, x1) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let drow = &d[y * w + x0..y * w + x1];
                        let xrow = &mut dxin[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                        for (xv, dv) in xrow.iter_mut().zip(drow) {
                            *xv += wv * dv;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates d w and d bias.
pub fn conv3x3_grad_weights(
    dout: &[f64],
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    dwgt: &mut [f64],
    dbias: &mut [f64],
) {
    let plane = h * w;
    for co in 0..cout {
        let d = &dout[co * plane..(co + 1) * plane];
        dbias[co] += d.iter().sum::<f64>();
        for ci in 0..cin {
            let xin = &x[ci * plane..(ci + 1) * plane];
            let wbase = (co * cin + ci) * 9;
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let (y0, y1) = (1usize.saturating_sub(ky), (h + 1 - ky).min(h));
                    let (x0, x1) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let drow = &d[y * w + x0..y * w + x1];
                        let xrow = &xin[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                        for (dv, xv) in drow.iter().zip(xrow) {
                            acc += dv * xv;
                        }
                    }
                    dwgt[wbase + ky * 3 + kx] += acc;
                }
            }
        }
    }
}

/// 2x2 average pool with stride 2; h and w must be even.
pub fn avgpool2_forward(x: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for ci in 0..c {
        let xin = &x[ci * h * w..(ci + 1) * h * w];
        let o = &mut out[ci * oh * ow..(ci + 1) * oh * ow];
        for y in 0..oh {
            for xo in 0..ow {
                let base = 2 * y * w + 2 * xo;
                o[y * ow + xo] =
                    0.25 * (xin[base] + xin[base + 1] + xin[base + w] + xin[base + w + 1]);
            }
        }
    }
}

pub fn avgpool2_backward(dout: &[f64], c: usize, h: usize, w: usize, dx: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for ci in 0..c {
        let d = &dout[ci * oh * ow..(ci + 1) * oh * ow];
        let dxin = &mut dx[ci * h * w..(ci + 1) * h * w];
        for y in 0..oh {
            for xo in 0..ow {
                let g = 0.25 * d[y * ow + xo];
                let base = 2 * y * w + 2 * xo;
                dxin[base] += g;
                dxin[base + 1] += g;
                dxin[base + w] += g;
                dxin[base + w + 1] += g;
            }
        }
    }
}

/// Nearest-neighbour 2x upsample.
pub fn upsample2_forward(x: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let (oh, ow) = (2 * h, 2 * w);
    for ci in 0..c {
        let xin = &x[ci * h * w..(ci + 1) * h * w];
        let o = &mut out[ci * oh * ow..(ci + 1) * oh * ow];
        for y in 0..h {
            for xo in 0..w {
                let v = xin[y * w + xo];
                let base = 2 * y * ow + 2 * xo;
                o[base] = v;
                o[base + 1] = v;
                o[base + ow] = v;
                o[base + ow + 1] = v;
            }
        }
    }
}

pub fn upsample2_backward(dout: &[f64], c: usize, h: usize, w: usize, dx: &mut [f64]) {
    let (oh, ow) = (2 * h, 2 * w);
    debug_assert_eq!(dout.len(), c * oh * ow);
    for ci in 0..c {
        let d = &dout[ci * oh * ow..(ci + 1) * oh * ow];
        let dxin = &mut dx[ci * h * w..(ci + 1) * h * w];
        for y in 0..h {
            for xo in 0..w {
                let base = 2 * y * ow + 2 * xo;
                dxin[y * w + xo] += d[base] + d[base + 1] + d[base + ow] + d[base + ow + 1];
            }
        }
    }
}

/// Bilinear rotation about the grid centre ((h-1)/2, (w-1)/2), gathering from
/// source coordinates; zero outside the grid. When `disk` is set, output
/// pixels outside the centred inscribed disk are zeroed, which keeps the map
/// near-isometric on disk-supported images.
pub fn rotate_bilinear(
    x: &[f64],
    h: usize,
    w: usize,
    angle: f64,
    disk: bool,
    out: &mut [f64],
) {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let r_max = (h.min(w) as f64 - 1.0) / 2.0;
    let r2 = r_max * r_max + 1e-9;
    let (s, c) = angle.sin_cos();
    for yo in 0..h {
        let dy = yo as f64 - cy;
        for xo in 0..w {
            let dx = xo as f64 - cx;
            let o = &mut out[yo * w + xo];
            *o = 0.0;
            if disk && dy * dy + dx * dx > r2 {
                continue;
            }
            let sx = cx + c * dx + s * dy;
            let sy = cy - s * dx + c * dy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (ix, iy) = (x0 as isize, y0 as isize);
            let mut acc = 0.0;
            for (oy, wy) in [(iy, 1.0 - fy), (iy + 1, fy)] {
                if oy < 0 || oy >= h as isize || wy == 0.0 {
                    continue;
                }
                for (ox, wx) in [(ix, 1.0 - fx), (ix + 1, fx)] {
                    if ox < 0 || ox >= w as isize || wx == 0.0 {
                        continue;
                    }
                    acc += wy * wx * x[oy as usize * w + ox as usize];
                }
            }
            *o = acc;
        }
    }
}

/// Exact adjoint of [`rotate_bilinear`]: scatters each output cotangent back
/// through the same interpolation weights. Accumulates into `dx_acc`.
pub fn rotate_bilinear_adjoint(
    g: &[f64],
    h: usize,
    w: usize,
    angle: f64,
    disk: bool,
    dx_acc: &mut [f64],
) {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let r_max = (h.min(w) as f64 - 1.0) / 2.0;
    let r2 = r_max * r_max + 1e-9;
    let (s, c) = angle.sin_cos();
    for yo in 0..h {
        let dy = yo as f64 - cy;
        for xo in 0..w {
            let dx = xo as f64 - cx;
            if disk && dy * dy + dx * dx > r2 {
                continue;
            }
            let gv = g[yo * w + xo];
            if gv == 0.0 {
                continue;
            }
            let sx = cx + c * dx + s * dy;
            let sy = cy - s * dx + c * dy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (ix, iy) = (x0 as isize, y0 as isize);
            for (oy, wy) in [(iy, 1.0 - fy), (iy + 1, fy)] {
                if oy < 0 || oy >= h as isize || wy == 0.0 {
                    continue;
                }
                for (ox, wx) in [(ix, 1.0 - fx), (ix + 1, fx)] {
                    if ox < 0 || ox >= w as isize || wx == 0.0 {
                        continue;
                    }
                    dx_acc[oy as usize * w + ox as usize] += wy * wx * gv;
                }
            }
        }
    }
}
