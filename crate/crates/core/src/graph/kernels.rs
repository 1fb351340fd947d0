//! Batched forward and reverse kernels. Plain loops, no lowering tricks.
//!
//! All activations are `[n, ...per-sample shape]` and row-major.

use crate::graph::layer::Window;

pub fn dense_forward(x: &[f64], w: &[f64], b: &[f64], n: usize, inputs: usize, units: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * units];
    for s in 0..n {
        let xs = &x[s * inputs..(s + 1) * inputs];
        for u in 0..units {
            let row = &w[u * inputs..(u + 1) * inputs];
            let mut acc = b[u];
            for (wi, xi) in row.iter().zip(xs) {
                acc += wi * xi;
            }
            y[s * units + u] = acc;
        }
    }
    y
}

/// Returns `(dx, dw, db)`.
pub fn dense_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    n: usize,
    inputs: usize,
    units: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; n * inputs];
    let mut dw = vec![0.0; units * inputs];
    let mut db = vec![0.0; units];
    for s in 0..n {
        let xs = &x[s * inputs..(s + 1) * inputs];
        let dxs = &mut dx[s * inputs..(s + 1) * inputs];
        for u in 0..units {
            let g = gy[s * units + u];
            if g == 0.0 {
                continue;
            }
            db[u] += g;
            let row = &w[u * inputs..(u + 1) * inputs];
            let drow = &mut dw[u * inputs..(u + 1) * inputs];
            for i in 0..inputs {
                dxs[i] += row[i] * g;
                drow[i] += xs[i] * g;
            }
        }
    }
    (dx, dw, db)
}

/// Input rows touched by output rows `0..out` at kernel offset `k`:
/// the half-open range of output indices whose input index is in bounds.
fn valid_range(out: usize, input: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // input index = o * stride + k - pad, need 0 <= idx < input
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if input + pad > k {
        ((input + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub fn conv_forward(x: &[f64], w: &[f64], b: &[f64], n: usize, g: &Window) -> Vec<f64> {
    let (ih, iw, oh, ow) = (g.in_h, g.in_w, g.out_h, g.out_w);
    let in_plane = ih * iw;
    let out_plane = oh * ow;
    let mut y = vec![0.0; n * g.out_c * out_plane];
    for s in 0..n {
        let xs = &x[s * g.in_c * in_plane..(s + 1) * g.in_c * in_plane];
        for o in 0..g.out_c {
            let ys = &mut y[(s * g.out_c + o) * out_plane..(s * g.out_c + o + 1) * out_plane];
            ys.iter_mut().for_each(|v| *v = b[o]);
            for c in 0..g.in_c {
                let xc = &xs[c * in_plane..(c + 1) * in_plane];
                for ky in 0..g.kh {
                    let (oy0, oy1) = valid_range(oh, ih, ky, g.stride, g.pad_top);
                    for kx in 0..g.kw {
                        let wv = w[((o * g.in_c + c) * g.kh + ky) * g.kw + kx];
                        let (ox0, ox1) = valid_range(ow, iw, kx, g.stride, g.pad_left);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad_top;
                            let xrow = &xc[iy * iw..(iy + 1) * iw];
                            let yrow = &mut ys[oy * ow..(oy + 1) * ow];
                            for ox in ox0..ox1 {
                                yrow[ox] += wv * xrow[ox * g.stride + kx - g.pad_left];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn conv_backward(x: &[f64], w: &[f64], gy: &[f64], n: usize, g: &Window) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (ih, iw, oh, ow) = (g.in_h, g.in_w, g.out_h, g.out_w);
    let in_plane = ih * iw;
    let out_plane = oh * ow;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.out_c];
    for s in 0..n {
        let xs = &x[s * g.in_c * in_plane..(s + 1) * g.in_c * in_plane];
        let dxs = &mut dx[s * g.in_c * in_plane..(s + 1) * g.in_c * in_plane];
        for o in 0..g.out_c {
            let gys = &gy[(s * g.out_c + o) * out_plane..(s * g.out_c + o + 1) * out_plane];
            db[o] += gys.iter().sum::<f64>();
            for c in 0..g.in_c {
                let xc = &xs[c * in_plane..(c + 1) * in_plane];
                let dxc = &mut dxs[c * in_plane..(c + 1) * in_plane];
                for ky in 0..g.kh {
                    let (oy0, oy1) = valid_range(oh, ih, ky, g.stride, g.pad_top);
                    for kx in 0..g.kw {
                        let wi = ((o * g.in_c + c) * g.kh + ky) * g.kw + kx;
                        let wv = w[wi];
                        let (ox0, ox1) = valid_range(ow, iw, kx, g.stride, g.pad_left);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad_top;
                            for ox in ox0..ox1 {
                                let ix = ox * g.stride + kx - g.pad_left;
                                let gv = gys[oy * ow + ox];
                                acc += gv * xc[iy * iw + ix];
                                dxc[iy * iw + ix] += wv * gv;
                            }
                        }
                        dw[wi] += acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

pub fn depthwise_forward(x: &[f64], w: &[f64], b: &[f64], n: usize, g: &Window) -> Vec<f64> {
    let (ih, iw, oh, ow) = (g.in_h, g.in_w, g.out_h, g.out_w);
    let in_plane = ih * iw;
    let out_plane = oh * ow;
    let mut y = vec![0.0; n * g.in_c * out_plane];
    for s in 0..n {
        for c in 0..g.in_c {
            let xc = &x[(s * g.in_c + c) * in_plane..(s * g.in_c + c + 1) * in_plane];
            let yc = &mut y[(s * g.in_c + c) * out_plane..(s * g.in_c + c + 1) * out_plane];
            yc.iter_mut().for_each(|v| *v = b[c]);
            for ky in 0..g.kh {
                let (oy0, oy1) = valid_range(oh, ih, ky, g.stride, g.pad_top);
                for kx in 0..g.kw {
                    let wv = w[(c * g.kh + ky) * g.kw + kx];
                    let (ox0, ox1) = valid_range(ow, iw, kx, g.stride, g.pad_left);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad_top;
                        for ox in ox0..ox1 {
                            yc[oy * ow + ox] += wv * xc[iy * iw + ox * g.stride + kx - g.pad_left];
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn depthwise_backward(x: &[f64], w: &[f64], gy: &[f64], n: usize, g: &Window) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (ih, iw, oh, ow) = (g.in_h, g.in_w, g.out_h, g.out_w);
    let in_plane = ih * iw;
    let out_plane = oh * ow;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.in_c];
    for s in 0..n {
        for c in 0..g.in_c {
            let base_in = (s * g.in_c + c) * in_plane;
            let gyc = &gy[(s * g.in_c + c) * out_plane..(s * g.in_c + c + 1) * out_plane];
            db[c] += gyc.iter().sum::<f64>();
            for ky in 0..g.kh {
                let (oy0, oy1) = valid_range(oh, ih, ky, g.stride, g.pad_top);
                for kx in 0..g.kw {
                    let wi = (c * g.kh + ky) * g.kw + kx;
                    let wv = w[wi];
                    let (ox0, ox1) = valid_range(ow, iw, kx, g.stride, g.pad_left);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad_top;
                        for ox in ox0..ox1 {
                            let xi = base_in + iy * iw + ox * g.stride + kx - g.pad_left;
                            let gv = gyc[oy * ow + ox];
                            acc += gv * x[xi];
                            dx[xi] += wv * gv;
                        }
                    }
                    dw[wi] += acc;
                }
            }
        }
    }
    (dx, dw, db)
}

/// Visits the in-bounds input positions of every pooling window.
/// `f(plane_offset, out_index, input_indices)` with indices relative to the plane.
fn for_each_window(g: &Window, mut f: impl FnMut(usize, &[usize])) {
    let mut idx = Vec::with_capacity(g.kh * g.kw);
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            idx.clear();
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                if iy < 0 || iy >= g.in_h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                    if ix < 0 || ix >= g.in_w as isize {
                        continue;
                    }
                    idx.push(iy as usize * g.in_w + ix as usize);
                }
            }
            f(oy * g.out_w + ox, &idx);
        }
    }
}

pub fn max_pool_forward(x: &[f64], n: usize, g: &Window) -> Vec<f64> {
    let (in_plane, out_plane) = (g.in_h * g.in_w, g.out_h * g.out_w);
    let mut y = vec![0.0; n * g.in_c * out_plane];
    for p in 0..n * g.in_c {
        let xc = &x[p * in_plane..(p + 1) * in_plane];
        let yc = &mut y[p * out_plane..(p + 1) * out_plane];
        for_each_window(g, |o, idx| {
            yc[o] = idx.iter().map(|&i| xc[i]).fold(f64::NEG_INFINITY, f64::max);
        });
    }
    y
}

/// Routes each output gradient to the first maximal input of its window.
pub fn max_pool_backward(x: &[f64], gy: &[f64], n: usize, g: &Window) -> Vec<f64> {
    let (in_plane, out_plane) = (g.in_h * g.in_w, g.out_h * g.out_w);
    let mut dx = vec![0.0; x.len()];
    for p in 0..n * g.in_c {
        let xc = &x[p * in_plane..(p + 1) * in_plane];
        let gyc = &gy[p * out_plane..(p + 1) * out_plane];
        let dxc = &mut dx[p * in_plane..(p + 1) * in_plane];
        for_each_window(g, |o, idx| {
            let mut best = idx[0];
            for &i in &idx[1..] {
                if xc[i] > xc[best] {
                    best = i;
                }
            }
            dxc[best] += gyc[o];
        });
    }
    dx
}

/// Average over the in-bounds part of each window (padding not counted).
pub fn avg_pool_forward(x: &[f64], n: usize, g: &Window) -> Vec<f64> {
    let (in_plane, out_plane) = (g.in_h * g.in_w, g.out_h * g.out_w);
    let mut y = vec![0.0; n * g.in_c * out_plane];
    for p in 0..n * g.in_c {
        let xc = &x[p * in_plane..(p + 1) * in_plane];
        let yc = &mut y[p * out_plane..(p + 1) * out_plane];
        for_each_window(g, |o, idx| {
            yc[o] = idx.iter().map(|&i| xc[i]).sum::<f64>() / idx.len() as f64;
        });
    }
    y
}

pub fn avg_pool_backward(x_len: usize, gy: &[f64], n: usize, g: &Window) -> Vec<f64> {
    let (in_plane, out_plane) = (g.in_h * g.in_w, g.out_h * g.out_w);
    let mut dx = vec![0.0; x_len];
    for p in 0..n * g.in_c {
        let gyc = &gy[p * out_plane..(p + 1) * out_plane];
        let dxc = &mut dx[p * in_plane..(p + 1) * in_plane];
        for_each_window(g, |o, idx| {
            let share = gyc[o] / idx.len() as f64;
            for &i in idx {
                dxc[i] += share;
            }
        });
    }
    dx
}

pub fn global_avg_forward(x: &[f64], planes: usize, plane: usize) -> Vec<f64> {
    (0..planes)
        .map(|p| x[p * plane..(p + 1) * plane].iter().sum::<f64>() / plane as f64)
        .collect()
}

pub fn global_avg_backward(gy: &[f64], plane: usize) -> Vec<f64> {
    gy.iter()
        .flat_map(|&g| std::iter::repeat_n(g / plane as f64, plane))
        .collect()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_forward(x: &[f64], rows: usize, width: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for r in 0..rows {
        let xs = &x[r * width..(r + 1) * width];
        let ys = &mut y[r * width..(r + 1) * width];
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (yi, xi) in ys.iter_mut().zip(xs) {
            *yi = (xi - max).exp();
            total += *yi;
        }
        ys.iter_mut().for_each(|v| *v /= total);
    }
    y
}

/// `dx = y * (gy - <gy, y>)` per row.
pub fn softmax_backward(y: &[f64], gy: &[f64], rows: usize, width: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for r in 0..rows {
        let ys = &y[r * width..(r + 1) * width];
        let gs = &gy[r * width..(r + 1) * width];
        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
        for i in 0..width {
            dx[r * width + i] = ys[i] * (gs[i] - dot);
        }
    }
    dx
}
