//! Dense numeric kernels for the tape primitives.
//!
//! All kernels operate on row-major `f64` slices. Shapes are validated by the
//! tape layer before these are called; kernels only debug-assert.

use crate::error::{Error, Result};

/// Convolution hyperparameters (cross-correlation convention).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

/// Output spatial size for a conv-like window sweep.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, dilation: usize, padding: usize) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = input + 2 * padding;
    if padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// Validates shapes and returns the conv2d output shape [N, Co, H', W'].
pub fn conv2d_out_shape(input: &[usize], kernel: &[usize], spec: &ConvSpec) -> Result<Vec<usize>> {
    if input.len() != 4 || kernel.len() != 4 {
        return Err(Error::shape(format!(
            "conv2d expects 4-d input and kernel, got input rank {} and kernel rank {}",
            input.len(),
            kernel.len()
        )));
    }
    if spec.stride < 1 || spec.dilation < 1 || spec.groups < 1 {
        return Err(Error::invalid(format!(
            "conv2d requires stride >= 1, dilation >= 1, groups >= 1, got stride={} dilation={} groups={}",
            spec.stride, spec.dilation, spec.groups
        )));
    }
    let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
    let (co, cig, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
    if c % spec.groups != 0 {
        return Err(Error::shape(format!(
            "conv2d: input channels {c} not divisible by groups {}",
            spec.groups
        )));
    }
    if co % spec.groups != 0 {
        return Err(Error::shape(format!(
            "conv2d: output channels {co} not divisible by groups {}",
            spec.groups
        )));
    }
    if cig != c / spec.groups {
        return Err(Error::shape(format!(
            "conv2d: kernel dim 1 is {cig}, expected input_channels/groups = {}/{} = {}",
            c,
            spec.groups,
            c / spec.groups
        )));
    }
    let oh = conv_out_dim(h, kh, spec.stride, spec.dilation, spec.padding).ok_or_else(|| {
        Error::shape(format!(
            "conv2d: kernel height {kh} (dilation {}) exceeds padded input height {h}+2*{}",
            spec.dilation, spec.padding
        ))
    })?;
    let ow = conv_out_dim(w, kw, spec.stride, spec.dilation, spec.padding).ok_or_else(|| {
        Error::shape(format!(
            "conv2d: kernel width {kw} (dilation {}) exceeds padded input width {w}+2*{}",
            spec.dilation, spec.padding
        ))
    })?;
    Ok(vec![n, co, oh, ow])
}

/// Copies one image plane into a zero-padded (h+2p)×(w+2p) buffer.
fn pad_plane(plane: &[f64], h: usize, w: usize, p: usize, buf: &mut [f64]) {
    let pw = w + 2 * p;
    buf.fill(0.0);
    for r in 0..h {
        buf[(r + p) * pw + p..][..w].copy_from_slice(&plane[r * w..][..w]);
    }
}

/// Gathers every `s`-th pixel of each plane into a dense [n, c, oh, ow] copy.
fn subsample(x: &[f64], n_planes: usize, h: usize, w: usize, s: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n_planes * oh * ow);
    for pl in 0..n_planes {
        let plane = &x[pl * h * w..][..h * w];
        for r in 0..oh {
            let row = &plane[r * s * w..];
            for cidx in 0..ow {
                out.push(row[cidx * s]);
            }
        }
    }
    out
}

/// Adjoint of `subsample`: scatter-adds the dense gradient back.
fn scatter_add_subsample(gsub: &[f64], gx: &mut [f64], n_planes: usize, h: usize, w: usize, s: usize, oh: usize, ow: usize) {
    for pl in 0..n_planes {
        let gplane = &mut gx[pl * h * w..][..h * w];
        let gs = &gsub[pl * oh * ow..][..oh * ow];
        for r in 0..oh {
            let row = &mut gplane[r * s * w..];
            for cidx in 0..ow {
                row[cidx * s] += gs[r * ow + cidx];
            }
        }
    }
}

/// 1×1 convolution on stride-1 data: a per-image matmul over whole planes.
/// Input channels are consumed four at a time so the output plane is only
/// traversed once per block.
fn pointwise_forward(x: &[f64], n_b: usize, c: usize, plane: usize, k: &[f64], co_total: usize, out: &mut [f64]) {
    for n in 0..n_b {
        let x_img = &x[n * c * plane..][..c * plane];
        let out_img = &mut out[n * co_total * plane..][..co_total * plane];
        for co in 0..co_total {
            let out_plane = &mut out_img[co * plane..][..plane];
            let krow = &k[co * c..][..c];
            let mut ci = 0;
            while ci + 4 <= c {
                let (k0, k1, k2, k3) = (krow[ci], krow[ci + 1], krow[ci + 2], krow[ci + 3]);
                let s0 = &x_img[ci * plane..][..plane];
                let s1 = &x_img[(ci + 1) * plane..][..plane];
                let s2 = &x_img[(ci + 2) * plane..][..plane];
                let s3 = &x_img[(ci + 3) * plane..][..plane];
                for j in 0..plane {
                    out_plane[j] += k0 * s0[j] + k1 * s1[j] + k2 * s2[j] + k3 * s3[j];
                }
                ci += 4;
            }
            while ci < c {
                let kv = krow[ci];
                let src = &x_img[ci * plane..][..plane];
                for (o, xv) in out_plane.iter_mut().zip(src) {
                    *o += kv * xv;
                }
                ci += 1;
            }
        }
    }
}

fn pointwise_backward(
    x: &[f64],
    n_b: usize,
    c: usize,
    plane: usize,
    k: &[f64],
    co_total: usize,
    gout: &[f64],
    mut gx: Option<&mut [f64]>,
    mut gk: Option<&mut [f64]>,
) {
    for n in 0..n_b {
        let x_img = &x[n * c * plane..][..c * plane];
        let g_img = &gout[n * co_total * plane..][..co_total * plane];
        if let Some(gkb) = gk.as_deref_mut() {
            for co in 0..co_total {
                let g_plane = &g_img[co * plane..][..plane];
                let gkrow = &mut gkb[co * c..][..c];
                let mut ci = 0;
                while ci + 4 <= c {
                    let s0 = &x_img[ci * plane..][..plane];
                    let s1 = &x_img[(ci + 1) * plane..][..plane];
                    let s2 = &x_img[(ci + 2) * plane..][..plane];
                    let s3 = &x_img[(ci + 3) * plane..][..plane];
                    let (mut a0, mut a1, mut a2, mut a3) = (0.0, 0.0, 0.0, 0.0);
                    for (j, go) in g_plane.iter().enumerate() {
                        a0 += s0[j] * go;
                        a1 += s1[j] * go;
                        a2 += s2[j] * go;
                        a3 += s3[j] * go;
                    }
                    gkrow[ci] += a0;
                    gkrow[ci + 1] += a1;
                    gkrow[ci + 2] += a2;
                    gkrow[ci + 3] += a3;
                    ci += 4;
                }
                while ci < c {
                    let src = &x_img[ci * plane..][..plane];
                    let mut acc = 0.0;
                    for (xv, go) in src.iter().zip(g_plane) {
                        acc += xv * go;
                    }
                    gkrow[ci] += acc;
                    ci += 1;
                }
            }
        }
        if let Some(gxb) = gx.as_deref_mut() {
            let gx_img = &mut gxb[n * c * plane..][..c * plane];
            for ci in 0..c {
                let dst = &mut gx_img[ci * plane..][..plane];
                let mut co = 0;
                while co + 4 <= co_total {
                    let (k0, k1, k2, k3) = (
                        k[co * c + ci],
                        k[(co + 1) * c + ci],
                        k[(co + 2) * c + ci],
                        k[(co + 3) * c + ci],
                    );
                    let g0 = &g_img[co * plane..][..plane];
                    let g1 = &g_img[(co + 1) * plane..][..plane];
                    let g2 = &g_img[(co + 2) * plane..][..plane];
                    let g3 = &g_img[(co + 3) * plane..][..plane];
                    for j in 0..plane {
                        dst[j] += k0 * g0[j] + k1 * g1[j] + k2 * g2[j] + k3 * g3[j];
                    }
                    co += 4;
                }
                while co < co_total {
                    let kv = k[co * c + ci];
                    let g_plane = &g_img[co * plane..][..plane];
                    for (gi, go) in dst.iter_mut().zip(g_plane) {
                        *gi += kv * go;
                    }
                    co += 1;
                }
            }
        }
    }
}

/// Depthwise convolution via a zero-padded scratch plane: the inner loops
/// run without bounds branches.
#[allow(clippy::too_many_arguments)]
fn depthwise_forward(
    x: &[f64],
    n_b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: &[f64],
    kh: usize,
    kw: usize,
    s: usize,
    d: usize,
    p: usize,
    out: &mut [f64],
    oh_n: usize,
    ow_n: usize,
) {
    let pw = w + 2 * p;
    let mut pad = vec![0.0; (h + 2 * p) * pw];
    for n in 0..n_b {
        for ci in 0..c {
            pad_plane(&x[(n * c + ci) * h * w..][..h * w], h, w, p, &mut pad);
            let kplane = &k[ci * kh * kw..][..kh * kw];
            for oh in 0..oh_n {
                let out_row = &mut out[((n * c + ci) * oh_n + oh) * ow_n..][..ow_n];
                for khi in 0..kh {
                    let prow = &pad[(oh * s + khi * d) * pw..][..pw];
                    let krow = &kplane[khi * kw..][..kw];
                    // one pass per kernel row with the horizontal taps unrolled
                    match kw {
                        3 => dw_row_forward::<3>(prow, krow, d, s, out_row),
                        5 => dw_row_forward::<5>(prow, krow, d, s, out_row),
                        _ => {
                            for (kwi, &kv) in krow.iter().enumerate() {
                                let base = kwi * d;
                                for (ow, o) in out_row.iter_mut().enumerate() {
                                    *o += kv * prow[base + ow * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn dw_row_forward<const KW: usize>(prow: &[f64], krow: &[f64], d: usize, s: usize, out_row: &mut [f64]) {
    let mut taps = [0.0; KW];
    taps.copy_from_slice(&krow[..KW]);
    if s == 1 {
        for (j, o) in out_row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (t, kv) in taps.iter().enumerate() {
                acc += kv * prow[j + t * d];
            }
            *o += acc;
        }
    } else {
        for (j, o) in out_row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (t, kv) in taps.iter().enumerate() {
                acc += kv * prow[j * s + t * d];
            }
            *o += acc;
        }
    }
}

fn dw_row_grad_k<const KW: usize>(prow: &[f64], g_row: &[f64], d: usize, s: usize, gkrow: &mut [f64]) {
    let mut acc = [0.0; KW];
    for (j, go) in g_row.iter().enumerate() {
        for (t, a) in acc.iter_mut().enumerate() {
            *a += prow[j * s + t * d] * go;
        }
    }
    for (gkv, a) in gkrow.iter_mut().zip(acc) {
        *gkv += a;
    }
}

fn dw_row_grad_x<const KW: usize>(g_row: &[f64], krow: &[f64], d: usize, s: usize, gprow: &mut [f64]) {
    let mut taps = [0.0; KW];
    taps.copy_from_slice(&krow[..KW]);
    for (j, go) in g_row.iter().enumerate() {
        for (t, kv) in taps.iter().enumerate() {
            gprow[j * s + t * d] += kv * go;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn depthwise_backward(
    x: &[f64],
    n_b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: &[f64],
    kh: usize,
    kw: usize,
    s: usize,
    d: usize,
    p: usize,
    gout: &[f64],
    oh_n: usize,
    ow_n: usize,
    mut gx: Option<&mut [f64]>,
    mut gk: Option<&mut [f64]>,
) {
    let pw = w + 2 * p;
    let mut pad = vec![0.0; (h + 2 * p) * pw];
    let mut gpad = vec![0.0; (h + 2 * p) * pw];
    for n in 0..n_b {
        for ci in 0..c {
            pad_plane(&x[(n * c + ci) * h * w..][..h * w], h, w, p, &mut pad);
            gpad.fill(0.0);
            let kbase = ci * kh * kw;
            for oh in 0..oh_n {
                let g_row = &gout[((n * c + ci) * oh_n + oh) * ow_n..][..ow_n];
                for khi in 0..kh {
                    let prow_start = (oh * s + khi * d) * pw;
                    let prow = &pad[prow_start..];
                    match kw {
                        3 | 5 => {
                            if let Some(gkb) = gk.as_deref_mut() {
                                let gkrow = &mut gkb[kbase + khi * kw..][..kw];
                                if kw == 3 {
                                    dw_row_grad_k::<3>(prow, g_row, d, s, gkrow);
                                } else {
                                    dw_row_grad_k::<5>(prow, g_row, d, s, gkrow);
                                }
                            }
                            if gx.is_some() {
                                let gprow = &mut gpad[prow_start..];
                                let krow = &k[kbase + khi * kw..][..kw];
                                if kw == 3 {
                                    dw_row_grad_x::<3>(g_row, krow, d, s, gprow);
                                } else {
                                    dw_row_grad_x::<5>(g_row, krow, d, s, gprow);
                                }
                            }
                        }
                        _ => {
                            for kwi in 0..kw {
                                let kv = k[kbase + khi * kw + kwi];
                                let base = kwi * d;
                                if let Some(gkb) = gk.as_deref_mut() {
                                    let mut acc = 0.0;
                                    for (ow, go) in g_row.iter().enumerate() {
                                        acc += pad[prow_start + base + ow * s] * go;
                                    }
                                    gkb[kbase + khi * kw + kwi] += acc;
                                }
                                if gx.is_some() {
                                    for (ow, go) in g_row.iter().enumerate() {
                                        gpad[prow_start + base + ow * s] += kv * go;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if let Some(gxb) = gx.as_deref_mut() {
                let gplane = &mut gxb[(n * c + ci) * h * w..][..h * w];
                for r in 0..h {
                    for (gi, gp) in gplane[r * w..][..w].iter_mut().zip(&gpad[(r + p) * pw + p..][..w]) {
                        *gi += gp;
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(
    x: &[f64],
    xs: &[usize],
    k: &[f64],
    ks: &[usize],
    spec: &ConvSpec,
    out: &mut [f64],
    os: &[usize],
) {
    let (n_b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (co_total, cig, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    let (oh_n, ow_n) = (os[2], os[3]);
    debug_assert_eq!(os[0], n_b);
    debug_assert_eq!(os[1], co_total);
    let co_per_g = co_total / spec.groups;
    let (s, d, p) = (spec.stride, spec.dilation, spec.padding);

    if kh == 1 && kw == 1 && p == 0 && spec.groups == 1 {
        if s == 1 {
            pointwise_forward(x, n_b, c, h * w, k, co_total, out);
        } else {
            let xsub = subsample(x, n_b * c, h, w, s, oh_n, ow_n);
            pointwise_forward(&xsub, n_b, c, oh_n * ow_n, k, co_total, out);
        }
        return;
    }
    if spec.groups == c && cig == 1 && co_total == c {
        depthwise_forward(x, n_b, c, h, w, k, kh, kw, s, d, p, out, oh_n, ow_n);
        return;
    }

    for n in 0..n_b {
        for co in 0..co_total {
            let g = co / co_per_g;
            for oh in 0..oh_n {
                let out_row = &mut out[((n * co_total + co) * oh_n + oh) * ow_n..][..ow_n];
                for cig_i in 0..cig {
                    let ci = g * cig + cig_i;
                    for khi in 0..kh {
                        let ih = (oh * s + khi * d) as isize - p as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let x_row = &x[((n * c + ci) * h + ih as usize) * w..][..w];
                        for kwi in 0..kw {
                            let kv = k[((co * cig + cig_i) * kh + khi) * kw + kwi];
                            let off = (kwi * d) as isize - p as isize;
                            if s == 1 {
                                let lo = (-off).max(0) as usize;
                                let hi = ((w as isize - off).min(ow_n as isize)).max(0) as usize;
                                if lo >= hi {
                                    continue;
                                }
                                let src = &x_row[(lo as isize + off) as usize..][..hi - lo];
                                for (o, xi) in out_row[lo..hi].iter_mut().zip(src) {
                                    *o += kv * xi;
                                }
                            } else {
                                for (ow, o) in out_row.iter_mut().enumerate() {
                                    let iw = (ow * s) as isize + off;
                                    if iw >= 0 && iw < w as isize {
                                        *o += kv * x_row[iw as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    xs: &[usize],
    k: &[f64],
    ks: &[usize],
    spec: &ConvSpec,
    gout: &[f64],
    os: &[usize],
    mut gx: Option<&mut [f64]>,
    mut gk: Option<&mut [f64]>,
) {
    let (n_b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (co_total, cig, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    let (oh_n, ow_n) = (os[2], os[3]);
    let co_per_g = co_total / spec.groups;
    let (s, d, p) = (spec.stride, spec.dilation, spec.padding);

    if kh == 1 && kw == 1 && p == 0 && spec.groups == 1 {
        if s == 1 {
            pointwise_backward(x, n_b, c, h * w, k, co_total, gout, gx, gk);
        } else {
            let xsub = subsample(x, n_b * c, h, w, s, oh_n, ow_n);
            let mut gxsub = gx.as_ref().map(|_| vec![0.0; n_b * c * oh_n * ow_n]);
            pointwise_backward(&xsub, n_b, c, oh_n * ow_n, k, co_total, gout, gxsub.as_deref_mut(), gk);
            if let (Some(gxb), Some(gs)) = (gx, gxsub) {
                scatter_add_subsample(&gs, gxb, n_b * c, h, w, s, oh_n, ow_n);
            }
        }
        return;
    }
    if spec.groups == c && cig == 1 && co_total == c {
        depthwise_backward(x, n_b, c, h, w, k, kh, kw, s, d, p, gout, oh_n, ow_n, gx, gk);
        return;
    }

    for n in 0..n_b {
        for co in 0..co_total {
            let g = co / co_per_g;
            for oh in 0..oh_n {
                let g_row = &gout[((n * co_total + co) * oh_n + oh) * ow_n..][..ow_n];
                for cig_i in 0..cig {
                    let ci = g * cig + cig_i;
                    for khi in 0..kh {
                        let ih = (oh * s + khi * d) as isize - p as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let x_base = ((n * c + ci) * h + ih as usize) * w;
                        for kwi in 0..kw {
                            let kidx = ((co * cig + cig_i) * kh + khi) * kw + kwi;
                            let kv = k[kidx];
                            let off = (kwi * d) as isize - p as isize;
                            if s == 1 {
                                let lo = (-off).max(0) as usize;
                                let hi = ((w as isize - off).min(ow_n as isize)).max(0) as usize;
                                if lo >= hi {
                                    continue;
                                }
                                let x_lo = (lo as isize + off) as usize;
                                if let Some(gxb) = gx.as_deref_mut() {
                                    let dst = &mut gxb[x_base + x_lo..][..hi - lo];
                                    for (gi, go) in dst.iter_mut().zip(&g_row[lo..hi]) {
                                        *gi += kv * go;
                                    }
                                }
                                if let Some(gkb) = gk.as_deref_mut() {
                                    let src = &x[x_base + x_lo..][..hi - lo];
                                    let mut acc = 0.0;
                                    for (xi, go) in src.iter().zip(&g_row[lo..hi]) {
                                        acc += xi * go;
                                    }
                                    gkb[kidx] += acc;
                                }
                            } else {
                                for (ow, go) in g_row.iter().enumerate() {
                                    let iw = (ow * s) as isize + off;
                                    if iw < 0 || iw >= w as isize {
                                        continue;
                                    }
                                    let xi = x_base + iw as usize;
                                    if let Some(gxb) = gx.as_deref_mut() {
                                        gxb[xi] += kv * go;
                                    }
                                    if let Some(gkb) = gk.as_deref_mut() {
                                        gkb[kidx] += x[xi] * go;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn pool2d_out_shape(input: &[usize], window: usize, stride: usize, padding: usize) -> Result<Vec<usize>> {
    if input.len() != 4 {
        return Err(Error::shape(format!(
            "pool2d expects 4-d input, got rank {}",
            input.len()
        )));
    }
    if !(1..=2).contains(&stride) {
        return Err(Error::invalid(format!("pool2d stride must be 1 or 2, got {stride}")));
    }
    let oh = conv_out_dim(input[2], window, stride, 1, padding)
        .ok_or_else(|| Error::shape(format!("pool2d window {window} exceeds padded input height {}", input[2])))?;
    let ow = conv_out_dim(input[3], window, stride, 1, padding)
        .ok_or_else(|| Error::shape(format!("pool2d window {window} exceeds padded input width {}", input[3])))?;
    Ok(vec![input[0], input[1], oh, ow])
}

/// In-bounds window-element counts along one axis for each output position.
fn pool_counts(extent: usize, n_out: usize, window: usize, stride: usize, padding: usize) -> Vec<f64> {
    (0..n_out)
        .map(|o| {
            (0..window)
                .filter(|ki| {
                    let i = (o * stride + ki) as isize - padding as isize;
                    i >= 0 && i < extent as isize
                })
                .count() as f64
        })
        .collect()
}

pub fn pool2d_forward(
    x: &[f64],
    xs: &[usize],
    kind: PoolKind,
    window: usize,
    stride: usize,
    padding: usize,
    out: &mut [f64],
    os: &[usize],
) {
    let (n_b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (oh_n, ow_n) = (os[2], os[3]);
    let pw = w + 2 * padding;
    let fill = match kind {
        PoolKind::Avg => 0.0,
        PoolKind::Max => f64::NEG_INFINITY,
    };
    // per-axis in-bounds counts factorize: count(oh, ow) = rc[oh] * cc[ow]
    let rc = pool_counts(h, oh_n, window, stride, padding);
    let cc = pool_counts(w, ow_n, window, stride, padding);
    let mut pad = vec![fill; (h + 2 * padding) * pw];
    let mut tmp = vec![0.0; pw];
    for nc in 0..n_b * c {
        let plane = &x[nc * h * w..][..h * w];
        if padding == 0 {
            // pad_plane zero-fills the border, which is wrong for max
            pad.copy_from_slice(plane);
        } else {
            pad.fill(fill);
            for r in 0..h {
                pad[(r + padding) * pw + padding..][..w].copy_from_slice(&plane[r * w..][..w]);
            }
        }
        let out_plane = &mut out[nc * oh_n * ow_n..][..oh_n * ow_n];
        for oh in 0..oh_n {
            // collapse the window rows, then the window columns
            match kind {
                PoolKind::Avg => {
                    tmp.copy_from_slice(&pad[oh * stride * pw..][..pw]);
                    for khi in 1..window {
                        for (t, v) in tmp.iter_mut().zip(&pad[(oh * stride + khi) * pw..][..pw]) {
                            *t += v;
                        }
                    }
                    let out_row = &mut out_plane[oh * ow_n..][..ow_n];
                    for (ow, o) in out_row.iter_mut().enumerate() {
                        let mut sum = 0.0;
                        for kwi in 0..window {
                            sum += tmp[ow * stride + kwi];
                        }
                        *o = sum / (rc[oh] * cc[ow]);
                    }
                }
                PoolKind::Max => {
                    tmp.copy_from_slice(&pad[oh * stride * pw..][..pw]);
                    for khi in 1..window {
                        for (t, v) in tmp.iter_mut().zip(&pad[(oh * stride + khi) * pw..][..pw]) {
                            if *v > *t {
                                *t = *v;
                            }
                        }
                    }
                    let out_row = &mut out_plane[oh * ow_n..][..ow_n];
                    for (ow, o) in out_row.iter_mut().enumerate() {
                        let mut m = tmp[ow * stride];
                        for kwi in 1..window {
                            let v = tmp[ow * stride + kwi];
                            if v > m {
                                m = v;
                            }
                        }
                        *o = m;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn pool2d_backward(
    x: &[f64],
    xs: &[usize],
    kind: PoolKind,
    window: usize,
    stride: usize,
    padding: usize,
    gout: &[f64],
    os: &[usize],
    gx: &mut [f64],
) {
    let (n_b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (oh_n, ow_n) = (os[2], os[3]);
    let p = padding;
    let pw = w + 2 * p;
    match kind {
        PoolKind::Avg => {
            let rc = pool_counts(h, oh_n, window, stride, p);
            let cc = pool_counts(w, ow_n, window, stride, p);
            let mut gpad = vec![0.0; (h + 2 * p) * pw];
            let mut share = vec![0.0; ow_n];
            for nc in 0..n_b * c {
                let gplane = &mut gx[nc * h * w..][..h * w];
                let gout_plane = &gout[nc * oh_n * ow_n..][..oh_n * ow_n];
                gpad.fill(0.0);
                for oh in 0..oh_n {
                    let g_row = &gout_plane[oh * ow_n..][..ow_n];
                    for (sh, (go, ci)) in share.iter_mut().zip(g_row.iter().zip(&cc)) {
                        *sh = go / (rc[oh] * ci);
                    }
                    for khi in 0..window {
                        let row = &mut gpad[(oh * stride + khi) * pw..][..pw];
                        for kwi in 0..window {
                            if stride == 1 {
                                for (gp, sh) in row[kwi..][..ow_n].iter_mut().zip(&share) {
                                    *gp += sh;
                                }
                            } else {
                                for (ow, sh) in share.iter().enumerate() {
                                    row[ow * stride + kwi] += sh;
                                }
                            }
                        }
                    }
                }
                for r in 0..h {
                    for (gi, gp) in gplane[r * w..][..w].iter_mut().zip(&gpad[(r + p) * pw + p..][..w]) {
                        *gi += gp;
                    }
                }
            }
        }
        PoolKind::Max => {
            // first maximum in scan order gets the subgradient; out-of-bounds
            // window cells read -inf from the padded copy and never win
            let mut pad = vec![f64::NEG_INFINITY; (h + 2 * p) * pw];
            for nc in 0..n_b * c {
                let plane = &x[nc * h * w..][..h * w];
                let gplane = &mut gx[nc * h * w..][..h * w];
                let gout_plane = &gout[nc * oh_n * ow_n..][..oh_n * ow_n];
                if p == 0 {
                    pad.copy_from_slice(plane);
                } else {
                    pad.fill(f64::NEG_INFINITY);
                    for r in 0..h {
                        pad[(r + p) * pw + p..][..w].copy_from_slice(&plane[r * w..][..w]);
                    }
                }
                for oh in 0..oh_n {
                    for ow in 0..ow_n {
                        let go = gout_plane[oh * ow_n + ow];
                        let mut best = f64::NEG_INFINITY;
                        let mut best_at = (0usize, 0usize);
                        for khi in 0..window {
                            let prow = &pad[(oh * stride + khi) * pw + ow * stride..][..window];
                            for (kwi, &v) in prow.iter().enumerate() {
                                if v > best {
                                    best = v;
                                    best_at = (oh * stride + khi, ow * stride + kwi);
                                }
                            }
                        }
                        gplane[(best_at.0 - p) * w + (best_at.1 - p)] += go;
                    }
                }
            }
        }
    }
}
