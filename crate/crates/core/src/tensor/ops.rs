//! Functional forward/backward kernels on `[N, C, D, H, W]` tensors.

use super::{gemm, shape_err, MatRef, Real, Result, Tensor};

/// Upper bound on the im2col buffer, in elements.
const COL_BUDGET: usize = 1 << 22;

/// Output extent of a strided window along one axis.
pub fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || n + 2 * pad < k {
        return None;
    }
    Some((n + 2 * pad - k) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    inp: [usize; 3],
    cout: usize,
    k: [usize; 3],
    out: [usize; 3],
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new<T: Real>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        let [n, cin, d, h, wd] = x.dims5()?;
        let [cout, wcin, kd, kh, kw] = w.dims5()?;
        if wcin != cin {
            return shape_err(format!("conv3d: input has {} channels, weight expects {}", cin, wcin));
        }
        let out = match (
            conv_out_len(d, kd, stride, pad),
            conv_out_len(h, kh, stride, pad),
            conv_out_len(wd, kw, stride, pad),
        ) {
            (Some(a), Some(b), Some(c)) => [a, b, c],
            _ => {
                return shape_err(format!(
                    "conv3d: spatial {:?} with pad {} smaller than kernel {:?} (stride {})",
                    [d, h, wd],
                    pad,
                    [kd, kh, kw],
                    stride
                ))
            }
        };
        Ok(Self { n, cin, inp: [d, h, wd], cout, k: [kd, kh, kw], out, stride, pad })
    }

    fn krows(&self) -> usize {
        self.cin * self.k[0] * self.k[1] * self.k[2]
    }

    fn in_spatial(&self) -> usize {
        self.inp.iter().product()
    }

    fn out_spatial(&self) -> usize {
        self.out.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.k == [1, 1, 1] && self.stride == 1 && self.pad == 0
    }

    /// Number of output depth planes per im2col chunk.
    fn chunk_planes(&self) -> usize {
        let plane = self.out[1] * self.out[2];
        (COL_BUDGET / (self.krows() * plane).max(1)).clamp(1, self.out[0])
    }

    /// Valid output range `[lo, hi)` along an axis for kernel tap `tap`.
    fn valid_range(&self, axis: usize, tap: usize) -> (usize, usize) {
        let (n, s, p, o) = (self.inp[axis] as isize, self.stride as isize, self.pad as isize, self.out[axis]);
        let t = tap as isize;
        // need 0 <= o*s - p + t < n
        let lo = if p - t <= 0 { 0 } else { ((p - t) + s - 1) / s };
        let hi_raw = (n + p - t + s - 1) / s; // first o with o*s - p + t >= n
        let hi = hi_raw.clamp(0, o as isize) as usize;
        (lo.min(o as isize) as usize, hi)
    }
}

/// Copies the receptive fields of output planes `[z0, z1)` of one sample into
/// `cols[krows, (z1-z0)*oh*ow]`.
fn im2col<T: Real>(g: &ConvGeom, x: &[T], z0: usize, z1: usize, cols: &mut [T]) {
    let [d, h, w] = g.inp;
    let [_, oh, ow] = g.out;
    let [kd, kh, kw] = g.k;
    let ncols = (z1 - z0) * oh * ow;
    let (s, p) = (g.stride, g.pad);
    for ci in 0..g.cin {
        let xc = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for a in 0..kd {
            for b in 0..kh {
                let (ylo, yhi) = g.valid_range(1, b);
                for c in 0..kw {
                    let (xlo, xhi) = g.valid_range(2, c);
                    let row = ((ci * kd + a) * kh + b) * kw + c;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for oz in z0..z1 {
                        let iz = (oz * s + a) as isize - p as isize;
                        let plane = &mut dst[(oz - z0) * oh * ow..(oz - z0 + 1) * oh * ow];
                        if iz < 0 || iz >= d as isize {
                            plane.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let xz = &xc[iz as usize * h * w..(iz as usize + 1) * h * w];
                        for oy in 0..oh {
                            let line = &mut plane[oy * ow..(oy + 1) * ow];
                            if oy < ylo || oy >= yhi || xlo >= xhi {
                                line.iter_mut().for_each(|v| *v = T::zero());
                                continue;
                            }
                            let iy = oy * s + b - p;
                            let xrow = &xz[iy * w..(iy + 1) * w];
                            line[..xlo].iter_mut().for_each(|v| *v = T::zero());
                            line[xhi..].iter_mut().for_each(|v| *v = T::zero());
                            let ix0 = xlo * s + c - p;
                            if s == 1 {
                                line[xlo..xhi].copy_from_slice(&xrow[ix0..ix0 + (xhi - xlo)]);
                            } else {
                                for (j, v) in line[xlo..xhi].iter_mut().enumerate() {
                                    *v = xrow[ix0 + j * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` back onto the input gradient (adjoint of [`im2col`]).
fn col2im<T: Real>(g: &ConvGeom, cols: &[T], z0: usize, z1: usize, gx: &mut [T]) {
    let [d, h, w] = g.inp;
    let [_, oh, ow] = g.out;
    let [kd, kh, kw] = g.k;
    let ncols = (z1 - z0) * oh * ow;
    let (s, p) = (g.stride, g.pad);
    for ci in 0..g.cin {
        let gc = &mut gx[ci * d * h * w..(ci + 1) * d * h * w];
        for a in 0..kd {
            for b in 0..kh {
                let (ylo, yhi) = g.valid_range(1, b);
                for c in 0..kw {
                    let (xlo, xhi) = g.valid_range(2, c);
                    if xlo >= xhi {
                        continue;
                    }
                    let row = ((ci * kd + a) * kh + b) * kw + c;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for oz in z0..z1 {
                        let iz = (oz * s + a) as isize - p as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        let plane = &src[(oz - z0) * oh * ow..(oz - z0 + 1) * oh * ow];
                        let gz = &mut gc[iz as usize * h * w..(iz as usize + 1) * h * w];
                        for oy in ylo..yhi {
                            let iy = oy * s + b - p;
                            let line = &plane[oy * ow..(oy + 1) * ow];
                            let grow = &mut gz[iy * w..(iy + 1) * w];
                            let ix0 = xlo * s + c - p;
                            if s == 1 {
                                for (dst, &v) in grow[ix0..ix0 + (xhi - xlo)].iter_mut().zip(&line[xlo..xhi]) {
                                    *dst += v;
                                }
                            } else {
                                for (j, &v) in line[xlo..xhi].iter().enumerate() {
                                    grow[ix0 + j * s] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 3-D cross-correlation. `x: [N,Cin,D,H,W]`, `w: [Cout,Cin,kd,kh,kw]`.
pub fn conv3d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&[T]>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x, w, stride, pad)?;
    if let Some(b) = bias {
        if b.len() != g.cout {
            return shape_err(format!("conv3d: bias has {} entries for {} outputs", b.len(), g.cout));
        }
    }
    let (is, os, kr) = (g.in_spatial(), g.out_spatial(), g.krows());
    let mut y = Tensor::zeros(&[g.n, g.cout, g.out[0], g.out[1], g.out[2]]);
    let wm = MatRef::new(w.data(), kr, 1);
    let planes = g.chunk_planes();
    let plane = g.out[1] * g.out[2];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kr * planes * plane] };
    for ni in 0..g.n {
        let xn = &x.data()[ni * g.cin * is..(ni + 1) * g.cin * is];
        let yn = &mut y.data_mut()[ni * g.cout * os..(ni + 1) * g.cout * os];
        if g.is_pointwise() {
            gemm(g.cout, kr, os, wm, MatRef::new(xn, is, 1), T::zero(), yn, os, 1);
        } else {
            let mut z0 = 0;
            while z0 < g.out[0] {
                let z1 = (z0 + planes).min(g.out[0]);
                let nc = (z1 - z0) * plane;
                im2col(&g, xn, z0, z1, &mut cols[..kr * nc]);
                gemm(g.cout, kr, nc, wm, MatRef::new(&cols[..kr * nc], nc, 1), T::zero(), &mut yn[z0 * plane..], os, 1);
                z0 = z1;
            }
        }
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                yn[co * os..(co + 1) * os].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(y)
}

/// Gradients of a summed loss through [`conv3d`]: `(grad_input, grad_weight, grad_bias)`.
pub fn conv3d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    let g = ConvGeom::new(x, w, stride, pad)?;
    let expect = [g.n, g.cout, g.out[0], g.out[1], g.out[2]];
    if grad_out.shape() != expect {
        return shape_err(format!("conv3d_backward: grad {:?}, expected {:?}", grad_out.shape(), expect));
    }
    let (is, os, kr) = (g.in_spatial(), g.out_spatial(), g.krows());
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = vec![T::zero(); g.cout];
    let planes = g.chunk_planes();
    let plane = g.out[1] * g.out[2];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kr * planes * plane] };
    let mut gcols = cols.clone();
    for ni in 0..g.n {
        let xn = &x.data()[ni * g.cin * is..(ni + 1) * g.cin * is];
        let gon = &grad_out.data()[ni * g.cout * os..(ni + 1) * g.cout * os];
        for (co, b) in gb.iter_mut().enumerate() {
            *b += gon[co * os..(co + 1) * os].iter().copied().sum::<T>();
        }
        let gxn = &mut gx.data_mut()[ni * g.cin * is..(ni + 1) * g.cin * is];
        if g.is_pointwise() {
            // gw[co, ci] += sum_s go[co, s] x[ci, s]
            gemm(g.cout, os, g.cin, MatRef::new(gon, os, 1), MatRef::new(xn, 1, is), T::one(), gw.data_mut(), kr, 1);
            // gx[ci, s] = sum_co w[co, ci] go[co, s]
            gemm(g.cin, g.cout, os, MatRef::new(w.data(), 1, kr), MatRef::new(gon, os, 1), T::zero(), gxn, is, 1);
            continue;
        }
        let mut z0 = 0;
        while z0 < g.out[0] {
            let z1 = (z0 + planes).min(g.out[0]);
            let nc = (z1 - z0) * plane;
            let go = MatRef::new(&gon[z0 * plane..], os, 1);
            im2col(&g, xn, z0, z1, &mut cols[..kr * nc]);
            gemm(g.cout, nc, kr, go, MatRef::new(&cols[..kr * nc], 1, nc), T::one(), gw.data_mut(), kr, 1);
            gemm(kr, g.cout, nc, MatRef::new(w.data(), 1, kr), go, T::zero(), &mut gcols[..kr * nc], nc, 1);
            col2im(&g, &gcols[..kr * nc], z0, z1, gxn);
            z0 = z1;
        }
    }
    Ok((gx, gw, gb))
}

/// Transposed convolution with kernel == stride == `factor` (non-overlapping).
/// `w: [Cin, Cout, f, f, f]`; output spatial dims are `factor` times the input.
pub fn conv_transpose3d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&[T]>, factor: usize) -> Result<Tensor<T>> {
    let [n, cin, d, h, wd] = x.dims5()?;
    let [wcin, cout, fa, fb, fc] = w.dims5()?;
    if wcin != cin || [fa, fb, fc] != [factor; 3] {
        return shape_err(format!("conv_transpose3d: weight {:?} for input {:?}", w.shape(), x.shape()));
    }
    let f3 = factor * factor * factor;
    let s = d * h * wd;
    let (od, oh, ow) = (d * factor, h * factor, wd * factor);
    let os = od * oh * ow;
    let mut y = Tensor::zeros(&[n, cout, od, oh, ow]);
    let mut tmp = vec![T::zero(); cout * f3 * s];
    for ni in 0..n {
        let xn = &x.data()[ni * cin * s..(ni + 1) * cin * s];
        // tmp[(co,abc), s] = sum_ci w[ci, (co,abc)] x[ci, s]
        gemm(cout * f3, cin, s, MatRef::new(w.data(), 1, cout * f3), MatRef::new(xn, s, 1), T::zero(), &mut tmp, s, 1);
        let yn = &mut y.data_mut()[ni * cout * os..(ni + 1) * cout * os];
        for co in 0..cout {
            let bv = bias.map_or(T::zero(), |b| b[co]);
            for tap in 0..f3 {
                let (a, b, c) = (tap / (factor * factor), (tap / factor) % factor, tap % factor);
                let src = &tmp[(co * f3 + tap) * s..(co * f3 + tap + 1) * s];
                for z in 0..d {
                    for yy in 0..h {
                        let row = ((co * od + z * factor + a) * oh + yy * factor + b) * ow + c;
                        let sr = &src[(z * h + yy) * wd..(z * h + yy + 1) * wd];
                        for (xx, &v) in sr.iter().enumerate() {
                            yn[row + xx * factor] = v + bv;
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

pub fn conv_transpose3d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    factor: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    let [n, cin, d, h, wd] = x.dims5()?;
    let [_, cout, _, _, _] = w.dims5()?;
    let f3 = factor * factor * factor;
    let s = d * h * wd;
    let (od, oh, ow) = (d * factor, h * factor, wd * factor);
    if grad_out.shape() != [n, cout, od, oh, ow] {
        return shape_err(format!("conv_transpose3d_backward: grad {:?}", grad_out.shape()));
    }
    let os = od * oh * ow;
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = vec![T::zero(); cout];
    let mut tmp = vec![T::zero(); cout * f3 * s];
    for ni in 0..n {
        let gon = &grad_out.data()[ni * cout * os..(ni + 1) * cout * os];
        for co in 0..cout {
            gb[co] += gon[co * os..(co + 1) * os].iter().copied().sum::<T>();
            for tap in 0..f3 {
                let (a, b, c) = (tap / (factor * factor), (tap / factor) % factor, tap % factor);
                let dst = &mut tmp[(co * f3 + tap) * s..(co * f3 + tap + 1) * s];
                for z in 0..d {
                    for yy in 0..h {
                        let row = ((co * od + z * factor + a) * oh + yy * factor + b) * ow + c;
                        let dr = &mut dst[(z * h + yy) * wd..(z * h + yy + 1) * wd];
                        for (xx, v) in dr.iter_mut().enumerate() {
                            *v = gon[row + xx * factor];
                        }
                    }
                }
            }
        }
        let xn = &x.data()[ni * cin * s..(ni + 1) * cin * s];
        // gx[ci, s] = sum_j w[ci, j] tmp[j, s]
        gemm(cin, cout * f3, s, MatRef::new(w.data(), cout * f3, 1), MatRef::new(&tmp, s, 1), T::zero(), &mut gx.data_mut()[ni * cin * s..], s, 1);
        // gw[ci, j] += sum_s x[ci, s] tmp[j, s]
        gemm(cin, s, cout * f3, MatRef::new(xn, s, 1), MatRef::new(&tmp, 1, s), T::one(), gw.data_mut(), cout * f3, 1);
    }
    Ok((gx, gw, gb))
}

/// 2×2×2 max pooling with stride 2. Returns the output and the flat input
/// index of each window's maximum (first occurrence on ties).
pub fn maxpool3d<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, d, h, w] = x.dims5()?;
    if d < 2 || h < 2 || w < 2 {
        return shape_err(format!("maxpool3d: input {:?} smaller than window", x.shape()));
    }
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut y = Tensor::zeros(&[n, c, od, oh, ow]);
    let mut arg = vec![0usize; y.numel()];
    let xd = x.data();
    let mut o = 0;
    for nc in 0..n * c {
        let base = nc * d * h * w;
        for z in 0..od {
            for yy in 0..oh {
                for xx in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut bi = 0;
                    for a in 0..2 {
                        for b in 0..2 {
                            for cc in 0..2 {
                                let i = base + ((2 * z + a) * h + 2 * yy + b) * w + 2 * xx + cc;
                                if xd[i] > best {
                                    best = xd[i];
                                    bi = i;
                                }
                            }
                        }
                    }
                    y.data_mut()[o] = best;
                    arg[o] = bi;
                    o += 1;
                }
            }
        }
    }
    Ok((y, arg))
}

pub fn maxpool3d_backward<T: Real>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.numel() {
        return shape_err("maxpool3d_backward: argmax/grad length mismatch");
    }
    let mut gx = Tensor::zeros(input_shape);
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        gx.data_mut()[i] += g;
    }
    Ok(gx)
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample_nearest3d<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, d, h, w] = x.dims5()?;
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let mut y = Tensor::zeros(&[n, c, od, oh, ow]);
    let xd = x.data();
    let yd = y.data_mut();
    for nc in 0..n * c {
        for z in 0..od {
            for yy in 0..oh {
                let src = (nc * d + z / 2) * h * w + (yy / 2) * w;
                let dst = ((nc * od + z) * oh + yy) * ow;
                for xx in 0..ow {
                    yd[dst + xx] = xd[src + xx / 2];
                }
            }
        }
    }
    Ok(y)
}

pub fn upsample_nearest3d_backward<T: Real>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, od, oh, ow] = grad_out.dims5()?;
    let (d, h, w) = (od / 2, oh / 2, ow / 2);
    let mut gx = Tensor::zeros(&[n, c, d, h, w]);
    let gd = grad_out.data();
    let gxd = gx.data_mut();
    for nc in 0..n * c {
        for z in 0..od {
            for yy in 0..oh {
                let dst = (nc * d + z / 2) * h * w + (yy / 2) * w;
                let src = ((nc * od + z) * oh + yy) * ow;
                for xx in 0..ow {
                    gxd[dst + xx / 2] += gd[src + xx];
                }
            }
        }
    }
    Ok(gx)
}

/// Saved statistics from an instance-norm forward pass.
#[derive(Clone, Debug)]
pub struct InstanceNormCtx<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Per-sample, per-channel normalization over the spatial axes, then `gamma * xhat + beta`.
pub fn instance_norm3d<T: Real>(x: &Tensor<T>, gamma: &[T], beta: &[T], eps: T) -> Result<(Tensor<T>, InstanceNormCtx<T>)> {
    let [n, c, d, h, w] = x.dims5()?;
    if gamma.len() != c || beta.len() != c {
        return shape_err(format!("instance_norm3d: {} channels, affine has {}", c, gamma.len()));
    }
    let s = d * h * w;
    let inv_s = T::lit(1.0 / s as f64);
    let mut y = Tensor::zeros(x.shape());
    let mut xhat = Tensor::zeros(x.shape());
    let mut inv_std = vec![T::zero(); n * c];
    for nc in 0..n * c {
        let ch = nc % c;
        let xs = &x.data()[nc * s..(nc + 1) * s];
        let mean = xs.iter().copied().sum::<T>() * inv_s;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_s;
        let is = T::one() / (var + eps).sqrt();
        inv_std[nc] = is;
        let xh = &mut xhat.data_mut()[nc * s..(nc + 1) * s];
        for (o, &v) in xh.iter_mut().zip(xs) {
            *o = (v - mean) * is;
        }
        let ys = &mut y.data_mut()[nc * s..(nc + 1) * s];
        for (o, &v) in ys.iter_mut().zip(xhat.data()[nc * s..(nc + 1) * s].iter()) {
            *o = gamma[ch] * v + beta[ch];
        }
    }
    Ok((y, InstanceNormCtx { xhat, inv_std }))
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn instance_norm3d_backward<T: Real>(
    ctx: &InstanceNormCtx<T>,
    gamma: &[T],
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let [n, c, d, h, w] = grad_out.dims5()?;
    if ctx.xhat.shape() != grad_out.shape() {
        return shape_err("instance_norm3d_backward: context shape differs from grad");
    }
    let s = d * h * w;
    let inv_s = T::lit(1.0 / s as f64);
    let mut gx = Tensor::zeros(grad_out.shape());
    let mut gg = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for nc in 0..n * c {
        let ch = nc % c;
        let go = &grad_out.data()[nc * s..(nc + 1) * s];
        let xh = &ctx.xhat.data()[nc * s..(nc + 1) * s];
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for (&g, &xv) in go.iter().zip(xh) {
            sum_g += g;
            sum_gx += g * xv;
        }
        gg[ch] += sum_gx;
        gbeta[ch] += sum_g;
        // dxhat = g * gamma; dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
        let k = gamma[ch] * ctx.inv_std[nc];
        let mg = sum_g * inv_s;
        let mgx = sum_gx * inv_s;
        let gxs = &mut gx.data_mut()[nc * s..(nc + 1) * s];
        for ((o, &g), &xv) in gxs.iter_mut().zip(go).zip(xh) {
            *o = k * (g - mg - xv * mgx);
        }
    }
    Ok((gx, gg, gbeta))
}

pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { v * slope })
}

/// Backward of (leaky) ReLU given the forward input.
pub fn leaky_relu_backward<T: Real>(x: &Tensor<T>, slope: T, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != grad_out.shape() {
        return shape_err("leaky_relu_backward: shape mismatch");
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { g * slope })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    leaky_relu(x, T::zero())
}

pub fn relu_backward<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    leaky_relu_backward(x, T::zero(), grad_out)
}

#[inline]
pub fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Backward of sigmoid given its output `y`.
pub fn sigmoid_backward<T: Real>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if y.shape() != grad_out.shape() {
        return shape_err("sigmoid_backward: shape mismatch");
    }
    let data = y.data().iter().zip(grad_out.data()).map(|(&s, &g)| g * s * (T::one() - s)).collect();
    Tensor::from_vec(y.shape(), data)
}

/// Softmax over the channel axis (axis 1) of an `[N, C, ...]` tensor.
pub fn softmax_channels<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape().len() < 2 {
        return shape_err("softmax: need at least [N, C]");
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let s: usize = x.shape()[2..].iter().product();
    let mut y = Tensor::zeros(x.shape());
    let xd = x.data();
    let yd = y.data_mut();
    for ni in 0..n {
        let base = ni * c * s;
        for v in 0..s {
            let mut m = T::neg_infinity();
            for ch in 0..c {
                m = m.max(xd[base + ch * s + v]);
            }
            let mut z = T::zero();
            for ch in 0..c {
                let e = (xd[base + ch * s + v] - m).exp();
                yd[base + ch * s + v] = e;
                z += e;
            }
            let inv = T::one() / z;
            for ch in 0..c {
                yd[base + ch * s + v] *= inv;
            }
        }
    }
    Ok(y)
}

/// Backward of [`softmax_channels`] given its output `y`.
pub fn softmax_channels_backward<T: Real>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if y.shape() != grad_out.shape() || y.shape().len() < 2 {
        return shape_err("softmax_backward: shape mismatch");
    }
    let (n, c) = (y.shape()[0], y.shape()[1]);
    let s: usize = y.shape()[2..].iter().product();
    let mut gx = Tensor::zeros(y.shape());
    let (yd, gd) = (y.data(), grad_out.data());
    let gxd = gx.data_mut();
    for ni in 0..n {
        let base = ni * c * s;
        for v in 0..s {
            let mut dot = T::zero();
            for ch in 0..c {
                let i = base + ch * s + v;
                dot += yd[i] * gd[i];
            }
            for ch in 0..c {
                let i = base + ch * s + v;
                gxd[i] = yd[i] * (gd[i] - dot);
            }
        }
    }
    Ok(gx)
}

/// Concatenates along the channel axis.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| super::TensorError::ShapeMismatch("concat of nothing".into()))?;
    let [n, _, d, h, w] = first.dims5()?;
    let mut total_c = 0;
    for p in parts {
        let [pn, pc, pd, ph, pw] = p.dims5()?;
        if [pn, pd, ph, pw] != [n, d, h, w] {
            return shape_err(format!("concat: {:?} vs {:?}", p.shape(), first.shape()));
        }
        total_c += pc;
    }
    let s = d * h * w;
    let mut out = Vec::with_capacity(n * total_c * s);
    for ni in 0..n {
        for p in parts {
            let pc = p.shape()[1];
            out.extend_from_slice(&p.data()[ni * pc * s..(ni + 1) * pc * s]);
        }
    }
    Tensor::from_vec(&[n, total_c, d, h, w], out)
}

/// Splits a channel-concatenated gradient back into parts with `channels[i]` channels each.
pub fn split_channels<T: Real>(x: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    let [n, c, d, h, w] = x.dims5()?;
    if channels.iter().sum::<usize>() != c {
        return shape_err(format!("split: {:?} does not sum to {}", channels, c));
    }
    let s = d * h * w;
    let mut outs: Vec<Vec<T>> = channels.iter().map(|&pc| Vec::with_capacity(n * pc * s)).collect();
    for ni in 0..n {
        let mut off = ni * c * s;
        for (o, &pc) in outs.iter_mut().zip(channels) {
            o.extend_from_slice(&x.data()[off..off + pc * s]);
            off += pc * s;
        }
    }
    outs.into_iter()
        .zip(channels)
        .map(|(o, &pc)| Tensor::from_vec(&[n, pc, d, h, w], o))
        .collect()
}

/// Mean over all spatial positions: `[N, C, ...] -> [N, C]`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, d, h, w] = x.dims5()?;
    let s = d * h * w;
    let inv = T::lit(1.0 / s as f64);
    let data = (0..n * c).map(|i| x.data()[i * s..(i + 1) * s].iter().copied().sum::<T>() * inv).collect();
    Tensor::from_vec(&[n, c], data)
}

pub fn global_avg_pool_backward<T: Real>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let s: usize = input_shape[2..].iter().product();
    let nc = input_shape[0] * input_shape[1];
    if grad_out.numel() != nc {
        return shape_err("global_avg_pool_backward: shape mismatch");
    }
    let inv = T::lit(1.0 / s as f64);
    let mut gx = Tensor::zeros(input_shape);
    for (i, &g) in grad_out.data().iter().enumerate() {
        gx.data_mut()[i * s..(i + 1) * s].iter_mut().for_each(|v| *v = g * inv);
    }
    Ok(gx)
}

/// `y[n, o] = sum_i w[o, i] x[n, i] + b[o]`.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &[T]) -> Result<Tensor<T>> {
    let (&[n, fin], &[fout, win]) = (x.shape(), w.shape()) else {
        return shape_err(format!("linear: x {:?}, w {:?}", x.shape(), w.shape()));
    };
    if fin != win || b.len() != fout {
        return shape_err(format!("linear: x {:?}, w {:?}, b {}", x.shape(), w.shape(), b.len()));
    }
    let mut y = Tensor::zeros(&[n, fout]);
    gemm(n, fin, fout, MatRef::new(x.data(), fin, 1), MatRef::new(w.data(), 1, fin), T::zero(), y.data_mut(), fout, 1);
    for row in y.data_mut().chunks_mut(fout) {
        for (v, &bv) in row.iter_mut().zip(b) {
            *v += bv;
        }
    }
    Ok(y)
}

pub fn linear_backward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    let (&[n, fin], &[fout, _]) = (x.shape(), w.shape()) else {
        return shape_err("linear_backward: bad shapes");
    };
    if grad_out.shape() != [n, fout] {
        return shape_err("linear_backward: grad shape");
    }
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    gemm(n, fout, fin, MatRef::new(grad_out.data(), fout, 1), MatRef::new(w.data(), fin, 1), T::zero(), gx.data_mut(), fin, 1);
    gemm(fout, n, fin, MatRef::new(grad_out.data(), 1, fout), MatRef::new(x.data(), fin, 1), T::zero(), gw.data_mut(), fin, 1);
    let mut gb = vec![T::zero(); fout];
    for row in grad_out.data().chunks(fout) {
        for (b, &g) in gb.iter_mut().zip(row) {
            *b += g;
        }
    }
    Ok((gx, gw, gb))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct 7-loop cross-correlation.
    fn conv_naive(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], s: usize, p: usize) -> Tensor<f64> {
        let [n, cin, d, h, wd] = x.dims5().unwrap();
        let [cout, _, kd, kh, kw] = w.dims5().unwrap();
        let (od, oh, ow) = (
            conv_out_len(d, kd, s, p).unwrap(),
            conv_out_len(h, kh, s, p).unwrap(),
            conv_out_len(wd, kw, s, p).unwrap(),
        );
        let mut y = Tensor::zeros(&[n, cout, od, oh, ow]);
        for ni in 0..n {
            for co in 0..cout {
                for z in 0..od {
                    for yy in 0..oh {
                        for xx in 0..ow {
                            let mut acc = b[co];
                            for ci in 0..cin {
                                for a in 0..kd {
                                    for bb in 0..kh {
                                        for c in 0..kw {
                                            let iz = (z * s + a) as isize - p as isize;
                                            let iy = (yy * s + bb) as isize - p as isize;
                                            let ix = (xx * s + c) as isize - p as isize;
                                            if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                                continue;
                                            }
                                            let xi = (((ni * cin + ci) * d + iz as usize) * h + iy as usize) * wd + ix as usize;
                                            let wi = (((co * cin + ci) * kd + a) * kh + bb) * kw + c;
                                            acc += x.data()[xi] * w.data()[wi];
                                        }
                                    }
                                }
                            }
                            let yi = (((ni * cout + co) * od + z) * oh + yy) * ow + xx;
                            y.data_mut()[yi] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    fn ramp(shape: &[usize], seed: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| (i as f64 * 0.37 + seed).sin()).collect()).unwrap()
    }

    #[test]
    fn identity_kernel_returns_input() {
        let x = ramp(&[1, 1, 3, 4, 5], 0.1);
        let w = Tensor::full(&[1, 1, 1, 1, 1], 1.0);
        let y = conv3d(&x, &w, Some(&[0.0]), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_sums_27() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3, 3], 1.0);
        let y = conv3d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1, 1]);
        assert_eq!(y.data()[0], 27.0);
    }

    #[test]
    fn same_padding_keeps_128() {
        assert_eq!(conv_out_len(128, 3, 1, 1), Some(128));
    }

    #[test]
    fn output_size_formula_exhaustive() {
        for n in 1..=16 {
            for k in 1..=5 {
                for s in 1..=2 {
                    for p in 0..=2 {
                        let expected = if n + 2 * p >= k { Some((n + 2 * p - k) / s + 1) } else { None };
                        assert_eq!(conv_out_len(n, k, s, p), expected, "n={n} k={k} s={s} p={p}");
                    }
                }
            }
        }
    }

    #[test]
    fn matches_naive_across_geometries() {
        for &(shape, k, s, p) in &[
            ([2, 3, 5, 6, 7], [4, 3, 3, 3, 3], 1, 1),
            ([1, 2, 7, 5, 6], [3, 2, 3, 3, 3], 2, 1),
            ([1, 2, 4, 4, 4], [2, 2, 2, 3, 1], 1, 0),
            ([1, 3, 6, 6, 6], [2, 3, 1, 1, 1], 2, 0),
            ([1, 1, 5, 5, 5], [2, 1, 5, 5, 5], 1, 2),
        ] {
            let x = ramp(&shape, 0.3);
            let w = ramp(&k, 1.7);
            let b: Vec<f64> = (0..k[0]).map(|i| i as f64 * 0.1).collect();
            let y = conv3d(&x, &w, Some(&b), s, p).unwrap();
            let yr = conv_naive(&x, &w, &b, s, p);
            assert_eq!(y.shape(), yr.shape());
            for (a, b) in y.data().iter().zip(yr.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let x = ramp(&[1, 2, 4, 4, 4], 0.0);
        let w = ramp(&[3, 2, 3, 3, 3], 1.0);
        let go = Tensor::zeros(&[1, 3, 4, 4, 4]);
        let (gx, gw, gb) = conv3d_backward(&x, &w, 1, 1, &go).unwrap();
        assert!(gx.data().iter().chain(gw.data()).chain(&gb).all(|&v| v == 0.0));
    }

    #[test]
    fn bias_grad_is_channel_sum() {
        let x = ramp(&[2, 2, 4, 4, 4], 0.0);
        let w = ramp(&[3, 2, 3, 3, 3], 1.0);
        let go = ramp(&[2, 3, 2, 2, 2], 2.0);
        let (_, _, gb) = conv3d_backward(&x, &w, 2, 1, &go).unwrap();
        for co in 0..3 {
            let mut brute = 0.0;
            for n in 0..2 {
                for i in 0..8 {
                    brute += go.data()[(n * 3 + co) * 8 + i];
                }
            }
            assert!((gb[co] - brute).abs() < 1e-12);
        }
    }

    #[test]
    fn maxpool_routes_to_argmax() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 2, 2], (1..=8).map(|v| v as f64).collect()).unwrap();
        let (y, arg) = maxpool3d(&x).unwrap();
        assert_eq!(y.data(), &[8.0]);
        let gx = maxpool3d_backward(x.shape(), &arg, &Tensor::full(&[1, 1, 1, 1, 1], 1.0)).unwrap();
        assert_eq!(gx.data(), &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_equal_logits_are_uniform() {
        let x = Tensor::<f64>::zeros(&[1, 4, 2, 2, 2]);
        let y = softmax_channels(&x).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn relu_values() {
        let x = Tensor::<f64>::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn transposed_conv_scatters_blocks() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let y = conv_transpose3d(&x, &w, Some(&[0.5]), 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2, 4]);
        // voxel (a,b,c) of block for input j equals x[j]*w[a,b,c] + 0.5
        for a in 0..2 {
            for b in 0..2 {
                for j in 0..2 {
                    for c in 0..2 {
                        let v = y.data()[(a * 2 + b) * 4 + j * 2 + c];
                        let expect = x.data()[j] * w.data()[(a * 2 + b) * 2 + c] + 0.5;
                        assert_eq!(v, expect);
                    }
                }
            }
        }
    }
}
