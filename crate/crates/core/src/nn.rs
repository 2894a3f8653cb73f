//! Layer primitives on top of candle: seeded parameter stores, an im2col
//! convolution with its own backward pass, 2x2 transposed convolution,
//! group normalization and bilinear resampling matrices.

use std::cell::RefCell;

use candle_core::{
    CpuStorage, CustomOp3, DType, Device, Layout, Module, Shape, Tensor,
    Var,
};
use candle_nn::VarMap;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Parameter initialisers.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// He normal with the given fan-in.
    KaimingNormal { fan_in: usize },
    Uniform { bound: f64 },
    Normal { std: f64 },
    Const(f64),
}

/// A named parameter group with deterministic initialisation.
pub struct ParamStore {
    varmap: VarMap,
    dtype: DType,
    device: Device,
    rng: RefCell<ChaCha8Rng>,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            varmap: VarMap::new(),
            dtype,
            device: Device::Cpu,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn root(&self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    pub fn varmap_mut(&mut self) -> &mut VarMap {
        &mut self.varmap
    }

    /// Variables sorted by name, for reproducible iteration.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let data = self.varmap.data().lock().expect("varmap lock");
        let mut v: Vec<_> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    pub fn vars(&self) -> Vec<Var> {
        self.named_vars().into_iter().map(|(_, v)| v).collect()
    }

    pub fn count(&self) -> usize {
        self.named_vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    fn create(&self, name: String, shape: Shape, init: Init) -> candle_core::Result<Tensor> {
        let n = shape.elem_count();
        let mut rng = self.rng.borrow_mut();
        let values: Vec<f64> = match init {
            Init::KaimingNormal { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect()
            }
            Init::Normal { std } => (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect(),
            Init::Uniform { bound } => (0..n).map(|_| rng.gen_range(-bound..=bound)).collect(),
            Init::Const(c) => vec![c; n],
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let mut data = self.varmap.data().lock().expect("varmap lock");
        if data.contains_key(&name) {
            candle_core::bail!("parameter {name} created twice");
        }
        let out = var.as_tensor().clone();
        data.insert(name, var);
        Ok(out)
    }
}

#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&self, name: impl AsRef<str>) -> Scope<'a> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    pub fn get(&self, shape: impl Into<Shape>, name: &str, init: Init) -> candle_core::Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.create(full, shape.into(), init)
    }
}

fn out_size(n: usize, k: usize, s: usize, p: usize) -> usize {
    (n + 2 * p - k) / s + 1
}

/// Geometry of one convolution: input `[C, H, W]` per sample, square kernel.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
}

impl ConvGeom {
    fn ho(&self) -> usize {
        out_size(self.h, self.k, self.s, self.p)
    }

    fn wo(&self) -> usize {
        out_size(self.w, self.k, self.s, self.p)
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.s == 1 && self.p == 0
    }
}

/// Unfolds one sample `[C, H, W]` into `dst = [C*k*k, Ho*Wo]`. Padding
/// positions are never written, so `dst` must start zeroed and can then be
/// reused across samples of the same geometry.
fn im2col_into<T: Copy>(src: &[T], dst: &mut [T], g: ConvGeom) {
    let (ho, wo) = (g.ho(), g.wo());
    let (h, w, k, s, p) = (g.h, g.w, g.k, g.s, g.p);
    for ci in 0..g.c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let drow = &mut dst[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let srow = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let drow = &mut drow[oy * wo..(oy + 1) * wo];
                    if s == 1 {
                        // valid ox: 0 <= ox + kj - p < w
                        let lo = p.saturating_sub(kj);
                        let hi = (w + p - kj).min(wo);
                        if lo < hi {
                            let slo = lo + kj - p;
                            drow[lo..hi].copy_from_slice(&srow[slo..slo + (hi - lo)]);
                        }
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * s + kj) as isize - p as isize;
                            if ix >= 0 && (ix as usize) < w {
                                *d = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_into`]: overlap-adds columns into `dst = [C, H, W]`.
fn col2im_add<T: Copy + std::ops::AddAssign>(src: &[T], dst: &mut [T], g: ConvGeom) {
    let (ho, wo) = (g.ho(), g.wo());
    let (h, w, k, s, p) = (g.h, g.w, g.k, g.s, g.p);
    for ci in 0..g.c {
        let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let srow_all = &src[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let prow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let scol = &srow_all[oy * wo..(oy + 1) * wo];
                    if s == 1 {
                        let lo = p.saturating_sub(kj);
                        let hi = (w + p - kj).min(wo);
                        if lo < hi {
                            let plo = lo + kj - p;
                            for (d, &v) in prow[plo..plo + (hi - lo)].iter_mut().zip(&scol[lo..hi]) {
                                *d += v;
                            }
                        }
                    } else {
                        for (ox, &v) in scol.iter().enumerate() {
                            let ix = (ox * s + kj) as isize - p as isize;
                            if ix >= 0 && (ix as usize) < w {
                                prow[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Element types the convolution kernels run on.
trait ConvElem: Copy + Default + std::ops::AddAssign + std::ops::Mul<Output = Self> + candle_core::WithDType {
    /// Row-major `c = alpha * c + a * b` with explicit row and column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], sa: (isize, isize), b: &[Self], sb: (isize, isize), alpha: Self, c: &mut [Self], rsc: isize);
}

#[allow(clippy::too_many_arguments)]
unsafe fn gemm_any<T: 'static + Copy + num_traits::One + num_traits::Zero>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (isize, isize),
    b: &[T],
    (rsb, csb): (isize, isize),
    alpha: T,
    c: &mut [T],
    rsc: isize,
) {
    gemm::gemm(
        m,
        n,
        k,
        c.as_mut_ptr(),
        1,
        rsc,
        !alpha.is_zero(),
        a.as_ptr(),
        csa,
        rsa,
        b.as_ptr(),
        csb,
        rsb,
        alpha,
        T::one(),
        false,
        false,
        false,
        gemm::Parallelism::None,
    )
}

impl ConvElem for f32 {
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], (rsa, csa): (isize, isize), b: &[Self], (rsb, csb): (isize, isize), alpha: Self, c: &mut [Self], rsc: isize) {
        // SAFETY: callers pass slices that cover every strided index of the
        // m x k, k x n and m x n operands.
        unsafe { gemm_any(m, k, n, a, (rsa, csa), b, (rsb, csb), alpha, c, rsc) }
    }
}

impl ConvElem for f64 {
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], (rsa, csa): (isize, isize), b: &[Self], (rsb, csb): (isize, isize), alpha: Self, c: &mut [Self], rsc: isize) {
        // SAFETY: as for f32.
        unsafe { gemm_any(m, k, n, a, (rsa, csa), b, (rsb, csb), alpha, c, rsc) }
    }
}

fn conv_forward<T: ConvElem>(x: &[T], w: &[T], b: &[T], n: usize, o: usize, g: ConvGeom) -> Vec<T> {
    let (rows, cols) = (g.rows(), g.ho() * g.wo());
    let in_len = g.c * g.h * g.w;
    let mut y = vec![T::default(); n * o * cols];
    let mut buf = if g.is_pointwise() { Vec::new() } else { vec![T::default(); rows * cols] };
    for bi in 0..n {
        let xb = &x[bi * in_len..(bi + 1) * in_len];
        let yb = &mut y[bi * o * cols..(bi + 1) * o * cols];
        for (oc, row) in yb.chunks_mut(cols).enumerate() {
            row.fill(b[oc]);
        }
        let colmat: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col_into(xb, &mut buf, g);
            &buf
        };
        T::gemm(o, rows, cols, w, (rows as isize, 1), colmat, (cols as isize, 1), T::from_f64(1.0), yb, cols as isize);
    }
    y
}

/// Returns `(dx, dw, db)` for upstream gradient `dy = [N, O, Ho, Wo]`;
/// `dx` is skipped when the input does not need a gradient.
fn conv_backward<T: ConvElem>(
    x: &[T],
    w: &[T],
    dy: &[T],
    n: usize,
    o: usize,
    g: ConvGeom,
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (rows, cols) = (g.rows(), g.ho() * g.wo());
    let in_len = g.c * g.h * g.w;
    let mut dx = need_dx.then(|| vec![T::default(); n * in_len]);
    let mut dw = vec![T::default(); o * rows];
    let mut db = vec![T::default(); o];
    let mut buf = if g.is_pointwise() { Vec::new() } else { vec![T::default(); rows * cols] };
    let mut dcols = if need_dx && !g.is_pointwise() { vec![T::default(); rows * cols] } else { Vec::new() };
    for bi in 0..n {
        let xb = &x[bi * in_len..(bi + 1) * in_len];
        let dyb = &dy[bi * o * cols..(bi + 1) * o * cols];
        for (oc, row) in dyb.chunks(cols).enumerate() {
            let mut acc = T::default();
            for &v in row {
                acc += v;
            }
            db[oc] += acc;
        }
        let colmat: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col_into(xb, &mut buf, g);
            &buf
        };
        // dw [O, R] += dy_b [O, P] * cols^T [P, R]
        T::gemm(o, cols, rows, dyb, (cols as isize, 1), colmat, (1, cols as isize), T::from_f64(1.0), &mut dw, rows as isize);
        let Some(dx) = dx.as_mut() else { continue };
        let dxb = &mut dx[bi * in_len..(bi + 1) * in_len];
        if g.is_pointwise() {
            T::gemm(rows, o, cols, w, (1, rows as isize), dyb, (cols as isize, 1), T::from_f64(1.0), dxb, cols as isize);
        } else {
            // dcols = w^T [R, O] * dy_b [O, P]
            T::gemm(rows, o, cols, w, (1, rows as isize), dyb, (cols as isize, 1), T::from_f64(0.0), &mut dcols, cols as isize);
            col2im_add(&dcols, dxb, g);
        }
    }
    (dx, dw, db)
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("conv2d expects contiguous operands"),
    }
}

/// Fused convolution `(x, weight, bias) -> y` with a hand-written backward.
#[derive(Debug, Clone, Copy)]
struct ConvOp {
    stride: usize,
    padding: usize,
}

impl ConvOp {
    fn geometry(&self, x: &Shape, w: &Shape) -> candle_core::Result<(usize, usize, ConvGeom)> {
        let (n, c, h, wd) = x.dims4()?;
        let (o, ci, k, k2) = w.dims4()?;
        if ci != c || k != k2 {
            candle_core::bail!("conv2d: input {x:?} incompatible with weight {w:?}");
        }
        if h + 2 * self.padding < k || wd + 2 * self.padding < k {
            candle_core::bail!("conv2d: input {x:?} smaller than kernel {k}");
        }
        Ok((
            n,
            o,
            ConvGeom {
                c,
                h,
                w: wd,
                k,
                s: self.stride,
                p: self.padding,
            },
        ))
    }
}

impl CustomOp3 for ConvOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn cpu_fwd(
        &self,
        xs: &CpuStorage,
        xl: &Layout,
        ws: &CpuStorage,
        wl: &Layout,
        bs: &CpuStorage,
        bl: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, o, g) = self.geometry(xl.shape(), wl.shape())?;
        let shape = Shape::from((n, o, g.ho(), g.wo()));
        let out = match (xs, ws, bs) {
            (CpuStorage::F32(x), CpuStorage::F32(w), CpuStorage::F32(b)) => CpuStorage::F32(conv_forward(
                contiguous_slice(x, xl)?,
                contiguous_slice(w, wl)?,
                contiguous_slice(b, bl)?,
                n,
                o,
                g,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(w), CpuStorage::F64(b)) => CpuStorage::F64(conv_forward(
                contiguous_slice(x, xl)?,
                contiguous_slice(w, wl)?,
                contiguous_slice(b, bl)?,
                n,
                o,
                g,
            )),
            _ => candle_core::bail!("conv2d: operands must all be f32 or all be f64"),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (n, o, g) = self.geometry(x.shape(), w.shape())?;
        let grad = grad.contiguous()?;
        let (gs, gl) = grad.storage_and_layout();
        let (xs, xl) = x.storage_and_layout();
        let (ws, wl) = w.storage_and_layout();
        let dev = x.device();
        let need_dx = x.track_op();
        let grads = match (&*xs, &*ws, &*gs) {
            (
                candle_core::Storage::Cpu(CpuStorage::F32(xv)),
                candle_core::Storage::Cpu(CpuStorage::F32(wv)),
                candle_core::Storage::Cpu(CpuStorage::F32(gv)),
            ) => {
                let (dx, dw, db) = conv_backward(
                    contiguous_slice(xv, xl)?,
                    contiguous_slice(wv, wl)?,
                    contiguous_slice(gv, gl)?,
                    n,
                    o,
                    g,
                    need_dx,
                );
                (
                    dx.map(|d| Tensor::from_vec(d, x.shape(), dev)).transpose()?,
                    Tensor::from_vec(dw, w.shape(), dev)?,
                    Tensor::from_vec(db, b.shape(), dev)?,
                )
            }
            (
                candle_core::Storage::Cpu(CpuStorage::F64(xv)),
                candle_core::Storage::Cpu(CpuStorage::F64(wv)),
                candle_core::Storage::Cpu(CpuStorage::F64(gv)),
            ) => {
                let (dx, dw, db) = conv_backward(
                    contiguous_slice(xv, xl)?,
                    contiguous_slice(wv, wl)?,
                    contiguous_slice(gv, gl)?,
                    n,
                    o,
                    g,
                    need_dx,
                );
                (
                    dx.map(|d| Tensor::from_vec(d, x.shape(), dev)).transpose()?,
                    Tensor::from_vec(dw, w.shape(), dev)?,
                    Tensor::from_vec(db, b.shape(), dev)?,
                )
            }
            _ => candle_core::bail!("conv2d backward: unsupported storage"),
        };
        Ok((grads.0, Some(grads.1), Some(grads.2)))
    }
}

/// Square-kernel 2D convolution, `[N, C, H, W] -> [N, O, Ho, Wo]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        vs: Scope,
    ) -> candle_core::Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let weight = vs.get((out_ch, in_ch, kernel, kernel), "weight", Init::KaimingNormal { fan_in })?;
        let bias = vs.get(out_ch, "bias", Init::Uniform { bound: 1.0 / (fan_in as f64).sqrt() })?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn with_bias_init(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        bias_init: Init,
        vs: Scope,
    ) -> candle_core::Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let weight = vs.get((out_ch, in_ch, kernel, kernel), "weight", Init::KaimingNormal { fan_in })?;
        let bias = vs.get(out_ch, "bias", bias_init)?;
        Ok(Self {
            weight,
            bias,
            stride: 1,
            padding: kernel / 2,
        })
    }

    pub fn conv3x3(in_ch: usize, out_ch: usize, vs: Scope) -> candle_core::Result<Self> {
        Self::new(in_ch, out_ch, 3, 1, 1, vs)
    }

    pub fn conv1x1(in_ch: usize, out_ch: usize, vs: Scope) -> candle_core::Result<Self> {
        Self::new(in_ch, out_ch, 1, 1, 0, vs)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x.contiguous()?.apply_op3(
            &self.weight,
            &self.bias,
            ConvOp {
                stride: self.stride,
                padding: self.padding,
            },
        )
    }
}

/// Transposed convolution with kernel 2 and stride 2, `[N, C, H, W] -> [N, O, 2H, 2W]`.
#[derive(Debug, Clone)]
pub struct UpConv2x2 {
    weight: Tensor,
    bias: Tensor,
}

impl UpConv2x2 {
    pub fn new(in_ch: usize, out_ch: usize, vs: Scope) -> candle_core::Result<Self> {
        let weight = vs.get((in_ch, out_ch, 2, 2), "weight", Init::KaimingNormal { fan_in: in_ch })?;
        let bias = vs.get(out_ch, "bias", Init::Uniform { bound: 1.0 / (in_ch as f64).sqrt() })?;
        Ok(Self { weight, bias })
    }
}

impl Module for UpConv2x2 {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let o = self.weight.dims()[1];
        // [O*2*2, C] x [N, C, HW] -> [N, O, 2, 2, H, W]
        let wmat = self.weight.reshape((c, o * 4))?.t()?;
        let y = wmat.broadcast_matmul(&x.reshape((n, c, h * w))?)?;
        let y = y
            .reshape((n, o, 2, 2, h, w))?
            .permute((0, 1, 4, 2, 5, 3))?
            .reshape((n, o, 2 * h, 2 * w))?;
        y.broadcast_add(&self.bias.reshape((1, o, 1, 1))?)
    }
}

/// Per-(sample, group) statistics: mean and `1 / sqrt(var + eps)`.
fn group_stats<T: candle_core::WithDType>(x: &[T], n: usize, groups: usize, len: usize, eps: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n * groups);
    for chunk in x.chunks_exact(len).take(n * groups) {
        let mean = chunk.iter().map(|v| v.to_f64()).sum::<f64>() / len as f64;
        let var = chunk.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / len as f64;
        out.push((mean, 1.0 / (var + eps).sqrt()));
    }
    out
}

fn group_norm_forward<T: candle_core::WithDType>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    dims: (usize, usize, usize),
    op: &GroupNormOp,
) -> Vec<T> {
    let (n, c, hw) = dims;
    let cg = c / op.groups;
    let stats = group_stats(x, n, op.groups, cg * hw, op.eps);
    let mut y = vec![T::from_f64(0.0); x.len()];
    for s in 0..n {
        for ch in 0..c {
            let (mean, inv) = stats[s * op.groups + ch / cg];
            let a = gamma[ch].to_f64() * inv;
            let b = beta[ch].to_f64() - a * mean;
            let base = (s * c + ch) * hw;
            for (o, v) in y[base..base + hw].iter_mut().zip(&x[base..base + hw]) {
                let mut r = a * v.to_f64() + b;
                if op.relu && r < 0.0 {
                    r = 0.0;
                }
                *o = T::from_f64(r);
            }
        }
    }
    y
}

#[allow(clippy::type_complexity)]
fn group_norm_backward<T: candle_core::WithDType>(
    x: &[T],
    gamma: &[T],
    y: &[T],
    dy: &[T],
    dims: (usize, usize, usize),
    op: &GroupNormOp,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, hw) = dims;
    let cg = c / op.groups;
    let len = (cg * hw) as f64;
    let stats = group_stats(x, n, op.groups, cg * hw, op.eps);
    let mut dx = vec![T::from_f64(0.0); x.len()];
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    // upstream gradient with the ReLU mask applied
    let g = |i: usize| -> f64 {
        if op.relu && y[i].to_f64() <= 0.0 {
            0.0
        } else {
            dy[i].to_f64()
        }
    };
    for s in 0..n {
        for grp in 0..op.groups {
            let (mean, inv) = stats[s * op.groups + grp];
            let (mut sum_d, mut sum_dx) = (0.0, 0.0);
            for ch in grp * cg..(grp + 1) * cg {
                let base = (s * c + ch) * hw;
                let gm = gamma[ch].to_f64();
                let (mut db, mut dg) = (0.0, 0.0);
                for i in base..base + hw {
                    let d = g(i);
                    let xh = (x[i].to_f64() - mean) * inv;
                    db += d;
                    dg += d * xh;
                }
                dbeta[ch] += db;
                dgamma[ch] += dg;
                sum_d += gm * db;
                sum_dx += gm * dg;
            }
            let (md, mdx) = (sum_d / len, sum_dx / len);
            for ch in grp * cg..(grp + 1) * cg {
                let base = (s * c + ch) * hw;
                let gm = gamma[ch].to_f64();
                for i in base..base + hw {
                    let xh = (x[i].to_f64() - mean) * inv;
                    dx[i] = T::from_f64(inv * (gm * g(i) - md - xh * mdx));
                }
            }
        }
    }
    (
        dx,
        dgamma.into_iter().map(T::from_f64).collect(),
        dbeta.into_iter().map(T::from_f64).collect(),
    )
}

/// Fused group normalisation with optional ReLU, `(x, gamma, beta) -> y`.
#[derive(Debug, Clone, Copy)]
struct GroupNormOp {
    groups: usize,
    eps: f64,
    relu: bool,
}

impl GroupNormOp {
    fn dims(&self, shape: &Shape) -> candle_core::Result<(usize, usize, usize)> {
        let d = shape.dims();
        if d.len() < 2 || !d[1].is_multiple_of(self.groups) {
            candle_core::bail!("group norm: shape {shape:?} does not split into {} groups", self.groups);
        }
        Ok((d[0], d[1], d[2..].iter().product()))
    }
}

impl CustomOp3 for GroupNormOp {
    fn name(&self) -> &'static str {
        "group-norm"
    }

    fn cpu_fwd(
        &self,
        xs: &CpuStorage,
        xl: &Layout,
        gs: &CpuStorage,
        gl: &Layout,
        bs: &CpuStorage,
        bl: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = self.dims(xl.shape())?;
        let out = match (xs, gs, bs) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => CpuStorage::F32(group_norm_forward(
                contiguous_slice(x, xl)?,
                contiguous_slice(g, gl)?,
                contiguous_slice(b, bl)?,
                dims,
                self,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => CpuStorage::F64(group_norm_forward(
                contiguous_slice(x, xl)?,
                contiguous_slice(g, gl)?,
                contiguous_slice(b, bl)?,
                dims,
                self,
            )),
            _ => candle_core::bail!("group norm: operands must all be f32 or all be f64"),
        };
        Ok((out, xl.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let dims = self.dims(x.shape())?;
        let grad = grad.contiguous()?;
        let res = res.contiguous()?;
        let (xs, xl) = x.storage_and_layout();
        let (gs, gl) = gamma.storage_and_layout();
        let (ys, yl) = res.storage_and_layout();
        let (ds, dl) = grad.storage_and_layout();
        let dev = x.device();
        use candle_core::Storage::Cpu;
        macro_rules! run {
            ($xv:expr, $gv:expr, $yv:expr, $dv:expr) => {{
                let (dx, dg, db) = group_norm_backward(
                    contiguous_slice($xv, &xl)?,
                    contiguous_slice($gv, &gl)?,
                    contiguous_slice($yv, &yl)?,
                    contiguous_slice($dv, &dl)?,
                    dims,
                    self,
                );
                (
                    Tensor::from_vec(dx, x.shape(), dev)?,
                    Tensor::from_vec(dg, gamma.shape(), dev)?,
                    Tensor::from_vec(db, beta.shape(), dev)?,
                )
            }};
        }
        let (dx, dg, db) = match (&*xs, &*gs, &*ys, &*ds) {
            (Cpu(CpuStorage::F32(xv)), Cpu(CpuStorage::F32(gv)), Cpu(CpuStorage::F32(yv)), Cpu(CpuStorage::F32(dv))) => {
                run!(xv, gv, yv, dv)
            }
            (Cpu(CpuStorage::F64(xv)), Cpu(CpuStorage::F64(gv)), Cpu(CpuStorage::F64(yv)), Cpu(CpuStorage::F64(dv))) => {
                run!(xv, gv, yv, dv)
            }
            _ => candle_core::bail!("group norm backward: unsupported storage"),
        };
        Ok((Some(dx), Some(dg), Some(db)))
    }
}

/// Group normalisation over `[N, C, ...]` with a per-channel affine map.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(groups: usize, channels: usize, vs: Scope) -> candle_core::Result<Self> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            candle_core::bail!("group norm: {channels} channels do not split into {groups} groups");
        }
        Ok(Self {
            weight: vs.get(channels, "weight", Init::Const(1.0))?,
            bias: vs.get(channels, "bias", Init::Const(0.0))?,
            groups,
            eps: 1e-5,
        })
    }

    fn apply(&self, x: &Tensor, relu: bool) -> candle_core::Result<Tensor> {
        x.contiguous()?.apply_op3(
            &self.weight,
            &self.bias,
            GroupNormOp {
                groups: self.groups,
                eps: self.eps,
                relu,
            },
        )
    }

    /// Normalisation followed by ReLU in one pass.
    pub fn forward_relu(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.apply(x, true)
    }
}

impl Module for GroupNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.apply(x, false)
    }
}

/// Conv 3x3 -> GroupNorm -> ReLU, twice.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    conv1: Conv2d,
    norm1: GroupNorm,
    conv2: Conv2d,
    norm2: GroupNorm,
}

impl ConvBlock {
    pub fn new(in_ch: usize, out_ch: usize, groups: usize, vs: Scope) -> candle_core::Result<Self> {
        Ok(Self {
            conv1: Conv2d::conv3x3(in_ch, out_ch, vs.pp("conv1"))?,
            norm1: GroupNorm::new(groups, out_ch, vs.pp("norm1"))?,
            conv2: Conv2d::conv3x3(out_ch, out_ch, vs.pp("conv2"))?,
            norm2: GroupNorm::new(groups, out_ch, vs.pp("norm2"))?,
        })
    }
}

impl Module for ConvBlock {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let x = self.norm1.forward_relu(&self.conv1.forward(x)?)?;
        self.norm2.forward_relu(&self.conv2.forward(&x)?)
    }
}

/// Row-stochastic bilinear resampling matrix `[dst, src]` with half-pixel
/// centres (no corner alignment), edge-clamped.
pub fn bilinear_matrix(src: usize, dst: usize) -> Vec<f64> {
    bilinear_matrix_at(0.0, src as f64, dst, src)
}

/// Bilinear sampling matrix `[dst, n]` for `dst` evenly spaced cells over the
/// pixel-edge interval `[lo, hi)` of an axis with `n` pixels, edge-clamped.
pub fn bilinear_matrix_at(lo: f64, hi: f64, dst: usize, n: usize) -> Vec<f64> {
    let mut m = vec![0.0; dst * n];
    let step = (hi - lo) / dst as f64;
    for i in 0..dst {
        let x = (lo + (i as f64 + 0.5) * step - 0.5).clamp(0.0, (n - 1) as f64);
        let x0 = x.floor() as usize;
        let x1 = (x0 + 1).min(n - 1);
        let f = x - x0 as f64;
        m[i * n + x0] += 1.0 - f;
        m[i * n + x1] += f;
    }
    m
}

/// Bilinear resize of the two trailing axes of `x` to `(height, width)`.
pub fn bilinear_resize(x: &Tensor, height: usize, width: usize) -> candle_core::Result<Tensor> {
    let dims = x.dims();
    let r = dims.len();
    let (h, w) = (dims[r - 2], dims[r - 1]);
    if (h, w) == (height, width) {
        return Ok(x.clone());
    }
    let lead: usize = dims[..r - 2].iter().product();
    let ry = Tensor::from_vec(bilinear_matrix(h, height), (height, h), x.device())?.to_dtype(x.dtype())?;
    let rxt = Tensor::from_vec(bilinear_matrix(w, width), (width, w), x.device())?
        .to_dtype(x.dtype())?
        .t()?;
    let flat = x.reshape((lead, h, w))?;
    let y = ry.broadcast_matmul(&flat)?.broadcast_matmul(&rxt)?;
    let mut out_dims = dims[..r - 2].to_vec();
    out_dims.extend([height, width]);
    y.reshape(out_dims)
}

pub fn sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    candle_nn::ops::sigmoid(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], (n, c, h, w): (usize, usize, usize, usize), wt: &[f64], o: usize, k: usize, s: usize, p: usize) -> Vec<f64> {
        let ho = out_size(h, k, s, p);
        let wo = out_size(w, k, s, p);
        let mut out = vec![0.0; n * o * ho * wo];
        for b in 0..n {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * s + ki) as isize - p as isize;
                                    let ix = (ox * s + kj) as isize - p as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x[((b * c + ic) * h + iy as usize) * w + ix as usize]
                                        * wt[((oc * c + ic) * k + ki) * k + kj];
                                }
                            }
                        }
                        out[((b * o + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_summation() {
        let store = ParamStore::new(DType::F64, 3);
        for &(k, s, p) in &[(3usize, 1usize, 1usize), (3, 2, 1), (1, 1, 0)] {
            let conv = Conv2d::new(3, 5, k, s, p, store.root().pp(format!("c{k}{s}"))).unwrap();
            let x = Tensor::randn(0f64, 1.0, (2, 3, 6, 6), &Device::Cpu).unwrap();
            let y = conv.forward(&x).unwrap();
            let expect = naive_conv(
                &x.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
                (2, 3, 6, 6),
                &conv.weight.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
                5,
                k,
                s,
                p,
            );
            let bias = conv.bias.to_vec1::<f64>().unwrap();
            let got = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let ho = out_size(6, k, s, p);
            for (i, (g, e)) in got.iter().zip(expect.iter()).enumerate() {
                let oc = (i / (ho * ho)) % 5;
                assert!((g - (e + bias[oc])).abs() < 1e-10, "k={k} s={s}: {g} vs {}", e + bias[oc]);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeom { c: 3, h: 5, w: 7, k: 3, s: 2, p: 1 };
        let x = Tensor::randn(0f64, 1.0, (3, 5, 7), &Device::Cpu).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mut cols = vec![0.0; g.rows() * g.ho() * g.wo()];
        im2col_into(&x, &mut cols, g);
        let y = Tensor::randn(0f64, 1.0, cols.len(), &Device::Cpu).unwrap().to_vec1::<f64>().unwrap();
        let mut back = vec![0.0; x.len()];
        col2im_add(&y, &mut back, g);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let store = ParamStore::new(DType::F64, 5);
        for &(k, s, p) in &[(3usize, 1usize, 1usize), (3, 2, 1), (1, 1, 0)] {
            let conv = Conv2d::new(2, 3, k, s, p, store.root().pp(format!("g{k}{s}"))).unwrap();
            let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 2, 5, 5), &Device::Cpu).unwrap()).unwrap();
            let probe = Tensor::randn(0f64, 1.0, conv.forward(&x).unwrap().shape(), &Device::Cpu).unwrap();
            let loss = |xv: &Tensor, wv: &Tensor, bv: &Tensor| -> f64 {
                let c = Conv2d { weight: wv.clone(), bias: bv.clone(), stride: s, padding: p };
                (c.forward(xv).unwrap() * &probe).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
            };
            let y = (conv.forward(x.as_tensor()).unwrap() * &probe).unwrap().sum_all().unwrap();
            let grads = y.backward().unwrap();
            let inputs = [x.as_tensor().clone(), conv.weight.clone(), conv.bias.clone()];
            for which in 0..3 {
                let analytic = grads.get(&inputs[which]).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
                let base = inputs[which].flatten_all().unwrap().to_vec1::<f64>().unwrap();
                for i in 0..base.len() {
                    let eval = |d: f64| {
                        let mut v = base.clone();
                        v[i] += d;
                        let t = Tensor::from_vec(v, inputs[which].shape(), &Device::Cpu).unwrap();
                        let mut args = inputs.clone();
                        args[which] = t;
                        loss(&args[0], &args[1], &args[2])
                    };
                    let numeric = (eval(1e-6) - eval(-1e-6)) / 2e-6;
                    assert!((numeric - analytic[i]).abs() < 1e-6, "k={k} s={s} arg {which}[{i}]: {numeric} vs {}", analytic[i]);
                }
            }
        }
    }

    #[test]
    fn group_norm_matches_reference_and_gradients() {
        let store = ParamStore::new(DType::F64, 3);
        let gn = GroupNorm::new(2, 4, store.root()).unwrap();
        let dev = Device::Cpu;
        let gamma = Var::from_slice(&[0.5f64, -1.0, 2.0, 1.5], 4, &dev).unwrap();
        let beta = Var::from_slice(&[0.1f64, 0.0, -0.3, 0.2], 4, &dev).unwrap();
        let gn = GroupNorm { weight: gamma.as_tensor().clone(), bias: beta.as_tensor().clone(), ..gn };
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 4, 3, 3), &dev).unwrap()).unwrap();
        let reference = candle_nn::GroupNorm::new(gamma.as_tensor().clone(), beta.as_tensor().clone(), 4, 2, 1e-5).unwrap();
        let a = gn.forward(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = reference.forward(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
        let r = gn.forward_relu(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (u, v) in r.iter().zip(&b) {
            assert!((u - v.max(0.0)).abs() < 1e-12);
        }
        let probe = Tensor::randn(0f64, 1.0, (2, 4, 3, 3), &dev).unwrap();
        let vars = vec![("x".to_string(), x.clone()), ("gamma".to_string(), gamma.clone()), ("beta".to_string(), beta.clone())];
        for relu in [false, true] {
            let f = || -> crate::error::Result<Tensor> {
                let y = if relu { gn.forward_relu(x.as_tensor())? } else { gn.forward(x.as_tensor())? };
                Ok((y * &probe)?.sum_all()?)
            };
            let opts = crate::gradcheck::GradCheckOptions { max_coords: usize::MAX, ..Default::default() };
            for rep in crate::gradcheck::check_gradients(&vars, f, opts).unwrap() {
                assert!(rep.relative_error() < 1e-6, "relu={relu} {rep:?}");
            }
        }
    }

    #[test]
    fn upconv_shape_and_params() {
        let store = ParamStore::new(DType::F32, 0);
        let up = UpConv2x2::new(8, 4, store.root()).unwrap();
        let x = Tensor::zeros((3, 8, 5, 6), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(up.forward(&x).unwrap().dims(), &[3, 4, 10, 12]);
        assert_eq!(store.count(), 8 * 4 * 4 + 4);
    }

    #[test]
    fn one_by_one_conv_param_count() {
        let store = ParamStore::new(DType::F32, 0);
        let _ = Conv2d::conv1x1(4, 8, store.root()).unwrap();
        assert_eq!(store.count(), 40);
        assert_eq!(ParamStore::new(DType::F32, 0).count(), 0);
    }

    #[test]
    fn bilinear_rows_sum_to_one_and_preserve_constants() {
        for (s, d) in [(3, 12), (6, 48), (5, 5), (8, 3)] {
            let m = bilinear_matrix(s, d);
            for i in 0..d {
                let row: f64 = m[i * s..(i + 1) * s].iter().sum();
                assert!((row - 1.0).abs() < 1e-12);
            }
        }
        let x = Tensor::full(0.25f64, (2, 3, 3), &Device::Cpu).unwrap();
        let y = bilinear_resize(&x, 12, 12).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|&a| (a - 0.25).abs() < 1e-12));
    }

    #[test]
    fn seeded_stores_are_reproducible() {
        let a = ParamStore::new(DType::F32, 11);
        let b = ParamStore::new(DType::F32, 11);
        let ca = Conv2d::conv3x3(2, 2, a.root()).unwrap();
        let cb = Conv2d::conv3x3(2, 2, b.root()).unwrap();
        let va = ca.weight.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let vb = cb.weight.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(va, vb);
    }
}
