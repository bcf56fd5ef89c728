//! A unidirectional Mamba block: pre-norm, gated linear projections around a
//! depthwise causal 1-D convolution, SiLU, and the selective SSM, with a
//! residual connection around the whole block.

use crate::error::{Error, Result};
use crate::num::{silu, silu_deriv, Real};
use crate::ssm::{SelectiveSsm, SsmCache};
use ndarray::{Array1, Array2, Axis};
use rand::Rng;

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct MambaBlockParams<F: Real> {
    pub norm_gain: Array1<F>,
    pub norm_bias: Array1<F>,
    /// [2*d_inner x d_model]; rows 0..d_inner feed the SSM path, the rest the gate.
    pub in_proj_w: Array2<F>,
    pub in_proj_b: Array1<F>,
    /// [d_inner x k_conv] depthwise; column k_conv-1 is the current tap.
    pub conv_w: Array2<F>,
    pub conv_b: Array1<F>,
    pub ssm: SelectiveSsm<F>,
    /// [d_model x d_inner]
    pub out_proj_w: Array2<F>,
    pub out_proj_b: Array1<F>,
}

impl<F: Real> MambaBlockParams<F> {
    pub fn d_model(&self) -> usize {
        self.in_proj_w.ncols()
    }

    pub fn d_inner(&self) -> usize {
        self.conv_w.nrows()
    }

    pub fn k_conv(&self) -> usize {
        self.conv_w.ncols()
    }

    pub fn init<R: Rng>(
        d_model: usize,
        d_inner: usize,
        n_state: usize,
        k_conv: usize,
        rng: &mut R,
    ) -> Self {
        let bm = 1.0 / (d_model as f64).sqrt();
        let bi = 1.0 / (d_inner as f64).sqrt();
        let bk = 1.0 / (k_conv as f64).sqrt();
        let uni = |rng: &mut R, b: f64| F::of_f64(rng.gen_range(-b..b));
        MambaBlockParams {
            norm_gain: Array1::from_elem(d_model, F::one()),
            norm_bias: Array1::zeros(d_model),
            in_proj_w: Array2::from_shape_fn((2 * d_inner, d_model), |_| uni(rng, bm)),
            in_proj_b: Array1::zeros(2 * d_inner),
            conv_w: Array2::from_shape_fn((d_inner, k_conv), |_| uni(rng, bk)),
            conv_b: Array1::zeros(d_inner),
            ssm: SelectiveSsm::init(d_inner, n_state, rng),
            out_proj_w: Array2::from_shape_fn((d_model, d_inner), |_| uni(rng, bi)),
            out_proj_b: Array1::zeros(d_model),
        }
    }

    pub fn zeros(d_model: usize, d_inner: usize, n_state: usize, k_conv: usize) -> Self {
        MambaBlockParams {
            norm_gain: Array1::zeros(d_model),
            norm_bias: Array1::zeros(d_model),
            in_proj_w: Array2::zeros((2 * d_inner, d_model)),
            in_proj_b: Array1::zeros(2 * d_inner),
            conv_w: Array2::zeros((d_inner, k_conv)),
            conv_b: Array1::zeros(d_inner),
            ssm: SelectiveSsm::zeros(d_inner, n_state),
            out_proj_w: Array2::zeros((d_model, d_inner)),
            out_proj_b: Array1::zeros(d_model),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.d_model(), self.d_inner(), self.ssm.n_state(), self.k_conv())
    }

    pub fn param_count(&self) -> usize {
        self.norm_gain.len()
            + self.norm_bias.len()
            + self.in_proj_w.len()
            + self.in_proj_b.len()
            + self.conv_w.len()
            + self.conv_b.len()
            + self.ssm.param_count()
            + self.out_proj_w.len()
            + self.out_proj_b.len()
    }

    pub fn flatten_into(&self, out: &mut Vec<F>) {
        out.extend(self.norm_gain.iter().cloned());
        out.extend(self.norm_bias.iter().cloned());
        out.extend(self.in_proj_w.iter().cloned());
        out.extend(self.in_proj_b.iter().cloned());
        out.extend(self.conv_w.iter().cloned());
        out.extend(self.conv_b.iter().cloned());
        self.ssm.flatten_into(out);
        out.extend(self.out_proj_w.iter().cloned());
        out.extend(self.out_proj_b.iter().cloned());
    }

    pub fn unflatten_from<I: Iterator<Item = F>>(&mut self, it: &mut I) {
        let take = |v: &mut F, it: &mut I| *v = it.next().expect("parameter payload too short");
        for v in self.norm_gain.iter_mut() {
            take(v, it);
        }
        for v in self.norm_bias.iter_mut() {
            take(v, it);
        }
        for v in self.in_proj_w.iter_mut() {
            take(v, it);
        }
        for v in self.in_proj_b.iter_mut() {
            take(v, it);
        }
        for v in self.conv_w.iter_mut() {
            take(v, it);
        }
        for v in self.conv_b.iter_mut() {
            take(v, it);
        }
        self.ssm.unflatten_from(it);
        for v in self.out_proj_w.iter_mut() {
            take(v, it);
        }
        for v in self.out_proj_b.iter_mut() {
            take(v, it);
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.norm_gain += &other.norm_gain;
        self.norm_bias += &other.norm_bias;
        self.in_proj_w += &other.in_proj_w;
        self.in_proj_b += &other.in_proj_b;
        self.conv_w += &other.conv_w;
        self.conv_b += &other.conv_b;
        self.ssm.add_assign(&other.ssm);
        self.out_proj_w += &other.out_proj_w;
        self.out_proj_b += &other.out_proj_b;
    }
}

// ---------------------------------------------------------------------------
// layer normalization (per frame, over features)

#[derive(Debug, Clone)]
pub struct NormCache<F: Real> {
    pub x_hat: Array2<F>,
    pub inv_std: Array1<F>,
}

pub fn layernorm_forward<F: Real>(
    x: &Array2<F>,
    gain: &Array1<F>,
    bias: &Array1<F>,
) -> (Array2<F>, NormCache<F>) {
    let (t_len, d) = x.dim();
    let eps = F::of_f64(NORM_EPS);
    let mut x_hat = Array2::zeros((t_len, d));
    let mut inv_std = Array1::zeros(t_len);
    let mut y = Array2::zeros((t_len, d));
    let dn = F::of_f64(d as f64);
    for t in 0..t_len {
        let row = x.row(t);
        let mean = row.sum() / dn;
        let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<F>() / dn;
        let is = F::one() / (var + eps).sqrt();
        inv_std[t] = is;
        for di in 0..d {
            let xh = (x[[t, di]] - mean) * is;
            x_hat[[t, di]] = xh;
            y[[t, di]] = gain[di] * xh + bias[di];
        }
    }
    (y, NormCache { x_hat, inv_std })
}

pub fn layernorm_backward<F: Real>(
    cache: &NormCache<F>,
    gain: &Array1<F>,
    grad_y: &Array2<F>,
) -> (Array2<F>, Array1<F>, Array1<F>) {
    let (t_len, d) = cache.x_hat.dim();
    let dn = F::of_f64(d as f64);
    let mut gx = Array2::zeros((t_len, d));
    let mut g_gain = Array1::zeros(d);
    let mut g_bias = Array1::zeros(d);
    for t in 0..t_len {
        let mut mean_gxh = F::zero();
        let mut mean_gxh_xh = F::zero();
        for di in 0..d {
            let gy = grad_y[[t, di]];
            let gxh = gy * gain[di];
            g_gain[di] += gy * cache.x_hat[[t, di]];
            g_bias[di] += gy;
            mean_gxh += gxh;
            mean_gxh_xh += gxh * cache.x_hat[[t, di]];
        }
        mean_gxh /= dn;
        mean_gxh_xh /= dn;
        for di in 0..d {
            let gxh = grad_y[[t, di]] * gain[di];
            gx[[t, di]] =
                cache.inv_std[t] * (gxh - mean_gxh - cache.x_hat[[t, di]] * mean_gxh_xh);
        }
    }
    (gx, g_gain, g_bias)
}

// ---------------------------------------------------------------------------
// depthwise causal 1-D convolution

/// `y[t,d] = b[d] + sum_k w[d,k] * u[t - (K-1) + k, d]`, frames before t=0
/// treated as zero. Column K-1 of the kernel is the current tap.
pub fn causal_conv1d<F: Real>(
    u: &Array2<F>,
    kernel: &Array2<F>,
    bias: &Array1<F>,
) -> Result<Array2<F>> {
    let (t_len, d) = u.dim();
    if kernel.nrows() != d || bias.len() != d {
        return Err(Error::ShapeMismatch("conv kernel width".into()));
    }
    let k = kernel.ncols();
    let mut y = Array2::zeros((t_len, d));
    for t in 0..t_len {
        for di in 0..d {
            let mut acc = bias[di];
            for ki in 0..k {
                let src = t as isize - (k as isize - 1) + ki as isize;
                if src >= 0 {
                    acc = acc + kernel[[di, ki]] * u[[src as usize, di]];
                }
            }
            y[[t, di]] = acc;
        }
    }
    Ok(y)
}

pub fn causal_conv1d_backward<F: Real>(
    u: &Array2<F>,
    kernel: &Array2<F>,
    grad_y: &Array2<F>,
) -> (Array2<F>, Array2<F>, Array1<F>) {
    let (t_len, d) = u.dim();
    let k = kernel.ncols();
    let mut gu = Array2::zeros((t_len, d));
    let mut gw = Array2::zeros((d, k));
    let mut gb = Array1::zeros(d);
    for t in 0..t_len {
        for di in 0..d {
            let gy = grad_y[[t, di]];
            gb[di] += gy;
            for ki in 0..k {
                let src = t as isize - (k as isize - 1) + ki as isize;
                if src >= 0 {
                    gw[[di, ki]] += gy * u[[src as usize, di]];
                    gu[[src as usize, di]] += gy * kernel[[di, ki]];
                }
            }
        }
    }
    (gu, gw, gb)
}

// ---------------------------------------------------------------------------
// conv -> silu -> ssm branch, shared by the unidirectional block and the
// inner bidirectional wiring

#[derive(Debug, Clone)]
pub struct BranchCache<F: Real> {
    pub u: Array2<F>,
    pub cu: Array2<F>,
    pub ssm: SsmCache<F>,
}

pub fn branch_forward<F: Real>(
    u: &Array2<F>,
    conv_w: &Array2<F>,
    conv_b: &Array1<F>,
    ssm: &SelectiveSsm<F>,
    training: bool,
) -> Result<(Array2<F>, Option<BranchCache<F>>)> {
    let cu = causal_conv1d(u, conv_w, conv_b)?;
    let v = cu.mapv(silu);
    let (ys, ssm_cache) = ssm.forward(&v, training)?;
    let cache = ssm_cache.map(|sc| BranchCache {
        u: u.clone(),
        cu,
        ssm: sc,
    });
    Ok((ys, cache))
}

/// Returns (grad_u, conv kernel grad, conv bias grad, ssm grads).
pub fn branch_backward<F: Real>(
    cache: &BranchCache<F>,
    conv_w: &Array2<F>,
    ssm: &SelectiveSsm<F>,
    grad_ys: &Array2<F>,
) -> Result<(Array2<F>, Array2<F>, Array1<F>, SelectiveSsm<F>)> {
    let (gv, ssm_grads) = ssm.backward(&cache.ssm, grad_ys)?;
    let gcu = &gv * &cache.cu.mapv(silu_deriv);
    let (gu, gw, gb) = causal_conv1d_backward(&cache.u, conv_w, &gcu);
    Ok((gu, gw, gb, ssm_grads))
}

// ---------------------------------------------------------------------------
// block forward / backward

#[derive(Debug, Clone)]
pub struct BlockCache<F: Real> {
    pub norm: NormCache<F>,
    pub ln: Array2<F>,
    pub g: Array2<F>,
    pub branch: BranchCache<F>,
    pub ys: Array2<F>,
    pub z: Array2<F>,
}

/// Residual-free block core:
/// `core(x) = out_proj( SSM(silu(conv(u))) ⊙ silu(g) )` with
/// `(u, g) = split(in_proj(norm(x)))`.
pub fn mamba_core_forward<F: Real>(
    x: &Array2<F>,
    p: &MambaBlockParams<F>,
    training: bool,
) -> Result<(Array2<F>, Option<BlockCache<F>>)> {
    if x.ncols() != p.d_model() {
        return Err(Error::ShapeMismatch(format!(
            "block input width {} vs d_model {}",
            x.ncols(),
            p.d_model()
        )));
    }
    let di = p.d_inner();
    let (ln, norm_cache) = layernorm_forward(x, &p.norm_gain, &p.norm_bias);
    let proj = ln.dot(&p.in_proj_w.t()) + &p.in_proj_b;
    let u = proj.slice(ndarray::s![.., 0..di]).to_owned();
    let g = proj.slice(ndarray::s![.., di..2 * di]).to_owned();
    let (ys, branch_cache) = branch_forward(&u, &p.conv_w, &p.conv_b, &p.ssm, training)?;
    let gs = g.mapv(silu);
    let z = &ys * &gs;
    let y = z.dot(&p.out_proj_w.t()) + &p.out_proj_b;
    let cache = branch_cache.map(|bc| BlockCache {
        norm: norm_cache,
        ln,
        g,
        branch: bc,
        ys,
        z,
    });
    Ok((y, cache))
}

/// Returns (grad_x, parameter grads) for the residual-free core.
pub fn mamba_core_backward<F: Real>(
    cache: &BlockCache<F>,
    p: &MambaBlockParams<F>,
    grad_y: &Array2<F>,
) -> Result<(Array2<F>, MambaBlockParams<F>)> {
    let di = p.d_inner();
    let mut grads = p.zeros_like();
    grads.out_proj_w = grad_y.t().dot(&cache.z);
    grads.out_proj_b = grad_y.sum_axis(Axis(0));
    let gz = grad_y.dot(&p.out_proj_w);
    let gs = cache.g.mapv(silu);
    let gys = &gz * &gs;
    let gg = &(&gz * &cache.ys) * &cache.g.mapv(silu_deriv);
    let (gu, gcw, gcb, ssm_grads) = branch_backward(&cache.branch, &p.conv_w, &p.ssm, &gys)?;
    grads.conv_w = gcw;
    grads.conv_b = gcb;
    grads.ssm = ssm_grads;
    let t_len = gu.nrows();
    let mut gp = Array2::zeros((t_len, 2 * di));
    gp.slice_mut(ndarray::s![.., 0..di]).assign(&gu);
    gp.slice_mut(ndarray::s![.., di..2 * di]).assign(&gg);
    grads.in_proj_w = gp.t().dot(&cache.ln);
    grads.in_proj_b = gp.sum_axis(Axis(0));
    let gln = gp.dot(&p.in_proj_w);
    let (gx, g_gain, g_bias) = layernorm_backward(&cache.norm, &p.norm_gain, &gln);
    grads.norm_gain = g_gain;
    grads.norm_bias = g_bias;
    Ok((gx, grads))
}

/// Full block: `y = x + core(x)`.
pub fn mamba_block_forward<F: Real>(
    x: &Array2<F>,
    p: &MambaBlockParams<F>,
    training: bool,
) -> Result<(Array2<F>, Option<BlockCache<F>>)> {
    let (core, cache) = mamba_core_forward(x, p, training)?;
    Ok((core + x, cache))
}

/// Returns (grad_x, parameter grads) for the residual block.
pub fn mamba_block_backward<F: Real>(
    cache: &BlockCache<F>,
    p: &MambaBlockParams<F>,
    grad_y: &Array2<F>,
) -> Result<(Array2<F>, MambaBlockParams<F>)> {
    let (gx_core, grads) = mamba_core_backward(cache, p, grad_y)?;
    Ok((gx_core + grad_y, grads))
}
