//! Bidirectional wirings over Mamba blocks.
//!
//! Three arrangements are provided in addition to the plain unidirectional
//! stack: `Inn` (two inner branches sharing one projection pair), `Ext`
//! (two complete block cores fused by addition under one residual), and
//! `Dua` (two independent full columns whose outputs are concatenated along
//! the feature axis, forward features first).

use crate::block::{
    branch_backward, branch_forward, layernorm_backward, layernorm_forward, mamba_block_backward,
    mamba_block_forward, mamba_core_backward, mamba_core_forward, BlockCache, BranchCache,
    MambaBlockParams, NormCache,
};
use crate::error::{Error, Result};
use crate::num::{silu, silu_deriv, Real};
use crate::ssm::SelectiveSsm;
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Unidirectional,
    Inn,
    Ext,
    Dua,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "unidirectional" | "uni" => Ok(Variant::Unidirectional),
            "inn" => Ok(Variant::Inn),
            "ext" => Ok(Variant::Ext),
            "dua" => Ok(Variant::Dua),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Unidirectional => "unidirectional",
            Variant::Inn => "inn",
            Variant::Ext => "ext",
            Variant::Dua => "dua",
        }
    }
}

/// Frame-order reversal; involutive and bit-exact.
pub fn reverse_time<F: Real>(x: &Array2<F>) -> Array2<F> {
    let mut y = x.clone();
    y.invert_axis(Axis(0));
    y
}

// ---------------------------------------------------------------------------
// Inn: shared projections, two inner (conv + SSM) branches

#[derive(Debug, Clone, PartialEq)]
pub struct InnBlockParams<F: Real> {
    pub norm_gain: Array1<F>,
    pub norm_bias: Array1<F>,
    pub in_proj_w: Array2<F>,
    pub in_proj_b: Array1<F>,
    pub fwd_conv_w: Array2<F>,
    pub fwd_conv_b: Array1<F>,
    pub fwd_ssm: SelectiveSsm<F>,
    pub bwd_conv_w: Array2<F>,
    pub bwd_conv_b: Array1<F>,
    pub bwd_ssm: SelectiveSsm<F>,
    pub out_proj_w: Array2<F>,
    pub out_proj_b: Array1<F>,
}

#[derive(Debug, Clone)]
pub struct InnBlockCache<F: Real> {
    norm: NormCache<F>,
    ln: Array2<F>,
    g: Array2<F>,
    fwd: BranchCache<F>,
    bwd: BranchCache<F>,
    sum: Array2<F>,
    z: Array2<F>,
}

impl<F: Real> InnBlockParams<F> {
    pub fn d_model(&self) -> usize {
        self.in_proj_w.ncols()
    }

    pub fn d_inner(&self) -> usize {
        self.fwd_conv_w.nrows()
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
        InnBlockParams {
            norm_gain: Array1::from_elem(d_model, F::one()),
            norm_bias: Array1::zeros(d_model),
            in_proj_w: Array2::from_shape_fn((2 * d_inner, d_model), |_| uni(rng, bm)),
            in_proj_b: Array1::zeros(2 * d_inner),
            fwd_conv_w: Array2::from_shape_fn((d_inner, k_conv), |_| uni(rng, bk)),
            fwd_conv_b: Array1::zeros(d_inner),
            fwd_ssm: SelectiveSsm::init(d_inner, n_state, rng),
            bwd_conv_w: Array2::from_shape_fn((d_inner, k_conv), |_| uni(rng, bk)),
            bwd_conv_b: Array1::zeros(d_inner),
            bwd_ssm: SelectiveSsm::init(d_inner, n_state, rng),
            out_proj_w: Array2::from_shape_fn((d_model, d_inner), |_| uni(rng, bi)),
            out_proj_b: Array1::zeros(d_model),
        }
    }

    pub fn zeros(d_model: usize, d_inner: usize, n_state: usize, k_conv: usize) -> Self {
        InnBlockParams {
            norm_gain: Array1::zeros(d_model),
            norm_bias: Array1::zeros(d_model),
            in_proj_w: Array2::zeros((2 * d_inner, d_model)),
            in_proj_b: Array1::zeros(2 * d_inner),
            fwd_conv_w: Array2::zeros((d_inner, k_conv)),
            fwd_conv_b: Array1::zeros(d_inner),
            fwd_ssm: SelectiveSsm::zeros(d_inner, n_state),
            bwd_conv_w: Array2::zeros((d_inner, k_conv)),
            bwd_conv_b: Array1::zeros(d_inner),
            bwd_ssm: SelectiveSsm::zeros(d_inner, n_state),
            out_proj_w: Array2::zeros((d_model, d_inner)),
            out_proj_b: Array1::zeros(d_model),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(
            self.d_model(),
            self.d_inner(),
            self.fwd_ssm.n_state(),
            self.fwd_conv_w.ncols(),
        )
    }

    /// Exchange the forward and backward branch parameters.
    pub fn swapped(&self) -> Self {
        let mut p = self.clone();
        std::mem::swap(&mut p.fwd_conv_w, &mut p.bwd_conv_w);
        std::mem::swap(&mut p.fwd_conv_b, &mut p.bwd_conv_b);
        std::mem::swap(&mut p.fwd_ssm, &mut p.bwd_ssm);
        p
    }

    pub fn param_count(&self) -> usize {
        self.norm_gain.len()
            + self.norm_bias.len()
            + self.in_proj_w.len()
            + self.in_proj_b.len()
            + self.fwd_conv_w.len()
            + self.fwd_conv_b.len()
            + self.fwd_ssm.param_count()
            + self.bwd_conv_w.len()
            + self.bwd_conv_b.len()
            + self.bwd_ssm.param_count()
            + self.out_proj_w.len()
            + self.out_proj_b.len()
    }

    pub fn flatten_into(&self, out: &mut Vec<F>) {
        out.extend(self.norm_gain.iter().cloned());
        out.extend(self.norm_bias.iter().cloned());
        out.extend(self.in_proj_w.iter().cloned());
        out.extend(self.in_proj_b.iter().cloned());
        out.extend(self.fwd_conv_w.iter().cloned());
        out.extend(self.fwd_conv_b.iter().cloned());
        self.fwd_ssm.flatten_into(out);
        out.extend(self.bwd_conv_w.iter().cloned());
        out.extend(self.bwd_conv_b.iter().cloned());
        self.bwd_ssm.flatten_into(out);
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
        for v in self.fwd_conv_w.iter_mut() {
            take(v, it);
        }
        for v in self.fwd_conv_b.iter_mut() {
            take(v, it);
        }
        self.fwd_ssm.unflatten_from(it);
        for v in self.bwd_conv_w.iter_mut() {
            take(v, it);
        }
        for v in self.bwd_conv_b.iter_mut() {
            take(v, it);
        }
        self.bwd_ssm.unflatten_from(it);
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
        self.fwd_conv_w += &other.fwd_conv_w;
        self.fwd_conv_b += &other.fwd_conv_b;
        self.fwd_ssm.add_assign(&other.fwd_ssm);
        self.bwd_conv_w += &other.bwd_conv_w;
        self.bwd_conv_b += &other.bwd_conv_b;
        self.bwd_ssm.add_assign(&other.bwd_ssm);
        self.out_proj_w += &other.out_proj_w;
        self.out_proj_b += &other.out_proj_b;
    }
}

/// Inn wiring: one shared projection pair, a forward branch on `u` and a
/// backward branch on time-reversed `u` whose output is re-reversed; the
/// branch outputs are added, gated, projected out, with a residual.
pub fn inn_bimamba_forward<F: Real>(
    x: &Array2<F>,
    p: &InnBlockParams<F>,
    training: bool,
) -> Result<(Array2<F>, Option<InnBlockCache<F>>)> {
    if x.ncols() != p.d_model() {
        return Err(Error::ShapeMismatch(format!(
            "inn input width {} vs d_model {}",
            x.ncols(),
            p.d_model()
        )));
    }
    let di = p.d_inner();
    let (ln, norm_cache) = layernorm_forward(x, &p.norm_gain, &p.norm_bias);
    let proj = ln.dot(&p.in_proj_w.t()) + &p.in_proj_b;
    let u = proj.slice(ndarray::s![.., 0..di]).to_owned();
    let g = proj.slice(ndarray::s![.., di..2 * di]).to_owned();
    let (f_out, f_cache) = branch_forward(&u, &p.fwd_conv_w, &p.fwd_conv_b, &p.fwd_ssm, training)?;
    let u_rev = reverse_time(&u);
    let (b_raw, b_cache) =
        branch_forward(&u_rev, &p.bwd_conv_w, &p.bwd_conv_b, &p.bwd_ssm, training)?;
    let b_out = reverse_time(&b_raw);
    let sum = &f_out + &b_out;
    let gs = g.mapv(silu);
    let z = &sum * &gs;
    let y = z.dot(&p.out_proj_w.t()) + &p.out_proj_b + x;
    let cache = match (f_cache, b_cache) {
        (Some(f), Some(b)) => Some(InnBlockCache {
            norm: norm_cache,
            ln,
            g,
            fwd: f,
            bwd: b,
            sum,
            z,
        }),
        _ => None,
    };
    Ok((y, cache))
}

pub fn inn_bimamba_backward<F: Real>(
    cache: &InnBlockCache<F>,
    p: &InnBlockParams<F>,
    grad_y: &Array2<F>,
) -> Result<(Array2<F>, InnBlockParams<F>)> {
    let di = p.d_inner();
    let mut grads = p.zeros_like();
    grads.out_proj_w = grad_y.t().dot(&cache.z);
    grads.out_proj_b = grad_y.sum_axis(Axis(0));
    let gz = grad_y.dot(&p.out_proj_w);
    let gs = cache.g.mapv(silu);
    let gsum = &gz * &gs;
    let gg = &(&gz * &cache.sum) * &cache.g.mapv(silu_deriv);
    let (gu_f, gcw_f, gcb_f, gssm_f) =
        branch_backward(&cache.fwd, &p.fwd_conv_w, &p.fwd_ssm, &gsum)?;
    grads.fwd_conv_w = gcw_f;
    grads.fwd_conv_b = gcb_f;
    grads.fwd_ssm = gssm_f;
    // backward branch saw reversed input and its output was re-reversed
    let gsum_rev = reverse_time(&gsum);
    let (gu_rev, gcw_b, gcb_b, gssm_b) =
        branch_backward(&cache.bwd, &p.bwd_conv_w, &p.bwd_ssm, &gsum_rev)?;
    grads.bwd_conv_w = gcw_b;
    grads.bwd_conv_b = gcb_b;
    grads.bwd_ssm = gssm_b;
    let gu = gu_f + reverse_time(&gu_rev);
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
    Ok((gx + grad_y, grads))
}

// ---------------------------------------------------------------------------
// Ext: two complete residual-free cores, fused by addition, one residual

#[derive(Debug, Clone, PartialEq)]
pub struct ExtBlockParams<F: Real> {
    pub fwd: MambaBlockParams<F>,
    pub bwd: MambaBlockParams<F>,
}

#[derive(Debug, Clone)]
pub struct ExtBlockCache<F: Real> {
    fwd: BlockCache<F>,
    bwd: BlockCache<F>,
}

impl<F: Real> ExtBlockParams<F> {
    pub fn init<R: Rng>(
        d_model: usize,
        d_inner: usize,
        n_state: usize,
        k_conv: usize,
        rng: &mut R,
    ) -> Self {
        ExtBlockParams {
            fwd: MambaBlockParams::init(d_model, d_inner, n_state, k_conv, rng),
            bwd: MambaBlockParams::init(d_model, d_inner, n_state, k_conv, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ExtBlockParams {
            fwd: self.fwd.zeros_like(),
            bwd: self.bwd.zeros_like(),
        }
    }

    pub fn swapped(&self) -> Self {
        ExtBlockParams {
            fwd: self.bwd.clone(),
            bwd: self.fwd.clone(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.fwd.param_count() + self.bwd.param_count()
    }

    pub fn flatten_into(&self, out: &mut Vec<F>) {
        self.fwd.flatten_into(out);
        self.bwd.flatten_into(out);
    }

    pub fn unflatten_from<I: Iterator<Item = F>>(&mut self, it: &mut I) {
        self.fwd.unflatten_from(it);
        self.bwd.unflatten_from(it);
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.fwd.add_assign(&other.fwd);
        self.bwd.add_assign(&other.bwd);
    }
}

/// Ext wiring: `y = x + fwd_core(x) + reverse(bwd_core(reverse(x)))`.
pub fn ext_bimamba_forward<F: Real>(
    x: &Array2<F>,
    p: &ExtBlockParams<F>,
    training: bool,
) -> Result<(Array2<F>, Option<ExtBlockCache<F>>)> {
    let (f_out, f_cache) = mamba_core_forward(x, &p.fwd, training)?;
    let x_rev = reverse_time(x);
    let (b_raw, b_cache) = mamba_core_forward(&x_rev, &p.bwd, training)?;
    let y = x + &f_out + &reverse_time(&b_raw);
    let cache = match (f_cache, b_cache) {
        (Some(f), Some(b)) => Some(ExtBlockCache { fwd: f, bwd: b }),
        _ => None,
    };
    Ok((y, cache))
}

pub fn ext_bimamba_backward<F: Real>(
    cache: &ExtBlockCache<F>,
    p: &ExtBlockParams<F>,
    grad_y: &Array2<F>,
) -> Result<(Array2<F>, ExtBlockParams<F>)> {
    let (gx_f, g_fwd) = mamba_core_backward(&cache.fwd, &p.fwd, grad_y)?;
    let gy_rev = reverse_time(grad_y);
    let (gx_b_rev, g_bwd) = mamba_core_backward(&cache.bwd, &p.bwd, &gy_rev)?;
    let gx = grad_y + &gx_f + &reverse_time(&gx_b_rev);
    Ok((gx, ExtBlockParams { fwd: g_fwd, bwd: g_bwd }))
}

// ---------------------------------------------------------------------------
// Dua: two independent full columns, outputs concatenated

#[derive(Debug, Clone, PartialEq)]
pub struct DuaColumns<F: Real> {
    pub fwd: Vec<MambaBlockParams<F>>,
    pub bwd: Vec<MambaBlockParams<F>>,
}

#[derive(Debug, Clone)]
pub struct DuaCache<F: Real> {
    fwd: Vec<BlockCache<F>>,
    bwd: Vec<BlockCache<F>>,
}

fn stack_blocks_forward<F: Real>(
    x: &Array2<F>,
    blocks: &[MambaBlockParams<F>],
    training: bool,
) -> Result<(Array2<F>, Vec<BlockCache<F>>)> {
    let mut cur = x.clone();
    let mut caches = Vec::new();
    for b in blocks {
        let (y, c) = mamba_block_forward(&cur, b, training)?;
        cur = y;
        if let Some(c) = c {
            caches.push(c);
        }
    }
    Ok((cur, caches))
}

fn stack_blocks_backward<F: Real>(
    caches: &[BlockCache<F>],
    blocks: &[MambaBlockParams<F>],
    grad_y: &Array2<F>,
) -> Result<(Array2<F>, Vec<MambaBlockParams<F>>)> {
    let mut grads: Vec<MambaBlockParams<F>> = Vec::with_capacity(blocks.len());
    let mut g = grad_y.clone();
    for (c, b) in caches.iter().zip(blocks.iter()).rev() {
        let (gx, gb) = mamba_block_backward(c, b, &g)?;
        g = gx;
        grads.push(gb);
    }
    grads.reverse();
    Ok((g, grads))
}

impl<F: Real> DuaColumns<F> {
    pub fn init<R: Rng>(
        n_blocks: usize,
        d_model: usize,
        d_inner: usize,
        n_state: usize,
        k_conv: usize,
        rng: &mut R,
    ) -> Self {
        DuaColumns {
            fwd: (0..n_blocks)
                .map(|_| MambaBlockParams::init(d_model, d_inner, n_state, k_conv, rng))
                .collect(),
            bwd: (0..n_blocks)
                .map(|_| MambaBlockParams::init(d_model, d_inner, n_state, k_conv, rng))
                .collect(),
        }
    }

    pub fn swapped(&self) -> Self {
        DuaColumns {
            fwd: self.bwd.clone(),
            bwd: self.fwd.clone(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.fwd.iter().map(|b| b.param_count()).sum::<usize>()
            + self.bwd.iter().map(|b| b.param_count()).sum::<usize>()
    }
}

/// Dua wiring: forward column on `x`, backward column on reversed `x`
/// (re-reversed), outputs concatenated with forward features first.
pub fn dua_bimamba_forward<F: Real>(
    x: &Array2<F>,
    cols: &DuaColumns<F>,
    training: bool,
) -> Result<(Array2<F>, Option<DuaCache<F>>)> {
    if cols.fwd.len() != cols.bwd.len() {
        return Err(Error::ShapeMismatch("column depth mismatch".into()));
    }
    if cols.fwd.is_empty() {
        return Err(Error::InvalidLength("empty column".into()));
    }
    let (f, f_caches) = stack_blocks_forward(x, &cols.fwd, training)?;
    let x_rev = reverse_time(x);
    let (b_raw, b_caches) = stack_blocks_forward(&x_rev, &cols.bwd, training)?;
    let b = reverse_time(&b_raw);
    let (t_len, dm) = f.dim();
    let mut y = Array2::zeros((t_len, 2 * dm));
    y.slice_mut(ndarray::s![.., 0..dm]).assign(&f);
    y.slice_mut(ndarray::s![.., dm..2 * dm]).assign(&b);
    let cache = if training {
        Some(DuaCache {
            fwd: f_caches,
            bwd: b_caches,
        })
    } else {
        None
    };
    Ok((y, cache))
}

pub fn dua_bimamba_backward<F: Real>(
    cache: &DuaCache<F>,
    cols: &DuaColumns<F>,
    grad_y: &Array2<F>,
) -> Result<(Array2<F>, DuaColumns<F>)> {
    let dm = cols.fwd[0].d_model();
    if grad_y.ncols() != 2 * dm {
        return Err(Error::ShapeMismatch("dua grad width".into()));
    }
    let gf = grad_y.slice(ndarray::s![.., 0..dm]).to_owned();
    let gb = grad_y.slice(ndarray::s![.., dm..2 * dm]).to_owned();
    let (gx_f, g_fwd) = stack_blocks_backward(&cache.fwd, &cols.fwd, &gf)?;
    let gb_rev = reverse_time(&gb);
    let (gx_b_rev, g_bwd) = stack_blocks_backward(&cache.bwd, &cols.bwd, &gb_rev)?;
    let gx = gx_f + reverse_time(&gx_b_rev);
    Ok((gx, DuaColumns { fwd: g_fwd, bwd: g_bwd }))
}

// ---------------------------------------------------------------------------
// trunk: variant-dispatched stack

#[derive(Debug, Clone, PartialEq)]
pub enum TrunkParams<F: Real> {
    Uni(Vec<MambaBlockParams<F>>),
    Inn(Vec<InnBlockParams<F>>),
    Ext(Vec<ExtBlockParams<F>>),
    Dua(DuaColumns<F>),
}

#[derive(Debug, Clone)]
pub enum TrunkCache<F: Real> {
    Uni(Vec<BlockCache<F>>),
    Inn(Vec<InnBlockCache<F>>),
    Ext(Vec<ExtBlockCache<F>>),
    Dua(DuaCache<F>),
}

impl<F: Real> TrunkParams<F> {
    pub fn init<R: Rng>(
        variant: Variant,
        n_blocks: usize,
        d_model: usize,
        d_inner: usize,
        n_state: usize,
        k_conv: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_blocks == 0 {
            return Err(Error::InvalidLength("empty stack".into()));
        }
        Ok(match variant {
            Variant::Unidirectional => TrunkParams::Uni(
                (0..n_blocks)
                    .map(|_| MambaBlockParams::init(d_model, d_inner, n_state, k_conv, rng))
                    .collect(),
            ),
            Variant::Inn => TrunkParams::Inn(
                (0..n_blocks)
                    .map(|_| InnBlockParams::init(d_model, d_inner, n_state, k_conv, rng))
                    .collect(),
            ),
            Variant::Ext => TrunkParams::Ext(
                (0..n_blocks)
                    .map(|_| ExtBlockParams::init(d_model, d_inner, n_state, k_conv, rng))
                    .collect(),
            ),
            Variant::Dua => {
                TrunkParams::Dua(DuaColumns::init(n_blocks, d_model, d_inner, n_state, k_conv, rng))
            }
        })
    }

    pub fn variant(&self) -> Variant {
        match self {
            TrunkParams::Uni(_) => Variant::Unidirectional,
            TrunkParams::Inn(_) => Variant::Inn,
            TrunkParams::Ext(_) => Variant::Ext,
            TrunkParams::Dua(_) => Variant::Dua,
        }
    }

    /// Output feature width: d_model for uni/inn/ext, 2*d_model for dua.
    pub fn out_width(&self) -> usize {
        match self {
            TrunkParams::Uni(b) => b[0].d_model(),
            TrunkParams::Inn(b) => b[0].d_model(),
            TrunkParams::Ext(b) => b[0].fwd.d_model(),
            TrunkParams::Dua(c) => 2 * c.fwd[0].d_model(),
        }
    }

    pub fn forward(&self, x: &Array2<F>, training: bool) -> Result<(Array2<F>, Option<TrunkCache<F>>)> {
        match self {
            TrunkParams::Uni(blocks) => {
                if blocks.is_empty() {
                    return Err(Error::InvalidLength("empty stack".into()));
                }
                let (y, caches) = stack_blocks_forward(x, blocks, training)?;
                Ok((y, training.then_some(TrunkCache::Uni(caches))))
            }
            TrunkParams::Inn(blocks) => {
                if blocks.is_empty() {
                    return Err(Error::InvalidLength("empty stack".into()));
                }
                let mut cur = x.clone();
                let mut caches = Vec::new();
                for b in blocks {
                    let (y, c) = inn_bimamba_forward(&cur, b, training)?;
                    cur = y;
                    if let Some(c) = c {
                        caches.push(c);
                    }
                }
                Ok((cur, training.then_some(TrunkCache::Inn(caches))))
            }
            TrunkParams::Ext(blocks) => {
                if blocks.is_empty() {
                    return Err(Error::InvalidLength("empty stack".into()));
                }
                let mut cur = x.clone();
                let mut caches = Vec::new();
                for b in blocks {
                    let (y, c) = ext_bimamba_forward(&cur, b, training)?;
                    cur = y;
                    if let Some(c) = c {
                        caches.push(c);
                    }
                }
                Ok((cur, training.then_some(TrunkCache::Ext(caches))))
            }
            TrunkParams::Dua(cols) => {
                let (y, cache) = dua_bimamba_forward(x, cols, training)?;
                Ok((y, cache.map(TrunkCache::Dua)))
            }
        }
    }

    pub fn backward(&self, cache: &TrunkCache<F>, grad_y: &Array2<F>) -> Result<(Array2<F>, TrunkParams<F>)> {
        match (self, cache) {
            (TrunkParams::Uni(blocks), TrunkCache::Uni(caches)) => {
                let (gx, grads) = stack_blocks_backward(caches, blocks, grad_y)?;
                Ok((gx, TrunkParams::Uni(grads)))
            }
            (TrunkParams::Inn(blocks), TrunkCache::Inn(caches)) => {
                let mut grads: Vec<InnBlockParams<F>> = Vec::with_capacity(blocks.len());
                let mut g = grad_y.clone();
                for (c, b) in caches.iter().zip(blocks.iter()).rev() {
                    let (gx, gb) = inn_bimamba_backward(c, b, &g)?;
                    g = gx;
                    grads.push(gb);
                }
                grads.reverse();
                Ok((g, TrunkParams::Inn(grads)))
            }
            (TrunkParams::Ext(blocks), TrunkCache::Ext(caches)) => {
                let mut grads: Vec<ExtBlockParams<F>> = Vec::with_capacity(blocks.len());
                let mut g = grad_y.clone();
                for (c, b) in caches.iter().zip(blocks.iter()).rev() {
                    let (gx, gb) = ext_bimamba_backward(c, b, &g)?;
                    g = gx;
                    grads.push(gb);
                }
                grads.reverse();
                Ok((g, TrunkParams::Ext(grads)))
            }
            (TrunkParams::Dua(cols), TrunkCache::Dua(c)) => {
                let (gx, grads) = dua_bimamba_backward(c, cols, grad_y)?;
                Ok((gx, TrunkParams::Dua(grads)))
            }
            _ => Err(Error::ShapeMismatch("trunk cache/variant mismatch".into())),
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            TrunkParams::Uni(b) => TrunkParams::Uni(b.iter().map(|p| p.zeros_like()).collect()),
            TrunkParams::Inn(b) => TrunkParams::Inn(b.iter().map(|p| p.zeros_like()).collect()),
            TrunkParams::Ext(b) => TrunkParams::Ext(b.iter().map(|p| p.zeros_like()).collect()),
            TrunkParams::Dua(c) => TrunkParams::Dua(DuaColumns {
                fwd: c.fwd.iter().map(|p| p.zeros_like()).collect(),
                bwd: c.bwd.iter().map(|p| p.zeros_like()).collect(),
            }),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            TrunkParams::Uni(b) => b.iter().map(|p| p.param_count()).sum(),
            TrunkParams::Inn(b) => b.iter().map(|p| p.param_count()).sum(),
            TrunkParams::Ext(b) => b.iter().map(|p| p.param_count()).sum(),
            TrunkParams::Dua(c) => c.param_count(),
        }
    }

    pub fn flatten_into(&self, out: &mut Vec<F>) {
        match self {
            TrunkParams::Uni(b) => b.iter().for_each(|p| p.flatten_into(out)),
            TrunkParams::Inn(b) => b.iter().for_each(|p| p.flatten_into(out)),
            TrunkParams::Ext(b) => b.iter().for_each(|p| p.flatten_into(out)),
            TrunkParams::Dua(c) => {
                c.fwd.iter().for_each(|p| p.flatten_into(out));
                c.bwd.iter().for_each(|p| p.flatten_into(out));
            }
        }
    }

    pub fn unflatten_from<I: Iterator<Item = F>>(&mut self, it: &mut I) {
        match self {
            TrunkParams::Uni(b) => b.iter_mut().for_each(|p| p.unflatten_from(it)),
            TrunkParams::Inn(b) => b.iter_mut().for_each(|p| p.unflatten_from(it)),
            TrunkParams::Ext(b) => b.iter_mut().for_each(|p| p.unflatten_from(it)),
            TrunkParams::Dua(c) => {
                c.fwd.iter_mut().for_each(|p| p.unflatten_from(it));
                c.bwd.iter_mut().for_each(|p| p.unflatten_from(it));
            }
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        match (self, other) {
            (TrunkParams::Uni(a), TrunkParams::Uni(b)) => {
                a.iter_mut().zip(b).for_each(|(x, y)| x.add_assign(y))
            }
            (TrunkParams::Inn(a), TrunkParams::Inn(b)) => {
                a.iter_mut().zip(b).for_each(|(x, y)| x.add_assign(y))
            }
            (TrunkParams::Ext(a), TrunkParams::Ext(b)) => {
                a.iter_mut().zip(b).for_each(|(x, y)| x.add_assign(y))
            }
            (TrunkParams::Dua(a), TrunkParams::Dua(b)) => {
                a.fwd.iter_mut().zip(&b.fwd).for_each(|(x, y)| x.add_assign(y));
                a.bwd.iter_mut().zip(&b.bwd).for_each(|(x, y)| x.add_assign(y));
            }
            _ => panic!("trunk variant mismatch in add_assign"),
        }
    }
}
