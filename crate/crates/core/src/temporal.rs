//! Shared temporal layers.
//!
//! Per user and day, a peak branch (top-K pool then 1-D convolution) and a
//! mean branch (1-D convolution then three reshaped max pools mixed by learned
//! weights) are concatenated and fed to a GRU that runs over days. The final
//! hidden state of each user forms one row of the output.

use alloc::vec;
use alloc::vec::Vec;

use crate::activation::{relu, sigmoid};
use crate::error::{Error, Result};
use crate::params::{xavier_init, Gradients, ParamSet};
use crate::request::RequestTensor;
use crate::rng::Seed;
use crate::tensor::{self, Tensor};

pub const PREFIX: &str = "temporal.";

/// Where the per-(user, day) totals used by the top-K pool come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeakScope {
    /// Totals over the mini-batch at hand.
    Batch,
    /// Totals over the whole dataset, fixed before training or prediction.
    Corpus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TemporalConfig {
    /// `T`
    pub intervals: usize,
    /// `K`
    pub peaks: usize,
    /// `D`
    pub days: usize,
    pub conv_width: usize,
    /// `(R_row, R_column)`
    pub row_shape: (usize, usize),
    /// `(C_row, C_column)`
    pub column_shape: (usize, usize),
    /// `(B_row1, B_column1)`: tile grid of the block matrix.
    pub block_grid: (usize, usize),
    /// `(B_row2, B_column2)`: shape of each tile.
    pub block_tile: (usize, usize),
    /// GRU hidden size `H`.
    pub hidden: usize,
}

impl TemporalConfig {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        intervals: usize,
        peaks: usize,
        days: usize,
        conv_width: usize,
        row_shape: (usize, usize),
        column_shape: (usize, usize),
        block_grid: (usize, usize),
        block_tile: (usize, usize),
        hidden: usize,
    ) -> Result<Self> {
        let cfg = TemporalConfig {
            intervals,
            peaks,
            days,
            conv_width,
            row_shape,
            column_shape,
            block_grid,
            block_tile,
            hidden,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// T=24 hourly intervals, K=6, D=7, H=16.
    pub fn desk() -> Self {
        TemporalConfig::new(24, 6, 7, 3, (6, 4), (4, 6), (3, 2), (2, 2), 16).expect("desk config is valid")
    }

    /// Five-minute intervals: T=288, K=24.
    pub fn full_scale(days: usize, hidden: usize) -> Result<Self> {
        TemporalConfig::new(288, 24, days, 3, (24, 12), (12, 24), (6, 4), (4, 3), hidden)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.intervals;
        let k = self.peaks;
        if t == 0 || k == 0 || self.days == 0 || self.hidden == 0 {
            return Err(Error::config("temporal dimensions must be positive"));
        }
        if k > t {
            return Err(Error::config("K must not exceed T"));
        }
        if self.conv_width % 2 == 0 {
            return Err(Error::config("convolution width must be odd"));
        }
        let (rr, rc) = self.row_shape;
        let (cr, cc) = self.column_shape;
        let (br1, bc1) = self.block_grid;
        let (br2, bc2) = self.block_tile;
        if rr * rc != t || cr * cc != t || br1 * br2 * bc1 * bc2 != t {
            return Err(Error::config("reshape dimensions must multiply to T"));
        }
        if rr != k || cc != k || br1 * bc1 != k {
            return Err(Error::config("pooled lengths R_row, C_column, B_row1*B_column1 must equal K"));
        }
        Ok(())
    }

    pub fn gru_input(&self) -> usize {
        2 * self.peaks
    }

    fn block_width(&self) -> usize {
        self.block_grid.1 * self.block_tile.1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub w_z: Vec<f64>,
    pub u_z: Vec<f64>,
    pub b_z: Vec<f64>,
    pub w_r: Vec<f64>,
    pub u_r: Vec<f64>,
    pub b_r: Vec<f64>,
    pub w_h: Vec<f64>,
    pub u_h: Vec<f64>,
    pub b_h: Vec<f64>,
}

impl GruParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let w = vec![0.0; hidden * input];
        let u = vec![0.0; hidden * hidden];
        let b = vec![0.0; hidden];
        GruParams {
            w_z: w.clone(),
            u_z: u.clone(),
            b_z: b.clone(),
            w_r: w.clone(),
            u_r: u.clone(),
            b_r: b.clone(),
            w_h: w,
            u_h: u,
            b_h: b,
        }
    }
}

/// All learnable weights of the temporal layers.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalParams {
    pub w_peak: Vec<f64>,
    pub b_peak: f64,
    pub w_mean: Vec<f64>,
    pub b_mean: f64,
    pub w_row: f64,
    pub w_column: f64,
    pub w_block: f64,
    pub gru: GruParams,
}

const NAMES: [&str; 16] = [
    "W_peak", "b_peak", "W_mean", "b_mean", "w_row", "w_column", "w_block", "gru.W_z", "gru.U_z", "gru.b_z", "gru.W_r",
    "gru.U_r", "gru.b_r", "gru.W_h", "gru.U_h", "gru.b_h",
];

impl TemporalParams {
    pub fn zeros(cfg: &TemporalConfig) -> Self {
        TemporalParams {
            w_peak: vec![0.0; cfg.conv_width],
            b_peak: 0.0,
            w_mean: vec![0.0; cfg.conv_width],
            b_mean: 0.0,
            w_row: 0.0,
            w_column: 0.0,
            w_block: 0.0,
            gru: GruParams::zeros(cfg.gru_input(), cfg.hidden),
        }
    }

    /// Xavier-initialized weights, zero biases.
    pub fn init(cfg: &TemporalConfig, seed: Seed) -> Result<Self> {
        let w = cfg.conv_width;
        let (i, h) = (cfg.gru_input(), cfg.hidden);
        let x = |name: &str, shape: &[usize], fi: usize, fo: usize| -> Result<Vec<f64>> {
            Ok(xavier_init(shape, fi, fo, seed.derive(name))?.into_data())
        };
        let mix = x("mix", &[3], 3, 1)?;
        Ok(TemporalParams {
            w_peak: x("W_peak", &[w], w, w)?,
            b_peak: 0.0,
            w_mean: x("W_mean", &[w], w, w)?,
            b_mean: 0.0,
            w_row: mix[0],
            w_column: mix[1],
            w_block: mix[2],
            gru: GruParams {
                w_z: x("W_z", &[h, i], i, h)?,
                u_z: x("U_z", &[h, h], h, h)?,
                b_z: vec![0.0; h],
                w_r: x("W_r", &[h, i], i, h)?,
                u_r: x("U_r", &[h, h], h, h)?,
                b_r: vec![0.0; h],
                w_h: x("W_h", &[h, i], i, h)?,
                u_h: x("U_h", &[h, h], h, h)?,
                b_h: vec![0.0; h],
            },
        })
    }

    fn shapes(cfg: &TemporalConfig) -> [Vec<usize>; 16] {
        let (w, i, h) = (cfg.conv_width, cfg.gru_input(), cfg.hidden);
        [
            vec![w],
            vec![1],
            vec![w],
            vec![1],
            vec![1],
            vec![1],
            vec![1],
            vec![h, i],
            vec![h, h],
            vec![h],
            vec![h, i],
            vec![h, h],
            vec![h],
            vec![h, i],
            vec![h, h],
            vec![h],
        ]
    }

    fn parts(&self) -> [Vec<f64>; 16] {
        let g = &self.gru;
        [
            self.w_peak.clone(),
            vec![self.b_peak],
            self.w_mean.clone(),
            vec![self.b_mean],
            vec![self.w_row],
            vec![self.w_column],
            vec![self.w_block],
            g.w_z.clone(),
            g.u_z.clone(),
            g.b_z.clone(),
            g.w_r.clone(),
            g.u_r.clone(),
            g.b_r.clone(),
            g.w_h.clone(),
            g.u_h.clone(),
            g.b_h.clone(),
        ]
    }

    fn named(&self, cfg: &TemporalConfig) -> impl Iterator<Item = (alloc::string::String, Tensor)> {
        let shapes = Self::shapes(cfg);
        NAMES
            .into_iter()
            .zip(shapes)
            .zip(self.parts())
            .map(|((n, s), d)| (alloc::format!("{PREFIX}{n}"), Tensor::new(s, d).expect("consistent shapes")))
    }

    pub fn write_into(&self, cfg: &TemporalConfig, ps: &mut ParamSet) {
        for (n, t) in self.named(cfg) {
            ps.insert(n, t);
        }
    }

    pub fn to_param_set(&self, cfg: &TemporalConfig) -> ParamSet {
        let mut ps = ParamSet::new();
        self.write_into(cfg, &mut ps);
        ps
    }

    pub fn to_gradients(&self, cfg: &TemporalConfig) -> Gradients {
        self.named(cfg).collect()
    }

    pub fn from_param_set(ps: &ParamSet, cfg: &TemporalConfig) -> Result<Self> {
        let shapes = Self::shapes(cfg);
        let mut parts: Vec<Vec<f64>> = Vec::with_capacity(16);
        for (n, s) in NAMES.iter().zip(shapes.iter()) {
            let name = alloc::format!("{PREFIX}{n}");
            let t = ps.get(&name)?;
            if t.shape() != s.as_slice() {
                return Err(Error::shape(&name, s, t.shape()));
            }
            parts.push(t.data().to_vec());
        }
        let mut it = parts.into_iter();
        let mut next = || it.next().expect("16 parts");
        Ok(TemporalParams {
            w_peak: next(),
            b_peak: next()[0],
            w_mean: next(),
            b_mean: next()[0],
            w_row: next()[0],
            w_column: next()[0],
            w_block: next()[0],
            gru: GruParams {
                w_z: next(),
                u_z: next(),
                b_z: next(),
                w_r: next(),
                u_r: next(),
                b_r: next(),
                w_h: next(),
                u_h: next(),
                b_h: next(),
            },
        })
    }

    pub fn add_assign(&mut self, other: &TemporalParams) {
        tensor::add_assign(&mut self.w_peak, &other.w_peak);
        self.b_peak += other.b_peak;
        tensor::add_assign(&mut self.w_mean, &other.w_mean);
        self.b_mean += other.b_mean;
        self.w_row += other.w_row;
        self.w_column += other.w_column;
        self.w_block += other.w_block;
        let (a, b) = (&mut self.gru, &other.gru);
        for (x, y) in [
            (&mut a.w_z, &b.w_z),
            (&mut a.u_z, &b.u_z),
            (&mut a.b_z, &b.b_z),
            (&mut a.w_r, &b.w_r),
            (&mut a.u_r, &b.u_r),
            (&mut a.b_r, &b.b_r),
            (&mut a.w_h, &b.w_h),
            (&mut a.u_h, &b.u_h),
            (&mut a.b_h, &b.b_h),
        ] {
            tensor::add_assign(x, y);
        }
    }
}

/// Top-K interval indices for every (user, day), ascending within each entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeakIndexSet {
    users: usize,
    days: usize,
    peaks: usize,
    indices: Vec<usize>,
}

impl PeakIndexSet {
    /// Select peaks from per-(user, day) totals.
    pub fn from_totals(totals: &RequestTensor, peaks: usize) -> Result<Self> {
        let (users, days) = (totals.users(), totals.days());
        let mut indices = Vec::with_capacity(users * days * peaks);
        for u in 0..users {
            for d in 0..days {
                indices.extend(select_peaks(totals.series(u, d), peaks)?);
            }
        }
        Ok(PeakIndexSet {
            users,
            days,
            peaks,
            indices,
        })
    }

    /// Totals summed over the given tensors (a batch or a whole corpus).
    pub fn from_members<'a>(members: impl IntoIterator<Item = &'a RequestTensor>, peaks: usize) -> Result<Self> {
        let mut it = members.into_iter();
        let first = it.next().ok_or(Error::EmptyDataset)?;
        let mut totals = first.clone();
        for m in it {
            totals.add_assign(m)?;
        }
        Self::from_totals(&totals, peaks)
    }

    pub fn get(&self, user: usize, day: usize) -> &[usize] {
        let o = (user * self.days + day) * self.peaks;
        &self.indices[o..o + self.peaks]
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.users, self.days, self.peaks]
    }
}

/// The `k` indices with largest totals (ties to the smaller index), ascending.
pub fn select_peaks(totals: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > totals.len() {
        return Err(Error::config("K must not exceed T"));
    }
    let mut order: Vec<usize> = (0..totals.len()).collect();
    order.sort_by(|&a, &b| totals[b].total_cmp(&totals[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

/// Global top-K pool: chronological peak indices and the matching values of `x`.
pub fn top_k_pool(batch_total: &[f64], x: &[f64], k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    if batch_total.len() != x.len() {
        return Err(Error::shape("top-k pool", &[batch_total.len()], &[x.len()]));
    }
    let idx = select_peaks(batch_total, k)?;
    let xk = idx.iter().map(|&i| x[i]).collect();
    Ok((idx, xk))
}

/// Same-length zero-padded 1-D convolution plus bias (pre-activation).
fn conv_same(w: &[f64], b: f64, x: &[f64], out: &mut [f64]) {
    let half = (w.len() / 2) as isize;
    let n = x.len() as isize;
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = b;
        for (j, wj) in w.iter().enumerate() {
            let src = i as isize + j as isize - half;
            if (0..n).contains(&src) {
                acc += wj * x[src as usize];
            }
        }
        *o = acc;
    }
}

fn conv_same_backward(w: &[f64], x: &[f64], dpre: &[f64], dw: &mut [f64], db: &mut f64, dx: &mut [f64]) {
    let half = (w.len() / 2) as isize;
    let n = x.len() as isize;
    for (i, &g) in dpre.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        *db += g;
        for (j, wj) in w.iter().enumerate() {
            let src = i as isize + j as isize - half;
            if (0..n).contains(&src) {
                dw[j] += g * x[src as usize];
                dx[src as usize] += g * wj;
            }
        }
    }
}

fn conv_relu(w: &[f64], b: f64, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    conv_same(w, b, x, &mut out);
    out.iter_mut().for_each(|v| *v = relu(*v));
    out
}

/// `YP = ReLU(W_peak ⊗ XK + b_peak)`.
pub fn peak_conv(xk: &[f64], params: &TemporalParams) -> Vec<f64> {
    conv_relu(&params.w_peak, params.b_peak, xk)
}

/// `YMC = ReLU(W_mean ⊗ X + b_mean)`.
pub fn mean_conv(x: &[f64], params: &TemporalParams) -> Vec<f64> {
    conv_relu(&params.w_mean, params.b_mean, x)
}

/// Row, column and block max pools of `YMC` with their argmax positions.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolTrace {
    pub yr: Vec<f64>,
    pub yc: Vec<f64>,
    pub yb: Vec<f64>,
    pub arg_r: Vec<usize>,
    pub arg_c: Vec<usize>,
    pub arg_b: Vec<usize>,
}

/// Max over the listed positions; ties go to the first.
fn argmax_over(ymc: &[f64], positions: impl Iterator<Item = usize>) -> (f64, usize) {
    let mut best = (f64::NEG_INFINITY, usize::MAX);
    for p in positions {
        if ymc[p] > best.0 {
            best = (ymc[p], p);
        }
    }
    best
}

pub fn pool_trace(ymc: &[f64], cfg: &TemporalConfig) -> PoolTrace {
    let k = cfg.peaks;
    let (rr, rc) = cfg.row_shape;
    let (cr, cc) = cfg.column_shape;
    let (br2, bc2) = cfg.block_tile;
    let bc1 = cfg.block_grid.1;
    let width = cfg.block_width();
    let mut tr = PoolTrace {
        yr: Vec::with_capacity(k),
        yc: Vec::with_capacity(k),
        yb: Vec::with_capacity(k),
        arg_r: Vec::with_capacity(k),
        arg_c: Vec::with_capacity(k),
        arg_b: Vec::with_capacity(k),
    };
    for i in 0..rr {
        let (v, a) = argmax_over(ymc, (0..rc).map(|j| i * rc + j));
        tr.yr.push(v);
        tr.arg_r.push(a);
    }
    for j in 0..cc {
        let (v, a) = argmax_over(ymc, (0..cr).map(|i| i * cc + j));
        tr.yc.push(v);
        tr.arg_c.push(a);
    }
    for tile in 0..k {
        let (a, b) = (tile / bc1, tile % bc1);
        let cells = (0..br2).flat_map(move |i| (0..bc2).map(move |j| (a * br2 + i) * width + b * bc2 + j));
        let (v, p) = argmax_over(ymc, cells);
        tr.yb.push(v);
        tr.arg_b.push(p);
    }
    tr
}

/// `YM = w_row·YR + w_column·YC + w_block·YB`.
pub fn pool_mix(ymc: &[f64], cfg: &TemporalConfig, w_row: f64, w_column: f64, w_block: f64) -> Result<Vec<f64>> {
    cfg.validate()?;
    if ymc.len() != cfg.intervals {
        return Err(Error::shape("pool input", &[cfg.intervals], &[ymc.len()]));
    }
    let tr = pool_trace(ymc, cfg);
    Ok(mix(&tr, w_row, w_column, w_block))
}

fn mix(tr: &PoolTrace, w_row: f64, w_column: f64, w_block: f64) -> Vec<f64> {
    (0..tr.yr.len())
        .map(|k| w_row * tr.yr[k] + w_column * tr.yc[k] + w_block * tr.yb[k])
        .collect()
}

/// Gate activations of one GRU step, kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GruTrace {
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub candidate: Vec<f64>,
    pub next: Vec<f64>,
}

pub fn gru_trace(input: &[f64], prev: &[f64], gru: &GruParams) -> GruTrace {
    let h = prev.len();
    let mut z = vec![0.0; h];
    let mut r = vec![0.0; h];
    tensor::affine(&gru.w_z, &gru.b_z, input, &mut z);
    tensor::matvec_acc(&gru.u_z, prev, &mut z);
    tensor::affine(&gru.w_r, &gru.b_r, input, &mut r);
    tensor::matvec_acc(&gru.u_r, prev, &mut r);
    z.iter_mut().for_each(|v| *v = sigmoid(*v));
    r.iter_mut().for_each(|v| *v = sigmoid(*v));
    let gated: Vec<f64> = r.iter().zip(prev).map(|(a, b)| a * b).collect();
    let mut candidate = vec![0.0; h];
    tensor::affine(&gru.w_h, &gru.b_h, input, &mut candidate);
    tensor::matvec_acc(&gru.u_h, &gated, &mut candidate);
    candidate.iter_mut().for_each(|v| *v = libm::tanh(*v));
    let next = (0..h).map(|i| (1.0 - z[i]) * prev[i] + z[i] * candidate[i]).collect();
    GruTrace { z, r, candidate, next }
}

/// One GRU update `R_next = (1 - z)∘R_prev + z∘tanh(W_h C + U_h(r∘R_prev) + b_h)`.
pub fn gru_step(input: &[f64], prev: &[f64], gru: &GruParams) -> Vec<f64> {
    gru_trace(input, prev, gru).next
}

#[derive(Debug, Clone)]
struct StepCache {
    peaks: Vec<usize>,
    xk: Vec<f64>,
    yp: Vec<f64>,
    ymc: Vec<f64>,
    pools: PoolTrace,
    input: Vec<f64>,
    prev: Vec<f64>,
    gru: GruTrace,
}

/// Intermediates of one [`temporal_forward`] call.
#[derive(Debug, Clone)]
pub struct TemporalCache {
    cfg: TemporalConfig,
    users: usize,
    x: RequestTensor,
    steps: Vec<StepCache>,
}

/// Run the temporal layers on one entity. Returns `|U| × H` final states.
pub fn temporal_forward(
    x: &RequestTensor,
    cfg: &TemporalConfig,
    params: &TemporalParams,
    peaks: &PeakIndexSet,
) -> Result<(Tensor, TemporalCache)> {
    let [users, days, intervals] = x.dims();
    if days != cfg.days || intervals != cfg.intervals {
        return Err(Error::shape("temporal input", &[users, cfg.days, cfg.intervals], &x.dims()));
    }
    if peaks.dims() != [users, days, cfg.peaks] {
        return Err(Error::shape("peak index set", &[users, days, cfg.peaks], &peaks.dims()));
    }
    let k = cfg.peaks;
    let h = cfg.hidden;
    let mut out = Vec::with_capacity(users * h);
    let mut steps = Vec::with_capacity(users * days);
    for u in 0..users {
        let mut state = vec![0.0; h];
        for d in 0..days {
            let series = x.series(u, d);
            let idx = peaks.get(u, d).to_vec();
            let xk: Vec<f64> = idx.iter().map(|&i| series[i]).collect();
            let yp = peak_conv(&xk, params);
            let ymc = mean_conv(series, params);
            let pools = pool_trace(&ymc, cfg);
            let ym = mix(&pools, params.w_row, params.w_column, params.w_block);
            let mut input = Vec::with_capacity(2 * k);
            input.extend_from_slice(&yp);
            input.extend_from_slice(&ym);
            let tr = gru_trace(&input, &state, &params.gru);
            let next = tr.next.clone();
            steps.push(StepCache {
                peaks: idx,
                xk,
                yp,
                ymc,
                pools,
                input,
                prev: state,
                gru: tr,
            });
            state = next;
        }
        out.extend_from_slice(&state);
    }
    let t = Tensor::new(vec![users, h], out)?;
    Ok((
        t,
        TemporalCache {
            cfg: *cfg,
            users,
            x: x.clone(),
            steps,
        },
    ))
}

/// Exact gradients of the temporal layers for upstream `dL/dT_out`.
///
/// Peak selections and pool argmax positions are treated as constants.
pub fn temporal_backward(cache: &TemporalCache, grad_out: &[f64], params: &TemporalParams) -> Result<(TemporalParams, RequestTensor)> {
    let cfg = &cache.cfg;
    let (k, h) = (cfg.peaks, cfg.hidden);
    let input_dim = cfg.gru_input();
    if grad_out.len() != cache.users * h {
        return Err(Error::shape("temporal upstream gradient", &[cache.users, h], &[grad_out.len()]));
    }
    let mut g = TemporalParams::zeros(cfg);
    let [users, days, intervals] = cache.x.dims();
    let mut dx = RequestTensor::from_raw(users, days, intervals, vec![0.0; users * days * intervals]);
    let gru = &params.gru;

    let mut d_gated = vec![0.0; h];
    let mut d_input = vec![0.0; input_dim];
    let mut da_z = vec![0.0; h];
    let mut da_r = vec![0.0; h];
    let mut da_h = vec![0.0; h];
    for u in 0..users {
        let mut dh = grad_out[u * h..(u + 1) * h].to_vec();
        for d in (0..days).rev() {
            let st = &cache.steps[u * days + d];
            let tr = &st.gru;
            let mut dprev = vec![0.0; h];
            for i in 0..h {
                let dz = dh[i] * (tr.candidate[i] - st.prev[i]);
                let dn = dh[i] * tr.z[i];
                dprev[i] = dh[i] * (1.0 - tr.z[i]);
                da_h[i] = dn * (1.0 - tr.candidate[i] * tr.candidate[i]);
                da_z[i] = dz * tr.z[i] * (1.0 - tr.z[i]);
            }
            let gated: Vec<f64> = tr.r.iter().zip(&st.prev).map(|(a, b)| a * b).collect();
            tensor::outer_acc(&da_h, &st.input, &mut g.gru.w_h);
            tensor::outer_acc(&da_h, &gated, &mut g.gru.u_h);
            tensor::add_assign(&mut g.gru.b_h, &da_h);
            d_gated.iter_mut().for_each(|v| *v = 0.0);
            tensor::matvec_t_acc(&gru.u_h, &da_h, &mut d_gated);
            for i in 0..h {
                let dr = d_gated[i] * st.prev[i];
                dprev[i] += d_gated[i] * tr.r[i];
                da_r[i] = dr * tr.r[i] * (1.0 - tr.r[i]);
            }
            tensor::outer_acc(&da_z, &st.input, &mut g.gru.w_z);
            tensor::outer_acc(&da_z, &st.prev, &mut g.gru.u_z);
            tensor::add_assign(&mut g.gru.b_z, &da_z);
            tensor::outer_acc(&da_r, &st.input, &mut g.gru.w_r);
            tensor::outer_acc(&da_r, &st.prev, &mut g.gru.u_r);
            tensor::add_assign(&mut g.gru.b_r, &da_r);
            tensor::matvec_t_acc(&gru.u_z, &da_z, &mut dprev);
            tensor::matvec_t_acc(&gru.u_r, &da_r, &mut dprev);

            d_input.iter_mut().for_each(|v| *v = 0.0);
            tensor::matvec_t_acc(&gru.w_h, &da_h, &mut d_input);
            tensor::matvec_t_acc(&gru.w_z, &da_z, &mut d_input);
            tensor::matvec_t_acc(&gru.w_r, &da_r, &mut d_input);
            let (dyp, dym) = d_input.split_at(k);

            // Mean branch: pool mix, max pools, ReLU, convolution.
            let pools = &st.pools;
            let mut dymc = vec![0.0; intervals];
            for j in 0..k {
                g.w_row += dym[j] * pools.yr[j];
                g.w_column += dym[j] * pools.yc[j];
                g.w_block += dym[j] * pools.yb[j];
                dymc[pools.arg_r[j]] += params.w_row * dym[j];
                dymc[pools.arg_c[j]] += params.w_column * dym[j];
                dymc[pools.arg_b[j]] += params.w_block * dym[j];
            }
            for (gv, &y) in dymc.iter_mut().zip(&st.ymc) {
                if y <= 0.0 {
                    *gv = 0.0;
                }
            }
            let series = cache.x.series(u, d);
            conv_same_backward(&params.w_mean, series, &dymc, &mut g.w_mean, &mut g.b_mean, dx.series_mut(u, d));

            // Peak branch.
            let dpre_p: Vec<f64> = dyp.iter().zip(&st.yp).map(|(gv, &y)| if y > 0.0 { *gv } else { 0.0 }).collect();
            let mut dxk = vec![0.0; k];
            conv_same_backward(&params.w_peak, &st.xk, &dpre_p, &mut g.w_peak, &mut g.b_peak, &mut dxk);
            let row = dx.series_mut(u, d);
            for (&i, gv) in st.peaks.iter().zip(&dxk) {
                row[i] += gv;
            }
            dh = dprev;
        }
    }
    Ok((g, dx))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> TemporalConfig {
        // T=4, K=2, rows 2x2, columns 2x2, block grid 1x2 of 2x1 tiles.
        TemporalConfig::new(4, 2, 1, 3, (2, 2), (2, 2), (1, 2), (2, 1), 2).unwrap()
    }

    fn delta_params(cfg: &TemporalConfig) -> TemporalParams {
        let mut p = TemporalParams::zeros(cfg);
        p.w_peak = vec![0.0, 1.0, 0.0];
        p.w_mean = vec![0.0, 1.0, 0.0];
        p
    }

    #[test]
    fn top_k_examples() {
        let (idx, xk) = top_k_pool(&[5.0, 1.0, 9.0, 3.0], &[10.0, 20.0, 30.0, 40.0], 2).unwrap();
        assert_eq!(idx, vec![0, 2]);
        assert_eq!(xk, vec![10.0, 30.0]);
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(top_k_pool(&[4.0, 3.0, 2.0, 1.0], &x, 4).unwrap().1, x.to_vec());
        assert_eq!(select_peaks(&[7.0, 7.0, 1.0], 2).unwrap(), vec![0, 1]);
        assert!(matches!(select_peaks(&[1.0], 2), Err(Error::Config(_))));
    }

    #[test]
    fn conv_examples() {
        let cfg = tiny_cfg();
        let mut p = delta_params(&cfg);
        assert_eq!(peak_conv(&[-1.0, 2.0], &p), vec![0.0, 2.0]);
        assert_eq!(mean_conv(&[3.0, -1.0, 0.5, 2.0], &p), vec![3.0, 0.0, 0.5, 2.0]);
        p.w_peak = vec![1.0, 1.0, 1.0];
        p.w_mean = vec![1.0, 1.0, 1.0];
        assert_eq!(peak_conv(&[1.0, 2.0, 3.0], &p), vec![3.0, 6.0, 5.0]);
        assert_eq!(mean_conv(&[1.0, 2.0, 3.0, 4.0], &p), vec![3.0, 6.0, 9.0, 7.0]);
        p.b_peak = -1.0;
        p.b_mean = -1.0;
        p.w_peak = vec![0.0; 3];
        p.w_mean = vec![0.0; 3];
        assert_eq!(peak_conv(&[0.0, 0.0], &p), vec![0.0, 0.0]);
        assert_eq!(mean_conv(&[0.0; 4], &p), vec![0.0; 4]);
    }

    #[test]
    fn pool_mix_examples() {
        let cfg = tiny_cfg();
        // Row = [[1,2],[3,4]] -> YR = [2,4]
        let tr = pool_trace(&[1.0, 2.0, 3.0, 4.0], &cfg);
        assert_eq!(tr.yr, vec![2.0, 4.0]);
        assert_eq!(pool_mix(&[1.0, 2.0, 3.0, 4.0], &cfg, 1.0, 0.0, 0.0).unwrap(), tr.yr);
        // YMC = [1,5,2,0]: YR = [5,2], YC = [2,5], YB (2x1 tiles of [[1,5],[2,0]]) = [2,5].
        let ymc = [1.0, 5.0, 2.0, 0.0];
        let tr = pool_trace(&ymc, &cfg);
        assert_eq!((tr.yr.clone(), tr.yc.clone(), tr.yb.clone()), (vec![5.0, 2.0], vec![2.0, 5.0], vec![2.0, 5.0]));
        assert_eq!(pool_mix(&ymc, &cfg, 1.0, 1.0, 1.0).unwrap(), vec![9.0, 12.0]);
    }

    #[test]
    fn config_identities() {
        let d = TemporalConfig::desk();
        assert_eq!((d.intervals, d.peaks), (24, 6));
        assert!(TemporalConfig::full_scale(15, 16).is_ok());
        assert!(TemporalConfig::new(24, 6, 7, 3, (6, 4), (4, 6), (2, 3), (3, 2), 4).is_err());
        assert!(TemporalConfig::new(24, 6, 7, 3, (6, 4), (6, 4), (3, 2), (2, 2), 4).is_err());
        assert!(TemporalConfig::new(24, 6, 7, 2, (6, 4), (4, 6), (3, 2), (2, 2), 4).is_err());
    }

    #[test]
    fn gru_examples() {
        let zero = GruParams::zeros(4, 3);
        assert_eq!(gru_step(&[1.0, 2.0, 3.0, 4.0], &[0.0; 3], &zero), vec![0.0; 3]);
        let v = [0.4, -1.0, 2.0];
        let next = gru_step(&[1.0, 2.0, 3.0, 4.0], &v, &zero);
        for (n, p) in next.iter().zip(&v) {
            assert!((n - 0.5 * p).abs() < 1e-15);
        }
        let mut carry = GruParams::zeros(4, 3);
        carry.b_z = vec![-60.0; 3];
        carry.w_h = vec![1.0; 12];
        let next = gru_step(&[1.0, 2.0, 3.0, 4.0], &v, &carry);
        for (n, p) in next.iter().zip(&v) {
            assert!((n - p).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_zero_gru_gives_zero_rows() {
        let cfg = tiny_cfg();
        let p = delta_params(&cfg);
        let x = RequestTensor::from_vec(2, 1, 4, vec![1.0, 2.0, 3.0, 4.0, 0.0, 1.0, 0.0, 2.0]).unwrap();
        let peaks = PeakIndexSet::from_members([&x], 2).unwrap();
        let (out, _) = temporal_forward(&x, &cfg, &p, &peaks).unwrap();
        assert_eq!(out.data(), &[0.0; 4]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cfg = TemporalConfig::new(8, 2, 2, 3, (2, 4), (4, 2), (1, 2), (2, 2), 3).unwrap();
        let p = TemporalParams::init(&cfg, Seed(3)).unwrap();
        let x = RequestTensor::from_vec(2, 2, 8, (0..32).map(|i| (i % 5) as f64).collect()).unwrap();
        let peaks = PeakIndexSet::from_members([&x], 2).unwrap();
        let (_, cache) = temporal_forward(&x, &cfg, &p, &peaks).unwrap();
        let (g, dx) = temporal_backward(&cache, &[0.0; 6], &p).unwrap();
        assert_eq!(g, TemporalParams::zeros(&cfg));
        assert!(dx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn param_set_round_trip() {
        let cfg = TemporalConfig::desk();
        let p = TemporalParams::init(&cfg, Seed(9)).unwrap();
        let ps = p.to_param_set(&cfg);
        assert_eq!(ps.len(), 16);
        assert!(ps.names().all(|n| n.starts_with(PREFIX)));
        assert_eq!(TemporalParams::from_param_set(&ps, &cfg).unwrap(), p);
    }
}
