//! Recurrent gain estimator.
//!
//! Three stacked GRU cells joined by fully connected links. The first cell
//! drives the state-transition covariance head (R), the second the predicted
//! covariance head (S̄), the third the innovation covariance head (W). Each
//! head emits six lower-triangular entries `l` and the matrix `L Lᵀ + εI`,
//! so every output is symmetric positive definite. The gain is `K = S̄ W⁻¹`.
//!
//! Forward and reverse passes are written out by hand; [`StepCache`] keeps
//! what the reverse pass needs for one time step.
//!
//! ```text
//! feat ─ embed(tanh) ─ GRU1 ─┬─ r_head ───────────────► R
//!                            ├─ link12([h1, r]) ─ GRU2 ─┬─ s_head ─► S̄
//!                            │                          │
//!                            └──── link23([h1, h2, s]) ─┴─ GRU3 ─ w_head ─► W
//! ```

use nalgebra::Cholesky;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{Mat3, Measurement, Vec3};

/// Length of [`FeatureVector`].
pub const FEATURE_LEN: usize = 25;
/// Lower-triangular entries per covariance head.
pub const TRI_LEN: usize = 6;
/// Diagonal floor added to every head output.
pub const PSD_EPSILON: f64 = 1e-6;
/// Positions enter the features relative to the current prediction, in
/// units of this many meters.
pub const POSITION_SCALE: f64 = 10.0;
/// Velocities enter the features in units of this many m/s.
pub const VELOCITY_SCALE: f64 = 10.0;

/// Diagonal bias of each head's output layer at initialization. With
/// `S̄ ≈ I` and `W ≈ 2I` the initial gain is close to `I/2`.
const INIT_R_DIAG: f64 = 0.5;
const INIT_S_DIAG: f64 = 1.0;
const INIT_W_DIAG: f64 = std::f64::consts::SQRT_2;

/// Lower-triangular index order of the six head outputs.
const TRI_INDEX: [(usize, usize); TRI_LEN] = [(0, 0), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2)];
const TRI_DIAG: [usize; 3] = [0, 2, 5];

pub type FeatureVector = [f64; FEATURE_LEN];

/// Layer widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkShape {
    /// Width of the input embedding.
    pub embed: usize,
    /// Hidden size of each GRU cell.
    pub gru: [usize; 3],
    /// Width of the hidden layer in each covariance head.
    pub head: usize,
    /// Width of the links feeding the second and third GRU cells.
    pub link: usize,
}

impl Default for NetworkShape {
    fn default() -> Self {
        Self {
            embed: 24,
            gru: [24, 24, 24],
            head: 24,
            link: 24,
        }
    }
}

impl NetworkShape {
    pub fn parameter_count(&self) -> usize {
        Layout::build(self).0.len
    }

    pub fn manifest(&self) -> Vec<TensorSpec> {
        Layout::build(self).1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Copy)]
struct Gru {
    w_ih: usize,
    w_hh: usize,
    b_ih: usize,
    b_hh: usize,
    input: usize,
    hidden: usize,
}

#[derive(Debug, Clone, Copy)]
struct Head {
    hidden: Dense,
    out: Dense,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    embed: Dense,
    gru1: Gru,
    r_head: Head,
    link12: Dense,
    gru2: Gru,
    s_head: Head,
    link23: Dense,
    gru3: Gru,
    w_head: Head,
    len: usize,
}

struct LayoutBuilder {
    offset: usize,
    manifest: Vec<TensorSpec>,
}

impl LayoutBuilder {
    fn tensor(&mut self, name: String, shape: Vec<usize>) -> usize {
        let at = self.offset;
        self.offset += shape.iter().product::<usize>();
        self.manifest.push(TensorSpec { name, shape });
        at
    }

    fn dense(&mut self, name: &str, rows: usize, cols: usize) -> Dense {
        let w = self.tensor(format!("{name}.weight"), vec![rows, cols]);
        let b = self.tensor(format!("{name}.bias"), vec![rows]);
        Dense { w, b, rows, cols }
    }

    fn gru(&mut self, name: &str, input: usize, hidden: usize) -> Gru {
        let w_ih = self.tensor(format!("{name}.weight_ih"), vec![3 * hidden, input]);
        let w_hh = self.tensor(format!("{name}.weight_hh"), vec![3 * hidden, hidden]);
        let b_ih = self.tensor(format!("{name}.bias_ih"), vec![3 * hidden]);
        let b_hh = self.tensor(format!("{name}.bias_hh"), vec![3 * hidden]);
        Gru {
            w_ih,
            w_hh,
            b_ih,
            b_hh,
            input,
            hidden,
        }
    }

    fn head(&mut self, name: &str, input: usize, width: usize) -> Head {
        Head {
            hidden: self.dense(&format!("{name}.hidden"), width, input),
            out: self.dense(&format!("{name}.out"), TRI_LEN, width),
        }
    }
}

impl Layout {
    fn build(shape: &NetworkShape) -> (Layout, Vec<TensorSpec>) {
        let [h1, h2, h3] = shape.gru;
        let mut b = LayoutBuilder {
            offset: 0,
            manifest: Vec::new(),
        };
        let embed = b.dense("embed", shape.embed, FEATURE_LEN);
        let gru1 = b.gru("gru1", shape.embed, h1);
        let r_head = b.head("r_head", h1, shape.head);
        let link12 = b.dense("link12", shape.link, h1 + TRI_LEN);
        let gru2 = b.gru("gru2", shape.link, h2);
        let s_head = b.head("s_head", h2, shape.head);
        let link23 = b.dense("link23", shape.link, h1 + h2 + TRI_LEN);
        let gru3 = b.gru("gru3", shape.link, h3);
        let w_head = b.head("w_head", h3, shape.head);
        let layout = Layout {
            embed,
            gru1,
            r_head,
            link12,
            gru2,
            s_head,
            link23,
            gru3,
            w_head,
            len: b.offset,
        };
        (layout, b.manifest)
    }
}

/// Flat parameter vector in manifest order.
#[derive(Debug, Clone)]
pub struct GainNetworkParams {
    shape: NetworkShape,
    layout: Layout,
    values: Vec<f64>,
}

impl PartialEq for GainNetworkParams {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.values == other.values
    }
}

impl GainNetworkParams {
    pub fn zeros(shape: NetworkShape) -> Self {
        let (layout, _) = Layout::build(&shape);
        Self {
            shape,
            layout,
            values: vec![0.0; layout.len],
        }
    }

    pub fn from_values(shape: NetworkShape, values: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(shape);
        if values.len() != p.values.len() {
            return Err(Error::ManifestMismatch(format!(
                "expected {} values, got {}",
                p.values.len(),
                values.len()
            )));
        }
        p.values = values;
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape)
    }

    pub fn shape(&self) -> &NetworkShape {
        &self.shape
    }

    pub fn manifest(&self) -> Vec<TensorSpec> {
        self.shape.manifest()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn squared_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.squared_norm().sqrt()
    }

    pub fn same_manifest(&self, other: &Self) -> bool {
        self.shape == other.shape
    }

    /// Name of the tensor holding flat index `index`, with the offset inside it.
    pub fn locate(&self, index: usize) -> Option<(String, usize)> {
        let mut start = 0;
        for spec in self.manifest() {
            let n = spec.numel();
            if index < start + n {
                return Some((spec.name, index - start));
            }
            start += n;
        }
        None
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        debug_assert!(self.same_manifest(other));
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Hidden vector of each GRU cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GainNetworkState {
    pub hidden: [Vec<f64>; 3],
}

impl GainNetworkState {
    pub fn zeros(shape: &NetworkShape) -> Self {
        Self {
            hidden: shape.gru.map(|h| vec![0.0; h]),
        }
    }

    fn matches(&self, shape: &NetworkShape) -> bool {
        self.hidden.iter().zip(shape.gru).all(|(h, n)| h.len() == n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintyOutputs {
    pub r: Mat3,
    pub sbar: Mat3,
    pub w: Mat3,
    pub k: Mat3,
}

/// Gradients of a scalar objective with respect to [`UncertaintyOutputs`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutputGrads {
    pub r: Mat3,
    pub sbar: Mat3,
    pub w: Mat3,
    pub k: Mat3,
}

impl OutputGrads {
    pub fn zeros() -> Self {
        Self {
            r: Mat3::zeros(),
            sbar: Mat3::zeros(),
            w: Mat3::zeros(),
            k: Mat3::zeros(),
        }
    }

    pub fn gain_only(k: Mat3) -> Self {
        Self { k, ..Self::zeros() }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            r: self.r * factor,
            sbar: self.sbar * factor,
            w: self.w * factor,
            k: self.k * factor,
        }
    }
}

/// Filter quantities a feature vector is built from.
#[derive(Debug, Clone, Copy)]
pub struct FeatureInputs<'a> {
    pub measurement: &'a Measurement,
    pub previous_measurement: &'a Measurement,
    pub prev_updated: Vec3,
    pub prev_predicted: Vec3,
    pub prev_prev_predicted: Vec3,
    pub predicted: Vec3,
    pub control: Vec3,
    pub dt: f64,
}

/// Gradients of the features with respect to the filter states in
/// [`FeatureInputs`]. Measurements are data and get none.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureGrads {
    pub prev_updated: Vec3,
    pub prev_predicted: Vec3,
    pub prev_prev_predicted: Vec3,
    pub predicted: Vec3,
}

const RELATIVE_SLOTS: usize = 5;
// Start offsets of the position-like blocks (relative to the prediction).
const POS_SLOTS: [usize; RELATIVE_SLOTS] = [0, 6, 12, 15, 18];

/// Layout: current position, current velocity, previous position, previous
/// velocity, previous updated state, previous predicted state, twice-previous
/// predicted state, control velocity, dt. Positions are taken relative to the
/// current prediction.
pub fn build_features(inp: &FeatureInputs<'_>) -> FeatureVector {
    let mut f = [0.0; FEATURE_LEN];
    let rel = |p: &Vec3| (p - inp.predicted) / POSITION_SCALE;
    let vel = |m: &Measurement| m.velocity.unwrap_or_else(Vec3::zeros) / VELOCITY_SCALE;
    let blocks: [(usize, Vec3); 8] = [
        (0, rel(&inp.measurement.position)),
        (3, vel(inp.measurement)),
        (6, rel(&inp.previous_measurement.position)),
        (9, vel(inp.previous_measurement)),
        (12, rel(&inp.prev_updated)),
        (15, rel(&inp.prev_predicted)),
        (18, rel(&inp.prev_prev_predicted)),
        (21, inp.control / VELOCITY_SCALE),
    ];
    for (at, v) in blocks {
        f[at..at + 3].copy_from_slice(v.as_slice());
    }
    f[24] = inp.dt;
    f
}

pub fn features_backward(d_feat: &[f64]) -> FeatureGrads {
    let block = |at: usize| Vec3::new(d_feat[at], d_feat[at + 1], d_feat[at + 2]) / POSITION_SCALE;
    let prev_updated = block(12);
    let prev_predicted = block(15);
    let prev_prev_predicted = block(18);
    let predicted = -POS_SLOTS.iter().map(|&at| block(at)).sum::<Vec3>();
    FeatureGrads {
        prev_updated,
        prev_predicted,
        prev_prev_predicted,
        predicted,
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn affine(p: &[f64], d: Dense, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(x.len(), d.cols);
    let w = &p[d.w..d.w + d.rows * d.cols];
    let b = &p[d.b..d.b + d.rows];
    w.chunks_exact(d.cols)
        .zip(b)
        .map(|(row, bias)| bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

fn affine_backward(p: &[f64], g: &mut [f64], d: Dense, x: &[f64], dout: &[f64], dx: &mut [f64]) {
    for (i, &dy) in dout.iter().enumerate() {
        if dy == 0.0 {
            continue;
        }
        let row = d.w + i * d.cols;
        g[d.b + i] += dy;
        for j in 0..d.cols {
            g[row + j] += dy * x[j];
            dx[j] += p[row + j] * dy;
        }
    }
}

fn tanh_layer(p: &[f64], d: Dense, x: &[f64]) -> Vec<f64> {
    let mut y = affine(p, d, x);
    y.iter_mut().for_each(|v| *v = v.tanh());
    y
}

fn tanh_layer_backward(p: &[f64], g: &mut [f64], d: Dense, x: &[f64], y: &[f64], dy: &[f64], dx: &mut [f64]) {
    let da: Vec<f64> = y.iter().zip(dy).map(|(y, d)| d * (1.0 - y * y)).collect();
    affine_backward(p, g, d, x, &da, dx);
}

#[derive(Debug, Clone)]
struct GruCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    ghn: Vec<f64>,
    h: Vec<f64>,
}

fn gru_forward(p: &[f64], g: Gru, x: &[f64], h_prev: &[f64]) -> GruCache {
    let hs = g.hidden;
    let gi = affine(
        p,
        Dense {
            w: g.w_ih,
            b: g.b_ih,
            rows: 3 * hs,
            cols: g.input,
        },
        x,
    );
    let gh = affine(
        p,
        Dense {
            w: g.w_hh,
            b: g.b_hh,
            rows: 3 * hs,
            cols: hs,
        },
        h_prev,
    );
    let mut r = vec![0.0; hs];
    let mut z = vec![0.0; hs];
    let mut n = vec![0.0; hs];
    let mut h = vec![0.0; hs];
    for k in 0..hs {
        r[k] = sigmoid(gi[k] + gh[k]);
        z[k] = sigmoid(gi[hs + k] + gh[hs + k]);
        n[k] = (gi[2 * hs + k] + r[k] * gh[2 * hs + k]).tanh();
        h[k] = (1.0 - z[k]) * n[k] + z[k] * h_prev[k];
    }
    GruCache {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        r,
        z,
        n,
        ghn: gh[2 * hs..].to_vec(),
        h,
    }
}

fn gru_backward(p: &[f64], grads: &mut [f64], g: Gru, c: &GruCache, dh: &[f64], dx: &mut [f64], dh_prev: &mut [f64]) {
    let hs = g.hidden;
    let mut dgi = vec![0.0; 3 * hs];
    let mut dgh = vec![0.0; 3 * hs];
    for k in 0..hs {
        let dn = dh[k] * (1.0 - c.z[k]);
        let dz = dh[k] * (c.h_prev[k] - c.n[k]);
        dh_prev[k] += dh[k] * c.z[k];
        let dan = dn * (1.0 - c.n[k] * c.n[k]);
        let dr = dan * c.ghn[k];
        let dar = dr * c.r[k] * (1.0 - c.r[k]);
        let daz = dz * c.z[k] * (1.0 - c.z[k]);
        dgi[k] = dar;
        dgi[hs + k] = daz;
        dgi[2 * hs + k] = dan;
        dgh[k] = dar;
        dgh[hs + k] = daz;
        dgh[2 * hs + k] = dan * c.r[k];
    }
    affine_backward(
        p,
        grads,
        Dense {
            w: g.w_ih,
            b: g.b_ih,
            rows: 3 * hs,
            cols: g.input,
        },
        &c.x,
        &dgi,
        dx,
    );
    affine_backward(
        p,
        grads,
        Dense {
            w: g.w_hh,
            b: g.b_hh,
            rows: 3 * hs,
            cols: hs,
        },
        &c.h_prev,
        &dgh,
        dh_prev,
    );
}

fn lower_from_raw(raw: &[f64]) -> Mat3 {
    let mut l = Mat3::zeros();
    for (k, &(i, j)) in TRI_INDEX.iter().enumerate() {
        l[(i, j)] = raw[k];
    }
    l
}

fn psd_from_lower(l: &Mat3) -> Mat3 {
    l * l.transpose() + Mat3::identity() * PSD_EPSILON
}

fn psd_backward(l: &Mat3, dm: &Mat3) -> [f64; TRI_LEN] {
    let dl = (dm + dm.transpose()) * l;
    TRI_INDEX.map(|(i, j)| dl[(i, j)])
}

#[derive(Debug, Clone)]
struct HeadCache {
    mid: Vec<f64>,
    raw: Vec<f64>,
    lower: Mat3,
}

fn head_forward(p: &[f64], h: Head, x: &[f64]) -> HeadCache {
    let mid = tanh_layer(p, h.hidden, x);
    let raw = affine(p, h.out, &mid);
    let lower = lower_from_raw(&raw);
    HeadCache { mid, raw, lower }
}

/// Reverse pass through a head; `d_raw` already includes any gradient that
/// reached the raw outputs through other layers.
fn head_backward(p: &[f64], g: &mut [f64], h: Head, x: &[f64], c: &HeadCache, d_raw: &[f64], dx: &mut [f64]) {
    let mut d_mid = vec![0.0; c.mid.len()];
    affine_backward(p, g, h.out, &c.mid, d_raw, &mut d_mid);
    tanh_layer_backward(p, g, h.hidden, x, &c.mid, &d_mid, dx);
}

/// Intermediate values of one forward step.
#[derive(Debug, Clone)]
pub struct StepCache {
    feat: Vec<f64>,
    e: Vec<f64>,
    g1: GruCache,
    r: HeadCache,
    l12_in: Vec<f64>,
    a12: Vec<f64>,
    g2: GruCache,
    s: HeadCache,
    l23_in: Vec<f64>,
    a23: Vec<f64>,
    g3: GruCache,
    w: HeadCache,
    w_inv: Mat3,
    outputs: UncertaintyOutputs,
}

impl StepCache {
    pub fn outputs(&self) -> &UncertaintyOutputs {
        &self.outputs
    }

    pub fn next_state(&self) -> GainNetworkState {
        GainNetworkState {
            hidden: [self.g1.h.clone(), self.g2.h.clone(), self.g3.h.clone()],
        }
    }
}

fn check_state(params: &GainNetworkParams, state: &GainNetworkState) -> Result<()> {
    if state.matches(&params.shape) {
        Ok(())
    } else {
        Err(Error::ManifestMismatch(format!(
            "hidden state sizes {:?} do not match GRU sizes {:?}",
            state.hidden.iter().map(Vec::len).collect::<Vec<_>>(),
            params.shape.gru
        )))
    }
}

pub fn forward_step_cached(
    params: &GainNetworkParams,
    state: &GainNetworkState,
    feat: &FeatureVector,
) -> Result<StepCache> {
    check_state(params, state)?;
    if !feat.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { what: "feature vector" });
    }
    let p = params.values.as_slice();
    let lay = &params.layout;

    let e = tanh_layer(p, lay.embed, feat);
    let g1 = gru_forward(p, lay.gru1, &e, &state.hidden[0]);
    let r = head_forward(p, lay.r_head, &g1.h);

    let l12_in = [g1.h.as_slice(), &r.raw].concat();
    let a12 = tanh_layer(p, lay.link12, &l12_in);
    let g2 = gru_forward(p, lay.gru2, &a12, &state.hidden[1]);
    let s = head_forward(p, lay.s_head, &g2.h);

    let l23_in = [g1.h.as_slice(), &g2.h, &s.raw].concat();
    let a23 = tanh_layer(p, lay.link23, &l23_in);
    let g3 = gru_forward(p, lay.gru3, &a23, &state.hidden[2]);
    let w = head_forward(p, lay.w_head, &g3.h);

    let r_mat = psd_from_lower(&r.lower);
    let s_mat = psd_from_lower(&s.lower);
    let w_mat = psd_from_lower(&w.lower);
    let w_inv = Cholesky::new(w_mat)
        .map(|c| c.inverse())
        .ok_or(Error::Singular {
            condition: f64::INFINITY,
        })?;
    let k = s_mat * w_inv;
    if !k.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { what: "network gain" });
    }
    Ok(StepCache {
        feat: feat.to_vec(),
        e,
        g1,
        r,
        l12_in,
        a12,
        g2,
        s,
        l23_in,
        a23,
        g3,
        w,
        w_inv,
        outputs: UncertaintyOutputs {
            r: r_mat,
            sbar: s_mat,
            w: w_mat,
            k,
        },
    })
}

pub fn forward_step(
    params: &GainNetworkParams,
    state: &GainNetworkState,
    feat: &FeatureVector,
) -> Result<(UncertaintyOutputs, GainNetworkState)> {
    let cache = forward_step_cached(params, state, feat)?;
    Ok((cache.outputs, cache.next_state()))
}

/// Reverse pass of one step. Accumulates parameter gradients into `grads`
/// and returns the gradients with respect to the features and the incoming
/// hidden state.
pub fn backward_step(
    params: &GainNetworkParams,
    cache: &StepCache,
    d_out: &OutputGrads,
    dh_next: &GainNetworkState,
    grads: &mut GainNetworkParams,
) -> (FeatureVector, GainNetworkState) {
    let p = params.values.as_slice();
    let g = grads.values.as_mut_slice();
    let lay = &params.layout;
    let [h1, h2, h3] = params.shape.gru;
    let out = &cache.outputs;

    // K = S̄ W⁻¹
    let w_inv_t = cache.w_inv.transpose();
    let d_s = d_out.sbar + d_out.k * w_inv_t;
    let d_w = d_out.w - out.k.transpose() * d_out.k * w_inv_t;

    let mut d_r_raw = psd_backward(&cache.r.lower, &d_out.r).to_vec();
    let mut d_s_raw = psd_backward(&cache.s.lower, &d_s).to_vec();
    let d_w_raw = psd_backward(&cache.w.lower, &d_w).to_vec();

    let mut dh3 = dh_next.hidden[2].clone();
    head_backward(p, g, lay.w_head, &cache.g3.h, &cache.w, &d_w_raw, &mut dh3);
    let mut d_a23 = vec![0.0; cache.a23.len()];
    let mut dh3_prev = vec![0.0; h3];
    gru_backward(p, g, lay.gru3, &cache.g3, &dh3, &mut d_a23, &mut dh3_prev);

    let mut d_l23_in = vec![0.0; cache.l23_in.len()];
    tanh_layer_backward(p, g, lay.link23, &cache.l23_in, &cache.a23, &d_a23, &mut d_l23_in);
    let mut dh1 = dh_next.hidden[0].clone();
    let mut dh2 = dh_next.hidden[1].clone();
    for k in 0..h1 {
        dh1[k] += d_l23_in[k];
    }
    for k in 0..h2 {
        dh2[k] += d_l23_in[h1 + k];
    }
    for k in 0..TRI_LEN {
        d_s_raw[k] += d_l23_in[h1 + h2 + k];
    }

    head_backward(p, g, lay.s_head, &cache.g2.h, &cache.s, &d_s_raw, &mut dh2);
    let mut d_a12 = vec![0.0; cache.a12.len()];
    let mut dh2_prev = vec![0.0; h2];
    gru_backward(p, g, lay.gru2, &cache.g2, &dh2, &mut d_a12, &mut dh2_prev);

    let mut d_l12_in = vec![0.0; cache.l12_in.len()];
    tanh_layer_backward(p, g, lay.link12, &cache.l12_in, &cache.a12, &d_a12, &mut d_l12_in);
    for k in 0..h1 {
        dh1[k] += d_l12_in[k];
    }
    for k in 0..TRI_LEN {
        d_r_raw[k] += d_l12_in[h1 + k];
    }

    head_backward(p, g, lay.r_head, &cache.g1.h, &cache.r, &d_r_raw, &mut dh1);
    let mut d_e = vec![0.0; cache.e.len()];
    let mut dh1_prev = vec![0.0; h1];
    gru_backward(p, g, lay.gru1, &cache.g1, &dh1, &mut d_e, &mut dh1_prev);

    let mut d_feat = [0.0; FEATURE_LEN];
    tanh_layer_backward(p, g, lay.embed, &cache.feat, &cache.e, &d_e, &mut d_feat);

    (
        d_feat,
        GainNetworkState {
            hidden: [dh1_prev, dh2_prev, dh3_prev],
        },
    )
}

/// Unrolls the recurrence from a zeroed hidden state.
pub fn forward_sequence(params: &GainNetworkParams, feats: &[FeatureVector]) -> Result<Vec<UncertaintyOutputs>> {
    if feats.is_empty() {
        return Err(Error::Empty("feature sequence"));
    }
    let mut state = GainNetworkState::zeros(&params.shape);
    let mut outputs = Vec::with_capacity(feats.len());
    for f in feats {
        let (out, next) = forward_step(params, &state, f)?;
        outputs.push(out);
        state = next;
    }
    Ok(outputs)
}

/// Reverse-mode gradient of `Σ_t ⟨upstream_t, outputs_t⟩` with respect to the
/// parameters, through the unrolled recurrence. Features are held fixed.
pub fn backward_sequence(
    params: &GainNetworkParams,
    feats: &[FeatureVector],
    upstream: &[OutputGrads],
) -> Result<GainNetworkParams> {
    if feats.is_empty() {
        return Err(Error::Empty("feature sequence"));
    }
    if feats.len() != upstream.len() {
        return Err(Error::LengthMismatch {
            what: "features vs upstream gradients",
            left: feats.len(),
            right: upstream.len(),
        });
    }
    let mut state = GainNetworkState::zeros(&params.shape);
    let mut caches = Vec::with_capacity(feats.len());
    for f in feats {
        let cache = forward_step_cached(params, &state, f)?;
        state = cache.next_state();
        caches.push(cache);
    }
    let mut grads = params.zeros_like();
    let mut dh = GainNetworkState::zeros(&params.shape);
    for (cache, d_out) in caches.iter().zip(upstream).rev() {
        let (_, dh_prev) = backward_step(params, cache, d_out, &dh, &mut grads);
        dh = dh_prev;
    }
    Ok(grads)
}

/// Weights uniform in `±1/√fan_in`, biases zero, except the diagonal biases
/// of each head's output layer which set a moderate initial gain.
pub fn init_params(seed: u64, shape: NetworkShape) -> GainNetworkParams {
    let mut params = GainNetworkParams::zeros(shape);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lay = params.layout;
    let v = &mut params.values;
    let mut fill = |at: usize, rows: usize, cols: usize| {
        let bound = 1.0 / (cols as f64).sqrt();
        for x in &mut v[at..at + rows * cols] {
            *x = rng.random_range(-bound..bound);
        }
    };
    let dense = |d: Dense| (d.w, d.rows, d.cols);
    let gru = |g: Gru| [(g.w_ih, 3 * g.hidden, g.input), (g.w_hh, 3 * g.hidden, g.hidden)];
    let head = |h: Head| [dense(h.hidden), dense(h.out)];
    let mut blocks = vec![dense(lay.embed)];
    blocks.extend(gru(lay.gru1));
    blocks.extend(head(lay.r_head));
    blocks.push(dense(lay.link12));
    blocks.extend(gru(lay.gru2));
    blocks.extend(head(lay.s_head));
    blocks.push(dense(lay.link23));
    blocks.extend(gru(lay.gru3));
    blocks.extend(head(lay.w_head));
    for (at, rows, cols) in blocks {
        fill(at, rows, cols);
    }
    for (h, diag) in [
        (lay.r_head, INIT_R_DIAG),
        (lay.s_head, INIT_S_DIAG),
        (lay.w_head, INIT_W_DIAG),
    ] {
        for k in TRI_DIAG {
            v[h.out.b + k] = diag;
        }
    }
    params
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_feats(seed: u64, n: usize) -> Vec<FeatureVector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn default_parameter_count_in_band() {
        let n = NetworkShape::default().parameter_count();
        assert_eq!(n, 15738);
        assert!((15_000..=30_000).contains(&n));
        let manifest_total: usize = NetworkShape::default().manifest().iter().map(TensorSpec::numel).sum();
        assert_eq!(manifest_total, n);
    }

    #[test]
    fn zero_params_give_floor_outputs() {
        let params = GainNetworkParams::zeros(NetworkShape::default());
        let state = GainNetworkState::zeros(params.shape());
        let (out, next) = forward_step(&params, &state, &[0.3; FEATURE_LEN]).unwrap();
        let floor = Mat3::identity() * PSD_EPSILON;
        assert_eq!(out.r, floor);
        assert_eq!(out.sbar, floor);
        assert_eq!(out.w, floor);
        assert!((out.k - Mat3::identity()).abs().max() < 1e-12);
        // z = 1/2 and n = 0 keep a zero hidden state at zero
        assert!(next.hidden.iter().all(|h| h.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn forward_is_deterministic() {
        let params = init_params(3, NetworkShape::default());
        let state = GainNetworkState::zeros(params.shape());
        let f = random_feats(1, 1)[0];
        assert_eq!(forward_step(&params, &state, &f).unwrap(), forward_step(&params, &state, &f).unwrap());
    }

    #[test]
    fn initial_gain_is_moderate() {
        let params = init_params(11, NetworkShape::default());
        let out = forward_sequence(&params, &random_feats(2, 5)).unwrap();
        for o in out {
            let d = o.k.diagonal();
            assert!(d.iter().all(|&v| v > 0.05 && v < 0.95), "{d}");
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = init_params(7, NetworkShape::default());
        assert_eq!(a, init_params(7, NetworkShape::default()));
        assert_ne!(a, init_params(8, NetworkShape::default()));
    }

    #[test]
    fn rejects_mismatched_state() {
        let params = init_params(7, NetworkShape::default());
        let state = GainNetworkState {
            hidden: [vec![0.0; 3], vec![0.0; 24], vec![0.0; 24]],
        };
        assert!(matches!(
            forward_step(&params, &state, &[0.0; FEATURE_LEN]),
            Err(Error::ManifestMismatch(_))
        ));
    }

    #[test]
    fn feature_scaling_changes_outputs() {
        let params = init_params(5, NetworkShape::default());
        let state = GainNetworkState::zeros(params.shape());
        let f = random_feats(9, 1)[0];
        let scaled = f.map(|v| v * 10.0);
        let (a, _) = forward_step(&params, &state, &f).unwrap();
        let (b, _) = forward_step(&params, &state, &scaled).unwrap();
        assert!((a.k - b.k).abs().max() > 1e-3);
    }

    #[test]
    fn length_one_sequence_is_one_step() {
        let params = init_params(5, NetworkShape::default());
        let f = random_feats(4, 1);
        let seq = forward_sequence(&params, &f).unwrap();
        let (step, _) = forward_step(&params, &GainNetworkState::zeros(params.shape()), &f[0]).unwrap();
        assert_eq!(seq, vec![step]);
    }

    #[test]
    fn state_reset_and_order_matter() {
        let params = init_params(5, NetworkShape::default());
        let f = random_feats(6, 100);
        let whole = forward_sequence(&params, &f).unwrap();
        let mut halves = forward_sequence(&params, &f[..50]).unwrap();
        halves.extend(forward_sequence(&params, &f[50..]).unwrap());
        assert_eq!(whole[..50], halves[..50]);
        assert!((whole[50].k - halves[50].k).abs().max() > 1e-6);

        let mut permuted = f.clone();
        permuted.swap(0, 1);
        let perm = forward_sequence(&params, &permuted).unwrap();
        assert!((whole[1].k - perm[1].k).abs().max() > 1e-6);
        assert!((whole[5].k - perm[5].k).abs().max() > 1e-9);
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let params = init_params(5, NetworkShape::default());
        let f = random_feats(1, 6);
        let g = backward_sequence(&params, &f, &vec![OutputGrads::zeros(); 6]).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let params = init_params(5, NetworkShape::default());
        let f = random_feats(1, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut m = || Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let up: Vec<_> = (0..6)
            .map(|_| OutputGrads {
                r: m(),
                sbar: m(),
                w: m(),
                k: m(),
            })
            .collect();
        let doubled: Vec<_> = up.iter().map(|u| u.scaled(2.0)).collect();
        let g1 = backward_sequence(&params, &f, &up).unwrap();
        let g2 = backward_sequence(&params, &f, &doubled).unwrap();
        for (a, b) in g1.values().iter().zip(g2.values()) {
            assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn backward_rejects_misaligned_upstream() {
        let params = init_params(5, NetworkShape::default());
        let f = random_feats(1, 3);
        assert!(matches!(
            backward_sequence(&params, &f, &[OutputGrads::zeros(); 2]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn feature_gradients_follow_relative_positions() {
        let m = Measurement::with_velocity(Vec3::new(1.0, 2.0, 3.0), Vec3::new(4.0, 5.0, 6.0));
        let inp = FeatureInputs {
            measurement: &m,
            previous_measurement: &m,
            prev_updated: Vec3::new(0.5, 0.0, 0.0),
            prev_predicted: Vec3::new(0.0, 0.5, 0.0),
            prev_prev_predicted: Vec3::new(0.0, 0.0, 0.5),
            predicted: Vec3::new(1.0, 1.0, 1.0),
            control: Vec3::new(4.0, 5.0, 6.0),
            dt: 0.1,
        };
        let f = build_features(&inp);
        assert_eq!(f[24], 0.1);
        assert!((f[0] - 0.0).abs() < 1e-15 && (f[1] - 1.0 / POSITION_SCALE).abs() < 1e-15);
        assert!((f[3] - 0.4).abs() < 1e-15);
        // directional derivative check of the linear map
        let d: Vec<f64> = (0..FEATURE_LEN).map(|k| (k as f64 * 0.37).sin()).collect();
        let g = features_backward(&d);
        let h = 1e-3;
        let bump = Vec3::new(h, -h, 2.0 * h);
        let moved = FeatureInputs {
            prev_updated: inp.prev_updated + bump,
            predicted: inp.predicted + bump * 0.5,
            ..inp
        };
        let f2 = build_features(&moved);
        let lhs: f64 = f2.iter().zip(&f).zip(&d).map(|((a, b), d)| (a - b) * d).sum();
        let rhs = g.prev_updated.dot(&bump) + g.predicted.dot(&(bump * 0.5));
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
