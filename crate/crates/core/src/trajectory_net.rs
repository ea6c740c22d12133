//! Implicit trajectory network: recording time to pose vector and camera
//! orientation, with exact time derivatives.
//!
//! Rows of a batch are independent samples. The forward pass propagates a
//! truncated Taylor expansion in time (value, first and second derivative)
//! through every layer, so output rates are exact. The backward pass
//! accepts gradients for the value and first-derivative channels.

use crate::dual::{self, Dual, Real, M3, V3};
use crate::exec;
use crate::so3::RotationMatrix;
use nalgebra::Matrix3;
use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::{Read, Write};
use thiserror::Error;

/// Number of camera-head outputs (two 3-vectors).
pub const CAMERA_HEAD: usize = 6;
const CHECKPOINT_MAGIC: &[u8; 8] = b"KFNET\0\0\x01";
/// Rows per parallel work item.
const ROW_CHUNK: usize = 128;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("non-finite time {0}")]
    NonFiniteTime(f64),
    #[error("duration must be positive, got {0}")]
    Duration(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Tanh,
}

impl Activation {
    fn code(self) -> u32 {
        match self {
            Activation::Silu => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_code(c: u32) -> Option<Self> {
        match c {
            0 => Some(Activation::Silu),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }

    /// `(σ, σ', σ'')` at `z`.
    #[inline]
    fn eval(self, z: f64) -> (f64, f64, f64) {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                let d1 = s * (1.0 + z * (1.0 - s));
                let d2 = s * (1.0 - s) * (2.0 + z * (1.0 - 2.0 * s));
                (z * s, d1, d2)
            }
            Activation::Tanh => {
                let a = z.tanh();
                let d1 = 1.0 - a * a;
                (a, d1, -2.0 * a * d1)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Number of sinusoidal bands; band `k` has `base_cycles · 2^k` cycles
    /// over the recording.
    pub bands: usize,
    pub base_cycles: f64,
    /// Standard deviation of the output-layer weights at init.
    pub output_init_std: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 64],
            activation: Activation::Silu,
            bands: 8,
            base_cycles: 1.0,
            output_init_std: 1e-3,
        }
    }
}

impl NetConfig {
    pub fn input_dim(&self) -> usize {
        1 + 2 * self.bands
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.hidden.contains(&0) {
            return Err(NetError::Config("hidden layer of width 0".into()));
        }
        if !(self.base_cycles > 0.0 && self.base_cycles.is_finite()) {
            return Err(NetError::Config("base_cycles must be positive".into()));
        }
        if !(self.output_init_std >= 0.0) {
            return Err(NetError::Config("output_init_std must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerSpan {
    n_in: usize,
    n_out: usize,
    w: usize,
    b: usize,
}

/// Network weights `φ` as one flat vector plus the layer index map.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryParams {
    pub config: NetConfig,
    pub n_dof: usize,
    pub flat: Vec<f64>,
    /// Hash of the body model descriptor the outputs are laid out for.
    pub descriptor_hash: String,
}

fn layer_spans(config: &NetConfig, n_out: usize) -> Vec<LayerSpan> {
    let mut sizes = vec![config.input_dim()];
    sizes.extend_from_slice(&config.hidden);
    sizes.push(n_out);
    let mut off = 0;
    sizes
        .windows(2)
        .map(|w| {
            let span = LayerSpan {
                n_in: w[0],
                n_out: w[1],
                w: off,
                b: off + w[0] * w[1],
            };
            off += w[0] * w[1] + w[1];
            span
        })
        .collect()
}

/// Network outputs at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct NetOutput {
    pub theta: Vec<f64>,
    pub cam6: [f64; 6],
    pub r_nc: RotationMatrix,
}

/// Time derivatives of [`NetOutput`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetOutputRate {
    pub theta: Vec<f64>,
    pub cam6: [f64; 6],
    pub r_nc: Matrix3<f64>,
}

/// Deterministic initialization. Hidden layers use `N(0, 1/fan_in)`;
/// the output layer is near zero with camera bias `[1,0,0, 0,1,0]` so the
/// initial pose is neutral and the camera is the identity.
pub fn init_trajectory(
    seed: u64,
    config: &NetConfig,
    n_dof: usize,
    descriptor_hash: &str,
) -> Result<TrajectoryParams, NetError> {
    config.validate()?;
    let n_out = n_dof + CAMERA_HEAD;
    let spans = layer_spans(config, n_out);
    let total = spans.last().map(|s| s.b + s.n_out).unwrap_or(0);
    let mut flat = vec![0.0; total];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last = spans.len() - 1;
    for (l, sp) in spans.iter().enumerate() {
        let std = if l == last {
            config.output_init_std
        } else {
            (1.0 / sp.n_in as f64).sqrt()
        };
        for v in &mut flat[sp.w..sp.b] {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = std * z;
        }
    }
    let out_b = spans[last].b;
    flat[out_b + n_dof] = 1.0;
    flat[out_b + n_dof + 4] = 1.0;
    Ok(TrajectoryParams {
        config: config.clone(),
        n_dof,
        flat,
        descriptor_hash: descriptor_hash.to_string(),
    })
}

/// Activations of one layer for each Taylor channel.
#[derive(Debug, Clone)]
struct LayerCache {
    /// Pre-activation value.
    z: Array2<f64>,
    /// Pre-activation first derivative (empty when order 0).
    zd: Array2<f64>,
    /// Post-activation value, first and second derivatives.
    a: [Array2<f64>; 3],
}

#[derive(Debug, Clone)]
struct ChunkCache {
    enc: [Array2<f64>; 3],
    layers: Vec<LayerCache>,
}

/// Forward state for a batch of times, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct NetBatch {
    order: usize,
    chunks: Vec<ChunkCache>,
    /// Outputs per channel; `out[k]` is `B × (n_dof + 6)`.
    pub out: [Array2<f64>; 3],
}

impl NetBatch {
    pub fn len(&self) -> usize {
        self.out[0].nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn order(&self) -> usize {
        self.order
    }
}

impl TrajectoryParams {
    pub fn n_out(&self) -> usize {
        self.n_dof + CAMERA_HEAD
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    fn spans(&self) -> Vec<LayerSpan> {
        layer_spans(&self.config, self.n_out())
    }

    fn weight(&self, sp: &LayerSpan) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((sp.n_out, sp.n_in), &self.flat[sp.w..sp.b]).expect("layer shape")
    }

    fn bias(&self, sp: &LayerSpan) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.flat[sp.b..sp.b + sp.n_out])
    }

    /// Index of the output-layer bias for output `k`.
    pub fn output_bias_index(&self, k: usize) -> usize {
        let sp = *self.spans().last().expect("at least one layer");
        sp.b + k
    }

    /// Sinusoidal encoding of `times` and its first two time derivatives.
    fn encode(&self, times: &[f64], duration: f64, order: usize) -> [Array2<f64>; 3] {
        let n = times.len();
        let d = self.config.input_dim();
        let mut e = [
            Array2::zeros((n, d)),
            Array2::zeros((if order >= 1 { n } else { 0 }, d)),
            Array2::zeros((if order >= 2 { n } else { 0 }, d)),
        ];
        let inv_t = 1.0 / duration;
        for (i, &t) in times.iter().enumerate() {
            let tau = t * inv_t;
            e[0][[i, 0]] = tau;
            if order >= 1 {
                e[1][[i, 0]] = inv_t;
            }
            for k in 0..self.config.bands {
                let w = 2.0 * PI * self.config.base_cycles * (1u64 << k) as f64;
                let (sn, cs) = (w * tau).sin_cos();
                let (cs_i, sn_i) = (1 + 2 * k, 2 + 2 * k);
                e[0][[i, sn_i]] = sn;
                e[0][[i, cs_i]] = cs;
                if order >= 1 {
                    let wd = w * inv_t;
                    e[1][[i, sn_i]] = wd * cs;
                    e[1][[i, cs_i]] = -wd * sn;
                    if order >= 2 {
                        e[2][[i, sn_i]] = -wd * wd * sn;
                        e[2][[i, cs_i]] = -wd * wd * cs;
                    }
                }
            }
        }
        e
    }

    fn forward_chunk(&self, times: &[f64], duration: f64, order: usize) -> ChunkCache {
        let enc = self.encode(times, duration, order);
        let spans = self.spans();
        let last = spans.len() - 1;
        let act = self.config.activation;
        let mut layers: Vec<LayerCache> = Vec::with_capacity(spans.len());
        for (l, sp) in spans.iter().enumerate() {
            let input = if l == 0 { &enc } else { &layers[l - 1].a };
            let wt = self.weight(sp).reversed_axes();
            let mut z = input[0].dot(&wt);
            z += &self.bias(sp);
            let zd = if order >= 1 { input[1].dot(&wt) } else { Array2::zeros((0, sp.n_out)) };
            let zdd = if order >= 2 { input[2].dot(&wt) } else { Array2::zeros((0, sp.n_out)) };
            if l == last {
                layers.push(LayerCache {
                    a: [z.clone(), zd.clone(), zdd],
                    z,
                    zd,
                });
                continue;
            }
            let mut a0 = Array2::zeros(z.raw_dim());
            let mut a1 = Array2::zeros(zd.raw_dim());
            let mut a2 = Array2::zeros(zdd.raw_dim());
            for i in 0..z.nrows() {
                for j in 0..z.ncols() {
                    let (v, d1, d2) = act.eval(z[[i, j]]);
                    a0[[i, j]] = v;
                    if order >= 1 {
                        let zd_ij = zd[[i, j]];
                        a1[[i, j]] = d1 * zd_ij;
                        if order >= 2 {
                            a2[[i, j]] = d2 * zd_ij * zd_ij + d1 * zdd[[i, j]];
                        }
                    }
                }
            }
            layers.push(LayerCache {
                z,
                zd,
                a: [a0, a1, a2],
            });
        }
        ChunkCache { enc, layers }
    }

    /// Batched forward pass. `order` selects how many time derivatives
    /// (0, 1 or 2) are propagated.
    pub fn forward_batch(&self, times: &[f64], duration: f64, order: usize) -> NetBatch {
        assert!(order <= 2);
        let chunks = exec::map_chunks(times.len(), ROW_CHUNK, |r| {
            self.forward_chunk(&times[r], duration, order)
        });
        let n_out = self.n_out();
        let gather = |k: usize| {
            if k > order || chunks.is_empty() {
                return Array2::zeros((if k > order { 0 } else { times.len() }, n_out));
            }
            let views: Vec<_> = chunks.iter().map(|c| c.layers.last().unwrap().a[k].view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("consistent chunk widths")
        };
        let out = [gather(0), gather(1), gather(2)];
        NetBatch { order, chunks, out }
    }

    /// Gradient of `Σ gy·y + gyd·ẏ` with respect to `φ`. `gyd` requires a
    /// batch of order ≥ 1.
    pub fn backward_batch(
        &self,
        batch: &NetBatch,
        gy: &Array2<f64>,
        gyd: Option<&Array2<f64>>,
    ) -> Vec<f64> {
        if gyd.is_some() {
            assert!(batch.order >= 1, "rate gradients need a first-order batch");
        }
        let mut offsets = Vec::with_capacity(batch.chunks.len());
        let mut row = 0;
        for c in &batch.chunks {
            offsets.push(row);
            row += c.enc[0].nrows();
        }
        let parts = exec::map_chunks(batch.chunks.len(), 1, |r| {
            let mut g = vec![0.0; self.flat.len()];
            for ci in r {
                let c = &batch.chunks[ci];
                let rows = offsets[ci]..offsets[ci] + c.enc[0].nrows();
                let gy_c = gy.slice(s![rows.clone(), ..]).to_owned();
                let gyd_c = gyd.map(|m| m.slice(s![rows, ..]).to_owned());
                self.backward_chunk(c, gy_c, gyd_c, &mut g);
            }
            g
        });
        let mut g = vec![0.0; self.flat.len()];
        for p in &parts {
            exec::add_into(&mut g, p);
        }
        g
    }

    fn backward_chunk(
        &self,
        c: &ChunkCache,
        mut gz: Array2<f64>,
        mut gzd: Option<Array2<f64>>,
        g: &mut [f64],
    ) {
        let spans = self.spans();
        let act = self.config.activation;
        for l in (0..spans.len()).rev() {
            let sp = spans[l];
            let input = if l == 0 { &c.enc } else { &c.layers[l - 1].a };
            // Linear layer.
            let mut gw = gz.t().dot(&input[0]);
            if let Some(gd) = &gzd {
                gw += &gd.t().dot(&input[1]);
            }
            let gb = gz.sum_axis(Axis(0));
            for (dst, v) in g[sp.w..sp.b].iter_mut().zip(gw.iter()) {
                *dst += v;
            }
            for (dst, v) in g[sp.b..sp.b + sp.n_out].iter_mut().zip(gb.iter()) {
                *dst += v;
            }
            if l == 0 {
                break;
            }
            let w = self.weight(&sp);
            let ga = gz.dot(&w);
            let gad = gzd.as_ref().map(|gd| gd.dot(&w));
            // Activation of the previous layer.
            let prev = &c.layers[l - 1];
            let mut nz = ga;
            match gad {
                None => {
                    nz.zip_mut_with(&prev.z, |g, &z| *g *= act.eval(z).1);
                    gzd = None;
                }
                Some(mut gd) => {
                    for i in 0..nz.nrows() {
                        for j in 0..nz.ncols() {
                            let (_, d1, d2) = act.eval(prev.z[[i, j]]);
                            let gdv = gd[[i, j]];
                            nz[[i, j]] = nz[[i, j]] * d1 + gdv * d2 * prev.zd[[i, j]];
                            gd[[i, j]] = gdv * d1;
                        }
                    }
                    gzd = Some(gd);
                }
            }
            gz = nz;
        }
    }

    /// Single-time evaluation.
    pub fn eval(&self, t: f64, duration: f64) -> Result<NetOutput, NetError> {
        check_time(t, duration)?;
        let b = self.forward_batch(&[t], duration, 0);
        Ok(self.output_row(b.out[0].row(0)))
    }

    /// Single-time evaluation with exact first time derivatives.
    pub fn eval_with_time_derivative(
        &self,
        t: f64,
        duration: f64,
    ) -> Result<(NetOutput, NetOutputRate), NetError> {
        check_time(t, duration)?;
        let b = self.forward_batch(&[t], duration, 1);
        let out = self.output_row(b.out[0].row(0));
        let d = b.out[1].row(0);
        let mut cam6d = [0.0; 6];
        for k in 0..6 {
            cam6d[k] = d[self.n_dof + k];
        }
        let (_, r_dot) = camera_rotation_rate(&out.cam6, &cam6d);
        Ok((
            out,
            NetOutputRate {
                theta: d.slice(s![..self.n_dof]).to_vec(),
                cam6: cam6d,
                r_nc: r_dot,
            },
        ))
    }

    fn output_row(&self, row: ArrayView1<'_, f64>) -> NetOutput {
        let mut cam6 = [0.0; 6];
        for k in 0..6 {
            cam6[k] = row[self.n_dof + k];
        }
        NetOutput {
            theta: row.slice(s![..self.n_dof]).to_vec(),
            cam6,
            r_nc: camera_rotation(&cam6),
        }
    }

    /// Writes the little-endian checkpoint.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), NetError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        let c = &self.config;
        w.write_all(&(c.hidden.len() as u32).to_le_bytes())?;
        for &h in &c.hidden {
            w.write_all(&(h as u32).to_le_bytes())?;
        }
        w.write_all(&c.activation.code().to_le_bytes())?;
        w.write_all(&(c.bands as u32).to_le_bytes())?;
        w.write_all(&c.base_cycles.to_le_bytes())?;
        w.write_all(&c.output_init_std.to_le_bytes())?;
        w.write_all(&(self.n_dof as u32).to_le_bytes())?;
        let h = self.descriptor_hash.as_bytes();
        w.write_all(&(h.len() as u32).to_le_bytes())?;
        w.write_all(h)?;
        w.write_all(&(self.flat.len() as u64).to_le_bytes())?;
        for v in &self.flat {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self, NetError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(NetError::Checkpoint("bad magic".into()));
        }
        let n_hidden = read_u32(&mut r)? as usize;
        if n_hidden > 64 {
            return Err(NetError::Checkpoint("implausible layer count".into()));
        }
        let hidden = (0..n_hidden)
            .map(|_| read_u32(&mut r).map(|v| v as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let activation = Activation::from_code(read_u32(&mut r)?)
            .ok_or_else(|| NetError::Checkpoint("unknown activation".into()))?;
        let bands = read_u32(&mut r)? as usize;
        let base_cycles = read_f64(&mut r)?;
        let output_init_std = read_f64(&mut r)?;
        let n_dof = read_u32(&mut r)? as usize;
        let hl = read_u32(&mut r)? as usize;
        if hl > 1024 {
            return Err(NetError::Checkpoint("implausible hash length".into()));
        }
        let mut hash = vec![0u8; hl];
        r.read_exact(&mut hash)?;
        let descriptor_hash =
            String::from_utf8(hash).map_err(|_| NetError::Checkpoint("hash not utf-8".into()))?;
        let config = NetConfig {
            hidden,
            activation,
            bands,
            base_cycles,
            output_init_std,
        };
        config.validate()?;
        let n = read_u64(&mut r)? as usize;
        let spans = layer_spans(&config, n_dof + CAMERA_HEAD);
        let expected = spans.last().map(|s| s.b + s.n_out).unwrap_or(0);
        if n != expected {
            return Err(NetError::Checkpoint(format!(
                "parameter count {n} does not match layer sizes ({expected})"
            )));
        }
        let flat = (0..n).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            config,
            n_dof,
            flat,
            descriptor_hash,
        })
    }
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn check_time(t: f64, duration: f64) -> Result<(), NetError> {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(NetError::Duration(duration));
    }
    if !t.is_finite() {
        return Err(NetError::NonFiniteTime(t));
    }
    Ok(())
}

/// Gram-Schmidt orthonormalization of the 6-real head; the two 3-vectors
/// become the first two columns.
pub fn camera_rotation_g<S: Real>(h: &[S; 6]) -> M3<S> {
    let (e1, e2, e3) = gram_schmidt(&[h[0], h[1], h[2]], &[h[3], h[4], h[5]]);
    columns(&e1, &e2, &e3)
}

fn gram_schmidt<S: Real>(a: &V3<S>, b: &V3<S>) -> (V3<S>, V3<S>, V3<S>) {
    let e1 = dual::scale(a, S::one() / dual::dot(a, a).sqrt());
    let c = dual::sub3(b, &dual::scale(&e1, dual::dot(&e1, b)));
    let e2 = dual::scale(&c, S::one() / dual::dot(&c, &c).sqrt());
    let e3 = dual::cross(&e1, &e2);
    (e1, e2, e3)
}

fn columns<S: Real>(e1: &V3<S>, e2: &V3<S>, e3: &V3<S>) -> M3<S> {
    [
        [e1[0], e2[0], e3[0]],
        [e1[1], e2[1], e3[1]],
        [e1[2], e2[2], e3[2]],
    ]
}

pub fn camera_rotation(h: &[f64; 6]) -> RotationMatrix {
    dual::re33(&camera_rotation_g(h))
}

/// Rotation and its time derivative from the head and head rate.
pub fn camera_rotation_rate_g<S: Real>(h: &[S; 6], hd: &[S; 6]) -> (M3<S>, M3<S>) {
    let a = [h[0], h[1], h[2]];
    let b = [h[3], h[4], h[5]];
    let ad = [hd[0], hd[1], hd[2]];
    let bd = [hd[3], hd[4], hd[5]];
    let inv_n1 = S::one() / dual::dot(&a, &a).sqrt();
    let e1 = dual::scale(&a, inv_n1);
    let e1d = dual::scale(&dual::sub3(&ad, &dual::scale(&e1, dual::dot(&e1, &ad))), inv_n1);
    let p = dual::dot(&e1, &b);
    let pd = dual::dot(&e1d, &b) + dual::dot(&e1, &bd);
    let c = dual::sub3(&b, &dual::scale(&e1, p));
    let cd = dual::sub3(&dual::sub3(&bd, &dual::scale(&e1d, p)), &dual::scale(&e1, pd));
    let inv_n2 = S::one() / dual::dot(&c, &c).sqrt();
    let e2 = dual::scale(&c, inv_n2);
    let e2d = dual::scale(&dual::sub3(&cd, &dual::scale(&e2, dual::dot(&e2, &cd))), inv_n2);
    let e3 = dual::cross(&e1, &e2);
    let e3d = dual::add3(&dual::cross(&e1d, &e2), &dual::cross(&e1, &e2d));
    (columns(&e1, &e2, &e3), columns(&e1d, &e2d, &e3d))
}

pub fn camera_rotation_rate(h: &[f64; 6], hd: &[f64; 6]) -> (RotationMatrix, Matrix3<f64>) {
    let (r, rd) = camera_rotation_rate_g(h, hd);
    (dual::re33(&r), dual::re33(&rd))
}

/// Rotation with its Jacobian lanes with respect to the six head entries.
pub fn camera_rotation_dual(h: &[f64; 6]) -> M3<Dual<6>> {
    camera_rotation_g(&Dual::<6>::vars(*h, 0))
}
