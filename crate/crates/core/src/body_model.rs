//! Configurable kinematic tree with isotropic per-segment scaling, marker
//! offsets and forward kinematics.
//!
//! Pose layout: `[tx, ty, tz, rx, ry, rz, joint DOFs...]` where `r` are the
//! exponential coordinates of the root orientation and the joint DOFs follow
//! segment order, then axis order within each joint. A joint with several
//! axes composes its rotations in listed order.
//!
//! Besides the forward pass, [`FkCache`] carries everything needed for the
//! adjoint passes used by the optimizer: world-frame joint axes, joint
//! origins, and the left Jacobian of the root exponential map.

use crate::dual::{Dual, Real};
use crate::so3::{self, RotationMatrix};
use nalgebra::{Matrix3, Vector3};
use serde::Deserialize;
use sha2::{Digest, Sha256};
use std::collections::{HashMap, HashSet};
use std::path::Path;
use thiserror::Error;

pub const DESCRIPTOR_SCHEMA: &str = "kinefuse.body-model/1";
/// Number of pose entries owned by the free root joint.
pub const ROOT_DOF: usize = 6;
/// Default bound on each marker offset component, meters.
pub const MARKER_OFFSET_BOUND: f64 = 0.05;

const DEFAULT_DESCRIPTOR: &str = include_str!("../assets/lower_body.toml");

#[derive(Debug, Error)]
pub enum BodyModelError {
    #[error("descriptor parse error: {0}")]
    Parse(String),
    #[error("unsupported descriptor schema {0:?}")]
    Schema(String),
    #[error("segment {0:?} is its own parent")]
    SelfParent(String),
    #[error("segment {segment:?} references parent {parent:?} which is not defined before it (cycle or bad ordering)")]
    BadParent { segment: String, parent: String },
    #[error("root segment must come first and be the only free joint")]
    Root,
    #[error("duplicate {kind} name {name:?}")]
    Duplicate { kind: &'static str, name: String },
    #[error("unknown {kind} {name:?}")]
    Unknown { kind: &'static str, name: String },
    #[error("joint axis for {0:?} has zero length")]
    ZeroAxis(String),
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("io error reading descriptor: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DescriptorFile {
    schema: String,
    name: String,
    #[serde(default)]
    scale_params: Vec<String>,
    segments: Vec<SegmentSpec>,
    #[serde(default)]
    markers: Vec<MarkerSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentSpec {
    name: String,
    #[serde(default)]
    parent: Option<String>,
    #[serde(default)]
    offset: [f64; 3],
    joint: String,
    #[serde(default)]
    free: bool,
    #[serde(default)]
    scale: Vec<String>,
    #[serde(default)]
    dofs: Vec<DofSpec>,
    #[serde(default)]
    primary: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DofSpec {
    name: String,
    axis: [f64; 3],
    #[serde(default)]
    limits: Option<[f64; 2]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MarkerSpec {
    name: String,
    segment: String,
    position: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct Dof {
    pub name: String,
    pub axis: Vector3<f64>,
    /// Radians.
    pub limits: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct Segment {
    pub name: String,
    pub parent: Option<usize>,
    /// Rest translation from the parent origin, in the parent frame.
    pub offset: Vector3<f64>,
    pub joint: String,
    pub dofs: Vec<Dof>,
    /// Index into `dofs` reported by [`extract_joint_angle`].
    pub primary: usize,
    /// First pose index of this segment's joint DOFs.
    pub dof_start: usize,
}

#[derive(Debug, Clone)]
pub struct Marker {
    pub name: String,
    pub segment: usize,
    pub local: Vector3<f64>,
}

/// Immutable kinematic tree in topological order (parents before children).
#[derive(Debug, Clone)]
pub struct KinematicTree {
    pub name: String,
    pub segments: Vec<Segment>,
    pub markers: Vec<Marker>,
    pub scale_names: Vec<String>,
    /// Row per segment: `(scale param index, weight)` pairs. Segment scale
    /// factor is `exp(Σ weight · β_s[k])`, so it stays strictly positive.
    pub scale_map: Vec<Vec<(usize, f64)>>,
    n_dof: usize,
    /// Root-to-segment chain (inclusive) for every segment.
    chains: Vec<Vec<usize>>,
    markers_by_segment: Vec<Vec<usize>>,
    hash: String,
}

/// Scale parameters `β_s` and per-marker offsets `β_m`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleParams {
    pub scale: Vec<f64>,
    pub offsets: Vec<Vector3<f64>>,
}

impl ScaleParams {
    pub fn neutral(tree: &KinematicTree) -> Self {
        Self {
            scale: vec![0.0; tree.scale_names.len()],
            offsets: vec![Vector3::zeros(); tree.markers.len()],
        }
    }

    /// Packs into `[β_s..., offsets row-major...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.scale.clone();
        for o in &self.offsets {
            v.extend_from_slice(o.as_slice());
        }
        v
    }

    pub fn from_flat(tree: &KinematicTree, v: &[f64]) -> Result<Self, BodyModelError> {
        let ns = tree.scale_names.len();
        let expected = ns + 3 * tree.markers.len();
        if v.len() != expected {
            return Err(BodyModelError::Dimension {
                what: "scale parameter vector",
                expected,
                got: v.len(),
            });
        }
        Ok(Self {
            scale: v[..ns].to_vec(),
            offsets: v[ns..]
                .chunks_exact(3)
                .map(|c| Vector3::new(c[0], c[1], c[2]))
                .collect(),
        })
    }

    /// Clamps marker offsets to `±bound` per axis.
    pub fn clamp_offsets(&mut self, bound: f64) {
        for o in &mut self.offsets {
            for c in o.iter_mut() {
                *c = c.clamp(-bound, bound);
            }
        }
    }
}

/// Flat pose vector `θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseVector(pub Vec<f64>);

impl PoseVector {
    pub fn zeros(tree: &KinematicTree) -> Self {
        Self(vec![0.0; tree.dof_count()])
    }

    pub fn root_translation(&self) -> Vector3<f64> {
        Vector3::new(self.0[0], self.0[1], self.0[2])
    }

    pub fn root_rotation(&self) -> Vector3<f64> {
        Vector3::new(self.0[3], self.0[4], self.0[5])
    }

    /// True when every joint DOF lies within its configured limits.
    pub fn within_limits(&self, tree: &KinematicTree) -> bool {
        tree.segments.iter().all(|s| {
            s.dofs.iter().enumerate().all(|(k, d)| {
                let v = self.0[s.dof_start + k];
                v >= d.limits.0 && v <= d.limits.1
            })
        })
    }
}

/// Marker positions and segment orientations in the global frame.
#[derive(Debug, Clone)]
pub struct FkOutput {
    pub markers: Vec<Vector3<f64>>,
    pub orientations: Vec<RotationMatrix>,
}

impl KinematicTree {
    /// The shipped desk-scale lower-body model.
    pub fn default_lower_body() -> Self {
        Self::from_descriptor_str(DEFAULT_DESCRIPTOR).expect("shipped descriptor is valid")
    }

    pub fn default_descriptor_text() -> &'static str {
        DEFAULT_DESCRIPTOR
    }

    pub fn from_descriptor_file(path: &Path) -> Result<Self, BodyModelError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_descriptor_str(&text)
    }

    pub fn from_descriptor_str(text: &str) -> Result<Self, BodyModelError> {
        let file: DescriptorFile =
            toml::from_str(text).map_err(|e| BodyModelError::Parse(e.to_string()))?;
        if file.schema != DESCRIPTOR_SCHEMA {
            return Err(BodyModelError::Schema(file.schema));
        }
        let mut scale_index = HashMap::new();
        for (k, n) in file.scale_params.iter().enumerate() {
            if scale_index.insert(n.clone(), k).is_some() {
                return Err(BodyModelError::Duplicate {
                    kind: "scale parameter",
                    name: n.clone(),
                });
            }
        }

        let mut seg_index: HashMap<String, usize> = HashMap::new();
        let mut segments = Vec::with_capacity(file.segments.len());
        let mut scale_map = Vec::with_capacity(file.segments.len());
        let mut dof_names = HashSet::new();
        let mut joint_names = HashSet::new();
        let mut n_dof = ROOT_DOF;
        for (i, spec) in file.segments.iter().enumerate() {
            if seg_index.contains_key(&spec.name) {
                return Err(BodyModelError::Duplicate {
                    kind: "segment",
                    name: spec.name.clone(),
                });
            }
            if !joint_names.insert(spec.joint.clone()) {
                return Err(BodyModelError::Duplicate {
                    kind: "joint",
                    name: spec.joint.clone(),
                });
            }
            let parent = match &spec.parent {
                None => None,
                Some(p) if *p == spec.name => {
                    return Err(BodyModelError::SelfParent(spec.name.clone()))
                }
                Some(p) => match seg_index.get(p) {
                    Some(&j) => Some(j),
                    None => {
                        return Err(BodyModelError::BadParent {
                            segment: spec.name.clone(),
                            parent: p.clone(),
                        })
                    }
                },
            };
            let is_root = i == 0;
            if is_root != parent.is_none() || is_root != spec.free {
                return Err(BodyModelError::Root);
            }
            if is_root && !spec.dofs.is_empty() {
                return Err(BodyModelError::Root);
            }
            let mut dofs = Vec::with_capacity(spec.dofs.len());
            for d in &spec.dofs {
                if !dof_names.insert(d.name.clone()) {
                    return Err(BodyModelError::Duplicate {
                        kind: "dof",
                        name: d.name.clone(),
                    });
                }
                let axis = Vector3::from(d.axis);
                if axis.norm() < 1e-12 {
                    return Err(BodyModelError::ZeroAxis(d.name.clone()));
                }
                let limits = d
                    .limits
                    .map(|[lo, hi]| (lo.to_radians(), hi.to_radians()))
                    .unwrap_or((-std::f64::consts::PI, std::f64::consts::PI));
                dofs.push(Dof {
                    name: d.name.clone(),
                    axis: axis.normalize(),
                    limits,
                });
            }
            if !dofs.is_empty() && spec.primary >= dofs.len() {
                return Err(BodyModelError::Unknown {
                    kind: "primary dof index for joint",
                    name: spec.joint.clone(),
                });
            }
            let mut row = Vec::new();
            for s in &spec.scale {
                let k = *scale_index.get(s).ok_or_else(|| BodyModelError::Unknown {
                    kind: "scale parameter",
                    name: s.clone(),
                })?;
                row.push((k, 1.0));
            }
            scale_map.push(row);
            let dof_start = if is_root { 0 } else { n_dof };
            if !is_root {
                n_dof += dofs.len();
            }
            seg_index.insert(spec.name.clone(), i);
            segments.push(Segment {
                name: spec.name.clone(),
                parent,
                offset: Vector3::from(spec.offset),
                joint: spec.joint.clone(),
                dofs,
                primary: spec.primary,
                dof_start,
            });
        }
        if segments.is_empty() {
            return Err(BodyModelError::Root);
        }

        let mut markers = Vec::with_capacity(file.markers.len());
        let mut marker_names = HashSet::new();
        for m in &file.markers {
            if !marker_names.insert(m.name.clone()) {
                return Err(BodyModelError::Duplicate {
                    kind: "marker",
                    name: m.name.clone(),
                });
            }
            let segment = *seg_index
                .get(&m.segment)
                .ok_or_else(|| BodyModelError::Unknown {
                    kind: "segment",
                    name: m.segment.clone(),
                })?;
            markers.push(Marker {
                name: m.name.clone(),
                segment,
                local: Vector3::from(m.position),
            });
        }

        let mut chains: Vec<Vec<usize>> = Vec::with_capacity(segments.len());
        for (i, s) in segments.iter().enumerate() {
            let mut c = match s.parent {
                Some(p) => chains[p].clone(),
                None => Vec::new(),
            };
            c.push(i);
            chains.push(c);
        }
        let mut markers_by_segment = vec![Vec::new(); segments.len()];
        for (k, m) in markers.iter().enumerate() {
            markers_by_segment[m.segment].push(k);
        }
        let hash = hex::encode(Sha256::digest(text.as_bytes()));

        Ok(Self {
            name: file.name,
            segments,
            markers,
            scale_names: file.scale_params,
            scale_map,
            n_dof,
            chains,
            markers_by_segment,
            hash,
        })
    }

    pub fn dof_count(&self) -> usize {
        self.n_dof
    }

    pub fn segment_index(&self, name: &str) -> Option<usize> {
        self.segments.iter().position(|s| s.name == name)
    }

    /// Segments from the root down to `seg`, inclusive.
    pub fn chain(&self, seg: usize) -> &[usize] {
        &self.chains[seg]
    }

    pub fn markers_on(&self, seg: usize) -> &[usize] {
        &self.markers_by_segment[seg]
    }

    /// SHA-256 of the descriptor text.
    pub fn descriptor_hash(&self) -> &str {
        &self.hash
    }

    /// Pose index of a DOF by name.
    pub fn dof_index(&self, name: &str) -> Option<usize> {
        self.segments.iter().find_map(|s| {
            s.dofs
                .iter()
                .position(|d| d.name == name)
                .map(|k| s.dof_start + k)
        })
    }

    /// Pose index reported for a joint (its primary DOF) or a DOF name.
    pub fn joint_dof_index(&self, joint: &str) -> Option<usize> {
        self.segments
            .iter()
            .find(|s| s.joint == joint && !s.dofs.is_empty())
            .map(|s| s.dof_start + s.primary)
            .or_else(|| self.dof_index(joint))
    }

    /// Segment scale factors `exp(M β_s)`.
    pub fn segment_scales(&self, scale: &[f64]) -> Vec<f64> {
        self.scale_map
            .iter()
            .map(|row| row.iter().map(|&(k, w)| w * scale[k]).sum::<f64>().exp())
            .collect()
    }

    fn check_dims(&self, beta: &ScaleParams, theta: &[f64]) -> Result<(), BodyModelError> {
        if theta.len() != self.n_dof {
            return Err(BodyModelError::Dimension {
                what: "pose vector",
                expected: self.n_dof,
                got: theta.len(),
            });
        }
        if beta.scale.len() != self.scale_names.len() {
            return Err(BodyModelError::Dimension {
                what: "scale vector",
                expected: self.scale_names.len(),
                got: beta.scale.len(),
            });
        }
        if beta.offsets.len() != self.markers.len() {
            return Err(BodyModelError::Dimension {
                what: "marker offsets",
                expected: self.markers.len(),
                got: beta.offsets.len(),
            });
        }
        if !theta.iter().all(|v| v.is_finite()) {
            return Err(BodyModelError::NonFinite("pose vector"));
        }
        if !beta.scale.iter().all(|v| v.is_finite())
            || !beta.offsets.iter().all(|o| o.iter().all(|v| v.is_finite()))
        {
            return Err(BodyModelError::NonFinite("scale parameters"));
        }
        Ok(())
    }
}

/// Forward pass state reused by the adjoint computations.
#[derive(Debug, Clone)]
pub struct FkCache {
    pub rot: Vec<RotationMatrix>,
    pub pos: Vec<Vector3<f64>>,
    pub scale: Vec<f64>,
    /// World-frame axis of every pose entry; root translation entries hold
    /// the unit basis vectors, root rotation entries the columns of `J_l(r)`.
    pub axis: Vec<Vector3<f64>>,
    pub markers: Vec<Vector3<f64>>,
    pub root_jl: Matrix3<f64>,
    /// `∂J_l/∂r_k`.
    pub root_jl_partials: [Matrix3<f64>; 3],
}

impl FkCache {
    /// Unchecked forward pass; callers validate dimensions.
    pub fn compute(tree: &KinematicTree, beta: &ScaleParams, theta: &[f64]) -> Self {
        let n = tree.segments.len();
        let scale = tree.segment_scales(&beta.scale);
        let mut rot = Vec::with_capacity(n);
        let mut pos = Vec::with_capacity(n);
        let mut axis = vec![Vector3::zeros(); tree.n_dof];

        let r = [theta[3], theta[4], theta[5]];
        let rd = Dual::<3>::vars(r, 0);
        let root_rot = crate::dual::re33(&so3::exp_map_g(r));
        let jl = so3::left_jacobian_g(rd);
        let root_jl = crate::dual::re33(&jl);
        let root_jl_partials = [
            crate::dual::lane33(&jl, 0),
            crate::dual::lane33(&jl, 1),
            crate::dual::lane33(&jl, 2),
        ];
        for k in 0..3 {
            axis[k] = Vector3::ith(k, 1.0);
            axis[3 + k] = root_jl.column(k).into_owned();
        }

        for seg in &tree.segments {
            let (mut r_i, p_i) = match seg.parent {
                None => (
                    root_rot,
                    Vector3::new(theta[0], theta[1], theta[2]) + scale[0] * seg.offset,
                ),
                Some(p) => (rot[p], pos[p] + rot[p] * (scale[p] * seg.offset)),
            };
            for (k, d) in seg.dofs.iter().enumerate() {
                let idx = seg.dof_start + k;
                axis[idx] = r_i * d.axis;
                r_i *= so3::axis_angle(&d.axis, theta[idx]);
            }
            rot.push(r_i);
            pos.push(p_i);
        }

        let markers = tree
            .markers
            .iter()
            .zip(&beta.offsets)
            .map(|(m, o)| {
                let s = m.segment;
                pos[s] + rot[s] * (scale[s] * m.local + o)
            })
            .collect();

        Self {
            rot,
            pos,
            scale,
            axis,
            markers,
            root_jl,
            root_jl_partials,
        }
    }

    /// World-frame angular velocity of a segment given pose rates.
    pub fn world_rate(&self, tree: &KinematicTree, seg: usize, theta_dot: &[f64]) -> Vector3<f64> {
        let mut w = self.root_jl * Vector3::new(theta_dot[3], theta_dot[4], theta_dot[5]);
        for &c in &tree.chain(seg)[1..] {
            let s = &tree.segments[c];
            for k in 0..s.dofs.len() {
                let idx = s.dof_start + k;
                w += self.axis[idx] * theta_dot[idx];
            }
        }
        w
    }

    /// Body-frame angular velocity `vee(R⁻¹Ṙ)` of a segment.
    pub fn body_rate(&self, tree: &KinematicTree, seg: usize, theta_dot: &[f64]) -> Vector3<f64> {
        self.rot[seg].transpose() * self.world_rate(tree, seg, theta_dot)
    }

    /// Adjoint of the marker and orientation outputs.
    ///
    /// `marker_grads[m] = ∂L/∂x_m`; `orient_grads` lists `(segment, ∂L/∂R)`.
    /// Gradients are accumulated into `g_theta` and, when given, into the
    /// flat scale-parameter gradient `g_beta` (same layout as
    /// [`ScaleParams::to_flat`]).
    pub fn backprop(
        &self,
        tree: &KinematicTree,
        marker_grads: Option<&[Vector3<f64>]>,
        orient_grads: &[(usize, Matrix3<f64>)],
        g_theta: &mut [f64],
        g_beta: Option<&mut [f64]>,
    ) {
        let n = tree.segments.len();
        let mut force = vec![Vector3::zeros(); n];
        let mut moment = vec![Vector3::zeros(); n];
        let mut g_scale = vec![0.0; n];
        let mut g_offsets = vec![Vector3::zeros(); tree.markers.len()];

        if let Some(mg) = marker_grads {
            for (k, m) in tree.markers.iter().enumerate() {
                let g = mg[k];
                let s = m.segment;
                force[s] += g;
                moment[s] += self.markers[k].cross(&g);
                let rg = self.rot[s].transpose() * g;
                g_scale[s] += rg.dot(&m.local);
                g_offsets[k] = rg;
            }
        }
        for (s, gr) in orient_grads {
            let m = self.rot[*s] * gr.transpose();
            moment[*s] += Vector3::new(
                m[(1, 2)] - m[(2, 1)],
                m[(2, 0)] - m[(0, 2)],
                m[(0, 1)] - m[(1, 0)],
            );
        }

        for i in (0..n).rev() {
            let seg = &tree.segments[i];
            let torque = moment[i] - self.pos[i].cross(&force[i]);
            match seg.parent {
                Some(p) => {
                    for k in 0..seg.dofs.len() {
                        let idx = seg.dof_start + k;
                        g_theta[idx] += self.axis[idx].dot(&torque);
                    }
                    g_scale[p] += force[i].dot(&(self.rot[p] * seg.offset));
                    let (f, m) = (force[i], moment[i]);
                    force[p] += f;
                    moment[p] += m;
                }
                None => {
                    for k in 0..3 {
                        g_theta[k] += force[i][k];
                    }
                    let gr = self.root_jl.transpose() * torque;
                    for k in 0..3 {
                        g_theta[3 + k] += gr[k];
                    }
                    g_scale[i] += force[i].dot(&seg.offset);
                }
            }
        }

        if let Some(gb) = g_beta {
            for (i, row) in tree.scale_map.iter().enumerate() {
                let gs = g_scale[i] * self.scale[i];
                for &(k, w) in row {
                    gb[k] += w * gs;
                }
            }
            let ns = tree.scale_names.len();
            for (k, g) in g_offsets.iter().enumerate() {
                for c in 0..3 {
                    gb[ns + 3 * k + c] += g[c];
                }
            }
        }
    }

    /// Adjoint of [`FkCache::body_rate`] with respect to pose and pose rate.
    pub fn body_rate_backprop(
        &self,
        tree: &KinematicTree,
        seg: usize,
        theta_dot: &[f64],
        g_omega: &Vector3<f64>,
        g_theta: &mut [f64],
        g_theta_dot: &mut [f64],
    ) {
        // ω_b = Rᵀ a with a = J_l ṙ + Σ w_d θ̇_d. With u = R g:
        //   ∂/∂θ̇_d = u·w_d
        //   ∂/∂θ_d  = u·(a_≤d × w_d)            (joint DOFs)
        //   ∂/∂r_k  = u·(∂J_l/∂r_k ṙ − v_k × J_l ṙ)
        let u = self.rot[seg] * g_omega;
        let rdot = Vector3::new(theta_dot[3], theta_dot[4], theta_dot[5]);
        let root_w = self.root_jl * rdot;
        let ju = self.root_jl.transpose() * u;
        for k in 0..3 {
            g_theta_dot[3 + k] += ju[k];
            let v = self.root_jl.column(k);
            let d = self.root_jl_partials[k] * rdot - v.cross(&root_w);
            g_theta[3 + k] += u.dot(&d);
        }
        let mut acc = root_w;
        for &c in &tree.chain(seg)[1..] {
            let s = &tree.segments[c];
            for k in 0..s.dofs.len() {
                let idx = s.dof_start + k;
                let w = self.axis[idx];
                acc += w * theta_dot[idx];
                g_theta_dot[idx] += u.dot(&w);
                g_theta[idx] += u.dot(&acc.cross(&w));
            }
        }
    }
}

/// Marker positions and segment orientations for a pose.
pub fn forward_kinematics(
    tree: &KinematicTree,
    beta: &ScaleParams,
    theta: &PoseVector,
) -> Result<FkOutput, BodyModelError> {
    tree.check_dims(beta, &theta.0)?;
    let c = FkCache::compute(tree, beta, &theta.0);
    Ok(FkOutput {
        markers: c.markers,
        orientations: c.rot,
    })
}

/// Per-segment orientation derivatives `Ṙ_nb = [ω_world]× R_nb`.
pub fn fk_time_derivative(
    tree: &KinematicTree,
    beta: &ScaleParams,
    theta: &PoseVector,
    theta_dot: &PoseVector,
) -> Result<Vec<Matrix3<f64>>, BodyModelError> {
    tree.check_dims(beta, &theta.0)?;
    if theta_dot.0.len() != theta.0.len() {
        return Err(BodyModelError::Dimension {
            what: "pose rate vector",
            expected: theta.0.len(),
            got: theta_dot.0.len(),
        });
    }
    if !theta_dot.0.iter().all(|v| v.is_finite()) {
        return Err(BodyModelError::NonFinite("pose rate vector"));
    }
    let c = FkCache::compute(tree, beta, &theta.0);
    Ok((0..tree.segments.len())
        .map(|s| so3::hat(&c.world_rate(tree, s, &theta_dot.0)) * c.rot[s])
        .collect())
}

/// Signed angle in degrees of a joint's primary DOF (or a named DOF).
pub fn extract_joint_angle(
    tree: &KinematicTree,
    theta: &PoseVector,
    joint: &str,
) -> Result<f64, BodyModelError> {
    let idx = tree
        .joint_dof_index(joint)
        .ok_or_else(|| BodyModelError::Unknown {
            kind: "joint",
            name: joint.to_string(),
        })?;
    Ok(theta.0[idx].to_degrees())
}

/// Generic scalar helper used by tests and the simulator: root orientation
/// from exponential coordinates.
pub fn root_orientation<S: Real>(r: [S; 3]) -> crate::dual::M3<S> {
    so3::exp_map_g(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn tree() -> KinematicTree {
        KinematicTree::default_lower_body()
    }

    #[test]
    fn default_descriptor_counts() {
        let t = tree();
        assert_eq!(t.segments.len(), 11);
        assert_eq!(t.dof_count(), 20);
        assert_eq!(t.markers.len(), 16);
        assert_eq!(t.scale_names.len(), 8);
    }

    #[test]
    fn self_parent_rejected() {
        let text = r#"
schema = "kinefuse.body-model/1"
name = "bad"
[[segments]]
name = "root"
joint = "root"
free = true
[[segments]]
name = "a"
parent = "a"
joint = "j"
"#;
        assert!(matches!(
            KinematicTree::from_descriptor_str(text),
            Err(BodyModelError::SelfParent(_))
        ));
    }

    #[test]
    fn forward_reference_rejected_as_cycle() {
        let text = r#"
schema = "kinefuse.body-model/1"
name = "bad"
[[segments]]
name = "root"
joint = "root"
free = true
[[segments]]
name = "a"
parent = "b"
joint = "ja"
[[segments]]
name = "b"
parent = "a"
joint = "jb"
"#;
        assert!(matches!(
            KinematicTree::from_descriptor_str(text),
            Err(BodyModelError::BadParent { .. })
        ));
    }

    #[test]
    fn duplicate_marker_rejected() {
        let text = r#"
schema = "kinefuse.body-model/1"
name = "bad"
[[segments]]
name = "root"
joint = "root"
free = true
[[markers]]
name = "m"
segment = "root"
position = [0.0, 0.0, 0.0]
[[markers]]
name = "m"
segment = "root"
position = [0.1, 0.0, 0.0]
"#;
        assert!(matches!(
            KinematicTree::from_descriptor_str(text),
            Err(BodyModelError::Duplicate { kind: "marker", .. })
        ));
    }

    #[test]
    fn zero_marker_tree_is_valid() {
        let text = r#"
schema = "kinefuse.body-model/1"
name = "bare"
scale_params = ["overall"]
[[segments]]
name = "root"
joint = "root"
free = true
scale = ["overall"]
[[segments]]
name = "arm"
parent = "root"
offset = [0.0, 0.3, 0.0]
joint = "shoulder"
dofs = [{ name = "flex", axis = [1.0, 0.0, 0.0] }]
"#;
        let t = KinematicTree::from_descriptor_str(text).unwrap();
        assert_eq!(t.dof_count(), 7);
        let out = forward_kinematics(&t, &ScaleParams::neutral(&t), &PoseVector::zeros(&t)).unwrap();
        assert!(out.markers.is_empty());
        assert_eq!(out.orientations.len(), 2);
    }

    #[test]
    fn rest_pose_markers_are_offset_sums() {
        let t = tree();
        let out = forward_kinematics(&t, &ScaleParams::neutral(&t), &PoseVector::zeros(&t)).unwrap();
        for (k, m) in t.markers.iter().enumerate() {
            let mut p = m.local;
            for &c in t.chain(m.segment) {
                p += t.segments[c].offset;
            }
            assert!((out.markers[k] - p).norm() < 1e-15, "{}", m.name);
        }
    }

    #[test]
    fn knee_flexion_rotates_shank_only() {
        let t = tree();
        let beta = ScaleParams::neutral(&t);
        let rest = forward_kinematics(&t, &beta, &PoseVector::zeros(&t)).unwrap();
        let mut theta = PoseVector::zeros(&t);
        let knee = t.dof_index("knee_angle_r").unwrap();
        theta.0[knee] = FRAC_PI_2;
        let out = forward_kinematics(&t, &beta, &theta).unwrap();
        let thigh = t.segment_index("thigh_r").unwrap();
        let shank = t.segment_index("shank_r").unwrap();
        let rel = out.orientations[thigh].transpose() * out.orientations[shank];
        let want = so3::axis_angle(&Vector3::new(-1.0, 0.0, 0.0), FRAC_PI_2);
        assert!(so3::geodesic_angle(&rel, &want) < 1e-12);
        for &m in t.markers_on(thigh) {
            assert!((out.markers[m] - rest.markers[m]).norm() < 1e-15);
        }
        // Flexed knee sends the ankle backward.
        let ankle = t.markers.iter().position(|m| m.name == "ankle_r").unwrap();
        assert!(out.markers[ankle].z < rest.markers[ankle].z - 0.3);
    }

    #[test]
    fn doubling_overall_scale_doubles_distances() {
        let t = tree();
        let mut beta = ScaleParams::neutral(&t);
        let rest = forward_kinematics(&t, &beta, &PoseVector::zeros(&t)).unwrap();
        beta.scale[0] = 2f64.ln();
        let big = forward_kinematics(&t, &beta, &PoseVector::zeros(&t)).unwrap();
        for a in 0..t.markers.len() {
            for b in 0..a {
                let d0 = (rest.markers[a] - rest.markers[b]).norm();
                let d1 = (big.markers[a] - big.markers[b]).norm();
                assert!((d1 - 2.0 * d0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn extract_joint_angle_roundtrip() {
        let t = tree();
        let mut theta = PoseVector::zeros(&t);
        assert_eq!(extract_joint_angle(&t, &theta, "knee_r").unwrap(), 0.0);
        theta.0[t.dof_index("knee_angle_r").unwrap()] = FRAC_PI_2;
        assert!((extract_joint_angle(&t, &theta, "knee_r").unwrap() - 90.0).abs() < 1e-12);
        theta.0[t.dof_index("hip_flexion_l").unwrap()] = 37.5f64.to_radians();
        assert!((extract_joint_angle(&t, &theta, "hip_l").unwrap() - 37.5).abs() < 1e-9);
        assert!(matches!(
            extract_joint_angle(&t, &theta, "elbow_r"),
            Err(BodyModelError::Unknown { .. })
        ));
    }

    #[test]
    fn dimension_and_finiteness_errors() {
        let t = tree();
        let beta = ScaleParams::neutral(&t);
        assert!(forward_kinematics(&t, &beta, &PoseVector(vec![0.0; 3])).is_err());
        let mut theta = PoseVector::zeros(&t);
        theta.0[7] = f64::NAN;
        assert!(matches!(
            forward_kinematics(&t, &beta, &theta),
            Err(BodyModelError::NonFinite(_))
        ));
    }

    #[test]
    fn zero_rates_give_zero_derivatives() {
        let t = tree();
        let beta = ScaleParams::neutral(&t);
        let mut theta = PoseVector::zeros(&t);
        theta.0[10] = 0.4;
        let d = fk_time_derivative(&t, &beta, &theta, &PoseVector::zeros(&t)).unwrap();
        assert!(d.iter().all(|m| m.norm() == 0.0));
    }

    #[test]
    fn knee_rate_gives_relative_rate_about_knee_axis() {
        let t = tree();
        let beta = ScaleParams::neutral(&t);
        let mut theta = PoseVector::zeros(&t);
        theta.0[t.dof_index("hip_flexion_r").unwrap()] = 0.3;
        theta.0[t.dof_index("knee_angle_r").unwrap()] = 0.5;
        let mut rate = PoseVector::zeros(&t);
        let w0 = 2.5;
        rate.0[t.dof_index("knee_angle_r").unwrap()] = w0;
        let c = FkCache::compute(&t, &beta, &theta.0);
        let shank = t.segment_index("shank_r").unwrap();
        let thigh = t.segment_index("thigh_r").unwrap();
        let rel = c.body_rate(&t, shank, &rate.0) - c.rot[shank].transpose() * c.rot[thigh] * c.body_rate(&t, thigh, &rate.0);
        assert!((rel - Vector3::new(-w0, 0.0, 0.0)).norm() < 1e-12);
    }
}
