//! Parametric head model: a template mesh, identity and expression blendshape
//! directions, and linear blend skinning over a small kinematic tree
//! (global root, neck, jaw, two eyes), with posing and unposing.
//!
//! Skinning blends per-joint rigid transforms as deltas from the identity, so
//! the identity pose reproduces input vertices bit-exactly even though stored
//! skin-weight rows only sum to 1 within tolerance. Geometry runs in f64.

use std::io::{BufReader, Read};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Result, VocaError};
use crate::io_util;
use crate::mat::Mat;
use crate::mesh::{Mesh, Topology};
use crate::scalar::{sc, Scalar};

pub const JOINT_NAMES: [&str; 5] = ["global", "neck", "jaw", "left_eye", "right_eye"];
pub const JOINT_PARENTS: [i32; 5] = [-1, 0, 1, 1, 1];

const WEIGHT_ROW_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Joint {
    pub name: String,
    /// None for the root; otherwise an earlier joint's index.
    pub parent: Option<usize>,
}

/// Template geometry plus blendshape bases and skinning data.
#[derive(Debug, Clone)]
pub struct HeadModel<S> {
    pub template: Mat<S>,
    /// Per-direction standard deviations for the identity basis.
    pub shape_sds: Vec<S>,
    pub shape_basis: Vec<Mat<S>>,
    pub expr_basis: Vec<Mat<S>>,
    pub joints: Vec<Joint>,
    /// K×N weights locating joints from zero-pose vertices.
    pub joint_regressor: Mat<S>,
    /// N×K nonnegative weights, rows sum to 1.
    pub skin_weights: Mat<S>,
    pub topology: Topology,
}

impl<S: Scalar> HeadModel<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        template: Mat<S>,
        shape_sds: Vec<S>,
        shape_basis: Vec<Mat<S>>,
        expr_basis: Vec<Mat<S>>,
        joints: Vec<Joint>,
        joint_regressor: Mat<S>,
        skin_weights: Mat<S>,
        topology: Topology,
    ) -> Result<Self> {
        let n = template.rows();
        if n == 0 || template.cols() != 3 {
            return Err(VocaError::Data(format!(
                "template must be Nx3 with N >= 1, got {}x{}",
                n,
                template.cols()
            )));
        }
        if shape_sds.len() != shape_basis.len() {
            return Err(VocaError::Data(format!(
                "{} shape deviations for {} shape directions",
                shape_sds.len(),
                shape_basis.len()
            )));
        }
        for (i, b) in shape_basis.iter().chain(expr_basis.iter()).enumerate() {
            if b.rows() != n || b.cols() != 3 {
                return Err(VocaError::Data(format!(
                    "blendshape direction {} is {}x{}, expected {}x3",
                    i,
                    b.rows(),
                    b.cols(),
                    n
                )));
            }
        }
        let k = joints.len();
        if k == 0 {
            return Err(VocaError::Data("model needs at least one joint".into()));
        }
        for (i, j) in joints.iter().enumerate() {
            match (i, j.parent) {
                (0, None) => {}
                (0, Some(_)) => return Err(VocaError::Data("joint 0 must be the root".into())),
                (_, None) => return Err(VocaError::Data(format!("joint {} is a second root", i))),
                (_, Some(p)) if p >= i => {
                    return Err(VocaError::Data(format!("joint {} has parent {} out of tree order", i, p)))
                }
                _ => {}
            }
        }
        if joint_regressor.rows() != k || joint_regressor.cols() != n {
            return Err(VocaError::Data(format!(
                "joint regressor is {}x{}, expected {}x{}",
                joint_regressor.rows(),
                joint_regressor.cols(),
                k,
                n
            )));
        }
        if skin_weights.rows() != n || skin_weights.cols() != k {
            return Err(VocaError::Data(format!(
                "skin weights are {}x{}, expected {}x{}",
                skin_weights.rows(),
                skin_weights.cols(),
                n,
                k
            )));
        }
        for r in 0..n {
            let row = skin_weights.row(r);
            if row.iter().any(|w| w.to_f64_c() < 0.0) {
                return Err(VocaError::Data(format!("negative skin weight on vertex {}", r)));
            }
            let sum: f64 = row.iter().map(|w| w.to_f64_c()).sum();
            if (sum - 1.0).abs() > WEIGHT_ROW_SUM_TOL {
                return Err(VocaError::Data(format!(
                    "skin weights of vertex {} sum to {}, expected 1",
                    r, sum
                )));
            }
        }
        for tri in topology.iter() {
            if tri.iter().any(|&i| i as usize >= n) {
                return Err(VocaError::Data(format!("triangle {:?} references a vertex outside 0..{}", tri, n)));
            }
        }
        Ok(HeadModel {
            template,
            shape_sds,
            shape_basis,
            expr_basis,
            joints,
            joint_regressor,
            skin_weights,
            topology,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.template.rows()
    }

    pub fn n_shape(&self) -> usize {
        self.shape_basis.len()
    }

    pub fn n_expr(&self) -> usize {
        self.expr_basis.len()
    }

    pub fn n_joints(&self) -> usize {
        self.joints.len()
    }
}

/// Axis-angle rotations per joint (radians) plus a world translation.
/// Entry 0 drives the global root joint; the translation is applied after
/// skinning. Unposing needs the blended per-vertex transforms invertible,
/// which every plausible head pose satisfies.
#[derive(Debug, Clone)]
pub struct Pose<S> {
    pub theta: Vec<[S; 3]>,
    pub translation: [S; 3],
}

impl<S: Scalar> Pose<S> {
    pub fn identity(n_joints: usize) -> Self {
        Pose {
            theta: vec![[S::zero(); 3]; n_joints],
            translation: [S::zero(); 3],
        }
    }

    fn validate(&self, n_joints: usize) -> Result<()> {
        if self.theta.len() != n_joints {
            return Err(VocaError::Parameter(format!(
                "pose has {} rotations for {} joints",
                self.theta.len(),
                n_joints
            )));
        }
        let finite = self
            .theta
            .iter()
            .flatten()
            .chain(self.translation.iter())
            .all(|v| v.to_f64_c().is_finite());
        if !finite {
            return Err(VocaError::Parameter("pose has non-finite components".into()));
        }
        Ok(())
    }
}

type Mat3 = [[f64; 3]; 3];

const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn matvec3(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn matmul3(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn inv3(m: &Mat3) -> Result<Mat3> {
    let d = det3(m);
    if d.abs() < 1e-12 {
        return Err(VocaError::Numeric(format!("singular blended transform (det {})", d)));
    }
    let inv_d = 1.0 / d;
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (a, b, c, e) = (
                m[(j + 1) % 3][(i + 1) % 3],
                m[(j + 2) % 3][(i + 2) % 3],
                m[(j + 1) % 3][(i + 2) % 3],
                m[(j + 2) % 3][(i + 1) % 3],
            );
            out[i][j] = (a * b - c * e) * inv_d;
        }
    }
    Ok(out)
}

/// Axis-angle to rotation matrix via the exponential map, with a Taylor branch
/// below 1e-8 rad.
fn rodrigues(aa: [f64; 3]) -> Mat3 {
    let theta_sq = aa[0] * aa[0] + aa[1] * aa[1] + aa[2] * aa[2];
    let theta = theta_sq.sqrt();
    let (a, b) = if theta < 1e-8 {
        (1.0 - theta_sq / 6.0, 0.5 - theta_sq / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta_sq)
    };
    let k = [
        [0.0, -aa[2], aa[1]],
        [aa[2], 0.0, -aa[0]],
        [-aa[1], aa[0], 0.0],
    ];
    let k2 = matmul3(&k, &k);
    let mut r = IDENTITY3;
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] += a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

/// Rigid transform y = r*x + t.
#[derive(Clone, Copy)]
struct Affine {
    r: Mat3,
    t: [f64; 3],
}

impl Affine {
    fn apply(&self, v: [f64; 3]) -> [f64; 3] {
        let rv = matvec3(&self.r, v);
        [rv[0] + self.t[0], rv[1] + self.t[1], rv[2] + self.t[2]]
    }

    fn compose(&self, inner: &Affine) -> Affine {
        let rt = matvec3(&self.r, inner.t);
        Affine {
            r: matmul3(&self.r, &inner.r),
            t: [rt[0] + self.t[0], rt[1] + self.t[1], rt[2] + self.t[2]],
        }
    }
}

fn regress_joints<S: Scalar>(regressor: &Mat<S>, verts: &[[f64; 3]]) -> Vec<[f64; 3]> {
    (0..regressor.rows())
        .map(|k| {
            let row = regressor.row(k);
            let mut j = [0.0; 3];
            for (w, v) in row.iter().zip(verts) {
                let w = w.to_f64_c();
                j[0] += w * v[0];
                j[1] += w * v[1];
                j[2] += w * v[2];
            }
            j
        })
        .collect()
}

/// World transforms per joint: each rotates about its regressed center and
/// composes onto its parent, the root first.
fn world_transforms<S: Scalar>(joints: &[Joint], theta: &[[S; 3]], centers: &[[f64; 3]]) -> Vec<Affine> {
    let mut world: Vec<Affine> = Vec::with_capacity(joints.len());
    for (k, joint) in joints.iter().enumerate() {
        let aa = [theta[k][0].to_f64_c(), theta[k][1].to_f64_c(), theta[k][2].to_f64_c()];
        let r = rodrigues(aa);
        let c = centers[k];
        let rc = matvec3(&r, c);
        let local = Affine {
            r,
            t: [c[0] - rc[0], c[1] - rc[1], c[2] - rc[2]],
        };
        let w = match joint.parent {
            None => local,
            Some(p) => world[p].compose(&local),
        };
        world.push(w);
    }
    world
}

fn verts_to_f64<S: Scalar>(verts: &Mat<S>) -> Vec<[f64; 3]> {
    (0..verts.rows())
        .map(|r| {
            let row = verts.row(r);
            [row[0].to_f64_c(), row[1].to_f64_c(), row[2].to_f64_c()]
        })
        .collect()
}

/// Per-vertex blended transform, accumulated as deltas from the identity so
/// zero rotations blend to the exact identity.
fn blended_affine<S: Scalar>(weights: &[S], transforms: &[Affine]) -> Affine {
    let mut r = IDENTITY3;
    let mut t = [0.0; 3];
    for (w, a) in weights.iter().zip(transforms) {
        let w = w.to_f64_c();
        if w == 0.0 {
            continue;
        }
        for i in 0..3 {
            for j in 0..3 {
                let delta = a.r[i][j] - if i == j { 1.0 } else { 0.0 };
                r[i][j] += w * delta;
            }
            t[i] += w * a.t[i];
        }
    }
    Affine { r, t }
}

/// Produce Σ_s coeff_s * scale_s * basis_s in the storage scalar type, so that
/// additivity over disjoint coefficient supports is bit-exact.
fn weighted_basis_sum<S: Scalar>(
    n: usize,
    coeffs: &[S],
    scales: Option<&[S]>,
    basis: &[Mat<S>],
    what: &str,
) -> Result<Mat<S>> {
    if coeffs.len() != basis.len() {
        return Err(VocaError::Parameter(format!(
            "{} coefficients: got {}, model has {}",
            what,
            coeffs.len(),
            basis.len()
        )));
    }
    let mut out = Mat::zeros(n, 3);
    for (s, b) in basis.iter().enumerate() {
        let factor = match scales {
            Some(sds) => coeffs[s] * sds[s],
            None => coeffs[s],
        };
        if factor == S::zero() {
            continue;
        }
        let dst = out.as_mut_slice();
        for (d, &v) in dst.iter_mut().zip(b.as_slice()) {
            *d = *d + factor * v;
        }
    }
    Ok(out)
}

/// Identity offsets for coefficients in standard-deviation units.
pub fn shape_offsets<S: Scalar>(model: &HeadModel<S>, beta: &[S]) -> Result<Mat<S>> {
    weighted_basis_sum(model.n_vertices(), beta, Some(&model.shape_sds), &model.shape_basis, "identity")
}

/// Expression offsets, linear in the coefficients.
pub fn expression_offsets<S: Scalar>(model: &HeadModel<S>, psi: &[S]) -> Result<Mat<S>> {
    weighted_basis_sum(model.n_vertices(), psi, None, &model.expr_basis, "expression")
}

/// Skin zero-pose vertices: joints from the regressor, world transforms along
/// the tree, per-vertex weighted blend, then the world translation.
pub fn pose_mesh<S: Scalar>(model: &HeadModel<S>, verts_zero_pose: &Mat<S>, pose: &Pose<S>) -> Result<Mesh<S>> {
    pose.validate(model.n_joints())?;
    if verts_zero_pose.rows() != model.n_vertices() || verts_zero_pose.cols() != 3 {
        return Err(VocaError::Parameter(format!(
            "vertices are {}x{}, model has {} vertices",
            verts_zero_pose.rows(),
            verts_zero_pose.cols(),
            model.n_vertices()
        )));
    }
    let verts = verts_to_f64(verts_zero_pose);
    let centers = regress_joints(&model.joint_regressor, &verts);
    let world = world_transforms(&model.joints, &pose.theta, &centers);
    let t = [
        pose.translation[0].to_f64_c(),
        pose.translation[1].to_f64_c(),
        pose.translation[2].to_f64_c(),
    ];

    let mut out = Mat::zeros(model.n_vertices(), 3);
    for (i, v) in verts.iter().enumerate() {
        let blended = blended_affine(model.skin_weights.row(i), &world);
        let p = blended.apply(*v);
        let row = out.row_mut(i);
        row[0] = sc(p[0] + t[0]);
        row[1] = sc(p[1] + t[1]);
        row[2] = sc(p[2] + t[2]);
    }
    Mesh::new(out, model.topology.clone())
}

/// Largest acceptable self-consistency error of the solved joint centers,
/// in meters. Valid rigs land many orders of magnitude below this.
const UNPOSE_RESIDUAL_TOL: f64 = 1e-9;

/// Invert pose_mesh for a mesh produced under the given pose.
///
/// Joint centers depend on the unknown zero-pose vertices, but rotations
/// depend only on the pose: the map centers -> solved vertices ->
/// re-regressed centers is affine in the centers. Its fixed point is the
/// solution of one small linear system, valid for any pose whose blended
/// transforms stay invertible.
pub fn unpose<S: Scalar>(model: &HeadModel<S>, mesh: &Mesh<S>, pose: &Pose<S>) -> Result<Mesh<S>> {
    pose.validate(model.n_joints())?;
    if mesh.n_vertices() != model.n_vertices() {
        return Err(VocaError::Parameter(format!(
            "mesh has {} vertices, model has {}",
            mesh.n_vertices(),
            model.n_vertices()
        )));
    }
    let t = [
        pose.translation[0].to_f64_c(),
        pose.translation[1].to_f64_c(),
        pose.translation[2].to_f64_c(),
    ];
    let posed: Vec<[f64; 3]> = verts_to_f64(&mesh.vertices)
        .into_iter()
        .map(|v| [v[0] - t[0], v[1] - t[1], v[2] - t[2]])
        .collect();

    let n = model.n_vertices();
    let dim = 3 * model.n_joints();
    // One evaluation of the center map: centers -> zero-pose vertex solve ->
    // re-regressed centers.
    let eval = |stacked: &[f64]| -> Result<(Vec<f64>, Vec<[f64; 3]>)> {
        let centers: Vec<[f64; 3]> =
            stacked.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let world = world_transforms(&model.joints, &pose.theta, &centers);
        let mut solved = vec![[0.0f64; 3]; n];
        for (i, y) in posed.iter().enumerate() {
            let blended = blended_affine(model.skin_weights.row(i), &world);
            let r_inv = inv3(&blended.r)?;
            let shifted = [y[0] - blended.t[0], y[1] - blended.t[1], y[2] - blended.t[2]];
            solved[i] = matvec3(&r_inv, shifted);
        }
        let next = regress_joints(&model.joint_regressor, &solved);
        Ok((next.into_iter().flatten().collect(), solved))
    };

    // map(c) = A*c + b; recover b at zero and A column by column, then solve
    // (I - A) c = b directly.
    let (b, _) = eval(&vec![0.0; dim])?;
    let mut system = Mat::<f64>::zeros(dim, dim);
    let mut unit = vec![0.0f64; dim];
    for j in 0..dim {
        unit[j] = 1.0;
        let (col, _) = eval(&unit)?;
        unit[j] = 0.0;
        for i in 0..dim {
            let a_ij = col[i] - b[i];
            system[(i, j)] = if i == j { 1.0 - a_ij } else { -a_ij };
        }
    }
    let centers = solve_dense(system, b)?;
    let (check, solved) = eval(&centers)?;
    let residual = centers
        .iter()
        .zip(&check)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    if !residual.is_finite() || residual > UNPOSE_RESIDUAL_TOL {
        return Err(VocaError::Numeric(format!(
            "unposing is ill-conditioned for this pose (joint-center residual {:.3e})",
            residual
        )));
    }

    let mut out = Mat::zeros(n, 3);
    for (i, v) in solved.iter().enumerate() {
        let row = out.row_mut(i);
        row[0] = sc(v[0]);
        row[1] = sc(v[1]);
        row[2] = sc(v[2]);
    }
    Mesh::new(out, model.topology.clone())
}

/// Gaussian elimination with partial pivoting for the tiny center system.
fn solve_dense(mut a: Mat<f64>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if a[(r, col)].abs() > a[(piv, col)].abs() {
                piv = r;
            }
        }
        if a[(piv, col)].abs() < 1e-12 {
            return Err(VocaError::Numeric(
                "singular joint-center system; the pose cannot be unposed".into(),
            ));
        }
        if piv != col {
            for c in 0..n {
                let tmp = a[(col, c)];
                a[(col, c)] = a[(piv, c)];
                a[(piv, c)] = tmp;
            }
            b.swap(col, piv);
        }
        for r in col + 1..n {
            let f = a[(r, col)] / a[(col, col)];
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[(r, c)] -= f * a[(col, c)];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0f64; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for c in row + 1..n {
            acc -= a[(row, c)] * x[c];
        }
        x[row] = acc / a[(row, row)];
    }
    Ok(x)
}

/// Template plus blendshape offsets plus a displacement field, skinned.
pub fn evaluate<S: Scalar>(
    model: &HeadModel<S>,
    beta: &[S],
    psi: &[S],
    displacement: &Mat<S>,
    pose: &Pose<S>,
) -> Result<Mesh<S>> {
    if displacement.rows() != model.n_vertices() || displacement.cols() != 3 {
        return Err(VocaError::Parameter(format!(
            "displacement is {}x{}, expected {}x3",
            displacement.rows(),
            displacement.cols(),
            model.n_vertices()
        )));
    }
    let shape = shape_offsets(model, beta)?;
    let expr = expression_offsets(model, psi)?;
    let verts = model.template.add(&shape)?.add(&expr)?.add(displacement)?;
    pose_mesh(model, &verts, pose)
}

const MODEL_MAGIC: &[u8; 4] = b"VHED";
const MODEL_VERSION: u32 = 1;

/// Write the "VHED" model container. Field order: dims (N, S, E, K, n_tris),
/// joint names, joint parents, template, shape deviations, shape basis,
/// expression basis, joint regressor, skin weights, topology.
pub fn save_head_model<S: Scalar>(model: &HeadModel<S>, path: &Path) -> Result<()> {
    io_util::atomic_write(path, |w| {
        w.write_all(MODEL_MAGIC)?;
        io_util::write_u32(w, MODEL_VERSION)?;
        io_util::write_u32(w, model.n_vertices() as u32)?;
        io_util::write_u32(w, model.n_shape() as u32)?;
        io_util::write_u32(w, model.n_expr() as u32)?;
        io_util::write_u32(w, model.n_joints() as u32)?;
        io_util::write_u32(w, model.topology.len() as u32)?;
        for j in &model.joints {
            io_util::write_str(w, &j.name)?;
        }
        for j in &model.joints {
            io_util::write_i32(w, j.parent.map_or(-1, |p| p as i32))?;
        }
        let write_mat = |w: &mut dyn std::io::Write, m: &Mat<S>| -> Result<()> {
            for v in m.as_slice() {
                io_util::write_f32(w, v.to_f64_c() as f32)?;
            }
            Ok(())
        };
        write_mat(w, &model.template)?;
        for v in &model.shape_sds {
            io_util::write_f32(w, v.to_f64_c() as f32)?;
        }
        for b in &model.shape_basis {
            write_mat(w, b)?;
        }
        for b in &model.expr_basis {
            write_mat(w, b)?;
        }
        write_mat(w, &model.joint_regressor)?;
        write_mat(w, &model.skin_weights)?;
        for tri in model.topology.iter() {
            for &i in tri {
                io_util::write_u32(w, i)?;
            }
        }
        Ok(())
    })
}

pub fn load_head_model<S: Scalar>(path: &Path) -> Result<HeadModel<S>> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    read_head_model(&mut r)
}

fn read_head_model<S: Scalar, R: Read + ?Sized>(r: &mut R) -> Result<HeadModel<S>> {
    io_util::expect_magic(r, MODEL_MAGIC, "head-model container")?;
    let version = io_util::read_u32(r)?;
    if version != MODEL_VERSION {
        return Err(VocaError::Format(format!("unsupported head-model container version {}", version)));
    }
    let n = io_util::read_u32(r)? as usize;
    let n_shape = io_util::read_u32(r)? as usize;
    let n_expr = io_util::read_u32(r)? as usize;
    let k = io_util::read_u32(r)? as usize;
    let n_tris = io_util::read_u32(r)? as usize;

    let mut names = Vec::with_capacity(k);
    for _ in 0..k {
        names.push(io_util::read_str(r)?);
    }
    let mut joints = Vec::with_capacity(k);
    for name in names {
        let parent = io_util::read_i32(r)?;
        let parent = if parent < 0 { None } else { Some(parent as usize) };
        joints.push(Joint { name, parent });
    }

    let truncated = |_| VocaError::Format("head-model payload is truncated".into());
    let mut read_mat = |rows: usize, cols: usize| -> Result<Mat<S>> {
        let data = io_util::read_f32_vec(r, rows * cols).map_err(truncated)?;
        Mat::from_vec(rows, cols, data.into_iter().map(|v| sc(v as f64)).collect())
    };
    let template = read_mat(n, 3)?;
    let shape_sds_raw = {
        let data = io_util::read_f32_vec(r, n_shape).map_err(truncated)?;
        data.into_iter().map(|v| sc(v as f64)).collect::<Vec<S>>()
    };
    let mut read_mat = |rows: usize, cols: usize| -> Result<Mat<S>> {
        let data = io_util::read_f32_vec(r, rows * cols).map_err(truncated)?;
        Mat::from_vec(rows, cols, data.into_iter().map(|v| sc(v as f64)).collect())
    };
    let shape_basis = (0..n_shape).map(|_| read_mat(n, 3)).collect::<Result<Vec<_>>>()?;
    let expr_basis = (0..n_expr).map(|_| read_mat(n, 3)).collect::<Result<Vec<_>>>()?;
    let joint_regressor = read_mat(k, n)?;
    let skin_weights = read_mat(n, k)?;

    let mut topology = Vec::with_capacity(n_tris);
    for _ in 0..n_tris {
        let mut tri = [0u32; 3];
        for slot in tri.iter_mut() {
            *slot = io_util::read_u32(r).map_err(truncated)?;
        }
        topology.push(tri);
    }
    HeadModel::new(
        template,
        shape_sds_raw,
        shape_basis,
        expr_basis,
        joints,
        joint_regressor,
        skin_weights,
        Arc::new(topology),
    )
}
