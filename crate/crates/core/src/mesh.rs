//! Triangle meshes, mesh sequences, and their on-disk forms.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Result, VocaError};
use crate::io_util;
use crate::mat::Mat;
use crate::scalar::{sc, Scalar};

pub type Topology = Arc<Vec<[u32; 3]>>;

/// A triangle mesh: N×3 vertex positions in meters plus shared topology.
#[derive(Debug, Clone)]
pub struct Mesh<S> {
    pub vertices: Mat<S>,
    pub topology: Topology,
}

impl<S: Scalar> Mesh<S> {
    pub fn new(vertices: Mat<S>, topology: Topology) -> Result<Self> {
        if vertices.cols() != 3 {
            return Err(VocaError::Parameter(format!(
                "mesh vertices must be Nx3, got {}x{}",
                vertices.rows(),
                vertices.cols()
            )));
        }
        let n = vertices.rows() as u32;
        for tri in topology.iter() {
            if tri.iter().any(|&i| i >= n) {
                return Err(VocaError::Data(format!(
                    "triangle {:?} references a vertex outside 0..{}",
                    tri, n
                )));
            }
        }
        Ok(Mesh { vertices, topology })
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.rows()
    }
}

/// Per-frame vertex positions of one captured or generated sequence.
/// All frames share one vertex count; topology travels separately.
#[derive(Debug, Clone)]
pub struct MeshSequence<S> {
    frames: Vec<Mat<S>>,
}

impl<S: Scalar> MeshSequence<S> {
    pub fn new(frames: Vec<Mat<S>>) -> Result<Self> {
        if frames.is_empty() {
            return Err(VocaError::EmptyInput("mesh sequence has no frames".into()));
        }
        let n = frames[0].rows();
        for (i, f) in frames.iter().enumerate() {
            if f.cols() != 3 || f.rows() != n {
                return Err(VocaError::Data(format!(
                    "frame {} is {}x{}, expected {}x3",
                    i,
                    f.rows(),
                    f.cols(),
                    n
                )));
            }
        }
        Ok(MeshSequence { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn n_vertices(&self) -> usize {
        self.frames[0].rows()
    }

    pub fn frame(&self, i: usize) -> &Mat<S> {
        &self.frames[i]
    }

    pub fn frames(&self) -> &[Mat<S>] {
        &self.frames
    }
}

const SEQ_MAGIC: &[u8; 4] = b"VMSQ";

/// Write a mesh sequence to the "VMSQ" container: N, n_frames, then frames of
/// N×3 32-bit reals.
pub fn save_mesh_sequence<S: Scalar>(seq: &MeshSequence<S>, path: &Path) -> Result<()> {
    io_util::atomic_write(path, |w| {
        w.write_all(SEQ_MAGIC)?;
        io_util::write_u32(w, seq.n_vertices() as u32)?;
        io_util::write_u32(w, seq.len() as u32)?;
        for frame in &seq.frames {
            for v in frame.as_slice() {
                io_util::write_f32(w, v.to_f64_c() as f32)?;
            }
        }
        Ok(())
    })
}

pub fn load_mesh_sequence<S: Scalar>(path: &Path) -> Result<MeshSequence<S>> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    read_mesh_sequence(&mut r)
}

fn read_mesh_sequence<S: Scalar, R: Read + ?Sized>(r: &mut R) -> Result<MeshSequence<S>> {
    io_util::expect_magic(r, SEQ_MAGIC, "mesh-sequence container")?;
    let n = io_util::read_u32(r)? as usize;
    let n_frames = io_util::read_u32(r)? as usize;
    if n == 0 || n_frames == 0 {
        return Err(VocaError::EmptyInput(format!(
            "mesh-sequence container holds {} vertices x {} frames",
            n, n_frames
        )));
    }
    let mut frames = Vec::with_capacity(n_frames);
    for _ in 0..n_frames {
        let data = io_util::read_f32_vec(r, n * 3)
            .map_err(|_| VocaError::Format("mesh-sequence payload is truncated".into()))?;
        frames.push(Mat::from_vec(n, 3, data.into_iter().map(|v| sc(v as f64)).collect())?);
    }
    MeshSequence::new(frames)
}

/// Write an ASCII OBJ: vertices in order, then 1-based triangle faces.
pub fn export_obj<S: Scalar>(mesh: &Mesh<S>, path: &Path) -> Result<()> {
    io_util::atomic_write(path, |w| {
        for r in 0..mesh.vertices.rows() {
            let row = mesh.vertices.row(r);
            writeln!(
                w,
                "v {:.6} {:.6} {:.6}",
                row[0].to_f64_c(),
                row[1].to_f64_c(),
                row[2].to_f64_c()
            )?;
        }
        for tri in mesh.topology.iter() {
            writeln!(w, "f {} {} {}", tri[0] + 1, tri[1] + 1, tri[2] + 1)?;
        }
        Ok(())
    })
}

pub fn import_obj<S: Scalar>(path: &Path) -> Result<Mesh<S>> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut verts: Vec<S> = Vec::new();
    let mut tris: Vec<[u32; 3]> = Vec::new();
    for (lineno, line) in file.lines().enumerate() {
        let line = line?;
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("v") => {
                for _ in 0..3 {
                    let t = tok.next().ok_or_else(|| {
                        VocaError::Format(format!("OBJ line {}: vertex needs 3 coordinates", lineno + 1))
                    })?;
                    let v: f64 = t
                        .parse()
                        .map_err(|_| VocaError::Format(format!("OBJ line {}: bad coordinate {:?}", lineno + 1, t)))?;
                    verts.push(sc(v));
                }
            }
            Some("f") => {
                let mut idx = [0u32; 3];
                for slot in idx.iter_mut() {
                    let t = tok.next().ok_or_else(|| {
                        VocaError::Format(format!("OBJ line {}: face needs 3 indices", lineno + 1))
                    })?;
                    // Face tokens may carry /texture/normal parts; the first field is the vertex.
                    let first = t.split('/').next().unwrap_or(t);
                    let one_based: u32 = first
                        .parse()
                        .map_err(|_| VocaError::Format(format!("OBJ line {}: bad index {:?}", lineno + 1, t)))?;
                    if one_based == 0 {
                        return Err(VocaError::Format(format!("OBJ line {}: indices are 1-based", lineno + 1)));
                    }
                    *slot = one_based - 1;
                }
                if tok.next().is_some() {
                    return Err(VocaError::Unsupported(format!(
                        "OBJ line {}: only triangle faces are supported",
                        lineno + 1
                    )));
                }
                tris.push(idx);
            }
            _ => {}
        }
    }
    let n = verts.len() / 3;
    Mesh::new(Mat::from_vec(n, 3, verts)?, Arc::new(tris))
}

/// Write a binary little-endian PLY with float vertices and int face indices.
pub fn export_ply<S: Scalar>(mesh: &Mesh<S>, path: &Path) -> Result<()> {
    io_util::atomic_write(path, |w| {
        write!(
            w,
            "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
            mesh.vertices.rows(),
            mesh.topology.len()
        )?;
        for v in mesh.vertices.as_slice() {
            io_util::write_f32(w, v.to_f64_c() as f32)?;
        }
        for tri in mesh.topology.iter() {
            w.write_all(&[3u8])?;
            for &i in tri {
                io_util::write_i32(w, i as i32)?;
            }
        }
        Ok(())
    })
}

pub fn import_ply<S: Scalar>(path: &Path) -> Result<Mesh<S>> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut header = Vec::new();
    // The header is ASCII lines through "end_header"; the payload is binary.
    loop {
        let mut line = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            r.read_exact(&mut byte)
                .map_err(|_| VocaError::Format("PLY header is truncated".into()))?;
            if byte[0] == b'\n' {
                break;
            }
            line.push(byte[0]);
        }
        let text = String::from_utf8(line).map_err(|_| VocaError::Format("PLY header is not ASCII".into()))?;
        let done = text.trim() == "end_header";
        header.push(text);
        if done {
            break;
        }
    }
    if header.first().map(|s| s.trim()) != Some("ply") {
        return Err(VocaError::Format("not a PLY file".into()));
    }
    if !header.iter().any(|l| l.trim() == "format binary_little_endian 1.0") {
        return Err(VocaError::Unsupported("only binary little-endian PLY is supported".into()));
    }
    let count_after = |prefix: &str| -> Option<usize> {
        header
            .iter()
            .find_map(|l| l.trim().strip_prefix(prefix).map(|rest| rest.trim().parse().ok()))
            .flatten()
    };
    let n_verts = count_after("element vertex").ok_or_else(|| VocaError::Format("PLY missing vertex element".into()))?;
    let n_faces = count_after("element face").unwrap_or(0);

    let data = io_util::read_f32_vec(&mut r, n_verts * 3)
        .map_err(|_| VocaError::Format("PLY vertex payload is truncated".into()))?;
    let vertices = Mat::from_vec(n_verts, 3, data.into_iter().map(|v| sc(v as f64)).collect())?;
    let mut tris = Vec::with_capacity(n_faces);
    for _ in 0..n_faces {
        let mut count = [0u8; 1];
        r.read_exact(&mut count)
            .map_err(|_| VocaError::Format("PLY face payload is truncated".into()))?;
        if count[0] != 3 {
            return Err(VocaError::Unsupported(format!(
                "PLY face with {} vertices; only triangles are supported",
                count[0]
            )));
        }
        let mut tri = [0u32; 3];
        for slot in tri.iter_mut() {
            let v = io_util::read_i32(&mut r).map_err(|_| VocaError::Format("PLY face payload is truncated".into()))?;
            if v < 0 {
                return Err(VocaError::Format("negative PLY face index".into()));
            }
            *slot = v as u32;
        }
        tris.push(tri);
    }
    Mesh::new(vertices, Arc::new(tris))
}
