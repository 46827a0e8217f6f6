//! Sequence-level inference and the edits applied on top of it: speaking
//! style blends, identity and pose changes, lip-gap measurement, and frame
//! exports. Frames are independent, so the per-frame work runs in parallel
//! with output order fixed by frame index.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::audio::WindowSequence;
use crate::error::{Result, VocaError};
use crate::head::{pose_mesh, shape_offsets, HeadModel, Pose};
use crate::io_util;
use crate::mat::Mat;
use crate::mesh::{export_obj, export_ply, Mesh, MeshSequence, Topology};
use crate::net::{decode, encode, forward, Condition, Mode, NetworkParams};
use crate::scalar::{sc, Scalar};

/// Simplex weights over the training subjects selecting a speaking style;
/// any convex combination of the learned styles is valid.
pub type StyleWeights<S> = Condition<S>;

/// Per-frame distance in meters between two tracked vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct LipMetricSeries<S> {
    distances: Vec<S>,
}

impl<S: Scalar> LipMetricSeries<S> {
    pub fn new(distances: Vec<S>) -> Result<Self> {
        if distances.iter().any(|d| !(d.to_f64_c() >= 0.0)) {
            return Err(VocaError::Data("distances must be nonnegative".into()));
        }
        Ok(LipMetricSeries { distances })
    }

    pub fn len(&self) -> usize {
        self.distances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distances.is_empty()
    }

    pub fn as_slice(&self) -> &[S] {
        &self.distances
    }

    /// Two-column text form, one line per frame after the header.
    pub fn to_text(&self) -> String {
        let mut out = String::from("frame,distance_m\n");
        for (i, d) in self.distances.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i, d.to_f64_c()));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some("frame,distance_m") => {}
            other => {
                return Err(VocaError::Format(format!(
                    "expected the frame,distance_m header, got {:?}",
                    other
                )))
            }
        }
        let mut distances = Vec::new();
        for (i, line) in lines.enumerate() {
            let (frame, value) = line
                .split_once(',')
                .ok_or_else(|| VocaError::Format(format!("line {:?} is not two columns", line)))?;
            let frame: usize = frame
                .trim()
                .parse()
                .map_err(|_| VocaError::Format(format!("bad frame index {:?}", frame)))?;
            if frame != i {
                return Err(VocaError::Format(format!("frame {} appears at position {}", frame, i)));
            }
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| VocaError::Format(format!("bad distance {:?}", value)))?;
            distances.push(sc::<S>(value));
        }
        LipMetricSeries::new(distances)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io_util::atomic_write(path, |w| {
            w.write_all(self.to_text().as_bytes())?;
            Ok(())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn check_template<S: Scalar>(params: &NetworkParams<S>, template: &Mesh<S>) -> Result<()> {
    if template.n_vertices() != params.config.n_vertices {
        return Err(VocaError::Parameter(format!(
            "template has {} vertices, decoder produces {}",
            template.n_vertices(),
            params.config.n_vertices
        )));
    }
    Ok(())
}

/// Drive the face from feature windows: each output frame is the template
/// plus the network's displacement for that window under the given style.
/// Output frame count equals window count, at the video rate.
pub fn animate<S: Scalar>(
    params: &NetworkParams<S>,
    template: &Mesh<S>,
    features: &WindowSequence<S>,
    style: &StyleWeights<S>,
) -> Result<MeshSequence<S>> {
    check_template(params, template)?;
    if features.is_empty() {
        return Err(VocaError::EmptyInput("no feature windows to animate".into()));
    }
    let frames: Vec<Mat<S>> = (0..features.len())
        .into_par_iter()
        .map(|i| {
            let disp = forward(params, features.window(i), style, Mode::Infer)?;
            template.vertices.add(&disp)
        })
        .collect::<Result<Vec<_>>>()?;
    MeshSequence::new(frames)
}

/// Blend speaking styles: encode each frame once per pure subject condition,
/// combine the encodings with the simplex weights, then decode. The decoder
/// is affine, so this equals blending the per-subject vertex outputs.
pub fn interpolate_styles<S: Scalar>(
    params: &NetworkParams<S>,
    features: &WindowSequence<S>,
    template: &Mesh<S>,
    weights: &StyleWeights<S>,
) -> Result<MeshSequence<S>> {
    check_template(params, template)?;
    let n_subjects = params.config.n_subjects;
    if weights.len() != n_subjects {
        return Err(VocaError::Parameter(format!(
            "{} style weights for {} subjects",
            weights.len(),
            n_subjects
        )));
    }
    if features.is_empty() {
        return Err(VocaError::EmptyInput("no feature windows to animate".into()));
    }
    let conds: Vec<Condition<S>> = (0..n_subjects)
        .map(|j| Condition::one_hot(j, n_subjects))
        .collect::<Result<_>>()?;
    let frames: Vec<Mat<S>> = (0..features.len())
        .into_par_iter()
        .map(|i| {
            let window = features.window(i);
            let mut combined = vec![S::zero(); params.config.latent];
            for (j, cond) in conds.iter().enumerate() {
                let w = weights.as_slice()[j];
                let enc = encode(params, window, cond, Mode::Infer)?;
                for (c, e) in combined.iter_mut().zip(enc) {
                    *c = *c + w * e;
                }
            }
            let disp = decode(params, &combined)?;
            template.vertices.add(&disp)
        })
        .collect::<Result<Vec<_>>>()?;
    MeshSequence::new(frames)
}

/// Euclidean gap between the tracked upper- and lower-lip vertices per frame.
pub fn lip_distance<S: Scalar>(
    meshes: &MeshSequence<S>,
    upper_idx: usize,
    lower_idx: usize,
) -> Result<LipMetricSeries<S>> {
    let n = meshes.n_vertices();
    if upper_idx >= n || lower_idx >= n {
        return Err(VocaError::Parameter(format!(
            "lip vertices {} and {} must be below {}",
            upper_idx, lower_idx, n
        )));
    }
    let distances = meshes
        .frames()
        .iter()
        .map(|f| {
            let (a, b) = (f.row(upper_idx), f.row(lower_idx));
            let mut acc = 0.0f64;
            for k in 0..3 {
                let d = a[k].to_f64_c() - b[k].to_f64_c();
                acc += d * d;
            }
            sc::<S>(acc.sqrt())
        })
        .collect();
    LipMetricSeries::new(distances)
}

/// Shift the whole sequence by the identity offsets for the given shape
/// coefficients. Purely additive, so it commutes with animation.
pub fn edit_identity<S: Scalar>(
    sequence: &MeshSequence<S>,
    model: &HeadModel<S>,
    beta: &[S],
) -> Result<MeshSequence<S>> {
    if sequence.n_vertices() != model.n_vertices() {
        return Err(VocaError::Parameter(format!(
            "sequence has {} vertices, model has {}",
            sequence.n_vertices(),
            model.n_vertices()
        )));
    }
    let offset = shape_offsets(model, beta)?;
    let frames: Vec<Mat<S>> = sequence
        .frames()
        .iter()
        .map(|f| f.add(&offset))
        .collect::<Result<_>>()?;
    MeshSequence::new(frames)
}

/// Skin every frame's zero-pose vertices under its pose. A single pose in
/// the track broadcasts to all frames.
pub fn edit_pose<S: Scalar>(
    sequence: &MeshSequence<S>,
    model: &HeadModel<S>,
    pose_track: &[Pose<S>],
) -> Result<MeshSequence<S>> {
    if sequence.n_vertices() != model.n_vertices() {
        return Err(VocaError::Parameter(format!(
            "sequence has {} vertices, model has {}",
            sequence.n_vertices(),
            model.n_vertices()
        )));
    }
    if pose_track.len() != sequence.len() && pose_track.len() != 1 {
        return Err(VocaError::Parameter(format!(
            "{} poses for {} frames",
            pose_track.len(),
            sequence.len()
        )));
    }
    let frames: Vec<Mat<S>> = (0..sequence.len())
        .into_par_iter()
        .map(|i| {
            let pose = if pose_track.len() == 1 { &pose_track[0] } else { &pose_track[i] };
            Ok(pose_mesh(model, sequence.frame(i), pose)?.vertices)
        })
        .collect::<Result<Vec<_>>>()?;
    MeshSequence::new(frames)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    Ply,
}

/// Write one file per frame into the directory, named frame_NNNNNN with six
/// digits. Vertex order and topology are identical across frames.
pub fn export_sequence<S: Scalar>(
    meshes: &MeshSequence<S>,
    topology: &Topology,
    directory: &Path,
    format: MeshFormat,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(directory)?;
    let ext = match format {
        MeshFormat::Obj => "obj",
        MeshFormat::Ply => "ply",
    };
    let mut paths = Vec::with_capacity(meshes.len());
    for (i, frame) in meshes.frames().iter().enumerate() {
        let path = directory.join(format!("frame_{:06}.{}", i, ext));
        let mesh = Mesh::new(frame.clone(), topology.clone())?;
        match format {
            MeshFormat::Obj => export_obj(&mesh, &path)?,
            MeshFormat::Ply => export_ply(&mesh, &path)?,
        }
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthSpec};
    use crate::head::{unpose, Joint, JOINT_NAMES, JOINT_PARENTS};
    use crate::mesh::{import_obj, import_ply};
    use crate::net::{compute_pca, init_params, NetConfig};
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use std::sync::Arc;

    fn toy_net_config() -> NetConfig {
        NetConfig {
            window: 4,
            feature_dim: 3,
            n_subjects: 2,
            conv_channels: vec![2, 2],
            fc1_units: 4,
            latent: 3,
            n_vertices: 6,
        }
    }

    /// Initialized parameters with signal in fc2 so outputs are nontrivial.
    fn toy_params<S: Scalar>(seed: u64) -> NetworkParams<S> {
        let cfg = toy_net_config();
        let mut rng = crate::rng::seeded_rng(seed, "anim-params");
        let data = Mat::from_fn(24, cfg.out_dim(), |_, _| sc::<S>(rng.gen_range(-0.01f64..0.01)));
        let pca = compute_pca(&data, cfg.latent).unwrap();
        let mut params = init_params(&cfg, &pca, seed).unwrap();
        for v in params.fc2.weights.as_mut_slice() {
            *v = sc::<S>(rng.gen_range(-0.5f64..0.5));
        }
        params
    }

    fn toy_scene<S: Scalar>(seed: u64) -> (Mesh<S>, WindowSequence<S>) {
        let spec = SynthSpec {
            n_subjects: 2,
            n_sentences: 1,
            frames_per_seq: 12,
            n_vertices: 6,
            feature_dim: 3,
            window: 4,
        };
        let (dataset, _) = generate_synthetic(&spec, seed).unwrap();
        let template = dataset.template("s00").unwrap().clone();
        (template, dataset.sequences[0].windows.clone())
    }

    fn toy_head<S: Scalar>(n: usize, seed: u64) -> HeadModel<S> {
        let mut rng = crate::rng::seeded_rng(seed, "anim-head");
        let template = Mat::from_fn(n, 3, |_, _| sc::<S>(rng.gen_range(-0.12f64..0.12)));
        let joints: Vec<Joint> = JOINT_NAMES
            .iter()
            .zip(JOINT_PARENTS)
            .map(|(&name, parent)| Joint {
                name: name.into(),
                parent: if parent < 0 { None } else { Some(parent as usize) },
            })
            .collect();
        let joint_regressor = {
            let mut m = Mat::zeros(5, n);
            for k in 0..5 {
                for j in 0..4 {
                    m[(k, (k * 7 + j * 3) % n)] = sc::<S>(0.25);
                }
            }
            m
        };
        let skin_weights = {
            let mut m = Mat::zeros(n, 5);
            for r in 0..n {
                let mut row: Vec<f64> = (0..5).map(|_| rng.gen_range(0.05f64..1.0)).collect();
                let sum: f64 = row.iter().sum();
                for v in row.iter_mut() {
                    *v /= sum;
                }
                for (k, v) in row.iter().enumerate() {
                    m[(r, k)] = sc::<S>(*v);
                }
            }
            m
        };
        let basis = |rng: &mut rand_chacha::ChaCha12Rng| {
            Mat::from_fn(n, 3, |_, _| sc::<S>(rng.gen_range(-1.0f64..1.0)))
        };
        let shape_basis = vec![basis(&mut rng), basis(&mut rng)];
        let topology: Topology =
            Arc::new((0..n - 2).map(|i| [i as u32, i as u32 + 1, i as u32 + 2]).collect());
        HeadModel::new(
            template,
            vec![sc::<S>(0.003), sc::<S>(0.002)],
            shape_basis,
            vec![],
            joints,
            joint_regressor,
            skin_weights,
            topology,
        )
        .unwrap()
    }

    #[test]
    fn zero_network_reproduces_template_every_frame() {
        let (template, windows) = toy_scene::<f32>(1);
        let zero = toy_params::<f32>(1).zeros_like();
        let style = StyleWeights::one_hot(0, 2).unwrap();
        let out = animate(&zero, &template, &windows, &style).unwrap();
        assert_eq!(out.len(), windows.len());
        for f in 0..out.len() {
            assert_eq!(out.frame(f).as_slice(), template.vertices.as_slice());
        }
    }

    #[test]
    fn animate_is_deterministic_across_runs() {
        let (template, windows) = toy_scene::<f32>(2);
        let params = toy_params::<f32>(2);
        let style = StyleWeights::new(vec![0.25, 0.75]).unwrap();
        let a = animate(&params, &template, &windows, &style).unwrap();
        let b = animate(&params, &template, &windows, &style).unwrap();
        for f in 0..a.len() {
            assert_eq!(a.frame(f).as_slice(), b.frame(f).as_slice());
        }
    }

    #[test]
    fn animate_rejects_mismatched_template() {
        let (_, windows) = toy_scene::<f32>(3);
        let params = toy_params::<f32>(3);
        let wrong = Mesh::new(Mat::zeros(7, 3), Arc::new(vec![])).unwrap();
        let style = StyleWeights::one_hot(0, 2).unwrap();
        assert!(matches!(
            animate(&params, &wrong, &windows, &style),
            Err(VocaError::Parameter(_))
        ));
    }

    #[test]
    fn one_hot_interpolation_equals_pure_animation() {
        let (template, windows) = toy_scene::<f32>(4);
        let params = toy_params::<f32>(4);
        for j in 0..2 {
            let pure = animate(&params, &template, &windows, &StyleWeights::one_hot(j, 2).unwrap())
                .unwrap();
            let mixed = interpolate_styles(
                &params,
                &windows,
                &template,
                &StyleWeights::one_hot(j, 2).unwrap(),
            )
            .unwrap();
            for f in 0..pure.len() {
                assert_eq!(pure.frame(f).as_slice(), mixed.frame(f).as_slice());
            }
        }
    }

    #[test]
    fn half_mix_averages_the_pure_outputs() {
        let (template, windows) = toy_scene::<f32>(5);
        let params = toy_params::<f32>(5);
        let m0 = animate(&params, &template, &windows, &StyleWeights::one_hot(0, 2).unwrap()).unwrap();
        let m1 = animate(&params, &template, &windows, &StyleWeights::one_hot(1, 2).unwrap()).unwrap();
        let mix = interpolate_styles(
            &params,
            &windows,
            &template,
            &StyleWeights::new(vec![0.5, 0.5]).unwrap(),
        )
        .unwrap();
        for f in 0..mix.len() {
            for i in 0..mix.frame(f).as_slice().len() {
                let avg = 0.5 * (m0.frame(f).as_slice()[i] + m1.frame(f).as_slice()[i]);
                assert!((mix.frame(f).as_slice()[i] - avg).abs() <= 1e-6);
            }
        }
    }

    /// Mixing encodings equals mixing decoded vertices for arbitrary simplex
    /// weights, because conditioning enters before the affine decoder.
    #[test]
    fn encoding_and_vertex_space_mixing_agree() {
        let (template, windows) = toy_scene::<f32>(6);
        let params = toy_params::<f32>(6);
        let pure: Vec<MeshSequence<f32>> = (0..2)
            .map(|j| {
                animate(&params, &template, &windows, &StyleWeights::one_hot(j, 2).unwrap()).unwrap()
            })
            .collect();
        let mut rng = crate::rng::seeded_rng(6, "mix");
        for _ in 0..10 {
            let a: f32 = rng.gen_range(0.0..1.0);
            let weights = StyleWeights::new(vec![a, 1.0 - a]).unwrap();
            let mixed = interpolate_styles(&params, &windows, &template, &weights).unwrap();
            for f in 0..mixed.len() {
                for i in 0..mixed.frame(f).as_slice().len() {
                    // Vertex-space blend of meshes both containing the template:
                    // a*(t+d0) + (1-a)*(t+d1).
                    let blended =
                        a * pure[0].frame(f).as_slice()[i] + (1.0 - a) * pure[1].frame(f).as_slice()[i];
                    assert!((mixed.frame(f).as_slice()[i] - blended).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn lip_distance_measures_euclidean_gap() {
        let mut frame = Mat::<f64>::zeros(3, 3);
        frame[(1, 1)] = 3.0;
        frame[(1, 2)] = 4.0;
        let seq = MeshSequence::new(vec![frame]).unwrap();
        let series = lip_distance(&seq, 0, 1).unwrap();
        assert_eq!(series.as_slice(), &[5.0]);
        let zero = lip_distance(&seq, 2, 0).unwrap();
        assert_eq!(zero.as_slice(), &[0.0]);
        assert!(matches!(lip_distance(&seq, 0, 3), Err(VocaError::Parameter(_))));
    }

    /// The mixed mouth gap never exceeds the chord between the pure styles:
    /// vertices are affine in the mix weight, and norms of affine maps are
    /// convex.
    #[test]
    fn lip_gap_of_mixtures_stays_under_the_chord() {
        let (template, windows) = toy_scene::<f32>(7);
        let params = toy_params::<f32>(7);
        let d0 = lip_distance(
            &animate(&params, &template, &windows, &StyleWeights::one_hot(0, 2).unwrap()).unwrap(),
            0,
            3,
        )
        .unwrap();
        let d1 = lip_distance(
            &animate(&params, &template, &windows, &StyleWeights::one_hot(1, 2).unwrap()).unwrap(),
            0,
            3,
        )
        .unwrap();
        for &lambda in &[0.0f32, 0.25, 0.5, 0.75, 1.0] {
            let weights = StyleWeights::new(vec![1.0 - lambda, lambda]).unwrap();
            let mixed = interpolate_styles(&params, &windows, &template, &weights).unwrap();
            let dm = lip_distance(&mixed, 0, 3).unwrap();
            for f in 0..dm.len() {
                let chord = lambda * d1.as_slice()[f] + (1.0 - lambda) * d0.as_slice()[f];
                assert!(
                    dm.as_slice()[f] <= chord + 1e-6,
                    "frame {}: {} > {}",
                    f,
                    dm.as_slice()[f],
                    chord
                );
            }
        }
    }

    #[test]
    fn identity_edit_adds_exact_shape_offsets() {
        let (template, windows) = toy_scene::<f64>(8);
        let params = toy_params::<f64>(8);
        let model = toy_head::<f64>(6, 8);
        let style = StyleWeights::one_hot(1, 2).unwrap();
        let seq = animate(&params, &template, &windows, &style).unwrap();

        let unchanged = edit_identity(&seq, &model, &[0.0, 0.0]).unwrap();
        for f in 0..seq.len() {
            assert_eq!(unchanged.frame(f).as_slice(), seq.frame(f).as_slice());
        }

        let beta = [2.0, 0.0];
        let edited = edit_identity(&seq, &model, &beta).unwrap();
        let offset = shape_offsets(&model, &beta).unwrap();
        for f in 0..seq.len() {
            let direct = seq.frame(f).add(&offset).unwrap();
            assert_eq!(edited.frame(f).as_slice(), direct.as_slice());
            for i in 0..offset.as_slice().len() {
                let expect = 2.0 * 0.003 * model.shape_basis[0].as_slice()[i];
                assert_abs_diff_eq!(offset.as_slice()[i], expect, epsilon = 1e-15);
            }
        }

        let negative = edit_identity(&seq, &model, &[-2.0, 0.0]).unwrap();
        for f in 0..seq.len() {
            for i in 0..offset.as_slice().len() {
                let diff = negative.frame(f).as_slice()[i] - seq.frame(f).as_slice()[i];
                assert_abs_diff_eq!(diff, -offset.as_slice()[i], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn identity_edit_commutes_with_animation() {
        let (template, windows) = toy_scene::<f64>(9);
        let model = toy_head::<f64>(6, 9);
        let beta = [1.5, -0.5];
        let offset = shape_offsets(&model, &beta).unwrap();
        let shifted = Mesh::new(template.vertices.add(&offset).unwrap(), template.topology.clone())
            .unwrap();
        let style = StyleWeights::one_hot(0, 2).unwrap();

        // With the zero network both orders produce template + offset exactly.
        let zero = toy_params::<f64>(9).zeros_like();
        let a = edit_identity(&animate(&zero, &template, &windows, &style).unwrap(), &model, &beta)
            .unwrap();
        let b = animate(&zero, &shifted, &windows, &style).unwrap();
        for f in 0..a.len() {
            assert_eq!(a.frame(f).as_slice(), b.frame(f).as_slice());
        }

        // With live displacements the two orders differ only by rounding.
        let params = toy_params::<f64>(9);
        let a = edit_identity(&animate(&params, &template, &windows, &style).unwrap(), &model, &beta)
            .unwrap();
        let b = animate(&params, &shifted, &windows, &style).unwrap();
        for f in 0..a.len() {
            for (x, y) in a.frame(f).as_slice().iter().zip(b.frame(f).as_slice()) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn pose_edit_identity_track_and_roundtrip() {
        let (template, windows) = toy_scene::<f64>(10);
        let params = toy_params::<f64>(10);
        let model = toy_head::<f64>(6, 10);
        let style = StyleWeights::one_hot(0, 2).unwrap();
        let seq = animate(&params, &template, &windows, &style).unwrap();

        let identity = edit_pose(&seq, &model, &[Pose::identity(5)]).unwrap();
        for f in 0..seq.len() {
            for (x, y) in identity.frame(f).as_slice().iter().zip(seq.frame(f).as_slice()) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
        }

        let mut pose = Pose::identity(5);
        pose.theta[1] = [0.0, 0.3, 0.0];
        pose.translation = [0.01, -0.02, 0.005];
        let posed = edit_pose(&seq, &model, &[pose.clone()]).unwrap();
        for f in 0..seq.len() {
            let back = unpose(
                &model,
                &Mesh::new(posed.frame(f).clone(), model.topology.clone()).unwrap(),
                &pose,
            )
            .unwrap();
            for (x, y) in back.vertices.as_slice().iter().zip(seq.frame(f).as_slice()) {
                assert!((x - y).abs() < 1e-6);
            }
        }

        let track = vec![Pose::identity(5); seq.len()];
        let broadcast = edit_pose(&seq, &model, &track).unwrap();
        for f in 0..seq.len() {
            assert_eq!(broadcast.frame(f).as_slice(), identity.frame(f).as_slice());
        }
        assert!(matches!(
            edit_pose(&seq, &model, &track[..3]),
            Err(VocaError::Parameter(_))
        ));
    }

    #[test]
    fn export_writes_zero_padded_frames_that_reimport() {
        let (template, windows) = toy_scene::<f32>(11);
        let params = toy_params::<f32>(11);
        let style = StyleWeights::one_hot(0, 2).unwrap();
        let seq = animate(&params, &template, &windows, &style).unwrap();
        let dir = tempfile::tempdir().unwrap();

        let obj_dir = dir.path().join("obj");
        let paths = export_sequence(&seq, &template.topology, &obj_dir, MeshFormat::Obj).unwrap();
        assert_eq!(paths.len(), seq.len());
        assert_eq!(paths[0].file_name().unwrap(), "frame_000000.obj");
        assert_eq!(paths[11].file_name().unwrap(), "frame_000011.obj");
        for (f, p) in paths.iter().enumerate() {
            let mesh = import_obj::<f32>(p).unwrap();
            assert_eq!(mesh.topology.len(), template.topology.len());
            for (x, y) in mesh.vertices.as_slice().iter().zip(seq.frame(f).as_slice()) {
                assert!((x - y).abs() < 1e-6);
            }
        }

        let ply_dir = dir.path().join("ply");
        let paths = export_sequence(&seq, &template.topology, &ply_dir, MeshFormat::Ply).unwrap();
        for (f, p) in paths.iter().enumerate() {
            let mesh = import_ply::<f32>(p).unwrap();
            assert_eq!(mesh.vertices.as_slice(), seq.frame(f).as_slice());
        }
    }

    #[test]
    fn lip_metric_text_roundtrip() {
        let series = LipMetricSeries::<f32>::new(vec![0.0, 0.0051234, 1.5]).unwrap();
        let text = series.to_text();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("frame,distance_m"));
        assert!(lines.next().unwrap().starts_with("0,"));
        let back = LipMetricSeries::<f32>::from_text(&text).unwrap();
        assert_eq!(back.as_slice(), series.as_slice());

        assert!(LipMetricSeries::<f32>::new(vec![-0.1]).is_err());
        assert!(LipMetricSeries::<f32>::from_text("bad header\n0,1\n").is_err());
        assert!(LipMetricSeries::<f32>::from_text("frame,distance_m\n1,0.5\n").is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metric.csv");
        series.save(&path).unwrap();
        assert_eq!(LipMetricSeries::<f32>::load(&path).unwrap(), series);
    }
}
