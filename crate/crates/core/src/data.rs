//! Dataset assembly, disjoint splitting, and a synthetic generator.
//!
//! A dataset pairs per-frame feature windows with target meshes and per
//! subject templates. The synthetic generator produces smooth feature
//! trajectories and targets that are exactly linear in the flattened window,
//! so convergence and losslessness can be certified against a recorded linear
//! map.

use std::collections::{BTreeMap, BTreeSet};

use std::path::Path;

use crate::audio::{window_features, FeatureKind, FeatureSequence, WindowSequence, VIDEO_FPS};
use crate::error::{Result, VocaError};
use crate::mat::Mat;
use crate::mesh::{
    export_ply, import_ply, load_mesh_sequence, save_mesh_sequence, Mesh, MeshSequence, Topology,
};
use crate::scalar::{sc, Scalar};

/// One captured (or generated) sentence: windowed features plus target
/// meshes, frame for frame.
#[derive(Debug, Clone)]
pub struct Sequence<S> {
    pub subject: String,
    pub sentence: String,
    /// Per-frame features at video rate; windows are derived from these.
    pub features: FeatureSequence<S>,
    pub windows: WindowSequence<S>,
    pub meshes: MeshSequence<S>,
}

impl<S: Scalar> Sequence<S> {
    pub fn new(
        subject: impl Into<String>,
        sentence: impl Into<String>,
        features: FeatureSequence<S>,
        meshes: MeshSequence<S>,
        window: usize,
    ) -> Result<Self> {
        let windows = window_features(&features, window)?;
        if windows.len() != meshes.len() {
            return Err(VocaError::Data(format!(
                "{} feature frames but {} mesh frames",
                windows.len(),
                meshes.len()
            )));
        }
        Ok(Sequence {
            subject: subject.into(),
            sentence: sentence.into(),
            features,
            windows,
            meshes,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.windows.len()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset<S> {
    pub sequences: Vec<Sequence<S>>,
    pub templates: BTreeMap<String, Mesh<S>>,
}

impl<S: Scalar> Dataset<S> {
    /// Sorted unique subject ids over all sequences.
    pub fn subjects(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.sequences.iter().map(|s| &s.subject).collect();
        set.into_iter().cloned().collect()
    }

    pub fn template(&self, subject: &str) -> Result<&Mesh<S>> {
        self.templates
            .get(subject)
            .ok_or_else(|| VocaError::Data(format!("no template for subject {}", subject)))
    }

    /// Target displacement of one frame: mesh minus the subject template.
    pub fn displacement(&self, seq: usize, frame: usize) -> Result<Mat<S>> {
        let sequence = &self.sequences[seq];
        let template = self.template(&sequence.subject)?;
        sequence.meshes.frame(frame).sub(&template.vertices)
    }
}

/// Validate sequences against templates and assemble the dataset.
pub fn build_dataset<S: Scalar>(
    sequences: Vec<Sequence<S>>,
    templates: BTreeMap<String, Mesh<S>>,
) -> Result<Dataset<S>> {
    for seq in &sequences {
        let template = templates.get(&seq.subject).ok_or_else(|| {
            VocaError::Data(format!("sequence {}/{} has no template", seq.subject, seq.sentence))
        })?;
        if seq.meshes.n_vertices() != template.vertices.rows() {
            return Err(VocaError::Data(format!(
                "sequence {}/{} has {} vertices, template has {}",
                seq.subject,
                seq.sentence,
                seq.meshes.n_vertices(),
                template.vertices.rows()
            )));
        }
    }
    Ok(Dataset { sequences, templates })
}

/// Which subjects belong to which split, plus sentences each split must not
/// contain.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitSpec {
    pub train_subjects: Vec<String>,
    pub val_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
    pub train_exclude: Vec<String>,
    pub val_exclude: Vec<String>,
    pub test_exclude: Vec<String>,
}

impl SplitSpec {
    pub fn to_text(&self) -> String {
        let line = |key: &str, items: &[String]| {
            if items.is_empty() {
                String::new()
            } else {
                format!("{}: {}\n", key, items.join(" "))
            }
        };
        let mut out = String::new();
        out.push_str(&line("train", &self.train_subjects));
        out.push_str(&line("val", &self.val_subjects));
        out.push_str(&line("test", &self.test_subjects));
        out.push_str(&line("train-exclude", &self.train_exclude));
        out.push_str(&line("val-exclude", &self.val_exclude));
        out.push_str(&line("test-exclude", &self.test_exclude));
        out
    }
}

/// Parse the plain-text split description: `key: id id id` lines with `#`
/// comments, keys train/val/test and their `-exclude` variants.
pub fn parse_split_spec(text: &str) -> Result<SplitSpec> {
    let mut spec = SplitSpec::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, rest) = line
            .split_once(':')
            .ok_or_else(|| VocaError::Format(format!("split line {} has no key", lineno + 1)))?;
        let items: Vec<String> = rest.split_whitespace().map(str::to_string).collect();
        match key.trim() {
            "train" => spec.train_subjects.extend(items),
            "val" => spec.val_subjects.extend(items),
            "test" => spec.test_subjects.extend(items),
            "train-exclude" => spec.train_exclude.extend(items),
            "val-exclude" => spec.val_exclude.extend(items),
            "test-exclude" => spec.test_exclude.extend(items),
            other => {
                return Err(VocaError::Format(format!(
                    "split line {} has unknown key {:?}",
                    lineno + 1,
                    other
                )))
            }
        }
    }
    Ok(spec)
}

/// Sequence indices per split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Assign sequences to splits by subject and enforce disjointness: subject
/// sets must not overlap, every dataset subject must be assigned, no split
/// may contain an excluded sentence, and validation/test sentences must not
/// appear in any other split. Violations are errors, never silent fixes.
pub fn split_dataset<S: Scalar>(dataset: &Dataset<S>, spec: &SplitSpec) -> Result<DatasetSplit> {
    let lists = [&spec.train_subjects, &spec.val_subjects, &spec.test_subjects];
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for (li, list) in lists.iter().enumerate() {
        for subject in list.iter() {
            if let Some(prev) = seen.insert(subject.as_str(), li) {
                let names = ["train", "val", "test"];
                return Err(VocaError::Config(format!(
                    "subject {} appears in both {} and {}",
                    subject, names[prev], names[li]
                )));
            }
        }
    }

    let mut split = DatasetSplit { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for (i, seq) in dataset.sequences.iter().enumerate() {
        match seen.get(seq.subject.as_str()) {
            Some(0) => split.train.push(i),
            Some(1) => split.val.push(i),
            Some(2) => split.test.push(i),
            _ => {
                return Err(VocaError::Config(format!(
                    "subject {} is not assigned to any split",
                    seq.subject
                )))
            }
        }
    }

    let sentences = |ids: &[usize]| -> BTreeSet<&str> {
        ids.iter().map(|&i| dataset.sequences[i].sentence.as_str()).collect()
    };
    let (train_s, val_s, test_s) = (sentences(&split.train), sentences(&split.val), sentences(&split.test));
    for (name, set, excluded) in [
        ("train", &train_s, &spec.train_exclude),
        ("val", &val_s, &spec.val_exclude),
        ("test", &test_s, &spec.test_exclude),
    ] {
        for sentence in excluded.iter() {
            if set.contains(sentence.as_str()) {
                return Err(VocaError::Config(format!(
                    "sentence {} is excluded from the {} split but present",
                    sentence, name
                )));
            }
        }
    }
    for (a_name, a, b_name, b) in [
        ("val", &val_s, "train", &train_s),
        ("test", &test_s, "train", &train_s),
        ("val", &val_s, "test", &test_s),
    ] {
        if let Some(shared) = a.intersection(b).next() {
            return Err(VocaError::Config(format!(
                "sentence {} appears in both {} and {}",
                shared, a_name, b_name
            )));
        }
    }
    Ok(split)
}

/// Sorted unique subjects among the given sequences; this ordering defines
/// the one-hot condition index.
pub fn subject_table<S: Scalar>(dataset: &Dataset<S>, indices: &[usize]) -> Vec<String> {
    let set: BTreeSet<&String> = indices.iter().map(|&i| &dataset.sequences[i].subject).collect();
    set.into_iter().cloned().collect()
}

/// Sizing of a generated dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub n_sentences: usize,
    pub frames_per_seq: usize,
    pub n_vertices: usize,
    pub feature_dim: usize,
    pub window: usize,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.n_subjects,
            self.n_sentences,
            self.frames_per_seq,
            self.n_vertices,
            self.feature_dim,
            self.window,
        ];
        if counts.iter().any(|&c| c == 0) {
            return Err(VocaError::Parameter("all synthetic counts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Spectral norm given to every per-subject linear map: the single scale
/// constant of the generated displacements. Large enough that the
/// optimizer's absolute step noise is negligible against them; the template
/// placement adapts to the realized maps so displacement extraction stays
/// exact at any magnitude.
pub const SYNTH_SPECTRAL_NORM: f64 = 2.0;

/// Ground truth behind a generated dataset: one linear map per subject taking
/// the flattened window to the flattened displacement.
#[derive(Debug, Clone)]
pub struct SyntheticOracle {
    /// subject id -> (3·N) × (W·D) map.
    pub maps: BTreeMap<String, Mat<f64>>,
    pub spectral_norm: f64,
}

impl SyntheticOracle {
    /// Evaluate the ground-truth displacement for one window.
    pub fn target<S: Scalar>(&self, subject: &str, window: &Mat<S>) -> Result<Mat<f64>> {
        let g = self
            .maps
            .get(subject)
            .ok_or_else(|| VocaError::Data(format!("oracle has no map for subject {}", subject)))?;
        if window.rows() * window.cols() != g.cols() {
            return Err(VocaError::Parameter(format!(
                "window has {} values, map expects {}",
                window.rows() * window.cols(),
                g.cols()
            )));
        }
        let n = g.rows() / 3;
        let mut out = Mat::zeros(n, 3);
        for r in 0..g.rows() {
            let mut acc = 0.0;
            for (gv, wv) in g.row(r).iter().zip(window.as_slice()) {
                acc += gv * wv.to_f64_c();
            }
            out[(r / 3, r % 3)] = acc;
        }
        Ok(out)
    }
}

fn synthetic_template(n: usize, center: f64) -> (Mat<f64>, Topology) {
    // Evenly spread points on a sphere pushed away from the origin so every
    // coordinate stays in [center - 0.1, center + 0.1]. The caller picks the
    // center so displacement coordinates stay below half the smallest
    // template coordinate; then mesh and template are always close enough
    // that mesh-minus-template is exact in every float width (Sterbenz).
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let vertices = Mat::from_fn(n, 3, |i, c| {
        let z = if n == 1 { 0.0 } else { 1.0 - 2.0 * (i as f64 + 0.5) / n as f64 };
        let r = (1.0 - z * z).max(0.0).sqrt();
        let phi = golden * i as f64;
        let unit = match c {
            0 => r * phi.cos(),
            1 => r * phi.sin(),
            _ => z,
        };
        center + 0.1 * unit
    });
    let faces: Vec<[u32; 3]> = (1..n.saturating_sub(1)).map(|i| [0, i as u32, i as u32 + 1]).collect();
    (vertices, std::sync::Arc::new(faces))
}

/// Largest displacement coordinate any feature window can produce under the
/// given maps: feature entries never leave [-1, 1], so the worst case per
/// output coordinate is the L1 norm of its map row.
fn worst_case_gain(maps: &BTreeMap<String, Mat<f64>>) -> f64 {
    let mut gain = 0.0f64;
    for g in maps.values() {
        for r in 0..g.rows() {
            gain = gain.max(g.row(r).iter().map(|v| v.abs()).sum());
        }
    }
    gain
}

fn subject_map(n_vertices: usize, window: usize, feature_dim: usize, seed: u64, subject: &str) -> Mat<f64> {
    use rand::Rng;
    let rows = 3 * n_vertices;
    let cols = window * feature_dim;
    let rank = 2.min(rows).min(cols);
    let mut rng = crate::rng::seeded_rng(seed, &format!("synthetic-map/{}", subject));
    let a = Mat::from_fn(rows, rank, |_, _| rng.gen_range(-1.0f64..1.0));
    let b = Mat::from_fn(rank, cols, |_, _| rng.gen_range(-1.0f64..1.0));
    let mut g = a.matmul(&b).unwrap();

    // Power iteration for the spectral norm, then rescale to the target.
    let mut x = vec![1.0 / (cols as f64).sqrt(); cols];
    let mut sigma = 0.0;
    for _ in 0..50 {
        let mut y = vec![0.0; rows];
        for (r, slot) in y.iter_mut().enumerate() {
            *slot = g.row(r).iter().zip(&x).map(|(a, b)| a * b).sum();
        }
        let mut xt = vec![0.0; cols];
        for r in 0..rows {
            let yr = y[r];
            for (slot, gv) in xt.iter_mut().zip(g.row(r)) {
                *slot += gv * yr;
            }
        }
        let norm = xt.iter().map(|v| v * v).sum::<f64>().sqrt();
        sigma = norm.sqrt();
        for (slot, v) in x.iter_mut().zip(&xt) {
            *slot = v / norm;
        }
    }
    let scale = SYNTH_SPECTRAL_NORM / sigma.max(1e-300);
    for v in g.as_mut_slice() {
        *v *= scale;
    }
    g
}

/// Generate a deterministic dataset whose displacements are exactly linear in
/// the flattened feature window, with the per-subject maps returned for
/// direct evaluation.
pub fn generate_synthetic<S: Scalar>(
    spec: &SynthSpec,
    seed: u64,
) -> Result<(Dataset<S>, SyntheticOracle)> {
    use rand::Rng;
    spec.validate()?;
    let subjects: Vec<String> = (0..spec.n_subjects).map(|i| format!("s{:02}", i)).collect();
    let mut maps = BTreeMap::new();
    for subject in &subjects {
        maps.insert(
            subject.clone(),
            subject_map(spec.n_vertices, spec.window, spec.feature_dim, seed, subject),
        );
    }

    // Place the template far enough out that no reachable displacement can
    // push a mesh coordinate below half its template coordinate, keeping
    // displacement extraction exact for every sizing and seed.
    let center = (2.0 * worst_case_gain(&maps) + 0.3).max(2.0);
    let (template_f64, topology) = synthetic_template(spec.n_vertices, center);
    let template: Mat<S> = template_f64.convert();

    let mut templates = BTreeMap::new();
    for subject in &subjects {
        templates.insert(subject.clone(), Mesh::new(template.clone(), topology.clone())?);
    }

    let mut sequences = Vec::new();
    for subject in &subjects {
        let g = &maps[subject];
        for sentence_idx in 0..spec.n_sentences {
            let sentence = format!("t{:02}", sentence_idx);
            let mut rng =
                crate::rng::seeded_rng(seed, &format!("synthetic-features/{}/{}", subject, sentence));
            // Low-pass filtered noise: a one-pole smoother over uniform draws.
            let mut frames = Mat::<S>::zeros(spec.frames_per_seq, spec.feature_dim);
            let mut state = vec![0.0f64; spec.feature_dim];
            for t in 0..spec.frames_per_seq {
                for (d, s) in state.iter_mut().enumerate() {
                    let x = rng.gen_range(-1.0f64..1.0);
                    *s = if t == 0 { x } else { 0.1 * x + 0.9 * *s };
                    frames[(t, d)] = sc(*s);
                }
            }
            let features = FeatureSequence::new(frames, VIDEO_FPS, FeatureKind::ImportedLogits)?;
            let windows = window_features(&features, spec.window)?;

            let mut mesh_frames = Vec::with_capacity(spec.frames_per_seq);
            for i in 0..windows.len() {
                let w = windows.window(i);
                let mut mesh = Mat::zeros(spec.n_vertices, 3);
                for r in 0..3 * spec.n_vertices {
                    let mut acc = 0.0;
                    for (gv, wv) in g.row(r).iter().zip(w.as_slice()) {
                        acc += gv * wv.to_f64_c();
                    }
                    mesh[(r / 3, r % 3)] = sc(template_f64[(r / 3, r % 3)] + acc);
                }
                mesh_frames.push(mesh);
            }
            sequences.push(Sequence::new(
                subject.clone(),
                sentence,
                features,
                MeshSequence::new(mesh_frames)?,
                spec.window,
            )?);
        }
    }
    let dataset = build_dataset(sequences, templates)?;
    Ok((dataset, SyntheticOracle { maps, spectral_norm: SYNTH_SPECTRAL_NORM }))
}

/// Write a dataset directory: `templates/<subject>.ply` plus one
/// `sequences/seq<i>/` per sequence holding the feature container, the mesh
/// container, and a `meta.txt` with subject, sentence, fps, and window size.
pub fn save_dataset<S: Scalar>(dataset: &Dataset<S>, dir: &Path) -> Result<()> {
    let templates_dir = dir.join("templates");
    std::fs::create_dir_all(&templates_dir)?;
    for (subject, mesh) in &dataset.templates {
        export_ply(mesh, &templates_dir.join(format!("{}.ply", subject)))?;
    }
    for (i, seq) in dataset.sequences.iter().enumerate() {
        let seq_dir = dir.join("sequences").join(format!("seq{:04}", i));
        std::fs::create_dir_all(&seq_dir)?;
        crate::audio::export_features(&seq.features, &seq_dir.join("features.vfea"))?;
        save_mesh_sequence(&seq.meshes, &seq_dir.join("meshes.vmsq"))?;
        let meta = format!(
            "subject: {}\nsentence: {}\nfps: {}\nwindow: {}\n",
            seq.subject,
            seq.sentence,
            seq.features.fps,
            seq.windows.window_len()
        );
        crate::io_util::atomic_write(&seq_dir.join("meta.txt"), |w| {
            w.write_all(meta.as_bytes())?;
            Ok(())
        })?;
    }
    Ok(())
}

fn parse_meta(text: &str, path: &Path) -> Result<(String, String, f32, usize)> {
    let mut subject = None;
    let mut sentence = None;
    let mut fps = None;
    let mut window = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| VocaError::Format(format!("bad metadata line in {}", path.display())))?;
        let value = value.trim();
        match key.trim() {
            "subject" => subject = Some(value.to_string()),
            "sentence" => sentence = Some(value.to_string()),
            "fps" => {
                fps = Some(value.parse::<f32>().map_err(|_| {
                    VocaError::Format(format!("bad fps in {}", path.display()))
                })?)
            }
            "window" => {
                window = Some(value.parse::<usize>().map_err(|_| {
                    VocaError::Format(format!("bad window in {}", path.display()))
                })?)
            }
            other => {
                return Err(VocaError::Format(format!(
                    "unknown metadata key {:?} in {}",
                    other,
                    path.display()
                )))
            }
        }
    }
    match (subject, sentence, fps, window) {
        (Some(s), Some(t), Some(f), Some(w)) => Ok((s, t, f, w)),
        _ => Err(VocaError::Format(format!("incomplete metadata in {}", path.display()))),
    }
}

/// Read a dataset directory written by `save_dataset`.
pub fn load_dataset<S: Scalar>(dir: &Path) -> Result<Dataset<S>> {
    let templates_dir = dir.join("templates");
    let mut templates = BTreeMap::new();
    let mut names: Vec<_> = std::fs::read_dir(&templates_dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "ply"))
        .collect();
    names.sort();
    for path in names {
        let subject = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| VocaError::Format(format!("bad template name {}", path.display())))?
            .to_string();
        templates.insert(subject, import_ply(&path)?);
    }

    let sequences_dir = dir.join("sequences");
    let mut seq_dirs: Vec<_> = std::fs::read_dir(&sequences_dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    seq_dirs.sort();
    let mut sequences = Vec::new();
    for seq_dir in seq_dirs {
        let meta_path = seq_dir.join("meta.txt");
        let (subject, sentence, fps, window) =
            parse_meta(&std::fs::read_to_string(&meta_path)?, &meta_path)?;
        let features = crate::audio::import_features::<S>(&seq_dir.join("features.vfea"))?;
        if (features.fps - fps).abs() > 1e-3 {
            return Err(VocaError::Data(format!(
                "metadata says {} fps but features carry {}",
                fps,
                features.fps
            )));
        }
        let meshes = load_mesh_sequence::<S>(&seq_dir.join("meshes.vmsq"))?;
        sequences.push(Sequence::new(subject, sentence, features, meshes, window)?);
    }
    build_dataset(sequences, templates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            n_subjects: 2,
            n_sentences: 2,
            frames_per_seq: 30,
            n_vertices: 10,
            feature_dim: 3,
            window: 4,
        }
    }

    #[test]
    fn sequence_rejects_frame_count_mismatch() {
        let features = FeatureSequence::<f32>::new(Mat::zeros(5, 2), 60.0, FeatureKind::Fbank).unwrap();
        let meshes = MeshSequence::new(vec![Mat::zeros(3, 3); 4]).unwrap();
        assert!(matches!(
            Sequence::new("a", "b", features, meshes, 2).unwrap_err(),
            VocaError::Data(_)
        ));
    }

    #[test]
    fn build_dataset_requires_templates() {
        let features = FeatureSequence::<f32>::new(Mat::zeros(3, 2), 60.0, FeatureKind::Fbank).unwrap();
        let meshes = MeshSequence::new(vec![Mat::zeros(3, 3); 3]).unwrap();
        let seq = Sequence::new("ghost", "x", features, meshes, 2).unwrap();
        let err = build_dataset(vec![seq], BTreeMap::new()).unwrap_err();
        assert!(matches!(err, VocaError::Data(_)));
    }

    #[test]
    fn displacement_is_zero_when_mesh_equals_template() {
        let template = Mat::from_fn(4, 3, |r, c| 0.2 + 0.01 * (r * 3 + c) as f32);
        let features = FeatureSequence::<f32>::new(Mat::zeros(3, 2), 60.0, FeatureKind::Fbank).unwrap();
        let meshes = MeshSequence::new(vec![template.clone(); 3]).unwrap();
        let seq = Sequence::new("a", "x", features, meshes, 2).unwrap();
        let mut templates = BTreeMap::new();
        templates.insert("a".to_string(), Mesh::new(template, std::sync::Arc::new(vec![])).unwrap());
        let dataset = build_dataset(vec![seq], templates).unwrap();
        let d = dataset.displacement(0, 1).unwrap();
        assert!(d.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn displacement_plus_template_reconstructs_meshes_bit_exactly() {
        fn check<S: Scalar>() {
            let (dataset, _) = generate_synthetic::<S>(&small_spec(), 11).unwrap();
            for (si, seq) in dataset.sequences.iter().enumerate() {
                let template = &dataset.templates[&seq.subject].vertices;
                for f in 0..seq.n_frames() {
                    let d = dataset.displacement(si, f).unwrap();
                    let mesh = seq.meshes.frame(f);
                    for r in 0..d.rows() {
                        for c in 0..3 {
                            let back = d[(r, c)] + template[(r, c)];
                            assert!(back == mesh[(r, c)], "reconstruction not exact");
                        }
                    }
                }
            }
        }
        check::<f32>();
        check::<f64>();
    }

    #[test]
    fn reference_layout_yields_320_training_sequences() {
        let spec = SynthSpec {
            n_subjects: 8,
            n_sentences: 40,
            frames_per_seq: 2,
            n_vertices: 3,
            feature_dim: 2,
            window: 2,
        };
        let (dataset, _) = generate_synthetic::<f32>(&spec, 0).unwrap();
        assert_eq!(dataset.sequences.len(), 320);
        let split_spec = SplitSpec {
            train_subjects: dataset.subjects(),
            ..SplitSpec::default()
        };
        let split = split_dataset(&dataset, &split_spec).unwrap();
        assert_eq!(split.train.len(), 320);
        assert!(split.val.is_empty() && split.test.is_empty());
    }

    #[test]
    fn split_rejects_overlap_and_unassigned_subjects() {
        let (dataset, _) = generate_synthetic::<f32>(&small_spec(), 3).unwrap();
        let overlap = SplitSpec {
            train_subjects: vec!["s00".into(), "s01".into()],
            test_subjects: vec!["s01".into()],
            ..SplitSpec::default()
        };
        assert!(matches!(split_dataset(&dataset, &overlap).unwrap_err(), VocaError::Config(_)));

        let partial = SplitSpec { train_subjects: vec!["s00".into()], ..SplitSpec::default() };
        assert!(matches!(split_dataset(&dataset, &partial).unwrap_err(), VocaError::Config(_)));
    }

    #[test]
    fn split_rejects_shared_sentences_across_splits() {
        // Both subjects speak the same sentences, so subject-splitting them
        // must fail the sentence-disjointness check.
        let (dataset, _) = generate_synthetic::<f32>(&small_spec(), 4).unwrap();
        let spec = SplitSpec {
            train_subjects: vec!["s00".into()],
            val_subjects: vec!["s01".into()],
            ..SplitSpec::default()
        };
        let err = split_dataset(&dataset, &spec).unwrap_err();
        assert!(matches!(err, VocaError::Config(_)));
    }

    #[test]
    fn split_honors_sentence_exclusions() {
        let (dataset, _) = generate_synthetic::<f32>(&small_spec(), 5).unwrap();
        let spec = SplitSpec {
            train_subjects: dataset.subjects(),
            train_exclude: vec!["t01".into()],
            ..SplitSpec::default()
        };
        assert!(matches!(split_dataset(&dataset, &spec).unwrap_err(), VocaError::Config(_)));
    }

    #[test]
    fn disjoint_sentences_split_cleanly() {
        // Give each subject its own sentences by renaming.
        let (mut dataset, _) = generate_synthetic::<f32>(&small_spec(), 6).unwrap();
        for seq in dataset.sequences.iter_mut() {
            seq.sentence = format!("{}-{}", seq.subject, seq.sentence);
        }
        let spec = SplitSpec {
            train_subjects: vec!["s00".into()],
            val_subjects: vec!["s01".into()],
            ..SplitSpec::default()
        };
        let split = split_dataset(&dataset, &spec).unwrap();
        assert_eq!(split.train.len(), 2);
        assert_eq!(split.val.len(), 2);
        assert_eq!(subject_table(&dataset, &split.train), vec!["s00".to_string()]);
    }

    #[test]
    fn split_spec_text_round_trip() {
        let spec = SplitSpec {
            train_subjects: vec!["a".into(), "b".into()],
            val_subjects: vec!["c".into()],
            test_subjects: vec!["d".into()],
            train_exclude: vec!["x".into(), "y".into()],
            val_exclude: vec![],
            test_exclude: vec!["z".into()],
        };
        let text = spec.to_text();
        assert_eq!(parse_split_spec(&text).unwrap(), spec);
        let commented = format!("# header\n{}\n# trailing\n", text);
        assert_eq!(parse_split_spec(&commented).unwrap(), spec);
        assert!(parse_split_spec("bogus-key: a").is_err());
    }

    #[test]
    fn synthetic_is_seed_deterministic() {
        let (a, _) = generate_synthetic::<f32>(&small_spec(), 7).unwrap();
        let (b, _) = generate_synthetic::<f32>(&small_spec(), 7).unwrap();
        for (sa, sb) in a.sequences.iter().zip(&b.sequences) {
            assert_eq!(sa.features.frames.as_slice(), sb.features.frames.as_slice());
            for f in 0..sa.n_frames() {
                assert_eq!(
                    sa.meshes.frame(f).as_slice(),
                    sb.meshes.frame(f).as_slice()
                );
            }
        }
        let (c, _) = generate_synthetic::<f32>(&small_spec(), 8).unwrap();
        assert_ne!(
            a.sequences[0].features.frames.as_slice(),
            c.sequences[0].features.frames.as_slice()
        );
    }

    #[test]
    fn synthetic_counts_match_spec() {
        let spec = SynthSpec {
            n_subjects: 2,
            n_sentences: 2,
            frames_per_seq: 120,
            n_vertices: 100,
            feature_dim: 29,
            window: 16,
        };
        let (dataset, _) = generate_synthetic::<f32>(&spec, 9).unwrap();
        assert_eq!(dataset.sequences.len(), 4);
        let total: usize = dataset.sequences.iter().map(|s| s.n_frames()).sum();
        assert_eq!(total, 480);
        let w = dataset.sequences[0].windows.window(0);
        assert_eq!((w.rows(), w.cols()), (16, 29));
        assert_eq!(dataset.sequences[0].meshes.n_vertices(), 100);
    }

    #[test]
    fn oracle_map_is_linear() {
        let (dataset, oracle) = generate_synthetic::<f64>(&small_spec(), 10).unwrap();
        let seq = &dataset.sequences[0];
        let x0 = seq.windows.window(0);
        let x1 = seq.windows.window(5);
        let x2 = seq.windows.window(9);
        let combo = x1.add(&x2).unwrap().sub(x0).unwrap();
        let direct = oracle.target(&seq.subject, &combo).unwrap();
        let t0 = oracle.target(&seq.subject, x0).unwrap();
        let t1 = oracle.target(&seq.subject, x1).unwrap();
        let t2 = oracle.target(&seq.subject, x2).unwrap();
        for r in 0..direct.rows() {
            for c in 0..3 {
                let sum = t1[(r, c)] + t2[(r, c)] - t0[(r, c)];
                assert_abs_diff_eq!(direct[(r, c)], sum, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn oracle_matches_stored_displacements() {
        let (dataset, oracle) = generate_synthetic::<f64>(&small_spec(), 12).unwrap();
        for (si, seq) in dataset.sequences.iter().enumerate() {
            for f in 0..seq.n_frames() {
                let stored = dataset.displacement(si, f).unwrap();
                let predicted = oracle.target(&seq.subject, seq.windows.window(f)).unwrap();
                for r in 0..stored.rows() {
                    for c in 0..3 {
                        assert_abs_diff_eq!(stored[(r, c)], predicted[(r, c)], epsilon = 1e-12);
                    }
                }
            }
        }
    }

    /// Ordinary least squares on (window, displacement) pairs must fit the
    /// generated data essentially exactly, proving the pipeline lossless.
    #[test]
    fn ols_fit_on_synthetic_data_is_exact() {
        let (dataset, _) = generate_synthetic::<f64>(&small_spec(), 13).unwrap();
        let seqs: Vec<usize> = (0..dataset.sequences.len())
            .filter(|&i| dataset.sequences[i].subject == "s00")
            .collect();
        let p = small_spec().window * small_spec().feature_dim;
        let q = 3 * small_spec().n_vertices;
        let mut xs: Vec<Vec<f64>> = Vec::new();
        let mut ys: Vec<Vec<f64>> = Vec::new();
        for &si in &seqs {
            let seq = &dataset.sequences[si];
            for f in 0..seq.n_frames() {
                xs.push(seq.windows.window(f).as_slice().to_vec());
                ys.push(dataset.displacement(si, f).unwrap().as_slice().to_vec());
            }
        }
        let m = xs.len();
        // Normal equations solved by Gaussian elimination with pivoting.
        let mut a = vec![vec![0.0f64; p]; p];
        let mut b = vec![vec![0.0f64; q]; p];
        for i in 0..m {
            for r in 0..p {
                let xr = xs[i][r];
                for c in 0..p {
                    a[r][c] += xr * xs[i][c];
                }
                for c in 0..q {
                    b[r][c] += xr * ys[i][c];
                }
            }
        }
        for col in 0..p {
            let pivot = (col..p).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, pivot);
            b.swap(col, pivot);
            let diag = a[col][col];
            assert!(diag.abs() > 1e-12, "design matrix unexpectedly singular");
            for r in 0..p {
                if r == col {
                    continue;
                }
                let factor = a[r][col] / diag;
                for c in 0..p {
                    a[r][c] -= factor * a[col][c];
                }
                for c in 0..q {
                    b[r][c] -= factor * b[col][c];
                }
            }
        }
        let w: Vec<Vec<f64>> = (0..p).map(|r| b[r].iter().map(|v| v / a[r][r]).collect()).collect();
        let mut err = 0.0f64;
        let mut norm = 0.0f64;
        for i in 0..m {
            for c in 0..q {
                let pred: f64 = (0..p).map(|r| xs[i][r] * w[r][c]).sum();
                err += (pred - ys[i][c]).powi(2);
                norm += ys[i][c].powi(2);
            }
        }
        assert!((err / norm).sqrt() <= 1e-6, "relative residual {}", (err / norm).sqrt());
    }

    #[test]
    fn dataset_directory_round_trip() {
        let (dataset, _) = generate_synthetic::<f32>(&small_spec(), 14).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&dataset, dir.path()).unwrap();
        let back = load_dataset::<f32>(dir.path()).unwrap();
        assert_eq!(back.sequences.len(), dataset.sequences.len());
        assert_eq!(back.subjects(), dataset.subjects());
        for (a, b) in back.sequences.iter().zip(&dataset.sequences) {
            assert_eq!(a.subject, b.subject);
            assert_eq!(a.sentence, b.sentence);
            assert_eq!(a.features.frames.as_slice(), b.features.frames.as_slice());
            assert_eq!(a.windows.window_len(), b.windows.window_len());
            for f in 0..a.n_frames() {
                assert_eq!(a.meshes.frame(f).as_slice(), b.meshes.frame(f).as_slice());
            }
        }
        for (subject, mesh) in &back.templates {
            let orig = &dataset.templates[subject];
            assert_eq!(mesh.vertices.as_slice(), orig.vertices.as_slice());
            assert_eq!(mesh.topology.as_slice(), orig.topology.as_slice());
        }
    }
}
