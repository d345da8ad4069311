//! Objectives and data: quadratic/least-squares instances (with Gaussian or
//! adversarial two-point noise), the 16-bit-target scalar toy, a small analog
//! MLP, and IDX dataset ingestion.

use crate::composite::{CompositeError, CompositeWeight};
use byteorder::{BigEndian, ReadBytesExt};
use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use std::io::Read;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("adversarial noise mode requires all coordinates of W identical (found {a} vs {b})")]
    NotScalarReplicated { a: f64, b: f64 },
    #[error("adversarial noise probability p = {p} outside [0, 1] (|w| > tau_max?)")]
    ProbabilityOutOfRange { p: f64 },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("bad IDX magic 0x{got:08x} at offset 0 (expected 0x{expected:08x}) in {path}")]
    BadMagic { got: u32, expected: u32, path: String },
    #[error("truncated IDX file {path}: expected {expected} bytes of payload, got {got}")]
    Truncated { path: String, expected: usize, got: usize },
    #[error("IDX label count {labels} does not match image count {images}")]
    CountMismatch { images: usize, labels: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Composite(#[from] CompositeError),
}

/// Stochastic-gradient noise model for the quadratic problem.
#[derive(Debug, Clone, Copy)]
pub enum NoiseModel {
    None,
    /// Zero-mean isotropic Gaussian with per-coordinate variance sigma^2 / D.
    Gaussian { sigma: f64 },
    /// Two-point adversarial noise: a single scalar draw, replicated across
    /// coordinates, with state-dependent sign probability
    /// p_t = (1 - w_t / tau_max) / 2. Unbiased with E[eps^2] = sigma^2 / D
    /// per coordinate, but correlated with the saturation state.
    Adversarial { sigma: f64, tau_max: f64 },
}

/// Stochastic gradient of f(W) = (L/2) ||W - W*||^2 under the chosen noise.
pub fn quadratic_grad(
    w: ArrayView1<f64>,
    wstar: ArrayView1<f64>,
    l: f64,
    noise: NoiseModel,
    rng: &mut impl Rng,
) -> Result<Array1<f64>, ProblemError> {
    if w.len() != wstar.len() {
        return Err(ProblemError::ShapeMismatch { expected: wstar.len(), got: w.len() });
    }
    let mut g = (&w - &wstar) * l;
    let d = w.len() as f64;
    match noise {
        NoiseModel::None => {}
        NoiseModel::Gaussian { sigma } => {
            let scale = sigma / d.sqrt();
            for gi in g.iter_mut() {
                *gi += scale * sample_standard_normal(rng);
            }
        }
        NoiseModel::Adversarial { sigma, tau_max } => {
            let w0 = w[0];
            for &wi in w.iter() {
                if wi != w0 {
                    return Err(ProblemError::NotScalarReplicated { a: w0, b: wi });
                }
            }
            let p = 0.5 * (1.0 - w0 / tau_max);
            if !(0.0..=1.0).contains(&p) {
                return Err(ProblemError::ProbabilityOutOfRange { p });
            }
            let scale = sigma / d.sqrt();
            // Degenerate p in {0, 1} forces the zero-probability branch's
            // magnitude to 0, keeping the draw well defined.
            let eps = if rng.gen::<f64>() < p {
                if p > 0.0 { scale * ((1.0 - p) / p).sqrt() } else { 0.0 }
            } else if p < 1.0 {
                -scale * (p / (1.0 - p)).sqrt()
            } else {
                0.0
            };
            for gi in g.iter_mut() {
                *gi += eps;
            }
        }
    }
    Ok(g)
}

fn sample_standard_normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller; rand_distr is avoided to keep the dependency set small.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Scalar target on the uniform 16-bit grid over [-1, 1]:
/// b = -1 + k * 2 / (2^16 - 1) with k uniform in {0, ..., 2^16 - 1}.
pub fn toy_target_16bit(rng: &mut impl Rng) -> f64 {
    let k: u32 = rng.gen_range(0..(1u32 << 16));
    quantize_16bit(k)
}

pub fn quantize_16bit(k: u32) -> f64 {
    -1.0 + k as f64 * 2.0 / ((1u32 << 16) as f64 - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    SoftmaxCrossEntropy,
    Mse,
}

/// Small fully-connected network whose linear layers live on analog
/// composites; activations are exact digital tanh.
#[derive(Debug, Clone)]
pub struct MlpSpec {
    /// Layer widths, e.g. [784, 64, 10].
    pub layers: Vec<usize>,
    pub loss: LossKind,
}

impl MlpSpec {
    pub fn new(layers: Vec<usize>, loss: LossKind) -> Self {
        MlpSpec { layers, loss }
    }

    pub fn num_analog_layers(&self) -> usize {
        self.layers.len() - 1
    }
}

/// Classification label or regression target for one sample.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Label(usize),
    Vector(ArrayView1<'a, f64>),
}

/// Forward + backward pass through the analog MLP. Returns the exact loss
/// and one (input, error) pair per analog layer; the rank-1 update for layer
/// i is -alpha * x_i delta_i^T.
pub fn mlp_forward_backward(
    spec: &MlpSpec,
    composites: &[CompositeWeight],
    x: ArrayView1<f64>,
    target: Target,
) -> Result<(f64, Vec<(Array1<f64>, Array1<f64>)>), ProblemError> {
    let n_layers = spec.num_analog_layers();
    if composites.len() != n_layers {
        return Err(ProblemError::ShapeMismatch { expected: n_layers, got: composites.len() });
    }
    if x.len() != spec.layers[0] {
        return Err(ProblemError::ShapeMismatch { expected: spec.layers[0], got: x.len() });
    }
    for (i, cw) in composites.iter().enumerate() {
        if cw.rows() != spec.layers[i] || cw.cols() != spec.layers[i + 1] {
            return Err(ProblemError::ShapeMismatch {
                expected: spec.layers[i] * spec.layers[i + 1],
                got: cw.rows() * cw.cols(),
            });
        }
    }

    // Forward: analog matrix-vector reads + exact tanh on hidden layers.
    let mut inputs: Vec<Array1<f64>> = vec![x.to_owned()];
    let mut z_last = Array1::zeros(0);
    for (i, cw) in composites.iter().enumerate() {
        let z = cw.forward(inputs[i].view())?;
        if i + 1 < n_layers {
            inputs.push(z.map(|&v| v.tanh()));
        } else {
            z_last = z;
        }
    }

    let (loss, delta_out) = match (spec.loss, target) {
        (LossKind::SoftmaxCrossEntropy, Target::Label(label)) => {
            if label >= z_last.len() {
                return Err(ProblemError::ShapeMismatch { expected: z_last.len(), got: label });
            }
            let zmax = z_last.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps = z_last.map(|&v| (v - zmax).exp());
            let sum: f64 = exps.sum();
            let loss = sum.ln() + zmax - z_last[label];
            let mut delta = exps / sum;
            delta[label] -= 1.0;
            (loss, delta)
        }
        (LossKind::Mse, Target::Vector(t)) => {
            if t.len() != z_last.len() {
                return Err(ProblemError::ShapeMismatch { expected: z_last.len(), got: t.len() });
            }
            let diff = &z_last - &t;
            let loss = 0.5 * diff.iter().map(|&v| v * v).sum::<f64>();
            (loss, diff)
        }
        (LossKind::SoftmaxCrossEntropy, Target::Vector(_)) | (LossKind::Mse, Target::Label(_)) => {
            return Err(ProblemError::ShapeMismatch { expected: 0, got: 1 });
        }
    };

    // Backward: per-layer error delta_i = dLoss/dz_i.
    let mut deltas = vec![Array1::zeros(0); n_layers];
    deltas[n_layers - 1] = delta_out;
    for i in (0..n_layers - 1).rev() {
        let back = composites[i + 1].backward(deltas[i + 1].view())?;
        let a = &inputs[i + 1];
        deltas[i] = Array1::from_shape_fn(a.len(), |j| back[j] * (1.0 - a[j] * a[j]));
    }

    Ok((loss, inputs.into_iter().zip(deltas).collect()))
}

/// Forward + backward pass evaluated on dense weight matrices (same math as
/// `mlp_forward_backward`, without composites); used by two-tile baselines
/// whose forward weight is a single tile.
pub fn mlp_forward_backward_dense(
    spec: &MlpSpec,
    weights: &[Array2<f64>],
    x: ArrayView1<f64>,
    target: Target,
) -> Result<(f64, Vec<(Array1<f64>, Array1<f64>)>), ProblemError> {
    let n_layers = spec.num_analog_layers();
    if weights.len() != n_layers {
        return Err(ProblemError::ShapeMismatch { expected: n_layers, got: weights.len() });
    }
    let mut inputs: Vec<Array1<f64>> = vec![x.to_owned()];
    let mut z_last = Array1::zeros(0);
    for (i, w) in weights.iter().enumerate() {
        if w.nrows() != inputs[i].len() {
            return Err(ProblemError::ShapeMismatch { expected: w.nrows(), got: inputs[i].len() });
        }
        let z = inputs[i].dot(w);
        if i + 1 < n_layers {
            inputs.push(z.map(|&v| v.tanh()));
        } else {
            z_last = z;
        }
    }
    let (loss, delta_out) = match (spec.loss, target) {
        (LossKind::SoftmaxCrossEntropy, Target::Label(label)) => {
            if label >= z_last.len() {
                return Err(ProblemError::ShapeMismatch { expected: z_last.len(), got: label });
            }
            let zmax = z_last.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps = z_last.map(|&v| (v - zmax).exp());
            let sum: f64 = exps.sum();
            let loss = sum.ln() + zmax - z_last[label];
            let mut delta = exps / sum;
            delta[label] -= 1.0;
            (loss, delta)
        }
        (LossKind::Mse, Target::Vector(t)) => {
            if t.len() != z_last.len() {
                return Err(ProblemError::ShapeMismatch { expected: z_last.len(), got: t.len() });
            }
            let diff = &z_last - &t;
            let loss = 0.5 * diff.iter().map(|&v| v * v).sum::<f64>();
            (loss, diff)
        }
        _ => return Err(ProblemError::ShapeMismatch { expected: 0, got: 1 }),
    };
    let mut deltas = vec![Array1::zeros(0); n_layers];
    deltas[n_layers - 1] = delta_out;
    for i in (0..n_layers - 1).rev() {
        let back = weights[i + 1].dot(&deltas[i + 1]);
        let a = &inputs[i + 1];
        deltas[i] = Array1::from_shape_fn(a.len(), |j| back[j] * (1.0 - a[j] * a[j]));
    }
    Ok((loss, inputs.into_iter().zip(deltas).collect()))
}

/// Loss of the same MLP evaluated on dense weight matrices; used by the
/// finite-difference oracle and by digital baselines.
pub fn mlp_loss_dense(
    spec: &MlpSpec,
    weights: &[Array2<f64>],
    x: ArrayView1<f64>,
    target: Target,
) -> Result<f64, ProblemError> {
    let n_layers = spec.num_analog_layers();
    if weights.len() != n_layers {
        return Err(ProblemError::ShapeMismatch { expected: n_layers, got: weights.len() });
    }
    let mut a = x.to_owned();
    let mut z = Array1::zeros(0);
    for (i, w) in weights.iter().enumerate() {
        if w.nrows() != a.len() {
            return Err(ProblemError::ShapeMismatch { expected: w.nrows(), got: a.len() });
        }
        z = a.dot(w);
        if i + 1 < n_layers {
            a = z.map(|&v| v.tanh());
        }
    }
    match (spec.loss, target) {
        (LossKind::SoftmaxCrossEntropy, Target::Label(label)) => {
            let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = z.iter().map(|&v| (v - zmax).exp()).sum();
            Ok(sum.ln() + zmax - z[label])
        }
        (LossKind::Mse, Target::Vector(t)) => {
            let diff = &z - &t;
            Ok(0.5 * diff.iter().map(|&v| v * v).sum::<f64>())
        }
        _ => Err(ProblemError::ShapeMismatch { expected: 0, got: 1 }),
    }
}

/// Argmax class prediction with dense weights (for test-set accuracy).
pub fn mlp_predict_dense(
    spec: &MlpSpec,
    weights: &[Array2<f64>],
    x: ArrayView1<f64>,
) -> Result<usize, ProblemError> {
    let n_layers = spec.num_analog_layers();
    let mut a = x.to_owned();
    let mut z = Array1::zeros(0);
    for (i, w) in weights.iter().enumerate() {
        if w.nrows() != a.len() {
            return Err(ProblemError::ShapeMismatch { expected: w.nrows(), got: a.len() });
        }
        z = a.dot(w);
        if i + 1 < n_layers {
            a = z.map(|&v| v.tanh());
        }
    }
    Ok(z.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
        .map(|(i, _)| i)
        .unwrap_or(0))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// An image-classification dataset: flattened pixels in [0, 1] plus labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// n x (rows * cols), pixels normalized to [0, 1].
    pub images: Array2<f64>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> (ArrayView1<'_, f64>, usize) {
        (self.images.row(i), self.labels[i] as usize)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, ProblemError> {
    std::fs::read(path).map_err(|source| ProblemError::Io { path: path.display().to_string(), source })
}

/// Loads an IDX image/label pair (big-endian, uncompressed), normalizing
/// pixels by 255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, ProblemError> {
    let img_bytes = read_file(images_path)?;
    let lbl_bytes = read_file(labels_path)?;

    let mut cur = std::io::Cursor::new(&img_bytes);
    let magic = cur.read_u32::<BigEndian>().map_err(|source| ProblemError::Io {
        path: images_path.display().to_string(),
        source,
    })?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(ProblemError::BadMagic {
            got: magic,
            expected: IDX_IMAGES_MAGIC,
            path: images_path.display().to_string(),
        });
    }
    let n = cur.read_u32::<BigEndian>().unwrap_or(0) as usize;
    let rows = cur.read_u32::<BigEndian>().unwrap_or(0) as usize;
    let cols = cur.read_u32::<BigEndian>().unwrap_or(0) as usize;
    let expected = n * rows * cols;
    let mut pixels = vec![0u8; expected];
    let got = cur.read(&mut pixels).unwrap_or(0);
    if got != expected {
        return Err(ProblemError::Truncated {
            path: images_path.display().to_string(),
            expected,
            got,
        });
    }

    let mut cur = std::io::Cursor::new(&lbl_bytes);
    let magic = cur.read_u32::<BigEndian>().map_err(|source| ProblemError::Io {
        path: labels_path.display().to_string(),
        source,
    })?;
    if magic != IDX_LABELS_MAGIC {
        return Err(ProblemError::BadMagic {
            got: magic,
            expected: IDX_LABELS_MAGIC,
            path: labels_path.display().to_string(),
        });
    }
    let n_labels = cur.read_u32::<BigEndian>().unwrap_or(0) as usize;
    let mut labels = vec![0u8; n_labels];
    let got = cur.read(&mut labels).unwrap_or(0);
    if got != n_labels {
        return Err(ProblemError::Truncated {
            path: labels_path.display().to_string(),
            expected: n_labels,
            got,
        });
    }
    if n_labels != n {
        return Err(ProblemError::CountMismatch { images: n, labels: n_labels });
    }

    let images = Array2::from_shape_fn((n, rows * cols), |(i, j)| {
        pixels[i * rows * cols + j] as f64 / 255.0
    });
    Ok(Dataset { images, labels })
}

/// Writes an IDX image/label pair; used to generate synthetic fixtures.
pub fn write_idx(
    images_path: &Path,
    labels_path: &Path,
    pixels: &[u8],
    labels: &[u8],
    rows: usize,
    cols: usize,
) -> Result<(), ProblemError> {
    let n = labels.len();
    if pixels.len() != n * rows * cols {
        return Err(ProblemError::ShapeMismatch { expected: n * rows * cols, got: pixels.len() });
    }
    let mut img = Vec::with_capacity(16 + pixels.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    img.extend_from_slice(pixels);
    std::fs::write(images_path, img)
        .map_err(|source| ProblemError::Io { path: images_path.display().to_string(), source })?;

    let mut lbl = Vec::with_capacity(8 + n);
    lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(n as u32).to_be_bytes());
    lbl.extend_from_slice(labels);
    std::fs::write(labels_path, lbl)
        .map_err(|source| ProblemError::Io { path: labels_path.display().to_string(), source })
}

/// Synthetic 10-class digit-like dataset: each class is a fixed blurred
/// prototype over a 28x28 grid plus pixel noise. Linearly separable enough
/// for a small MLP yet nontrivial under quantized analog training.
pub fn synthetic_digits(n: usize, seed: u64, noise: f64) -> Dataset {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5917_a3c4_d2e1_08ff);
    let side = 28usize;
    let dim = side * side;
    // Class prototypes: two bright blobs per class at class-dependent
    // positions, mimicking stroke structure.
    let mut protos = Vec::with_capacity(10);
    for c in 0..10usize {
        let mut p = vec![0.0f64; dim];
        let centers = [
            ((5 + 2 * c) % 22 + 3, (3 * c + 4) % 22 + 3),
            ((17 * c + 9) % 22 + 3, (7 * c + 13) % 22 + 3),
        ];
        for (cy, cx) in centers {
            for y in 0..side {
                for x in 0..side {
                    let dy = y as f64 - cy as f64;
                    let dx = x as f64 - cx as f64;
                    p[y * side + x] += (-(dy * dy + dx * dx) / 18.0).exp();
                }
            }
        }
        for v in p.iter_mut() {
            *v = v.min(1.0);
        }
        protos.push(p);
    }
    let mut images = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = rng.gen_range(0..10usize);
        labels.push(c as u8);
        for j in 0..dim {
            let v = protos[c][j] + noise * (rng.gen::<f64>() - 0.5);
            images[[i, j]] = v.clamp(0.0, 1.0);
        }
    }
    Dataset { images, labels }
}

/// Serializes a dataset back to IDX fixture files (8-bit quantized).
pub fn dataset_to_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<(), ProblemError> {
    let n = ds.len();
    let dim = ds.images.ncols();
    let side = (dim as f64).sqrt() as usize;
    let pixels: Vec<u8> = ds.images.iter().map(|&v| (v * 255.0).round() as u8).collect();
    write_idx(images_path, labels_path, &pixels, &ds.labels, side, dim / side.max(1))?;
    let _ = n;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::DeviceModel;
    use crate::tile::{Tile, TileInit};
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_grad_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = quadratic_grad(
            array![0.5].view(),
            array![0.5].view(),
            3.0,
            NoiseModel::None,
            &mut rng,
        )
        .unwrap();
        assert_eq!(g[0], 0.0);

        let g = quadratic_grad(
            array![1.0].view(),
            array![0.0].view(),
            2.0,
            NoiseModel::None,
            &mut rng,
        )
        .unwrap();
        assert_eq!(g[0], 2.0);
    }

    #[test]
    fn adversarial_noise_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (sigma, tau) = (0.3, 1.0);
        let w = array![0.4];
        let wstar = array![0.4]; // gradient term vanishes; isolate the noise
        let trials = 200_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..trials {
            let g = quadratic_grad(
                w.view(),
                wstar.view(),
                1.0,
                NoiseModel::Adversarial { sigma, tau_max: tau },
                &mut rng,
            )
            .unwrap();
            s1 += g[0];
            s2 += g[0] * g[0];
        }
        let mean = s1 / trials as f64;
        let var = s2 / trials as f64 - mean * mean;
        assert!(mean.abs() < 5.0 * sigma / (trials as f64).sqrt(), "mean {mean}");
        assert_relative_eq!(var, sigma * sigma, epsilon = 0.01);
    }

    #[test]
    fn adversarial_requires_identical_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = quadratic_grad(
            array![0.1, 0.2].view(),
            array![0.0, 0.0].view(),
            1.0,
            NoiseModel::Adversarial { sigma: 0.1, tau_max: 1.0 },
            &mut rng,
        );
        assert!(matches!(err, Err(ProblemError::NotScalarReplicated { .. })));
    }

    #[test]
    fn toy_target_grid_endpoints() {
        assert_eq!(quantize_16bit(0), -1.0);
        assert_eq!(quantize_16bit((1 << 16) - 1), 1.0);
        let mid = quantize_16bit(1 << 15);
        assert!((mid - 1.5259e-5).abs() < 1e-8, "midpoint {mid}");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let b = toy_target_16bit(&mut rng);
            assert!((-1.0..=1.0).contains(&b));
        }
    }

    fn composite_from_dense(w: Array2<f64>, tau: f64) -> CompositeWeight {
        let model = DeviceModel::ideal(tau, 1e-4).unwrap();
        let (r, c) = w.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tile = Tile::new(r, c, model, TileInit::Given(w), &mut rng).unwrap();
        CompositeWeight::with_scales(vec![tile], vec![1.0], vec![]).unwrap()
    }

    #[test]
    fn zero_network_zero_target_gives_zero_loss() {
        let spec = MlpSpec::new(vec![2, 3, 2], LossKind::Mse);
        let comps = vec![
            composite_from_dense(Array2::zeros((2, 3)), 1.0),
            composite_from_dense(Array2::zeros((3, 2)), 1.0),
        ];
        let target = array![0.0, 0.0];
        let (loss, pairs) =
            mlp_forward_backward(&spec, &comps, array![0.3, -0.2].view(), Target::Vector(target.view()))
                .unwrap();
        assert_eq!(loss, 0.0);
        for (_, d) in &pairs {
            assert!(d.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_linear_layer_mse_reduces_to_quadratic() {
        let spec = MlpSpec::new(vec![1, 1], LossKind::Mse);
        let comps = vec![composite_from_dense(array![[0.4]], 1.0)];
        let target = array![0.9];
        let (loss, pairs) =
            mlp_forward_backward(&spec, &comps, array![1.0].view(), Target::Vector(target.view()))
                .unwrap();
        // f(w) = 0.5 (w - b)^2 with gradient delta * x = (w - b).
        assert_relative_eq!(loss, 0.5 * (0.4f64 - 0.9).powi(2), epsilon = 1e-12);
        assert_relative_eq!(pairs[0].1[0] * pairs[0].0[0], 0.4 - 0.9, epsilon = 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in [1u64, 2, 3] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = MlpSpec::new(vec![6, 5, 4], LossKind::SoftmaxCrossEntropy);
            let w1 = Array2::from_shape_fn((6, 5), |_| rng.gen_range(-0.5..0.5));
            let w2 = Array2::from_shape_fn((5, 4), |_| rng.gen_range(-0.5..0.5));
            let x = Array1::from_shape_fn(6, |_| rng.gen_range(-1.0..1.0));
            let label = rng.gen_range(0..4usize);
            let comps =
                vec![composite_from_dense(w1.clone(), 2.0), composite_from_dense(w2.clone(), 2.0)];
            let (_, pairs) =
                mlp_forward_backward(&spec, &comps, x.view(), Target::Label(label)).unwrap();
            let h = 1e-5;
            let dense = vec![w1.clone(), w2.clone()];
            for (layer, (xin, delta)) in pairs.iter().enumerate() {
                for i in 0..dense[layer].nrows() {
                    for j in 0..dense[layer].ncols() {
                        let analytic = xin[i] * delta[j];
                        let mut wp = dense.clone();
                        wp[layer][[i, j]] += h;
                        let lp = mlp_loss_dense(&spec, &wp, x.view(), Target::Label(label)).unwrap();
                        let mut wm = dense.clone();
                        wm[layer][[i, j]] -= h;
                        let lm = mlp_loss_dense(&spec, &wm, x.view(), Target::Label(label)).unwrap();
                        let fd = (lp - lm) / (2.0 * h);
                        let denom = analytic.abs().max(fd.abs()).max(1e-6);
                        assert!(
                            ((analytic - fd) / denom).abs() < 1e-4,
                            "seed {seed} layer {layer} ({i},{j}): {analytic} vs {fd}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn idx_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lbl = dir.path().join("lbl.idx");
        let pixels: Vec<u8> = (0..4 * 4).map(|v| (v * 16) as u8).collect();
        let labels = vec![0u8, 1, 2, 3];
        write_idx(&img, &lbl, &pixels, &labels, 2, 2).unwrap();
        let ds = load_idx(&img, &lbl).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.labels, labels);
        assert_relative_eq!(ds.images[[1, 0]], 64.0 / 255.0, epsilon = 1e-12);

        // Wrong magic on the label file.
        std::fs::write(&lbl, [0u8; 12]).unwrap();
        assert!(matches!(load_idx(&img, &lbl), Err(ProblemError::BadMagic { .. })));

        // Label count mismatch.
        write_idx(&img, &lbl, &pixels, &labels, 2, 2).unwrap();
        let mut bad = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        bad.extend_from_slice(&3u32.to_be_bytes());
        bad.extend_from_slice(&[0, 1, 2]);
        std::fs::write(&lbl, bad).unwrap();
        assert!(matches!(load_idx(&img, &lbl), Err(ProblemError::CountMismatch { .. })));

        // Truncated image payload.
        write_idx(&img, &lbl, &pixels, &labels, 2, 2).unwrap();
        let full = std::fs::read(&img).unwrap();
        std::fs::write(&img, &full[..full.len() - 3]).unwrap();
        assert!(matches!(load_idx(&img, &lbl), Err(ProblemError::Truncated { .. })));
    }

    #[test]
    fn synthetic_digits_are_deterministic_and_normalized() {
        let a = synthetic_digits(50, 7, 0.2);
        let b = synthetic_digits(50, 7, 0.2);
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        assert!(a.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(a.labels.iter().all(|&l| l < 10));
    }

    #[test]
    fn synthetic_dataset_idx_roundtrip() {
        let ds = synthetic_digits(8, 3, 0.1);
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lbl = dir.path().join("lbl.idx");
        dataset_to_idx(&ds, &img, &lbl).unwrap();
        let back = load_idx(&img, &lbl).unwrap();
        assert_eq!(back.labels, ds.labels);
        // 8-bit quantization bounds the roundtrip error.
        for (a, b) in back.images.iter().zip(ds.images.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
