//! Union of `m` rotated unit `d`-spheres in `R^n`, with exact distance and
//! projection oracles.
//!
//! Branch `k` is `{ R_k [s; 0] : s ∈ S^d }`. Writing `y = R_kᵀ x` and
//! splitting it into `p` (first `d + 1` coordinates) and `q` (the rest), the
//! nearest point of the branch is `R_k [p/‖p‖; 0]`: the radial projection
//! onto the sphere inside the `(d+1)`-subspace, with the complement zeroed.
//! Since `R_k` is an isometry the branch distance is
//! `sqrt((‖p‖ − 1)² + ‖q‖²)`. When `p = 0` every sphere point is equidistant
//! and the projection picks `e₁` of the subspace.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{sidecar_path, write_atomic, write_json_atomic, ByteReader, ByteWriter};
use crate::numeric::{norm, random_orthogonal, Mat64, Rng, Vec64};

/// Per-coordinate standard deviation of the training-data jitter.
pub const DEFAULT_NOISE_STD: f64 = 1e-3;

const DATASET_MAGIC: &[u8; 4] = b"NLCD";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldSpec {
    n: usize,
    d: usize,
    rotations: Vec<Mat64>,
    noise_std: f64,
}

impl ManifoldSpec {
    /// Draws `m` random rotations from `rng`.
    pub fn random(n: usize, d: usize, m: usize, noise_std: f64, rng: &mut Rng) -> Result<Self> {
        check_dims(n, d, m, noise_std)?;
        let rotations = (0..m).map(|_| random_orthogonal(rng, n)).collect();
        Ok(Self {
            n,
            d,
            rotations,
            noise_std,
        })
    }

    pub fn with_rotations(d: usize, rotations: Vec<Mat64>, noise_std: f64) -> Result<Self> {
        let n = rotations.first().map_or(0, |r| r.rows());
        check_dims(n, d, rotations.len(), noise_std)?;
        for r in &rotations {
            if r.shape() != (n, n) {
                return Err(Error::ShapeMismatch(format!(
                    "rotation is {:?}, expected ({n}, {n})",
                    r.shape()
                )));
            }
            let dev = r.transpose().matmul(r)?.sub(&Mat64::identity(n))?.max_abs();
            if dev > 1e-10 {
                return Err(Error::InvalidRange(format!(
                    "rotation deviates from orthogonality by {dev:.3e}"
                )));
            }
        }
        Ok(Self {
            n,
            d,
            rotations,
            noise_std,
        })
    }

    /// Single unrotated sphere (`R = I`).
    pub fn axis_aligned(n: usize, d: usize, noise_std: f64) -> Result<Self> {
        Self::with_rotations(d, vec![Mat64::identity(n)], noise_std)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn m(&self) -> usize {
        self.rotations.len()
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn rotations(&self) -> &[Mat64] {
        &self.rotations
    }

    /// Maps intrinsic coordinates `s ∈ S^d` (length `d + 1`) onto branch `k`.
    pub fn embed(&self, k: usize, s: &[f64]) -> Vec64 {
        assert_eq!(s.len(), self.d + 1);
        let r = &self.rotations[k];
        Vec64::from(
            (0..self.n)
                .map(|i| (0..=self.d).map(|j| r[(i, j)] * s[j]).sum())
                .collect::<Vec<f64>>(),
        )
    }

    fn branch(&self, k: usize, x: &[f64]) -> (Vec64, f64) {
        let y = self.rotations[k].matvec_transposed(x).expect("dimension checked by caller");
        let p_norm = norm(&y[..=self.d]);
        let q_norm = norm(&y[self.d + 1..]);
        let dist = ((p_norm - 1.0).powi(2) + q_norm * q_norm).sqrt();
        (y, dist)
    }

    fn nearest_branch(&self, x: &[f64]) -> (usize, Vec64, f64) {
        let mut best = (0, Vec64::default(), f64::INFINITY);
        for k in 0..self.m() {
            let (y, dist) = self.branch(k, x);
            if dist < best.2 {
                best = (k, y, dist);
            }
        }
        best
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::DimMismatch {
                expected: self.n,
                actual: x.len(),
            });
        }
        Ok(())
    }

    pub fn exact_distance(&self, x: &[f64]) -> Result<f64> {
        self.check_len(x)?;
        Ok(self.nearest_branch(x).2)
    }

    /// Nearest manifold point. Ties go to the lowest branch index.
    pub fn exact_projection(&self, x: &[f64]) -> Result<Vec64> {
        self.check_len(x)?;
        let (k, y, _) = self.nearest_branch(x);
        let p = &y[..=self.d];
        let p_norm = norm(p);
        let s: Vec<f64> = if p_norm > 0.0 {
            p.iter().map(|v| v / p_norm).collect()
        } else {
            let mut e1 = vec![0.0; self.d + 1];
            e1[0] = 1.0;
            e1
        };
        Ok(self.embed(k, &s))
    }

    /// Draws a uniform point of `S^d` by normalizing a `(d+1)`-dim Gaussian.
    pub fn sample_sphere(&self, rng: &mut Rng) -> Vec<f64> {
        loop {
            let g = rng.gaussian_vec(self.d + 1);
            let r = g.norm();
            if r > 0.0 {
                return g.iter().map(|v| v / r).collect();
            }
        }
    }

    /// Clean manifold point: uniform branch, uniform sphere position.
    pub fn sample_clean(&self, rng: &mut Rng) -> Vec64 {
        let k = rng.below(self.m());
        let s = self.sample_sphere(rng);
        self.embed(k, &s)
    }
}

fn check_dims(n: usize, d: usize, m: usize, noise_std: f64) -> Result<()> {
    if n == 0 || m == 0 {
        return Err(Error::InvalidRange(format!("need n >= 1 and m >= 1 (n={n}, m={m})")));
    }
    if d + 1 > n {
        return Err(Error::InvalidRange(format!("need d + 1 <= n (d={d}, n={n})")));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::InvalidRange(format!("noise_std must be >= 0, got {noise_std}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub points: Vec<Vec64>,
    pub spec: ManifoldSpec,
    pub seed: u64,
}

/// `count` points `R_k s + noise`, `k ~ U{1..m}`, `s ~ U(S^d)`,
/// `noise ~ N(0, noise_std² I)`. Per point the draws are, in order: branch
/// index, `d + 1` sphere normals, `n` jitter normals.
pub fn generate_dataset(spec: &ManifoldSpec, count: usize, rng: &mut Rng) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::InvalidRange("dataset count must be >= 1".into()));
    }
    let points = (0..count)
        .map(|_| {
            let mut x = spec.sample_clean(rng);
            let jitter = rng.gaussian_vec(spec.n());
            for (xi, ji) in x.iter_mut().zip(jitter.iter()) {
                *xi += spec.noise_std() * ji;
            }
            x
        })
        .collect();
    Ok(Dataset {
        points,
        spec: spec.clone(),
        seed: rng.seed(),
    })
}

/// JSON sidecar mirroring the binary header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub magic: String,
    pub version: u32,
    pub n: u32,
    pub d: u32,
    pub m: u32,
    pub count: u32,
    pub noise_std: f64,
    pub seed: u64,
}

impl Dataset {
    pub fn header(&self) -> DatasetHeader {
        DatasetHeader {
            magic: String::from_utf8_lossy(DATASET_MAGIC).into_owned(),
            version: DATASET_VERSION,
            n: self.spec.n() as u32,
            d: self.spec.d() as u32,
            m: self.spec.m() as u32,
            count: self.points.len() as u32,
            noise_std: self.spec.noise_std(),
            seed: self.seed,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = self.header();
        let mut w = ByteWriter::default();
        w.bytes(DATASET_MAGIC);
        for v in [h.version, h.n, h.d, h.m, h.count] {
            w.u32(v);
        }
        for r in self.spec.rotations() {
            w.f64s(r.as_slice());
        }
        for p in &self.points {
            w.f64s(p);
        }
        w.into_inner()
    }

    /// Parses the binary layout. The sidecar, when supplied, provides the
    /// jitter std and seed, which the binary header does not carry.
    pub fn from_bytes(bytes: &[u8], sidecar: Option<&DatasetHeader>) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != DATASET_MAGIC {
            return Err(Error::CorruptPayload("bad dataset magic".into()));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::VersionMismatch {
                expected: DATASET_VERSION,
                found: version,
            });
        }
        let n = r.u32()? as usize;
        let d = r.u32()? as usize;
        let m = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut rotations = Vec::with_capacity(m);
        for _ in 0..m {
            rotations.push(Mat64::from_vec(n, n, r.f64s(n * n)?)?);
        }
        let points = (0..count)
            .map(|_| r.f64s(n).map(Vec64::from))
            .collect::<Result<Vec<_>>>()?;
        if !r.is_empty() {
            return Err(Error::CorruptPayload("trailing bytes after dataset".into()));
        }
        let noise_std = sidecar.map_or(DEFAULT_NOISE_STD, |h| h.noise_std);
        let spec = ManifoldSpec::with_rotations(d, rotations, noise_std)?;
        Ok(Dataset {
            points,
            spec,
            seed: sidecar.map_or(0, |h| h.seed),
        })
    }

    /// Writes the binary file and its `.json` sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_atomic(path, &self.to_bytes())?;
        write_json_atomic(sidecar_path(path), &self.header())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        let side = sidecar_path(path);
        let header = if side.exists() {
            Some(serde_json::from_slice::<DatasetHeader>(&fs::read(side)?)?)
        } else {
            None
        };
        Self::from_bytes(&bytes, header.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::distance;

    fn circle3() -> ManifoldSpec {
        ManifoldSpec::axis_aligned(3, 1, 0.0).unwrap()
    }

    #[test]
    fn unit_circle_points() {
        let ds = generate_dataset(&circle3(), 50, &mut Rng::new(1)).unwrap();
        for p in &ds.points {
            assert_eq!(p[2], 0.0);
            assert!((p.norm() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn closed_form_distances() {
        let spec = circle3();
        assert!((spec.exact_distance(&[0.0, 0.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spec.exact_distance(&[2.0, 0.0, 1.0]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        let proj = spec.exact_projection(&[2.0, 0.0, 1.0]).unwrap();
        assert_eq!(proj.as_ref(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn origin_projects_to_first_axis() {
        let proj = circle3().exact_projection(&[0.0, 0.0, 0.7]).unwrap();
        assert_eq!(proj.as_ref(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn noiseless_points_lie_on_manifold() {
        let mut rng = Rng::new(4);
        let spec = ManifoldSpec::random(10, 2, 3, 0.0, &mut rng).unwrap();
        let ds = generate_dataset(&spec, 100, &mut rng).unwrap();
        for p in &ds.points {
            assert!(spec.exact_distance(p).unwrap() < 1e-10);
            let proj = spec.exact_projection(p).unwrap();
            assert!(distance(&proj, p) < 1e-10);
        }
    }

    #[test]
    fn jittered_points_stay_close() {
        let mut rng = Rng::new(5);
        let spec = ManifoldSpec::random(3, 1, 4, 1e-3, &mut rng).unwrap();
        let ds = generate_dataset(&spec, 10_000, &mut rng).unwrap();
        let worst = ds
            .points
            .iter()
            .map(|p| spec.exact_distance(p).unwrap())
            .fold(0.0, f64::max);
        assert!(worst <= 4e-3 * 3f64.sqrt(), "{worst}");
    }

    #[test]
    fn dense_sampling_agrees() {
        let mut rng = Rng::new(6);
        let spec = ManifoldSpec::random(5, 1, 3, 0.0, &mut rng).unwrap();
        // Dense oracle: ~333k angles per circle, 10^6 points in total.
        let per_branch = 333_334;
        for _ in 0..5 {
            let x = rng.gaussian_vec(5);
            let mut best = f64::INFINITY;
            for k in 0..3 {
                let r = &spec.rotations()[k];
                for j in 0..per_branch {
                    let th = std::f64::consts::TAU * j as f64 / per_branch as f64;
                    let (c, s) = (th.cos(), th.sin());
                    let d2: f64 = (0..5)
                        .map(|i| (x[i] - r[(i, 0)] * c - r[(i, 1)] * s).powi(2))
                        .sum();
                    best = best.min(d2);
                }
            }
            let exact = spec.exact_distance(&x).unwrap();
            assert!((best.sqrt() - exact).abs() <= 2e-3, "{} vs {exact}", best.sqrt());
        }
    }

    #[test]
    fn projection_matches_distance() {
        let mut rng = Rng::new(7);
        let spec = ManifoldSpec::random(20, 3, 4, 0.0, &mut rng).unwrap();
        for _ in 0..50 {
            let x = rng.gaussian_vec(20);
            let p = spec.exact_projection(&x).unwrap();
            let d = spec.exact_distance(&x).unwrap();
            assert!((distance(&x, &p) - d).abs() < 1e-10);
            assert!(spec.exact_distance(&p).unwrap() < 1e-10);
        }
    }

    #[test]
    fn wrong_length_rejected() {
        assert!(matches!(
            circle3().exact_distance(&[1.0, 0.0]),
            Err(Error::DimMismatch { expected: 3, actual: 2 })
        ));
    }

    #[test]
    fn invalid_dims_rejected() {
        let mut rng = Rng::new(1);
        assert!(ManifoldSpec::random(2, 2, 1, 0.0, &mut rng).is_err());
        assert!(ManifoldSpec::random(3, 1, 0, 0.0, &mut rng).is_err());
        assert!(ManifoldSpec::random(3, 1, 1, -1.0, &mut rng).is_err());
    }

    #[test]
    fn dataset_binary_round_trip() {
        let mut rng = Rng::new(8);
        let spec = ManifoldSpec::random(6, 1, 2, 1e-3, &mut rng).unwrap();
        let ds = generate_dataset(&spec, 20, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.nlcd");
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back.points, ds.points);
        assert_eq!(back.spec, ds.spec);

        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"NLCD");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 6);
        assert_eq!(bytes.len(), 24 + 8 * (2 * 36 + 20 * 6));
        assert!(matches!(
            Dataset::from_bytes(&bytes[..bytes.len() - 3], None),
            Err(Error::CorruptPayload(_))
        ));
    }
}
