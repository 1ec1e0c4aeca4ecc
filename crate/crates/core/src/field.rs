//! Dense row-major `f32` arrays, the handful of kernels the pipeline needs,
//! a splitmix64 generator with Box–Muller normals, and the LTF1 file format.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// An n-dimensional row-major array of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Field {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("zero-sized axis in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        assert!(n > 0, "zero-sized shape {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    /// Builds a rank-2 field from nested rows.
    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(&[m, n], rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, a: f32) -> Self {
        self.map(|x| a * x)
    }

    pub fn add(&self, other: &Field) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Field) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn zip_with(&self, other: &Field, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        self.require_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &Field) -> Result<f32> {
        self.require_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&x| f64::from(x) * f64::from(x))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Field) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    fn require_same_shape(&self, other: &Field) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

/// Elementwise product. `b` may also drop (or set to 1) the trailing channel
/// axis of `a`, so an H×W mask multiplies every channel of an H×W×C latent.
pub fn hadamard(a: &Field, b: &Field) -> Result<Field> {
    if a.shape == b.shape {
        return a.zip_with(b, |x, y| x * y);
    }
    let rank = a.shape.len();
    let channels = a.shape[rank - 1];
    let lead = &a.shape[..rank - 1];
    let broadcasts = rank >= 2
        && (b.shape == lead || (b.shape.len() == rank && &b.shape[..rank - 1] == lead && b.shape[rank - 1] == 1));
    if !broadcasts {
        return Err(Error::Dimension(format!(
            "cannot multiply {:?} by {:?}",
            a.shape, b.shape
        )));
    }
    let data = a
        .data
        .chunks_exact(channels)
        .zip(&b.data)
        .flat_map(|(px, &m)| px.iter().map(move |&x| x * m))
        .collect();
    Ok(Field {
        shape: a.shape.clone(),
        data,
    })
}

/// Matrix product with `f64` accumulation.
pub fn matmul(a: &Field, b: &Field) -> Result<Field> {
    let (m, k) = as_matrix(a)?;
    let (k2, n) = as_matrix(b)?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner dims {k} vs {k2}"
        )));
    }
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|x| *x = 0.0);
        for p in 0..k {
            let aip = f64::from(a.data[i * k + p]);
            let row = &b.data[p * n..(p + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(row) {
                *s += aip * f64::from(bv);
            }
        }
        for (o, s) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = *s as f32;
        }
    }
    Field::new(&[m, n], out)
}

/// `a` times the transpose of `b`, avoiding an explicit transpose.
pub fn matmul_transposed(a: &Field, b: &Field) -> Result<Field> {
    let (m, k) = as_matrix(a)?;
    let (n, k2) = as_matrix(b)?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul_transposed inner dims {k} vs {k2}"
        )));
    }
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let ar = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b.data[j * k..(j + 1) * k];
            let s: f64 = ar
                .iter()
                .zip(br)
                .map(|(&x, &y)| f64::from(x) * f64::from(y))
                .sum();
            out.push(s as f32);
        }
    }
    Field::new(&[m, n], out)
}

pub fn transpose(a: &Field) -> Result<Field> {
    let (m, n) = as_matrix(a)?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Field::new(&[n, m], out)
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(a: &Field) -> Result<Field> {
    let (_, n) = as_matrix(a)?;
    let mut out = Vec::with_capacity(a.len());
    for row in a.data.chunks_exact(n) {
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x));
        let exps: Vec<f64> = row.iter().map(|&x| f64::from(x - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| (e / total) as f32));
    }
    Field::new(&a.shape, out)
}

/// `a * x + y` elementwise.
pub fn axpy(a: f32, x: &Field, y: &Field) -> Result<Field> {
    x.zip_with(y, |xv, yv| a * xv + yv)
}

fn as_matrix(a: &Field) -> Result<(usize, usize)> {
    match a.shape[..] {
        [m, n] => Ok((m, n)),
        _ => Err(Error::Dimension(format!(
            "expected a matrix, got shape {:?}",
            a.shape
        ))),
    }
}

/// splitmix64 generator. Normals come from Box–Muller on consecutive
/// uniforms; both outputs of each pair are used, nothing is cached between
/// calls.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    fn normal_pair(&mut self) -> (f64, f64) {
        // 1 - u lies in (0, 1], keeping ln finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        (r * theta.cos(), r * theta.sin())
    }

    /// Fills a field with i.i.d. standard normals in row-major order.
    pub fn randn(&mut self, shape: &[usize]) -> Field {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n + 1);
        while data.len() < n {
            let (a, b) = self.normal_pair();
            data.push(a as f32);
            data.push(b as f32);
        }
        data.truncate(n);
        Field {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Derives an independent child seed; used to give parallel branches
    /// their own streams.
    pub fn derive_seed(seed: u64, stream: u64) -> u64 {
        let mut r = Rng::new(seed ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
        r.next_u64()
    }
}

pub fn randn(rng: &mut Rng, shape: &[usize]) -> Field {
    rng.randn(shape)
}

const LTF_MAGIC: &[u8; 4] = b"LTF1";

/// Serializes a field as LTF1: magic, u8 rank, u32 LE dims, f32 LE values.
pub fn encode_ltf(field: &Field) -> Vec<u8> {
    let mut buf = Vec::with_capacity(5 + 4 * field.shape.len() + 4 * field.len());
    buf.extend_from_slice(LTF_MAGIC);
    buf.push(field.shape.len() as u8);
    for &d in &field.shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &field.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_ltf(bytes: &[u8], path: &Path) -> Result<Field> {
    let bad = |msg: &str| Error::format(path, msg);
    if bytes.len() < 5 || &bytes[..4] != LTF_MAGIC {
        return Err(bad("missing LTF1 magic"));
    }
    let rank = bytes[4] as usize;
    if rank == 0 {
        return Err(bad("rank 0"));
    }
    let header = 5 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = bytes[5..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad("dims overflow"))?;
    if bytes.len() != header + 4 * n {
        return Err(bad("payload length does not match dims"));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Field::new(&shape, data).map_err(|e| bad(&e.to_string()))
}

pub fn read_ltf(path: &Path) -> Result<Field> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ltf(&bytes, path)
}

pub fn write_ltf(path: &Path, field: &Field) -> Result<()> {
    write_atomic(path, &encode_ltf(field))
}

/// Writes through a sibling temp file and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::format(path, "not a file path"))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m2(a: f32, b: f32, c: f32, d: f32) -> Field {
        Field::from_rows(&[&[a, b], &[c, d]]).unwrap()
    }

    #[test]
    fn hadamard_examples() {
        let a = m2(1.0, 2.0, 3.0, 4.0);
        assert_eq!(hadamard(&a, &Field::ones(&[2, 2])).unwrap(), a);
        assert_eq!(
            hadamard(&a, &Field::zeros(&[2, 2])).unwrap(),
            Field::zeros(&[2, 2])
        );
        assert_eq!(
            hadamard(&a, &m2(2.0, 0.0, 0.0, 2.0)).unwrap(),
            m2(2.0, 0.0, 0.0, 8.0)
        );
    }

    #[test]
    fn hadamard_broadcasts_mask_over_channels() {
        let latent = Field::new(&[1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let mask = Field::new(&[1, 2], vec![0.0, 1.0]).unwrap();
        let out = hadamard(&latent, &mask).unwrap();
        assert_eq!(out.data(), &[0., 0., 0., 4., 5., 6.]);
        let mask1 = Field::new(&[1, 2, 1], vec![0.0, 1.0]).unwrap();
        assert_eq!(hadamard(&latent, &mask1).unwrap(), out);
    }

    #[test]
    fn hadamard_rejects_mismatch() {
        let a = Field::zeros(&[2, 2]);
        let b = Field::zeros(&[3, 2]);
        assert!(matches!(hadamard(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_examples() {
        let a = m2(1.0, 2.0, 3.0, 4.0);
        let eye = m2(1.0, 0.0, 0.0, 1.0);
        assert_eq!(matmul(&a, &eye).unwrap(), a);
        assert_eq!(matmul(&eye, &a).unwrap(), a);
        assert_eq!(
            matmul(&a, &m2(5.0, 6.0, 7.0, 8.0)).unwrap(),
            m2(19.0, 22.0, 43.0, 50.0)
        );
        assert!(matmul(&a, &Field::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn matmul_transposed_agrees_with_explicit_transpose() {
        let mut rng = Rng::new(5);
        let a = rng.randn(&[3, 4]);
        let b = rng.randn(&[5, 4]);
        let direct = matmul_transposed(&a, &b).unwrap();
        let via = matmul(&a, &transpose(&b).unwrap()).unwrap();
        assert!(direct.bit_eq(&via));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Field::from_rows(&[&[0.0, 0.0], &[1000.0, 1000.0]]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5, 0.5, 0.5]);
        let s = softmax_rows(&Field::from_rows(&[&[0.0, 3f32.ln()]]).unwrap()).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-7);
        assert!((s.data()[1] - 0.75).abs() < 1e-7);
    }

    #[test]
    fn axpy_examples() {
        let x = Field::new(&[2], vec![1.0, 1.0]).unwrap();
        let y = Field::new(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(axpy(0.0, &x, &y).unwrap(), y);
        assert_eq!(axpy(1.0, &x, &Field::zeros(&[2])).unwrap(), x);
        assert_eq!(axpy(2.0, &x, &y).unwrap().data(), &[5.0, 6.0]);
        assert!(axpy(1.0, &x, &Field::zeros(&[3])).is_err());
    }

    #[test]
    fn randn_is_deterministic() {
        let a = Rng::new(42).randn(&[3, 5]);
        let b = Rng::new(42).randn(&[3, 5]);
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&Rng::new(43).randn(&[3, 5])));
    }

    #[test]
    fn randn_moments() {
        let f = Rng::new(7).randn(&[100_000]);
        let n = f.len() as f64;
        let mean = f.data().iter().map(|&x| f64::from(x)).sum::<f64>() / n;
        let var = f
            .data()
            .iter()
            .map(|&x| (f64::from(x) - mean).powi(2))
            .sum::<f64>()
            / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn splitmix_reference_values() {
        // Reference outputs of splitmix64 seeded with 0.
        let mut r = Rng::new(0);
        assert_eq!(r.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(r.next_u64(), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn ltf_rejects_bad_magic() {
        let mut bytes = encode_ltf(&Field::ones(&[2, 2]));
        bytes[0] = b'X';
        let err = decode_ltf(&bytes, Path::new("bad.ltf")).unwrap_err();
        assert!(err.to_string().contains("bad.ltf"));
    }

    #[test]
    fn ltf_layout_is_exact() {
        let f = Field::new(&[1, 2], vec![1.0, -2.0]).unwrap();
        let bytes = encode_ltf(&f);
        let mut expected = b"LTF1".to_vec();
        expected.push(2);
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn ltf_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ltf");
        let f = Rng::new(3).randn(&[2, 3, 4]);
        write_ltf(&path, &f).unwrap();
        assert!(read_ltf(&path).unwrap().bit_eq(&f));
    }

    mod props {
        use super::*;
        use crate::field::Rng;
        use proptest::prelude::*;

        fn field_2x3() -> impl Strategy<Value = Field> {
            proptest::collection::vec(-100.0f32..100.0, 6)
                .prop_map(|v| Field::new(&[2, 3], v).unwrap())
        }

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(v in proptest::collection::vec(-1.0e4f32..1.0e4, 12)) {
                let s = softmax_rows(&Field::new(&[3, 4], v).unwrap()).unwrap();
                for row in s.data().chunks(4) {
                    prop_assert!(row.iter().all(|&x| x >= 0.0));
                    let sum: f64 = row.iter().map(|&x| f64::from(x)).sum();
                    prop_assert!((sum - 1.0).abs() < 1e-6);
                }
            }

            #[test]
            fn hadamard_identity_and_commutativity(a in field_2x3(), b in field_2x3()) {
                prop_assert!(hadamard(&a, &Field::ones(&[2, 3])).unwrap().bit_eq(&a));
                prop_assert!(hadamard(&a, &b).unwrap().bit_eq(&hadamard(&b, &a).unwrap()));
            }

            #[test]
            fn matmul_is_associative(seed in any::<u64>()) {
                let mut rng = Rng::new(seed);
                let a = rng.randn(&[4, 4]);
                let b = rng.randn(&[4, 4]);
                let c = rng.randn(&[4, 4]);
                let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
                let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
                let scale = left.data().iter().fold(1.0f32, |m, x| m.max(x.abs()));
                prop_assert!(left.max_abs_diff(&right).unwrap() / scale < 1e-4);
            }

            #[test]
            fn rng_streams_match(seed in any::<u64>()) {
                let mut a = Rng::new(seed);
                let mut b = Rng::new(seed);
                for _ in 0..64 {
                    prop_assert_eq!(a.next_u64(), b.next_u64());
                }
            }

            #[test]
            fn ltf_round_trip(seed in any::<u64>(), dims in proptest::collection::vec(1usize..5, 1..4)) {
                let f = Rng::new(seed).randn(&dims);
                let back = decode_ltf(&encode_ltf(&f), Path::new("mem")).unwrap();
                prop_assert!(back.bit_eq(&f));
            }
        }
    }
}
