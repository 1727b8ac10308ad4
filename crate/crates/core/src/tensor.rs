//! Dense row-major `f64` tensors and the `RBT1` binary format.
//!
//! A [`Tensor`] is a plain value: shape plus contiguous values. Gradients are
//! owned by the tape ([`crate::autograd::Graph`]) and by the parameter store
//! ([`crate::params::ParamStore`]), never by the value itself.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const RBT_MAGIC: &[u8; 4] = b"RBT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("from_rows", "ragged rows"));
        }
        Tensor::new(&[rows.len(), cols], rows.concat())
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim("dims2", format!("expected rank 2, got {s:?}"))),
        }
    }

    /// Width of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has rank >= 1")
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.last_dim();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.last_dim() + j]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim(
                "zip",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows `start..start+len` of a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if start + len > r || len == 0 {
            return Err(Error::dim(
                "slice_rows",
                format!("rows {start}..{} of {r}", start + len),
            ));
        }
        Tensor::new(&[len, c], self.data[start * c..(start + len) * c].to_vec())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("{:?} x {:?}", self.shape, other.shape),
            ));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(&[m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        kernels::transpose(&self.data, &mut out, r, c);
        Tensor::new(&[c, r], out)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(RBT_MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.shape.len() + 8 * self.data.len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Reads one `RBT1` record. `Err(String)` describes the format defect.
    pub fn read_from<R: Read>(r: &mut R) -> std::io::Result<std::result::Result<Tensor, String>> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != RBT_MAGIC {
            return Ok(Err(format!("bad magic {magic:?}")));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b)?;
        let rank = u32::from_le_bytes(u32b) as usize;
        if rank == 0 || rank > 8 {
            return Ok(Err(format!("unsupported rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut u64b = [0u8; 8];
        for _ in 0..rank {
            r.read_exact(&mut u64b)?;
            shape.push(u64::from_le_bytes(u64b) as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0 && n < (1 << 32));
        let Some(n) = n else {
            return Ok(Err(format!("implausible shape {shape:?}")));
        };
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Ok(Tensor { shape, data }))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Tensor> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut cursor = bytes.as_slice();
        match Tensor::read_from(&mut cursor) {
            Ok(Ok(t)) if cursor.is_empty() => Ok(t),
            Ok(Ok(_)) => Err(Error::format(path, "trailing bytes after tensor")),
            Ok(Err(detail)) => Err(Error::format(path, detail)),
            Err(e) => Err(Error::format(path, format!("truncated: {e}"))),
        }
    }
}

/// Raw row-major kernels shared by tensor methods and backward rules.
pub(crate) mod kernels {
    /// `orow += x0·b0 + x1·b1 + x2·b2 + x3·b3`, elementwise.
    #[inline(always)]
    fn axpy4(orow: &mut [f64], x: [f64; 4], b: [&[f64]; 4]) {
        let [b0, b1, b2, b3] = b;
        for ((((o, &v0), &v1), &v2), &v3) in orow.iter_mut().zip(b0).zip(b1).zip(b2).zip(b3) {
            *o += x[0] * v0 + x[1] * v1 + x[2] * v2 + x[3] * v3;
        }
    }

    #[inline(always)]
    fn axpy(orow: &mut [f64], x: f64, b: &[f64]) {
        for (o, &v) in orow.iter_mut().zip(b) {
            *o += x * v;
        }
    }

    /// out[m,n] += a[m,k] · b[k,n]
    pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        let brow = |p: usize| &b[p * n..(p + 1) * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            let arow = &a[i * k..(i + 1) * k];
            let mut p = 0;
            while p + 4 <= k {
                let x = [arow[p], arow[p + 1], arow[p + 2], arow[p + 3]];
                axpy4(orow, x, [brow(p), brow(p + 1), brow(p + 2), brow(p + 3)]);
                p += 4;
            }
            for q in p..k {
                axpy(orow, arow[q], brow(q));
            }
        }
    }

    pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        out.fill(0.0);
        matmul_acc(a, b, out, m, k, n);
    }

    /// out[m,n] += a[m,k] · b[n,k]ᵀ
    pub fn matmul_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        let mut bt = vec![0.0; k * n];
        transpose(b, &mut bt, n, k);
        matmul_acc(a, &bt, out, m, k, n);
    }

    /// out[k,n] += a[m,k]ᵀ · b[m,n]
    pub fn matmul_at_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        let brow = |i: usize| &b[i * n..(i + 1) * n];
        for p in 0..k {
            let orow = &mut out[p * n..(p + 1) * n];
            let mut i = 0;
            while i + 4 <= m {
                let x = [a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]];
                axpy4(orow, x, [brow(i), brow(i + 1), brow(i + 2), brow(i + 3)]);
                i += 4;
            }
            for q in i..m {
                axpy(orow, a[q * k + p], brow(q));
            }
        }
    }


    pub fn transpose(a: &[f64], out: &mut [f64], r: usize, c: usize) {
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a[i * c + j];
            }
        }
    }
}
