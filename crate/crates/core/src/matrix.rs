//! Square matrix storage shared by production matrices and system matrices.
//!
//! Two layouts are supported: plain row-major dense storage and a band
//! layout with fixed lower/upper bandwidths. Writing outside the band of a
//! banded matrix is a bug and panics.

use std::fmt;

/// Sparsity hint a problem can declare for its production matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Structure {
    #[default]
    Dense,
    Banded { lower: usize, upper: usize },
}

impl Structure {
    /// Structure of the transpose.
    pub fn transposed(self) -> Self {
        match self {
            Structure::Dense => Structure::Dense,
            Structure::Banded { lower, upper } => Structure::Banded {
                lower: upper,
                upper: lower,
            },
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from rows; panics if the rows are not square.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for r in rows {
            assert_eq!(r.len(), n, "from_rows: matrix must be square");
            data.extend_from_slice(r);
        }
        Self { n, data }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] += v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Band storage: row `i` keeps columns `i - lower ..= i + upper`.
#[derive(Clone, PartialEq)]
pub struct BandMatrix {
    n: usize,
    lower: usize,
    upper: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, lower: usize, upper: usize) -> Self {
        Self {
            n,
            lower,
            upper,
            data: vec![0.0; n * (lower + upper + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn lower(&self) -> usize {
        self.lower
    }

    pub fn upper(&self) -> usize {
        self.upper
    }

    #[inline]
    fn width(&self) -> usize {
        self.lower + self.upper + 1
    }

    #[inline]
    pub fn in_band(&self, i: usize, j: usize) -> bool {
        j + self.lower >= i && j <= i + self.upper
    }

    #[inline]
    fn offset(&self, i: usize, j: usize) -> usize {
        i * self.width() + (j + self.lower - i)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if self.in_band(i, j) {
            self.data[self.offset(i, j)]
        } else {
            0.0
        }
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        assert!(
            self.in_band(i, j),
            "({i}, {j}) outside band ({}, {})",
            self.lower,
            self.upper
        );
        let k = self.offset(i, j);
        self.data[k] = v;
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        assert!(
            self.in_band(i, j),
            "({i}, {j}) outside band ({}, {})",
            self.lower,
            self.upper
        );
        let k = self.offset(i, j);
        self.data[k] += v;
    }

    /// Column range stored for row `i`.
    #[inline]
    pub fn row_span(&self, i: usize) -> std::ops::Range<usize> {
        i.saturating_sub(self.lower)..(i + self.upper + 1).min(self.n)
    }
}

/// Square matrix in either layout.
#[derive(Clone, PartialEq)]
pub enum Matrix {
    Dense(DenseMatrix),
    Banded(BandMatrix),
}

impl Matrix {
    pub fn zeros(n: usize, structure: Structure) -> Self {
        match structure {
            Structure::Dense => Matrix::Dense(DenseMatrix::zeros(n)),
            Structure::Banded { lower, upper } => {
                Matrix::Banded(BandMatrix::zeros(n, lower, upper))
            }
        }
    }

    pub fn identity(n: usize, structure: Structure) -> Self {
        let mut m = Self::zeros(n, structure);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        Matrix::Dense(DenseMatrix::from_rows(rows))
    }

    pub fn dim(&self) -> usize {
        match self {
            Matrix::Dense(m) => m.dim(),
            Matrix::Banded(m) => m.dim(),
        }
    }

    pub fn structure(&self) -> Structure {
        match self {
            Matrix::Dense(_) => Structure::Dense,
            Matrix::Banded(m) => Structure::Banded {
                lower: m.lower,
                upper: m.upper,
            },
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        match self {
            Matrix::Dense(m) => m.get(i, j),
            Matrix::Banded(m) => m.get(i, j),
        }
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        match self {
            Matrix::Dense(m) => m.set(i, j, v),
            Matrix::Banded(m) => m.set(i, j, v),
        }
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        match self {
            Matrix::Dense(m) => m.add(i, j, v),
            Matrix::Banded(m) => m.add(i, j, v),
        }
    }

    pub fn fill_zero(&mut self) {
        match self {
            Matrix::Dense(m) => m.data.iter_mut().for_each(|v| *v = 0.0),
            Matrix::Banded(m) => m.data.iter_mut().for_each(|v| *v = 0.0),
        }
    }

    /// Column range that may hold non-zeros in row `i`.
    #[inline]
    pub fn row_span(&self, i: usize) -> std::ops::Range<usize> {
        match self {
            Matrix::Dense(m) => 0..m.n,
            Matrix::Banded(m) => m.row_span(i),
        }
    }

    /// Visits every stored entry in row-major order.
    pub fn for_each_stored(&self, mut f: impl FnMut(usize, usize, f64)) {
        for i in 0..self.dim() {
            for j in self.row_span(i) {
                f(i, j, self.get(i, j));
            }
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.dim(), self.structure().transposed());
        self.for_each_stored(|i, j, v| t.set(j, i, v));
        t
    }

    pub fn to_dense(&self) -> DenseMatrix {
        match self {
            Matrix::Dense(m) => m.clone(),
            Matrix::Banded(_) => {
                let mut d = DenseMatrix::zeros(self.dim());
                self.for_each_stored(|i, j, v| d.set(i, j, v));
                d
            }
        }
    }

    /// `A * x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim());
        (0..self.dim())
            .map(|i| self.row_span(i).map(|j| self.get(i, j) * x[j]).sum())
            .collect()
    }

    /// `A * e`
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|i| self.row_span(i).map(|j| self.get(i, j)).sum())
            .collect()
    }

    /// Writes `A * e` into `out`.
    pub fn row_sums_into(&self, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.row_span(i).map(|j| self.get(i, j)).sum();
        }
    }

    /// Largest absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.dim())
            .map(|i| self.row_span(i).map(|j| self.get(i, j).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.dim();
        writeln!(f, "Matrix {n}x{n} {:?} [", self.structure())?;
        for i in 0..n.min(12) {
            let row: Vec<String> = (0..n.min(12))
                .map(|j| format!("{:>10.4e}", self.get(i, j)))
                .collect();
            writeln!(f, "  {}", row.join(" "))?;
        }
        write!(f, "]")
    }
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(&Matrix::Dense(self.clone()), f)
    }
}

impl fmt::Debug for BandMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(&Matrix::Banded(self.clone()), f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_get_outside_is_zero() {
        let mut b = BandMatrix::zeros(5, 1, 2);
        b.set(2, 4, 3.0);
        b.set(3, 2, -1.0);
        assert_eq!(b.get(2, 4), 3.0);
        assert_eq!(b.get(3, 2), -1.0);
        assert_eq!(b.get(4, 0), 0.0);
        assert_eq!(b.row_span(0), 0..3);
        assert_eq!(b.row_span(4), 3..5);
    }

    #[test]
    #[should_panic(expected = "outside band")]
    fn band_set_outside_panics() {
        let mut b = BandMatrix::zeros(4, 1, 1);
        b.set(0, 3, 1.0);
    }

    #[test]
    fn transpose_swaps_bandwidths() {
        let mut m = Matrix::zeros(4, Structure::Banded { lower: 0, upper: 1 });
        m.set(0, 1, 2.0);
        m.set(2, 3, 5.0);
        let t = m.transpose();
        assert_eq!(t.structure(), Structure::Banded { lower: 1, upper: 0 });
        assert_eq!(t.get(1, 0), 2.0);
        assert_eq!(t.get(3, 2), 5.0);
    }

    #[test]
    fn dense_and_band_matvec_agree() {
        let mut b = Matrix::zeros(4, Structure::Banded { lower: 1, upper: 1 });
        for i in 0..4 {
            b.set(i, i, 2.0 + i as f64);
            if i + 1 < 4 {
                b.set(i, i + 1, -1.0);
                b.set(i + 1, i, -0.5);
            }
        }
        let d = Matrix::Dense(b.to_dense());
        let x = [1.0, -2.0, 0.5, 3.0];
        assert_eq!(b.matvec(&x), d.matvec(&x));
        assert_eq!(b.row_sums(), d.row_sums());
    }
}
