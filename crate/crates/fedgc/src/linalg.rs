//! Dense small-matrix primitives: vectorization, Kronecker products, block
//! assembly, spectral radius, and the discrete Lyapunov solver.
//!
//! Conventions fixed here and relied on everywhere else:
//! column-stacking vectorization, so `vec(A X B) = (B^T ⊗ A) vec(X)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{FedgcError, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Column-stacking vectorization: `vec(M)[i + j*rows] = M[(i, j)]`.
pub fn vectorize(m: &Mat) -> Vector {
    Vector::from_column_slice(m.as_slice())
}

/// Inverse of [`vectorize`] for a known shape.
pub fn unvectorize(v: &Vector, rows: usize, cols: usize) -> Result<Mat> {
    if v.len() != rows * cols {
        return Err(FedgcError::dimension(
            "unvectorize",
            rows * cols,
            v.len(),
        ));
    }
    Ok(Mat::from_column_slice(rows, cols, v.as_slice()))
}

/// Standard Kronecker product, shape `(ra*rb) x (ca*cb)`.
pub fn kron(a: &Mat, b: &Mat) -> Mat {
    a.kronecker(b)
}

/// Kronecker product of a column vector with a matrix, `v ⊗ B`.
pub fn kron_vec_mat(v: &Vector, b: &Mat) -> Mat {
    let vm = Mat::from_column_slice(v.len(), 1, v.as_slice());
    vm.kronecker(b)
}

/// `v^T ⊗ I_p`, the map sending `vec(Θ)` to `Θ v`.
pub fn row_kron_identity(v: &Vector, p: usize) -> Mat {
    let vt = Mat::from_row_slice(1, v.len(), v.as_slice());
    vt.kronecker(&Mat::identity(p, p))
}

/// `v ⊗ I_p`.
pub fn col_kron_identity(v: &Vector, p: usize) -> Mat {
    let vm = Mat::from_column_slice(v.len(), 1, v.as_slice());
    vm.kronecker(&Mat::identity(p, p))
}

/// Largest eigenvalue magnitude.
///
/// Contract: relative accuracy 1e-10. Non-square input is a dimension error.
pub fn spectral_radius(m: &Mat) -> Result<f64> {
    if m.nrows() != m.ncols() {
        return Err(FedgcError::dimension(
            "spectral_radius",
            "square matrix",
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    if m.nrows() == 0 {
        return Err(FedgcError::dimension("spectral_radius", ">=1", 0));
    }
    let eigs = m.clone().complex_eigenvalues();
    Ok(eigs.iter().map(|c| (c.re * c.re + c.im * c.im).sqrt()).fold(0.0, f64::max))
}

/// Symmetric part `(M + M^T)/2`.
pub fn sym_part(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_symmetric_eig(m: &Mat) -> f64 {
    sym_part(m)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Symmetrize and clamp negative eigenvalues at zero.
///
/// Eigenvalues above `-tol` are treated as roundoff. If the clamp moves the
/// trace by more than `max_trace_shift` the matrix was genuinely indefinite
/// and an error is raised instead of papering over it.
pub fn clamp_psd(m: &Mat, tol: f64, max_trace_shift: f64, context: &str) -> Result<Mat> {
    let s = sym_part(m);
    let eig = s.clone().symmetric_eigen();
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min >= 0.0 {
        return Ok(s);
    }
    if min < -tol {
        let shift: f64 = eig
            .eigenvalues
            .iter()
            .filter(|&&l| l < 0.0)
            .map(|l| -l)
            .sum();
        if shift > max_trace_shift {
            return Err(FedgcError::NotPsd {
                context: context.to_string(),
                min_eig: min,
            });
        }
    }
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let q = eig.eigenvectors;
    Ok(&q * Mat::from_diagonal(&vals) * q.transpose())
}

/// Check that a symmetric matrix is PSD up to `-tol` on the spectrum.
pub fn require_psd(m: &Mat, tol: f64, context: &str) -> Result<()> {
    let min = min_symmetric_eig(m);
    if min < -tol {
        return Err(FedgcError::NotPsd {
            context: context.to_string(),
            min_eig: min,
        });
    }
    Ok(())
}

/// Solve the discrete Lyapunov equation `A X A^T - X + Q = 0` by the
/// vectorized linear solve `(I - A ⊗ A) vec(X) = vec(Q)`.
pub fn solve_discrete_lyapunov(a: &Mat, q: &Mat) -> Result<Mat> {
    let n = a.nrows();
    if a.ncols() != n || q.nrows() != n || q.ncols() != n {
        return Err(FedgcError::dimension(
            "solve_discrete_lyapunov",
            format!("{n}x{n}"),
            format!("{}x{}", q.nrows(), q.ncols()),
        ));
    }
    let lhs = Mat::identity(n * n, n * n) - kron(a, a);
    let rhs = vectorize(q);
    let sol = lhs.lu().solve(&rhs).ok_or_else(|| FedgcError::Numerical {
        context: "solve_discrete_lyapunov".into(),
        message: "singular (I - A ⊗ A); is rho(A) = 1?".into(),
    })?;
    Ok(sym_part(&unvectorize(&sol, n, n)?))
}

/// Block layout of the stacked state/data vectors over `M` clients.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockIndex {
    state_dims: Vec<usize>,
    data_dims: Vec<usize>,
    state_offsets: Vec<usize>,
    data_offsets: Vec<usize>,
}

impl BlockIndex {
    pub fn new(state_dims: Vec<usize>, data_dims: Vec<usize>) -> Result<Self> {
        if state_dims.is_empty() || state_dims.len() != data_dims.len() {
            return Err(FedgcError::Config(
                "BlockIndex needs one (p_m, d_m) pair per client".into(),
            ));
        }
        if state_dims.iter().chain(data_dims.iter()).any(|&d| d == 0) {
            return Err(FedgcError::Config("block dimensions must be >= 1".into()));
        }
        let prefix = |dims: &[usize]| {
            let mut off = Vec::with_capacity(dims.len() + 1);
            let mut acc = 0;
            off.push(0);
            for &d in dims {
                acc += d;
                off.push(acc);
            }
            off
        };
        let state_offsets = prefix(&state_dims);
        let data_offsets = prefix(&data_dims);
        Ok(BlockIndex {
            state_dims,
            data_dims,
            state_offsets,
            data_offsets,
        })
    }

    pub fn clients(&self) -> usize {
        self.state_dims.len()
    }

    pub fn state_dim(&self, m: usize) -> usize {
        self.state_dims[m]
    }

    pub fn data_dim(&self, m: usize) -> usize {
        self.data_dims[m]
    }

    pub fn total_state(&self) -> usize {
        *self.state_offsets.last().unwrap()
    }

    pub fn total_data(&self) -> usize {
        *self.data_offsets.last().unwrap()
    }

    pub fn state_offset(&self, m: usize) -> usize {
        self.state_offsets[m]
    }

    pub fn data_offset(&self, m: usize) -> usize {
        self.data_offsets[m]
    }

    fn check_client(&self, m: usize, context: &str) -> Result<()> {
        if m >= self.clients() {
            return Err(FedgcError::dimension(
                context,
                format!("client < {}", self.clients()),
                m,
            ));
        }
        Ok(())
    }

    /// Extract the `(m, n)` state block of a `p x p` matrix.
    pub fn state_block(&self, m: &Mat, row: usize, col: usize) -> Result<Mat> {
        self.check_client(row, "state_block")?;
        self.check_client(col, "state_block")?;
        let p = self.total_state();
        if m.nrows() != p || m.ncols() != p {
            return Err(FedgcError::dimension(
                "state_block",
                format!("{p}x{p}"),
                format!("{}x{}", m.nrows(), m.ncols()),
            ));
        }
        Ok(m.view(
            (self.state_offsets[row], self.state_offsets[col]),
            (self.state_dims[row], self.state_dims[col]),
        )
        .into_owned())
    }

    /// Extract the `(m, n)` block of a `d x p` observation-shaped matrix.
    pub fn obs_block(&self, m: &Mat, row: usize, col: usize) -> Result<Mat> {
        self.check_client(row, "obs_block")?;
        self.check_client(col, "obs_block")?;
        Ok(m.view(
            (self.data_offsets[row], self.state_offsets[col]),
            (self.data_dims[row], self.state_dims[col]),
        )
        .into_owned())
    }

    /// Extract the `(m, n)` block of a `d x d` data-shaped matrix.
    pub fn data_block(&self, m: &Mat, row: usize, col: usize) -> Result<Mat> {
        self.check_client(row, "data_block")?;
        self.check_client(col, "data_block")?;
        Ok(m.view(
            (self.data_offsets[row], self.data_offsets[col]),
            (self.data_dims[row], self.data_dims[col]),
        )
        .into_owned())
    }

    /// Assemble a `p x p` matrix from an `M x M` grid of state blocks.
    ///
    /// Assembly then extraction round-trips bit-exactly.
    pub fn assemble_state_blocks(&self, blocks: &[Vec<Mat>]) -> Result<Mat> {
        let mm = self.clients();
        if blocks.len() != mm || blocks.iter().any(|r| r.len() != mm) {
            return Err(FedgcError::dimension(
                "assemble_state_blocks",
                format!("{mm}x{mm} grid"),
                blocks.len(),
            ));
        }
        let p = self.total_state();
        let mut out = Mat::zeros(p, p);
        for (i, row) in blocks.iter().enumerate() {
            for (j, b) in row.iter().enumerate() {
                if b.nrows() != self.state_dims[i] || b.ncols() != self.state_dims[j] {
                    return Err(FedgcError::dimension(
                        "assemble_state_blocks",
                        format!("{}x{}", self.state_dims[i], self.state_dims[j]),
                        format!("{}x{}", b.nrows(), b.ncols()),
                    ));
                }
                out.view_mut(
                    (self.state_offsets[i], self.state_offsets[j]),
                    (b.nrows(), b.ncols()),
                )
                .copy_from(b);
            }
        }
        Ok(out)
    }

    /// Assemble a block-diagonal `d x p` observation matrix.
    pub fn assemble_block_diagonal_obs(&self, blocks: &[Mat]) -> Result<Mat> {
        if blocks.len() != self.clients() {
            return Err(FedgcError::dimension(
                "assemble_block_diagonal_obs",
                self.clients(),
                blocks.len(),
            ));
        }
        let mut out = Mat::zeros(self.total_data(), self.total_state());
        for (m, b) in blocks.iter().enumerate() {
            if b.nrows() != self.data_dims[m] || b.ncols() != self.state_dims[m] {
                return Err(FedgcError::dimension(
                    "assemble_block_diagonal_obs",
                    format!("{}x{}", self.data_dims[m], self.state_dims[m]),
                    format!("{}x{}", b.nrows(), b.ncols()),
                ));
            }
            out.view_mut(
                (self.data_offsets[m], self.state_offsets[m]),
                (b.nrows(), b.ncols()),
            )
            .copy_from(b);
        }
        Ok(out)
    }

    /// Slice the `m`-th client's segment out of a stacked data vector.
    pub fn data_segment(&self, v: &Vector, m: usize) -> Vector {
        v.rows(self.data_offsets[m], self.data_dims[m]).into_owned()
    }

    /// Slice the `m`-th client's segment out of a stacked state vector.
    pub fn state_segment(&self, v: &Vector, m: usize) -> Vector {
        v.rows(self.state_offsets[m], self.state_dims[m])
            .into_owned()
    }
}

/// Block contraction `sum_{i,j} W[(i,j)] * S_block(i,j)` where `S` is a
/// `(p*d) x (p*d)` matrix read as a `d x d` grid of `p x p` blocks (column
/// stacking puts column-index blocks contiguously).
///
/// This is the dimension-exact meaning of `Var((y^T ⊗ I) v)` for `y ⟂ v`
/// with `E[y y^T] = W`.
pub fn block_contraction(w: &Mat, s: &Mat, p: usize) -> Result<Mat> {
    let d = w.nrows();
    if w.ncols() != d || s.nrows() != p * d || s.ncols() != p * d {
        return Err(FedgcError::dimension(
            "block_contraction",
            format!("W {d}x{d}, S {}x{}", p * d, p * d),
            format!("{}x{}", s.nrows(), s.ncols()),
        ));
    }
    let mut out = Mat::zeros(p, p);
    for i in 0..d {
        for j in 0..d {
            let wij = w[(i, j)];
            if wij == 0.0 {
                continue;
            }
            let blk = s.view((i * p, j * p), (p, p));
            out.view_mut((0, 0), (p, p)).zip_apply(&blk, |o, b| *o += wij * b);
        }
    }
    Ok(out)
}

pub fn is_finite_mat(m: &Mat) -> bool {
    m.iter().all(|x| x.is_finite())
}

pub fn is_finite_vec(v: &Vector) -> bool {
    v.iter().all(|x| x.is_finite())
}
