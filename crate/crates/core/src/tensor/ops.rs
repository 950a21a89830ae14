//! Differentiable ops: elementwise arithmetic, matmul, normalization,
//! activations, gathers/scatters, shape ops, and scalar reductions.
//!
//! Matmul kernels use an i-k-j loop order so the inner loop is a contiguous
//! axpy (autovectorizes), and skip zero left-hand entries — boolean raster
//! patches are ~95% zeros, which makes patch embedding nearly free.

use super::{strides, Real, Tensor};

// ---------------------------------------------------------------------------
// Raw kernels (accumulate into `out`; caller zeroes).
// ---------------------------------------------------------------------------

/// out[m,n] += a[m,k] * b[k,n]
fn mm_nn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik != T::zero() {
                let brow = &b[kk * n..(kk + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aik * bv;
                }
            }
        }
    }
}

/// out[m,k] += a[m,n] * b[k,n]^T
fn mm_nt<T: Real>(a: &[T], b: &[T], m: usize, n: usize, k: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (kk, o) in orow.iter_mut().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut s = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            *o += s;
        }
    }
}

/// out[k,n] += a[m,k]^T * b[m,n]
fn mm_tn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik != T::zero() {
                let orow = &mut out[kk * n..(kk + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aik * bv;
                }
            }
        }
    }
}

/// Repeat count when `rhs` broadcasts as a suffix of `lhs`.
fn suffix_repeat(lhs: &[usize], rhs: &[usize]) -> usize {
    assert!(
        rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs,
        "cannot broadcast {:?} against suffix {:?}",
        lhs,
        rhs
    );
    lhs[..lhs.len() - rhs.len()].iter().product()
}

/// Indices of the k largest values, ties broken toward the lower index.
pub fn topk_desc<T: Real>(row: &[T], k: usize) -> Vec<usize> {
    assert!(k <= row.len(), "top-{} of a row of length {}", k, row.len());
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .expect("non-finite value in top-k")
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Index of the row maximum (first on ties).
pub fn argmax<T: Real>(row: &[T]) -> usize {
    topk_desc(row, 1)[0]
}

// ---------------------------------------------------------------------------
// Elementwise and scalar ops.
// ---------------------------------------------------------------------------

impl<T: Real> Tensor<T> {
    /// Elementwise sum; `rhs` may broadcast as a shape suffix.
    pub fn add(&self, rhs: &Tensor<T>) -> Tensor<T> {
        let reps = suffix_repeat(self.shape(), rhs.shape());
        let blen = rhs.len();
        let out: Vec<T> = {
            let a = self.values();
            let b = rhs.values();
            a.iter().enumerate().map(|(i, &x)| x + b[i % blen]).collect()
        };
        let (pa, pb) = (self.clone(), rhs.clone());
        Tensor::new_node(
            self.shape().to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                pa.accum_grad(|da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                pb.accum_grad(|db| {
                    for r in 0..reps {
                        for (j, d) in db.iter_mut().enumerate() {
                            *d += g[r * blen + j];
                        }
                    }
                });
            }),
        )
    }

    /// Elementwise difference; `rhs` may broadcast as a shape suffix.
    pub fn sub(&self, rhs: &Tensor<T>) -> Tensor<T> {
        self.add(&rhs.mul_scalar(-1.0))
    }

    /// Elementwise product; `rhs` may broadcast as a shape suffix.
    pub fn mul(&self, rhs: &Tensor<T>) -> Tensor<T> {
        let reps = suffix_repeat(self.shape(), rhs.shape());
        let blen = rhs.len();
        let out: Vec<T> = {
            let a = self.values();
            let b = rhs.values();
            a.iter().enumerate().map(|(i, &x)| x * b[i % blen]).collect()
        };
        let (pa, pb) = (self.clone(), rhs.clone());
        Tensor::new_node(
            self.shape().to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                {
                    let bv = pb.values();
                    pa.accum_grad(|da| {
                        for (i, d) in da.iter_mut().enumerate() {
                            *d += g[i] * bv[i % blen];
                        }
                    });
                }
                let av = pa.values();
                pb.accum_grad(|db| {
                    for r in 0..reps {
                        for (j, d) in db.iter_mut().enumerate() {
                            *d += g[r * blen + j] * av[r * blen + j];
                        }
                    }
                });
            }),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::from_f64(c);
        let out: Vec<T> = self.values().iter().map(|&x| x + c).collect();
        let pa = self.clone();
        Tensor::new_node(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                pa.accum_grad(|da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }),
        )
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::from_f64(c);
        let out: Vec<T> = self.values().iter().map(|&x| x * c).collect();
        let pa = self.clone();
        Tensor::new_node(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                pa.accum_grad(|da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv * c;
                    }
                });
            }),
        )
    }

    /// Multiply row i of a 2-D tensor by `col[i]`; `col` has shape (N) or (N,1).
    pub fn scale_rows(&self, col: &Tensor<T>) -> Tensor<T> {
        let (n, d) = self.dims2();
        assert_eq!(col.len(), n, "scale_rows: {:?} with column {:?}", self.shape(), col.shape());
        let out: Vec<T> = {
            let a = self.values();
            let c = col.values();
            (0..n * d).map(|i| a[i] * c[i / d]).collect()
        };
        let (pa, pc) = (self.clone(), col.clone());
        Tensor::new_node(
            self.shape().to_vec(),
            out,
            vec![self.clone(), col.clone()],
            Box::new(move |g| {
                {
                    let cv = pc.values();
                    pa.accum_grad(|da| {
                        for (i, dv) in da.iter_mut().enumerate() {
                            *dv += g[i] * cv[i / d];
                        }
                    });
                }
                let av = pa.values();
                pc.accum_grad(|dc| {
                    for i in 0..n {
                        let mut s = T::zero();
                        for j in 0..d {
                            s += g[i * d + j] * av[i * d + j];
                        }
                        dc[i] += s;
                    }
                });
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Matmul.
// ---------------------------------------------------------------------------

impl<T: Real> Tensor<T> {
    fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape().len(), 2, "expected 2-D tensor, got {:?}", self.shape());
        (self.shape()[0], self.shape()[1])
    }

    /// Matrix product. Leading dims of `self` batch; `rhs` is either shared
    /// (2-D) or batched with identical leading dims.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Tensor<T> {
        let ash = self.shape().to_vec();
        let bsh = rhs.shape().to_vec();
        assert!(
            ash.len() >= 2,
            "matmul lhs must be at least 2-D: {:?} x {:?}",
            ash,
            bsh
        );
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let batch: usize = ash[..ash.len() - 2].iter().product();
        let shared = bsh.len() == 2;
        if shared {
            assert_eq!(bsh[0], k, "matmul inner dims differ: {:?} x {:?}", ash, bsh);
        } else {
            assert!(
                bsh.len() == ash.len()
                    && bsh[..bsh.len() - 2] == ash[..ash.len() - 2]
                    && bsh[bsh.len() - 2] == k,
                "matmul shapes incompatible: {:?} x {:?}",
                ash,
                bsh
            );
        }
        let n = bsh[bsh.len() - 1];
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.values();
            let bv = rhs.values();
            for bi in 0..batch {
                let a = &av[bi * m * k..(bi + 1) * m * k];
                let b = if shared { &bv[..] } else { &bv[bi * k * n..(bi + 1) * k * n] };
                mm_nn(a, b, m, k, n, &mut out[bi * m * n..(bi + 1) * m * n]);
            }
        }
        let mut osh = ash[..ash.len() - 2].to_vec();
        osh.push(m);
        osh.push(n);
        let (pa, pb) = (self.clone(), rhs.clone());
        Tensor::new_node(
            osh,
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                if pa.requires_grad() {
                    let bv = pb.values();
                    pa.accum_grad(|da| {
                        for bi in 0..batch {
                            let gb = &g[bi * m * n..(bi + 1) * m * n];
                            let b = if shared { &bv[..] } else { &bv[bi * k * n..(bi + 1) * k * n] };
                            mm_nt(gb, b, m, n, k, &mut da[bi * m * k..(bi + 1) * m * k]);
                        }
                    });
                }
                if pb.requires_grad() {
                    let av = pa.values();
                    pb.accum_grad(|db| {
                        for bi in 0..batch {
                            let gb = &g[bi * m * n..(bi + 1) * m * n];
                            let a = &av[bi * m * k..(bi + 1) * m * k];
                            let dbs = if shared { &mut db[..] } else { &mut db[bi * k * n..(bi + 1) * k * n] };
                            mm_tn(a, gb, m, k, n, dbs);
                        }
                    });
                }
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Shape ops.
// ---------------------------------------------------------------------------

impl<T: Real> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Tensor<T> {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.len(),
            "reshape {:?} -> {:?} changes element count",
            self.shape(),
            shape
        );
        let pa = self.clone();
        Tensor::new_node(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                pa.accum_grad(|da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }),
        )
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&self) -> Tensor<T> {
        let sh = self.shape().to_vec();
        assert!(sh.len() >= 2, "transpose_last2 on shape {:?}", sh);
        let (m, n) = (sh[sh.len() - 2], sh[sh.len() - 1]);
        let outer: usize = sh[..sh.len() - 2].iter().product();
        let mut out = vec![T::zero(); self.len()];
        {
            let v = self.values();
            for o in 0..outer {
                let base = o * m * n;
                for i in 0..m {
                    for j in 0..n {
                        out[base + j * m + i] = v[base + i * n + j];
                    }
                }
            }
        }
        let mut osh = sh[..sh.len() - 2].to_vec();
        osh.push(n);
        osh.push(m);
        let pa = self.clone();
        Tensor::new_node(
            osh,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                pa.accum_grad(|da| {
                    for o in 0..outer {
                        let base = o * m * n;
                        for i in 0..m {
                            for j in 0..n {
                                da[base + i * n + j] += g[base + j * m + i];
                            }
                        }
                    }
                });
            }),
        )
    }

    /// Swap axes 1 and 2 of a 4-D tensor: (A,B,C,D) -> (A,C,B,D).
    pub fn swap_axes12(&self) -> Tensor<T> {
        let sh = self.shape().to_vec();
        assert_eq!(sh.len(), 4, "swap_axes12 on shape {:?}", sh);
        let (a, b, c, d) = (sh[0], sh[1], sh[2], sh[3]);
        let mut out = vec![T::zero(); self.len()];
        {
            let v = self.values();
            for ai in 0..a {
                for bi in 0..b {
                    for ci in 0..c {
                        let src = ((ai * b + bi) * c + ci) * d;
                        let dst = ((ai * c + ci) * b + bi) * d;
                        out[dst..dst + d].copy_from_slice(&v[src..src + d]);
                    }
                }
            }
        }
        let pa = self.clone();
        Tensor::new_node(
            vec![a, c, b, d],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                pa.accum_grad(|da| {
                    for ai in 0..a {
                        for bi in 0..b {
                            for ci in 0..c {
                                let src = ((ai * b + bi) * c + ci) * d;
                                let dst = ((ai * c + ci) * b + bi) * d;
                                for j in 0..d {
                                    da[src + j] += g[dst + j];
                                }
                            }
                        }
                    }
                });
            }),
        )
    }

    /// Contiguous slice `[start, end)` along one axis.
    pub fn slice_axis(&self, axis: usize, start: usize, end: usize) -> Tensor<T> {
        let sh = self.shape().to_vec();
        assert!(
            axis < sh.len() && start <= end && end <= sh[axis],
            "slice [{start}, {end}) on axis {axis} of {:?}",
            sh
        );
        let outer: usize = sh[..axis].iter().product();
        let inner: usize = sh[axis + 1..].iter().product();
        let span = end - start;
        let mut out = vec![T::zero(); outer * span * inner];
        {
            let v = self.values();
            for o in 0..outer {
                let src = (o * sh[axis] + start) * inner;
                let dst = o * span * inner;
                out[dst..dst + span * inner].copy_from_slice(&v[src..src + span * inner]);
            }
        }
        let mut osh = sh.clone();
        osh[axis] = span;
        let pa = self.clone();
        let axis_len = sh[axis];
        Tensor::new_node(
            osh,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                pa.accum_grad(|da| {
                    for o in 0..outer {
                        let dst = (o * axis_len + start) * inner;
                        let src = o * span * inner;
                        for j in 0..span * inner {
                            da[dst + j] += g[src + j];
                        }
                    }
                });
            }),
        )
    }

    /// Repeat axis 1 of a 4-D tensor r times in consecutive blocks:
    /// out[a, h] = in[a, h / r]. Used to expand grouped KV heads.
    pub fn repeat_axis1(&self, r: usize) -> Tensor<T> {
        let sh = self.shape().to_vec();
        assert_eq!(sh.len(), 4, "repeat_axis1 on shape {:?}", sh);
        let (a, b, tail) = (sh[0], sh[1], sh[2] * sh[3]);
        let mut out = vec![T::zero(); self.len() * r];
        {
            let v = self.values();
            for ai in 0..a {
                for bo in 0..b * r {
                    let src = (ai * b + bo / r) * tail;
                    let dst = (ai * b * r + bo) * tail;
                    out[dst..dst + tail].copy_from_slice(&v[src..src + tail]);
                }
            }
        }
        let pa = self.clone();
        Tensor::new_node(
            vec![sh[0], sh[1] * r, sh[2], sh[3]],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                pa.accum_grad(|da| {
                    for ai in 0..a {
                        for bo in 0..b * r {
                            let src = (ai * b + bo / r) * tail;
                            let dst = (ai * b * r + bo) * tail;
                            for j in 0..tail {
                                da[src + j] += g[dst + j];
                            }
                        }
                    }
                });
            }),
        )
    }
}

/// Concatenate along `axis`; all parts must agree on every other dim.
pub fn concat<T: Real>(parts: &[&Tensor<T>], axis: usize) -> Tensor<T> {
    assert!(!parts.is_empty(), "concat of zero tensors");
    let base = parts[0].shape().to_vec();
    assert!(axis < base.len(), "concat axis {} of {:?}", axis, base);
    let mut axis_total = 0;
    for p in parts {
        let sh = p.shape();
        assert!(
            sh.len() == base.len()
                && sh[..axis] == base[..axis]
                && sh[axis + 1..] == base[axis + 1..],
            "concat shape {:?} incompatible with {:?} on axis {}",
            sh,
            base,
            axis
        );
        axis_total += sh[axis];
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let mut osh = base.clone();
    osh[axis] = axis_total;
    let mut out = vec![T::zero(); outer * axis_total * inner];
    let mut offsets = Vec::with_capacity(parts.len());
    {
        let mut off = 0;
        for p in parts {
            offsets.push(off);
            let span = p.shape()[axis];
            let v = p.values();
            for o in 0..outer {
                let dst = (o * axis_total + off) * inner;
                let src = o * span * inner;
                out[dst..dst + span * inner].copy_from_slice(&v[src..src + span * inner]);
            }
            off += span;
        }
    }
    let owned: Vec<Tensor<T>> = parts.iter().map(|p| (*p).clone()).collect();
    let spans: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let parents = owned.clone();
    Tensor::new_node(
        osh,
        out,
        parents,
        Box::new(move |g| {
            for (pi, p) in owned.iter().enumerate() {
                let (off, span) = (offsets[pi], spans[pi]);
                p.accum_grad(|dp| {
                    for o in 0..outer {
                        let src = (o * axis_total + off) * inner;
                        let dst = o * span * inner;
                        for j in 0..span * inner {
                            dp[dst + j] += g[src + j];
                        }
                    }
                });
            }
        }),
    )
}

// ---------------------------------------------------------------------------
// Gathers and scatters.
// ---------------------------------------------------------------------------

impl<T: Real> Tensor<T> {
    /// Select rows along axis 0 (embedding lookup when `self` is a table).
    pub fn gather_rows(&self, ids: &[usize]) -> Tensor<T> {
        let sh = self.shape().to_vec();
        assert!(!sh.is_empty(), "gather_rows on scalar");
        let inner: usize = sh[1..].iter().product();
        let mut out = vec![T::zero(); ids.len() * inner];
        {
            let v = self.values();
            for (r, &id) in ids.iter().enumerate() {
                assert!(id < sh[0], "row {} out of range for {:?}", id, sh);
                out[r * inner..(r + 1) * inner].copy_from_slice(&v[id * inner..(id + 1) * inner]);
            }
        }
        let mut osh = sh.clone();
        osh[0] = ids.len();
        let pa = self.clone();
        let ids = ids.to_vec();
        Tensor::new_node(
            osh,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                pa.accum_grad(|da| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..inner {
                            da[id * inner + j] += g[r * inner + j];
                        }
                    }
                });
            }),
        )
    }

    /// Place row j at `ids[j]` in a fresh (n_rows, ...) tensor, summing on
    /// duplicate destinations. Inverse of [`Tensor::gather_rows`].
    pub fn scatter_rows(&self, ids: &[usize], n_rows: usize) -> Tensor<T> {
        let sh = self.shape().to_vec();
        assert_eq!(sh[0], ids.len(), "scatter_rows: {} ids for shape {:?}", ids.len(), sh);
        let inner: usize = sh[1..].iter().product();
        let mut out = vec![T::zero(); n_rows * inner];
        {
            let v = self.values();
            for (r, &id) in ids.iter().enumerate() {
                assert!(id < n_rows, "destination row {} out of range {}", id, n_rows);
                for j in 0..inner {
                    out[id * inner + j] += v[r * inner + j];
                }
            }
        }
        let mut osh = sh.clone();
        osh[0] = n_rows;
        let pa = self.clone();
        let ids = ids.to_vec();
        Tensor::new_node(
            osh,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                pa.accum_grad(|da| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..inner {
                            da[r * inner + j] += g[id * inner + j];
                        }
                    }
                });
            }),
        )
    }

    /// From a 2-D tensor, pick `k` columns per row: out[i,j] = self[i, idx[i*k+j]].
    pub fn gather_per_row(&self, idx: &[usize], k: usize) -> Tensor<T> {
        let (n, e) = self.dims2();
        assert_eq!(idx.len(), n * k, "gather_per_row: {} indices for {} rows of {}", idx.len(), n, k);
        let mut out = vec![T::zero(); n * k];
        {
            let v = self.values();
            for i in 0..n {
                for j in 0..k {
                    let col = idx[i * k + j];
                    assert!(col < e, "column {} out of range for {:?}", col, self.shape());
                    out[i * k + j] = v[i * e + col];
                }
            }
        }
        let pa = self.clone();
        let idx = idx.to_vec();
        Tensor::new_node(
            vec![n, k],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                pa.accum_grad(|da| {
                    for i in 0..n {
                        for j in 0..k {
                            da[i * e + idx[i * k + j]] += g[i * k + j];
                        }
                    }
                });
            }),
        )
    }

    /// Gather arbitrary flat elements into an (n, 1) column.
    pub fn gather_flat(&self, idx: &[usize]) -> Tensor<T> {
        let len = self.len();
        let out: Vec<T> = {
            let v = self.values();
            idx.iter()
                .map(|&i| {
                    assert!(i < len, "flat index {} out of range {}", i, len);
                    v[i]
                })
                .collect()
        };
        let pa = self.clone();
        let idx = idx.to_vec();
        Tensor::new_node(
            vec![idx.len(), 1],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                pa.accum_grad(|da| {
                    for (r, &i) in idx.iter().enumerate() {
                        da[i] += g[r];
                    }
                });
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Activations and normalization.
// ---------------------------------------------------------------------------

impl<T: Real> Tensor<T> {
    /// GeLU, tanh approximation.
    pub fn gelu(&self) -> Tensor<T> {
        let a = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let b = T::from_f64(0.044715);
        let half = T::from_f64(0.5);
        let out: Vec<T> = self
            .values()
            .iter()
            .map(|&x| {
                let t = (a * (x + b * x * x * x)).tanh();
                half * x * (T::one() + t)
            })
            .collect();
        let pa = self.clone();
        Tensor::new_node(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let xv = pa.values().clone();
                pa.accum_grad(|da| {
                    for (i, d) in da.iter_mut().enumerate() {
                        let x = xv[i];
                        let u = a * (x + b * x * x * x);
                        let t = u.tanh();
                        let du = a * (T::one() + T::from_f64(3.0) * b * x * x);
                        let grad = half * (T::one() + t) + half * x * (T::one() - t * t) * du;
                        *d += g[i] * grad;
                    }
                });
            }),
        )
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&self) -> Tensor<T> {
        let sh = self.shape().to_vec();
        let d = *sh.last().expect("softmax on scalar");
        let rows = self.len() / d;
        let mut out = vec![T::zero(); self.len()];
        {
            let v = self.values();
            for r in 0..rows {
                let row = &v[r * d..(r + 1) * d];
                let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for (j, &x) in row.iter().enumerate() {
                    let e = (x - m).exp();
                    out[r * d + j] = e;
                    sum += e;
                }
                for j in 0..d {
                    out[r * d + j] /= sum;
                }
            }
        }
        let probs = out.clone();
        let pa = self.clone();
        Tensor::new_node(
            sh,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                pa.accum_grad(|da| {
                    for r in 0..rows {
                        let p = &probs[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: T = p.iter().zip(gr).map(|(&pi, &gi)| pi * gi).sum();
                        for j in 0..d {
                            da[r * d + j] += p[j] * (gr[j] - dot);
                        }
                    }
                });
            }),
        )
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Tensor<T> {
        let sh = self.shape().to_vec();
        let d = *sh.last().expect("layer_norm on scalar");
        assert_eq!(gamma.len(), d, "layer_norm gain {:?} for {:?}", gamma.shape(), sh);
        assert_eq!(beta.len(), d, "layer_norm bias {:?} for {:?}", beta.shape(), sh);
        let rows = self.len() / d;
        let eps = T::from_f64(eps);
        let mut xhat = vec![T::zero(); self.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); self.len()];
        {
            let v = self.values();
            let gv = gamma.values();
            let bv = beta.values();
            let nd = T::from_f64(d as f64);
            for r in 0..rows {
                let row = &v[r * d..(r + 1) * d];
                let mean = row.iter().cloned().sum::<T>() / nd;
                let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / nd;
                let is = T::one() / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..d {
                    let xh = (row[j] - mean) * is;
                    xhat[r * d + j] = xh;
                    out[r * d + j] = gv[j] * xh + bv[j];
                }
            }
        }
        let (pa, pg, pb) = (self.clone(), gamma.clone(), beta.clone());
        Tensor::new_node(
            sh,
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g| {
                pb.accum_grad(|db| {
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                });
                pg.accum_grad(|dg| {
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                let gv = pg.values().clone();
                pa.accum_grad(|da| {
                    let nd = T::from_f64(d as f64);
                    for r in 0..rows {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                        }
                        mean_dxh /= nd;
                        mean_dxh_xh /= nd;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            da[r * d + j] += inv_std[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                });
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Reductions and losses.
// ---------------------------------------------------------------------------

impl<T: Real> Tensor<T> {
    pub fn sum_all(&self) -> Tensor<T> {
        let s: T = self.values().iter().cloned().sum();
        let pa = self.clone();
        Tensor::new_node(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |g| {
                pa.accum_grad(|da| {
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                });
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = self.len() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Mean over axis 0 of a 2-D tensor: (N, D) -> (D).
    pub fn mean_axis0(&self) -> Tensor<T> {
        let (n, d) = self.dims2();
        let inv = T::from_f64(1.0 / n as f64);
        let mut out = vec![T::zero(); d];
        {
            let v = self.values();
            for r in 0..n {
                for j in 0..d {
                    out[j] += v[r * d + j];
                }
            }
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        let pa = self.clone();
        Tensor::new_node(
            vec![d],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                pa.accum_grad(|da| {
                    for r in 0..n {
                        for j in 0..d {
                            da[r * d + j] += g[j] * inv;
                        }
                    }
                });
            }),
        )
    }

    /// Mean squared error against a target of identical shape.
    pub fn mse(&self, target: &Tensor<T>) -> Tensor<T> {
        assert_eq!(
            self.shape(),
            target.shape(),
            "mse shapes differ: {:?} vs {:?}",
            self.shape(),
            target.shape()
        );
        self.sub(target).square().mean_all()
    }

    fn square(&self) -> Tensor<T> {
        self.mul(self)
    }

    /// Mean negative log-likelihood of integer targets under softmax(self).
    /// `self` is (B, K) logits.
    pub fn cross_entropy(&self, targets: &[usize]) -> Tensor<T> {
        let (bsz, k) = self.dims2();
        assert_eq!(targets.len(), bsz, "{} targets for {} logit rows", targets.len(), bsz);
        let mut probs = vec![T::zero(); bsz * k];
        let mut loss = T::zero();
        {
            let v = self.values();
            for r in 0..bsz {
                let row = &v[r * k..(r + 1) * k];
                let t = targets[r];
                assert!(t < k, "target {} out of range for {} classes", t, k);
                let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for (j, &x) in row.iter().enumerate() {
                    let e = (x - m).exp();
                    probs[r * k + j] = e;
                    sum += e;
                }
                for j in 0..k {
                    probs[r * k + j] /= sum;
                }
                loss += m + sum.ln() - row[t];
            }
            loss /= T::from_f64(bsz as f64);
        }
        let pa = self.clone();
        let targets = targets.to_vec();
        Tensor::new_node(
            vec![1],
            vec![loss],
            vec![self.clone()],
            Box::new(move |g| {
                pa.accum_grad(|da| {
                    let scale = g[0] / T::from_f64(bsz as f64);
                    for r in 0..bsz {
                        for j in 0..k {
                            let ind = if j == targets[r] { T::one() } else { T::zero() };
                            da[r * k + j] += scale * (probs[r * k + j] - ind);
                        }
                    }
                });
            }),
        )
    }
}

/// Elementwise check used by tests: max |a-b| over two equal-length slices.
pub fn max_abs_diff<T: Real>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x.to_f64() - y.to_f64()).abs())
        .fold(0.0, f64::max)
}

pub use concat as concat_tensors;

#[allow(unused)]
pub(crate) fn shape_strides(shape: &[usize]) -> Vec<usize> {
    strides(shape)
}
