//! Strided convolution and transposed convolution over `[batch, channel,
//! z, y, x]` buffers as patch gathers plus matrix products. 2D convolution
//! runs through the same code with a unit depth axis.

use super::Scalar;

/// Range of `idx` in `0..iter_len` for which `idx * stride + tap - pad` lies
/// in `0..target_len`.
fn valid_range(
    iter_len: usize,
    target_len: usize,
    tap: usize,
    stride: usize,
    pad: usize,
) -> (usize, usize) {
    let lo = if pad > tap {
        (pad - tap).div_ceil(stride)
    } else {
        0
    };
    let hi = if target_len + pad > tap {
        (target_len + pad - tap).div_ceil(stride).min(iter_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// `c = a b + beta c` for row-major `a[m,k]` (or `a[k,m]` when `a_t`),
/// `b[k,n]` (or `b[n,k]` when `b_t`) and `c[m,n]`.
#[allow(clippy::too_many_arguments)]
fn matmul<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if beta == T::zero() {
        c[..m * n].fill(T::zero());
    }
    if k == 1 {
        // outer product; a and b are vectors whatever their layout
        for (i, row) in c[..m * n].chunks_exact_mut(n).enumerate() {
            let av = a[i];
            for (d, &bv) in row.iter_mut().zip(&b[..n]) {
                *d += av * bv;
            }
        }
        return;
    }
    if b_t && !a_t && m <= 8 {
        // rows of a against rows of b: contiguous dot products
        for (i, row) in c[..m * n].chunks_exact_mut(n).enumerate() {
            let ar = &a[i * k..(i + 1) * k];
            for (j, d) in row.iter_mut().enumerate() {
                *d += dot(ar, &b[j * k..(j + 1) * k]);
            }
        }
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the assert above bounds every index the strides can reach.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(&x, &y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

/// Patch geometry linking an iteration grid to a source grid: iteration
/// position `i` and tap `t` touch source position `i * stride + t - pad`.
struct Patch {
    channels: usize,
    src: [usize; 3],
    iter: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
}

impl Patch {
    fn iter_len(&self) -> usize {
        self.iter.iter().product()
    }

    fn col_len(&self) -> usize {
        self.channels * self.kernel.iter().product::<usize>() * self.iter_len()
    }

    /// Visits `(row, iter offset, src offset, run length)` for every
    /// contiguous run; `row` is `channel * taps + tap`.
    fn walk(&self, mut visit: impl FnMut(usize, usize, usize, usize)) {
        let [iz, iy, ix] = self.iter;
        let [nz, ny, nx] = self.src;
        let [kz, ky, kx] = self.kernel;
        let [sz, sy, sx] = self.stride;
        let [pz, py, px] = self.pad;
        let src_len = nz * ny * nx;
        let mut row = 0;
        for c in 0..self.channels {
            let sbase = c * src_len;
            for tz in 0..kz {
                let (zlo, zhi) = valid_range(iz, nz, tz, sz, pz);
                for ty in 0..ky {
                    let (ylo, yhi) = valid_range(iy, ny, ty, sy, py);
                    for tx in 0..kx {
                        let (xlo, xhi) = valid_range(ix, nx, tx, sx, px);
                        if xlo < xhi {
                            for z in zlo..zhi {
                                let zs = z * sz + tz - pz;
                                for y in ylo..yhi {
                                    let ys = y * sy + ty - py;
                                    let it = (z * iy + y) * ix + xlo;
                                    let so = sbase + (zs * ny + ys) * nx + xlo * sx + tx - px;
                                    visit(row, it, so, xhi - xlo);
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// `col[row, i] = src[...]`, zero where the tap falls outside.
    fn gather<T: Scalar>(&self, src: &[T], col: &mut [T]) {
        let n = self.iter_len();
        let sx = self.stride[2];
        col.fill(T::zero());
        self.walk(|row, it, so, len| {
            let dst = &mut col[row * n + it..row * n + it + len];
            if sx == 1 {
                dst.copy_from_slice(&src[so..so + len]);
            } else {
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = src[so + j * sx];
                }
            }
        });
    }

    /// Adjoint of [`Patch::gather`]: `dst[...] += col[row, i]`.
    fn scatter<T: Scalar>(&self, col: &[T], dst: &mut [T]) {
        let n = self.iter_len();
        let sx = self.stride[2];
        self.walk(|row, it, so, len| {
            let src = &col[row * n + it..row * n + it + len];
            if sx == 1 {
                for (d, &v) in dst[so..so + len].iter_mut().zip(src) {
                    *d += v;
                }
            } else {
                for (j, &v) in src.iter().enumerate() {
                    dst[so + j * sx] += v;
                }
            }
        });
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
        (input + 2 * pad - kernel) / stride + 1
    }

    fn patch(&self) -> Patch {
        Patch {
            channels: self.cin,
            src: self.input,
            iter: self.output,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        }
    }

    fn dims(&self) -> (usize, usize, usize) {
        let si: usize = self.input.iter().product();
        let so: usize = self.output.iter().product();
        (si, so, self.cin * self.kernel.iter().product::<usize>())
    }

    pub fn forward<T: Scalar>(&self, x: &[T], k: &[T], out: &mut [T]) {
        let patch = self.patch();
        let (si, so, rows) = self.dims();
        let mut col = vec![T::zero(); patch.col_len()];
        for b in 0..self.batch {
            patch.gather(&x[b * self.cin * si..], &mut col);
            let dst = &mut out[b * self.cout * so..(b + 1) * self.cout * so];
            matmul(self.cout, rows, so, k, false, &col, false, T::one(), dst);
        }
    }

    pub fn backward_input<T: Scalar>(&self, g: &[T], k: &[T], gx: &mut [T]) {
        let patch = self.patch();
        let (si, so, rows) = self.dims();
        let mut col = vec![T::zero(); patch.col_len()];
        for b in 0..self.batch {
            let gb = &g[b * self.cout * so..(b + 1) * self.cout * so];
            matmul(rows, self.cout, so, k, true, gb, false, T::zero(), &mut col);
            patch.scatter(&col, &mut gx[b * self.cin * si..(b + 1) * self.cin * si]);
        }
    }

    pub fn backward_kernel<T: Scalar>(&self, g: &[T], x: &[T], gk: &mut [T]) {
        let patch = self.patch();
        let (si, so, rows) = self.dims();
        let mut col = vec![T::zero(); patch.col_len()];
        for b in 0..self.batch {
            patch.gather(&x[b * self.cin * si..], &mut col);
            let gb = &g[b * self.cout * so..(b + 1) * self.cout * so];
            matmul(self.cout, so, rows, gb, false, &col, true, T::one(), gk);
        }
    }
}

/// Transposed 3D convolution, kernel laid out `[cin, cout, kz, ky, kx]`.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct TConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl TConvGeom {
    pub fn out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
        (input - 1) * stride + kernel - 2 * pad
    }

    fn patch(&self) -> Patch {
        Patch {
            channels: self.cout,
            src: self.output,
            iter: self.input,
            kernel: [self.kernel; 3],
            stride: [self.stride; 3],
            pad: [self.pad; 3],
        }
    }

    fn dims(&self) -> (usize, usize, usize) {
        let si: usize = self.input.iter().product();
        let so: usize = self.output.iter().product();
        (si, so, self.cout * self.kernel.pow(3))
    }

    pub fn forward<T: Scalar>(&self, x: &[T], w: &[T], out: &mut [T]) {
        let patch = self.patch();
        let (si, so, rows) = self.dims();
        let mut col = vec![T::zero(); patch.col_len()];
        for b in 0..self.batch {
            let xb = &x[b * self.cin * si..(b + 1) * self.cin * si];
            matmul(rows, self.cin, si, w, true, xb, false, T::zero(), &mut col);
            patch.scatter(&col, &mut out[b * self.cout * so..(b + 1) * self.cout * so]);
        }
    }

    pub fn backward_input<T: Scalar>(&self, g: &[T], w: &[T], gx: &mut [T]) {
        let patch = self.patch();
        let (si, so, rows) = self.dims();
        let mut col = vec![T::zero(); patch.col_len()];
        for b in 0..self.batch {
            patch.gather(&g[b * self.cout * so..], &mut col);
            let dst = &mut gx[b * self.cin * si..(b + 1) * self.cin * si];
            matmul(self.cin, rows, si, w, false, &col, false, T::one(), dst);
        }
    }

    pub fn backward_kernel<T: Scalar>(&self, g: &[T], x: &[T], gw: &mut [T]) {
        let patch = self.patch();
        let (si, so, rows) = self.dims();
        let mut col = vec![T::zero(); patch.col_len()];
        for b in 0..self.batch {
            patch.gather(&g[b * self.cout * so..], &mut col);
            let xb = &x[b * self.cin * si..(b + 1) * self.cin * si];
            matmul(self.cin, si, rows, xb, false, &col, true, T::one(), gw);
        }
    }
}
