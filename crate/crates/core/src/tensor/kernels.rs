//! Shape helpers and the dense matrix product.

/// Strided view of a row-major matrix: `(data, row_stride, col_stride)`.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = beta * c + a · b` with `c` row-major `[a.rows, b.cols]`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    if a.rows > 0 && a.cols > 0 {
        assert!((m - 1) * a.rs + (k - 1) * a.cs < a.data.len());
    }
    assert!((k - 1) * b.rs + (n - 1) * b.cs < b.data.len());
    // SAFETY: the asserts above bound every index dgemm touches in a and b,
    // and c is exactly m*n contiguous row-major values.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `(outer, len, inner)` for reducing or slicing along `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Output shape of a broadcast between `a` and `b`, aligning trailing axes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out`, the flat index of the broadcast source `src`.
/// `None` when no broadcasting happens.
#[cfg(test)]
pub(crate) fn broadcast_index(out: &[usize], src: &[usize]) -> Option<Vec<usize>> {
    if out == src {
        return None;
    }
    let n: usize = out.iter().product();
    let src_numel: usize = src.iter().product();
    // common fast paths: scalar source, or a trailing block repeated
    if src_numel == 1 {
        return Some(vec![0; n]);
    }
    let pad = out.len() - src.len();
    if src.iter().enumerate().all(|(i, &d)| d == out[pad + i]) {
        return Some((0..n).map(|i| i % src_numel).collect());
    }
    let mut strides = vec![0usize; out.len()];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        strides[pad + i] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    let mut idx = Vec::with_capacity(n);
    let mut coord = vec![0usize; out.len()];
    for _ in 0..n {
        idx.push(coord.iter().zip(&strides).map(|(c, s)| c * s).sum());
        for ax in (0..out.len()).rev() {
            coord[ax] += 1;
            if coord[ax] < out[ax] {
                break;
            }
            coord[ax] = 0;
        }
    }
    Some(idx)
}

/// Strides of `src` viewed inside the broadcast shape `out` (0 on
/// broadcast axes).
fn broadcast_strides(out: &[usize], src: &[usize]) -> Vec<usize> {
    let pad = out.len() - src.len();
    let mut strides = vec![0usize; out.len()];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        strides[pad + i] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    strides
}

/// Calls `f(k, ia, ib)` for every flat output index `k` of the broadcast
/// shape `out`, with the matching flat indices into `a` and `b`.
#[inline]
pub(crate) fn for_each_broadcast(out: &[usize], a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let (sa, sb) = (broadcast_strides(out, a), broadcast_strides(out, b));
    let r = out.len();
    let inner = out[r - 1];
    let (ia_step, ib_step) = (sa[r - 1], sb[r - 1]);
    let mut coord = vec![0usize; r - 1];
    let (mut base_a, mut base_b) = (0usize, 0usize);
    let mut k = 0;
    while k < n {
        let (mut ia, mut ib) = (base_a, base_b);
        for _ in 0..inner {
            f(k, ia, ib);
            k += 1;
            ia += ia_step;
            ib += ib_step;
        }
        for ax in (0..r - 1).rev() {
            coord[ax] += 1;
            base_a += sa[ax];
            base_b += sb[ax];
            if coord[ax] < out[ax] {
                break;
            }
            base_a -= sa[ax] * out[ax];
            base_b -= sb[ax] * out[ax];
            coord[ax] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_plain_and_transposed() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        let mut c = [0.0; 4];
        gemm(MatRef::new(&a, 2, 3), MatRef::new(&b, 3, 2), 0.0, &mut c);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        // a^T a : 3x3
        let mut d = [0.0; 9];
        gemm(MatRef::new(&a, 2, 3).t(), MatRef::new(&a, 2, 3), 0.0, &mut d);
        assert_eq!(d, [17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[4, 3], &[3]), Some(vec![4, 3]));
        assert_eq!(broadcast_shape(&[4, 1], &[1, 5]), Some(vec![4, 5]));
        assert_eq!(broadcast_shape(&[4, 3], &[4]), None);
        assert_eq!(broadcast_index(&[2, 2], &[2, 1]), Some(vec![0, 0, 1, 1]));
        assert_eq!(broadcast_index(&[2, 2], &[2]), Some(vec![0, 1, 0, 1]));
    }

    #[test]
    fn broadcast_iteration_matches_index_tables() {
        let cases: [(&[usize], &[usize]); 5] = [
            (&[2, 3, 4], &[3, 1]),
            (&[2, 1, 4], &[3, 4]),
            (&[5], &[1]),
            (&[2, 3], &[2, 3]),
            (&[4, 1, 2], &[1, 3, 1]),
        ];
        for (a, b) in cases {
            let out = broadcast_shape(a, b).unwrap();
            let ia = broadcast_index(&out, a);
            let ib = broadcast_index(&out, b);
            let mut seen = 0;
            for_each_broadcast(&out, a, b, |k, x, y| {
                assert_eq!(x, ia.as_ref().map_or(k, |v| v[k]));
                assert_eq!(y, ib.as_ref().map_or(k, |v| v[k]));
                seen += 1;
            });
            assert_eq!(seen, out.iter().product::<usize>());
        }
    }
}
