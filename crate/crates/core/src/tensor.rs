//! Dense NCHW tensors and the scalar trait the network code is generic over.
//!
//! Training runs in `f32`; gradient checks instantiate the same code at `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

/// Scalar type usable by the layers: a float with a strided GEMM kernel.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// `c <- alpha * a * b + beta * c` on raw strided storage.
    ///
    /// # Safety
    /// Every index reachable through the given dimensions and strides must be
    /// in bounds for the pointed-to buffers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits")
    }
}

impl Float for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Float for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Borrowed strided matrix view.
#[derive(Clone, Copy)]
pub struct MatRef<'a, F> {
    pub data: &'a [F],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, F> MatRef<'a, F> {
    /// Row-major `rows x cols` view.
    pub fn row_major(data: &'a [F], rows: usize, cols: usize) -> Self {
        MatRef { data, rows, cols, rs: cols, cs: 1 }
    }

    pub fn t(self) -> Self {
        MatRef { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// `c <- alpha * a * b + beta * c`, with `c` row-major `a.rows x b.cols`.
pub fn gemm<F: Float>(alpha: F, a: MatRef<'_, F>, b: MatRef<'_, F>, beta: F, c: &mut [F]) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    a.check();
    b.check();
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n, "output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: bounds of a and b are checked above; c holds m*n row-major.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            alpha,
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

/// A dense 4-D tensor in NCHW order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: [usize; 4],
    data: Vec<F>,
}

impl<F: Float> Tensor<F> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: [usize; 4], v: F) -> Self {
        Tensor { shape, data: vec![v; shape.iter().product()] }
    }

    /// Panics when `data.len()` disagrees with `shape`.
    pub fn from_vec(shape: [usize; 4], data: Vec<F>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<F> {
        self.data
    }

    /// Elements of one batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn item(&self, b: usize) -> &[F] {
        let n = self.item_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn item_mut(&mut self, b: usize) -> &mut [F] {
        let n = self.item_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn plane(&self, b: usize, c: usize) -> &[F] {
        let hw = self.shape[2] * self.shape[3];
        let start = (b * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [F] {
        let hw = self.shape[2] * self.shape[3];
        let start = (b * self.shape[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn get(&self, b: usize, c: usize, y: usize, x: usize) -> F {
        let [_, ch, h, w] = self.shape;
        self.data[((b * ch + c) * h + y) * w + x]
    }

    /// Stack per-item buffers (each `c*h*w` long) into a batch.
    pub fn from_items(item_shape: [usize; 3], items: Vec<Vec<F>>) -> Self {
        let [c, h, w] = item_shape;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        for it in &items {
            assert_eq!(it.len(), c * h * w);
            data.extend_from_slice(it);
        }
        Tensor::from_vec([items.len(), c, h, w], data)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, s: F) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) {
        assert_eq!(self.shape, other.shape, "shape mismatch in add");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add_scaled(&mut self, other: &Tensor<F>, s: F) {
        assert_eq!(self.shape, other.shape, "shape mismatch in add");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b * s;
        }
    }

    pub fn fill(&mut self, v: F) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> F {
        self.sum() / F::from_usize(self.len()).unwrap()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Items `start..end` along the batch axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Self {
        let n = self.item_len();
        let mut shape = self.shape;
        shape[0] = end - start;
        Tensor { shape, data: self.data[start * n..end * n].to_vec() }
    }

    /// Concatenate along the batch axis.
    pub fn concat_batch(parts: &[&Tensor<F>]) -> Self {
        let first = parts[0].shape;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            assert_eq!(p.shape[1..], first[1..], "item shapes differ");
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Tensor { shape: [n, first[1], first[2], first[3]], data }
    }

    /// Concatenate along the channel axis: `[a; b]`.
    pub fn concat_channels(a: &Tensor<F>, b: &Tensor<F>) -> Self {
        let [n, ca, h, w] = a.shape;
        assert_eq!([n, h, w], [b.shape[0], b.shape[2], b.shape[3]], "concat shape mismatch");
        let cb = b.shape[1];
        let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
        for i in 0..n {
            data.extend_from_slice(a.item(i));
            data.extend_from_slice(b.item(i));
        }
        Tensor { shape: [n, ca + cb, h, w], data }
    }

    /// Inverse of [`Tensor::concat_channels`]: the first `at` channels and the rest.
    pub fn split_channels(&self, at: usize) -> (Self, Self) {
        let [n, c, h, w] = self.shape;
        assert!(at <= c);
        let hw = h * w;
        let mut a = Vec::with_capacity(n * at * hw);
        let mut b = Vec::with_capacity(n * (c - at) * hw);
        for i in 0..n {
            let it = self.item(i);
            a.extend_from_slice(&it[..at * hw]);
            b.extend_from_slice(&it[at * hw..]);
        }
        (Tensor { shape: [n, at, h, w], data: a }, Tensor { shape: [n, c - at, h, w], data: b })
    }

    /// A single channel as an `n x 1 x h x w` tensor.
    pub fn channel(&self, c: usize) -> Self {
        let [n, _, h, w] = self.shape;
        let mut data = Vec::with_capacity(n * h * w);
        for i in 0..n {
            data.extend_from_slice(self.plane(i, c));
        }
        Tensor { shape: [n, 1, h, w], data }
    }

    pub fn cast<G: Float>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| G::from_f64(v.to_f64().unwrap()).unwrap()).collect(),
        }
    }
}
