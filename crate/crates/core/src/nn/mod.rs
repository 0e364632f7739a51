//! Minimal deterministic neural-network core.
//!
//! Layers carry their own parameters and gradient buffers and expose explicit
//! `forward`/`backward` pairs; there is no tape. All parallel work is split
//! over fixed chunk boundaries (samples, channels, or constant-size row
//! blocks) and every floating-point reduction runs in a fixed serial order,
//! so results are bit-reproducible regardless of thread count.

pub mod act;
pub mod adam;
pub mod conv;
pub mod norm;
pub mod pool;

pub use act::{leaky_relu_backward, leaky_relu_forward, relu_backward, relu_forward};
pub use act::{sigmoid_backward, sigmoid_forward};
pub use adam::Adam;
pub use conv::{Conv2d, ConvCache};
pub use norm::{BatchNorm2d, BnCache};
pub use pool::{upsample2x_backward, upsample2x_forward, MaxPool2d, PoolCache};

/// Element type for network arithmetic: `f32` for training speed, `f64` for
/// finite-difference gradient verification.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// General matrix multiply C = alpha * A * B + beta * C with explicit
    /// row/column strides, dispatching to the matching BLAS-style kernel.
    ///
    /// # Safety
    /// The stride/extent combinations must address only valid elements of
    /// the given slices; callers keep buffers sized to their matrix shapes.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
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
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm(
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
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    unsafe fn gemm(
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
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Dense activation tensor, row-major `[batch, channel, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Feat<F> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> Feat<F> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Feat {
            n,
            c,
            h,
            w,
            data: vec![F::zero(); n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), n * c * h * w);
        Feat { n, c, h, w, data }
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    #[inline]
    pub fn sample(&self, b: usize) -> &[F] {
        let s = self.sample_len();
        &self.data[b * s..(b + 1) * s]
    }

    #[inline]
    pub fn plane(&self, b: usize, ch: usize) -> &[F] {
        let p = self.plane_len();
        let at = (b * self.c + ch) * p;
        &self.data[at..at + p]
    }

    #[inline]
    pub fn plane_mut(&mut self, b: usize, ch: usize) -> &mut [F] {
        let p = self.plane_len();
        let at = (b * self.c + ch) * p;
        &mut self.data[at..at + p]
    }

    pub fn same_shape(&self, other: &Feat<F>) -> bool {
        self.n == other.n && self.c == other.c && self.h == other.h && self.w == other.w
    }

    /// Elementwise in-place add.
    pub fn add_assign(&mut self, other: &Feat<F>) {
        assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }
}

/// A parameter tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<F> {
    pub data: Vec<F>,
    pub grad: Vec<F>,
    pub shape: Vec<usize>,
    /// Optimizer updates apply only to trainable parameters; running
    /// statistics are carried here too but flagged off.
    pub trainable: bool,
}

impl<F: Scalar> Param<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>, trainable: bool) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len());
        Param {
            grad: vec![F::zero(); data.len()],
            data,
            shape,
            trainable,
        }
    }

    pub fn zeros(shape: Vec<usize>, trainable: bool) -> Self {
        let numel: usize = shape.iter().product();
        Param::new(shape, vec![F::zero(); numel], trainable)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grad {
            *g = F::zero();
        }
    }
}

/// Visitor callback used to walk a network's parameters in a fixed order.
pub type ParamVisitor<'a, F> = &'a mut dyn FnMut(&str, &mut Param<F>);
