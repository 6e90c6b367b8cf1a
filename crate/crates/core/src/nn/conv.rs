use super::{init_tensor, join, Init, Module, Param};
use crate::exec;
use crate::tensor::{gemm, Float, MatRef, Tensor};
use rand::Rng;

/// Pointwise nonlinearity fused into a convolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    fn apply<F: Float>(self, v: F) -> F {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(F::zero()),
            Activation::LeakyRelu(s) => {
                if v > F::zero() {
                    v
                } else {
                    v * F::lit(s)
                }
            }
        }
    }

    /// Derivative expressed through the activation's output.
    fn slope_from_output<F: Float>(self, y: F) -> F {
        match self {
            Activation::Identity => F::one(),
            Activation::Relu => {
                if y > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            Activation::LeakyRelu(s) => {
                if y > F::zero() {
                    F::one()
                } else {
                    F::lit(s)
                }
            }
        }
    }
}

/// 2-D convolution with square kernel, symmetric zero padding and a fused
/// activation. Weight layout is `[out, in, k, k]`.
#[derive(Clone, Debug)]
pub struct Conv2d<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    pub stride: usize,
    pub pad: usize,
    pub act: Activation,
}

/// Saved activations for [`Conv2d::backward`].
#[derive(Clone, Debug)]
pub struct ConvCache<F> {
    input: Tensor<F>,
    output: Tensor<F>,
}

/// Gradients produced by a convolution backward pass.
pub struct ConvGrads<F> {
    pub input: Tensor<F>,
    pub weight: Option<Tensor<F>>,
    pub bias: Option<Tensor<F>>,
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.hout * self.wout
    }
}

fn im2col<F: Float>(x: &[F], g: &Geometry) -> Vec<F> {
    let (hw_out, k) = (g.cols(), g.k);
    let mut cols = vec![F::zero(); g.rows() * hw_out];
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.hout {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let out = &mut dst[oy * g.wout..(oy + 1) * g.wout];
                    if g.stride == 1 {
                        // ix = ox + kj - pad
                        let lo = g.pad.saturating_sub(kj);
                        let hi = (g.w + g.pad - kj).min(g.wout);
                        if lo < hi {
                            let s0 = lo + kj - g.pad;
                            out[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *o = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: Float>(cols: &[F], g: &Geometry) -> Vec<F> {
    let (hw_out, k) = (g.cols(), g.k);
    let mut x = vec![F::zero(); g.cin * g.h * g.w];
    for c in 0..g.cin {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.hout {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[oy * g.wout..(oy + 1) * g.wout];
                    for (ox, &v) in s.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
    x
}

impl<F: Float> Conv2d<F> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        act: Activation,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * k * k;
        let weight = init_tensor([cout, cin, k, k], fan_in, init, rng);
        let bias = match init {
            Init::FanInUniform => init_tensor([cout, 1, 1, 1], fan_in, init, rng),
            Init::HeNormal => Tensor::zeros([cout, 1, 1, 1]),
        };
        Conv2d { weight: Param::new(weight), bias: Param::new(bias), stride, pad, act }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    fn geometry(&self, x: &Tensor<F>) -> Geometry {
        let [_, cin, h, w] = x.shape();
        assert_eq!(cin, self.in_channels(), "conv input channels");
        let k = self.kernel();
        assert!(h + 2 * self.pad >= k && w + 2 * self.pad >= k, "input smaller than kernel");
        let (hout, wout) = self.output_size(h, w);
        Geometry { cin, h, w, k, stride: self.stride, pad: self.pad, hout, wout }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        let g = self.geometry(x);
        let cout = self.out_channels();
        let wmat = MatRef::row_major(self.weight.value.data(), cout, g.rows());
        let bias = self.bias.value.data();
        let items = exec::map_range(x.batch(), |b| {
            let xi = x.item(b);
            let cols;
            let cm = if g.is_pointwise() {
                MatRef::row_major(xi, g.rows(), g.cols())
            } else {
                cols = im2col(xi, &g);
                MatRef::row_major(&cols, g.rows(), g.cols())
            };
            let mut out = vec![F::zero(); cout * g.cols()];
            gemm(F::one(), wmat, cm, F::zero(), &mut out);
            for (co, chunk) in out.chunks_mut(g.cols()).enumerate() {
                let bv = bias[co];
                for v in chunk.iter_mut() {
                    *v = self.act.apply(*v + bv);
                }
            }
            out
        });
        Tensor::from_items([cout, g.hout, g.wout], items)
    }

    pub fn forward_train(&self, x: &Tensor<F>) -> (Tensor<F>, ConvCache<F>) {
        let y = self.forward(x);
        (y.clone(), ConvCache { input: x.clone(), output: y })
    }

    /// Backward pass. Parameter gradients are computed only when
    /// `want_params` is set.
    pub fn backward(&self, cache: &ConvCache<F>, grad_out: &Tensor<F>, want_params: bool) -> ConvGrads<F> {
        let x = &cache.input;
        let g = self.geometry(x);
        let cout = self.out_channels();
        assert_eq!(grad_out.shape(), cache.output.shape(), "grad shape");
        let act = self.act;
        let wmat = MatRef::row_major(self.weight.value.data(), cout, g.rows());
        let parts = exec::map_range(x.batch(), |b| {
            let gz: Vec<F> = grad_out
                .item(b)
                .iter()
                .zip(cache.output.item(b))
                .map(|(&go, &y)| go * act.slope_from_output(y))
                .collect();
            let gzm = MatRef::row_major(&gz, cout, g.cols());
            let xi = x.item(b);
            let cols;
            let cm = if g.is_pointwise() {
                MatRef::row_major(xi, g.rows(), g.cols())
            } else {
                cols = im2col(xi, &g);
                MatRef::row_major(&cols, g.rows(), g.cols())
            };
            let (dw, db) = if want_params {
                let mut dw = vec![F::zero(); cout * g.rows()];
                gemm(F::one(), gzm, cm.t(), F::zero(), &mut dw);
                let db: Vec<F> = gz.chunks(g.cols()).map(|c| c.iter().copied().sum()).collect();
                (Some(dw), Some(db))
            } else {
                (None, None)
            };
            let mut dcols = vec![F::zero(); g.rows() * g.cols()];
            gemm(F::one(), wmat.t(), gzm, F::zero(), &mut dcols);
            let dx = if g.is_pointwise() { dcols } else { col2im(&dcols, &g) };
            (dx, dw, db)
        });
        let mut dx_items = Vec::with_capacity(parts.len());
        let mut dw_acc: Option<Vec<F>> = None;
        let mut db_acc: Option<Vec<F>> = None;
        for (dx, dw, db) in parts {
            dx_items.push(dx);
            if let (Some(dw), Some(db)) = (dw, db) {
                match (&mut dw_acc, &mut db_acc) {
                    (Some(wa), Some(ba)) => {
                        wa.iter_mut().zip(&dw).for_each(|(a, v)| *a += *v);
                        ba.iter_mut().zip(&db).for_each(|(a, v)| *a += *v);
                    }
                    _ => {
                        dw_acc = Some(dw);
                        db_acc = Some(db);
                    }
                }
            }
        }
        ConvGrads {
            input: Tensor::from_items([g.cin, g.h, g.w], dx_items),
            weight: dw_acc.map(|d| Tensor::from_vec(self.weight.value.shape(), d)),
            bias: db_acc.map(|d| Tensor::from_vec(self.bias.value.shape(), d)),
        }
    }

    /// Backward that folds parameter gradients into this layer's buffers.
    pub fn backward_accumulate(&mut self, cache: &ConvCache<F>, grad_out: &Tensor<F>) -> Tensor<F> {
        let grads = self.backward(cache, grad_out, true);
        if let Some(dw) = &grads.weight {
            self.weight.grad.add_assign(dw);
        }
        if let Some(db) = &grads.bias {
            self.bias.grad.add_assign(db);
        }
        grads.input
    }
}

impl<F: Float> Module<F> for Conv2d<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Transposed convolution with a 2x2 kernel and stride 2 (exact 2x
/// upsampling). Weight layout is `[in, out, 2, 2]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2x2<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
}

#[derive(Clone, Debug)]
pub struct UpCache<F> {
    input: Tensor<F>,
}

impl<F: Float> ConvTranspose2x2<F> {
    pub fn new<R: Rng>(cin: usize, cout: usize, rng: &mut R) -> Self {
        // fan-in as seen from one output pixel
        let fan_in = cout * 4;
        let weight = init_tensor([cin, cout, 2, 2], fan_in, Init::FanInUniform, rng);
        let bias = init_tensor([cout, 1, 1, 1], fan_in, Init::FanInUniform, rng);
        ConvTranspose2x2 { weight: Param::new(weight), bias: Param::new(bias) }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        let [_, cin, h, w] = x.shape();
        assert_eq!(cin, self.weight.value.shape()[0], "upconv input channels");
        let cout = self.out_channels();
        let (rows, hw) = (cout * 4, h * w);
        let wmat = MatRef::row_major(self.weight.value.data(), cin, rows);
        let bias = self.bias.value.data();
        let items = exec::map_range(x.batch(), |b| {
            let mut y = vec![F::zero(); rows * hw];
            gemm(F::one(), wmat.t(), MatRef::row_major(x.item(b), cin, hw), F::zero(), &mut y);
            let mut out = vec![F::zero(); cout * 4 * hw];
            let w2 = 2 * w;
            for co in 0..cout {
                for a in 0..2 {
                    for bb in 0..2 {
                        let src = &y[(co * 4 + a * 2 + bb) * hw..][..hw];
                        for i in 0..h {
                            let dst = &mut out[co * 4 * hw + (2 * i + a) * w2..][..w2];
                            for j in 0..w {
                                dst[2 * j + bb] = src[i * w + j] + bias[co];
                            }
                        }
                    }
                }
            }
            out
        });
        Tensor::from_items([cout, 2 * h, 2 * w], items)
    }

    pub fn forward_train(&self, x: &Tensor<F>) -> (Tensor<F>, UpCache<F>) {
        (self.forward(x), UpCache { input: x.clone() })
    }

    pub fn backward(&self, cache: &UpCache<F>, grad_out: &Tensor<F>, want_params: bool) -> ConvGrads<F> {
        let x = &cache.input;
        let [_, cin, h, w] = x.shape();
        let cout = self.out_channels();
        let (rows, hw, w2) = (cout * 4, h * w, 2 * w);
        let wmat = MatRef::row_major(self.weight.value.data(), cin, rows);
        let parts = exec::map_range(x.batch(), |b| {
            let go = grad_out.item(b);
            let mut gy = vec![F::zero(); rows * hw];
            let mut db = vec![F::zero(); cout];
            for co in 0..cout {
                for a in 0..2 {
                    for bb in 0..2 {
                        let dst = &mut gy[(co * 4 + a * 2 + bb) * hw..][..hw];
                        for i in 0..h {
                            let src = &go[co * 4 * hw + (2 * i + a) * w2..][..w2];
                            for j in 0..w {
                                let v = src[2 * j + bb];
                                dst[i * w + j] = v;
                                db[co] += v;
                            }
                        }
                    }
                }
            }
            let gym = MatRef::row_major(&gy, rows, hw);
            let xm = MatRef::row_major(x.item(b), cin, hw);
            let dw = want_params.then(|| {
                let mut dw = vec![F::zero(); cin * rows];
                gemm(F::one(), xm, gym.t(), F::zero(), &mut dw);
                dw
            });
            let mut dx = vec![F::zero(); cin * hw];
            gemm(F::one(), wmat, gym, F::zero(), &mut dx);
            (dx, dw, db)
        });
        let mut dx_items = Vec::new();
        let mut dw_acc = want_params.then(|| vec![F::zero(); cin * rows]);
        let mut db_acc = want_params.then(|| vec![F::zero(); cout]);
        for (dx, dw, db) in parts {
            dx_items.push(dx);
            if let (Some(wa), Some(dw)) = (&mut dw_acc, dw) {
                wa.iter_mut().zip(&dw).for_each(|(a, v)| *a += *v);
            }
            if let Some(ba) = &mut db_acc {
                ba.iter_mut().zip(&db).for_each(|(a, v)| *a += *v);
            }
        }
        ConvGrads {
            input: Tensor::from_items([cin, h, w], dx_items),
            weight: dw_acc.map(|d| Tensor::from_vec(self.weight.value.shape(), d)),
            bias: db_acc.map(|d| Tensor::from_vec(self.bias.value.shape(), d)),
        }
    }

    pub fn backward_accumulate(&mut self, cache: &UpCache<F>, grad_out: &Tensor<F>) -> Tensor<F> {
        let grads = self.backward(cache, grad_out, true);
        if let Some(dw) = &grads.weight {
            self.weight.grad.add_assign(dw);
        }
        if let Some(db) = &grads.bias {
            self.bias.grad.add_assign(db);
        }
        grads.input
    }
}

impl<F: Float> Module<F> for ConvTranspose2x2<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
