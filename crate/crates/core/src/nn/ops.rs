use crate::exec;
use crate::tensor::{Float, Tensor};

/// Argmax offsets (0..4 within each 2x2 window) for [`maxpool2_backward`].
#[derive(Clone, Debug)]
pub struct PoolCache {
    in_shape: [usize; 4],
    argmax: Vec<u8>,
}

/// 2x2 max pooling with stride 2. Spatial sizes must be even.
pub fn maxpool2<F: Float>(x: &Tensor<F>) -> (Tensor<F>, PoolCache) {
    let [n, c, h, w] = x.shape();
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 needs even spatial size, got {h}x{w}");
    let (ho, wo) = (h / 2, w / 2);
    let items = exec::map_range(n, |b| {
        let xi = x.item(b);
        let mut out = vec![F::zero(); c * ho * wo];
        let mut arg = vec![0u8; c * ho * wo];
        for ch in 0..c {
            let plane = &xi[ch * h * w..(ch + 1) * h * w];
            for oy in 0..ho {
                let r0 = &plane[2 * oy * w..(2 * oy + 1) * w];
                let r1 = &plane[(2 * oy + 1) * w..(2 * oy + 2) * w];
                for ox in 0..wo {
                    let cand = [r0[2 * ox], r0[2 * ox + 1], r1[2 * ox], r1[2 * ox + 1]];
                    let mut best = 0;
                    for (i, &v) in cand.iter().enumerate().skip(1) {
                        if v > cand[best] {
                            best = i;
                        }
                    }
                    let o = (ch * ho + oy) * wo + ox;
                    out[o] = cand[best];
                    arg[o] = best as u8;
                }
            }
        }
        (out, arg)
    });
    let mut outs = Vec::with_capacity(n);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for (o, a) in items {
        outs.push(o);
        argmax.extend_from_slice(&a);
    }
    (Tensor::from_items([c, ho, wo], outs), PoolCache { in_shape: [n, c, h, w], argmax })
}

pub fn maxpool2_backward<F: Float>(cache: &PoolCache, grad_out: &Tensor<F>) -> Tensor<F> {
    let [n, c, h, w] = cache.in_shape;
    let (ho, wo) = (h / 2, w / 2);
    assert_eq!(grad_out.shape(), [n, c, ho, wo]);
    let mut gx = Tensor::zeros(cache.in_shape);
    let g = grad_out.data();
    let dst = gx.data_mut();
    for plane in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let o = (plane * ho + oy) * wo + ox;
                let a = cache.argmax[o] as usize;
                let (dy, dx) = (a / 2, a % 2);
                dst[(plane * h + 2 * oy + dy) * w + 2 * ox + dx] += g[o];
            }
        }
    }
    gx
}

/// Normalised exponential across the channel axis at every pixel.
pub fn softmax_channels<F: Float>(logits: &Tensor<F>) -> Tensor<F> {
    let [n, c, h, w] = logits.shape();
    let hw = h * w;
    let mut out = Tensor::zeros(logits.shape());
    for b in 0..n {
        let src = logits.item(b);
        let dst = out.item_mut(b);
        for p in 0..hw {
            let mut m = F::neg_infinity();
            for ch in 0..c {
                m = m.max(src[ch * hw + p]);
            }
            let mut z = F::zero();
            for ch in 0..c {
                let e = (src[ch * hw + p] - m).exp();
                dst[ch * hw + p] = e;
                z += e;
            }
            for ch in 0..c {
                dst[ch * hw + p] = dst[ch * hw + p] / z;
            }
        }
    }
    out
}

/// Gradient with respect to the logits given the softmax output.
pub fn softmax_channels_backward<F: Float>(probs: &Tensor<F>, grad_probs: &Tensor<F>) -> Tensor<F> {
    let [n, c, h, w] = probs.shape();
    assert_eq!(grad_probs.shape(), probs.shape());
    let hw = h * w;
    let mut out = Tensor::zeros(probs.shape());
    for b in 0..n {
        let p = probs.item(b);
        let g = grad_probs.item(b);
        let dst = out.item_mut(b);
        for px in 0..hw {
            let mut dotp = F::zero();
            for ch in 0..c {
                dotp += p[ch * hw + px] * g[ch * hw + px];
            }
            for ch in 0..c {
                let i = ch * hw + px;
                dst[i] = p[i] * (g[i] - dotp);
            }
        }
    }
    out
}

pub fn sigmoid<F: Float>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| F::one() / (F::one() + (-v).exp()))
}

pub fn sigmoid_backward<F: Float>(out: &Tensor<F>, grad_out: &Tensor<F>) -> Tensor<F> {
    let data = out
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&s, &g)| g * s * (F::one() - s))
        .collect();
    Tensor::from_vec(out.shape(), data)
}
