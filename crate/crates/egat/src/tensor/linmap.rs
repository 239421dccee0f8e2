//! Sparse linear index maps: one primitive covering pooling, upsampling,
//! broadcasts over channels, element selection and masked gathers.
//!
//! Every map is linear with coefficients frozen at construction time, so its
//! adjoint is simply the transposed entry list. That keeps anything built on
//! top of it differentiable to arbitrary order.

use std::cell::OnceCell;
use std::rc::Rc;

use super::Tensor;

/// A sparse matrix `out[o] += coeff * x[i]` over flattened tensors.
pub struct LinMap {
    pub(crate) tag: &'static str,
    pub(crate) in_shape: Vec<usize>,
    pub(crate) out_shape: Vec<usize>,
    /// (out_index, in_index, coeff), applied in order.
    pub(crate) entries: Vec<(u32, u32, f64)>,
    transposed: OnceCell<Rc<LinMap>>,
}

impl LinMap {
    pub(crate) fn new(
        tag: &'static str,
        in_shape: Vec<usize>,
        out_shape: Vec<usize>,
        entries: Vec<(u32, u32, f64)>,
    ) -> Self {
        LinMap { tag, in_shape, out_shape, entries, transposed: OnceCell::new() }
    }

    pub(crate) fn tag(&self) -> &'static str {
        self.tag
    }

    pub(crate) fn apply(&self, x: &[f64]) -> Tensor {
        let mut out = vec![0.0; self.out_shape.iter().product()];
        for &(o, i, c) in &self.entries {
            out[o as usize] += c * x[i as usize];
        }
        Tensor::from_parts(self.out_shape.clone(), out)
    }

    /// Adjoint map; cached because backward passes request it repeatedly.
    pub(crate) fn transposed(self: &Rc<Self>) -> Rc<LinMap> {
        self.transposed
            .get_or_init(|| {
                let entries = self.entries.iter().map(|&(o, i, c)| (i, o, c)).collect();
                Rc::new(LinMap::new(self.tag, self.out_shape.clone(), self.in_shape.clone(), entries))
            })
            .clone()
    }
}

impl std::fmt::Debug for LinMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LinMap")
            .field("tag", &self.tag)
            .field("in_shape", &self.in_shape)
            .field("out_shape", &self.out_shape)
            .field("entries", &self.entries.len())
            .finish()
    }
}

/// 2x2 average pooling with stride 2; odd trailing rows/columns are dropped.
pub(crate) fn avgpool2(channels: usize, h: usize, w: usize) -> LinMap {
    let (oh, ow) = (h / 2, w / 2);
    let mut entries = Vec::with_capacity(channels * oh * ow * 4);
    for c in 0..channels {
        for i in 0..oh {
            for j in 0..ow {
                let o = ((c * oh + i) * ow + j) as u32;
                for di in 0..2 {
                    for dj in 0..2 {
                        let src = (c * h + 2 * i + di) * w + 2 * j + dj;
                        entries.push((o, src as u32, 0.25));
                    }
                }
            }
        }
    }
    LinMap::new("avgpool2", vec![channels, h, w], vec![channels, oh, ow], entries)
}

/// 2x2 max pooling with the argmax pattern frozen from `x`. Ties go to the
/// first element in scan order so the routing is deterministic.
pub(crate) fn maxpool2_frozen(x: &Tensor, channels: usize, h: usize, w: usize) -> LinMap {
    let (oh, ow) = (h / 2, w / 2);
    let data = x.data();
    let mut entries = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        for i in 0..oh {
            for j in 0..ow {
                let o = ((c * oh + i) * ow + j) as u32;
                let mut best_idx = (c * h + 2 * i) * w + 2 * j;
                let mut best = data[best_idx];
                for di in 0..2 {
                    for dj in 0..2 {
                        let src = (c * h + 2 * i + di) * w + 2 * j + dj;
                        if data[src] > best {
                            best = data[src];
                            best_idx = src;
                        }
                    }
                }
                entries.push((o, best_idx as u32, 1.0));
            }
        }
    }
    LinMap::new("maxpool2", vec![channels, h, w], vec![channels, oh, ow], entries)
}

/// Bilinear interpolation weights with corner alignment, `(h, w) -> (oh, ow)`.
/// Equal sizes degenerate to the identity map.
pub(crate) fn bilinear_upsample(h: usize, w: usize, oh: usize, ow: usize) -> LinMap {
    let scale = |dst: usize, src: usize, i: usize| -> f64 {
        if dst <= 1 {
            0.0
        } else {
            i as f64 * (src - 1) as f64 / (dst - 1) as f64
        }
    };
    let mut entries = Vec::with_capacity(oh * ow * 4);
    for i in 0..oh {
        let y = scale(oh, h, i);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = y - y0 as f64;
        for j in 0..ow {
            let x = scale(ow, w, j);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = x - x0 as f64;
            let o = (i * ow + j) as u32;
            let mut push = |r: usize, c: usize, coeff: f64| {
                if coeff != 0.0 {
                    entries.push((o, (r * w + c) as u32, coeff));
                }
            };
            if wy == 0.0 && wx == 0.0 {
                push(y0, x0, 1.0);
            } else {
                push(y0, x0, (1.0 - wy) * (1.0 - wx));
                push(y0, x1, (1.0 - wy) * wx);
                push(y1, x0, wy * (1.0 - wx));
                push(y1, x1, wy * wx);
            }
        }
    }
    LinMap::new("upsample_bilinear", vec![h, w], vec![oh, ow], entries)
}

/// Mean over the spatial extent of each channel: `(k, h, w) -> (k,)`.
pub(crate) fn channel_mean(k: usize, h: usize, w: usize) -> LinMap {
    let coeff = 1.0 / (h * w) as f64;
    let mut entries = Vec::with_capacity(k * h * w);
    for c in 0..k {
        for s in 0..h * w {
            entries.push((c as u32, (c * h * w + s) as u32, coeff));
        }
    }
    LinMap::new("channel_mean", vec![k, h, w], vec![k], entries)
}

/// Repeat a per-channel scalar over the spatial extent: `(k,) -> (k, h, w)`.
pub(crate) fn channel_broadcast(k: usize, h: usize, w: usize) -> LinMap {
    let mut entries = Vec::with_capacity(k * h * w);
    for c in 0..k {
        for s in 0..h * w {
            entries.push(((c * h * w + s) as u32, c as u32, 1.0));
        }
    }
    LinMap::new("channel_broadcast", vec![k], vec![k, h, w], entries)
}

/// Sum across channels: `(k, h, w) -> (h, w)`.
pub(crate) fn channel_sum(k: usize, h: usize, w: usize) -> LinMap {
    let mut entries = Vec::with_capacity(k * h * w);
    for c in 0..k {
        for s in 0..h * w {
            entries.push((s as u32, (c * h * w + s) as u32, 1.0));
        }
    }
    LinMap::new("channel_sum", vec![k, h, w], vec![h, w], entries)
}

/// Extract one element as a scalar.
pub(crate) fn select_index(shape: &[usize], index: usize) -> LinMap {
    LinMap::new("select", shape.to_vec(), vec![1], vec![(0, index as u32, 1.0)])
}

/// Gather the elements where `mask` is true, in index order.
pub(crate) fn mask_gather(shape: &[usize], mask: &[bool]) -> LinMap {
    let entries: Vec<(u32, u32, f64)> = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .enumerate()
        .map(|(o, (i, _))| (o as u32, i as u32, 1.0))
        .collect();
    let n = entries.len();
    LinMap::new("mask_gather", shape.to_vec(), vec![n], entries)
}
