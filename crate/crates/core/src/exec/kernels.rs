//! Straightforward NHWC kernels, generic over the element type.
//!
//! Integer tensors (i8 and i32) are stored as `i32` and accumulate in `i64`;
//! results are narrowed with an overflow check. `f32` sums accumulate in
//! `f64` in a fixed loop order, so a result depends only on its operands and
//! partial sums recombine with error far below the equivalence tolerance.

use crate::ir::{Activation, Padding};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Overflow;

pub(crate) trait Element: Copy + PartialOrd + Default {
    type Acc: Copy;
    const ZERO: Self::Acc;
    fn mac(acc: Self::Acc, a: Self, b: Self) -> Self::Acc;
    fn acc(acc: Self::Acc, a: Self) -> Self::Acc;
    fn finish(acc: Self::Acc) -> Result<Self, Overflow>;
    fn div(acc: Self::Acc, n: usize) -> Result<Self, Overflow>;
    fn relu(self) -> Self;
    fn from_f32(v: f32) -> Self;
}

impl Element for f32 {
    type Acc = f64;
    const ZERO: f64 = 0.0;
    fn mac(acc: f64, a: f32, b: f32) -> f64 {
        acc + a as f64 * b as f64
    }
    fn acc(acc: f64, a: f32) -> f64 {
        acc + a as f64
    }
    fn finish(acc: f64) -> Result<f32, Overflow> {
        Ok(acc as f32)
    }
    fn div(acc: f64, n: usize) -> Result<f32, Overflow> {
        Ok((acc / n as f64) as f32)
    }
    fn relu(self) -> f32 {
        self.max(0.0)
    }
    fn from_f32(v: f32) -> f32 {
        v
    }
}

impl Element for i32 {
    type Acc = i64;
    const ZERO: i64 = 0;
    fn mac(acc: i64, a: i32, b: i32) -> i64 {
        acc.saturating_add(a as i64 * b as i64)
    }
    fn acc(acc: i64, a: i32) -> i64 {
        acc.saturating_add(a as i64)
    }
    fn finish(acc: i64) -> Result<i32, Overflow> {
        i32::try_from(acc).map_err(|_| Overflow)
    }
    fn div(acc: i64, n: usize) -> Result<i32, Overflow> {
        i32::try_from(acc / n as i64).map_err(|_| Overflow)
    }
    fn relu(self) -> i32 {
        self.max(0)
    }
    fn from_f32(v: f32) -> i32 {
        v as i32
    }
}

/// NHWC geometry of a 2-D sliding-window op.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Window {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: [usize; 2],
    pub pad: Padding,
}

impl Window {
    /// Input coordinate for an output position and kernel tap, `None` when
    /// the tap lands in the zero padding.
    #[inline]
    fn input_pos(&self, oh: usize, ow: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let ih = (oh * self.stride[0] + kh).checked_sub(self.pad.top)?;
        let iw = (ow * self.stride[1] + kw).checked_sub(self.pad.left)?;
        (ih < self.in_h && iw < self.in_w).then_some((ih, iw))
    }
}

pub(crate) fn conv2d<T: Element>(
    x: &[T],
    w: &[T],
    win: Window,
    cin: usize,
    cout: usize,
) -> Result<Vec<T>, Overflow> {
    let mut out = Vec::with_capacity(win.out_h * win.out_w * cout);
    for oh in 0..win.out_h {
        for ow in 0..win.out_w {
            for oc in 0..cout {
                let mut acc = T::ZERO;
                for kh in 0..win.k_h {
                    for kw in 0..win.k_w {
                        let Some((ih, iw)) = win.input_pos(oh, ow, kh, kw) else {
                            continue;
                        };
                        let xb = (ih * win.in_w + iw) * cin;
                        let wb = ((oc * win.k_h + kh) * win.k_w + kw) * cin;
                        for ic in 0..cin {
                            acc = T::mac(acc, x[xb + ic], w[wb + ic]);
                        }
                    }
                }
                out.push(T::finish(acc)?);
            }
        }
    }
    Ok(out)
}

pub(crate) fn depthwise_conv2d<T: Element>(
    x: &[T],
    w: &[T],
    win: Window,
    channels: usize,
) -> Result<Vec<T>, Overflow> {
    let mut out = Vec::with_capacity(win.out_h * win.out_w * channels);
    for oh in 0..win.out_h {
        for ow in 0..win.out_w {
            for c in 0..channels {
                let mut acc = T::ZERO;
                for kh in 0..win.k_h {
                    for kw in 0..win.k_w {
                        let Some((ih, iw)) = win.input_pos(oh, ow, kh, kw) else {
                            continue;
                        };
                        acc = T::mac(
                            acc,
                            x[(ih * win.in_w + iw) * channels + c],
                            w[(kh * win.k_w + kw) * channels + c],
                        );
                    }
                }
                out.push(T::finish(acc)?);
            }
        }
    }
    Ok(out)
}

pub(crate) fn dense<T: Element>(
    x: &[T],
    w: &[T],
    rows: usize,
    cin: usize,
    cout: usize,
) -> Result<Vec<T>, Overflow> {
    let mut out = Vec::with_capacity(rows * cout);
    for r in 0..rows {
        let xr = &x[r * cin..(r + 1) * cin];
        for o in 0..cout {
            let wr = &w[o * cin..(o + 1) * cin];
            let mut acc = T::ZERO;
            for i in 0..cin {
                acc = T::mac(acc, xr[i], wr[i]);
            }
            out.push(T::finish(acc)?);
        }
    }
    Ok(out)
}

pub(crate) fn bias_add<T: Element>(x: &[T], b: &[T]) -> Result<Vec<T>, Overflow> {
    let c = b.len();
    x.iter()
        .enumerate()
        .map(|(i, &v)| T::finish(T::acc(T::acc(T::ZERO, v), b[i % c])))
        .collect()
}

pub(crate) fn activate<T: Element>(x: &[T], f: Activation) -> Vec<T> {
    match f {
        Activation::Relu => x.iter().map(|v| v.relu()).collect(),
        Activation::None => x.to_vec(),
    }
}

pub(crate) fn pool<T: Element>(
    x: &[T],
    win: Window,
    channels: usize,
    max: bool,
) -> Result<Vec<T>, Overflow> {
    let area = win.k_h * win.k_w;
    let mut out = Vec::with_capacity(win.out_h * win.out_w * channels);
    for oh in 0..win.out_h {
        for ow in 0..win.out_w {
            for c in 0..channels {
                let mut best: Option<T> = None;
                let mut acc = T::ZERO;
                for kh in 0..win.k_h {
                    for kw in 0..win.k_w {
                        let Some((ih, iw)) = win.input_pos(oh, ow, kh, kw) else {
                            continue;
                        };
                        let v = x[(ih * win.in_w + iw) * channels + c];
                        if max {
                            best = Some(match best {
                                Some(b) if b >= v => b,
                                _ => v,
                            });
                        } else {
                            acc = T::acc(acc, v);
                        }
                    }
                }
                out.push(if max {
                    best.unwrap_or_default()
                } else {
                    T::div(acc, area)?
                });
            }
        }
    }
    Ok(out)
}

pub(crate) fn pad<T: Element>(x: &[T], dims: &[usize], p: Padding, value: T) -> Vec<T> {
    let (h, w, c) = (dims[1], dims[2], dims[3]);
    let (oh, ow) = (h + p.top + p.bottom, w + p.left + p.right);
    let mut out = vec![value; oh * ow * c];
    for y in 0..h {
        for xx in 0..w {
            let src = (y * w + xx) * c;
            let dst = ((y + p.top) * ow + xx + p.left) * c;
            out[dst..dst + c].copy_from_slice(&x[src..src + c]);
        }
    }
    out
}

pub(crate) fn add<T: Element>(a: &[T], b: &[T]) -> Result<Vec<T>, Overflow> {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| T::finish(T::acc(T::acc(T::ZERO, x), y)))
        .collect()
}

/// Splits `dims` around `axis` into (outer, extent, inner) element counts.
pub(crate) fn around(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

pub(crate) fn reduce_mean<T: Element>(
    x: &[T],
    dims: &[usize],
    axis: usize,
    count: usize,
) -> Result<Vec<T>, Overflow> {
    let (outer, len, inner) = around(dims, axis);
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let mut acc = T::ZERO;
            for k in 0..len {
                acc = T::acc(acc, x[(o * len + k) * inner + i]);
            }
            out.push(T::div(acc, count)?);
        }
    }
    Ok(out)
}

pub(crate) fn softmax(x: &[f32], last: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(last) {
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f32> = row.iter().map(|v| (v - m).exp()).collect();
        let sum: f32 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / sum));
    }
    out
}

pub(crate) fn slice<T: Copy>(
    x: &[T],
    dims: &[usize],
    axis: usize,
    begin: usize,
    end: usize,
) -> Vec<T> {
    let (outer, len, inner) = around(dims, axis);
    let mut out = Vec::with_capacity(outer * (end - begin) * inner);
    for o in 0..outer {
        out.extend_from_slice(&x[(o * len + begin) * inner..(o * len + end) * inner]);
    }
    out
}

pub(crate) fn concat<T: Copy>(parts: &[(&[T], &[usize])], axis: usize) -> Vec<T> {
    let outer: usize = parts[0].1[..axis].iter().product();
    let total: usize = parts.iter().map(|(d, _)| d.len()).sum();
    let mut out = Vec::with_capacity(total);
    for o in 0..outer {
        for (data, dims) in parts {
            let (_, len, inner) = around(dims, axis);
            out.extend_from_slice(&data[o * len * inner..(o + 1) * len * inner]);
        }
    }
    out
}

/// Partial results are summed in input order, then activated.
pub(crate) fn merge<T: Element>(parts: &[&[T]], f: Activation) -> Result<Vec<T>, Overflow> {
    let n = parts[0].len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut acc = T::ZERO;
        for p in parts {
            acc = T::acc(acc, p[i]);
        }
        let v = T::finish(acc)?;
        out.push(match f {
            Activation::Relu => v.relu(),
            Activation::None => v,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_identity_like() {
        let w = [1.0f32, 0.0, 0.0, 1.0, 1.0, 1.0];
        assert_eq!(
            dense(&[1.0f32, 2.0], &w, 1, 2, 3).unwrap(),
            vec![1.0, 2.0, 3.0]
        );
    }

    #[test]
    fn merge_relu() {
        let out = merge(&[&[1.0f32, 2.0][..], &[3.0, 4.0][..]], Activation::Relu).unwrap();
        assert_eq!(out, vec![4.0, 6.0]);
        let out = merge(&[&[1.0f32, -5.0][..], &[3.0, 4.0][..]], Activation::Relu).unwrap();
        assert_eq!(out, vec![4.0, 0.0]);
    }

    #[test]
    fn integer_overflow_detected() {
        assert_eq!(add(&[i32::MAX], &[1]), Err(Overflow));
        assert_eq!(
            dense(&[i32::MAX, i32::MAX], &[2, 2], 1, 2, 1),
            Err(Overflow)
        );
    }

    #[test]
    fn conv_padding_taps_skipped() {
        // 1x3x3x1 all ones, 3x3 kernel of ones, pad 1: corner sees 4 taps
        let win = Window {
            in_h: 3,
            in_w: 3,
            out_h: 3,
            out_w: 3,
            k_h: 3,
            k_w: 3,
            stride: [1, 1],
            pad: Padding::uniform(1),
        };
        let out = conv2d(&[1i32; 9], &[1i32; 9], win, 1, 1).unwrap();
        assert_eq!(out, vec![4, 6, 4, 6, 9, 6, 4, 6, 4]);
    }

    #[test]
    fn slice_concat_inverse() {
        let dims = [1, 2, 3];
        let x: Vec<i32> = (0..6).collect();
        let a = slice(&x, &dims, 2, 0, 1);
        let b = slice(&x, &dims, 2, 1, 3);
        let back = concat(&[(&a, &[1, 2, 1][..]), (&b, &[1, 2, 2][..])], 2);
        assert_eq!(back, x);
    }
}
