//! N-dimensional convolution via im2col and matrix multiplication.
//!
//! Layout is channels-first with no batch axis: input `[Cin, spatial...]`,
//! weight `[Cout, Cin, k, ...]` (square kernel), bias `[Cout]`. Zero padding.

use super::graph::{Arr, Gradients, Tensor};
use ndarray::{Array2, ArrayView3, ArrayView4, ArrayViewMut3, ArrayViewMut4, Ix3, Ix4};
use std::rc::Rc;

fn out_len(n: usize, k: usize, s: usize, p: usize) -> usize {
    assert!(n + 2 * p >= k, "conv: input smaller than kernel");
    (n + 2 * p - k) / s + 1
}

fn im2col_2d(x: &ArrayView3<f64>, k: usize, s: usize, p: usize, ho: usize, wo: usize) -> Array2<f64> {
    let (cin, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((cin * k * k, ho * wo));
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let mut dst = cols.row_mut(row);
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = x[[ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_2d(
    gcols: &Array2<f64>,
    gx: &mut ArrayViewMut3<f64>,
    k: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
) {
    let (cin, h, w) = gx.dim();
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = gcols.row(row);
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            gx[[ci, iy as usize, ix as usize]] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn im2col_3d(x: &ArrayView4<f64>, k: usize, s: usize, p: usize, out: [usize; 3]) -> Array2<f64> {
    let (cin, d, h, w) = x.dim();
    let [do_, ho, wo] = out;
    let mut cols = Array2::<f64>::zeros((cin * k * k * k, do_ * ho * wo));
    for ci in 0..cin {
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + kz) * k + ky) * k + kx;
                    let mut dst = cols.row_mut(row);
                    for oz in 0..do_ {
                        let iz = (oz * s + kz) as isize - p as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..wo {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst[(oz * ho + oy) * wo + ox] =
                                        x[[ci, iz as usize, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_3d(
    gcols: &Array2<f64>,
    gx: &mut ArrayViewMut4<f64>,
    k: usize,
    s: usize,
    p: usize,
    out: [usize; 3],
) {
    let (cin, d, h, w) = gx.dim();
    let [do_, ho, wo] = out;
    for ci in 0..cin {
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + kz) * k + ky) * k + kx;
                    let src = gcols.row(row);
                    for oz in 0..do_ {
                        let iz = (oz * s + kz) as isize - p as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..wo {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix >= 0 && ix < w as isize {
                                    gx[[ci, iz as usize, iy as usize, ix as usize]] +=
                                        src[(oz * ho + oy) * wo + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// Convolution over 2 or 3 spatial dimensions, dispatched on input rank.
    pub fn conv(&self, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        match self.value.ndim() {
            3 => self.conv2d(w, b, stride, pad),
            4 => self.conv3d(w, b, stride, pad),
            n => panic!("conv: unsupported input rank {n} (expect [C, H, W] or [C, D, H, W])"),
        }
    }

    fn conv2d(&self, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let x3 = self.value.view().into_dimensionality::<Ix3>().unwrap();
        let w4 = w.value.view().into_dimensionality::<Ix4>().unwrap();
        let (cin, h, wi) = x3.dim();
        let (cout, wcin, k, k2) = w4.dim();
        assert_eq!(cin, wcin, "conv2d: channel mismatch");
        assert_eq!(k, k2, "conv2d: kernel must be square");
        assert_eq!(b.shape(), &[cout], "conv2d: bias shape");
        let ho = out_len(h, k, stride, pad);
        let wo = out_len(wi, k, stride, pad);

        let cols = im2col_2d(&x3, k, stride, pad, ho, wo);
        let w2 = w.value.to_shape((cout, cin * k * k)).unwrap();
        let mut out2 = w2.dot(&cols);
        for (mut row, &bv) in out2.outer_iter_mut().zip(b.value.iter()) {
            row += bv;
        }
        let value = out2
            .into_shape_with_order(ndarray::IxDyn(&[cout, ho, wo]))
            .unwrap();

        let (ix, iw, ib) = (self.id, w.id, b.id);
        let (rx, rw, rb) = (self.requires, w.requires, b.requires);
        let (vx, vw) = (Rc::clone(&self.value), Rc::clone(&w.value));
        let requires = rx || rw || rb;
        self.graph.push(
            value,
            requires,
            requires.then(|| {
                Box::new(move |go: &Arr, gr: &mut Gradients| {
                    let go2 = go.to_shape((cout, ho * wo)).unwrap().to_owned();
                    if rb {
                        let gb = go2.sum_axis(ndarray::Axis(1));
                        gr.accumulate(ib, gb.into_dyn());
                    }
                    if rw {
                        let x3 = vx.view().into_dimensionality::<Ix3>().unwrap();
                        let cols = im2col_2d(&x3, k, stride, pad, ho, wo);
                        let gw2 = go2.dot(&cols.t());
                        gr.accumulate(
                            iw,
                            gw2.into_shape_with_order(ndarray::IxDyn(&[cout, cin, k, k]))
                                .unwrap(),
                        );
                    }
                    if rx {
                        let w2 = vw.to_shape((cout, cin * k * k)).unwrap().to_owned();
                        let gcols = w2.t().dot(&go2);
                        let mut gx = Arr::zeros(ndarray::IxDyn(&[cin, h, wi]));
                        col2im_2d(
                            &gcols,
                            &mut gx.view_mut().into_dimensionality::<Ix3>().unwrap(),
                            k,
                            stride,
                            pad,
                            ho,
                            wo,
                        );
                        gr.accumulate(ix, gx);
                    }
                }) as super::graph::BackwardFn
            }),
        )
    }

    fn conv3d(&self, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let x4 = self.value.view().into_dimensionality::<Ix4>().unwrap();
        let (cin, d, h, wi) = x4.dim();
        let w5 = &w.value;
        assert_eq!(w5.ndim(), 5, "conv3d: weight rank");
        let cout = w5.shape()[0];
        let k = w5.shape()[2];
        assert_eq!(w5.shape(), &[cout, cin, k, k, k], "conv3d: weight shape");
        assert_eq!(b.shape(), &[cout], "conv3d: bias shape");
        let out = [
            out_len(d, k, stride, pad),
            out_len(h, k, stride, pad),
            out_len(wi, k, stride, pad),
        ];
        let n_out = out[0] * out[1] * out[2];

        let cols = im2col_3d(&x4, k, stride, pad, out);
        let w2 = w.value.to_shape((cout, cin * k * k * k)).unwrap();
        let mut out2 = w2.dot(&cols);
        for (mut row, &bv) in out2.outer_iter_mut().zip(b.value.iter()) {
            row += bv;
        }
        let value = out2
            .into_shape_with_order(ndarray::IxDyn(&[cout, out[0], out[1], out[2]]))
            .unwrap();

        let (ixd, iw, ib) = (self.id, w.id, b.id);
        let (rx, rw, rb) = (self.requires, w.requires, b.requires);
        let (vx, vw) = (Rc::clone(&self.value), Rc::clone(&w.value));
        let requires = rx || rw || rb;
        self.graph.push(
            value,
            requires,
            requires.then(|| {
                Box::new(move |go: &Arr, gr: &mut Gradients| {
                    let go2 = go.to_shape((cout, n_out)).unwrap().to_owned();
                    if rb {
                        gr.accumulate(ib, go2.sum_axis(ndarray::Axis(1)).into_dyn());
                    }
                    if rw {
                        let x4 = vx.view().into_dimensionality::<Ix4>().unwrap();
                        let cols = im2col_3d(&x4, k, stride, pad, out);
                        let gw2 = go2.dot(&cols.t());
                        gr.accumulate(
                            iw,
                            gw2.into_shape_with_order(ndarray::IxDyn(&[cout, cin, k, k, k]))
                                .unwrap(),
                        );
                    }
                    if rx {
                        let w2 = vw.to_shape((cout, cin * k * k * k)).unwrap().to_owned();
                        let gcols = w2.t().dot(&go2);
                        let mut gx = Arr::zeros(ndarray::IxDyn(&[cin, d, h, wi]));
                        col2im_3d(
                            &gcols,
                            &mut gx.view_mut().into_dimensionality::<Ix4>().unwrap(),
                            k,
                            stride,
                            pad,
                            out,
                        );
                        gr.accumulate(ixd, gx);
                    }
                }) as super::graph::BackwardFn
            }),
        )
    }
}

/// Reference convolution used by tests: direct nested loops, no im2col.
pub fn conv2d_reference(x: &ArrayView3<f64>, w: &ArrayView4<f64>, b: &[f64], stride: usize, pad: usize) -> Arr {
    let (cin, h, wi) = x.dim();
    let (cout, _, k, _) = w.dim();
    let ho = out_len(h, k, stride, pad);
    let wo = out_len(wi, k, stride, pad);
    let mut out = Arr::zeros(ndarray::IxDyn(&[cout, ho, wo]));
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b[co];
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < wi as isize {
                                acc += x[[ci, iy as usize, ix as usize]] * w[[co, ci, ky, kx]];
                            }
                        }
                    }
                }
                out[[co, oy, ox]] = acc;
            }
        }
    }
    out
}
