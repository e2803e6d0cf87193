//! Elementwise, reduction and structural tensor operations.

use super::graph::{Arr, BackwardFn, Tensor};
use ndarray::{Axis, Dimension, Slice};
use std::rc::Rc;

fn assert_same_shape(a: &Tensor, b: &Tensor, op: &str) {
    assert!(
        a.graph.same_graph(&b.graph),
        "{op}: operands from different graphs"
    );
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
}

impl Tensor {
    fn push_op(&self, value: Arr, requires: bool, backward: Option<BackwardFn>) -> Tensor {
        self.graph
            .push(value, requires, if requires { backward } else { None })
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_same_shape(self, other, "add");
        let value = &*self.value + &*other.value;
        let (ia, ib, ra, rb) = (self.id, other.id, self.requires, other.requires);
        self.push_op(
            value,
            ra || rb,
            Some(Box::new(move |go, gr| {
                if ra {
                    gr.accumulate(ia, go.clone());
                }
                if rb {
                    gr.accumulate(ib, go.clone());
                }
            })),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_same_shape(self, other, "sub");
        let value = &*self.value - &*other.value;
        let (ia, ib, ra, rb) = (self.id, other.id, self.requires, other.requires);
        self.push_op(
            value,
            ra || rb,
            Some(Box::new(move |go, gr| {
                if ra {
                    gr.accumulate(ia, go.clone());
                }
                if rb {
                    gr.accumulate(ib, go.map(|g| -g));
                }
            })),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        assert_same_shape(self, other, "mul");
        let value = &*self.value * &*other.value;
        let (ia, ib, ra, rb) = (self.id, other.id, self.requires, other.requires);
        let (va, vb) = (Rc::clone(&self.value), Rc::clone(&other.value));
        self.push_op(
            value,
            ra || rb,
            Some(Box::new(move |go, gr| {
                if ra {
                    gr.accumulate(ia, go * &*vb);
                }
                if rb {
                    gr.accumulate(ib, go * &*va);
                }
            })),
        )
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        assert_same_shape(self, other, "div");
        let value = &*self.value / &*other.value;
        let (ia, ib, ra, rb) = (self.id, other.id, self.requires, other.requires);
        let (va, vb) = (Rc::clone(&self.value), Rc::clone(&other.value));
        self.push_op(
            value,
            ra || rb,
            Some(Box::new(move |go, gr| {
                if ra {
                    gr.accumulate(ia, go / &*vb);
                }
                if rb {
                    let g = go * &*va / (&*vb * &*vb);
                    gr.accumulate(ib, g.map(|x| -x));
                }
            })),
        )
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let value = self.value.map(|x| x * c);
        let (ia, ra) = (self.id, self.requires);
        self.push_op(
            value,
            ra,
            Some(Box::new(move |go, gr| gr.accumulate(ia, go.map(|g| g * c)))),
        )
    }

    pub fn offset(&self, c: f64) -> Tensor {
        let value = self.value.map(|x| x + c);
        let (ia, ra) = (self.id, self.requires);
        self.push_op(
            value,
            ra,
            Some(Box::new(move |go, gr| gr.accumulate(ia, go.clone()))),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn square(&self) -> Tensor {
        self.mul(self)
    }

    pub fn sum(&self) -> Tensor {
        let value = Arr::from_elem(ndarray::IxDyn(&[]), self.value.sum());
        let (ia, ra) = (self.id, self.requires);
        let dim = self.value.raw_dim();
        self.push_op(
            value,
            ra,
            Some(Box::new(move |go, gr| {
                let g = go[[]];
                gr.accumulate(ia, Arr::from_elem(dim.clone(), g));
            })),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.value.len() as f64;
        let value = Arr::from_elem(ndarray::IxDyn(&[]), self.value.sum() / n);
        let (ia, ra) = (self.id, self.requires);
        let dim = self.value.raw_dim();
        self.push_op(
            value,
            ra,
            Some(Box::new(move |go, gr| {
                let g = go[[]] / n;
                gr.accumulate(ia, Arr::from_elem(dim.clone(), g));
            })),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let value = self.value.map(|&x| sigmoid(x));
        let (ia, ra) = (self.id, self.requires);
        let vout = value.clone();
        self.push_op(
            value,
            ra,
            Some(Box::new(move |go, gr| {
                let g = go * &vout.map(|&y| y * (1.0 - y));
                gr.accumulate(ia, g);
            })),
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let value = self.value.map(|&x| if x > 0.0 { x } else { slope * x });
        let (ia, ra) = (self.id, self.requires);
        let vin = Rc::clone(&self.value);
        self.push_op(
            value,
            ra,
            Some(Box::new(move |go, gr| {
                let mut g = go.clone();
                ndarray::Zip::from(&mut g).and(&*vin).for_each(|g, &x| {
                    if x <= 0.0 {
                        *g *= slope;
                    }
                });
                gr.accumulate(ia, g);
            })),
        )
    }

    /// Numerically stable elementwise binary cross-entropy with logits
    /// against a constant target in `[0, 1]`.
    pub fn bce_with_logits(&self, target: &Arr) -> Tensor {
        assert_eq!(self.shape(), target.shape(), "bce_with_logits: shape mismatch");
        let z = &*self.value;
        let mut value = Arr::zeros(z.raw_dim());
        ndarray::Zip::from(&mut value)
            .and(z)
            .and(target)
            .for_each(|v, &z, &y| {
                *v = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            });
        let (ia, ra) = (self.id, self.requires);
        let vin = Rc::clone(&self.value);
        let t = target.clone();
        self.push_op(
            value,
            ra,
            Some(Box::new(move |go, gr| {
                let mut g = go.clone();
                ndarray::Zip::from(&mut g)
                    .and(&*vin)
                    .and(&t)
                    .for_each(|g, &z, &y| *g *= sigmoid(z) - y);
                gr.accumulate(ia, g);
            })),
        )
    }

    /// Softmax across axis 0 (the channel axis), independently per
    /// remaining position.
    pub fn softmax_channels(&self) -> Tensor {
        let x = &*self.value;
        let mut value = x.clone();
        for mut lane in value.lanes_mut(Axis(0)) {
            let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in lane.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in lane.iter_mut() {
                *v /= s;
            }
        }
        let (ia, ra) = (self.id, self.requires);
        let y = value.clone();
        self.push_op(
            value,
            ra,
            Some(Box::new(move |go, gr| {
                let mut g = go.clone();
                for (mut glane, ylane) in g.lanes_mut(Axis(0)).into_iter().zip(y.lanes(Axis(0))) {
                    let dot: f64 = glane.iter().zip(ylane.iter()).map(|(a, b)| a * b).sum();
                    for (gi, yi) in glane.iter_mut().zip(ylane.iter()) {
                        *gi = yi * (*gi - dot);
                    }
                }
                gr.accumulate(ia, g);
            })),
        )
    }

    /// Concatenate along axis 0.
    pub fn concat_channels(&self, other: &Tensor) -> Tensor {
        assert!(self.graph.same_graph(&other.graph));
        assert_eq!(&self.shape()[1..], &other.shape()[1..], "concat: trailing dims differ");
        let value = ndarray::concatenate(Axis(0), &[self.value.view(), other.value.view()])
            .expect("concat failed");
        let (ia, ib, ra, rb) = (self.id, other.id, self.requires, other.requires);
        let na = self.shape()[0];
        self.push_op(
            value,
            ra || rb,
            Some(Box::new(move |go, gr| {
                if ra {
                    let g = go.slice_axis(Axis(0), Slice::from(..na)).to_owned();
                    gr.accumulate(ia, g);
                }
                if rb {
                    let g = go.slice_axis(Axis(0), Slice::from(na..)).to_owned();
                    gr.accumulate(ib, g);
                }
            })),
        )
    }

    /// Slice `len` entries from axis 0 starting at `start`.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Tensor {
        let value = self
            .value
            .slice_axis(Axis(0), Slice::from(start..start + len))
            .to_owned();
        let (ia, ra) = (self.id, self.requires);
        let dim = self.value.raw_dim();
        self.push_op(
            value,
            ra,
            Some(Box::new(move |go, gr| {
                let mut g = Arr::zeros(dim.clone());
                g.slice_axis_mut(Axis(0), Slice::from(start..start + len))
                    .assign(go);
                gr.accumulate(ia, g);
            })),
        )
    }

    /// Forward finite difference along spatial `axis` (output one shorter).
    pub fn forward_diff(&self, axis: usize) -> Tensor {
        let n = self.shape()[axis];
        assert!(n >= 2, "forward_diff: axis too short");
        let hi = self.value.slice_axis(Axis(axis), Slice::from(1..));
        let lo = self.value.slice_axis(Axis(axis), Slice::from(..n - 1));
        let value = (&hi - &lo).to_owned();
        let (ia, ra) = (self.id, self.requires);
        let dim = self.value.raw_dim();
        self.push_op(
            value,
            ra,
            Some(Box::new(move |go, gr| {
                let mut g = Arr::zeros(dim.clone());
                {
                    let mut ghi = g.slice_axis_mut(Axis(axis), Slice::from(1..));
                    ghi += go;
                }
                {
                    let mut glo = g.slice_axis_mut(Axis(axis), Slice::from(..n - 1));
                    glo -= go;
                }
                gr.accumulate(ia, g);
            })),
        )
    }

    /// Mean over all non-channel axes: `[C, spatial...] -> [C]`.
    pub fn global_mean(&self) -> Tensor {
        let c = self.shape()[0];
        let n: usize = self.shape()[1..].iter().product();
        let flat = self
            .value
            .to_shape((c, n))
            .expect("global_mean: non-contiguous")
            .to_owned();
        let value = flat.mean_axis(Axis(1)).unwrap().into_dyn();
        let (ia, ra) = (self.id, self.requires);
        let dim = self.value.raw_dim();
        self.push_op(
            value,
            ra,
            Some(Box::new(move |go, gr| {
                let mut g = Arr::zeros(dim.clone());
                let mut g2 = g.view_mut().into_shape_with_order((c, n)).unwrap();
                for (mut row, &gc) in g2.outer_iter_mut().zip(go.iter()) {
                    row.fill(gc / n as f64);
                }
                gr.accumulate(ia, g);
            })),
        )
    }

    /// Dense layer on a vector: `w [M, N] · x [N] + b [M]`.
    pub fn linear(&self, w: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(self.value.ndim(), 1, "linear: input must be a vector");
        let n = self.shape()[0];
        let m = w.shape()[0];
        assert_eq!(w.shape(), &[m, n], "linear: weight shape");
        assert_eq!(b.shape(), &[m], "linear: bias shape");
        let x1 = self.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let w2 = w.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let value = (w2.dot(&x1) + b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap())
            .into_dyn();
        let (ix, iw, ib) = (self.id, w.id, b.id);
        let (rx, rw, rb) = (self.requires, w.requires, b.requires);
        let (vx, vw) = (Rc::clone(&self.value), Rc::clone(&w.value));
        self.push_op(
            value,
            rx || rw || rb,
            Some(Box::new(move |go, gr| {
                let go1 = go.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                if rx {
                    let w2 = vw.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    gr.accumulate(ix, w2.t().dot(&go1).into_dyn());
                }
                if rw {
                    let x1 = vx.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                    let mut gw = ndarray::Array2::<f64>::zeros((go1.len(), x1.len()));
                    for (i, &g) in go1.iter().enumerate() {
                        for (j, &x) in x1.iter().enumerate() {
                            gw[[i, j]] = g * x;
                        }
                    }
                    gr.accumulate(iw, gw.into_dyn());
                }
                if rb {
                    gr.accumulate(ib, go.clone());
                }
            })),
        )
    }

    /// Instance normalisation with affine parameters: per-channel
    /// standardisation over all spatial positions.
    pub fn instance_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        let c = self.shape()[0];
        assert_eq!(gamma.shape(), &[c], "instance_norm: gamma shape");
        assert_eq!(beta.shape(), &[c], "instance_norm: beta shape");
        let n: usize = self.shape()[1..].iter().product();
        assert!(n >= 2, "instance_norm: need at least 2 spatial positions");

        let x = self
            .value
            .to_shape((c, n))
            .expect("instance_norm: non-contiguous")
            .to_owned();
        let mut xhat = ndarray::Array2::<f64>::zeros((c, n));
        let mut inv_std = vec![0.0f64; c];
        for ci in 0..c {
            let row = x.row(ci);
            let mu = row.sum() / n as f64;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[ci] = is;
            for (o, &v) in xhat.row_mut(ci).iter_mut().zip(row.iter()) {
                *o = (v - mu) * is;
            }
        }
        let mut value = ndarray::Array2::<f64>::zeros((c, n));
        for ci in 0..c {
            let g = gamma.value[[ci]];
            let b = beta.value[[ci]];
            for (o, &v) in value.row_mut(ci).iter_mut().zip(xhat.row(ci).iter()) {
                *o = g * v + b;
            }
        }
        let out_dim = self.value.raw_dim();
        let value = value.into_shape_with_order(out_dim.clone()).unwrap();

        let (ix, ig, ib) = (self.id, gamma.id, beta.id);
        let (rx, rg, rb) = (self.requires, gamma.requires, beta.requires);
        let vg = Rc::clone(&gamma.value);
        self.push_op(
            value,
            rx || rg || rb,
            Some(Box::new(move |go, gr| {
                let go2 = go.to_shape((c, n)).unwrap();
                if rg {
                    let mut ggam = ndarray::Array1::<f64>::zeros(c);
                    for ci in 0..c {
                        ggam[ci] = go2
                            .row(ci)
                            .iter()
                            .zip(xhat.row(ci).iter())
                            .map(|(a, b)| a * b)
                            .sum();
                    }
                    gr.accumulate(ig, ggam.into_dyn());
                }
                if rb {
                    let mut gbet = ndarray::Array1::<f64>::zeros(c);
                    for ci in 0..c {
                        gbet[ci] = go2.row(ci).sum();
                    }
                    gr.accumulate(ib, gbet.into_dyn());
                }
                if rx {
                    let mut gx = ndarray::Array2::<f64>::zeros((c, n));
                    for ci in 0..c {
                        let g = vg[[ci]];
                        let is = inv_std[ci];
                        let gor = go2.row(ci);
                        let xr = xhat.row(ci);
                        let mean_go = gor.sum() / n as f64;
                        let mean_goxh: f64 =
                            gor.iter().zip(xr.iter()).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for ((o, &goi), &xh) in
                            gx.row_mut(ci).iter_mut().zip(gor.iter()).zip(xr.iter())
                        {
                            *o = g * is * (goi - mean_go - xh * mean_goxh);
                        }
                    }
                    gr.accumulate(ix, gx.into_shape_with_order(out_dim.clone()).unwrap());
                }
            })),
        )
    }

    /// Nearest-neighbour upsampling of the spatial axes by `factor`.
    pub fn upsample_nearest(&self, factor: usize) -> Tensor {
        let shape = self.shape().to_vec();
        let c = shape[0];
        let spatial = &shape[1..];
        let out_spatial: Vec<usize> = spatial.iter().map(|&s| s * factor).collect();
        let mut out_shape = vec![c];
        out_shape.extend_from_slice(&out_spatial);
        let mut value = Arr::zeros(ndarray::IxDyn(&out_shape));
        {
            let src = &*self.value;
            for (idx, o) in value.indexed_iter_mut() {
                let mut sidx = vec![idx[0]];
                for d in 1..shape.len() {
                    sidx.push(idx[d] / factor);
                }
                *o = src[ndarray::IxDyn(&sidx)];
            }
        }
        let (ia, ra) = (self.id, self.requires);
        let in_dim = self.value.raw_dim();
        self.push_op(
            value,
            ra,
            Some(Box::new(move |go, gr| {
                let mut g = Arr::zeros(in_dim.clone());
                for (idx, &v) in go.indexed_iter() {
                    let mut sidx = vec![idx[0]];
                    for d in 1..in_dim.ndim() {
                        sidx.push(idx[d] / factor);
                    }
                    g[ndarray::IxDyn(&sidx)] += v;
                }
                gr.accumulate(ia, g);
            })),
        )
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
