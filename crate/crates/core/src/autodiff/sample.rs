//! Differentiable spatial resampling with clamp-to-border handling.
//!
//! `coords` holds absolute sample positions in index space, one channel per
//! spatial axis (`coords[a]` indexes image axis `a`). Linear interpolation is
//! differentiable with respect to both the image and the coordinates;
//! positions clamped at the border receive zero coordinate gradient.

use super::graph::{Arr, BackwardFn, Gradients, Tensor};
use std::rc::Rc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    Linear,
    Nearest,
}

struct AxisSample {
    lo: usize,
    hi: usize,
    frac: f64,
    inside: bool,
}

fn sample_axis(c_raw: f64, n: usize) -> AxisSample {
    let max = (n - 1) as f64;
    let inside = (0.0..=max).contains(&c_raw);
    let c = c_raw.clamp(0.0, max);
    if n == 1 {
        return AxisSample { lo: 0, hi: 0, frac: 0.0, inside: false };
    }
    let lo = (c.floor() as usize).min(n - 2);
    AxisSample {
        lo,
        hi: lo + 1,
        frac: c - lo as f64,
        inside,
    }
}

impl Tensor {
    /// Sample `self` (`[C, spatial...]`) at `coords` (`[D, out...]`).
    pub fn grid_sample(&self, coords: &Tensor, interp: Interp) -> Tensor {
        assert!(self.graph.same_graph(&coords.graph));
        let spatial_rank = self.value.ndim() - 1;
        assert_eq!(
            coords.shape()[0],
            spatial_rank,
            "grid_sample: coords must have one channel per spatial axis"
        );
        assert!(
            spatial_rank == 2 || spatial_rank == 3,
            "grid_sample: only 2D/3D supported"
        );
        match interp {
            Interp::Linear => self.grid_sample_linear(coords),
            Interp::Nearest => self.grid_sample_nearest(coords),
        }
    }

    fn grid_sample_linear(&self, coords: &Tensor) -> Tensor {
        let img = Rc::clone(&self.value);
        let co = Rc::clone(&coords.value);
        let spatial_rank = img.ndim() - 1;
        let c = img.shape()[0];
        let in_spatial: Vec<usize> = img.shape()[1..].to_vec();
        let out_spatial: Vec<usize> = co.shape()[1..].to_vec();
        let n_out: usize = out_spatial.iter().product();
        let n_in: usize = in_spatial.iter().product();

        let img_flat = img.to_shape((c, n_in)).unwrap().to_owned();
        let co_flat = co.to_shape((spatial_rank, n_out)).unwrap().to_owned();

        // in-image strides for flattened spatial index
        let mut strides = vec![1usize; spatial_rank];
        for a in (0..spatial_rank.saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * in_spatial[a + 1];
        }

        let corners = 1usize << spatial_rank;
        let mut value = ndarray::Array2::<f64>::zeros((c, n_out));
        for q in 0..n_out {
            let axes: Vec<AxisSample> = (0..spatial_rank)
                .map(|a| sample_axis(co_flat[[a, q]], in_spatial[a]))
                .collect();
            for m in 0..corners {
                let mut w = 1.0;
                let mut idx = 0usize;
                for (a, ax) in axes.iter().enumerate() {
                    if m >> a & 1 == 1 {
                        w *= ax.frac;
                        idx += ax.hi * strides[a];
                    } else {
                        w *= 1.0 - ax.frac;
                        idx += ax.lo * strides[a];
                    }
                }
                if w == 0.0 {
                    continue;
                }
                for ci in 0..c {
                    value[[ci, q]] += w * img_flat[[ci, idx]];
                }
            }
        }
        let mut out_shape = vec![c];
        out_shape.extend_from_slice(&out_spatial);
        let value = value
            .into_shape_with_order(ndarray::IxDyn(&out_shape))
            .unwrap();

        let (iimg, ico) = (self.id, coords.id);
        let (rimg, rco) = (self.requires, coords.requires);
        let in_dim = img.raw_dim();
        let co_dim = co.raw_dim();
        let requires = rimg || rco;
        self.graph.push(
            value,
            requires,
            requires.then(|| {
                Box::new(move |go: &Arr, gr: &mut Gradients| {
                    let go2 = go.to_shape((c, n_out)).unwrap();
                    let mut gimg = ndarray::Array2::<f64>::zeros((c, n_in));
                    let mut gco = ndarray::Array2::<f64>::zeros((spatial_rank, n_out));
                    for q in 0..n_out {
                        let axes: Vec<AxisSample> = (0..spatial_rank)
                            .map(|a| sample_axis(co_flat[[a, q]], in_spatial[a]))
                            .collect();
                        for m in 0..corners {
                            let mut w = 1.0;
                            let mut idx = 0usize;
                            for (a, ax) in axes.iter().enumerate() {
                                if m >> a & 1 == 1 {
                                    w *= ax.frac;
                                    idx += ax.hi * strides[a];
                                } else {
                                    w *= 1.0 - ax.frac;
                                    idx += ax.lo * strides[a];
                                }
                            }
                            if rimg && w != 0.0 {
                                for ci in 0..c {
                                    gimg[[ci, idx]] += w * go2[[ci, q]];
                                }
                            }
                            if rco {
                                // d w / d frac_a = ±(product of other factors)
                                for (a, ax) in axes.iter().enumerate() {
                                    if !ax.inside {
                                        continue;
                                    }
                                    let mut dw = 1.0;
                                    for (a2, ax2) in axes.iter().enumerate() {
                                        if a2 == a {
                                            continue;
                                        }
                                        dw *= if m >> a2 & 1 == 1 {
                                            ax2.frac
                                        } else {
                                            1.0 - ax2.frac
                                        };
                                    }
                                    let sign = if m >> a & 1 == 1 { 1.0 } else { -1.0 };
                                    let mut acc = 0.0;
                                    for ci in 0..c {
                                        acc += go2[[ci, q]] * img_flat[[ci, idx]];
                                    }
                                    gco[[a, q]] += sign * dw * acc;
                                }
                            }
                        }
                    }
                    if rimg {
                        gr.accumulate(iimg, gimg.into_shape_with_order(in_dim.clone()).unwrap());
                    }
                    if rco {
                        gr.accumulate(ico, gco.into_shape_with_order(co_dim.clone()).unwrap());
                    }
                }) as BackwardFn
            }),
        )
    }

    fn grid_sample_nearest(&self, coords: &Tensor) -> Tensor {
        let img = Rc::clone(&self.value);
        let co = Rc::clone(&coords.value);
        let spatial_rank = img.ndim() - 1;
        let c = img.shape()[0];
        let in_spatial: Vec<usize> = img.shape()[1..].to_vec();
        let out_spatial: Vec<usize> = co.shape()[1..].to_vec();
        let n_out: usize = out_spatial.iter().product();
        let n_in: usize = in_spatial.iter().product();

        let img_flat = img.to_shape((c, n_in)).unwrap().to_owned();
        let co_flat = co.to_shape((spatial_rank, n_out)).unwrap().to_owned();
        let mut strides = vec![1usize; spatial_rank];
        for a in (0..spatial_rank.saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * in_spatial[a + 1];
        }
        let mut nearest = vec![0usize; n_out];
        for (q, slot) in nearest.iter_mut().enumerate() {
            let mut idx = 0usize;
            for a in 0..spatial_rank {
                let max = (in_spatial[a] - 1) as f64;
                let ci = co_flat[[a, q]].clamp(0.0, max).round() as usize;
                idx += ci.min(in_spatial[a] - 1) * strides[a];
            }
            *slot = idx;
        }
        let mut value = ndarray::Array2::<f64>::zeros((c, n_out));
        for q in 0..n_out {
            for ci in 0..c {
                value[[ci, q]] = img_flat[[ci, nearest[q]]];
            }
        }
        let mut out_shape = vec![c];
        out_shape.extend_from_slice(&out_spatial);
        let value = value
            .into_shape_with_order(ndarray::IxDyn(&out_shape))
            .unwrap();

        let (iimg, rimg) = (self.id, self.requires);
        let in_dim = img.raw_dim();
        self.graph.push(
            value,
            rimg,
            rimg.then(|| {
                Box::new(move |go: &Arr, gr: &mut Gradients| {
                    let go2 = go.to_shape((c, n_out)).unwrap();
                    let mut gimg = ndarray::Array2::<f64>::zeros((c, n_in));
                    for q in 0..n_out {
                        for ci in 0..c {
                            gimg[[ci, nearest[q]]] += go2[[ci, q]];
                        }
                    }
                    gr.accumulate(iimg, gimg.into_shape_with_order(in_dim.clone()).unwrap());
                }) as BackwardFn
            }),
        )
    }
}
