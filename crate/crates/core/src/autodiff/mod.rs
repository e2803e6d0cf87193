//! Minimal reverse-mode autodiff over dense `f64` arrays.
//!
//! Built for this project's needs: channels-first tensors without a batch
//! axis, 2D/3D convolution, differentiable grid sampling, and explicit
//! gradient blocking via constants. Not a general framework.

mod conv;
pub mod gradcheck;
mod graph;
mod ops;
mod sample;

pub use conv::conv2d_reference;
pub use graph::{Arr, Gradients, Graph, Tensor};
pub use sample::Interp;

#[cfg(test)]
mod tests {
    use super::gradcheck::max_grad_error;
    use super::*;
    use ndarray::IxDyn;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn randn(shape: &[usize], rng: &mut ChaCha12Rng) -> Arr {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n)
            .map(|_| rand_distr::StandardNormal.sample(rng))
            .collect();
        Arr::from_shape_vec(IxDyn(shape), v).unwrap()
    }

    #[test]
    fn elementwise_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let a = randn(&[3, 4], &mut rng);
        let b = randn(&[3, 4], &mut rng).map(|x| x + 3.0); // keep away from 0 for div
        let cases: Vec<(&str, Box<dyn Fn(&Graph, &[Tensor]) -> Tensor>)> = vec![
            ("add", Box::new(|_, t| t[0].add(&t[1]).sum())),
            ("sub", Box::new(|_, t| t[0].sub(&t[1]).mean())),
            ("mul", Box::new(|_, t| t[0].mul(&t[1]).sum())),
            ("div", Box::new(|_, t| t[0].div(&t[1]).sum())),
            ("scale", Box::new(|_, t| t[0].scale(-2.5).sum())),
            ("square", Box::new(|_, t| t[0].square().mean())),
            ("sigmoid", Box::new(|_, t| t[0].sigmoid().sum())),
            ("lrelu", Box::new(|_, t| t[0].leaky_relu(0.2).sum())),
            ("softmax", Box::new(|_, t| t[0].softmax_channels().square().sum())),
            ("concat", Box::new(|_, t| t[0].concat_channels(&t[1]).square().sum())),
            ("narrow", Box::new(|_, t| t[0].narrow_channels(1, 2).square().sum())),
            ("fdiff0", Box::new(|_, t| t[0].forward_diff(0).square().sum())),
            ("fdiff1", Box::new(|_, t| t[0].forward_diff(1).square().sum())),
        ];
        for (name, f) in cases {
            let err = max_grad_error(&[a.clone(), b.clone()], f);
            assert!(err < 1e-6, "{name}: grad error {err}");
        }
    }

    #[test]
    fn bce_and_norm_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let z = randn(&[2, 5], &mut rng);
        let target = z.map(|_| if rng.random::<f64>() > 0.5 { 1.0 } else { 0.0 });
        let err = max_grad_error(&[z.clone()], |_, t| t[0].bce_with_logits(&target).mean());
        assert!(err < 1e-6, "bce grad error {err}");

        let x = randn(&[3, 4, 4], &mut rng);
        let gamma = randn(&[3], &mut rng);
        let beta = randn(&[3], &mut rng);
        let err = max_grad_error(&[x, gamma, beta], |_, t| {
            t[0].instance_norm(&t[1], &t[2], 1e-5).square().mean()
        });
        assert!(err < 1e-5, "instance_norm grad error {err}");
    }

    #[test]
    fn structural_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x = randn(&[2, 3, 3], &mut rng);
        let err = max_grad_error(&[x.clone()], |_, t| t[0].upsample_nearest(2).square().sum());
        assert!(err < 1e-6, "upsample grad error {err}");
        let err = max_grad_error(&[x.clone()], |_, t| t[0].global_mean().square().sum());
        assert!(err < 1e-6, "global_mean grad error {err}");

        let v = randn(&[4], &mut rng);
        let w = randn(&[3, 4], &mut rng);
        let b = randn(&[3], &mut rng);
        let err = max_grad_error(&[v, w, b], |_, t| t[0].linear(&t[1], &t[2]).square().sum());
        assert!(err < 1e-6, "linear grad error {err}");
    }

    #[test]
    fn conv2d_matches_reference_and_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let x = randn(&[2, 6, 5], &mut rng);
        let w = randn(&[3, 2, 3, 3], &mut rng);
        let b = randn(&[3], &mut rng);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let g = Graph::new();
            let xt = g.constant(x.clone());
            let wt = g.constant(w.clone());
            let bt = g.constant(b.clone());
            let out = xt.conv(&wt, &bt, stride, pad);
            let reference = conv2d_reference(
                &x.view().into_dimensionality().unwrap(),
                &w.view().into_dimensionality().unwrap(),
                b.as_slice().unwrap(),
                stride,
                pad,
            );
            let diff = (&*out.value() - &reference).map(|d| d.abs()).iter().cloned().fold(0.0, f64::max);
            assert!(diff < 1e-12, "conv2d s{stride} p{pad} vs reference: {diff}");

            let err = max_grad_error(&[x.clone(), w.clone(), b.clone()], |_, t| {
                t[0].conv(&t[1], &t[2], stride, pad).square().sum()
            });
            assert!(err < 1e-5, "conv2d s{stride} p{pad} grad error {err}");
        }
    }

    #[test]
    fn conv3d_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x = randn(&[2, 4, 4, 4], &mut rng);
        let w = randn(&[2, 2, 3, 3, 3], &mut rng);
        let b = randn(&[2], &mut rng);
        let err = max_grad_error(&[x, w, b], |_, t| {
            t[0].conv(&t[1], &t[2], 2, 1).square().sum()
        });
        assert!(err < 1e-5, "conv3d grad error {err}");
    }

    #[test]
    fn grid_sample_grads_2d_and_3d() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let img = randn(&[2, 5, 5], &mut rng);
        // strictly interior, away from cell edges (floor is locally constant)
        let n = 4 * 4;
        let mut co = Vec::with_capacity(2 * n);
        for _ in 0..2 * n {
            co.push(rng.random_range(1.2..3.3));
        }
        let coords = Arr::from_shape_vec(IxDyn(&[2, 4, 4]), co).unwrap();
        let err = max_grad_error_interior(&img, &coords);
        assert!(err < 1e-5, "grid_sample 2d grad error {err}");

        let img3 = randn(&[1, 4, 4, 4], &mut rng);
        let n3 = 3 * 3 * 3;
        let mut co3 = Vec::with_capacity(3 * n3);
        for _ in 0..3 * n3 {
            co3.push(rng.random_range(0.6..2.4));
        }
        let coords3 = Arr::from_shape_vec(IxDyn(&[3, 3, 3, 3]), co3).unwrap();
        let err = max_grad_error(&[img3, coords3], |_, t| {
            t[0].grid_sample(&t[1], Interp::Linear).square().sum()
        });
        assert!(err < 1e-5, "grid_sample 3d grad error {err}");
    }

    fn max_grad_error_interior(img: &Arr, coords: &Arr) -> f64 {
        max_grad_error(&[img.clone(), coords.clone()], |_, t| {
            t[0].grid_sample(&t[1], Interp::Linear).square().sum()
        })
    }

    #[test]
    fn grid_sample_identity_is_exact() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let img = randn(&[3, 6, 7], &mut rng);
        let mut co = Arr::zeros(IxDyn(&[2, 6, 7]));
        for y in 0..6 {
            for x in 0..7 {
                co[[0, y, x]] = y as f64;
                co[[1, y, x]] = x as f64;
            }
        }
        let g = Graph::new();
        let out = g
            .constant(img.clone())
            .grid_sample(&g.constant(co), Interp::Linear);
        assert_eq!(&*out.value(), &img);
    }

    #[test]
    fn clamped_coords_get_zero_gradient() {
        let g = Graph::new();
        let img = g.constant(Arr::from_shape_vec(IxDyn(&[1, 3, 3]), (0..9).map(|v| v as f64).collect()).unwrap());
        let mut co = Arr::zeros(IxDyn(&[2, 1, 1]));
        co[[0, 0, 0]] = -2.0; // far outside
        co[[1, 0, 0]] = 1.0;
        let ct = g.leaf(co);
        let out = img.grid_sample(&ct, Interp::Linear).sum();
        let grads = out.backward();
        let gc = grads.get(&ct).unwrap();
        assert_eq!(gc[[0, 0, 0]], 0.0);
        assert!(gc[[1, 0, 0]].is_finite());
    }

    #[test]
    fn detach_blocks_gradient() {
        let g = Graph::new();
        let x = g.leaf(Arr::from_elem(IxDyn(&[2, 2]), 3.0));
        let y = x.detach().square().sum();
        let grads = y.backward();
        assert!(grads.get(&x).is_none());
    }

    #[test]
    fn mul_reuses_same_tensor() {
        let g = Graph::new();
        let x = g.leaf(Arr::from_elem(IxDyn(&[1]), 3.0));
        let y = x.mul(&x).sum(); // x^2, grad 2x = 6
        let grads = y.backward();
        assert_eq!(grads.get(&x).unwrap()[[0]], 6.0);
    }
}
