//! Differentiable geometry engine: stationary velocity fields, diffeomorphic
//! integration by scaling and squaring, inverse fields, spatial resampling
//! and field-regularity diagnostics.
//!
//! Fields store displacements in pixel units, shape `[D, spatial...]` with
//! `D ∈ {2, 3}`; the identity map is added lazily where absolute coordinates
//! are needed, so a zero field is exactly the identity.

use crate::autodiff::{Arr, Graph, Interp, Tensor};
use crate::error::{Error, Result};
use ndarray::{Dimension, IxDyn};

/// Displacement-per-unit-time vector grid.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityField(pub Arr);

/// Displacement grid of a deformation; absolute map is `id + displacement`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField(pub Arr);

fn check_field_shape(a: &Arr, what: &str) -> Result<()> {
    if a.ndim() < 2 {
        return Err(Error::Contract(format!("{what}: rank must be >= 2")));
    }
    let d = a.shape()[0];
    if d != a.ndim() - 1 || !(2..=3).contains(&d) {
        return Err(Error::Contract(format!(
            "{what}: expected [D, spatial...] with D in {{2,3}}, got {:?}",
            a.shape()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{what}: non-finite values")));
    }
    Ok(())
}

impl VelocityField {
    pub fn new(vectors: Arr) -> Result<Self> {
        check_field_shape(&vectors, "velocity field")?;
        Ok(Self(vectors))
    }

    pub fn zeros(spatial: &[usize]) -> Self {
        let mut shape = vec![spatial.len()];
        shape.extend_from_slice(spatial);
        Self(Arr::zeros(IxDyn(&shape)))
    }

    pub fn spatial_shape(&self) -> &[usize] {
        &self.0.shape()[1..]
    }

    pub fn negated(&self) -> Self {
        Self(self.0.map(|v| -v))
    }
}

impl DeformationField {
    pub fn identity(spatial: &[usize]) -> Self {
        let mut shape = vec![spatial.len()];
        shape.extend_from_slice(spatial);
        Self(Arr::zeros(IxDyn(&shape)))
    }

    pub fn spatial_shape(&self) -> &[usize] {
        &self.0.shape()[1..]
    }

    /// Absolute sampling coordinates, `id + displacement`.
    pub fn absolute(&self) -> Arr {
        &self.0 + &identity_grid(self.spatial_shape())
    }

    /// Per-pixel Euclidean displacement magnitude.
    pub fn magnitude(&self) -> Arr {
        let d = self.0.shape()[0];
        let spatial = self.spatial_shape().to_vec();
        let n: usize = spatial.iter().product();
        let flat = self.0.to_shape((d, n)).unwrap();
        let mut out = vec![0.0f64; n];
        for (q, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for a in 0..d {
                s += flat[[a, q]] * flat[[a, q]];
            }
            *o = s.sqrt();
        }
        Arr::from_shape_vec(IxDyn(&spatial), out).unwrap()
    }
}

/// Coordinate grid holding each position's own index, shape `[D, spatial...]`.
pub fn identity_grid(spatial: &[usize]) -> Arr {
    let d = spatial.len();
    let mut shape = vec![d];
    shape.extend_from_slice(spatial);
    let mut grid = Arr::zeros(IxDyn(&shape));
    for (idx, v) in grid.indexed_iter_mut() {
        let axis = idx[0];
        *v = idx[axis + 1] as f64;
    }
    grid
}

/// Tape-level scaling-and-squaring integration of a stationary velocity
/// field: `u_0 = v / 2^steps`, then `u <- u + u(id + u)` repeated `steps`
/// times. Returns the displacement tensor of `exp(v)`.
pub fn integrate_t(g: &Graph, v: &Tensor, steps: u32) -> Tensor {
    assert!(steps >= 1, "integrate: steps must be >= 1");
    let spatial: Vec<usize> = v.shape()[1..].to_vec();
    let id = g.constant(identity_grid(&spatial));
    let mut u = v.scale(1.0 / f64::powi(2.0, steps as i32));
    for _ in 0..steps {
        let coords = id.add(&u);
        let sampled = u.grid_sample(&coords, Interp::Linear);
        u = u.add(&sampled);
    }
    u
}

/// Tape-level warp: sample `img` at `id + disp`.
pub fn warp_t(img: &Tensor, disp: &Tensor, interp: Interp) -> Tensor {
    let spatial: Vec<usize> = disp.shape()[1..].to_vec();
    let id = img.graph().constant(identity_grid(&spatial));
    let coords = id.add(disp);
    img.grid_sample(&coords, interp)
}

/// Integrate a velocity field into a diffeomorphic deformation.
pub fn integrate(v: &VelocityField, steps: u32) -> Result<DeformationField> {
    if steps < 1 {
        return Err(Error::Config("integration steps must be >= 1".into()));
    }
    check_field_shape(&v.0, "velocity field")?;
    let g = Graph::new();
    let vt = g.constant(v.0.clone());
    let u = integrate_t(&g, &vt, steps);
    Ok(DeformationField(u.value().clone()))
}

/// Deformation of the negated velocity, `exp(-v)`; for smooth small fields
/// `integrate(v) ∘ inverse_field(v) ≈ id`.
pub fn inverse_field(v: &VelocityField, steps: u32) -> Result<DeformationField> {
    integrate(&v.negated(), steps)
}

/// Resample an image (`[spatial...]` or `[C, spatial...]`) through a
/// deformation field. Out-of-bounds samples clamp to the border value.
pub fn warp(img: &Arr, phi: &DeformationField, interp: Interp) -> Result<Arr> {
    let d = phi.0.shape()[0];
    let spatial = phi.spatial_shape();
    let (chan_form, had_channels) = if img.ndim() == d {
        let mut shape = vec![1usize];
        shape.extend_from_slice(img.shape());
        (img.to_shape(IxDyn(&shape)).unwrap().to_owned(), false)
    } else if img.ndim() == d + 1 {
        (img.clone(), true)
    } else {
        return Err(Error::Contract(format!(
            "warp: image rank {} incompatible with {d}-D field",
            img.ndim()
        )));
    };
    if chan_form.shape()[1..] != *spatial {
        return Err(Error::Contract(format!(
            "warp: image spatial shape {:?} != field spatial shape {:?}",
            &chan_form.shape()[1..],
            spatial
        )));
    }
    let g = Graph::new();
    let it = g.constant(chan_form);
    let dt = g.constant(phi.0.clone());
    let out = warp_t(&it, &dt, interp);
    let out = out.value().clone();
    if had_channels {
        Ok(out)
    } else {
        Ok(out.to_shape(IxDyn(spatial)).unwrap().to_owned())
    }
}

/// Composition `phi_a ∘ phi_b` as displacements:
/// `u(x) = u_a(x + u_b(x)) + u_b(x)`.
pub fn compose(a: &DeformationField, b: &DeformationField) -> Result<DeformationField> {
    if a.0.shape() != b.0.shape() {
        return Err(Error::Contract("compose: field shapes differ".into()));
    }
    let g = Graph::new();
    let at = g.constant(a.0.clone());
    let bt = g.constant(b.0.clone());
    let sampled = warp_t(&at, &bt, Interp::Linear);
    let out = sampled.add(&bt);
    Ok(DeformationField(out.value().clone()))
}

/// Central-difference Jacobian determinant of the absolute map at every
/// grid point (one-sided differences on the border).
pub fn jacobian_determinant(phi: &DeformationField) -> Result<Arr> {
    check_field_shape(&phi.0, "deformation field")?;
    let d = phi.0.shape()[0];
    let spatial = phi.spatial_shape().to_vec();
    let abs = phi.absolute();
    let mut out = Arr::zeros(IxDyn(&spatial));

    let deriv = |comp: usize, axis: usize, idx: &[usize]| -> f64 {
        let n = spatial[axis];
        let i = idx[axis];
        let mut lo = idx.to_vec();
        let mut hi = idx.to_vec();
        let (step, denom) = if i == 0 {
            hi[axis] = 1;
            (0, 1.0)
        } else if i == n - 1 {
            lo[axis] = n - 2;
            (0, 1.0)
        } else {
            lo[axis] = i - 1;
            hi[axis] = i + 1;
            (0, 2.0)
        };
        let _ = step;
        let mut loi = vec![comp];
        loi.extend_from_slice(&lo);
        let mut hii = vec![comp];
        hii.extend_from_slice(&hi);
        (abs[IxDyn(&hii)] - abs[IxDyn(&loi)]) / denom
    };

    for (idx, o) in out.indexed_iter_mut() {
        let idx: Vec<usize> = idx.slice().to_vec();
        let det = match d {
            2 => {
                let j00 = deriv(0, 0, &idx);
                let j01 = deriv(0, 1, &idx);
                let j10 = deriv(1, 0, &idx);
                let j11 = deriv(1, 1, &idx);
                j00 * j11 - j01 * j10
            }
            3 => {
                let m: Vec<f64> = (0..3)
                    .flat_map(|c| (0..3).map(move |a| (c, a)))
                    .map(|(c, a)| deriv(c, a, &idx))
                    .collect();
                m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
                    + m[2] * (m[3] * m[7] - m[4] * m[6])
            }
            _ => unreachable!(),
        };
        *o = det;
    }
    Ok(out)
}

/// Fraction of interior grid points with non-positive Jacobian determinant.
pub fn negative_jacobian_fraction(phi: &DeformationField) -> Result<f64> {
    let det = jacobian_determinant(phi)?;
    let spatial = phi.spatial_shape().to_vec();
    let mut total = 0usize;
    let mut bad = 0usize;
    for (idx, &v) in det.indexed_iter() {
        let idx = idx.slice();
        let interior = idx
            .iter()
            .zip(&spatial)
            .all(|(&i, &n)| i > 0 && i + 1 < n);
        if interior {
            total += 1;
            if v <= 0.0 {
                bad += 1;
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { bad as f64 / total as f64 })
}

/// Serialise a field's displacement grid as JSON (shape + flat data).
pub fn field_to_json(field: &DeformationField) -> String {
    let payload = serde_json::json!({
        "schema_version": 1,
        "kind": "deformation_field",
        "shape": field.0.shape(),
        "displacement": field.0.as_slice().unwrap(),
    });
    serde_json::to_string(&payload).unwrap()
}

pub fn field_from_json(s: &str) -> Result<DeformationField> {
    let v: serde_json::Value = serde_json::from_str(s)?;
    let shape: Vec<usize> = serde_json::from_value(v["shape"].clone())?;
    let data: Vec<f64> = serde_json::from_value(v["displacement"].clone())?;
    let arr = Arr::from_shape_vec(IxDyn(&shape), data)
        .map_err(|e| Error::Serde(e.to_string()))?;
    check_field_shape(&arr, "deformation field")?;
    Ok(DeformationField(arr))
}

impl Tensor {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }
}
