//! Spatial transformer restricted to isotropic scale plus translation.
//!
//! Normalized coordinates run over `[-1, 1]` with corners aligned to pixel
//! centres, so `(s, t_x, t_y) = (1, 0, 0)` with equal input and output sizes
//! is an exact identity. Samples that fall outside the source read zero.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::nn::{Gradients, LayerSpec, Network, Trace};
use crate::tensor::{Scalar, Tensor};

/// `[[s, 0, t_x], [0, s, t_y]]` in normalized coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams<T> {
    pub s: T,
    pub tx: T,
    pub ty: T,
}

impl<T: Scalar> AffineParams<T> {
    pub fn new(s: T, tx: T, ty: T) -> Self {
        AffineParams { s, tx, ty }
    }

    pub fn identity() -> Self {
        AffineParams::new(T::one(), T::zero(), T::zero())
    }

    pub fn to_f64(self) -> AffineParams<f64> {
        AffineParams::new(self.s.to_f64_lossy(), self.tx.to_f64_lossy(), self.ty.to_f64_lossy())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StnConfig {
    pub out_height: usize,
    pub out_width: usize,
    pub s_min: f64,
    pub s_max: f64,
    pub localisation: Vec<LayerSpec>,
}

impl StnConfig {
    /// Defaults for a square `side x side` single-channel input: a 40x40
    /// crop for 60x60 canvases, 128x128 for 160x160 images, two thirds of
    /// the side otherwise.
    pub fn for_input(side: usize) -> Self {
        let crop = match side {
            60 => 40,
            160 => 128,
            s => (2 * s / 3).max(2),
        };
        StnConfig {
            out_height: crop,
            out_width: crop,
            s_min: 0.1,
            s_max: 1.5,
            localisation: default_localisation(side),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_height < 2 || self.out_width < 2 {
            return Err(Error::Config(format!(
                "crop size {}x{} must be at least 2x2",
                self.out_height, self.out_width
            )));
        }
        if !(self.s_min > 0.0 && self.s_min <= self.s_max && self.s_max.is_finite()) {
            return Err(Error::Config(format!(
                "scale range [{}, {}] must satisfy 0 < s_min <= s_max",
                self.s_min, self.s_max
            )));
        }
        if !matches!(self.localisation.last(), Some(LayerSpec::FullyConnected { out_features: 3 })) {
            return Err(Error::Config(
                "localisation net must end in a 3-output fully connected layer".into(),
            ));
        }
        Ok(())
    }

    pub fn out_shape(&self) -> (usize, usize) {
        (self.out_height, self.out_width)
    }
}

/// conv(8, 6x6, /2) -> relu -> pool -> conv(10, k) -> relu -> pool -> fc 32
/// -> relu -> fc 3, with `k` in {5, 4} picked so the second pool sees an even
/// map.
pub fn default_localisation(side: usize) -> Vec<LayerSpec> {
    let after_first = side.saturating_sub(6) / 2 + 1;
    let pooled = after_first / 2;
    let k2 = if pooled >= 5 && (pooled - 5 + 1) % 2 == 0 { 5 } else { 4 };
    vec![
        LayerSpec::conv(8, 6, 2),
        LayerSpec::Relu,
        LayerSpec::MaxPool2,
        LayerSpec::conv(10, k2, 1),
        LayerSpec::Relu,
        LayerSpec::MaxPool2,
        LayerSpec::fc(32),
        LayerSpec::Relu,
        LayerSpec::fc(3),
    ]
}

/// Sets the localisation head to emit `(1, 0, 0)` for every input: zero
/// final weights and a bias that inverts the scale squashing at `s = 1`.
pub fn init_identity_head<T: Scalar>(locnet: &mut Network<T>, cfg: &StnConfig) -> Result<()> {
    let (w, b) = locnet
        .last_fc()
        .ok_or_else(|| Error::Config("localisation net has no fully connected head".into()))?;
    if locnet.params[b].value.len() != 3 {
        return Err(Error::Config("localisation head must have 3 outputs".into()));
    }
    locnet.params[w].value.fill(T::zero());
    let bias = locnet.params[b].value.data_mut();
    bias[0] = T::from_f64_lossy(scale_logit(cfg));
    bias[1] = T::zero();
    bias[2] = T::zero();
    Ok(())
}

fn scale_logit(cfg: &StnConfig) -> f64 {
    if cfg.s_max == cfg.s_min {
        return 0.0;
    }
    let p = ((1.0 - cfg.s_min) / (cfg.s_max - cfg.s_min)).clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Localisation forward record.
#[derive(Clone, Debug)]
pub struct LocTrace<T> {
    net: Trace<T>,
    raw: [T; 3],
}

/// Maps raw head outputs into the valid parameter box.
pub fn squash<T: Scalar>(raw: [T; 3], cfg: &StnConfig) -> AffineParams<T> {
    let s_min = T::from_f64_lossy(cfg.s_min);
    let span = T::from_f64_lossy(cfg.s_max - cfg.s_min);
    AffineParams::new(s_min + span * sigmoid(raw[0]), raw[1].tanh(), raw[2].tanh())
}

/// Runs the localisation net on `image` and squashes its three outputs into
/// `s in [s_min, s_max]`, `t_x, t_y in [-1, 1]`.
pub fn localize<T: Scalar>(
    image: &Tensor<T>,
    locnet: &Network<T>,
    cfg: &StnConfig,
) -> Result<(AffineParams<T>, LocTrace<T>)> {
    if locnet.output_len() != 3 {
        return Err(Error::dim(format!(
            "localisation net must output 3 values, outputs {:?}",
            locnet.output_shape()
        )));
    }
    let (out, net) = locnet.forward(image)?;
    let raw = [out.data()[0], out.data()[1], out.data()[2]];
    Ok((squash(raw, cfg), LocTrace { net, raw }))
}

/// Source coordinates for every output pixel, in source pixel units.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGrid<T> {
    /// `H' x W' x 2`, last axis `(x_s, y_s)` = (column, row).
    pub coords: Tensor<T>,
    pub out_shape: (usize, usize),
}

impl<T: Scalar> SampleGrid<T> {
    pub fn new(coords: Tensor<T>) -> Result<Self> {
        match coords.shape()[..] {
            [h, w, 2] => Ok(SampleGrid {
                out_shape: (h, w),
                coords,
            }),
            _ => Err(Error::dim(format!(
                "grid must be H' x W' x 2, got {:?}",
                coords.shape()
            ))),
        }
    }

    #[inline]
    fn at(&self, k: usize) -> (T, T) {
        let d = self.coords.data();
        (d[2 * k], d[2 * k + 1])
    }
}

fn check_grid_shapes(out_shape: (usize, usize), in_shape: (usize, usize)) -> Result<()> {
    if out_shape.0 < 2 || out_shape.1 < 2 || in_shape.0 < 2 || in_shape.1 < 2 {
        return Err(Error::dim(format!(
            "grid shapes must be at least 2 in each dimension: out {out_shape:?}, in {in_shape:?}"
        )));
    }
    Ok(())
}

/// Pushes the regular output grid through the affine map.
///
/// With `x_t = 2j/(W'-1) - 1` the source column is
/// `(s*x_t + t_x + 1)/2 * (W-1)`, evaluated as
/// `s*(j - (W'-1)/2)*(W-1)/(W'-1) + (1 + t_x)*(W-1)/2` so the identity
/// transform lands exactly on integer pixels.
pub fn generate_grid<T: Scalar>(
    theta: AffineParams<T>,
    out_shape: (usize, usize),
    in_shape: (usize, usize),
) -> Result<SampleGrid<T>> {
    check_grid_shapes(out_shape, in_shape)?;
    let (ho, wo) = out_shape;
    let (h, w) = in_shape;
    let f = |v: usize| T::from_usize(v).expect("size fits scalar");
    let two = f(2);
    let col_scale = f(w - 1) / f(wo - 1);
    let row_scale = f(h - 1) / f(ho - 1);
    let col_half = f(w - 1) / two;
    let row_half = f(h - 1) / two;
    let centre_j = f(wo - 1) / two;
    let centre_i = f(ho - 1) / two;
    let mut coords = Tensor::zeros(&[ho, wo, 2]);
    let d = coords.data_mut();
    for i in 0..ho {
        let row = theta.s * (f(i) - centre_i) * row_scale + (T::one() + theta.ty) * row_half;
        for j in 0..wo {
            let col = theta.s * (f(j) - centre_j) * col_scale + (T::one() + theta.tx) * col_half;
            let k = i * wo + j;
            d[2 * k] = col;
            d[2 * k + 1] = row;
        }
    }
    SampleGrid::new(coords)
}

/// Chains a grid gradient back to `(ds, dt_x, dt_y)`.
pub fn grid_backward<T: Scalar>(
    d_grid: &Tensor<T>,
    out_shape: (usize, usize),
    in_shape: (usize, usize),
) -> Result<AffineParams<T>> {
    check_grid_shapes(out_shape, in_shape)?;
    let (ho, wo) = out_shape;
    let (h, w) = in_shape;
    if d_grid.shape() != [ho, wo, 2] {
        return Err(Error::dim(format!(
            "grid gradient {:?} does not match [{ho}, {wo}, 2]",
            d_grid.shape()
        )));
    }
    let f = |v: usize| T::from_usize(v).expect("size fits scalar");
    let two = f(2);
    let col_scale = f(w - 1) / f(wo - 1);
    let row_scale = f(h - 1) / f(ho - 1);
    let centre_j = f(wo - 1) / two;
    let centre_i = f(ho - 1) / two;
    let (mut ds, mut dcol_sum, mut drow_sum) = (T::zero(), T::zero(), T::zero());
    let d = d_grid.data();
    for i in 0..ho {
        let dy = (f(i) - centre_i) * row_scale;
        for j in 0..wo {
            let dx = (f(j) - centre_j) * col_scale;
            let k = i * wo + j;
            ds += d[2 * k] * dx + d[2 * k + 1] * dy;
            dcol_sum += d[2 * k];
            drow_sum += d[2 * k + 1];
        }
    }
    Ok(AffineParams::new(
        ds,
        dcol_sum * f(w - 1) / two,
        drow_sum * f(h - 1) / two,
    ))
}

/// Integer corner and fractional offsets of one sample.
#[inline]
fn split<T: Scalar>(v: T) -> (i64, T) {
    let base = v.floor();
    (base.to_i64().unwrap_or(i64::MIN / 2), v - base)
}

fn check_finite_grid<T: Scalar>(grid: &SampleGrid<T>) -> Result<()> {
    if !grid.coords.is_finite() {
        return Err(Error::Numeric("sampling grid contains non-finite coordinates".into()));
    }
    Ok(())
}

/// Bilinear sampling of `U` at every grid point via the four neighbours of
/// each sample; neighbours outside the image contribute zero.
pub fn bilinear_sample<T: Scalar>(u: &Tensor<T>, grid: &SampleGrid<T>) -> Result<Tensor<T>> {
    check_finite_grid(grid)?;
    let (c, h, w) = u.dims3()?;
    let (ho, wo) = grid.out_shape;
    let n = ho * wo;
    let mut out = Tensor::zeros(&[c, ho, wo]);
    let src = u.data();
    let dst = out.data_mut();
    for k in 0..n {
        let (x, y) = grid.at(k);
        let (x0, fx) = split(x);
        let (y0, fy) = split(y);
        let taps = [
            (y0, x0, (T::one() - fy) * (T::one() - fx)),
            (y0, x0 + 1, (T::one() - fy) * fx),
            (y0 + 1, x0, fy * (T::one() - fx)),
            (y0 + 1, x0 + 1, fy * fx),
        ];
        for (yy, xx, wgt) in taps {
            if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                continue;
            }
            let off = yy as usize * w + xx as usize;
            for ch in 0..c {
                dst[ch * n + k] += src[ch * h * w + off] * wgt;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`bilinear_sample`] with respect to the source image and
/// the grid. `dGrid` has the grid's `H' x W' x 2` layout.
///
/// The coordinate derivative is the piecewise-linear kernel slope: for a
/// neighbour `m`, `+1` when `m` lies to the right of the sample and `-1`
/// when it lies to the left, zero beyond distance one. At exactly integer
/// coordinates the right-hand neighbour is used, i.e. the one-sided
/// derivative in the increasing direction.
pub fn sample_backward<T: Scalar>(
    u: &Tensor<T>,
    grid: &SampleGrid<T>,
    d_v: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (du, dg) = sample_backward_impl(u, grid, d_v, true)?;
    Ok((du.expect("requested"), dg))
}

fn sample_backward_impl<T: Scalar>(
    u: &Tensor<T>,
    grid: &SampleGrid<T>,
    d_v: &Tensor<T>,
    want_du: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
    check_finite_grid(grid)?;
    let (c, h, w) = u.dims3()?;
    let (ho, wo) = grid.out_shape;
    if d_v.shape() != [c, ho, wo] {
        return Err(Error::dim(format!(
            "sampler gradient {:?} does not match output [{c}, {ho}, {wo}]",
            d_v.shape()
        )));
    }
    let n = ho * wo;
    let mut du = want_du.then(|| Tensor::zeros(u.shape()));
    let mut dg = Tensor::zeros(&[ho, wo, 2]);
    let src = u.data();
    let up = d_v.data();
    let one = T::one();
    for k in 0..n {
        let (x, y) = grid.at(k);
        let (x0, fx) = split(x);
        let (y0, fy) = split(y);
        // (row, col, weight, d weight / dx, d weight / dy)
        let taps = [
            (y0, x0, (one - fy) * (one - fx), -(one - fy), -(one - fx)),
            (y0, x0 + 1, (one - fy) * fx, one - fy, -fx),
            (y0 + 1, x0, fy * (one - fx), -fy, one - fx),
            (y0 + 1, x0 + 1, fy * fx, fy, fx),
        ];
        let (mut gx, mut gy) = (T::zero(), T::zero());
        for (yy, xx, wgt, wdx, wdy) in taps {
            if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                continue;
            }
            let off = yy as usize * w + xx as usize;
            for ch in 0..c {
                let g = up[ch * n + k];
                let val = src[ch * h * w + off];
                gx += g * val * wdx;
                gy += g * val * wdy;
                if let Some(du) = du.as_mut() {
                    du.data_mut()[ch * h * w + off] += g * wgt;
                }
            }
        }
        dg.data_mut()[2 * k] = gx;
        dg.data_mut()[2 * k + 1] = gy;
    }
    Ok((du, dg))
}

/// Resizes `image` to `out_shape` with the identity transform's sampler
/// (align-corners bilinear).
pub fn resize_bilinear<T: Scalar>(image: &Tensor<T>, out_shape: (usize, usize)) -> Result<Tensor<T>> {
    let (_, h, w) = image.dims3()?;
    if (h, w) == out_shape {
        return Ok(image.clone());
    }
    let grid = generate_grid(AffineParams::identity(), out_shape, (h, w))?;
    bilinear_sample(image, &grid)
}

/// Record of a full transformer pass, needed to backpropagate into the
/// localisation net.
#[derive(Clone, Debug)]
pub struct StnTrace<T> {
    loc: LocTrace<T>,
    theta: AffineParams<T>,
    grid: SampleGrid<T>,
    in_shape: (usize, usize),
}

impl<T: Scalar> StnTrace<T> {
    pub fn grid(&self) -> &SampleGrid<T> {
        &self.grid
    }

    /// Fingerprint of the regime the backward pass linearizes around: the
    /// localisation net's activation pattern and the integer cell of every
    /// sample point.
    pub fn regime(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.loc.net.regime().hash(&mut h);
        for v in self.grid.coords.data() {
            (v.floor().to_f64_lossy() as i64).hash(&mut h);
        }
        h.finish()
    }
}

pub struct StnOutput<T> {
    pub crop: Tensor<T>,
    pub theta: AffineParams<T>,
    pub trace: StnTrace<T>,
}

/// localize -> generate_grid -> bilinear_sample.
pub fn stn_forward<T: Scalar>(image: &Tensor<T>, locnet: &Network<T>, cfg: &StnConfig) -> Result<StnOutput<T>> {
    let (_, h, w) = image.dims3()?;
    let (theta, loc) = localize(image, locnet, cfg)?;
    let grid = generate_grid(theta, cfg.out_shape(), (h, w))?;
    let crop = bilinear_sample(image, &grid)?;
    Ok(StnOutput {
        crop,
        theta,
        trace: StnTrace {
            loc,
            theta,
            grid,
            in_shape: (h, w),
        },
    })
}

/// Gradient with respect to `(s, t_x, t_y)` of a loss whose gradient with
/// respect to the crop is `d_crop`.
pub fn stn_theta_grad<T: Scalar>(image: &Tensor<T>, trace: &StnTrace<T>, d_crop: &Tensor<T>) -> Result<AffineParams<T>> {
    let (_, d_grid) = sample_backward_impl(image, &trace.grid, d_crop, false)?;
    grid_backward(&d_grid, trace.grid.out_shape, trace.in_shape)
}

/// Backpropagates a crop gradient through sampler, grid and squashing into
/// the localisation net's parameter gradients.
pub fn stn_backward<T: Scalar>(
    image: &Tensor<T>,
    trace: &StnTrace<T>,
    d_crop: &Tensor<T>,
    locnet: &Network<T>,
    cfg: &StnConfig,
    grads: &mut Gradients<T>,
) -> Result<()> {
    let d_theta = stn_theta_grad(image, trace, d_crop)?;
    let span = T::from_f64_lossy(cfg.s_max - cfg.s_min);
    let sig = sigmoid(trace.loc.raw[0]);
    let d_raw = [
        d_theta.s * span * sig * (T::one() - sig),
        d_theta.tx * (T::one() - trace.theta.tx * trace.theta.tx),
        d_theta.ty * (T::one() - trace.theta.ty * trace.theta.ty),
    ];
    let d_out = Tensor::new(locnet.output_shape(), d_raw.to_vec())?;
    locnet.backward(&trace.loc.net, &d_out, grads, false)?;
    Ok(())
}

/// Axis-aligned box in pixel coordinates, corners inclusive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub row0: f64,
    pub col0: f64,
    pub row1: f64,
    pub col1: f64,
}

impl BBox {
    pub fn new(row0: f64, col0: f64, row1: f64, col1: f64) -> Self {
        BBox { row0, col0, row1, col1 }
    }

    /// Pixel-count area: a box spanning rows `r0..=r1` covers `r1 - r0 + 1`
    /// rows.
    pub fn area(&self) -> f64 {
        (self.row1 - self.row0 + 1.0).max(0.0) * (self.col1 - self.col0 + 1.0).max(0.0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ih = (self.row1.min(other.row1) - self.row0.max(other.row0) + 1.0).max(0.0);
        let iw = (self.col1.min(other.col1) - self.col0.max(other.col0) + 1.0).max(0.0);
        let inter = ih * iw;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.row0 <= other.row0 && self.col0 <= other.col0 && self.row1 >= other.row1 && self.col1 >= other.col1
    }
}

/// Source rectangle covered by the transform's grid corners, clamped to the
/// image.
pub fn theta_to_bbox<T: Scalar>(theta: AffineParams<T>, in_shape: (usize, usize)) -> BBox {
    let th = theta.to_f64();
    let (h, w) = in_shape;
    let to_px = |v: f64, extent: usize| ((v + 1.0) / 2.0 * (extent as f64 - 1.0)).clamp(0.0, extent as f64 - 1.0);
    BBox::new(
        to_px(th.ty - th.s, h),
        to_px(th.tx - th.s, w),
        to_px(th.ty + th.s, h),
        to_px(th.tx + th.s, w),
    )
}
