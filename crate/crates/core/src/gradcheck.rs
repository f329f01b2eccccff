//! Central finite-difference gradient checking, and the suite that checks
//! every backward pass in the crate.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{self, LayerSpec, Network};
use crate::siamese::{contrastive_loss, distance_backward, euclidean_distance, FeatureVector, Margin, PairLabel};
use crate::stn::{self, AffineParams, SampleGrid, StnConfig};
use crate::tensor::{matmul, matmul_backward, Precision, Scalar, Tensor};

/// A scalar-valued function of several tensors with an analytic gradient.
pub trait Differentiable<T: Scalar> {
    fn value(&self, inputs: &[Tensor<T>]) -> Result<f64>;
    fn gradient(&self, inputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>>;

    /// Fingerprint of the differentiable piece containing `inputs`, for
    /// piecewise-smooth functions. When it differs between the two probe
    /// points the step straddles a kink and is shrunk.
    fn regime(&self, _inputs: &[Tensor<T>]) -> Result<Option<u64>> {
        Ok(None)
    }
}

/// Adapts a pair of closures into a [`Differentiable`].
pub struct FnOp<V, G> {
    pub value: V,
    pub gradient: G,
}

impl<T, V, G> Differentiable<T> for FnOp<V, G>
where
    T: Scalar,
    V: Fn(&[Tensor<T>]) -> Result<f64>,
    G: Fn(&[Tensor<T>]) -> Result<Vec<Tensor<T>>>,
{
    fn value(&self, inputs: &[Tensor<T>]) -> Result<f64> {
        (self.value)(inputs)
    }

    fn gradient(&self, inputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        (self.gradient)(inputs)
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug)]
pub enum Probes {
    All,
    /// Up to `per_input` coordinates of each input, drawn without
    /// replacement.
    Sample { per_input: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(input, flat coordinate)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub probed: usize,
    /// Coordinates left unprobed because every step tried straddled a kink.
    pub kink_skips: usize,
}

/// Halvings of the step tried before a coordinate is skipped as a kink.
const MAX_STEP_HALVINGS: usize = 6;

/// Worst relative error over every coordinate of every input.
pub fn grad_check<T: Scalar, D: Differentiable<T> + ?Sized>(op: &D, inputs: &[Tensor<T>], epsilon: f64) -> Result<f64> {
    grad_check_probed(op, inputs, epsilon, &Probes::All).map(|r| r.max_relative_error)
}

pub fn grad_check_probed<T: Scalar, D: Differentiable<T> + ?Sized>(
    op: &D,
    inputs: &[Tensor<T>],
    epsilon: f64,
    probes: &Probes,
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    if inputs.iter().any(|t| !t.is_finite()) {
        return Err(Error::Numeric("gradient check inputs are not finite".into()));
    }
    let analytic = op.gradient(inputs)?;
    if analytic.len() != inputs.len() || analytic.iter().zip(inputs).any(|(g, x)| g.shape() != x.shape()) {
        return Err(Error::dim("analytic gradient shapes do not match the inputs"));
    }
    let mut rng = match probes {
        Probes::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(*seed)),
        Probes::All => None,
    };
    let mut scratch = inputs.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        probed: 0,
        kink_skips: 0,
    };
    for (which, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match (probes, rng.as_mut()) {
            (Probes::Sample { per_input, .. }, Some(rng)) if *per_input < input.len() => {
                let mut v = sample(rng, input.len(), *per_input).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..input.len()).collect(),
        };
        for k in coords {
            let x = input.data()[k];
            let mut step = epsilon;
            let mut numeric = None;
            for _ in 0..=MAX_STEP_HALVINGS {
                let h = T::from_f64_lossy(step);
                scratch[which].data_mut()[k] = x + h;
                let plus = op.value(&scratch)?;
                let plus_regime = op.regime(&scratch)?;
                scratch[which].data_mut()[k] = x - h;
                let minus = op.value(&scratch)?;
                let minus_regime = op.regime(&scratch)?;
                scratch[which].data_mut()[k] = x;
                if plus_regime == minus_regime {
                    // the step actually taken after rounding into T
                    let width = ((x + h) - (x - h)).to_f64_lossy();
                    numeric = Some((plus - minus) / width);
                    break;
                }
                step /= 2.0;
            }
            let Some(numeric) = numeric else {
                report.kink_skips += 1;
                continue;
            };
            let a = analytic[which].data()[k].to_f64_lossy();
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at input {which} coordinate {k}"
                )));
            }
            let err = relative_error(a, numeric);
            report.probed += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                report.worst = Some((which, k));
            }
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// suite

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Component {
    Matmul,
    Conv2d,
    Relu,
    MaxPool2,
    FullyConnected,
    Network,
    Loss,
    Grid,
    Sampler,
    EndToEnd,
}

impl Component {
    pub const ALL: [Component; 10] = [
        Component::Matmul,
        Component::Conv2d,
        Component::Relu,
        Component::MaxPool2,
        Component::FullyConnected,
        Component::Network,
        Component::Loss,
        Component::Grid,
        Component::Sampler,
        Component::EndToEnd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Matmul => "matmul",
            Component::Conv2d => "conv2d",
            Component::Relu => "relu",
            Component::MaxPool2 => "maxpool2",
            Component::FullyConnected => "fully_connected",
            Component::Network => "network",
            Component::Loss => "contrastive_loss",
            Component::Grid => "grid",
            Component::Sampler => "sampler",
            Component::EndToEnd => "end_to_end",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Component::ALL.into_iter().find(|c| c.name() == name)
    }

    /// Pass threshold at 64-bit precision.
    pub fn threshold_f64(self) -> f64 {
        match self {
            Component::Grid | Component::Sampler | Component::EndToEnd => 1e-4,
            _ => 1e-5,
        }
    }

    /// Central-difference step. The end-to-end path detects kinks and
    /// shrinks its step around them, so it can afford a larger one that
    /// keeps roundoff off its many small gradients.
    fn step(self) -> f64 {
        match self {
            Component::EndToEnd => 1e-4,
            _ => 1e-6,
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub precision: Precision,
    /// Scales this component's analytic gradient by 1.01.
    pub fault: Option<Component>,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            precision: Precision::F64,
            fault: None,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentResult {
    pub component: Component,
    pub max_relative_error: f64,
    pub threshold: f64,
    pub probed: usize,
    /// `(input, flat coordinate)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub kink_skips: usize,
}

impl ComponentResult {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.threshold
    }
}

/// Runs every component.
///
/// At 32-bit precision the analytic gradients come from the `f32` code path
/// and thresholds are 100x looser. The finite-difference reference is then
/// evaluated in `f64` at the same (exactly representable) points: an `f32`
/// forward pass carries too much roundoff to resolve small gradient entries.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<ComponentResult>> {
    Component::ALL
        .into_iter()
        .map(|component| {
            let seed = opts.seed ^ (component as u64).wrapping_mul(0x9e37_79b9);
            let scale = if opts.fault == Some(component) { 1.01 } else { 1.0 };
            let (report, relax) = match opts.precision {
                Precision::F64 => {
                    let p = problem::<f64>(component, seed, false)?;
                    let op = Faulty { inner: p.op.as_ref(), scale };
                    (grad_check_probed(&op, &p.inputs, component.step(), &p.probes)?, 1.0)
                }
                Precision::F32 => {
                    let low = problem::<f32>(component, seed, false)?;
                    let high = problem::<f64>(component, seed, true)?;
                    if low.inputs.iter().zip(&high.inputs).any(|(l, h)| &l.cast::<f64>() != h) {
                        return Err(Error::Numeric(format!("{component}: 32- and 64-bit problems diverged")));
                    }
                    let op = Mixed {
                        low: Faulty { inner: low.op.as_ref(), scale },
                        high: high.op.as_ref(),
                    };
                    (grad_check_probed(&op, &low.inputs, component.step(), &low.probes)?, 100.0)
                }
            };
            Ok(ComponentResult {
                component,
                max_relative_error: report.max_relative_error,
                threshold: component.threshold_f64() * relax,
                probed: report.probed,
                worst: report.worst,
                kink_skips: report.kink_skips,
            })
        })
        .collect()
}

struct Faulty<'a, T: Scalar> {
    inner: &'a dyn Differentiable<T>,
    scale: f64,
}

impl<T: Scalar> Differentiable<T> for Faulty<'_, T> {
    fn value(&self, inputs: &[Tensor<T>]) -> Result<f64> {
        self.inner.value(inputs)
    }

    fn gradient(&self, inputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let s = T::from_f64_lossy(self.scale);
        Ok(self.inner.gradient(inputs)?.into_iter().map(|g| g.map(|v| v * s)).collect())
    }

    fn regime(&self, inputs: &[Tensor<T>]) -> Result<Option<u64>> {
        self.inner.regime(inputs)
    }
}

/// `f32` gradients checked against values computed in `f64`.
struct Mixed<'a> {
    low: Faulty<'a, f32>,
    high: &'a dyn Differentiable<f64>,
}

impl Mixed<'_> {
    fn widen(inputs: &[Tensor<f32>]) -> Vec<Tensor<f64>> {
        inputs.iter().map(Tensor::cast).collect()
    }
}

impl Differentiable<f32> for Mixed<'_> {
    fn value(&self, inputs: &[Tensor<f32>]) -> Result<f64> {
        self.high.value(&Self::widen(inputs))
    }

    fn gradient(&self, inputs: &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
        self.low.gradient(inputs)
    }

    fn regime(&self, inputs: &[Tensor<f32>]) -> Result<Option<u64>> {
        self.high.regime(&Self::widen(inputs))
    }
}

struct Problem<T: Scalar> {
    op: Box<dyn Differentiable<T>>,
    inputs: Vec<Tensor<T>>,
    probes: Probes,
}

/// Random draws for one problem. With `snap` every value is rounded
/// through `f32`, so a 64-bit problem matches its 32-bit twin exactly.
struct Draws {
    rng: ChaCha8Rng,
    snap: bool,
}

impl Draws {
    fn scalar<T: Scalar>(&self, v: f64) -> T {
        T::from_f64_lossy(if self.snap { v as f32 as f64 } else { v })
    }

    fn uniform<T: Scalar>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| {
            let v = self.rng.gen_range(lo..hi);
            self.scalar(v)
        })
    }

    fn network<T: Scalar>(&mut self, input_shape: &[usize], specs: &[LayerSpec]) -> Result<Network<T>> {
        let mut net = Network::<f64>::new(input_shape, specs, &mut self.rng)?;
        let mut out = Network::<T>::zeros(input_shape, specs)?;
        for (o, p) in out.params.iter_mut().zip(net.params.iter_mut()) {
            o.value = Tensor::new(p.value.shape(), p.value.data().iter().map(|&v| self.scalar(v)).collect())?;
        }
        Ok(out)
    }
}

/// `sum(r * out)` evaluated in f64.
fn project<T: Scalar>(out: &Tensor<T>, r: &Tensor<T>) -> f64 {
    out.data()
        .iter()
        .zip(r.data())
        .map(|(&a, &b)| a.to_f64_lossy() * b.to_f64_lossy())
        .sum()
}

fn network_with<T: Scalar>(template: &Network<T>, values: &[Tensor<T>]) -> Network<T> {
    let mut net = template.clone();
    for (p, v) in net.params.iter_mut().zip(values) {
        p.value = v.clone();
    }
    net
}

fn boxed<T, V, G>(value: V, gradient: G) -> Box<dyn Differentiable<T>>
where
    T: Scalar,
    V: Fn(&[Tensor<T>]) -> Result<f64> + 'static,
    G: Fn(&[Tensor<T>]) -> Result<Vec<Tensor<T>>> + 'static,
{
    Box::new(FnOp { value, gradient })
}

fn problem<T: Scalar>(component: Component, seed: u64, snap: bool) -> Result<Problem<T>> {
    let mut d = Draws {
        rng: ChaCha8Rng::seed_from_u64(seed),
        snap,
    };
    let all = |op, inputs| Problem {
        op,
        inputs,
        probes: Probes::All,
    };
    Ok(match component {
        Component::Matmul => {
            let a = d.uniform::<T>(&[4, 5], -1.0, 1.0);
            let b = d.uniform::<T>(&[5, 3], -1.0, 1.0);
            let r = d.uniform::<T>(&[4, 3], -1.0, 1.0);
            let r2 = r.clone();
            all(
                boxed(
                    move |x: &[Tensor<T>]| Ok(project(&matmul(&x[0], &x[1])?, &r)),
                    move |x: &[Tensor<T>]| {
                        let (da, db) = matmul_backward(&x[0], &x[1], &r2)?;
                        Ok(vec![da, db])
                    },
                ),
                vec![a, b],
            )
        }
        Component::Conv2d => {
            // one stride-1 and one stride-2 convolution, summed
            let input = d.uniform::<T>(&[2, 8, 8], -1.0, 1.0);
            let k1 = d.uniform::<T>(&[3, 2, 3, 3], -1.0, 1.0);
            let k2 = d.uniform::<T>(&[3, 2, 3, 3], -1.0, 1.0);
            let r1 = d.uniform::<T>(&[3, 6, 6], -1.0, 1.0);
            let r2 = d.uniform::<T>(&[3, 3, 3], -1.0, 1.0);
            let (s1, s2) = (r1.clone(), r2.clone());
            all(
                boxed(
                    move |x: &[Tensor<T>]| {
                        Ok(project(&nn::conv2d(&x[0], &x[1], 1)?, &r1) + project(&nn::conv2d(&x[0], &x[2], 2)?, &r2))
                    },
                    move |x: &[Tensor<T>]| {
                        let (mut di, dk1) = nn::conv2d_backward(&x[0], &x[1], 1, &s1)?;
                        let (di2, dk2) = nn::conv2d_backward(&x[0], &x[2], 2, &s2)?;
                        di.add_assign(&di2);
                        Ok(vec![di, dk1, dk2])
                    },
                ),
                vec![input, k1, k2],
            )
        }
        Component::Relu => {
            // magnitudes kept well away from the kink at 0
            let x = Tensor::<T>::from_fn(&[128], |_| {
                let m = d.rng.gen_range(0.1..1.0);
                let v = if d.rng.gen_bool(0.5) { m } else { -m };
                d.scalar(v)
            });
            let r = d.uniform::<T>(&[128], -1.0, 1.0);
            let r2 = r.clone();
            all(
                boxed(
                    move |x: &[Tensor<T>]| Ok(project(&nn::relu(&x[0]), &r)),
                    move |x: &[Tensor<T>]| Ok(vec![nn::relu_backward(&x[0], &r2)?]),
                ),
                vec![x],
            )
        }
        Component::MaxPool2 => {
            // distinct values spaced far beyond the probe step
            let n = 2 * 6 * 6;
            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                order.swap(i, d.rng.gen_range(0..=i));
            }
            let x = Tensor::<T>::from_fn(&[2, 6, 6], |i| d.scalar(order[i] as f64 * 0.05 - 1.0));
            let r = d.uniform::<T>(&[2, 3, 3], -1.0, 1.0);
            let r2 = r.clone();
            all(
                boxed(
                    move |x: &[Tensor<T>]| Ok(project(&nn::maxpool2(&x[0])?.0, &r)),
                    move |x: &[Tensor<T>]| {
                        let (_, argmax) = nn::maxpool2(&x[0])?;
                        Ok(vec![nn::maxpool2_backward(x[0].shape(), &argmax, &r2)?])
                    },
                ),
                vec![x],
            )
        }
        Component::FullyConnected => {
            let x = d.uniform::<T>(&[7], -1.0, 1.0);
            let w = d.uniform::<T>(&[5, 7], -1.0, 1.0);
            let b = d.uniform::<T>(&[5], -1.0, 1.0);
            let r = d.uniform::<T>(&[5], -1.0, 1.0);
            let r2 = r.clone();
            all(
                boxed(
                    move |x: &[Tensor<T>]| Ok(project(&nn::fully_connected(&x[0], &x[1], &x[2])?, &r)),
                    move |x: &[Tensor<T>]| {
                        let (dx, dw, db) = nn::fully_connected_backward(&x[0], &x[1], &r2)?;
                        Ok(vec![dx, dw, db])
                    },
                ),
                vec![x, w, b],
            )
        }
        Component::Network => {
            let specs = [
                LayerSpec::conv(3, 3, 1),
                LayerSpec::Relu,
                LayerSpec::MaxPool2,
                LayerSpec::fc(6),
                LayerSpec::Relu,
                LayerSpec::fc(4),
            ];
            let template = d.network::<T>(&[1, 10, 10], &specs)?;
            let mut inputs = vec![d.uniform::<T>(&[1, 10, 10], -1.0, 1.0)];
            inputs.extend(template.params.iter().map(|p| p.value.clone()));
            let r = d.uniform::<T>(&[4], -1.0, 1.0);
            let (t2, r2) = (template.clone(), r.clone());
            all(
                boxed(
                    move |x: &[Tensor<T>]| Ok(project(&network_with(&template, &x[1..]).infer(&x[0])?, &r)),
                    move |x: &[Tensor<T>]| {
                        let net = network_with(&t2, &x[1..]);
                        let (_, trace) = net.forward(&x[0])?;
                        let mut grads = net.new_gradients();
                        let dx = net.backward(&trace, &r2, &mut grads, true)?.expect("input gradient");
                        let mut all = vec![dx];
                        all.extend(grads);
                        Ok(all)
                    },
                ),
                inputs,
            )
        }
        Component::Loss => {
            const N: usize = 6;
            const D: usize = 5;
            let labels: Vec<PairLabel> = (0..N).map(|i| PairLabel::from_bool(i % 2 == 0)).collect();
            let margin = Margin::new(1.0)?;
            // distances kept away from 0 and from the hinge at the margin
            let (a, b) = loop {
                let a = d.uniform::<T>(&[N, D], -0.6, 0.6);
                let b = d.uniform::<T>(&[N, D], -0.6, 0.6);
                let ok = pair_distances(&a, &b, D)?
                    .iter()
                    .all(|&v| v.to_f64_lossy() > 0.05 && (v.to_f64_lossy() - 1.0).abs() > 0.05);
                if ok {
                    break (a, b);
                }
            };
            let l2 = labels.clone();
            all(
                boxed(
                    move |x: &[Tensor<T>]| {
                        let dist = pair_distances(&x[0], &x[1], D)?;
                        Ok(contrastive_loss(&dist, &labels, margin)?.0.to_f64_lossy())
                    },
                    move |x: &[Tensor<T>]| {
                        let dist = pair_distances(&x[0], &x[1], D)?;
                        let (_, dd) = contrastive_loss(&dist, &l2, margin)?;
                        let mut ga = Vec::with_capacity(N * D);
                        let mut gb = Vec::with_capacity(N * D);
                        for i in 0..N {
                            let (fa, fb) = row_features(&x[0], &x[1], i, D)?;
                            let (da, db) = distance_backward(&fa, &fb, dist[i], dd[i])?;
                            ga.extend_from_slice(da.data());
                            gb.extend_from_slice(db.data());
                        }
                        Ok(vec![Tensor::new(&[N, D], ga)?, Tensor::new(&[N, D], gb)?])
                    },
                ),
                vec![a, b],
            )
        }
        Component::Grid => {
            let s = d.rng.gen_range(0.3..1.2);
            let tx = d.rng.gen_range(-0.5..0.5);
            let ty = d.rng.gen_range(-0.5..0.5);
            let theta = Tensor::<T>::new(&[3], vec![d.scalar(s), d.scalar(tx), d.scalar(ty)])?;
            let (out, inp) = ((6, 5), (9, 8));
            let r = d.uniform::<T>(&[6, 5, 2], -1.0, 1.0);
            let r2 = r.clone();
            let to_theta = |t: &Tensor<T>| AffineParams::new(t.data()[0], t.data()[1], t.data()[2]);
            all(
                boxed(
                    move |x: &[Tensor<T>]| Ok(project(&stn::generate_grid(to_theta(&x[0]), out, inp)?.coords, &r)),
                    move |_: &[Tensor<T>]| {
                        let g = stn::grid_backward(&r2, out, inp)?;
                        Ok(vec![Tensor::new(&[3], vec![g.s, g.tx, g.ty])?])
                    },
                ),
                vec![theta],
            )
        }
        Component::Sampler => {
            let u = d.uniform::<T>(&[2, 7, 7], -1.0, 1.0);
            // integer parts straddle the border; fractional parts avoid kinks
            let grid = Tensor::<T>::from_fn(&[5, 4, 2], |_| {
                let v = d.rng.gen_range(-1i32..7) as f64 + d.rng.gen_range(0.05..0.95);
                d.scalar(v)
            });
            let r = d.uniform::<T>(&[2, 5, 4], -1.0, 1.0);
            let r2 = r.clone();
            all(
                boxed(
                    move |x: &[Tensor<T>]| {
                        Ok(project(&stn::bilinear_sample(&x[0], &SampleGrid::new(x[1].clone())?)?, &r))
                    },
                    move |x: &[Tensor<T>]| {
                        let (du, dg) = stn::sample_backward(&x[0], &SampleGrid::new(x[1].clone())?, &r2)?;
                        Ok(vec![du, dg])
                    },
                ),
                vec![u, grid],
            )
        }
        Component::EndToEnd => {
            let cfg = StnConfig::for_input(60);
            let mut template = d.network::<T>(&[1, 60, 60], &cfg.localisation)?;
            // keep the initial transform away from saturation
            let (w, _) = template.last_fc().expect("fc head");
            template.params[w].value = template.params[w].value.map(|v| d.scalar(v.to_f64_lossy() * 0.05));
            let image = smooth_image(60, &mut d)?;
            let inputs: Vec<Tensor<T>> = template.params.iter().map(|p| p.value.clone()).collect();
            let probe_seed = d.rng.gen();
            Problem {
                op: Box::new(EndToEnd { template, image, cfg }),
                inputs,
                probes: Probes::Sample {
                    per_input: 40,
                    seed: probe_seed,
                },
            }
        }
    })
}

/// `sum(V^2)` of the transformer crop as a function of the localisation
/// net's parameters.
struct EndToEnd<T> {
    template: Network<T>,
    image: Tensor<T>,
    cfg: StnConfig,
}

impl<T: Scalar> Differentiable<T> for EndToEnd<T> {
    fn value(&self, inputs: &[Tensor<T>]) -> Result<f64> {
        let net = network_with(&self.template, inputs);
        let out = stn::stn_forward(&self.image, &net, &self.cfg)?;
        Ok(out.crop.data().iter().map(|v| v.to_f64_lossy().powi(2)).sum())
    }

    fn gradient(&self, inputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let net = network_with(&self.template, inputs);
        let out = stn::stn_forward(&self.image, &net, &self.cfg)?;
        let two = T::from_f64_lossy(2.0);
        let d_crop = out.crop.map(|v| v * two);
        let mut grads = net.new_gradients();
        stn::stn_backward(&self.image, &out.trace, &d_crop, &net, &self.cfg, &mut grads)?;
        Ok(grads)
    }

    fn regime(&self, inputs: &[Tensor<T>]) -> Result<Option<u64>> {
        let net = network_with(&self.template, inputs);
        Ok(Some(stn::stn_forward(&self.image, &net, &self.cfg)?.trace.regime()))
    }
}

fn row_features<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, i: usize, d: usize) -> Result<(FeatureVector<T>, FeatureVector<T>)> {
    Ok((
        FeatureVector {
            values: Tensor::new(&[d], a.data()[i * d..(i + 1) * d].to_vec())?,
        },
        FeatureVector {
            values: Tensor::new(&[d], b.data()[i * d..(i + 1) * d].to_vec())?,
        },
    ))
}

fn pair_distances<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, d: usize) -> Result<Vec<T>> {
    (0..a.len() / d)
        .map(|i| {
            let (fa, fb) = row_features(a, b, i, d)?;
            euclidean_distance(&fa, &fb)
        })
        .collect()
}

/// Low-frequency random image in `[0, 1]` built from a few sinusoids.
fn smooth_image<T: Scalar>(side: usize, d: &mut Draws) -> Result<Tensor<T>> {
    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| (d.rng.gen_range(0.02..0.15), d.rng.gen_range(0.02..0.15), d.rng.gen_range(0.0..6.28)))
        .collect();
    let pixels = (0..side * side)
        .map(|k| {
            let (i, j) = ((k / side) as f64, (k % side) as f64);
            let v: f64 = waves.iter().map(|&(fy, fx, ph)| (fy * i + fx * j + ph).sin()).sum();
            d.scalar(0.5 + v / 8.0)
        })
        .collect();
    Tensor::new(&[1, side, side], pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let op = FnOp {
            value: |x: &[Tensor<f64>]| Ok(3.0 * x[0].data()[0]),
            gradient: |_: &[Tensor<f64>]| Ok(vec![Tensor::from_f64(&[1], &[3.0])?]),
        };
        let x = Tensor::from_f64(&[1], &[0.7]).unwrap();
        assert!(grad_check(&op, &[x], 1e-6).unwrap() < 1e-9);
    }

    #[test]
    fn relu_away_from_kink() {
        let x = Tensor::<f64>::from_f64(&[4], &[-1.0, 0.5, 0.01, 2.0]).unwrap();
        let op = FnOp {
            value: |x: &[Tensor<f64>]| Ok(nn::relu(&x[0]).sum()),
            gradient: |x: &[Tensor<f64>]| Ok(vec![nn::relu_backward(&x[0], &Tensor::full(&[4], 1.0))?]),
        };
        assert!(grad_check(&op, &[x], 1e-6).unwrap() < 1e-6);
    }

    #[test]
    fn corrupted_backward_is_flagged() {
        let x = Tensor::<f64>::from_f64(&[3], &[0.3, -0.2, 1.1]).unwrap();
        let op = FnOp {
            value: |x: &[Tensor<f64>]| Ok(x[0].sum_squares()),
            gradient: |x: &[Tensor<f64>]| Ok(vec![x[0].map(|v| 2.0 * v * 1.01)]),
        };
        let err = grad_check(&op, &[x], 1e-6).unwrap();
        assert!((err - 0.01 / 1.01).abs() < 1e-6, "{err}");
        assert!(err > 1e-5);
    }

    #[test]
    fn rejects_bad_epsilon_and_inputs() {
        let op = FnOp {
            value: |_: &[Tensor<f64>]| Ok(0.0),
            gradient: |x: &[Tensor<f64>]| Ok(vec![Tensor::zeros(x[0].shape())]),
        };
        let x = Tensor::<f64>::from_f64(&[1], &[1.0]).unwrap();
        assert!(grad_check(&op, &[x], 0.0).is_err());
        let nan = Tensor::<f64>::from_f64(&[1], &[f64::NAN]).unwrap();
        assert!(matches!(grad_check(&op, &[nan], 1e-6), Err(Error::Numeric(_))));
    }

    #[test]
    fn component_names_round_trip() {
        for c in Component::ALL {
            assert_eq!(Component::from_name(c.name()), Some(c));
        }
    }
}

#[cfg(test)]
mod suite_tests {
    use super::*;

    fn show(results: &[ComponentResult]) -> String {
        results
            .iter()
            .map(|r| format!("{} {:.3e} < {:.0e} ({} probes, worst {:?})\n", r.component, r.max_relative_error, r.threshold, r.probed, r.worst))
            .collect()
    }

    #[test]
    fn suite_passes_at_both_precisions() {
        for precision in [Precision::F64, Precision::F32] {
            let results = run_suite(&SuiteOptions { precision, ..Default::default() }).unwrap();
            assert!(results.iter().all(ComponentResult::passed), "{precision}\n{}", show(&results));
        }
    }

    #[test]
    fn injected_sampler_fault_is_reported() {
        let results = run_suite(&SuiteOptions {
            fault: Some(Component::Sampler),
            ..Default::default()
        })
        .unwrap();
        for r in &results {
            if r.component == Component::Sampler {
                assert!(!r.passed());
                assert!((r.max_relative_error - 0.01 / 1.01).abs() < 1e-4, "{}", show(&results));
            } else {
                assert!(r.passed(), "{}", show(&results));
            }
        }
    }
}
