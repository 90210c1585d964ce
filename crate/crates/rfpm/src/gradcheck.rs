//! Finite-difference verification suite over every differentiable operation.
//!
//! Each check builds seeded random 16x16 inputs, compares analytic
//! gradients against central differences (eps = 1e-5) on sampled entries,
//! and reports the max relative error. Operations with non-smooth points
//! (max pooling, leaky-relu, bilinear corners) get inputs nudged away from
//! their kinks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, Node};
use crate::error::{Result, RfpmError};
use crate::flownet::{estimate_pair, init_model_params, EstimatorConfig};
use crate::matching::warp;
use crate::params::ParamNodes;
use crate::pyramid::{apply_repair, make_repair_masks, rfd_down, RfpmConfig};
use crate::tensor::Tensor;
use crate::train::multiscale_loss;

pub const EPS: f64 = 1e-5;
pub const PER_OP_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
const SAMPLES_PER_TENSOR: usize = 20;

#[derive(Clone, Debug)]
pub struct GradCheckResult {
    pub name: &'static str,
    pub max_err: f64,
    pub threshold: f64,
}

impl GradCheckResult {
    pub fn passed(&self) -> bool {
        self.max_err < self.threshold
    }
}

pub const ALL_OPS: [&str; 12] = [
    "conv2d",
    "max_pool2x2",
    "bilinear_sample",
    "elementwise",
    "concat_channels",
    "leaky_relu",
    "upsample2x",
    "warp",
    "correlate",
    "repair_mask",
    "rfd_down",
    "estimator_loss",
];

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::rand_uniform(shape, 1.0, &mut rng(seed))
}

/// Pushes values away from zero so leaky-relu differentiation sees no kink.
fn away_from_zero(mut t: Tensor, margin: f64) -> Tensor {
    for v in t.data_mut().iter_mut() {
        if v.abs() < margin {
            *v += margin.copysign(*v + f64::MIN_POSITIVE);
        }
    }
    t
}

/// Widens the top-two gap in every non-overlapping 2x2 pooling window.
fn detie_pool_windows(mut t: Tensor, margin: f64) -> Tensor {
    let (b, c, h, w) = t.dims4().unwrap();
    for bc in 0..b * c {
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                let idx = |dy: usize, dx: usize| {
                    (bc * h + 2 * oy + dy) * w + 2 * ox + dx
                };
                let ids = [idx(0, 0), idx(0, 1), idx(1, 0), idx(1, 1)];
                let best = ids
                    .iter()
                    .copied()
                    .max_by(|&a, &b| t.data()[a].partial_cmp(&t.data()[b]).unwrap())
                    .unwrap();
                let runner_up = ids
                    .iter()
                    .copied()
                    .filter(|&i| i != best)
                    .map(|i| t.data()[i])
                    .fold(f64::MIN, f64::max);
                if t.data()[best] - runner_up < margin {
                    t.data_mut()[best] = runner_up + margin;
                }
            }
        }
    }
    t
}

/// Fractional coordinates kept away from integer bilinear kinks.
fn fractional_coords(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    let mut r = rng(seed);
    for v in t.data_mut().iter_mut() {
        let mut x: f64 = r.gen_range(lo..hi);
        if (x - x.round()).abs() < 0.05 {
            x += 0.11;
        }
        *v = x;
    }
    t
}

/// Runs one named check.
pub fn run_op(name: &str, seed: u64) -> Result<GradCheckResult> {
    let err = match name {
        "conv2d" => grad_check(
            &|p: &[Node]| {
                let y = p[0].conv2d(&p[1], &p[2], 2, 1)?;
                Ok(y.mul(&y)?.sum_all())
            },
            &[
                rand_t(&[1, 3, 16, 16], seed),
                rand_t(&[4, 3, 3, 3], seed + 1),
                rand_t(&[4], seed + 2),
            ],
            EPS,
            SAMPLES_PER_TENSOR,
            seed + 3,
        )?,
        "max_pool2x2" => grad_check(
            &|p: &[Node]| Ok(p[0].max_pool2x2()?.mul(&p[0].max_pool2x2()?)?.sum_all()),
            &[detie_pool_windows(rand_t(&[1, 2, 16, 16], seed), 5e-3)],
            EPS,
            SAMPLES_PER_TENSOR,
            seed + 3,
        )?,
        "bilinear_sample" => grad_check(
            &|p: &[Node]| {
                let y = p[0].bilinear_sample(&p[1])?;
                Ok(y.mul(&y)?.sum_all())
            },
            &[
                rand_t(&[1, 3, 16, 16], seed),
                fractional_coords(&[1, 2, 16, 16], 0.3, 14.7, seed + 1),
            ],
            EPS,
            SAMPLES_PER_TENSOR,
            seed + 3,
        )?,
        "elementwise" => grad_check(
            &|p: &[Node]| {
                let prod = p[0].mul(&p[1])?;
                let mixed = prod.add(&p[0].add(&p[1])?)?;
                Ok(mixed.mul(&mixed)?.sum_all())
            },
            &[
                rand_t(&[1, 4, 16, 16], seed),
                rand_t(&[1, 1, 16, 16], seed + 1),
            ],
            EPS,
            SAMPLES_PER_TENSOR,
            seed + 3,
        )?,
        "concat_channels" => grad_check(
            &|p: &[Node]| {
                let cat = p[0].tape_handle().concat_channels(p)?;
                Ok(cat.mul(&cat)?.sum_all())
            },
            &[
                rand_t(&[1, 2, 16, 16], seed),
                rand_t(&[1, 3, 16, 16], seed + 1),
                rand_t(&[1, 1, 16, 16], seed + 2),
            ],
            EPS,
            SAMPLES_PER_TENSOR,
            seed + 3,
        )?,
        "leaky_relu" => grad_check(
            &|p: &[Node]| {
                let y = p[0].leaky_relu(0.1)?;
                Ok(y.mul(&y)?.sum_all())
            },
            &[away_from_zero(rand_t(&[1, 2, 16, 16], seed), 0.02)],
            EPS,
            SAMPLES_PER_TENSOR,
            seed + 3,
        )?,
        "upsample2x" => grad_check(
            &|p: &[Node]| {
                let y = p[0].upsample2x()?;
                Ok(y.mul(&y)?.sum_all())
            },
            &[rand_t(&[1, 2, 16, 16], seed)],
            EPS,
            SAMPLES_PER_TENSOR,
            seed + 3,
        )?,
        "warp" => grad_check(
            &|p: &[Node]| {
                let y = warp(&p[0], &p[1])?;
                Ok(y.mul(&y)?.sum_all())
            },
            &[
                rand_t(&[1, 3, 16, 16], seed),
                fractional_coords(&[1, 2, 16, 16], -2.3, 2.3, seed + 1),
            ],
            EPS,
            SAMPLES_PER_TENSOR,
            seed + 3,
        )?,
        "correlate" => grad_check(
            &|p: &[Node]| {
                let v = p[0].correlate(&p[1], 3, true)?;
                Ok(v.mul(&v)?.sum_all())
            },
            &[
                rand_t(&[1, 4, 16, 16], seed),
                rand_t(&[1, 4, 16, 16], seed + 1),
            ],
            EPS,
            SAMPLES_PER_TENSOR,
            seed + 3,
        )?,
        "repair_mask" => grad_check(
            &|p: &[Node]| {
                let (att, bias) = make_repair_masks(&p[0], &p[1], &p[2], &p[3], &p[4])?;
                let out = apply_repair(&p[5], &att, &bias, &p[6], &p[7])?;
                Ok(out.mul(&out)?.sum_all())
            },
            &[
                rand_t(&[1, 3, 16, 16], seed),      // mask source
                rand_t(&[1, 3, 1, 1], seed + 1),    // attention conv
                rand_t(&[1], seed + 2),
                rand_t(&[4, 3, 1, 1], seed + 3),    // bias conv
                rand_t(&[4], seed + 4),
                rand_t(&[1, 4, 16, 16], seed + 5),  // raw target
                rand_t(&[4, 4, 3, 3], seed + 6),    // fuse conv
                rand_t(&[4], seed + 7),
            ],
            EPS,
            SAMPLES_PER_TENSOR,
            seed + 8,
        )?,
        "rfd_down" => grad_check(
            &|p: &[Node]| {
                let y = rfd_down(&p[0], &p[1], &p[2], &p[3], &p[4])?;
                Ok(y.mul(&y)?.sum_all())
            },
            &[
                detie_pool_windows(rand_t(&[1, 3, 16, 16], seed), 5e-3),
                rand_t(&[4, 3, 1, 1], seed + 1),
                rand_t(&[4], seed + 2),
                rand_t(&[4, 3, 3, 3], seed + 3),
                rand_t(&[4], seed + 4),
            ],
            EPS,
            SAMPLES_PER_TENSOR,
            seed + 5,
        )?,
        "estimator_loss" => {
            let mut est = EstimatorConfig::new(RfpmConfig::with_channels(
                "W/R",
                &[6, 8],
                &[1],
                seed,
            )?);
            est.pred_levels = vec![2, 1];
            let store = init_model_params(&est)?;
            let img_t = rand_t(&[1, 3, 16, 16], seed + 100);
            let img_t1 = rand_t(&[1, 3, 16, 16], seed + 101);
            let gt = rand_t(&[1, 2, 16, 16], seed + 102);
            let names: Vec<String> = store.names().cloned().collect();
            let tensors: Vec<Tensor> =
                names.iter().map(|n| store.get(n).unwrap().clone()).collect();
            grad_check(
                &|p: &[Node]| {
                    let tape = p[0].tape_handle();
                    let map = names.iter().cloned().zip(p.iter().cloned()).collect();
                    let params = ParamNodes::from_map(map);
                    let flows =
                        estimate_pair(&tape.leaf(img_t.clone()), &tape.leaf(img_t1.clone()), &params, &est)?;
                    multiscale_loss(&flows, &gt, &est.pred_levels, &[0.32, 0.08])
                },
                &tensors,
                EPS,
                6,
                seed + 103,
            )?
        }
        other => {
            return Err(RfpmError::Parameter(format!(
                "unknown gradcheck op '{other}'"
            )))
        }
    };
    let threshold = if name == "estimator_loss" {
        END_TO_END_TOLERANCE
    } else {
        PER_OP_TOLERANCE
    };
    Ok(GradCheckResult {
        name: ALL_OPS.iter().find(|&&n| n == name).unwrap(),
        max_err: err,
        threshold,
    })
}

/// Runs a comma-separated op list (or `all`).
pub fn run_suite(ops: &str, seed: u64) -> Result<Vec<GradCheckResult>> {
    let names: Vec<&str> = if ops == "all" {
        ALL_OPS.to_vec()
    } else {
        ops.split(',').map(str::trim).collect()
    };
    names.into_iter().map(|n| run_op(n, seed)).collect()
}
