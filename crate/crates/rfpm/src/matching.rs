//! Warping and windowed correlation producing the matching cost volume.

use crate::autodiff::Node;
use crate::error::{Result, RfpmError};
use crate::tensor::Tensor;

/// Default displacement search radius in pixels.
pub const DEFAULT_CORR_RADIUS: usize = 3;

/// Identity sampling grid: channel 0 holds x, channel 1 holds y.
pub fn identity_grid(batch: usize, h: usize, w: usize) -> Tensor {
    let mut grid = Tensor::zeros(&[batch, 2, h, w]);
    for b in 0..batch {
        for y in 0..h {
            for x in 0..w {
                grid.set4(b, 0, y, x, x as f64);
                grid.set4(b, 1, y, x, y as f64);
            }
        }
    }
    grid
}

/// Backward-warps `feature` by `flow`: output(x,y) samples the feature map
/// at (x+u, y+v) with bilinear interpolation and zero padding outside.
///
/// `flow` is (B,2,H,W) in pixels at the feature map's own resolution.
pub fn warp(feature: &Node, flow: &Node) -> Result<Node> {
    let fs = feature.shape();
    let ls = flow.shape();
    if fs.len() != 4 || ls.len() != 4 || ls[1] != 2 || fs[0] != ls[0] || fs[2] != ls[2] || fs[3] != ls[3]
    {
        return Err(RfpmError::Shape(format!(
            "warp: feature {fs:?} and flow {ls:?} are incompatible"
        )));
    }
    let tape = feature.tape_handle();
    let grid = tape.leaf(identity_grid(fs[0], fs[2], fs[3]));
    let coords = grid.add(flow)?;
    feature.bilinear_sample(&coords)
}

/// Correlation cost volume over displacements `(-d..=d)^2`.
///
/// Channel `(dy+d)*(2d+1) + (dx+d)` holds the (optionally channel-normalized)
/// dot product of `f1` at (x,y) with `f2` at (x+dx, y+dy); out-of-range
/// offsets contribute zero. The center channel sits at index `2d(d+1)`.
pub fn correlate(f1: &Node, f2: &Node, radius: usize, normalize: bool) -> Result<Node> {
    f1.correlate(f2, radius, normalize)
}

/// Eq-style composition: correlate the frame-t features with the warped
/// frame-t+1 features.
pub fn cost_volume(
    f_t: &Node,
    f_t1: &Node,
    flow: &Node,
    radius: usize,
    normalize: bool,
) -> Result<Node> {
    let warped = warp(f_t1, flow)?;
    correlate(f_t, &warped, radius, normalize)
}

/// Center channel index of a `(2d+1)^2`-channel cost volume.
pub fn center_channel(radius: usize) -> usize {
    2 * radius * (radius + 1)
}
