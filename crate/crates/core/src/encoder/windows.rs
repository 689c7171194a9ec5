//! Window partitioning, cyclic shifts and the shifted-window attention mask.
//!
//! Token grids are `[gh, gw, C]` row-major. Windows are emitted in raster
//! order of their top-left corner and tokens inside a window in raster order.

use std::sync::Arc;

use super::config::GridSpec;
use crate::error::{Error, Result};
use crate::numerics::graph::gather_rows;
use crate::numerics::{Tensor, Var};

/// Additive logit for token pairs that must not attend to each other.
pub const MASK_VALUE: f64 = -1e9;

fn check_grid(gh: usize, gw: usize, window: usize) -> Result<()> {
    if window == 0 || gh % window != 0 || gw % window != 0 {
        return Err(Error::dim(format!(
            "grid {gh}x{gw} is not divisible by window {window}"
        )));
    }
    Ok(())
}

/// Row index mapping a `[gh, gw]` grid to `[nw, window²]` windows. With
/// `shift > 0` the grid is first rolled by `(-shift, -shift)`.
pub fn partition_index(gh: usize, gw: usize, window: usize, shift: usize) -> Result<Arc<[usize]>> {
    check_grid(gh, gw, window)?;
    let mut idx = Vec::with_capacity(gh * gw);
    for wy in 0..gh / window {
        for wx in 0..gw / window {
            for iy in 0..window {
                for ix in 0..window {
                    let y = (wy * window + iy + shift) % gh;
                    let x = (wx * window + ix + shift) % gw;
                    idx.push(y * gw + x);
                }
            }
        }
    }
    Ok(idx.into())
}

/// Inverse permutation of [`partition_index`].
pub fn reverse_index(gh: usize, gw: usize, window: usize, shift: usize) -> Result<Arc<[usize]>> {
    let fwd = partition_index(gh, gw, window, shift)?;
    let mut inv = vec![0; fwd.len()];
    for (row, &src) in fwd.iter().enumerate() {
        inv[src] = row;
    }
    Ok(inv.into())
}

fn grid_dims(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [gh, gw, c] => Ok((gh, gw, c)),
        ref s => Err(Error::dim(format!("expected a [gh, gw, C] grid, got {s:?}"))),
    }
}

pub fn window_partition(tokens: &Tensor, window: usize) -> Result<Tensor> {
    let (gh, gw, c) = grid_dims(tokens)?;
    let idx = partition_index(gh, gw, window, 0)?;
    gather_rows(tokens, c, &idx, &[gh * gw / (window * window), window * window, c])
}

pub fn window_reverse(windows: &Tensor, gh: usize, gw: usize) -> Result<Tensor> {
    let (nw, np, c) = match *windows.shape() {
        [a, b, c] => (a, b, c),
        ref s => return Err(Error::dim(format!("expected [nw, n_p, C], got {s:?}"))),
    };
    let window = (np as f64).sqrt().round() as usize;
    if window * window != np || nw * np != gh * gw {
        return Err(Error::dim(format!(
            "{nw} windows of {np} patches cannot tile a {gh}x{gw} grid"
        )));
    }
    let idx = reverse_index(gh, gw, window, 0)?;
    gather_rows(windows, c, &idx, &[gh, gw, c])
}

/// `torch.roll` over the two grid axes: `out[(y + dy) mod gh] = in[y]`.
pub fn cyclic_shift(tokens: &Tensor, dy: isize, dx: isize) -> Result<Tensor> {
    let (gh, gw, c) = grid_dims(tokens)?;
    let mut idx = Vec::with_capacity(gh * gw);
    for y in 0..gh {
        for x in 0..gw {
            let sy = (y as isize - dy).rem_euclid(gh as isize) as usize;
            let sx = (x as isize - dx).rem_euclid(gw as isize) as usize;
            idx.push(sy * gw + sx);
        }
    }
    gather_rows(tokens, c, &idx, &[gh, gw, c])
}

/// Additive `[nw, n_p, n_p]` mask for attention over windows of the grid
/// rolled by `(-shift, -shift)`: 0 between tokens of the same pre-roll
/// region and [`MASK_VALUE`] otherwise. `shift == 0` gives all zeros.
pub fn shifted_window_mask(gh: usize, gw: usize, window: usize, shift: usize) -> Result<Tensor> {
    if shift >= window {
        return Err(Error::config(format!("shift {shift} must be smaller than window {window}")));
    }
    check_grid(gh, gw, window)?;
    let np = window * window;
    let nw = gh * gw / np;
    if shift == 0 {
        return Ok(Tensor::zeros(&[nw, np, np]));
    }
    let region = |v: usize, n: usize| {
        if v < n - window {
            0
        } else if v < n - shift {
            1
        } else {
            2
        }
    };
    let mut labels = Vec::with_capacity(gh * gw);
    for wy in 0..gh / window {
        for wx in 0..gw / window {
            for iy in 0..window {
                for ix in 0..window {
                    let (y, x) = (wy * window + iy, wx * window + ix);
                    labels.push(region(y, gh) * 3 + region(x, gw));
                }
            }
        }
    }
    let mut mask = vec![0.0; nw * np * np];
    for w in 0..nw {
        let lw = &labels[w * np..(w + 1) * np];
        for i in 0..np {
            for j in 0..np {
                if lw[i] != lw[j] {
                    mask[(w * np + i) * np + j] = MASK_VALUE;
                }
            }
        }
    }
    Tensor::new(vec![nw, np, np], mask)
}

/// Graph-side partition (with optional roll) into `[nw, n_p, C]`.
pub fn partition_var<'g>(tokens: &Var<'g>, spec: GridSpec, shifted: bool) -> Result<Var<'g>> {
    let c = *tokens.shape().last().unwrap_or(&0);
    let shift = if shifted { spec.shift } else { 0 };
    let idx = partition_index(spec.height, spec.width, spec.window, shift)?;
    tokens.gather_rows(c, idx, &[spec.num_windows(), spec.window_patches(), c])
}

/// Graph-side inverse of [`partition_var`].
pub fn reverse_var<'g>(windows: &Var<'g>, spec: GridSpec, shifted: bool) -> Result<Var<'g>> {
    let c = *windows.shape().last().unwrap_or(&0);
    let shift = if shifted { spec.shift } else { 0 };
    let idx = reverse_index(spec.height, spec.width, spec.window, shift)?;
    windows.gather_rows(c, idx, &[spec.height, spec.width, c])
}
