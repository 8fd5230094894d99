//! Shared layer helpers for the small convolutional networks.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::numerics::{Graph, ParamStore, Tensor, Var};

pub(crate) fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
}

/// Registers `name.w: [cout, cin, k, k]` (and `name.b` when `bias`) with
/// fan-in scaled normal weights times `gain`.
pub(crate) fn add_conv(
    store: &mut ParamStore,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    bias: bool,
    gain: f64,
    rng: &mut impl Rng,
) -> Result<()> {
    let std = gain * (1.0 / (cin * k * k) as f64).sqrt();
    store.insert(format!("{name}.w"), normal(&[cout, cin, k, k], std, rng))?;
    if bias {
        store.insert(format!("{name}.b"), Tensor::zeros(&[cout]))?;
    }
    Ok(())
}

pub(crate) fn conv(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b_name = format!("{name}.b");
    let b = if store.contains(&b_name) {
        Some(g.param(store, &b_name)?)
    } else {
        None
    };
    g.conv2d(x, w, b)
}

/// Registers `name.w: [out, inp]` and `name.b: [out]`.
pub(crate) fn add_linear(
    store: &mut ParamStore,
    name: &str,
    out: usize,
    inp: usize,
    gain: f64,
    rng: &mut impl Rng,
) -> Result<()> {
    let std = gain * (1.0 / inp as f64).sqrt();
    store.insert(format!("{name}.w"), normal(&[out, inp], std, rng))?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[out]))?;
    Ok(())
}

pub(crate) fn linear(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    g.linear(x, w, Some(b))
}

/// Residual gated block `x + conv(gate(conv(x)))` with `c` channels.
/// `out_gain = 0` starts the block as the identity.
pub(crate) fn add_gated_block(
    store: &mut ParamStore,
    prefix: &str,
    c: usize,
    bias: bool,
    out_gain: f64,
    rng: &mut impl Rng,
) -> Result<()> {
    add_conv(store, &format!("{prefix}.expand"), 2 * c, c, 3, bias, 1.0, rng)?;
    add_conv(store, &format!("{prefix}.project"), c, c, 3, bias, out_gain, rng)
}

/// Applies the block body to `u` and adds the result to `skip`.
pub(crate) fn gated_block(g: &mut Graph, store: &ParamStore, prefix: &str, skip: Var, u: Var) -> Result<Var> {
    let h = conv(g, store, &format!("{prefix}.expand"), u)?;
    let h = g.gate(h)?;
    let h = conv(g, store, &format!("{prefix}.project"), h)?;
    g.add(skip, h)
}

/// Registers a `levels`-deep U-Net of gated blocks on `cin` input
/// channels: `prefix.in`, `prefix.enc{i}`, `prefix.down{i}`, `prefix.up{i}`,
/// `prefix.dec{i}`, `prefix.out`. Block outputs and `prefix.out` start at
/// zero, so the network initially outputs zero.
pub(crate) fn add_unet(
    store: &mut ParamStore,
    prefix: &str,
    cin: usize,
    width: usize,
    levels: usize,
    bias: bool,
    rng: &mut impl Rng,
) -> Result<()> {
    add_conv(store, &format!("{prefix}.in"), width, cin, 3, bias, 1.0, rng)?;
    for i in 0..levels {
        let c = width << i;
        add_gated_block(store, &format!("{prefix}.enc{i}"), c, bias, 0.0, rng)?;
        if i + 1 < levels {
            add_conv(store, &format!("{prefix}.down{i}"), 2 * c, c, 1, bias, 1.0, rng)?;
            add_conv(store, &format!("{prefix}.up{i}"), c, 2 * c, 1, bias, 1.0, rng)?;
            add_gated_block(store, &format!("{prefix}.dec{i}"), c, bias, 0.0, rng)?;
        }
    }
    add_conv(store, &format!("{prefix}.out"), 1, width, 3, bias, 0.0, rng)
}

/// Applies the U-Net registered by [`add_unet`] to `x: [B, cin, H, W]`.
pub(crate) fn unet(g: &mut Graph, store: &ParamStore, prefix: &str, levels: usize, x: Var) -> Result<Var> {
    let mut h = conv(g, store, &format!("{prefix}.in"), x)?;
    let mut skips = Vec::new();
    for i in 0..levels {
        h = gated_block(g, store, &format!("{prefix}.enc{i}"), h, h)?;
        if i + 1 < levels {
            skips.push(h);
            h = g.mean_pool2(h)?;
            h = conv(g, store, &format!("{prefix}.down{i}"), h)?;
        }
    }
    for i in (0..levels.saturating_sub(1)).rev() {
        h = g.upsample2(h)?;
        h = conv(g, store, &format!("{prefix}.up{i}"), h)?;
        h = g.add(h, skips[i])?;
        h = gated_block(g, store, &format!("{prefix}.dec{i}"), h, h)?;
    }
    conv(g, store, &format!("{prefix}.out"), h)
}

/// Stacks `[H, W]` or `[B, H, W]` images into `[B, 1, H, W]`.
pub(crate) fn as_batch(x: &Tensor) -> Result<Tensor> {
    match *x.shape() {
        [h, w] => x.clone().reshape(&[1, 1, h, w]),
        [b, h, w] => x.clone().reshape(&[b, 1, h, w]),
        [_, 1, _, _] => Ok(x.clone()),
        _ => crate::error::shape_err(format!("expected [H,W], [B,H,W] or [B,1,H,W], got {:?}", x.shape())),
    }
}
