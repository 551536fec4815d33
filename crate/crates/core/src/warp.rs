//! Backward (gather) warping with bilinear sampling and border clamping, and the
//! occlusion-mask compositing used by the generator.

use vidsynth_tensor::{Float, Tensor};

use crate::error::{contract, Error, Result};

struct Tap {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    ax: f64,
    ay: f64,
    // Whether the sample coordinate was inside the image (else its derivative is zero).
    gx: bool,
    gy: bool,
}

#[inline]
fn tap(x: usize, y: usize, u: f64, v: f64, w: usize, h: usize) -> Tap {
    let (sx, gx) = clamp_coord(x as f64 + u, w);
    let (sy, gy) = clamp_coord(y as f64 + v, h);
    let x0 = sx.floor() as usize;
    let y0 = sy.floor() as usize;
    Tap {
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        ax: sx - x0 as f64,
        ay: sy - y0 as f64,
        gx,
        gy,
    }
}

#[inline]
fn clamp_coord(s: f64, n: usize) -> (f64, bool) {
    let hi = (n - 1) as f64;
    if s <= 0.0 {
        (0.0, s == 0.0 && n > 1)
    } else if s >= hi {
        (hi, false)
    } else {
        (s, true)
    }
}

fn check_pair(input: &[usize], flow: &[usize]) -> Result<()> {
    if input.len() != 4 || flow.len() != 4 {
        return contract(format!("warp expects 4-D tensors, got {input:?} and {flow:?}"));
    }
    if flow[1] != 2 || input[0] != flow[0] || input[2] != flow[2] || input[3] != flow[3] {
        return contract(format!(
            "warp size mismatch: input {input:?}, flow {flow:?} (flow must be [N, 2, H, W])"
        ));
    }
    Ok(())
}

/// `out(p) = input(p + flow(p))`, bilinear, with sample coordinates clamped to the image.
/// Differentiable in both arguments.
pub fn warp<T: Float>(input: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    check_pair(input.shape(), flow.shape())?;
    let (n, c, h, w) = input.dims4()?;
    let plane = h * w;
    let src = input.data();
    let fl = flow.data();
    let mut out = vec![T::zero(); n * c * plane];
    for b in 0..n {
        let fb = &fl[b * 2 * plane..(b + 1) * 2 * plane];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let t = tap(x, y, fb[p].as_f64(), fb[plane + p].as_f64(), w, h);
                let (ax, ay) = (T::lit(t.ax), T::lit(t.ay));
                let (bx, by) = (T::one() - ax, T::one() - ay);
                for ch in 0..c {
                    let img = &src[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                    let top = bx * img[t.y0 * w + t.x0] + ax * img[t.y0 * w + t.x1];
                    let bot = bx * img[t.y1 * w + t.x0] + ax * img[t.y1 * w + t.x1];
                    out[(b * c + ch) * plane + p] = by * top + ay * bot;
                }
            }
        }
    }
    let (src_t, flow_t) = (input.clone(), flow.clone());
    Ok(Tensor::from_op(
        input.shape().to_vec(),
        out,
        vec![input.clone(), flow.clone()],
        move |needs: &[bool], _out: &[T], g: &[T]| {
            let src = src_t.data();
            let fl = flow_t.data();
            let mut gi = needs[0].then(|| vec![T::zero(); n * c * plane]);
            let mut gf = needs[1].then(|| vec![T::zero(); n * 2 * plane]);
            for b in 0..n {
                let fb = &fl[b * 2 * plane..(b + 1) * 2 * plane];
                for y in 0..h {
                    for x in 0..w {
                        let p = y * w + x;
                        let t = tap(x, y, fb[p].as_f64(), fb[plane + p].as_f64(), w, h);
                        let (ax, ay) = (T::lit(t.ax), T::lit(t.ay));
                        let (bx, by) = (T::one() - ax, T::one() - ay);
                        let (mut du, mut dv) = (T::zero(), T::zero());
                        for ch in 0..c {
                            let base = (b * c + ch) * plane;
                            let go = g[base + p];
                            if let Some(gi) = gi.as_mut() {
                                gi[base + t.y0 * w + t.x0] += by * bx * go;
                                gi[base + t.y0 * w + t.x1] += by * ax * go;
                                gi[base + t.y1 * w + t.x0] += ay * bx * go;
                                gi[base + t.y1 * w + t.x1] += ay * ax * go;
                            }
                            if gf.is_some() {
                                let img = &src[base..base + plane];
                                let (i00, i01) = (img[t.y0 * w + t.x0], img[t.y0 * w + t.x1]);
                                let (i10, i11) = (img[t.y1 * w + t.x0], img[t.y1 * w + t.x1]);
                                if t.gx {
                                    du += go * (by * (i01 - i00) + ay * (i11 - i10));
                                }
                                if t.gy {
                                    dv += go * (bx * (i10 - i00) + ax * (i11 - i01));
                                }
                            }
                        }
                        if let Some(gf) = gf.as_mut() {
                            gf[b * 2 * plane + p] += du;
                            gf[b * 2 * plane + plane + p] += dv;
                        }
                    }
                }
            }
            vec![gi, gf]
        },
    ))
}

fn check_mask<T: Float>(mask: &Tensor<T>, binary: bool) -> Result<()> {
    for &v in mask.data() {
        let v = v.as_f64();
        let ok = if binary {
            v == 0.0 || v == 1.0
        } else {
            (0.0..=1.0).contains(&v)
        };
        if !ok {
            return Err(Error::MaskRange { value: v });
        }
    }
    Ok(())
}

fn blend_shapes(a: &[usize], b: &[usize], m: &[usize]) -> Result<(usize, usize, usize)> {
    if a != b || a.len() != 4 || m.len() != 4 || m[0] != a[0] || m[2..] != a[2..] {
        return contract(format!("compose shape mismatch: {a:?}, {b:?}, mask {m:?}"));
    }
    if m[1] != 1 && m[1] != a[1] {
        return contract(format!("mask must have 1 or {} channels, got {}", a[1], m[1]));
    }
    Ok((a[0], a[1], a[2] * a[3]))
}

/// `(1 - m) * a + m * b`, with the mask broadcast over channels when it has one channel.
fn blend<T: Float>(a: &Tensor<T>, b: &Tensor<T>, m: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, plane) = blend_shapes(a.shape(), b.shape(), m.shape())?;
    let mc = m.shape()[1];
    let midx = move |bi: usize, ch: usize, p: usize| (bi * mc + if mc == 1 { 0 } else { ch }) * plane + p;
    let (ad, bd, md) = (a.data(), b.data(), m.data());
    let mut out = vec![T::zero(); ad.len()];
    for bi in 0..n {
        for ch in 0..c {
            for p in 0..plane {
                let i = (bi * c + ch) * plane + p;
                let mv = md[midx(bi, ch, p)];
                out[i] = (T::one() - mv) * ad[i] + mv * bd[i];
            }
        }
    }
    let (at, bt, mt) = (a.clone(), b.clone(), m.clone());
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone(), m.clone()],
        move |needs: &[bool], _: &[T], g: &[T]| {
            let (ad, bd, md) = (at.data(), bt.data(), mt.data());
            let mut ga = needs[0].then(|| vec![T::zero(); ad.len()]);
            let mut gb = needs[1].then(|| vec![T::zero(); bd.len()]);
            let mut gm = needs[2].then(|| vec![T::zero(); md.len()]);
            for bi in 0..n {
                for ch in 0..c {
                    for p in 0..plane {
                        let i = (bi * c + ch) * plane + p;
                        let j = midx(bi, ch, p);
                        let mv = md[j];
                        if let Some(ga) = ga.as_mut() {
                            ga[i] = (T::one() - mv) * g[i];
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[i] = mv * g[i];
                        }
                        if let Some(gm) = gm.as_mut() {
                            gm[j] += g[i] * (bd[i] - ad[i]);
                        }
                    }
                }
            }
            vec![ga, gb, gm]
        },
    ))
}

/// `(1 - m) * warped + m * hallucinated`. Rejects masks outside `[0, 1]`.
pub fn compose<T: Float>(
    warped: &Tensor<T>,
    hallucinated: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<Tensor<T>> {
    blend_shapes(warped.shape(), hallucinated.shape(), mask.shape())?;
    check_mask(mask, false)?;
    blend(warped, hallucinated, mask)
}

/// `(1 - m) * warped + m * ((1 - m_B) * h_fg + m_B * h_bg)`; `bg_mask` must be binary.
pub fn compose_fg_bg<T: Float>(
    warped: &Tensor<T>,
    h_fg: &Tensor<T>,
    h_bg: &Tensor<T>,
    mask: &Tensor<T>,
    bg_mask: &Tensor<T>,
) -> Result<Tensor<T>> {
    blend_shapes(h_fg.shape(), h_bg.shape(), bg_mask.shape())?;
    check_mask(bg_mask, true)?;
    let hallucinated = blend(h_fg, h_bg, bg_mask)?;
    compose(warped, &hallucinated, mask)
}

/// Resamples a flow field by the rational factor `num / den` (nearest upsampling by `num`,
/// then block averaging by `den`) and multiplies displacements by the same factor.
pub fn rescale_flow<T: Float>(flow: &Tensor<T>, num: usize, den: usize) -> Result<Tensor<T>> {
    let (_, c, h, w) = flow.dims4()?;
    if c != 2 {
        return contract(format!("flow must have 2 channels, got {c}"));
    }
    if num == 0 || den == 0 || (h * num) % den != 0 || (w * num) % den != 0 {
        return contract(format!(
            "rescaling {w}x{h} by {num}/{den} does not give integer dimensions"
        ));
    }
    if num == den {
        return Ok(flow.clone());
    }
    let up = flow.upsample_nearest2d(num)?;
    Ok(up.avg_pool2d(den)?.scale(num as f64 / den as f64))
}

/// Chains two target-to-source flows: `first` maps frame b onto a, `second` maps c onto b.
/// The result maps c onto a: `second + warp(first, second)`.
pub fn compose_flows<T: Float>(first: &Tensor<T>, second: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(second.add(&warp(first, second)?)?)
}

/// Flow from frame `start + len` back to frame `start` through consecutive flows
/// `flows[start..start + len]`.
pub fn chain_flows<T: Float>(flows: &[Tensor<T>], start: usize, len: usize) -> Result<Tensor<T>> {
    if len == 0 || start + len > flows.len() {
        return contract(format!(
            "cannot chain flows {start}..{} of {}",
            start + len,
            flows.len()
        ));
    }
    let mut acc = flows[start].clone();
    for f in &flows[start + 1..start + len] {
        acc = compose_flows(&acc, f)?;
    }
    Ok(acc)
}

/// Mean of `|a - b|` over pixels where `valid` is 1 (channels averaged too).
/// Returns 0 when no pixel is valid.
pub fn masked_l1<T: Float>(a: &Tensor<T>, b: &Tensor<T>, valid: &Tensor<T>) -> Result<f64> {
    let (n, c, plane) = blend_shapes(a.shape(), b.shape(), valid.shape())?;
    if valid.shape()[1] != 1 {
        return contract("validity must have one channel");
    }
    let (ad, bd, vd) = (a.data(), b.data(), valid.data());
    let (mut acc, mut count) = (0.0, 0usize);
    for bi in 0..n {
        for p in 0..plane {
            if vd[bi * plane + p].as_f64() > 0.5 {
                for ch in 0..c {
                    let i = (bi * c + ch) * plane + p;
                    acc += (ad[i] - bd[i]).abs().as_f64();
                }
                count += c;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { acc / count as f64 })
}
