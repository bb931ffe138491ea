"""Finite-difference verification of every differentiable operation.

Each op is checked on several random shapes at float64 with central
differences; inputs for kinked ops (relu, abs, clamp) are kept away from
their kinks. The combined check drives a tiny end-to-end network through
the full training objective and spot-checks parameter gradients.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import losses as losses_mod
from . import priors as priors_mod
from . import signet as signet_mod
from . import synthgen
from .autodiff import BatchNormState, gradcheck

DEFAULT_TOL = 1e-4
COMBINED_TOL = 1e-3


def _away_from_zero(rng, shape, low=0.1, high=1.0):
    mag = rng.uniform(low, high, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return mag * sign


def _op_cases(seed: int = 0):
    """Yield (name, fn, input_arrays) gradcheck cases, >= 5 shapes per op."""
    rng = np.random.default_rng([seed, 0xC0])
    cases = []

    conv_shapes = [(1, 2, 5, 5, 3, 3, 1, 1), (2, 1, 6, 6, 3, 2, 2, 1),
                   (1, 3, 5, 4, 1, 2, 1, 0), (2, 2, 7, 5, 3, 1, 1, 0),
                   (1, 2, 6, 6, 4, 3, 2, 1)]
    for n, c, h, w, k, cout, stride, pad in conv_shapes:
        x = rng.standard_normal((n, c, h, w))
        wgt = rng.standard_normal((cout, c, k, k)) * 0.5
        b = rng.standard_normal(cout) * 0.1
        cases.append((f"conv2d[{n}x{c}x{h}x{w},k{k},s{stride}]",
                      lambda xx, ww, bb, s=stride, p=pad: ad.conv2d(xx, ww, bb, stride=s, pad=p),
                      [x, wgt, b]))

    deconv_shapes = [(1, 2, 3, 3, 4, 2, 2, 1), (2, 1, 4, 3, 4, 2, 2, 1),
                     (1, 3, 3, 4, 4, 1, 2, 1), (1, 2, 4, 4, 3, 2, 1, 1),
                     (2, 2, 3, 3, 4, 3, 2, 0)]
    for n, c, h, w, k, cout, stride, pad in deconv_shapes:
        x = rng.standard_normal((n, c, h, w))
        wgt = rng.standard_normal((c, cout, k, k)) * 0.5
        b = rng.standard_normal(cout) * 0.1
        cases.append((f"deconv2d[{n}x{c}x{h}x{w},k{k},s{stride}]",
                      lambda xx, ww, bb, s=stride, p=pad: ad.deconv2d(xx, ww, bb, stride=s, pad=p),
                      [x, wgt, b]))

    bn_shapes = [(2, 2, 3, 3), (1, 3, 4, 4), (3, 1, 2, 5), (2, 4, 3, 2), (4, 2, 2, 2)]
    for i, shape in enumerate(bn_shapes):
        c = shape[1]
        x = rng.standard_normal(shape)
        gamma = rng.uniform(0.5, 1.5, c)
        beta = rng.standard_normal(c) * 0.2
        mode = "train" if i % 2 == 0 else "eval"
        state = BatchNormState(c, dtype=np.float64)
        state.mean = rng.standard_normal(c) * 0.1
        state.var = rng.uniform(0.5, 1.5, c)
        cases.append((f"batchnorm2d[{mode},{shape}]",
                      lambda xx, gg, bb, st=state, m=mode: ad.batchnorm2d(xx, gg, bb, st, mode=m),
                      [x, gamma, beta]))

    unary_shapes = [(1, 1, 3, 3), (2, 2, 2, 2), (1, 3, 4, 2), (3, 1, 2, 4), (2, 2, 5, 3)]
    for shape in unary_shapes:
        safe = _away_from_zero(rng, shape)
        smooth = rng.standard_normal(shape)
        cases.append((f"relu{shape}", ad.relu, [safe]))
        cases.append((f"sigmoid{shape}", ad.sigmoid, [smooth]))
        cases.append((f"abs{shape}", ad.abs_t, [safe]))
        cases.append((f"clamp_min{shape}",
                      lambda xx: ad.clamp_min(xx, 0.05), [safe]))
        cases.append((f"channel_sum{shape}", ad.channel_sum, [smooth]))
        cases.append((f"sum_all{shape}", ad.sum_all, [smooth]))
        cases.append((f"add_scalar{shape}", lambda xx: ad.add_scalar(xx, 0.7), [smooth]))
        cases.append((f"mul_scalar{shape}", lambda xx: ad.mul_scalar(xx, -1.3), [smooth]))
        cases.append((f"forward_diff_w{shape}", lambda xx: ad.forward_diff(xx, "w"), [smooth]))
        cases.append((f"forward_diff_h{shape}", lambda xx: ad.forward_diff(xx, "h"), [smooth]))

    binary_shapes = [(1, 2, 3, 3), (2, 1, 4, 2), (1, 3, 2, 5), (2, 2, 3, 2), (1, 4, 2, 2)]
    for shape in binary_shapes:
        a = rng.standard_normal(shape)
        b = rng.standard_normal(shape)
        den = _away_from_zero(rng, shape, low=0.4, high=1.5)
        cases.append((f"add{shape}", ad.add, [a, b]))
        cases.append((f"sub{shape}", ad.sub, [a, b]))
        cases.append((f"mul{shape}", ad.mul, [a, b]))
        cases.append((f"div{shape}", ad.div, [a, den]))
        cases.append((f"mse{shape}", ad.mse, [a, b]))
        one_ch = rng.standard_normal((shape[0], 1) + shape[2:])
        cases.append((f"mul_bcast{shape}", ad.mul, [a, one_ch]))
        den1 = _away_from_zero(rng, (shape[0], 1) + shape[2:], low=0.4, high=1.5)
        cases.append((f"div_bcast{shape}", ad.div, [a, den1]))

    concat_shapes = [((1, 2, 3, 3), (1, 1, 3, 3)), ((2, 1, 2, 2), (2, 3, 2, 2)),
                     ((1, 2, 4, 2), (1, 2, 4, 2)), ((1, 1, 2, 3), (1, 4, 2, 3)),
                     ((2, 2, 2, 2), (2, 1, 2, 2))]
    for sa, sb in concat_shapes:
        a = rng.standard_normal(sa)
        b = rng.standard_normal(sb)
        cases.append((f"concat[{sa[1]}+{sb[1]}ch]",
                      lambda aa, bb: ad.concat([aa, bb]), [a, b]))

    down_shapes = [(1, 1, 4, 4), (2, 2, 2, 2), (1, 3, 6, 4), (2, 1, 4, 6), (1, 2, 8, 2)]
    for shape in down_shapes:
        cases.append((f"downsample2x{shape}", ad.downsample2x,
                      [rng.standard_normal(shape)]))

    att_shapes = [(1, 2, 3, 3), (2, 1, 2, 4), (1, 3, 4, 2), (2, 2, 2, 2), (1, 1, 5, 3)]
    for shape in att_shapes:
        gate = rng.standard_normal(shape)
        x = rng.standard_normal(shape)
        cases.append((f"attention{shape}", signet_mod.attention, [gate, x]))
        proj_w = rng.standard_normal((shape[1], 1, 1, 1)) * 0.5
        gate1 = rng.standard_normal((shape[0], 1) + shape[2:])
        cases.append((f"attention_proj{shape}",
                      lambda gg, xx, ww: signet_mod.attention(ad.conv2d(gg, ww), xx),
                      [gate1, x, proj_w]))

    dssim_shapes = [(1, 1, 12, 12), (1, 2, 11, 12), (1, 1, 13, 11),
                    (1, 3, 11, 11), (2, 1, 12, 11)]
    for shape in dssim_shapes:
        x = rng.uniform(0.05, 0.95, shape)
        y = np.clip(x + rng.standard_normal(shape) * 0.1, 0.0, 1.0)
        cases.append((f"dssim_loss{shape}", losses_mod.dssim_loss, [x, y]))

    return cases


def run_op_checks(tol: float = DEFAULT_TOL, seed: int = 0) -> list[dict]:
    rows = []
    for name, fn, arrays in _op_cases(seed):
        err = gradcheck(fn, arrays, seed=seed)
        rows.append({"name": name, "max_rel_error": err, "passed": err <= tol})
    return rows


def run_loss_checks(tol: float = DEFAULT_TOL, seed: int = 1) -> list[dict]:
    """Gradchecks through the segment-constraint losses."""
    rows = []
    cfg = synthgen.SynthConfig(size=32, n_regions=4, seed=99, wall_ceiling_prob=0.8)
    sample = synthgen.sample_scene(cfg, 0)
    segmaps = [sample.segments]
    rng = np.random.default_rng([seed, 3])
    image = sample.image.data.transpose(2, 0, 1)[None].astype(np.float64)
    pred0 = np.clip(image + rng.standard_normal(image.shape) * 0.1, 0.05, 1.0)

    err = gradcheck(lambda p: losses_mod.norm_invariance_loss(p, image, segmaps), [pred0], seed=seed)
    rows.append({"name": "norm_invariance_loss", "max_rel_error": err, "passed": err <= tol})

    gt_r = sample.reflectance.data.transpose(2, 0, 1)[None].astype(np.float64)
    err = gradcheck(lambda p: losses_mod.tv_loss(p, gt_r, segmaps), [pred0], seed=seed)
    rows.append({"name": "tv_loss", "max_rel_error": err, "passed": err <= tol})
    return rows


def _float64_net(cfg: signet_mod.ModelConfig, jitter_seed: int | None = None) -> signet_mod.SigNet:
    net = signet_mod.build(cfg)
    rng = np.random.default_rng(jitter_seed) if jitter_seed is not None else None
    for p in net.params.values():
        values = p.values.astype(np.float64)
        if rng is not None:
            # move off the exact-zero init so no pre-activation sits on a
            # relu kink (finite differences are invalid at kinks)
            values = values + rng.normal(0.0, 0.02, size=values.shape)
        p.tensor.values = values
    for state in net.bn_states.values():
        state.mean = state.mean.astype(np.float64)
        state.var = state.var.astype(np.float64)
    return net


def run_combined_check(n_coords: int = 40, h: float = 1e-5, seed: int = 2,
                       tol: float = COMBINED_TOL) -> dict:
    """End-to-end gradient spot-check through total_loss on a tiny net.

    Samples parameter coordinates across all layers and compares backward
    gradients against central finite differences of the full objective.
    """
    scfg = synthgen.SynthConfig(size=32, n_regions=4, seed=7, wall_ceiling_prob=0.6)
    sample = synthgen.sample_scene(scfg, 0)
    mcfg = signet_mod.ModelConfig(base_width=4, input_size=32, seed=5)
    net = _float64_net(mcfg, jitter_seed=seed)

    bundle = priors_mod.compute_bundle(sample.image, sample.segments)
    inputs = {k: v.astype(np.float64)
              for k, v in signet_mod.make_inputs(sample.image, sample.segments, bundle, mcfg).items()}
    batch = [{
        "inputs": inputs,
        "gt_r": sample.reflectance.data.transpose(2, 0, 1).astype(np.float64),
        "gt_s": sample.shading.data[None].astype(np.float64),
        "image": sample.image.data.transpose(2, 0, 1).astype(np.float64),
        "pyramid": [lvl.data[None].astype(np.float64)
                    for lvl in priors_mod.canny_edge_pyramid(sample.reflectance)],
        "segments": sample.segments,
    }]

    def objective() -> losses_mod.LossReport:
        return signet_mod._batch_losses(net, batch, "eval", losses_mod.LossWeights())

    report = objective()
    report.tensor.backward()
    analytic = {name: (p.tensor.grad.copy() if p.tensor.grad is not None else
                       np.zeros_like(p.values))
                for name, p in net.params.items()}
    for p in net.params.values():
        p.tensor.grad = None

    rng = np.random.default_rng([seed, 0xF1])
    names = list(net.params.keys())
    worst = 0.0
    for _ in range(n_coords):
        name = names[rng.integers(0, len(names))]
        p = net.params[name]
        flat = p.tensor.values.ravel()
        idx = int(rng.integers(0, flat.size))
        orig = flat[idx]
        flat[idx] = orig + h
        plus = objective().total
        flat[idx] = orig - h
        minus = objective().total
        flat[idx] = orig
        numeric = (plus - minus) / (2.0 * h)
        err = abs(analytic[name].ravel()[idx] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return {"name": "total_loss[tiny net]", "max_rel_error": worst, "passed": worst <= tol}


def run_all(seed: int = 0) -> list[dict]:
    rows = run_op_checks(seed=seed)
    rows.extend(run_loss_checks(seed=seed + 1))
    rows.append(run_combined_check(seed=seed + 2))
    return rows
