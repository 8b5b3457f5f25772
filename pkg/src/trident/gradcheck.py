"""Central-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, detect_anomaly, kink_monitor, precision


@dataclass
class GradCheckResult:
    max_rel_err: float
    n_checked: int
    excluded: list = field(default_factory=list)  # (input index, flat coordinate)
    worst: tuple | None = None

    def __float__(self):
        return self.max_rel_err


def _signature(log):
    return [s.copy() for s in log]


def _same_pattern(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def gradient_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckResult:
    """Compare tape gradients of scalar ``f(*inputs)`` with central differences.

    All inputs are promoted to float64 and evaluated in 64-bit mode. The
    relative error per coordinate is
    ``|analytic - fd| / max(|analytic|, |fd|, 1e-8)``. Coordinates whose
    +step and -step evaluations give any relu input a different sign (zero
    counts as its own sign) straddle a kink; they are excluded and listed in
    ``excluded``. ``max_coords`` randomly subsamples coordinates per input.
    """
    rng = np.random.default_rng(seed)
    with precision(np.float64), detect_anomaly():
        for t in inputs:
            t.data = np.asarray(t.data, dtype=np.float64)
            t.requires_grad = True
            t.grad = None
        with Tape() as tape:
            out = f(*inputs)
        if out.size != 1:
            raise ValueError("gradient_check needs a scalar-valued function")
        tape.backward(out)
        analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

        worst, worst_at, n_checked, excluded = 0.0, None, 0, []
        for k, t in enumerate(inputs):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
            for c in coords:
                orig = flat[c]
                flat[c] = orig + step
                with kink_monitor() as log:
                    fp = float(f(*inputs).data)
                plus = _signature(log)
                flat[c] = orig - step
                with kink_monitor() as log:
                    fm = float(f(*inputs).data)
                minus = _signature(log)
                flat[c] = orig
                if not _same_pattern(plus, minus):
                    excluded.append((k, int(c)))
                    continue
                fd = (fp - fm) / (2 * step)
                a = analytic[k].reshape(-1)[c]
                err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
                n_checked += 1
                if err > worst:
                    worst, worst_at = err, (k, int(c), float(a), float(fd))
        for t in inputs:
            t.grad = None
    return GradCheckResult(float(worst), n_checked, excluded, worst_at)


# ---------------------------------------------------------------- suite


def _toy_block(seed):
    from .model import PRESETS, TridentBlock

    cfg = PRESETS["toy"]
    rng = np.random.default_rng(seed)
    block = TridentBlock(cfg, rng)
    main = Tensor._wrap(rng.normal(size=(1, 5, 4, cfg.channels)))
    tg = Tensor._wrap(rng.normal(size=(1, cfg.tokens_t, 4, cfg.channels)))
    fg = Tensor._wrap(rng.normal(size=(1, cfg.tokens_f, 5, cfg.channels)))
    # The readout is scaled so the median gradient is a few 1e-6: the 1e-8
    # floor of the error measure then sits ~2.5 decades below typical
    # gradients, and the near-zero ones (key biases and key-side code rows,
    # which softmax ignores, and slow positional channels that are flat over
    # a handful of positions) are compared in absolute terms instead of
    # against difference round-off.
    w = [rng.normal(size=t.shape) * (1e-2 / t.size) for t in (main, tg, fg)]

    def f(main, tg, fg, *params):
        m, t, g = block(main, tg, fg)
        return (m * w[0]).sum() + (t * w[1]).sum() + (g * w[2]).sum()

    return f, [main, tg, fg] + block.parameters()


def primitive_cases(seed=0, max_extent=6):
    """``{name: (f, inputs)}`` for every differentiable primitive at random small shapes."""
    from . import signal as sig
    from . import tensor as T

    rng = np.random.default_rng(seed)

    def ext(lo=1):
        return int(rng.integers(lo, max_extent + 1))

    def arr(*shape, positive=False, away=0.0):
        x = rng.normal(size=shape)
        if positive:
            return Tensor._wrap(np.abs(x) + 0.5)
        if away:
            x = np.where(np.abs(x) < away, np.sign(x + 1e-12) * away, x)
        return Tensor._wrap(x)

    def wsum(t):
        return (t * rng.normal(size=t.shape)).sum()

    m, k, n = ext(), ext(), ext()
    a, b = ext(), ext()
    shp = (a, b)
    cases = {}
    # weights for the projections are drawn once so each case is a fixed function
    r = {name: rng.normal(size=shp) for name in ("add", "sub", "mul", "div", "neg", "pow", "sqrt", "exp", "log")}
    cases["add"] = (lambda x, y: (T.add(x, y) * r["add"]).sum(), [arr(*shp), arr(*shp)])
    cases["sub"] = (lambda x, y: (T.sub(x, y) * r["sub"]).sum(), [arr(*shp), arr(*shp)])
    cases["mul"] = (lambda x, y: (T.mul(x, y) * r["mul"]).sum(), [arr(*shp), arr(*shp)])
    cases["div"] = (lambda x, y: (T.div(x, y) * r["div"]).sum(), [arr(*shp), arr(*shp, positive=True)])
    cases["neg"] = (lambda x: (T.neg(x) * r["neg"]).sum(), [arr(*shp)])
    cases["power"] = (lambda x: (T.power(x, 1.7) * r["pow"]).sum(), [arr(*shp, positive=True)])
    cases["sqrt"] = (lambda x: (T.sqrt(x) * r["sqrt"]).sum(), [arr(*shp, positive=True)])
    cases["exp"] = (lambda x: (T.exp(x) * r["exp"]).sum(), [arr(*shp)])
    cases["log"] = (lambda x: (T.log(x) * r["log"]).sum(), [arr(*shp, positive=True)])
    for kind in ("relu", "gelu", "tanh", "sigmoid"):
        rk = rng.normal(size=shp)
        cases[kind] = (lambda x, kind=kind, rk=rk: (T.activation(x, kind) * rk).sum(), [arr(*shp, away=1e-3)])
    r3 = rng.normal(size=(a, 1))
    cases["sum"] = (lambda x: (T.sum_(x, axis=1, keepdims=True) * r3).sum(), [arr(*shp)])
    cases["mean"] = (lambda x: (T.mean(x, axis=1, keepdims=True) * r3).sum(), [arr(*shp)])
    rr = rng.normal(size=(b, a))
    cases["reshape"] = (lambda x: (T.reshape(x, (b, a)) * rr).sum(), [arr(*shp)])
    cases["transpose"] = (lambda x: (T.transpose(x) * rr).sum(), [arr(*shp)])
    cases["swapaxes"] = (lambda x: (T.swapaxes(x, 0, 1) * rr).sum(), [arr(*shp)])
    rb = rng.normal(size=(k, a, b))
    cases["broadcast_to"] = (lambda x: (T.broadcast_to(x, (k, a, b)) * rb).sum(), [arr(*shp)])
    rg = rng.normal(size=(a, max(b - 1, 1)))
    cases["getitem"] = (lambda x: (x[:, : max(b - 1, 1)] * rg).sum(), [arr(*shp)])
    rc = rng.normal(size=(a, 2 * b))
    cases["concat"] = (lambda x, y: (T.concat([x, y], axis=1) * rc).sum(), [arr(*shp), arr(*shp)])
    cases["matmul"] = (lambda x, y: T.matmul(x, y).sum(), [arr(m, k), arr(k, n)])
    rl = rng.normal(size=(a, m, n))
    cases["linear"] = (lambda x, w, bias: (T.linear(x, w, bias) * rl).sum(), [arr(a, m, k), arr(k, n), arr(n)])
    rs = rng.normal(size=(a, b))
    cases["softmax"] = (lambda x: (T.softmax(x, axis=-1) * rs).sum(), [arr(a, b)])
    cl = ext(2)
    rn = rng.normal(size=(a, cl))
    cases["layer_norm"] = (lambda x, g, be: (T.layer_norm(x, g, be) * rn).sum(), [arr(a, cl), arr(cl), arr(cl)])
    bshape = (2, ext(), ext(), ext())
    rbn = rng.normal(size=bshape)

    def bn(x, g, be):
        C = x.shape[-1]
        return (T.batch_norm(x, g, be, np.zeros(C), np.ones(C), True) * rbn).sum()

    cases["batch_norm"] = (bn, [arr(*bshape), arr(bshape[-1]), arr(bshape[-1])])
    H, W, ci, co = ext(2), ext(2), ext(), ext()
    rcv = rng.normal(size=(1, (H + 1) // 2, (W + 1) // 2, co))
    cases["conv2d"] = (
        lambda x, w, bias: (T.conv2d(x, w, bias, (2, 2), ((1, 1), (1, 1))) * rcv).sum(),
        [arr(1, H, W, ci), arr(3, 3, ci, co), arr(co)],
    )
    rdw = rng.normal(size=(1, H, W, ci))
    cases["depthwise_conv2d"] = (
        lambda x, w, bias: (T.depthwise_conv2d(x, w, bias) * rdw).sum(),
        [arr(1, H, W, ci), arr(3, 3, ci), arr(ci)],
    )
    rds = rng.normal(size=(1, H, W, co))
    cases["depthwise_separable_conv2d"] = (
        lambda x, dw, pw: (T.depthwise_separable_conv2d(x, dw, pw) * rds).sum(),
        [arr(1, H, W, ci), arr(3, 3, ci), arr(ci, co)],
    )
    cfg = sig.StftConfig()
    n_t = 3
    length = (n_t - 1) * cfg.hop + 1
    ri = rng.normal(size=(length,))
    cases["istft"] = (
        lambda re, im: (sig.istft_tensor(re, im, length, cfg) * ri).sum(),
        [arr(n_t, cfg.n_bins), arr(n_t, cfg.n_bins)],
    )
    return cases


def run_suite(seed=0, max_coords=24, include_block=True):
    """Run every primitive check (and the toy trident block) and return ``{name: result}``."""
    out = {}
    with precision(np.float64):
        for name, (f, inputs) in primitive_cases(seed).items():
            out[name] = gradient_check(f, inputs, max_coords=max_coords, seed=seed)
        if include_block:
            f, inputs = _toy_block(seed)
            out["trident_block"] = gradient_check(f, inputs, max_coords=max_coords, seed=seed)
    return out
