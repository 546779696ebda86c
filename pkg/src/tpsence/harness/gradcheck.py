"""Finite-difference verification of every primitive and every loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .. import losses as L
from .. import substrate as S
from ..substrate import Tensor

TOLERANCE = 1e-4
STEP = 1e-5
KINK_MARGIN = 1e-3


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_error: float
    seeds: int
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<20s} max_rel_error={self.max_rel_error:.3e}  seeds={self.seeds}"


# a case returns (f, t): f maps the flat input tensor t to a scalar
Case = Callable[[np.random.Generator], tuple[Callable[[Tensor], Tensor], Tensor]]


def _split(t: Tensor, shapes):
    """Cut a flat tensor into differentiable pieces of the given shapes."""
    out, start = [], 0
    for shape in shapes:
        n = int(np.prod(shape))
        out.append(S.reshape(S.gather(t, np.arange(start, start + n)), shape))
        start += n
    return out


def _away_from_zero(rng, shape, margin=KINK_MARGIN):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin * 2, x)


def _probability_triple(rng, shape=(4, 4)):
    # reject draws where any pairwise gap falls inside the kink margin
    while True:
        maps = rng.uniform(0.05, 0.95, size=(3,) + shape)
        gaps = np.abs(maps[[0, 1, 0]] - maps[[2, 2, 1]])
        if gaps.min() > KINK_MARGIN:
            return maps


def _weights(rng, shape):
    return rng.normal(size=shape)


# ---------------------------------------------------------------- primitives


def _unary(op, positive=False, kink=False):
    def case(rng):
        x = rng.uniform(0.5, 2.0, size=(3, 4)) if positive else (
            _away_from_zero(rng, (3, 4)) if kink else rng.normal(size=(3, 4)))
        w = _weights(rng, (3, 4))
        return (lambda t: S.sum(op(t) * w)), Tensor(x)
    return case


def _binary(op, positive_b=False):
    def case(rng):
        a = rng.normal(size=(3, 4))
        b = rng.uniform(0.5, 2.0, size=(3, 4)) if positive_b else rng.normal(size=(3, 4))
        w = _weights(rng, (3, 4))

        def f(t):
            x, y = _split(t, [(3, 4), (3, 4)])
            return S.sum(op(x, y) * w)
        return f, Tensor(np.concatenate([a.ravel(), b.ravel()]))
    return case


def _conv_case(rng):
    x = rng.normal(size=(1, 2, 6, 6))
    wk = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    proj = rng.normal(size=(1, 3, 3, 3))

    def f(t):
        xx, ww, bb = _split(t, [x.shape, wk.shape, b.shape])
        return S.sum(S.conv2d(xx, ww, bb, stride=2, padding=1) * proj)
    return f, Tensor(np.concatenate([x.ravel(), wk.ravel(), b.ravel()]))


def _conv_t_case(rng):
    x = rng.normal(size=(1, 3, 3, 3))
    wk = rng.normal(size=(3, 2, 4, 4))
    b = rng.normal(size=2)
    proj = rng.normal(size=(1, 2, 6, 6))

    def f(t):
        xx, ww, bb = _split(t, [x.shape, wk.shape, b.shape])
        return S.sum(S.conv_transpose2d(xx, ww, bb, stride=2, padding=1) * proj)
    return f, Tensor(np.concatenate([x.ravel(), wk.ravel(), b.ravel()]))


def _instance_norm_case(rng):
    x = rng.normal(size=(1, 2, 3, 3))
    w = _weights(rng, x.shape)
    return (lambda t: S.sum(S.instance_norm(S.reshape(t, x.shape)) * w)), Tensor(x.ravel())


def _matmul_case(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    w = _weights(rng, (3, 2))

    def f(t):
        x, y = _split(t, [(3, 4), (4, 2)])
        return S.sum(S.matmul(x, y) * w)
    return f, Tensor(np.concatenate([a.ravel(), b.ravel()]))


def _maxmin_case(op):
    def case(rng):
        a = rng.normal(size=(3, 4))
        gap = _away_from_zero(rng, (3, 4))
        w = _weights(rng, (3, 4))

        def f(t):
            x, y = _split(t, [(3, 4), (3, 4)])
            return S.sum(op(x, y) * w)
        return f, Tensor(np.concatenate([a.ravel(), (a + gap).ravel()]))
    return case


def _shape_case(rng):
    x = rng.normal(size=12)
    w = _weights(rng, (3, 8))
    idx = np.array([2, 0, 2, 1])  # repeated index exercises accumulation
    w2 = _weights(rng, (4, 2))

    def f(t):
        y = S.transpose(S.reshape(t, (4, 3)))
        g = S.gather(S.reshape(t, (6, 2)), idx, axis=0)
        c = S.concat([y, S.reshape(t, (3, 4))], axis=1)
        return S.sum(c * w) + S.sum(g * w2)
    return f, Tensor(x)


def _reduce_case(rng):
    x = rng.normal(size=(3, 4))
    w0, w1 = _weights(rng, (4,)), _weights(rng, (3,))

    def f(t):
        return (S.sum(S.mean(t, axis=0) * w0) + S.sum(S.sum(t, axis=1) * w1)
                + S.sum(S.softmax(t, axis=1) * x) + S.sum(S.l2_normalize(t, axis=1) * x))
    return f, Tensor(x)


PRIMITIVE_CASES: dict[str, Case] = {
    "add": _binary(S.add),
    "sub": _binary(S.sub),
    "mul": _binary(S.mul),
    "div": _binary(S.div, positive_b=True),
    "neg": _unary(S.neg),
    "abs": _unary(S.abs, kink=True),
    "exp": _unary(S.exp),
    "log": _unary(S.log, positive=True),
    "pow": _unary(lambda t: S.pow(t, 1.7), positive=True),
    "relu": _unary(S.relu, kink=True),
    "leaky_relu": _unary(lambda t: S.leaky_relu(t, 0.2), kink=True),
    "tanh": _unary(S.tanh),
    "sigmoid": _unary(S.sigmoid),
    "maximum": _maxmin_case(S.maximum),
    "minimum": _maxmin_case(S.minimum),
    "matmul": _matmul_case,
    "conv2d": _conv_case,
    "conv_transpose2d": _conv_t_case,
    "instance_norm": _instance_norm_case,
    "shape_ops": _shape_case,
    "reductions": _reduce_case,
}


# ---------------------------------------------------------------- losses


def _tps_case(loss_fn):
    def case(rng):
        maps = _probability_triple(rng)

        def f(t):
            dx, dy, dz = _split(t, [(4, 4)] * 3)
            return loss_fn(dx, dy, dz)
        return f, Tensor(maps.ravel())
    return case


def _gan_case(rng):
    d = rng.uniform(0.05, 0.95, size=(2, 4, 4))
    w = rng.uniform(0.5, 1.5)

    def f(t):
        real, fake = _split(t, [(4, 4), (4, 4)])
        ld, lg = L.gan_losses(real, fake)
        return ld + lg * w
    return f, Tensor(d.ravel())


def _patch_case(build):
    n, d = 8, 16

    def case(rng):
        raw = rng.normal(size=(2, n, d))
        extra = rng.uniform(0.0, 1.0)

        def f(t):
            a, p = _split(t, [(n, d), (n, d)])
            ps = L.PatchSet(S.l2_normalize(a, axis=1), S.l2_normalize(p, axis=1))
            return build(ps, extra)
        return f, Tensor(raw.ravel())
    return case


LOSS_CASES: dict[str, Case] = {
    "tps_loss": _tps_case(L.tps_loss),
    "ptl_loss": _tps_case(L.ptl_loss),
    "gan_losses": _gan_case,
    "patch_nce": _patch_case(lambda ps, _: L.patch_nce(ps, 0.07)),
    "monce_hard": _patch_case(lambda ps, _: L.monce_loss(ps, 0.07, 1.0, 1.0, "hard")),
    "monce_easy": _patch_case(lambda ps, _: L.monce_loss(ps, 0.07, 0.5, 2.0, "easy")),
    "sence_loss": _patch_case(lambda ps, m: L.sence_loss(ps, m, 0.07, 1.0, 1.0)),
}


def check_case(name: str, case: Case, seeds: int = 20, tol: float = TOLERANCE,
               step: float = STEP) -> CheckResult:
    worst = 0.0
    for seed in range(seeds):
        f, t = case(np.random.default_rng([seed, sum(map(ord, name))]))
        worst = max(worst, S.finite_diff_check(f, t, step))
    return CheckResult(name, worst, seeds, worst <= tol)


def run_gradcheck(seeds: int = 20, tol: float = TOLERANCE, include_primitives: bool = True,
                  overrides: dict[str, Case] | None = None) -> list[CheckResult]:
    """Check every registered case; ``overrides`` replaces or adds cases by name."""
    cases: dict[str, Case] = {}
    if include_primitives:
        cases.update(PRIMITIVE_CASES)
    cases.update(LOSS_CASES)
    cases.update(overrides or {})
    return [check_case(name, case, seeds, tol) for name, case in cases.items()]
