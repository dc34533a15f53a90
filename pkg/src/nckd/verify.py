"""Self-check suites: ETF geometry, finite-difference gradients and unconstrained-feature collapse.

Each suite returns a list of :class:`Check` records; ``run`` dispatches by
name and the CLI maps any failure to exit code 1.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .geometry import class_means, etf_target, make_simplex_etf
from .losses import (
    LossValueGrad,
    LossWeights,
    cross_entropy,
    kd_kl,
    nc1_loss,
    nc2_loss,
    normalize_rows,
    normalize_rows_backward,
    total_loss,
)
from .metrics import nc2
from .model import Mlp
from .numcore import Rng
from .trainer import CentroidTracker, tracked_nc2_loss, ufm_optimize

__all__ = ["Check", "SUITES", "run", "suite_etf", "suite_grad", "suite_ufm", "finite_difference", "rel_error"]

FD_STEP = 1e-5
GRAD_TOL = 1e-5
# pre-activations closer than this to zero are re-drawn: a central difference
# straddling a ReLU kink is not a valid oracle
KINK_MARGIN = 1e-3


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}  {self.detail}".rstrip()


# -- etf -----------------------------------------------------------------


def suite_etf(seed: int = 0) -> list[Check]:
    checks = []
    rng = Rng(seed).spawn("verify").spawn("etf")
    for k in range(2, 17):
        d = k + 4
        m = make_simplex_etf(k, d, rng.spawn(k))
        norm_dev = float(np.max(np.abs(np.linalg.norm(m, axis=1) - 1.0)))
        gram = m @ m.T
        off = gram[~np.eye(k, dtype=bool)]
        cos_dev = float(np.max(np.abs(off + 1.0 / (k - 1))))
        v = nc2(class_means(m, np.arange(k), k=k))
        target = etf_target(k).matrix
        ok = norm_dev < 1e-12 and cos_dev < 1e-9 and v < 1e-9 and nc2_loss(m, m).value < 1e-15
        checks.append(
            Check(
                f"etf k={k} d={d}",
                bool(ok and np.all(np.diag(target) == 1.0)),
                f"norm_dev={norm_dev:.1e} cos_dev={cos_dev:.1e} nc2={v:.1e}",
            )
        )
    return checks


# -- gradients -----------------------------------------------------------


def finite_difference(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of the scalar function ``f`` at ``x`` (``x`` is restored)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        out[i] = (up - down) / (2.0 * h)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the larger of the two gradients' max magnitudes (floor 1e-8)."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def _case_ce(rng: Rng) -> float:
    g = rng.generator
    b, k = int(g.integers(1, 9)), int(g.integers(2, 6))
    z = rng.spawn("z").gaussian(b, k) * 2.0
    y = g.integers(0, k, size=b)
    return rel_error(cross_entropy(z, y).grads["logits"], finite_difference(lambda: cross_entropy(z, y).value, z))


def _case_kd(rng: Rng) -> float:
    g = rng.generator
    b, k = int(g.integers(1, 9)), int(g.integers(2, 6))
    zs = rng.spawn("zs").gaussian(b, k) * 3.0
    zt = rng.spawn("zt").gaussian(b, k) * 3.0
    tau = float(g.uniform(0.5, 4.0))
    fn = lambda: kd_kl(zs, zt, tau).value  # noqa: E731
    return rel_error(kd_kl(zs, zt, tau).grads["logits"], finite_difference(fn, zs))


def _case_nc1(rng: Rng) -> float:
    g = rng.generator
    b, k, d = int(g.integers(1, 9)), int(g.integers(2, 6)), int(g.integers(2, 9))
    f = rng.spawn("f").gaussian(b, d)
    c = rng.spawn("c").gaussian(k, d)
    y = g.integers(0, k, size=b)
    tau = float(g.uniform(0.1, 1.0))
    fn = lambda: nc1_loss(f, y, c, tau).value  # noqa: E731
    return rel_error(nc1_loss(f, y, c, tau).grads["features"], finite_difference(fn, f))


def _case_nc2(rng: Rng) -> float:
    """ETF-alignment loss composed with centering and normalization of raw class means."""
    g = rng.generator
    k, d = int(g.integers(2, 6)), int(g.integers(4, 9))
    means = rng.spawn("m").gaussian(k, d)
    ht, _ = normalize_rows(rng.spawn("t").gaussian(k, d))

    def value_grad():
        c = means - means.mean(axis=0)
        unit, norms = normalize_rows(c)
        inner = nc2_loss(unit, ht)
        dc = normalize_rows_backward(unit, norms, inner.grads["h_student"])
        return inner.value, dc - dc.mean(axis=0)

    _, grad = value_grad()
    return rel_error(grad, finite_difference(lambda: value_grad()[0], means))


def _case_tracked_nc2(rng: Rng) -> float:
    """ETF loss on EMA centroids: gradient through the current batch's class means."""
    g = rng.generator
    k, d = int(g.integers(2, 6)), int(g.integers(3, 9))
    b = int(g.integers(k, 9))
    tracker = CentroidTracker(k, d, beta=float(g.uniform(0.0, 0.95)))
    tracker.update(rng.spawn("warm").gaussian(2 * k, d), np.tile(np.arange(k), 2))
    ht, _ = normalize_rows(rng.spawn("t").gaussian(k, d))
    f = rng.spawn("f").gaussian(b, d)
    y = np.concatenate([np.arange(k), g.integers(0, k, size=b - k)])
    fn = lambda: tracked_nc2_loss(f, y, tracker, ht).value  # noqa: E731
    return rel_error(tracked_nc2_loss(f, y, tracker, ht).grads["features"], finite_difference(fn, f))


def _composite(model: Mlp, x, y, protos, tracker, teacher_norm, teacher_logits, weights) -> LossValueGrad:
    cache = model.forward(x)
    feats = cache.projected
    parts = {
        "cls": cross_entropy(cache.logits, y),
        "nc1": nc1_loss(feats, y, protos, weights.tau_proto),
        "nc2": tracked_nc2_loss(feats, y, tracker, teacher_norm),
        "kd": kd_kl(cache.logits, teacher_logits, weights.tau_kd),
    }
    tot = total_loss(parts, weights)
    return LossValueGrad(tot.value, model.backward(cache, tot.grads["logits"], tot.grads["features"]))


def _case_composite(rng: Rng) -> float:
    """Full objective through a 2-hidden-layer MLP with a projector; all parameters."""
    g = rng.generator
    k, d_in = int(g.integers(2, 6)), int(g.integers(2, 9))
    b = int(g.integers(k, 9))
    widths = [d_in, int(g.integers(3, 9)), int(g.integers(3, 9))]
    proj_dim = int(g.integers(2, 9))
    while proj_dim == widths[-1]:
        proj_dim = int(g.integers(2, 9))
    x = rng.spawn("x").gaussian(b, d_in)
    y = np.concatenate([np.arange(k), g.integers(0, k, size=b - k)])
    for attempt in range(100):
        model = Mlp.init(widths, k, rng.spawn("model").spawn(attempt), proj_dim=proj_dim)
        for l in (1, 2):
            model.params[f"b{l}"] = 0.1 * rng.spawn(f"b{l}").spawn(attempt).gaussian(widths[l])
        cache = model.forward(x)
        pre = [cache.acts[l - 1] @ model.params[f"W{l}"].T + model.params[f"b{l}"] for l in (1, 2)]
        if min(np.min(np.abs(z)) for z in pre) > KINK_MARGIN and np.all(
            np.einsum("ij,ij->i", cache.projected, cache.projected) > 1e-6
        ):
            break
    else:
        raise ContractError("could not draw a kink-free composite instance")
    weights = LossWeights(
        lambda1=float(g.uniform(0.1, 2.0)),
        lambda2=float(g.uniform(0.1, 2.0)),
        alpha=float(g.uniform(0.1, 1.0)),
        tau_proto=float(g.uniform(0.1, 1.0)),
        tau_kd=float(g.uniform(1.0, 4.0)),
    )
    protos = rng.spawn("protos").gaussian(k, proj_dim)
    teacher_norm, _ = normalize_rows(rng.spawn("tn").gaussian(k, proj_dim))
    teacher_logits = rng.spawn("tl").gaussian(b, k)
    tracker = CentroidTracker(k, proj_dim, 0.9)
    tracker.update(rng.spawn("warm").gaussian(2 * k, proj_dim), np.tile(np.arange(k), 2))
    args = (x, y, protos, tracker, teacher_norm, teacher_logits, weights)
    analytic = _composite(model, *args).grads
    worst = 0.0
    for name in model.trainable():
        num = finite_difference(lambda: _composite(model, *args).value, model.params[name])
        worst = max(worst, rel_error(analytic[name], num))
    return worst


GRAD_CASES = {
    "cross_entropy": _case_ce,
    "kd": _case_kd,
    "nc1": _case_nc1,
    "nc2": _case_nc2,
    "tracked_nc2": _case_tracked_nc2,
    "composite_mlp": _case_composite,
}


def suite_grad(seed: int = 0, per_loss: int = 20) -> list[Check]:
    checks = []
    root = Rng(seed).spawn("verify").spawn("grad")
    for name, case in GRAD_CASES.items():
        errs = [case(root.spawn(name).spawn(i)) for i in range(per_loss)]
        worst = max(errs)
        checks.append(Check(f"grad {name} x{per_loss}", worst < GRAD_TOL, f"max_rel_err={worst:.2e}"))
    return checks


# -- unconstrained features ----------------------------------------------


def suite_ufm(seed: int = 0, steps: int = 2000, tol: float = 1e-3) -> list[Check]:
    rng = Rng(seed).spawn("verify").spawn("ufm")
    k, d, n = 8, 16, 64
    etf = make_simplex_etf(k, d, rng.spawn("etf"))
    res = ufm_optimize(k, d, n, etf, LossWeights(lambda1=1.0, lambda2=1.0), steps, 0.1, rng.spawn("run"), tol=tol)
    last = res.final
    detail = f"steps={last['step']} nc1={last['nc1']:.2e} nc2={last['nc2']:.2e}"
    return [
        Check("ufm nc1 < 1e-3", bool(last["nc1"] < tol), detail),
        Check("ufm nc2 < 1e-3", bool(last["nc2"] < tol), detail),
    ]


SUITES = {"etf": suite_etf, "grad": suite_grad, "ufm": suite_ufm}


def run(suite: str, seed: int = 0) -> list[Check]:
    if suite == "all":
        return [c for name in SUITES for c in SUITES[name](seed)]
    if suite not in SUITES:
        raise ContractError(f"unknown suite {suite!r}; choose from {sorted(SUITES)} or 'all'")
    return SUITES[suite](seed)
