"""Central finite-difference checks for every hand-derived gradient."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import losses as L
from ._validation import check_random_state
from .gumbel import gumbel_softmax, sample_gumbel, softmax_jacobian
from .selection import sample_map_grad, select_train

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-6
KINK_MARGIN = 1e-3
#: Below this gradient scale errors are reported in absolute terms.
ABS_SCALE = 1e-8
#: Finite differences per tensor per point; larger tensors are subsampled.
MAX_COORDS = 16


class KinkWarning(UserWarning):
    """A check point sat on a non-differentiable kink and was moved off it."""


@dataclass
class GradCheckResult:
    op: str
    max_rel_error: float
    tolerance: float
    points: int
    perturbed: int

    @property
    def passed(self):
        return bool(self.max_rel_error < self.tolerance)


def numerical_gradient(f, x, step=DEFAULT_STEP, coords=None):
    """Central differences of scalar ``f`` w.r.t. entries of ``x``.

    ``coords`` restricts the work to those flat indices; the remaining
    entries of the result are NaN.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.full(x.shape, np.nan)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size) if coords is None else coords:
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def relative_error(analytic, numeric):
    """Max componentwise error relative to the larger of the two inf-norms.

    Components of a gradient differ by orders of magnitude; dividing each by
    its own size would turn round-off on near-zero entries into noise. NaN
    entries of ``numeric`` (unsampled coordinates) are skipped.
    """
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    ok = ~np.isnan(n)
    if not np.any(ok):
        return 0.0
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(n[ok]))))
    diff = float(np.max(np.abs(a[ok] - n[ok])))
    return diff / scale if scale > ABS_SCALE else diff


def _push_off_kink(x, kink, margin=KINK_MARGIN):
    """Move entries of ``x`` within ``margin`` of ``kink`` to ``kink +- margin``."""
    x = np.asarray(x, dtype=np.float64)
    near = np.abs(x - kink) < margin
    if not np.any(near):
        return x, False
    side = np.where(x - kink >= 0, 1.0, -1.0)
    return np.where(near, kink + side * margin, x), True


# -- per-op points, forward functions and analytic gradients --------------
#
# Each op maps a point (dict of arrays) to a scalar; ``params`` names the
# entries that are differentiated.


def _depth_point(rng):
    return {"d_pred": rng.uniform(2, 60), "u": rng.uniform(-2, 2), "d_gt": rng.uniform(2, 60)}


def _depth_fix(p):
    d, moved = _push_off_kink(p["d_pred"], p["d_gt"])
    return {**p, "d_pred": d}, moved


def _depth_f(p):
    return float(L.depth_loss(p["d_pred"], p["u"], p["d_gt"]))


def _depth_g(p):
    dd, du = L.depth_loss_grad(p["d_pred"], p["u"], p["d_gt"])
    return {"d_pred": dd, "u": du}


def _dim_point(rng):
    return {"pred": rng.uniform(0.3, 5, 3), "gt": rng.uniform(0.3, 5, 3)}


def _dim_fix(p):
    pred, moved = _push_off_kink(p["pred"], p["gt"])
    return {**p, "pred": pred}, moved


def _offset_point(rng):
    return {"pred": rng.uniform(-4, 4, 2), "gt": rng.uniform(-4, 4, 2)}


def _offset_fix(p):
    # Smooth-L1 has a curvature kink where |pred - gt| == beta
    diff = p["pred"] - p["gt"]
    fixed, m1 = _push_off_kink(diff, L.SMOOTH_L1_BETA)
    fixed, m2 = _push_off_kink(fixed, -L.SMOOTH_L1_BETA)
    return {**p, "pred": p["gt"] + fixed}, m1 or m2


def _orient_point(rng):
    return {"bins": rng.uniform(-3, 3, (L.NUM_BINS, 2)), "theta": rng.uniform(-np.pi, np.pi)}


def _orient_fix(p):
    k, res = L.assign_bin(p["theta"])
    bins = p["bins"].copy()
    bins[k, 1], moved = _push_off_kink(bins[k, 1], res)
    return {**p, "bins": bins}, moved


def _softmax_point(rng):
    n = int(rng.integers(2, 50))
    return {"logits": rng.uniform(-5, 5, n), "noise": np.zeros(n), "tau": rng.uniform(0.5, 2.0)}


def _pipeline_point(rng, d=7):
    g = (d, d)
    return {
        "depth": rng.uniform(5, 50, g),
        "log_uncertainty": rng.uniform(-1, 2, g),
        "dims": rng.uniform(0.5, 5, g + (3,)),
        "orientation": rng.uniform(-2, 2, g + (L.NUM_BINS, 2)),
        "offset": rng.uniform(-3, 3, 2),
        "logits": rng.uniform(-3, 3, g),
        "noise": sample_gumbel(g, rng).values,
        "target": L.ObjectTarget(
            depth=float(rng.uniform(5, 50)),
            dims=tuple(rng.uniform(0.5, 5, 3)),
            yaw=float(rng.uniform(-np.pi, np.pi)),
            offset=tuple(rng.uniform(-3, 3, 2)),
        ),
        "normalize": bool(rng.integers(0, 2)),
    }


def _pipeline_fix(p):
    t = p["target"]
    moved = False
    out = dict(p)
    out["depth"], m = _push_off_kink(p["depth"], t.depth)
    moved |= m
    out["dims"], m = _push_off_kink(p["dims"], np.asarray(t.dims))
    moved |= m
    k, res = L.assign_bin(t.yaw)
    orient = p["orientation"].copy()
    orient[..., k, 1], m = _push_off_kink(orient[..., k, 1], res)
    out["orientation"] = orient
    moved |= m
    diff = p["offset"] - np.asarray(t.offset)
    diff, m1 = _push_off_kink(diff, L.SMOOTH_L1_BETA)
    diff, m2 = _push_off_kink(diff, -L.SMOOTH_L1_BETA)
    out["offset"] = np.asarray(t.offset) + diff
    return out, moved or m1 or m2


def _pipeline_parts(p):
    soft = gumbel_softmax(p["logits"], p["noise"])
    smap = select_train(p["logits"], noise=p["noise"])
    return soft, smap


def _pipeline_f_factory(p):
    """Forward with the retained set frozen at ``p`` (straight-through)."""
    _, smap = _pipeline_parts(p)
    keep = smap.mask

    def f(q):
        soft = gumbel_softmax(q["logits"], q["noise"])
        m = np.where(keep, soft.values, 0.0)
        preds = L.CellPredictions(q["depth"], q["log_uncertainty"], q["dims"], q["orientation"], q["offset"])
        bd = L.compute_breakdown(preds, q["target"])
        return L.masked_total_loss(bd, m, q["normalize"])

    return f


def _pipeline_g(p):
    soft, smap = _pipeline_parts(p)
    # same surrogate for the value the gradient is taken at
    m = np.where(smap.mask, soft.values, 0.0)
    preds = L.CellPredictions(p["depth"], p["log_uncertainty"], p["dims"], p["orientation"], p["offset"])
    sm = type(smap)(m, smap.positive_count, smap.threshold_index, smap.mode, soft)
    _, _, grads = L.loss_and_grads(preds, p["target"], sm, soft=soft, normalize=p["normalize"])
    return grads


def _st_point(rng):
    d = int(rng.integers(2, 8))
    return {
        "logits": rng.uniform(-3, 3, (d, d)),
        "noise": sample_gumbel((d, d), rng).values,
        "upstream": rng.normal(size=(d, d)),
    }


def _st_f_factory(p):
    keep = select_train(p["logits"], noise=p["noise"]).mask

    def f(q):
        soft = gumbel_softmax(q["logits"], q["noise"])
        return float(np.sum(q["upstream"] * np.where(keep, soft.values, 0.0)))

    return f


def _st_g(p):
    soft = gumbel_softmax(p["logits"], p["noise"])
    smap = select_train(p["logits"], noise=p["noise"])
    return {"logits": sample_map_grad(p["upstream"], soft, smap)}


def _const(f):
    return lambda p: f


def _no_fix(p):
    return p, False


OPS = {
    "depth_loss": (_depth_point, _depth_fix, _const(_depth_f), _depth_g, ("d_pred", "u")),
    "dim_loss": (
        _dim_point,
        _dim_fix,
        _const(lambda p: float(L.dim_loss(p["pred"], p["gt"]))),
        lambda p: {"pred": L.dim_loss_grad(p["pred"], p["gt"])},
        ("pred",),
    ),
    "offset_loss": (
        _offset_point,
        _offset_fix,
        _const(lambda p: float(L.offset_loss(p["pred"], p["gt"]))),
        lambda p: {"pred": L.offset_loss_grad(p["pred"], p["gt"])},
        ("pred",),
    ),
    "orientation_loss": (
        _orient_point,
        _orient_fix,
        _const(lambda p: float(L.multibin_orientation_loss(p["bins"], p["theta"]))),
        lambda p: {"bins": L.multibin_orientation_grad(p["bins"], p["theta"])},
        ("bins",),
    ),
    "gumbel_softmax": (_softmax_point, _no_fix, None, None, ("logits",)),
    "sample_map": (_st_point, _no_fix, _st_f_factory, _st_g, ("logits",)),
    "masked_total": (
        _pipeline_point,
        _pipeline_fix,
        _pipeline_f_factory,
        _pipeline_g,
        ("depth", "log_uncertainty", "dims", "orientation", "offset", "logits"),
    ),
}


def _check_softmax_jacobian(p, step):
    """Full Jacobian of the softmax map, column by column."""
    tau = p["tau"]
    soft = gumbel_softmax(p["logits"], p["noise"], tau)
    analytic = softmax_jacobian(soft)
    numeric = np.empty_like(analytic)
    x = p["logits"]
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = step
        hi = gumbel_softmax(x + e, p["noise"], tau).values
        lo = gumbel_softmax(x - e, p["noise"], tau).values
        numeric[:, j] = (hi - lo) / (2 * step)
    return relative_error(analytic, numeric)


def check_point(op, point, step=DEFAULT_STEP, rng=None):
    """Max relative error of ``op``'s analytic gradient at one point.

    Returns ``(error, moved)`` where ``moved`` says the point had to be
    pushed off a kink first.
    """
    if op not in OPS:
        raise KeyError(f"unknown op {op!r}; choose from {sorted(OPS)}")
    rng = check_random_state(0 if rng is None else rng)
    _, fix, f_factory, g, params = OPS[op]
    point, moved = fix(point)
    if moved:
        warnings.warn(f"{op}: point moved {KINK_MARGIN:g} off a kink", KinkWarning, stacklevel=2)
    if op == "gumbel_softmax":
        return _check_softmax_jacobian(point, step), moved
    f = f_factory(point)
    analytic = g(point)
    worst = 0.0
    for name in params:
        def fn(v, name=name):
            return f({**point, name: v})

        size = np.size(point[name])
        coords = None
        if size > MAX_COORDS:
            # always include the largest analytic component
            top = int(np.argmax(np.abs(analytic[name]).ravel()))
            coords = np.unique(np.append(rng.choice(size, MAX_COORDS - 1, replace=False), top))
        numeric = numerical_gradient(fn, point[name], step, coords)
        worst = max(worst, relative_error(analytic[name], numeric))
    return worst, moved


def grad_check(op, point=None, step=DEFAULT_STEP, tolerance=DEFAULT_TOLERANCE, *, points=1, rng=None):
    """Check ``op`` at ``point`` (or at ``points`` random points)."""
    gen = check_random_state(rng)
    sampler = OPS[op][0] if op in OPS else None
    if sampler is None:
        raise KeyError(f"unknown op {op!r}; choose from {sorted(OPS)}")
    candidates = [point] if point is not None else [sampler(gen) for _ in range(points)]
    worst, moved = 0.0, 0
    for p in candidates:
        err, m = check_point(op, p, step, gen)
        worst = max(worst, err)
        moved += int(m)
    return GradCheckResult(op=op, max_rel_error=worst, tolerance=tolerance, points=len(candidates), perturbed=moved)


def run_suite(ops=None, points=100, step=DEFAULT_STEP, tolerance=DEFAULT_TOLERANCE, seed=0):
    """One :class:`GradCheckResult` per op, each over ``points`` random points."""
    ops = list(OPS) if ops is None else list(ops)
    gen = check_random_state(seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", KinkWarning)
        return [grad_check(op, step=step, tolerance=tolerance, points=points, rng=gen) for op in ops]
