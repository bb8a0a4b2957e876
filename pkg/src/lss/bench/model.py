"""Per-cell linear 3D heads trained under a choice of sample-selection strategy."""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .. import losses as L
from .._validation import check_array, check_random_state
from ..gumbel import sample_gumbel
from ..selection import LSS, WARMUP_ALL, sample_map_grad_batch, select_train_batch

STRATEGIES = ("center1x1", "grid3x3", "grid5x5", "all7x7", "lss")
TARGET_COLUMNS = ("depth", "h", "w", "l", "yaw")
WHITEN_FLOOR = 1e-6


def strategy_mask(strategy, d):
    """Static positive mask of a fixed strategy (centred square)."""
    half = {"center1x1": 0, "grid3x3": 1, "grid5x5": 2}.get(strategy)
    m = np.zeros((d, d))
    if strategy == "all7x7":
        m[:] = 1.0
    elif half is not None:
        c = d // 2
        m[max(c - half, 0) : c + half + 1, max(c - half, 0) : c + half + 1] = 1.0
    else:
        raise ValueError(f"no static mask for strategy {strategy!r}")
    return m


def _circular_mean(angles, axis):
    return np.arctan2(np.sin(angles).mean(axis=axis), np.cos(angles).mean(axis=axis))


class CellHeadRegressor(RegressorMixin, BaseEstimator):
    """Linear per-cell heads for depth, log-uncertainty, dims and yaw bins.

    Every cell of an object's ``d x d`` feature grid makes its own
    prediction with shared weights. ``strategy`` decides which cells carry
    loss during training and which cell answers at inference:

    - ``center1x1`` / ``grid3x3`` / ``grid5x5``: fixed centred masks,
      centre cell at inference;
    - ``all7x7``: every cell, mean over cells at inference;
    - ``lss``: learned selection from an extra logit head, all cells during
      warm-up, highest-logit cell at inference.

Inputs are PCA-whitened with statistics of the training cells
(``whiten``); Gumbel noise is redrawn every step unless
``resample_noise=False``, which keeps one draw per object per epoch.

    ``y`` columns are ``depth, h, w, l, yaw``.
    """

    def __init__(
        self,
        strategy="lss",
        epochs=60,
        learning_rate=1e-2,
        batch_size=32,
        lr_schedule="cosine",
        temperature=1.0,
        warmup_fraction=0.3,
        warmup=True,
        binarize=False,
        normalize=True,
        depth_scale=10.0,
        init_scale=0.0,
        whiten=True,
        resample_noise=True,
        random_state=0,
    ):
        self.strategy = strategy
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.lr_schedule = lr_schedule
        self.temperature = temperature
        self.warmup_fraction = warmup_fraction
        self.warmup = warmup
        self.binarize = binarize
        self.normalize = normalize
        self.depth_scale = depth_scale
        self.init_scale = init_scale
        self.whiten = whiten
        self.resample_noise = resample_noise
        self.random_state = random_state

    # -- helpers ----------------------------------------------------------

    @staticmethod
    def _check_X(X):
        X = check_array(X, "X")
        if X.ndim != 4 or X.shape[1] != X.shape[2]:
            raise ValueError(f"X must have shape (n, d, d, F), got {X.shape}")
        return X

    def _fit_whitening(self, X):
        cells = X.reshape(-1, X.shape[-1])
        self.feature_mean_ = cells.mean(axis=0)
        if not self.whiten:
            self.feature_transform_ = np.eye(cells.shape[1])
            return
        # PCA whitening; the floor keeps directions without variance finite
        _, s, vt = np.linalg.svd(cells - self.feature_mean_, full_matrices=False)
        var = s**2 / cells.shape[0]
        self.feature_transform_ = vt.T / np.sqrt(var + WHITEN_FLOOR)

    def _design(self, X):
        if self.whiten:
            X = (X - self.feature_mean_) @ self.feature_transform_
        return np.concatenate([X, np.ones(X.shape[:-1] + (1,))], axis=-1)

    def _forward(self, Z):
        p = self.coef_
        orient = (Z @ p["orientation"]).reshape(Z.shape[:-1] + (L.NUM_BINS, 2))
        return {
            "depth": self.depth_scale * (Z @ p["depth"]),
            "log_uncertainty": Z @ p["log_uncertainty"],
            "dims": Z @ p["dims"],
            "orientation": orient,
            "logits": Z @ p["logits"],
        }

    def _lr(self, epoch):
        if self.lr_schedule == "constant":
            return self.learning_rate
        if self.lr_schedule == "cosine":
            return 0.5 * self.learning_rate * (1.0 + math.cos(math.pi * epoch / self.epochs))
        raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def mode_for_epoch(self, epoch):
        if self.strategy != "lss":
            return "fixed"
        if not self.warmup:
            return LSS
        state = L.TrainState(epoch=epoch, total_epochs=self.epochs, warmup_fraction=self.warmup_fraction)
        return L.warmup_gate(state)

    def sample_maps(self, X, rng=None):
        """Training-time sample maps for ``X`` with fresh noise (LSS mode)."""
        check_is_fitted(self, "coef_")
        X = self._check_X(X)
        if self.strategy != "lss":
            return np.broadcast_to(self.mask_, X.shape[:3]).copy()
        logits = self._forward(self._design(X))["logits"]
        maps, _ = select_train_batch(logits, self.temperature, check_random_state(rng), LSS, binarize=self.binarize)
        return maps

    # -- training ---------------------------------------------------------

    def _step(self, Z, y, mode, rng, lr, noise=None):
        n, d = Z.shape[0], Z.shape[1]
        out = self._forward(Z)
        soft = None
        if mode == "fixed":
            maps = np.broadcast_to(self.mask_, (n, d, d))
        else:
            maps, soft = select_train_batch(
                out["logits"], self.temperature, rng, mode, binarize=self.binarize, noise=noise
            )
        depth_gt = y[:, 0][:, None, None]
        dims_gt = y[:, 1:4][:, None, None, :]
        yaw_gt = y[:, 4][:, None, None]
        ld = L.depth_loss(out["depth"], out["log_uncertainty"], depth_gt)
        ls = L.dim_loss(out["dims"], dims_gt)
        lo = L.multibin_orientation_loss(out["orientation"], yaw_gt)
        cell = ld + ls + lo
        mass = maps.sum(axis=(1, 2), keepdims=True)
        if self.normalize:
            w = maps / mass
            mean = (w * cell).sum(axis=(1, 2), keepdims=True)
            dmap = np.where(maps > 0, (cell - mean) / mass, 0.0)
        else:
            w = maps
            dmap = np.where(maps > 0, cell, 0.0)
        total = float((w * cell).sum() / n)
        if not math.isfinite(total):
            return total, float("nan")
        w = w / n
        dd, du = L.depth_loss_grad(out["depth"], out["log_uncertainty"], depth_gt)
        g_out = {
            "depth": self.depth_scale * w * dd,
            "log_uncertainty": w * du,
            "dims": w[..., None] * L.dim_loss_grad(out["dims"], dims_gt),
            "orientation": (w[..., None, None] * L.multibin_orientation_grad(out["orientation"], yaw_gt)).reshape(
                n, d, d, -1
            ),
        }
        if soft is not None:
            g_out["logits"] = sample_map_grad_batch(dmap / n, soft, maps, self.temperature)
        Zf = Z.reshape(-1, Z.shape[-1])
        for name, g in g_out.items():
            gf = g.reshape(Zf.shape[0], -1) if g.ndim == 4 else g.reshape(-1, 1)
            grad = Zf.T @ gf
            self.coef_[name] -= lr * grad.reshape(self.coef_[name].shape)
        depth_mean = float((w * ld).sum())
        return total, depth_mean

    def fit(self, X, y):
        X = self._check_X(X)
        y = check_array(y, "y", ndim=2)
        if y.shape != (X.shape[0], len(TARGET_COLUMNS)):
            raise ValueError(f"y must have shape (n, {len(TARGET_COLUMNS)})")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        rng = check_random_state(self.random_state)
        n, d, _, F = X.shape
        self._fit_whitening(X)
        Z = self._design(X)
        k = F + 1
        shapes = {
            "depth": (k,),
            "log_uncertainty": (k,),
            "dims": (k, 3),
            "orientation": (k, 2 * L.NUM_BINS),
            "logits": (k,),
        }
        self.coef_ = {name: self.init_scale * rng.normal(size=shape) for name, shape in shapes.items()}
        # start every cell at the mean training depth
        self.coef_["depth"][-1] = y[:, 0].mean() / self.depth_scale
        self.mask_ = strategy_mask(self.strategy, d) if self.strategy != "lss" else np.ones((d, d))
        self.history_ = []
        self.diverged_ = False
        for epoch in range(self.epochs):
            mode = self.mode_for_epoch(epoch)
            lr = self._lr(epoch)
            perm = rng.permutation(n)
            # without per-step resampling each object keeps one draw per epoch
            epoch_noise = None if self.resample_noise else sample_gumbel((n, d, d), rng).values
            totals, depths = [], []
            for start in range(0, n, self.batch_size):
                idx = perm[start : start + self.batch_size]
                noise = None if epoch_noise is None else epoch_noise[idx]
                # overflow here is a divergence, detected and recorded just below
                with np.errstate(over="ignore", invalid="ignore"):
                    total, depth_mean = self._step(Z[idx], y[idx], mode, rng, lr, noise)
                if not math.isfinite(total) or not all(np.all(np.isfinite(v)) for v in self.coef_.values()):
                    self.diverged_ = True
                    break
                totals.append(total)
                depths.append(depth_mean)
            if self.diverged_:
                break
            self.history_.append({"epoch": epoch, "mode": mode, "loss": float(np.mean(totals)), "depth_loss": float(np.mean(depths))})
        self.n_features_in_ = F
        return self

    # -- inference --------------------------------------------------------

    def predict_cells(self, X):
        check_is_fitted(self, "coef_")
        return self._forward(self._design(self._check_X(X)))

    def selected_cells(self, X):
        """Flat index of the answering cell per object (``-1`` for all7x7)."""
        out = self.predict_cells(X)
        n, d = out["depth"].shape[:2]
        if self.strategy == "lss":
            return np.argmax(out["logits"].reshape(n, -1), axis=1)
        if self.strategy == "all7x7":
            return np.full(n, -1)
        return np.full(n, (d // 2) * d + d // 2)

    def predict(self, X):
        out = self.predict_cells(X)
        n, d = out["depth"].shape[:2]
        yaw_cells = L.decode_orientation(out["orientation"])
        if self.strategy == "all7x7":
            depth = out["depth"].mean(axis=(1, 2))
            dims = out["dims"].mean(axis=(1, 2))
            yaw = _circular_mean(yaw_cells, axis=(1, 2))
        else:
            idx = self.selected_cells(X)
            rows = np.arange(n)
            depth = out["depth"].reshape(n, -1)[rows, idx]
            dims = out["dims"].reshape(n, -1, 3)[rows, idx]
            yaw = yaw_cells.reshape(n, -1)[rows, idx]
        return np.column_stack([depth, dims, yaw])

    def score(self, X, y):
        """Negative depth MAE (higher is better)."""
        return -float(np.mean(np.abs(self.predict(X)[:, 0] - np.asarray(y)[:, 0])))
