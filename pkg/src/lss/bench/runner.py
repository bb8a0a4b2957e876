"""Strategy comparison and ablations on the synthetic occlusion task."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .model import STRATEGIES, CellHeadRegressor
from .synth import OCCLUDED_PATTERNS, SynthBatch, SynthConfig, generate_scene, mixup_batch

PROPERTIES = ("depth", "dims", "yaw")
#: A seed counts as degraded when its depth MAE exceeds this multiple of
#: the reference arm's median.
DEGRADED_FACTOR = 2.0


@dataclass(frozen=True)
class Arm:
    name: str
    strategy: str
    warmup: bool = True
    mixup: bool = False
    small: bool = False


@dataclass
class BenchConfig:
    strategies: tuple = STRATEGIES
    seeds: tuple = (0, 1, 2, 3, 4)
    epochs: int = 150
    learning_rate: float = 1e-2
    lr_schedule: str = "cosine"
    batch_size: int = 32
    temperature: float = 1.0
    warmup_fraction: float = 0.3
    train_size: int = 200
    val_size: int = 500
    small_train_size: int = 20
    mixup_lambda: float = 0.5
    noise: float = 0.05
    patterns: tuple = OCCLUDED_PATTERNS
    ablations: bool = True
    n_jobs: int = 1

    def __post_init__(self):
        self.strategies = tuple(self.strategies)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.patterns = tuple(self.patterns)
        unknown = set(self.strategies) - set(STRATEGIES)
        if unknown:
            raise ValueError(f"unknown strategies {sorted(unknown)}")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if self.epochs < 1 or self.train_size < 2 or self.val_size < 1 or self.small_train_size < 2:
            raise ValueError("epochs and set sizes must be positive (training sets need two objects)")

    def to_dict(self):
        d = asdict(self)
        d.pop("n_jobs")  # affects speed, not results
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def arms(self) -> List[Arm]:
        arms = [Arm(s, s) for s in self.strategies]
        if self.ablations:
            arms += [
                Arm("lss-no-warmup", "lss", warmup=False),
                Arm("lss-small", "lss", small=True),
                Arm("lss-small-mixup", "lss", mixup=True, small=True),
            ]
        return arms


PRESETS = {
    "smoke": dict(seeds=(0,), epochs=10, train_size=100, val_size=200),
    "full": dict(),
}


def preset_config(name, **overrides) -> BenchConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return BenchConfig(**{**PRESETS[name], **overrides})


@dataclass
class RunResult:
    arm: str
    strategy: str
    seed: int
    mae: Dict[str, float]
    diverged: bool = False
    overlap: Optional[float] = None
    curve: list = field(default_factory=list)


def _targets(batch: SynthBatch):
    return np.column_stack([batch.depth, batch.dims, batch.yaw])


def _angle_error(a, b):
    return np.abs(np.arctan2(np.sin(a - b), np.cos(a - b)))


def selection_overlap(model, batch: SynthBatch, rng=None):
    """Mean share of training-mode positives that fall on support cells."""
    maps = model.sample_maps(batch.features, rng) > 0
    return float(((maps & batch.support).sum(axis=(1, 2)) / maps.sum(axis=(1, 2))).mean())


def make_data(cfg: BenchConfig, seed):
    rng = np.random.default_rng(seed)
    synth = SynthConfig(noise=cfg.noise, patterns=cfg.patterns)
    return generate_scene(cfg.train_size, rng, synth), generate_scene(cfg.val_size, rng, synth)


def run_strategy(strategy, train: SynthBatch, val: SynthBatch, cfg: BenchConfig, seed, *, warmup=True, arm=None):
    """Train one arm on ``train`` and score it on ``val``.

    A non-finite loss aborts the seed; the result is then flagged
    ``diverged`` with NaN errors.
    """
    model = CellHeadRegressor(
        strategy=strategy,
        epochs=cfg.epochs,
        learning_rate=cfg.learning_rate,
        batch_size=cfg.batch_size,
        lr_schedule=cfg.lr_schedule,
        temperature=cfg.temperature,
        warmup_fraction=cfg.warmup_fraction,
        warmup=warmup,
        random_state=seed,
    )
    model.fit(train.features, _targets(train))
    name = arm or strategy
    if model.diverged_:
        return RunResult(name, strategy, seed, {p: float("nan") for p in PROPERTIES}, True, None, model.history_)
    pred = model.predict(val.features)
    if not np.all(np.isfinite(pred)):
        return RunResult(name, strategy, seed, {p: float("nan") for p in PROPERTIES}, True, None, model.history_)
    mae = {
        "depth": float(np.mean(np.abs(pred[:, 0] - val.depth))),
        "dims": float(np.mean(np.abs(pred[:, 1:4] - val.dims))),
        "yaw": float(np.mean(_angle_error(pred[:, 4], val.yaw))),
    }
    overlap = selection_overlap(model, val, np.random.default_rng([seed, 2])) if strategy == "lss" else None
    return RunResult(name, strategy, seed, mae, False, overlap, model.history_)


def _run_seed(cfg: BenchConfig, seed):
    train, val = make_data(cfg, seed)
    small = train.subset(np.arange(min(cfg.small_train_size, len(train))))
    out = []
    for arm in cfg.arms():
        data = small if arm.small else train
        if arm.mixup:
            data = data.concat(mixup_batch(data, np.random.default_rng([seed, 1]), cfg.mixup_lambda))
        out.append(run_strategy(arm.strategy, data, val, cfg, seed, warmup=arm.warmup, arm=arm.name))
    return out


@dataclass
class BenchReport:
    config: BenchConfig
    runs: List[RunResult]

    def arm_names(self):
        seen = []
        for r in self.runs:
            if r.arm not in seen:
                seen.append(r.arm)
        return seen

    def values(self, arm, prop="depth"):
        return np.array([r.mae[prop] for r in self.runs if r.arm == arm])

    def failures(self, arm):
        return sum(r.diverged for r in self.runs if r.arm == arm)

    def median(self, arm, prop="depth"):
        """Median over the seeds that finished; NaN if none did."""
        v = self.values(arm, prop)
        v = v[np.isfinite(v)]
        return float(np.median(v)) if v.size else float("nan")

    def degraded(self, arm, reference, prop="depth", factor=DEGRADED_FACTOR):
        """Seeds of ``arm`` that diverged or exceed ``factor`` x the reference median."""
        ref = self.median(reference, prop)
        return sum(r.diverged or r.mae[prop] > factor * ref for r in self.runs if r.arm == arm)

    def medians(self):
        return {a: {p: self.median(a, p) for p in PROPERTIES} for a in self.arm_names()}

    def header(self):
        seeds = ",".join(str(s) for s in self.config.seeds)
        return f"# config_hash={self.config.config_hash()} seeds={seeds}"

    def to_csv(self):
        buf = io.StringIO()
        buf.write(self.header() + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["strategy", "seed", "property", "mae", "status"])
        for r in self.runs:
            for p in PROPERTIES:
                w.writerow([r.arm, r.seed, p, f"{r.mae[p]:.6f}", "diverged" if r.diverged else "ok"])
        return buf.getvalue()

    def to_dict(self):
        def clean(x):
            return None if isinstance(x, float) and not math.isfinite(x) else x

        return {
            "config_hash": self.config.config_hash(),
            "seeds": list(self.config.seeds),
            "config": self.config.to_dict(),
            "medians": {a: {p: clean(v) for p, v in m.items()} for a, m in self.medians().items()},
            "failures": {a: self.failures(a) for a in self.arm_names()},
            "runs": [
                {
                    "strategy": r.arm,
                    "seed": r.seed,
                    "mae": {p: clean(v) for p, v in r.mae.items()},
                    "diverged": r.diverged,
                    "overlap": r.overlap,
                    "curve": r.curve,
                }
                for r in self.runs
            ],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def write(self, out_dir):
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench_report.csv").write_text(self.to_csv())
        (out / "bench_report.json").write_text(self.to_json())
        return out / "bench_report.csv", out / "bench_report.json"


def compare(cfg: BenchConfig) -> BenchReport:
    """Run every arm for every seed; results are ordered by seed, then arm."""
    if cfg.n_jobs > 1:
        with ProcessPoolExecutor(cfg.n_jobs) as pool:
            per_seed = list(pool.map(_run_seed, [cfg] * len(cfg.seeds), cfg.seeds))
    else:
        per_seed = [_run_seed(cfg, s) for s in cfg.seeds]
    return BenchReport(cfg, [r for runs in per_seed for r in runs])
