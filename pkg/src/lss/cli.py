"""Command-line entry point: ``lss {gradcheck,bench,augment,inspect}``.

Every subcommand reads an optional JSON config (``--config``); flags given
on the command line win over config values. Exit status is 0 on success,
1 when a check fails and 2 for usage or configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import gradcheck
from .bench.runner import PRESETS, BenchConfig
from .gumbel import GumbelNoise, gumbel_softmax, sample_gumbel
from .selection import absolute_distance_divide, build_sample_map, relative_distance_divide

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class ConfigError(Exception):
    pass


# Keys each subcommand accepts in its JSON config, with defaults.
DEFAULTS = {
    "gradcheck": {"ops": None, "points": 100, "step": gradcheck.DEFAULT_STEP, "tolerance": gradcheck.DEFAULT_TOLERANCE, "seed": 0, "out": None},
    "bench": {"preset": "full", "seed": None, "out": "bench_out", **{k: None for k in BenchConfig.__dataclass_fields__}},
    "augment": {"input": None, "out": None, "policy": "fixed", "lam": 0.5, "alpha": 1.0, "intrinsics_tolerance": 1e-3, "seed": 0},
    "inspect": {"logits": None, "logits_file": None, "temperature": 1.0, "noise": False, "seed": 0, "binarize": False, "out": None},
}


def config_hash(cfg):
    # where results are written does not change them
    blob = json.dumps({k: v for k, v in cfg.items() if k != "out"}, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def header(cfg, seeds):
    return f"# config_hash={config_hash(cfg)} seeds={','.join(str(s) for s in seeds)}"


def resolve_config(command, args):
    """Defaults < JSON file < explicit flags; unknown file keys are rejected."""
    cfg = dict(DEFAULTS[command])
    if args.config is not None:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {', '.join(unknown)}")
        cfg.update(loaded)
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


# -- gradcheck ------------------------------------------------------------


def cmd_gradcheck(cfg):
    ops = cfg["ops"]
    if isinstance(ops, str):
        ops = [o for o in ops.split(",") if o]
    unknown = sorted(set(ops or ()) - set(gradcheck.OPS))
    if unknown:
        raise ConfigError(f"unknown ops {unknown}; available: {', '.join(gradcheck.OPS)}")
    if int(cfg["points"]) < 1:
        raise ConfigError("points must be positive")
    results = gradcheck.run_suite(ops, int(cfg["points"]), float(cfg["step"]), float(cfg["tolerance"]), int(cfg["seed"]))
    lines = [header(cfg, [cfg["seed"]])]
    for r in results:
        lines += [
            f"[{r.op}]",
            f"points={r.points} perturbed={r.perturbed} max_rel_error={r.max_rel_error:.3e} "
            f"tolerance={r.tolerance:.1e} {'PASS' if r.passed else 'FAIL'}",
        ]
    report = "\n".join(lines) + "\n"
    print(report, end="")
    if cfg["out"]:
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck_report.txt").write_text(report)
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


# -- bench ----------------------------------------------------------------


def bench_config(cfg) -> BenchConfig:
    from .bench.runner import preset_config

    if cfg["preset"] not in PRESETS:
        raise ConfigError(f"unknown preset {cfg['preset']!r}")
    overrides = {k: cfg[k] for k in BenchConfig.__dataclass_fields__ if cfg.get(k) is not None}
    if cfg["seed"] is not None:
        # --seed shifts the preset's seed list so its length is kept
        n = len(overrides.get("seeds", PRESETS[cfg["preset"]].get("seeds", BenchConfig.seeds)))
        overrides["seeds"] = tuple(int(cfg["seed"]) + i for i in range(n))
    try:
        return preset_config(cfg["preset"], **overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def cmd_bench(cfg):
    from .bench.runner import compare

    bcfg = bench_config(cfg)
    start = time.perf_counter()
    report = compare(bcfg)
    csv_path, json_path = report.write(cfg["out"])
    print(report.header())
    print(f"{'strategy':<18}{'depth':>10}{'dims':>10}{'yaw':>10}{'failed':>8}")
    for arm, med in report.medians().items():
        print(f"{arm:<18}{med['depth']:>10.4f}{med['dims']:>10.4f}{med['yaw']:>10.4f}{report.failures(arm):>8}")
    print(f"wrote {csv_path} and {json_path} in {time.perf_counter() - start:.1f}s", file=sys.stderr)
    return EXIT_FAIL if any(r.diverged for r in report.runs) else EXIT_OK


# -- augment --------------------------------------------------------------


def cmd_augment(cfg):
    from .mixup import MixConfig, augment_dataset, read_kitti_dir, write_kitti_dir

    if not cfg["input"] or not cfg["out"]:
        raise ConfigError("augment needs --input and --out")
    src = Path(cfg["input"])
    if not src.is_dir():
        raise ConfigError(f"input directory {src} does not exist")
    try:
        mix_cfg = MixConfig(cfg["policy"], float(cfg["lam"]), float(cfg["alpha"]), float(cfg["intrinsics_tolerance"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    try:
        scenes = read_kitti_dir(src)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from None
    if len(scenes) < 2:
        raise ConfigError("augment needs at least two scenes")
    result = augment_dataset(scenes, mix_cfg, np.random.default_rng(int(cfg["seed"])))
    out = Path(cfg["out"])
    write_kitti_dir(out, result.scenes)
    report = {"config_hash": config_hash(cfg), "seeds": [int(cfg["seed"])], **result.report}
    (out / "mixup_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"mixed {report['mixed']} scenes, passed through {report['passed_through']}; wrote {out}")
    return EXIT_OK


# -- inspect --------------------------------------------------------------


def _read_logits(cfg):
    if cfg["logits"] is not None and cfg["logits_file"] is not None:
        raise ConfigError("give either logits or a logits file, not both")
    if cfg["logits"] is not None:
        values = cfg["logits"]
    elif cfg["logits_file"] is not None:
        path = cfg["logits_file"]
        text = sys.stdin.read() if path == "-" else Path(path).read_text()
        values = text.replace(",", " ").split()
    else:
        raise ConfigError("inspect needs --logits or --logits-file")
    try:
        arr = np.array([float(v) for v in values], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad logits: {exc}") from None
    if arr.size == 0 or not np.all(np.isfinite(arr)):
        raise ConfigError("logits must be a non-empty list of finite numbers")
    return arr


def inspect_logits(logits, temperature=1.0, noise=None, binarize=False):
    """Soft map, sample map and both positive counts for a flat logit vector."""
    noise = GumbelNoise(np.zeros_like(logits)) if noise is None else noise
    soft = gumbel_softmax(logits, noise, temperature)
    if logits.size == 1:
        sample = np.ones(1)
        rel = absolute = 1
    else:
        divider = relative_distance_divide(soft)
        sample = build_sample_map(soft, divider, binarize).values
        rel, absolute = divider.positive_count, absolute_distance_divide(soft)
    return soft, sample, rel, absolute


def cmd_inspect(cfg):
    logits = _read_logits(cfg)
    tau = float(cfg["temperature"])
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    noise = sample_gumbel(logits.shape, int(cfg["seed"])) if cfg["noise"] else None
    soft, sample, rel, absolute = inspect_logits(logits, tau, noise, bool(cfg["binarize"]))
    buf = io.StringIO()
    buf.write(header(cfg, [cfg["seed"]] if cfg["noise"] else []) + "\n")
    buf.write(f"# positives_relative={rel} positives_absolute={absolute}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "logit", "noise", "soft", "sample", "positive"])
    g = soft.perturbed - logits
    for i in range(logits.size):
        w.writerow([i, repr(float(logits[i])), f"{g[i]:.6f}", f"{soft.values[i]:.6f}", f"{sample[i]:.6f}", int(sample[i] > 0)])
    text = buf.getvalue()
    print(text, end="")
    if cfg["out"]:
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "inspect.csv").write_text(text)
    return EXIT_OK


# -- wiring ---------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser():
    parser = _Parser(prog="lss", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="JSON file with subcommand settings")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        return p

    p = common(sub.add_parser("gradcheck", help="finite-difference check of every hand-written gradient"))
    p.add_argument("--ops", help="comma-separated subset of: " + ", ".join(gradcheck.OPS))
    p.add_argument("--points", type=int)
    p.add_argument("--step", type=float)
    p.add_argument("--tolerance", type=float)

    p = common(sub.add_parser("bench", help="synthetic strategy comparison and ablations"))
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--epochs", type=int)
    p.add_argument("--n-jobs", dest="n_jobs", type=int)

    p = common(sub.add_parser("augment", help="MixUp3D over a KITTI-layout directory"))
    p.add_argument("--input", help="directory with image_2/, label_2/, calib/")
    p.add_argument("--policy", choices=["fixed", "beta"])
    p.add_argument("--lam", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--intrinsics-tolerance", dest="intrinsics_tolerance", type=float)

    p = common(sub.add_parser("inspect", help="soft map and sample map for given logits"))
    p.add_argument("--logits", nargs="+", type=float)
    p.add_argument("--logits-file", dest="logits_file", help="whitespace/comma separated numbers, '-' for stdin")
    p.add_argument("--temperature", type=float)
    p.add_argument("--noise", action="store_const", const=True, help="add seeded Gumbel noise (default: none)")
    p.add_argument("--binarize", action="store_const", const=True)
    return parser


COMMANDS = {"gradcheck": cmd_gradcheck, "bench": cmd_bench, "augment": cmd_augment, "inspect": cmd_inspect}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.command, args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"lss {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
