"""Command-line pipeline: gen -> embed -> train -> sample -> eval, plus optimize.

Every subcommand takes ``key=value`` settings, either on the command line
or from a ``--config`` file (one per line, ``#`` comments). Unknown keys are
rejected. The resolved settings are written to ``config.txt`` in the output
directory so that a run can be repeated from that file and its seed.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import metrics as M
from . import tensor as T
from .core import DataError, NumericError, SeededRng, read_batch, read_pointset, write_batch, write_pointset
from .denoiser import UNetConfig
from .density import DensitySpec
from .diffusion import Schedule, TrainConfig, load_checkpoint, sample, train
from .optimize import OptimizeConfig, optimize_input
from .samplers import SAMPLERS, get_sampler, rejection_sample
from .transport import detect_stratified, embed, escape_rate, grid_side, read_field, unembed, write_field

log = logging.getLogger("pointdiff")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# stream ids splitting the root seed per stage
STAGE_GEN, STAGE_SAMPLE = 1, 3


class UsageError(Exception):
    pass


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(p) for p in v.split(",") if p.strip())


def _floats(v: str) -> tuple[float, ...]:
    return tuple(float(p) for p in v.split(",") if p.strip())


def _strs(v: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in v.split(",") if p.strip())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(map(str, v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


# key -> (parser, default)
SETTINGS: dict[str, tuple[Callable[[str], object], object]] = {
    "sampler": (str, "stratified"),
    "base": (str, "stratified"),
    "density": (str, "uniform"),
    "n": (int, 64),
    "count": (int, 100),
    "data": (_strs, ()),
    "s": (int, 0),
    "weights": (str, ""),
    "resume": (str, ""),
    "pointsets": (_strs, ()),
    "precision": (str, "single"),
    "train.sizes": (_ints, ()),
    "train.steps": (int, 1000),
    "train.batch_size": (int, 8),
    "train.lr": (float, 2e-4),
    "train.checkpoint_every": (int, 0),
    "train.data_scale": (float, 1.0),
    "train.data_offset": (_floats, (0.0, 0.0)),
    "train.lr_decay": (str, "constant"),
    "schedule.T": (int, 1000),
    "schedule.beta": (float, 1e-2),
    "schedule.literal_sigma": (_bool, False),
    "unet.levels": (int, 3),
    "unet.base_channels": (int, 32),
    "unet.channel_mult": (_ints, (1, 2, 2)),
    "unet.time_embed_dim": (int, 128),
    "unet.groups": (int, 8),
    "unet.padding": (str, "circular"),
    "sample.count": (int, 16),
    "sample.steps": (int, 0),
    "sample.batch": (int, 64),
    "eval.metrics": (_strs, M.METRICS),
    "eval.K": (int, 1024),
    "eval.spectrum": (_bool, False),
    "eval.spectrum_R": (int, 128),
    "optimize.steps": (int, 100),
    "optimize.iterations": (int, 200),
    "optimize.lr": (float, 0.02),
}


@dataclass
class RunConfig:
    values: dict

    @classmethod
    def resolve(cls, lines: Sequence[str], overrides: Sequence[str], seed: int | None) -> "RunConfig":
        vals = {k: d for k, (_, d) in SETTINGS.items()}
        vals["seed"] = 0
        for where, items in (("config", lines), ("argument", overrides)):
            for raw in items:
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise UsageError(f"{where} entry {raw!r} is not key=value")
                key, val = (p.strip() for p in line.split("=", 1))
                if key == "seed":
                    parser = int
                elif key in SETTINGS:
                    parser = SETTINGS[key][0]
                else:
                    raise UsageError(f"unknown config key {key!r}")
                try:
                    vals[key] = parser(val)
                except ValueError as exc:
                    raise UsageError(f"bad value for {key}: {exc}") from None
        if seed is not None:
            vals["seed"] = seed
        return cls(vals)

    def __getitem__(self, key: str):
        return self.values[key]

    def dump(self, path: Path) -> None:
        path.write_text("".join(f"{k}={_fmt(self.values[k])}\n" for k in sorted(self.values)))

    def unet(self) -> UNetConfig:
        return UNetConfig(
            levels=self["unet.levels"],
            base_channels=self["unet.base_channels"],
            channel_mult=self["unet.channel_mult"],
            time_embed_dim=self["unet.time_embed_dim"],
            groups=self["unet.groups"],
            padding=self["unet.padding"],
        )

    def schedule(self) -> Schedule:
        return Schedule(T=self["schedule.T"], beta=self["schedule.beta"], literal_sigma=self["schedule.literal_sigma"])


def _require(cfg: RunConfig, key: str):
    v = cfg[key]
    if v in ("", (), 0):
        raise UsageError(f"missing required setting {key}")
    return v


# -- subcommands -----------------------------------------------------------------


def cmd_gen(cfg: RunConfig, out: Path) -> None:
    name, n, count = cfg["sampler"], cfg["n"], cfg["count"]
    root = SeededRng(cfg["seed"], STAGE_GEN)
    if name == "rejection":
        density = DensitySpec.parse(cfg["density"])
        density.validate()
        if cfg["base"] not in SAMPLERS:
            raise UsageError(f"unknown base sampler {cfg['base']!r}; choose from {sorted(SAMPLERS)}")
        make = lambda rng: rejection_sample(cfg["base"], density, n, rng)
    elif name in SAMPLERS:
        fn = get_sampler(name)
        make = lambda rng: fn(n, rng)
    else:
        raise UsageError(f"unknown sampler {name!r}; choose from {sorted(SAMPLERS) + ['rejection']}")
    sets = [make(root.spawn(i)) for i in range(count)]
    write_batch(sets, out)
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "seed", "stream", "spawn"])
        for i in range(count):
            w.writerow([i, cfg["seed"], STAGE_GEN, i])
    log.info("gen: %d %s sets of %d points -> %s", count, name, n, out)


def cmd_embed(cfg: RunConfig, out: Path) -> None:
    (src, *more) = _require(cfg, "data")
    if more:
        raise UsageError("embed takes a single data directory")
    sets = read_batch(src)
    shortcut = 0
    for i, ps in enumerate(sets):
        s = cfg["s"] or grid_side(ps.n)
        strat = detect_stratified(ps.points, s)
        shortcut += strat
        log.debug("embed %d: %s", i, "stratified shortcut" if strat else "assignment solve")
        write_field(embed(ps, s), out / f"fld_{i:06d}.gfld")
    log.info("embed: %d sets, %d via stratified shortcut, %d via assignment solve", len(sets), shortcut, len(sets) - shortcut)


def _load_fields(dirs: Sequence[str]) -> dict[int, np.ndarray]:
    by_side: dict[int, list[np.ndarray]] = {}
    for d in dirs:
        files = sorted(Path(d).glob("fld_*.gfld"))
        if not files:
            raise DataError(f"{d}: no fld_*.gfld files")
        for f in files:
            fld = read_field(f)
            by_side.setdefault(fld.s, []).append(fld.offsets)
    return {s: np.stack(v) for s, v in by_side.items()}


def cmd_train(cfg: RunConfig, out: Path) -> None:
    data = _load_fields(_require(cfg, "data"))
    sizes = cfg["train.sizes"] or tuple(sorted(data))
    tc = TrainConfig(
        sizes=sizes,
        batch_size=cfg["train.batch_size"],
        lr=cfg["train.lr"],
        steps=cfg["train.steps"],
        seed=cfg["seed"],
        checkpoint_every=cfg["train.checkpoint_every"],
        data_scale=cfg["train.data_scale"],
        data_offset=cfg["train.data_offset"],
        lr_decay=cfg["train.lr_decay"],
        unet=cfg.unet(),
        schedule=cfg.schedule(),
    )
    every = max(1, tc.steps // 20)
    prog = lambda k, l: log.info("step %d loss %.6f", k, l) if k % every == 0 else None
    _, losses = train(tc, data, out_dir=out, resume=cfg["resume"] or None, progress=prog)
    log.info("train: %d steps, final loss %.6f -> %s", len(losses), losses[-1] if losses else float("nan"), out)


def cmd_sample(cfg: RunConfig, out: Path) -> None:
    model, _, tc, _ = load_checkpoint(_require(cfg, "weights"))
    model.to(T.default_dtype())
    s = _require(cfg, "s")
    fields = sample(
        model, s, tc.schedule, SeededRng(cfg["seed"], STAGE_SAMPLE),
        count=cfg["sample.count"], steps_override=cfg["sample.steps"] or None,
        batch=cfg["sample.batch"], data_scale=tc.data_scale, data_offset=tc.data_offset,
    )
    write_batch([unembed(f) for f in fields], out)
    rate = escape_rate(fields)
    (out / "escape_rate.txt").write_text(f"{rate!r}\n")
    print(f"escape_rate={rate:.6f}")
    log.info("sample: %d sets at s=%d -> %s", len(fields), s, out)


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    dirs = _require(cfg, "pointsets")
    groups = {}
    for d in dirs:
        label = Path(d).name or str(d)
        if label in groups:
            raise UsageError(f"duplicate group label {label!r}")
        groups[label] = read_batch(d)
    names = cfg["eval.metrics"]
    unknown = [m for m in names if m not in M.METRICS]
    if unknown:
        raise UsageError(f"unknown metrics {unknown}; choose from {list(M.METRICS)}")
    violin: dict[str, list[float]] = {}
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "index", "metric", "value"])
        for label, sets in groups.items():
            rep = M.evaluate(sets, names, K=cfg["eval.K"])
            for name in names:
                for i, v in enumerate(rep.values[name]):
                    w.writerow([label, i, name, repr(float(v))])
                violin[f"{label}:{name}"] = rep.values[name]
    M.violin_export(violin, out / "violin.csv")
    if cfg["eval.spectrum"]:
        for label, sets in groups.items():
            grid = M.power_spectrum(sets, cfg["eval.spectrum_R"])
            grid.values.astype("<f8").tofile(out / f"spectrum_{label}.f64")
            rad = M.radial_mean(grid)
            with open(out / f"radial_{label}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["nu", "power", "count"])
                for c, p, k in zip(rad.centers, rad.power, rad.counts):
                    w.writerow([repr(float(c)), repr(float(p)), int(k)])
    log.info("eval: %d groups, metrics %s -> %s", len(groups), ",".join(names), out)


def cmd_optimize(cfg: RunConfig, out: Path) -> None:
    model, _, tc, _ = load_checkpoint(_require(cfg, "weights"))
    model.to(T.default_dtype())
    oc = OptimizeConfig(
        steps=cfg["optimize.steps"], iterations=cfg["optimize.iterations"], lr=cfg["optimize.lr"], seed=cfg["seed"]
    )
    res = optimize_input(model, _require(cfg, "s"), oc, tc.schedule, data_scale=tc.data_scale, data_offset=tc.data_offset)
    write_pointset(res.before, out / "before.txt")
    write_pointset(res.after, out / "after.txt")
    with open(out / "trajectory.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "d2"])
        for i, v in enumerate(res.trajectory):
            w.writerow([i, repr(v)])
    print(f"best_iteration={res.best_iteration} d2_before={res.trajectory[0]:.6g} "
          f"d2_best={min(res.trajectory):.6g} escape_before={res.escape_before:.4f} escape_after={res.escape_after:.4f}")


COMMANDS: dict[str, Callable[[RunConfig, Path], None]] = {
    "gen": cmd_gen,
    "embed": cmd_embed,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "optimize": cmd_optimize,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pointdiff", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("settings", nargs="*", metavar="key=value")
    p.add_argument("--seed", type=int, default=None, help="root seed (overrides the config)")
    p.add_argument("--config", type=Path, default=None, help="key=value settings file")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_intermixed_args(argv)
        lines = args.config.read_text().splitlines() if args.config else []
        cfg = RunConfig.resolve(lines, args.settings, args.seed)
    except UsageError as exc:
        print(f"pointdiff: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"pointdiff: cannot read config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    old_level = root.level
    root.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    torch.set_num_threads(max(1, args.threads))
    try:
        T.set_precision(cfg["precision"])
        args.out.mkdir(parents=True, exist_ok=True)
        cfg.dump(args.out / "config.txt")
        COMMANDS[args.command](cfg, args.out)
    except UsageError as exc:
        print(f"pointdiff: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"pointdiff: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"pointdiff: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"pointdiff: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    finally:
        root.removeHandler(handler)
        root.setLevel(old_level)
    return EXIT_OK
