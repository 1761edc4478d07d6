"""``hip`` command line: pre-training, fine-tuning, evaluation, benchmarks and visual analysis.

Every run writes its fully resolved configuration to ``<out>/config.toml``;
passing that file back with ``--config`` reproduces the run.  The ``HIP_SEED``
environment variable overrides the configured seed.
"""
from __future__ import annotations

import argparse
import csv
import os
import statistics
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import numerics as nx
from .attn import count_costs
from .datasets import SEG_CLASSES, Dataset, DatasetSpec
from .embed import adjacency_similarity, pos_analysis
from .mae import MaskSpec, mask_image, row_autocorrelation, sample_mask
from .model import Model, build, classify, encode, preset
from .pgm import write_pgm
from .tokens import ConfigError
from .train import (MetricsLog, TrainConfig, TrainState, accuracy, finetune_classify, finetune_dense,
                    init_from_checkpoint, mae_val_loss, pretrain_mae, restore_training, save_training,
                    segmentation_miou)

COMMANDS = ("pretrain", "finetune", "eval", "bench", "analyze-pos", "dump-masks", "print-config")
TASK_DATA = {"mae": "smooth-field", "classify": "local-pattern", "segment": "shapes-seg"}


@dataclass
class MaskConfig:
    rate: float = 0.85
    mode: str = "uniform"


@dataclass
class BenchConfig:
    resolutions: list[int] = field(default_factory=lambda: [4096, 16384, 50176])
    presets: list[str] = field(default_factory=lambda: ["hip16-toy", "hip16-toy-flat"])
    batch_size: int = 8
    warmup: int = 5
    steps: int = 20


@dataclass
class RunConfig:
    command: str = "pretrain"
    seed: int = 0
    out_dir: str = "runs/default"
    preset: str = "hip16-toy"
    pos_embed: str = "learned"
    fourier_bands: int = 64
    task: str = "mae"  # mae | classify | segment
    decoder: str = "full"  # full | bottleneck (segment only)
    init_checkpoint: str = ""
    checkpoint: str = ""  # eval / analyze-pos input
    shuffle_pixels: bool = False
    shuffle_seed: int = 1234
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    mask: MaskConfig = field(default_factory=MaskConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dataset"] = self.dataset.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        subs = {"dataset": DatasetSpec, "mask": MaskConfig, "train": TrainConfig, "bench": BenchConfig}
        for key, typ in subs.items():
            if key in d:
                allowed = {f.name for f in fields(typ)}
                bad = sorted(set(d[key]) - allowed)
                if bad:
                    raise ConfigError(f"unknown keys in [{key}]: {bad}")
                d[key] = typ(**d[key])
        return cls(**d)

    def mask_spec(self, groups: int | None = None) -> MaskSpec:
        return MaskSpec(self.mask.rate, self.mask.mode, self.seed, groups)


def dump_toml(cfg: RunConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def load_toml(path: str | Path) -> RunConfig:
    with open(path, "rb") as f:
        return RunConfig.from_dict(tomllib.load(f))


# ---------------------------------------------------------------------------
# wiring


def model_for(cfg: RunConfig, name: str | None = None, tokens: int | None = None) -> Model:
    """Build the preset sized for the configured dataset and task."""
    ds = cfg.dataset
    channels = {"point-set": {0: 3}, "bimodal": {0: 1, 1: 1}}.get(ds.kind, {0: 1})
    grid = (ds.grid, ds.grid) if ds.kind in ("smooth-field", "local-pattern", "shapes-seg") else None
    if tokens is None:
        tokens = {"point-set": ds.points, "bimodal": ds.grid * ds.grid + ds.wave_len}.get(ds.kind, ds.grid * ds.grid)
    out = len(SEG_CLASSES) if cfg.task == "segment" else max(channels.values())
    mcfg = preset(name or cfg.preset, max_tokens=tokens, modalities=channels, grid_shape=grid,
                  num_classes=ds.num_classes, out_channels=out, pos_embed=cfg.pos_embed,
                  fourier_bands=cfg.fourier_bands)
    return build(mcfg, cfg.seed)


def datasets_for(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    shuffle = cfg.shuffle_seed if cfg.shuffle_pixels else None
    return Dataset(cfg.dataset, "train", shuffle), Dataset(cfg.dataset, "val", shuffle)


def _fresh_log(out: Path) -> MetricsLog:
    path = out / "metrics.csv"
    if path.exists():
        path.unlink()
    return MetricsLog(path)


def _prepare(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(dump_toml(cfg))
    return out


def _summary(**metrics) -> None:
    print(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in metrics.items()))


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(cfg: RunConfig) -> dict:
    cfg = replace(cfg, task="mae")
    out = _prepare(cfg)
    model = model_for(cfg)
    train, val = datasets_for(cfg)
    spec = cfg.mask_spec(model.config.blocks[0].groups)
    tcfg = replace(cfg.train, seed=cfg.seed)
    state = TrainState.for_params(model.params, tcfg)
    log = _fresh_log(out)
    pretrain_mae(model, train, val, spec, tcfg, log, state)
    save_training(out / "checkpoint.hipckpt", model, state, cfg.to_dict())
    result = {"val_loss": log.last("val", "loss"), "steps": state.step}
    _summary(**result)
    return result


def cmd_finetune(cfg: RunConfig) -> dict:
    if cfg.task not in ("classify", "segment"):
        raise ConfigError(f"finetune needs task 'classify' or 'segment', got {cfg.task!r}")
    out = _prepare(cfg)
    model = model_for(cfg)
    if cfg.init_checkpoint:
        init_from_checkpoint(model, cfg.init_checkpoint)
    train, val = datasets_for(cfg)
    tcfg = replace(cfg.train, seed=cfg.seed)
    state = TrainState.for_params(model.params, tcfg)
    log = _fresh_log(out)
    if cfg.task == "classify":
        result = {"accuracy": finetune_classify(model, train, val, tcfg, log, state)}
    else:
        result = {"miou": finetune_dense(model, train, val, tcfg, cfg.decoder, log, state)}
    save_training(out / "checkpoint.hipckpt", model, state, cfg.to_dict())
    _summary(**result)
    return result


def _run_config_from_checkpoint(path: str) -> RunConfig:
    from .checkpoint import load_checkpoint
    _, _, meta = load_checkpoint(path)
    if not meta or "run" not in meta:
        raise ConfigError(f"{path} carries no run configuration")
    return RunConfig.from_dict(meta["run"])


def cmd_eval(cfg: RunConfig) -> dict:
    if not cfg.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    run = _run_config_from_checkpoint(cfg.checkpoint)
    model = model_for(run)
    restore_training(cfg.checkpoint, model)
    _, val = datasets_for(run)
    if run.task == "mae":
        result = {"val_loss": mae_val_loss(model, val, run.mask_spec(model.config.blocks[0].groups), len(val))}
    elif run.task == "classify":
        result = {"accuracy": accuracy(model, val)}
    else:
        result = {"miou": segmentation_miou(model, val, run.decoder)}
    _summary(**result)
    return result


def bench_step_time(model: Model, x: np.ndarray, warmup: int, steps: int) -> list[float]:
    """Wall-clock seconds of forward+backward classification steps after ``warmup`` untimed ones."""
    y = np.zeros(x.shape[0], dtype=np.int64)
    times = []
    for i in range(warmup + steps):
        t0 = time.perf_counter()
        loss = nx.cross_entropy(classify(model, encode(model, model.embed(x))), y)
        loss.backward()
        model.params.zero_grad()
        if i >= warmup:
            times.append(time.perf_counter() - t0)
    return times


def cmd_bench(cfg: RunConfig) -> list[dict]:
    """Steps per second for each (preset, resolution), with analytic MAC totals alongside."""
    out = _prepare(cfg)
    b = cfg.bench
    rows = []
    for m in b.resolutions:
        for name in b.presets:
            row = {"preset": name, "tokens": m, "batch": b.batch_size}
            try:
                model = model_for(replace(cfg, task="classify"), name, tokens=m)
                report = count_costs(model.config.encoder_config(), m)
                row["analytic_macs"] = report.total
                x = np.random.default_rng(cfg.seed).standard_normal((b.batch_size, m, 1)).astype(np.float32)
                times = bench_step_time(model, x, b.warmup, b.steps)
                row["median_s"] = statistics.median(times)
                row["steps_per_sec"] = 1.0 / row["median_s"]
            except MemoryError:
                row.update(median_s="OOM", steps_per_sec="OOM")
            rows.append(row)
            print(f"{name} M={m}: {row.get('steps_per_sec')}", file=sys.stderr)
    with open(out / "bench.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["preset", "tokens", "batch", "analytic_macs", "median_s", "steps_per_sec"])
        w.writeheader()
        w.writerows(rows)
    _summary(rows=len(rows))
    return rows


def cmd_analyze_pos(cfg: RunConfig) -> dict:
    """Channel images, probe inner-product maps, PCA channels and explained variance of the positional table."""
    if not cfg.checkpoint:
        raise ConfigError("analyze-pos needs --checkpoint")
    from .checkpoint import load_checkpoint
    params, _, meta = load_checkpoint(cfg.checkpoint)
    if "pos.table" not in params:
        raise ConfigError(f"{cfg.checkpoint} has no learned positional table")
    table = params["pos.table"]
    grid = None
    if meta and meta.get("model", {}).get("grid_shape"):
        grid = tuple(meta["model"]["grid_shape"])
    if grid is not None and int(np.prod(grid)) != table.shape[0]:
        grid = None
    out = _prepare(cfg)
    res = pos_analysis(table, grid)
    shape = grid if grid else (1, table.shape[0])
    for c in range(table.shape[1]):
        write_pgm(out / f"channel_{c:02d}.pgm", table[:, c].reshape(shape))
    for p, img in zip(res["probes"], res["distance_maps"]):
        write_pgm(out / f"probe_{int(p)}.pgm", np.asarray(img).reshape(shape))
    for c, img in enumerate(res["pca_channels"]):
        write_pgm(out / f"pca_{c:02d}.pgm", np.asarray(img).reshape(shape))
    with open(out / "pca_variance.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["component", "variance", "ratio"])
        for i, (v, r) in enumerate(zip(res["explained_variance"], res["explained_ratio"])):
            w.writerow([i, repr(float(v)), repr(float(r))])
    result = {}
    if grid is not None and len(grid) == 2:
        adj, rnd = adjacency_similarity(table, grid)
        result = {"adjacent_cosine": adj, "random_cosine": rnd, "locality_gap": adj - rnd}
    result["channels"] = table.shape[1]
    _summary(**result)
    return result


def cmd_dump_masks(cfg: RunConfig, groups: int = 16) -> dict:
    """Render one mask over the configured grid as a PGM (white visible, black masked)."""
    out = _prepare(cfg)
    n = cfg.dataset.grid
    spec = cfg.mask_spec(groups if cfg.mask.mode == "groupwise" else None)
    mask = sample_mask(n * n, spec)
    img = mask_image(mask, (n, n))
    write_pgm(out / f"mask_{cfg.mask.mode}.pgm", img, rescale=False)
    lag = max(n // groups, 1)
    result = {"masked": mask.num_masked, "row_autocorrelation": row_autocorrelation(img, lag), "lag": lag}
    _summary(**result)
    return result


def cmd_print_config(cfg: RunConfig) -> str:
    text = dump_toml(cfg)
    print(text, end="")
    return text


# ---------------------------------------------------------------------------
# argument parsing


def _csv_ints(s: str) -> list[int]:
    return [int(v) for v in s.split(",") if v]


def _csv_strs(s: str) -> list[str]:
    return [v for v in s.split(",") if v]


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hip", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="TOML run configuration")
        s.add_argument("--out", dest="out_dir")
        s.add_argument("--seed", type=int)
        s.add_argument("--preset")
        s.add_argument("--pos-embed", choices=["learned", "fourier"])
        s.add_argument("--dataset", dest="kind")
        s.add_argument("--grid", type=int)
        s.add_argument("--mask-rate", type=float)
        s.add_argument("--mask-mode", choices=["uniform", "groupwise"])
        s.add_argument("--steps", type=int)
        s.add_argument("--batch-size", type=int)
        s.add_argument("--lr", type=float)
        s.add_argument("--task", choices=["mae", "classify", "segment"])
        s.add_argument("--decoder", choices=["full", "bottleneck"])
        s.add_argument("--init", dest="init_checkpoint")
        s.add_argument("--checkpoint")
        s.add_argument("--shuffle-pixels", choices=["on", "off"])
        s.add_argument("--resolutions", type=_csv_ints)
        s.add_argument("--presets", type=_csv_strs)
        s.add_argument("--groups", type=int, default=16, help="dump-masks: first-block group count")
    return p


def resolve_config(args: argparse.Namespace, environ=os.environ) -> RunConfig:
    """Defaults, then the config file, then flags, then ``HIP_SEED``."""
    cfg = load_toml(args.config) if args.config else RunConfig()
    cfg = replace(cfg, command=args.command)
    if args.task:
        cfg = replace(cfg, task=args.task)
    if args.command == "finetune" and cfg.task == "mae":
        cfg = replace(cfg, task="classify")
    if not args.config and not args.kind:
        cfg = replace(cfg, dataset=replace(cfg.dataset, kind=TASK_DATA[cfg.task]))
    top = {k: getattr(args, k) for k in ("out_dir", "seed", "preset", "decoder", "init_checkpoint", "checkpoint")}
    cfg = replace(cfg, **{k: v for k, v in top.items() if v is not None})
    if args.pos_embed:
        cfg = replace(cfg, pos_embed=args.pos_embed)
    if args.shuffle_pixels:
        cfg = replace(cfg, shuffle_pixels=args.shuffle_pixels == "on")
    ds = {k: v for k, v in (("kind", args.kind), ("grid", args.grid)) if v is not None}
    if ds:
        cfg = replace(cfg, dataset=replace(cfg.dataset, **ds))
    mk = {k: v for k, v in (("rate", args.mask_rate), ("mode", args.mask_mode)) if v is not None}
    if mk:
        cfg = replace(cfg, mask=replace(cfg.mask, **mk))
    tr = {k: v for k, v in (("steps", args.steps), ("batch_size", args.batch_size), ("base_lr", args.lr))
          if v is not None}
    if tr:
        cfg = replace(cfg, train=replace(cfg.train, **tr))
    bn = {k: v for k, v in (("resolutions", args.resolutions), ("presets", args.presets)) if v is not None}
    if bn:
        cfg = replace(cfg, bench=replace(cfg.bench, **bn))
    if environ.get("HIP_SEED"):
        cfg = replace(cfg, seed=int(environ["HIP_SEED"]))
    return cfg


def run(argv: list[str] | None = None, environ=os.environ):
    args = parser().parse_args(argv)
    cfg = resolve_config(args, environ)
    handlers = {"pretrain": cmd_pretrain, "finetune": cmd_finetune, "eval": cmd_eval, "bench": cmd_bench,
                "analyze-pos": cmd_analyze_pos, "print-config": cmd_print_config}
    if args.command == "dump-masks":
        return cmd_dump_masks(cfg, args.groups)
    return handlers[args.command](cfg)


def main(argv: list[str] | None = None) -> int:
    try:
        run(argv)
    except (ConfigError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"hip: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
