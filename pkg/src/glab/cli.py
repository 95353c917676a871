"""Command line front end.

Subcommands: gen-data, train, sample, analyze, ablate, inspect-ckpt.  All
behavior is controlled by a JSON config (see --config / --set); every key
has a default listed at the bottom of --help.  Given identical config and
seeds, every command writes byte-identical artifacts on rerun.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis as ana
from . import checkpoint as ckpt
from . import data as dat
from . import denoiser as dnz
from . import guidance as gdn
from .config import DEFAULTS, apply_overrides, load_config, render_defaults
from .diffusion import DiffusionConfig, make_linear_schedule
from .errors import GlabError, InvalidConfig, UsageError
from .rng import derive_seed

_SEED_FANOUT = [
    ("dataset", "seed", "data"),
    ("model", "init_seed", "model-init"),
    ("training", "seed", "train"),
    ("guidance", "seed", "guidance"),
    ("sampling", "seed", "sample"),
    ("analysis", "seed", "analysis"),
    ("ablate", "seed", "ablate"),
]


def _resolve_threads(args, cfg) -> int:
    if getattr(args, "threads", None):
        return max(1, args.threads)
    if cfg["io"]["threads"]:
        return max(1, int(cfg["io"]["threads"]))
    env = os.environ.get("GLAB_THREADS", "")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise InvalidConfig(f"GLAB_THREADS must be an integer, got {env!r}") from exc
    return 1


def _build_cfg(args) -> dict:
    cfg = load_config(args.config)
    if args.seed is not None:
        for section, key, label in _SEED_FANOUT:
            cfg[section][key] = derive_seed(args.seed, label)
    apply_overrides(cfg, args.set or [])
    return cfg


def _out_dir(args, default: str) -> Path:
    out = Path(args.out) if args.out else Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_layers(value):
    if value is None:
        return None
    if isinstance(value, (list, tuple)):
        return tuple(int(v) for v in value)
    return tuple(int(v) for v in str(value).split(",") if v != "")


def _guidance_config(g: dict, method: str | None = None) -> gdn.GuidanceConfig:
    return gdn.GuidanceConfig(
        method=method if method is not None else g["method"],
        gamma=g["gamma"],
        layers=_parse_layers(g["layers"]),
        perturb_kind=g["perturb"],
        seg_sigma=g["seg_sigma"],
        seed=g["seed"],
    )


def _parse_timesteps(value, t_max: int) -> list[int]:
    if isinstance(value, int):
        count = value
        if count < 1:
            raise InvalidConfig(f"timestep count must be >= 1, got {count}")
        count = min(count, t_max)
        raw = np.linspace(t_max, 1, count)
        out: list[int] = []
        for v in raw:
            iv = int(round(v))
            if not out or out[-1] != iv:
                out.append(iv)
        return out
    parts = [p for p in str(value).split(",") if p.strip() != ""]
    if not parts:
        raise InvalidConfig(f"no timesteps in {value!r}")
    return [int(p) for p in parts]


def _parse_methods(value) -> list[str]:
    if isinstance(value, (list, tuple)):
        names = [str(v) for v in value]
    else:
        names = [p.strip() for p in str(value).split(",") if p.strip()]
    if not names:
        raise InvalidConfig("no methods requested")
    for n in names:
        if n not in [m.value for m in gdn.GuidanceMethod]:
            raise UsageError(f"unknown guidance method {n!r}")
    return names


def _fmt(x: float) -> str:
    return "%.10g" % x


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    cfg = _build_cfg(args)
    d = cfg["dataset"]
    if d["kind"] == "gaussian_mixture":
        ds = dat.gen_gaussian_mixture(d["n_modes"], d["n_per_mode"], d["spread"], d["seed"])
    elif d["kind"] == "bump_images":
        ds = dat.gen_bump_images(d["n_classes"], d["n_per_class"], d["image_size"], d["seed"])
    else:
        raise InvalidConfig(f"unknown dataset kind {d['kind']!r}")
    dat.save_dataset(ds, d["path"])
    print(f"wrote {len(ds)} samples ({d['kind']}) to {d['path']}")
    return 0


def _model_config(cfg: dict, ds: dat.Dataset) -> dnz.DenoiserConfig:
    m = cfg["model"]
    n_classes = int(ds.meta.get("n_classes", int(ds.labels.max()) + 1))
    return dnz.DenoiserConfig(
        input_shape=ds.sample_shape,
        num_classes=n_classes + 1,
        patch_size=m["patch_size"],
        embed_dim=m["embed_dim"],
        depth=m["depth"],
        heads=m["heads"],
        time_embed_dim=m["time_embed_dim"],
        vector_tokens=m["vector_tokens"],
        mlp_ratio=m["mlp_ratio"],
    )


def cmd_train(args) -> int:
    cfg = _build_cfg(args)
    out = _out_dir(args, "runs/train")
    ds = dat.load_dataset(cfg["dataset"]["path"])
    dcfg = DiffusionConfig(**cfg["diffusion"])
    sched = make_linear_schedule(dcfg)
    mcfg = _model_config(cfg, ds)
    model = dnz.Denoiser.init(mcfg, cfg["model"]["init_seed"])
    tr = cfg["training"]
    tcfg = dnz.TrainConfig(epochs=tr["epochs"], batch_size=tr["batch_size"], lr=tr["lr"],
                           cond_dropout=tr["cond_dropout"], seed=tr["seed"])
    result = dnz.train(model, sched, ds.samples, ds.labels, tcfg)
    if not all(np.isfinite(v) for v in result.losses):
        print("error: training diverged (non-finite loss)", file=sys.stderr)
        return 1
    lines = ["epoch,loss"] + [f"{i},{_fmt(v)}" for i, v in enumerate(result.losses)]
    (out / "losses.csv").write_text("\n".join(lines) + "\n")
    ckpt.save_checkpoint(out / "model.ckpt", model, dcfg, {
        "seed": tcfg.seed, "epochs": tcfg.epochs, "steps": result.steps,
        "cond_dropout": tcfg.cond_dropout, "final_loss": result.losses[-1],
        "null_seen": result.null_seen,
    })
    print(f"trained {result.steps} steps, loss {result.losses[0]:.4f} -> {result.losses[-1]:.4f}")
    print(f"checkpoint: {out / 'model.ckpt'}")
    return 0


def cmd_sample(args) -> int:
    cfg = _build_cfg(args)
    out = _out_dir(args, "runs/sample")
    model, dcfg, _ = ckpt.load_checkpoint(args.ckpt)
    sched = make_linear_schedule(dcfg)
    s = cfg["sampling"]
    gcfg = _guidance_config(cfg["guidance"])
    run = gdn.SampleRun(solver=s["solver"], steps=s["steps"], batch=s["batch"],
                        condition=s["cond"], seed=s["seed"])
    result = gdn.sample(model, sched, gcfg, run, snapshots=s["trajectory"])
    if model.cfg.is_image:
        for i, img in enumerate(result.samples):
            dat.write_pgm(out / f"sample_{i:03d}.pgm", dat.to_u8(np.clip(img, -1, 1)))
        for j, (t, state) in enumerate(result.trajectory):
            dat.write_pgm(out / f"traj_{j:02d}_t{t:04d}.pgm",
                          dat.to_u8(np.clip(state[0], -1, 1)))
    else:
        lines = ["x,y"] + [f"{float(x)!r},{float(y)!r}" for x, y in result.samples]
        (out / "samples.csv").write_text("\n".join(lines) + "\n")
        if result.trajectory:
            rows = ["snapshot,t,index,x,y"]
            for j, (t, state) in enumerate(result.trajectory):
                for i, (x, y) in enumerate(state):
                    rows.append(f"{j},{t},{i},{float(x)!r},{float(y)!r}")
            (out / "trajectory.csv").write_text("\n".join(rows) + "\n")
    print(f"{run.batch} samples via {gcfg.method.value} (gamma={gcfg.resolved_gamma()}) -> {out}")
    return 0


def cmd_analyze(args) -> int:
    cfg = _build_cfg(args)
    out = _out_dir(args, "runs/analyze")
    model, dcfg, _ = ckpt.load_checkpoint(args.ckpt)
    sched = make_linear_schedule(dcfg)
    ds = dat.load_dataset(cfg["dataset"]["path"])
    a = cfg["analysis"]
    methods = _parse_methods(args.methods if args.methods else a["methods"])
    timesteps = _parse_timesteps(
        args.timesteps if args.timesteps is not None else a["timesteps"], sched.timesteps
    )
    n_samples = args.n_samples if args.n_samples else a["n_samples"]
    gcfgs = {m: _guidance_config(cfg["guidance"], method=m) for m in methods}
    binning = ana.RadialBinning(n_bins=a["n_bins"], max_radius=a["max_radius"])
    grid = ana.sweep(ds.samples, ds.labels, timesteps, gcfgs, model, sched,
                     n_samples=min(n_samples, len(ds)), seed=a["seed"], binning=binning,
                     conditional=a["conditional"], threads=_resolve_threads(args, cfg))
    (out / "analysis.csv").write_text(ana.grid_to_csv(grid))
    for m in methods:
        for quantity in ("cos", "norm"):
            img = ana.heatmap_u8(grid, m, quantity, upscale=a["upscale"])
            dat.write_pgm(out / f"heat_{m}_{quantity}.pgm", img)
    mid = len(timesteps) // 2
    summary = ", ".join(
        f"{m}={grid.cos_global[mid, im]:+.3f}" for im, m in enumerate(methods)
    )
    print(f"residual/noise cosine at t={timesteps[mid]}: {summary}")
    print(f"wrote {out / 'analysis.csv'} and {2 * len(methods)} heatmaps")
    return 0


ABLATE_KINDS = ["shuffle", "sign_flip", "walsh_hadamard", "haar"]


def cmd_ablate(args) -> int:
    cfg = _build_cfg(args)
    out = _out_dir(args, "runs/ablate")
    model, dcfg, _ = ckpt.load_checkpoint(args.ckpt)
    sched = make_linear_schedule(dcfg)
    ds = dat.load_dataset(cfg["dataset"]["path"])
    if ds.meta.get("kind") != "gaussian_mixture":
        raise InvalidConfig("ablate compares point clouds; dataset must be a gaussian_mixture")
    ab = cfg["ablate"]
    meta = ds.meta
    per_mode = max(1, ab["n_heldout"] // meta["n_modes"])
    held = dat.gen_gaussian_mixture(meta["n_modes"], per_mode, meta["spread"],
                                    derive_seed(meta["seed"], "heldout"))
    bandwidth = ab["mmd_bandwidth"]
    if bandwidth is None:
        bandwidth = ana.median_bandwidth(held.samples, held.samples)
    run = gdn.SampleRun(solver=ab["solver"], steps=ab["steps"], batch=ab["n_sample"],
                        condition=None, seed=ab["seed"])
    g = cfg["guidance"]
    rows: list[tuple[str, float]] = []
    variants = [("none", None)] + [("tpg", kind) for kind in ABLATE_KINDS]
    for method, kind in variants:
        gcfg = gdn.GuidanceConfig(method=method, gamma=g["gamma"],
                                  layers=_parse_layers(g["layers"]),
                                  perturb_kind=kind or "shuffle",
                                  seg_sigma=g["seg_sigma"], seed=g["seed"])
        result = gdn.sample(model, sched, gcfg, run)
        score = ana.mmd(result.samples, held.samples, bandwidth)
        rows.append((kind if kind else "vanilla", score))
    lines = ["method,mmd"] + [f"{name},{_fmt(score)}" for name, score in rows]
    (out / "ablate.csv").write_text("\n".join(lines) + "\n")
    width = max(len(name) for name, _ in rows)
    print(f"mmd vs held-out data (bandwidth {bandwidth:.4g}, {run.batch} samples):")
    for name, score in rows:
        print(f"  {name:<{width}}  {score:.6f}")
    return 0


def cmd_inspect_ckpt(args) -> int:
    info = ckpt.describe(args.ckpt)
    print(f"checkpoint version {info['version']}, {info['param_count']} parameters "
          f"({info['payload_bytes']} weight bytes)")
    print(f"denoiser: {info['denoiser']}")
    print(f"diffusion: {info['diffusion']}")
    print(f"train: {info['train']}")
    for name, shape in info["tensors"]:
        print(f"  {name}  {shape}")
    return 0


# ---------------------------------------------------------------------------
# argument plumbing

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="JSON config file")
    p.add_argument("--set", action="append", metavar="SEC.KEY=VAL",
                   help="override one config value (repeatable)")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--seed", type=int, metavar="N",
                   help="master seed fanned out to all subsystem seeds")
    p.add_argument("--threads", type=int, metavar="N",
                   help="worker threads (default: GLAB_THREADS env var, else 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="glab",
        description="Toy diffusion lab: train small denoisers, sample with "
                    "perturbation-based guidance, and analyze what guidance does.",
        epilog="config keys and defaults:\n" + render_defaults(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    _add_common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a denoiser on a dataset directory")
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="sample from a checkpoint with optional guidance")
    _add_common(p)
    p.add_argument("--ckpt", required=True, metavar="FILE", help="model checkpoint")
    p.add_argument("--method", choices=[m.value for m in gdn.GuidanceMethod],
                   help="guidance method (overrides guidance.method)")
    p.add_argument("--gamma", type=float, help="guidance scale (overrides guidance.gamma)")
    p.add_argument("--steps", type=int, help="solver steps (overrides sampling.steps)")
    p.add_argument("--cond", type=int, help="class condition (overrides sampling.cond)")
    p.add_argument("--save-trajectory", type=int, metavar="K", dest="trajectory",
                   help="save K evenly spaced snapshots")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("analyze", help="sweep guidance residual diagnostics over timesteps")
    _add_common(p)
    p.add_argument("--ckpt", required=True, metavar="FILE", help="model checkpoint")
    p.add_argument("--methods", help="comma-separated methods (overrides analysis.methods)")
    p.add_argument("--timesteps", help="count or comma-separated list "
                                       "(overrides analysis.timesteps)")
    p.add_argument("--n-samples", type=int, dest="n_samples",
                   help="probes per timestep (overrides analysis.n_samples)")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("ablate", help="compare perturbation kinds by sample quality")
    _add_common(p)
    p.add_argument("--ckpt", required=True, metavar="FILE", help="model checkpoint")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("inspect-ckpt", help="print checkpoint header and manifest")
    p.add_argument("ckpt", metavar="FILE", help="model checkpoint")
    p.set_defaults(fn=cmd_inspect_ckpt)

    return parser


def _absorb_flag_overrides(args) -> None:
    """Fold dedicated flags into --set pairs so precedence is uniform."""
    pairs = []
    mapping = [
        ("method", "guidance.method"),
        ("gamma", "guidance.gamma"),
        ("steps", "sampling.steps"),
        ("cond", "sampling.cond"),
        ("trajectory", "sampling.trajectory"),
    ]
    for attr, key in mapping:
        val = getattr(args, attr, None)
        if val is not None:
            pairs.append(f"{key}={val}")
    args.set = (args.set or []) + pairs


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if hasattr(args, "set"):
        _absorb_flag_overrides(args)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except GlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
