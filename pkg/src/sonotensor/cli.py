"""Command-line pipelines: synth, align, compound, project, loo, psnr.

Every command that fills an output directory drops exactly one
run_manifest.json there, recording the command, the effective config, input
hashes, the seed, the tool version, and wall time. All data outputs are
deterministic given the same inputs and seeds; the manifest is the only
file carrying timing. On failure, partially written outputs are removed and
the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .evaluate import lambda_sweep, psnr, sweep_csv
from .model import RobustLoss, project_volume
from .solver import SolveConfig, compound_baseline, compound_logeuclidean
from .synth import PhantomSpec, make_phantom, render_views, spanning_directions
from .volume import (
    RigidTransform,
    TensorVolume,
    ViewGeometry,
    compose_chain,
    load_views,
    read_tensor,
    read_volume,
    resample,
    save_views_manifest,
    select_reference,
    unit_direction,
    write_tensor,
    write_volume,
)


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _thread_count() -> int:
    raw = os.environ.get("SONOTENSOR_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"SONOTENSOR_THREADS must be an integer, got {raw!r}")
    return max(1, n)


class _Outputs:
    """Tracks files written by a command so failures leave nothing behind."""

    def __init__(self, out_dir: str | None = None):
        self.paths: list[str] = []
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)

    def add(self, path: str) -> str:
        self.paths.append(path)
        return path

    def discard_all(self) -> None:
        for path in self.paths:
            try:
                os.remove(path)
            except OSError:
                pass


def _run_manifest(outputs: _Outputs, out_dir: str, command: str, config: dict,
                  inputs: list[str], seed=None, t0: float = 0.0, extras: dict | None = None):
    manifest = {
        "command": command,
        "config": config,
        "inputs": {os.path.basename(p): _sha256(p) for p in inputs},
        "seed": seed,
        "tool_version": __version__,
        "wall_time_s": time.perf_counter() - t0,
    }
    if extras:
        manifest.update(extras)
    _write_json(outputs.add(os.path.join(out_dir, "run_manifest.json")), manifest)


def _write_pgm(path: str, image: np.ndarray) -> tuple[float, float]:
    """8-bit binary PGM with min-max windowing; returns the window used."""
    lo, hi = float(image.min()), float(image.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    data = np.clip((image - lo) * scale, 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())
    return lo, hi


def _identity_transform_dict() -> dict:
    return RigidTransform.identity().to_dict()


def _resample_to_reference(views):
    """Pull all views onto the middle volume's grid unless already there."""
    if all(geom.transform.is_identity(1e-9) for _, geom in views):
        ref = select_reference(len(views))
        grid = views[ref][0].grid
        if all(vol.grid == grid for vol, _ in views):
            return views
    ref = select_reference(len(views))
    grid = views[ref][0].grid
    out = []
    for vol, geom in views:
        if geom.transform.is_identity(1e-9) and vol.grid == grid:
            out.append((vol, ViewGeometry(geom.direction, source_id=geom.source_id)))
        else:
            res = resample(vol, geom.transform, grid)
            out.append((res, ViewGeometry(geom.direction, source_id=geom.source_id)))
    return out


def _solve_config(args) -> SolveConfig:
    """Build the solve config with precedence flag > config file > default."""
    values: dict = {}
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            file_cfg = json.load(fh)
        loss_kind = file_cfg.pop("loss", None)
        loss_scale = file_cfg.pop("loss_scale", 1.0)
        if loss_kind:
            values["loss"] = RobustLoss(loss_kind, loss_scale)
        allowed = {f.name for f in dataclasses.fields(SolveConfig)}
        bad = set(file_cfg) - allowed
        if bad:
            raise ValueError(f"unknown config keys: {sorted(bad)}")
        values.update(file_cfg)
    if getattr(args, "lam", None) is not None:
        values["lam"] = args.lam
    if getattr(args, "delta", None) is not None:
        values["delta"] = args.delta
    if getattr(args, "loss", None) is not None:
        values["loss"] = RobustLoss(args.loss, args.loss_scale)
    if getattr(args, "max_iterations", None) is not None:
        values["max_iterations"] = args.max_iterations
    return SolveConfig(**values)


def _config_snapshot(cfg: SolveConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["loss"] = {"kind": cfg.loss.kind, "scale": cfg.loss.scale}
    return d


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(args) -> int:
    t0 = time.perf_counter()
    spec = PhantomSpec.from_json(args.spec)
    outputs = _Outputs(args.out_dir)
    try:
        truth = make_phantom(spec)
        dirs = spanning_directions(spec.n_views)
        views = render_views(truth, dirs, spec.noise_sigma, spec.seed)
        write_tensor(truth, outputs.add(os.path.join(args.out_dir, "truth.cvol")))
        entries = []
        for k, (vol, geom) in enumerate(views):
            name = f"view_{k:03d}.cvol"
            write_volume(vol, outputs.add(os.path.join(args.out_dir, name)))
            entries.append({
                "volume": name,
                "direction": [float(v) for v in geom.direction],
                "transform": _identity_transform_dict(),
            })
        save_views_manifest(entries, outputs.add(os.path.join(args.out_dir, "views.json")))
        _run_manifest(outputs, args.out_dir, "synth",
                      {"spec": dataclasses.asdict(spec) | {"regions": len(spec.regions)}},
                      [args.spec], seed=spec.seed, t0=t0)
    except BaseException:
        outputs.discard_all()
        raise
    print(f"wrote {len(views)} views + truth to {args.out_dir}")
    return 0


def cmd_align(args) -> int:
    t0 = time.perf_counter()
    with open(args.pairwise, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    pairwise = [RigidTransform.from_dict(d) for d in raw]
    n = len(pairwise) + 1
    ref = select_reference(n) if args.ref == "auto" else int(args.ref)
    if not 0 <= ref < n:
        raise ValueError(f"reference index {ref} out of range for {n} volumes")
    chained = [compose_chain(pairwise, i, ref) for i in range(n)]

    if args.refined:
        with open(args.refined, "r", encoding="utf-8") as fh:
            overrides = json.load(fh)
        for key, d in overrides.items():
            i = int(key)
            if not 0 <= i < n:
                raise ValueError(f"refined transform index {i} out of range")
            chained[i] = RigidTransform.from_dict(d)

    outputs = _Outputs(os.path.dirname(os.path.abspath(args.out)) or ".")
    try:
        _write_json(outputs.add(args.out), {
            "reference": ref,
            "transforms": [T.to_dict() for T in chained],
        })
        if args.apply:
            views = load_views(args.apply)
            if len(views) != n:
                raise ValueError(f"manifest has {len(views)} views but the chain covers {n}")
            out_dir = args.apply_out or os.path.dirname(os.path.abspath(args.out))
            os.makedirs(out_dir, exist_ok=True)
            grid = views[ref][0].grid
            entries = []
            for i, (vol, geom) in enumerate(views):
                res = resample(vol, chained[i], grid)
                name = f"aligned_{i:03d}.cvol"
                write_volume(res, outputs.add(os.path.join(out_dir, name)))
                entries.append({
                    "volume": name,
                    "direction": [float(v) for v in geom.direction],
                    "transform": _identity_transform_dict(),
                })
            save_views_manifest(entries, outputs.add(os.path.join(out_dir, "views.json")))
    except BaseException:
        outputs.discard_all()
        raise
    print(f"reference {ref}; wrote {args.out}")
    return 0


def cmd_compound(args) -> int:
    t0 = time.perf_counter()
    cfg = _solve_config(args)
    views = _resample_to_reference(load_views(args.manifest))
    outputs = _Outputs(args.out_dir)
    try:
        if args.method == "logeuclid":
            tensor, report = compound_logeuclidean(views, cfg)
            write_tensor(tensor, outputs.add(os.path.join(args.out_dir, "tensor.cvol")))
            report_dict = report.to_dict() | {"method": "logeuclid"}
        else:
            result = compound_baseline(views)
            entry_vol = TensorVolume(result.entries, result.spacing, result.origin,
                                     mask=result.mask)
            write_tensor(entry_vol, outputs.add(os.path.join(args.out_dir, "tensor.cvol")))
            report_dict = {
                "method": "baseline",
                "n_indefinite": result.n_indefinite,
                "n_valid": int(result.mask.sum()),
                "min_eigenvalue": float(result.min_eigenvalue[result.mask].min())
                if result.mask.any() else None,
            }
        _write_json(outputs.add(os.path.join(args.out_dir, "solve_report.json")), report_dict)
        _run_manifest(outputs, args.out_dir, "compound",
                      {"method": args.method, "solve": _config_snapshot(cfg)},
                      [args.manifest], t0=t0)
    except BaseException:
        outputs.discard_all()
        raise
    print(f"compounded {len(views)} views -> {os.path.join(args.out_dir, 'tensor.cvol')}")
    return 0


def cmd_project(args) -> int:
    t0 = time.perf_counter()
    tensor = read_tensor(args.tensor)
    v = unit_direction([float(s) for s in args.direction.split(",")])
    outputs = _Outputs(args.out_dir)
    try:
        proj = project_volume(tensor, v)
        write_volume(proj, outputs.add(os.path.join(args.out_dir, "projection.cvol")))
        extras = {"direction": [float(x) for x in v]}
        if args.slice_pgm:
            k = proj.dims[2] // 2
            image = proj.values[:, :, k].T
            lo, hi = _write_pgm(outputs.add(os.path.join(args.out_dir, args.slice_pgm)), image)
            extras["pgm_window"] = [lo, hi]
            extras["pgm_slice_z"] = k
        _run_manifest(outputs, args.out_dir, "project", {"direction": args.direction},
                      [args.tensor], t0=t0, extras=extras)
    except BaseException:
        outputs.discard_all()
        raise
    print(f"projected along ({args.direction}) -> {args.out_dir}")
    return 0


def cmd_loo(args) -> int:
    t0 = time.perf_counter()
    cfg = _solve_config(args)
    lambdas = [float(s) for s in args.lambdas.split(",") if s != ""]
    views = _resample_to_reference(load_views(args.manifest))
    outputs = _Outputs(args.out_dir)
    try:
        results = lambda_sweep(views, lambdas, cfg,
                               include_baseline=not args.no_baseline,
                               workers=_thread_count())
        table = {
            "dataset": args.dataset,
            "lambdas": lambdas,
            "delta": cfg.delta,
            "results": [r.to_dict() for r in results],
        }
        _write_json(outputs.add(os.path.join(args.out_dir, "loo.json")), table)
        with open(outputs.add(os.path.join(args.out_dir, "loo.csv")), "w",
                  encoding="utf-8", newline="") as fh:
            fh.write(sweep_csv(results, args.dataset))
        _run_manifest(outputs, args.out_dir, "loo",
                      {"lambdas": lambdas, "solve": _config_snapshot(cfg),
                       "baseline": not args.no_baseline},
                      [args.manifest], t0=t0)
    except BaseException:
        outputs.discard_all()
        raise
    best = max((r for r in results if r.method == "logeuclid"), key=lambda r: r.mean_psnr_db)
    print(f"best mean PSNR {best.mean_psnr_db:.2f} dB at lambda={best.lam}")
    return 0


def cmd_psnr(args) -> int:
    a = read_volume(args.reference)
    b = read_volume(args.other)
    value = psnr(a, b, peak=args.peak)
    print("inf" if value == float("inf") else f"{value:.6f}")
    return 0


# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sonotensor",
        description="Compound multi-view scalar volumes into a positive-definite "
                    "tensor volume and render/evaluate directional projections.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a phantom and its directional views")
    p.add_argument("spec", help="phantom spec JSON")
    p.add_argument("out_dir")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("align", help="chain pairwise rigid transforms to the reference")
    p.add_argument("pairwise", help="JSON list of N-1 neighbor transforms")
    p.add_argument("out", help="output JSON of per-volume transforms")
    p.add_argument("--ref", default="auto", help="reference index or 'auto' (middle)")
    p.add_argument("--refined", help="JSON map of externally refined transforms to apply")
    p.add_argument("--apply", help="views manifest to resample into the reference frame")
    p.add_argument("--apply-out", help="directory for resampled volumes")
    p.set_defaults(fn=cmd_align)

    p = sub.add_parser("compound", help="fit the tensor volume to the views")
    p.add_argument("manifest", help="acquisition manifest JSON")
    p.add_argument("out_dir")
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--method", choices=["logeuclid", "baseline"], default="logeuclid")
    p.add_argument("--loss", choices=["identity", "huber"], default=None)
    p.add_argument("--loss-scale", type=float, default=1.0)
    p.add_argument("--max-iterations", type=int, default=None)
    p.add_argument("--config", help="JSON file of solver settings (flags win)")
    p.set_defaults(fn=cmd_compound)

    p = sub.add_parser("project", help="render the volume seen along a direction")
    p.add_argument("tensor", help="tensor .cvol file")
    p.add_argument("out_dir")
    p.add_argument("--direction", required=True, help="dx,dy,dz (normalized automatically)")
    p.add_argument("--slice-pgm", help="also export the middle z slice to this PGM name")
    p.set_defaults(fn=cmd_project)

    p = sub.add_parser("loo", help="leave-one-out PSNR sweep over lambda")
    p.add_argument("manifest")
    p.add_argument("out_dir")
    p.add_argument("--lambdas", default="0,1,10,100")
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--loss", choices=["identity", "huber"], default=None)
    p.add_argument("--loss-scale", type=float, default=1.0)
    p.add_argument("--max-iterations", type=int, default=None)
    p.add_argument("--config", help="JSON file of solver settings (flags win)")
    p.add_argument("--no-baseline", action="store_true")
    p.add_argument("--dataset", default="synthetic", help="dataset label for the tables")
    p.set_defaults(fn=cmd_loo)

    p = sub.add_parser("psnr", help="PSNR between two scalar volumes")
    p.add_argument("reference")
    p.add_argument("other")
    p.add_argument("--peak", type=float, default=None)
    p.set_defaults(fn=cmd_psnr)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
