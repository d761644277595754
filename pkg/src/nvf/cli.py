"""Command-line driver: ``nvf sample | fit | extract | eval | ablate``.

Exit codes: 0 on success, 2 for configuration or input errors, 3 when training
diverges.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED = 0, 2, 3

log = logging.getLogger("nvf")


class InputError(Exception):
    pass


def _shape(ref: str):
    from .pipeline import Shape

    if ref.endswith((".obj", ".ply")) and not Path(ref).exists():
        raise InputError(f"mesh not found: {ref}")
    try:
        return Shape.load(ref)
    except (OSError, ValueError) as e:
        raise InputError(f"cannot read shape {ref}: {e}") from None


# ------------------------------------------------------------------ commands


def cmd_sample(args) -> int:
    from .io import write_query_batch

    if args.count < 1:
        raise InputError("--count must be >= 1")
    shape = _shape(args.mesh)
    batch = shape.queries(args.count, args.seed if args.seed is not None else 0)
    write_query_batch(args.out, batch)
    c = batch.tier_counts()
    print(f"tiers far/mid/near: {c['far']}/{c['mid']}/{c['near']}")
    return EXIT_OK


def _load_run(path, seed):
    from .config import load_config

    cfg = load_config(path)
    if seed is not None:
        cfg = cfg.with_overrides(seed=seed)
    return cfg


def cmd_fit(args) -> int:
    from . import plotting
    from .io import write_points_obj
    from .pipeline import fit, make_data
    from .training import TrainingDiverged, write_history_csv

    cfg = _load_run(args.config, args.seed)
    shape = _shape(args.mesh)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cloud, data = make_data(cfg, shape)
    t0 = time.perf_counter()
    try:
        res = fit(cfg, shape, cloud, data)
    except TrainingDiverged as e:
        log.error("training diverged at step %d; last finite step: %s", e.step, e.last_finite)
        print(f"diverged at step {e.step} (last finite step {e.last_finite})", file=sys.stderr)
        return EXIT_DIVERGED
    log.info("trained %d steps in %.1fs", len(res.history), time.perf_counter() - t0)
    res.model.save(out)
    write_points_obj(out.with_name(out.stem + "_cloud.obj"), res.cloud)
    csv_path = out.with_name(out.stem + "_loss.csv")
    write_history_csv(csv_path, res.history)
    if res.history:
        plotting.loss_curves({cfg.mode: res.history}, csv_path.with_suffix(".png"))
        print(f"final l1 {res.history[-1]['l1']:.6g}  total {res.history[-1]['total']:.6g}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_extract(args) -> int:
    from . import autodiff
    from .extraction import ExtractionConfig, extract
    from .fields import parse_analytic
    from .io import read_points, write_obj
    from .model import NvfModel
    from .pipeline import diagnostics_dict

    before = autodiff.backward_pass_count()
    if args.analytic:
        try:
            field = parse_analytic(args.analytic)
        except (ValueError, IndexError) as e:
            raise InputError(str(e)) from None
    else:
        if not args.checkpoint or not args.cloud:
            raise InputError("--checkpoint and --cloud are required without --analytic")
        for p in (args.checkpoint, args.cloud):
            if not Path(p).exists():
                raise InputError(f"file not found: {p}")
        model = NvfModel.load(args.checkpoint)
        field = model.field(read_points(args.cloud))
    try:
        cfg = ExtractionConfig(resolution=args.res, tau_opp=args.tau_opp)
    except ValueError as e:
        raise InputError(str(e)) from None
    mesh, diag, _ = extract(field, cfg)
    passes = autodiff.backward_pass_count() - before
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_obj(out, mesh)
    out.with_name(out.stem + ".diagnostics.json").write_text(json.dumps(diagnostics_dict(diag)) + "\n")
    log.info("backward passes during extraction: %d", passes)
    print(f"{len(mesh.vertices)} vertices, {len(mesh.faces)} faces, "
          f"skipped cells {diag.skipped_cells}, components {diag.components}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .io import read_mesh
    from .metrics import evaluate_meshes

    meshes = []
    for p in (args.mesh_a, args.mesh_b):
        if not Path(p).exists():
            raise InputError(f"mesh not found: {p}")
        meshes.append(read_mesh(p))
    rep = evaluate_meshes(*meshes, n_cd=args.n_cd, n_emd=args.n_emd,
                          seed=args.seed if args.seed is not None else 0, workers=args.threads or 1)
    Path(args.out).write_text(rep.to_json() + "\n")
    print(f"cd {rep.cd:.6g}  emd {rep.emd:.6g}  normal {rep.normal:.6g}  "
          + "  ".join(f"f1@{e['tau']:g} {e['value']:.4g}" for e in rep.f1))
    return EXIT_OK


ABLATION_COLUMNS = ["config", "cd", "emd", "normal", "f1_1e-5", "f1_2e-5", "curl", "l1_step200", "final_l1"]


def run_ablation(cfg, out: Path, verbose_print=print) -> list[dict]:
    """Train and score every variant on every configured shape.

    Returns the aggregate rows (mean over shapes); per-shape rows, figures and
    meshes are written under ``out``.
    """
    import numpy as np

    from . import plotting
    from .io import write_obj
    from .pipeline import ABLATION_VARIANTS, ablation_configs, evaluate_fit, fit, make_data

    out.mkdir(parents=True, exist_ok=True)
    (out / "meshes").mkdir(exist_ok=True)
    variants = ablation_configs(cfg)
    shapes = cfg.shapes or ["sphere:0.4"]
    per_shape = []
    for ref in shapes:
        shape = _shape(cfg.resolve(ref))
        cloud, data = make_data(cfg, shape)
        histories = {}
        checksum = None
        for name in ABLATION_VARIANTS:
            vcfg = variants[name]
            res = fit(vcfg, shape, cloud, data)
            if checksum is None:
                checksum = res.checksum()
            elif res.checksum() != checksum:
                raise RuntimeError(f"{name} trained on different data for {shape.name}")
            mesh, diag, rep, curl = evaluate_fit(res, vcfg, shape)
            write_obj(out / "meshes" / f"{shape.name}_{_slug(name)}.obj", mesh)
            hist = res.history
            row = {
                "shape": shape.name, "config": name,
                "cd": rep.cd if rep else None, "emd": rep.emd if rep else None,
                "normal": rep.normal if rep else None,
                "f1_1e-5": rep.f1[0]["value"] if rep else None,
                "f1_2e-5": rep.f1[1]["value"] if rep else None,
                "curl": curl,
                "l1_step200": hist[199]["l1"] if len(hist) >= 200 else None,
                "final_l1": hist[-1]["l1"] if hist else None,
                "watertight": bool(len(mesh.faces) and mesh.is_watertight()),
                "skipped_cells": diag.skipped_cells,
                "data_checksum": checksum,
            }
            per_shape.append(row)
            histories[name] = hist
            verbose_print(f"{shape.name:>8} {name:<16} cd {_fmt(row['cd'])} normal {_fmt(row['normal'])} "
                          f"curl {_fmt(curl)} l1@200 {_fmt(row['l1_step200'])}")
        plotting.loss_curves(histories, out / f"loss_{shape.name}.png")

    rows = []
    for name in ABLATION_VARIANTS:
        sel = [r for r in per_shape if r["config"] == name]
        agg = {"config": name}
        for col in ABLATION_COLUMNS[1:]:
            vals = [r[col] for r in sel if r[col] is not None]
            agg[col] = float(np.mean(vals)) if len(vals) == len(sel) else None
        rows.append(agg)
    _write_csv(out / "ablation.csv", ABLATION_COLUMNS, rows)
    _write_csv(out / "ablation_per_shape.csv",
               ["shape"] + ABLATION_COLUMNS + ["watertight", "skipped_cells", "data_checksum"], per_shape)
    plotting.ablation_bars(rows, out / "ablation.png")
    return rows


def cmd_ablate(args) -> int:
    cfg = _load_run(args.config, args.seed)
    run_ablation(cfg, Path(args.out))
    print(f"wrote {Path(args.out) / 'ablation.csv'}")
    return EXIT_OK


def _slug(name: str) -> str:
    return name.strip("+").replace("+", "_") or "base"


def _fmt(x) -> str:
    return "-" if x is None else f"{x:.5g}"


def _write_csv(path, cols, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow(["" if r.get(c) is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in cols])


# ------------------------------------------------------------------ entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    common.add_argument("--threads", type=int, default=None, help="BLAS / KD-tree worker threads")
    common.add_argument("--verbose", "-v", action="store_true")

    p = argparse.ArgumentParser(prog="nvf", parents=[common], description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sample", parents=[common], help="write an NVFQ query batch for a mesh")
    s.add_argument("--mesh", required=True, help="OBJ/PLY path or analytic spec such as sphere:0.4")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("fit", parents=[common], help="train a model from a run config")
    s.add_argument("--config", required=True)
    s.add_argument("--mesh", required=True)
    s.add_argument("--out", required=True, help="checkpoint path (NVFW)")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("extract", parents=[common], help="extract a mesh from a checkpoint or analytic field")
    s.add_argument("--checkpoint")
    s.add_argument("--cloud")
    s.add_argument("--analytic", help="e.g. sphere:0.4, torus:0.3,0.1, plane")
    s.add_argument("--res", type=int, default=256)
    s.add_argument("--tau-opp", type=float, default=-0.2)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("eval", parents=[common], help="compare two meshes")
    s.add_argument("--mesh-a", required=True)
    s.add_argument("--mesh-b", required=True)
    s.add_argument("--n-cd", type=int, default=100_000)
    s.add_argument("--n-emd", type=int, default=2048)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", parents=[common], help="run the five-way component ablation")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    from .io import FormatError
    from .model import ConfigError

    try:
        return args.func(args)
    except (InputError, ConfigError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
