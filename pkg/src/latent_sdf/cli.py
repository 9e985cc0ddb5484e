"""Command-line entry point: ``latent-sdf <subcommand> ...``.

Exit status is 0 on success, 1 for usage errors and 2 when a run fails
(missing input, corrupt file, non-finite loss).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import pipeline, serialization
from .autodiff import NonFiniteError
from .geometry import mesh_sample_points, partial_from_full, read_obj, read_xyz, write_obj, write_xyz
from .metrics import EvalReport, best_of, completion_metrics, timed, tmd, uhd, unconditional_metrics
from .modulation import reconstruct_mesh

log = logging.getLogger("latent_sdf")

MOD_FILE = "modulation.dsdf"
DIFF_FILE = "diffusion.dsdf"
EVAL_POINTS = 2048


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    """One ``--flag`` per TrainConfig field; unset flags fall back to ``--config`` then defaults."""
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    for f in fields(pipeline.TrainConfig):
        if f.name in ("phase", "data_dir"):
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            kind = {"int": int, "float": float, "str": str}.get(str(f.type).split(" |")[0], float)
            p.add_argument(flag, dest=f.name, type=kind, default=None)


def _train_config(args, phase: str) -> pipeline.TrainConfig:
    merged = {}
    if args.config:
        merged.update(json.loads(Path(args.config).read_text()))
    for f in fields(pipeline.TrainConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            merged[f.name] = value
    merged["phase"] = phase
    if getattr(args, "data", None):
        merged["data_dir"] = str(args.data)
    try:
        return pipeline.TrainConfig.from_dict(merged)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _echo(out_dir: Path, name: str, resolved: dict) -> None:
    text = json.dumps(resolved, indent=2, sort_keys=True)
    print(text)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{name}.config.json").write_text(text + "\n")


def _task_params(args) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
            if k not in ("func", "verbose")}


def _require(*paths) -> None:
    for p in paths:
        if not Path(p).exists():
            raise FileNotFoundError(f"no such file or directory: {p}")


# -- subcommands ----------------------------------------------------------------------

def cmd_gen_data(args) -> None:
    _echo(args.out, "gen-data", _task_params(args))
    pipeline.write_dataset(args.out, args.train, args.test, args.seed, args.points)


def cmd_train_mod(args) -> None:
    _require(args.data)
    config = _train_config(args, "modulation")
    _echo(args.out, "train-mod", config.to_dict())
    records = pipeline.load_dataset(args.data, "train")
    resume = pipeline.Checkpoint.load(args.resume) if args.resume else None
    log_path = args.out / "modulation_loss.csv"
    if resume is None and log_path.exists():
        log_path.unlink()
    try:
        ckpt = pipeline.train_modulation(config, records, resume, log_path=log_path)
    except pipeline.TrainingError as exc:
        exc.checkpoint.save(args.out / "modulation.last_good.dsdf")
        raise
    ckpt.save(args.out / MOD_FILE)


def cmd_extract_latents(args) -> None:
    _require(args.ckpt, args.data)
    _echo(args.out, "extract-latents", _task_params(args))
    model = pipeline.load_modulation(pipeline.Checkpoint.load(args.ckpt))
    records = pipeline.load_dataset(args.data, args.split)
    latents = pipeline.extract_latents(model, records, args.points)
    pipeline.write_latents(args.out, latents, records, args.data)


def _latent_records(latent_dir: Path, data_dir):
    manifest = json.loads((latent_dir / "latents.json").read_text())
    latents = serialization.load_latents(latent_dir / manifest["latents"])
    records = None
    if data_dir is not None:
        by_name = {r.name: r for r in pipeline.load_dataset(data_dir, "train")}
        records = [by_name[e["name"]] for e in manifest["entries"]]
    return latents, records


def cmd_train_diff(args) -> None:
    _require(args.latents)
    config = _train_config(args, "diffusion")
    if config.conditional and not (args.data and args.mod_ckpt):
        raise UsageError("conditional training needs --data and --mod-ckpt")
    _echo(args.out, "train-diff", config.to_dict())
    latents, records = _latent_records(args.latents, args.data if config.conditional else None)
    encoder = None
    if args.mod_ckpt:
        encoder = pipeline.encoder_state(pipeline.load_modulation(pipeline.Checkpoint.load(args.mod_ckpt)))
    log_path = args.out / "diffusion_loss.csv"
    if log_path.exists():
        log_path.unlink()
    try:
        ckpt = pipeline.train_diffusion(config, latents, records, encoder, log_path=log_path)
    except pipeline.TrainingError as exc:
        exc.checkpoint.save(args.out / "diffusion.last_good.dsdf")
        raise
    ckpt.save(args.out / DIFF_FILE)


def cmd_finetune(args) -> None:
    mod_path, diff_path = args.ckpt / MOD_FILE, args.ckpt / DIFF_FILE
    _require(mod_path, diff_path, args.data)
    config = _train_config(args, "finetune")
    _echo(args.out, "finetune", config.to_dict())
    records = pipeline.load_dataset(args.data, "train")
    log_path = args.out / "finetune_loss.csv"
    if log_path.exists():
        log_path.unlink()
    mod, diff = pipeline.finetune_end_to_end(pipeline.Checkpoint.load(mod_path),
                                             pipeline.Checkpoint.load(diff_path), config, records,
                                             log_path=log_path)
    mod.save(args.out / MOD_FILE)
    diff.save(args.out / DIFF_FILE)


def _load_pair(ckpt_dir: Path):
    _require(ckpt_dir / MOD_FILE, ckpt_dir / DIFF_FILE)
    diff_ckpt = pipeline.Checkpoint.load(ckpt_dir / DIFF_FILE)
    return (pipeline.load_modulation(pipeline.Checkpoint.load(ckpt_dir / MOD_FILE)),
            pipeline.load_denoiser(diff_ckpt), pipeline.schedule_for(diff_ckpt))


def _write_generations(out: Path, gens, stem: str = "sample") -> list[dict]:
    serialization.save_latents(out / "latents.dsdf", np.stack([g.latent for g in gens])
                               if gens else np.zeros((0, 0)))
    rows = []
    for i, g in enumerate(gens):
        name = None
        if not g.empty:
            name = f"{stem}_{i:03d}.obj"
            write_obj(out / name, g.mesh)
        rows.append({"index": i, "mesh": name, "empty": g.empty, "cons": g.cons})
    return rows


def cmd_sample(args) -> None:
    _echo(args.out, "sample", _task_params(args))
    mod, diff, schedule = _load_pair(args.ckpt)
    gens = pipeline.generate(mod, diff, schedule, args.n, None, args.resolution, 0.0, args.seed)
    rows = _write_generations(args.out, gens)
    report = {"n": args.n, "empty": sum(r["empty"] for r in rows), "samples": rows}
    (args.out / "samples.json").write_text(json.dumps(report, indent=2) + "\n")


def cmd_complete(args) -> None:
    _require(args.partial)
    _echo(args.out, "complete", _task_params(args))
    mod, diff, schedule = _load_pair(args.ckpt)
    cloud = read_xyz(args.partial)
    if args.raw_partial:
        partial = cloud
    else:
        partial = partial_from_full(cloud, np.random.default_rng([args.seed, 2**31]), 128, 64)
    write_xyz(args.out / "partial.xyz", partial)
    gens = pipeline.generate(mod, diff, schedule, args.n, partial, args.resolution, args.omega,
                             args.seed)
    rows = _write_generations(args.out, gens, "completion")
    rng = np.random.default_rng([args.seed, 2**31 + 1])
    clouds = []
    for row, g in zip(rows, gens):
        row["uhd"] = None
        if not g.empty:
            clouds.append(mesh_sample_points(g.mesh, EVAL_POINTS, rng))
            row["uhd"] = uhd(partial, clouds[-1:])
    report = {"n": args.n, "omega": args.omega, "empty": sum(r["empty"] for r in rows),
              "UHD": uhd(partial, clouds) if clouds else None,
              "TMD": tmd(clouds) if len(clouds) >= 2 else None,
              "CONS": float(np.mean([g.cons for g in gens])) if gens else None,
              "completions": rows}
    (args.out / "report.json").write_text(json.dumps(report, indent=2) + "\n")


def cmd_mesh(args) -> None:
    _require(args.ckpt, args.latents)
    _echo(args.out, "mesh", _task_params(args))
    model = pipeline.load_modulation(pipeline.Checkpoint.load(args.ckpt))
    latents = serialization.load_latents(args.latents)
    indices = range(len(latents)) if args.index is None else [args.index]
    for i in indices:
        if not 0 <= i < len(latents):
            raise UsageError(f"index {i} out of range for {len(latents)} latents")
        mesh = reconstruct_mesh(model, latents[i], args.resolution)
        if mesh.is_empty:
            log.warning("latent %d decodes to an empty surface", i)
            continue
        write_obj(args.out / f"mesh_{i:03d}.obj", mesh)


def _load_cloud_dir(path: Path, rng) -> tuple[list[str], list[np.ndarray]]:
    """XYZ files as-is; OBJ meshes resampled to 2048 surface points."""
    files = sorted(p for p in path.iterdir() if p.suffix in (".xyz", ".obj"))
    if not files:
        raise FileNotFoundError(f"no .xyz or .obj files in {path}")
    clouds = []
    for f in files:
        clouds.append(read_xyz(f) if f.suffix == ".xyz" else mesh_sample_points(read_obj(f), EVAL_POINTS, rng))
    return [f.stem for f in files], clouds


def _eval_once(args, rng) -> tuple[dict, dict]:
    if args.mode == "uncond":
        _, gen = _load_cloud_dir(args.gen, rng)
        _, ref = _load_cloud_dir(args.ref, rng)
        if len(gen) > len(ref):
            gen = gen[:len(ref)]
        return unconditional_metrics(gen, ref), {"generated": len(gen), "reference": len(ref)}
    inputs = sorted(p for p in args.gen.iterdir() if p.is_dir())
    if not inputs:
        raise FileNotFoundError(f"no completion directories in {args.gen}")
    partials, sets, refs = [], [], []
    for d in inputs:
        partials.append(read_xyz(d / "partial.xyz"))
        sets.append([mesh_sample_points(read_obj(f), EVAL_POINTS, rng)
                     for f in sorted(d.glob("*.obj"))])
        if args.ref:
            refs.append(read_xyz(args.ref / f"{d.name}.xyz"))
    metrics = completion_metrics(partials, sets, refs if args.ref else None)
    return metrics, {"inputs": len(inputs), "completions": sum(len(s) for s in sets)}


def cmd_eval(args) -> None:
    _require(args.gen, *( [args.ref] if args.ref else []))
    if args.mode == "uncond" and not args.ref:
        raise UsageError("unconditional evaluation needs --ref")
    if args.repeats < 1:
        raise UsageError("--repeats must be at least 1")
    _echo(args.out.parent, args.out.stem, _task_params(args))
    runs, counts, total = [], None, 0.0
    for r in range(args.repeats):
        (metrics, counts), elapsed = timed(_eval_once, args, np.random.default_rng([args.seed, r]))
        runs.append(metrics)
        total += elapsed
    best = best_of(runs, args.mode)
    report = EvalReport(best, counts, seed=args.seed, wall_clock=total, runs=runs)
    report.save(args.out)
    print(report.to_json())


# -- wiring ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="latent-sdf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a procedural shape dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--train", type=int, default=200)
    p.add_argument("--test", type=int, default=32)
    p.add_argument("--points", type=int, default=2048)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-mod", help="train the SDF-VAE modulation model")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resume", type=Path)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train_mod)

    p = sub.add_parser("extract-latents", help="save posterior-mean latents for a split")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--points", type=int, default=512)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_extract_latents)

    p = sub.add_parser("train-diff", help="train the latent denoiser")
    p.add_argument("--latents", type=Path, required=True, help="directory from extract-latents")
    p.add_argument("--data", type=Path, help="dataset, for conditional training")
    p.add_argument("--mod-ckpt", type=Path, help="initialises the condition encoder")
    p.add_argument("--out", type=Path, required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train_diff)

    p = sub.add_parser("finetune", help="joint fine-tune of both models")
    p.add_argument("--ckpt", type=Path, required=True, help="directory with both checkpoints")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("sample", help="unconditional generation")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("complete", help="complete a partial point cloud")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--partial", type=Path, required=True)
    p.add_argument("--raw-partial", action="store_true",
                   help="use the cloud as given instead of sampling 128 points and cropping to 64")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--omega", type=float, default=0.0)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_complete)

    p = sub.add_parser("eval", help="score generated shapes against a reference set")
    p.add_argument("--mode", choices=("uncond", "completion"), required=True)
    p.add_argument("--gen", type=Path, required=True)
    p.add_argument("--ref", type=Path)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("report.json"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mesh", help="mesh saved latents")
    p.add_argument("--ckpt", type=Path, required=True, help="modulation checkpoint file")
    p.add_argument("--latents", type=Path, required=True)
    p.add_argument("--index", type=int)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_mesh)
    return parser


def run(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"latent-sdf {args.command}: {exc}", file=sys.stderr)
        return 1
    except (OSError, KeyError, serialization.FormatError, pipeline.TrainingError,
            NonFiniteError, ValueError) as exc:
        print(f"latent-sdf {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
