"""Command-line workflow: generate -> pretrain-objectness -> train -> evaluate / sweep / localize.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import localize as L
from . import synth
from .config import Config, ConfigError, resolve
from .data import ArrayDataset, load_arrays, write_manifest
from .metrics import MetricsReport
from .micl import NumericError, TrainConfig, curve_csv, train
from .models import AVModel, ObjectnessModel, pretrain_objectness
from .pipeline import MAP_SOURCES, combine, evaluate_many, random_map_baseline, sample_maps
from .tensorio import Checkpoint, TensorFileError, load_checkpoint, save_checkpoint, save_tensors

logger = logging.getLogger("ezvsl")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SWEEP_AXES = ("alpha", "dim", "tau", "strategy")


class DataError(RuntimeError):
    pass


class Workspace:
    """Resolves config-relative paths under a workdir root."""

    def __init__(self, root, cfg: Config):
        self.root = Path(root)
        self.cfg = cfg

    @property
    def data(self) -> Path:
        return self.root / self.cfg.data_dir

    @property
    def out(self) -> Path:
        p = self.root / self.cfg.out_dir
        p.mkdir(parents=True, exist_ok=True)
        return p

    def manifest(self, split: str) -> Path:
        return self.data / f"{split}.tsv"

    def path(self, rel: str) -> Path:
        return self.root / rel

    def echo_config(self, artifact: Path) -> None:
        artifact.with_name(artifact.name + ".cfg").write_text(self.cfg.to_text())


def _classes(cfg: Config):
    return synth.make_classes(cfg.n_classes, cfg.sample_rate, cfg.n_fft)


def _gen_kwargs(cfg: Config) -> dict:
    return dict(
        max_shapes=cfg.max_shapes,
        img_size=cfg.img_size,
        noise_level=cfg.noise_level,
        sample_rate=cfg.sample_rate,
        seconds=cfg.clip_seconds,
        annotators=cfg.annotators,
    )


def _load(ws: Workspace, split: str, errors: Optional[list] = None) -> ArrayDataset:
    path = ws.manifest(split)
    if not path.exists():
        raise DataError(f"manifest {path} not found; run 'generate' first")
    return load_arrays(path, ws.cfg.n_fft, ws.cfg.hop, errors)


# -- commands -------------------------------------------------------------------------------


def cmd_generate(ws: Workspace, force: bool = False) -> List[Path]:
    cfg = ws.cfg
    if ws.data.exists() and any(ws.data.iterdir()) and not force:
        raise DataError(f"{ws.data} exists and is not empty (use --force)")
    if ws.data.exists() and force:
        for p in sorted(ws.data.rglob("*"), reverse=True):
            p.unlink() if p.is_file() else p.rmdir()
    ws.data.mkdir(parents=True, exist_ok=True)
    classes = _classes(cfg)
    kw = _gen_kwargs(cfg)
    if cfg.heard_fraction < 1.0:
        manifests = synth.generate_split(cfg.seed, cfg.n_train, classes, cfg.heard_fraction, cfg.n_test, **kw)
    else:
        manifests = (
            synth.generate_dataset(cfg.seed, cfg.n_train, classes, "train", **kw),
            synth.generate_dataset(cfg.seed, cfg.n_test, classes, "test", **kw),
        )
    paths = [write_manifest(ws.data, m) for m in manifests]
    (ws.data / "dataset.cfg").write_text(cfg.to_text())
    return paths


def _obj_checkpoint(obj: ObjectnessModel, cfg: Config) -> Checkpoint:
    return Checkpoint(obj.state_dict("objectness."), cfg.train_hash())


def load_objectness(ckpt: Checkpoint, n_classes: int) -> ObjectnessModel:
    obj = ObjectnessModel(np.random.default_rng(0), n_classes)
    obj.load_state_dict(ckpt.arrays, "objectness.")
    return obj


def cmd_pretrain_objectness(ws: Workspace, shuffle_labels: bool = False) -> dict:
    cfg = ws.cfg
    data = _load(ws, "train")
    held_split = "test" if ws.manifest("test").exists() else "test_heard"
    heldout = _load(ws, held_split) if ws.manifest(held_split).exists() else None
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 606]))
    obj = ObjectnessModel(rng, cfg.n_classes)
    report = pretrain_objectness(
        obj, data, cfg.obj_epochs, cfg.obj_lr, seed=cfg.seed, heldout=heldout, shuffle_labels=shuffle_labels
    )
    path = ws.path(cfg.objectness_ckpt)
    save_checkpoint(path, _obj_checkpoint(obj, cfg))
    ws.echo_config(path)
    lines = [f"{k},{v:.10g}\n" for k, v in report.items() if isinstance(v, float)]
    lines += [f"epoch_{i}_loss,{v:.10g}\n" for i, v in enumerate(report["epoch_loss"])]
    (ws.out / "objectness_report.csv").write_text("metric,value\n" + "".join(lines))
    return report


def build_model(ws: Workspace, obj: Optional[ObjectnessModel], n_freq: int) -> AVModel:
    cfg = ws.cfg
    model = AVModel.build(cfg.seed, n_freq, cfg.dim)
    if cfg.init_visual == "objectness":
        if obj is None:
            raise DataError("init_visual=objectness needs a pretrained objectness checkpoint")
        model.init_visual_from(obj)
    return model


def _read_objectness(ws: Workspace) -> Optional[ObjectnessModel]:
    path = ws.path(ws.cfg.objectness_ckpt)
    if not path.exists():
        return None
    return load_objectness(load_checkpoint(path), ws.cfg.n_classes)


def model_checkpoint(model: AVModel, obj: Optional[ObjectnessModel], cfg: Config) -> Checkpoint:
    arrays = dict(model.state_dict())
    if obj is not None:
        arrays.update(obj.state_dict("objectness."))
    return Checkpoint(arrays, cfg.train_hash())


def cmd_train(ws: Workspace, checkpoint: Optional[str] = None, curve_name: str = "loss_curve.csv"):
    cfg = ws.cfg
    data = _load(ws, "train")
    obj = _read_objectness(ws)
    if cfg.init_visual == "objectness" and obj is None:
        raise DataError(f"objectness checkpoint {ws.path(cfg.objectness_ckpt)} not found")
    model = build_model(ws, obj, data.specs.shape[1])
    tc = TrainConfig(
        cfg.tau, cfg.batch_size, cfg.lr, cfg.beta1, cfg.beta2, cfg.epochs,
        cfg.matching_strategy, cfg.seed, cfg.permute_pairs,
    )
    path = ws.path(checkpoint or cfg.checkpoint)
    curve_path = ws.out / curve_name
    try:
        result = train(tc, data, model, log_every=1)
    except NumericError as e:
        if e.last_good is not None:
            model.load_state_dict(e.last_good)
            save_checkpoint(path, model_checkpoint(model, obj, cfg))
        curve_path.write_text(curve_csv(e.curve or []))
        raise
    save_checkpoint(path, model_checkpoint(model, obj, cfg))
    ws.echo_config(path)
    curve_path.write_text(curve_csv(result.curve))
    ws.echo_config(curve_path)
    return path, result.curve


def load_models(ws: Workspace, checkpoint: Optional[str] = None):
    cfg = ws.cfg
    path = ws.path(checkpoint or cfg.checkpoint)
    if not path.exists():
        raise DataError(f"checkpoint {path} not found; run 'train' first")
    ckpt = load_checkpoint(path)
    if ckpt.config_hash and ckpt.config_hash != cfg.train_hash():
        logger.warning(
            "checkpoint config hash %s differs from current config %s", ckpt.config_hash, cfg.train_hash()
        )
    n_freq = ckpt.arrays["audio.conv1.weight"].shape[1]
    dim = ckpt.arrays["proj.U_v"].shape[0]
    model = AVModel.build(0, n_freq, dim)
    model.load_state_dict(ckpt.arrays)
    obj = None
    if "objectness.head.weight" in ckpt.arrays:
        obj = load_objectness(ckpt, ckpt.arrays["objectness.head.weight"].shape[0])
    return model, obj


def _finish_report(rep: MetricsReport, cfg: Config, errors) -> MetricsReport:
    rep.errors = list(errors)
    rep.config_hash = cfg.full_hash()
    rep.config.update({"matching_strategy": cfg.matching_strategy, "split": cfg.eval_split})
    return rep


def cmd_evaluate(ws: Workspace, checkpoint: Optional[str] = None, name: str = "metrics") -> MetricsReport:
    cfg = ws.cfg
    model, obj = load_models(ws, checkpoint)
    errors: list = []
    data = _load(ws, cfg.eval_split, errors)
    rep = evaluate_many(data, model, obj, [(cfg.map_source, cfg.alpha)], cfg.theta)[0]
    _finish_report(rep, cfg, errors)
    csv_path = ws.out / f"{name}.csv"
    csv_path.write_text(rep.to_csv())
    header = "".join(f"# {line}\n" for line in cfg.to_text().splitlines())
    (ws.out / f"{name}.txt").write_text(header + rep.to_table())
    ws.echo_config(csv_path)
    return rep


def cmd_baseline(ws: Workspace, name: str = "random_baseline") -> tuple:
    """Monte Carlo CIoU of uniform random grid maps on the evaluation split."""
    cfg = ws.cfg
    data = _load(ws, cfg.eval_split)
    grid = cfg.img_size // 8
    mean, sd, vals = random_map_baseline(data, grid, cfg.baseline_reps, cfg.seed, cfg.theta)
    lines = ["rep,ciou_0.5\n"] + [f"{i},{v:.10g}\n" for i, v in enumerate(vals)]
    lines += [f"mean,{mean:.10g}\n", f"sd,{sd:.10g}\n"]
    path = ws.out / f"{name}.csv"
    path.write_text("".join(lines))
    ws.echo_config(path)
    return mean, sd


def cmd_sweep(ws: Workspace, axis: str, values: Sequence[str]) -> Path:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    base = ws.cfg
    rows = ["axis,value,map_source,alpha,ciou_0.5,auc,n,config_hash\n"]
    if axis == "alpha":
        model, obj = load_models(ws)
        data = _load(ws, base.eval_split)
        settings = [(base.map_source, float(v)) for v in values]
        for v, rep in zip(values, evaluate_many(data, model, obj, settings, base.theta)):
            cfg = base.override({"alpha": v})
            rows.append(_sweep_row(axis, v, cfg, rep))
    else:
        key = {"dim": "dim", "tau": "tau", "strategy": "matching_strategy"}[axis]
        for v in values:
            cfg = base.override({key: v})
            sub = Workspace(ws.root, cfg)
            ckpt = f"sweep_{axis}_{v}.ezvl"
            cmd_train(sub, ckpt, curve_name=f"sweep_{axis}_{v}_curve.csv")
            rep = cmd_evaluate(sub, ckpt, name=f"sweep_{axis}_{v}_metrics")
            rows.append(_sweep_row(axis, v, cfg, rep))
    path = ws.out / f"sweep_{axis}.csv"
    path.write_text("".join(rows))
    ws.echo_config(path)
    return path


def _sweep_row(axis, value, cfg: Config, rep: MetricsReport) -> str:
    return (
        f"{axis},{value},{cfg.map_source},{cfg.alpha:.10g},{rep.ciou:.10g},{rep.auc:.10g},"
        f"{rep.n},{cfg.full_hash()}\n"
    )


def cmd_localize(ws: Workspace, index: int = 0, out: Optional[str] = None) -> Path:
    """Dump every map of one evaluation sample to a tensor file plus a PGM of the final map."""
    cfg = ws.cfg
    model, obj = load_models(ws)
    data = _load(ws, cfg.eval_split)
    if not 0 <= index < len(data):
        raise DataError(f"sample index {index} out of range [0, {len(data)})")
    sl = slice(index, index + 1)
    raw = {k: v[0] for k, v in sample_maps(model, obj, data.images[sl], data.specs[sl]).items() if v}
    final = combine(raw, cfg.map_source, cfg.alpha)
    up = L.upsample_map(final, cfg.img_size, cfg.img_size)
    stem = ws.out / (out or f"map_{data.ids[index]}")
    arrays = {f"raw.{k}": m.grid for k, m in raw.items()}
    arrays["final"] = final.grid
    arrays["final_upsampled"] = up.grid
    arrays["image"] = data.images[index]
    tpath = stem.with_suffix(".ezvl")
    save_tensors(tpath, arrays)
    stem.with_suffix(".pgm").write_bytes(L.to_pgm(up))
    ws.echo_config(tpath)
    return tpath


# -- argument parsing -----------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ezvsl", description=__doc__.splitlines()[0])
    p.add_argument("--workdir", default=".", help="root for every relative path")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="render the synthetic dataset")
    g.add_argument("--force", action="store_true", help="overwrite a non-empty data dir")

    o = sub.add_parser("pretrain-objectness", help="train the objectness network")
    o.add_argument("--shuffle-labels", action="store_true", help="chance-level control")

    t = sub.add_parser("train", help="audio-visual MICL training")
    t.add_argument("--checkpoint")
    t.add_argument("--permute-pairs", action="store_true", help="shuffled-pairs control")

    e = sub.add_parser("evaluate", help="CIoU/AUC on the evaluation split")
    e.add_argument("--checkpoint")
    e.add_argument("--map-source", choices=MAP_SOURCES)
    e.add_argument("--alpha", type=float)
    e.add_argument("--split")
    e.add_argument("--name", default="metrics")

    b = sub.add_parser("baseline", help="random-map Monte Carlo CIoU")
    b.add_argument("--split")

    s = sub.add_parser("sweep", help="one evaluation (and training) per value")
    s.add_argument("--axis", required=True, choices=SWEEP_AXES)
    s.add_argument("--values", required=True, help="comma-separated")
    s.add_argument("--map-source", choices=MAP_SOURCES)

    loc = sub.add_parser("localize", help="dump maps for one sample")
    loc.add_argument("--index", type=int, default=0)
    loc.add_argument("--split")
    loc.add_argument("--out")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    overrides = list(args.overrides)
    for flag, key in (("map_source", "map_source"), ("alpha", "alpha"), ("split", "eval_split")):
        val = getattr(args, flag, None)
        if val is not None:
            overrides.append(f"{key}={val}")
    if getattr(args, "permute_pairs", False):
        overrides.append("permute_pairs=true")
    try:
        cfg = resolve(args.config, overrides)
    except (ConfigError, OSError) as e:
        print(f"ezvsl: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    ws = Workspace(args.workdir, cfg)
    try:
        if args.command == "generate":
            for p in cmd_generate(ws, args.force):
                print(p)
        elif args.command == "pretrain-objectness":
            rep = cmd_pretrain_objectness(ws, args.shuffle_labels)
            print(f"objectness loss {rep['initial_loss']:.4f} -> {rep['final_loss']:.4f}")
            if "heldout_accuracy" in rep:
                print(f"held-out location accuracy {rep['heldout_accuracy']:.4f}")
        elif args.command == "train":
            path, curve = cmd_train(ws, args.checkpoint)
            print(f"{path} (final loss {curve[-1].total:.4f})" if curve else path)
        elif args.command == "evaluate":
            print(cmd_evaluate(ws, args.checkpoint, args.name).to_table(), end="")
        elif args.command == "baseline":
            mean, sd = cmd_baseline(ws)
            print(f"random-map CIoU@0.5 {mean:.4f} +- {sd:.4f}")
        elif args.command == "sweep":
            values = [v.strip() for v in args.values.split(",") if v.strip()]
            print(cmd_sweep(ws, args.axis, values))
        elif args.command == "localize":
            print(cmd_localize(ws, args.index, args.out))
    except ConfigError as e:
        print(f"ezvsl: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"ezvsl: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, TensorFileError, OSError, ValueError) as e:
        print(f"ezvsl: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
