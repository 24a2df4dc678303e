"""``patchagg`` command line: data generation, training, evaluation, ablations.

Every command reads one JSON run config with ``model``, ``loss``, ``data``,
``trainer`` and ``eval`` sections. The flags below override single keys of
it, and the merged result is written into the output directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

EXIT_USAGE = 2

# flag -> (section, key) in the run config
OVERRIDES = {
    "seed": (None, "seed"),
    "variant": ("model", "variant"),
    "epochs": ("trainer", "epochs"),
    "scale": ("model", "scale"),
}

EVAL_DEFAULTS = {"split": "test", "latency_runs": 100, "seeds": [0, 1, 2], "lambdas": [0.0, 0.4], "viz_count": 8}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    trainer: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    seed: int = 0

    SECTIONS = ("model", "loss", "data", "trainer", "eval")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls.SECTIONS) - {"seed"}
        if unknown:
            raise UsageError(f"unknown config sections: {sorted(unknown)}")
        for name in cls.SECTIONS:
            if not isinstance(d.get(name, {}), dict):
                raise UsageError(f"config section {name!r} must be an object")
        bad_eval = set(d.get("eval", {})) - set(EVAL_DEFAULTS) - {"variants"}
        if bad_eval:
            raise UsageError(f"unknown eval config keys: {sorted(bad_eval)}")
        return cls(**{k: dict(d.get(k, {})) for k in cls.SECTIONS}, seed=int(d.get("seed", 0)))

    def to_dict(self) -> dict:
        return {"model": self.model, "loss": self.loss, "data": self.data, "trainer": self.trainer,
                "eval": {**EVAL_DEFAULTS, **self.eval}, "seed": self.seed}

    def apply(self, args: argparse.Namespace) -> None:
        for flag, (section, key) in OVERRIDES.items():
            value = getattr(args, flag, None)
            if value is None:
                continue
            if section is None:
                setattr(self, key, value)
            else:
                getattr(self, section)[key] = value

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "run_config.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def eval_opt(self, key: str):
        return {**EVAL_DEFAULTS, **self.eval}[key]


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file {p} does not exist")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"{p} must hold a JSON object")
    return RunConfig.from_dict(raw)


def _configs(rc: RunConfig):
    from .losses import LossConfig
    from .network import ModelConfig
    from .trainer import TrainConfig

    try:
        return ModelConfig.from_dict(rc.model), LossConfig.from_dict(rc.loss), TrainConfig.from_dict(rc.trainer)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def _require(args, *names) -> None:
    missing = [f"--{n}" for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError(f"{args.command} needs {', '.join(missing)}")


def _load_split(data_dir, name: str):
    from .data import ingest_manifest, resize_samples

    path = Path(data_dir) / f"{name}.tsv"
    if not path.exists():
        return None
    return resize_samples(ingest_manifest(data_dir, f"{name}.tsv"))


def _data_key(data_dir) -> str:
    h = hashlib.sha1()
    for name in ("train.tsv", "val.tsv", "test.tsv", "meta.jsonl"):
        p = Path(data_dir) / name
        if p.exists():
            h.update(p.read_bytes())
    return h.hexdigest()[:12]


def _classes(data_dir) -> list | None:
    from .data.io import read_classes

    return read_classes(data_dir) if data_dir is not None else None


# -- commands ------------------------------------------------------------

def cmd_gen_data(args, rc: RunConfig) -> int:
    from .data import DatasetConfig, generate_dataset, write_split
    from .data.io import META_FILE

    data = dict(rc.data)
    # --seed wins; otherwise a seed inside the data section, then the top-level one
    if args.seed is not None or "seed" not in data:
        data["seed"] = rc.seed
    try:
        cfg = DatasetConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid data config: {exc}") from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / META_FILE).unlink(missing_ok=True)
    script_set, splits = generate_dataset(cfg)
    for name, samples in splits.items():
        write_split(out, name, samples, script_set.classes)
        print(f"{name}: {len(samples)} lines")
    (out / "dataset_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return 0


def cmd_train(args, rc: RunConfig) -> int:
    from .trainer import train

    _require(args, "data")
    model_cfg, loss_cfg, train_cfg = _configs(rc)
    tr = _load_split(args.data, "train")
    if tr is None:
        raise UsageError(f"{args.data} has no train.tsv")
    classes = _classes(args.data)
    if classes is not None:
        model_cfg.num_classes = len(classes)
        rc.model["num_classes"] = len(classes)
    val = _load_split(args.data, "val") or []
    rc.save(args.out)
    result = train(tr, val, model_cfg, loss_cfg, train_cfg, seed=rc.seed, out_dir=args.out)
    if result.epochs:
        last = result.epochs[-1]
        print(f"epoch {last['epoch']}: loss {last['total']:.4f} train_acc {last['train_acc']:.4f} "
              f"val_acc {last['val_acc']:.4f}")
    return 0


def _load_model(path):
    from .checkpoint import CheckpointError, load
    from .trainer import model_from_checkpoint

    try:
        return model_from_checkpoint(load(path))
    except (OSError, CheckpointError, KeyError, ValueError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from exc


def cmd_eval(args, rc: RunConfig) -> int:
    from .evaluator import evaluate

    _require(args, "checkpoint", "data")
    model = _load_model(args.checkpoint)
    split = rc.eval_opt("split")
    samples = _load_split(args.data, split)
    if samples is None:
        raise UsageError(f"{args.data} has no {split}.tsv")
    report = evaluate(model, samples, classes=_classes(args.data), latency_runs=int(rc.eval_opt("latency_runs")))
    rc.save(args.out)
    report.write(args.out, split)
    sys.stdout.write(report.table())
    return 0


def _splits(data_dir) -> dict:
    splits = {name: _load_split(data_dir, name) for name in ("train", "val", "test")}
    if splits["train"] is None or splits["test"] is None:
        raise UsageError(f"{data_dir} needs train.tsv and test.tsv")
    splits["val"] = splits["val"] or []
    return splits


def cmd_ablate(args, rc: RunConfig, lambdas: bool = False) -> int:
    from .evaluator import run_ablation_suite, run_lambda_ablation
    from .network import VARIANTS

    _require(args, "data")
    model_cfg, loss_cfg, train_cfg = _configs(rc)
    classes = _classes(args.data)
    if classes is not None:
        model_cfg.num_classes = len(classes)
    splits = _splits(args.data)
    seeds = [rc.seed] if args.seed is not None else rc.eval_opt("seeds")
    rc.save(args.out)
    cache = Path(args.out) / "runs"
    key = _data_key(args.data)
    try:
        if lambdas:
            table = run_lambda_ablation(splits, model_cfg, loss_cfg, train_cfg, seeds,
                                        rc.eval_opt("lambdas"), cache, key)
        else:
            variants = [args.variant] if args.variant else list(rc.eval.get("variants", VARIANTS))
            table = run_ablation_suite(splits, model_cfg, loss_cfg, train_cfg, seeds, variants, cache, key)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    table.write(Path(args.out) / ("lambda_ablation" if lambdas else "ablation"))
    sys.stdout.write(table.to_tsv())
    return 0


def cmd_viz(args, rc: RunConfig) -> int:
    from .data import ingest_manifest, read_image
    from .evaluator import export_patch_visualization

    _require(args, "checkpoint", "data")
    model = _load_model(args.checkpoint)
    src = Path(args.data)
    if src.is_file():
        items = [(src.stem, read_image(src))]
        classes = None
    elif src.is_dir():
        split = rc.eval_opt("split")
        samples = ingest_manifest(src, f"{split}.tsv")[: int(rc.eval_opt("viz_count"))]
        items = [(Path(s.path).stem, s.image) for s in samples]
        classes = _classes(src)
    else:
        raise UsageError(f"{src} does not exist")
    try:
        for name, img in items:
            view = export_patch_visualization(model, img, args.out, name, classes)
            print(f"{name}: prediction {int(view.y.argmax())} gmp {' '.join(f'{v:.3f}' for v in view.gmp)}")
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return 0


def cmd_grad_check(args, rc: RunConfig) -> int:
    from .gradcheck import main_report

    results, seconds = main_report(rc.seed)
    worst = 0.0
    for name, err in results.items():
        print(f"{name:16s} {err:.3e}")
        worst = max(worst, err)
    print(f"max {worst:.3e} in {seconds:.1f}s")
    return 0 if worst < 1e-5 else 1


def cmd_inspect(args, rc: RunConfig) -> int:
    from .checkpoint import CheckpointError, load
    from .trainer import model_from_checkpoint

    _require(args, "checkpoint")
    try:
        ck = load(args.checkpoint)
    except (OSError, CheckpointError) as exc:
        raise UsageError(f"cannot read {args.checkpoint}: {exc}") from exc
    summary = {k: v for k, v in ck.header.items() if k != "rng"}
    print(json.dumps(summary, indent=2, sort_keys=True))
    for name, arr in sorted(ck.tensors.items()):
        print(f"{name}\t{list(arr.shape)}")
    sys.stdout.write(model_from_checkpoint(ck).layer_manifest())
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "lambda-ablate": lambda a, rc: cmd_ablate(a, rc, lambdas=True),
    "viz": cmd_viz,
    "grad-check": cmd_grad_check,
    "inspect-checkpoint": cmd_inspect,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchagg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run {name}")
        p.add_argument("--config", help="JSON run config (model/loss/data/trainer/eval sections)")
        p.add_argument("--out", default=".", help="output directory (default: current directory)")
        p.add_argument("--seed", type=int, help="overrides config 'seed'")
        p.add_argument("--data", help="dataset directory with train/val/test .tsv manifests, or one image for viz")
        p.add_argument("--checkpoint", help="checkpoint file to load")
        p.add_argument("--variant", help="overrides model.variant (GS, GS+GS, GS+GMP, PA, GS+PA)")
        p.add_argument("--epochs", type=int, help="overrides trainer.epochs")
        p.add_argument("--scale", type=float, help="overrides model.scale, the channel width factor")
    return parser


def _apply_threads() -> None:
    """PAGG_THREADS caps the numeric library's worker threads."""
    value = os.environ.get("PAGG_THREADS")
    if value is None:
        return
    if not value.isdigit() or int(value) < 1:
        raise UsageError(f"PAGG_THREADS must be a positive integer, got {value!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = value


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _apply_threads()
        rc = load_config(args.config)
        rc.apply(args)
        return COMMANDS[args.command](args, rc)
    except UsageError as exc:
        print(f"patchagg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
