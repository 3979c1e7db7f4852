"""Command line entry point: ``bistet <subcommand> [flags]``.

Subcommands: gen-data, train, eval, predict, attention, params.
Exit status is 0 on success, 1 on user error and 2 on internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from .autodiff import ContractError, NumericError, ShapeError
from .data import (
    CodecError,
    DatasetError,
    DatasetSpec,
    LabeledImage,
    LexiconError,
    RenderError,
    generate_dataset,
    load_dataset,
    load_lexicon,
    read_manifest,
    read_pgm,
)
from .model import LengthError, ModelConfig, count_parameters, normalize_pixels
from .nn import ConfigError
from .train import CheckpointError, TrainConfig, TrainingError, load_checkpoint, run_training

log = logging.getLogger("bistet")

USER_ERRORS = (
    ConfigError,
    CodecError,
    DatasetError,
    LexiconError,
    RenderError,
    CheckpointError,
    LengthError,
    ContractError,
    ShapeError,
    TrainingError,
    NumericError,
    OSError,
    json.JSONDecodeError,
)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    train_dir: Optional[str] = None
    test_dir: Optional[str] = None
    out: Optional[str] = None
    checkpoint: Optional[str] = None
    lexicon: Optional[str] = None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**{k: v for k, v in d.items() if k not in ("model", "train", "data")})
        if "model" in d:
            cfg.model = ModelConfig.from_dict(d["model"])
        if "train" in d:
            cfg.train = TrainConfig.from_dict(d["train"])
        if "data" in d:
            try:
                cfg.data = DatasetSpec.from_dict(d["data"])
            except (TypeError, ValueError) as e:
                raise ConfigError(str(e)) from None
        return cfg

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["model"], d["train"], d["data"] = self.model.to_dict(), self.train.to_dict(), self.data.to_dict()
        return d


def load_run_config(args) -> RunConfig:
    raw = {}
    if args.config:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if not isinstance(raw, dict):
            raise ConfigError(f"{args.config}: top level must be a JSON object")
    try:
        cfg = RunConfig.from_dict(raw)
    except TypeError as e:
        raise ConfigError(str(e)) from None
    if args.seed is not None:
        cfg.train.seed = args.seed
        cfg.data.seed = args.seed
    for name in ("out", "checkpoint", "lexicon"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    for name in ("train_dir", "test_dir"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    log.info("resolved config %s", json.dumps(cfg.to_dict(), sort_keys=True))
    return cfg


def _require(value, what: str):
    if value is None:
        raise ConfigError(f"missing {what}")
    return value


def _load_items(data_dir, config: ModelConfig) -> List[LabeledImage]:
    items = load_dataset(data_dir, normalize=False, vocab=config.vocab)
    return [LabeledImage(normalize_pixels(it.pixels, config), it.transcript, it.name) for it in items]


def _model_from_checkpoint(path):
    ck = load_checkpoint(path)
    return ck.config, ck.to_parameters()


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args, cfg: RunConfig) -> int:
    spec = cfg.data
    if args.count is not None:
        spec.count = args.count
    out = _require(cfg.out, "--out")
    manifest = generate_dataset(spec, out)
    print(f"{out}\t{manifest['count']}\tmean={manifest['mean']:.6f}\tstd={manifest['std']:.6f}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    train_dir = _require(cfg.train_dir, "--train-dir")
    out = Path(_require(cfg.out, "--out"))
    manifest = read_manifest(train_dir)
    model_cfg = replace(cfg.model, pixel_mean=float(manifest["mean"]), pixel_std=float(manifest["std"]))
    model_cfg.validate()
    cfg.model = model_cfg
    train_items = _load_items(train_dir, model_cfg)
    eval_items = _load_items(cfg.test_dir, model_cfg) if cfg.test_dir else None
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    run_training(cfg.train, model_cfg, train_items, out, eval_set=eval_items)
    print(out / "final.bst")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    from .infer import evaluate_model

    config, params = _model_from_checkpoint(_require(cfg.checkpoint, "--checkpoint"))
    items = _load_items(_require(cfg.test_dir, "--test-dir"), config)
    lexicon = load_lexicon(cfg.lexicon) if cfg.lexicon else None
    report = evaluate_model(items, params, config, args.direction, lexicon)
    text = report.to_tsv()
    if cfg.out:
        Path(cfg.out).parent.mkdir(parents=True, exist_ok=True)
        Path(cfg.out).write_text(text, encoding="utf-8", newline="\n")
    sys.stdout.write(text)
    return 0


def _image_paths(inputs) -> List[Path]:
    paths = []
    for p in map(Path, inputs):
        paths.extend(sorted(p.glob("*.pgm")) if p.is_dir() else [p])
    if not paths:
        raise ContractError("no input images")
    return paths


def _read_images(paths, config: ModelConfig) -> np.ndarray:
    imgs = []
    for p in paths:
        px = read_pgm(p)
        if px.shape != (config.image_height, config.image_width):
            raise ShapeError(f"{p}: image is {px.shape[1]}x{px.shape[0]}, model expects "
                             f"{config.image_width}x{config.image_height}")
        imgs.append(normalize_pixels(px, config))
    return np.stack(imgs)


def cmd_predict(args, cfg: RunConfig) -> int:
    from .infer import lexicon_predict, predict_many

    config, params = _model_from_checkpoint(_require(cfg.checkpoint, "--checkpoint"))
    paths = _image_paths(args.images)
    lexicon = load_lexicon(cfg.lexicon) if cfg.lexicon else None
    results = predict_many(_read_images(paths, config), params, config, args.direction)
    for path, r in zip(paths, results):
        text = lexicon_predict(r.text, lexicon) if lexicon else r.text
        print(f"{path.name}\t{text}\t{r.direction.value}\t{r.probability:.6g}")
    return 0


def cmd_attention(args, cfg: RunConfig) -> int:
    from .infer import character_direction_score, dump_attention, extract_attention

    config, params = _model_from_checkpoint(_require(cfg.checkpoint, "--checkpoint"))
    paths = _image_paths(args.images)
    out = Path(_require(cfg.out, "--out"))
    directions = [d.value for d in config.directions] if args.direction == "bi" else [args.direction]
    print("image\tdirection\ttext\tscore\tdegenerate")
    for path, img in zip(paths, _read_images(paths, config)):
        for d in directions:
            res = extract_attention(img, d, params, config)
            dump_attention(res, out, prefix=path.stem)
            if res.n_chars >= 3:
                s = character_direction_score(res)
                score, flag = f"{s.r:.4f}", str(s.degenerate).lower()
            else:
                score, flag = "", "short"
            print(f"{path.name}\t{d}\t{res.text}\t{score}\t{flag}")
    return 0


def cmd_params(args, cfg: RunConfig) -> int:
    config = cfg.model
    if cfg.checkpoint:
        config = load_checkpoint(cfg.checkpoint).config
    print("component\tparameters")
    for name, n in count_parameters(config).items():
        print(f"{name}\t{n}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "attention": cmd_attention,
    "params": cmd_params,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (sections: model, train, data)")
    common.add_argument("--seed", type=int, help="overrides train.seed and data.seed")
    common.add_argument("--checkpoint", help="model checkpoint (.bst)")
    common.add_argument("--out", help="output directory or file")
    common.add_argument("--direction", choices=["ltr", "rtl", "bi"], default="bi")
    common.add_argument("--lexicon", help="word list, one per line")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="bistet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen-data", parents=[common], help="render a synthetic dataset")
    g.add_argument("--count", type=int)
    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--train-dir")
    t.add_argument("--test-dir", help="held-out set for periodic evaluation")
    e = sub.add_parser("eval", parents=[common], help="word accuracy report")
    e.add_argument("--test-dir")
    pr = sub.add_parser("predict", parents=[common], help="transcribe PGM images")
    pr.add_argument("images", nargs="+", help="PGM files or directories")
    a = sub.add_parser("attention", parents=[common], help="dump attention maps and direction scores")
    a.add_argument("images", nargs="+")
    sub.add_parser("params", parents=[common], help="parameter counts per component")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = load_run_config(args)
        return COMMANDS[args.command](args, cfg)
    except USER_ERRORS as e:
        print(f"bistet {args.command}: error: {e}", file=sys.stderr)
        return 1
    except Exception:  # noqa: BLE001
        traceback.print_exc()
        print(f"bistet {args.command}: internal error", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
