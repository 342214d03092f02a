"""Command-line entry point: ``emogen <subcommand> [flags]``.

Settings come from an optional ``--config`` file of ``key = value`` lines,
overridden by flags. Every run that writes outputs also writes the resolved
settings to ``<out>.config.json``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

log = logging.getLogger("emogen")

SUBCOMMANDS = ("build-dataset", "pretrain", "finetune", "generate", "eval-predict",
               "train-regressor", "eval-emotion", "gradcheck")

# config keys and their types; anything else in a config file is a usage error
CONFIG_KEYS = {
    "n_layers": int, "d_model": int, "n_heads": int, "d_ff": int, "max_len": int, "dropout": float,
    "d_cond": int, "embedding_init": str,
    "lr": float, "lr_low": float, "batch_size": int, "steps": int, "window": int,
    "checkpoint_every": int, "augment": int,
    "p": float, "temperature": float, "samples": int,
    "seed": int, "tokens": int, "variant": str,
}
DEFAULTS = {"n_layers": 2, "d_model": 128, "n_heads": 4, "d_ff": 512, "max_len": 1216, "dropout": 0.1,
            "embedding_init": "truncate", "lr": 2e-5, "lr_low": 2e-6, "batch_size": 4, "steps": 1000,
            "window": 1000, "checkpoint_every": 0, "augment": 1, "p": 0.7, "temperature": 1.2,
            "samples": 8, "seed": 0, "tokens": 4096}


class UsageError(Exception):
    pass


def read_config(path) -> dict:
    out = {}
    with open(path) as f:
        for n, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in CONFIG_KEYS:
                raise UsageError(f"{path}:{n}: unknown key {key!r}")
            try:
                out[key] = CONFIG_KEYS[key](value)
            except ValueError:
                raise UsageError(f"{path}:{n}: bad value for {key}: {value!r}") from None
    return out


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="emogen", description="Emotion-conditioned symbolic music generation.")
    sub = p.add_subparsers(dest="command", required=True, metavar="{" + ",".join(SUBCOMMANDS) + "}")

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="key = value settings file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output path or prefix")
        return sp

    sp = add("build-dataset", "scan MIDI files, join labels, write dataset and manifest")
    sp.add_argument("--root", required=True, help="MIDI corpus directory")
    sp.add_argument("--metadata", required=True, help="JSON: file stem -> list of match records")
    sp.add_argument("--offline", action="store_true", help="use the fixture table, no network")
    sp.add_argument("--fixtures", help="JSON feature table for offline mode")
    sp.add_argument("--cache", help="feature cache directory")

    sp = add("pretrain", "train the unconditional model")
    sp.add_argument("--root", required=True, help="MIDI corpus directory")
    sp.add_argument("--manifest", help="restrict to the training split of this manifest")

    sp = add("finetune", "train a conditional variant from a pretrained checkpoint")
    sp.add_argument("--variant", required=True)
    sp.add_argument("--checkpoint", help="pretrained unconditional checkpoint (omit to start fresh)")
    sp.add_argument("--root", required=True)
    sp.add_argument("--manifest", required=True)

    sp = add("generate", "sample a token sequence and render it to MIDI")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--variant")
    sp.add_argument("--valence", type=float)
    sp.add_argument("--arousal", type=float)
    sp.add_argument("--schedule", help="JSON condition schedule")
    sp.add_argument("--tokens", type=int)

    sp = add("eval-predict", "teacher-forced NLL and top-1/top-5 on the test split")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--root", required=True)
    sp.add_argument("--manifest", required=True)

    sp = add("train-regressor", "train the valence/arousal regressor")
    sp.add_argument("--root", required=True)
    sp.add_argument("--manifest", required=True)

    sp = add("eval-emotion", "emotion error of generated samples over the condition grid")
    sp.add_argument("--checkpoint", required=True, action="append", help="repeat for several models")
    sp.add_argument("--regressor", required=True)
    sp.add_argument("--tokens", type=int)

    add("gradcheck", "finite-difference check of every differentiable op")
    return p


def resolve(args) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        cfg.update(read_config(args.config))
    for key in ("seed", "tokens", "variant"):
        if getattr(args, key, None) is not None:
            cfg[key] = getattr(args, key)
    cfg["command"] = args.command
    for key in ("out", "root", "manifest", "metadata", "fixtures", "cache", "checkpoint", "regressor",
                "schedule", "valence", "arousal", "offline"):
        if getattr(args, key, None) is not None:
            cfg[key] = getattr(args, key)
    return cfg


def _snapshot(cfg: dict):
    from .checkpoint import atomic_write_bytes

    if cfg.get("out"):
        atomic_write_bytes(f"{cfg['out']}.config.json", json.dumps(cfg, indent=2, sort_keys=True).encode())


def _model_config(cfg, variant="vanilla"):
    from .model import ModelConfig

    base = ModelConfig(cfg["n_layers"], cfg["d_model"], cfg["n_heads"], cfg["d_ff"], cfg["max_len"],
                       dropout=cfg["dropout"])
    return base if variant == "vanilla" else base.for_variant(variant, cfg.get("d_cond"))


def _train_spec(cfg):
    from .training import TrainSpec

    return TrainSpec(lr=cfg["lr"], lr_low=cfg["lr_low"], batch_size=cfg["batch_size"], steps=cfg["steps"],
                     window=cfg["window"], augment=bool(cfg["augment"]), checkpoint_every=cfg["checkpoint_every"],
                     checkpoint_path=cfg.get("out"), log_path=f"{cfg['out']}.metrics.jsonl" if cfg.get("out") else None,
                     seed=cfg["seed"])


def _require_out(cfg):
    if not cfg.get("out"):
        raise UsageError(f"{cfg['command']} needs --out")


def cmd_build_dataset(cfg):
    from . import corpus

    _require_out(cfg)
    if cfg.get("offline"):
        if not cfg.get("fixtures"):
            raise UsageError("--offline needs --fixtures")
        client = corpus.AudioFeatureClient("fixture", cfg["fixtures"], cache_dir=cfg.get("cache"))
    else:
        client = corpus.AudioFeatureClient("live", cache_dir=cfg.get("cache"))
    with open(cfg["metadata"]) as f:
        metadata = json.load(f)
    m = corpus.build_dataset(cfg["root"], metadata, client, cfg["out"])
    print(f"{len(m.split('train'))} train / {len(m.split('test'))} test songs -> {cfg['out']}")


def _songs(cfg, split="train"):
    from . import corpus
    from .training import song_data

    if cfg.get("manifest"):
        return corpus.load_split(corpus.DatasetManifest.load(cfg["manifest"]), cfg["root"], split)
    return [song_data(s.name, s.song.events, None, s.song.tempo_map, s.song.timesig_map)
            for s in corpus.scan_songs(cfg["root"])]


def cmd_pretrain(cfg):
    from .model import Transformer
    from .training import fit

    _require_out(cfg)
    model = Transformer(_model_config(cfg), seed=cfg["seed"])
    result = fit(model, _songs(cfg), _train_spec(cfg))
    print(f"trained {result.steps} steps, final loss {result.losses[-1]:.4f} -> {cfg['out']}")


def cmd_finetune(cfg):
    from .model import CONDITIONAL_VARIANTS, Transformer, transfer_weights
    from .training import fit

    _require_out(cfg)
    variant = cfg.get("variant")
    if variant not in CONDITIONAL_VARIANTS:
        raise UsageError(f"--variant must be one of {', '.join(CONDITIONAL_VARIANTS)}")
    if cfg.get("checkpoint"):
        vanilla = Transformer.load(cfg["checkpoint"])
        model = transfer_weights(vanilla, variant, seed=cfg["seed"], embedding_init=cfg["embedding_init"],
                                 d_cond=cfg.get("d_cond"))
    else:
        model = Transformer(_model_config(cfg, variant), seed=cfg["seed"])
    result = fit(model, _songs(cfg), _train_spec(cfg))
    print(f"trained {result.steps} steps, final loss {result.losses[-1]:.4f} -> {cfg['out']}")


def cmd_generate(cfg):
    from .generate import ConditionSchedule, SamplerConfig, generate, write_outputs
    from .model import Transformer

    _require_out(cfg)
    model = Transformer.load(cfg["checkpoint"], seed=cfg["seed"])
    if cfg.get("variant") and cfg["variant"] != model.cfg.variant:
        raise UsageError(f"checkpoint holds a {model.cfg.variant} model, not {cfg['variant']}")
    schedule = None
    if cfg.get("schedule"):
        schedule = ConditionSchedule.load(cfg["schedule"])
    elif cfg.get("valence") is not None or cfg.get("arousal") is not None:
        if cfg.get("valence") is None or cfg.get("arousal") is None:
            raise UsageError("give both --valence and --arousal")
        schedule = ConditionSchedule.constant(cfg["valence"], cfg["arousal"])
    if model.cfg.conditional and schedule is None:
        raise UsageError(f"{model.cfg.variant} model needs --valence/--arousal or --schedule")
    if not model.cfg.conditional and schedule is not None:
        raise UsageError("the vanilla model takes no condition")
    sampler = SamplerConfig(p=cfg["p"], temperature=cfg["temperature"], max_tokens=cfg["tokens"], seed=cfg["seed"])
    tokens = generate(model, schedule, sampler)
    paths = write_outputs(tokens, cfg["out"])
    print(f"{len(tokens)} tokens -> {paths[0]}, {paths[1]}")


def cmd_eval_predict(cfg):
    from .checkpoint import atomic_write_bytes
    from .evaluate import eval_prediction
    from .model import Transformer

    model = Transformer.load(cfg["checkpoint"])
    metrics = eval_prediction(model, _songs(cfg, "test"), batch_size=cfg["batch_size"])
    text = json.dumps(metrics.to_json(), indent=2)
    if cfg.get("out"):
        atomic_write_bytes(f"{cfg['out']}.json", text.encode())
    print(text)


def cmd_train_regressor(cfg):
    from .evaluate import train_regressor
    from .model import RegressorConfig

    _require_out(cfg)
    rcfg = RegressorConfig(cfg["n_layers"], cfg["d_model"], cfg["n_heads"], cfg["d_ff"], cfg["max_len"],
                           dropout=cfg["dropout"])
    model, result = train_regressor(_songs(cfg), rcfg, _train_spec(cfg), seed=cfg["seed"])
    model.save(cfg["out"])
    print(f"trained {result.steps} steps, final mse {result.losses[-1]:.4f} -> {cfg['out']}")


def cmd_eval_emotion(cfg):
    from .evaluate import GridConfig, inference_error_grid, write_report
    from .generate import SamplerConfig
    from .model import EmotionRegressor, Transformer

    _require_out(cfg)
    models = {}
    for path in cfg["checkpoint"]:
        m = Transformer.load(path, seed=cfg["seed"])
        models[f"{m.cfg.variant}:{Path(path).name}"] = m
    regressor = EmotionRegressor.load(cfg["regressor"])
    sampler = SamplerConfig(p=cfg["p"], temperature=cfg["temperature"], max_tokens=cfg["tokens"], seed=cfg["seed"])
    report = inference_error_grid(models, regressor, GridConfig(n_samples=cfg["samples"], sampler=sampler))
    paths = write_report(report, cfg["out"])
    for name, r in report.items():
        print(f"{name}: mean error {r['mean_error']:.4f}")
    print(f"report -> {paths[0]}, {paths[1]}")


def cmd_gradcheck(cfg):
    from .gradcheck import TOLERANCE, run

    results = run()
    ok = True
    for name, err in results.items():
        flag = "ok" if err < TOLERANCE else "FAIL"
        ok &= err < TOLERANCE
        print(f"{name:34s} {err:.3e}  {flag}")
    if not ok:
        raise RuntimeError("gradient check failed")


COMMANDS = {
    "build-dataset": cmd_build_dataset, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
    "generate": cmd_generate, "eval-predict": cmd_eval_predict, "train-regressor": cmd_train_regressor,
    "eval-emotion": cmd_eval_emotion, "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        _snapshot(cfg)
        COMMANDS[args.command](cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"emogen: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: report, do not dump a traceback
        log.debug("failure", exc_info=True)
        print(f"emogen: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


run = main

if __name__ == "__main__":
    sys.exit(main())

