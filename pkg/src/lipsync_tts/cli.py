"""Command-line entry point: ``gen-data``, ``train``, ``synth``, ``eval`` and ``ablate``.

Every command reads an optional YAML config (``--config``), applies command-line
overrides on top (flags win), and writes into a fresh timestamped run directory
under ``--out`` holding the resolved config, logs and outputs.
"""

from __future__ import annotations

import argparse
import copy
import datetime as _dt
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import yaml

from .corpus import CorpusConfig, Dataset, build_corpus, generate_corpus, read_dataset, write_dataset
from .decoder import MODES, ModelConfig
from .errors import ConfigError, LipSyncError, NotFound
from .evaluation import BASELINES, SCENARIOS, comparison_table, evaluate
from .inference import GenerationConfig, dub, write_synthesis
from .training import (
    VARIANTS,
    Checkpoint,
    LossWeights,
    TrainResult,
    load_checkpoint,
    model_config_for,
    save_checkpoint,
    train,
)

log = logging.getLogger("lipsync_tts")

# Defaults for every config field. ``model`` keys follow the architecture names used in
# the docs (``D_model`` is the residual width).
DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "out": "runs",
    "corpus": {
        "n_train": 500,
        "n_eval": 100,
        "K": 64,
        "n_speakers": 4,
        "max_pauses": 2,
        "pause_len": [4, 10],
        "tokens_per_char": [2, 4],
        "n_words": [2, 4],
        "noise_std": 0.1,
        "seed": 0,
        "data_dir": None,
    },
    "model": {
        "D_model": 128,
        "n_layers": 4,
        "n_heads": 4,
        "cross_attn_every": 1,
        "integration_mode": "cross_attention",
        "max_seq_len": 512,
        "n_style": 4,
        "use_style_video": True,
        "d_video": 32,
        "d_speaker": 64,
        "ff_mult": 4,
    },
    "loss": {"alpha": 0.01, "beta": 0.1, "variant": "soft"},
    "train": {
        "base_steps": 2000,
        "steps": 2000,
        "batch_size": 16,
        "base_lr": 1e-3,
        "lr": 1e-3,
        "base_checkpoint": None,
    },
    "generation": {"max_tokens": 256, "strategy": "greedy", "k": 8, "temperature": 1.0, "seed": 0},
    "eval": {"scenarios": list(SCENARIOS), "baselines": ["none"], "limit": None},
    "ablation": {"scenario": "different_text"},
}

# a model section that is present must pin down the architecture
REQUIRED_MODEL_KEYS = ("D_model", "n_layers", "n_heads")

# Table-3 style grid: (name, integration_mode, use_style_video, beta > 0)
ABLATION_GRID = (
    ("ablation1", "concat", False, False),
    ("ablation2", "cross_attention", False, False),
    ("ablation3", "cross_attention", True, False),
    ("ablation4", "cross_attention", False, True),
    ("full", "cross_attention", True, True),
)


# -- config -----------------------------------------------------------------------

def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(where, "unknown field")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(where, "expected a mapping")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def _set_path(cfg: dict, dotted: str, raw: str) -> None:
    keys = dotted.split(".")
    node = cfg
    for i, k in enumerate(keys[:-1]):
        if not isinstance(node.get(k), dict):
            raise ConfigError(".".join(keys[: i + 1]), "unknown section")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigError(dotted, "unknown field")
    node[keys[-1]] = yaml.safe_load(raw)


def _expect(cfg: dict, path: str, kind, *, allow_none=False):
    node = cfg
    for k in path.split("."):
        node = node[k]
    if node is None and allow_none:
        return None
    if kind is float and isinstance(node, int) and not isinstance(node, bool):
        return float(node)
    if (kind is int and isinstance(node, bool)) or not isinstance(node, kind):
        raise ConfigError(path, f"expected {getattr(kind, '__name__', kind)}, got {node!r}")
    return node


@dataclass
class ExperimentConfig:
    raw: dict
    corpus: CorpusConfig
    model: dict
    weights: LossWeights
    variant: str
    gen: GenerationConfig

    @property
    def seed(self) -> int:
        return self.raw["seed"]


def resolve_config(file_cfg: Optional[dict], overrides: dict[str, str], seed: Optional[int] = None,
                   out: Optional[str] = None) -> ExperimentConfig:
    """Defaults <- config file <- ``--set`` overrides <- ``--seed``/``--out``; then validate."""
    file_cfg = file_cfg or {}
    if not isinstance(file_cfg, dict):
        raise ConfigError("<root>", "config file must hold a mapping")
    model_section = file_cfg.get("model")
    if isinstance(model_section, dict):
        for key in REQUIRED_MODEL_KEYS:
            if key not in model_section:
                raise ConfigError(f"model.{key}", "required when a model section is given")
    cfg = _merge(DEFAULTS, file_cfg)
    for dotted, value in overrides.items():
        _set_path(cfg, dotted, value)
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
    return validate_config(cfg)


def validate_config(cfg: dict) -> ExperimentConfig:
    for path in ("seed", "corpus.n_train", "corpus.n_eval", "corpus.K", "corpus.n_speakers", "corpus.max_pauses",
                 "corpus.seed", "model.D_model", "model.n_layers", "model.n_heads", "model.cross_attn_every",
                 "model.max_seq_len", "model.n_style", "model.d_video", "model.d_speaker", "model.ff_mult",
                 "train.base_steps", "train.steps", "train.batch_size", "generation.max_tokens", "generation.k",
                 "generation.seed"):
        _expect(cfg, path, int)
    for path in ("corpus.noise_std", "loss.alpha", "loss.beta", "train.base_lr", "train.lr", "generation.temperature"):
        _expect(cfg, path, float)
    for path in ("train.steps", "train.base_steps", "corpus.n_train", "corpus.n_eval"):
        if _expect(cfg, path, int) < 0:
            raise ConfigError(path, "must be >= 0")
    if cfg["model"]["integration_mode"] not in MODES:
        raise ConfigError("model.integration_mode", f"must be one of {MODES}")
    if cfg["loss"]["variant"] not in VARIANTS:
        raise ConfigError("loss.variant", f"must be one of {VARIANTS}")
    for s in _expect(cfg, "eval.scenarios", list):
        if s not in SCENARIOS:
            raise ConfigError("eval.scenarios", f"unknown scenario {s!r}")
    for b in _expect(cfg, "eval.baselines", list):
        if b not in BASELINES:
            raise ConfigError("eval.baselines", f"unknown baseline {b!r}")
    if cfg["ablation"]["scenario"] not in SCENARIOS:
        raise ConfigError("ablation.scenario", "unknown scenario")

    c = cfg["corpus"]
    try:
        corpus = CorpusConfig(K=c["K"], n_speakers=c["n_speakers"], max_pauses=c["max_pauses"],
                              pause_len=tuple(c["pause_len"]), tokens_per_char=tuple(c["tokens_per_char"]),
                              n_words=tuple(c["n_words"]), noise_std=float(c["noise_std"]), seed=c["seed"])
    except (LipSyncError, TypeError, ValueError) as exc:
        raise ConfigError("corpus", str(exc)) from exc
    try:
        weights = LossWeights(float(cfg["loss"]["alpha"]), float(cfg["loss"]["beta"]))
    except LipSyncError as exc:
        raise ConfigError("loss", str(exc)) from exc
    g = cfg["generation"]
    try:
        gen = GenerationConfig(g["max_tokens"], g["strategy"], g["k"], float(g["temperature"]), g["seed"])
    except LipSyncError as exc:
        raise ConfigError("generation", str(exc)) from exc
    m = cfg["model"]
    if m["D_model"] % m["n_heads"]:
        raise ConfigError("model.D_model", "must be divisible by model.n_heads")
    return ExperimentConfig(cfg, corpus, m, weights, cfg["loss"]["variant"], gen)


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise NotFound(f"config file {path} does not exist")
    try:
        return yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"not valid YAML: {exc}") from exc


def model_config(exp: ExperimentConfig, corpus, **kw) -> ModelConfig:
    m = exp.model
    fields = dict(
        d_model=m["D_model"], n_layers=m["n_layers"], n_heads=m["n_heads"], cross_attn_every=m["cross_attn_every"],
        integration_mode=m["integration_mode"], max_seq_len=m["max_seq_len"], n_style=m["n_style"],
        use_style_video=bool(m["use_style_video"]), d_video=m["d_video"], d_speaker=m["d_speaker"],
        ff_mult=m["ff_mult"], seed=exp.seed,
    )
    return model_config_for(corpus, **{**fields, **kw})


# -- run directories ----------------------------------------------------------------

def make_run_dir(out: str, command: str) -> Path:
    """A new directory ``<out>/<command>-<UTC timestamp>``; never reuses an existing one."""
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%S")
    for n in range(10000):
        path = root / (f"{command}-{stamp}" + (f"-{n}" if n else ""))
        try:
            path.mkdir()
            return path
        except FileExistsError:
            continue
    raise RuntimeError("could not allocate a run directory")


def _start_run(exp: ExperimentConfig, command: str) -> Path:
    run = make_run_dir(exp.raw["out"], command)
    (run / "config.yaml").write_text(yaml.safe_dump(exp.raw, sort_keys=True))
    handler = logging.FileHandler(run / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    logging.getLogger("lipsync_tts").addHandler(handler)
    log.info("%s run in %s (seed %d)", command, run, exp.seed)
    return run


# -- shared steps ----------------------------------------------------------------------

def load_data(exp: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Train and eval datasets from ``corpus.data_dir`` or generated from the config."""
    data_dir = exp.raw["corpus"]["data_dir"]
    if data_dir:
        d = Path(data_dir)
        for split in ("train", "eval"):
            if not (d / split / "manifest.json").exists():
                raise NotFound(f"dataset split {d / split} does not exist")
        return read_dataset(d / "train"), read_dataset(d / "eval")
    corpus = build_corpus(exp.corpus)
    c = exp.raw["corpus"]
    seed = exp.raw["corpus"]["seed"]
    return (Dataset(corpus, generate_corpus(corpus, c["n_train"], seed + 1)),
            Dataset(corpus, generate_corpus(corpus, c["n_eval"], seed + 2)))


def _load_ckpt(path) -> Checkpoint:
    if path is None or not Path(path).exists():
        raise NotFound(f"checkpoint {path} does not exist")
    return load_checkpoint(path)


def train_base(exp: ExperimentConfig, data: Dataset, run: Optional[Path] = None) -> TrainResult:
    """Video-blind speech model that adapter variants start from."""
    t = exp.raw["train"]
    cfg = model_config(exp, data.corpus, integration_mode="none")
    return train(data.examples, cfg, exp.weights, t["base_steps"], exp.seed, variant=exp.variant,
                 batch_size=t["batch_size"], lr=float(t["base_lr"]), codebook_hash=data.corpus.codebook.hash(),
                 log_path=None if run is None else run / "train_base.tsv")


def train_variant(exp: ExperimentConfig, data: Dataset, base: Optional[Checkpoint], run: Optional[Path] = None,
                  log_name: str = "train.tsv") -> TrainResult:
    """Adapters (cross-attention) or full fine-tuning (none/concat) on top of ``base``."""
    t = exp.raw["train"]
    cfg = model_config(exp, data.corpus)
    return train(data.examples, cfg, exp.weights, t["steps"], exp.seed, variant=exp.variant, init=base,
                 batch_size=t["batch_size"], lr=float(t["lr"]), codebook_hash=data.corpus.codebook.hash(),
                 log_path=None if run is None else run / log_name)


def _obtain_base(exp: ExperimentConfig, data: Dataset, run: Path) -> Checkpoint:
    path = exp.raw["train"]["base_checkpoint"]
    if path:
        return _load_ckpt(path)
    base = train_base(exp, data, run)
    save_checkpoint(base.checkpoint, run / "base.ckpt")
    return base.checkpoint


# -- commands -----------------------------------------------------------------------------

def cmd_gen_data(exp: ExperimentConfig, args) -> Path:
    run = _start_run(exp, "gen-data")
    corpus = build_corpus(exp.corpus)
    c = exp.raw["corpus"]
    for split, n, offset in (("train", c["n_train"], 1), ("eval", c["n_eval"], 2)):
        examples = generate_corpus(corpus, n, c["seed"] + offset)
        write_dataset(examples, run / "data" / split, corpus)
    log.info("wrote %d train / %d eval examples", c["n_train"], c["n_eval"])
    return run


def cmd_train(exp: ExperimentConfig, args) -> Path:
    run = _start_run(exp, "train")
    train_data, _ = load_data(exp)
    base = _obtain_base(exp, train_data, run)
    result = train_variant(exp, train_data, base, run)
    save_checkpoint(result.checkpoint, run / "model.ckpt")
    log.info("saved %s", run / "model.ckpt")
    return run


def cmd_synth(exp: ExperimentConfig, args) -> Path:
    run = _start_run(exp, "synth")
    model = _load_ckpt(args.checkpoint).build_model()
    _, eval_data = load_data(exp)
    if not 0 <= args.example < len(eval_data):
        raise ConfigError("--example", f"index {args.example} outside the eval set of {len(eval_data)}")
    ex = eval_data[args.example]
    text = args.text if args.text is not None else ex.text_seq.raw
    lang = args.lang if args.lang is not None else ex.text_seq.language_id
    corpus = eval_data.corpus
    result = dub(model, corpus.tokenizer, corpus.codebook, text, lang, ex.speaker_ref_mel, ex.lip_video, exp.gen)
    write_synthesis(result, run / "synth.wav")
    return run


def cmd_eval(exp: ExperimentConfig, args) -> Path:
    run = _start_run(exp, "eval")
    model = _load_ckpt(args.checkpoint).build_model()
    _, eval_data = load_data(exp)
    limit = exp.raw["eval"]["limit"]
    for scenario in exp.raw["eval"]["scenarios"]:
        for baseline in exp.raw["eval"]["baselines"]:
            report = evaluate(model, eval_data, scenario, baseline, exp.gen, seed=exp.seed, limit=limit)
            report.write(run / f"report_{scenario}_{baseline}")
    return run


def ablation_config(exp: ExperimentConfig, mode: str, style_video: bool, duration: bool) -> ExperimentConfig:
    raw = copy.deepcopy(exp.raw)
    raw["model"]["integration_mode"] = mode
    raw["model"]["use_style_video"] = style_video
    raw["loss"]["beta"] = exp.weights.beta if duration else 0.0
    return validate_config(raw)


def cmd_ablate(exp: ExperimentConfig, args) -> Path:
    run = _start_run(exp, "ablate")
    train_data, eval_data = load_data(exp)
    base = _obtain_base(exp, train_data, run)
    if exp.weights.beta == 0:
        raise ConfigError("loss.beta", "the ablation grid needs beta > 0 for its duration-loss variants")
    scenario = exp.raw["ablation"]["scenario"]
    reports = {}
    for name, mode, style_video, duration in ABLATION_GRID:
        vexp = ablation_config(exp, mode, style_video, duration)
        (run / f"{name}.yaml").write_text(yaml.safe_dump(vexp.raw, sort_keys=True))
        result = train_variant(vexp, train_data, base, run, log_name=f"train_{name}.tsv")
        save_checkpoint(result.checkpoint, run / f"{name}.ckpt")
        report = evaluate(result.model, eval_data, scenario, "none", exp.gen, seed=exp.seed,
                          limit=exp.raw["eval"]["limit"])
        report.write(run / f"report_{name}")
        reports[name] = report
    comparison_table(reports, run / "comparison.tsv")
    return run


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "synth": cmd_synth,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", help="parent directory for run directories")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. --set model.D_model=64 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lipsync-tts", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate train/eval datasets")
    sub.add_parser("train", parents=[common], help="train a model (base + variant)")
    p = sub.add_parser("synth", parents=[common], help="dub one eval example")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--example", type=int, default=0, help="eval example supplying lip video and voice")
    p.add_argument("--text", help="text to speak (default: the example's own text)")
    p.add_argument("--lang", type=int, help="language id of --text")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    sub.add_parser("ablate", parents=[common], help="train and evaluate the five-variant ablation grid")
    return parser


def _parse_sets(items) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(item, "--set expects KEY=VALUE")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    return out


EXIT_CODES = {ConfigError: 2, NotFound: 3}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    log.setLevel(logging.INFO)
    try:
        file_cfg = load_config_file(args.config) if args.config else None
        exp = resolve_config(file_cfg, _parse_sets(args.set), args.seed, args.out)
        run = COMMANDS[args.command](exp, args)
    except LipSyncError as exc:
        _close_run_logs()
        code = next((c for t, c in EXIT_CODES.items() if isinstance(exc, t)), 1)
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return code
    _close_run_logs()
    print(json.dumps({"command": args.command, "run_dir": str(run)}))
    return 0


def _close_run_logs():
    for h in list(log.handlers):
        if isinstance(h, logging.FileHandler):
            log.removeHandler(h)
            h.close()


if __name__ == "__main__":
    sys.exit(main())
