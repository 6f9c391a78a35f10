"""Command-line entry point: synth, spot, train, translate, evaluate, ablate.

Configuration is a flat JSON object with dotted keys (``train.lr0``,
``generator.noise``, ...). Defaults are overlaid by ``--preset``, then
``--config FILE``, then ``--set key=value`` flags. The resolved document is
written into every output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, fields
from importlib import resources
from pathlib import Path
from typing import Sequence


from . import __version__, metrics
from .corpus import ContextMode, Episode, GeneratorConfig, Sample, Tokenizer, generate_synthetic, load_corpus, load_truth
from .embedding import FeatureSequence, read_fmat
from .errors import ConfigError, SignCtxError
from .model import (
    ModelConfig,
    TranslationModel,
    beam_decode,
    encode,
    greedy_decode,
    load_checkpoint,
    parse_streams,
    streams_label,
)
from .spotting import SpotParams, annotate_corpus, write_spottings
from .training import (
    DevResult,
    FeatureCache,
    TrainConfig,
    evaluate_dev,
    make_input,
    state_summary,
    train,
    write_translations,
)

log = logging.getLogger("signctx")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

ABLATION_ROWS = ("V", "C", "S", "C+V", "C+S", "C+V+S")

_MODEL_KEYS = ("d_model", "d_ff", "layers", "heads", "dropout", "max_positions")


def default_config() -> dict:
    cfg: dict = {"seed": 0, "streams": "C+V+S", "translate.beam": 1}
    for k, v in asdict(GeneratorConfig()).items():
        cfg[f"generator.{k}"] = v
    m = ModelConfig(vocab_size=8)
    for k in _MODEL_KEYS:
        cfg[f"model.{k}"] = getattr(m, k)
    for k, v in asdict(TrainConfig()).items():
        cfg[f"train.{k}"] = v
    for f in fields(SpotParams):
        if f.name != "lemmatizer":
            cfg[f"spot.{f.name}"] = getattr(SpotParams(), f.name)
    return cfg


def preset_names() -> list[str]:
    root = resources.files("signctx") / "presets"
    return sorted(p.name[: -len(".json")] for p in root.iterdir() if p.name.endswith(".json"))


def load_preset(name: str) -> dict:
    path = resources.files("signctx") / "presets" / f"{name}.json"
    if not path.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return json.loads(path.read_text(encoding="utf-8"))


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(preset: str | None = None, config_file: str | None = None, sets: Sequence[str] = ()) -> dict:
    cfg = default_config()
    layers: list[tuple[str, dict]] = []
    if preset:
        layers.append((f"preset {preset}", load_preset(preset)))
    if config_file:
        try:
            layers.append((config_file, json.loads(Path(config_file).read_text(encoding="utf-8"))))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {config_file}: {exc}") from None
    overrides = {}
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = _parse_value(value)
    layers.append(("--set", overrides))
    for source, layer in layers:
        if not isinstance(layer, dict):
            raise ConfigError(f"{source}: config must be a JSON object")
        unknown = sorted(set(layer) - set(cfg) - {"preset"})
        if unknown:
            raise ConfigError(f"{source}: unknown config keys {unknown}")
        cfg.update(layer)
    if preset:
        cfg["preset"] = preset
    return cfg


def section(cfg: dict, name: str) -> dict:
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in cfg.items() if k.startswith(prefix)}


def generator_config(cfg: dict) -> GeneratorConfig:
    return GeneratorConfig.from_dict(section(cfg, "generator"))


def train_config(cfg: dict) -> TrainConfig:
    d = section(cfg, "train")
    d.setdefault("seed", cfg["seed"])
    try:
        return TrainConfig(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def model_config(cfg: dict, vocab_size: int, feature_dim: int, streams) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, feature_dim=feature_dim, enabled_streams=parse_streams(streams),
                       seed=int(cfg["seed"]), **section(cfg, "model"))


def spot_params(cfg: dict) -> SpotParams:
    d = section(cfg, "spot")
    d.setdefault("seed", cfg["seed"])
    return SpotParams(**d)


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_split(data: Path, split: str) -> list[Episode]:
    path = data / f"{split}.jsonl"
    if not path.exists():
        raise ConfigError(f"no {split} split at {path}")
    return load_corpus(path, data)


def _feature_dim(episodes: Sequence[Episode]) -> int:
    for ep in episodes:
        for s in ep.samples:
            return int(s.features.frames.shape[1])
    raise ConfigError("corpus has no samples")


def homonym_accuracy(result: DevResult, truth: dict[str, dict]) -> float | None:
    """Position-aligned accuracy of hypothesis words at homonym slots."""
    hit = total = 0
    for vid, hyp in zip(result.video_ids, result.hypotheses):
        rec = truth.get(vid)
        if rec is None:
            continue
        words = hyp.split()
        for slot in rec["homonym_slots"]:
            total += 1
            hit += int(slot < len(words) and words[slot] == rec["words"][slot])
    return hit / total if total else None


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg: dict) -> int:
    out = Path(args.out)
    generate_synthetic(generator_config(cfg), int(cfg["seed"]), out)
    write_json(out / "config.json", cfg)
    print(out)
    return EXIT_OK


def cmd_spot(args, cfg: dict) -> int:
    data = Path(args.data)
    episodes = []
    for split in args.splits.split(","):
        episodes.extend(_load_split(data, split))
    records = annotate_corpus(episodes, spot_params(cfg))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_spottings(records, out)
    write_json(out.with_suffix(".config.json"), cfg)
    print(f"{len(records)} spottings written to {out}")
    return EXIT_OK


def run_training(data: Path, run_dir: Path, cfg: dict, streams) -> tuple[TranslationModel, Tokenizer, dict]:
    train_eps = _load_split(data, "train")
    dev_eps = _load_split(data, "dev")
    tok = Tokenizer.for_corpus(train_eps)
    tc = train_config(cfg)
    model = TranslationModel(model_config(cfg, len(tok.vocabulary), _feature_dim(train_eps), streams))
    run_dir.mkdir(parents=True, exist_ok=True)
    write_json(run_dir / "config.json", {**cfg, "streams": streams_label(model.streams)})
    tok.save(run_dir / "vocab.json")
    t0 = time.perf_counter()
    state = train(model, train_eps, dev_eps, tok, tc, run_dir)
    summary = state_summary(state) | {"seconds": time.perf_counter() - t0, "streams": streams_label(model.streams)}
    write_json(run_dir / "summary.json", summary)
    return model, tok, summary


def cmd_train(args, cfg: dict) -> int:
    _, _, summary = run_training(Path(args.data), Path(args.run), cfg, cfg["streams"])
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_translate(args, cfg: dict) -> int:
    model, vocab, meta = load_checkpoint(args.checkpoint)
    tok = Tokenizer(vocab)
    tc = TrainConfig(**meta["train"]) if "train" in meta else train_config(cfg)
    beam = int(args.beam if args.beam is not None else cfg["translate.beam"])
    if args.features:
        frames = read_fmat(args.features)
        sample = Sample(FeatureSequence(Path(args.features).stem, frames), "", [], 0)
        inp = make_input(Episode("cli", [sample]), 0, tok, model.streams, ContextMode("none", 0), FeatureCache())
        if "context" in model.streams:
            inp.context = tok.tokenize(args.context or "")
        if "spotting" in model.streams:
            inp.spotting = tok.tokenize(args.spottings or "")
        encoded = encode(model, [inp])
        ids = beam_decode(model, encoded, beam, tc.decode_max_len) if beam > 1 else greedy_decode(model, encoded, tc.decode_max_len)
        print(tok.detokenize(ids))
        return EXIT_OK
    if not args.data:
        raise ConfigError("translate needs --features or --data")
    episodes = _load_split(Path(args.data), args.split)
    result = evaluate_dev(model, episodes, tok, tc, context_source=args.context_source)
    if args.out:
        write_translations(args.out, result)
    for vid, hyp in zip(result.video_ids, result.hypotheses):
        print(f"{vid}\t{hyp}")
    return EXIT_OK


def read_translations(path: str | Path) -> list[tuple[str, str, str]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        try:
            ih, ir = header.index("hypothesis"), header.index("reference")
        except ValueError:
            raise ConfigError(f"{path}: header must name 'hypothesis' and 'reference' columns") from None
        iv = header.index("video_id") if "video_id" in header else None
        for n, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != len(header):
                raise ConfigError(f"{path}:{n}: expected {len(header)} fields, got {len(parts)}")
            rows.append((parts[iv] if iv is not None else str(n - 1), parts[ih], parts[ir]))
    return rows


def cmd_evaluate(args, cfg: dict) -> int:
    rows = read_translations(args.translations)
    if not rows:
        raise ConfigError("no translation pairs to evaluate")
    result = metrics.evaluate_pairs([(h, r) for _, h, r in rows])
    if args.pairs_out:
        lines = ["video_id\tbleu4\trougeL\tchrf"]
        for vid, h, r in rows:
            lines.append(f"{vid}\t{metrics.bleu([(h, r)], 4)!r}\t{metrics.rouge_l_f1([(h, r)])!r}\t{metrics.chrf([(h, r)])!r}")
        Path(args.pairs_out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def ablation_table(rows: list[dict]) -> str:
    head = "| streams | BLEU-1 | BLEU-4 | ROUGE-L | chrF | homonym acc | BLEU-4 (self ctx) | BLEU-4 (shuffled ctx) |"
    lines = [head, "|" + "---|" * 8]

    def fmt(x):
        return "-" if x is None else f"{x:.2f}"

    for r in rows:
        m = r["reference"]
        lines.append(
            f"| {r['streams']} | {fmt(m['bleu1'])} | {fmt(m['bleu4'])} | {fmt(m['rougeL'])} | {fmt(m['chrf'])} | "
            f"{fmt(r['homonym_accuracy'])} | {fmt(r.get('self_bleu4'))} | {fmt(r.get('shuffled_bleu4'))} |"
        )
    return "\n".join(lines)


def run_ablation(data: Path, run_dir: Path, cfg: dict, rows: Sequence[str] = ABLATION_ROWS) -> list[dict]:
    truth_path = data / "truth.jsonl"
    truth = load_truth(truth_path) if truth_path.exists() else {}
    dev_eps = _load_split(data, "dev")
    tc = train_config(cfg)
    out = []
    for label in rows:
        model, tok, summary = run_training(data, run_dir / label.replace("+", ""), cfg, label)
        ref = evaluate_dev(model, dev_eps, tok, tc, context_source="reference")
        row = {"streams": label, "reference": ref.metrics, "homonym_accuracy": homonym_accuracy(ref, truth),
               "epochs": summary["epoch"], "best_epoch": summary["best_epoch"], "seconds": summary["seconds"]}
        if "context" in model.streams:
            row["self_bleu4"] = evaluate_dev(model, dev_eps, tok, tc, context_source="self").metrics["bleu4"]
            row["shuffled_bleu4"] = evaluate_dev(model, dev_eps, tok, tc, context_source="shuffled").metrics["bleu4"]
        out.append(row)
        log.info("ablation %s: BLEU-4 %.2f", label, ref.metrics["bleu4"])
    return out


def cmd_ablate(args, cfg: dict) -> int:
    run_dir = Path(args.run)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_json(run_dir / "config.json", cfg)
    if args.data:
        data = Path(args.data)
    else:
        data = run_dir / "data"
        generate_synthetic(generator_config(cfg), int(cfg["seed"]), data)
    rows = run_ablation(data, run_dir, cfg, [parse_and_label(r) for r in args.rows.split(",")])
    write_json(run_dir / "ablation.json", rows)
    table = ablation_table(rows)
    (run_dir / "ablation.md").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


def parse_and_label(spec: str) -> str:
    return streams_label(parse_streams(spec))


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="signctx", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", help="named preset (" + ", ".join(preset_names()) + ")")
    common.add_argument("--config", help="JSON file of dotted keys")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help="shorthand for --set seed=N")

    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic episode corpus")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("spot", parents=[common], help="annotate a corpus with automatic spottings")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--splits", default="train", help="comma-separated splits to annotate jointly")
    p.add_argument("--out", required=True, help="output TSV")
    p.set_defaults(func=cmd_spot)

    p = sub.add_parser("train", parents=[common], help="train one model")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", parents=[common], help="translate one feature file or a corpus split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", help="fmat file of one sign sequence")
    p.add_argument("--context", help="preceding text for the context stream")
    p.add_argument("--spottings", help="space-separated glosses for the spotting stream")
    p.add_argument("--data", help="corpus directory (batch mode)")
    p.add_argument("--split", default="dev")
    p.add_argument("--context-source", default="reference", choices=["reference", "self", "shuffled"])
    p.add_argument("--beam", type=int)
    p.add_argument("--out", help="translations TSV (batch mode)")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", parents=[common], help="score a translations TSV")
    p.add_argument("--translations", required=True)
    p.add_argument("--out", help="metrics JSON")
    p.add_argument("--pairs-out", help="per-pair scores TSV")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[common], help="train and compare all stream subsets")
    p.add_argument("--data", help="corpus directory (generated from the config when omitted)")
    p.add_argument("--run", required=True)
    p.add_argument("--rows", default=",".join(ABLATION_ROWS))
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        sets = list(args.set) + ([f"seed={args.seed}"] if args.seed is not None else [])
        cfg = resolve_config(args.preset, args.config, sets)
        return args.func(args, cfg)
    except SignCtxError as exc:
        print(json.dumps({"error": exc.category, "message": str(exc)}), file=sys.stderr)
        return EXIT_FAILURE
    except (OSError, ValueError, TypeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
