"""Command-line surface composing the pipeline into reproducible runs.

Every command resolves its configuration from built-in desk-scale defaults,
then an optional --config JSON file, then explicit flags (flags win), and
writes a manifest.json into its output directory containing the fully
resolved configuration. Re-running a command from that manifest (the
``replay`` subcommand) reproduces every output byte for byte; commands
never write outside their --out directory.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
from datetime import datetime, timezone
from pathlib import Path

TOY_MODEL_PRESET = {
    "hidden_size": 96,
    "num_heads": 4,
    "ffn_size": 192,
    "num_interaction_layers": 3,
    "num_extraction_layers": 1,
    "max_text_len": 40,
    "max_objects": 16,
    "ln_eps": 1e-12,
    "init_std": 0.02,
    "architecture_variant": "interbert",
    "tie_msm_weights": False,
    # resolved from the corpus when left unset
    "vocab_size": None,
    "object_feature_dim": None,
    "num_object_classes": None,
}

PAPER_MODEL_OVERRIDES = {
    "hidden_size": 768,
    "num_heads": 12,
    "ffn_size": 3072,
    "num_interaction_layers": 12,
    "num_extraction_layers": 6,
    "vocab_size": 30522,
    "object_feature_dim": 2048,
    "max_text_len": 40,
    "max_objects": 100,
}

PAPER_TRAIN_OVERRIDES = {
    "batch_size": 512,
    "warmup_steps": 10000,
    "total_steps": 100000,
}


class CommandError(RuntimeError):
    pass


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=10,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def _write_manifest(out_dir: Path, command: str, config: dict,
                    outputs: list[str], started: str) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": config.get("seed", config.get("train", {}).get("seed") if isinstance(config.get("train"), dict) else None),
        "git_describe": _git_describe(),
        "started": started,
        "finished": _utc_now(),
        "outputs": sorted(outputs),
    }
    tmp = out_dir / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, out_dir / "manifest.json")


def _prepare_out(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _merge(defaults: dict, file_section: dict | None, flags: dict) -> dict:
    merged = dict(defaults)
    if file_section:
        unknown = set(file_section) - set(defaults)
        if unknown:
            raise CommandError(f"unknown config keys: {sorted(unknown)}")
        merged.update(file_section)
    for key, value in flags.items():
        if value is not None:
            merged[key] = value
    return merged


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CommandError(f"cannot read config file {path}: {exc}") from None


def _seed_default(explicit: int | None, config_seed=None) -> int:
    if explicit is not None:
        return explicit
    if config_seed is not None:
        return int(config_seed)
    env = os.environ.get("IBT_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise CommandError(f"IBT_SEED must be an integer, got {env!r}") from None
    return 0


def _resolve_model_config(model_cfg: dict, corpus) -> dict:
    """Fill the data-dependent fields from the corpus when unset."""
    resolved = dict(model_cfg)
    if resolved.get("vocab_size") is None:
        resolved["vocab_size"] = corpus.vocab.size
    if resolved.get("object_feature_dim") is None:
        resolved["object_feature_dim"] = int(corpus.pairs[0].features.shape[1]) if corpus.pairs else 1
    if resolved.get("num_object_classes") is None:
        top = max((int(p.labels.max()) for p in corpus.pairs), default=0)
        resolved["num_object_classes"] = top + 1
    return resolved


# ---------------------------------------------------------------------------
# command bodies: pure functions of (resolved config, out dir)
# ---------------------------------------------------------------------------

def run_synth_data(config: dict, out_dir: Path) -> list[str]:
    from .data import save_corpus, synth_corpus

    corpus = synth_corpus(
        seed=config["seed"],
        num_images=config["num_images"],
        captions_per_image=config["captions_per_image"],
        num_classes=config["num_classes"],
        feature_dim=config["feature_dim"],
        noise_std=config["noise_std"],
        min_objects=config["min_objects"],
        max_objects=config["max_objects"],
        max_fillers=config["max_fillers"],
        image_size=config["image_size"],
    )
    save_corpus(corpus, out_dir / "corpus.jsonl", out_dir / "vocab.json")
    return ["corpus.jsonl", "vocab.json"]


def run_mine_negatives(config: dict, out_dir: Path) -> list[str]:
    from .data import load_corpus
    from .negatives import build_hard_negative_table, build_tfidf, save_table

    corpus = load_corpus(config["corpus"], config["vocab"])
    if len(corpus) < 2:
        raise CommandError("mining needs at least two captions")
    table = build_hard_negative_table(
        build_tfidf(corpus),
        sim_threshold=config["sim_threshold"],
        max_negatives=config["max_negatives"],
    )
    save_table(out_dir / "negatives.jsonl", table)
    return ["negatives.jsonl"]


def run_pretrain(config: dict, out_dir: Path) -> list[str]:
    from .data import load_corpus
    from .model import ModelConfig
    from .negatives import load_table
    from .numerics import save_checkpoint
    from .training import TrainConfig, pretrain, write_metrics_csv

    corpus = load_corpus(config["corpus"], config["vocab"])
    if not corpus.pairs:
        raise CommandError("empty corpus")
    table = load_table(config["negatives"])
    config["model"] = _resolve_model_config(config["model"], corpus)
    model_cfg = ModelConfig.from_dict(config["model"])
    train_cfg = TrainConfig.from_dict(config["train"])
    result = pretrain(corpus, table, model_cfg, train_cfg)
    save_checkpoint(out_dir / "checkpoint.ibt", result.model.params)
    write_metrics_csv(out_dir / "metrics.csv", result.metrics)
    (out_dir / "config.json").write_text(
        json.dumps({"model": model_cfg.to_dict(), "train": train_cfg.to_dict()},
                   indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    return ["checkpoint.ibt", "metrics.csv", "config.json"]


def _model_config_for_checkpoint(config: dict, corpus):
    from .model import ModelConfig

    path = config.get("model_config")
    if path is None:
        sibling = Path(config["checkpoint"]).parent / "config.json"
        if not sibling.exists():
            raise CommandError("no --model-config given and no config.json beside the checkpoint")
        path = str(sibling)
    stored = _load_config_file(path)
    model_section = stored.get("model", stored)
    return ModelConfig.from_dict(_resolve_model_config(model_section, corpus))


def run_finetune(config: dict, out_dir: Path) -> list[str]:
    from .data import load_corpus
    from .numerics import load_checkpoint, save_checkpoint
    from .training import TrainConfig, finetune_retrieval, write_finetune_csv

    corpus = load_corpus(config["corpus"], config["vocab"])
    model_cfg = _model_config_for_checkpoint(config, corpus)
    config["model"] = model_cfg.to_dict()
    train_cfg = TrainConfig.from_dict(config["train"])
    result = finetune_retrieval(corpus, model_cfg, train_cfg, load_checkpoint(config["checkpoint"]))
    save_checkpoint(out_dir / "checkpoint_ema.ibt", result.ema_values)
    save_checkpoint(out_dir / "checkpoint_raw.ibt", result.model.params)
    write_finetune_csv(out_dir / "metrics.csv", result.metrics)
    (out_dir / "config.json").write_text(
        json.dumps({"model": model_cfg.to_dict(), "train": train_cfg.to_dict()},
                   indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    return ["checkpoint_ema.ibt", "checkpoint_raw.ibt", "metrics.csv", "config.json"]


def run_eval(config: dict, out_dir: Path) -> list[str]:
    from .data import load_corpus
    from .evaluation import item_embeddings, write_embeddings, zero_shot_eval
    from .model import InterBert

    corpus = load_corpus(config["corpus"], config["vocab"])
    if not corpus.pairs:
        raise CommandError("empty corpus")
    model_cfg = _model_config_for_checkpoint(config, corpus)
    config["model"] = model_cfg.to_dict()
    model = InterBert.from_checkpoint(model_cfg, config["checkpoint"])
    report = zero_shot_eval(model, corpus)
    recalls = report["recall"]
    header = "split\tN_images\t" + "\t".join(f"R@{k}" for k in sorted(recalls))
    row = f"{config['split']}\t{report['num_images']}\t" + "\t".join(
        f"{recalls[k]:.4f}" for k in sorted(recalls))
    print(header)
    print(row)
    payload = {
        "split": config["split"],
        "num_images": report["num_images"],
        "num_captions": report["num_captions"],
        "recall": {str(k): recalls[k] for k in sorted(recalls)},
    }
    (out_dir / "metrics.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    outputs = ["metrics.json"]
    if config["export_embeddings"]:
        write_embeddings(out_dir / "embeddings.bin", item_embeddings(model, corpus))
        outputs.append("embeddings.bin")
    return outputs


def run_gradcheck(config: dict, out_dir: Path) -> list[str]:
    import numpy as np

    from . import numerics as nt
    from .data import synth_corpus
    from .masking import MaskingConfig, mask_pair
    from .model import InterBert, ModelConfig
    from .numerics import finite_diff_check

    corpus = synth_corpus(seed=config["seed"], num_images=4, num_classes=6,
                          feature_dim=8, min_objects=config["objects"],
                          max_objects=config["objects"])
    model_cfg = ModelConfig(
        hidden_size=config["hidden_size"],
        num_heads=config["num_heads"],
        ffn_size=2 * config["hidden_size"],
        num_interaction_layers=config["interaction_layers"],
        num_extraction_layers=config["extraction_layers"],
        vocab_size=corpus.vocab.size,
        object_feature_dim=8,
        max_text_len=16,
        max_objects=8,
        num_object_classes=6,
        init_std=config["init_std"],
    )
    model = InterBert.create(model_cfg, seed=config["seed"])
    gen = np.random.default_rng(config["seed"])
    positive = mask_pair(corpus.pairs[0], corpus.vocab, gen, MaskingConfig(anchor_prob=0.4))
    negative = mask_pair(corpus.pairs[1], corpus.vocab, gen, MaskingConfig(anchor_prob=0.4),
                         itm_label=0, tokens_override=corpus.pairs[2].tokens)

    def loss_fn():
        logits = []
        msm_parts, mrm_parts = [], []
        for sample in (positive, negative):
            out = model.forward(**sample.model_inputs())
            logits.append(model.itm_score(out.pooled_image, out.pooled_text))
            msm_parts.append(nt.cross_entropy_logits(model.msm_logits(out.h_text), sample.msm_targets))
            mrm_parts.append(nt.cross_entropy_logits(model.mrm_logits(out.h_image), sample.mrm_targets))
        itm = nt.binary_cross_entropy_logits(
            nt.reshape(nt.concat(logits, axis=0), (2,)), [1.0, 0.0])
        return nt.add(nt.add(nt.add(msm_parts[0], msm_parts[1]),
                             nt.add(mrm_parts[0], mrm_parts[1])), itm)

    error = finite_diff_check(loss_fn, model.params, step=config["step"],
                              sample_count=config["samples"], seed=config["seed"])
    passed = error < config["tolerance"]
    report = {
        "max_relative_error": error,
        "tolerance": config["tolerance"],
        "passed": passed,
        "step": config["step"],
        "samples": config["samples"],
        "parameter_count": model.params.num_values(),
    }
    (out_dir / "report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"gradcheck: max relative error {error:.3e} "
          f"({'PASS' if passed else 'FAIL'} at tolerance {config['tolerance']:.1e})")
    if not passed:
        raise CommandError(f"gradient check failed: {error:.3e} >= {config['tolerance']:.1e}")
    return ["report.json"]


def run_knn(config: dict, out_dir: Path) -> list[str]:
    from .evaluation import knn_items, read_embeddings

    embeddings = read_embeddings(config["embeddings"])
    neighbours = knn_items(embeddings, config["trigger"], config["k"])
    print("rank\titem_id")
    for rank, item in enumerate(neighbours, start=1):
        print(f"{rank}\t{item}")
    (out_dir / "neighbours.json").write_text(
        json.dumps({"trigger": config["trigger"], "k": config["k"],
                    "neighbours": neighbours}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    return ["neighbours.json"]


RUNNERS = {
    "synth-data": run_synth_data,
    "mine-negatives": run_mine_negatives,
    "pretrain": run_pretrain,
    "finetune": run_finetune,
    "eval": run_eval,
    "gradcheck": run_gradcheck,
    "knn": run_knn,
}


def _execute(command: str, config: dict, out: str) -> None:
    out_dir = _prepare_out(out)
    started = _utc_now()
    outputs = RUNNERS[command](config, out_dir)
    _write_manifest(out_dir, command, config, outputs, started)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out", required=True, help="output directory (all files land here)")
    parser.add_argument("--config", help="JSON config file; flags override it")
    parser.add_argument("--seed", type=int, help="random seed (overrides config and IBT_SEED)")
    parser.add_argument("--threads", type=int, help="bound on numeric library threads")


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--steps", type=int, dest="total_steps")
    parser.add_argument("--warmup", type=int, dest="warmup_steps")
    parser.add_argument("--batch-size", type=int, dest="batch_size")
    parser.add_argument("--lr", type=float, dest="learning_rate")
    parser.add_argument("--beta2", type=float, dest="beta2")
    parser.add_argument("--weight-decay", type=float, dest="weight_decay")
    parser.add_argument("--ema-rate", type=float, dest="ema_rate")
    parser.add_argument("--hard-neg-prob", type=float, dest="hard_negative_prob")
    parser.add_argument("--anchor-prob", type=float, help="masking anchor probability")
    parser.add_argument("--max-extension", type=int, help="max tokens a text anchor extends over")
    parser.add_argument("--iou-threshold", type=float, help="region-linking overlap threshold")
    parser.add_argument("--action-mix", help="mask,random,keep probabilities, e.g. 0.8,0.1,0.1")
    parser.add_argument("--precision", choices=("float64", "float32"))


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--hidden-size", type=int, dest="hidden_size")
    parser.add_argument("--num-heads", type=int, dest="num_heads")
    parser.add_argument("--ffn-size", type=int, dest="ffn_size")
    parser.add_argument("--interaction-layers", type=int, dest="num_interaction_layers")
    parser.add_argument("--extraction-layers", type=int, dest="num_extraction_layers")
    parser.add_argument("--variant", choices=("interbert", "single_stream"),
                        dest="architecture_variant")
    parser.add_argument("--tie-msm-weights", action="store_true", default=None,
                        dest="tie_msm_weights")
    parser.add_argument("--paper-scale", action="store_true",
                        help="swap in the full-scale architecture and schedule defaults")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="interbert",
        description="desk-scale multimodal pretraining pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic paired corpus")
    _add_common(p)
    p.add_argument("--num-images", type=int)
    p.add_argument("--captions-per-image", type=int)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--feature-dim", type=int)
    p.add_argument("--noise-std", type=float)
    p.add_argument("--min-objects", type=int)
    p.add_argument("--max-objects", type=int)
    p.add_argument("--max-fillers", type=int)
    p.add_argument("--image-size", type=int)

    p = sub.add_parser("mine-negatives", help="build the hard-negative table")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--sim-threshold", type=float)
    p.add_argument("--max-negatives", type=int)

    p = sub.add_parser("pretrain", help="run masked-group + matching pretraining")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--negatives", required=True)
    _add_model_flags(p)
    _add_train_flags(p)

    p = sub.add_parser("finetune", help="multiple-choice retrieval finetuning")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--model-config", help="config.json of the checkpoint (default: sibling file)")
    _add_train_flags(p)

    p = sub.add_parser("eval", help="caption-to-image retrieval metrics")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--model-config")
    p.add_argument("--split", default="eval", help="label printed in the metrics table")
    p.add_argument("--export-embeddings", action="store_true",
                   help="also write fused item embeddings (embeddings.bin)")

    p = sub.add_parser("gradcheck", help="finite-difference check on a tiny model")
    _add_common(p)
    p.add_argument("--hidden-size", type=int, default=8)
    p.add_argument("--num-heads", type=int, default=2)
    p.add_argument("--interaction-layers", type=int, default=2)
    p.add_argument("--extraction-layers", type=int, default=1)
    p.add_argument("--objects", type=int, default=4)
    p.add_argument("--init-std", type=float, default=0.5)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = sub.add_parser("knn", help="nearest neighbours over exported embeddings")
    _add_common(p)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--trigger", type=int, required=True)
    p.add_argument("--k", type=int, default=5)

    p = sub.add_parser("replay", help="re-run a command from its manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    return parser


def _train_section(file_cfg: dict, args: argparse.Namespace, paper_scale: bool) -> dict:
    from .training import TrainConfig

    defaults = TrainConfig().to_dict()
    if paper_scale:
        defaults.update(PAPER_TRAIN_OVERRIDES)
    section = dict(defaults)
    from_file = file_cfg.get("train", {})
    unknown = set(from_file) - set(section)
    if unknown:
        raise CommandError(f"unknown train config keys: {sorted(unknown)}")
    for key, value in from_file.items():
        if key == "masking":
            section["masking"] = {**section["masking"], **value}
        else:
            section[key] = value
    for key in ("total_steps", "warmup_steps", "batch_size", "learning_rate", "beta2",
                "weight_decay", "ema_rate", "hard_negative_prob", "precision"):
        value = getattr(args, key, None)
        if value is not None:
            section[key] = value
    masking = dict(section["masking"])
    if getattr(args, "anchor_prob", None) is not None:
        masking["anchor_prob"] = args.anchor_prob
    if getattr(args, "max_extension", None) is not None:
        masking["max_extension"] = args.max_extension
    if getattr(args, "iou_threshold", None) is not None:
        masking["iou_threshold"] = args.iou_threshold
    if getattr(args, "action_mix", None) is not None:
        try:
            mask_p, random_p, keep_p = (float(x) for x in args.action_mix.split(","))
        except ValueError:
            raise CommandError("--action-mix expects three comma-separated probabilities") from None
        masking.update(action_mask_prob=mask_p, action_random_prob=random_p, action_keep_prob=keep_p)
    section["masking"] = masking
    section["seed"] = _seed_default(args.seed, from_file.get("seed"))
    return section


def _model_section(file_cfg: dict, args: argparse.Namespace, paper_scale: bool) -> dict:
    defaults = dict(TOY_MODEL_PRESET)
    if paper_scale:
        defaults.update(PAPER_MODEL_OVERRIDES)
    section = _merge(defaults, file_cfg.get("model", {}), {
        "hidden_size": getattr(args, "hidden_size", None),
        "num_heads": getattr(args, "num_heads", None),
        "ffn_size": getattr(args, "ffn_size", None),
        "num_interaction_layers": getattr(args, "num_interaction_layers", None),
        "num_extraction_layers": getattr(args, "num_extraction_layers", None),
        "architecture_variant": getattr(args, "architecture_variant", None),
        "tie_msm_weights": getattr(args, "tie_msm_weights", None),
    })
    return section


def _dispatch(args: argparse.Namespace) -> None:
    if args.command == "replay":
        manifest = _load_config_file(args.manifest)
        command = manifest.get("command")
        if command not in RUNNERS:
            raise CommandError(f"manifest names unknown command {command!r}")
        _execute(command, manifest["config"], args.out)
        return

    file_cfg = _load_config_file(getattr(args, "config", None))

    if args.command == "synth-data":
        defaults = {
            "seed": 0, "num_images": 200, "captions_per_image": 1, "num_classes": 12,
            "feature_dim": 16, "noise_std": 0.1, "min_objects": 2, "max_objects": 6,
            "max_fillers": 3, "image_size": 100,
        }
        config = _merge(defaults, file_cfg, {
            key: getattr(args, key) for key in defaults if key != "seed"
        })
        config["seed"] = _seed_default(args.seed, file_cfg.get("seed"))
    elif args.command == "mine-negatives":
        defaults = {"corpus": None, "vocab": None, "sim_threshold": 0.5,
                    "max_negatives": 30, "seed": 0}
        config = _merge(defaults, file_cfg, {
            "corpus": args.corpus, "vocab": args.vocab,
            "sim_threshold": args.sim_threshold, "max_negatives": args.max_negatives,
        })
        config["seed"] = _seed_default(args.seed, file_cfg.get("seed"))
    elif args.command == "pretrain":
        paper = bool(getattr(args, "paper_scale", False))
        config = {
            "corpus": str(Path(args.corpus).resolve()),
            "vocab": str(Path(args.vocab).resolve()),
            "negatives": str(Path(args.negatives).resolve()),
            "model": _model_section(file_cfg, args, paper),
            "train": _train_section(file_cfg, args, paper),
        }
    elif args.command == "finetune":
        config = {
            "corpus": str(Path(args.corpus).resolve()),
            "vocab": str(Path(args.vocab).resolve()),
            "checkpoint": str(Path(args.checkpoint).resolve()),
            "model_config": None if args.model_config is None else str(Path(args.model_config).resolve()),
            "train": _train_section(file_cfg, args, False),
        }
    elif args.command == "eval":
        config = {
            "corpus": str(Path(args.corpus).resolve()),
            "vocab": str(Path(args.vocab).resolve()),
            "checkpoint": str(Path(args.checkpoint).resolve()),
            "model_config": None if args.model_config is None else str(Path(args.model_config).resolve()),
            "split": args.split,
            "export_embeddings": bool(args.export_embeddings),
            "seed": _seed_default(args.seed, file_cfg.get("seed")),
        }
    elif args.command == "gradcheck":
        defaults = {
            "hidden_size": 8, "num_heads": 2, "interaction_layers": 2,
            "extraction_layers": 1, "objects": 4, "init_std": 0.5,
            "step": 1e-5, "samples": 200, "tolerance": 1e-4, "seed": 0,
        }
        config = _merge(defaults, file_cfg, {
            "hidden_size": args.hidden_size, "num_heads": args.num_heads,
            "interaction_layers": args.interaction_layers,
            "extraction_layers": args.extraction_layers, "objects": args.objects,
            "init_std": args.init_std, "step": args.step, "samples": args.samples,
            "tolerance": args.tolerance,
        })
        config["seed"] = _seed_default(args.seed, file_cfg.get("seed"))
    elif args.command == "knn":
        config = {
            "embeddings": str(Path(args.embeddings).resolve()),
            "trigger": args.trigger,
            "k": args.k,
            "seed": _seed_default(args.seed, file_cfg.get("seed")),
        }
    else:  # pragma: no cover - argparse rejects unknown commands
        raise CommandError(f"unknown command {args.command!r}")

    _execute(args.command, config, args.out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = getattr(args, "threads", None)
    if threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)
    try:
        _dispatch(args)
    except Exception as exc:  # one-line machine-parseable failure
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
