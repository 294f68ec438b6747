"""``gpfnet`` command line: gen-synth, train, eval, ablate, gradcheck.

Exit codes: 0 success, 1 runtime or validation failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import experiment
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigFileError, RunConfig, build_run_config
from .data import DatasetError, gen_synthetic, load_dataset, save_dataset
from .evaluation import evaluate
from .model import ABLATION_MODES, ConfigError, GpfModel, ModelConfig
from .training import TrainConfig, TrainConfigError

log = logging.getLogger("gpfnet")


class CommandError(Exception):
    """Runtime failure reported with exit code 1."""


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _nonneg_float(text: str) -> float:
    value = float(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _ks(text: str) -> list[int]:
    try:
        return [int(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad rank list {text!r}") from None


def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="flat key = value config file")
    p.add_argument("--seed", type=int, default=None, help="RNG seed")
    p.add_argument("--out", metavar="PATH", help="output file")
    p.add_argument("-v", "--verbose", action="store_true")


def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--d-model", dest="d_model", type=_positive)
    g.add_argument("--fusion-layers", dest="fusion_layers", type=_positive)
    g.add_argument("--fusion-heads", dest="fusion_heads", type=_positive)
    g.add_argument("--encoder-layers", dest="encoder_layers", type=_positive)
    g.add_argument("--encoder-heads", dest="encoder_heads", type=_positive)
    g.add_argument("--mode", dest="ablation_mode", choices=ABLATION_MODES)


def _train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--lr", type=float)
    g.add_argument("--weight-decay", dest="weight_decay", type=_nonneg_float)
    g.add_argument("--bias-decay", dest="bias_decay", type=_nonneg_float)
    g.add_argument("--iterations", type=_positive)
    g.add_argument("--batch-size", dest="batch_size", type=_positive)
    g.add_argument("--p-identities", dest="p_identities", type=_positive)
    g.add_argument("--k-instances", dest="k_instances", type=_positive)
    g.add_argument("--margin", type=_nonneg_float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gpfnet", description="Gated progressive fusion for multimodal re-identification"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic embedding dataset")
    _shared(p)
    p.add_argument("--ids", type=_positive, default=8)
    p.add_argument("--per-id", dest="per_id", type=_positive, default=4)
    p.add_argument("--img-dim", dest="img_dim", type=_positive, default=2048)
    p.add_argument("--txt-dim", dest="txt_dim", type=_positive, default=768)
    p.add_argument("--n-tokens", dest="n_tokens", type=_positive, default=4)
    p.add_argument("--noise", type=_nonneg_float, default=0.1)
    p.add_argument("--text-noise", dest="text_noise", type=_nonneg_float, default=None)
    p.add_argument("--cameras", type=_positive, default=None)
    p.add_argument("--sample-seed", dest="sample_seed", type=int, default=None,
                   help="noise seed; same --seed with another sample seed redraws samples")
    p.add_argument("--id-prefix", dest="id_prefix", default="")
    p.add_argument("--format", choices=("jsonl", "bin"), default=None,
                   help="default: jsonl for .jsonl/.json paths, else bin")

    p = sub.add_parser("train", help="train a model on an embedding dataset")
    _shared(p)
    p.add_argument("--data", metavar="PATH")
    p.add_argument("--loss-log", dest="loss_log", metavar="PATH",
                   help="step<TAB>loss lines (default: <out>.loss.tsv)")
    _model_flags(p)
    _train_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on query/gallery sets")
    _shared(p)
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--query", metavar="PATH")
    p.add_argument("--gallery", metavar="PATH", help="default: the query set")
    p.add_argument("--ks", type=_ks)

    p = sub.add_parser("ablate", help="train+evaluate baseline/text_only/image_only/full")
    _shared(p)
    p.add_argument("--data", metavar="PATH")
    p.add_argument("--query", metavar="PATH", help="default: the training set")
    p.add_argument("--gallery", metavar="PATH", help="default: the query set")
    p.add_argument("--ks", type=_ks)
    _model_flags(p)
    _train_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter group")
    _shared(p)
    p.add_argument("--d-model", dest="d_model", type=_positive, default=16)
    p.add_argument("--layers", type=_positive, default=2, help="fusion and encoder layers")
    p.add_argument("--img-dim", dest="img_dim", type=_positive, default=8)
    p.add_argument("--txt-dim", dest="txt_dim", type=_positive, default=6)
    p.add_argument("--mode", dest="ablation_mode", choices=ABLATION_MODES, default="full")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-coords", dest="max_coords", type=_positive, default=None,
                   help="check a random subset of this many coordinates per group")
    return parser


def _run_config(args, keys) -> RunConfig:
    flags = {k: getattr(args, k, None) for k in keys}
    if getattr(args, "seed", None) is not None:
        flags["seed"] = args.seed
    return build_run_config(args.config, **flags)


def _need(cfg: RunConfig, *names) -> None:
    for name in names:
        path = getattr(cfg, name)
        if path is None:
            raise CommandError(f"missing required setting: {name}")
        if not Path(path).is_file():
            raise CommandError(f"{name}: no such file: {path}")


def _write_text(path, text: str) -> None:
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise CommandError(f"cannot write {path}: {exc}") from None


# commands --------------------------------------------------------------------

def cmd_gen_synth(args) -> int:
    if args.out is None:
        raise CommandError("--out is required")
    ds = gen_synthetic(
        args.ids, args.per_id, args.img_dim, args.txt_dim, args.n_tokens, args.noise,
        0 if args.seed is None else args.seed,
        text_noise_sigma=args.text_noise, cameras=args.cameras,
        sample_seed=args.sample_seed, id_prefix=args.id_prefix,
    )
    try:
        save_dataset(ds, args.out, args.format)
    except OSError as exc:
        raise CommandError(f"cannot write {args.out}: {exc}") from None
    print(f"wrote {ds.count} records ({ds.num_identities} identities) to {args.out}")
    return 0


TRAIN_KEYS = (
    "data", "loss_log", "d_model", "fusion_layers", "fusion_heads", "encoder_layers",
    "encoder_heads", "ablation_mode", "lr", "weight_decay", "bias_decay", "iterations",
    "batch_size", "p_identities", "k_instances", "margin",
)


def cmd_train(args) -> int:
    cfg = _run_config(args, TRAIN_KEYS)
    _need(cfg, "data")
    out = args.out or cfg.checkpoint
    if out is None:
        raise CommandError("--out (checkpoint path) is required")
    dataset = load_dataset(cfg.data)
    start = time.perf_counter()
    model, result = experiment.fit(cfg, dataset)
    log.info("trained %d steps in %.1fs", result.steps, time.perf_counter() - start)
    try:
        save_checkpoint(Checkpoint(model, result.steps, cfg.seed), out)
    except OSError as exc:
        raise CommandError(f"cannot write {out}: {exc}") from None
    loss_log = cfg.loss_log or f"{out}.loss.tsv"
    _write_text(loss_log, "".join(f"{i}\t{v!r}\n" for i, v in enumerate(result.history, 1)))
    print(f"step {result.steps}: loss {result.history[-1]:.6f}; checkpoint {out}; loss log {loss_log}")
    return 0


def cmd_eval(args) -> int:
    cfg = _run_config(args, ("checkpoint", "query", "gallery", "ks"))
    _need(cfg, "checkpoint", "query")
    if cfg.gallery is not None:
        _need(cfg, "gallery")
    model = load_checkpoint(cfg.checkpoint).model
    query = load_dataset(cfg.query)
    gallery = query if cfg.gallery in (None, cfg.query) else load_dataset(cfg.gallery)
    experiment.check_eval_dims(model, query, "query")
    experiment.check_eval_dims(model, gallery, "gallery")
    report = evaluate(model, query, gallery, cfg.ks)
    out = args.out or cfg.report
    if out:
        _write_text(out, report.to_json() + "\n")
    cmc = "  ".join(f"Rank-{k} {v:.4f}" for k, v in report.cmc.items())
    print(f"mAP {report.map:.4f}  {cmc}  ({report.num_queries} queries, {report.num_skipped} skipped)")
    return 0


def cmd_ablate(args) -> int:
    cfg = _run_config(args, TRAIN_KEYS + ("query", "gallery", "ks"))
    _need(cfg, "data")
    for name in ("query", "gallery"):
        if getattr(cfg, name) is not None:
            _need(cfg, name)
    train_set = load_dataset(cfg.data)
    query = load_dataset(cfg.query) if cfg.query else None
    gallery = load_dataset(cfg.gallery) if cfg.gallery else None
    rows = experiment.ablate(cfg, train_set, query, gallery)
    table = experiment.ablation_table(rows)
    out = args.out or cfg.report
    if out:
        _write_text(out, json.dumps(table, indent=2, sort_keys=True) + "\n")
    ks = list(rows[0].report.cmc)
    print("mode        mAP     " + "  ".join(f"Rank-{k:<3}" for k in ks))
    for r in rows:
        vals = "  ".join(f"{r.report.cmc[k]:.4f}  " for k in ks)
        print(f"{r.mode:<11} {r.report.map:.4f}  {vals}")
    print(table["note"])
    return 0


def cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    mcfg = ModelConfig(
        d_model=args.d_model, img_dim=args.img_dim, txt_dim=args.txt_dim,
        fusion_layers=args.layers, encoder_layers=args.layers,
        num_identities=2, ablation_mode=args.ablation_mode,
    )
    model = GpfModel.init(mcfg, seed)
    batch = experiment.micro_batch(args.img_dim, args.txt_dim, seed)
    tcfg = TrainConfig(batch_size=4, p_identities=2, k_instances=2, iterations=1, seed=seed)
    start = time.perf_counter()
    errors = experiment.gradcheck_groups(model, batch, tcfg, args.eps, args.max_coords, seed)
    lines = []
    failed = []
    for name, err in errors.items():
        ok = err < args.tol
        if not ok:
            failed.append(name)
        lines.append(f"{name:<28} {err:.3e}  {'ok' if ok else 'FAIL'}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        _write_text(args.out, text)
    print(f"{len(errors) - len(failed)}/{len(errors)} groups below tol {args.tol:g} "
          f"({time.perf_counter() - start:.1f}s)")
    if failed:
        print("failing groups: " + ", ".join(failed), file=sys.stderr)
        return 1
    return 0


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except ConfigFileError as exc:
        parser.exit(2, f"gpfnet {args.command}: error: {exc}\n")
    except (CommandError, DatasetError, CheckpointError, ConfigError, TrainConfigError,
            ValueError, OSError) as exc:
        print(f"gpfnet {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
