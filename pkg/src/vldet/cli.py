"""Command-line entry point. JSON on stdout, diagnostics on stderr.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

log = logging.getLogger("vldet")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise UsageError("empty value list")
    return values


def _names(text: str | None) -> list[str] | None:
    if text is None:
        return None
    names = [n.strip() for n in text.split(",") if n.strip()]
    if not names:
        raise UsageError("prompt list is empty")
    return names


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _config(path):
    from .config import ConfigError, ModelConfig, load_config

    if path is None:
        return ModelConfig()
    try:
        return load_config(path)
    except ConfigError as exc:
        raise UsageError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    from .synthdata import build_vocabulary, dataset_hash, generate_dataset

    if args.scenes < 1 or args.eval_scenes < 1:
        raise UsageError("--scenes and --eval-scenes must be positive")
    try:
        vocab = build_vocabulary(args.colors, args.shapes, args.novel, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    size = (args.image_size, args.image_size)
    generate_dataset(vocab, args.scenes, "train", args.seed, args.out, size)
    generate_dataset(vocab, args.eval_scenes, "eval", args.seed, args.out, size)
    _emit({
        "out": str(args.out),
        "classes": vocab.classes,
        "base": [vocab.name(i) for i in vocab.base_ids],
        "novel": [vocab.name(i) for i in vocab.novel_ids],
        "train_scenes": args.scenes,
        "eval_scenes": args.eval_scenes,
        "sha256": dataset_hash(args.out),
    })
    return EXIT_OK


def _train_one(cfg, data_dir, out, freeze_spec, log_path, steps=None, epochs=None):
    from .synthdata import load_dataset
    from .train import FreezePolicy, NonFiniteLoss, build_model, fit

    try:
        freeze = FreezePolicy.parse(freeze_spec)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    dataset = load_dataset(data_dir, "train")
    model = build_model(cfg)

    def progress(step, breakdown):
        if step % 100 == 0:
            log.info("step %d total %.4f", step, breakdown.total)

    try:
        result = fit(model, dataset, cfg, epochs=epochs, steps=steps, freeze=freeze, log_path=log_path,
                     checkpoint_path=out, progress=progress)
    except NonFiniteLoss as exc:
        raise RuntimeError(f"non-finite loss at step {exc.step}: {json.dumps(exc.breakdown, sort_keys=True)}") from None
    return model, result, freeze


def cmd_train(args) -> int:
    cfg = _config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    log_path = args.log or str(args.out) + ".log.jsonl"
    _, result, freeze = _train_one(cfg, args.data, args.out, args.freeze, log_path, args.steps, args.epochs)
    _emit({
        "checkpoint": str(args.out),
        "sha256": _sha256(args.out),
        "log": log_path,
        "steps": result.step,
        "frozen": freeze.names(),
        "initial_loss": result.log[0]["total"] if result.log else None,
        "final_loss": result.log[-1]["total"] if result.log else None,
    })
    return EXIT_OK


def _prompts_for(split: str, vocab) -> list[str]:
    if split == "base":
        return [vocab.name(i) for i in vocab.base_ids]
    if split == "novel":
        return [vocab.name(i) for i in vocab.novel_ids]
    return vocab.classes


def cmd_eval(args) -> int:
    from .evaluation import default_workers, evaluate
    from .synthdata import load_dataset
    from .train import load_checkpoint

    prompts = _names(args.prompts)
    model, _ = load_checkpoint(args.ckpt)
    model.eval()
    dataset = load_dataset(args.data, "eval")
    if prompts is None:
        prompts = _prompts_for(args.split, dataset.vocab)
    report = evaluate(model, dataset, prompts, workers=args.workers or default_workers())
    if args.out:
        Path(args.out).write_text(report.to_json(indent=2) + "\n")
    _emit(report.to_dict())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import battery_report, run_battery

    if not 1e-7 <= args.eps <= 1e-3:
        raise UsageError("--eps must lie in [1e-7, 1e-3]")
    results = run_battery(seeds=range(args.seeds), eps=args.eps, tol=args.tol)
    report = battery_report(results)
    report.update(eps=args.eps, tol=args.tol)
    for name, entry in report["checks"].items():
        log.info("%-14s max rel err %.3e  %s", name, entry["max_relative_error"], "ok" if entry["passed"] else "FAIL")
    _emit(report)
    return EXIT_OK if report["passed"] else EXIT_RUNTIME


def cmd_sweep_minibatch(args) -> int:
    from .evaluation import default_workers, evaluate
    from .synthdata import load_dataset

    cfg = _config(args.config)
    values = _int_list(args.values)
    bad = [m for m in values if m < 1 or cfg.batch_size % m]
    if bad:
        raise UsageError(f"minibatch values {bad} do not divide batch_size={cfg.batch_size}")
    out = Path(args.out)
    eval_set = load_dataset(args.data, "eval")
    runs = []
    for m in values:
        run_cfg = cfg.replace(minibatch=m)
        log_path = out.with_name(f"{out.stem}.m{m}.log.jsonl")
        ckpt = out.with_name(f"{out.stem}.m{m}.ckpt")
        log.info("minibatch %d", m)
        model, result, _ = _train_one(run_cfg, args.data, ckpt, None, log_path, args.steps)
        model.eval()
        report = evaluate(model, eval_set, None, workers=default_workers())
        runs.append({
            "minibatch": m,
            "ap50_all": report.ap50_all,
            "ap50_base": report.ap50_base,
            "ap50_novel": report.ap50_novel,
            "icl_zero_every_step": all(r["icl"] == 0.0 for r in result.log),
            "steps": result.step,
            "log": str(log_path),
            "checkpoint": str(ckpt),
        })
    doc = {"batch_size": cfg.batch_size, "values": values, "runs": runs}
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _emit(doc)
    return EXIT_OK


def cmd_detect(args) -> int:
    import torch

    from .numeric import load_tensor
    from .train import load_checkpoint

    prompts = _names(args.prompts)
    try:
        image = load_tensor(args.scene)
    except (OSError, ValueError) as exc:
        raise RuntimeError(f"cannot read scene {args.scene}: {exc}") from None
    model, _ = load_checkpoint(args.ckpt)
    model.eval()
    h, w = model.cfg.image_size
    if image.shape != (h, w, 3):
        raise RuntimeError(f"scene has shape {image.shape}, model expects ({h}, {w}, 3)")
    with torch.no_grad():
        l_cls = model.encode_prompts(prompts)
    dtype = l_cls.dtype
    dets = model.detect(torch.from_numpy(image).permute(2, 0, 1).to(dtype), l_cls)
    _emit([{"box": [float(v) for v in d.box], "class": prompts[d.class_id - 1], "score": float(d.score)}
           for d in dets])
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vldet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render a synthetic train/eval dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--scenes", type=int, default=50)
    p.add_argument("--eval-scenes", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--colors", type=int, default=4)
    p.add_argument("--shapes", type=int, default=4)
    p.add_argument("--novel", type=int, default=4)
    p.add_argument("--image-size", type=int, default=64)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on the base classes of a dataset")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--config", type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--freeze", default=None, help="comma list of el,v2l1,v2l2,ev")
    p.add_argument("--log", default=None, help="JSONL training log (default: <out>.log.jsonl)")
    p.add_argument("--steps", type=int, default=None, help="override the config step count")
    p.add_argument("--epochs", type=int, default=None, help="train for whole epochs instead of steps")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="AP50 report on the eval split")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--prompts", default=None, help="comma-separated class names")
    p.add_argument("--split", choices=("base", "novel", "all"), default="all")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="double-precision gradient battery")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--seeds", type=int, default=5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep-minibatch", help="train one model per contrastive group size")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--config", type=Path)
    p.add_argument("--values", default="1,2,4,8")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_sweep_minibatch)

    p = sub.add_parser("detect", help="detect objects in one scene tensor")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--scene", required=True, type=Path)
    p.add_argument("--prompts", required=True)
    p.set_defaults(func=cmd_detect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"vldet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"vldet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # every other failure is a runtime error
        log.debug("traceback", exc_info=True)
        print(f"vldet: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
