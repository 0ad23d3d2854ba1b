"""Command line: ``pegeqat train|eval|gradcheck|sweep``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Optional, Sequence

from .errors import CheckpointError, ConfigError, ContractError, FormatError


def _cmd_train(args) -> int:
    from .config import load_config
    from .harness import train

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_overrides(train__seed=args.seed)
    out = args.out or os.path.join("runs", os.path.splitext(os.path.basename(args.config))[0])
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.txt"), "w") as fh:
        fh.write(cfg.to_text())
    res = train(cfg, out, prefetch_batches=not args.no_prefetch)
    final = res.metrics[-1].test_acc if res.metrics else float("nan")
    print(f"steps={res.steps} final_test_acc={final:.2f} best_test_acc={res.best_acc:.2f} out={out}")
    return 0


def _cmd_eval(args) -> int:
    from .checkpoint import apply_checkpoint, load_checkpoint
    from .data import load_dataset
    from .harness import evaluate
    from .models import ModelSpec, build_model

    ck = load_checkpoint(args.checkpoint)
    spec = ModelSpec.from_descriptor(ck.model_descriptor)
    model = build_model(spec)
    apply_checkpoint(model, ck)
    name = args.dataset or ("mnist" if spec.in_shape[0] == 1 else "cifar10")
    _, test = load_dataset(name, args.data)
    acc = evaluate(model, test)
    print(f"test_acc={acc:.2f} n={len(test)}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    try:
        results = run_suite(args.op, instances=args.instances, seed=args.seed)
    except KeyError as exc:
        print(exc.args[0], file=sys.stderr)
        return 2
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def _cmd_sweep(args) -> int:
    from .config import load_config
    from .curriculum import lr_at, mu_at, replacement_rate_at
    from .harness import schedule_from

    cfg = load_config(args.config)
    steps = args.steps
    if steps is None:
        if cfg["train.max_steps"] >= 0:
            steps = cfg["train.max_steps"]
        else:
            n = cfg["data.subset_n"] or cfg["data.synth_n"]
            steps = cfg["train.epochs"] * -(-n // cfg["data.batch"])
    sched = schedule_from(cfg, steps)
    t_max = max(steps - 1, 1)
    with open(args.out, "w") as fh:
        fh.write("T,p_t,mu_t,lr\n")
        for T in range(steps):
            fh.write(f"{T},{replacement_rate_at(sched, T):.6f},{mu_at(sched, T):.6f},{lr_at(cfg['train.lr'], T, t_max):.6f}\n")
    print(f"wrote {steps} rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pegeqat", description="Quantization-aware training toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--no-prefetch", action="store_true", help="single-threaded, bitwise reproducible run")
    t.add_argument("--out")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--dataset", choices=("cifar10", "mnist"), help="default: inferred from the model input shape")
    e.set_defaults(func=_cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference suite and estimator identities")
    g.add_argument("--op", help="a single op name, or 'estimators'")
    g.add_argument("--instances", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=_cmd_gradcheck)

    s = sub.add_parser("sweep", help="write replacing-rate, mu and lr curves for a config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, help="default: the run length implied by the config")
    s.set_defaults(func=_cmd_sweep)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FormatError, CheckpointError, ContractError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
