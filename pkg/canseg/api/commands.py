import argparse
import json
import logging
from pathlib import Path
from typing import Optional

from canseg.core.config import settings
from canseg.models.schemas import RunConfig
from canseg.nn.can import CanModel
from canseg.services import bench as bench_service
from canseg.services import complexity, gradcheck_suite, inference, selftest, weights
from canseg.services.trainer import Trainer

logger = logging.getLogger(__name__)


def load_config(path: Optional[Path]) -> RunConfig:
    """Explicit --config, else the settings default; built-in defaults when the default file is absent."""
    if path is not None:
        return RunConfig.load(path)
    if Path(settings.default_config).exists():
        return RunConfig.load(settings.default_config)
    logger.warning("%s not found, using built-in defaults", settings.default_config)
    return RunConfig()


def load_model(config: RunConfig, weights_path: Optional[Path]) -> CanModel:
    if weights_path is None:
        logger.warning("no weights given, using a freshly initialised model")
        return CanModel(config.model)
    return weights.read_weights(weights_path, config.model)


def train_command(args: argparse.Namespace) -> int:
    """Train on the synthetic dataset and write the weight container"""
    config = load_config(args.config)
    if args.seed is not None:
        config = config.model_copy(update={"train": config.train.model_copy(update={"seed": args.seed})})
    trainer = Trainer(config)
    if args.resume:
        trainer.resume(args.resume)
    result = trainer.train(args.out, max_iter=args.max_iter)
    summary = f"trained iterations {result.start_iteration}..{result.final_iteration}"
    if result.losses:
        summary += f", final loss {result.losses[-1]:.4f}"
    if result.val_miou is not None:
        summary += f", val mIoU {result.val_miou:.4f}"
    print(summary)
    return 0


def infer_command(args: argparse.Namespace) -> int:
    """Segment PPM images, writing label PGMs and colour PPMs"""
    config = load_config(args.config)
    model = load_model(config, args.weights)
    outputs = inference.infer_files(model, args.images, args.out, threads=args.threads)
    for label_path, color_path in outputs:
        print(f"{label_path}\n{color_path}")
    return 0


def profile_command(args: argparse.Namespace) -> int:
    """Per-layer parameters, FLOPs, MAdd and activation estimates, plus the attention saving"""
    # built-in architecture unless --config is given; the settings default is the toy config
    config = RunConfig.load(args.config) if args.config is not None else RunConfig()
    model_config = config.model
    if args.attention_only:
        cost = complexity.attention_cost_ratio(args.height, args.width, model_config.ga_embed_channels, model_config.spp)
        print(cost.model_dump_json(indent=2) if args.json else complexity.render_attention(cost))
        return 0
    shape = (args.batch, model_config.input_channels, args.height, args.width)
    model = CanModel(model_config.model_copy(update={"train_mode": False}))
    report = complexity.profile(model, shape)
    cost = complexity.attention_cost_ratio(args.height // 16, args.width // 16, model_config.ga_embed_channels, model_config.spp)
    attention = complexity.attention_variant_costs(model_config, shape)
    fusion = complexity.ffm_variant_costs(model_config, shape)
    if args.json:
        payload = report.model_dump()
        payload["attention"] = cost.model_dump()
        payload["attention_variants"] = [v.model_dump() for v in attention]
        payload["fusion_variants"] = [v.model_dump() for v in fusion]
        print(json.dumps(payload, indent=2))
        return 0
    print(complexity.render_text(report))
    print()
    print(complexity.render_attention(cost))
    for title, variants in (("attention variants", attention), ("fusion variants", fusion)):
        print(f"\n{title}:")
        for v in variants:
            print(f"  {v.name:<28} params {v.params:>10}  flops {v.flops:>14}")
    return 0


def bench_command(args: argparse.Namespace) -> int:
    """Wall-clock forward latency"""
    config = load_config(args.config)
    model = load_model(config, args.weights)
    report = bench_service.bench(model, args.height, args.width, iters=args.iters, warmup=args.warmup)
    print(report.model_dump_json(indent=2) if args.json else bench_service.render_bench(report))
    return 0


def gradcheck_command(args: argparse.Namespace) -> int:
    """Finite-difference gradient check of every block; non-zero exit names failing blocks"""
    rows = gradcheck_suite.run_suite(seed=args.seed, corrupt=args.corrupt, blocks=args.block)
    print(gradcheck_suite.render_rows(rows))
    failed = [r.block for r in rows if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return 1
    return 0


def selftest_command(args: argparse.Namespace) -> int:
    """Oracle-equivalence battery; exit code is the number of failures"""
    results = selftest.run_selftest()
    print(selftest.render_results(results))
    return selftest.exit_code(results)


def config_command(args: argparse.Namespace) -> int:
    """Print the default run configuration, or validate a file"""
    if args.validate:
        config = RunConfig.load(args.validate)
        print(f"{args.validate}: ok ({config.model.num_classes} classes)")
        return 0
    print(RunConfig().model_dump_json(indent=2))
    return 0


def require_positive(value: str) -> int:
    n = int(value)
    if n <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return n

