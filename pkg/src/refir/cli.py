"""``refir`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .evalkit.config import ConfigError, DataError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _injection_config(args):
    from .injection import InjectionConfig

    sites = tuple(s for s in args.sites.split(",") if s) if args.sites else None
    try:
        return InjectionConfig(scale=args.scale, sites=sites, window=args.window,
                               enable_sg=not args.no_sg, enable_da=not args.no_da,
                               fusion_mode=args.fusion_mode)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _add_injection_flags(p):
    p.add_argument("--scale", type=float, default=0.5)
    p.add_argument("--sites", default="", help="comma-separated site ids (default: decoder sites)")
    p.add_argument("--window", type=int, default=20)
    p.add_argument("--no-sg", action="store_true", help="disable spatial adaptive gating")
    p.add_argument("--no-da", action="store_true", help="disable distribution alignment")
    p.add_argument("--fusion-mode", default="separate", choices=["separate", "concat", "replace"])


def cmd_index(args):
    from .retrieval import BuildReport, build_index, get_embedder, save_index

    report = BuildReport()
    try:
        index = build_index(args.db, get_embedder(args.embedder), report)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None
    save_index(index, args.out)
    print(f"indexed {len(index)} images (dim {index.dim}) -> {args.out}")
    for name, why in report.skipped.items():
        print(f"skipped {name}: {why}", file=sys.stderr)


def cmd_retrieve(args):
    from .images import load_image
    from .retrieval import IndexFormatError, load_index, query

    try:
        index = load_index(args.index)
        image = load_image(args.query)
    except (OSError, IndexFormatError) as exc:
        raise DataError(str(exc)) from None
    if args.k > len(index):
        raise ConfigError(f"-k {args.k} exceeds index size {len(index)}")
    try:
        results = query(index, image, args.k)
    except ValueError as exc:
        raise DataError(f"query: {exc}") from None
    print(f"{'rank':>4}  {'similarity':>10}  image_id")
    for r in results:
        print(f"{r.rank:>4}  {r.similarity:>10.6f}  {r.image_id}")


def cmd_train(args):
    from .restorer import DegradationConfig, ModelConfig, TrainConfig, build_model, save_checkpoint, train
    from .restorer.train import load_training_images

    try:
        images = load_training_images(args.data)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from None
    model = build_model(ModelConfig(in_channels=images[0].shape[0], image_size=images[0].shape[-1],
                                    base_width=args.width), seed=args.seed)
    result = train(model, images, DegradationConfig(scale=args.factor),
                   TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                               crop=args.crop, ema_decay=args.ema or None, seed=args.seed))
    save_checkpoint(model, args.out, {"losses": result.losses, "seed": args.seed, "epochs": args.epochs})
    print(f"trained {result.steps} steps in {result.seconds:.1f}s; final loss {result.losses[-1]:.5f}")


def cmd_degrade(args):
    from .images import list_images, load_image, save_image
    from .restorer import DegradationConfig, degrade

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        paths = list_images(args.hq)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None
    for n, path in enumerate(paths):
        seed = int(np.random.SeedSequence([args.seed, n]).generate_state(1)[0])
        try:
            lq = degrade(load_image(path), DegradationConfig(scale=args.scale, seed=seed))
        except ValueError as exc:
            raise DataError(f"{path.name}: {exc}") from None
        save_image(out / f"{path.stem}.png", lq)
    print(f"degraded {len(paths)} images -> {out}")


def _provider(name, args, lq_path):
    from .dual_chain import HQRef, NoRef, RandomRef, Retrieved, SelfRef

    if name == "none":
        return NoRef()
    if name == "self":
        return SelfRef(args.factor)
    if name == "hq":
        if not args.hq:
            raise ConfigError("--provider hq needs --hq <image>")
        return HQRef(Path(args.hq))
    if name == "random":
        if not args.pool:
            raise ConfigError("--provider random needs --pool <dir>")
        return RandomRef(args.pool, seed=args.seed)
    if name == "retrieved":
        from .retrieval import IndexFormatError, load_index

        if not args.index or not args.pool:
            raise ConfigError("--provider retrieved needs --index <file> and --pool <dir>")
        try:
            index = load_index(args.index)
        except (OSError, IndexFormatError) as exc:
            raise DataError(f"index: {exc}") from None
        return Retrieved(index, args.pool, k=args.k, factor=args.factor)
    raise ConfigError(f"unknown provider {name!r}")


def cmd_restore(args):
    from .dual_chain import fallback_restore, run_paired_restoration
    from .images import load_image, save_image
    from .injection import UnknownSiteError
    from .restorer import CheckpointError, NoiseSchedule, list_attention_sites, load_checkpoint

    try:
        model, _ = load_checkpoint(args.model)
        lq = load_image(args.lq)
    except (OSError, CheckpointError) as exc:
        raise DataError(str(exc)) from None
    config = _injection_config(args)
    schedule = NoiseSchedule(args.steps)
    try:
        config.resolve(list_attention_sites(model), len(schedule))
    except (UnknownSiteError, ValueError) as exc:
        raise ConfigError(str(exc).strip("'\"")) from None
    try:
        if args.fallback:
            providers = [_provider(n.strip(), args, args.lq) for n in args.fallback.split(",")]
            result = fallback_restore(model, lq, providers, config=config, seed=args.seed,
                                      schedule=schedule, factor=args.factor)
        else:
            result = run_paired_restoration(model, lq, _provider(args.provider, args, args.lq), config,
                                            args.seed, schedule, args.factor)
    except (FileNotFoundError, OSError) as exc:
        raise DataError(str(exc)) from None
    save_image(args.out, result.restored)
    sidecar = Path(args.out).with_suffix(".json")
    sidecar.write_text(json.dumps(result.metadata(), indent=2))
    print(f"restored -> {args.out} (references: {', '.join(result.reference_ids) or 'none'})")


def cmd_probe(args):
    from .images import load_image
    from .probe import probe_report
    from .restorer import CheckpointError, NoiseSchedule, load_checkpoint

    try:
        model, _ = load_checkpoint(args.model)
        image = load_image(args.image)
    except (OSError, CheckpointError) as exc:
        raise DataError(str(exc)) from None
    report = probe_report(model, image, NoiseSchedule(args.steps), args.out, seed=args.seed)
    print(f"probe report -> {args.out}; allocation (target, source) = "
          f"({report.allocation[0]:.4f}, {report.allocation[1]:.4f})")
    for stage, info in report.phases.items():
        print(f"{stage}: high-band {['%.3f' % v for v in info['high_band']]} ({info['trend']})")


def cmd_eval(args):
    from .evalkit.config import ExperimentConfig
    from .evalkit.experiment import run_experiment

    config = ExperimentConfig.from_file(args.config)
    table = run_experiment(config, args.out)
    print(table.to_csv(), end="")


def cmd_corpus(args):
    from .evalkit.corpus import write_corpus

    paths = write_corpus(args.out, args.count, args.size, args.seed, args.prefix)
    print(f"wrote {len(paths)} images -> {args.out}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="refir", description="Retrieval-augmented diffusion restoration toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("index", help="embed an image directory into an index file")
    p.add_argument("--db", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--embedder", default="tiny-gist")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("retrieve", help="query an index with an image")
    p.add_argument("--index", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("-k", type=int, default=1)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("train", help="train the toy restorer")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--crop", type=int, default=32)
    p.add_argument("--ema", type=float, default=0.995)
    p.add_argument("--factor", type=int, default=4)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("degrade", help="synthesise LQ images from an HQ directory")
    p.add_argument("--hq", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=int, default=4)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("restore", help="restore one LQ image")
    p.add_argument("--lq", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--provider", default="none", choices=["retrieved", "self", "hq", "random", "none"])
    p.add_argument("--index")
    p.add_argument("--pool", help="directory holding the indexed / random-pool images")
    p.add_argument("--hq", help="HQ reference image for --provider hq")
    p.add_argument("-k", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--factor", type=int, default=4)
    p.add_argument("--out", required=True)
    p.add_argument("--fallback", default="", help="comma-separated providers; keep the best-scoring")
    _add_injection_flags(p)
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("probe", help="frequency/PCA/allocation report")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("eval", help="run an experiment grid from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("corpus", help="write the procedural texture corpus")
    p.add_argument("--out", required=True)
    p.add_argument("-n", "--count", type=int, default=100)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prefix", default="tex")
    p.set_defaults(func=cmd_corpus)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"refir: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"refir: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"refir: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        logging.getLogger("refir").exception("internal error")
        print(f"refir: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
