"""Command-line entry point.

Subcommands: dataset (build | synth), train, harmonize, freqmap, btrank.
Exit codes: 0 success, 1 usage error or unusable input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

CHECKPOINT_DIR_ENV = "DUALHARM_CHECKPOINT_DIR"


class CliUsageError(Exception):
    pass


class CliInputError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags by default; the contract here is 1
    def error(self, message):
        raise CliUsageError(message)


def _positive_int(value):
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {n}")
    return n


def build_parser() -> Parser:
    parser = Parser(prog="dualharm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p_dataset = sub.add_parser("dataset", help="build or synthesize composite datasets")
    dsub = p_dataset.add_subparsers(dest="action", required=True, metavar="ACTION")
    p_build = dsub.add_parser("build", help="pair photos with paintings and write a manifest")
    p_build.add_argument("--photos", required=True, help="directory of photos (+ *_mask.png)")
    p_build.add_argument("--paintings", required=True, help="directory of painting images")
    p_build.add_argument("--out", required=True, help="output directory for the manifest")
    p_build.add_argument("--seed", type=int, default=0, help="pairing/placement seed")
    p_build.add_argument("--count", type=_positive_int, default=None, help="number of records")
    p_build.add_argument("--split", choices=("train", "test"), default="train")
    p_build.set_defaults(func=cmd_dataset_build)
    p_synth = dsub.add_parser("synth", help="write a procedural photo/painting corpus")
    p_synth.add_argument("--out", required=True, help="output directory")
    p_synth.add_argument("--photos", type=_positive_int, default=16, help="number of photos")
    p_synth.add_argument("--paintings", type=_positive_int, default=8, help="number of paintings")
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--size", type=_positive_int, default=256, help="image side length")
    p_synth.set_defaults(func=cmd_dataset_synth)

    p_train = sub.add_parser("train", help="train the harmonization network")
    p_train.add_argument("--config", required=True, help="JSON config file")
    p_train.add_argument(
        "--preset",
        choices=("V1", "V2", "V3", "V4", "V5"),
        default=None,
        help="ablation preset overriding the config flags",
    )
    p_train.add_argument("--manifest", default=None, help="dataset manifest (overrides config)")
    p_train.add_argument("--resume", default=None, help="checkpoint to resume from")
    p_train.add_argument("--log-every", type=int, default=10, help="progress print cadence")
    p_train.set_defaults(func=cmd_train)

    p_harm = sub.add_parser("harmonize", help="harmonize a composite against its background")
    p_harm.add_argument("--composite", required=True, help="composite image PNG")
    p_harm.add_argument("--mask", required=True, help="foreground mask PNG (0/255)")
    p_harm.add_argument("--background", required=True, help="background painting PNG")
    p_harm.add_argument(
        "--checkpoint",
        default=None,
        help=f"trained checkpoint (default: $" + CHECKPOINT_DIR_ENV + "/final.ckpt)",
    )
    p_harm.add_argument("--out", required=True, help="output PNG path")
    p_harm.add_argument("--save-mask", default=None, help="also write the soft blend mask PNG")
    p_harm.add_argument(
        "--size-check",
        action="store_true",
        help="only validate input sizes and exit",
    )
    p_harm.set_defaults(func=cmd_harmonize)

    p_freq = sub.add_parser("freqmap", help="write the centered log-magnitude spectrum")
    p_freq.add_argument("--image", required=True, help="input image PNG")
    p_freq.add_argument("--out", required=True, help="output grayscale PNG")
    p_freq.set_defaults(func=cmd_freqmap)

    p_bt = sub.add_parser("btrank", help="Bradley-Terry ranking from pairwise tallies")
    bsub = p_bt.add_subparsers(dest="action", required=True, metavar="ACTION")
    p_fit = bsub.add_parser("fit", help="fit scores from a tally file and print the ranking")
    p_fit.add_argument("--tally", required=True, help="matrix or 'winner loser count' file")
    p_fit.add_argument("--out", default=None, help="also write ranked scores as JSON lines")
    p_fit.add_argument("--max-iter", type=_positive_int, default=10_000)
    p_fit.add_argument("--tol", type=float, default=1e-9)
    p_fit.set_defaults(func=cmd_btrank_fit)

    return parser


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliInputError(f"{what} not found: {p}")
    return p


def _load_image(path, what: str):
    from dualharm import data

    _require_file(path, what)
    try:
        return data.load_image(path)
    except OSError as exc:
        raise CliInputError(f"cannot read {what} {path}: {exc}") from None


def cmd_dataset_build(args) -> int:
    from dualharm import data

    for d, what in ((args.photos, "photos directory"), (args.paintings, "paintings directory")):
        if not Path(d).is_dir():
            raise CliInputError(f"{what} not found: {d}")
    try:
        manifest_path = data.build_dataset(
            args.photos, args.paintings, args.out, seed=args.seed, count=args.count, split=args.split
        )
    except ValueError as exc:
        raise CliInputError(str(exc)) from None
    manifest = data.load_manifest(manifest_path)
    print(f"wrote {len(manifest.records)} records to {manifest_path}")
    return 0


def cmd_dataset_synth(args) -> int:
    from dualharm import data

    photos, paintings = data.generate_synthetic_sources(
        args.out, num_photos=args.photos, num_paintings=args.paintings, seed=args.seed, size=args.size
    )
    print(f"wrote {len(photos)} photos (+masks) and {len(paintings)} paintings under {args.out}")
    return 0


def cmd_train(args) -> int:
    from dualharm import data, trainer

    _require_file(args.config, "config file")
    try:
        config = trainer.TrainConfig.from_file(args.config)
        if args.preset:
            config = config.with_preset(args.preset)
        if args.manifest:
            config.manifest = args.manifest
        config.validate()
        if not config.manifest:
            raise CliInputError("no manifest: set 'manifest' in the config or pass --manifest")
        manifest = data.load_manifest(_require_file(config.manifest, "manifest"))
    except ValueError as exc:
        raise CliInputError(str(exc)) from None
    result = trainer.train(config, manifest, resume=args.resume, log_every=args.log_every)
    last = result.reports[-1] if result.reports else None
    if last is not None:
        d_txt = f"{last.d_adv:.4f}" if last.d_adv is not None else "n/a"
        print(f"finished {config.iterations} iterations: total_g={last.total_g:.4f} d_adv={d_txt}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics:    {result.metrics_path}")
    return 0


def _pad_to_multiple_of_8(arr):
    h, w = arr.shape[:2]
    ph, pw = (-h) % 8, (-w) % 8
    if ph == 0 and pw == 0:
        return arr, (0, 0)
    return np.pad(arr, ((0, ph), (0, pw), (0, 0)), mode="reflect"), (ph, pw)


def cmd_harmonize(args) -> int:
    import torch

    from dualharm import data, trainer

    comp = _load_image(args.composite, "composite")
    bg = _load_image(args.background, "background")
    _require_file(args.mask, "mask")
    try:
        mask = data.load_mask_image(args.mask)
    except OSError as exc:
        raise CliInputError(f"cannot read mask {args.mask}: {exc}") from None
    if mask.shape[:2] != comp.shape[:2]:
        raise CliInputError(
            f"mask size {mask.shape[1]}x{mask.shape[0]} does not match composite "
            f"{comp.shape[1]}x{comp.shape[0]}"
        )
    if bg.shape[:2] != comp.shape[:2]:
        raise CliInputError(
            f"background size {bg.shape[1]}x{bg.shape[0]} does not match composite "
            f"{comp.shape[1]}x{comp.shape[0]}"
        )
    h, w = comp.shape[:2]
    if args.size_check:
        note = "" if h % 8 == 0 and w % 8 == 0 else " (will be reflection-padded to a multiple of 8)"
        print(f"sizes ok: {w}x{h}{note}")
        return 0

    ckpt = args.checkpoint
    if ckpt is None:
        base = os.environ.get(CHECKPOINT_DIR_ENV)
        if not base:
            raise CliInputError(
                f"--checkpoint not given and ${CHECKPOINT_DIR_ENV} is not set"
            )
        ckpt = Path(base) / "final.ckpt"
    _require_file(ckpt, "checkpoint")
    try:
        state = trainer.load_checkpoint(ckpt)
    except ValueError as exc:
        raise CliInputError(f"cannot load checkpoint {ckpt}: {exc}") from None
    net = state.generator.eval()

    comp_p, _ = _pad_to_multiple_of_8(comp)
    bg_p, _ = _pad_to_multiple_of_8(bg)
    mask_p, pads = _pad_to_multiple_of_8(mask)
    if pads != (0, 0):
        logging.getLogger(__name__).info(
            "padded inputs by %s px to reach a multiple of 8", pads
        )
    comp_t, bg_t, mask_t = (
        torch.from_numpy(a.transpose(2, 0, 1)).unsqueeze(0).float()
        for a in (comp_p, bg_p, mask_p)
    )
    with torch.no_grad():
        out_t, soft_t = net(comp_t, bg_t, mask_t)
    out = out_t[0].permute(1, 2, 0).numpy()[:h, :w]
    data.save_image(np.clip(out, 0.0, 1.0), args.out)
    if args.save_mask:
        soft = soft_t[0, 0].numpy()[:h, :w]
        from PIL import Image

        Image.fromarray(np.round(np.clip(soft, 0, 1) * 255).astype(np.uint8), mode="L").save(
            args.save_mask, format="PNG"
        )
    print(f"wrote {args.out}")
    return 0


def cmd_freqmap(args) -> int:
    from dualharm import spectral

    image = _load_image(args.image, "image")
    fmap = spectral.log_magnitude_map(image)
    spectral.write_frequency_map_png(fmap, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_btrank_fit(args) -> int:
    from dualharm import btrank

    _require_file(args.tally, "tally file")
    try:
        tally = btrank.load_tally(args.tally)
        scores = btrank.fit(tally, max_iter=args.max_iter, tol=args.tol)
    except ValueError as exc:  # includes DegenerateTallyError
        raise CliInputError(str(exc)) from None
    print(btrank.format_scores(scores))
    if args.out:
        btrank.save_scores(scores, args.out)
        print(f"wrote {args.out}")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliUsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except CliUsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except CliInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - exit-code contract
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
