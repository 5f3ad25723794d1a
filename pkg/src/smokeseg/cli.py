"""Command-line interface.

Subcommands: synth (planted dataset), train, eval, vote, stats, gradcheck.
Unknown flags exit with the usage text and code 2; runtime failures print a
message and exit with code 1.
"""

import argparse
import os
import sys
import time

import numpy as np

from . import dataio, gradcheck, metrics
from .config import RunConfig, parse_config
from .train import model_from_state, train

# XIMEA 5x5 mosaic filter wavelengths, printed next to band weights when d=25
WAVELENGTHS_25 = (
    600, 616, 632, 647, 664, 680, 696, 712, 728, 744, 760, 776, 792,
    808, 824, 840, 856, 872, 888, 894, 910, 926, 942, 958, 974,
)


def _range_pair(text, parse=float):
    """'12-20' -> (12.0, 20.0); a single number means a degenerate range."""
    lo, sep, hi = text.partition("-")
    try:
        if not sep:
            v = parse(lo)
            return (v, v)
        return (parse(lo), parse(hi))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected `lo-hi` or a single number, got {text!r}") from None


def _int_range(text):
    return _range_pair(text, parse=int)


def _band_list(text):
    try:
        return tuple(int(tok) for tok in text.split(",") if tok.strip() != "")
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated band indices, got {text!r}") from None


def load_pairs(data_dir):
    """All cube/mask pairs `X.hsc` + `X.pgm` in a directory, sorted by name."""
    names = sorted(n[:-4] for n in os.listdir(data_dir) if n.endswith(".hsc"))
    if not names:
        raise FileNotFoundError(f"no .hsc cubes in {data_dir}")
    pairs = []
    for name in names:
        cube = dataio.read_cube(os.path.join(data_dir, name + ".hsc"))
        mask_path = os.path.join(data_dir, name + ".pgm")
        if not os.path.exists(mask_path):
            raise FileNotFoundError(f"cube {name}.hsc has no mask {name}.pgm")
        mask = dataio.read_mask(mask_path)
        if mask.shape != cube.shape[1:]:
            raise ValueError(f"{name}: mask {mask.shape} does not match cube {cube.shape[1:]}")
        pairs.append((name, cube, mask))
    return pairs


def cmd_synth(args):
    spec = dataio.SynthSpec(
        h=args.height,
        w=args.width,
        d=args.bands,
        informative=args.informative,
        blob_count=args.blobs,
        blob_radius=args.radius,
        blob_opacity=args.opacity,
        background=args.background,
        noise=args.noise,
        distractor_count=args.distractors,
        seed=args.seed,
    )
    samples = dataio.synth_generate(spec, args.count)
    os.makedirs(args.out, exist_ok=True)
    for i, (cube, mask) in enumerate(samples):
        stem = os.path.join(args.out, f"sample_{i:04d}")
        dataio.write_cube(stem + ".hsc", cube)
        dataio.write_mask(stem + ".pgm", mask)
        if args.preview:
            dataio.write_band_mean_pgm(stem + "_gray.pgm", cube)
    print(f"wrote {len(samples)} cube/mask pairs to {args.out}")
    return 0


def cmd_train(args):
    cfg = parse_config(args.config) if args.config else RunConfig()
    if args.data is not None:
        cfg.data_dir = args.data
    if args.seed is not None:
        cfg.seed = args.seed
    if args.iterations is not None:
        cfg.iterations = args.iterations
    if args.mode is not None:
        cfg.mode = args.mode
    cfg.validate()
    if not cfg.data_dir:
        raise ValueError("no data directory (set data_dir in the config or pass --data)")
    pairs = load_pairs(cfg.data_dir)
    data = [(cube, mask) for _, cube, mask in pairs]

    def on_step(step, ce, lp, tot):
        if args.progress and (step % args.progress == 0 or step + 1 == cfg.iterations):
            print(f"step {step}: ce={ce:.6f} lp={lp:.6f} total={tot:.6f}", flush=True)

    train(cfg, data, log_path=args.log, ckpt_path=args.out, on_step=on_step)
    print(f"trained {cfg.iterations} steps; checkpoint: {args.out}")
    return 0


def cmd_eval(args):
    state = dataio.load_checkpoint(args.ckpt)
    model = model_from_state(state)
    pairs = load_pairs(args.data)
    results = []
    dumps = []
    for name, cube, mask in pairs:
        x = np.transpose(cube.astype(np.float64), (1, 2, 0))[None]
        if args.dump_band_weights:
            out = model.forward(x)
            if out["beta"] is None:
                raise ValueError(f"mode {model.mode!r} has no band weights to dump")
            mean_beta = out["beta"].data.mean(axis=0)
            prob = out["prob"].data.reshape(out["H"], out["W"])
            hard = (prob > 0.5).astype(np.uint8)
            up = np.repeat(np.repeat(hard, model.stride, 0), model.stride, 1)
            pred = up[: mask.shape[0], : mask.shape[1]]
            dumps.append((name, mean_beta))
        else:
            pred = model.predict_mask(x)[0]
        results.append((name, pred, mask))
    report = metrics.evaluate_pairs(results, args.t1, args.t2)
    print(metrics.format_report(report, per_image=args.per_image))
    if args.dump_band_weights:
        with open(args.dump_band_weights, "w", encoding="utf-8") as fh:
            fh.write("# per-image mean band weight: band, wavelength_nm, weight\n")
            for name, mean_beta in dumps:
                fh.write(f"# image {name}\n")
                for b, wgt in enumerate(mean_beta):
                    wl = WAVELENGTHS_25[b] if len(mean_beta) == 25 else "-"
                    fh.write(f"{b}, {wl}, {wgt:.6f}\n")
        print(f"band weights written to {args.dump_band_weights}")
    return 0


def cmd_vote(args):
    masks = [dataio.read_mask(p) for p in args.masks]
    dataio.write_mask(args.out, dataio.majority_vote(masks))
    print(f"consensus mask written to {args.out}")
    return 0


def cmd_stats(args):
    if len(args.masks) % 3 != 0:
        raise ValueError(f"stats needs annotation triples; got {len(args.masks)} masks")
    triples = [
        [dataio.read_mask(p) for p in args.masks[i : i + 3]]
        for i in range(0, len(args.masks), 3)
    ]
    stats = dataio.agreement_stats(triples)
    for line in stats.lines():
        print(line)
    return 0


def cmd_gradcheck(args):
    t0 = time.perf_counter()
    results = gradcheck.run_suite(seeds=args.seeds)
    elapsed = time.perf_counter() - t0
    ok = True
    for name, worst, passed in results:
        print(f"{'PASS' if passed else 'FAIL'}  {name:<24} max rel err {worst:.3e}")
        ok = ok and passed
    print(f"{len(results)} cases, {args.seeds} seeds each, {elapsed:.1f}s")
    return 0 if ok else 1


def build_parser():
    p = argparse.ArgumentParser(prog="smokeseg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    sp = sub.add_parser("synth", help="generate a planted-signal dataset")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--count", type=int, default=16)
    sp.add_argument("--height", type=int, default=64)
    sp.add_argument("--width", type=int, default=64)
    sp.add_argument("--bands", type=int, default=8)
    sp.add_argument("--informative", type=_band_list, default=(2, 5), help="e.g. 2,5")
    sp.add_argument("--blobs", type=_int_range, default=(1, 2), help="blob count range lo-hi")
    sp.add_argument("--radius", type=_range_pair, default=(12.0, 20.0))
    sp.add_argument("--opacity", type=_range_pair, default=(0.25, 0.40))
    sp.add_argument("--background", type=_range_pair, default=(0.15, 0.55))
    sp.add_argument("--noise", type=float, default=0.02)
    sp.add_argument("--distractors", type=_int_range, default=(0, 0))
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--preview", action="store_true", help="also write band-mean grayscale previews")
    sp.set_defaults(fn=cmd_synth)

    tp = sub.add_parser("train", help="train a model")
    tp.add_argument("--config", help="key = value config file")
    tp.add_argument("--data", help="directory of .hsc/.pgm pairs (overrides config)")
    tp.add_argument("--out", required=True, help="checkpoint path")
    tp.add_argument("--log", help="loss log path")
    tp.add_argument("--seed", type=int)
    tp.add_argument("--iterations", type=int)
    tp.add_argument("--mode", choices=("full", "feature_router", "band_split", "common_only"))
    tp.add_argument("--progress", type=int, default=0, help="print every N steps")
    tp.set_defaults(fn=cmd_train)

    ep = sub.add_parser("eval", help="evaluate a checkpoint")
    ep.add_argument("--ckpt", required=True)
    ep.add_argument("--data", required=True)
    ep.add_argument("--t1", type=float, default=0.01, help="small/medium area threshold")
    ep.add_argument("--t2", type=float, default=0.10, help="medium/large area threshold")
    ep.add_argument("--per-image", action="store_true")
    ep.add_argument("--dump-band-weights", metavar="FILE")
    ep.set_defaults(fn=cmd_eval)

    vp = sub.add_parser("vote", help="majority-vote three annotation masks")
    vp.add_argument("masks", nargs=3, metavar="MASK")
    vp.add_argument("-o", "--out", required=True)
    vp.set_defaults(fn=cmd_vote)

    ap = sub.add_parser("stats", help="annotation agreement report")
    ap.add_argument("masks", nargs="+", metavar="MASK", help="annotation triples, 3 files per frame")
    ap.set_defaults(fn=cmd_stats)

    gp = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    gp.add_argument("--seeds", type=int, default=20)
    gp.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
