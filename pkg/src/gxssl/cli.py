"""``gxssl`` command line: synth, patch, pretrain, finetune, evaluate, sweep, gradcheck."""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .core import GxsslError

logger = logging.getLogger("gxssl")

RUN_MANIFEST = "run.json"


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest:
    """Provenance record written when a subcommand starts and finalized when it ends.

    Checkpoint directories are replaced atomically on save, so a run.json
    written at start inside one is rewritten by :meth:`finish`.
    """

    def __init__(self, path: Path | None, argv: list[str], config: dict | None, inputs: list[str]):
        self.path = path
        self.data = {
            "command_line": ["gxssl", *argv],
            "resolved_config": config,
            "code_version": __version__,
            "started": _now(),
            "finished": None,
            "status": "running",
            "input_checksums": {str(p): sha256_file(p) for p in inputs if p and Path(p).is_file()},
            "outputs": [],
        }
        self._write()

    def _write(self):
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=1), encoding="utf-8")

    def finish(self, status: str, outputs: list[str] = ()):
        self.data.update(finished=_now(), status=status, outputs=[str(o) for o in outputs])
        self._write()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None:
            self.finish(f"error: {exc!r}")
        return False


def _data_path(p: str | None) -> str | None:
    """Resolve a relative input path against GXSSL_DATA_DIR when it does not exist as given."""
    if p is None or os.path.isabs(p) or os.path.exists(p):
        return p
    root = os.environ.get("GXSSL_DATA_DIR")
    if root and os.path.exists(os.path.join(root, p)):
        return os.path.join(root, p)
    return p


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .synthgen import SynthConfig, generate_cohort, write_cohort

    cfg = SynthConfig(image_size=args.image_size, positive_fraction=args.positive_frac, seed=args.seed,
                      patch_size=min(64, args.image_size // 4), speckle_gain_pos=args.speckle_gain,
                      fold_wobble_pos=args.fold_wobble, noise_sigma=args.noise_sigma)
    out = Path(args.out)
    with RunManifest(out / RUN_MANIFEST, args.argv, dataclasses.asdict(cfg), []) as run:
        patients, manifest = generate_cohort(cfg, args.patients, split=args.split)
        path = write_cohort(patients, manifest, out)
        run.finish("ok", [path])
    print(path)
    return 0


def cmd_patch(args) -> int:
    from .core import DatasetManifest
    from .dataset import write_patch_dataset
    from .patcher import TilingSpec

    manifest_path = _data_path(args.manifest)
    spec = TilingSpec(args.patch_size, args.stride)
    out = Path(args.out)
    with RunManifest(out / RUN_MANIFEST, args.argv, dataclasses.asdict(spec), [manifest_path]) as run:
        path = write_patch_dataset(DatasetManifest.load(manifest_path), spec, out, packed=args.packed)
        run.finish("ok", [path])
    print(path)
    return 0


def cmd_pretrain(args) -> int:
    from .config import parse_config
    from .core import DatasetManifest
    from .pipeline import run_pretrain

    config = parse_config(args.config)
    manifest_path = _data_path(args.manifest)
    out = Path(args.out)
    with RunManifest(out / RUN_MANIFEST, args.argv, config.to_dict(), [manifest_path, args.config]) as run:
        run_pretrain(DatasetManifest.load(manifest_path), config, out, deterministic=args.deterministic)
        run.finish("ok", [out])
    print(out)
    return 0


def cmd_finetune(args) -> int:
    from .config import parse_config
    from .core import DatasetManifest
    from .pipeline import run_finetune

    config = parse_config(args.config)
    pool_path = _data_path(args.pool)
    ckpt = None if args.ckpt == "scratch" else _data_path(args.ckpt)
    out = Path(args.out)
    with RunManifest(out / RUN_MANIFEST, args.argv, config.to_dict(), [pool_path]) as run:
        result, _ = run_finetune(ckpt, DatasetManifest.load(pool_path), args.labeled_patients, args.seed, config, out,
                                 deterministic=args.deterministic)
        run.finish("ok", [out])
    print(f"best epoch {result.best_epoch}, validation accuracy {max(result.val_accuracy_history, default=float('nan')):.4f}")
    return 0


def cmd_evaluate(args) -> int:
    from .core import DatasetManifest, load_checkpoint
    from .evaluate import evaluate_cohort
    from .patcher import TilingSpec

    ckpt = _data_path(args.ckpt)
    test_path = _data_path(args.test)
    meta = load_checkpoint(ckpt)[1]
    tiling = dict(meta.get("tiling") or {})
    if args.patch_size is not None:
        tiling["patch_size"] = args.patch_size
    if args.stride is not None:
        tiling["stride"] = args.stride
    spec = TilingSpec(**tiling)
    report_path = Path(args.report)
    with RunManifest(report_path.with_name(report_path.stem + "." + RUN_MANIFEST), args.argv,
                     {"sigma": args.sigma, "tiling": dataclasses.asdict(spec)}, [test_path]) as run:
        report = evaluate_cohort(ckpt, DatasetManifest.load(test_path), spec, args.sigma, report_path=report_path)
        run.finish("ok", [report_path])
    print(f"Sen {report.sen:.3f}  Spe {report.spe:.3f}  HM {report.hm:.3f}  (TP {report.tp} TN {report.tn} FP {report.fp} FN {report.fn})")
    return 0


def cmd_sweep(args) -> int:
    from .config import parse_config, resolve_config
    from .pipeline import ExperimentPlan, run_sweep

    plan = ExperimentPlan.load(args.plan)
    config = parse_config(args.config) if args.config else resolve_config(plan.config)
    out = Path(args.out)
    with RunManifest(out / RUN_MANIFEST, args.argv, config.to_dict(),
                     [args.plan, _data_path(plan.pool_manifest), _data_path(plan.test_manifest)]) as run:
        plan = dataclasses.replace(plan, pool_manifest=_data_path(plan.pool_manifest),
                                   test_manifest=_data_path(plan.test_manifest),
                                   ssl_checkpoint=_data_path(plan.ssl_checkpoint))
        result = run_sweep(plan, out, config, deterministic=args.deterministic)
        status = "ok" if not result.failures else f"{len(result.failures)} failed cell(s)"
        run.finish(status, [out / "summary.csv", out / "hm_curve.svg", out / "hm_curve.png"])
    for init, curve in result.medians.items():
        print(init, " ".join(f"{k}:{v:.3f}" for k, v in sorted(curve.items())))
    return 1 if result.failures else 0


def cmd_gradcheck(args) -> int:
    from .ssl import gradient_check

    with RunManifest(Path(args.out) / RUN_MANIFEST if args.out else None, args.argv,
                     {"tolerance": args.tolerance, "coords": args.coords, "h": args.h, "seed": args.seed}, []) as run:
        report = gradient_check(tolerance=args.tolerance, n_coords=args.coords, h=args.h, seed=args.seed,
                                convergence_h=args.convergence_h)
        run.finish("ok" if report.passed else "failed")
    print(report.summary())
    return 0 if report.passed else 1


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gxssl", description=__doc__)
    parser.add_argument("--version", action="version", version=f"gxssl {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{synth,patch,pretrain,finetune,evaluate,sweep,gradcheck}")

    from .synthgen import SynthConfig

    SYNTH_DEFAULTS = SynthConfig()
    p = sub.add_parser("synth", help="generate a synthetic patient cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--patients", type=int, required=True)
    p.add_argument("--positive-frac", type=float, default=0.5)
    p.add_argument("--image-size", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="ssl_train", choices=["ssl_train", "finetune_train", "finetune_val", "test"])
    p.add_argument("--speckle-gain", type=float, default=SYNTH_DEFAULTS.speckle_gain_pos,
                   help="positive-class speckle strength")
    p.add_argument("--fold-wobble", type=float, default=SYNTH_DEFAULTS.fold_wobble_pos,
                   help="positive-class fold distortion")
    p.add_argument("--noise-sigma", type=float, default=SYNTH_DEFAULTS.noise_sigma)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("patch", help="tile and label patches for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch-size", type=int, default=64)
    p.add_argument("--stride", type=int, default=32)
    p.add_argument("--packed", action="store_true", help="write crops.bin + crops.index.json instead of PNGs")
    p.set_defaults(func=cmd_patch)

    p = sub.add_parser("pretrain", help="self-supervised teacher-student pretraining")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default=None, help="JSON config; omitted keys take the published defaults")
    p.add_argument("--out", required=True)
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="few-label fine-tuning of the pretrained encoder")
    p.add_argument("--ckpt", required=True, help="pretraining checkpoint directory, or 'scratch'")
    p.add_argument("--labeled-patients", type=int, required=True)
    p.add_argument("--pool", required=True, help="patch-indexed manifest of the 200-patient pool")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="patient-level evaluation of a fine-tuned model")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--report", required=True)
    p.add_argument("--patch-size", type=int, default=None)
    p.add_argument("--stride", type=int, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="few-shot grid x init mode x seeds")
    p.add_argument("--plan", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default="sweep")
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of the loss gradients")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--coords", type=int, default=200)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--convergence-h", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (GxsslError, FileNotFoundError, ValueError) as e:
        print(f"gxssl {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
