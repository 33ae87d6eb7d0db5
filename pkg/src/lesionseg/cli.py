"""Command-line interface: ``lesionseg <subcommand> ...``.

Exit codes: 0 on success (all outputs written and re-read), 2 for usage
errors and missing inputs, 1 for any other failure.  Outputs of a failed run
are deleted.  ``LESIONSEG_LOG`` sets the log level (default WARNING).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np

log = logging.getLogger("lesionseg")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class MissingInputError(FileNotFoundError):
    pass


class _Outputs:
    """Tracks files written by a command so a failed run can remove them."""

    def __init__(self, out_dir: Path):
        self.dir = out_dir
        self.paths: list[Path] = []

    def path(self, name: str) -> Path:
        p = self.dir / name
        self.paths.append(p)
        return p

    def cleanup(self, remove_dir: bool) -> None:
        for p in self.paths:
            p.unlink(missing_ok=True)
        if remove_dir and self.dir.is_dir() and not any(self.dir.iterdir()):
            self.dir.rmdir()


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise MissingInputError(f"input not found: {path}")
    return p


@contextmanager
def _thread_limit(n: int):
    """Cap worker threads at ``n``.

    The pipeline itself is single-threaded, and BLAS is held at one thread
    whatever ``n`` is: threaded BLAS may split reductions differently, which
    would break bitwise reproducibility across thread counts.
    """
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


# ------------------------------------------------------------- subcommands


def cmd_make_phantom(args, out: _Outputs) -> None:
    from .phantom import PhantomSpec, default_sharing, generate
    from .volume import save_volume

    spec = PhantomSpec(
        dims=tuple(args.dims),
        n_lesions=args.n_lesions,
        n_outliers=args.n_outliers,
        outlier_shift=tuple(args.outlier_shift),
        bias_peak=args.bias_peak,
        noise_scale=args.noise_scale,
        seed=args.seed,
    )
    ph = generate(spec)
    save_volume(out.path("image.mvol"), ph.image)
    save_volume(out.path("labels.mvol"), ph.labels)
    save_volume(out.path("lesions.mvol"), ph.lesions)
    out.path("truth.json").write_text(ph.truth_json())
    out.path("sharing.json").write_text(json.dumps(default_sharing().to_dict(), indent=1))


def cmd_build_atlas(args, out: _Outputs) -> None:
    from .atlas import build_atlas, save_atlas
    from .volume import load_volume

    labels = [load_volume(_existing(p), "labels") for p in args.labels]
    lesions = [load_volume(_existing(p), "mask") for p in args.lesions or []]
    kw = {} if args.stiffness is None else {"stiffness": args.stiffness}
    mesh = build_atlas(labels, lesions or None, tuple(args.mesh_cells), args.n_labels, **kw)
    log.info("atlas: %d vertices, %d tetrahedra, K=%d", mesh.n_vertices, len(mesh.tets), mesh.n_labels)
    save_atlas(out.path("atlas.amsh"), mesh)


def cmd_train_shape_prior(args, out: _Outputs) -> None:
    from .shape_prior import VaeTrainConfig, save_shape_prior, train, write_training_log
    from .volume import load_volume

    masks = [load_volume(_existing(p), "mask") for p in args.masks]
    cfg = VaeTrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        mc_samples=args.mc_samples,
        rotation_deg=args.rotation,
        seed=args.seed,
        latent_dim=args.latent_dim,
        channels=tuple(args.channels),
    )
    model, rows = train(masks, cfg)
    log.info("mean ELBO: epoch 1 %.4f, final epoch %.4f", rows[0][1], rows[-1][1])
    save_shape_prior(out.path("shape_prior.vae1"), model)
    write_training_log(out.path("training_log.csv"), rows)


def _read_inputs(specs):
    from .volume import Contrast, MultiContrastImage, load_volume, log_transform

    grid, chans, tags, log_flags = None, [], [], []
    for item in specs:
        path, tag = item.rsplit(":", 1) if ":" in item else (item, "")
        img = load_volume(_existing(path), "image")
        if grid is None:
            grid = img.grid
        elif not grid.same_as(img.grid):
            raise ValueError(f"{path}: grid differs from the first input")
        file_tags = list(img.contrasts)
        if tag:
            if img.n_contrasts != 1:
                raise ValueError(f"{path}: a :TAG override needs a single-channel volume")
            file_tags = [Contrast.parse(tag)]
        chans.append(img.data)
        tags.extend(file_tags)
        log_flags.append(img.log_domain)
    if len(set(log_flags)) > 1:
        raise ValueError("inputs mix log-domain and raw intensities")
    image = MultiContrastImage(grid, np.concatenate(chans, axis=1), tuple(tags), log_flags[0])
    return image if image.log_domain else log_transform(image)


def _sharing_for(args, n_labels):
    from .likelihood import ClassSharingMap
    from .phantom import default_sharing

    if args.sharing:
        return ClassSharingMap.from_dict(json.loads(_existing(args.sharing).read_text()))
    sharing = default_sharing()
    if sharing.n_labels != n_labels:
        raise ValueError(f"atlas has K={n_labels} labels; pass --sharing to describe its classes")
    return sharing


def cmd_segment(args, out: _Outputs) -> None:
    from .atlas import load_atlas
    from .estimators import LesionSegmenter
    from .likelihood import save_params
    from .shape_prior import load_shape_prior
    from .volume import load_volume, save_volume

    image = _read_inputs(args.input)
    atlas = load_atlas(_existing(args.atlas))
    shape = load_shape_prior(_existing(args.shape_prior)) if args.shape_prior else None
    affine = np.loadtxt(_existing(args.prior_affine)).reshape(4, 4) if args.prior_affine else None
    if shape is None:
        log.info("no shape prior given: decoder output clamped to 1")
    est = LesionSegmenter(
        atlas=atlas,
        sharing=_sharing_for(args, atlas.n_labels),
        shape_prior=shape,
        nu=args.nu,
        kappa=args.kappa,
        gamma=args.threshold,
        samples=args.samples,
        burn_in=args.burn_in,
        seed=args.seed,
        subject_to_prior_affine=affine,
        any_channel=args.any_channel,
        max_outer_iters=args.max_outer_iters,
        deformation_steps=args.deformation_steps,
    )
    est.fit(image)
    written = {
        "posterior.mvol": est.posterior_result_.posterior,
        "lesions.mvol": est.lesion_mask_,
        "labels.mvol": est.labels_,
    }
    for name, vol in written.items():
        save_volume(out.path(name), vol)
    est.posterior_result_.write_chain(out.path("chain.csv"))
    if args.trace:
        est.fit_result_.write_trace(out.path("trace.csv"))
    if args.dump_params:
        save_params(out.path("params.aprm"), est.fit_result_.params)
    for name in written:  # validate what was written
        load_volume(out.dir / name)
    log.info("lesion voxels: %d", int(est.lesion_mask_.mask.sum()))


def cmd_evaluate(args, out: _Outputs) -> dict:
    from .metrics import overlap_report, volumes
    from .volume import load_volume

    pred = load_volume(_existing(args.pred), "mask")
    truth = load_volume(_existing(args.truth), "mask")
    labels = load_volume(_existing(args.labels), "labels") if args.labels else None
    report = overlap_report(pred, truth, labels).to_dict()
    if args.truth_labels:
        tl = load_volume(_existing(args.truth_labels), "labels")
        report["truth_volumes_mm3"] = {str(k): v for k, v in volumes(tl).items()}
    text = json.dumps(report, indent=1, sort_keys=True)
    out.path("report.json").write_text(text + "\n")
    print(text)
    return report


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lesionseg", description="Whole-brain and lesion segmentation.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=int, default=1, help="maximum worker threads")

    sp = sub.add_parser("make-phantom", help="write a synthetic phantom with ground truth")
    common(sp)
    sp.add_argument("--dims", type=int, nargs=3, default=(32, 32, 32))
    sp.add_argument("--n-lesions", type=int, default=5)
    sp.add_argument("--n-outliers", type=int, default=0)
    sp.add_argument("--outlier-shift", type=float, nargs=3, default=(0.0, 3.0, 3.0))
    sp.add_argument("--bias-peak", type=float, default=0.2)
    sp.add_argument("--noise-scale", type=float, default=1.0)
    sp.set_defaults(func=cmd_make_phantom)

    sp = sub.add_parser("build-atlas", help="estimate a mesh atlas from training segmentations")
    common(sp)
    sp.add_argument("--labels", action="append", required=True, help="label map (repeatable)")
    sp.add_argument("--lesions", action="append", help="lesion mask (repeatable)")
    sp.add_argument("--mesh-cells", type=int, nargs=3, default=(8, 8, 8))
    sp.add_argument("--n-labels", type=int, default=None, help="K (default: largest label present)")
    sp.add_argument("--stiffness", type=float, default=None, help="deformation prior strength")
    sp.set_defaults(func=cmd_build_atlas)

    sp = sub.add_parser("train-shape-prior", help="train the lesion-shape autoencoder")
    common(sp)
    sp.add_argument("--masks", action="append", required=True, help="lesion mask (repeatable)")
    sp.add_argument("--epochs", type=int, default=100)
    sp.add_argument("--batch-size", type=int, default=10)
    sp.add_argument("--lr", type=float, default=1e-4)
    sp.add_argument("--mc-samples", type=int, default=1)
    sp.add_argument("--rotation", type=float, default=10.0, help="augmentation rotation in degrees")
    sp.add_argument("--latent-dim", type=int, default=32)
    sp.add_argument("--channels", type=int, nargs="+", default=(8, 16, 32))
    sp.set_defaults(func=cmd_train_shape_prior)

    sp = sub.add_parser("segment", help="segment a multi-contrast image")
    common(sp)
    sp.add_argument("--input", action="append", required=True, metavar="PATH[:TAG]",
                    help="input volume, optionally with a contrast tag (repeatable)")
    sp.add_argument("--atlas", required=True)
    sp.add_argument("--shape-prior", default=None, help="omit to clamp the shape prior to 1")
    sp.add_argument("--sharing", default=None, help="class-sharing JSON (default: phantom layout)")
    sp.add_argument("--prior-affine", default=None, help="4x4 text matrix: subject world -> shape-model world")
    sp.add_argument("--nu", type=float, default=500.0)
    sp.add_argument("--kappa", type=float, default=50.0)
    sp.add_argument("--threshold", type=float, default=0.5, help="lesion posterior threshold gamma")
    sp.add_argument("--samples", type=int, default=50)
    sp.add_argument("--burn-in", type=int, default=50)
    sp.add_argument("--any-channel", action="store_true",
                    help="candidate voxels need exceed the GM mean in any (not all) FLAIR/T2 channel")
    sp.add_argument("--max-outer-iters", type=int, default=30)
    sp.add_argument("--deformation-steps", type=int, default=20)
    sp.add_argument("--trace", action="store_true", help="write the objective trace CSV")
    sp.add_argument("--dump-params", action="store_true", help="write the fitted parameters")
    sp.set_defaults(func=cmd_segment)

    sp = sub.add_parser("evaluate", help="compare a lesion mask against ground truth")
    common(sp)
    sp.add_argument("--pred", required=True)
    sp.add_argument("--truth", required=True)
    sp.add_argument("--labels", default=None, help="predicted label map, for volumes")
    sp.add_argument("--truth-labels", default=None)
    sp.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("LESIONSEG_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    out_dir = Path(args.out)
    out = _Outputs(out_dir)
    created = not out_dir.exists()
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        with _thread_limit(args.threads):
            args.func(args, out)
    except MissingInputError as exc:
        out.cleanup(created)
        print(f"lesionseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - single-line diagnostic for any failure
        out.cleanup(created)
        print(f"lesionseg: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
