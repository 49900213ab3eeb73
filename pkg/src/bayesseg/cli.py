"""Command-line entry points for every workflow."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np
import yaml

from . import active, metrics, pipeline, synthdata, uncertainty
from .core import (
    DatasetManifest,
    LabelMap,
    Volume3D,
    read_volume,
    write_volume,
    _atomic_write_text,
)
from .model import (
    TrainConfig,
    UNetConfig,
    build_model,
    load_checkpoint,
    predict_volume,
    save_checkpoint,
    train,
)


def _parse_size(text: str, n: int = 3):
    parts = tuple(int(v) for v in text.split(","))
    if len(parts) != n:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated ints")
    return parts


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bayesseg")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    sp.add_argument("--cases", type=int, required=True)
    sp.add_argument("--size", type=_parse_size, default=(128, 128, 32),
                    metavar="X,Y,Z")
    sp.add_argument("--classes", type=int, default=9,
                    help="total class count incl. background/body/bone")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--noise", type=float, default=5.0)
    sp.add_argument("--distractor", action="store_true")
    sp.add_argument("--out", required=True)

    tp = sub.add_parser("train", help="train a Bayesian U-Net on a manifest")
    tp.add_argument("--manifest", required=True)
    tp.add_argument("--out", required=True, help="checkpoint basename")
    tp.add_argument("--size", type=lambda s: _parse_size(s, 2),
                    default=(128, 128), metavar="H,W")
    tp.add_argument("--depth", type=int, default=4)
    tp.add_argument("--base-channels", type=int, default=16)
    tp.add_argument("--dropout", type=float, default=0.5)
    tp.add_argument("--placement", choices=["bayesian_unet", "none"],
                    default="bayesian_unet")
    tp.add_argument("--lr", type=float, default=1e-4)
    tp.add_argument("--batch", type=int, default=3)
    tp.add_argument("--epochs", type=int, default=300)
    tp.add_argument("--iterations", type=int, default=None)
    tp.add_argument("--seed", type=int, default=0)
    tp.add_argument("--no-augment", action="store_true")

    ip = sub.add_parser("infer", help="predict labels + uncertainty for a volume")
    ip.add_argument("--checkpoint", required=True)
    ip.add_argument("--volume", required=True)
    ip.add_argument("--out", required=True, help="output directory")
    ip.add_argument("--t-mc", type=int, default=20)
    ip.add_argument("--seed", type=int, default=0)
    ip.add_argument("--lcc", action="store_true",
                    help="apply largest-component post-processing")
    ip.add_argument("--pdc-model", default=None,
                    help="YAML file with alpha/beta for PDC")

    ep = sub.add_parser("evaluate", help="Dice/ASD tables for pred vs truth")
    ep.add_argument("--pred", required=True)
    ep.add_argument("--truth", required=True)
    ep.add_argument("--classes", type=int, required=True)
    ep.add_argument("--spacing", type=lambda s: tuple(map(float, s.split(","))),
                    default=(1.0, 1.0, 1.0))
    ep.add_argument("--out", required=True, help="report basename")
    ep.add_argument("--heatmap", action="store_true")

    fp = sub.add_parser("fit-pdc", help="fit the PSV->Dice regression")
    fp.add_argument("--observations", required=True,
                    help="YAML list of {psv, dice} records")
    fp.add_argument("--k-folds", type=int, default=4)
    fp.add_argument("--out", required=True)

    for name in ("al-sim", "al-serve"):
        ap = sub.add_parser(name, help="run the acquisition loop "
                            + ("with the simulated oracle" if name == "al-sim"
                               else "with human annotation over HTTP"))
        ap.add_argument("--data", required=True, help="synth dataset directory")
        ap.add_argument("--steps", type=int, default=10)
        ap.add_argument("--strategy", choices=list(active.STRATEGIES),
                        default="semi")
        ap.add_argument("--tau", type=float, default=2.5e-3)
        ap.add_argument("--step-fraction", type=float, default=0.05)
        ap.add_argument("--initial-fraction", type=float, default=0.05)
        ap.add_argument("--test-cases", type=int, default=2)
        ap.add_argument("--seed", type=int, default=0)
        ap.add_argument("--t-mc", type=int, default=10)
        ap.add_argument("--epochs", type=int, default=30)
        ap.add_argument("--iterations", type=int, default=None)
        ap.add_argument("--depth", type=int, default=3)
        ap.add_argument("--base-channels", type=int, default=8)
        ap.add_argument("--budget-from", default=None,
                        help="history file supplying per-step pixel budgets "
                             "(random strategy)")
        ap.add_argument("--out", required=True, help="history file")
        if name == "al-serve":
            ap.add_argument("--state-dir", required=True)
            ap.add_argument("--port", type=int, default=8008)

    pp = sub.add_parser("plot-curves", help="plot learning curves from histories")
    pp.add_argument("--history", nargs="+", required=True)
    pp.add_argument("--out", required=True)
    return p


def cmd_synth(args) -> int:
    if args.classes < 4:
        print("need at least 4 classes (background/body/bone + 1 muscle)",
              file=sys.stderr)
        return 1
    cfg = synthdata.PhantomConfig(
        seed=args.seed, size=args.size, n_structures=args.classes - 3,
        noise_sigma=args.noise, distractor=args.distractor,
    )
    manifest = synthdata.generate_dataset(args.cases, cfg, args.out)
    print(f"wrote {len(manifest.cases)} cases to {args.out}")
    return 0


def cmd_train(args) -> int:
    manifest = DatasetManifest.load(args.manifest)
    config = UNetConfig(
        in_size=args.size, n_classes=manifest.n_classes, depth=args.depth,
        base_channels=args.base_channels, dropout_rate=args.dropout,
        dropout_placement=args.placement,
    )
    weights = build_model(config, seed=args.seed)
    tc = TrainConfig(learning_rate=args.lr, batch_size=args.batch,
                     max_epochs=args.epochs, max_iterations=args.iterations)
    params = None if args.no_augment else pipeline.AugmentParams()
    _, history = train(weights, manifest, tc, params,
                       np.random.default_rng(args.seed))
    save_checkpoint(weights, args.out)
    print(f"trained {weights.iterations} iterations; "
          f"final loss {history[-1] if history else float('nan')}")
    return 0


def cmd_infer(args) -> int:
    weights = load_checkpoint(args.checkpoint)
    volume = read_volume(args.volume)
    if volume.voxels.dtype == np.int16:
        volume = pipeline.normalize_intensity(volume)
    labels, variance, means = predict_volume(weights, volume,
                                             t_mc=args.t_mc, seed=args.seed)
    if args.lcc:
        labels = pipeline.largest_component_filter(labels)
    os.makedirs(args.out, exist_ok=True)
    write_volume(Volume3D(labels.labels.astype(np.uint8), volume.spacing),
                 os.path.join(args.out, "labels"))
    summed = variance.sum(axis=0).astype(np.float32)
    write_volume(Volume3D(summed, volume.spacing),
                 os.path.join(args.out, "variance_summed"))
    pdc_model = None
    if args.pdc_model:
        with open(args.pdc_model) as f:
            doc = yaml.safe_load(f)
        pdc_model = uncertainty.PdcModel(alpha=float(doc["alpha"]),
                                         beta=float(doc["beta"]),
                                         k_folds=int(doc.get("k_folds", 1)))
    mean_prob = np.moveaxis(means, 1, 0)  # (C, Z, H, W)
    records = uncertainty.structure_report(mean_prob, variance,
                                           weights.config.n_classes, pdc_model)
    uncertainty.write_structure_report(
        {"volume": records}, os.path.join(args.out, "report.yaml"))
    print(f"wrote predictions to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    pred = read_volume(args.pred)
    truth = read_volume(args.truth)
    pred_map = LabelMap(pred.voxels.astype(np.int64), args.classes)
    truth_map = LabelMap(truth.voxels.astype(np.int64), args.classes)
    dice_by_class, asd_by_class = metrics.evaluate_maps(
        pred_map, truth_map, args.spacing)
    report = metrics.EvalReport(case_ids=["volume"],
                                class_ids=sorted(dice_by_class))
    for c, v in dice_by_class.items():
        report.dice_cells[("volume", c)] = v
    for c, v in asd_by_class.items():
        report.asd_cells[("volume", c)] = v
    metrics.emit_report(report, args.out, heatmap=args.heatmap)
    for c in sorted(dice_by_class):
        print(f"class {c}: dice={dice_by_class[c]:.4f} "
              f"asd={asd_by_class[c] if asd_by_class[c] is None else round(asd_by_class[c], 4)}")
    return 0


def cmd_fit_pdc(args) -> int:
    with open(args.observations) as f:
        doc = yaml.safe_load(f)
    obs = [(rec["psv"], rec["dice"]) for rec in doc]
    model = uncertainty.fit_pdc(obs, k_folds=args.k_folds)
    _atomic_write_text(args.out, yaml.safe_dump({
        "alpha": model.alpha, "beta": model.beta, "k_folds": model.k_folds,
        "residual_std": model.residual_std,
        "residual_mean_abs": model.residual_mean_abs,
        "n_observations": model.n_observations,
    }, sort_keys=False))
    print(f"alpha={model.alpha:.6g} beta={model.beta:.6g}")
    return 0


def _load_al_data(data_dir: str, n_test: int):
    manifest = DatasetManifest.load(os.path.join(data_dir, "manifest.yaml"))
    pool_images, pool_labels = {}, {}
    test_images, test_labels = {}, {}
    n_pool = len(manifest.cases) - n_test
    if n_pool < 1:
        raise ValueError("not enough cases for the requested test split")
    for i, case in enumerate(manifest.cases):
        vol = read_volume(case.volume_path)
        if vol.voxels.dtype == np.int16:
            vol = pipeline.normalize_intensity(vol)
        lab = read_volume(case.label_path).voxels.astype(np.uint8)
        if i < n_pool:
            pool_images[case.case_id] = vol.voxels
            pool_labels[case.case_id] = lab
        else:
            test_images[case.case_id] = vol.voxels
            test_labels[case.case_id] = lab
    return manifest, pool_images, pool_labels, test_images, test_labels


def _run_al(args, human_state_dir=None, port=None) -> int:
    manifest, pool_images, pool_labels, test_images, test_labels = \
        _load_al_data(args.data, args.test_cases)
    some = next(iter(pool_images.values()))
    config = UNetConfig(
        in_size=some.shape[1:], n_classes=manifest.n_classes,
        depth=args.depth, base_channels=args.base_channels,
    )
    tc = TrainConfig(max_epochs=args.epochs, max_iterations=args.iterations,
                     patience_epochs=5)
    qc = active.QueryConfig(tau=args.tau, step_fraction=args.step_fraction)
    rng = np.random.default_rng(args.seed)
    initial = []
    for cid, vol in pool_images.items():
        nz = vol.shape[0]
        k = max(1, int(round(args.initial_fraction * nz)))
        initial.extend((cid, int(z)) for z in
                       sorted(rng.choice(nz, size=k, replace=False)))
    budget = None
    if args.budget_from:
        hist = active.load_history(args.budget_from)
        budget = [step["queried_counts"] for step in hist]
    annotator = None
    if human_state_dir is not None:
        import threading

        import uvicorn

        from . import service

        server = uvicorn.Server(uvicorn.Config(
            service.create_app(human_state_dir),
            host="127.0.0.1", port=port, log_level="warning"))
        threading.Thread(target=server.run, daemon=True).start()
        print(f"annotation service listening on 127.0.0.1:{port}")

        def annotator(batch, step):
            images = {(it.case_id, it.z_index): pool_images[it.case_id][it.z_index]
                      for it in batch.items}
            print(f"step {step}: waiting for {len(batch.items)} annotations...")
            return service.annotate_via_service(
                human_state_dir, batch, images, manifest.n_classes, step)

    _, history = active.run_acquisition_loop(
        pool_images, pool_labels, test_images, test_labels, initial,
        config, tc, qc, args.strategy, n_steps=args.steps, seed=args.seed,
        t_mc=args.t_mc, pixel_budget_schedule=budget, annotator=annotator,
    )
    active.write_history(history, args.out)
    if history:
        print(f"final mean dice {history[-1]['mean_dice']:.4f} "
              f"after {len(history)} steps")
    return 0


def cmd_plot_curves(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots()
    for path in args.history:
        steps = active.load_history(path)
        ax.plot([s["step"] for s in steps], [s["mean_dice"] for s in steps],
                marker="o", label=os.path.basename(path))
    ax.set_xlabel("acquisition step")
    ax.set_ylabel("mean Dice")
    ax.legend()
    fig.savefig(args.out, dpi=120, bbox_inches="tight")
    print(f"wrote {args.out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "synth": cmd_synth,
        "train": cmd_train,
        "infer": cmd_infer,
        "evaluate": cmd_evaluate,
        "fit-pdc": cmd_fit_pdc,
        "al-sim": _run_al,
        "plot-curves": cmd_plot_curves,
    }
    try:
        if args.command == "al-serve":
            return _run_al(args, human_state_dir=args.state_dir, port=args.port)
        return handlers[args.command](args)
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
