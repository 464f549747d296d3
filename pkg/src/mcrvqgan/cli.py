"""Command-line entry point: ``mcrvqgan <command> [options]``.

Commands: phantom, train, synthesize, evaluate, ablate, classify-train,
classify-eval. Configuration comes from defaults, then ``--config FILE``
(INI), then ``-o section.key=value`` flags.

Exit codes: 0 success, 2 config error, 3 data error, 4 divergence, 5 I/O.
"""

import argparse
import logging
import os
import shutil
import sys
from pathlib import Path

from .config import VARIANTS, default_table, gan_hash, load_config, save_config, set_key, stable_hash
from .data import (ManifestRow, evaluation_slices, read_manifest, stratified_split, write_manifest,
                   write_phantom_corpus)
from .errors import (BackendError, CheckpointError, ConfigError, DataError, DivergenceError,
                     RangeError, ShapeError)
from .metrics import (METRIC_KEYS, SCHEMA_VERSION, evaluate_classifier, evaluate_synthesis,
                      format_tally_table, generator_fn, merge_classifier_reports, quantize_unit,
                      render_difference_map, save_png, synthesize_subject, to_unit,
                      validate_report, write_json, write_records_csv)
from .trainer import (classifier_training_data, gan_training_pairs, load_classifier, load_generator,
                      predict_probs, read_jsonl, train_classifier, train_gan)

log = logging.getLogger("mcrvqgan")

OUTPUT_ROOT_ENV = "MCRVQGAN_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE, EXIT_IO = 0, 2, 3, 4, 5
VARIANT_LABELS = {"vqgan": "VQGAN", "vqgan_mc": "VQGAN+MC",
                  "vqgan_mc_rb": "VQGAN+MC+RB", "full": "MCR-VQGAN"}


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _config_epilog():
    rows = default_table()
    width = max(len(k) for k, _ in rows)
    lines = ["configuration keys (override with -o section.key=value):"]
    lines += [f"  {k:<{width}}  {v}" for k, v in rows]
    lines.append(f"\noutput root: ${OUTPUT_ROOT_ENV} (default ./runs)")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Run directories

def output_root():
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def run_directory(args, cfg, default_name):
    if getattr(args, "out", None):
        return Path(args.out)
    return output_root() / (cfg.run.id or default_name)


def prepare_run_dir(path, force=False, resume=False):
    """Refuse to reuse a directory holding a previous run unless forced."""
    path = Path(path)
    if (path / "run.json").exists() and not (force or resume):
        raise FileExistsError(f"{path} already holds a run; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_run_manifest(run_dir, command, cfg, input_manifest):
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "run_id": cfg.run.id or Path(run_dir).name,
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": stable_hash(cfg.to_dict()),
        "input_manifest": str(input_manifest) if input_manifest else "",
        "output_dir": str(run_dir),
    }
    validate_report(manifest, "run_manifest")
    write_json(manifest, Path(run_dir) / "run.json")
    save_config(cfg, Path(run_dir) / "config.ini")
    return manifest


def _config(args):
    cfg = load_config(args.config, args.override)
    if getattr(args, "manifest", None):
        cfg.data.manifest = str(args.manifest)
    return cfg


def _split_rows(cfg):
    if not cfg.data.manifest:
        raise ConfigError("data.manifest: no manifest given (use --manifest)")
    rows = read_manifest(cfg.data.manifest)
    split = stratified_split(rows, cfg.data.train_fraction, cfg.run.seed)
    train_ids, test_ids = set(split.train_subjects), set(split.test_subjects)
    return [r for r in rows if r.subject_id in train_ids], [r for r in rows if r.subject_id in test_ids]


def _absolute(rows):
    return [ManifestRow(r.subject_id, r.diagnosis, os.path.abspath(r.mri_path),
                        os.path.abspath(r.pet_path) if r.pet_path else "") for r in rows]


def _write_split(run_dir, train_rows, test_rows):
    write_manifest(_absolute(train_rows), run_dir / "train_manifest.csv")
    write_manifest(_absolute(test_rows), run_dir / "test_manifest.csv")


def _synthesis_report(report, run_dir):
    obj = validate_report(report.to_dict("synthesis"), "synthesis_report")
    write_json(obj, run_dir / "synthesis_report.json")
    write_records_csv(report.records, run_dir / "per_slice.csv")
    return obj


# ---------------------------------------------------------------------------
# Commands

def cmd_phantom(args):
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise FileExistsError(f"{out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    path = write_phantom_corpus(args.n, args.seed, out, args.size, args.depth)
    print(path)
    return EXIT_OK


def cmd_train(args):
    cfg = _config(args)
    run_dir = prepare_run_dir(run_directory(args, cfg, "train"), args.force, bool(args.resume))
    train_rows, test_rows = _split_rows(cfg)
    _write_split(run_dir, train_rows, test_rows)
    write_run_manifest(run_dir, "train", cfg, cfg.data.manifest)
    pairs = gan_training_pairs(train_rows, cfg.data.image_size)
    log.info("training on %d slice pairs from %d subjects", len(pairs), len(train_rows))
    train_gan(cfg, pairs, out_dir=run_dir, resume=args.resume)
    print(run_dir / "last.ckpt")
    return EXIT_OK


def _load_gen(args):
    """Generator + its stored config; ``--config`` must match the checkpoint hash and
    ``-o`` may only change keys that leave the architecture untouched."""
    G, cfg = load_generator(args.checkpoint, load_config(args.config) if args.config else None)
    before = gan_hash(cfg)
    for item in args.override:
        key, _, value = item.partition("=")
        set_key(cfg, key.strip(), value.strip())
    if gan_hash(cfg.validate()) != before:
        raise ConfigError("overrides change the architecture stored in the checkpoint")
    return G, cfg


def cmd_synthesize(args):
    G, cfg = _load_gen(args)
    out = prepare_run_dir(Path(args.out) if args.out else output_root() / "synthesize", args.force)
    write_run_manifest(out, "synthesize", cfg, args.manifest)
    translate = generator_fn(G)
    indices = evaluation_slices(cfg.eval.slice_set)
    n = 0
    for row in read_manifest(args.manifest):
        if not row.pet_path:
            log.warning("%s: no PET volume, difference maps skipped", row.subject_id)
        pairs, fakes = synthesize_subject(translate, row, indices, cfg.data.image_size)
        for pair, fake in zip(pairs, fakes):
            save_png(quantize_unit(to_unit(fake)),
                     out / "synthetic" / row.subject_id / f"{pair.slice_index}.png")
            if pair.pet is not None:
                render_difference_map(pair.pet, fake,
                                      out / "difference" / row.subject_id / f"{pair.slice_index}.png",
                                      mri=pair.mri,
                                      panel_path=out / "panels" / row.subject_id / f"{pair.slice_index}.png")
            n += 1
    print(f"{n} synthetic slices written to {out}")
    return EXIT_OK


def cmd_evaluate(args):
    G, cfg = _load_gen(args)
    out = prepare_run_dir(Path(args.out) if args.out else output_root() / "evaluate", args.force)
    write_run_manifest(out, "evaluate", cfg, args.manifest)
    report = evaluate_synthesis(generator_fn(G), read_manifest(args.manifest), cfg.eval.slice_set,
                                cfg.data.image_size,
                                diff_dir=out / "difference" if args.diff_maps else None)
    _synthesis_report(report, out)
    print(format_synthesis_table(report.groups), end="")
    return EXIT_OK


def format_synthesis_table(groups):
    lines = [f"{'group':<6}{'n':>5}" + "".join(f"{k:>24}" for k in METRIC_KEYS)]
    for g, entry in groups.items():
        cells = [f"{entry[k]['mean']:.4f} ± {entry[k]['std']:.4f}" if entry[k]["mean"] is not None
                 else "n/a" for k in METRIC_KEYS]
        lines.append(f"{g:<6}{entry['n_subjects']:>5}" + "".join(f"{c:>24}" for c in cells))
    return "\n".join(lines) + "\n"


def cmd_ablate(args):
    base = _config(args)
    run_dir = prepare_run_dir(run_directory(args, base, "ablate"), args.force)
    train_rows, test_rows = _split_rows(base)
    _write_split(run_dir, train_rows, test_rows)
    write_run_manifest(run_dir, "ablate", base, base.data.manifest)
    pairs = gan_training_pairs(train_rows, base.data.image_size)
    rows, hashes = [], {}
    for variant in VARIANTS:
        cfg = load_config(args.config, args.override)
        cfg.data.manifest = base.data.manifest
        set_key(cfg, "model.variant", variant)
        vdir = run_dir / variant
        vdir.mkdir(exist_ok=True)
        trainer, _ = train_gan(cfg, pairs, out_dir=vdir)
        hashes[variant] = [r["batch_hash"] for r in read_jsonl(vdir / "train_log.jsonl")]
        report = evaluate_synthesis(generator_fn(trainer.G), test_rows, cfg.eval.slice_set,
                                    cfg.data.image_size)
        _synthesis_report(report, vdir)
        rows.append((variant, report.groups["ALL"]))
    table = {"schema_version": SCHEMA_VERSION, "kind": "ablation",
             "rows": [{"variant": v, "label": VARIANT_LABELS[v],
                       **{k: g[k] for k in METRIC_KEYS}} for v, g in rows],
             "batch_hashes": hashes}
    validate_report(table, "ablation")
    write_json(table, run_dir / "ablation.json")
    with open(run_dir / "ablation.csv", "w") as fh:
        fh.write("variant,mse_mean,mse_std,psnr_db_mean,psnr_db_std,ssim_mean,ssim_std\n")
        for v, g in rows:
            fh.write(",".join([VARIANT_LABELS[v]] + [repr(g[k][s]) for k in METRIC_KEYS
                                                      for s in ("mean", "std")]) + "\n")
    text = format_ablation_table(table["rows"])
    (run_dir / "ablation.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def format_ablation_table(rows):
    lines = [f"{'model':<14}" + "".join(f"{k:>24}" for k in METRIC_KEYS)]
    for r in rows:
        lines.append(f"{r['label']:<14}" + "".join(
            f"{r[k]['mean']:.4f} ± {r[k]['std']:.4f}".rjust(24) for k in METRIC_KEYS))
    return "\n".join(lines) + "\n"


def cmd_classify_train(args):
    cfg = _config(args)
    run_dir = prepare_run_dir(run_directory(args, cfg, "classifier"), args.force)
    train_rows, test_rows = _split_rows(cfg)
    _write_split(run_dir, train_rows, test_rows)
    write_run_manifest(run_dir, "classify-train", cfg, cfg.data.manifest)
    images, labels = classifier_training_data(train_rows, cfg.data.image_size)
    log.info("classifier training on %d real PET slices", len(images))
    train_classifier(cfg, images, labels, out_dir=run_dir)
    print(run_dir / "classifier.ckpt")
    return EXIT_OK


def cmd_classify_eval(args):
    model, cfg = load_classifier(args.classifier)
    G, gcfg = load_generator(args.generator)
    if gcfg.data.image_size != cfg.data.image_size:
        raise ConfigError("data.image_size differs between classifier and generator checkpoints")
    out = prepare_run_dir(Path(args.out) if args.out else output_root() / "classify_eval", args.force)
    write_run_manifest(out, "classify-eval", cfg, args.manifest)
    rows = read_manifest(args.manifest)

    def predict(slices):
        return predict_probs(model, slices)

    real = evaluate_classifier(predict, rows, "real", image_size=cfg.data.image_size)
    synth = evaluate_classifier(predict, rows, "synthetic", translate=generator_fn(G),
                                image_size=cfg.data.image_size)
    report = merge_classifier_reports(real, synth)
    obj = validate_report(report.to_dict("classification"), "classification_report")
    write_json(obj, out / "classification_report.json")
    text = format_tally_table(report.tallies)
    (out / "classification_report.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI run configuration")
    common.add_argument("-o", "--set", dest="override", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override one configuration key")
    common.add_argument("--force", action="store_true", help="overwrite an existing run")
    common.add_argument("-v", "--verbose", action="store_true")

    fmt = argparse.RawDescriptionHelpFormatter
    epilog = _config_epilog()
    parser = argparse.ArgumentParser(prog="mcrvqgan", description=__doc__.split("\n")[0],
                                     epilog=epilog, formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text,
                           epilog=epilog, formatter_class=fmt)
        p.set_defaults(func=func)
        return p

    p = add("phantom", cmd_phantom, "write a synthetic phantom corpus and its manifest")
    p.add_argument("--n", type=_positive_int, required=True, help="number of subjects")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=256, help="in-plane size of each volume")
    p.add_argument("--depth", type=int, default=256, help="number of axial slices")

    p = add("train", cmd_train, "train the GAN on the training split of a manifest")
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--resume", help="checkpoint to continue from")

    for name, func, text in (("synthesize", cmd_synthesize, "translate MRI slices to synthetic PET"),
                             ("evaluate", cmd_evaluate, "MSE/PSNR/SSIM report per diagnosis group")):
        p = add(name, func, text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--manifest", required=True)
        p.add_argument("--out")
        if name == "evaluate":
            p.add_argument("--diff-maps", action="store_true", help="also write difference maps")

    p = add("ablate", cmd_ablate, "train and evaluate the four architecture variants")
    p.add_argument("--manifest")
    p.add_argument("--out")

    p = add("classify-train", cmd_classify_train, "train the CN vs MCI/AD classifier on real PET")
    p.add_argument("--manifest")
    p.add_argument("--out")

    p = add("classify-eval", cmd_classify_eval,
            "subject-level accuracy on real and synthetic PET")
    p.add_argument("--classifier", required=True)
    p.add_argument("--generator", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BackendError as exc:
        print(f"config error: {exc} (offline runs can use -o perceptual.backend=fixed_random)",
              file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        where = f" (state dumped to {exc.dump_path})" if getattr(exc, "dump_path", None) else ""
        print(f"training diverged: {exc}{where}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (DataError, RangeError, ShapeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
