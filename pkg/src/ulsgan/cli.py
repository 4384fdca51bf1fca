"""Command-line front end: ``ulsgan <command> [flags]``.

Exit codes: 0 success or validation pass, 1 validation fail, 2 usage or
structural error, 3 I/O or corruption error.  Every command checks its
inputs before writing, and outputs are staged under a temporary name and
moved into place only once complete.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .cgan import check_training_hull, load_checkpoint, sample, save_checkpoint, train
from .conditions import Condition, Ground
from .config import CONFIG_ENV_VAR, ToolConfig, load_config
from .corpus import MeasurementGrid, iter_corpus, record_seed
from .dataset import DatasetWriter, RecordInfo, iter_dataset, read_dataset, read_manifest, record_file_name
from .errors import ParameterError, PersistenceError, StructuralError, UlsganError, UsageError
from .plotting import line_plot_svg, read_csv_rows, series_from_rows
from .signal_core import RawSignal, process_raw
from .statistics import DistanceBin, build_trend_table
from .validation import compare_populations, emit_report

log = logging.getLogger("ulsgan")

EXIT_OK, EXIT_VALIDATION_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
LOSS_LOG_COLUMNS = ["epoch", "d_loss", "g_loss", "d_real", "d_fake"]


# -- output staging -----------------------------------------------------------

def _prepare_target(out: Path, force: bool) -> None:
    if out.exists():
        if out.is_dir() and not any(out.iterdir()):
            return
        if not force:
            raise UsageError(f"{out} already exists; pass --force to replace it")
        if out.is_dir() and not (out / "manifest.json").exists():
            raise UsageError(f"refusing to replace {out}: not a dataset directory")


@contextmanager
def staged_dir(out, force: bool = False):
    """Yield a scratch directory that replaces ``out`` only on success."""
    out = Path(out)
    _prepare_target(out, force)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    except OSError as exc:
        raise PersistenceError(f"cannot create output next to {out}: {exc}") from exc
    try:
        yield tmp
        if out.exists():
            shutil.rmtree(out) if out.is_dir() else out.unlink()
        os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


@contextmanager
def staged_file(out):
    """Yield a scratch file path that replaces ``out`` only on success."""
    out = Path(out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        fd, name = tempfile.mkstemp(prefix=f".{out.name}.", dir=out.parent)
        os.close(fd)
    except OSError as exc:
        raise PersistenceError(f"cannot write {out}: {exc}") from exc
    tmp = Path(name)
    try:
        yield tmp
        os.replace(tmp, out)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


# -- flag parsing helpers -----------------------------------------------------

def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ground_list(text: str) -> list[Ground]:
    try:
        return [Ground.parse(v.strip()) for v in text.split(",") if v.strip()]
    except ParameterError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _bins_arg(text: str):
    if text.strip() == "dominant":
        return "dominant"
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'dominant' or comma-separated bin indices, got {text!r}") from None


def _where_arg(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected COLUMN=VALUE, got {text!r}")
    col, val = text.split("=", 1)
    return col.strip(), val.strip()


def _config(args) -> ToolConfig:
    return load_config(getattr(args, "config", None))


def _processed_kind(manifest: dict, path) -> None:
    if manifest["kind"] != "processed":
        raise StructuralError(f"{path}: expected a processed dataset, got kind {manifest['kind']!r}")


# -- commands -------------------------------------------------------------

def cmd_corpus(args) -> int:
    cfg = _config(args)
    grid = cfg.grid
    changes = {}
    if args.heights is not None:
        changes["heights_m"] = args.heights
    if args.betas is not None:
        changes["betas_deg"] = args.betas
    if args.grounds is not None:
        changes["grounds"] = args.grounds
    if args.rotations is not None:
        changes["rotations"] = args.rotations
    if args.reps is not None:
        changes["repetitions"] = args.reps
    grid = MeasurementGrid(**{**grid.to_dict(), **changes})
    seed = cfg.corpus_seed if args.seed is None else args.seed
    if args.dry_run:
        print(f"{grid.record_count} records")
        return EXIT_OK
    if args.out is None:
        raise UsageError("--out is required unless --dry-run is given")
    pipeline = cfg.pipeline if args.processed else None
    params = cfg.corpus
    if pipeline is None:
        kind, rate, length = "raw", params.sample_rate_hz, params.record_length
    else:
        kind, rate, length = "processed", pipeline.output_rate_hz, pipeline.output_len
    with staged_dir(args.out, args.force) as tmp:
        writer = DatasetWriter(tmp, kind, rate, length)
        for i, (info, samples) in enumerate(iter_corpus(grid, params, seed, pipeline), start=1):
            writer.add(info, samples)
            if i % 1000 == 0:
                log.info("corpus: %d / %d records", i, grid.record_count)
        writer.close()
    print(f"wrote {grid.record_count} {kind} records to {args.out}")
    return EXIT_OK


def cmd_process(args) -> int:
    cfg = _config(args)
    manifest = read_manifest(args.input)
    if manifest["kind"] != "raw":
        raise StructuralError(f"{args.input}: expected a raw dataset, got kind {manifest['kind']!r}")
    if not manifest["records"]:
        raise StructuralError(f"{args.input}: dataset has no records")
    rate = float(manifest["sample_rate_hz"])
    with staged_dir(args.out, args.force) as tmp:
        writer = DatasetWriter(tmp, "processed", cfg.pipeline.output_rate_hz, cfg.pipeline.output_len)
        for info, samples in iter_dataset(args.input):
            out = process_raw(RawSignal(samples.astype(np.float64), rate), cfg.pipeline)
            writer.add(info, out.samples)
        writer.close()
    print(f"processed {len(manifest['records'])} records into {args.out}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _config(args)
    ds = read_dataset(args.input)
    _processed_kind({"kind": ds.kind}, args.input)
    if len(ds) == 0:
        raise StructuralError(f"{args.input}: dataset has no records")
    st = cfg.statistics
    bins = args.bins if args.bins is not None else st.bins
    table = build_trend_table(ds.groups(), [DistanceBin(b) for b in bins], ds.sample_rate_hz,
                              st.speed_of_sound_mps, st.cells, st.significance)
    with staged_file(args.report) as tmp:
        table.write_csv(tmp)
    print(f"wrote {len(table)} trend rows to {args.report}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    gan = cfg.gan
    if args.seed is not None:
        gan = replace(gan, seed=args.seed)
    if args.epochs is not None:
        gan = replace(gan, epochs=args.epochs)
    ds = read_dataset(args.data)
    _processed_kind({"kind": ds.kind}, args.data)
    if len(ds) == 0:
        raise StructuralError(f"{args.data}: dataset has no records")
    if ds.record_length != gan.output_dim:
        raise ParameterError(f"{args.data}: records have length {ds.record_length}, expected {gan.output_dim}")
    loss_path = Path(args.loss_log) if args.loss_log else Path(str(args.out) + ".loss.csv")

    def progress(row):
        log.info("epoch %d/%d d_loss %.4f g_loss %.4f", row["epoch"], gan.epochs, row["d_loss"], row["g_loss"])

    result = train(ds, gan, progress)
    with staged_file(args.out) as tmp_ckpt, staged_file(loss_path) as tmp_log:
        save_checkpoint(result.checkpoint, tmp_ckpt)
        with open(tmp_log, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOSS_LOG_COLUMNS)
            for row in result.loss_log:
                writer.writerow([row["epoch"]] + [repr(float(row[c])) for c in LOSS_LOG_COLUMNS[1:]])
    print(f"trained {gan.epochs} epochs ({result.d_updates} D / {result.g_updates} G updates); "
          f"checkpoint {args.out}, loss log {loss_path}")
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = _config(args)
    ckpt = load_checkpoint(args.model)
    seed = cfg.generate_seed if args.seed is None else args.seed
    if args.count < 0:
        raise ParameterError("--count must be >= 0")
    if args.conditions_from is not None:
        if any(v is not None for v in (args.height, args.beta, args.ground)):
            raise UsageError("--conditions-from cannot be combined with --height/--beta/--ground")
        manifest = read_manifest(args.conditions_from)
        conds = sorted({RecordInfo.from_dict(e).condition for e in manifest["records"]})
        if not conds:
            raise StructuralError(f"{args.conditions_from}: dataset has no records")
    else:
        if any(v is None for v in (args.height, args.beta, args.ground)):
            raise UsageError("give --height, --beta and --ground, or --conditions-from")
        conds = [Condition(args.height, args.beta, Ground.parse(args.ground))]
    for cond in conds:
        cond.require_conformant()
        check_training_hull(ckpt, cond)
    cutoff = args.post_lowpass
    if cutoff is not None and not 0 < cutoff < ckpt.sample_rate_hz / 2:
        raise ParameterError(f"--post-lowpass {cutoff} Hz must lie in (0, {ckpt.sample_rate_hz / 2}) Hz")

    with staged_dir(args.out, args.force) as tmp:
        writer = DatasetWriter(tmp, "processed", ckpt.sample_rate_hz, ckpt.config.output_dim)
        n = 0
        for cond in conds:
            cond_seed = seed if len(conds) == 1 else record_seed(seed, cond, 0, 0)
            for i, row in enumerate(sample(ckpt, cond, args.count, cond_seed, post_lowpass_hz=cutoff)):
                writer.add(RecordInfo(record_file_name(n), cond, 0, i, cond_seed), row)
                n += 1
        writer.close()
    print(f"generated {n} records for {len(conds)} condition(s) into {args.out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = _config(args)
    tol_k = cfg.validation.tol_k if args.tol_k is None else args.tol_k
    tol_theta = cfg.validation.tol_theta if args.tol_theta is None else args.tol_theta
    if tol_k < 0 or tol_theta < 0:
        raise ParameterError("tolerances must be >= 0")
    ref = read_dataset(args.ref)
    gen = read_dataset(args.gen)
    for ds, path in ((ref, args.ref), (gen, args.gen)):
        _processed_kind({"kind": ds.kind}, path)
    st = cfg.statistics
    bins = args.bins if args.bins is not None else list(st.bins)
    if bins == "dominant":
        bins = lambda cond: [cfg.corpus.dominant_bin(cond)]  # noqa: E731
    report = compare_populations(ref, gen, bins, tol_k, tol_theta, st.min_samples, st.cells, st.significance,
                                 ref.sample_rate_hz, st.speed_of_sound_mps)
    if args.report:
        with staged_file(args.report) as tmp:
            emit_report(report, tmp)
    print(report.summary())
    return EXIT_OK if report.passed else EXIT_VALIDATION_FAIL


def cmd_plot(args) -> int:
    columns, rows = read_csv_rows(args.input)
    if not columns or not rows:
        raise StructuralError(f"{args.input}: CSV has no data rows")
    where = dict(args.where or [])
    series = series_from_rows(rows, columns, args.x, args.y, args.series, where)
    svg = line_plot_svg(series, args.x, args.y)
    with staged_file(args.out) as tmp:
        tmp.write_text(svg)
    print(f"wrote {len(series)} series to {args.out}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ulsgan",
        description="Synthetic ultrasonic ground-reflection corpus, Gamma statistics and cGAN toolkit.",
        epilog=f"Default config path may be set with ${CONFIG_ENV_VAR}; flags override config values.",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for debug")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.set_defaults(func=func)
        sp.add_argument("--config", help=f"JSON config file (default: ${CONFIG_ENV_VAR} or built-in defaults)")
        return sp

    sp = add("corpus", cmd_corpus, "synthesize a reference dataset")
    sp.add_argument("--out", help="output dataset directory")
    sp.add_argument("--seed", type=int, help="master seed (default: config corpus.seed)")
    sp.add_argument("--heights", type=_float_list, help="comma-separated sensor heights in m")
    sp.add_argument("--betas", type=_float_list, help="comma-separated beta angles in degrees")
    sp.add_argument("--grounds", type=_ground_list, help="comma-separated grounds (gravel, asphalt)")
    sp.add_argument("--rotations", type=int, help="rotations per condition")
    sp.add_argument("--reps", type=int, help="repetitions per rotation")
    sp.add_argument("--processed", action="store_true", help="store processed envelopes instead of raw records")
    sp.add_argument("--dry-run", action="store_true", help="print the record count and exit")
    sp.add_argument("--force", action="store_true", help="replace an existing output dataset")

    sp = add("process", cmd_process, "run the envelope pipeline over a raw dataset")
    sp.add_argument("--in", dest="input", required=True, help="raw dataset directory")
    sp.add_argument("--out", required=True, help="output processed dataset directory")
    sp.add_argument("--force", action="store_true", help="replace an existing output dataset")

    sp = add("analyze", cmd_analyze, "fit per-bin Gamma trends and export a CSV table")
    sp.add_argument("--in", dest="input", required=True, help="processed dataset directory")
    sp.add_argument("--report", required=True, help="output CSV path")
    sp.add_argument("--bins", type=lambda t: [int(v) for v in t.split(",")], help="bin indices, e.g. 1,2,3")

    sp = add("train", cmd_train, "train the conditional GAN")
    sp.add_argument("--data", required=True, help="processed training dataset directory")
    sp.add_argument("--out", required=True, help="output checkpoint file")
    sp.add_argument("--seed", type=int, help="training seed (default: config gan.seed)")
    sp.add_argument("--epochs", type=int, help="number of epochs (default: config gan.epochs)")
    sp.add_argument("--loss-log", help="loss log CSV (default: <out>.loss.csv)")

    sp = add("generate", cmd_generate, "sample envelopes from a trained checkpoint")
    sp.add_argument("--model", required=True, help="checkpoint file")
    sp.add_argument("--height", type=float, help="sensor height in m")
    sp.add_argument("--beta", type=float, help="beta angle in degrees")
    sp.add_argument("--ground", help="gravel or asphalt")
    sp.add_argument("--conditions-from", help="generate for every condition of this dataset instead")
    sp.add_argument("--count", type=int, default=100, help="records per condition (default 100)")
    sp.add_argument("--seed", type=int, help="sampling seed (default: config generate.seed)")
    sp.add_argument("--out", required=True, help="output dataset directory")
    sp.add_argument("--post-lowpass", type=float, nargs="?", const=1_500.0, metavar="HZ",
                    help="apply the corrective envelope lowpass (default cutoff 1500 Hz)")
    sp.add_argument("--force", action="store_true", help="replace an existing output dataset")

    sp = add("validate", cmd_validate, "compare generated and reference Gamma parameters")
    sp.add_argument("--ref", required=True, help="reference processed dataset")
    sp.add_argument("--gen", required=True, help="generated processed dataset")
    sp.add_argument("--report", help="output CSV report")
    sp.add_argument("--tol-k", type=float, help="relative tolerance on k")
    sp.add_argument("--tol-theta", type=float, help="relative tolerance on theta")
    sp.add_argument("--bins", type=_bins_arg, help="bin indices (e.g. 1,2,3) or 'dominant'")

    sp = add("plot", cmd_plot, "render a CSV report as an SVG line plot")
    sp.add_argument("--in", dest="input", required=True, help="input CSV")
    sp.add_argument("--out", required=True, help="output SVG")
    sp.add_argument("--x", required=True, help="x column")
    sp.add_argument("--y", required=True, help="y column")
    sp.add_argument("--series", help="column splitting rows into separate lines")
    sp.add_argument("--where", type=_where_arg, action="append", metavar="COLUMN=VALUE",
                    help="keep only rows with this value (repeatable)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UlsganError as exc:
        print(f"ulsgan {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"ulsgan {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
