"""Command-line front end.

Commands tie sampling, diagnosis, calibration, and before/after
evaluation into reproducible pipelines.  Every command is a pure
function of its flags: re-running produces byte-identical outputs, and
all randomness is addressed by the ``--seed`` value through per-purpose
streams.

Exit codes: 0 success, 2 usage, 3 input-contract violation,
4 calibration precondition, 5 source failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import os
import sys

import numpy as np

from . import diagnosis, gmm, importance
from . import source as sources
from . import store as stores
from .embedding import neighbor_counts
from .errors import (
    CalibrationError,
    DiagnosisError,
    DimensionMismatchError,
    InvalidConfigError,
    NonFiniteError,
    SourceError,
    StoreFormatError,
    ZeroVectorError,
)
from .jsonutil import format_float, read_json, write_json
from .rng import (
    STREAM_ANCHORS,
    STREAM_EVAL_ANCHORS,
    STREAM_EVAL_POOL,
    STREAM_POOL,
    STREAM_REFERENCE,
    CounterStream,
    derive_seed,
)

EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_PRECONDITION = 4
EXIT_SOURCE = 5

_ROLE_STREAMS = {"anchors": STREAM_ANCHORS, "pool": STREAM_POOL}

# Evaluation draws its post-calibration anchor and pool sets from
# sub-seeds so the two sets can never collide with each other or with
# the pre-calibration draws.
_AFTER_ANCHORS_SALT = 0xA11C40125
_AFTER_POOL_SALT = 0xC011EC7104

_GEN_BATCH = 65536
_REFERENCE_PROBES = 256


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _seed_value(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must fit in u64, got {value}")
    return value


def _size_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad size list {text!r}") from exc


def _check_unit_interval(parser: argparse.ArgumentParser, args) -> None:
    if not 0.0 < args.theta <= 1.0:
        parser.error(f"--theta must be in (0, 1], got {args.theta}")
    if not 0.0 <= args.radius <= 1.0:
        parser.error(f"--radius must be in [0, 1], got {args.radius}")


def _sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _provenance(seed: int, **paths: str) -> dict:
    inputs = {}
    for name, path in paths.items():
        inputs[name] = {"path": os.fspath(path), "sha256": _sha256_file(path)}
    return {"seed": int(seed), "inputs": inputs}


def _embed_all(src, latents: np.ndarray) -> np.ndarray:
    """Embed in bounded batches so huge collections never sit twice in RAM."""
    parts = []
    for lo in range(0, len(latents), _GEN_BATCH):
        emb, _ = sources.generate(src, latents[lo:lo + _GEN_BATCH])
        parts.append(emb)
    if not parts:
        return np.empty((0, src.embed_dim), dtype=np.float64)
    return np.concatenate(parts, axis=0)


def _out_prefix(path: str) -> str:
    return path[:-5] if path.endswith(".json") else path


# -- sample ---------------------------------------------------------------------

def cmd_sample(args, parser) -> int:
    spec = sources.load_source_spec(args.source)
    stream = _ROLE_STREAMS[args.role]
    src = sources.open_source(spec)
    try:
        with stores.StoreWriter(args.out, spec.latent_dim, spec.embed_dim,
                                args.seed) as writer:
            for lo in range(0, args.n, _GEN_BATCH):
                count = min(args.n, lo + _GEN_BATCH) - lo
                latents = sources.sample_latents(count, spec.latent_dim,
                                                 args.seed, stream, start=lo)
                embeddings, refs = sources.generate(src, latents)
                writer.append(latents, embeddings, refs)
    finally:
        close = getattr(src, "close", None)
        if close:
            close()
    print(f"wrote {args.n} samples to {args.out}")
    return 0


# -- diagnose / find-modes --------------------------------------------------------

def cmd_diagnose(args, parser) -> int:
    _check_unit_interval(parser, args)
    anchors = stores.read_store(args.anchors)
    pool = stores.read_store(args.pool)
    report = diagnosis.build_report(
        anchors, pool, args.theta, args.radius, k=args.k,
        curve_sizes=args.curve_sizes, seed=args.seed)
    write_json(args.out, report)
    worst = report["worst_mode"]
    print(f"mu_mccs {format_float(report['mu_mccs'])}  "
          f"sigma_mccs {format_float(report['sigma_mccs'])}")
    print(f"worst mode: anchor {worst['anchor_index']} "
          f"count {worst['neighbor_count']} mccs {format_float(worst['mccs'])}")
    print(f"wrote {args.out}")
    return 0


def cmd_find_modes(args, parser) -> int:
    _check_unit_interval(parser, args)
    anchors = stores.read_store(args.anchors)
    pool = stores.read_store(args.pool)
    modes = diagnosis.top_k_modes(anchors, pool, radius=args.radius, k=args.k)
    doc = {
        "schema": 1,
        "radius": args.radius,
        "k": args.k,
        "modes": [{"anchor_index": m.anchor_index,
                   "neighbor_count": m.neighbor_count} for m in modes],
    }
    write_json(args.out, doc)
    for m in modes:
        print(f"anchor {m.anchor_index}: {m.neighbor_count} neighbors")
    print(f"wrote {args.out}")
    return 0


# -- calibrate --------------------------------------------------------------------

def _dense_modes_from_report(report_path: str, anchors: stores.SampleStore,
                             count: int) -> list[tuple[np.ndarray, int]]:
    """The ``count`` densest modes listed in a diagnosis report."""
    report = read_json(report_path)
    listed = report.get("top_k")
    if not isinstance(listed, list):
        raise InvalidConfigError(f"{report_path}: not a diagnosis report")
    picked = listed[:count]
    out = []
    for entry in picked:
        idx = int(entry["anchor_index"])
        if not 0 <= idx < anchors.count:
            raise InvalidConfigError(
                f"{report_path}: mode anchor {idx} outside store of {anchors.count}")
        out.append((anchors.embeddings[idx], idx))
    return out


def _pick_reference(pool: stores.SampleStore, radius: float, seed: int) -> int:
    """An off-mode pool position: the least-dense of a seeded probe set."""
    k = min(_REFERENCE_PROBES, pool.count)
    u = CounterStream(seed, STREAM_REFERENCE).uniforms(0, k)
    idx = np.unique((u * pool.count).astype(np.int64) % pool.count)
    counts = neighbor_counts(pool.embeddings[idx], pool.embeddings, radius)
    order = np.lexsort((idx, counts))
    return int(idx[order[0]])


def cmd_calibrate_gmm(args, parser) -> int:
    _check_unit_interval(parser, args)
    spec = sources.load_source_spec(args.source)
    anchors = stores.read_store(args.anchors)
    dense = _dense_modes_from_report(args.report, anchors, args.modes)
    mode_embs = np.asarray([emb for emb, _ in dense])
    src = sources.open_source(spec)
    try:
        model = gmm.calibrate_gmm(
            src, mode_embs, args.seed, k=args.kmeans_k, r0=args.radius,
            n_fit=args.n_fit, source_seed=spec.seed)
    finally:
        close = getattr(src, "close", None)
        if close:
            close()
    prov = _provenance(args.seed, source=args.source, anchors=args.anchors,
                       report=args.report)
    prov["modes"] = [idx for _, idx in dense]
    gmm.save_mixture(args.out, model, provenance=prov)
    print(f"fit mixture of {model.k} components over {args.n_fit} samples")
    print(f"wrote {args.out}")
    return 0


def cmd_calibrate_is(args, parser) -> int:
    _check_unit_interval(parser, args)
    anchors = stores.read_store(args.anchors)
    pool = stores.read_store(args.pool)
    dense = _dense_modes_from_report(args.report, anchors, args.modes)
    reference = _pick_reference(pool, args.radius, args.seed)
    plan = importance.build_plan(pool, dense, [reference], args.radius,
                                 hull_size=args.hull_size)
    prov = _provenance(args.seed, anchors=args.anchors, pool=args.pool,
                       report=args.report)
    prov["modes"] = [idx for _, idx in dense]
    importance.save_plan(args.out, plan, provenance=prov)
    for entry in plan.entries:
        print(f"mode anchor {entry.mode_index}: count {entry.dense_count}, "
              f"p {format_float(entry.p)}")
    print(f"wrote {args.out}")
    return 0


# -- evaluate ---------------------------------------------------------------------

_ACCEPT_FIELDS = ("proposals", "accepted", "in_hull", "in_hull_accepted",
                  "outside_hull", "outside_accepted")


def _acceptance_doc(stats: importance.AcceptanceStats) -> dict:
    return {name: getattr(stats, name) for name in _ACCEPT_FIELDS}


def cmd_evaluate(args, parser) -> int:
    _check_unit_interval(parser, args)
    if args.anchors < 2:
        parser.error("--anchors must be >= 2 for population statistics")
    spec = sources.load_source_spec(args.source)
    model_doc = read_json(args.model)
    kind = model_doc.get("kind")
    if kind not in ("mixture", "importance"):
        raise InvalidConfigError(f"{args.model}: unknown model kind {kind!r}")

    seed_a = derive_seed(args.seed, _AFTER_ANCHORS_SALT)
    seed_c = derive_seed(args.seed, _AFTER_POOL_SALT)
    acceptance = None
    if kind == "mixture":
        model = gmm.load_mixture(args.model)
        if model.latent_dim != spec.latent_dim:
            raise InvalidConfigError(
                f"model latent_dim {model.latent_dim}, source has {spec.latent_dim}")
        after_a_lat = gmm.sample_calibrated(model, args.anchors, seed_a)
        after_c_lat = gmm.sample_calibrated(model, args.pool, seed_c)
    else:
        plan = importance.load_plan(args.model)
        after_a_lat, stats_a = importance.sample_calibrated_is(
            plan, spec.latent_dim, args.anchors, seed_a)
        after_c_lat, stats_c = importance.sample_calibrated_is(
            plan, spec.latent_dim, args.pool, seed_c)
        acceptance = {"anchors": _acceptance_doc(stats_a),
                      "pool": _acceptance_doc(stats_c)}

    src = sources.open_source(spec)
    try:
        before_a_lat = sources.sample_latents(args.anchors, spec.latent_dim,
                                              args.seed, STREAM_EVAL_ANCHORS)
        before_c_lat = sources.sample_latents(args.pool, spec.latent_dim,
                                              args.seed, STREAM_EVAL_POOL)
        before_a = stores.SampleStore(before_a_lat, _embed_all(src, before_a_lat),
                                      seed=args.seed)
        before_c = stores.SampleStore(before_c_lat, _embed_all(src, before_c_lat),
                                      seed=args.seed)
        after_a = stores.SampleStore(after_a_lat, _embed_all(src, after_a_lat),
                                     seed=seed_a)
        after_c = stores.SampleStore(after_c_lat, _embed_all(src, after_c_lat),
                                     seed=seed_c)
    finally:
        close = getattr(src, "close", None)
        if close:
            close()

    before = diagnosis.build_report(before_a, before_c, args.theta, args.radius,
                                    k=args.k, seed=args.seed)
    after = diagnosis.build_report(after_a, after_c, args.theta, args.radius,
                                   k=args.k, seed=args.seed)
    before_count = before["worst_mode"]["neighbor_count"]
    after_count = after["worst_mode"]["neighbor_count"]
    deltas = {
        "d_mu": after["mu_mccs"] - before["mu_mccs"],
        "d_sigma": after["sigma_mccs"] - before["sigma_mccs"],
        "d_worst_mccs": after["worst_mode"]["mccs"] - before["worst_mode"]["mccs"],
        "worst_count_ratio": (after_count / before_count) if before_count else None,
    }
    doc = {"schema": 1, "model_kind": kind, "before": before, "after": after,
           "deltas": deltas}
    if acceptance is not None:
        doc["acceptance"] = acceptance
    write_json(args.out, doc)
    table_paths = _write_tables(doc, _out_prefix(args.out))
    print(f"d_mu {format_float(deltas['d_mu'])}  "
          f"d_sigma {format_float(deltas['d_sigma'])}  "
          f"d_worst_mccs {format_float(deltas['d_worst_mccs'])}")
    ratio = deltas["worst_count_ratio"]
    print("worst_count_ratio " + (format_float(ratio) if ratio is not None else "n/a"))
    for path in [args.out, *table_paths]:
        print(f"wrote {path}")
    return 0


# -- report / tables ----------------------------------------------------------------

def _phases(doc: dict) -> list[tuple[str, dict]]:
    if "before" in doc:
        return [("before", doc["before"]), ("after", doc["after"])]
    return [("all", doc)]


def _write_tables(doc: dict, prefix: str) -> list[str]:
    """Plot-ready CSV projections of a diagnosis or evaluation report."""
    paths = []
    modes_path = prefix + ".modes.csv"
    with open(modes_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["phase", "rank", "anchor_index", "neighbor_count", "mccs"])
        for phase, rep in _phases(doc):
            for rank, mode in enumerate(rep["top_k"]):
                writer.writerow([phase, rank, mode["anchor_index"],
                                 mode["neighbor_count"],
                                 format_float(float(mode["mccs"]))])
    paths.append(modes_path)

    curve_rows = []
    for phase, rep in _phases(doc):
        for curve in rep.get("curves", ()):
            for size, value in curve["points"]:
                curve_rows.append([phase, curve["kind"], int(size),
                                   format_float(float(value))])
    if curve_rows:
        curves_path = prefix + ".curves.csv"
        with open(curves_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["phase", "kind", "size", "value"])
            writer.writerows(curve_rows)
        paths.append(curves_path)
    return paths


def cmd_report(args, parser) -> int:
    if args.store is not None:
        out = args.out or (_out_prefix(args.store) + "." + args.format)
        st = stores.read_store(args.store)
        rows = stores.export_table(st, out, fmt=args.format,
                                   fields=args.fields.split(","))
        print(f"wrote {rows} rows to {out}")
        return 0
    doc = read_json(args.report)
    if "top_k" not in doc and "before" not in doc:
        raise InvalidConfigError(f"{args.report}: not a diagnosis or evaluation report")
    prefix = args.out or _out_prefix(args.report)
    for path in _write_tables(doc, prefix):
        print(f"wrote {path}")
    return 0


# -- worker -------------------------------------------------------------------------

def cmd_worker(args, parser) -> int:
    spec = sources.load_source_spec(args.source)
    if args.latent_dim is not None and args.latent_dim != spec.latent_dim:
        raise InvalidConfigError(
            f"--latent-dim {args.latent_dim} but source has {spec.latent_dim}")
    if args.embed_dim is not None and args.embed_dim != spec.embed_dim:
        raise InvalidConfigError(
            f"--embed-dim {args.embed_dim} but source has {spec.embed_dim}")
    src = sources.open_source(spec)
    try:
        sources.run_worker(src, sys.stdin.buffer, sys.stdout.buffer)
    finally:
        close = getattr(src, "close", None)
        if close:
            close()
    return 0


# -- parser ---------------------------------------------------------------------------

def _add_stat_flags(sub: argparse.ArgumentParser, k_help: str) -> None:
    sub.add_argument("--theta", type=float, default=0.3,
                     help="similarity cutoff as a fraction of the max distance")
    sub.add_argument("--radius", type=float, default=0.25,
                     help="neighborhood radius as a fraction of the max distance")
    sub.add_argument("--k", type=_positive_int, default=24, help=k_help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bbgc",
        description="Black-box collapse diagnosis and latent calibration.")
    commands = parser.add_subparsers(dest="command", required=True)

    sample = commands.add_parser(
        "sample", help="draw latents from a source and store (latent, embedding) pairs")
    sample.add_argument("--source", required=True, help="source spec JSON")
    sample.add_argument("--n", type=_positive_int, required=True,
                        help="number of samples")
    sample.add_argument("--seed", type=_seed_value, default=0)
    sample.add_argument("--role", choices=sorted(_ROLE_STREAMS), default="pool",
                        help="stream role; anchors and pool never overlap")
    sample.add_argument("--out", required=True, help="store path")
    sample.set_defaults(func=cmd_sample)

    diagnose = commands.add_parser(
        "diagnose", help="population statistics, worst mode, top-k, curves")
    diagnose.add_argument("--anchors", required=True, help="anchor store")
    diagnose.add_argument("--pool", required=True, help="comparison pool store")
    _add_stat_flags(diagnose, "dense modes listed in the report")
    diagnose.add_argument("--curve-sizes", type=_size_list, default=None,
                          help="comma-separated sizes for convergence curves")
    diagnose.add_argument("--seed", type=_seed_value, default=0,
                          help="shuffle seed for the curves")
    diagnose.add_argument("--out", required=True, help="report JSON path")
    diagnose.set_defaults(func=cmd_diagnose)

    find = commands.add_parser("find-modes", help="list the k densest anchors")
    find.add_argument("--anchors", required=True)
    find.add_argument("--pool", required=True)
    find.add_argument("--theta", type=float, default=0.3, help=argparse.SUPPRESS)
    find.add_argument("--radius", type=float, default=0.25)
    find.add_argument("--k", type=_positive_int, default=24)
    find.add_argument("--out", required=True)
    find.set_defaults(func=cmd_find_modes)

    calibrate = commands.add_parser(
        "calibrate", help="fit a calibrated sampler for the dense modes")
    methods = calibrate.add_subparsers(dest="method", required=True)

    cal_gmm = methods.add_parser("gmm", help="reweighted Gaussian mixture")
    cal_gmm.add_argument("--source", required=True, help="source spec JSON")
    cal_gmm.add_argument("--anchors", required=True, help="anchor store")
    cal_gmm.add_argument("--report", required=True, help="diagnosis report JSON")
    cal_gmm.add_argument("--modes", type=_positive_int, default=1,
                         help="how many of the densest modes to calibrate away")
    cal_gmm.add_argument("--kmeans-k", type=_positive_int, default=64)
    cal_gmm.add_argument("--n-fit", type=_positive_int, default=100_000)
    cal_gmm.add_argument("--theta", type=float, default=0.3, help=argparse.SUPPRESS)
    cal_gmm.add_argument("--radius", type=float, default=0.25)
    cal_gmm.add_argument("--seed", type=_seed_value, default=0)
    cal_gmm.add_argument("--out", required=True, help="mixture model JSON path")
    cal_gmm.set_defaults(func=cmd_calibrate_gmm)

    cal_is = methods.add_parser("is", help="convex-hull importance sampling plan")
    cal_is.add_argument("--anchors", required=True, help="anchor store")
    cal_is.add_argument("--pool", required=True, help="pool store for counts and hulls")
    cal_is.add_argument("--report", required=True, help="diagnosis report JSON")
    cal_is.add_argument("--modes", type=_positive_int, default=1)
    cal_is.add_argument("--hull-size", type=_positive_int, default=100)
    cal_is.add_argument("--theta", type=float, default=0.3, help=argparse.SUPPRESS)
    cal_is.add_argument("--radius", type=float, default=0.25)
    cal_is.add_argument("--seed", type=_seed_value, default=0)
    cal_is.add_argument("--out", required=True, help="plan JSON path")
    cal_is.set_defaults(func=cmd_calibrate_is)

    evaluate = commands.add_parser(
        "evaluate", help="before/after diagnosis through a calibrated sampler")
    evaluate.add_argument("--source", required=True, help="source spec JSON")
    evaluate.add_argument("--model", required=True, help="mixture or plan JSON")
    evaluate.add_argument("--anchors", type=_positive_int, required=True,
                          help="anchor count per phase")
    evaluate.add_argument("--pool", type=_positive_int, required=True,
                          help="pool count per phase")
    _add_stat_flags(evaluate, "dense modes listed per phase")
    evaluate.add_argument("--seed", type=_seed_value, default=0)
    evaluate.add_argument("--out", required=True, help="evaluation JSON path")
    evaluate.set_defaults(func=cmd_evaluate)

    report = commands.add_parser(
        "report", help="re-emit CSV tables from a report, or export a store")
    which = report.add_mutually_exclusive_group(required=True)
    which.add_argument("--report", help="diagnosis or evaluation JSON")
    which.add_argument("--store", help="sample store to flatten")
    report.add_argument("--format", choices=("csv", "jsonl"), default="csv",
                        help="store export format")
    report.add_argument("--fields", default="latent,embedding",
                        help="comma-separated store columns")
    report.add_argument("--out", default=None,
                        help="output path (store) or prefix (report)")
    report.set_defaults(func=cmd_report)

    worker = commands.add_parser(
        "worker", help="serve a source over stdin/stdout frames (child side)")
    worker.add_argument("--source", required=True, help="source spec JSON")
    worker.add_argument("--latent-dim", type=_positive_int, default=None)
    worker.add_argument("--embed-dim", type=_positive_int, default=None)
    worker.set_defaults(func=cmd_worker)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except (StoreFormatError, DiagnosisError, DimensionMismatchError,
            NonFiniteError, ZeroVectorError, InvalidConfigError,
            OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except CalibrationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except SourceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOURCE


if __name__ == "__main__":
    sys.exit(main())
