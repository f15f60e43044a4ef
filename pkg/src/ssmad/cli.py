"""Command-line front end.

Subcommands:
  scan-order   print a schedule as JSON flat indices or CSV (step, row, col)
  ssm-check    self-verification of the scan kernels; exit 1 on failure
  forward      pyramid (3 MBT files) + config JSON -> anomaly map + record
  eval         manifest of score maps / masks / image scores -> metrics
  bench        micro-benchmarks, CSV of (kernel, size, median ns/elem)
  synth        deterministic synthetic fixture directory

Exit codes: 0 success, 1 verification failure, 2 usage or I/O error,
3 metric precondition failure.  Worker counts default to the
MAMBAAD_WORKERS environment variable, then 1.
"""

from __future__ import annotations

import argparse
import json
import os
import statistics
import sys
import time

import numpy as np

from . import synth
from .metrics import (
    DEFAULT_FPR_LIMIT,
    LabeledScores,
    MetricPreconditionError,
    MetricsReport,
    evaluate,
)
from .pipeline import (
    DecoderConfig,
    FeaturePyramid,
    init_decoder_params,
    load_decoder_params,
    pipeline_forward,
    save_decoder_params,
)
from .scans import (
    ScanDirection,
    ScanMethod,
    UnsupportedGeometry,
    base_schedule,
    gather_sequence,
    make_schedule,
    scatter_sequence,
)
from .ssm import (
    SsmDiscrete,
    discretize,
    gradcheck,
    random_selective_inputs,
    scan_convolutional,
    scan_parallel,
    scan_recurrent,
    selective_scan,
    build_conv_kernel,
    SelectiveInputs,
    SsmParams,
)
from .tensor import (
    MbtError,
    PgmError,
    Rng,
    Tensor,
    read_mask_pgm_file,
    read_tensor_file,
    write_tensor_file,
)

EXIT_OK = 0
EXIT_VERIFICATION = 1
EXIT_USAGE = 2
EXIT_PRECONDITION = 3

WORKERS_ENV = "MAMBAAD_WORKERS"


class CliError(Exception):
    """Usage or I/O problem; maps to exit code 2."""


def resolve_workers(requested: int | None) -> int:
    if requested is not None:
        if requested < 1:
            raise CliError("--workers must be >= 1")
        return requested
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            value = int(env)
        except ValueError:
            raise CliError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
        if value < 1:
            raise CliError(f"{WORKERS_ENV} must be >= 1")
        return value
    return 1


def _write_text(path: str | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
        if not text.endswith("\n"):
            sys.stdout.write("\n")
    else:
        with open(path, "w") as fh:
            fh.write(text)


# ---------------------------------------------------------------------------
# scan-order


def cmd_scan_order(args) -> int:
    try:
        method = ScanMethod(args.method)
        direction = ScanDirection(args.direction)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    try:
        sched = make_schedule(method, direction, args.height, args.width)
    except UnsupportedGeometry as exc:
        raise CliError(str(exc)) from None
    if args.format == "json":
        text = json.dumps([int(v) for v in sched.order])
    else:
        lines = ["step,row,col"]
        for step, cell in enumerate(sched.order):
            lines.append(f"{step},{cell // sched.width},{cell % sched.width}")
        text = "\n".join(lines) + "\n"
    _write_text(args.out, text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# ssm-check


def _rel_error(got: np.ndarray, want: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(want))), 1e-30)
    return float(np.max(np.abs(got - want)) / scale)


def cmd_ssm_check(args) -> int:
    rng = Rng(args.seed)
    max_len = args.max_len
    report: dict = {"seed": args.seed, "max_len": max_len}
    ok = True

    def rand_lti(n: int) -> SsmParams:
        return SsmParams(
            a=rng.uniform(n, -2.0, -0.01),
            b=rng.uniform(n, -1.0, 1.0),
            c=rng.uniform(n, -1.0, 1.0),
            delta=float(rng.uniform(1, 0.1, 1.0)[0]),
        )

    # recurrence vs convolution kernel
    worst = 0.0
    for _ in range(args.instances):
        n = 1 + int(rng.uniform(1, 0, 8)[0])
        length = 1 + int(rng.uniform(1, 0, max_len)[0])
        d = discretize(rand_lti(n))
        x = rng.uniform(length, -1.0, 1.0)
        y_rec = scan_recurrent(d, x).array
        y_conv = scan_convolutional(build_conv_kernel(d, length), x).array
        worst = max(worst, _rel_error(y_conv, y_rec))
    lti_pass = worst <= 1e-5
    report["lti_equivalence"] = {
        "instances": args.instances,
        "worst_rel_error": worst,
        "tolerance": 1e-5,
        "pass": lti_pass,
    }
    ok = ok and lti_pass

    # parallel vs sequential, plus worker-count bit identity
    worst = 0.0
    identical = True
    for _ in range(args.instances):
        n = 1 + int(rng.uniform(1, 0, 8)[0])
        length = 1 + int(rng.uniform(1, 0, max_len)[0])
        d = discretize(rand_lti(n))
        x = rng.uniform(length, -1.0, 1.0)
        y_rec = scan_recurrent(d, x).array
        y_par = scan_parallel(d, x, workers=1).array
        worst = max(worst, _rel_error(y_par, y_rec))
        for w in (2, 8):
            if not np.array_equal(y_par, scan_parallel(d, x, workers=w).array):
                identical = False
    par_pass = worst <= 1e-6 and identical
    report["parallel_vs_recurrent"] = {
        "instances": args.instances,
        "worst_rel_error": worst,
        "workers_bit_identical": identical,
        "tolerance": 1e-6,
        "pass": par_pass,
    }
    ok = ok and par_pass

    # selective scan with constant parameters reduces to the LTI scan
    worst = 0.0
    for _ in range(args.instances):
        n = 1 + int(rng.uniform(1, 0, 4)[0])
        length = 1 + int(rng.uniform(1, 0, max_len)[0])
        p = rand_lti(n)
        x = rng.uniform(length, -1.0, 1.0)
        s = SelectiveInputs(
            x=x,
            delta=np.full(length, p.delta),
            b=np.broadcast_to(p.b, (length, n)).copy(),
            c=np.broadcast_to(p.c, (length, n)).copy(),
            a=p.a,
        )
        y_sel = selective_scan(s).array
        y_rec = scan_recurrent(discretize(p), x).array
        worst = max(worst, _rel_error(y_sel, y_rec))
    sel_pass = worst <= 1e-6
    report["selective_lti_reduction"] = {
        "instances": args.instances,
        "worst_rel_error": worst,
        "tolerance": 1e-6,
        "pass": sel_pass,
    }
    ok = ok and sel_pass

    # analytic backward vs central differences
    worst = 0.0
    for i in range(args.grad_instances):
        length = 1 + int(rng.uniform(1, 0, 16)[0])
        n = 1 + int(rng.uniform(1, 0, 4)[0])
        rep = gradcheck(length, n, seed=args.seed * 1000 + i)
        worst = max(worst, rep["max_rel_error"])
    grad_pass = worst <= 1e-4
    report["gradcheck"] = {
        "instances": args.grad_instances,
        "worst_rel_error": worst,
        "tolerance": 1e-4,
        "pass": grad_pass,
    }
    ok = ok and grad_pass

    report["pass"] = ok
    _write_text(args.out, json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK if ok else EXIT_VERIFICATION


# ---------------------------------------------------------------------------
# forward


def _load_pyramid(paths) -> FeaturePyramid:
    tensors = []
    for path in paths:
        try:
            tensors.append(read_tensor_file(path))
        except FileNotFoundError:
            raise CliError(f"cannot read pyramid file {path}") from None
        except MbtError as exc:
            raise CliError(f"{path}: {exc}") from None
    try:
        return FeaturePyramid(scales=tuple(tensors))
    except ValueError as exc:
        raise CliError(str(exc)) from None


def _config_from_json(path: str | None) -> DecoderConfig:
    if path is None:
        return DecoderConfig()
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise CliError(f"cannot read config file {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: {exc}") from None
    kwargs = {}
    try:
        if "stage_depths" in raw:
            kwargs["stage_depths"] = tuple(int(v) for v in raw["stage_depths"])
        if "hss_per_stage" in raw:
            kwargs["hss_per_stage"] = tuple(int(v) for v in raw["hss_per_stage"])
        if "stage_channels" in raw and raw["stage_channels"] is not None:
            kwargs["stage_channels"] = tuple(int(v) for v in raw["stage_channels"])
        if "scan_method" in raw:
            kwargs["scan_method"] = ScanMethod(raw["scan_method"])
        if "directions" in raw:
            kwargs["directions"] = tuple(
                ScanDirection(v) for v in raw["directions"]
            )
        if "state_size" in raw:
            kwargs["state_size"] = int(raw["state_size"])
        if "expansion" in raw:
            kwargs["expansion"] = int(raw["expansion"])
        if "local_kernels" in raw:
            kwargs["local_kernels"] = tuple(int(v) for v in raw["local_kernels"])
        if "seed" in raw:
            kwargs["seed"] = int(raw["seed"])
        return DecoderConfig(**kwargs)
    except (ValueError, TypeError) as exc:
        raise CliError(f"bad config: {exc}") from None


def cmd_forward(args) -> int:
    pyramid = _load_pyramid(args.pyramid)
    cfg = _config_from_json(args.config)
    workers = resolve_workers(args.workers)
    channels = pyramid.channels
    try:
        if args.params:
            params = load_decoder_params(args.params, cfg, channels)
        else:
            params = init_decoder_params(cfg, channels)
    except (FileNotFoundError, MbtError, ValueError, KeyError) as exc:
        raise CliError(f"cannot load parameters: {exc}") from None
    if args.save_params:
        save_decoder_params(args.save_params, params)
    try:
        loss, amap = pipeline_forward(
            pyramid,
            cfg,
            params,
            out_h=args.map_size,
            out_w=args.map_size,
            identity_decoder=args.identity_decoder,
            workers=workers,
        )
    except UnsupportedGeometry as exc:
        raise CliError(str(exc)) from None
    write_tensor_file(args.out_map, Tensor(amap.scores))
    record = {
        "loss": loss,
        "image_score": amap.image_score,
        "map_shape": [amap.height, amap.width],
        "identity_decoder": bool(args.identity_decoder),
    }
    _write_text(args.out_json, json.dumps(record, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _load_manifest_samples(path: str):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise CliError(f"cannot read manifest {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: {exc}") from None
    samples = raw.get("samples") if isinstance(raw, dict) else None
    if not isinstance(samples, list) or not samples:
        raise CliError("manifest must contain a non-empty 'samples' list")
    base = os.path.dirname(os.path.abspath(path))
    parsed = []
    for i, sample in enumerate(samples):
        if not isinstance(sample, dict):
            raise CliError(f"sample {i} is not an object")
        try:
            map_path = sample["score_map"]
            mask_path = sample["mask"]
            image_score = float(sample["image_score"])
            image_label = int(sample["image_label"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CliError(f"sample {i} malformed: {exc}") from None
        if image_label not in (0, 1):
            raise CliError(f"sample {i}: image_label must be 0 or 1")
        category = sample.get("category", "all")
        parsed.append(
            (
                os.path.join(base, map_path),
                os.path.join(base, mask_path),
                image_score,
                image_label,
                category,
            )
        )
    return parsed


def _evaluate_samples(samples, fpr_limit: float) -> MetricsReport:
    maps, masks, scores, labels = [], [], [], []
    for map_path, mask_path, image_score, image_label, _ in samples:
        try:
            t = read_tensor_file(map_path)
        except (FileNotFoundError, MbtError) as exc:
            raise CliError(f"{map_path}: {exc}") from None
        try:
            m = read_mask_pgm_file(mask_path)
        except (FileNotFoundError, PgmError) as exc:
            raise CliError(f"{mask_path}: {exc}") from None
        maps.append(t)
        masks.append(m)
        scores.append(image_score)
        labels.append(image_label)
    return evaluate(
        LabeledScores(scores=np.array(scores), labels=np.array(labels)),
        maps,
        masks,
        fpr_limit=fpr_limit,
    )


def cmd_eval(args) -> int:
    samples = _load_manifest_samples(args.manifest)
    if args.per_category:
        categories = sorted({s[4] for s in samples})
        reports = {
            cat: _evaluate_samples([s for s in samples if s[4] == cat], args.fpr_limit)
            for cat in categories
        }
        mean_vals = np.mean([r.values() for r in reports.values()], axis=0)
        combined = MetricsReport(*[float(v) for v in mean_vals])
        payload = {
            "pooling": "per-category-mean",
            "categories": {
                cat: json.loads(r.to_json()) for cat, r in reports.items()
            },
            "mean": json.loads(combined.to_json()),
        }
        report_json = json.dumps(payload, indent=2, sort_keys=True)
        report = combined
    else:
        report = _evaluate_samples(samples, args.fpr_limit)
        payload = json.loads(report.to_json())
        payload["pooling"] = "pooled"
        report_json = json.dumps(payload, indent=2, sort_keys=True)

    image, pixel, mad_cell = report.csv_cells()
    csv_text = "image,pixel,mAD\n" + f"{image},{pixel},{mad_cell}\n"
    _write_text(args.out_json, report_json)
    _write_text(args.out_csv, csv_text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench


def _median_ns_per_elem(fn, size: int, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return statistics.median(times) / size


def cmd_bench(args) -> int:
    sizes = [int(v) for v in args.sizes.split(",") if v]
    if not sizes or any(s < 1 for s in sizes):
        raise CliError("--sizes must be positive integers")
    workers = resolve_workers(args.workers)
    rng = Rng(args.seed)
    rows = ["kernel,size,median_ns_per_elem"]

    if args.suite == "scan":
        n = 8
        d = SsmDiscrete(
            a_bar=np.exp(rng.uniform(n, -2.0, -0.01)),
            b_bar=rng.uniform(n, -1.0, 1.0),
            c=rng.uniform(n, -1.0, 1.0),
        )
        for size in sizes:
            x = np.asarray(
                np.sin(np.arange(size) * 0.1) * 0.5, dtype=np.float64
            )
            sel = random_selective_inputs(size, 4, Rng(args.seed + size))
            for name, fn in (
                ("recurrent", lambda: scan_recurrent(d, x)),
                ("parallel", lambda: scan_parallel(d, x, workers=workers)),
                ("selective", lambda: selective_scan(sel)),
            ):
                rows.append(
                    f"{name},{size},{_median_ns_per_elem(fn, size, args.repeats):.2f}"
                )
    elif args.suite == "gather":
        for size in sizes:
            side = int(np.sqrt(size))
            side = 1 << max(1, (side - 1).bit_length())  # power of two square
            t = Tensor(
                rng.uniform(4 * side * side, -1.0, 1.0)
                .reshape(4, side, side)
                .astype(np.float32)
            )
            for method in ScanMethod:
                sched = make_schedule(method, ScanDirection.FORWARD, side, side)

                def roundtrip(t=t, sched=sched):
                    scatter_sequence(gather_sequence(t, sched), sched)

                rows.append(
                    f"{method.value},{side * side},"
                    f"{_median_ns_per_elem(roundtrip, side * side, args.repeats):.2f}"
                )
    else:  # pragma: no cover - argparse choices
        raise CliError(f"unknown suite {args.suite}")

    _write_text(args.out, "\n".join(rows) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    try:
        synth.write_fixture(args.out, args.kind, args.size, args.channels, args.seed)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssmad",
        description="Scan-schedule and state-space kernels with an anomaly "
        "evaluation protocol.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scan-order", help="print a grid visit schedule")
    p.add_argument("method", choices=[m.value for m in ScanMethod])
    p.add_argument("direction", choices=[d.value for d in ScanDirection])
    p.add_argument("height", type=int)
    p.add_argument("width", type=int)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_scan_order)

    p = sub.add_parser("ssm-check", help="verify the scan kernels")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--max-len", type=int, default=256)
    p.add_argument("--instances", type=int, default=50)
    p.add_argument("--grad-instances", type=int, default=10)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_ssm_check)

    p = sub.add_parser("forward", help="run the reconstruction pipeline")
    p.add_argument(
        "--pyramid", nargs=3, required=True, metavar=("S0", "S1", "S2")
    )
    p.add_argument("--config", default=None, help="decoder config JSON")
    p.add_argument("--params", default=None, help="parameter directory")
    p.add_argument("--save-params", default=None)
    p.add_argument("--out-map", required=True)
    p.add_argument("--out-json", default=None)
    p.add_argument("--map-size", type=int, default=None)
    p.add_argument("--identity-decoder", action="store_true")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(fn=cmd_forward)

    p = sub.add_parser("eval", help="compute the seven-metric report")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-json", default=None)
    p.add_argument("--out-csv", default=None)
    p.add_argument("--fpr-limit", type=float, default=DEFAULT_FPR_LIMIT)
    p.add_argument("--per-category", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="micro-benchmarks")
    p.add_argument("--suite", choices=("scan", "gather"), default="scan")
    p.add_argument("--sizes", default="1024,16384,262144")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("synth", help="write a synthetic fixture directory")
    p.add_argument("--kind", choices=synth.KINDS, required=True)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MetricPreconditionError as exc:
        print(f"metric precondition failed: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
