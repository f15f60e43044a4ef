#!/usr/bin/env python3
"""Numerical and timing report for the recurrence kernels.

Two sections:

1. agreement: worst relative error between the recurrent reference and the
   convolutional / chunked-parallel / selective forms on random instances,
   plus the finite-difference gradient check.
2. timing: median ns per element for the recurrent and parallel scans over
   a ladder of sequence lengths and worker counts, with a column confirming
   that every worker count produced byte-identical output.

    python3 scripts/kernel_report.py
    python3 scripts/kernel_report.py --instances 200 --lengths 1024,65536
"""

import argparse
import statistics
import time

import numpy as np

from ssmad.ssm import (
    SelectiveInputs,
    SsmParams,
    build_conv_kernel,
    discretize,
    gradcheck,
    scan_convolutional,
    scan_parallel,
    scan_recurrent,
    selective_scan,
)
from ssmad.tensor import Rng


def rand_params(rng, n):
    return SsmParams(
        a=rng.uniform(n, -2.0, -0.01),
        b=rng.uniform(n, -1.0, 1.0),
        c=rng.uniform(n, -1.0, 1.0),
        delta=float(rng.uniform(1, 0.05, 1.0)[0]),
    )


def rel(got, want):
    return float(np.max(np.abs(got - want)) / max(float(np.max(np.abs(want))), 1e-30))


def agreement_section(instances, max_len, seed):
    rng = Rng(seed)
    worst = {"convolution": 0.0, "parallel": 0.0, "selective": 0.0}
    for _ in range(instances):
        n = 1 + int(rng.uniform(1, 0, 8)[0])
        length = 1 + int(rng.uniform(1, 0, max_len)[0])
        p = rand_params(rng, n)
        d = discretize(p)
        x = rng.uniform(length, -1.0, 1.0)
        y_ref = scan_recurrent(d, x).array

        y = scan_convolutional(build_conv_kernel(d, length), x).array
        worst["convolution"] = max(worst["convolution"], rel(y, y_ref))

        y = scan_parallel(d, x, workers=4).array
        worst["parallel"] = max(worst["parallel"], rel(y, y_ref))

        s = SelectiveInputs(
            x=x,
            delta=np.full(length, p.delta),
            b=np.broadcast_to(p.b, (length, n)).copy(),
            c=np.broadcast_to(p.c, (length, n)).copy(),
            a=p.a,
        )
        y = selective_scan(s).array
        worst["selective"] = max(worst["selective"], rel(y, y_ref))

    grad_worst = max(
        gradcheck(1 + i % 16, 1 + i % 4, seed=seed * 100 + i)["max_rel_error"]
        for i in range(20)
    )

    print(f"agreement vs the step-by-step recurrence ({instances} instances):")
    for name, err in worst.items():
        print(f"  {name:<12s} worst rel error {err:.3e}")
    print(f"  {'gradcheck':<12s} worst rel error {grad_worst:.3e}  (vs central differences)")
    print()


def median_ns(fn, size, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return statistics.median(times) / size


def timing_section(lengths, workers_list, repeats, seed):
    rng = Rng(seed)
    n = 8
    d = discretize(rand_params(rng, n))
    print("median ns/element (sequence scan, state size 8):")
    header = "  length    recurrent" + "".join(
        f"  par w={w}" for w in workers_list
    ) + "  identical"
    print(header)
    for length in lengths:
        x = rng.uniform(length, -1.0, 1.0)
        row = [f"  {length:<8d}"]
        row.append(f"{median_ns(lambda: scan_recurrent(d, x), length, repeats):9.1f}")
        outs = []
        for w in workers_list:
            row.append(
                f"{median_ns(lambda: scan_parallel(d, x, workers=w), length, repeats):8.1f}"
            )
            outs.append(scan_parallel(d, x, workers=w).array.tobytes())
        same = all(o == outs[0] for o in outs)
        row.append("      yes" if same else "       NO")
        print("".join(row))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--instances", type=int, default=100)
    ap.add_argument("--max-len", type=int, default=256)
    ap.add_argument("--lengths", default="1024,8192,65536")
    ap.add_argument("--workers", default="1,2,4,8")
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    agreement_section(args.instances, args.max_len, args.seed)
    timing_section(
        [int(v) for v in args.lengths.split(",") if v],
        [int(v) for v in args.workers.split(",") if v],
        args.repeats,
        args.seed,
    )


if __name__ == "__main__":
    main()
