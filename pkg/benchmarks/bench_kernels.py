"""Compare the compiled CRC kernel with the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Workloads: one full model train (3,025 packets, 18 bytes each, as checked
at the receiver) and a batch of single long rows.  Both backends must agree
bit for bit before timing starts.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from fedair import kernels
from fedair.codec import CRC_BITS, CRC_INIT, CRC_TABLE, encode_params
from fedair.model import init_model


def workloads(rng):
    train = encode_params(init_model(0))
    yield "model train (3025 x 18 B)", np.packbits(train.bit_matrix()[:, :144], axis=1)
    yield "bulk rows (20000 x 18 B)", rng.integers(0, 256, (20000, 18), dtype=np.uint8)
    yield "long rows (64 x 4096 B)", rng.integers(0, 256, (64, 4096), dtype=np.uint8)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    print(f"active backend: {kernels.BACKEND}")
    if kernels.BACKEND != "cython":
        print("compiled extension not importable; build with `pip install -e . --no-build-isolation`")
    backends = {"python": kernels.python_crc_rows}
    if kernels.BACKEND == "cython":
        backends["cython"] = kernels.crc_rows

    print(f"{'workload':28s} " + " ".join(f"{b:>12s}" for b in backends) + "     speedup")
    for name, rows in workloads(rng):
        results = {b: fn(rows, CRC_TABLE, CRC_INIT, CRC_BITS) for b, fn in backends.items()}
        ref = results["python"]
        assert all(np.array_equal(ref, r) for r in results.values()), "backends disagree"
        best = {}
        for b, fn in backends.items():
            t = timeit.repeat(lambda: fn(rows, CRC_TABLE, CRC_INIT, CRC_BITS), number=1, repeat=args.repeat)
            best[b] = min(t)
        speed = f"{best['python'] / best['cython']:10.1f}x" if "cython" in best else ""
        print(f"{name:28s} " + " ".join(f"{1e3 * best[b]:10.2f}ms" for b in backends) + " " + speed)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
