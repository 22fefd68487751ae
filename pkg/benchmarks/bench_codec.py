#!/usr/bin/env python3
"""Benchmark the frame codec hot path: compiled extension vs pure Python.

Every input event crosses the codec four times (client->broker->host and
back), so pack/scan dominate broker throughput. Run after building the
extension:

    python benchmarks/bench_codec.py --frames 200000
"""

from __future__ import annotations

import argparse
import time

from appshare.wire import pure

try:
    from appshare import _wirecore
except ImportError:
    _wirecore = None


def bench_pack(kernel, frames: int, body: bytes) -> float:
    start = time.perf_counter()
    for _ in range(frames):
        kernel.pack_frame(0, 5, body)
    return time.perf_counter() - start


def bench_scan(kernel, frames: int, body: bytes) -> float:
    per_pass = 64
    blob = pure.pack_frame(0, 5, body) * per_pass
    passes = max(1, frames // per_pass)
    start = time.perf_counter()
    for _ in range(passes):
        offset = 0
        end = len(blob)
        while offset < end:
            hit = kernel.scan_frame(blob, offset, end)
            if hit is None:
                break
            offset = hit[3]
    elapsed = time.perf_counter() - start
    return elapsed * frames / (passes * per_pass)  # normalize to `frames` scans


def bench_fnv(kernel, frames: int, body: bytes) -> float:
    start = time.perf_counter()
    h = 0xCBF29CE484222325
    for _ in range(frames):
        h = kernel.fnv1a64(body, h)
    return time.perf_counter() - start


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--frames", type=int, default=200_000)
    parser.add_argument("--body-size", type=int, default=64)
    args = parser.parse_args()

    body = bytes(range(256)) * (args.body_size // 256 + 1)
    body = body[: args.body_size]

    kernels = [("pure", pure)]
    if _wirecore is not None:
        kernels.append(("compiled", _wirecore))
    else:
        print("compiled extension not built; showing pure only")

    print(f"{args.frames} frames, {args.body_size}-byte bodies\n")
    print(f"{'benchmark':<10} {'kernel':<10} {'time':>9} {'frames/s':>12} {'speedup':>8}")
    for name, fn in (("pack", bench_pack), ("scan", bench_scan), ("fnv1a64", bench_fnv)):
        base = None
        for kname, kernel in kernels:
            elapsed = fn(kernel, args.frames, body)
            rate = args.frames / elapsed
            if base is None:
                base = elapsed
                speedup = ""
            else:
                speedup = f"{base / elapsed:.1f}x"
            print(f"{name:<10} {kname:<10} {elapsed:8.3f}s {rate:12.0f} {speedup:>8}")
        print()


if __name__ == "__main__":
    main()
