"""Compare the numba and numpy separator kernels.

    python benchmarks/bench_kernels.py [--repeat 20]

Kernels are timed in-process (both implementations are importable side by
side); the end-to-end ``separate`` timing is taken in two subprocesses, one
with NOISETRACE_DISABLE_NUMBA=1.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from noisetrace import kernels
from noisetrace._accel import HAVE_NUMBA

SEPARATE_SNIPPET = """
import timeit, numpy as np
from noisetrace.audio import AudioClip
from noisetrace.separation import separate
from noisetrace._accel import backend
x = AudioClip(np.random.default_rng(0).standard_normal(16000 * 10) * 0.1)
separate(x)
print(backend(), min(timeit.repeat(lambda: separate(x), number=1, repeat={repeat})))
"""


def best(fn, repeat):
    fn()  # warm-up, includes numba compilation
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    frames = rng.standard_normal((1250, 512))
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(512) / 512)
    out_len = 1249 * 128 + 512
    mag = np.abs(rng.standard_normal((1250, 257)))
    floor = np.quantile(mag, 0.1, axis=0)

    rows = [
        ("overlap_add numpy", best(lambda: kernels._overlap_add_numpy(frames, window, 128, out_len), args.repeat)),
        ("spectral_gain numpy", best(lambda: kernels._spectral_gain_numpy(mag, floor, 1.5, 0.05), args.repeat)),
    ]
    if HAVE_NUMBA:
        rows += [
            ("overlap_add numba", best(lambda: kernels._overlap_add_loop(frames, window, 128, out_len), args.repeat)),
            ("spectral_gain numba", best(lambda: kernels._spectral_gain_loop(mag, floor, 1.5, 0.05), args.repeat)),
        ]
    else:
        print("numba not importable; loop kernels would run as plain Python and are skipped")

    for disable in ("0", "1"):
        env = {**os.environ, "NOISETRACE_DISABLE_NUMBA": disable}
        res = subprocess.run([sys.executable, "-c", SEPARATE_SNIPPET.format(repeat=max(3, args.repeat // 4))],
                             env=env, capture_output=True, text=True, check=True)
        name, secs = res.stdout.split()
        rows.append((f"separate 10 s clip ({name})", float(secs)))

    width = max(len(r[0]) for r in rows)
    for name, secs in rows:
        print(f"{name:<{width}}  {secs * 1e3:9.3f} ms")


if __name__ == "__main__":
    main()
