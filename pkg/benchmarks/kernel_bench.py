#!/usr/bin/env python
"""Compare the compiled geometry kernels against the pure numpy twin.

Run after building the extension (pip install -e . --no-build-isolation):

    python benchmarks/kernel_bench.py
"""

from pointshell import benchmark

if __name__ == "__main__":
    print(benchmark.run())
