"""Solve time over the (Nc, M) grid on the dense-traffic fixture."""

from cpto.cli import bench, format_bench
from cpto.config import RunConfig

print(format_bench(bench(RunConfig(), steps=40)))
