"""Benchmark and training settings shared by the experiment scripts."""

from svis.config import RunConfig

BENCHMARK = dict(n_train=32, n_test=16, seed=0, palette="class")
BASE = RunConfig(slots=10, dim=32, n_intra=2, n_alt=2, n_ref=3, iterations=5000, seed=0,
                 batch_size=2, grad_clip=10.0, max_shift=16)
