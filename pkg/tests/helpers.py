"""Synthetic sample sets shared by the training, CLI and acceptance tests."""

import numpy as np

from trendseg.data import SampleSet, assemble
from trendseg.synthetic import sawtooth_series


def sawtooth_samples(n_samples, T=20, N=1, noise=0.0, seed=0, T_in=None):
    """Exactly ``n_samples`` non-overlapping samples from the sawtooth generator."""
    T_in = T_in or T
    n_days = (n_samples + N) * T_in + T
    ss = assemble(sawtooth_series(n_days, T, noise=noise, seed=seed), T_in, T, N)
    return ss.subset(np.arange(n_samples))


def sections(samples: SampleSet, *sizes):
    """Consecutive chronological slices of the given sizes."""
    out, start = [], 0
    for n in sizes:
        out.append(samples.subset(np.arange(start, start + n)))
        start += n
    return out
