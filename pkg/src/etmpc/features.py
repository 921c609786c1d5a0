"""Feature vectors for the recomputation policy.

Raw features come from the system (current state, prediction error,
steps-since fraction, plus the battery's observed market terms). Each raw
component is squared and appended, the augmented vector is normalized by
frozen per-component statistics, and a constant bias of 1 closes the
vector. The bias is never normalized.
"""

import numpy as np

__all__ = [
    "RunningStats",
    "augment_raw",
    "build_features",
    "feature_dim",
]


def feature_dim(n_raw: int) -> int:
    """Length of the full feature vector: raws, squares, bias."""
    return 2 * n_raw + 1


def augment_raw(raw: np.ndarray) -> np.ndarray:
    """Raw features with their squares appended (no bias yet)."""
    raw = np.asarray(raw, dtype=float)
    return np.concatenate([raw, raw * raw])


def build_features(raw, mean, std) -> np.ndarray:
    """Normalized policy input: [(z − mean) / std, 1] with z = [raw, raw²]."""
    z = augment_raw(raw)
    out = np.empty(z.shape[0] + 1)
    out[:-1] = (z - mean) / std
    out[-1] = 1.0
    return out


class RunningStats:
    """Welford accumulator over augmented (raw + squares) vectors.

    A component that never varies during warm-up would freeze to std 0 and
    blow up the normalization, so degenerate components are floored to 1
    and pass through merely centered.
    """

    def __init__(self, n: int):
        self.count = 0
        self.mean = np.zeros(n)
        self._m2 = np.zeros(n)

    def update(self, z: np.ndarray) -> None:
        z = np.asarray(z, dtype=float)
        self.count += 1
        delta = z - self.mean
        self.mean += delta / self.count
        self._m2 += delta * (z - self.mean)

    def frozen(self) -> tuple[np.ndarray, np.ndarray]:
        """(mean, std) snapshot; callable any time, floors degenerate std."""
        if self.count < 2:
            return self.mean.copy(), np.ones_like(self.mean)
        std = np.sqrt(self._m2 / (self.count - 1))
        std[std < 1e-8] = 1.0
        return self.mean.copy(), std
