"""Training-image volumes and patch sampling for the field parameterisation."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DomainError, LayoutError


def synth_training_volume(dims, facies=(-1.0, 2.0), proportion=0.3, corr_len=(12.0, 3.0, 1.0), seed=0):
    """Two-facies volume from a thresholded anisotropic Gaussian random field.

    White noise is smoothed with a Gaussian kernel of per-axis width
    ``corr_len`` (in cells) and the top ``proportion`` quantile is assigned
    the high facies value ``facies[1]``; the rest get ``facies[0]``.  Long
    widths along x give channel-like bodies aligned with the flow.
    """
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise DomainError(f"invalid volume dims {dims}")
    if not 0.0 <= proportion <= 1.0:
        raise DomainError("facies proportion must lie in [0, 1]")
    low, high = facies
    if proportion == 0.0:
        return np.full(dims, float(low))
    if proportion == 1.0:
        return np.full(dims, float(high))
    rng = np.random.default_rng(seed)
    field = ndimage.gaussian_filter(rng.standard_normal(dims), sigma=corr_len, mode="wrap")
    threshold = np.quantile(field, 1.0 - proportion)
    return np.where(field > threshold, float(high), float(low))


def load_training_volume(path, facies=None):
    """Load a training image stored as ``.npy`` or a tensor container.

    Integer facies codes are mapped through ``facies`` (code -> lnK) when given.
    """
    from .io import read_tensor

    path = Path(path)
    vol = np.load(path) if path.suffix == ".npy" else read_tensor(path)
    if vol.ndim != 3:
        raise LayoutError(f"training volume must be 3-D, got shape {vol.shape}")
    if facies is not None:
        out = np.empty(vol.shape)
        codes = np.unique(vol)
        for code in codes:
            if code not in facies and int(code) not in facies:
                raise LayoutError(f"facies code {code} has no lnK value")
            out[vol == code] = facies.get(code, facies.get(int(code)))
        vol = out
    return np.asarray(vol, float)


def _draw(region, patch, count, rng):
    starts = [r - p + 1 for r, p in zip(region[1], patch)]
    if min(starts) < 1:
        raise DomainError(f"patch {patch} does not fit region of shape {region[1]}")
    out = np.empty((count,) + tuple(patch))
    for n in range(count):
        i, j, k = (rng.integers(0, s) for s in starts)
        k0 = region[0] + k
        out[n] = region[2][i:i + patch[0], j:j + patch[1], k0:k0 + patch[2]]
    return out


def extract_patches(volume, patch, n_train, n_test, split=0.8, seed=0):
    """Random patches from the top (train) and bottom (test) parts of ``volume``.

    The vertical axis (index 2, 0 = top) is split at ``round(split * nz)``;
    every patch lies wholly inside its region, so the two sets are disjoint.
    """
    volume = np.asarray(volume, float)
    patch = tuple(int(p) for p in patch)
    nz = volume.shape[2]
    cut = int(round(split * nz))
    rng = np.random.default_rng(seed)
    train_region = (0, volume.shape[:2] + (cut,), volume)
    train = _draw(train_region, patch, int(n_train), rng)
    if n_test:
        test_region = (cut, volume.shape[:2] + (nz - cut,), volume)
        test = _draw(test_region, patch, int(n_test), rng)
    else:
        test = np.empty((0,) + patch)
    return train, test
