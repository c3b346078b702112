"""Counter-based random streams for reproducible ensembles.

Every trajectory owns a 64-bit key.  The noise drawn at step ``k`` is a
pure function of ``(key, k)`` (SplitMix64 output mixing), so an ensemble
gives bitwise-identical results however it is split across chunks or
worker processes.
"""

import numpy as np

__all__ = ["counter_mix", "trajectory_keys", "NormalStream"]

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix64(z):
    # SplitMix64 finalizer, works on python ints and uint64 arrays
    if isinstance(z, int):
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK
        return z ^ (z >> 31)
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def counter_mix(base_seed: int, index: int) -> int:
    """Derive the 64-bit key of member ``index`` from ``base_seed``."""
    if base_seed < 0 or index < 0:
        raise ValueError("seed and index must be non-negative")
    z = _mix64((base_seed & _MASK) ^ 0x6A09E667F3BCC909)
    return _mix64((z + (index + 1) * 0x9E3779B97F4A7C15) & _MASK)


def trajectory_keys(base_seed: int, start: int, stop: int) -> np.ndarray:
    """Keys ``counter_mix(base_seed, i)`` for ``start <= i < stop`` as uint64."""
    if base_seed < 0 or start < 0:
        raise ValueError("seed and index must be non-negative")
    z = np.uint64(_mix64((base_seed & _MASK) ^ 0x6A09E667F3BCC909))
    idx = np.arange(start + 1, stop + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _mix64(z + idx * _GAMMA)


class NormalStream:
    """Pairs of standard normals indexed by (trajectory key, step).

    Two SplitMix64 outputs per step feed a Box-Muller transform.
    """

    def __init__(self, keys):
        self.keys = np.asarray(keys, dtype=np.uint64)

    def __len__(self):
        return len(self.keys)

    def pair(self, step: int):
        """Return ``(n1, n2)`` arrays for counter value ``step``."""
        c = np.uint64(2 * step + 1)
        with np.errstate(over="ignore"):
            a = _mix64(self.keys + c * _GAMMA)
            b = _mix64(self.keys + (c + np.uint64(1)) * _GAMMA)
        # 53-bit uniforms; u1 in (0, 1] keeps the log finite
        u1 = ((a >> np.uint64(11)).astype(np.float64) + 1.0) * (1.0 / 9007199254740992.0)
        u2 = (b >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        r = np.sqrt(-2.0 * np.log(u1))
        phi = 2.0 * np.pi * u2
        return r * np.cos(phi), r * np.sin(phi)
