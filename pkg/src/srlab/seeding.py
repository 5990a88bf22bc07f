"""Deterministic seed derivation.

Per-sample sub-seeds come from a splitmix64-style mixer applied to
(base_seed, index), so results never depend on batch boundaries, thread
counts, or evaluation order.
"""

from __future__ import annotations

_MASK = (1 << 64) - 1


def splitmix64(state):
    """One splitmix64 output for a 64-bit state."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def mix_seed(base_seed, index):
    """Sub-seed for item `index` under `base_seed`; stable across runs."""
    return splitmix64((int(base_seed) & _MASK) ^ splitmix64(int(index) & _MASK))
