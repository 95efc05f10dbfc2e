"""Summation-order policies.

Floating-point addition is not associative, so the order in which a
reduction accumulates its terms changes the rounded result. GPU-style
non-determinism is emulated here by permuting that order per call:

* fixed order — the canonical sequential order (channel-major, then
  kernel row, then kernel column). Bit-reproducible.
* shuffled order — every reduction draws a fresh permutation from a
  per-policy entropy stream. The stream is seeded from OS entropy, NOT
  from the experiment seed, so two runs with identical seeds still
  diverge; the root entropy is recorded (hex) so a run can be replayed.
"""

from __future__ import annotations

import numpy as np


class FixedOrder:
    """Canonical sequential accumulation; permutation() returns None."""

    name = "fixed"
    entropy_ref = "fixed"

    def permutation(self, n: int):
        return None

    def __repr__(self):
        return "FixedOrder()"


class ShuffledOrder:
    """Per-call random permutations from a recorded entropy stream."""

    name = "shuffled"

    def __init__(self, entropy: int | None = None):
        if entropy is None:
            entropy = np.random.SeedSequence().entropy  # OS entropy
        self.entropy = int(entropy)
        self._rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.entropy))
        )

    @property
    def entropy_ref(self) -> str:
        return f"{self.entropy:x}"

    def permutation(self, n: int) -> np.ndarray:
        return self._rng.permutation(n)

    def __repr__(self):
        return f"ShuffledOrder(entropy={self.entropy:#x})"


def make_policy(name: str, entropy_ref: str | None = None):
    """Build a policy by name; `entropy_ref` replays a recorded stream."""
    if name == "fixed":
        return FixedOrder()
    if name == "shuffled":
        entropy = int(entropy_ref, 16) if entropy_ref else None
        return ShuffledOrder(entropy)
    raise ValueError(f"unknown summation policy {name!r}; use 'fixed' or 'shuffled'")
