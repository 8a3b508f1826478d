"""Keyed counter-based random streams.

Every draw in the library is tied to an :class:`RngStreamKey` so that results
never depend on scheduling or worker count.  The same key always reproduces
the same increment sequence, and keys that differ in any index yield
statistically independent streams (Philox is a keyed, counter-based
generator; the key is derived by hashing the four indices through
``numpy.random.SeedSequence``).

Index conventions used by the rest of the package:

* ``trial_index``    - one closed-loop trial (or one standalone estimate).
* ``decision_index`` - 0 is reserved for the plant noise of a trial;
  the batch generated for the d-th control decision uses ``1 + d``.
* ``rollout_index``  - stream lane.  Single-rollout calls may use any value;
  a batch of rollouts draws all of its increments step-major from one lane
  (lane 0 unless two batches share a decision).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

PLANT_DECISION = 0  # decision_index reserved for the true-system noise


@dataclass(frozen=True)
class RngStreamKey:
    """Identifies one independent random stream."""

    master_seed: int
    trial_index: int = 0
    decision_index: int = 0
    rollout_index: int = 0

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(
            entropy=self.master_seed,
            spawn_key=(self.trial_index, self.decision_index, self.rollout_index),
        )
        return np.random.Generator(np.random.Philox(seq))

    def replace(self, **changes) -> "RngStreamKey":
        return replace(self, **changes)
