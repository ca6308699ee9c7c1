"""Trust interface between the chained mode and an external security policy.

The chained mode exposes a per-neighbor TrustVal; an external mechanism (an
IDS, or the proof-of-concept policy implemented here) sets the bounds and the
trigger.  Frames from a neighbor whose TrustVal sits below the trigger are
dropped before any decode attempt.  The proof-of-concept policy: first
successful reception pins TrustVal to the maximum, afterwards every decode
outcome moves it by a fixed step, clamped to the bounds.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class TrustPolicy:
    trust_min: int = 0
    trust_max: int = 100
    trust_trig: int = 50
    step: int = 10

    def __post_init__(self):
        if not self.trust_min <= self.trust_trig <= self.trust_max:
            raise ValueError("require trust_min <= trust_trig <= trust_max")


DEFAULT_POLICY = TrustPolicy()


def record_decode(entry, success: bool, policy: TrustPolicy = DEFAULT_POLICY) -> int:
    """Apply one decode outcome to a neighbor's TrustVal and return it."""
    if success and not entry.heard_once:
        entry.heard_once = True
        entry.trust_val = policy.trust_max
        return entry.trust_val
    delta = policy.step if success else -policy.step
    entry.trust_val = max(policy.trust_min,
                          min(policy.trust_max, entry.trust_val + delta))
    return entry.trust_val


def is_trusted(entry, policy: TrustPolicy = DEFAULT_POLICY) -> bool:
    """Drop iff strictly below the trigger; the boundary itself is trusted."""
    return entry.trust_val >= policy.trust_trig
