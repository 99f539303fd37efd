"""Per-episode record shared by both agents."""

from __future__ import annotations

from dataclasses import dataclass

from .env import Policy, Trajectory


@dataclass(frozen=True)
class EpisodeRecord:
    t: int
    z: int
    o: int | None
    uncertainty: float
    policy0: Policy
    policy1: Policy
    traj0: Trajectory
    traj1: Trajectory
    # Z-independent ||delta phi||^2_{Sigma_{t-1}^{-1}}; None for agents without it
    potential: float | None = None
    regret_increment: float | None = None

    def to_json_dict(self) -> dict:
        out = {"t": self.t, "Z": self.z}
        if self.z:
            out["queried_o"] = self.o
        out["uncertainty"] = self.uncertainty
        out["regret_increment"] = self.regret_increment
        out["policy_hashes"] = [self.policy0.digest(), self.policy1.digest()]
        return out
