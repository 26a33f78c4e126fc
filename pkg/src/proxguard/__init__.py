"""Privacy-preserving proximity detection with an untrusted location server.

Users report their position only at the resolution of a personal spatial
granularity (a grid cell), encrypted or hashed under per-interval keys the
server never learns.  Two request protocols are provided: one that reveals the
buddy's reported cell to the requester, and one that answers only the boolean
"is any of these cells yours" via a commutative-encryption set membership test.
"""

from .granularity import (
    DomainError,
    GranuleIndexError,
    GridGranularity,
    Point,
    Semantics,
    candidate_bound,
    covered_fraction,
    max_dist,
    max_travel_time,
    min_dist,
    proximity_candidates,
)
from .protocol import PrivacyProfile, ProximityVerdict, UpdateSchedule, VelocityGuard
from .simulator import ScenarioConfig, SimProtocol, run_scenario

__all__ = [
    "DomainError",
    "GranuleIndexError",
    "GridGranularity",
    "Point",
    "PrivacyProfile",
    "ProximityVerdict",
    "ScenarioConfig",
    "Semantics",
    "SimProtocol",
    "UpdateSchedule",
    "VelocityGuard",
    "candidate_bound",
    "covered_fraction",
    "max_dist",
    "max_travel_time",
    "min_dist",
    "proximity_candidates",
    "run_scenario",
]

__version__ = "0.1.0"
