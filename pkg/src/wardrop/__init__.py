"""Traffic assignment and informational-poisoning attacks on congestion games.

Subpackages cover the road-network model (``network``), latency families
(``latency``), equilibrium solvers (``equilibrium``), the attacker's
parameterization and utility (``poisoning``), equilibrium sensitivity and
gradient oracles (``sensitivity``), the attacker's learning loops
(``learning``), and the command-line harness (``cli``).
"""

from . import cli, equilibrium, latency, learning, network, poisoning, sensitivity

__all__ = [
    "network",
    "latency",
    "equilibrium",
    "poisoning",
    "sensitivity",
    "learning",
    "cli",
]

__version__ = "0.1.0"
