"""Energy-minimal multi-cell MIMO computation offloading.

Joint optimization of uplink/downlink transmit covariances, backhaul
shares and cloud (plus edge) compute shares under per-user latency
deadlines, solved by successive convex approximation over strongly
convex surrogate subproblems.
"""

__version__ = "0.1.0"

from . import scenario, model, surrogate, subsolver, sca, scheduler, hybrid, netmimo, oracle

__all__ = [
    "scenario",
    "model",
    "surrogate",
    "subsolver",
    "sca",
    "scheduler",
    "hybrid",
    "netmimo",
    "oracle",
]
