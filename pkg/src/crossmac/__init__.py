"""crossmac: discrete-event simulator for adaptive cross-layer wireless MAC protocols.

Simulates ad hoc 802.11-style networks under three MAC variants -- plain DCF,
DCF with a blind power-control rule, and an adaptive protocol that combines
non-overlapping contention-window ladders, collision-history prediction and
SINR-classified transmit-power control fed by an out-of-band control plane.
"""

__version__ = "0.1.0"

RNG_ALGORITHM = "numpy.PCG64+SeedSequence(master_seed,node,purpose)"
