"""MAC frame definitions and fixed control-frame sizes."""

from __future__ import annotations

from dataclasses import dataclass

DATA = "DATA"
ACK = "ACK"
RTS = "RTS"
CTS = "CTS"
GCP_REPORT = "GCP_REPORT"

BROADCAST = -1

# Fixed control-frame body sizes in bytes (802.11-shaped).
ACK_BYTES = 14
CTS_BYTES = 14
RTS_BYTES = 20


@dataclass(slots=True)
class Frame:
    """One MAC transmission unit.

    src/dst are per-hop MAC addresses; origin/final_dst carry the end-to-end
    endpoints for routed DATA frames (equal to src/dst on single-hop traffic).
    """

    kind: str
    src: int
    dst: int
    seq: int
    payload_bytes: int = 0
    tx_power_dbm: float = 0.0
    created_at: int = 0
    origin: int = -1
    final_dst: int = -1
    retry: bool = False
    duration_ns: int = 0  # RTS/CTS medium-reservation advertisement

    def __post_init__(self) -> None:
        if self.origin < 0:
            self.origin = self.src
        if self.final_dst < 0:
            self.final_dst = self.dst
