from __future__ import annotations

import enum
from dataclasses import dataclass

from .engine import SimTime
from .flowmon import FlowKey

BROADCAST = -1


class FrameKind(enum.Enum):
    BSM = "BSM"
    DATA = "DATA"
    AODV_RREQ = "AODV_RREQ"
    AODV_RREP = "AODV_RREP"
    AODV_RERR = "AODV_RERR"


@dataclass(slots=True, eq=False)
class Frame:
    src: int
    dst: int
    kind: FrameKind
    payload_bytes: int
    seq: int
    created_at: SimTime
    flow: FlowKey | None = None
    meta: dict | None = None

    def __post_init__(self) -> None:
        if self.payload_bytes <= 0:
            raise ValueError("frame payload must be positive")
        if self.kind is FrameKind.BSM and self.dst != BROADCAST:
            raise ValueError("BSM frames are broadcast")
