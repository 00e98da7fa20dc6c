"""Step-event records shared by the simulator, reward layer, and loggers."""

from __future__ import annotations

from dataclasses import dataclass

# Transmission-attempt outcomes.
DELIVERED = "delivered_to_sink"
RELAYED = "relayed_ok"
LOOP_RETURN = "loop_return"
HOP_EXPIRED = "hop_expired"
TIME_EXPIRED = "time_expired"
RECEIVER_OFFLINE = "receiver_offline"
QUEUE_OVERFLOW = "queue_overflow"
# Attempt aborted because the sender's own store ran dry mid-transmission.
TRANSMITTER_DEPLETED = "transmitter_depleted"
# Non-transmission decision outcomes.
GATED = "gated_by_threshold"
IDLE = "idle"

SUCCESS_OUTCOMES = frozenset({DELIVERED, RELAYED})
FAILURE_OUTCOMES = frozenset({LOOP_RETURN, HOP_EXPIRED, TIME_EXPIRED,
                              RECEIVER_OFFLINE, QUEUE_OVERFLOW})
TRANSMISSION_OUTCOMES = SUCCESS_OUTCOMES | FAILURE_OUTCOMES | {TRANSMITTER_DEPLETED}
ALL_OUTCOMES = TRANSMISSION_OUTCOMES | {GATED, IDLE}


@dataclass
class StepEvent:
    """Resolution of one decision epoch or transmission attempt."""

    t: float
    node: int
    outcome: str
    dest: int | None = None
    packet_id: int | None = None
    size_bits: int = 0
    k_after: int = 0  # receiver queue length counting the arriving packet
    to_sink: bool = False
    hops: int = 0
    tau: float = 0.0

    def __post_init__(self):
        if self.outcome not in ALL_OUTCOMES:
            raise ValueError(f"unknown outcome {self.outcome!r}")
