"""The envelope: the unit that flows through pipes.

An envelope is either a payload value or a fault placeholder carrying
error provenance.  Faults propagate downstream instead of stopping the
run; each node they traverse bumps the hop counter.  Every *creation* of
a fault (never a propagation) emits exactly one ERROR log record.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any, Optional

from . import log

# error_class values used across the engine
USER_ERROR = "user_error"
TIMEOUT = "timeout"
IPC_ERROR = "ipc_error"
REMOTE_ERROR = "remote_error"


@dataclass(frozen=True)
class FaultInfo:
    """Provenance of a wrapped error.

    origin_piper and stage_index are fixed at creation; hops counts the
    nodes traversed since.  stage_index is -1 when the failure is not
    attributable to a chain stage (timeouts, transport failures).
    """

    origin_piper: str
    stage_index: int
    error_class: str
    message: str
    hops: int = 0


@dataclass(frozen=True)
class Envelope:
    """Payload or fault, plus the position of its originating input item.

    Exactly one of value/fault is meaningful: fault is None for payloads.
    item_index is preserved across every node an item's descendants
    traverse; sub_index is set only between a scatter and its gather.
    """

    item_index: int
    value: Any = None
    fault: Optional[FaultInfo] = None
    sub_index: Optional[int] = None

    @property
    def is_fault(self) -> bool:
        return self.fault is not None

    @property
    def kind(self) -> str:
        return "fault" if self.fault is not None else "payload"


def payload(value: Any, item_index: int, sub_index: int | None = None) -> Envelope:
    return Envelope(item_index=item_index, value=value, sub_index=sub_index)


def new_fault(
    origin_piper: str,
    stage_index: int,
    error_class: str,
    message: str,
    item_index: int,
    sub_index: int | None = None,
) -> Envelope:
    """Create a fresh fault envelope and emit its one ERROR record."""
    log.error(origin_piper, f"{error_class} at stage {stage_index} for item {item_index}: {message}")
    info = FaultInfo(origin_piper, stage_index, error_class, message, hops=0)
    return Envelope(item_index=item_index, fault=info, sub_index=sub_index)


def propagate(env: Envelope, item_index: int | None = None, sub_index: int | None = None) -> Envelope:
    """Pass an existing fault through one more node: hops+1, provenance untouched."""
    if env.fault is None:
        raise ValueError("propagate() requires a fault envelope")
    bumped = replace(env.fault, hops=env.fault.hops + 1)
    return Envelope(
        item_index=env.item_index if item_index is None else item_index,
        fault=bumped,
        sub_index=env.sub_index if sub_index is None else sub_index,
    )


# --- wire form (shared by the remote protocol and direct transports) -------

def to_wire(env: Envelope) -> dict:
    doc: dict[str, Any] = {"item_index": env.item_index, "kind": env.kind}
    if env.sub_index is not None:
        doc["sub_index"] = env.sub_index
    if env.fault is not None:
        f = env.fault
        doc["fault"] = {
            "origin_piper": f.origin_piper,
            "stage_index": f.stage_index,
            "error_class": f.error_class,
            "message": f.message,
            "hops": f.hops,
        }
    else:
        doc["value"] = env.value
    return doc


def from_wire(doc: dict) -> Envelope:
    try:
        item_index = int(doc["item_index"])
        sub_index = doc.get("sub_index")
        if doc["kind"] == "fault":
            f = doc["fault"]
            fault = FaultInfo(
                origin_piper=str(f["origin_piper"]),
                stage_index=int(f["stage_index"]),
                error_class=str(f["error_class"]),
                message=str(f["message"]),
                hops=int(f["hops"]),
            )
            return Envelope(item_index=item_index, fault=fault, sub_index=sub_index)
        return Envelope(item_index=item_index, value=doc.get("value"), sub_index=sub_index)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed envelope document: {exc}") from exc
