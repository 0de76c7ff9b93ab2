"""Structured trace log: the canonical record every metric is computed from.

One event per line when serialized (JSON Lines), fields always in the order
``t``, ``entity``, ``kind``, ``detail`` with detail keys sorted, so that two
runs of the same seeded scenario produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field


@dataclass(frozen=True)
class TraceEvent:
    t: int  # microseconds since simulation start
    entity: str
    kind: str
    detail: dict = field(default_factory=dict)

    def to_json(self) -> str:
        detail = {k: self.detail[k] for k in sorted(self.detail)}
        return json.dumps(
            {"t": self.t, "entity": self.entity, "kind": self.kind, "detail": detail},
            separators=(",", ":"),
            sort_keys=False,
        )


class Trace:
    """Append-only event log, ordered by (time, append order)."""

    def __init__(self):
        self.events: list[TraceEvent] = []

    def emit(self, t: int, entity: str, kind: str, **detail) -> TraceEvent:
        ev = TraceEvent(t=t, entity=entity, kind=kind, detail=detail)
        self.events.append(ev)
        return ev

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def filter(self, kind: str | None = None, entity: str | None = None) -> list[TraceEvent]:
        out = self.events
        if kind is not None:
            out = [e for e in out if e.kind == kind]
        if entity is not None:
            out = [e for e in out if e.entity == entity]
        return list(out)

    def to_jsonl(self) -> str:
        return "".join(ev.to_json() + "\n" for ev in self.events)

    def sha256(self) -> str:
        return hashlib.sha256(self.to_jsonl().encode("utf-8")).hexdigest()

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())


def read_jsonl(path) -> list[TraceEvent]:
    events = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            events.append(
                TraceEvent(t=obj["t"], entity=obj["entity"], kind=obj["kind"], detail=obj["detail"])
            )
    return events
