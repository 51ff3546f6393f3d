"""Structured event log: one JSON object per line, byte-stable per seed."""

from __future__ import annotations

import json
from typing import Any, IO


class EventLog:
    """Append-only record list with deterministic JSON-lines serialization.

    Every record carries at least {"t", "kind"}; records are kept in emit
    order, which under a fixed seed is the deterministic event order of the
    simulation.  Keys are sorted at serialization time so identical runs
    produce identical bytes.
    """

    def __init__(self, sink: IO[str] | None = None):
        self.records: list[dict[str, Any]] = []
        self._sink = sink

    def emit(self, t: float, kind: str, **fields: Any) -> dict[str, Any]:
        record = {"t": t, "kind": kind}
        record.update(fields)
        self.records.append(record)
        if self._sink is not None:
            self._sink.write(serialize_record(record) + "\n")
        return record

    def lines(self) -> list[str]:
        return [serialize_record(r) for r in self.records]

    def dump(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for record in self.records:
                fh.write(serialize_record(record) + "\n")

    def of_kind(self, kind: str) -> list[dict[str, Any]]:
        return [r for r in self.records if r["kind"] == kind]


def serialize_record(record: dict[str, Any]) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def load_records(path: str) -> list[dict[str, Any]]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records
