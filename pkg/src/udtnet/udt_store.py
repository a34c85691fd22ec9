"""User digital twins over a two-tier record store.

The network-wide tier is an append-only log of every record ingested. A user
digital twin (UDT) is a per-user view materialized from that log when the
twin is established; afterwards each ingest for that user is written to both
tiers.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import numbers
import threading
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Optional, Union

from .errors import SchemaError, StateError, ValidationError

log = logging.getLogger(__name__)

VALUE_KINDS = ("scalar", "text", "timestamp")
UPDATE_MECHANISMS = ("static", "per_run", "per_frame")

Value = Union[float, str]


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    value_kind: str = "scalar"
    update_mechanism: str = "per_run"
    parent: Optional[str] = None

    def __post_init__(self):
        if not self.name or not self.name.isidentifier():
            raise SchemaError(f"attribute name {self.name!r} is not an identifier")
        if self.value_kind not in VALUE_KINDS:
            raise SchemaError(f"attribute {self.name!r}: unknown value kind {self.value_kind!r}")
        if self.update_mechanism not in UPDATE_MECHANISMS:
            raise SchemaError(f"attribute {self.name!r}: unknown update mechanism {self.update_mechanism!r}")


@dataclass(frozen=True)
class UdtSchema:
    attributes: tuple[AttributeSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(self.attributes))
        self._by_name  # validate eagerly

    @cached_property
    def _by_name(self) -> dict[str, AttributeSpec]:
        return {a.name: a for a in self.attributes}

    @property
    def names(self) -> list[str]:
        return [a.name for a in self.attributes]

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def __getitem__(self, name: str) -> AttributeSpec:
        return self._by_name[name]

    @property
    def root(self) -> AttributeSpec:
        return next(a for a in self.attributes if a.parent is None)

    def children(self, name: Optional[str]) -> list[AttributeSpec]:
        return [a for a in self.attributes if a.parent == name]

    def depth(self) -> int:
        def d(a: AttributeSpec) -> int:
            kids = self.children(a.name)
            return 1 + (max(d(k) for k in kids) if kids else 0)
        return d(self.root)

    def outline(self) -> str:
        """Indented text outline, one attribute per line, two spaces per level."""
        lines = []

        def walk(a: AttributeSpec, level: int):
            lines.append(f"{'  ' * level}{a.name} {a.value_kind} {a.update_mechanism}")
            for k in self.children(a.name):
                walk(k, level + 1)

        walk(self.root, 0)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_outline(cls, text: str) -> "UdtSchema":
        specs: list[AttributeSpec] = []
        stack: list[tuple[int, str]] = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            indent = len(line) - len(line.lstrip(" "))
            if indent % 2:
                raise SchemaError(f"line {lineno}: indentation must be a multiple of two spaces")
            level = indent // 2
            parts = line.split()
            if len(parts) != 3:
                raise SchemaError(f"line {lineno}: expected 'name kind mechanism'")
            while stack and stack[-1][0] >= level:
                stack.pop()
            if level and (not stack or stack[-1][0] != level - 1):
                raise SchemaError(f"line {lineno}: indentation skips a level")
            parent = stack[-1][1] if stack else None
            specs.append(AttributeSpec(parts[0], parts[1], parts[2], parent))
            stack.append((level, parts[0]))
        return define_schema(specs)


def define_schema(specs: Iterable[AttributeSpec]) -> UdtSchema:
    """Validate attribute specs into a single-rooted tree schema."""
    specs = list(specs)
    if not specs:
        raise SchemaError("schema needs at least one attribute")
    names: dict[str, AttributeSpec] = {}
    for s in specs:
        if s.name in names:
            raise SchemaError(f"duplicate attribute name {s.name!r}")
        names[s.name] = s
    for s in sorted(specs, key=lambda a: a.name):
        if s.parent is not None and s.parent not in names:
            raise SchemaError(f"attribute {s.name!r} has dangling parent {s.parent!r}")
    for s in sorted(specs, key=lambda a: a.name):
        seen = {s.name}
        p = s.parent
        while p is not None:
            if p in seen:
                raise SchemaError(f"attribute hierarchy has a cycle through {s.name!r}")
            seen.add(p)
            p = names[p].parent
    roots = sorted(s.name for s in specs if s.parent is None)
    if len(roots) != 1:
        raise SchemaError(f"schema must have exactly one root attribute, found {roots}")
    return UdtSchema(tuple(specs))


def default_mar_schema() -> UdtSchema:
    """device_category -> user_id -> {collection_frequency, mean_vchr, timestamp}."""
    return define_schema([
        AttributeSpec("device_category", "text", "static"),
        AttributeSpec("user_id", "text", "static", parent="device_category"),
        AttributeSpec("collection_frequency", "scalar", "per_run", parent="user_id"),
        AttributeSpec("mean_vchr", "scalar", "per_run", parent="user_id"),
        AttributeSpec("timestamp", "timestamp", "per_run", parent="user_id"),
    ])


@dataclass(frozen=True)
class UdtRecord:
    user_id: str
    timestamp: float
    values: Mapping[str, Value]

    def project(self, attributes: Optional[Iterable[str]]) -> "UdtRecord":
        if attributes is None:
            return self
        keep = set(attributes)
        return UdtRecord(self.user_id, self.timestamp, {k: v for k, v in self.values.items() if k in keep})


def validate_record(schema: UdtSchema, record: UdtRecord) -> None:
    if not isinstance(record.timestamp, (int, float)) or not math.isfinite(record.timestamp):
        raise ValidationError(f"record timestamp must be finite, got {record.timestamp!r}")
    if "user_id" in record.values and record.values["user_id"] != record.user_id:
        raise ValidationError("user_id attribute disagrees with the record's user_id")
    for key, value in record.values.items():
        if key not in schema:
            raise ValidationError(f"unknown attribute {key!r}")
        kind = schema[key].value_kind
        if kind == "text":
            if not isinstance(value, str):
                raise ValidationError(f"attribute {key!r} expects text, got {type(value).__name__}")
        else:
            if isinstance(value, bool) or not isinstance(value, numbers.Real):
                raise ValidationError(f"attribute {key!r} expects a {kind}, got {type(value).__name__}")
            if not math.isfinite(value):
                raise ValidationError(f"attribute {key!r} must be finite")


@dataclass
class Udt:
    """An established user digital twin: its schema and the user's records."""

    user_id: str
    schema: UdtSchema
    records: list[UdtRecord] = field(default_factory=list)

    def view(self) -> list[UdtRecord]:
        """Records projected onto this twin's schema."""
        return [r.project(self.schema.names) for r in self.records]


class TwoTierStore:
    """Network-wide append-only log plus per-user UDT views.

    Writes are serialized through one lock; reads take a snapshot of the list
    under the same lock, so readers never observe a half-applied ingest.
    """

    def __init__(self, schema: Optional[UdtSchema] = None):
        self.schema = schema or default_mar_schema()
        self._global: list[UdtRecord] = []
        self._udts: dict[str, Udt] = {}
        self._static_seen: dict[tuple[str, str], Value] = {}
        self._lock = threading.RLock()

    @property
    def global_tier(self) -> list[UdtRecord]:
        with self._lock:
            return list(self._global)

    @property
    def udt_tier(self) -> dict[str, Udt]:
        with self._lock:
            return dict(self._udts)

    def udt(self, user_id: str) -> Udt:
        with self._lock:
            try:
                return self._udts[user_id]
            except KeyError:
                raise StateError(f"no UDT established for user {user_id!r}") from None

    def ingest(self, record: UdtRecord) -> int:
        """Append a record; returns the new size of the global tier."""
        validate_record(self.schema, record)
        with self._lock:
            for key, value in record.values.items():
                if self.schema[key].update_mechanism != "static":
                    continue
                prev = self._static_seen.setdefault((record.user_id, key), value)
                if prev != value:
                    log.warning("static attribute %r of user %r changed from %r to %r",
                                key, record.user_id, prev, value)
            self._global.append(record)
            twin = self._udts.get(record.user_id)
            if twin is not None:
                twin.records.append(record)
            return len(self._global)

    def establish_udt(self, user_id: str, schema: Optional[UdtSchema] = None) -> Udt:
        schema = schema or self.schema
        missing = [n for n in schema.names if n not in self.schema]
        if missing:
            raise SchemaError(f"UDT schema uses attributes unknown to the store: {missing}")
        with self._lock:
            if user_id in self._udts:
                raise StateError(f"UDT for user {user_id!r} is already established")
            twin = Udt(user_id, schema, [r for r in self._global if r.user_id == user_id])
            self._udts[user_id] = twin
            return twin

    def drop_udt(self, user_id: str) -> None:
        with self._lock:
            if self._udts.pop(user_id, None) is None:
                raise StateError(f"no UDT established for user {user_id!r}")

    def query(self, user_filter: Optional[Iterable[str]] = None,
              attribute_filter: Optional[Iterable[str]] = None) -> list[UdtRecord]:
        """Records in ingestion order, optionally filtered by user and projected."""
        attrs = None if attribute_filter is None else list(attribute_filter)
        for a in attrs or ():
            if a not in self.schema:
                raise ValidationError(f"unknown attribute {a!r}")
        users = None if user_filter is None else set(user_filter)
        with self._lock:
            recs = list(self._global)
        return [r.project(attrs) for r in recs if users is None or r.user_id in users]

    # -- snapshots -------------------------------------------------------

    @staticmethod
    def _long_rows(records: Iterable[UdtRecord]) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["user_id", "timestamp", "attr", "value"])
        for r in records:
            for k, v in r.values.items():
                w.writerow([r.user_id, repr(float(r.timestamp)), k, v if isinstance(v, str) else repr(float(v))])
        return buf.getvalue()

    def save_snapshot(self, directory) -> list[Path]:
        """Write ``schema.txt``, ``global_tier.csv`` and ``udt_tier.csv``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        with self._lock:
            glob = list(self._global)
            udt_recs = [r for u in sorted(self._udts) for r in self._udts[u].records]
        paths = [d / "schema.txt", d / "global_tier.csv", d / "udt_tier.csv"]
        paths[0].write_text(self.schema.outline(), encoding="utf-8", newline="\n")
        paths[1].write_text(self._long_rows(glob), encoding="utf-8", newline="\n")
        paths[2].write_text(self._long_rows(udt_recs), encoding="utf-8", newline="\n")
        return paths

    @classmethod
    def load_snapshot(cls, directory) -> "TwoTierStore":
        d = Path(directory)
        store = cls(UdtSchema.from_outline((d / "schema.txt").read_text(encoding="utf-8")))
        for rec in _read_long(store.schema, (d / "global_tier.csv").read_text(encoding="utf-8")):
            store.ingest(rec)
        udt_path = d / "udt_tier.csv"
        if udt_path.exists():
            users = []
            for rec in _read_long(store.schema, udt_path.read_text(encoding="utf-8")):
                if rec.user_id not in users:
                    users.append(rec.user_id)
            for u in users:
                store.establish_udt(u)
        return store


def _read_long(schema: UdtSchema, text: str) -> list[UdtRecord]:
    """Regroup long-format rows; a record ends when (user, timestamp) changes or an attribute repeats."""
    reader = csv.reader(io.StringIO(text))
    if next(reader, None) != ["user_id", "timestamp", "attr", "value"]:
        raise ValidationError("snapshot header must be user_id,timestamp,attr,value")
    out: list[UdtRecord] = []
    cur_key, cur_vals = None, {}
    for rec in reader:
        if not rec:
            continue
        user, ts, attr, raw = rec
        key = (user, float(ts))
        if cur_key is not None and (key != cur_key or attr in cur_vals):
            out.append(UdtRecord(cur_key[0], cur_key[1], cur_vals))
            cur_vals = {}
        cur_key = key
        if attr not in schema:
            raise ValidationError(f"unknown attribute {attr!r} in snapshot")
        cur_vals[attr] = raw if schema[attr].value_kind == "text" else float(raw)
    if cur_key is not None:
        out.append(UdtRecord(cur_key[0], cur_key[1], cur_vals))
    return out


def ingest(store: TwoTierStore, record: UdtRecord) -> int:
    return store.ingest(record)


def establish_udt(store: TwoTierStore, user_id: str, schema: Optional[UdtSchema] = None) -> Udt:
    return store.establish_udt(user_id, schema)


def query(store: TwoTierStore, user_filter: Optional[Iterable[str]] = None,
          attribute_filter: Optional[Iterable[str]] = None) -> list[UdtRecord]:
    return store.query(user_filter, attribute_filter)
