"""Node-local dataset registry with tags and DataLoadingPlans.

The registry is the only gate between the wire and the data on disk: search
serves metadata, training loads through the loading plan, and raw values
never leave the node.
"""

from __future__ import annotations

import json
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

from ..errors import (
    DuplicateId,
    MalformedBlob,
    ParseError,
    UnknownColumn,
    UnknownDataset,
    UnmappedValue,
)
from ..mlcore.data import (
    load_folder_image_dataset,
    read_csv_table,
    table_to_tabular,
)
from ..protocol import DatasetMatch
from ..util import atomic_write_text

REGISTRY_FORMAT_VERSION = "1"

DATA_TYPES = ("tabular", "folder_image")


@dataclass(frozen=True)
class DataLoadingPlan:
    """Node-configured presentation layer: renames, value maps, selection.

    Value-map and selection names refer to post-rename columns. The plan
    changes how data is presented, never the files on disk.
    """

    plan_id: str
    rename_columns: Mapping[str, str] = field(default_factory=dict)
    value_maps: Mapping[str, Mapping[str, float]] = field(default_factory=dict)
    select_columns: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "rename_columns", dict(self.rename_columns))
        object.__setattr__(self, "value_maps",
                           {c: dict(m) for c, m in self.value_maps.items()})
        if self.select_columns is not None:
            object.__setattr__(self, "select_columns", tuple(self.select_columns))
        targets = list(self.rename_columns.values())
        if len(set(targets)) != len(targets):
            raise MalformedBlob("rename targets must be unique")

    def to_dict(self) -> dict:
        return {
            "plan_id": self.plan_id,
            "rename_columns": dict(self.rename_columns),
            "value_maps": {c: dict(m) for c, m in self.value_maps.items()},
            "select_columns": (None if self.select_columns is None
                               else list(self.select_columns)),
        }

    @classmethod
    def from_dict(cls, data) -> "DataLoadingPlan":
        try:
            select = data.get("select_columns")
            return cls(plan_id=data["plan_id"],
                       rename_columns=data.get("rename_columns", {}),
                       value_maps=data.get("value_maps", {}),
                       select_columns=None if select is None else tuple(select))
        except (KeyError, TypeError) as exc:
            raise MalformedBlob(f"bad loading plan: {exc}") from exc


def apply_loading_plan(columns: Sequence[str], rows: Sequence[Sequence[str]],
                       plan: DataLoadingPlan) -> tuple:
    """Rename, map values, then select; returns a new (columns, rows) table."""
    for old in plan.rename_columns:
        if old not in columns:
            raise UnknownColumn(f"rename source {old!r} not in {list(columns)}")
    renamed = [plan.rename_columns.get(c, c) for c in columns]
    if len(set(renamed)) != len(renamed):
        raise UnknownColumn("renaming collides with an existing column")
    for col in plan.value_maps:
        if col not in renamed:
            raise UnknownColumn(f"value map column {col!r} not in {renamed}")
    map_idx = {renamed.index(c): m for c, m in plan.value_maps.items()}
    out_rows = []
    for row in rows:
        new_row = list(row)
        for j, mapping in map_idx.items():
            raw = new_row[j]
            if raw not in mapping:
                raise UnmappedValue(
                    f"column {renamed[j]!r}: raw value {raw!r} has no mapping")
            new_row[j] = repr(float(mapping[raw]))
        out_rows.append(new_row)
    if plan.select_columns is not None:
        missing = [c for c in plan.select_columns if c not in renamed]
        if missing:
            raise UnknownColumn(f"select_columns: unknown columns {missing}")
        keep = [j for j, c in enumerate(renamed) if c in plan.select_columns]
        renamed = [renamed[j] for j in keep]
        out_rows = [[row[j] for j in keep] for row in out_rows]
    return renamed, out_rows


@dataclass(frozen=True)
class DatasetRecord:
    dataset_id: str
    display_name: str
    tags: tuple
    data_type: str
    path: str
    sample_count: int = 0
    column_summary: Optional[tuple] = None
    loading_plan_id: Optional[str] = None
    target_column: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "tags", tuple(self.tags))
        if not self.tags or not all(isinstance(t, str) and t for t in self.tags):
            raise MalformedBlob("tags must be a non-empty list of strings")
        if self.data_type not in DATA_TYPES:
            raise MalformedBlob(f"data_type must be one of {DATA_TYPES}")
        if self.column_summary is not None:
            object.__setattr__(self, "column_summary", tuple(self.column_summary))

    def to_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "display_name": self.display_name,
            "tags": list(self.tags),
            "data_type": self.data_type,
            "path": self.path,
            "sample_count": self.sample_count,
            "column_summary": (None if self.column_summary is None
                               else list(self.column_summary)),
            "loading_plan_id": self.loading_plan_id,
            "target_column": self.target_column,
        }

    @classmethod
    def from_dict(cls, data) -> "DatasetRecord":
        try:
            summary = data.get("column_summary")
            return cls(dataset_id=data["dataset_id"],
                       display_name=data["display_name"],
                       tags=tuple(data["tags"]),
                       data_type=data["data_type"],
                       path=data["path"],
                       sample_count=data.get("sample_count", 0),
                       column_summary=None if summary is None else tuple(summary),
                       loading_plan_id=data.get("loading_plan_id"),
                       target_column=data.get("target_column"))
        except (KeyError, TypeError) as exc:
            raise MalformedBlob(f"bad dataset record: {exc}") from exc


class DatasetRegistry:
    """Persistent metadata store; single structured-text file, atomic writes."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._datasets: dict = {}
        self._plans: dict = {}
        self._load()

    def _load(self) -> None:
        if not self.path.is_file():
            return
        try:
            doc = json.loads(self.path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise MalformedBlob(f"corrupt registry {self.path}: {exc}") from exc
        if doc.get("format_version") != REGISTRY_FORMAT_VERSION:
            raise MalformedBlob(f"unsupported registry version in {self.path}")
        self._datasets = {d["dataset_id"]: DatasetRecord.from_dict(d)
                          for d in doc.get("datasets", [])}
        self._plans = {p["plan_id"]: DataLoadingPlan.from_dict(p)
                       for p in doc.get("loading_plans", [])}

    def _persist(self) -> None:
        doc = {
            "format_version": REGISTRY_FORMAT_VERSION,
            "datasets": [d.to_dict() for _, d in sorted(self._datasets.items())],
            "loading_plans": [p.to_dict() for _, p in sorted(self._plans.items())],
        }
        atomic_write_text(self.path, json.dumps(doc, indent=2, sort_keys=True))

    # -- loading plans --

    def add_loading_plan(self, plan: DataLoadingPlan) -> str:
        with self._lock:
            if plan.plan_id in self._plans:
                raise DuplicateId(f"loading plan {plan.plan_id!r} already exists")
            self._plans[plan.plan_id] = plan
            self._persist()
        return plan.plan_id

    def get_loading_plan(self, plan_id: str) -> DataLoadingPlan:
        try:
            return self._plans[plan_id]
        except KeyError:
            raise UnknownDataset(f"no loading plan {plan_id!r}") from None

    # -- datasets --

    def register_dataset(self, display_name: str, tags: Sequence[str],
                         data_type: str, path: str,
                         dataset_id: Optional[str] = None,
                         target_column: Optional[str] = None,
                         loading_plan_id: Optional[str] = None) -> DatasetRecord:
        """Validate, load once to count samples, persist, return the record."""
        dataset_id = dataset_id or f"ds-{uuid.uuid4().hex[:12]}"
        with self._lock:
            if dataset_id in self._datasets:
                raise DuplicateId(f"dataset {dataset_id!r} already registered")
            record = DatasetRecord(dataset_id=dataset_id,
                                   display_name=display_name, tags=tuple(tags),
                                   data_type=data_type, path=str(path),
                                   target_column=target_column,
                                   loading_plan_id=loading_plan_id)
            loaded = self._load_presented(record)
            record = DatasetRecord(
                dataset_id=record.dataset_id, display_name=record.display_name,
                tags=record.tags, data_type=record.data_type, path=record.path,
                sample_count=len(loaded),
                column_summary=(tuple(loaded.column_names)
                                if record.data_type == "tabular" else None),
                loading_plan_id=loading_plan_id, target_column=target_column)
            self._datasets[dataset_id] = record
            self._persist()
        return record

    def delete_dataset(self, dataset_id: str) -> None:
        with self._lock:
            if dataset_id not in self._datasets:
                raise UnknownDataset(f"no dataset {dataset_id!r}")
            del self._datasets[dataset_id]
            self._persist()

    def get(self, dataset_id: str) -> DatasetRecord:
        try:
            return self._datasets[dataset_id]
        except KeyError:
            raise UnknownDataset(f"no dataset {dataset_id!r}") from None

    def list_datasets(self) -> list:
        return [self._datasets[k] for k in sorted(self._datasets)]

    def search(self, tags: Sequence[str]) -> list:
        """Datasets whose tag set contains every requested tag; metadata only."""
        requested = set(tags)
        matches = []
        for record in self.list_datasets():
            if requested.issubset(set(record.tags)):
                matches.append(DatasetMatch(
                    dataset_id=record.dataset_id,
                    display_name=record.display_name,
                    sample_count=record.sample_count,
                    column_summary=record.column_summary))
        return matches

    # -- data access (node-local only) --

    def load_presented(self, dataset_id: str):
        """Load through the loading plan; revalidates the stored sample count."""
        record = self.get(dataset_id)
        loaded = self._load_presented(record)
        if len(loaded) != record.sample_count:
            raise ParseError(
                f"dataset {dataset_id!r} changed on disk: registered "
                f"{record.sample_count} samples, loaded {len(loaded)}")
        return loaded

    def _load_presented(self, record: DatasetRecord):
        if record.data_type == "folder_image":
            return load_folder_image_dataset(record.path)
        columns, rows = read_csv_table(record.path)
        if record.loading_plan_id is not None:
            plan = self.get_loading_plan(record.loading_plan_id)
            columns, rows = apply_loading_plan(columns, rows, plan)
        if record.target_column is None:
            raise ParseError(
                f"tabular dataset {record.dataset_id!r} needs a target column")
        if record.target_column not in columns:
            raise UnknownColumn(
                f"target column {record.target_column!r} not in {columns}")
        return table_to_tabular(columns, rows, record.target_column)
