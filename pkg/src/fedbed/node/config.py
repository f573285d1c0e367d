"""Node daemon configuration file handling."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from ..errors import ConfigError, MalformedMessage
from .executor import NodePolicy

DEFAULT_ADMIN_PORT = 14160


def _default_admin_port() -> int:
    raw = os.environ.get("FEDBED_NODE_ADMIN_PORT")
    if raw is None:
        return DEFAULT_ADMIN_PORT
    try:
        return int(raw)
    except ValueError:
        raise ConfigError("FEDBED_NODE_ADMIN_PORT must be an integer")


@dataclass(frozen=True)
class NodeConfig:
    node_id: str
    store_dir: str
    broker_host: str = "127.0.0.1"
    broker_ctrl_port: int = 14150
    broker_blob_port: int = 14151
    admin_port: Optional[int] = DEFAULT_ADMIN_PORT
    policy: NodePolicy = field(default_factory=NodePolicy)
    secagg_key_file: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "node_id": self.node_id,
            "store_dir": self.store_dir,
            "broker_host": self.broker_host,
            "broker_ctrl_port": self.broker_ctrl_port,
            "broker_blob_port": self.broker_blob_port,
            "admin_port": self.admin_port,
            "policy": self.policy.to_dict(),
            "secagg_key_file": self.secagg_key_file,
        }


def load_node_config(path) -> NodeConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read node config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"node config {path} is not valid JSON: {exc}") from exc
    try:
        return NodeConfig(
            node_id=doc["node_id"],
            store_dir=doc["store_dir"],
            broker_host=doc.get("broker_host", "127.0.0.1"),
            broker_ctrl_port=int(doc.get("broker_ctrl_port", 14150)),
            broker_blob_port=int(doc.get("broker_blob_port", 14151)),
            admin_port=doc.get("admin_port", _default_admin_port()),
            policy=NodePolicy.from_dict(doc.get("policy", {})),
            secagg_key_file=doc.get("secagg_key_file"),
        )
    except (KeyError, TypeError, ValueError, MalformedMessage) as exc:
        raise ConfigError(f"bad node config {path}: {exc}") from exc
