"""The clinical-site daemon: dataset registry, approval ledger, task queue,
round executor, and the local admin API."""

from .registry import DatasetRecord, DataLoadingPlan, DatasetRegistry
from .approval import ApprovalLedger
from .tasks import NodeTask, TaskQueue
from .executor import NodePolicy, execute_train_task, ExecutionContext
from .config import NodeConfig, load_node_config
from .daemon import NodeDaemon
from .admin import AdminClient

__all__ = [
    "DatasetRecord", "DataLoadingPlan", "DatasetRegistry",
    "ApprovalLedger", "NodeTask", "TaskQueue",
    "NodePolicy", "execute_train_task", "ExecutionContext",
    "NodeConfig", "load_node_config", "NodeDaemon", "AdminClient",
]
