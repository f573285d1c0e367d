"""The network component: pub/sub control plane plus a content-addressed
parameter blob store. Researcher and nodes only ever talk to the broker."""

from .core import MessageBus, BlobStore, Subscription, validate_topic, topic_for_node, topic_for_researcher, TOPIC_ALL_NODES
from .client import BrokerClient, LocalBroker, LocalBrokerClient, TcpBrokerClient
from .service import BrokerService

__all__ = [
    "MessageBus", "BlobStore", "Subscription", "validate_topic",
    "topic_for_node", "topic_for_researcher", "TOPIC_ALL_NODES",
    "BrokerClient", "LocalBroker", "LocalBrokerClient", "TcpBrokerClient",
    "BrokerService",
]
