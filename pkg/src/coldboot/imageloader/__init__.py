"""Lazy image loading with record-and-prefetch and peer-to-peer block sourcing."""
from .loader import ContainerHandle, Fault, FetchMetrics, Node, Policy, start_container
from .trace import (DEFAULT_HOT_WINDOW_MS, AccessEvent, AccessTrace, HotSet, derive_hotset,
                    download_trace, read_trace, record_trace, upload_trace, write_trace)
from .tracker import PeerServer, RemotePeer, Tracker, TrackerClient, TrackerServer

__all__ = [
    "AccessEvent", "AccessTrace", "ContainerHandle", "DEFAULT_HOT_WINDOW_MS", "Fault",
    "FetchMetrics", "HotSet", "Node", "PeerServer", "Policy", "RemotePeer", "Tracker",
    "TrackerClient", "TrackerServer", "derive_hotset", "download_trace", "read_trace",
    "record_trace", "start_container", "upload_trace", "write_trace",
]
