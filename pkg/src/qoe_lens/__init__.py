"""qoe-lens: video-call QoE metric estimation from encrypted packet traces."""

__version__ = "0.1.0"

from .trace_ingest import PacketRecord, RtpFields, SessionMeta, ConditionKind
from .featurize import SlotFeatures, SlotKey
from .ground_truth import CaptureEvent, Rating, SlotLabels
from .forest import ForestModel, Hyperparams

__all__ = [
    "__version__",
    "PacketRecord", "RtpFields", "SessionMeta", "ConditionKind",
    "SlotFeatures", "SlotKey",
    "CaptureEvent", "Rating", "SlotLabels",
    "ForestModel", "Hyperparams",
]
