from .pool import (
    CallRecord,
    FunctionConfig,
    Worker,
    WorkerPool,
    WorkerState,
    autoscale_workers,
    target_workers,
)
from .runtime import ANOMALY_TOPIC, FunctionRuntime, process_user_queue
from .window import (
    AnomalyPredicate,
    AnomalyVerdict,
    SlidingWindow,
    deviation_exceeds,
    moving_average,
    verdict_for,
)

__all__ = [
    "ANOMALY_TOPIC",
    "AnomalyPredicate",
    "AnomalyVerdict",
    "CallRecord",
    "FunctionConfig",
    "FunctionRuntime",
    "SlidingWindow",
    "Worker",
    "WorkerPool",
    "WorkerState",
    "autoscale_workers",
    "deviation_exceeds",
    "moving_average",
    "process_user_queue",
    "target_workers",
    "verdict_for",
]
