"""Collector/detector pipeline: configuration, staging, wire format, services."""
from .collector import Collector, ProcessedWindow, collect_windows, run_collector
from .config import PipelineConfig
from .ledger import STAGES, ReductionLedger, reduction_report
from .service import Alert, DetectorService, DetectorSession, detect_bytes
from .training import TrainResult, evaluate_pipeline, label_map, split_labels, train_pipeline
from .transport import FileSink, StreamSink, TransportError

__all__ = [
    "Alert", "Collector", "DetectorService", "DetectorSession", "FileSink", "PipelineConfig",
    "ProcessedWindow", "ReductionLedger", "STAGES", "StreamSink", "TrainResult", "TransportError",
    "collect_windows", "detect_bytes", "evaluate_pipeline", "label_map", "reduction_report",
    "run_collector", "split_labels", "train_pipeline",
]
