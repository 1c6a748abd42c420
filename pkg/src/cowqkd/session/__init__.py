"""Protocol state machines for both endpoints and their schedulers."""
from .actors import RECV, Alice, Bob, Halt, Send
from .calibration import (AlignmentError, InsufficientCounts, ScanError, ScanRefused, ScanResult, TuningError,
                          align_offsets, fit_fringe, tune_window, wavelength_scan)
from .runner import QueueTransport, SocketTransport, drive, run_endpoint, run_inproc, run_threaded
from .state import (ActorResult, BlockRecord, Phase, SessionConfig, SessionState, SiftedBlock, Verdict,
                    WindowRecord)
from .visibility import VisibilityEstimate, classify_positions, estimate_visibility, visibility_from_ratio

__all__ = [
    "RECV", "Alice", "Bob", "Halt", "Send",
    "AlignmentError", "InsufficientCounts", "ScanError", "ScanRefused", "ScanResult", "TuningError",
    "align_offsets", "fit_fringe", "tune_window", "wavelength_scan",
    "QueueTransport", "SocketTransport", "drive", "run_endpoint", "run_inproc", "run_threaded",
    "ActorResult", "BlockRecord", "Phase", "SessionConfig", "SessionState", "SiftedBlock", "Verdict",
    "WindowRecord",
    "VisibilityEstimate", "classify_positions", "estimate_visibility", "visibility_from_ratio",
]
