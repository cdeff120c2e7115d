"""Per-ID LSTM autoencoder intrusion detection for CAN traffic, with a
payload signal classifier, an attack generator and an evaluation bench."""

from .errors import CanditoError
from .trace import CanFrame, Trace, parse_trace, write_trace, split_by_id
from .signals import BitRange, SignalLayout, SignalMap, analyze_trace
from .lstm_ae import ModelBundle, TrainConfig, train, load_model, save_model
from .detector import calibrate_threshold, detect, nearest_rank
from .evalbench import ConfusionCounts, EvalReport, metrics

__version__ = "0.1.0"
