"""Joint optimization of RF beacon placement and a neural location estimator."""

from .beacon_layer import Placement, RegSchedule, TemperatureSchedule
from .environment import PropagationParams
from .evaluation import EvalConfig, EvalReport
from .geometry import MapSpec, load_map
from .net import NetConfig
from .training import TrainConfig, train_inference_only, train_joint

__version__ = "0.1.0"
