"""Self-contained tabular learning with forests of relaxed oblivious decision trees."""

from .autodiff import Tape, Tensor, backward, finite_difference_check
from .checkpoint import load_checkpoint, save_checkpoint
from .config import DerivedShapes, DofenConfig, derive_shapes
from .data import (
    ColumnSchema,
    Preprocessor,
    TableDataset,
    batches,
    fit_transform,
    load_csv,
    split,
)
from .model import (
    DofenModel,
    TableSpec,
    build_model,
    forward,
    forward_loss,
    predict,
    predict_dataset,
)
from .precision import precision, set_precision
from .rng import RngStream
from .training import TrainConfig, TrainReport, adamw_step, evaluate, train

__version__ = "0.1.0"
