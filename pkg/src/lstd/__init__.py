"""Online forecasting with long/short-term latent disentanglement."""

from .datagen import GenerativeConfig, SyntheticDataset, export_dataset, generate_series, import_dataset
from .evaluation import IdentifiabilityReport, block_r2, identifiability_report, mcc
from .losses import LossBreakdown, LossWeights, lstd_loss
from .model import LSTDModel, ModelConfig, load_checkpoint, save_checkpoint
from .online import LSTDForecaster, MetricsReport, OnlineMLP, Persistence, run

__all__ = [
    "GenerativeConfig",
    "SyntheticDataset",
    "export_dataset",
    "generate_series",
    "import_dataset",
    "IdentifiabilityReport",
    "block_r2",
    "identifiability_report",
    "mcc",
    "LossBreakdown",
    "LossWeights",
    "lstd_loss",
    "LSTDModel",
    "ModelConfig",
    "load_checkpoint",
    "save_checkpoint",
    "LSTDForecaster",
    "MetricsReport",
    "OnlineMLP",
    "Persistence",
    "run",
]
