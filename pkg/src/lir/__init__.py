"""Out-of-distribution detection from intermediate-layer energies.

Per-layer free-energy scores, best-hidden-layer analysis, energy-vector
aggregation detectors (Mahalanobis / KNN / VAE), hidden-layer energy
regularization for training, and AUROC / FPR@TPR95 evaluation.
"""

from ._binio import FileFormatError
from .energy import LOGITS, energy_vector, free_energy, free_energy_batch, msp_score
from .metrics import accuracy, auroc, fpr_at_tpr
from .nets import (
    CeLoss,
    CeReboLoss,
    ElboLoss,
    ForwardTrace,
    LayeredNet,
    VaeNet,
    forward,
    forward_batch,
    grad,
    init_net,
    load_net,
    save_net,
    sgd_step,
)
from .data import (
    EnergyMatrix,
    SyntheticTask,
    TaskSpec,
    extract_energies,
    extract_logits,
    gen_task,
    read_energy_file,
    write_energy_file,
)
from .detectors import (
    BhlResult,
    Detector,
    DetectorKind,
    EboLogitsDetector,
    FitError,
    KnnDetector,
    LayerEnergyDetector,
    MahalanobisDetector,
    MspDetector,
    VaeConfig,
    VaeDetector,
    bhl,
    classify,
    fit_knn,
    fit_md,
    fit_vae,
    load_detector,
    save_detector,
)
from .training import (
    CeConfig,
    EBO_MARGINS,
    REboConfig,
    TrainLog,
    TrainingDiverged,
    calibrate_margins,
    energy_loss_layer,
    rebo_loss,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "FileFormatError",
    "LOGITS",
    "energy_vector",
    "free_energy",
    "free_energy_batch",
    "msp_score",
    "accuracy",
    "auroc",
    "fpr_at_tpr",
    "CeLoss",
    "CeReboLoss",
    "ElboLoss",
    "ForwardTrace",
    "LayeredNet",
    "VaeNet",
    "forward",
    "forward_batch",
    "grad",
    "init_net",
    "load_net",
    "save_net",
    "sgd_step",
    "EnergyMatrix",
    "SyntheticTask",
    "TaskSpec",
    "extract_energies",
    "extract_logits",
    "gen_task",
    "read_energy_file",
    "write_energy_file",
    "BhlResult",
    "Detector",
    "DetectorKind",
    "EboLogitsDetector",
    "FitError",
    "KnnDetector",
    "LayerEnergyDetector",
    "MahalanobisDetector",
    "MspDetector",
    "VaeConfig",
    "VaeDetector",
    "bhl",
    "classify",
    "fit_knn",
    "fit_md",
    "fit_vae",
    "load_detector",
    "save_detector",
    "CeConfig",
    "EBO_MARGINS",
    "REboConfig",
    "TrainLog",
    "TrainingDiverged",
    "calibrate_margins",
    "energy_loss_layer",
    "rebo_loss",
    "train",
]
