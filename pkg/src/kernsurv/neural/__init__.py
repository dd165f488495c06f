from .loss import HAZARD_CLAMP, LossReport, embedding_loss, loss_gradient, survival_loss
from .mds import MDSResult, mds_embed, target_sq_distances
from .nets import ARCHITECTURES, EmbeddingNet, MLPSpec, basic, build, diag, mlp, residual
from .train import Adam, TrainConfig, train, warm_start, warm_start_mse

__all__ = [
    "ARCHITECTURES",
    "Adam",
    "EmbeddingNet",
    "HAZARD_CLAMP",
    "LossReport",
    "MDSResult",
    "MLPSpec",
    "TrainConfig",
    "basic",
    "build",
    "diag",
    "embedding_loss",
    "loss_gradient",
    "mds_embed",
    "mlp",
    "residual",
    "survival_loss",
    "target_sq_distances",
    "train",
    "warm_start",
    "warm_start_mse",
]
