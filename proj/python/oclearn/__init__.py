"""Online continual learning with metric losses and uncertainty-guided replay."""

from ._core import (
    ConfigError,
    EpisodicMemory,
    NumericError,
    ShapeError,
    Stream,
    StreamConfig,
    TrainConfig,
    ablate,
    cb_focal_loss,
    class_balanced_weight,
    contrastive_loss,
    current_lr,
    default_stream_config,
    delta_at,
    dml_loss,
    holdout_set,
    kl_retrospection,
    load_stream_config,
    mc_uncertainty_from_votes,
    mean_class_accuracy,
    sampling_score,
    soft_labels,
    stream_config,
    supcon_loss,
    train,
)

__all__ = [name for name in dir() if not name.startswith("_")]
