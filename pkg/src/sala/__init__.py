"""Semi-supervised few-shot classification with a task-adaptive metric and
progressive neighbor selection, built on a self-contained reverse-mode
autodiff core."""

from . import autodiff, core, data, models, training
from .autodiff import Tape, Tensor, backward
from .core import (
    RunMode,
    SelectionSchedule,
    adaptive_distance,
    class_probabilities,
    episode_loss,
    euclidean_distance,
    pseudo_label,
    refine_prototypes,
    run_episode,
    select_top_n,
    selection_count,
)
from .data import (
    Dataset,
    Episode,
    EpisodeSpec,
    gen_synthetic,
    load_dataset,
    make_split,
    sample_episode,
    save_dataset,
)
from .models import (
    ConvNet4,
    MlpNet,
    ModelPair,
    PrototypeSet,
    SqueezeExciteNet,
    compute_prototypes,
    generate_task_weights,
    identity_mlp,
    load_checkpoint,
    save_checkpoint,
)
from .training import (
    AdamState,
    EvalReport,
    TrainConfig,
    adam_step,
    build_models,
    evaluate,
    load_models,
    train,
)

__version__ = "0.1.0"
