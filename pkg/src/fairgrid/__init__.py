"""fairgrid: fairness-aware facility-layout generation for gridded cities.

Conditional graph diffusion over per-region walking graphs: a pretrained
fair-demand attention module produces per-region condition embeddings, a
variance-preserving SDE corrupts node/edge tensors, a hybrid graph denoiser
predicts the injected noise, and reverse-process samplers decode layouts that
are scored with spatial-equity metrics.
"""

__version__ = "0.1.0"

from .citygrid import (  # noqa: E402,F401
    Dataset,
    GeneratorConfig,
    WalkingGraph,
    generate_synthetic_city,
    load_dataset,
    save_dataset,
)
from .denoiser import Denoiser, DenoiserConfig  # noqa: E402,F401
from .experiment import ExperimentConfig, desk_preset, run_pipeline, train_denoiser  # noqa: E402,F401
from .metrics import MetricsReport, evaluate_layouts  # noqa: E402,F401
from .sampler import SamplerConfig, generate_for_dataset  # noqa: E402,F401
from .sde import NoiseSchedule  # noqa: E402,F401
