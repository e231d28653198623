"""Adversarial self-distillation training toolkit.

Subpackages:

* :mod:`aikd.divergences` — exact distances between small discrete
  distributions (oracle-grade TV / KL / JS / Wasserstein-1).
* :mod:`aikd.losses` — the distillation objective: softened softmax,
  guide/progressive KL terms, critic loss with gradient penalty,
  adversarial term, and the weighted total.
* :mod:`aikd.models` — classifiers, the logit critic, snapshots,
  checkpoints.
* :mod:`aikd.training` — two-phase pipeline (pretrain, then distill with
  alternating critic/student updates) and ablation presets.
* :mod:`aikd.metrics` — top-k error, macro F1, ECE, temperature scaling.
* :mod:`aikd.augment` — pad-crop-flip plus cutout / mixup / cutmix.
* :mod:`aikd.data` — dataset ingestion and the synthetic smoke dataset.
* :mod:`aikd.cli` — the ``aikd`` command.
"""

from .losses import LossWeights, SoftDistribution, soften
from .models import ClassifierSpec, CriticSpec, ModelTriple
from .training import TrainConfig, apply_ablation, distill, pretrain

__version__ = "0.1.0"

__all__ = [
    "LossWeights",
    "SoftDistribution",
    "soften",
    "ClassifierSpec",
    "CriticSpec",
    "ModelTriple",
    "TrainConfig",
    "apply_ablation",
    "distill",
    "pretrain",
    "__version__",
]
