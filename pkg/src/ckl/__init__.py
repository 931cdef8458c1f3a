"""Common knowledge learning for transferable adversarial examples.

Subpackages and modules:

* :mod:`ckl.modelzoo` builds, trains and stores the classifiers.
* :mod:`ckl.distill` distils a student from several teachers using their
  outputs and their (conflict-resolved) input gradients.
* :mod:`ckl.attacks` crafts MI/DI/VNI-FGSM and Logit adversarial examples.
* :mod:`ckl.evaluation` measures attack success, output inconsistency,
  gradient conflicts and attack cost.
"""

__version__ = "0.1.0"

from . import attacks, distill, evaluation, modelzoo  # noqa: E402
from .attacks import AttackConfig, ensemble_source, run_attack  # noqa: E402
from .distill import CKLConfig, train_student  # noqa: E402
from .modelzoo import ArchitectureSpec, build_model, load_checkpoint, save_checkpoint  # noqa: E402

__all__ = [
    "ArchitectureSpec",
    "AttackConfig",
    "CKLConfig",
    "attacks",
    "build_model",
    "distill",
    "ensemble_source",
    "evaluation",
    "load_checkpoint",
    "modelzoo",
    "run_attack",
    "save_checkpoint",
    "train_student",
]
