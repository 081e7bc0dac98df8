"""Generator-based adversarial perturbations with a relativistic loss, on a small numpy autodiff core."""

from . import data, diffcore, evaluate, losses, nets, perturb, train
from .diffcore import Tensor, no_grad
from .losses import CEUntargeted, LogitPair, RCEUntargeted, Targeted, ce_loss, rce_loss, targeted_loss
from .nets import ClassifierNet, GeneratorNet, build_classifier, build_generator, load_weights, save_weights
from .perturb import PerturbationBudget, adversarial, gaussian_kernel, project, smooth
from .train import TrainConfig, train_classifier, train_generator

__version__ = "0.1.0"
