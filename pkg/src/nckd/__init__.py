"""Neural-Collapse-inspired knowledge distillation at desk scale."""
from .data import Dataset, MixtureSpec, gaussian_mixture, load_csv, save_csv, split
from .estimators import MLPClassifier, NCKDClassifier
from .geometry import CentroidSet, class_means, etf_target, make_simplex_etf, pca_project
from .losses import LossWeights, cross_entropy, kd_kl, nc1_loss, nc2_loss, total_loss
from .metrics import NcReport, nc1, nc2, nc3, nc_report, scatter
from .model import Mlp
from .numcore import Rng, cosine, pinv, softmax
from .trainer import DistillConfig, Teacher, distill, evaluate, train_teacher, ufm_optimize

__version__ = "0.1.0"
