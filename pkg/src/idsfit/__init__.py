"""Integrated distance sampling: joint likelihoods for distance-sampling, point-count and
detection/nondetection data sharing one density process."""
from .data import SiteRecord, SurveyDataset, check_covariate_table, check_datasets
from .detection import (PointGeometry, UNLIMITED, avg_det_prob, bin_cell_probs, effective_area,
                        half_normal)
from .formula import Formula, build_design, parse_formula
from .inference import (FitOptions, FitResult, estimate_site_abundance, fit, predict_density,
                        validity_filter, wald_intervals)
from .model import (JointModel, ModelSpec, ParameterLayout, availability_prob, joint_nll, nll_dnd,
                    nll_ds, nll_pc)
from .simulate import Duration, SimScenario, StreamScenario, duration_generator, simulate, simulate_stream

from .estimator import IDSModel

__version__ = "0.1.0"
