"""Quantile partial correlation screening for high-dimensional predictive quantile regression."""
from ._backend import BACKEND
from .errors import *  # noqa: F401,F403
from .numeric import Dataset, OlsFit, ols_fit, pearson_corr, standardize
from .qpc import QpcValue, qpc_screen_scores, sample_qpc
from .quantreg import QrFit, check_loss, lambda_path, psi, qr_fit, qr_fit_l1
from .screening import (ScreenConfig, SelectionTrace, confounding_set, ebic, qpcfr_run,
                        qpcs_run, run_screen, select_two_step)

__version__ = "0.1.0"
