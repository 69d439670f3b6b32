"""Post-training correction of a nominal model from transfer data."""

from .cg import conjugate_gradient_solve
from .ekf import EkfResult, EkfState, ekf_adapt
from .gp import GpPrediction, GramCache, gp_predict, ntk_gram
from .jfr import JfrPosterior, LmJfrResult, jfr_fit, jfr_predict, lm_jfr_fit, regression_target
from .rls import RlsState, rls_fit, rls_stream, rls_update

__all__ = [
    "EkfResult",
    "EkfState",
    "GpPrediction",
    "GramCache",
    "JfrPosterior",
    "LmJfrResult",
    "RlsState",
    "conjugate_gradient_solve",
    "ekf_adapt",
    "gp_predict",
    "jfr_fit",
    "jfr_predict",
    "lm_jfr_fit",
    "ntk_gram",
    "regression_target",
    "rls_fit",
    "rls_stream",
    "rls_update",
]
