"""Representational distance learning for small convolutional networks."""

from .errors import ConfigError, DegenerateInputError, NumericError, RdlError, ShapeError
from .nn import LayerSpec, Network, SgdState, mnist_table1_specs, sgd_step, softmax_xent
from .rdl import (
    AlphaSchedule,
    PairSample,
    TeacherRdmProvider,
    alpha_at,
    aux_grad_exact,
    aux_grad_sampled,
    aux_loss,
    combine_gradients,
    rdl_train_epoch,
    sample_pairs,
)
from .rdm import Rdm, compute_rdm, rdm_distance

__version__ = "0.1.0"
