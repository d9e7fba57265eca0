"""Separable and weight-shared bidirectional RNN layers for images."""

from . import gradcheck as _gradcheck  # noqa: F401  (registers rnn2d, ds_rnn, conv2d, fc, crnn)
from .cost import (
    Conv2dSpec,
    LayerCost,
    RnnLayerSpec,
    conv2d_mac_count,
    conv2d_param_count,
    count_macs_empirical,
    cost_report,
    mac_ratio,
    param_ratio_asymptotic,
    srnn_mac_count,
    srnn_param_count,
)
from .layers import (
    ForwardCache,
    backward,
    finite_diff_grads,
    impulse_response,
    rnn_rows,
    rnn_seq,
    srnn,
    sws_birnn,
    ws_birnn_rows,
)
from .params import GradBundle, RnnCellParams, SrnnParams
from .rnn2d import DsRnnParams, Rnn2dCellParams, ds_rnn, rnn2d
from .tensor import ImageTensor, SeqTensor, flip_w, load_tensor, save_tensor, transpose_hw

__version__ = "0.1.0"
