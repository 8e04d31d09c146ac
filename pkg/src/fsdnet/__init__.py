"""Networks over finite-state distributions.

Linear layers compute KL divergences between finite distributions,
nonlinearities are log-normalizations, and pooling marginalizes spatial
position in the log domain.  See the README for the layer algebra and
the CLI.
"""

from .tensor import Tape, Tensor
from .layers import (
    FilterBank,
    avgpool_prob,
    divg_dense,
    encode_binary,
    encode_channel_simplex,
    klconv_i,
    klconv_m,
    lnorm,
    lpool,
    softmax_nl,
)
from .model import (
    LayerSpec,
    NetworkSpec,
    TrainState,
    build,
    evaluate,
    forward,
    gradient_check,
    load_checkpoint,
    loss_nll,
    measure_entropy,
    save_checkpoint,
    sgd_step,
    train_epochs,
)
from .data import LabeledImageSet, read_cifar10, read_cifar100, read_mnist_idx, synth_fsd

__version__ = "0.1.0"
