"""A small numpy tensor/gradient kernel for segmentation networks."""

from .functional import (
    bilinear_upsample,
    conv2d_backward,
    conv2d_forward,
    cross_entropy_loss,
    depthwise_separable_conv,
    focal_loss,
    global_avg_pool_forward,
    softmax_per_pixel,
)
from .gradcheck import GradCheckReport, check_loss, check_module, grad_check
from .layers import (
    BatchNorm2d,
    Conv2d,
    DepthwiseConv2d,
    GlobalAvgPool,
    Module,
    Parameter,
    ReLU,
    Sequential,
    Upsample,
    conv_bn_relu,
    separable_block,
)
from .optim import Adam, AdamState, adam_step
from .serialize import load_weights, loads_weights, dumps_weights, save_weights, weights_hash
