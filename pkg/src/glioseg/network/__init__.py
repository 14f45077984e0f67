from .layers import ActivationTape, ShapeError
from .model import (
    ConfigError,
    NetworkConfig,
    PretrainedLoadError,
    apply_running_stats,
    audit_shapes,
    build_network,
    cast_params,
    conv_forward,
    count_parameters,
    encoder_conv_count,
    export_encoder_2d,
    lift_kernel_2d_to_3d,
    load_pretrained,
    network_backward,
    network_forward,
    param_shapes,
    params_from_store,
    params_to_store,
    squeeze_kernel_3d_to_2d,
    trainable_names,
)
from .gradcheck import GradCheckResult, finite_difference_check, gradient_check, relative_error
