"""advcraft: gradient-based adversarial example crafting and benchmarking.

Small from-scratch stack: float64 tensors with tape-based reverse-mode
differentiation, a trainable classifier zoo, loss-preserving input
transforms with exact adjoints, the FGSM..CI-AB-SI-TI-DIM attack family
as one configurable iteration engine, and a reproducible evaluation
harness with a CLI.
"""

__version__ = "0.1.0"

from .autodiff import (
    Tape,
    Tensor,
    finite_difference_gradient,
    forward_conv2d,
    forward_dense,
    forward_flatten,
    forward_maxpool2,
    forward_relu,
    input_gradient,
    per_example_cross_entropy,
    softmax_cross_entropy,
    tensor,
)
from .models import (
    LayerSpec,
    ModelParams,
    TrainConfig,
    accuracy,
    build_zoo,
    conv2d,
    dense,
    flatten,
    forward_logits,
    infer_shapes,
    init_model,
    load_checkpoint,
    maxpool2,
    relu,
    save_checkpoint,
    train,
    zoo_architectures,
)
from .transforms import (
    CropPadParams,
    DiverseInputParams,
    ScaleFactor,
    TiKernel,
    adjoint_crop_pad,
    adjoint_diverse_input,
    apply_crop_pad,
    apply_diverse_input,
    apply_diverse_input_params,
    apply_scale,
    convolve_gradient,
    crop_invariance_loss_curve,
    gaussian_kernel,
    sample_crop,
    sample_diverse_input,
)
from .attacks import (
    AttackConfig,
    AttackState,
    EnsembleSpec,
    VARIANTS,
    abi_fgm,
    attack_config,
    averaged_copy_gradient,
    clip_to_ball,
    example_stream,
    fgsm,
    i_fgsm,
    mi_fgsm,
    ni_fgsm,
    run_attack,
)
from .data import (
    Dataset,
    LabeledExample,
    load_idx,
    save_idx,
    select_correctly_classified,
    synth_dataset,
    write_ppm,
)
from .evaluate import (
    CropProbeReport,
    EvalConfig,
    SuccessReport,
    emit_probe_report,
    emit_report,
    run_attack_eval,
    run_probe,
)
