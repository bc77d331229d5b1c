"""Video crowd counting: a lightweight per-frame density network plus a
temporal stack of dilated residual blocks that fuses neighbouring frames."""

from .bench import EvalReport, StreamingCounter, TimingReport, count_params, evaluate, fps_bench, mae, mse
from .dataio import (
    MALL_SPLIT,
    UCSD_SPLIT,
    Dataset,
    Sequence,
    SplitSpec,
    SynthSpec,
    apply_split,
    augment_patches,
    load_dataset,
    make_window,
    synth_video,
    window_indices,
    write_dataset,
)
from .density import (
    DensityMap,
    HeadAnnotations,
    adaptive_sigmas,
    apply_roi,
    downsample_gt,
    gt_density,
    render_density,
)
from .lcn import LcnModel, LcnTrainConfig, count, lcn_forward, lcn_loss, lcn_train, param_count
from .serialize import load_lcn, load_tan, load_tensor, save_lcn, save_tan, save_tensor
from .tan import (
    TanConfig,
    TanModel,
    block_loss,
    fuse_density,
    fusion_weights,
    reshape_concat,
    tan_forward,
    tan_forward_maps,
    tan_train,
)

__version__ = "0.1.0"
