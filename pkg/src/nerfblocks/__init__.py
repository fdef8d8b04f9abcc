"""Desk-scale block-decomposed neural radiance fields.

Train many small radiance-field models over a synthetic environment, then
select, render, appearance-match, and composite them into seamless
large-scene novel views.
"""

from . import autodiff
from .blocks import (
    BlockEntry,
    BlockLayout,
    CompositeConfig,
    choose_matching_location,
    composite_images,
    match_appearance,
    place_blocks_intersections,
    place_blocks_uniform,
    propagate_appearance,
    select_blocks,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .encoding import (
    ConicalGaussian,
    EncodingConfig,
    exposure_encode,
    frustum_to_gaussian,
    integrated_positional_encode,
    positional_encode,
)
from .metrics import psnr, ssim
from .nets import (
    AppearanceTable,
    BlockModel,
    MlpParams,
    ModelConfig,
    PoseOffset,
    color_forward,
    density_forward,
    init_block_model,
    visibility_forward,
)
from .optim import OptimizerState, adam_step, lr_schedule
from .rendering import (
    Camera,
    RayBatch,
    RenderConfig,
    RenderOutput,
    composite_ray,
    generate_rays,
    hierarchical_resample,
    render_image,
    render_ray,
    render_visibility,
    stratified_sample,
)
from .scenes import (
    CameraRig,
    CaptureParams,
    ImageRecord,
    SceneSpec,
    geographic_filter,
    make_cross_scene,
    make_street_scene,
    make_wall_scene,
    read_dataset,
    simulate_capture,
    trace_ground_truth,
    write_dataset,
)
from .training import (
    TrainConfig,
    apply_pose_offset,
    fit_appearance_embedding,
    photometric_loss,
    pose_regularization,
    train_block,
    visibility_loss,
)

__version__ = "0.1.0"
