"""tokensplat: feed-forward 3D Gaussian Splatting from learnable tokens,
built on a self-contained numpy autodiff core."""

from .autodiff import Tensor, check_gradients, finite_difference
from .cameras import Camera, identity_camera, look_at_camera, plucker_rays
from .config import ConfigError, RunConfig, load_run_config
from .gaussians import GaussianSet, activate, covariance, quat_to_rotmat
from .losses import (LossWeights, mse_loss, psnr, ssim, ssim_loss, total_loss,
                     visibility_loss)
from .network import NetworkConfig, TokenSplatModel, grow_bank
from .rasterize import RenderConfig, RenderOutput, render
from .scenes import (SceneSample, SceneSpec, generate_dataset, generate_scene,
                     sample_context_target)
from .serialization import (export_ply, import_ply, load_checkpoint,
                            load_dataset, load_model_checkpoint, read_ppm,
                            save_checkpoint, save_dataset,
                            save_model_checkpoint, write_ppm)
from .training import AdamW, TrainConfig, TrainState, lr_schedule, train
from .tuning import TuneConfig, context_extend, gaussian_tune, token_tune

__version__ = "0.1.0"

__all__ = [
    "Tensor", "check_gradients", "finite_difference",
    "Camera", "identity_camera", "look_at_camera", "plucker_rays",
    "ConfigError", "RunConfig", "load_run_config",
    "GaussianSet", "activate", "covariance", "quat_to_rotmat",
    "LossWeights", "mse_loss", "psnr", "ssim", "ssim_loss", "total_loss",
    "visibility_loss",
    "NetworkConfig", "TokenSplatModel", "grow_bank",
    "RenderConfig", "RenderOutput", "render",
    "SceneSample", "SceneSpec", "generate_dataset", "generate_scene",
    "sample_context_target",
    "export_ply", "import_ply", "load_checkpoint", "load_dataset",
    "load_model_checkpoint", "read_ppm", "save_checkpoint", "save_dataset",
    "save_model_checkpoint", "write_ppm",
    "AdamW", "TrainConfig", "TrainState", "lr_schedule", "train",
    "TuneConfig", "context_extend", "gaussian_tune", "token_tune",
]
