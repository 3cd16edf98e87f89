"""Explicit Gaussian scene representation and CPU renderer."""

from .gaussians import (GaussianMap, GaussianPrimitive, load_ply, logit, quat_to_rot, save_ply,
                        sigmoid)
from .image import (image_loss, image_loss_with_grad, load_float_image, load_png, psnr,
                    save_float_image, save_png, ssim, ssim_with_grad)
from .render import (DEFAULT_BACKGROUND, MapGradients, RenderedView, loss_and_gradients,
                     map_gradients, map_loss, pose_gradient, project_gaussian, render)

__all__ = [
    "GaussianMap", "GaussianPrimitive", "load_ply", "save_ply", "logit", "sigmoid", "quat_to_rot",
    "image_loss", "image_loss_with_grad", "ssim", "ssim_with_grad", "psnr",
    "save_png", "load_png", "save_float_image", "load_float_image",
    "DEFAULT_BACKGROUND", "MapGradients", "RenderedView", "loss_and_gradients", "map_gradients",
    "map_loss", "pose_gradient", "project_gaussian", "render",
]
