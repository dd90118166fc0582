"""Noise-space domain adaptation for image restoration.

A restorer trained on synthetic pairs is adapted to an unlabelled real
domain through the gradients of a conditional diffusion model's
noise-prediction loss. The diffusion model only exists during training.
"""
from .adapt import channel_shuffle, combined_loss, contrastive_loss, lambda_schedule, residual_swap
from .diffusion import forward_sample, linear_schedule
from .imaging import psnr, ssim
from .restorer import build_restorer, load_checkpoint
from .trainer import detect_stage, evaluate, train_joint

__version__ = "0.1.0"
