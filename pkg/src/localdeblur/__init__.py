"""Local motion deblurring toolkit: patch-contextual blur detection,
mask-gated guided filtering with a short-exposure reference, and a
masked-attention conditioned denoising-diffusion sandbox."""

__version__ = "0.1.0"
