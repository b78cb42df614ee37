"""Rotation-equivariant diffusion policy on spherical Fourier features.

Layout:
  so3        real spherical harmonics, Wigner blocks, sphere grids
  autodiff   minimal reverse-mode tape and the Adam optimizer
  layers     per-degree linear maps, activations, FiLM, temporal convs
  unet       the spherical denoising temporal U-net
  diffusion  noise schedule, training loss, DDPM/DDIM samplers
  canonical  end-effector encoding and gripper-frame canonicalization
  encoder    equivariant point-cloud scene encoder
  policy     end-to-end policies (spherical and non-equivariant baseline)
  bench      synthetic reach-and-orient benchmark: experts, training, eval
  verify     executable invariant suite
  cli        the ``sphdiff`` command-line tool
"""

__version__ = "0.1.0"
