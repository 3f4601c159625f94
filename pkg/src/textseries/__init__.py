"""Text-controlled time-series generation toolkit.

A desk-scale library for generating univariate time series conditioned on
textual descriptions: statistics-driven text synthesis, a prototype-
conditioned denoising-diffusion model, a multi-agent template-refinement
pipeline, and a generative-evaluation metric suite.
"""

__version__ = "0.1.0"
