"""Desk-scale electrophysiology foundation-model lab: masked multi-domain
reconstruction with any-variate attention, and a data-constrained scaling-law toolkit."""

import torch

# every tensor in this package is float64
torch.set_default_dtype(torch.float64)

__version__ = "0.1.0"
