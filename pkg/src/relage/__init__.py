"""Relational-graph aging clock: graph construction over CpG sites, a gated
three-branch graph neural regressor for age prediction, age-acceleration
analytics, and gradient/occlusion-based attribution."""

__version__ = "0.1.0"
