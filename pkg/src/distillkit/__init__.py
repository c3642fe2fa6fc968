"""Distillkit

Knowledge distillation treated as a learned form of label smoothing, and the
teacher-free methods that follow from that view.

The main components of this package include:

1. A small float64 autodiff engine with MLP and plain-CNN models and SGD.
2. The label-smoothing, distillation, self-distillation and virtual-teacher losses.
3. Experiment protocols (baseline, LSR, KD, Re-KD, De-KD, Tf-KD self/reg) run
   per seed through a graph that loads data, trains and records results.
4. Check suites for the exact LSR/KD identities and for every gradient.

Usage:
    ``distillkit run --config experiment.toml`` runs an experiment; the
    ``graph`` object exported here runs a single seed of one.
"""  # noqa

from distillkit.graph import graph

__version__ = "0.0.1"

__all__ = ["graph", "__version__"]
