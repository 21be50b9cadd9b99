"""Molecular property prediction with collaborative expert routing.

The package combines a small reverse-mode autodiff engine (autodiff), a
SMILES parser and scaffold splitter (molgraph), a GIN graph encoder
(encoder), a mixture of collaborative experts with task-conditioned routing
(experts), the collaboration losses (losses), model assembly (model), a
training loop with AUC-ROC evaluation (train), and a command-line interface
(cli).
"""

__version__ = "0.1.0"
