"""Federated semi-supervised segmentation with teacher/client agreement pseudo-labels.

Modules: ``tensor`` (autodiff), ``models`` (tiny U-Net, LoRA, checkpoints),
``agreement`` (pseudo-label fusion), ``losses``, ``federation`` (rounds,
FedAvg, distillation aggregation), ``data`` (synthetic data, PGM I/O),
``metrics`` (Dice, HD95), ``config``, ``experiments`` and ``cli``.
"""

__version__ = "0.1.0"
