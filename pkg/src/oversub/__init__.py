"""Prototype-based imitation learning for resource oversubscription.

Library layout:

- ``numerics``: float64 tensors with reverse-mode gradients, the optimizer
  and a finite-difference gradient oracle
- ``encoder``: trajectory type, gated-recurrent encoder, feature scaling
- ``prototypes``: trainable prototype layer and its losses
- ``policy``: similarity head, imitation loss, full objective, quadratic view
- ``hitl``: query construction, feedback ledger, advice gates, merge/split,
  scripted oracle
- ``sim_cloud`` / ``sim_airline``: the two oversubscription environments
- ``baselines``: grid-search, moving-average, plain behavior cloning
- ``train`` / ``evaluation`` / ``config`` / ``checkpoint`` / ``reports``:
  experiment harness
- ``gateway``: HTTP boundary for live feedback
- ``cli``: the ``oversub`` command
"""

__version__ = "0.1.0"
