"""Compositional zero-shot learning lab.

Cross-attention concept disentanglers over frozen backbone tokens, an exact
attention-level earth-mover regularizer, blended composition inference, and
the generalized seen/unseen calibration-curve evaluation protocol.
"""

__version__ = "0.1.0"
