"""
UAILab - Uncertainty-aware Imitation Learning on a Desk
=======================================================

Description:
------------
UAILab trains a branched conditional driving policy that predicts the
log-variance of each action, trains a stochastic content/style translator
between a training and a testing visual domain, and deploys the policy by
picking, per action dimension, the candidate with the lowest predicted
uncertainty. Everything runs in a miniature top-down driving world.

Features:
---------
- A small float64 reverse-mode autodiff core with Adam and checkpoints.
- Heteroscedastic aleatoric loss with a replicated-label calibration suite.
- Branched policy, content/style translator and the deployment strategies.
- A deterministic grid town with an expert driver and a 4-task benchmark.
"""

import logging

logger = logging.getLogger(__name__)

PKG_NAME = __name__
