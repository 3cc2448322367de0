"""Shared test oracles."""

import numpy as np

from irlm import tensor as T
from irlm.model import HiddenStates, forward, mlm_logits, predict_masked
from irlm.regularizer import dpp, ecp, fill_back
from irlm.tensor import Tensor
from irlm.text import pad_batch


def frozen_target_objective(model, instances):
    """Full regularized loss with H_hat, the fill-back predictions and the MLM targets held constant.

    Returns a zero-argument callable evaluating the loss at the model's current
    parameters, for finite differences against the detached training objective.
    """
    original = pad_batch([x.original for x in instances])
    corrupted = pad_batch([x.corrupted for x in instances])
    with T.no_grad():
        h_hat_const = forward(model, original.ids, original.attention_mask).values.data.copy()
        logits = mlm_logits(model, forward(model, corrupted.ids, corrupted.attention_mask)).data
    filled = pad_batch([
        fill_back(x.corrupted, x.masked_positions, predict_masked(logits[i], x.masked_positions)).ids
        for i, x in enumerate(instances)
    ])
    targets = np.zeros(corrupted.ids.shape, dtype=np.int64)
    selected = np.zeros(corrupted.ids.shape, dtype=bool)
    for i, x in enumerate(instances):
        targets[i, x.masked_positions] = x.labels
        selected[i, x.masked_positions] = True

    def objective():
        h = forward(model, corrupted.ids, corrupted.attention_mask)
        h_hat = HiddenStates(Tensor(h_hat_const), original.attention_mask, "original")
        h_tilde = forward(model, filled.ids, filled.attention_mask, provenance="filled")
        loss = T.cross_entropy(mlm_logits(model, h), targets, selected) + ecp(h, h_hat) + dpp(h_tilde, h_hat)
        return loss.item()

    return objective
