"""Why the Generalized Dice Loss favours a single class on featureless inputs.

With weights 1/area^2, a prediction that cannot tell pixels apart scores best by
putting all mass on one class of intermediate size, not by predicting the class
mixture. This explains why small networks can lose large classes early in training.

Run: python demos/gdl_constant_prediction.py
"""
import numpy as np

from leishseg.classes import CLASS_NAMES, DENSE_PROFILE
from leishseg.data import one_hot
from leishseg.losses import generalized_dice_loss

rng = np.random.default_rng(0)
shares = np.array([DENSE_PROFILE[c] for c in range(7)])
labels = rng.choice(7, size=(1, 64, 64), p=shares / shares.sum())
r = one_hot(labels)


def constant(q):
    return np.broadcast_to(np.asarray(q, float).reshape(1, 7, 1, 1), r.shape).copy()


print(f"uniform 1/7      : {generalized_dice_loss(constant(np.full(7, 1 / 7)), r)[0]:.4f}")
print(f"class frequencies: {generalized_dice_loss(constant(shares / shares.sum()), r)[0]:.4f}")
for c in range(7):
    print(f"all {CLASS_NAMES[c]:<13}: {generalized_dice_loss(constant(np.eye(7)[c]), r)[0]:.4f}")
