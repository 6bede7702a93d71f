"""noisylab: desk-scale robust training under noisy labels.

Combines three objectives against label noise: restoring augmented inputs
with an auxiliary decoder, information-maximizing cluster regularization,
and progressive self-bootstrapping that shifts supervision from the given
labels to the model's own predictions.
"""

__version__ = "0.1.0"
