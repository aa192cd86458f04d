"""Desk-scale training budgets shared by the acceptance suite.

Checkpoints are cached under .cache/acceptance keyed by a hash of these
values, so edits here invalidate exactly the runs they change. Budgets were
calibrated on a single CPU core; the flagship noise rotation run is sized
to stay inside its 30 minute ceiling with margin.
"""

# flagship: noise-trained rotation estimator (systematic-transfer workhorse)
FLAGSHIP = dict(epochs=56, pairs_per_epoch=8192, batch_size=256, step_size=2e-3, p_black=0.7)

# per-mechanism estimators for the family and joint comparisons
SMALL_MNIST = dict(epochs=8, pairs_per_epoch=4096, batch_size=128, step_size=1e-3)
SMALL_NOISE = dict(epochs=8, pairs_per_epoch=4096, batch_size=128, step_size=1e-3, p_black=0.5)
SMALL_CIFAR = dict(epochs=6, pairs_per_epoch=2048, batch_size=128, step_size=1e-3)

IDENTIFIER = dict(epochs=12, pairs_per_epoch=4096, batch_size=128, step_size=1e-3, p_black=0.5)
CLASSIFIER = dict(epochs=10, batch_size=128, step_size=1e-3)

RATIO_SWEEP = dict(epochs=10, pairs_per_epoch=4096, batch_size=128, step_size=1e-3)

EVAL_PAIRS = 500          # estimator evaluation sample count per split
CED_TEST_LIMIT = 300      # rotated/clean classification sample count
SWEEP_TEST_LIMIT = 120    # candidate-sweep sample count (N=200 is expensive)
CED_POOL_N = 200          # candidates drawn per class; pipeline runs prefix this
CED_DEFAULT_N = 50        # per-class candidates used by the fixed-variant runs
SEED = 0
