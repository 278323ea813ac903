"""
Removing a task without retraining
==================================

Merging has an inverse: subtracting one task's contribution from a model
trained on pooled data.  The one-shot removal update divides the summed
gradient of the dropped block by the retained curvature; on quadratic
losses it equals the model retrained from scratch without that block.
This script runs the stock removal benchmark twice — once on logistic
blobs (approximate) and once on linear regression (exact).
"""

from gradmerge import default_removal_spec, run_removal

# --- logistic blocks: one-shot removal vs retrain -------------------------
spec = default_removal_spec()
result = run_removal(spec, out_dir="demo_out_removal", seed=0)
print(f"pooled model over {spec.n_tasks} blocks, dropping {result.removed_task_id!r}")
print("parameter distance to the retrained-from-scratch model:")
for label in list(spec.methods) + ["anchor"]:
    print(f"  {label:>12}: {result.dists[label]:.4f}")
print("(the anchor row is the pooled model with nothing removed)")

# The curvature-aware update lands closer to the retrain than subtracting
# the raw increment does; neither is exact here because logistic losses
# are only approximately quadratic.

# --- linear blocks: removal is exact --------------------------------------
import dataclasses

from gradmerge import AnchorConfig, ModelSpec, PerTaskConfig

linear = dataclasses.replace(
    spec,
    model=ModelSpec("linear_regression", 3),
    loss="squared_error",
    per_task=PerTaskConfig(n_train=60, n_test=40, noise=0.3, seed=0),
    anchor=AnchorConfig(source="exact", delta=0.5),
)
result = run_removal(linear, out_dir="demo_out_removal_linear", seed=0)
print("\nsame protocol on linear regression (quadratic loss):")
for label in list(linear.methods) + ["anchor"]:
    print(f"  {label:>12}: {result.dists[label]:.3e}")
print("the curvature-aware update now matches the retrain to round-off")
