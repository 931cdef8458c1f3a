"""
Conflicting teacher gradients
=============================

Two classifiers of different families often disagree on which direction
in input space increases their loss.  This script measures how often on
the synthetic proxy and shows what the projection step does to a
conflicting pair.
"""

# %%
import torch

from ckl.distill import detect_conflict, project_out, resolve_conflicts
from ckl.evaluation import conflict_ratio
from ckl.modelzoo import ArchitectureSpec, TrainConfig, build_model, make_synthetic, train_supervised

torch.set_num_threads(1)
shape = (3, 16, 16)

# %% [markdown]
# A pair in the plane: g_i points up and to the right, g_j mostly left.
# Their dot product is negative, so g_i loses its component along g_j.

# %%
g_i = torch.tensor([1.0, 1.0], dtype=torch.float64)
g_j = torch.tensor([-1.0, 0.0], dtype=torch.float64)
print("conflict:", detect_conflict(g_i, g_j))
print("projected:", project_out(g_i, g_j).tolist())

# %%
# Three teachers, one sample each: the target is the sum of the adjusted copies.
grads = torch.tensor([[[1.0, 0.0]], [[-1.0, 0.5]], [[0.0, 1.0]]], dtype=torch.float64)
d, adjusted = resolve_conflicts(grads, order_seed=0, return_adjusted=True)
print("adjusted copies:", adjusted[:, 0].tolist())
print("target d:", d[0].tolist())

# %% [markdown]
# Now real models.  A small CNN and an MLP-Mixer are trained on the
# proxy, and we count the test images on which their input gradients
# point into opposite half-spaces.

# %%
train = make_synthetic(10, 2000, seed=0, split="train", image_shape=shape)
test = make_synthetic(10, 500, seed=0, split="test", image_shape=shape)
models = {}
for arch, seed in (("small_cnn", 0), ("small_cnn", 1), ("mixer_tiny", 2)):
    m = build_model(ArchitectureSpec(arch, 10, shape), seed)
    train_supervised(m, train, TrainConfig(epochs=6, seed=seed))
    models[f"{arch}/{seed}"] = m

# %%
names = list(models)
for a in names:
    row = [f"{conflict_ratio(models[a], models[b], test):.3f}" for b in names]
    print(f"{a:>14}", *row)
