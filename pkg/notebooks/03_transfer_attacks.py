"""
Crafting and transferring adversarial examples
==============================================

Attacks are crafted on one model and replayed on the others.  The
transfer matrix collects the success rates; the timing report shows
what attacking an ensemble costs compared with a single source.
"""

# %%
import torch

from ckl.attacks import AttackConfig, attack_dataset, ensemble_source
from ckl.evaluation import asr, timing_report, transfer_matrix
from ckl.modelzoo import ArchitectureSpec, TrainConfig, build_model, make_synthetic, train_supervised

torch.set_num_threads(1)
shape = (3, 16, 16)
train = make_synthetic(10, 2000, seed=0, split="train", image_shape=shape)
test = make_synthetic(10, 200, seed=0, split="test", image_shape=shape)

models = []
for arch, seed in (("small_cnn", 0), ("resnet_tiny", 1), ("mixer_tiny", 2)):
    m = build_model(ArchitectureSpec(arch, 10, shape), seed)
    train_supervised(m, train, TrainConfig(epochs=6, seed=seed))
    models.append(m)

# %% [markdown]
# The proxy images are easy to separate, so a larger budget than the
# usual 8/255 is used to get visible transfer.

# %%
cfg = AttackConfig(epsilon=16 / 255, alpha=2 / 255, iterations=10, di_low=14, di_high=16)
adv = attack_dataset(models[0], test, cfg)
print("white-box ASR", asr(models[0], adv))
print("transfer to resnet", asr(models[1], adv), "to mixer", asr(models[2], adv))

# %%
tm = transfer_matrix(models, cfg, test, model_ids=["cnn", "resnet", "mixer"])
print(tm.to_csv())

# %%
di = AttackConfig(method="di", epsilon=16 / 255, alpha=2 / 255, iterations=10, di_low=14, di_high=16)
print("DI-FGSM cnn -> mixer", asr(models[2], attack_dataset(models[0], test, di)))

# %%
report = timing_report([models[0], ensemble_source(models)], cfg, test, names=["cnn", "ensemble"])
for row in report.rows():
    print(row)
