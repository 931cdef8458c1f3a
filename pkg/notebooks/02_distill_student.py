"""
Distilling a student from two teachers
======================================

The student matches both the teachers' predictions and their input
gradients.  On a tiny synthetic problem we compare a student trained
with conflict-resolved gradient targets against one with no gradient
term.
"""

# %%
import torch

from ckl.distill import CKLConfig, train_student
from ckl.modelzoo import ArchitectureSpec, TrainConfig, accuracy, build_model, make_synthetic, train_supervised

torch.set_num_threads(1)
shape = (3, 16, 16)
train = make_synthetic(10, 2000, seed=0, split="train", image_shape=shape)
test = make_synthetic(10, 300, seed=0, split="test", image_shape=shape)

# %%
teachers = []
for arch, seed in (("small_cnn", 0), ("mixer_tiny", 1)):
    t = build_model(ArchitectureSpec(arch, 10, shape), seed)
    train_supervised(t, train, TrainConfig(epochs=6, seed=seed))
    teachers.append(t)
    print(arch, "teacher accuracy", accuracy(t, test.as_batch()))

# %% [markdown]
# lambda weights the gradient term.  The proxy teachers have input
# gradients with squared norm around 5 per image, far above natural
# images, so lambda is 0.1 here instead of the default 500.  The output
# term is KL(student || teacher): the student pays heavily for mass on a
# class either teacher rules out, and needs several epochs to get going.

# %%
for mode in ("pcgrad", "off"):
    student = build_model(ArchitectureSpec("small_cnn", 10, shape), 7)
    _, log = train_student(student, teachers, train, CKLConfig(lam=0.1, epochs=10, grad_mode=mode), val_data=test)
    last = log.epochs[-1]
    print(f"{mode:>8}  kd {last['kd_loss']:.3f}  grad {last['grad_loss']:.4f}  val acc {last['val_acc']:.3f}")
