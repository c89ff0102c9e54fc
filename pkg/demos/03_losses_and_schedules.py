"""
The composite objective, term by term
=====================================

The training loss is a sum of five terms: cross-entropy on full and
ROI-masked labeled slices, two consistency penalties against the teacher,
and an entropy term on unlabeled predictions.  The unsupervised terms are
eased in by a ramp so early noisy teachers cannot mislead the student.
"""
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from fetaliqa.losses import (
    BatchForward,
    LossWeights,
    composite_loss,
    entropy_term,
    kl_consistency,
    ramp_up,
)
from fetaliqa.trainer import cosine_lr

OUT = os.path.join(os.path.dirname(__file__), "output")
os.makedirs(OUT, exist_ok=True)

# %%
# Two schedules govern training.  The ramp multiplies the unsupervised
# coefficients and runs from exp(-5) to 1 over the first T epochs; the
# cosine schedule decays the learning rate to zero over the whole run.

epochs = np.linspace(0, 15, 200)
ramp = [ramp_up(t, 5.0) for t in epochs]
steps = np.arange(600)
lr = [cosine_lr(int(s), 600, 5e-3) for s in steps]

fig, axes = plt.subplots(1, 2, figsize=(10, 3.2))
axes[0].plot(epochs, ramp)
axes[0].axvline(5.0, color="gray", ls=":", lw=0.8)
axes[0].set(xlabel="epoch", ylabel="ramp weight", title="ramp-up (T=5)")
axes[1].plot(steps, lr)
axes[1].set(xlabel="step", ylabel="learning rate", title="cosine decay")
fig.tight_layout()
fig.savefig(os.path.join(OUT, "03_schedules.png"), dpi=110)
print("wrote 03_schedules.png")

# %%
# The elementary penalties behave as expected: the KL consistency vanishes
# when student and teacher agree, and the entropy term is maximal on the
# uniform distribution, pushing unlabeled predictions toward confidence.

p = np.array([0.2, 0.5, 0.3])
print(f"KL(p, p) = {kl_consistency(p, p)}")
print(f"entropy(uniform) = {entropy_term(np.full(3, 1 / 3)):.6f} "
      f"(ln 3 = {np.log(3):.6f})")
print(f"entropy(one-hot-ish) = {entropy_term(np.array([0.98, 0.01, 0.01])):.6f}")

# %%
# Assemble a synthetic batch forward (10 slices, 3 labeled) and price it
# through the composite loss at several epochs.  The supervised terms are
# constant; the unsupervised contribution grows with the ramp.

rng = np.random.default_rng(3)
b, n_l, f = 10, 3, 64
fwd = BatchForward(
    probs_full=rng.dirichlet(np.ones(3), size=b),
    features_full=rng.standard_normal((b, f)),
    n_labeled=n_l,
    probs_masked=rng.dirichlet(np.ones(3), size=n_l),
    teacher_probs_full=rng.dirichlet(np.ones(3), size=b),
    teacher_features_masked=rng.standard_normal((b, f)),
)
labels = rng.integers(0, 3, size=n_l)
weights = LossWeights()

print(f"\n{'epoch':>5} {'ramp':>7} {'cls':>7} {'cls_roi':>7} "
      f"{'con':>7} {'con_roi':>7} {'ent':>7} {'total':>7}")
for epoch in (0, 1, 2, 3, 5, 10):
    br = composite_loss(fwd, labels, weights, float(epoch))
    print(f"{epoch:>5} {br.ramp:>7.4f} {br.cls:>7.4f} {br.cls_roi:>7.4f} "
          f"{br.con:>7.4f} {br.con_roi:>7.4f} {br.ent:>7.4f} {br.total:>7.4f}")

# %%
# Ablations are exact by construction: zeroing a coefficient removes
# precisely that ramp-scaled term from the total, nothing else moves.

full = composite_loss(fwd, labels, weights, 5.0)
for name, dropped in [
    ("lam", LossWeights(lam=0.0)),
    ("beta", LossWeights(beta=0.0)),
    ("gamma", LossWeights(gamma=0.0)),
]:
    abl = composite_loss(fwd, labels, dropped, 5.0)
    term = {"lam": full.con, "beta": full.con_roi, "gamma": full.ent}[name]
    print(f"drop {name}: total moves by {full.total - abl.total:.6f}, "
          f"ramp*term = {full.ramp * term:.6f}")

# %%
# Term magnitudes over a stack of random batches, as a picture.

terms = {"cls": [], "con": [], "con_roi": [], "ent": []}
for epoch in epochs:
    br = composite_loss(fwd, labels, weights, float(epoch))
    terms["cls"].append(br.cls)
    terms["con"].append(br.ramp * br.con)
    terms["con_roi"].append(br.ramp * br.con_roi)
    terms["ent"].append(br.ramp * br.ent)

fig, ax = plt.subplots(figsize=(6.5, 3.6))
for name, vals in terms.items():
    ax.plot(epochs, vals, label=name if name == "cls" else f"ramp*{name}")
ax.set(xlabel="epoch", ylabel="contribution to total",
       title="fixed batch, loss contributions vs epoch")
ax.legend(fontsize=8)
fig.tight_layout()
fig.savefig(os.path.join(OUT, "03_terms.png"), dpi=110)
print("wrote 03_terms.png")
