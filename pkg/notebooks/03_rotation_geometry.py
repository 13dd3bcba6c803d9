# %% [markdown]
# # Rotations that align two gradient sets
#
# Two sets of per-sample gradient rows disagree. A rotation per set is
# learned on SO(d) with Cayley steps so both point along their common mean.

# %%
import numpy as np

from tokd.rotation import manifold_update, orthogonality_error, rotation_loss

rng = np.random.default_rng(0)
d, n = 8, 32
shared = rng.standard_normal(d)
raw_r = shared + 0.8 * rng.standard_normal((n, d))
raw_f = -0.5 * shared + 0.8 * rng.standard_normal((n, d))


def mean_cos(a, b):
    return float(a.mean(0) @ b.mean(0) / np.linalg.norm(a.mean(0)) / np.linalg.norm(b.mean(0)))


print("raw cosine of batch means:", round(mean_cos(raw_r, raw_f), 3))

# %%
R_r, R_f = np.eye(d), np.eye(d)
for step in range(300):
    v_r, v_f = raw_r @ R_r, raw_f @ R_f
    g = 0.5 * (v_r + v_f)
    loss_r, grad_r = rotation_loss(raw_r, g, R_r)
    loss_f, grad_f = rotation_loss(raw_f, g, R_f)
    R_r, R_f = manifold_update(R_r, grad_r, 1e-2), manifold_update(R_f, grad_f, 1e-2)
    if step % 100 == 0:
        print(f"step {step:3d}  L_Rr {loss_r:8.3f}  L_Rf {loss_f:8.3f}  "
              f"rotated cosine {mean_cos(raw_r @ R_r, raw_f @ R_f):+.3f}")
print("final rotated cosine:", round(mean_cos(raw_r @ R_r, raw_f @ R_f), 3))
print("orthogonality error:", orthogonality_error(R_r), orthogonality_error(R_f))
