"""The training objective piece by piece: weighted cross-entropy, the Lovasz
relaxation of IoU, and the neighborhood smoothness penalty."""

import numpy as np

from mvxseg import tensor as T
from mvxseg.losses import (LossConfig, lovasz_softmax, one_hot, smoothness_reg,
                           total_loss, weighted_ce)
from mvxseg.voxel import knn

rng = np.random.default_rng(4)

# two blobs with a boundary; predictions blur across it
pts = np.concatenate([rng.normal((-1, 0, 0), 0.4, (40, 3)),
                      rng.normal((+1, 0, 0), 0.4, (40, 3))])
labels = np.array([0] * 40 + [1] * 40)
logits_sharp = T.constant(np.where(one_hot(labels, 2) > 0, 6.0, -6.0))
logits_blurry = T.constant(0.3 * rng.normal(size=(80, 2)))

config = LossConfig.uniform(2, beta_reg=1.0)
nb = knn(pts, pts, k=8, exclude_self=True)

for name, logits in (("sharp", logits_sharp), ("blurry", logits_blurry)):
    probs = T.softmax_rows(logits)
    print(f"{name:6s}  wce {float(weighted_ce(logits, labels, config).data):7.4f}"
          f"  lovasz {float(lovasz_softmax(probs, labels, config).data):7.4f}"
          f"  smooth {float(smoothness_reg(probs, labels, nb, config).data):7.4f}")

# the smoothness term only punishes variation the labels do not explain:
# a prediction that flips inside a single-class blob is penalized, the
# legitimate boundary between blobs is not
flip = one_hot(labels, 2).copy()
flip[10:20] = flip[10:20][:, ::-1]
noisy_inside = T.constant(np.clip(flip, 1e-6, 1.0))
print("smoothness, flips inside a blob:",
      float(smoothness_reg(noisy_inside, labels, nb, config).data))

# the combined objective (regularizer weight turned down to 1 for display;
# the training default is beta_reg = 500)
combined = total_loss(logits_blurry, None, labels, None, config, neighbors=nb)
print("total, blurry prediction:", float(combined.data))
combined = total_loss(logits_sharp, None, labels, None, config, neighbors=nb)
print("total, sharp prediction:", float(combined.data))
