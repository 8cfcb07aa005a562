"""Walk through the supervised attention module on one synthetic phantom.

Runs in a second or two:  python demos/01_attention_module.py
"""
import numpy as np

from cganet.data import PhantomSpec, generate_phantom
from cganet.sam import (class_prototypes, hard_masks, inter_class_distance, inter_class_loss,
                        intra_class_update, make_category_guided_map)

# %% A phantom: nested core (4) inside shell (1) inside edema (2).
image, labels = generate_phantom(PhantomSpec(seed=3))
print("image", image.shape, "labels", labels.shape)
print("voxels per label:", {int(k): int(v) for k, v in zip(*np.unique(labels, return_counts=True))})

# %% The supervision target is the label volume sampled every 4 voxels, one-hot.
G = make_category_guided_map(labels, 4, np.float64)
print("guided map", G.shape, "class share:", np.round(G.mean(axis=(1, 2, 3)), 3))

# %% Pretend the attention path predicted G perfectly, and pool fake features with it.
rng = np.random.default_rng(0)
feats = rng.standard_normal((8, 8, 8, 8))
feats[:, G[3] > 0] += 2.0   # give the core its own signature

protos, present = class_prototypes(feats[None], G[None])
protos = protos.value[0]
print("prototype matrix", protos.shape, "present:", present[0].tolist())

# %% Each voxel gets its class prototype back, so features within a class collapse.
updated = intra_class_update(feats, G).value
core = G[3] > 0
if core.any():
    print("core feature spread before %.3f, after %.3f" % (feats[:, core].std(axis=1).mean(),
                                                          updated[:, core].std(axis=1).mean()))

# %% Prototypes far apart give a low inter-class loss.
D = inter_class_distance(protos, present[0])
print("inter-class distance %.3f  loss %.3f" % (float(D.value), float(inter_class_loss(D).value)))

# %% A soft, uncertain map blurs the classes together; argmax masks restore a partition.
soft = 0.5 * G + 0.125
for name, masks in (("soft", soft[None]), ("hard", hard_masks(soft[None]))):
    p, _ = class_prototypes(feats[None], masks)
    print("%s-mask distance %.3f" % (name, float(inter_class_distance(p.value[0]).value)))
