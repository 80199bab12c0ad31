"""Predict a dog's mesh from its bone lengths with a PCA shape model.

Builds the model from nine surrogate dogs and predicts the tenth from its
rest bone lengths with an increasing number of components.
"""
import numpy as np

from quadpose.shape import build_shape_model, predict_shape
from quadpose.skeleton import rest_bone_lengths
from quadpose.surrogate import surrogate_corpus

corpus = surrogate_corpus(10, seed=0)
held_out = corpus[-1]
model = build_shape_model([(d.mesh, d.skeleton, d.neutral_rotations) for d in corpus[:-1]])
share = model.variances / model.variances.sum()
print("variance share per component:", np.round(share, 3))

truth = rest_bone_lengths(held_out.skeleton)
for k in range(1, model.rank + 1):
    p = predict_shape(model, truth, k)
    bone = np.abs(p.bone_lengths / truth - 1.0).mean()
    vert = np.linalg.norm(p.mesh.vertices - held_out.mesh.vertices, axis=1).mean()
    print(f"{k} components: bone error {100 * bone:4.1f}%  vertex error {vert:5.1f} mm")
