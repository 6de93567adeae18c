"""
Synthetic detection scenes
==========================

Discs, rings, stars and ellipses on textured noise. Everything is a pure
function of the seed.
"""

import tempfile
from pathlib import Path

import numpy as np

from roiattn.data import (
    CLASS_NAMES,
    assign_and_encode,
    decode_deltas,
    dump_scenes,
    generate_scene,
    iou_matrix,
    make_proposals,
)

scene = generate_scene(7)
print("image", scene.image.shape, scene.image.dtype)
for obj in scene.objects:
    print(f"  {CLASS_NAMES[obj.label]:>8}  {obj.box}")

# proposals: 8 jittered copies per object plus 24 random boxes
props = make_proposals(scene, seed=0)
print(len(props), "proposals for", len(scene.objects), "objects")

sample = assign_and_encode(props, scene.boxes, scene.labels, weights=(10, 10, 5, 5))
print("foreground", int(sample.fg_mask.sum()), "of", len(props))

# deltas decode back to the matched boxes
p = np.array([b.as_array() for b in props])[sample.fg_mask]
back = decode_deltas(sample.target_deltas[sample.fg_mask], p, (10, 10, 5, 5))
print("best IoU of decoded boxes with GT:", iou_matrix(back, scene.boxes).max(axis=1).min().round(6))

with tempfile.TemporaryDirectory() as tmp:
    paths = dump_scenes(tmp, [7, 8])
    print([p.name for p in paths])
    print(Path(paths[0]).with_suffix(".txt").read_text(encoding="utf-8"))
