"""
Where the puzzle model looks
============================

The gradient of one predicted assignment with respect to the input pixels
shows which parts of each patch drive the decision.  The map for "patch i
belongs in cell j" is saved as a grey-level image next to the input.
"""
import sys
from pathlib import Path

import numpy as np

from permlearn import data, model
from permlearn.permcore import Permutation
from permlearn.sinkhorn import SinkhornConfig

out_dir = Path(sys.argv[1] if len(sys.argv) > 1 else "saliency_output")
out_dir.mkdir(parents=True, exist_ok=True)

rng = np.random.default_rng(3)
spec = data.PatchGridSpec(grid=3, patch_px=16)
images = [data.procedural_image(rng, size=48) for _ in range(600)]
x = data.patch_sequences(images, spec)
res = model.train(x[:500], model.TrainConfig(iterations=2000), x[500:], hidden=64, hidden2=128)
print("final held-out row: iter,loss,kt,hs,ne =", res.log[-1].csv())

img = images[550]
patches = data.grid_split(img, spec)
feats = np.stack([data.patch_features(p) for p in patches])
perm, q, _ = model.predict(res.params, feats, SinkhornConfig())
print("prediction on the unshuffled image:", perm.pi.tolist())

# corner cell 0 and centre cell 4
for cell in (0, 4):
    sal = model.saliency(res.params, feats, SinkhornConfig(), [(cell, cell)], channels=3)
    maps = sal.reshape(9, 16, 16)
    maps = (255 * maps / maps.max()).astype(np.uint8)
    tiled = data.reassemble(list(maps), Permutation.identity(9))
    data.save_pixmap(tiled, out_dir / f"saliency_cell{cell}.pgm")
    share = sal.sum(axis=1) / sal.sum()
    print(f"cell {cell}: gradient share per patch", np.round(share, 2).tolist())
data.save_pixmap(img, out_dir / "input.ppm")
print(f"maps written to {out_dir}/")
