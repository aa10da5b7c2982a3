"""
Synthetic scenes and the point renderer
=======================================

Generate the four colored training shapes, write each scene to disk and show
what the renderer does with masking radius and neighbor count.
"""

from pathlib import Path

import numpy as np

from pcdiff.io import SHAPE_KINDS, gen_synthetic, save_png, save_scene
from pcdiff.renderer import render_details

out = Path("demo_scenes")

for i, kind in enumerate(SHAPE_KINDS):
    s = gen_synthetic(kind, 256, seed=i)
    save_scene(out, s)
    covered = (s.image.rgb < 0.99).any(axis=-1).mean()
    print(f"{kind:20s} near={s.render['near']:.2f} far={s.render['far']:.2f} coverage={covered:.2f}")

# %%
# Smaller masks leave holes between points; larger ones fatten the silhouette
s = gen_synthetic("two-tone-chairlike", 256, seed=3)
for radius in (0.1, 0.3, 0.6):
    det = render_details(s.cloud.positions, s.cloud.colors, s.camera, s.render_config(mask_radius=radius))
    img = det.image.data
    save_png(out / f"chair_mask_{radius:.1f}.png", img)
    print(f"mask_radius={radius}: active samples {det.mask.mean():.3f}, "
          f"mean residual transmittance {det.residual.mean():.3f}")

# %%
# Every ray's weights plus what reaches the background sum to one
print("max |sum(w) + residual - 1| =", np.abs(det.weights.sum(1) + det.residual - 1).max())
