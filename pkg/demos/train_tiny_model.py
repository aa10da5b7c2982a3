"""
A few minutes of training
=========================

Train a narrow model on two shapes for a few hundred steps, then reconstruct
both from their reference images and report CD / EMD.  Numbers are far from
converged; this only shows the moving parts.
"""

import logging

from pcdiff.io import gen_synthetic, save_ply
from pcdiff.pipeline import TrainConfig, evaluate, format_report, train

logging.basicConfig(level=logging.INFO, format="%(message)s")

data = [gen_synthetic("sphere", 128, seed=0), gen_synthetic("cube", 128, seed=1)]
cfg = TrainConfig(steps=300, batch_size=2, width=64, code_dim=64, channels=(8, 16, 32, 64),
                  lr=2e-3, lr_final=1e-5, w_cham=0.1, grad_clip=10.0, log_every=50)
result = train(cfg, data, out="tiny.pcdm")

# %%
rows, preds = evaluate(result.model, data)
print(format_report(rows))
for s, p in zip(data, preds):
    save_ply(f"{s.name}_pred.ply", p)
