"""How the evaluator treats crisp and blurry edge maps.

A one-pixel contour and a three-pixel-wide band around it score the same
after non-maximum suppression, but average crispness tells them apart.
"""

import numpy as np

from memo_edge import evaluation as ev
from memo_edge import synthdata as sd

h = w = 32
gt = sd.mask_to_contour(sd.rasterize_ellipse(h, w, 16, 16, 9, 6, 0.3)).astype(bool)

crisp = gt.astype(np.float64)
blurry = np.zeros((h, w))
for dy, dx, v in [(0, 0, 1.0), (1, 0, 0.6), (-1, 0, 0.6), (0, 1, 0.6), (0, -1, 0.6)]:
    blurry = np.maximum(blurry, v * np.roll(crisp, (dy, dx), axis=(0, 1)))

for name, p in [("crisp", crisp), ("blurry", blurry)]:
    report = ev.ods_ois([p], [gt], protocol="seval")
    print(f"{name:7s} SEval ODS {report.ods:.3f}  AC {ev.average_crispness(p):.3f}  pixels > 0: {np.count_nonzero(p)}")

# matching is one-to-one within the tolerance radius
shifted = np.roll(gt, 1, axis=1)
for tol in (0.5, 1.0, 1.5):
    c = ev.match_edges(shifted, gt, tol)
    print(f"shifted by one pixel, tol {tol}: tp {c.true_positives} fp {c.false_positives} fn {c.false_negatives}")
