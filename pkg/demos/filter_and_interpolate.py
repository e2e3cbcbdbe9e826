"""Filter a handful of annotation records, then walk a slerp grid between four embeddings.

    python demos/filter_and_interpolate.py
"""

import numpy as np

from lambda_prior.dataprep import AnnotationRecord, Box, SubjectSpan, filter_record
from lambda_prior.embedspace import interp_grid, lerp, slerp
from lambda_prior.evalkit import interp_smoothness


def record(image_id, box_wh, logit=0.35, bg=0.05, size=(1024, 1024)):
    w, h = box_wh
    return AnnotationRecord(
        image_id, size[0], size[1], ("a", "dog", "on", "grass"), (SubjectSpan("dog", 1, 2),),
        (Box(10.0, 10.0, 10.0 + w, 10.0 + h, logit),), (0.5 * w * h,), (bg,), 1,
    )


records = [
    record("kept", (400, 200)),
    record("tiny box", (40, 40)),
    record("weak detection", (400, 200), logit=0.1),
    record("busy background", (400, 200), bg=0.3),
    record("low resolution", (100, 50), size=(256, 256)),
]
for rec in records:
    res = filter_record(rec, verbose=True)
    verdict = "accepted" if res.accepted else f"rejected by {res.rule}"
    print(f"{rec.image_id:>16}: {verdict}  failures={list(res.failures)}")

rng = np.random.default_rng(0)
corners = [v / np.linalg.norm(v) for v in rng.standard_normal((4, 16))]
a, b = corners[0], corners[1]
print(f"\nmidpoint norm: slerp {np.linalg.norm(slerp(a, b, 0.5)):.4f}, lerp {np.linalg.norm(lerp(a, b, 0.5)):.4f}")
for method in ("slerp", "lerp"):
    g = interp_grid(*corners, 5, 5, method=method)
    norms = np.linalg.norm(g.cells, axis=-1)
    print(f"{method}: 5x5 grid, cell norms in [{norms.min():.3f}, {norms.max():.3f}], "
          f"interp_smoothness {interp_smoothness(g):.5f}")
