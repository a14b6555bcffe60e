"""
Scoring a batch of finished edits
=================================

"""

# Each finished edit can be scored on two axes: layout alignment (did the
# object end up where the target layout asked?) and visual similarity
# (does it still look like the same object?). A "case" is a directory with
# the source/edited images, both layouts, and optional evidence.
import json
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from relayout.layout import layout_from_boxes, save_layout
from relayout.pipeline import edit_layout, spec_from_files

cases = Path(tempfile.mkdtemp(prefix="relayout-demo-")) / "cases"

# Run two small edits with different seeds and lay out their case dirs.
for seed in (0, 1):
    case = cases / f"seed-{seed}"
    case.mkdir(parents=True)
    rng = np.random.default_rng(seed)
    image = rng.integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
    Image.fromarray(image).save(case / "source.png")
    src = layout_from_boxes(64, 64, [("cat", "cat", (8, 8, 16, 16))])
    tar = layout_from_boxes(64, 64, [("cat", "cat", (40, 8, 16, 16))])
    save_layout(src, case / "source_layout.json")
    save_layout(tar, case / "target_layout.json")
    spec = spec_from_files(case / "source.png", case / "source_layout.json",
                           case / "target_layout.json", case / "edited.png",
                           seed=seed)
    edit_layout(spec)
    # The run manifest doubles as alignment evidence: it stores the final
    # attention map per object, and the scorer picks it up by glob.
    print("ran", case.name)

# Score the whole directory. Alignment comes from the manifests here; drop
# a segmentation/ dir with per-object masks into a case to use IoU instead
# (segmentation wins when both are present, and the mode is always named).
from relayout.evaluation import evaluate_cases

report = evaluate_cases(cases, out_path=cases / "report.json")
print()
print(json.dumps(report["summary"], indent=2))

# Visual similarity defaults to a hash-based stand-in embedder, which is
# deterministic but crude: identical crops score 1.0, anything else is
# noise around 0. Pass your own embedder to evaluate_cases for real use.
for name, case in sorted(report["cases"].items()):
    print(name, "alignment:", round(case["alignment"]["score"], 4),
          f"({case['alignment']['mode']})")
