"""
Per-object concept tokens from one image
========================================

"""

# Moving an object is more faithful when the model has a token that means
# *this particular* object rather than "a cat" in general. Concepts are
# learned from the single source image in two stages: first new token
# embeddings (weights frozen), then a light touch-up of the denoiser.
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from relayout.layout import layout_from_boxes, save_layout
from relayout.pipeline import resolve_backend

work = Path(tempfile.mkdtemp(prefix="relayout-demo-"))
rng = np.random.default_rng(1)
image = rng.integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
Image.fromarray(image).save(work / "source.png")

layout = layout_from_boxes(64, 64, [("cat", "cat", (8, 8, 16, 16))])
save_layout(layout, work / "source_layout.json")

# Stage 1: optimize one embedding per object against the denoising loss
# restricted to that object's mask. The backend weights stay untouched.
from relayout.concept_learning import (
    learn_stage1_embeddings,
    learn_stage2_finetune,
    save_bundle,
    average_masked_loss,
)

backend = resolve_backend("toy", 0, layout)
x0 = backend.encode_image(image)
masks = layout.masks_at_resolution(x0.shape[-2:])
objects = [(obj.id, f"<{obj.id}>", obj.token) for obj in layout.objects]

bundle = learn_stage1_embeddings(backend, x0, masks, objects,
                                 backend.schedule, steps=100)
prompts = {oid: bundle.prompt_for(oid) for oid in masks}
after_stage1 = average_masked_loss(backend, x0, masks, prompts, backend.schedule)
print("masked loss after stage 1:", round(after_stage1, 4))

# Stage 2: brief fine-tune of the denoiser weights with the embeddings
# fixed, which tightens the reconstruction around each object.
bundle = learn_stage2_finetune(backend, bundle, x0, masks,
                               backend.schedule, steps=100)
after_stage2 = average_masked_loss(backend, x0, masks, prompts, backend.schedule)
print("masked loss after stage 2:", round(after_stage2, 4))

# The bundle is a directory: a manifest plus the learned arrays. Edits pass
# it back via spec_from_files(..., concepts=...) / `relayout edit --concepts`;
# the pipeline checks it was trained on the same backend before applying it.
path = save_bundle(bundle, work / "bundle")
print("saved bundle:", path)

from relayout.pipeline import edit_layout, spec_from_files

target = layout_from_boxes(64, 64, [("cat", "cat", (40, 8, 16, 16))])
save_layout(target, work / "target_layout.json")
spec = spec_from_files(
    work / "source.png",
    work / "source_layout.json",
    work / "target_layout.json",
    work / "edited.png",
    concepts=str(path),
    seed=0,
)
_, manifest = edit_layout(spec)
print("edit with concepts, region loss:",
      round(manifest["initial_losses"]["cat"], 4), "->",
      round(manifest["final_losses"]["cat"], 4))
