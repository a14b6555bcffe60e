"""Layout specifications: ordered object masks over an image, JSON + PNG I/O.

A layout lists objects back-to-front: the last object in the list is
front-most wherever masks overlap, and every consumer of layouts (noise
fusion, composites, region decomposition) follows that rule.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .util import bbox_of_mask, mask_to_resolution


class LayoutError(ValueError):
    """A layout violates the schema or its invariants."""


@dataclass
class LayoutObject:
    id: str
    token: str              # prompt phrase for the object, whitespace-separated
    mask: np.ndarray        # bool [H, W]
    bbox: tuple[int, int, int, int] | None = None  # (x, y, w, h)

    def tokens(self) -> list[str]:
        return self.token.split()


@dataclass
class LayoutSpec:
    width: int
    height: int
    objects: list[LayoutObject] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.width <= 0 or self.height <= 0:
            raise LayoutError("layout dimensions must be positive")
        seen = set()
        for obj in self.objects:
            if obj.id in seen:
                raise LayoutError(f"duplicate object id {obj.id!r}")
            seen.add(obj.id)
            obj.mask = np.asarray(obj.mask).astype(bool)
            if obj.mask.shape != (self.height, self.width):
                raise LayoutError(
                    f"object {obj.id!r} mask shape {obj.mask.shape} does not match "
                    f"layout {(self.height, self.width)}"
                )
            if not obj.mask.any():
                raise LayoutError(f"object {obj.id!r} has an empty mask")
            if not obj.token.strip():
                raise LayoutError(f"object {obj.id!r} has an empty token phrase")
            derived = bbox_of_mask(obj.mask)
            if obj.bbox is None:
                obj.bbox = derived
            elif tuple(obj.bbox) != derived:
                raise LayoutError(
                    f"object {obj.id!r} bbox {tuple(obj.bbox)} is not its mask's "
                    f"bounding box {derived}"
                )
            else:
                obj.bbox = tuple(obj.bbox)

    def ids(self) -> list[str]:
        return [o.id for o in self.objects]

    def object(self, oid: str) -> LayoutObject:
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(oid)

    def masks_at_resolution(self, resolution: tuple[int, int]) -> dict[str, np.ndarray]:
        return {o.id: mask_to_resolution(o.mask, resolution) for o in self.objects}


def _load_mask_png(path: Path, width: int, height: int) -> np.ndarray:
    img = Image.open(path).convert("L")
    arr = np.asarray(img)
    if arr.shape != (height, width):
        raise LayoutError(f"mask {path.name} is {arr.shape[::-1]}, layout says {(width, height)}")
    return arr >= 128


def load_layout(path: str | Path) -> LayoutSpec:
    """Read a layout JSON; mask paths resolve relative to the JSON file."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise LayoutError(f"{path.name}: not valid JSON ({e})") from e
    for key in ("width", "height", "objects"):
        if key not in doc:
            raise LayoutError(f"{path.name}: missing {key!r}")
    objects = []
    for entry in doc["objects"]:
        for key in ("id", "token", "mask"):
            if key not in entry:
                raise LayoutError(f"{path.name}: object missing {key!r}")
        mask = _load_mask_png(path.parent / entry["mask"], doc["width"], doc["height"])
        bbox = tuple(entry["bbox"]) if "bbox" in entry else None
        objects.append(LayoutObject(id=entry["id"], token=entry["token"], mask=mask, bbox=bbox))
    return LayoutSpec(width=doc["width"], height=doc["height"], objects=objects)


def save_layout(layout: LayoutSpec, path: str | Path) -> Path:
    """Write layout JSON plus one mask PNG per object next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    for obj in layout.objects:
        mask_name = f"{path.stem}_{obj.id}_mask.png"
        Image.fromarray((obj.mask.astype(np.uint8)) * 255, mode="L").save(path.parent / mask_name)
        entries.append({"id": obj.id, "token": obj.token, "mask": mask_name,
                        "bbox": list(obj.bbox)})
    doc = {"width": layout.width, "height": layout.height, "objects": entries}
    path.write_text(json.dumps(doc, indent=2))
    return path


def layout_to_jsonable(layout: LayoutSpec) -> dict:
    """Self-contained dict form with masks packed inline (base64 bits)."""
    objects = []
    for obj in layout.objects:
        objects.append({
            "id": obj.id,
            "token": obj.token,
            "bbox": list(obj.bbox),
            "mask_bits": base64.b64encode(np.packbits(obj.mask)).decode("ascii"),
        })
    return {"width": layout.width, "height": layout.height, "objects": objects}


def layout_from_jsonable(doc: dict) -> LayoutSpec:
    """Inverse of layout_to_jsonable."""
    try:
        width, height = int(doc["width"]), int(doc["height"])
        objects = []
        for entry in doc["objects"]:
            bits = np.unpackbits(
                np.frombuffer(base64.b64decode(entry["mask_bits"]), dtype=np.uint8)
            )
            mask = bits[: width * height].reshape(height, width).astype(bool)
            objects.append(LayoutObject(
                id=entry["id"], token=entry["token"], mask=mask,
                bbox=tuple(entry["bbox"]) if entry.get("bbox") else None,
            ))
    except (KeyError, TypeError) as e:
        raise LayoutError(f"malformed inline layout: {e}") from e
    return LayoutSpec(width=width, height=height, objects=objects)


def layout_from_boxes(
    width: int,
    height: int,
    boxes: list[tuple[str, str, tuple[int, int, int, int]]],
) -> LayoutSpec:
    """Convenience builder: rectangular masks from (id, token, bbox) triples."""
    objects = []
    for oid, token, (x, y, w, h) in boxes:
        mask = np.zeros((height, width), dtype=bool)
        mask[y:y + h, x:x + w] = True
        objects.append(LayoutObject(id=oid, token=token, mask=mask))
    return LayoutSpec(width=width, height=height, objects=objects)
