"""Two-stage learning of per-object concepts from a single image.

Stage 1 optimizes only the placeholder token embeddings against the masked
prediction loss; the denoiser weights are verified bitwise unchanged.
Stage 2 keeps embeddings frozen (by default) and descends the denoiser
parameters chosen by a layer selector.  The result is a portable bundle:
embeddings, optional fine-tuned weight state, and training metadata.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field
from fnmatch import fnmatch
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .backend.base import Denoiser
from .backend.schedule import NoiseSchedule
from .util import rng_for, sha256_bytes

PROMPT_TEMPLATE = "a photo of {token} {noun}"

# desk-scale defaults; for real backends use steps=500/300, lr=5e-4/1e-5
STAGE1_STEPS = 200
STAGE1_LR = 1e-2
STAGE2_STEPS = 200
STAGE2_LR = 1e-3

_MANIFEST_VERSION = 1


class ConceptError(ValueError):
    """Invalid concept-learning inputs or a corrupted bundle."""


def concept_prompt(token: str, noun: str) -> list[str]:
    return PROMPT_TEMPLATE.format(token=token, noun=noun).split()


def masked_diffusion_loss(noise: np.ndarray, predicted: np.ndarray, mask: np.ndarray) -> float:
    """Mean squared prediction error over the masked spatial cells."""
    noise = np.asarray(noise, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.float64)
    if noise.shape != predicted.shape:
        raise ValueError(f"shape mismatch: {noise.shape} vs {predicted.shape}")
    m = (np.asarray(mask) != 0).astype(np.float64)
    if m.shape != noise.shape[-2:]:
        raise ValueError(f"mask shape {m.shape} does not match spatial dims {noise.shape[-2:]}")
    total = float(m.sum())
    if total == 0.0:
        warnings.warn("masked_diffusion_loss over an all-zero mask is 0 by definition")
        return 0.0
    channels = int(np.prod(noise.shape[:-2])) if noise.ndim > 2 else 1
    sq = ((noise - predicted) ** 2 * m).sum()
    return float(sq / max(1.0, channels * total))


@dataclass
class ConceptObject:
    object_id: str
    token: str
    noun: str
    embedding: np.ndarray


@dataclass
class ConceptBundle:
    backend_identity: str
    objects: list[ConceptObject]
    weight_state: bytes | None = None
    metadata: dict = field(default_factory=dict)
    loss_curve: list[tuple[int, str, float]] = field(default_factory=list)  # (step, object, loss)

    def object(self, oid: str) -> ConceptObject:
        for o in self.objects:
            if o.object_id == oid:
                return o
        raise KeyError(oid)

    def tokens(self) -> dict[str, str]:
        return {o.object_id: o.token for o in self.objects}

    def prompt_for(self, oid: str) -> list[str]:
        obj = self.object(oid)
        return concept_prompt(obj.token, obj.noun)


def _validate_masks(denoiser: Denoiser, masks: Mapping[str, np.ndarray]):
    h, w = denoiser.latent_shape[1:]
    for oid, m in masks.items():
        m = np.asarray(m)
        if m.shape != (h, w):
            raise ConceptError(f"mask for {oid!r} must be at latent resolution {(h, w)}")
        if not (m != 0).any():
            raise ConceptError(f"mask for {oid!r} is empty")


def _register_tokens(denoiser, objects: Sequence[tuple[str, str, str]], seed: int):
    for oid, token, _ in objects:
        if token in denoiser.base_vocab:
            raise ConceptError(f"placeholder {token!r} collides with the base vocabulary")
        if not denoiser.has_token(token):
            denoiser.add_token(token, rng=rng_for(seed, f"token-init/{token}"))


def _training_step(denoiser, x0, schedule: NoiseSchedule, rng: np.random.Generator):
    t = int(rng.integers(1, schedule.num_steps + 1))
    eps = rng.standard_normal(denoiser.latent_shape)
    x_t = schedule.signal(t) * x0 + schedule.noise(t) * eps
    return x_t, t, eps


def learn_stage1_embeddings(
    denoiser,
    x0: np.ndarray,
    masks: Mapping[str, np.ndarray],
    objects: Sequence[tuple[str, str, str]],
    schedule: NoiseSchedule,
    steps: int = STAGE1_STEPS,
    lr: float = STAGE1_LR,
    seed: int = 0,
) -> ConceptBundle:
    """Optimize placeholder embeddings only.

    ``objects`` lists (object_id, placeholder_token, class_noun); the prompt
    per object is the standard template.  Denoiser weights are checked
    bitwise unchanged afterwards.
    """
    if not objects:
        raise ConceptError("no objects to learn")
    ids = [o[0] for o in objects]
    if sorted(ids) != sorted(masks):
        raise ConceptError("objects and masks disagree on object ids")
    if len(set(o[1] for o in objects)) != len(objects):
        raise ConceptError("placeholder tokens must be unique")
    _validate_masks(denoiser, masks)
    _register_tokens(denoiser, objects, seed)
    prompts = {oid: concept_prompt(token, noun) for oid, token, noun in objects}
    for oid, token, _ in objects:
        if token not in prompts[oid]:
            raise ConceptError(f"prompt for {oid!r} lacks its placeholder {token!r}")

    frozen = denoiser.weight_state_bytes()
    rng = rng_for(seed, "stage1")
    curve: list[tuple[int, str, float]] = []
    tokens = {oid: token for oid, token, _ in objects}
    for step in range(int(steps)):
        x_t, t, eps = _training_step(denoiser, x0, schedule, rng)
        oid = ids[int(rng.integers(0, len(ids)))]
        loss, _, tg = denoiser.masked_loss_and_grads(
            x_t, t, prompts[oid], eps, masks[oid], token_params=[tokens[oid]]
        )
        denoiser.set_embedding(tokens[oid],
                               denoiser.get_embedding(tokens[oid]) - lr * tg[tokens[oid]])
        curve.append((step, oid, loss))

    if denoiser.weight_state_bytes() != frozen:
        raise ConceptError("stage 1 mutated denoiser weights; embedding-only contract broken")
    bundle = ConceptBundle(
        backend_identity=denoiser.identity(),
        objects=[ConceptObject(oid, token, noun, denoiser.get_embedding(token))
                 for oid, token, noun in objects],
        metadata={
            "stage": 1, "steps": int(steps), "lr": lr, "seed": seed,
            "prompt_template": PROMPT_TEMPLATE,
        },
        loss_curve=curve,
    )
    return bundle


def select_weights(denoiser, layer_selector: Sequence[str]) -> list[str]:
    if not layer_selector:
        raise ConceptError("layer selector is empty")
    names = denoiser.weight_names()
    matched = [n for n in names if any(fnmatch(n, pat) for pat in layer_selector)]
    if not matched:
        raise ConceptError(f"layer selector {list(layer_selector)} matches no parameters")
    return matched


def learn_stage2_finetune(
    denoiser,
    bundle: ConceptBundle,
    x0: np.ndarray,
    masks: Mapping[str, np.ndarray],
    schedule: NoiseSchedule,
    steps: int = STAGE2_STEPS,
    lr: float = STAGE2_LR,
    layer_selector: Sequence[str] = ("*",),
    seed: int = 0,
    train_embeddings: bool = False,
) -> ConceptBundle:
    """Fine-tune selected denoiser parameters under the stage-1 bundle."""
    if bundle.metadata.get("stage") not in (1, 2):
        raise ConceptError("stage-2 fine-tuning needs a stage-1 bundle")
    if bundle.backend_identity != denoiser.identity():
        raise ConceptError(
            f"bundle was trained on {bundle.backend_identity!r}, "
            f"this backend is {denoiser.identity()!r}"
        )
    if sorted(o.object_id for o in bundle.objects) != sorted(masks):
        raise ConceptError("bundle and masks disagree on object ids")
    _validate_masks(denoiser, masks)
    matched = select_weights(denoiser, layer_selector)

    for obj in bundle.objects:
        if not denoiser.has_token(obj.token):
            denoiser.add_token(obj.token, embedding=obj.embedding)
        else:
            denoiser.set_embedding(obj.token, obj.embedding)

    ids = [o.object_id for o in bundle.objects]
    prompts = {o.object_id: concept_prompt(o.token, o.noun) for o in bundle.objects}
    tokens = bundle.tokens()
    rng = rng_for(seed, "stage2")
    curve: list[tuple[int, str, float]] = []
    for step in range(int(steps)):
        x_t, t, eps = _training_step(denoiser, x0, schedule, rng)
        oid = ids[int(rng.integers(0, len(ids)))]
        token_params = [tokens[oid]] if train_embeddings else []
        loss, wg, tg = denoiser.masked_loss_and_grads(
            x_t, t, prompts[oid], eps, masks[oid],
            weight_params=matched, token_params=token_params,
        )
        for name in matched:
            denoiser.set_weight(name, denoiser.get_weight(name) - lr * wg[name])
        if train_embeddings:
            denoiser.set_embedding(tokens[oid],
                                   denoiser.get_embedding(tokens[oid]) - lr * tg[tokens[oid]])
        curve.append((step, oid, loss))

    return ConceptBundle(
        backend_identity=denoiser.identity(),
        objects=[ConceptObject(o.object_id, o.token, o.noun, denoiser.get_embedding(o.token))
                 for o in bundle.objects],
        weight_state=denoiser.weight_state_bytes(),
        metadata={
            "stage": 2, "steps": int(steps), "lr": lr, "seed": seed,
            "layer_selector": list(layer_selector),
            "train_embeddings": train_embeddings,
            "prompt_template": PROMPT_TEMPLATE,
            "stage1": bundle.metadata,
        },
        loss_curve=curve,
    )


def average_masked_loss(
    denoiser,
    x0: np.ndarray,
    masks: Mapping[str, np.ndarray],
    prompts: Mapping[str, Sequence[str]],
    schedule: NoiseSchedule,
    samples: int = 16,
    seed: int = 0,
) -> float:
    """Deterministic evaluation: masked loss averaged over a fixed sample set."""
    rng = rng_for(seed, "concept-eval")
    ids = sorted(masks)
    total = 0.0
    count = 0
    for _ in range(samples):
        x_t, t, eps = _training_step(denoiser, x0, schedule, rng)
        for oid in ids:
            loss, _, _ = denoiser.masked_loss_and_grads(x_t, t, prompts[oid], eps, masks[oid])
            total += loss
            count += 1
    return total / count


# ------------------------------------------------------------- persistence


def _pack_embeddings(objects: Sequence[ConceptObject]) -> bytes:
    arr = np.stack([o.embedding for o in objects]).astype("<f8")
    header = np.array(arr.shape, dtype="<u4").tobytes()
    return header + arr.tobytes()


def _unpack_embeddings(blob: bytes) -> np.ndarray:
    n, d = np.frombuffer(blob[:8], dtype="<u4")
    arr = np.frombuffer(blob[8:], dtype="<f8")
    if arr.size != n * d:
        raise ConceptError("embeddings.bin size does not match its header")
    return arr.reshape(int(n), int(d)).copy()


def save_bundle(bundle: ConceptBundle, path: str | Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    emb = _pack_embeddings(bundle.objects)
    (path / "embeddings.bin").write_bytes(emb)
    hashes = {"embeddings.bin": sha256_bytes(emb)}
    if bundle.weight_state is not None:
        (path / "weights.bin").write_bytes(bundle.weight_state)
        hashes["weights.bin"] = sha256_bytes(bundle.weight_state)
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["step", "object", "loss"])
    writer.writerows(bundle.loss_curve)
    (path / "loss_curve.csv").write_text(buf.getvalue())
    manifest = {
        "version": _MANIFEST_VERSION,
        "backend_identity": bundle.backend_identity,
        "objects": [{"object_id": o.object_id, "token": o.token, "noun": o.noun}
                    for o in bundle.objects],
        "metadata": bundle.metadata,
        "hashes": hashes,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return path


def load_bundle(path: str | Path, expected_identity: str | None = None) -> ConceptBundle:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise ConceptError(f"{path} is not a concept bundle (no manifest.json)")
    if manifest.get("version") != _MANIFEST_VERSION:
        raise ConceptError(f"unsupported bundle version {manifest.get('version')!r}")
    identity = manifest["backend_identity"]
    if expected_identity is not None and identity != expected_identity:
        raise ConceptError(
            f"bundle was trained on {identity!r}, expected {expected_identity!r}"
        )
    emb_blob = (path / "embeddings.bin").read_bytes()
    if sha256_bytes(emb_blob) != manifest["hashes"]["embeddings.bin"]:
        raise ConceptError("embeddings.bin does not match its manifest hash")
    embeddings = _unpack_embeddings(emb_blob)
    if embeddings.shape[0] != len(manifest["objects"]):
        raise ConceptError("embedding row count does not match the object list")
    weight_state = None
    if "weights.bin" in manifest["hashes"]:
        weight_state = (path / "weights.bin").read_bytes()
        if sha256_bytes(weight_state) != manifest["hashes"]["weights.bin"]:
            raise ConceptError("weights.bin does not match its manifest hash")
    curve = []
    curve_path = path / "loss_curve.csv"
    if curve_path.exists():
        rows = list(csv.reader(io.StringIO(curve_path.read_text())))
        curve = [(int(s), o, float(l)) for s, o, l in rows[1:]]
    objects = [
        ConceptObject(entry["object_id"], entry["token"], entry["noun"], embeddings[i])
        for i, entry in enumerate(manifest["objects"])
    ]
    return ConceptBundle(
        backend_identity=identity,
        objects=objects,
        weight_state=weight_state,
        metadata=manifest["metadata"],
        loss_curve=curve,
    )


def apply_bundle(denoiser, bundle: ConceptBundle):
    """Install a bundle's embeddings and weight state into a backend."""
    if bundle.backend_identity != denoiser.identity():
        raise ConceptError(
            f"bundle was trained on {bundle.backend_identity!r}, "
            f"this backend is {denoiser.identity()!r}"
        )
    for obj in bundle.objects:
        if not denoiser.has_token(obj.token):
            denoiser.add_token(obj.token, embedding=obj.embedding)
        else:
            denoiser.set_embedding(obj.token, obj.embedding)
    if bundle.weight_state is not None:
        denoiser.load_weight_state(bundle.weight_state)
