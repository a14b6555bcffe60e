"""Analytic desk-scale denoiser with real attention taps and hooks.

The toy backend is small enough to reason about yet structurally faithful:

* cross-attention for token i is a softmax over spatial locations of
  <k_i, x_t(:,u)>, so it is differentiable in the latent and region losses
  can actually move content;
* decoder features are fixed linear maps of the latent per block;
* self-attention blocks expose (Q, K, V) to intervention hooks and their
  output feeds the noise prediction, so value replacement changes the result;
* the noise prediction solves eps = H((x - sqrt(1-ab_t) * eps) / sqrt(ab_t)),
  i.e. it is a fixed contraction of its own clean-image estimate.  Along a
  DDIM inversion trajectory that estimate is invariant, which makes
  invert-then-sample round trips exact to solver tolerance while keeping the
  prediction strongly responsive to latent edits.

Everything is seeded and pure numpy; two calls with identical inputs return
bitwise-identical outputs.
"""

from __future__ import annotations

import hashlib
import io
from fnmatch import fnmatch
from typing import Callable, Sequence

import numpy as np

from ..util import rng_for
from .base import (
    AttentionIntervention,
    ConfigurationError,
    ContractViolationError,
    DenoiserOutput,
    TapConfig,
    UnknownTokenError,
    validate_latent,
)
from .schedule import NoiseSchedule, default_toy_schedule

_MIX_SCALE = 0.15       # spectral norm of the per-location channel mixer
_SELF_SCALE = 0.02      # spectral norm of each self-attention output head
_TEXT_SCALE = 0.25      # scale of the prompt head feeding the prediction
_SOLVER_TOL = 1e-13
_SOLVER_MAX_ITERS = 200
_IMAGE_FACTOR = 8


def _softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _scale_to_spectral(mat: np.ndarray, target: float) -> np.ndarray:
    top = np.linalg.svd(mat, compute_uv=False)[0]
    return mat * (target / max(top, 1e-12))


class ToyDenoiser:
    """Deterministic analytic denoiser; see module docstring."""

    cheap_decode = True  # decode_latent is a pixel repeat; previews cost nothing

    def __init__(
        self,
        seed: int,
        vocab: Sequence[str],
        latent_shape: tuple[int, int, int] = (4, 8, 8),
        num_layers: int = 3,
        embed_dim: int = 12,
        schedule: NoiseSchedule | None = None,
    ):
        if not vocab:
            raise ValueError("vocab must be non-empty")
        if len(set(vocab)) != len(vocab):
            raise ValueError("vocab tokens must be unique")
        self.seed = int(seed)
        self.latent_shape = tuple(latent_shape)
        self.num_layers = int(num_layers)
        self.embed_dim = int(embed_dim)
        self.schedule = schedule if schedule is not None else default_toy_schedule()
        self.base_vocab = frozenset(vocab)

        c = self.latent_shape[0]
        rng = rng_for(self.seed, "toy-weights")
        self._embeddings: dict[str, np.ndarray] = {
            tok: rng.standard_normal(self.embed_dim) for tok in vocab
        }
        self._weights: dict[str, np.ndarray] = {}
        self._weights["attn.key_proj"] = rng.standard_normal((c, self.embed_dim)) / np.sqrt(self.embed_dim)
        self._weights["eps.mix"] = _scale_to_spectral(rng.standard_normal((c, c)), _MIX_SCALE)
        self._weights["eps.text"] = rng.standard_normal((c, self.embed_dim)) * (
            _TEXT_SCALE / np.sqrt(self.embed_dim)
        )
        # per-location output bias: the spatially resolved trainable surface
        self._weights["eps.bias"] = np.zeros(self.latent_shape)
        self._feature_dims = [5 + i for i in range(self.num_layers)]
        for i in range(self.num_layers):
            self._weights[f"dec.{i}.self.wq"] = rng.standard_normal((c, c)) / np.sqrt(c)
            self._weights[f"dec.{i}.self.wk"] = rng.standard_normal((c, c)) / np.sqrt(c)
            self._weights[f"dec.{i}.self.wv"] = rng.standard_normal((c, c)) / np.sqrt(c)
            self._weights[f"dec.{i}.self.out"] = _scale_to_spectral(rng.standard_normal((c, c)), _SELF_SCALE)
            self._weights[f"dec.{i}.feat.proj"] = rng.standard_normal((self._feature_dims[i], c)) / np.sqrt(c)
        self._cross_temps = [1.0 + 0.25 * i for i in range(self.num_layers)]

    # ------------------------------------------------------------------ ids

    @property
    def cross_layers(self) -> list[str]:
        return [f"dec.{i}.cross" for i in range(self.num_layers)]

    @property
    def self_layers(self) -> list[str]:
        return [f"dec.{i}.self" for i in range(self.num_layers)]

    @property
    def feature_layers(self) -> list[str]:
        return [f"dec.{i}.feat" for i in range(self.num_layers)]

    @property
    def default_feature_layers(self) -> list[str]:
        # second/third decoder blocks when available
        if self.num_layers >= 3:
            return [f"dec.{i}.feat" for i in (1, 2)]
        return self.feature_layers

    def identity(self) -> str:
        vocab_hash = hashlib.sha256(",".join(sorted(self.base_vocab)).encode()).hexdigest()[:8]
        c, h, w = self.latent_shape
        return f"toy-v1/seed={self.seed}/shape={c}x{h}x{w}/blocks={self.num_layers}/vocab={vocab_hash}"

    # ----------------------------------------------------------- vocabulary

    def has_token(self, token: str) -> bool:
        return token in self._embeddings

    def add_token(self, token: str, embedding: np.ndarray | None = None, rng: np.random.Generator | None = None):
        if token in self._embeddings:
            raise ValueError(f"token {token!r} already registered")
        if embedding is None:
            rng = rng if rng is not None else rng_for(self.seed, f"token-init/{token}")
            embedding = rng.standard_normal(self.embed_dim)
        embedding = np.asarray(embedding, dtype=np.float64)
        if embedding.shape != (self.embed_dim,):
            raise ContractViolationError(f"embedding must have shape ({self.embed_dim},)")
        self._embeddings[token] = embedding.copy()

    def get_embedding(self, token: str) -> np.ndarray:
        self._require_tokens([token])
        return self._embeddings[token].copy()

    def set_embedding(self, token: str, embedding: np.ndarray):
        self._require_tokens([token])
        embedding = np.asarray(embedding, dtype=np.float64)
        if embedding.shape != (self.embed_dim,):
            raise ContractViolationError(f"embedding must have shape ({self.embed_dim},)")
        self._embeddings[token] = embedding.copy()

    def _require_tokens(self, prompt: Sequence[str]):
        missing = [tok for tok in prompt if tok not in self._embeddings]
        if missing:
            raise UnknownTokenError(f"tokens not in vocabulary: {missing}")

    # --------------------------------------------------------------- weights

    def weights(self) -> dict[str, np.ndarray]:
        return {name: arr.copy() for name, arr in self._weights.items()}

    def get_weight(self, name: str) -> np.ndarray:
        return self._weights[name].copy()

    def set_weight(self, name: str, value: np.ndarray):
        if name not in self._weights:
            raise ConfigurationError(f"unknown weight {name!r}")
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._weights[name].shape:
            raise ContractViolationError(
                f"weight {name!r} has shape {self._weights[name].shape}, got {value.shape}"
            )
        self._weights[name] = value.copy()

    def weight_names(self) -> list[str]:
        return sorted(self._weights)

    def weight_state_bytes(self) -> bytes:
        buf = io.BytesIO()
        np.savez(buf, **{name: self._weights[name] for name in self.weight_names()})
        return buf.getvalue()

    def load_weight_state(self, blob: bytes):
        with np.load(io.BytesIO(blob)) as data:
            names = sorted(data.files)
            if names != self.weight_names():
                raise ContractViolationError("weight state does not match this backend's parameters")
            for name in names:
                self.set_weight(name, data[name])

    # ------------------------------------------------------------ prediction

    def _resolve_taps(self, selector, available: list[str], default: list[str]) -> list[str]:
        if selector == "none":
            return []
        if selector == "all":
            return list(available)
        if selector == "default":
            return list(default)
        chosen = list(selector)
        unknown = [s for s in chosen if s not in available]
        if unknown:
            raise ConfigurationError(f"unknown tap layer(s) {unknown}; available: {available}")
        return chosen

    def _resolve_interventions(
        self, interventions: Sequence[AttentionIntervention]
    ) -> dict[str, list[Callable]]:
        hooks: dict[str, list[Callable]] = {lid: [] for lid in self.self_layers}
        for iv in interventions:
            matched = False
            for pattern in iv.patterns():
                for lid in self.self_layers:
                    if fnmatch(lid, pattern):
                        hooks[lid].append(iv.fn)
                        matched = True
            if not matched:
                raise ConfigurationError(
                    f"intervention patterns {iv.patterns()} match no self-attention layer; "
                    f"available: {self.self_layers}"
                )
        return hooks

    def _token_key(self, token: str) -> np.ndarray:
        return self._weights["attn.key_proj"] @ self._embeddings[token]

    def _cross_logits(self, token: str, flat_latent: np.ndarray, block: int) -> np.ndarray:
        return self._cross_temps[block] * (self._token_key(token) @ flat_latent)

    def _prediction_head(
        self,
        y: np.ndarray,
        prompt_embed: np.ndarray,
        t: int,
        hooks: dict[str, list[Callable]] | None,
        capture: dict[str, dict[str, np.ndarray]] | None = None,
    ) -> np.ndarray:
        """H(y): per-location mix + hooked self-attention blocks + prompt head."""
        out = (self._weights["eps.mix"] @ y
               + (self._weights["eps.text"] @ prompt_embed)[:, None]
               + self._weights["eps.bias"].reshape(self.latent_shape[0], -1))
        c = self.latent_shape[0]
        for i in range(self.num_layers):
            lid = f"dec.{i}.self"
            q = np.tanh(self._weights[f"dec.{i}.self.wq"] @ y)
            k = np.tanh(self._weights[f"dec.{i}.self.wk"] @ y)
            v = self._weights[f"dec.{i}.self.wv"] @ y
            if hooks:
                for fn in hooks.get(lid, ()):
                    replacement = fn(q.T.copy(), k.T.copy(), v.T.copy(), t)
                    if replacement is not None:
                        replacement = np.asarray(replacement, dtype=np.float64)
                        if replacement.shape != v.T.shape:
                            raise ContractViolationError(
                                f"intervention on {lid} returned shape {replacement.shape}, "
                                f"expected {v.T.shape}"
                            )
                        v = replacement.T
            attn = _softmax((q.T @ k) / np.sqrt(c), axis=1)
            if capture is not None:
                capture[lid] = {"q": q.T.copy(), "k": k.T.copy(), "v": v.T.copy(), "attn": attn.copy()}
            out = out + self._weights[f"dec.{i}.self.out"] @ (v @ attn.T)
        return out

    def _solve_noise(
        self,
        flat_latent: np.ndarray,
        t: int,
        prompt_embed: np.ndarray,
        hooks: dict[str, list[Callable]] | None,
        capture: dict[str, dict[str, np.ndarray]] | None = None,
    ) -> np.ndarray:
        r = self.schedule.signal(t)
        s = self.schedule.noise(t)
        if t == 0:
            return self._prediction_head(flat_latent, prompt_embed, t, hooks, capture)
        eps = np.zeros_like(flat_latent)
        for _ in range(_SOLVER_MAX_ITERS):
            nxt = self._prediction_head((flat_latent - s * eps) / r, prompt_embed, t, hooks)
            if np.max(np.abs(nxt - eps)) <= _SOLVER_TOL:
                eps = nxt
                break
            eps = nxt
        if capture is not None:
            eps = self._prediction_head((flat_latent - s * eps) / r, prompt_embed, t, hooks, capture)
        return eps

    def clean_estimate(self, latent: np.ndarray, t: int, prompt: Sequence[str]) -> np.ndarray:
        """The x0-estimate consistent with predict_noise at level t."""
        out = self.predict_noise(latent, t, prompt, taps=TapConfig.none())
        r, s = self.schedule.signal(t), self.schedule.noise(t)
        return (np.asarray(latent, dtype=np.float64) - s * out.noise) / r

    def predict_noise(
        self,
        latent: np.ndarray,
        t: int,
        prompt: Sequence[str],
        taps: TapConfig | None = None,
        interventions: Sequence[AttentionIntervention] = (),
    ) -> DenoiserOutput:
        latent = validate_latent(latent, self.latent_shape)
        if not 0 <= t <= self.schedule.num_steps:
            raise ValueError(f"t={t} outside schedule range [0, {self.schedule.num_steps}]")
        if not prompt:
            raise ValueError("prompt must be non-empty")
        self._require_tokens(prompt)
        taps = taps if taps is not None else TapConfig()
        hooks = self._resolve_interventions(interventions) if interventions else None

        c, h, w = self.latent_shape
        flat = latent.reshape(c, h * w)
        embeds = [self._embeddings[tok] for tok in prompt]
        prompt_embed = np.mean(embeds, axis=0)

        cross_ids = self._resolve_taps(taps.cross, self.cross_layers, self.cross_layers)
        cross: dict[int, list[np.ndarray]] = {}
        if cross_ids:
            blocks = [self.cross_layers.index(lid) for lid in cross_ids]
            for idx, tok in enumerate(prompt):
                cross[idx] = [
                    _softmax(self._cross_logits(tok, flat, b)).reshape(h, w) for b in blocks
                ]

        feat_ids = self._resolve_taps(taps.features, self.feature_layers, self.default_feature_layers)
        features = {}
        for lid in feat_ids:
            b = self.feature_layers.index(lid)
            proj = self._weights[f"dec.{b}.feat.proj"]
            features[lid] = (proj @ flat).reshape(proj.shape[0], h, w)

        noise = self._solve_noise(flat, t, prompt_embed, hooks)
        return DenoiserOutput(noise=noise.reshape(c, h, w), cross_attention=cross, features=features)

    # --------------------------------------------------------------- gradients

    def cross_attention_vjp(
        self,
        latent: np.ndarray,
        t: int,
        prompt: Sequence[str],
        cotangents: dict[int, dict[str, np.ndarray]],
    ) -> np.ndarray:
        """d(sum of <cotangent, attention map>)/d(latent), analytically.

        ``cotangents``: prompt token index -> {cross layer id -> [h, w] grad}.
        """
        latent = validate_latent(latent, self.latent_shape)
        self._require_tokens(prompt)
        c, h, w = self.latent_shape
        flat = latent.reshape(c, h * w)
        grad = np.zeros_like(flat)
        for tok_idx, per_layer in cotangents.items():
            if not 0 <= tok_idx < len(prompt):
                raise ConfigurationError(f"cotangent token index {tok_idx} outside prompt")
            key = self._token_key(prompt[tok_idx])
            for lid, g in per_layer.items():
                if lid not in self.cross_layers:
                    raise ConfigurationError(f"unknown cross layer {lid!r}")
                b = self.cross_layers.index(lid)
                attn = _softmax(self._cross_logits(prompt[tok_idx], flat, b))
                g = np.asarray(g, dtype=np.float64).reshape(h * w)
                ds = self._cross_temps[b] * attn * (g - float(g @ attn))
                grad += np.outer(key, ds)
        return grad.reshape(c, h, w)

    def masked_loss_and_grads(
        self,
        noisy_latent: np.ndarray,
        t: int,
        prompt: Sequence[str],
        target_noise: np.ndarray,
        mask: np.ndarray,
        weight_params: Sequence[str] = (),
        token_params: Sequence[str] = (),
    ) -> tuple[float, dict[str, np.ndarray], dict[str, np.ndarray]]:
        """Masked prediction loss plus analytic gradients for training.

        Gradients treat the clean-image estimate entering the prediction head
        as fixed (one-step approximation of the implicit solve); the returned
        loss is exact.  Parameters the loss does not reach get zero gradients.
        """
        noisy_latent = validate_latent(noisy_latent, self.latent_shape)
        self._require_tokens(prompt)
        c, h, w = self.latent_shape
        flat = noisy_latent.reshape(c, h * w)
        embeds = [self._embeddings[tok] for tok in prompt]
        prompt_embed = np.mean(embeds, axis=0)

        capture: dict[str, dict[str, np.ndarray]] = {}
        eps = self._solve_noise(flat, t, prompt_embed, None, capture)
        r, s = self.schedule.signal(t), self.schedule.noise(t)
        y = (flat - s * eps) / r if t > 0 else flat

        m = np.asarray(mask, dtype=np.float64).reshape(h * w)
        target = np.asarray(target_noise, dtype=np.float64).reshape(c, h * w)
        denom = max(1.0, c * float(m.sum()))
        resid = (eps - target) * m[None, :]
        loss = float((resid * (eps - target)).sum() / denom)

        g = 2.0 * resid / denom  # dL/d eps
        weight_grads: dict[str, np.ndarray] = {}
        for name in weight_params:
            if name == "eps.mix":
                weight_grads[name] = g @ y.T
            elif name == "eps.bias":
                weight_grads[name] = g.reshape(self.latent_shape)
            elif name == "eps.text":
                weight_grads[name] = np.outer(g.sum(axis=1), prompt_embed)
            elif name.endswith(".self.wv"):
                lid = name[: -len(".wv")]
                blk = capture[lid]
                u = self._weights[name.replace(".wv", ".out")]
                dv = (u.T @ g) @ blk["attn"]
                weight_grads[name] = dv @ y.T
            else:
                weight_grads[name] = np.zeros_like(self._weights[name])
        token_grads: dict[str, np.ndarray] = {}
        if token_params:
            d_embed = self._weights["eps.text"].T @ g.sum(axis=1)
            share = d_embed / len(prompt)
            for tok in token_params:
                token_grads[tok] = share * prompt.count(tok) if tok in prompt else np.zeros(self.embed_dim)
        return loss, weight_grads, token_grads

    # ------------------------------------------------------------------ codec

    @property
    def image_shape(self) -> tuple[int, int]:
        _, h, w = self.latent_shape
        return h * _IMAGE_FACTOR, w * _IMAGE_FACTOR

    def encode_image(self, image: np.ndarray) -> np.ndarray:
        """uint8 [H, W, 3] image -> latent via per-block channel means."""
        ih, iw = self.image_shape
        image = np.asarray(image)
        if image.shape != (ih, iw, 3):
            raise ContractViolationError(f"expected image shape {(ih, iw, 3)}, got {image.shape}")
        c, h, w = self.latent_shape
        scaled = image.astype(np.float64) / 127.5 - 1.0
        f = _IMAGE_FACTOR
        blocks = scaled.reshape(h, f, w, f, 3).mean(axis=(1, 3))  # [h, w, 3]
        latent = np.zeros((c, h, w))
        latent[:3] = np.moveaxis(blocks, -1, 0)
        if c > 3:
            latent[3] = blocks.mean(axis=-1)
        return latent

    def decode_latent(self, latent: np.ndarray) -> np.ndarray:
        """Latent -> uint8 image by channel unscaling and x8 replication."""
        latent = validate_latent(latent, self.latent_shape)
        f = _IMAGE_FACTOR
        rgb = np.repeat(np.repeat(latent[:3], f, axis=1), f, axis=2)
        img = np.clip((np.moveaxis(rgb, 0, -1) + 1.0) * 127.5, 0, 255)
        return np.round(img).astype(np.uint8)


def make_toy_denoiser(
    seed: int,
    vocab: Sequence[str],
    latent_shape: tuple[int, int, int] = (4, 8, 8),
    num_layers: int = 3,
    schedule: NoiseSchedule | None = None,
) -> ToyDenoiser:
    return ToyDenoiser(seed=seed, vocab=vocab, latent_shape=latent_shape,
                       num_layers=num_layers, schedule=schedule)
