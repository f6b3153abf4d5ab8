import hashlib
import json
import logging
import os
import tempfile
import threading
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from attention_core import DTYPE, AttentionMaskSpec, ModelWeights, ScoreVector, forward_layers
from errors import LayoutMismatchError, SequenceFormatError
from videogen import homogeneous, read_tensor_blob, write_tensor_blob

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA = 0.6


@dataclass(frozen=True)
class ProfileLayout:
    frames: int
    tokens_per_frame: int
    n_text: int
    prune_layer: int

    @property
    def n_visual(self) -> int:
        return self.frames * self.tokens_per_frame

    @property
    def length(self) -> int:
        return self.n_visual + self.n_text


@dataclass(frozen=True)
class BiasProfile:
    bias: np.ndarray  # b_{i,T}, one value per visual position
    layout: ProfileLayout
    mask_signature: str
    weights_checksum: str

    @property
    def key(self) -> str:
        return profile_key(self.layout, self.mask_signature, self.weights_checksum)


def masks_signature(masks: Sequence[AttentionMaskSpec]) -> str:
    return hashlib.sha1("|".join(m.signature() for m in masks).encode("ascii")).hexdigest()[:16]


def profile_key(layout: ProfileLayout, mask_signature: str, weights_checksum: str) -> str:
    return (f"nv{layout.n_visual}_nt{layout.n_text}_l{layout.prune_layer}"
            f"_m{mask_signature}_w{weights_checksum[:16]}")


def _scoring_masks(layout: ProfileLayout, masks: Sequence[AttentionMaskSpec]):
    if len(masks) < layout.prune_layer:
        raise LayoutMismatchError(f"need masks for layers 1..{layout.prune_layer}, got {len(masks)}")
    used = list(masks[:layout.prune_layer])
    for i, mask in enumerate(used):
        if mask.size != layout.length:
            raise LayoutMismatchError(f"mask for layer {i + 1} covers {mask.size} tokens, layout has {layout.length}")
    return used


def estimate_bias(weights: ModelWeights, layout: ProfileLayout,
                  masks: Sequence[AttentionMaskSpec]) -> BiasProfile:
    """One prefill up to the prune layer over homogeneous input; its scores are the bias."""
    used = _scoring_masks(layout, masks)
    seq = homogeneous(layout.frames, layout.tokens_per_frame, layout.n_text, weights.config)
    trace = forward_layers(seq.hidden(), np.arange(seq.length), weights, used, 1, layout.prune_layer,
                           capture_layer=layout.prune_layer, n_visual=seq.n_visual)
    bias = trace.scores.values
    logger.debug(f"Estimated bias profile N_v={layout.n_visual}: spread={float(bias.max() - bias.min()):.4f}")
    return BiasProfile(bias=bias, layout=layout, mask_signature=masks_signature(used),
                       weights_checksum=weights.checksum)


def debias(scores: ScoreVector, profile: BiasProfile, lam: float = DEFAULT_LAMBDA,
           layout: Optional[ProfileLayout] = None) -> ScoreVector:
    """Subtracts lam * bias from the ranking scores; hidden states are untouched."""
    if len(scores.values) != len(profile.bias):
        raise LayoutMismatchError(f"scores have {len(scores.values)} entries, profile has {len(profile.bias)}")
    if layout is not None and layout != profile.layout:
        raise LayoutMismatchError(f"profile layout {profile.layout} does not match {layout}")
    values = scores.values.astype(np.float64) - lam * profile.bias.astype(np.float64)
    return ScoreVector(values=values.astype(DTYPE), layer=scores.layer, debiased=True)


class ProfileStore:
    """Bias profiles keyed by layout, mask signature and weights; optionally persisted to cache_dir."""

    def __init__(self, cache_dir: Optional[str] = None):
        self.cache_dir = cache_dir
        self._profiles: Dict[str, BiasProfile] = {}
        self._write_lock = threading.Lock()

    def get(self, weights: ModelWeights, layout: ProfileLayout,
            masks: Sequence[AttentionMaskSpec]) -> BiasProfile:
        key = profile_key(layout, masks_signature(_scoring_masks(layout, masks)), weights.checksum)
        profile = self._profiles.get(key)
        if profile is not None:
            return profile
        with self._write_lock:
            profile = self._profiles.get(key) or self._load(key, layout)
            if profile is None:
                profile = estimate_bias(weights, layout, masks)
                self._save(profile)
                logger.info(f"Bias profile cache miss: estimated {key}")
            self._profiles[key] = profile
        return profile

    def _paths(self, key: str):
        return os.path.join(self.cache_dir, f"{key}.bin"), os.path.join(self.cache_dir, f"{key}.json")

    def _load(self, key: str, layout: ProfileLayout) -> Optional[BiasProfile]:
        if not self.cache_dir:
            return None
        bin_path, json_path = self._paths(key)
        if not (os.path.exists(bin_path) and os.path.exists(json_path)):
            return None
        try:
            with open(json_path, "r", encoding="utf-8") as f:
                sidecar = json.load(f)
            _, values = read_tensor_blob(bin_path)
            cached_layout = ProfileLayout(**sidecar["layout"])
            mask_signature, checksum = sidecar["mask_signature"], sidecar["weights_checksum"]
        except (OSError, ValueError, KeyError, TypeError, SequenceFormatError) as e:
            logger.warning(f"Ignoring unreadable cached profile {key}: {e!r}")
            return None
        if cached_layout != layout or values.size != layout.n_visual:
            logger.warning(f"Cached profile {key} does not match its layout; re-estimating")
            return None
        logger.debug(f"Loaded cached bias profile {key}")
        return BiasProfile(bias=values, layout=layout, mask_signature=mask_signature, weights_checksum=checksum)

    def _save(self, profile: BiasProfile):
        if not self.cache_dir:
            return
        os.makedirs(self.cache_dir, exist_ok=True)
        bin_path, json_path = self._paths(profile.key)
        layout = profile.layout
        write_tensor_blob(bin_path, {
            "n_visual": layout.n_visual,
            "n_text": layout.n_text,
            "hidden": 1,
            "frames": layout.frames,
            "tokens_per_frame": layout.tokens_per_frame,
        }, [profile.bias])
        sidecar = {
            "layout": asdict(layout),
            "mask_signature": profile.mask_signature,
            "weights_checksum": profile.weights_checksum,
        }
        fd, tmp_path = tempfile.mkstemp(dir=self.cache_dir, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(sidecar, f, indent=2, sort_keys=True)
        os.replace(tmp_path, json_path)
