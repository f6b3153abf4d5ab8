import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from attention_core import DTYPE, ModelConfig, TokenSequence, cosine_sim
from errors import ConfigurationError, SequenceFormatError, ShapeError
from segmask import SegmentPartition, partition_from_boundaries

logger = logging.getLogger(__name__)

SEQ_MAGIC = b"SHRPSEQ\x00"
SEQ_VERSION = 1
HEADER_DTYPE = np.dtype([
    ("magic", "S8"),
    ("version", "<u4"),
    ("n_visual", "<u4"),
    ("n_text", "<u4"),
    ("hidden", "<u4"),
    ("frames", "<u4"),
    ("tokens_per_frame", "<u4"),
])

# Every component of a homogeneous ("black frame") token.
HOMOGENEOUS_VALUE = 0.1
MAX_CENTER_DRAWS = 1000
MAX_SCENE_COSINE = 0.5


@dataclass(frozen=True)
class SceneSpec:
    frame_count: int
    center_seed: int


@dataclass(frozen=True)
class NeedleSpec:
    frame: int
    slot: int
    seed: int


@dataclass
class SyntheticSpec:
    scenes: List[SceneSpec]
    tokens_per_frame: int = 4
    noise: float = 0.01
    needle_plan: List[NeedleSpec] = field(default_factory=list)
    text_len: int = 4
    data_seed: int = 0
    common_fraction: float = 0.4
    needle_strength: float = 1.0

    @property
    def frames(self) -> int:
        return sum(s.frame_count for s in self.scenes)

    def validate(self):
        if not self.scenes:
            raise ConfigurationError("at least one scene is required", field="data.scenes")
        if any(s.frame_count < 1 for s in self.scenes):
            raise ConfigurationError("every scene needs at least one frame", field="data.frames_per_scene")
        if self.tokens_per_frame < 1:
            raise ConfigurationError("must be positive", field="data.tokens_per_frame")
        if self.text_len < 1:
            raise ConfigurationError("must be positive", field="data.text_len")
        if self.noise < 0:
            raise ConfigurationError("noise must be non-negative", field="data.noise")
        if not 0.0 <= self.common_fraction < 1.0:
            raise ConfigurationError("must lie in [0, 1)", field="data.common_fraction")
        if not 0.0 < self.needle_strength <= 1.0:
            raise ConfigurationError("must lie in (0, 1]", field="data.needle_strength")
        for needle in self.needle_plan:
            if not (0 <= needle.frame < self.frames and 0 <= needle.slot < self.tokens_per_frame):
                raise ConfigurationError(f"needle at frame {needle.frame} slot {needle.slot} lies outside the layout",
                                         field="data.needle_plan")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _content_direction(rng: np.random.Generator, d: int) -> np.ndarray:
    # Orthogonal to the shared all-equal direction.
    v = rng.standard_normal(d)
    return _unit(v - v.mean())


def _with_shared(content: np.ndarray, common_fraction: float) -> np.ndarray:
    d = content.shape[0]
    return math.sqrt(common_fraction) * np.ones(d) + math.sqrt((1.0 - common_fraction) * d) * content


def _scene_centers(spec: SyntheticSpec, d: int) -> List[np.ndarray]:
    centers: List[np.ndarray] = []
    for index, scene in enumerate(spec.scenes):
        rng = np.random.default_rng((spec.data_seed, scene.center_seed))
        for _ in range(MAX_CENTER_DRAWS):
            center = _with_shared(_content_direction(rng, d), spec.common_fraction)
            if not centers or cosine_sim(centers[-1], center) < MAX_SCENE_COSINE:
                break
        else:
            raise ConfigurationError(f"could not draw scene {index} dissimilar from its predecessor",
                                     field="data.common_fraction")
        centers.append(center)
    return centers


def generate(spec: SyntheticSpec, config: ModelConfig) -> Tuple[TokenSequence, SegmentPartition]:
    """Scene-structured visual tokens, random text tokens, and the true scene partition."""
    spec.validate()
    d = config.hidden_dim
    p = spec.tokens_per_frame
    centers = _scene_centers(spec, d)
    frame_centers = np.concatenate([np.tile(c, (s.frame_count, 1)) for c, s in zip(centers, spec.scenes)])
    noise_rng = np.random.default_rng((spec.data_seed, 0x5EED))
    visual = np.repeat(frame_centers, p, axis=0) + spec.noise * noise_rng.standard_normal((spec.frames * p, d))
    text_rng = np.random.default_rng((spec.data_seed, 0x7E47))
    text = np.stack([_with_shared(_content_direction(text_rng, d), spec.common_fraction)
                     for _ in range(spec.text_len)])
    seq = TokenSequence(visual=visual.astype(DTYPE), text=text.astype(DTYPE),
                        frames=spec.frames, tokens_per_frame=p)

    for needle in spec.needle_plan:
        direction = _content_direction(np.random.default_rng((spec.data_seed, needle.seed)), d)
        seq = plant_needle(seq, [needle.frame * p + needle.slot], direction, strength=spec.needle_strength)

    scene_starts = np.cumsum([s.frame_count for s in spec.scenes])[:-1]
    truth = partition_from_boundaries([int(b) for b in scene_starts], spec.frames, p)
    logger.debug(f"Generated N_v={seq.n_visual} N_t={seq.n_text} scenes={len(spec.scenes)} "
                 f"needles={len(seq.planted)} seed={spec.data_seed}")
    return seq, truth


def homogeneous(frames: int, tokens_per_frame: int, n_text: int, config: ModelConfig) -> TokenSequence:
    """Information-free input: every visual and text token is the same constant vector."""
    if frames < 1 or tokens_per_frame < 1 or n_text < 1:
        raise ConfigurationError("frames, tokens_per_frame and n_text must all be at least 1")
    d = config.hidden_dim
    return TokenSequence(
        visual=np.full((frames * tokens_per_frame, d), HOMOGENEOUS_VALUE, dtype=DTYPE),
        text=np.full((n_text, d), HOMOGENEOUS_VALUE, dtype=DTYPE),
        frames=frames,
        tokens_per_frame=tokens_per_frame,
    )


def plant_needle(seq: TokenSequence, positions: Sequence[int], query_align: np.ndarray,
                 strength: float = 1.0) -> TokenSequence:
    """Overwrites visual tokens with the query_align direction, keeping each token's norm.

    strength < 1 blends the needle with the background token it replaces.
    """
    positions = [int(p) for p in positions]
    if not positions:
        return seq
    bad = [p for p in positions if not 0 <= p < seq.n_visual]
    if bad:
        raise ShapeError(f"needle positions {bad} outside 0..{seq.n_visual - 1}")
    align = _unit(np.asarray(query_align, dtype=np.float64))
    visual = seq.visual.copy()
    for pos in positions:
        background = visual[pos].astype(np.float64)
        scale = np.linalg.norm(background) or math.sqrt(seq.hidden_dim)
        blend = strength * align
        if strength < 1.0 and np.linalg.norm(background) > 0:
            blend = blend + (1.0 - strength) * _unit(background)
        visual[pos] = (scale * _unit(blend)).astype(DTYPE)
    return seq.with_visual(visual, planted=sorted(set(seq.planted) | set(positions)))


def write_tensor_blob(path: str, header: dict, arrays: Sequence[np.ndarray]):
    """Header record followed by row-major little-endian float32 data; atomic replace."""
    record = np.zeros(1, dtype=HEADER_DTYPE)
    record["magic"] = SEQ_MAGIC
    record["version"] = SEQ_VERSION
    for key, value in header.items():
        record[key] = value
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(record.tobytes())
            for arr in arrays:
                f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def read_tensor_blob(path: str) -> Tuple[np.void, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < HEADER_DTYPE.itemsize:
        raise SequenceFormatError(f"{path}: truncated header")
    header = np.frombuffer(data[:HEADER_DTYPE.itemsize], dtype=HEADER_DTYPE)[0]
    # S8 fields drop trailing NULs, so compare the raw bytes.
    if data[:len(SEQ_MAGIC)] != SEQ_MAGIC:
        raise SequenceFormatError(f"{path}: bad magic {data[:len(SEQ_MAGIC)]!r}")
    if header["version"] != SEQ_VERSION:
        raise SequenceFormatError(f"{path}: unsupported version {header['version']}")
    body = data[HEADER_DTYPE.itemsize:]
    if len(body) % 4:
        raise SequenceFormatError(f"{path}: body is not a whole number of float32 values")
    return header, np.frombuffer(body, dtype="<f4").astype(DTYPE)


def dump_sequence(seq: TokenSequence, path: str):
    write_tensor_blob(path, {
        "n_visual": seq.n_visual,
        "n_text": seq.n_text,
        "hidden": seq.hidden_dim,
        "frames": seq.frames,
        "tokens_per_frame": seq.tokens_per_frame,
    }, [seq.visual, seq.text])
    logger.info(f"Dumped sequence N_v={seq.n_visual} N_t={seq.n_text} d={seq.hidden_dim} to {path}")


def load_sequence(path: str) -> TokenSequence:
    header, values = read_tensor_blob(path)
    n_v, n_t, d = int(header["n_visual"]), int(header["n_text"]), int(header["hidden"])
    if values.size != (n_v + n_t) * d:
        raise SequenceFormatError(f"{path}: expected {(n_v + n_t) * d} floats, found {values.size}")
    matrix = values.reshape(n_v + n_t, d)
    return TokenSequence(visual=matrix[:n_v].copy(), text=matrix[n_v:].copy(),
                         frames=int(header["frames"]), tokens_per_frame=int(header["tokens_per_frame"]))
