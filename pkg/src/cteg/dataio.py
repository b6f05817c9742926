"""Dataset loading, binary sequence files, text encoders, synthetic corpus.

Sequence file format: magic b"EXP1", u8 version (1), u32 T, u32 d, then
T*d float32 little-endian values, row-major.  Expression sequences use
d = 53; text-embedding files reuse the same container with d = d_model.

Manifest format: UTF-8 text, one record per line, tab-separated fields
id, split, text, expr_path (path relative to the manifest's directory).
"""

import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .config import EXPR_DIM
from .rng import RngStream, splitmix64, splitmix64_array, SPLITMIX_GAMMA
from .tensor import ContractError

SEQ_MAGIC = b"EXP1"
SEQ_VERSION = 1


class DataFormatError(ValueError):
    pass


# -- binary matrix container --------------------------------------------------

def write_matrix(arr, path):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ContractError(f"write_matrix: need a (T>=1, d) matrix, got {arr.shape}")
    with open(path, "wb") as f:
        f.write(SEQ_MAGIC)
        f.write(struct.pack("<B", SEQ_VERSION))
        f.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_matrix(path):
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 13:
        raise DataFormatError(f"{path}: truncated header ({len(data)} bytes)")
    if data[:4] != SEQ_MAGIC:
        raise DataFormatError(f"{path}: bad magic at byte 0")
    version = data[4]
    if version != SEQ_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version} at byte 4")
    t, d = struct.unpack("<II", data[5:13])
    expected = 13 + 4 * t * d
    if len(data) != expected:
        raise DataFormatError(
            f"{path}: declared {t}x{d} needs {expected} bytes, file has {len(data)} "
            f"(mismatch at byte {min(len(data), expected)})")
    return np.frombuffer(data[13:], dtype="<f4").reshape(t, d).astype(np.float64)


def write_sequence(frames, path):
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != EXPR_DIM:
        raise ContractError(
            f"write_sequence: frames must be (T, {EXPR_DIM}), got {frames.shape}")
    write_matrix(frames, path)


def read_sequence(path):
    frames = read_matrix(path)
    if frames.shape[1] != EXPR_DIM:
        raise DataFormatError(
            f"{path}: expression sequences must have d={EXPR_DIM}, got {frames.shape[1]}")
    if not np.isfinite(frames).all():
        raise DataFormatError(f"{path}: non-finite values")
    return frames


def import_csv_sequence(path):
    """Import a hand-authored CSV fixture (one frame per row, 53 columns)."""
    frames = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    if frames.shape[1] != EXPR_DIM:
        raise DataFormatError(f"{path}: expected {EXPR_DIM} columns, got {frames.shape[1]}")
    return frames


# -- manifest ------------------------------------------------------------------

SPLITS = ("train", "valid", "test")


@dataclass
class DatasetRecord:
    id: str
    split: str
    text: str
    expr_path: str


@dataclass
class DatasetManifest:
    root: str
    records: list = field(default_factory=list)

    def by_split(self, split):
        return [r for r in self.records if r.split == split]

    def resolve(self, record):
        return os.path.join(self.root, record.expr_path)

    def load_frames(self, record):
        return read_sequence(self.resolve(record))


def load_manifest(path):
    root = os.path.dirname(os.path.abspath(path))
    records = []
    seen = set()
    with open(path, "r", encoding="utf-8") as f:
        for ln, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataFormatError(
                    f"{path}:{ln}: expected 4 tab-separated fields, got {len(parts)}")
            rid, split, text, expr_path = parts
            if rid in seen:
                raise DataFormatError(f"{path}:{ln}: duplicate record id {rid!r}")
            if split not in SPLITS:
                raise DataFormatError(f"{path}:{ln}: unknown split {split!r}")
            seen.add(rid)
            records.append(DatasetRecord(rid, split, text, expr_path))
    manifest = DatasetManifest(root, records)
    missing = [r.id for r in records if not os.path.exists(manifest.resolve(r))]
    if missing:
        raise DataFormatError(f"{path}: expression files missing for ids {missing}")
    return manifest


def write_manifest(manifest, path):
    with open(path, "w", encoding="utf-8") as f:
        for r in manifest.records:
            if "\t" in r.text or "\n" in r.text:
                raise ContractError(f"record {r.id}: text may not contain tabs or newlines")
            f.write(f"{r.id}\t{r.split}\t{r.text}\t{r.expr_path}\n")


# -- text encoders ---------------------------------------------------------------

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def _fnv1a64(data):
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


class ToyTextEncoder:
    """Deterministic stand-in for a frozen pretrained sentence encoder.

    Tokens are lowercased whitespace words.  Each token's embedding is a
    unit-normalized vector whose entries come from the splitmix64 stream
    seeded by fnv1a64(token) xor splitmix64(encoder seed); the same token
    therefore always maps to the same row, on any platform.
    """

    frozen = True

    def __init__(self, d_model, seed=7, max_text_len=128):
        self.name = f"toy-{d_model}-{seed}"
        self.d_model = d_model
        self.seed = seed
        self.max_text_len = max_text_len
        self._seed_mix = splitmix64(seed)
        self._cache = {}

    def _token_vector(self, token):
        vec = self._cache.get(token)
        if vec is None:
            s = _fnv1a64(token.encode("utf-8")) ^ self._seed_mix
            states = (np.uint64(s)
                      + np.arange(self.d_model, dtype=np.uint64) * np.uint64(SPLITMIX_GAMMA))
            u = (splitmix64_array(states) >> np.uint64(11)).astype(np.float64) * 2.0**-53
            vec = 2.0 * u - 1.0
            vec /= np.linalg.norm(vec)
            self._cache[token] = vec
        return vec

    def encode(self, text, record_id=None):
        tokens = text.lower().split()
        if not tokens:
            return np.zeros((1, self.d_model))
        tokens = tokens[: self.max_text_len]
        return np.stack([self._token_vector(t) for t in tokens])


class PrecomputedTextEncoder:
    """Serves frozen embeddings written by a real encoder, keyed by record id.

    Each id maps to a file <id>.emb in the matrix container with d = d_model.
    """

    frozen = True

    def __init__(self, directory, d_model, max_text_len=128):
        self.name = f"precomputed:{directory}"
        self.directory = directory
        self.d_model = d_model
        self.max_text_len = max_text_len

    def encode(self, text, record_id=None):
        if record_id is None:
            raise ContractError(
                "precomputed encoder needs a record id; it cannot embed novel text")
        path = os.path.join(self.directory, f"{record_id}.emb")
        if not os.path.exists(path):
            raise DataFormatError(f"no precomputed embedding for id {record_id!r}")
        emb = read_matrix(path)
        if emb.shape[1] != self.d_model:
            raise ContractError(
                f"embedding for {record_id!r} has d={emb.shape[1]}, config wants {self.d_model}")
        if emb.shape[0] > self.max_text_len:
            import warnings
            warnings.warn(f"embedding for {record_id!r} truncated to {self.max_text_len} tokens")
            emb = emb[: self.max_text_len]
        return emb


def average_expression(sequences):
    """Per-dimension mean over every frame of the given training sequences."""
    sequences = list(sequences)
    if not sequences:
        raise ContractError("average_expression: empty training split")
    total = np.zeros(EXPR_DIM)
    count = 0
    for frames in sequences:
        total += frames.sum(axis=0)
        count += frames.shape[0]
    return total / count


# -- synthetic corpus -------------------------------------------------------------

EMOTION_CLASSES = ("happy", "sad", "neutral", "disgust", "fear", "surprise", "angry")

_ADJECTIVES = {
    "happy": ["happy", "joyful", "delighted", "cheerful"],
    "sad": ["sad", "gloomy", "heartbroken", "miserable"],
    "neutral": ["calm", "neutral", "composed", "indifferent"],
    "disgust": ["disgusted", "revolted", "queasy", "repelled"],
    "fear": ["afraid", "terrified", "anxious", "uneasy"],
    "surprise": ["surprised", "astonished", "amazed", "stunned"],
    "angry": ["angry", "furious", "irritated", "livid"],
}

_TEMPLATES = [
    "i feel so {} today",
    "that makes me {}",
    "honestly i am {} about this",
    "what a {} moment",
    "this news leaves me completely {}",
    "you look {} right now",
    "i have never been this {} before",
]

# emotionally ambiguous lines for one-to-many instances: the same text maps
# to sequences from different emotion classes
_AMBIGUOUS_TEXTS = [
    "oh my god what is this",
    "i can not believe it",
    "well that is really something",
    "look at what just happened",
    "this is not what i expected",
    "you should have seen their face",
    "so that is how it ends",
    "there is nothing left to say",
]


@dataclass
class SynthConfig:
    n_pairs: int = 200
    n_classes: int = 7
    min_len: int = 8
    max_len: int = 24
    noise: float = 0.03
    drift: float = 0.12
    one_to_many_frac: float = 0.15
    seed: int = 0


def _class_trajectory(cls_idx, T, noise, drift, rng):
    """Smooth class-specific trajectory decaying to the zero face at the end.

    On top of the per-class sinusoid pattern each active dimension carries a
    random-walk drift: frame-to-frame innovations that persist, so a frame
    genuinely informs the continuation (unlike white noise).
    """
    amp = 2.2 + 0.35 * cls_idx
    frames = np.zeros((T, EXPR_DIM))
    dims = list(range(7 * cls_idx, 7 * cls_idx + 7)) + [50, 51, 52]
    scales = [amp] * 7 + [0.3 * amp] * 3
    tt = np.arange(T) / T
    for d, scale in zip(dims, scales):
        base = scale * (0.5 + 0.5 * rng.uniform())
        freq = rng.choice([0.5, 1.0, 1.5])
        phase = 2.0 * np.pi * rng.uniform()
        wobble = 0.4 * scale * np.sin(2.0 * np.pi * freq * tt + phase)
        walk = np.cumsum(drift * scale * rng.normal((T,)))
        frames[:, d] = base + wobble + walk
    frames += noise * rng.normal((T, EXPR_DIM))
    ramp = np.minimum(1.0, (T - 1 - np.arange(T)) / 4.0)  # hits exactly 0 at the end
    return frames * ramp[:, None]


def synth_dataset(cfg, out_dir):
    """Generate a synthetic text-to-expression corpus in EmoAva layout.

    Texts come from a small template grammar keyed by emotion class; each
    class owns a disjoint block of coefficients moved by low-frequency
    sinusoids.  A configurable fraction of texts is reused across several
    records (one-to-many mapping).  Deterministic for a fixed seed.
    """
    if cfg.n_pairs < 1:
        raise ContractError("synth_dataset: n_pairs must be >= 1")
    n_classes = min(cfg.n_classes, len(EMOTION_CLASSES))
    rng = RngStream(splitmix64(cfg.seed ^ 0x5EED))
    os.makedirs(os.path.join(out_dir, "expr"), exist_ok=True)

    n_multi = int(math.ceil(cfg.one_to_many_frac * cfg.n_pairs)) if cfg.n_pairs >= 7 else 0
    records = []
    i = 0
    while len(records) < cfg.n_pairs:
        if n_multi > 0 and len(records) + 2 <= cfg.n_pairs:
            # one-to-many instance: an ambiguous line whose sequences come
            # from distinct emotion classes
            text = _AMBIGUOUS_TEXTS[rng.integer(len(_AMBIGUOUS_TEXTS))]
            copies = min(2 + rng.integer(2), cfg.n_pairs - len(records), n_classes)
            classes = rng.permutation(n_classes)[:copies]
            n_multi -= 1
        else:
            cls_idx = rng.integer(n_classes)
            text = rng.choice(_TEMPLATES).format(
                rng.choice(_ADJECTIVES[EMOTION_CLASSES[cls_idx]]))
            classes = [cls_idx]
        for cls_idx in classes:
            T = cfg.min_len + rng.integer(cfg.max_len - cfg.min_len + 1)
            frames = _class_trajectory(cls_idx, T, cfg.noise, cfg.drift, rng)
            rid = f"syn{i:05d}"
            rel = os.path.join("expr", f"{rid}.exp")
            write_sequence(frames, os.path.join(out_dir, rel))
            records.append(DatasetRecord(rid, "train", text, rel))
            i += 1

    # deterministic 80/10/10 split
    order = rng.permutation(len(records))
    n = len(records)
    n_valid = max(1, n // 10) if n >= 3 else 0
    n_test = max(1, n // 10) if n >= 3 else 0
    for j, idx in enumerate(order):
        if j < n_valid:
            records[idx].split = "valid"
        elif j < n_valid + n_test:
            records[idx].split = "test"

    manifest = DatasetManifest(os.path.abspath(out_dir), records)
    write_manifest(manifest, os.path.join(out_dir, "manifest.tsv"))
    return manifest
