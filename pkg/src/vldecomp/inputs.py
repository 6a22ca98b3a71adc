"""Text/image records, the joint and per-modality encoder input layouts,
a synthetic paired-data generator and the line-delimited dataset format.

Token id layout shared by every component::

    0 [PAD]   1 [CLS]   2 [SEP]   3 reserved
    4 .. 4+n_words-1                 word tokens
    4+n_words .. 4+n_words+n_classes  tag tokens (one per latent class)
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DataFormatError

PAD_ID = 0
CLS_ID = 1
SEP_ID = 2
FIRST_WORD_ID = 4

SEGMENT_T = 0
SEGMENT_V = 1

DATASET_MAGIC = "VLDS"
DATASET_VERSION = 1


class SlotKind(IntEnum):
    PAD = 0
    CLS = 1
    SEP = 2
    WORD = 3
    TAG = 4
    REGION = 5


class Modality(IntEnum):
    NEUTRAL = 0
    TEXT = 1
    IMAGE = 2


_KIND_TO_MODALITY = np.array(
    [Modality.NEUTRAL, Modality.NEUTRAL, Modality.NEUTRAL, Modality.TEXT, Modality.IMAGE, Modality.IMAGE],
    dtype=np.int8,
)


@dataclass(frozen=True, eq=False)
class TextRecord:
    id: int
    tokens: tuple[int, ...]

    def __eq__(self, other):
        return isinstance(other, TextRecord) and self.id == other.id and self.tokens == other.tokens


@dataclass(frozen=True, eq=False)
class ImageRecord:
    id: int
    regions: np.ndarray  # [K, feat_dim] float32
    tags: tuple[int, ...] = ()

    def __post_init__(self):
        regions = np.asarray(self.regions, dtype=np.float32)
        if regions.ndim != 2:
            raise ContractError(f"image {self.id}: regions must be [K, feat_dim], got {regions.shape}")
        regions.setflags(write=False)
        object.__setattr__(self, "regions", regions)

    @property
    def n_regions(self) -> int:
        return self.regions.shape[0]

    def __eq__(self, other):
        return (
            isinstance(other, ImageRecord)
            and self.id == other.id
            and self.tags == other.tags
            and np.array_equal(self.regions, other.regions)
        )


@dataclass(frozen=True, eq=False)
class PairRecord:
    text: TextRecord
    image: ImageRecord
    aligned: bool = True

    @property
    def id(self) -> int:
        return self.text.id

    def __eq__(self, other):
        return (
            isinstance(other, PairRecord)
            and self.text == other.text
            and self.image == other.image
            and self.aligned == other.aligned
        )


def validate_pair(pair: PairRecord, vocab_size: int, feat_dim: int) -> None:
    toks = pair.text.tokens
    if len(toks) < 1:
        raise ContractError(f"pair {pair.id}: text has no tokens")
    for t in (*toks, *pair.image.tags):
        if not 0 <= t < vocab_size:
            raise ContractError(f"pair {pair.id}: token id {t} outside vocabulary of {vocab_size}")
    if pair.image.n_regions < 1:
        raise ContractError(f"pair {pair.id}: image has no regions")
    if pair.image.regions.shape[1] != feat_dim:
        raise ContractError(
            f"pair {pair.id}: region dim {pair.image.regions.shape[1]} != feat_dim {feat_dim}"
        )
    if not np.isfinite(pair.image.regions).all():
        raise ContractError(f"pair {pair.id}: non-finite region feature")


def match_key(pair: PairRecord) -> tuple[int, ...]:
    """Semantic identity of a pair's image: its tag tuple.

    Synthetic tags are the latent class token, so pairs with equal keys are
    interchangeable matches.
    """
    return tuple(pair.image.tags)


# --------------------------------------------------------------------------
# encoder inputs


class Slot(NamedTuple):
    kind: SlotKind
    token_id: int
    feature: np.ndarray | None
    position_id: int
    segment_id: int
    modality: Modality


@dataclass(frozen=True, eq=False)
class EncoderInput:
    """One encoder sequence, stored column-wise.

    ``features`` holds a row per slot; only region slots are non-zero.
    """

    kinds: np.ndarray
    token_ids: np.ndarray
    features: np.ndarray
    position_ids: np.ndarray
    segment_ids: np.ndarray
    pad_mask: np.ndarray = field(default=None)  # True marks padding

    def __post_init__(self):
        if self.pad_mask is None:
            object.__setattr__(self, "pad_mask", self.kinds == SlotKind.PAD)

    def __len__(self) -> int:
        return len(self.kinds)

    @property
    def modality(self) -> np.ndarray:
        return _KIND_TO_MODALITY[self.kinds]

    @property
    def n_special(self) -> int:
        return int(np.isin(self.kinds, (SlotKind.CLS, SlotKind.SEP)).sum())

    def slots(self) -> Iterator[Slot]:
        mod = self.modality
        for i, k in enumerate(self.kinds):
            kind = SlotKind(int(k))
            yield Slot(
                kind,
                int(self.token_ids[i]),
                self.features[i] if kind == SlotKind.REGION else None,
                int(self.position_ids[i]),
                int(self.segment_ids[i]),
                Modality(int(mod[i])),
            )

    def padded(self, length: int) -> "EncoderInput":
        """Right-pad with [PAD] slots to ``length``."""
        extra = length - len(self)
        if extra < 0:
            raise ContractError(f"cannot pad length {len(self)} down to {length}")
        return EncoderInput(
            kinds=np.concatenate([self.kinds, np.full(extra, SlotKind.PAD, np.int8)]),
            token_ids=np.concatenate([self.token_ids, np.full(extra, PAD_ID, np.int64)]),
            features=np.concatenate([self.features, np.zeros((extra, self.features.shape[1]), np.float32)]),
            position_ids=np.concatenate([self.position_ids, np.zeros(extra, np.int64)]),
            segment_ids=np.concatenate([self.segment_ids, np.zeros(extra, np.int64)]),
        )


@dataclass(frozen=True)
class InputConfig:
    max_text_len: int = 35
    max_regions: int = 50
    max_seq_len: int = 128
    image_position_mode: str = "separate"  # separate | shared

    def __post_init__(self):
        if self.image_position_mode not in ("separate", "shared"):
            raise ConfigError(f"image_position_mode must be separate|shared, got {self.image_position_mode!r}")
        if self.max_text_len < 1 or self.max_regions < 1 or self.max_seq_len < 4:
            raise ConfigError("input length limits must be positive (max_seq_len >= 4)")


class _Builder:
    def __init__(self, feat_dim: int):
        self.feat_dim = feat_dim
        self.kinds: list[int] = []
        self.tokens: list[int] = []
        self.positions: list[int] = []
        self.segments: list[int] = []
        self.region_rows: list[tuple[int, np.ndarray]] = []

    def add(self, kind, token, position, segment):
        self.kinds.append(kind)
        self.tokens.append(token)
        self.positions.append(position)
        self.segments.append(segment)

    def add_region(self, vec, position):
        self.region_rows.append((len(self.kinds), vec))
        self.add(SlotKind.REGION, PAD_ID, position, SEGMENT_V)

    def build(self) -> EncoderInput:
        feats = np.zeros((len(self.kinds), self.feat_dim), np.float32)
        for i, vec in self.region_rows:
            feats[i] = vec
        return EncoderInput(
            kinds=np.asarray(self.kinds, np.int8),
            token_ids=np.asarray(self.tokens, np.int64),
            features=feats,
            position_ids=np.asarray(self.positions, np.int64),
            segment_ids=np.asarray(self.segments, np.int64),
        )


def _fit_joint(n_words: int, n_tags: int, n_regions: int, limit: int) -> tuple[int, int]:
    # words shrink first (down to one), then tags; regions are never cut
    over = n_words + n_tags + n_regions + 3 - limit
    if over <= 0:
        return n_words, n_tags
    cut = min(over, n_words - 1)
    n_words -= cut
    over -= cut
    cut = min(over, n_tags)
    n_tags -= cut
    over -= cut
    if over > 0:
        raise ContractError(f"{n_regions} regions do not fit in max_seq_len={limit}")
    return n_words, n_tags


def build_joint_input(pair: PairRecord, cfg: InputConfig = InputConfig()) -> EncoderInput:
    """``[CLS] words [SEP] tags [SEP] regions`` with continuous positions."""
    words = pair.text.tokens[: cfg.max_text_len]
    regions = pair.image.regions
    if len(regions) > cfg.max_regions:
        raise ContractError(f"pair {pair.id}: {len(regions)} regions exceed max_regions={cfg.max_regions}")
    n_w, n_t = _fit_joint(len(words), len(pair.image.tags), len(regions), cfg.max_seq_len)
    words, tags = words[:n_w], pair.image.tags[:n_t]

    b = _Builder(regions.shape[1])
    b.add(SlotKind.CLS, CLS_ID, 0, SEGMENT_T)
    for w in words:
        b.add(SlotKind.WORD, w, len(b.kinds), SEGMENT_T)
    b.add(SlotKind.SEP, SEP_ID, len(b.kinds), SEGMENT_T)
    for t in tags:
        b.add(SlotKind.TAG, t, len(b.kinds), SEGMENT_T)
    b.add(SlotKind.SEP, SEP_ID, len(b.kinds), SEGMENT_T)
    for r in regions:
        b.add_region(r, len(b.kinds))
    return b.build()


def build_text_input(text: TextRecord, cfg: InputConfig = InputConfig(), feat_dim: int = 0) -> EncoderInput:
    """``[CLS] words [SEP]``; words at positions 0..L-1, [SEP] at L."""
    words = text.tokens[: min(cfg.max_text_len, cfg.max_seq_len - 2)]
    b = _Builder(feat_dim)
    b.add(SlotKind.CLS, CLS_ID, 0, SEGMENT_T)
    for i, w in enumerate(words):
        b.add(SlotKind.WORD, w, i, SEGMENT_T)
    b.add(SlotKind.SEP, SEP_ID, len(words), SEGMENT_T)
    return b.build()


def build_image_input(image: ImageRecord, cfg: InputConfig = InputConfig()) -> EncoderInput:
    """``[CLS] tags [SEP] regions``.

    In ``separate`` mode tags and regions each number from 0; in ``shared``
    mode regions continue after the tags.
    """
    regions = image.regions
    if len(regions) > cfg.max_regions:
        raise ContractError(f"image {image.id}: {len(regions)} regions exceed max_regions={cfg.max_regions}")
    room = cfg.max_seq_len - 2 - len(regions)
    if room < 0:
        raise ContractError(f"image {image.id}: {len(regions)} regions do not fit in max_seq_len={cfg.max_seq_len}")
    tags = image.tags[:room]

    b = _Builder(regions.shape[1])
    b.add(SlotKind.CLS, CLS_ID, 0, SEGMENT_T)
    for i, t in enumerate(tags):
        b.add(SlotKind.TAG, t, i, SEGMENT_T)
    b.add(SlotKind.SEP, SEP_ID, len(tags), SEGMENT_T)
    offset = len(tags) if cfg.image_position_mode == "shared" else 0
    for i, r in enumerate(regions):
        b.add_region(r, offset + i)
    return b.build()


# --------------------------------------------------------------------------
# synthetic data


def _class_word_sets(n_classes: int, n_words: int, words_per_class: int, world_seed: int) -> list[tuple[int, ...]]:
    # drawn sequentially so class c means the same thing for any n_classes > c
    rng = np.random.default_rng([world_seed, 1])
    seen: set[tuple[int, ...]] = set()
    out = []
    while len(out) < n_classes:
        s = tuple(sorted(rng.choice(n_words, size=words_per_class, replace=False).tolist()))
        if s in seen:
            continue
        seen.add(s)
        out.append(s)
    return out


def synth_dataset(
    n_pairs: int,
    n_classes: int,
    feat_dim: int,
    vocab_size: int,
    noise: float,
    seed: int,
    *,
    n_words: int = 64,
    words_per_class: int = 3,
    text_len: tuple[int, int] = (6, 10),
    n_regions: int = 4,
    world_seed: int = 0,
) -> list[PairRecord]:
    """Generate aligned text-image pairs from latent classes.

    Each word token owns a fixed visual vector. A class is a set of
    ``words_per_class`` words; its image prototype is the mean of their
    vectors, its regions are that prototype plus Gaussian noise and its single
    tag is the class token. Captions contain every class word at least once,
    padded with more class words; each token is swapped for a random word
    with probability ``noise``. The "world" (word vectors, class word sets)
    depends only on ``world_seed``; ``seed`` drives the per-pair sampling.
    """
    if n_pairs < 1 or n_classes < 1 or n_classes > n_pairs:
        raise ConfigError(f"need 1 <= n_classes <= n_pairs, got n_classes={n_classes}, n_pairs={n_pairs}")
    if feat_dim < 1 or n_regions < 1 or noise < 0:
        raise ConfigError("feat_dim and n_regions must be positive, noise non-negative")
    if not 1 <= words_per_class <= n_words:
        raise ConfigError(f"words_per_class must be in [1, n_words={n_words}]")
    lo, hi = text_len
    if lo < words_per_class or hi < lo:
        raise ConfigError(f"text_len {text_len} must satisfy words_per_class <= lo <= hi")
    if vocab_size < FIRST_WORD_ID + n_words + n_classes:
        raise ConfigError(
            f"vocab_size {vocab_size} too small for {n_words} words + {n_classes} class tags"
        )

    world = np.random.default_rng([world_seed, 0])
    word_vecs = world.standard_normal((n_words, feat_dim)).astype(np.float64)
    word_sets = _class_word_sets(n_classes, n_words, words_per_class, world_seed)
    tag_base = FIRST_WORD_ID + n_words

    rng = np.random.default_rng(seed)
    classes = rng.permutation(np.arange(n_pairs) % n_classes)
    pairs = []
    for pid, c in enumerate(classes):
        words = np.asarray(word_sets[c])
        L = int(rng.integers(lo, hi + 1))
        toks = np.concatenate([words, rng.choice(words, size=L - len(words))])
        toks = rng.permutation(toks)
        flip = rng.random(L) < noise
        toks = np.where(flip, rng.integers(0, n_words, size=L), toks) + FIRST_WORD_ID

        proto = word_vecs[words].mean(axis=0)
        regions = proto + noise * rng.standard_normal((n_regions, feat_dim))
        pairs.append(
            PairRecord(
                TextRecord(pid, tuple(int(t) for t in toks)),
                ImageRecord(pid, regions.astype(np.float32), (int(tag_base + c),)),
            )
        )
    return pairs


# --------------------------------------------------------------------------
# dataset files


def _fmt_float(x: float) -> str:
    return f"{x:.9g}"


def format_pair_line(pair: PairRecord) -> str:
    regions = pair.image.regions
    floats = " ".join(_fmt_float(float(v)) for v in regions.reshape(-1))
    return " | ".join(
        [
            str(pair.id),
            " ".join(map(str, pair.text.tokens)),
            " ".join(map(str, pair.image.tags)),
            f"{regions.shape[0]} {floats}",
        ]
    )


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    """Write ``data`` to a sibling temp file, then rename over ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"output directory does not exist: {directory}")
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dataset(path, pairs: Sequence[PairRecord], vocab_size: int, feat_dim: int) -> None:
    lines = [f"{DATASET_MAGIC} {DATASET_VERSION} {vocab_size} {feat_dim}"]
    for p in pairs:
        if not p.aligned:
            raise ContractError(f"pair {p.id}: only aligned pairs can be stored")
        validate_pair(p, vocab_size, feat_dim)
        lines.append(format_pair_line(p))
    atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def _ints(text: str, lineno: int, what: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split())
    except ValueError:
        raise DataFormatError(f"line {lineno}: bad {what} ids") from None


def load_dataset(path) -> tuple[list[PairRecord], int, int]:
    """Read a dataset file. Returns ``(pairs, vocab_size, feat_dim)``."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = fh.read()
    lines = raw.split("\n")
    header = lines[0].split()
    if len(header) != 4 or header[0] != DATASET_MAGIC:
        raise DataFormatError(f"line 1: expected '{DATASET_MAGIC} <version> <vocab_size> <feat_dim>'")
    try:
        version, vocab_size, feat_dim = int(header[1]), int(header[2]), int(header[3])
    except ValueError:
        raise DataFormatError("line 1: non-integer header field") from None
    if version != DATASET_VERSION:
        raise DataFormatError(f"line 1: unsupported version {version}")
    if vocab_size < 1 or feat_dim < 1:
        raise DataFormatError("line 1: vocab_size and feat_dim must be positive")

    body = lines[1:]
    if body and body[-1] == "":
        body = body[:-1]
    elif body:
        # a valid file ends with a newline; anything else was cut short
        raise DataFormatError(f"line {len(lines)}: truncated file (missing final newline)")

    pairs: list[PairRecord] = []
    seen: set[int] = set()
    for lineno, line in enumerate(body, start=2):
        fields = line.split("|")
        if len(fields) != 4:
            raise DataFormatError(f"line {lineno}: expected 4 '|'-separated fields, got {len(fields)}")
        try:
            pid = int(fields[0])
        except ValueError:
            raise DataFormatError(f"line {lineno}: bad pair id {fields[0].strip()!r}") from None
        if pid in seen:
            raise DataFormatError(f"line {lineno}: duplicate pair id {pid}")
        seen.add(pid)
        words = _ints(fields[1], lineno, "word")
        tags = _ints(fields[2], lineno, "tag")
        nums = fields[3].split()
        if not nums:
            raise DataFormatError(f"line {lineno}: missing region count")
        try:
            k = int(nums[0])
            vals = np.array([float(v) for v in nums[1:]], dtype=np.float32)
        except ValueError:
            raise DataFormatError(f"line {lineno}: bad region data") from None
        if k < 1 or vals.size != k * feat_dim:
            raise DataFormatError(
                f"line {lineno}: expected {k}x{feat_dim} region floats, got {vals.size}"
            )
        pair = PairRecord(TextRecord(pid, words), ImageRecord(pid, vals.reshape(k, feat_dim), tags))
        try:
            validate_pair(pair, vocab_size, feat_dim)
        except ContractError as exc:
            raise DataFormatError(f"line {lineno}: {exc}") from None
        pairs.append(pair)
    return pairs, vocab_size, feat_dim
