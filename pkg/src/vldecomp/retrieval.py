"""Offline embedding index, exact cosine search, recall evaluation and timing."""

from __future__ import annotations

import logging
import struct
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .errors import ContractError, DataFormatError
from .inputs import EncoderInput, InputConfig, PairRecord, atomic_write
from .model import JointPairBatcher, VLTransformer, collate, image_inputs, text_inputs

log = logging.getLogger(__name__)

INDEX_MAGIC = b"VLDI"
INDEX_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")


@dataclass
class InferenceCounter:
    """Number of encoder forward passes (one per sequence) charged to a job."""

    count: int = 0

    def charge(self, n: int) -> None:
        self.count += int(n)


class EmbeddingIndex:
    """Immutable set of ``(id, vector)`` entries with precomputed norms."""

    def __init__(self, ids, vectors, dim: int | None = None):
        ids = np.asarray(ids, dtype=np.uint64).reshape(-1)
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.size == 0:
            if dim is None:
                dim = vectors.shape[-1] if vectors.ndim == 2 else 0
            vectors = vectors.reshape(0, dim)
        if vectors.ndim != 2 or vectors.shape[0] != ids.shape[0]:
            raise ContractError(f"{ids.shape[0]} ids for vectors of shape {vectors.shape}")
        if len(np.unique(ids)) != len(ids):
            raise ContractError("index ids must be unique")
        norms = np.sqrt((vectors.astype(np.float64) ** 2).sum(axis=1))
        if np.any(norms == 0):
            raise ContractError("index entries must have non-zero norm")
        self.ids = ids
        self.vectors = vectors
        self.norms = norms
        self.dim = int(vectors.shape[1])
        self.ids.setflags(write=False)
        self.vectors.setflags(write=False)

    def __len__(self) -> int:
        return len(self.ids)

    def nbytes(self) -> int:
        return self.ids.nbytes + self.vectors.nbytes + self.norms.nbytes

    def to_bytes(self) -> bytes:
        rec = np.dtype([("id", "<u8"), ("vec", "<f4", (self.dim,))])
        body = np.empty(len(self), dtype=rec)
        body["id"] = self.ids
        body["vec"] = self.vectors
        body_bytes = body.tobytes()
        header = _HEADER.pack(INDEX_MAGIC, INDEX_VERSION, self.dim, len(self))
        return header + body_bytes + struct.pack("<Q", xor_checksum(body_bytes))

    @classmethod
    def from_bytes(cls, data: bytes, source: str = "<bytes>") -> "EmbeddingIndex":
        if len(data) < _HEADER.size + 8:
            raise DataFormatError(f"{source}: truncated index")
        magic, version, dim, count = _HEADER.unpack_from(data)
        if magic != INDEX_MAGIC:
            raise DataFormatError(f"{source}: bad magic {magic!r}")
        if version != INDEX_VERSION:
            raise DataFormatError(f"{source}: unsupported index version {version}")
        body_len = count * (8 + 4 * dim)
        if len(data) != _HEADER.size + body_len + 8:
            raise DataFormatError(f"{source}: expected {_HEADER.size + body_len + 8} bytes, found {len(data)}")
        body = data[_HEADER.size : _HEADER.size + body_len]
        (stored,) = struct.unpack_from("<Q", data, _HEADER.size + body_len)
        if stored != xor_checksum(body):
            raise DataFormatError(f"{source}: checksum mismatch")
        rec = np.dtype([("id", "<u8"), ("vec", "<f4", (dim,))])
        arr = np.frombuffer(body, dtype=rec, count=count)
        try:
            return cls(arr["id"].copy(), arr["vec"].reshape(count, dim).copy(), dim=dim)
        except ContractError as e:
            raise DataFormatError(f"{source}: {e}") from None

    def save(self, path) -> None:
        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "EmbeddingIndex":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read(), str(path))


def xor_checksum(body: bytes) -> int:
    pad = (-len(body)) % 8
    words = np.frombuffer(body + b"\0" * pad, dtype="<u8")
    return int(np.bitwise_xor.reduce(words)) if len(words) else 0


@dataclass
class RetrievalResult:
    query_id: int | None
    hits: list[tuple[int, float]]

    @property
    def ids(self) -> list[int]:
        return [i for i, _ in self.hits]


def cosine_scores(index: EmbeddingIndex, q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.shape[0] != index.dim:
        raise ContractError(f"query dim {q.shape[0]} does not match index dim {index.dim}")
    qn = np.sqrt(q @ q)
    if qn == 0:
        raise ContractError("zero-norm query")
    return (index.vectors.astype(np.float64) @ q) / (index.norms * qn)


def rank_order(scores: np.ndarray, ids: np.ndarray, k: int) -> np.ndarray:
    """Positions of the top-``k`` scores, ties by ascending id."""
    n = len(scores)
    k = min(k, n)
    if k < n:
        kth = np.partition(-scores, k - 1)[k - 1]
        cand = np.nonzero(-scores <= kth)[0]
    else:
        cand = np.arange(n)
    order = np.lexsort((ids[cand], -scores[cand]))
    return cand[order[:k]]


def cosine_topk(index: EmbeddingIndex, q, k: int, query_id: int | None = None) -> RetrievalResult:
    """Exact cosine top-``k`` over every entry; ``k`` is capped at the index size."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    scores = cosine_scores(index, q)
    pos = rank_order(scores, index.ids, k)
    return RetrievalResult(query_id, [(int(index.ids[p]), float(scores[p])) for p in pos])


@torch.no_grad()
def _encode(model: VLTransformer, items: Sequence[EncoderInput], batch_size: int, counter: InferenceCounter | None):
    out = []
    for s in range(0, len(items), batch_size):
        chunk = items[s : s + batch_size]
        out.append(model.individual_forward(collate(chunk, model.cfg.feat_dim)).numpy())
        if counter is not None:
            counter.charge(len(chunk))
    if not out:
        return np.zeros((0, model.cfg.hidden_dim), np.float32)
    return np.concatenate(out).astype(np.float32)


def encode_corpus(
    model: VLTransformer,
    items: Sequence[EncoderInput],
    ids: Sequence[int],
    batch_size: int = 64,
    counter: InferenceCounter | None = None,
) -> EmbeddingIndex:
    """One tower forward per item; zero-norm embeddings are dropped with a warning."""
    if len(items) != len(ids):
        raise ContractError(f"{len(items)} items but {len(ids)} ids")
    vecs = _encode(model, items, batch_size, counter)
    ids = np.asarray(ids, dtype=np.uint64)
    zero = np.all(vecs == 0, axis=1)
    for i in ids[zero]:
        log.warning("item %d has a zero-norm embedding and is excluded from the index", i)
    return EmbeddingIndex(ids[~zero], vecs[~zero], dim=model.cfg.hidden_dim)


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    mode: str
    r1_t2i: float
    r5_t2i: float
    r10_t2i: float
    r1_i2t: float
    r5_i2t: float
    r10_i2t: float
    inference_count: int
    n_text: int
    n_image: int
    seconds: float = 0.0

    @property
    def ar(self) -> float:
        return (self.r1_t2i + self.r5_t2i + self.r10_t2i + self.r1_i2t + self.r5_i2t + self.r10_i2t) / 6.0

    def row(self) -> dict:
        return {**vars(self), "ar": self.ar}


EVAL_COLUMNS = (
    "mode", "r1_t2i", "r5_t2i", "r10_t2i", "r1_i2t", "r5_i2t", "r10_i2t", "ar",
    "inference_count", "n_text", "n_image", "seconds",
)


def recall_at(scores: np.ndarray, col_ids: np.ndarray, positives: Sequence[set[int]], ks=(1, 5, 10)) -> list[float]:
    """Fraction of rows with any positive column id in the top-k (ties by ascending id)."""
    n_rows = scores.shape[0]
    if n_rows == 0:
        return [0.0] * len(ks)
    kmax = min(max(ks), scores.shape[1])
    hits = np.zeros(len(ks))
    for r in range(n_rows):
        top = col_ids[rank_order(scores[r], col_ids, kmax)]
        first = next((j for j, c in enumerate(top) if int(c) in positives[r]), None)
        if first is not None:
            hits += [first < k for k in ks]
    return [float(x) for x in hits / n_rows]


def _check_ids(pairs: Sequence[PairRecord]) -> None:
    for side in ("text", "image"):
        ids = [getattr(p, side).id for p in pairs]
        if len(set(ids)) != len(ids):
            raise DataFormatError(f"duplicate {side} ids in evaluation set")


def ground_truth(pairs: Sequence[PairRecord], extra: dict[int, set[int]] | None = None):
    """Positives per text (image ids) and per image (text ids).

    Every pair links its text to its image; ``extra`` adds further correct
    image ids for a text id (several captions per image and the like).
    """
    t2i = [{p.image.id} | set((extra or {}).get(p.text.id, ())) for p in pairs]
    i2t_map: dict[int, set[int]] = {p.image.id: set() for p in pairs}
    for p, pos in zip(pairs, t2i):
        for img in pos:
            if img in i2t_map:
                i2t_map[img].add(p.text.id)
    return t2i, [i2t_map[p.image.id] for p in pairs]


@torch.no_grad()
def joint_scores(
    model: VLTransformer,
    pairs: Sequence[PairRecord],
    batch_size: int = 256,
    input_cfg: InputConfig = InputConfig(),
    counter: InferenceCounter | None = None,
    max_batches: int | None = None,
) -> np.ndarray:
    """Logit for every text x image combination, one joint forward each."""
    n = len(pairs)
    batcher = JointPairBatcher(pairs, model.cfg.feat_dim, input_cfg)
    flat = np.full(n * n, np.nan)
    for b, s in enumerate(range(0, n * n, batch_size)):
        if max_batches is not None and b >= max_batches:
            break
        cells = np.arange(s, min(s + batch_size, n * n))
        flat[cells] = model.joint_logits(batcher.batch(cells // n, cells % n)).double().numpy()
        if counter is not None:
            counter.charge(len(cells))
    return flat.reshape(n, n)


def evaluate(
    model: VLTransformer,
    pairs: Sequence[PairRecord],
    mode: str = "decomposed",
    batch_size: int = 256,
    input_cfg: InputConfig = InputConfig(),
    extra_positives: dict[int, set[int]] | None = None,
) -> EvalReport:
    """Recall@1/5/10 in both directions under decomposed or joint scoring."""
    _check_ids(pairs)
    if not pairs:
        raise ContractError("empty evaluation set")
    t2i_pos, i2t_pos = ground_truth(pairs, extra_positives)
    text_ids = np.array([p.text.id for p in pairs], np.uint64)
    image_ids = np.array([p.image.id for p in pairs], np.uint64)
    counter = InferenceCounter()
    t0 = time.perf_counter()
    if mode == "decomposed":
        rt = _encode(model, text_inputs(pairs, input_cfg), batch_size, counter).astype(np.float64)
        rv = _encode(model, image_inputs(pairs, input_cfg), batch_size, counter).astype(np.float64)
        nt = np.linalg.norm(rt, axis=1)
        nv = np.linalg.norm(rv, axis=1)
        if np.any(nt == 0) or np.any(nv == 0):
            raise ContractError("zero-norm representation in evaluation")
        scores = (rt @ rv.T) / (nt[:, None] * nv[None, :])
    elif mode == "joint":
        scores = joint_scores(model, pairs, batch_size, input_cfg, counter)
    else:
        raise ContractError(f"mode must be decomposed|joint, got {mode!r}")
    t2i = recall_at(scores, image_ids, t2i_pos)
    i2t = recall_at(scores.T, text_ids, i2t_pos)
    seconds = time.perf_counter() - t0
    return EvalReport(mode, *t2i, *i2t, counter.count, len(pairs), len(pairs), seconds)


# --------------------------------------------------------------------------
# timing


@dataclass
class LatencyReport:
    size: int
    mode: str  # decomposed_job | joint_job | decomposed_query
    batch: int
    avg_ms: float
    min_ms: float
    max_ms: float
    p95_ms: float
    p99_99_ms: float
    mem_mb: float  # index + model parameters only
    inference_count: int
    extrapolated: bool = False
    samples: list[float] = field(default_factory=list, repr=False)


LATENCY_COLUMNS = (
    "size", "mode", "batch", "avg_ms", "min_ms", "max_ms", "p95_ms", "p99_99_ms",
    "mem_mb", "inference_count", "extrapolated",
)


def latency_stats(samples_ms: Sequence[float]) -> dict[str, float]:
    a = np.asarray(samples_ms, dtype=np.float64)
    if a.size == 0:
        raise ContractError("no timing samples")
    p95, p9999 = np.percentile(a, [95.0, 99.99])
    return dict(avg_ms=float(a.mean()), min_ms=float(a.min()), max_ms=float(a.max()),
                p95_ms=float(p95), p99_99_ms=float(p9999))


def model_bytes(model: VLTransformer) -> int:
    return sum(w.numel() * w.element_size() for w in model.named_weights().values())


def _timed(fn) -> float:
    t0 = time.perf_counter()
    fn()
    return (time.perf_counter() - t0) * 1000.0


def time_queries(
    model: VLTransformer,
    index: EmbeddingIndex,
    queries: Sequence[EncoderInput],
    k: int = 10,
    warmup: int = 5,
) -> list[float]:
    """Per-query milliseconds: one text forward (batch 1) plus exact search."""

    @torch.no_grad()
    def one(q):
        v = model.individual_forward(collate([q], model.cfg.feat_dim))[0].numpy()
        cosine_topk(index, v, k)

    for q in queries[:warmup]:
        one(q)
    return [_timed(lambda q=q: one(q)) for q in queries]


def benchmark(
    model: VLTransformer,
    pairs: Sequence[PairRecord],
    sizes: Sequence[int],
    batch_size: int = 256,
    repetitions: int = 3,
    warmup: int = 1,
    n_queries: int = 200,
    joint_max_batches: int | None = 200,
    input_cfg: InputConfig = InputConfig(),
) -> list[LatencyReport]:
    """Full matching jobs in both modes, plus single-query latency, per corpus size.

    A joint job needing more than ``joint_max_batches`` batches is timed on
    the first batches only and scaled to the full n^2, flagged ``extrapolated``.
    """
    torch.set_num_threads(1)
    reports = []
    mbytes = model_bytes(model)
    for n in sizes:
        if n > len(pairs):
            raise ContractError(f"corpus size {n} exceeds the {len(pairs)} available pairs")
        sub = list(pairs[:n])
        texts = text_inputs(sub, input_cfg)
        images = image_inputs(sub, input_cfg)
        ids = [p.image.id for p in sub]

        def decomposed_job():
            c = InferenceCounter()
            idx = encode_corpus(model, images, ids, batch_size, c)
            rt = _encode(model, texts, batch_size, c)
            for v in rt:
                cosine_topk(idx, v, 10)
            return idx, c

        for _ in range(warmup):
            decomposed_job()
        times = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            index, counter = decomposed_job()
            times.append((time.perf_counter() - t0) * 1000.0)
        reports.append(LatencyReport(n, "decomposed_job", batch_size, **latency_stats(times),
                                     mem_mb=(index.nbytes() + mbytes) / 2**20,
                                     inference_count=counter.count, samples=times))

        total_batches = -(-n * n // batch_size)
        limit = total_batches if joint_max_batches is None else min(total_batches, joint_max_batches)
        extrapolated = limit < total_batches
        times = []
        for _ in range(repetitions):
            c = InferenceCounter()
            t0 = time.perf_counter()
            joint_scores(model, sub, batch_size, input_cfg, c, max_batches=limit)
            ms = (time.perf_counter() - t0) * 1000.0
            times.append(ms * (n * n) / c.count)
        reports.append(LatencyReport(n, "joint_job", batch_size, **latency_stats(times),
                                     mem_mb=mbytes / 2**20, inference_count=n * n,
                                     extrapolated=extrapolated, samples=times))

        queries = texts[: max(1, min(n_queries, n))]
        samples = time_queries(model, index, queries, warmup=warmup)
        reports.append(LatencyReport(n, "decomposed_query", 1, **latency_stats(samples),
                                     mem_mb=(index.nbytes() + mbytes) / 2**20,
                                     inference_count=1, samples=samples))
    return reports
