"""Shared-weight transformer encoder with early-interaction (joint) and
decomposed (per-modality) dataflows."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import core_math as cm
from .errors import ConfigError, ContractError, DataFormatError
from .inputs import (
    CLS_ID,
    PAD_ID,
    SEGMENT_T,
    SEGMENT_V,
    SEP_ID,
    EncoderInput,
    InputConfig,
    PairRecord,
    SlotKind,
    atomic_write,
    build_image_input,
    build_joint_input,
    build_text_input,
)

POOLING_MODES = ("CLS", "SEP", "AVG")
CHECKPOINT_MAGIC = b"VLDW"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 3
    n_heads: int = 4
    hidden_dim: int = 32
    ffn_dim: int = 64
    vocab_size: int = 512
    feat_dim: int = 16
    max_positions: int = 128
    n_segments: int = 2
    pooling: str = "AVG"
    ln_eps: float = 1e-5
    init_std: float = 0.02

    def __post_init__(self):
        if self.hidden_dim % self.n_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}")
        if self.pooling not in POOLING_MODES:
            raise ConfigError(f"pooling must be one of {POOLING_MODES}, got {self.pooling!r}")
        if self.n_segments != 2:
            raise ConfigError("n_segments must be 2 ([T] and [V])")
        for name in ("n_heads", "hidden_dim", "ffn_dim", "vocab_size", "feat_dim", "max_positions"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.n_layers < 0:
            raise ConfigError("n_layers must be >= 0")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        raw = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise DataFormatError(f"unknown model config keys {sorted(unknown)}")
        return cls(**raw)


# --------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    token_ids: torch.Tensor  # [B, S] long
    features: torch.Tensor  # [B, S, F]
    is_region: torch.Tensor  # [B, S] bool
    position_ids: torch.Tensor  # [B, S] long
    segment_ids: torch.Tensor  # [B, S] long
    pad_mask: torch.Tensor  # [B, S] bool, True = padding
    kinds: np.ndarray  # [B, S] int8 SlotKind codes

    def __len__(self) -> int:
        return self.token_ids.shape[0]

    @property
    def seq_len(self) -> int:
        return self.token_ids.shape[1]


def collate(inputs: Sequence[EncoderInput], feat_dim: int) -> Batch:
    """Right-pad a list of inputs into one batch."""
    if not inputs:
        raise ContractError("cannot collate an empty list of inputs")
    B = len(inputs)
    S = max(len(x) for x in inputs)
    kinds = np.full((B, S), SlotKind.PAD, np.int8)
    tok = np.full((B, S), PAD_ID, np.int64)
    pos = np.zeros((B, S), np.int64)
    seg = np.zeros((B, S), np.int64)
    pad = np.ones((B, S), bool)
    feats = np.zeros((B, S, feat_dim), np.float32)
    for b, x in enumerate(inputs):
        n = len(x)
        kinds[b, :n] = x.kinds
        tok[b, :n] = x.token_ids
        pos[b, :n] = x.position_ids
        seg[b, :n] = x.segment_ids
        pad[b, :n] = x.pad_mask
        reg = x.kinds == SlotKind.REGION
        if reg.any():
            if x.features.shape[1] != feat_dim:
                raise ContractError(f"region feature dim {x.features.shape[1]} != feat_dim {feat_dim}")
            feats[b, :n][reg] = x.features[reg]
    return _batch_from_numpy(tok, feats, pos, seg, pad, kinds)


def _batch_from_numpy(tok, feats, pos, seg, pad, kinds) -> Batch:
    return Batch(
        token_ids=torch.from_numpy(tok),
        features=torch.from_numpy(feats),
        is_region=torch.from_numpy(kinds == SlotKind.REGION),
        position_ids=torch.from_numpy(pos),
        segment_ids=torch.from_numpy(seg),
        pad_mask=torch.from_numpy(pad),
        kinds=kinds,
    )


class JointPairBatcher:
    """Builds joint-input batches for arbitrary (text, image) combinations.

    Each text is pre-laid as ``[CLS] words [SEP]`` and each image as
    ``tags [SEP] regions``; a combination is the two parts side by side with
    padding *between* and after them. Pads are masked from attention and
    positions count only real slots, so every combination encodes exactly
    like its compact :func:`build_joint_input` layout.
    """

    def __init__(self, pairs: Sequence[PairRecord], feat_dim: int, input_cfg: InputConfig = InputConfig()):
        self.feat_dim = feat_dim
        self.cfg = input_cfg
        self.pairs = list(pairs)
        if not self.pairs:
            raise ContractError("JointPairBatcher needs at least one pair")
        texts = [p.text.tokens[: input_cfg.max_text_len] for p in self.pairs]
        longest = max(len(t) for t in texts) + max(len(p.image.tags) + p.image.n_regions for p in self.pairs) + 3
        # combinations that would need truncation go through build_joint_input
        self.fast = longest <= input_cfg.max_seq_len

        n = len(self.pairs)
        lt = max(len(t) for t in texts) + 2
        self.text_len = np.array([len(t) + 2 for t in texts], np.int64)
        self.t_tok = np.full((n, lt), PAD_ID, np.int64)
        self.t_kind = np.full((n, lt), SlotKind.PAD, np.int8)
        for i, t in enumerate(texts):
            L = len(t)
            self.t_tok[i, 0] = CLS_ID
            self.t_tok[i, 1 : L + 1] = t
            self.t_tok[i, L + 1] = SEP_ID
            self.t_kind[i, 0] = SlotKind.CLS
            self.t_kind[i, 1 : L + 1] = SlotKind.WORD
            self.t_kind[i, L + 1] = SlotKind.SEP

        li = max(len(p.image.tags) + 1 + p.image.n_regions for p in self.pairs)
        self.i_tok = np.full((n, li), PAD_ID, np.int64)
        self.i_kind = np.full((n, li), SlotKind.PAD, np.int8)
        self.i_feat = np.zeros((n, li, feat_dim), np.float32)
        for i, p in enumerate(self.pairs):
            T, K = len(p.image.tags), p.image.n_regions
            self.i_tok[i, :T] = p.image.tags
            self.i_kind[i, :T] = SlotKind.TAG
            self.i_tok[i, T] = SEP_ID
            self.i_kind[i, T] = SlotKind.SEP
            self.i_kind[i, T + 1 : T + 1 + K] = SlotKind.REGION
            self.i_feat[i, T + 1 : T + 1 + K] = p.image.regions

    def __len__(self) -> int:
        return len(self.pairs)

    def batch(self, text_idx: np.ndarray, image_idx: np.ndarray) -> Batch:
        text_idx = np.asarray(text_idx, np.int64)
        image_idx = np.asarray(image_idx, np.int64)
        if not self.fast:
            inputs = [
                build_joint_input(PairRecord(self.pairs[t].text, self.pairs[i].image, aligned=(t == i)), self.cfg)
                for t, i in zip(text_idx, image_idx)
            ]
            return collate(inputs, self.feat_dim)
        kinds = np.concatenate([self.t_kind[text_idx], self.i_kind[image_idx]], axis=1)
        tok = np.concatenate([self.t_tok[text_idx], self.i_tok[image_idx]], axis=1)
        B, S = kinds.shape
        feats = np.zeros((B, S, self.feat_dim), np.float32)
        feats[:, self.t_tok.shape[1] :] = self.i_feat[image_idx]
        pad = kinds == SlotKind.PAD
        pos = np.cumsum(~pad, axis=1) - 1
        pos[pad] = 0
        seg = np.where(kinds == SlotKind.REGION, SEGMENT_V, SEGMENT_T).astype(np.int64)
        return _batch_from_numpy(tok, feats, pos.astype(np.int64), seg, pad, kinds)


# --------------------------------------------------------------------------
# model


@dataclass
class EncoderOutput:
    hidden_states: torch.Tensor  # [B, S, H]
    attention_maps: list[torch.Tensor] | None  # per layer [B, heads, S, S]
    batch: Batch
    pooled: torch.Tensor | None = None


_LAYER_PARAMS = (
    "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
    "ln2_g", "ln2_b", "w1", "b1", "w2", "b2",
)


def parameter_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Every parameter in checkpoint order. One set serves both modalities."""
    H, Fh = cfg.hidden_dim, cfg.ffn_dim
    shapes = [
        ("tok_emb", (cfg.vocab_size, H)),
        ("pos_emb", (cfg.max_positions, H)),
        ("seg_emb", (cfg.n_segments, H)),
        ("region_w", (cfg.feat_dim, H)),
        ("region_b", (H,)),
        ("emb_ln_g", (H,)),
        ("emb_ln_b", (H,)),
    ]
    layer = {
        "ln1_g": (H,), "ln1_b": (H,),
        "wq": (H, H), "bq": (H,), "wk": (H, H), "bk": (H,),
        "wv": (H, H), "bv": (H,), "wo": (H, H), "bo": (H,),
        "ln2_g": (H,), "ln2_b": (H,),
        "w1": (H, Fh), "b1": (Fh,), "w2": (Fh, H), "b2": (H,),
    }
    for l in range(cfg.n_layers):
        shapes += [(f"l{l}_{n}", layer[n]) for n in _LAYER_PARAMS]
    shapes += [
        ("final_ln_g", (H,)),
        ("final_ln_b", (H,)),
        ("pooler_w", (H, H)),
        ("pooler_b", (H,)),
        ("head_w", (H, 1)),
        ("head_b", (1,)),
    ]
    return shapes


class VLTransformer(nn.Module):
    """Pre-norm BERT-style encoder shared by the text and image towers."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.params = nn.ParameterDict()
        for name, shape in parameter_shapes(cfg):
            self.params[name] = nn.Parameter(torch.zeros(shape))
        self.reset_parameters(seed)

    def _init(self, name: str, gen: torch.Generator) -> None:
        p = self.params[name]
        base = name.split("_", 1)[1] if name.startswith("l") and name[1].isdigit() else name
        with torch.no_grad():
            if base.endswith("_g"):
                p.fill_(1.0)
            elif base.endswith("_b") or base in ("bq", "bk", "bv", "bo", "b1", "b2"):
                p.zero_()
            else:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype) * self.cfg.init_std)

    def reset_parameters(self, seed: int, names: Sequence[str] | None = None) -> None:
        gen = torch.Generator().manual_seed(int(seed))
        for name in names or list(self.params):
            self._init(name, gen)

    def reset_pooler(self, seed: int) -> None:
        self.reset_parameters(seed, ["pooler_w", "pooler_b"])

    @property
    def dtype(self) -> torch.dtype:
        return self.params["tok_emb"].dtype

    def named_weights(self) -> dict[str, torch.Tensor]:
        return dict(self.params.items())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, _ in parameter_shapes(self.cfg):
            h.update(self.params[name].detach().cpu().numpy().tobytes())
        return h.hexdigest()

    # -- forward pieces -----------------------------------------------------

    def embed(self, batch: Batch) -> torch.Tensor:
        """Token (or projected region) + position + segment, then layer norm."""
        P = self.params
        if batch.position_ids.numel() and int(batch.position_ids.max()) >= self.cfg.max_positions:
            raise ConfigError(
                f"position id {int(batch.position_ids.max())} >= max_positions {self.cfg.max_positions}"
            )
        if batch.features.shape[-1] != self.cfg.feat_dim:
            raise ContractError(f"feature dim {batch.features.shape[-1]} != feat_dim {self.cfg.feat_dim}")
        tok = cm.embedding_lookup(P["tok_emb"], batch.token_ids)
        reg = cm.add(cm.matmul(batch.features.to(self.dtype), P["region_w"]), P["region_b"])
        x = torch.where(batch.is_region.unsqueeze(-1), reg, tok)
        x = x + cm.embedding_lookup(P["pos_emb"], batch.position_ids)
        x = x + cm.embedding_lookup(P["seg_emb"], batch.segment_ids)
        return cm.layer_norm(x, P["emb_ln_g"], P["emb_ln_b"], self.cfg.ln_eps)

    def _attention(self, x: torch.Tensor, l: int, key_pad: torch.Tensor):
        P = self.params
        B, S, H = x.shape
        nh = self.cfg.n_heads
        dh = H // nh

        def heads(t):
            return t.view(B, S, nh, dh).transpose(1, 2)

        q = heads(cm.add(cm.matmul(x, P[f"l{l}_wq"]), P[f"l{l}_bq"]))
        k = heads(cm.add(cm.matmul(x, P[f"l{l}_wk"]), P[f"l{l}_bk"]))
        v = heads(cm.add(cm.matmul(x, P[f"l{l}_wv"]), P[f"l{l}_bv"]))
        scores = cm.scale(cm.matmul(q, k.transpose(-1, -2)), 1.0 / math.sqrt(dh))
        scores = scores.masked_fill(key_pad[:, None, None, :], float("-inf"))
        attn = cm.softmax_rows(scores)
        ctx = cm.matmul(attn, v).transpose(1, 2).reshape(B, S, H)
        return cm.add(cm.matmul(ctx, P[f"l{l}_wo"]), P[f"l{l}_bo"]), attn

    def encode(self, batch: Batch | EncoderInput, capture: bool = False) -> EncoderOutput:
        if isinstance(batch, EncoderInput):
            batch = collate([batch], self.cfg.feat_dim)
        P = self.params
        eps = self.cfg.ln_eps
        x = self.embed(batch)
        maps = [] if capture else None
        for l in range(self.cfg.n_layers):
            h = cm.layer_norm(x, P[f"l{l}_ln1_g"], P[f"l{l}_ln1_b"], eps)
            a, attn = self._attention(h, l, batch.pad_mask)
            x = x + a
            h = cm.layer_norm(x, P[f"l{l}_ln2_g"], P[f"l{l}_ln2_b"], eps)
            h = cm.gelu(cm.add(cm.matmul(h, P[f"l{l}_w1"]), P[f"l{l}_b1"]))
            x = x + cm.add(cm.matmul(h, P[f"l{l}_w2"]), P[f"l{l}_b2"])
            if capture:
                maps.append(attn.detach())
        x = cm.layer_norm(x, P["final_ln_g"], P["final_ln_b"], eps)
        return EncoderOutput(x, maps, batch)

    def pool(self, out: EncoderOutput, mode: str | None = None) -> torch.Tensor:
        """CLS slot, final SEP slot or mean of non-pad slots; then affine + tanh."""
        mode = mode or self.cfg.pooling
        hs, batch = out.hidden_states, out.batch
        if mode == "CLS":
            v = hs[:, 0]
        elif mode == "SEP":
            is_sep = torch.from_numpy(batch.kinds == SlotKind.SEP)
            if not bool(is_sep.any(dim=1).all()):
                raise ContractError("SEP pooling on an input without a [SEP] slot")
            idx = torch.arange(batch.seq_len).expand_as(is_sep)
            last = torch.where(is_sep, idx, torch.full_like(idx, -1)).max(dim=1).values
            v = hs[torch.arange(len(batch)), last]
        elif mode == "AVG":
            v = cm.masked_mean(hs, ~batch.pad_mask)
        else:
            raise ContractError(f"unknown pooling mode {mode!r}")
        return cm.tanh(cm.add(cm.matmul(v, self.params["pooler_w"]), self.params["pooler_b"]))

    def individual_forward(self, batch: Batch | EncoderInput, mode: str | None = None) -> torch.Tensor:
        """Single-modality representations ``[B, H]`` (a text or an image tower)."""
        out = self.encode(batch)
        return self.pool(out, mode)

    def joint_logits(self, batch: Batch | EncoderInput) -> torch.Tensor:
        """Alignment logit per joint sequence from the [CLS] hidden state."""
        out = self.encode(batch)
        cls = out.hidden_states[:, 0]
        return cm.add(cm.matmul(cls, self.params["head_w"]), self.params["head_b"]).squeeze(-1)


# -- functional surface ------------------------------------------------------


def embed(inp: EncoderInput | Batch, model: VLTransformer) -> torch.Tensor:
    if isinstance(inp, EncoderInput):
        inp = collate([inp], model.cfg.feat_dim)
    return model.embed(inp)


def encode(inp: EncoderInput | Batch, model: VLTransformer, capture: bool = False) -> EncoderOutput:
    return model.encode(inp, capture)


def pool(out: EncoderOutput, model: VLTransformer, mode: str | None = None) -> torch.Tensor:
    return model.pool(out, mode)


def joint_forward(pair: PairRecord, model: VLTransformer, input_cfg: InputConfig = InputConfig()) -> torch.Tensor:
    """Scalar alignment logit of one text-image pair under joint dataflow."""
    return model.joint_logits(build_joint_input(pair, input_cfg))[0]


def individual_forward(inp: EncoderInput, model: VLTransformer, mode: str | None = None) -> torch.Tensor:
    """``r_t`` or ``r_v`` for one per-modality input; no other modality is visible."""
    return model.individual_forward(inp, mode)[0]


def text_inputs(pairs: Sequence[PairRecord], input_cfg: InputConfig = InputConfig()) -> list[EncoderInput]:
    return [build_text_input(p.text, input_cfg) for p in pairs]


def image_inputs(pairs: Sequence[PairRecord], input_cfg: InputConfig = InputConfig()) -> list[EncoderInput]:
    return [build_image_input(p.image, input_cfg) for p in pairs]


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: VLTransformer) -> None:
    """``VLDW`` | u32 version | u32 n | n bytes config JSON | f32 LE params."""
    cfg_bytes = model.cfg.to_json().encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg_bytes)), cfg_bytes]
    for name, shape in parameter_shapes(model.cfg):
        arr = model.params[name].detach().cpu().numpy().astype("<f4", copy=False)
        assert arr.shape == shape
        parts.append(arr.tobytes())
    atomic_write(path, b"".join(parts))


def load_checkpoint(path, expected: ModelConfig | None = None) -> VLTransformer:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: not a weight checkpoint (bad magic)")
    if len(data) < 12:
        raise DataFormatError(f"{path}: truncated header")
    version, n = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        cfg = ModelConfig.from_json(data[12 : 12 + n].decode("utf-8"))
    except (ValueError, TypeError) as exc:
        raise DataFormatError(f"{path}: bad model config: {exc}") from None
    if expected is not None and cfg != expected:
        raise ConfigError(f"{path}: checkpoint config {cfg} does not match expected {expected}")
    model = VLTransformer(cfg)
    offset = 12 + n
    with torch.no_grad():
        for name, shape in parameter_shapes(cfg):
            count = int(np.prod(shape))
            end = offset + 4 * count
            if end > len(data):
                raise DataFormatError(f"{path}: truncated at parameter {name}")
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
            model.params[name].copy_(torch.from_numpy(arr.astype(np.float32)))
            offset = end
    if offset != len(data):
        raise DataFormatError(f"{path}: {len(data) - offset} trailing bytes")
    return model
