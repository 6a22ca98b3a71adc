"""Attention dataflow analysis: neutral / single-modal / cross-modal mass and
routing nodes, per layer and per layer group."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .errors import ConfigError, ContractError
from .inputs import EncoderInput, Modality, SlotKind, _KIND_TO_MODALITY
from .model import VLTransformer, collate

CATEGORIES = ("cls", "sep", "single", "cross")
DEFAULT_ROUTING_K = 4


@dataclass
class LayerMass:
    """Attention mass (summed over heads, queries and samples) per category."""

    cls: float = 0.0
    sep: float = 0.0
    single: float = 0.0
    cross: float = 0.0

    @property
    def total(self) -> float:
        return self.cls + self.sep + self.single + self.cross

    def __add__(self, other: "LayerMass") -> "LayerMass":
        return LayerMass(*(getattr(self, c) + getattr(other, c) for c in CATEGORIES))

    def percentages(self) -> dict[str, float]:
        t = self.total
        if t <= 0:
            return dict(cls_pct=0.0, sep_pct=0.0, neutral_total_pct=0.0, single_pct=0.0, cross_pct=0.0)
        cls = 100.0 * self.cls / t
        sep = 100.0 * self.sep / t
        return dict(
            cls_pct=cls,
            sep_pct=sep,
            neutral_total_pct=cls + sep,
            single_pct=100.0 * self.single / t,
            cross_pct=100.0 * self.cross / t,
        )


@dataclass
class AttentionBreakdown:
    layers: list[LayerMass]

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def merge(self, other: "AttentionBreakdown") -> "AttentionBreakdown":
        if other.n_layers != self.n_layers:
            raise ContractError(f"cannot merge breakdowns with {self.n_layers} and {other.n_layers} layers")
        return AttentionBreakdown([a + b for a, b in zip(self.layers, other.layers)])

    def layer_pct(self, layer: int) -> dict[str, float]:
        return self.layers[layer].percentages()

    def total(self) -> LayerMass:
        out = LayerMass()
        for m in self.layers:
            out = out + m
        return out


def _as_numpy_maps(maps) -> list[np.ndarray]:
    out = []
    for m in maps:
        a = m.detach().cpu().numpy() if isinstance(m, torch.Tensor) else np.asarray(m)
        if a.ndim == 3:
            a = a[None]
        if a.ndim != 4:
            raise ContractError(f"attention map must be [B, heads, S, S] or [heads, S, S], got {a.shape}")
        out.append(a.astype(np.float64, copy=False))
    return out


def _as_kinds(kinds, batch: int, seq: int) -> np.ndarray:
    k = np.asarray(kinds)
    if k.ndim == 1:
        k = np.broadcast_to(k, (batch, k.shape[0]))
    if k.shape != (batch, seq):
        raise ContractError(f"slot labels of shape {k.shape} do not cover attention maps [{batch}, *, {seq}, {seq}]")
    return k


def category_masks(kinds: np.ndarray) -> dict[str, np.ndarray]:
    """Exclusive [B, S, S] masks over (query, key) cells for each category.

    A cell touching a special token is neutral and is credited to the key's
    special when the key is one, otherwise to the query's. Remaining cells
    are single-modal when both ends share a modality, cross-modal otherwise.
    Padding cells belong to no category.
    """
    kinds = np.asarray(kinds)
    mod = _KIND_TO_MODALITY[kinds]
    valid = kinds != SlotKind.PAD
    q_kind, k_kind = kinds[:, :, None], kinds[:, None, :]
    cell = valid[:, :, None] & valid[:, None, :]
    k_special = (k_kind == SlotKind.CLS) | (k_kind == SlotKind.SEP)
    q_special = (q_kind == SlotKind.CLS) | (q_kind == SlotKind.SEP)
    neither = ~k_special & ~q_special
    same = mod[:, :, None] == mod[:, None, :]
    return {
        "cls": cell & ((k_kind == SlotKind.CLS) | (~k_special & (q_kind == SlotKind.CLS))),
        "sep": cell & ((k_kind == SlotKind.SEP) | (~k_special & (q_kind == SlotKind.SEP))),
        "single": cell & neither & same,
        "cross": cell & neither & ~same,
    }


def classify_attention(maps: Sequence, kinds) -> AttentionBreakdown:
    """Split attention mass by category for every layer.

    ``maps`` holds one array per layer, ``[B, heads, S, S]`` (or
    ``[heads, S, S]`` for a single sample); ``kinds`` gives the
    :class:`SlotKind` of every slot, ``[B, S]`` or ``[S]``.
    """
    maps = _as_numpy_maps(maps)
    if not maps:
        return AttentionBreakdown([])
    B, _, S, S2 = maps[0].shape
    if S != S2:
        raise ContractError("attention maps must be square")
    masks = category_masks(_as_kinds(kinds, B, S))
    layers = []
    for a in maps:
        if a.shape[0] != B or a.shape[2:] != (S, S):
            raise ContractError("all layers must share one [B, *, S, S] shape")
        summed = a.sum(axis=1)
        layers.append(LayerMass(*(float(summed[masks[c]].sum()) for c in CATEGORIES)))
    return AttentionBreakdown(layers)


# --------------------------------------------------------------------------
# routing nodes


@dataclass
class RoutingNode:
    slot_index: int
    share: float  # fraction of the layer's received mass, 0..1
    is_special: bool


@dataclass
class RoutingReport:
    k: int
    layers: list[list[RoutingNode]]


@dataclass
class ReceivedMass:
    """Attention received per key slot, per layer; mergeable across batches."""

    per_layer: list[np.ndarray]
    special_votes: np.ndarray  # per slot: samples where it was special
    present: np.ndarray  # per slot: samples where it was not padding
    special_mass: list[float] = field(default_factory=list)  # per layer, exact mass on [CLS]/[SEP] keys

    def merge(self, other: "ReceivedMass") -> "ReceivedMass":
        n = max(len(self.present), len(other.present))

        def pad(x):
            return np.pad(x, (0, n - len(x)))

        return ReceivedMass(
            [pad(a) + pad(b) for a, b in zip(self.per_layer, other.per_layer)],
            pad(self.special_votes) + pad(other.special_votes),
            pad(self.present) + pad(other.present),
            [a + b for a, b in zip(self.special_mass, other.special_mass)],
        )


def received_mass(maps: Sequence, kinds) -> ReceivedMass:
    maps = _as_numpy_maps(maps)
    B, _, S, _ = maps[0].shape
    kinds = _as_kinds(kinds, B, S)
    valid = kinds != SlotKind.PAD
    special = (kinds == SlotKind.CLS) | (kinds == SlotKind.SEP)
    per_layer, special_mass = [], []
    for a in maps:
        # mass from real queries only
        rec = (a.sum(axis=1) * valid[:, :, None]).sum(axis=1)
        per_layer.append(rec.sum(axis=0))
        special_mass.append(float(rec[special].sum()))
    return ReceivedMass(
        per_layer, special.sum(axis=0).astype(float), valid.sum(axis=0).astype(float), special_mass
    )


def routing_report(received: ReceivedMass, k: int = DEFAULT_ROUTING_K) -> RoutingReport:
    if k < 1:
        raise ContractError("k must be >= 1")
    if k > len(received.present):
        raise ContractError(f"k={k} exceeds sequence length {len(received.present)}")
    is_special = received.special_votes * 2 > received.present
    layers = []
    for mass in received.per_layer:
        total = mass.sum()
        share = mass / total if total > 0 else np.zeros_like(mass)
        order = np.argsort(-share, kind="stable")[:k]
        layers.append([RoutingNode(int(i), float(share[i]), bool(is_special[i])) for i in order])
    return RoutingReport(k, layers)


def detect_routing_nodes(maps: Sequence, kinds, k: int = DEFAULT_ROUTING_K) -> RoutingReport:
    """Top-``k`` key slots by received attention in each layer (ties: lowest index)."""
    return routing_report(received_mass(maps, kinds), k)


def special_received_share(received: ReceivedMass) -> list[float]:
    """Per layer, fraction of received mass landing on [CLS]/[SEP] keys."""
    out = []
    for mass, special in zip(received.per_layer, received.special_mass):
        total = mass.sum()
        out.append(float(special / total) if total > 0 else 0.0)
    return out


# --------------------------------------------------------------------------
# layer groups and reports


def parse_groups(spec: str, n_layers: int) -> list[tuple[str, list[int]]]:
    """``"1-3,4-9,10-12"`` (1-based, inclusive) or ``"auto"``."""
    if spec.strip() == "auto":
        return default_groups(n_layers)
    groups = []
    for part in spec.split(","):
        part = part.strip()
        try:
            if "-" in part:
                lo, hi = (int(x) for x in part.split("-", 1))
            else:
                lo = hi = int(part)
        except ValueError:
            raise ConfigError(f"bad layer group {part!r}") from None
        groups.append((f"{lo}-{hi}" if lo != hi else str(lo), list(range(lo, hi + 1))))
    check_partition(groups, n_layers)
    return groups


def default_groups(n_layers: int) -> list[tuple[str, list[int]]]:
    """Bottom / mid / top split with a quarter of the layers at each end."""
    if n_layers < 3:
        return [(str(l), [l]) for l in range(1, n_layers + 1)]
    q = max(1, round(n_layers / 4))
    spans = [("Bottom", 1, q), ("Mid", q + 1, n_layers - q), ("Top", n_layers - q + 1, n_layers)]
    return [(f"{name} ({lo}-{hi})" if lo != hi else f"{name} ({lo})", list(range(lo, hi + 1))) for name, lo, hi in spans]


def check_partition(groups: Sequence[tuple[str, Sequence[int]]], n_layers: int) -> None:
    seen = [l for _, ls in groups for l in ls]
    if sorted(seen) != list(range(1, n_layers + 1)):
        raise ConfigError(f"layer groups {[list(ls) for _, ls in groups]} do not partition 1..{n_layers}")


def layer_group_report(b: AttentionBreakdown, groups: Sequence[tuple[str, Sequence[int]]]) -> list[dict]:
    """Mass-weighted percentages per layer group."""
    check_partition(groups, b.n_layers)
    rows = []
    for name, layers in groups:
        mass = LayerMass()
        for l in layers:
            mass = mass + b.layers[l - 1]
        rows.append({"layer_group": name, **mass.percentages()})
    return rows


REPORT_COLUMNS = ("layer_group", "cls_pct", "sep_pct", "neutral_total_pct", "single_pct", "cross_pct")
ROUTING_COLUMNS = ("layer", "rank", "slot_index", "is_special", "share_pct")
COMPARE_COLUMNS = (
    "modal", "layer_group",
    "cls_before", "cls_after", "cls_delta",
    "sep_before", "sep_after", "sep_delta",
    "total_before", "total_after", "total_delta",
    "others_before", "others_after", "others_delta",
)


def compare_runs(
    before: AttentionBreakdown | dict[str, AttentionBreakdown],
    after: AttentionBreakdown | dict[str, AttentionBreakdown],
    groups: Sequence[tuple[str, Sequence[int]]] | None = None,
) -> list[dict]:
    """Side-by-side neutral-route table with deltas (after - before).

    Pass dicts keyed by tower (e.g. ``{"V": ..., "L": ...}``) to get one
    block of rows per modality. "others" is single + cross.
    """
    if not isinstance(before, dict):
        before, after = {"": before}, {"": after}
    if set(before) != set(after):
        raise ContractError(f"runs cover different towers: {sorted(before)} vs {sorted(after)}")
    rows = []
    for modal in before:
        b, a = before[modal], after[modal]
        if b.n_layers != a.n_layers:
            raise ContractError(f"layer structure differs: {b.n_layers} vs {a.n_layers} layers")
        grp = list(groups) if groups is not None else default_groups(b.n_layers)
        grp = grp + [("Total", list(range(1, b.n_layers + 1)))]
        for name, layers in grp:
            mb = sum((b.layers[l - 1] for l in layers), LayerMass()).percentages()
            ma = sum((a.layers[l - 1] for l in layers), LayerMass()).percentages()
            row = {"modal": modal, "layer_group": name}
            for short, key in (("cls", "cls_pct"), ("sep", "sep_pct"), ("total", "neutral_total_pct")):
                row[f"{short}_before"], row[f"{short}_after"] = mb[key], ma[key]
                row[f"{short}_delta"] = ma[key] - mb[key]
            ob, oa = mb["single_pct"] + mb["cross_pct"], ma["single_pct"] + ma["cross_pct"]
            row.update(others_before=ob, others_after=oa, others_delta=oa - ob)
            rows.append(row)
    return rows


def routing_rows(report: RoutingReport) -> list[dict]:
    rows = []
    for layer, nodes in enumerate(report.layers, start=1):
        for rank, n in enumerate(nodes, start=1):
            rows.append(
                {"layer": layer, "rank": rank, "slot_index": n.slot_index,
                 "is_special": int(n.is_special), "share_pct": 100.0 * n.share}
            )
    return rows


def rows_to_csv(rows: Iterable[dict], columns: Sequence[str]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([f"{r[c]:.6f}" if isinstance(r[c], float) else r[c] for c in columns])
    return buf.getvalue().encode("utf-8")


# --------------------------------------------------------------------------
# running a model


@dataclass
class AnalysisResult:
    breakdown: AttentionBreakdown
    received: ReceivedMass
    n_samples: int = 0
    special_share: list[float] = field(default_factory=list)

    def routing(self, k: int = DEFAULT_ROUTING_K) -> RoutingReport:
        return routing_report(self.received, k)


@torch.no_grad()
def analyze_inputs(model: VLTransformer, inputs: Sequence[EncoderInput], batch_size: int = 64) -> AnalysisResult:
    """Capture attention for every input and aggregate it by summation."""
    if not inputs:
        raise ContractError("no inputs to analyze")
    breakdown = None
    received = None
    for start in range(0, len(inputs), batch_size):
        batch = collate(inputs[start : start + batch_size], model.cfg.feat_dim)
        out = model.encode(batch, capture=True)
        b = classify_attention(out.attention_maps, batch.kinds)
        r = received_mass(out.attention_maps, batch.kinds) if out.attention_maps else None
        breakdown = b if breakdown is None else breakdown.merge(b)
        if r is not None:
            received = r if received is None else received.merge(r)
    if received is None:
        received = ReceivedMass([], np.zeros(0), np.zeros(0), [])
    return AnalysisResult(breakdown, received, len(inputs), special_received_share(received))


__all__ = [
    "AnalysisResult", "AttentionBreakdown", "LayerMass", "ReceivedMass", "RoutingNode", "RoutingReport",
    "analyze_inputs", "category_masks", "check_partition", "classify_attention", "compare_runs",
    "default_groups", "detect_routing_nodes", "layer_group_report", "parse_groups", "received_mass",
    "routing_report", "routing_rows", "rows_to_csv", "special_received_share",
    "Modality",
]
