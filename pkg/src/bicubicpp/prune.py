"""Global structured channel pruning against validation PSNR.

Channels are grouped into *sites*: index positions that must be dropped
together because residual addition (or a producer/consumer conv pair) ties
them. Site 0 is the residual-tied trunk; the remaining sites are the free
interior channels of each residual block. Candidate masks each drop one
channel; the per-site selection unions the candidates whose individual
validation PSNR is highest (i.e. whose removal costs least), with ties
broken toward the lowest channel index. No training happens during
selection, and bias vectors stay in place (a dropped channel's own bias
entry vanishes with it).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .metrics import dataset_psnr_y
from .model import Model


@dataclass(frozen=True)
class PruneSite:
    """A group of (layer, axis) channel positions sharing one index space."""

    id: int
    members: tuple[tuple[str, str], ...]  # (layer name, "out" | "in")
    width: int


@dataclass(frozen=True)
class PruneMask:
    site_id: int
    drop: tuple[int, ...]

    def __post_init__(self):
        if len(self.drop) < 1:
            raise ConfigError("a mask must drop at least one channel")
        object.__setattr__(self, "drop", tuple(sorted(set(self.drop))))


@dataclass
class CandidateScore:
    mask: PruneMask
    psnr_val: float


def enumerate_sites(model: Model) -> list[PruneSite]:
    """Channel sites of the graph, trunk first, interiors in graph order."""
    cfg = model.config
    trunk: list[tuple[str, str]] = [("ds", "out")]
    for r in range(cfg.R):
        trunk.append((f"block{r}.conv0", "in"))
        trunk.append((f"block{r}.conv{cfg.m - 1}", "out"))
    trunk.append(("tail", "in"))
    sites = [PruneSite(0, tuple(trunk), model.layers["ds"].out_channels)]
    sid = 1
    for r in range(cfg.R):
        for i in range(cfg.m - 1):
            members = ((f"block{r}.conv{i}", "out"), (f"block{r}.conv{i + 1}", "in"))
            width = model.layers[f"block{r}.conv{i}"].out_channels
            sites.append(PruneSite(sid, members, width))
            sid += 1
    return sites


def candidate_masks(site: PruneSite) -> list[PruneMask]:
    """One single-channel mask per channel of the site."""
    if site.width < 2:
        raise ConfigError(f"site {site.id} has width {site.width}, nothing to prune")
    return [PruneMask(site.id, (c,)) for c in range(site.width)]


def _check_masks(sites: list[PruneSite], masks) -> dict[int, PruneSite]:
    by_id = {s.id: s for s in sites}
    for mask in masks:
        site = by_id.get(mask.site_id)
        if site is None:
            raise ConfigError(f"mask references unknown site {mask.site_id}")
        if max(mask.drop) >= site.width:
            raise ConfigError(
                f"mask drops channel {max(mask.drop)} of width-{site.width} site"
            )
        if len(mask.drop) >= site.width:
            raise ConfigError(f"mask would empty site {mask.site_id}")
    return by_id


def apply_mask(model: Model, masks) -> Model:
    """Zero out dropped channels without changing any shapes.

    Dropping a channel zeroes its producing filters and bias entry plus
    every consumer's matching input-weight slice, which makes the masked
    model functionally identical to the compacted one.
    """
    by_id = _check_masks(enumerate_sites(model), masks)
    out = model.copy()
    for mask in masks:
        drop = list(mask.drop)
        for name, axis in by_id[mask.site_id].members:
            layer = out.layers[name]
            if axis == "out":
                layer.weight[drop, :, :, :] = 0.0
                if layer.bias is not None:
                    layer.bias[drop] = 0.0
            else:
                layer.weight[:, drop, :, :] = 0.0
    return out


def compact(model: Model, masks) -> Model:
    """Physically remove dropped channels; a trunk mask reduces config.ch."""
    sites = enumerate_sites(model)
    by_id = _check_masks(sites, masks)
    keep: dict[int, np.ndarray] = {}
    for mask in masks:
        site = by_id[mask.site_id]
        kept = [c for c in range(site.width) if c not in set(mask.drop)]
        keep[site.id] = np.asarray(kept, dtype=np.int64)

    out = model.copy()
    for site in sites:
        idx = keep.get(site.id)
        if idx is None:
            continue
        for name, axis in site.members:
            layer = out.layers[name]
            if axis == "out":
                layer.weight = np.ascontiguousarray(layer.weight[idx])
                if layer.bias is not None:
                    layer.bias = np.ascontiguousarray(layer.bias[idx])
            else:
                layer.weight = np.ascontiguousarray(layer.weight[:, idx])
        if site.id == 0:
            out.config.ch = len(idx)
    return out


def evaluate_candidates(model: Model, site: PruneSite, valset, accepted=()) -> list[CandidateScore]:
    """Validation PSNR(Y) of each single-channel mask, applied on top of the
    already accepted masks. Pure: the input model is never modified."""
    valset = list(valset)
    if not valset:
        raise ConfigError("validation set is empty")
    scores = []
    for cand in candidate_masks(site):
        masked = apply_mask(model, list(accepted) + [cand])
        scores.append(CandidateScore(cand, dataset_psnr_y(masked, valset)))
    return scores


def select_mask(scores: list[CandidateScore], drop_count: int = 2) -> PruneMask:
    """Union of the drop_count candidates with the highest PSNR (least
    damage); ties resolve toward the lowest channel index."""
    if drop_count < 1:
        raise ConfigError(f"drop_count must be >= 1, got {drop_count}")
    width = len(scores)
    if drop_count >= width:
        raise ConfigError(f"cannot drop {drop_count} of {width} channels")
    ranked = sorted(scores, key=lambda s: (-s.psnr_val, s.mask.drop[0]))
    chosen = [s.mask.drop[0] for s in ranked[:drop_count]]
    return PruneMask(ranked[0].mask.site_id, tuple(chosen))


def _select_joint(model, site, valset, accepted, drop_count):
    """Exhaustive joint evaluation of all drop_count-subsets (slow path)."""
    best = None
    for combo in itertools.combinations(range(site.width), drop_count):
        mask = PruneMask(site.id, combo)
        p = dataset_psnr_y(apply_mask(model, list(accepted) + [mask]), valset)
        if best is None or p > best[0]:
            best = (p, mask)
    return best[1]


@dataclass
class PruneReport:
    base_psnr: float
    sites: list[dict]  # per site: site_id, dropped, candidates [(ch, psnr)]

    def to_dict(self) -> dict:
        return {"base_psnr_y": self.base_psnr, "sites": self.sites}


def prune_pipeline(
    model: Model,
    valset,
    target_ch: int,
    joint_pairs: bool = False,
) -> tuple[list[PruneMask], Model, PruneReport]:
    """Select per-site masks sequentially and compact the model to target_ch.

    Each site is evaluated with the previously accepted masks kept applied.
    Returns (masks, compacted model, report with per-candidate PSNR tables).
    """
    drop_count = model.config.ch - target_ch
    if drop_count < 0:
        raise ConfigError(f"target_ch {target_ch} exceeds model ch {model.config.ch}")
    valset = list(valset)
    base = dataset_psnr_y(model, valset) if valset else float("nan")
    report = PruneReport(base, [])
    if drop_count == 0:
        return [], model.copy(), report

    accepted: list[PruneMask] = []
    for site in enumerate_sites(model):
        scores = evaluate_candidates(model, site, valset, accepted)
        if joint_pairs:
            mask = _select_joint(model, site, valset, accepted, drop_count)
        else:
            mask = select_mask(scores, drop_count)
        accepted.append(mask)
        report.sites.append(
            {
                "site_id": site.id,
                "members": [list(m) for m in site.members],
                "dropped_channels": list(mask.drop),
                "candidates": [
                    {"channel": s.mask.drop[0], "psnr_y": s.psnr_val, "psnr_drop": base - s.psnr_val}
                    for s in scores
                ],
            }
        )
    return accepted, compact(model, accepted), report
