"""Cross-attention between the local representations of the two modalities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Node


@dataclass
class CrossAttentionOutput:
    scores: Node
    weighted_query: Node


@dataclass
class LocalAlignment:
    img_weighted: Node
    txt_weighted: Node
    img_local_proj: Node
    txt_local_proj: Node
    img_scores: Node | None = None
    txt_scores: Node | None = None


def init_alignment_params(img_channels: int, txt_channels: int, dim: int,
                          rng: np.random.Generator) -> dict[str, Node]:
    def lin(name, d_in):
        return dc.parameter(rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, dim)), name)

    names = {
        "xattn.img.wq": img_channels, "xattn.img.wk": txt_channels, "xattn.img.wv": txt_channels,
        "xattn.txt.wq": txt_channels, "xattn.txt.wk": img_channels, "xattn.txt.wv": img_channels,
        "xattn.img_proj": img_channels, "xattn.txt_proj": txt_channels,
    }
    return {name: lin(name, d_in) for name, d_in in names.items()}


def cross_attention(query_rep: Node, kv_rep: Node, params: dict[str, Node], prefix: str) -> CrossAttentionOutput:
    """Queries from one modality attend over keys/values of the other.

    Shapes are [..., Nq, dq] and [..., Nk, dk]; maps project both into dim d.
    """
    q = query_rep @ params[f"{prefix}.wq"]
    k = kv_rep @ params[f"{prefix}.wk"]
    v = kv_rep @ params[f"{prefix}.wv"]
    scores = dc.softmax_rows(dc.scale(q @ dc.transpose(k), 1.0 / np.sqrt(q.shape[-1])))
    return CrossAttentionOutput(scores, scores @ v)


def align_local(img_local: Node, txt_local: Node, params: dict[str, Node]) -> LocalAlignment:
    img = cross_attention(img_local, txt_local, params, "xattn.img")
    txt = cross_attention(txt_local, img_local, params, "xattn.txt")
    return LocalAlignment(
        img_weighted=img.weighted_query,
        txt_weighted=txt.weighted_query,
        img_local_proj=img_local @ params["xattn.img_proj"],
        txt_local_proj=txt_local @ params["xattn.txt_proj"],
        img_scores=img.scores,
        txt_scores=txt.scores,
    )
