"""Toy transformer parameters, offline rotations and their folded form."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import random_orthogonal, read_matrix, write_matrix


@dataclass
class ToyModel:
    """Decoder-only toy transformer.

    Each layer computes ``x + attn(x)`` followed by ``x + tanh(x W1) W2``;
    ``wl[l]`` is the d x d post-attention linear whose rows are partitioned
    into ``n_heads`` blocks of ``head_dim`` rows.
    """

    n_layers: int
    n_heads: int
    head_dim: int
    vocab: int
    embed: np.ndarray
    wq: list[list[np.ndarray]]
    wk: list[list[np.ndarray]]
    wv: list[list[np.ndarray]]
    wl: list[np.ndarray]
    mlp_in: list[np.ndarray]
    mlp_out: list[np.ndarray]
    out_head: np.ndarray
    seed: int | None = None

    @property
    def d_model(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def d_ff(self) -> int:
        return self.mlp_in[0].shape[1]

    def dims(self) -> dict:
        return {"n_layers": self.n_layers, "n_heads": self.n_heads, "head_dim": self.head_dim,
                "d_model": self.d_model, "d_ff": self.d_ff, "vocab": self.vocab}

    def validate(self) -> None:
        d, dh = self.d_model, self.head_dim
        if self.embed.shape != (self.vocab, d):
            raise ValueError(f"embedding shape {self.embed.shape} != {(self.vocab, d)}")
        if self.out_head.shape != (d, self.vocab):
            raise ValueError(f"output head shape {self.out_head.shape} != {(d, self.vocab)}")
        for name in ("wq", "wk", "wv"):
            per_layer = getattr(self, name)
            if len(per_layer) != self.n_layers:
                raise ValueError(f"{name} has {len(per_layer)} layers, expected {self.n_layers}")
            for l, heads in enumerate(per_layer):
                if len(heads) != self.n_heads:
                    raise ValueError(f"{name}[{l}] has {len(heads)} heads, expected {self.n_heads}")
                for w in heads:
                    if w.shape != (d, dh):
                        raise ValueError(f"{name}[{l}] head shape {w.shape} != {(d, dh)}")
        for l in range(self.n_layers):
            if self.wl[l].shape != (d, d):
                raise ValueError(f"wl[{l}] shape {self.wl[l].shape} != {(d, d)}")

    def wl_head(self, layer: int, head: int) -> np.ndarray:
        """Row block of W_L for ``head``, transposed to d x head_dim."""
        dh = self.head_dim
        return self.wl[layer][head * dh:(head + 1) * dh, :].T.copy()


def gen_model(seed: int = 0, n_layers: int = 4, n_heads: int = 4, head_dim: int = 8,
              vocab: int = 256, d_ff: int | None = None, spectral_decay: float = 0.6,
              attn_gain: float = 2.0, logit_gain: float = 4.0, layer_tie: float = 0.0,
              residual_gain: float = 1.0) -> ToyModel:
    """Seeded random model whose Q/K/V projections have geometrically decaying spectra.

    A projection is ``G diag(decay**i) O`` with G Gaussian and O a random
    orthogonal mixer, so activations concentrate on a few rotated directions
    that are not axis aligned. ``layer_tie`` in [0, 1) blends each layer's
    Q/K projections with the previous layer's (variance preserving), which
    makes neighbouring layers rank tokens alike; a small ``residual_gain``
    (scale of the attention-linear and MLP-out weights) keeps the residual
    stream from drifting between layers.
    """
    if not 0.0 <= layer_tie < 1.0:
        raise ValueError(f"layer_tie must lie in [0, 1), got {layer_tie}")
    rng = np.random.default_rng(seed)
    d = n_heads * head_dim
    d_ff = d_ff or 2 * d
    spectrum = spectral_decay ** np.arange(head_dim)

    def proj():
        g = rng.standard_normal((d, head_dim)) / np.sqrt(d)
        return attn_gain * (g * spectrum) @ random_orthogonal(head_dim, rng)

    embed = rng.standard_normal((vocab, d))
    def tied(prev):
        fresh = proj()
        if prev is None or layer_tie == 0.0:
            return fresh
        return np.sqrt(layer_tie) * prev + np.sqrt(1.0 - layer_tie) * fresh

    wq, wk = [], []
    for l in range(n_layers):
        wq.append([tied(wq[-1][h] if l else None) for h in range(n_heads)])
        wk.append([tied(wk[-1][h] if l else None) for h in range(n_heads)])
    wv = [[proj() for _ in range(n_heads)] for _ in range(n_layers)]
    wl = [residual_gain * rng.standard_normal((d, d)) / np.sqrt(d) for _ in range(n_layers)]
    mlp_in = [rng.standard_normal((d, d_ff)) / np.sqrt(d) for _ in range(n_layers)]
    mlp_out = [0.5 * residual_gain * rng.standard_normal((d_ff, d)) / np.sqrt(d_ff) for _ in range(n_layers)]
    out_head = logit_gain * rng.standard_normal((d, vocab)) / np.sqrt(d)
    model = ToyModel(n_layers, n_heads, head_dim, vocab, embed, wq, wk, wv, wl,
                     mlp_in, mlp_out, out_head, seed=seed)
    model.validate()
    return model


@dataclass
class RotationSet:
    """Per (layer, head) rotations for the QK pair and the V-W_L pair."""

    r_qk: list[list[np.ndarray]]
    r_vl: list[list[np.ndarray]]
    sv_qk: list[list[np.ndarray]]
    sv_vl: list[list[np.ndarray]]
    meta: dict = field(default_factory=dict)

    @property
    def n_layers(self) -> int:
        return len(self.r_qk)

    @property
    def n_heads(self) -> int:
        return len(self.r_qk[0]) if self.r_qk else 0

    @classmethod
    def identity(cls, n_layers: int, n_heads: int, head_dim: int) -> "RotationSet":
        eye = lambda: np.eye(head_dim)
        ones = lambda: np.ones(head_dim)
        grid = lambda f: [[f() for _ in range(n_heads)] for _ in range(n_layers)]
        return cls(grid(eye), grid(eye), grid(ones), grid(ones))

    def max_orthogonality_error(self) -> float:
        worst = 0.0
        for mats in (self.r_qk, self.r_vl):
            for heads in mats:
                for r in heads:
                    worst = max(worst, float(np.abs(r.T @ r - np.eye(r.shape[1])).max()))
        return worst


@dataclass
class FoldedModel:
    """Model whose attention weights have the rotations multiplied in.

    ``wl_r[l]`` keeps the d x d layout of W_L: row block h holds
    ``R_vl[l][h].T @ W_L[block h]`` so that dropping trailing rows of a block
    matches dropping trailing columns of that head's value vectors.
    """

    base: ToyModel
    wq_r: list[list[np.ndarray]]
    wk_r: list[list[np.ndarray]]
    wv_r: list[list[np.ndarray]]
    wl_r: list[np.ndarray]
    rotations: RotationSet | None = None

    n_layers = property(lambda self: self.base.n_layers)
    n_heads = property(lambda self: self.base.n_heads)
    head_dim = property(lambda self: self.base.head_dim)
    d_model = property(lambda self: self.base.d_model)
    vocab = property(lambda self: self.base.vocab)


# ---- on-disk layout --------------------------------------------------------

def _dump(out: Path, manifest: dict, mats: dict[str, np.ndarray]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    manifest = dict(manifest, files=sorted(mats))
    for name, m in mats.items():
        write_matrix(out / f"{name}.zdcm", m)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    mats = {name: read_matrix(path / f"{name}.zdcm") for name in manifest["files"]}
    return manifest, mats


def _model_mats(m: ToyModel) -> dict[str, np.ndarray]:
    mats = {"embed": m.embed, "out_head": m.out_head}
    for l in range(m.n_layers):
        mats[f"L{l}_wl"] = m.wl[l]
        mats[f"L{l}_mlp_in"] = m.mlp_in[l]
        mats[f"L{l}_mlp_out"] = m.mlp_out[l]
        for h in range(m.n_heads):
            mats[f"L{l}_H{h}_wq"] = m.wq[l][h]
            mats[f"L{l}_H{h}_wk"] = m.wk[l][h]
            mats[f"L{l}_H{h}_wv"] = m.wv[l][h]
    return mats


def save_model(model: ToyModel, out) -> None:
    _dump(Path(out), {"kind": "toy-model", "dims": model.dims(), "seed": model.seed},
          _model_mats(model))


def _model_from(manifest: dict, mats: dict) -> ToyModel:
    dims = manifest["dims"]
    nl, nh = dims["n_layers"], dims["n_heads"]
    grid = lambda key: [[mats[f"L{l}_H{h}_{key}"] for h in range(nh)] for l in range(nl)]
    model = ToyModel(nl, nh, dims["head_dim"], dims["vocab"], mats["embed"],
                     grid("wq"), grid("wk"), grid("wv"),
                     [mats[f"L{l}_wl"] for l in range(nl)],
                     [mats[f"L{l}_mlp_in"] for l in range(nl)],
                     [mats[f"L{l}_mlp_out"] for l in range(nl)],
                     mats["out_head"], seed=manifest.get("seed"))
    model.validate()
    return model


def load_model(path) -> ToyModel:
    manifest, mats = _load(path)
    if manifest.get("kind") != "toy-model":
        raise ValueError(f"{path} is not a toy-model directory")
    return _model_from(manifest, mats)


def save_rotations(rot: RotationSet, out) -> None:
    mats = {}
    for l in range(rot.n_layers):
        for h in range(rot.n_heads):
            mats[f"L{l}_H{h}_qk"] = rot.r_qk[l][h]
            mats[f"L{l}_H{h}_vl"] = rot.r_vl[l][h]
            mats[f"L{l}_H{h}_qk_sv"] = rot.sv_qk[l][h][None, :]
            mats[f"L{l}_H{h}_vl_sv"] = rot.sv_vl[l][h][None, :]
    manifest = {"kind": "rotations", "n_layers": rot.n_layers, "n_heads": rot.n_heads}
    manifest.update(rot.meta)
    _dump(Path(out), manifest, mats)


def load_rotations(path) -> RotationSet:
    manifest, mats = _load(path)
    if manifest.get("kind") != "rotations":
        raise ValueError(f"{path} is not a rotations directory")
    nl, nh = manifest["n_layers"], manifest["n_heads"]
    grid = lambda key, sv=False: [[mats[f"L{l}_H{h}_{key}"][0] if sv else mats[f"L{l}_H{h}_{key}"]
                                   for h in range(nh)] for l in range(nl)]
    meta = {k: v for k, v in manifest.items() if k not in ("kind", "n_layers", "n_heads", "files")}
    return RotationSet(grid("qk"), grid("vl"), grid("qk_sv", True), grid("vl_sv", True), meta)


def save_folded(folded: FoldedModel, out) -> None:
    mats = _model_mats(folded.base)
    for l in range(folded.n_layers):
        mats[f"L{l}_wl_r"] = folded.wl_r[l]
        for h in range(folded.n_heads):
            mats[f"L{l}_H{h}_wq_r"] = folded.wq_r[l][h]
            mats[f"L{l}_H{h}_wk_r"] = folded.wk_r[l][h]
            mats[f"L{l}_H{h}_wv_r"] = folded.wv_r[l][h]
    if folded.rotations is not None:
        for l in range(folded.n_layers):
            for h in range(folded.n_heads):
                mats[f"L{l}_H{h}_qk"] = folded.rotations.r_qk[l][h]
                mats[f"L{l}_H{h}_vl"] = folded.rotations.r_vl[l][h]
                mats[f"L{l}_H{h}_qk_sv"] = folded.rotations.sv_qk[l][h][None, :]
                mats[f"L{l}_H{h}_vl_sv"] = folded.rotations.sv_vl[l][h][None, :]
    _dump(Path(out), {"kind": "folded-model", "dims": folded.base.dims(), "seed": folded.base.seed,
                      "has_rotations": folded.rotations is not None}, mats)


def load_folded(path) -> FoldedModel:
    manifest, mats = _load(path)
    if manifest.get("kind") != "folded-model":
        raise ValueError(f"{path} is not a folded-model directory")
    base = _model_from(manifest, mats)
    nl, nh = base.n_layers, base.n_heads
    grid = lambda key: [[mats[f"L{l}_H{h}_{key}"] for h in range(nh)] for l in range(nl)]
    rot = None
    if manifest.get("has_rotations"):
        rot = RotationSet(grid("qk"), grid("vl"),
                          [[m[0] for m in row] for row in grid("qk_sv")],
                          [[m[0] for m in row] for row in grid("vl_sv")])
    return FoldedModel(base, grid("wq_r"), grid("wk_r"), grid("wv_r"),
                       [mats[f"L{l}_wl_r"] for l in range(nl)], rot)
