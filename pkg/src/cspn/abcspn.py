"""Autoregressive block-wise conditional circuits for images.

An image is cut into a grid of pixel blocks visited in raster order. The joint
density factorizes as ``p(c) * prod_i p(B_i | B_1..B_{i-1}, c)`` and each
factor is a conditional circuit whose evidence is the flattened preceding
blocks followed by the one-hot class.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import circuit as cc
from ._rng import make_rng
from .data import Column, Dataset, Schema
from .learn import LearnParams, LearnStats, learn_cspn

LEAF_MODES = {"gaussian": "continuous", "bernoulli": "binary"}
MANIFEST = "manifest.json"


class BlockTrainingError(RuntimeError):
    def __init__(self, block, cause):
        super().__init__(f"block {block}: {type(cause).__name__}: {cause}")
        self.block = block


@dataclass(frozen=True)
class BlockGrid:
    """``block_rows x block_cols`` blocks tiling an ``height x width`` image."""

    height: int
    width: int
    block_rows: int
    block_cols: int

    def __post_init__(self):
        if min(self.height, self.width, self.block_rows, self.block_cols) < 1:
            raise ValueError("grid dimensions must be positive")
        if self.height % self.block_rows or self.width % self.block_cols:
            raise ValueError(f"{self.block_rows}x{self.block_cols} blocks do not tile a {self.height}x{self.width} image")

    @property
    def num_blocks(self) -> int:
        return self.block_rows * self.block_cols

    @property
    def block_shape(self) -> tuple:
        return self.height // self.block_rows, self.width // self.block_cols

    @property
    def blocks(self) -> list:
        """Flat (row-major) pixel indices of each block; blocks and pixels in raster order."""
        bh, bw = self.block_shape
        out = []
        for br in range(self.block_rows):
            for bc in range(self.block_cols):
                rr, cc_ = np.meshgrid(np.arange(br * bh, (br + 1) * bh), np.arange(bc * bw, (bc + 1) * bw), indexing="ij")
                out.append((rr * self.width + cc_).ravel())
        return out

    def preceding(self, i: int) -> np.ndarray:
        blocks = self.blocks
        return np.concatenate(blocks[:i]) if i else np.empty(0, dtype=np.int64)


@dataclass
class AbcspnModel:
    grid: BlockGrid
    class_prior: np.ndarray
    blocks: list
    leaf: str = "gaussian"
    stats: list = field(default_factory=list, repr=False)

    @property
    def num_classes(self) -> int:
        return len(self.class_prior)

    def num_x(self, i: int) -> int:
        return len(self.grid.preceding(i)) + self.num_classes


def _flatten(images, grid):
    images = np.asarray(images, dtype=float)
    if images.ndim == 2:
        images = images[None]
    if images.shape[1:] != (grid.height, grid.width):
        raise ValueError(f"images are {images.shape[1:]}, grid expects {(grid.height, grid.width)}")
    return images.reshape(images.shape[0], -1)


def _class_matrix(classes, num_classes, n):
    """One-hot rows for integer classes, or validated mixture weights."""
    c = np.asarray(classes)
    if c.dtype.kind in "iu":
        c = np.broadcast_to(c.astype(np.int64), (n,))
        if np.any(c < 0) or np.any(c >= num_classes):
            raise ValueError(f"class out of range 0..{num_classes - 1}")
        return np.eye(num_classes)[c]
    w = np.asarray(classes, dtype=float)
    w = np.broadcast_to(w, (n, num_classes)) if w.ndim == 1 else w
    if w.shape != (n, num_classes) or np.any(w < -1e-12) or np.any(np.abs(w.sum(axis=1) - 1) > 1e-9):
        raise ValueError("class mixture weights must lie on the simplex")
    return np.array(w)


def _block_dataset(pixels, prev, onehot, leaf):
    ytype = LEAF_MODES[leaf]
    cols = [Column(f"p{j}", ytype, "Y") for j in range(pixels.shape[1])]
    cols += [Column(f"q{j}", "continuous", "X") for j in range(prev.shape[1])]
    cols += [Column(f"c{j}", "continuous", "X") for j in range(onehot.shape[1])]
    return Dataset(np.column_stack([pixels, prev, onehot]), Schema(tuple(cols)))


def abcspn_train(images, labels, grid: BlockGrid, params: LearnParams | None = None,
                 num_classes: int | None = None, leaf: str = "gaussian") -> AbcspnModel:
    """Learn one conditional circuit per block and an add-one smoothed class prior.

    ``images`` are ``n x H x W`` in [0, 1] (exactly 0/1 for bernoulli leaves).
    """
    if leaf not in LEAF_MODES:
        raise ValueError(f"leaf must be one of {sorted(LEAF_MODES)}")
    flat = _flatten(images, grid)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (flat.shape[0],):
        raise ValueError("need one label per image")
    num_classes = int(num_classes if num_classes is not None else labels.max() + 1)
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise ValueError(f"labels must lie in 0..{num_classes - 1}")
    if np.any(flat < 0) or np.any(flat > 1):
        raise ValueError("pixel values must lie in [0, 1]")
    prior = (np.bincount(labels, minlength=num_classes) + 1.0) / (len(labels) + num_classes)
    onehot = np.eye(num_classes)[labels]
    params = params or LearnParams()
    circuits, stats = [], []
    for i, idx in enumerate(grid.blocks):
        data = _block_dataset(flat[:, idx], flat[:, grid.preceding(i)], onehot, leaf)
        st = LearnStats()
        try:
            circuits.append(learn_cspn(data, params, st))
        except (ArithmeticError, ValueError) as e:
            raise BlockTrainingError(i, e) from e
        stats.append(st)
    return AbcspnModel(grid, prior, circuits, leaf, stats)


def block_terms(model: AbcspnModel, images, classes) -> np.ndarray:
    """(n, num_blocks) per-block conditional log-densities.

    NaN pixels are marginalized. A block may only be conditioned on observed
    pixels, so every partially observed block must be followed by fully
    marginalized ones; those contribute log 1 = 0.
    """
    flat = _flatten(images, model.grid)
    n = flat.shape[0]
    cond = _class_matrix(classes, model.num_classes, n)
    out = np.zeros((n, model.grid.num_blocks))
    blocks = model.grid.blocks
    for i, idx in enumerate(blocks):
        y = flat[:, idx]
        hidden = np.all(np.isnan(y), axis=1)
        rows = ~hidden
        if not rows.any():
            continue
        prev = flat[rows][:, np.concatenate(blocks[:i]).astype(np.int64)] if i else np.empty((rows.sum(), 0))
        if np.any(np.isnan(prev)):
            raise ValueError(f"block {i} is conditioned on marginalized pixels")
        x = np.column_stack([prev, cond[rows]])
        out[rows, i] = cc.log_marginal(model.blocks[i], y[rows], x) if np.any(np.isnan(y[rows])) else cc.log_density(model.blocks[i], y[rows], x)
    return out


def abcspn_log_likelihood(model: AbcspnModel, images, classes):
    """``log p(c) + sum_i log p(B_i | B_<i, c)``; scalar for one image, (n,) for a batch."""
    single = np.ndim(images) == 2
    flat_n = 1 if single else np.shape(images)[0]
    c = np.broadcast_to(np.asarray(classes, dtype=np.int64), (flat_n,))
    if np.any(c < 0) or np.any(c >= model.num_classes):
        raise ValueError(f"class out of range 0..{model.num_classes - 1}")
    ll = np.log(model.class_prior[c]) + block_terms(model, images, c).sum(axis=1)
    return float(ll[0]) if single else ll


def abcspn_sample(model: AbcspnModel, classes=None, rng=None, n: int = 1) -> np.ndarray:
    """Ancestral sampling block by block; returns ``n x H x W`` images.

    ``classes`` is a class id, per-image ids, mixture weights (length C) or
    per-image weights; the class encoding is fed to every block as evidence.
    ``None`` draws classes from the prior.
    """
    rng = make_rng(rng)
    if classes is None:
        classes = rng.choice(model.num_classes, size=n, p=model.class_prior)
    elif np.ndim(classes) == 1 and np.asarray(classes).dtype.kind in "iu":
        n = len(classes)
    cond = _class_matrix(classes, model.num_classes, n)
    g = model.grid
    flat = np.zeros((n, g.height * g.width))
    blocks = model.grid.blocks
    for i, idx in enumerate(blocks):
        prev = flat[:, np.concatenate(blocks[:i]).astype(np.int64)] if i else np.empty((n, 0))
        draw = cc.sample(model.blocks[i], np.column_stack([prev, cond]), rng)
        flat[:, idx] = np.clip(draw, 0.0, 1.0)
    return flat.reshape(n, g.height, g.width)


def save_model(model: AbcspnModel, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = [f"block_{i:04d}.json" for i in range(len(model.blocks))]
    for name, c in zip(files, model.blocks):
        cc.save(c, d / name)
    g = model.grid
    manifest = {
        "format_version": cc.FORMAT_VERSION,
        "height": g.height, "width": g.width, "block_rows": g.block_rows, "block_cols": g.block_cols,
        "num_classes": model.num_classes,
        "class_prior": [format(p, ".16e") for p in model.class_prior],
        "leaf": model.leaf,
        "blocks": files,
    }
    (d / MANIFEST).write_text(json.dumps(manifest, indent=1) + "\n")


def load_model(directory) -> AbcspnModel:
    d = Path(directory)
    m = json.loads((d / MANIFEST).read_text())
    grid = BlockGrid(m["height"], m["width"], m["block_rows"], m["block_cols"])
    if len(m["blocks"]) != grid.num_blocks:
        raise ValueError(f"manifest lists {len(m['blocks'])} blocks, grid has {grid.num_blocks}")
    prior = np.array([float(p) for p in m["class_prior"]])
    if len(prior) != m["num_classes"] or abs(prior.sum() - 1) > 1e-9:
        raise ValueError("class prior does not match num_classes or does not sum to 1")
    return AbcspnModel(grid, prior, [cc.load(d / f) for f in m["blocks"]], m.get("leaf", "gaussian"))
