"""The energy-mask layer.

A feature map is carved into spatial tokens, each token is priced by a
retention energy, and tokens are soft-gated by that price:

* unary cost: alignment of the normalized token with a learned noise
  template ``w`` (plus a shared scalar bias), made positive with softplus
  and weighted by ``lambda_unary``;
* pairwise cost: summed cosine similarity to the token's Moore
  (8-connected) grid neighbors, softplus'd and weighted by ``lambda_pair``;
* gate: keep probability ``m = sigmoid(-z)``, multiplying the raw token;
* regularizer: ``mean(m * E)``, the expected energy of what stays active.

At inference only the unary score is evaluated; the pairwise pressure is
absorbed into ``w`` during training, so gating output is identical in both
modes while the pairwise computation is skipped entirely.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff
from . import tensor as T
from ._fileio import atomic_write_bytes

__all__ = [
    "NORM_EPS",
    "TokenGeometry",
    "MaskLayerParams",
    "EnergyDiagnostics",
    "NeighborTable",
    "neighbor_table",
    "tokenize",
    "unary_scores",
    "neighbor_cosine_sum",
    "energies",
    "gate",
    "reg_loss",
    "forward",
    "forward_nodes",
    "export_mask_pgm",
]

NORM_EPS = 1e-8


@dataclass(frozen=True)
class TokenGeometry:
    """How a (C, H, W) map is carved into an N x D token grid."""

    channels: int
    height: int
    width: int
    patch: int

    def __post_init__(self):
        if self.patch < 1:
            raise ValueError(f"patch size must be >= 1, got {self.patch}")
        if self.height % self.patch or self.width % self.patch:
            raise T.ShapeError(
                f"feature extents {self.height}x{self.width} not divisible by patch size {self.patch}"
            )

    @property
    def grid_h(self) -> int:
        return self.height // self.patch

    @property
    def grid_w(self) -> int:
        return self.width // self.patch

    @property
    def n_tokens(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def token_dim(self) -> int:
        return self.channels * self.patch * self.patch

    def fold_geometry(self):
        return (self.channels, self.height, self.width, self.patch)


@dataclass
class MaskLayerParams:
    """Trainables (w, b) and fixed energy weights of one mask layer.

    ``w`` is the noise template over token coordinates (length D); ``b`` is
    a single scalar bias shared by all tokens.
    """

    w: np.ndarray
    b: float = 0.0
    lambda_unary: float = 1e-3
    lambda_pair: float = 1e-3
    d: int = 1

    def __post_init__(self):
        self.w = T.as_f64(self.w)
        if self.w.ndim != 1:
            raise T.ShapeError(f"mask template w must be a vector, got shape {self.w.shape}")
        self.b = float(self.b)
        if self.lambda_unary < 0 or self.lambda_pair < 0:
            raise ValueError("energy weights lambda_unary/lambda_pair must be >= 0")
        if self.d < 1:
            raise ValueError(f"patch size must be >= 1, got {self.d}")


@dataclass
class EnergyDiagnostics:
    """Per-token readout of one forward pass (all arrays have length N)."""

    z: np.ndarray
    m: np.ndarray
    e_unary_plus: np.ndarray
    e_pair_plus: np.ndarray
    e_total: np.ndarray
    grid_h: int
    grid_w: int


class NeighborTable:
    """Moore (8-connected) adjacency on a token grid, truncated at borders.

    ``neighbors[i]`` is the sorted index list of token i's grid-adjacent
    tokens; ``adjacency`` is the matching symmetric 0/1 matrix.
    """

    def __init__(self, grid_h: int, grid_w: int):
        if grid_h < 1 or grid_w < 1:
            raise ValueError("grid extents must be >= 1")
        self.grid_h = grid_h
        self.grid_w = grid_w
        n = grid_h * grid_w
        adjacency = np.zeros((n, n))
        neighbors = []
        for r in range(grid_h):
            for c in range(grid_w):
                idx = []
                for dr in (-1, 0, 1):
                    for dc in (-1, 0, 1):
                        if dr == 0 and dc == 0:
                            continue
                        rr, cc = r + dr, c + dc
                        if 0 <= rr < grid_h and 0 <= cc < grid_w:
                            idx.append(rr * grid_w + cc)
                idx = np.array(sorted(idx), dtype=np.int64)
                neighbors.append(idx)
                adjacency[r * grid_w + c, idx] = 1.0
        self.neighbors = neighbors
        self.adjacency = adjacency
        self.adjacency.setflags(write=False)

    @property
    def n_tokens(self) -> int:
        return self.grid_h * self.grid_w


@lru_cache(maxsize=None)
def neighbor_table(grid_h: int, grid_w: int) -> NeighborTable:
    """Cached neighbor table; tables are immutable and shared."""
    return NeighborTable(grid_h, grid_w)


# ---------------------------------------------------------------------------
# ops


def tokenize(x, d: int, eps: float = NORM_EPS):
    """Unfold a feature map into tokens and L2-normalize each one.

    Returns ``(P, P_hat, geometry)`` where ``P`` holds the raw tokens and
    ``P_hat`` the rows divided by (norm + eps); zero tokens stay zero.
    ``x`` is (C, H, W), optionally with a leading batch axis.
    """
    x = T.as_f64(x)
    if x.ndim not in (3, 4):
        raise T.ShapeError(f"tokenize input must be (C, H, W) or (B, C, H, W), got {x.shape}")
    c, h, w = x.shape[-3:]
    geom = TokenGeometry(c, h, w, d)
    p = T.unfold(x, d)
    p_hat = T.l2norm_rows(p, eps=eps)
    return p, p_hat, geom


def unary_scores(p_hat, params: MaskLayerParams) -> np.ndarray:
    """z_i = w . p_hat_i + b for every token row."""
    p_hat = T.as_f64(p_hat)
    if p_hat.ndim not in (2, 3):
        raise T.ShapeError(f"unary_scores expects (N, D) tokens, got {p_hat.shape}")
    if params.w.shape[0] != p_hat.shape[-1]:
        raise T.ShapeError(
            f"mask template length {params.w.shape[0]} does not match token dim {p_hat.shape[-1]}"
        )
    return T.add(T.matmul(p_hat, params.w), params.b)


def neighbor_cosine_sum(p_hat, table: NeighborTable) -> np.ndarray:
    """Sum of cosine similarities between each token and its grid neighbors.

    Rows of ``p_hat`` are assumed normalized, so each summand is a cosine in
    [-1, 1] and the total lies in [-|N(i)|, |N(i)|].
    """
    p_hat = T.as_f64(p_hat)
    if p_hat.ndim not in (2, 3) or p_hat.shape[-2] != table.n_tokens:
        raise T.ShapeError(
            f"tokens {p_hat.shape} do not match {table.grid_h}x{table.grid_w} neighbor table"
        )
    sims = p_hat @ p_hat.swapaxes(-1, -2)
    return T._guard((table.adjacency * sims).sum(axis=-1), "neighbor_cosine_sum")


def energies(z, e_pair, params: MaskLayerParams):
    """Positive energy split: (E_u+, E_p+, E) with E = E_u+ + E_p+."""
    e_u_plus = T.scale(T.softplus(z), params.lambda_unary)
    e_p_plus = T.scale(T.softplus(e_pair), params.lambda_pair)
    return e_u_plus, e_p_plus, T.add(e_u_plus, e_p_plus)


def gate(z) -> np.ndarray:
    """Keep probability m = sigmoid(-z), strictly inside (0, 1)."""
    return T.sigmoid(T.scale(z, -1.0))


def reg_loss(m, e) -> float:
    """Expected energy of the active system: mean(m_i * E_i)."""
    return float(T.mean(T.mul(m, e)))


def forward(x, params: MaskLayerParams, mode: str = "train"):
    """Run the full layer: tokenize, score, gate, fold.

    Returns ``(x_tilde, diagnostics)``. In ``"infer"`` mode (and whenever
    ``lambda_pair == 0``) the pairwise pass is skipped entirely and reported
    as zero; the gated output is bitwise identical between modes. A leading
    batch axis on ``x`` carries through to the output and diagnostics.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    p, p_hat, geom = tokenize(x, params.d)
    z = unary_scores(p_hat, params)
    m = gate(z)
    e_u_plus = T.scale(T.softplus(z), params.lambda_unary)
    if mode == "train" and params.lambda_pair > 0:
        table = neighbor_table(geom.grid_h, geom.grid_w)
        e_p_plus = T.scale(T.softplus(neighbor_cosine_sum(p_hat, table)), params.lambda_pair)
        e_total = T.add(e_u_plus, e_p_plus)
    else:
        e_p_plus = np.zeros_like(z)
        e_total = e_u_plus
    x_tilde = T.fold(T.mul(p, m[..., None]), geom.fold_geometry())
    diag = EnergyDiagnostics(
        z=z,
        m=m,
        e_unary_plus=e_u_plus,
        e_pair_plus=e_p_plus,
        e_total=e_total,
        grid_h=geom.grid_h,
        grid_w=geom.grid_w,
    )
    return x_tilde, diag


def forward_nodes(tape, x, w, b, params: MaskLayerParams, mode: str = "train"):
    """Graph twin of :func:`forward` for training.

    ``x``, ``w`` and ``b`` are tape nodes; ``params`` supplies the fixed
    weights and patch size. ``x`` may carry a leading batch axis, in which
    case the per-token nodes do too and ``"reg_loss"`` averages over the
    whole batch. Kernels are shared with the plain path, so token scores and
    gates agree bitwise with :func:`forward` on each sample.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    c, h, wd = x.value.shape[-3:]
    geom = TokenGeometry(c, h, wd, params.d)
    if w.value.shape != (geom.token_dim,):
        raise T.ShapeError(
            f"mask template shape {w.value.shape} does not match token dim {geom.token_dim}"
        )
    p = tape.unfold(x, params.d)
    p_hat = tape.l2norm_rows(p, eps=NORM_EPS)
    z = tape.add(tape.matmul(p_hat, w), b)
    m = tape.sigmoid(tape.scale(z, -1.0))
    e_u_plus = tape.scale(tape.softplus(z), params.lambda_unary)
    if mode == "train" and params.lambda_pair > 0:
        table = neighbor_table(geom.grid_h, geom.grid_w)
        e_pair = tape.record("neighbor_cosine_sum", p_hat, table=table)
        e_p_plus = tape.scale(tape.softplus(e_pair), params.lambda_pair)
        e_total = tape.add(e_u_plus, e_p_plus)
    else:
        e_p_plus = None
        e_total = e_u_plus
    reg = tape.mean(tape.mul(m, e_total))
    masked = tape.mul(p, tape.reshape(m, m.value.shape + (1,)))
    x_tilde = tape.fold(masked, geometry=geom.fold_geometry())
    nodes = {
        "z": z,
        "m": m,
        "e_unary_plus": e_u_plus,
        "e_pair_plus": e_p_plus,
        "e_total": e_total,
        "reg_loss": reg,
    }
    return x_tilde, nodes


def _op_neighbor_cosine_sum(tape, p_hat, *, table: NeighborTable):
    out = tape._emit(neighbor_cosine_sum(p_hat.value, table), "neighbor_cosine_sum", (p_hat,))
    if out.requires_grad:
        adj = table.adjacency
        p = p_hat.value

        def backward(g):
            gp = g[..., None]
            # both endpoints of every neighbor pair receive gradient
            autodiff._accum(p_hat, gp * (adj @ p) + adj @ (gp * p))

        out.backward_fn = backward
    return out


autodiff.register_op("neighbor_cosine_sum", _op_neighbor_cosine_sum)


# ---------------------------------------------------------------------------
# mask export


def export_mask_pgm(m, geometry: TokenGeometry, path, out_hw=None) -> None:
    """Write keep probabilities as a binary 8-bit PGM (P5).

    The N values are laid on the token grid, bilinearly upsampled to
    ``out_hw`` (the layer's feature extent by default), and stored as
    round(255 * m).
    """
    m = T.as_f64(m)
    if m.shape != (geometry.n_tokens,):
        raise T.ShapeError(f"mask length {m.shape} does not match {geometry.n_tokens} tokens")
    out_h, out_w = out_hw if out_hw is not None else (geometry.height, geometry.width)
    grid = m.reshape(geometry.grid_h, geometry.grid_w)
    img = T.bilinear_resize(grid, out_h, out_w)
    data = np.rint(255.0 * img).clip(0, 255).astype(np.uint8)
    header = f"P5\n{out_w} {out_h}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + data.tobytes())
