"""Co-attention (mutual non-local cross attention) and squeeze-and-co-excitation.

Feature maps are (N, H, W) tensors. The non-local block uses an embedded
Gaussian pairwise function with an N/2-channel bottleneck; its output
projection starts at zero so a fresh block is exactly the identity under
element-wise sum.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


def _uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_non_local_params(channels: int, rng: np.random.Generator, prefix: str) -> dict[str, Tensor]:
    """1x1 projections theta/phi/g (N -> N/2) and a zero output projection (N/2 -> N)."""
    if channels % 2:
        raise ShapeError(f"non-local block needs an even channel count, got {channels}")
    half = channels // 2
    p = {
        f"{prefix}.theta": Tensor(_uniform_fan_in(rng, (half, channels), channels), requires_grad=True),
        f"{prefix}.phi": Tensor(_uniform_fan_in(rng, (half, channels), channels), requires_grad=True),
        f"{prefix}.g": Tensor(_uniform_fan_in(rng, (half, channels), channels), requires_grad=True),
        f"{prefix}.out": Tensor(np.zeros((channels, half)), requires_grad=True),
    }
    return p


def init_sce_params(channels: int, reduction: int, rng: np.random.Generator,
                    prefix: str = "sce") -> dict[str, Tensor]:
    if channels % reduction:
        raise ShapeError(f"reduction ratio {reduction} does not divide channel count {channels}")
    hidden = channels // reduction
    return {
        f"{prefix}.fc1_w": Tensor(_uniform_fan_in(rng, (hidden, channels), channels), requires_grad=True),
        f"{prefix}.fc1_b": Tensor(np.zeros(hidden), requires_grad=True),
        f"{prefix}.fc2_w": Tensor(_uniform_fan_in(rng, (channels, hidden), hidden), requires_grad=True),
        f"{prefix}.fc2_b": Tensor(np.zeros(channels), requires_grad=True),
    }


def non_local_cross(x: Tensor, ref: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    """Attend every position of `x` over all positions of `ref`.

    Returns the residual map (same shape as x): out_proj(A @ g(ref)) where A
    is a row-stochastic attention matrix, softmax over reference positions of
    <theta(x), phi(ref)>.
    """
    if x.data.ndim != 3 or ref.data.ndim != 3:
        raise ShapeError("non_local_cross expects (C,H,W) maps")
    n, hx, wx = x.shape
    nr = ref.shape[0]
    if n != nr:
        raise ShapeError(f"channel mismatch: input has {n} channels, reference has {nr}")
    theta = params[f"{prefix}.theta"]
    phi = params[f"{prefix}.phi"]
    g = params[f"{prefix}.g"]
    out_w = params[f"{prefix}.out"]

    x_flat = T.reshape(x, (n, hx * wx))
    r_flat = T.reshape(ref, (n, ref.shape[1] * ref.shape[2]))
    tx = T.matmul(theta, x_flat)          # (N/2, Px)
    pr = T.matmul(phi, r_flat)            # (N/2, Pr)
    gr = T.matmul(g, r_flat)              # (N/2, Pr)
    logits = T.matmul(T.transpose2d(tx), pr)   # (Px, Pr)
    attn = T.softmax(logits, axis=1)
    attended = T.matmul(attn, T.transpose2d(gr))   # (Px, N/2)
    out = T.matmul(out_w, T.transpose2d(attended))  # (N, Px)
    return T.reshape(out, (n, hx, wx))


def attention_weights(x: Tensor, ref: Tensor, params: dict[str, Tensor], prefix: str) -> np.ndarray:
    """The attention matrix (input positions x reference positions), for probes."""
    n = x.shape[0]
    with T.no_grad():
        x_flat = T.reshape(x, (n, x.shape[1] * x.shape[2]))
        r_flat = T.reshape(ref, (n, ref.shape[1] * ref.shape[2]))
        tx = params[f"{prefix}.theta"].data @ x_flat.data
        pr = params[f"{prefix}.phi"].data @ r_flat.data
        logits = Tensor(tx.T @ pr)
        return T.softmax(logits, axis=1).data


def co_attention_extend(phi_i: Tensor, phi_p: Tensor, params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Mutually extend scene and patch features with cross non-local residuals.

    F(I) = phi(I) + psi(I; p), F(p) = phi(p) + psi(p; I); each direction has
    its own parameter set ("nonlocal_ip", "nonlocal_pi").
    """
    psi_ip = non_local_cross(phi_i, phi_p, params, "nonlocal_ip")
    psi_pi = non_local_cross(phi_p, phi_i, params, "nonlocal_pi")
    return T.add(phi_i, psi_ip), T.add(phi_p, psi_pi)


def squeeze_co_excitation(fp: Tensor, fi: Tensor, params: dict[str, Tensor],
                          excite_from: str = "query") -> tuple[Tensor, Tensor, Tensor]:
    """Shared channel reweighting w in (0,1)^N applied to both maps.

    excite_from selects what feeds the two-fc excitation path: "query" uses
    GAP of the patch map alone; "both" uses the element-wise sum of the two
    pooled vectors.
    """
    if fp.shape[0] != fi.shape[0]:
        raise ShapeError(f"channel mismatch: {fp.shape[0]} vs {fi.shape[0]}")
    pooled = T.gap(fp)
    if excite_from == "both":
        pooled = T.add(pooled, T.gap(fi))
    elif excite_from != "query":
        raise ValueError(f"excite_from must be 'query' or 'both', got {excite_from!r}")
    hidden = T.relu(T.add(T.matmul(params["sce.fc1_w"], pooled), params["sce.fc1_b"]))
    w = T.sigmoid(T.add(T.matmul(params["sce.fc2_w"], hidden), params["sce.fc2_b"]))
    return w, T.channel_scale(w, fp), T.channel_scale(w, fi)


def query_embedding(fp_tilde: Tensor) -> Tensor:
    """Query vector q: the reweighted patch map pooled to one value per channel."""
    return T.gap(fp_tilde)
