"""Spectral normalization by power iteration.

The weight of a layer is viewed as a matrix of shape ``(out_features, -1)``
and divided by an estimate of its largest singular value.  The estimate is
``u^T W v`` where ``u`` and ``v`` are refined by power iteration and stored
between calls, so a single iteration per training step is enough once the
vectors have warmed up.
"""
import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils import parametrize

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-12


@dataclass
class SpectralState:
    u: torch.Tensor
    v: torch.Tensor
    power_iterations: int = 1
    sigma: float = float("nan")
    degenerate: bool = False


def _as_matrix(weight):
    return weight.reshape(weight.shape[0], -1)


def _normalize(x, fallback):
    norm = torch.linalg.vector_norm(x)
    if norm <= SIGMA_FLOOR:
        return fallback
    return x / norm


def power_iterate(w_mat, u, v, n_iter):
    """Run ``n_iter`` rounds of power iteration on a 2-D matrix (no autograd)."""
    with torch.no_grad():
        for _ in range(n_iter):
            v = _normalize(w_mat.t() @ u, v)
            u = _normalize(w_mat @ v, u)
    return u, v


def converge(w_mat, u, v, tol=1e-7, max_iter=2000, chunk=10):
    """Power-iterate until the estimate changes by less than ``tol`` (relative).

    Used once at construction.  Kernels whose top two singular values are
    close need hundreds of rounds, far more than a per-step budget allows.
    Returns ``(u, v, iterations)``.
    """
    sigma, done = None, 0
    while done < max_iter:
        u, v = power_iterate(w_mat, u, v, chunk)
        done += chunk
        with torch.no_grad():
            new = torch.dot(u, w_mat @ v).abs().item()
        if sigma is not None and abs(new - sigma) <= tol * max(new, SIGMA_FLOOR):
            break
        sigma = new
    return u, v, done


def spectral_normalize(weight, state):
    """Divide ``weight`` by its estimated top singular value.

    Returns ``(normalized_weight, new_state)``.  ``state.u`` must have length
    ``weight.shape[0]``.  Gradients flow through ``weight`` with ``u`` and
    ``v`` held constant, as in the usual formulation.
    """
    w_mat = _as_matrix(weight)
    if state.u.shape != (w_mat.shape[0],) or state.v.shape != (w_mat.shape[1],):
        raise ValueError(
            f"spectral state shapes u{tuple(state.u.shape)} v{tuple(state.v.shape)} "
            f"do not match weight matrix {tuple(w_mat.shape)}")
    u, v = power_iterate(w_mat, state.u, state.v, state.power_iterations)
    sigma = torch.dot(u, w_mat @ v)
    degenerate = bool(sigma.detach().abs() < SIGMA_FLOOR)
    if degenerate:
        log.warning("spectral norm estimate below %.0e; flooring", SIGMA_FLOOR)
        sigma = sigma.new_tensor(SIGMA_FLOOR)
    new_state = SpectralState(u=u, v=v, power_iterations=state.power_iterations,
                              sigma=float(sigma.detach()), degenerate=degenerate)
    return weight / sigma, new_state


class SpectralNorm(nn.Module):
    """Parametrization applying :func:`spectral_normalize` to a layer weight.

    In training mode the stored vectors are refined on every access.  In eval
    mode they are frozen, which makes the normalized weight a fixed smooth
    function of the raw weight (useful for finite-difference checks).
    """

    def __init__(self, weight, n_power_iterations=1):
        super().__init__()
        rows, cols = _as_matrix(weight).shape
        u = F.normalize(torch.randn(rows, dtype=weight.dtype), dim=0)
        v = F.normalize(torch.randn(cols, dtype=weight.dtype), dim=0)
        self.register_buffer("u", u)
        self.register_buffer("v", v)
        self.n_power_iterations = n_power_iterations
        self.sigma = float("nan")
        self.degenerate = False
        # warm up so the first forward already sees a converged estimate
        w64 = _as_matrix(weight.detach()).double()
        u64, v64, self.warmup_iterations = converge(w64, u.double(), v.double())
        self.u.copy_(u64)
        self.v.copy_(v64)

    def forward(self, weight):
        n_iter = self.n_power_iterations if self.training else 0
        state = SpectralState(self.u, self.v, n_iter)
        out, state = spectral_normalize(weight, state)
        if self.training:
            with torch.no_grad():
                self.u.copy_(state.u)
                self.v.copy_(state.v)
        self.sigma = state.sigma
        self.degenerate = state.degenerate
        return out


def spectral_norm(module, name="weight", n_power_iterations=1):
    parametrize.register_parametrization(
        module, name, SpectralNorm(getattr(module, name), n_power_iterations))
    return module


def spectral_modules(model):
    """Yield every :class:`SpectralNorm` parametrization inside ``model``."""
    for m in model.modules():
        if isinstance(m, SpectralNorm):
            yield m


def set_power_iterations(model, n):
    for sn in spectral_modules(model):
        sn.n_power_iterations = n


def normalized_weights(model):
    """Map of layer path -> normalized weight for every spectrally normalized layer."""
    out = {}
    for path, m in model.named_modules():
        if parametrize.is_parametrized(m, "weight") and any(
                isinstance(p, SpectralNorm) for p in m.parametrizations.weight):
            out[path] = m.weight
    return out
