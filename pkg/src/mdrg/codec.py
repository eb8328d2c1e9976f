"""Discrete image auto-encoder: patch encoder, codebook quantizer, patch decoder.

An image (H, W, 3) in [0, 1] is split into an h x w grid of patches, each
patch is embedded to a d_z vector, every cell is snapped to its nearest
codebook entry (L2, ties to the smallest index), and the decoder maps the
quantized grid back to pixels. The cell grid read row-major is the image's
token sequence; token k selects codebook entry k.

Training uses the plain VQ objective: reconstruction MSE + codebook term
||sg(z) - z_q||^2 + beta * commitment term, with a straight-through gradient
through the quantizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn


class CodecError(ValueError):
    pass


class CodecTrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class CodecConfig:
    image_size: int = 32
    grid_size: int = 4
    codebook_size: int = 64
    embed_dim: int = 16
    enc_hidden: int = 128

    def __post_init__(self) -> None:
        if self.image_size % self.grid_size != 0:
            raise CodecError("image_size must be divisible by grid_size")
        factor = self.image_size // self.grid_size
        if factor & (factor - 1) != 0:
            raise CodecError("downsample factor must be a power of two")

    @property
    def patch(self) -> int:
        return self.image_size // self.grid_size

    @property
    def tokens_per_image(self) -> int:
        return self.grid_size * self.grid_size

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CodecHyperParams:
    steps: int = 1500
    batch_size: int = 16
    lr: float = 1e-3
    beta: float = 0.25
    seed: int = 0
    log_every: int = 200


class VqCodec(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        patch_dim = cfg.patch * cfg.patch * 3
        self.enc_fc1 = nn.Linear(patch_dim, cfg.enc_hidden)
        self.enc_fc2 = nn.Linear(cfg.enc_hidden, cfg.embed_dim)
        self.dec_fc1 = nn.Linear(cfg.embed_dim, cfg.enc_hidden)
        self.dec_fc2 = nn.Linear(cfg.enc_hidden, patch_dim)
        bound = 1.0 / cfg.codebook_size
        self.codebook = nn.Parameter(
            torch.empty(cfg.codebook_size, cfg.embed_dim).uniform_(-bound, bound)
        )

    def _patches(self, imgs: torch.Tensor) -> torch.Tensor:
        # (B, H, W, 3) -> (B, h, w, patch*patch*3)
        b = imgs.shape[0]
        g, p = self.cfg.grid_size, self.cfg.patch
        x = imgs.reshape(b, g, p, g, p, 3).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(b, g, g, p * p * 3)

    def _unpatch(self, flat: torch.Tensor) -> torch.Tensor:
        b = flat.shape[0]
        g, p = self.cfg.grid_size, self.cfg.patch
        x = flat.reshape(b, g, g, p, p, 3).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(b, g * p, g * p, 3)

    def encode(self, imgs: torch.Tensor) -> torch.Tensor:
        """(B, H, W, 3) in [0, 1] -> latent grid (B, h, w, d_z)."""
        if imgs.ndim != 4 or imgs.shape[1:] != (self.cfg.image_size, self.cfg.image_size, 3):
            raise CodecError(
                f"expected (B, {self.cfg.image_size}, {self.cfg.image_size}, 3), got {tuple(imgs.shape)}"
            )
        x = self._patches(imgs * 2.0 - 1.0)
        return self.enc_fc2(torch.tanh(self.enc_fc1(x)))

    def decode(self, grid: torch.Tensor) -> torch.Tensor:
        """(B, h, w, d_z) -> image batch (B, H, W, 3), values in [0, 1]."""
        g = self.cfg.grid_size
        if grid.ndim != 4 or grid.shape[1:] != (g, g, self.cfg.embed_dim):
            raise CodecError(
                f"expected (B, {g}, {g}, {self.cfg.embed_dim}) grid, got {tuple(grid.shape)}"
            )
        x = self.dec_fc2(torch.tanh(self.dec_fc1(grid)))
        return self._unpatch(torch.sigmoid(x))


def quantize(codebook: torch.Tensor, grid: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Snap each grid cell to its nearest codebook entry.

    Returns (z_q, indices): z_q has the grid's shape, indices the grid's
    leading shape. Exact distance ties resolve to the smallest index.
    z_q keeps a gradient path into the codebook; index search runs detached.
    """
    if codebook.ndim != 2 or codebook.shape[0] == 0:
        raise CodecError("codebook must be a non-empty (K, d_z) matrix")
    if grid.shape[-1] != codebook.shape[1]:
        raise CodecError(
            f"embedding dim mismatch: grid {grid.shape[-1]} vs codebook {codebook.shape[1]}"
        )
    lead = grid.shape[:-1]
    flat = grid.reshape(-1, grid.shape[-1])
    with torch.no_grad():
        dists = (flat.unsqueeze(1) - codebook.unsqueeze(0)).pow(2).sum(-1)
        min_vals = dists.min(dim=-1, keepdim=True).values
        k = codebook.shape[0]
        # Smallest index among the exact minima, independent of argmin kernel
        # tie semantics.
        cand = torch.where(
            dists <= min_vals,
            torch.arange(k, device=dists.device).expand_as(dists),
            torch.tensor(k, device=dists.device),
        )
        indices = cand.min(dim=-1).values
    z_q = codebook.index_select(0, indices).reshape(grid.shape)
    return z_q, indices.reshape(lead)


def indices_to_codes(codebook: torch.Tensor, indices: torch.Tensor) -> torch.Tensor:
    """Exact codebook lookup; inverse of the index mapping."""
    if indices.numel() and (indices.min() < 0 or indices.max() >= codebook.shape[0]):
        raise CodecError("token index out of codebook range")
    flat = indices.reshape(-1)
    return codebook.index_select(0, flat).reshape(*indices.shape, codebook.shape[1])


def vq_loss(
    model: VqCodec, imgs: torch.Tensor, beta: float = 0.25
) -> tuple[torch.Tensor, dict[str, float]]:
    """Reconstruction + codebook + beta * commitment, straight-through quantizer."""
    z = model.encode(imgs)
    z_q, _ = quantize(model.codebook, z)
    z_st = z + (z_q - z).detach()
    recon = model.decode(z_st)
    rec_loss = (recon - imgs).pow(2).mean()
    codebook_loss = (z.detach() - z_q).pow(2).mean()
    commit_loss = (z - z_q.detach()).pow(2).mean()
    total = rec_loss + codebook_loss + beta * commit_loss
    parts = {
        "recon": float(rec_loss.detach()),
        "codebook": float(codebook_loss.detach()),
        "commit": float(commit_loss.detach()),
    }
    return total, parts


def encode_image(model: VqCodec, img: np.ndarray) -> torch.Tensor:
    """Single (H, W, 3) numpy image in [0, 1] -> (h, w, d_z) latent grid."""
    dtype = next(model.parameters()).dtype
    t = torch.from_numpy(np.ascontiguousarray(img)).to(dtype).unsqueeze(0)
    with torch.no_grad():
        return model.encode(t).squeeze(0)


def decode_grid(model: VqCodec, grid: torch.Tensor) -> np.ndarray:
    """(h, w, d_z) quantized grid -> (H, W, 3) numpy image in [0, 1]."""
    with torch.no_grad():
        out = model.decode(grid.unsqueeze(0)).squeeze(0)
    return out.double().clamp(0.0, 1.0).numpy()


def image_to_tokens(model: VqCodec, img: np.ndarray) -> list[int]:
    """Image -> row-major list of h*w codebook indices."""
    grid = encode_image(model, img)
    _, idx = quantize(model.codebook, grid)
    return [int(i) for i in idx.reshape(-1)]


def tokens_to_grid(model: VqCodec, tokens: list[int]) -> torch.Tensor:
    g = model.cfg.grid_size
    if len(tokens) != g * g:
        raise CodecError(f"expected {g * g} tokens, got {len(tokens)}")
    idx = torch.tensor(tokens, dtype=torch.long).reshape(g, g)
    with torch.no_grad():
        return indices_to_codes(model.codebook, idx)


def check_codebook(codebook: torch.Tensor, tol: float = 1e-9) -> None:
    """Post-training invariant: entries finite and pairwise distinct."""
    if not torch.isfinite(codebook).all():
        raise CodecError("codebook contains non-finite entries")
    dists = (codebook.unsqueeze(0) - codebook.unsqueeze(1)).abs().amax(-1)
    dists.fill_diagonal_(float("inf"))
    if float(dists.min()) <= tol:
        raise CodecError("codebook contains duplicate entries")


def train_codec(
    images: np.ndarray, cfg: CodecConfig, hp: CodecHyperParams
) -> tuple[VqCodec, list[dict]]:
    """Fit codec + codebook on an (N, H, W, 3) image stack. Raises on divergence."""
    if images.ndim != 4 or images.shape[0] < 1:
        raise CodecError("need at least one training image")
    torch.manual_seed(hp.seed)
    model = VqCodec(cfg)
    data = torch.from_numpy(np.ascontiguousarray(images)).float()
    opt = torch.optim.Adam(model.parameters(), lr=hp.lr)
    rng = np.random.default_rng(hp.seed)
    log: list[dict] = []
    n = data.shape[0]
    for step in range(hp.steps):
        take = rng.integers(0, n, size=min(hp.batch_size, n))
        batch = data[torch.from_numpy(take)]
        loss, parts = vq_loss(model, batch, beta=hp.beta)
        if not torch.isfinite(loss):
            raise CodecTrainingError(f"codec loss diverged (non-finite) at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % hp.log_every == 0 or step == hp.steps - 1:
            log.append({"step": step, "loss": float(loss.detach()), **parts})
    check_codebook(model.codebook.detach())
    return model, log
