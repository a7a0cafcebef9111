"""Miniature space-time grounding transformer.

Per sampled frame a small CNN yields a grid of spatial tokens and their mean
(the frame token).  Prompt tokens go through a text encoder; text and frame
tokens are then fused by a joint self-attention encoder.  The decoder has one
query per sampled frame; each layer runs temporal self-attention, attention
over the fused memory, and attention restricted to its own frame's spatial
tokens.  A pointer attention over those tokens gives a reference center that
the box head refines.
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

PAD, UNK = "<pad>", "<unk>"
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class GrounderConfig:
    vocab: tuple[str, ...] = (PAD, UNK)
    image_size: int = 64
    conv_channels: tuple[int, int] = (16, 32)
    d_model: int = 64
    heads: int = 4
    text_layers: int = 1
    encoder_layers: int = 2
    decoder_layers: int = 2
    ffn_dim: int = 128
    max_sampled_frames: int = 200
    max_text_len: int = 48
    # at inference the pointer is renormalized to this window around its peak; None disables
    local_radius: int | None = 2
    local_in_training: bool = False

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.d_model % 4:
            raise ValueError("d_model must be divisible by 4 for 2D position encodings")
        if self.image_size % 4:
            raise ValueError("image_size must be divisible by 4")
        if len(self.vocab) < 2 or self.vocab[:2] != (PAD, UNK):
            raise ValueError("vocab must start with <pad>, <unk>")
        if len(set(self.vocab)) != len(self.vocab):
            raise ValueError("vocab entries must be unique")

    @property
    def grid(self) -> int:
        return self.image_size // 4

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vocab"] = list(self.vocab)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GrounderConfig":
        d = dict(d)
        d["vocab"] = tuple(d["vocab"])
        d["conv_channels"] = tuple(d["conv_channels"])
        return cls(**d)


def build_vocab(texts) -> tuple[str, ...]:
    words = sorted({tok for t in texts for tok in tokenize(t)})
    return (PAD, UNK, *words)


def sinusoid_table(n: int, dim: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    i = torch.arange(0, dim, 2, dtype=torch.float64)[None, :]
    angle = pos / torch.pow(10000.0, i / dim)
    table = torch.zeros(n, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle)
    return table.float()


def grid_tables(grid: int, dim: int) -> tuple[torch.Tensor, torch.Tensor]:
    """2D sine encodings (grid*grid, dim) and normalized cell centers (grid*grid, 2)."""
    half = sinusoid_table(grid, dim // 2)
    ys, xs = torch.meshgrid(torch.arange(grid), torch.arange(grid), indexing="ij")
    pe = torch.cat([half[xs.reshape(-1)], half[ys.reshape(-1)]], dim=-1)
    centers = torch.stack([(xs.reshape(-1) + 0.5) / grid, (ys.reshape(-1) + 0.5) / grid], dim=-1)
    return pe, centers.float()


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)

    def forward(self, x, mem, pad=None):
        b, nq, d = x.shape
        nk = mem.shape[1]
        h = self.heads
        q = self.q(x).view(b, nq, h, d // h).transpose(1, 2)
        k = self.k(mem).view(b, nk, h, d // h).transpose(1, 2)
        v = self.v(mem).view(b, nk, h, d // h).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if pad is not None:
            logits = logits.masked_fill(pad[:, None, None, :], float("-inf"))
        out = torch.softmax(logits, dim=-1) @ v
        return self.o(out.transpose(1, 2).reshape(b, nq, d))


class FeedForward(nn.Sequential):
    def __init__(self, dim: int, hidden: int):
        super().__init__(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))


class EncoderLayer(nn.Module):
    def __init__(self, dim, heads, hidden):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, hidden)

    def forward(self, x, pad=None):
        y = self.norm1(x)
        x = x + self.attn(y, y, pad)
        return x + self.ffn(self.norm2(x))


class DecoderLayer(nn.Module):
    def __init__(self, dim, heads, hidden):
        super().__init__()
        self.norm_self = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, heads)
        self.norm_cross = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, heads)
        self.norm_space = nn.LayerNorm(dim)
        self.space_attn = Attention(dim, heads)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, hidden)

    def forward(self, x, memory, memory_pad, spatial, frame_pad):
        y = self.norm_self(x)
        x = x + self.self_attn(y, y, frame_pad)
        x = x + self.cross_attn(self.norm_cross(x), memory, memory_pad)
        b, t, d = x.shape
        y = self.norm_space(x).reshape(b * t, 1, d)
        x = x + self.space_attn(y, spatial.reshape(b * t, -1, d)).view(b, t, d)
        return x + self.ffn(self.norm_ffn(x))


class VisualEncoder(nn.Module):
    def __init__(self, channels: tuple[int, int], dim: int):
        super().__init__()
        c1, c2 = channels

        def conv(cin, cout, stride=1):
            return [nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.GroupNorm(4, cout), nn.GELU()]

        self.block1 = nn.Sequential(*conv(3, c1), *conv(c1, c1, 2))
        self.block2 = nn.Sequential(*conv(c1, c2), *conv(c2, c2, 2), *conv(c2, c2))
        self.proj = nn.Conv2d(c2, dim, 1)
        self.norm = nn.LayerNorm(dim)

    def forward(self, frames):
        # frames: (N, H, W, 3) in [0, 1] -> spatial tokens (N, S, d)
        x = self.proj(self.block2(self.block1(frames.permute(0, 3, 1, 2) * 2 - 1)))
        return self.norm(x.flatten(2).transpose(1, 2))


class GroundingModel(nn.Module):
    def __init__(self, cfg: GrounderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.visual = VisualEncoder(cfg.conv_channels, d)
        self.token_embed = nn.Embedding(len(cfg.vocab), d)
        self.text_layers = nn.ModuleList(EncoderLayer(d, cfg.heads, cfg.ffn_dim) for _ in range(cfg.text_layers))
        self.modality = nn.Parameter(torch.zeros(2, d))
        self.encoder = nn.ModuleList(EncoderLayer(d, cfg.heads, cfg.ffn_dim) for _ in range(cfg.encoder_layers))
        self.query_proj = nn.Linear(d, d)
        self.decoder = nn.ModuleList(DecoderLayer(d, cfg.heads, cfg.ffn_dim) for _ in range(cfg.decoder_layers))
        self.out_norm = nn.LayerNorm(d)
        self.pointer_q = nn.Linear(d, d)
        self.pointer_k = nn.Linear(d, d)
        self.pointer_text = nn.Linear(d, d)
        self.pointer_hist = nn.Linear(d, d)
        self.pointer_film = nn.Linear(d, 2 * d)
        self.pointer_out = nn.Linear(d, 1)
        self.cell_head = nn.Sequential(nn.Conv2d(d, d, 3, padding=1), nn.GELU(), nn.Conv2d(d, 4, 1))
        self.box_head = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, 4))
        self.conf_head = nn.Linear(d, 1)
        self.register_buffer("time_pe", sinusoid_table(cfg.max_sampled_frames, d), persistent=False)
        self.register_buffer("text_pe", sinusoid_table(cfg.max_text_len, d), persistent=False)
        space_pe, centers = grid_tables(cfg.grid, d)
        self.register_buffer("space_pe", space_pe, persistent=False)
        self.register_buffer("centers", centers, persistent=False)
        self.token_index = {tok: i for i, tok in enumerate(cfg.vocab)}

    def _localize(self, attn: torch.Tensor, radius: int) -> torch.Tensor:
        """Keep only the cells within ``radius`` (Chebyshev, in cells) of the attention peak."""
        g = self.cfg.grid
        peak = attn.argmax(dim=-1)
        py, px = peak // g, peak % g
        cy = torch.arange(g, device=attn.device).repeat_interleave(g)
        cx = torch.arange(g, device=attn.device).repeat(g)
        near = ((cy - py[..., None]).abs() <= radius) & ((cx - px[..., None]).abs() <= radius)
        local = attn * near
        return local / local.sum(-1, keepdim=True)

    def encode_text(self, texts: list[str]) -> tuple[torch.Tensor, torch.Tensor]:
        ids = [[self.token_index.get(t, 1) for t in tokenize(s)][: self.cfg.max_text_len] or [1] for s in texts]
        n = max(len(i) for i in ids)
        tokens = torch.zeros(len(ids), n, dtype=torch.long)
        for row, seq in enumerate(ids):
            tokens[row, : len(seq)] = torch.tensor(seq)
        return tokens, tokens == 0

    def forward(self, frames: torch.Tensor, frame_pad: torch.Tensor, tokens: torch.Tensor, text_pad: torch.Tensor):
        """frames (B, T, H, W, 3); frame_pad (B, T) True on padding; tokens/text_pad (B, L).

        Returns normalized boxes (B, T, 4) as (cx, cy, w, h), confidence logits
        (B, T) and the pointer attention over spatial cells (B, T, S).
        """
        b, t = frames.shape[:2]
        d = self.cfg.d_model
        if t > self.cfg.max_sampled_frames:
            raise ValueError(f"{t} sampled frames exceed the capacity of {self.cfg.max_sampled_frames}")
        spatial = self.visual(frames.reshape(b * t, *frames.shape[2:]))
        g = self.cfg.grid
        cell = self.cell_head(spatial.transpose(1, 2).reshape(b * t, d, g, g)).flatten(2).transpose(1, 2)
        cell_boxes = torch.cat(
            [torch.sigmoid(torch.logit(self.centers) + cell[..., :2]), torch.sigmoid(cell[..., 2:] - 1.5)], dim=-1
        ).view(b, t, -1, 4)
        frame_tok = spatial.mean(dim=1).view(b, t, d) + self.time_pe[:t] + self.modality[1]
        # causal history: mean of the (blurred) cell features over earlier sampled frames
        blurred = F.avg_pool2d(
            spatial.transpose(1, 2).reshape(b * t, d, g, g), 3, stride=1, padding=1, count_include_pad=False
        ).flatten(2).transpose(1, 2).view(b, t, -1, d)
        steps = torch.arange(t, dtype=spatial.dtype).clamp(min=1).view(1, t, 1, 1)
        history = (blurred.cumsum(dim=1) - blurred) / steps
        keys = self.pointer_k(spatial).view(b, t, -1, d) + self.pointer_hist(history)
        spatial = (spatial + self.space_pe).view(b, t, -1, d)

        embedded = self.token_embed(tokens)
        keep = (~text_pad).to(embedded.dtype)[..., None]
        bag_of_words = (embedded * keep).sum(1) / keep.sum(1)
        text = embedded + self.text_pe[: tokens.shape[1]]
        for layer in self.text_layers:
            text = layer(text, text_pad)
        text = text + self.modality[0]

        memory = torch.cat([text, frame_tok], dim=1)
        memory_pad = torch.cat([text_pad, frame_pad], dim=1)
        for layer in self.encoder:
            memory = layer(memory, memory_pad)

        x = self.query_proj(memory[:, tokens.shape[1] :]) + self.time_pe[:t]
        for layer in self.decoder:
            x = layer(x, memory, memory_pad, spatial, frame_pad)
        x = self.out_norm(x)

        # text- and query-conditioned FiLM over the frame's cells, then a scalar score per cell
        q = self.pointer_q(x) + self.pointer_text(bag_of_words)[:, None]
        gamma, beta = self.pointer_film(q)[:, :, None, :].chunk(2, dim=-1)
        scores = self.pointer_out(F.gelu(keys * (1 + gamma) + beta)).squeeze(-1)
        attn = torch.softmax(scores, dim=-1)
        if self.cfg.local_radius is not None and (self.cfg.local_in_training or not self.training):
            attn = self._localize(attn, self.cfg.local_radius)
        # pointer-weighted mixture of per-cell boxes, refined by the query
        mixed = (attn[..., None] * cell_boxes).sum(-2)
        boxes = torch.sigmoid(torch.logit(mixed) + self.box_head(x))
        return boxes, self.conf_head(x).squeeze(-1), attn


def init_model(cfg: GrounderConfig, seed: int) -> GroundingModel:
    """Seeded random initialization (PyTorch's uniform fan-in defaults)."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = GroundingModel(cfg)
        nn.init.normal_(model.token_embed.weight, std=0.5)
        nn.init.zeros_(model.box_head[-1].weight)
        nn.init.zeros_(model.box_head[-1].bias)
        nn.init.normal_(model.pointer_out.weight, std=0.5)
        nn.init.zeros_(model.pointer_q.weight)
    return model
